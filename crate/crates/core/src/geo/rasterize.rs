//! Burning vector features into class-label masks.
//!
//! Coverage uses pixel-center sampling with the even-odd rule: pixel
//! `(col, row)` is painted when its center `(col + 0.5, row + 0.5)` lies
//! inside the polygon, counting exterior ring and holes together. Ties on
//! ring edges resolve half-open (left/top edge in, right/bottom edge out),
//! which keeps adjacent polygons from double-painting shared borders.

use super::{FeatureCollection, GeoError, GeoTransform, MaskRaster};

/// Result of [`rasterize_features`]: the painted mask plus the number of
/// features skipped as degenerate or unclassified.
#[derive(Debug, Clone)]
pub struct RasterizeOutcome {
    pub mask: MaskRaster,
    pub skipped: usize,
}

/// Standard annotation rule for OSM-style tags: features tagged
/// `"disaster": "damaged_area"` are class 2, other `"building": "yes"`
/// features are class 1, anything else is background.
pub fn damage_class_rule(properties: &std::collections::BTreeMap<String, String>) -> u8 {
    if properties.get("disaster").map(String::as_str) == Some("damaged_area") {
        2
    } else if properties.get("building").map(String::as_str) == Some("yes") {
        1
    } else {
        0
    }
}

/// Rasterizes polygon features into a `{0, 1, 2}` mask of the given size.
///
/// `class_rule` maps each feature's properties to a class code: 1 paints
/// intact, 2 paints damaged, anything else skips the feature (counted in
/// [`RasterizeOutcome::skipped`], as are polygons with fewer than three
/// distinct vertices). Where features of both classes overlap a pixel,
/// damaged wins: all class-1 features are painted first, then all class-2
/// features.
pub fn rasterize_features<F>(
    collection: &FeatureCollection,
    gt: &GeoTransform,
    height: usize,
    width: usize,
    class_rule: F,
) -> Result<RasterizeOutcome, GeoError>
where
    F: Fn(&std::collections::BTreeMap<String, String>) -> u8,
{
    // Probe invertibility once up front so a degenerate transform fails
    // loudly instead of skipping every feature.
    gt.invert(gt.x_origin, gt.y_origin)?;

    let mut mask = MaskRaster::zeros(height, width);
    let mut skipped = 0usize;

    let mut classed: Vec<(u8, usize)> = Vec::with_capacity(collection.len());
    for (i, feature) in collection.features.iter().enumerate() {
        let class = class_rule(&feature.properties);
        if class == 1 || class == 2 {
            classed.push((class, i));
        } else {
            skipped += 1;
        }
    }

    // Paint class 1 first so class 2 takes precedence on overlap.
    for paint_class in [1u8, 2u8] {
        for &(class, i) in classed.iter().filter(|&&(c, _)| c == paint_class) {
            let feature = &collection.features[i];
            if feature.polygon.is_degenerate() {
                skipped += 1;
                continue;
            }
            let mut rings_px: Vec<Vec<(f64, f64)>> = Vec::new();
            for ring in feature.polygon.rings() {
                let px = ring
                    .iter()
                    .map(|&(x, y)| gt.invert(x, y))
                    .collect::<Result<Vec<_>, _>>()?;
                rings_px.push(px);
            }
            fill_rings_px(&rings_px, height, width, |col, row| {
                mask.set(col, row, class);
            });
        }
    }

    Ok(RasterizeOutcome { mask, skipped })
}

/// Scanline even-odd fill over a set of rings in pixel coordinates.
///
/// Calls `paint(col, row)` for every pixel whose center is inside. Edges
/// crossing a scanline are counted half-open in `y` (an edge covers
/// `[min_y, max_y)`), and spans are half-open in `x`, which together
/// reproduce the classic strictly-rightward ray-cast point test exactly.
pub(crate) fn fill_rings_px<F>(
    rings: &[Vec<(f64, f64)>],
    height: usize,
    width: usize,
    mut paint: F,
) where
    F: FnMut(usize, usize),
{
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for ring in rings {
        for &(_, y) in ring {
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !min_y.is_finite() || !max_y.is_finite() {
        return;
    }

    // Rows whose center y = row + 0.5 lies in [min_y, max_y].
    let row_lo = (min_y - 0.5).ceil().max(0.0) as i64;
    let row_hi = (max_y - 0.5).floor().min(height as f64 - 1.0) as i64;
    if row_lo > row_hi {
        return;
    }

    let mut crossings: Vec<f64> = Vec::new();
    for row in row_lo..=row_hi {
        let yc = row as f64 + 0.5;
        crossings.clear();
        for ring in rings {
            for edge in ring.windows(2) {
                let (x1, y1) = edge[0];
                let (x2, y2) = edge[1];
                if y1 == y2 {
                    continue;
                }
                let (ylo, yhi) = if y1 < y2 { (y1, y2) } else { (y2, y1) };
                if yc >= ylo && yc < yhi {
                    crossings.push(x1 + (yc - y1) / (y2 - y1) * (x2 - x1));
                }
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
        for pair in crossings.chunks_exact(2) {
            // Centers x = col + 0.5 in [pair[0], pair[1]).
            let col_lo = (pair[0] - 0.5).ceil().max(0.0) as i64;
            let col_hi = ((pair[1] - 0.5).ceil() as i64).min(width as i64);
            for col in col_lo..col_hi {
                paint(col as usize, row as usize);
            }
        }
    }
}
