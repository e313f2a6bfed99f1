//! Integer co-registration by normalized cross-correlation.

use super::{BandRaster, GeoError};

/// Estimates the integer pixel shift `(dx, dy)` that best aligns `b` to `a`,
/// in the sense that `b(x, y) ≈ a(x - dx, y - dy)`, by exhaustive
/// normalized-cross-correlation search over `|dx|, |dy| <= search_radius`.
///
/// Returns `(dx, dy, score)` with the correlation score in `[-1, 1]`. Ties
/// prefer the smallest `|dx| + |dy|`, then smaller `dy`, then smaller `dx`.
/// Candidates whose overlap has (near-)zero variance in either image are
/// skipped; if every candidate is degenerate the image is flat and the
/// shift is undefined.
pub fn estimate_shift(
    a: &BandRaster,
    b: &BandRaster,
    search_radius: i64,
) -> Result<(i64, i64, f64), GeoError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(GeoError::SizeMismatch {
            a_height: a.height(),
            a_width: a.width(),
            b_height: b.height(),
            b_width: b.width(),
        });
    }
    if search_radius < 1 {
        return Err(GeoError::InvalidArgument(format!(
            "search_radius must be >= 1, got {search_radius}"
        )));
    }
    let (h, w) = (a.height() as i64, b.width() as i64);
    if h <= search_radius || w <= search_radius {
        return Err(GeoError::InvalidArgument(format!(
            "search_radius {search_radius} leaves no overlap for a {h}x{w} raster"
        )));
    }

    let mut best: Option<(f64, i64, i64)> = None;
    for dy in -search_radius..=search_radius {
        for dx in -search_radius..=search_radius {
            let Some(score) = ncc_at(a, b, dx, dy) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((bs, bdx, bdy)) => {
                    let key = (score, -(dx.abs() + dy.abs()), -dy, -dx);
                    let best_key = (bs, -(bdx.abs() + bdy.abs()), -bdy, -bdx);
                    key > best_key
                }
            };
            if better {
                best = Some((score, dx, dy));
            }
        }
    }

    match best {
        Some((score, dx, dy)) => Ok((dx, dy, score)),
        None => Err(GeoError::FlatImage),
    }
}

/// NCC of `b(x, y)` against `a(x - dx, y - dy)` over their overlap, or
/// `None` when the overlap is too small or either side has no variance.
fn ncc_at(a: &BandRaster, b: &BandRaster, dx: i64, dy: i64) -> Option<f64> {
    let (h, w) = (a.height() as i64, a.width() as i64);
    let x0 = dx.max(0);
    let x1 = (w + dx).min(w);
    let y0 = dy.max(0);
    let y1 = (h + dy).min(h);
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    if n < 2.0 {
        return None;
    }

    let mut sum_a = 0.0f64;
    let mut sum_b = 0.0f64;
    let mut sum_aa = 0.0f64;
    let mut sum_bb = 0.0f64;
    let mut sum_ab = 0.0f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let va = a.get((x - dx) as usize, (y - dy) as usize) as f64;
            let vb = b.get(x as usize, y as usize) as f64;
            sum_a += va;
            sum_b += vb;
            sum_aa += va * va;
            sum_bb += vb * vb;
            sum_ab += va * vb;
        }
    }
    let var_a = sum_aa - sum_a * sum_a / n;
    let var_b = sum_bb - sum_b * sum_b / n;
    let denom = var_a * var_b;
    // Guard against zero and against catastrophic-cancellation negatives.
    if denom <= 1e-12 {
        return None;
    }
    Some((sum_ab - sum_a * sum_b / n) / denom.sqrt())
}
