//! Turning class masks back into polygons.
//!
//! Foreground pixels are grouped 8-connected (so blobs touching only at a
//! corner form one instance), while background enclosed by foreground is
//! grouped 4-connected (so holes meeting a blob's pinch point stay
//! separate). Boundaries are traced as directed pixel-edge cycles with the
//! foreground kept on the left-hand side; at a pinch vertex, where two
//! boundary continuations exist, the walk takes the right turn, which is
//! exactly the choice that realizes the 8/4 connectivity convention.
//!
//! Ring vertices are pixel *corners* (integer pixel coordinates), so a
//! polygonized mask re-rasterizes to the original mask exactly: every pixel
//! center sits strictly inside or strictly outside every traced ring.

use std::collections::BTreeMap;
use std::collections::HashMap;

use super::{Feature, FeatureCollection, GeoTransform, MaskRaster, Polygon};

/// One 8-connected foreground component with its traced boundary, in pixel
/// coordinates. `exterior` and `holes` are closed rings over pixel corners.
pub(crate) struct TracedComponent {
    /// Member pixels as `(row, col)`, in row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub exterior: Vec<(i64, i64)>,
    pub holes: Vec<Vec<(i64, i64)>>,
}

/// Vectorizes every connected component of `class` pixels into a polygon
/// feature (exterior ring plus holes), ordered by first appearance in
/// row-major scan order. Each feature carries a `"class"` property with the
/// class code.
///
/// For north-up transforms (negative `y_pixel_size`) exterior rings come out
/// counter-clockwise in world coordinates and holes clockwise.
pub fn polygonize_mask(mask: &MaskRaster, gt: &GeoTransform, class: u8) -> FeatureCollection {
    let comps = trace_components(mask.height(), mask.width(), |row, col| {
        mask.get(col, row) == class
    });
    let features = comps
        .into_iter()
        .map(|comp| {
            let exterior = ring_to_world(&comp.exterior, gt);
            let holes = comp.holes.iter().map(|h| ring_to_world(h, gt)).collect();
            let mut properties = BTreeMap::new();
            properties.insert("class".to_string(), class.to_string());
            Feature {
                polygon: Polygon::new(exterior, holes),
                properties,
            }
        })
        .collect();
    FeatureCollection::new(features)
}

fn ring_to_world(ring: &[(i64, i64)], gt: &GeoTransform) -> Vec<(f64, f64)> {
    ring.iter().map(|&(x, y)| gt.apply(x as f64, y as f64)).collect()
}

/// Labels 8-connected components of `is_fg` pixels and traces each one's
/// boundary rings. Components are returned in first-encounter (row-major)
/// order.
pub(crate) fn trace_components<F>(height: usize, width: usize, is_fg: F) -> Vec<TracedComponent>
where
    F: Fn(usize, usize) -> bool,
{
    if height == 0 || width == 0 {
        return Vec::new();
    }

    // --- label 8-connected components ---
    let mut labels = vec![0u32; height * width];
    let mut n_components = 0u32;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for row in 0..height {
        for col in 0..width {
            if labels[row * width + col] != 0 || !is_fg(row, col) {
                continue;
            }
            n_components += 1;
            labels[row * width + col] = n_components;
            stack.push((row, col));
            while let Some((r, c)) = stack.pop() {
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if nr < 0 || nc < 0 || nr >= height as i64 || nc >= width as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if labels[nr * width + nc] == 0 && is_fg(nr, nc) {
                            labels[nr * width + nc] = n_components;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
        }
    }

    // --- collect member pixels and directed boundary edges per component ---
    let mut comps: Vec<CompBuilder> = (0..n_components).map(|_| CompBuilder::default()).collect();
    for row in 0..height {
        for col in 0..width {
            let label = labels[row * width + col];
            if label == 0 {
                continue;
            }
            let comp = &mut comps[label as usize - 1];
            comp.pixels.push((row, col));
            let same = |r: i64, c: i64| {
                r >= 0
                    && c >= 0
                    && r < height as i64
                    && c < width as i64
                    && labels[r as usize * width + c as usize] == label
            };
            let (r, c) = (row as i64, col as i64);
            // Directed so the foreground stays on the walker's left.
            if !same(r - 1, c) {
                comp.push_edge((c + 1, r), (c, r)); // north side, walked west
            }
            if !same(r + 1, c) {
                comp.push_edge((c, r + 1), (c + 1, r + 1)); // south side, walked east
            }
            if !same(r, c - 1) {
                comp.push_edge((c, r), (c, r + 1)); // west side, walked south
            }
            if !same(r, c + 1) {
                comp.push_edge((c + 1, r + 1), (c + 1, r)); // east side, walked north
            }
        }
    }

    comps.into_iter().map(CompBuilder::into_traced).collect()
}

#[derive(Default)]
struct CompBuilder {
    pixels: Vec<(usize, usize)>,
    edges: Vec<((i64, i64), (i64, i64))>,
    by_start: HashMap<(i64, i64), Vec<u32>>,
}

impl CompBuilder {
    fn push_edge(&mut self, start: (i64, i64), end: (i64, i64)) {
        self.by_start
            .entry(start)
            .or_default()
            .push(self.edges.len() as u32);
        self.edges.push((start, end));
    }

    fn into_traced(self) -> TracedComponent {
        let CompBuilder {
            pixels,
            edges,
            by_start,
        } = self;
        let mut visited = vec![false; edges.len()];
        let mut exterior: Option<Vec<(i64, i64)>> = None;
        let mut holes: Vec<Vec<(i64, i64)>> = Vec::new();

        for first in 0..edges.len() {
            if visited[first] {
                continue;
            }
            let mut raw: Vec<(i64, i64)> = Vec::new();
            let mut cur = first;
            loop {
                visited[cur] = true;
                raw.push(edges[cur].0);
                let next = successor(&edges, &by_start, cur);
                if next == first {
                    break;
                }
                debug_assert!(!visited[next], "boundary walk revisited an edge mid-ring");
                cur = next;
            }
            let ring = simplify_ring(raw);
            // Exterior rings keep foreground below-left while circling it,
            // which makes their shoelace sum negative in y-down pixel
            // coordinates; holes come out positive.
            if shoelace_doubled(&ring) < 0 {
                debug_assert!(exterior.is_none(), "component traced two exterior rings");
                exterior = Some(ring);
            } else {
                holes.push(ring);
            }
        }

        TracedComponent {
            pixels,
            exterior: exterior.expect("non-empty component has an exterior ring"),
            holes,
        }
    }
}

/// The edge that continues the walk from `cur`: the unique outgoing edge at
/// its endpoint, or, at a pinch vertex with two continuations, the rightmost
/// turn.
fn successor(
    edges: &[((i64, i64), (i64, i64))],
    by_start: &HashMap<(i64, i64), Vec<u32>>,
    cur: usize,
) -> usize {
    let (start, end) = edges[cur];
    let dir = (end.0 - start.0, end.1 - start.1);
    let candidates = &by_start[&end];
    if candidates.len() == 1 {
        return candidates[0] as usize;
    }
    // Turn priority in y-down coordinates: right, straight, left.
    let preference = [(-dir.1, dir.0), dir, (dir.1, -dir.0)];
    for want in preference {
        for &i in candidates {
            let (s, e) = edges[i as usize];
            if (e.0 - s.0, e.1 - s.1) == want {
                return i as usize;
            }
        }
    }
    unreachable!("boundary edge has no continuation");
}

/// Drops collinear intermediate vertices and closes the ring.
fn simplify_ring(raw: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    let n = raw.len();
    let mut ring: Vec<(i64, i64)> = Vec::new();
    for i in 0..n {
        let prev = raw[(i + n - 1) % n];
        let here = raw[i];
        let next = raw[(i + 1) % n];
        let d_in = (here.0 - prev.0, here.1 - prev.1);
        let d_out = (next.0 - here.0, next.1 - here.1);
        if d_in != d_out {
            ring.push(here);
        }
    }
    if let Some(&first) = ring.first() {
        ring.push(first);
    }
    ring
}

/// Twice the signed shoelace area; sign only, so integer math is exact.
fn shoelace_doubled(ring: &[(i64, i64)]) -> i64 {
    let mut sum = 0i64;
    for pair in ring.windows(2) {
        let (x1, y1) = pair[0];
        let (x2, y2) = pair[1];
        sum += x1 * y2 - x2 * y1;
    }
    sum
}
