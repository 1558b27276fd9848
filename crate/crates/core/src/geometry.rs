//! Planar polygon primitives shared by the scenario generator and the rasterizer.

use serde::{Deserialize, Serialize};

/// Closed polygon in world meters; the closing edge back to the first vertex
/// is implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon(pub Vec<[f64; 2]>);

impl Polygon {
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.0
    }

    pub fn is_degenerate(&self) -> bool {
        self.0.len() < 3
    }

    /// Rectangle centered at `center`, rotated by `heading`, with half extents
    /// `half[0]` along the heading and `half[1]` across it.
    pub fn oriented_rect(center: [f64; 2], heading: f64, half: [f64; 2]) -> Polygon {
        let (s, c) = heading.sin_cos();
        let corners = [
            [half[0], half[1]],
            [-half[0], half[1]],
            [-half[0], -half[1]],
            [half[0], -half[1]],
        ];
        Polygon(
            corners
                .iter()
                .map(|[u, v]| [center[0] + c * u - s * v, center[1] + s * u + c * v])
                .collect(),
        )
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon {
        Polygon(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    }

    pub fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.0.len();
        (0..n).map(move |i| (self.0[i], self.0[(i + 1) % n]))
    }

    /// Absolute shoelace area.
    pub fn area(&self) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        let twice: f64 = self
            .edges()
            .map(|(a, b)| a[0] * b[1] - b[0] * a[1])
            .sum();
        twice.abs() / 2.0
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Polygon {
        Polygon(self.0.iter().map(|p| f(*p)).collect())
    }

    /// Even-odd ray casting; points on the boundary count as inside.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        if self.is_degenerate() {
            return false;
        }
        let mut inside = false;
        for (a, b) in self.edges() {
            if on_segment(p, a, b) {
                return true;
            }
            if (a[1] > p[1]) != (b[1] > p[1]) {
                let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
                if p[0] < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Non-adjacent edges do not intersect and no edge has zero length.
    pub fn is_simple(&self) -> bool {
        let n = self.0.len();
        if n < 3 {
            return false;
        }
        let edges: Vec<_> = self.edges().collect();
        if edges.iter().any(|(a, b)| a == b) {
            return false;
        }
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                if segments_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return false;
                }
            }
        }
        true
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.0 {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    cross(a, b, p) == 0.0
        && p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

/// Counter-clockwise rotation of `p` about the world origin.
pub fn rotate(p: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}
