use serde::{Deserialize, Serialize};

use crate::geometry::{Point, Pose};

/// Closed simple polygon; the last vertex connects back to the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

/// Open polyline, e.g. a lane centerline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polyline {
    pub points: Vec<Point>,
}

/// Crossing abscissa of the horizontal line at `y` with edge `p -> q`, using the
/// half-open rule shared by [`Polygon::contains`] and [`fill_centers`].
#[inline]
fn crossing(p: Point, q: Point, y: f64) -> Option<f64> {
    if (p[1] > y) != (q[1] > y) {
        Some(p[0] + (y - p[1]) * (q[0] - p[0]) / (q[1] - p[1]))
    } else {
        None
    }
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Polygon { vertices }
    }

    pub fn rectangle(min: Point, max: Point) -> Self {
        Polygon::new(vec![min, [max[0], min[1]], max, [min[0], max[1]]])
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Even-odd ray-casting test.
    pub fn contains(&self, p: Point) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if let Some(x) = crossing(a, b, p[1]) {
                if x > p[0] {
                    inside = !inside;
                }
            }
        }
        inside
    }

    pub fn transformed(&self, f: impl Fn(Point) -> Point) -> Polygon {
        Polygon::new(self.vertices.iter().map(|&v| f(v)).collect())
    }

    pub fn to_local(&self, pose: &Pose) -> Polygon {
        self.transformed(|p| pose.to_local(p))
    }

    pub fn bounds(&self) -> (Point, Point) {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for k in 0..2 {
                min[k] = min[k].min(v[k]);
                max[k] = max[k].max(v[k]);
            }
        }
        (min, max)
    }
}

/// Regular lattice of sample centers, rows ordered bottom-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    /// Lower-left corner of the covered extent.
    pub origin: Point,
    pub spacing: f64,
    pub cols: usize,
    pub rows: usize,
}

impl Lattice {
    pub fn center(&self, row: usize, col: usize) -> Point {
        [
            self.origin[0] + (col as f64 + 0.5) * self.spacing,
            self.origin[1] + (row as f64 + 0.5) * self.spacing,
        ]
    }
}

/// Mark every lattice center inside the union of `polygons` (bottom-up, row-major).
///
/// Scanline evaluation of the same crossing rule as [`Polygon::contains`], so the
/// two agree exactly.
pub fn fill_centers(polygons: &[Polygon], lattice: &Lattice) -> Vec<bool> {
    let mut mask = vec![false; lattice.rows * lattice.cols];
    let mut xs = Vec::new();
    for poly in polygons {
        let (lo, hi) = poly.bounds();
        for row in 0..lattice.rows {
            let y = lattice.center(row, 0)[1];
            if y < lo[1] || y > hi[1] {
                continue;
            }
            xs.clear();
            xs.extend(poly.edges().filter_map(|(a, b)| crossing(a, b, y)));
            if xs.is_empty() {
                continue;
            }
            xs.sort_by(f64::total_cmp);
            // center px is inside iff an odd number of crossings lie strictly right of it
            let mut left = 0; // crossings <= px
            for col in 0..lattice.cols {
                let px = lattice.center(row, col)[0];
                while left < xs.len() && xs[left] <= px {
                    left += 1;
                }
                if (xs.len() - left) % 2 == 1 {
                    mask[row * lattice.cols + col] = true;
                }
            }
        }
    }
    mask
}
