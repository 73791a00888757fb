//! Uniform hash grid over 3-D points with exact radius and nearest-neighbour
//! queries.

use std::collections::HashMap;

use nalgebra::Vector3;

#[derive(Clone, Debug)]
pub struct SpatialHash {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    points: Vec<Vector3<f64>>,
}

impl SpatialHash {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        Self {
            cell,
            cells: HashMap::new(),
            points: Vec::new(),
        }
    }

    pub fn build(cell: f64, points: impl IntoIterator<Item = Vector3<f64>>) -> Self {
        let mut h = Self::new(cell);
        for p in points {
            h.insert(p);
        }
        h
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn key(&self, p: &Vector3<f64>) -> [i64; 3] {
        [
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        ]
    }

    /// Adds a point and returns its index.
    pub fn insert(&mut self, p: Vector3<f64>) -> usize {
        let i = self.points.len();
        self.cells.entry(self.key(&p)).or_default().push(i);
        self.points.push(p);
        i
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    fn for_each_near(&self, p: &Vector3<f64>, radius: f64, mut f: impl FnMut(usize, f64)) {
        let reach = (radius / self.cell).ceil().max(1.0) as i64;
        let c = self.key(p);
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &i in ids {
                            f(i, (self.points[i] - p).norm());
                        }
                    }
                }
            }
        }
    }

    /// Whether any stored point lies strictly closer than `radius`.
    pub fn any_within(&self, p: &Vector3<f64>, radius: f64) -> bool {
        let mut found = false;
        self.for_each_near(p, radius, |_, d| found |= d < radius);
        found
    }

    /// Indices of all points strictly closer than `radius`, ascending.
    pub fn within(&self, p: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_near(p, radius, |i, d| {
            if d < radius {
                out.push(i)
            }
        });
        out.sort_unstable();
        out
    }

    /// Exact nearest point no farther than `max_dist`; ties go to the lower
    /// index.
    pub fn nearest(&self, p: &Vector3<f64>, max_dist: f64) -> Option<(usize, f64)> {
        let reach = (max_dist / self.cell).ceil().max(1.0) as i64;
        let c = self.key(p);
        let mut best: Option<(usize, f64)> = None;
        for ring in 0..=reach {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(ids) = self.cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &i in ids {
                            let d = (self.points[i] - p).norm();
                            if d <= max_dist && best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi)) {
                                best = Some((i, d));
                            }
                        }
                    }
                }
            }
            // Every point in a farther ring is at least `ring · cell` away.
            if best.is_some_and(|(_, bd)| bd < ring as f64 * self.cell) {
                break;
            }
        }
        best
    }
}
