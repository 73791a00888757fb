//! SE(3) pose graph with a dense Levenberg-Marquardt solver.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::LoopError;
use crate::geom::{quat_wxyz, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Relative constraint `measurement ≈ X_from⁻¹ · X_to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    pub nodes: Vec<Pose>,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub poses: Vec<Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            step_tolerance: 1e-12,
            cost_tolerance: 1e-20,
        }
    }
}

impl PoseGraph {
    pub fn new(nodes: Vec<Pose>) -> Self {
        Self { nodes, edges: Vec::new() }
    }

    pub fn add_edge(&mut self, from: usize, to: usize, measurement: Pose, information: Matrix6<f64>, kind: EdgeKind) {
        assert!(from < self.nodes.len() && to < self.nodes.len(), "edge endpoint out of range");
        self.edges.push(Edge {
            from,
            to,
            measurement,
            information,
            kind,
        });
    }

    /// Consecutive odometry edges measured from the current node poses.
    pub fn chain(nodes: Vec<Pose>, information: Matrix6<f64>) -> Self {
        let mut g = Self::new(nodes);
        for i in 1..g.nodes.len() {
            let z = g.nodes[i - 1].inverse().compose(&g.nodes[i]);
            g.add_edge(i - 1, i, z, information, EdgeKind::Odometry);
        }
        g
    }

    pub fn edge_residual(edge: &Edge, poses: &[Pose]) -> Vector6<f64> {
        let rel = poses[edge.from].inverse().compose(&poses[edge.to]);
        edge.measurement.inverse().compose(&rel).log()
    }

    pub fn cost_at(&self, poses: &[Pose]) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = Self::edge_residual(e, poses);
                (r.transpose() * e.information * r)[0]
            })
            .sum()
    }

    pub fn cost(&self) -> f64 {
        self.cost_at(&self.nodes)
    }

    fn connected_to_gauge(&self) -> bool {
        let n = self.nodes.len();
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut changed = true;
        while changed {
            changed = false;
            for e in &self.edges {
                if seen[e.from] != seen[e.to] {
                    seen[e.from] = true;
                    seen[e.to] = true;
                    changed = true;
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Minimizes the weighted squared edge residuals over all nodes except
    /// node 0, which is held fixed.
    pub fn optimize(&self, cfg: &SolverConfig) -> Result<SolveReport, LoopError> {
        let n = self.nodes.len();
        let initial_cost = self.cost();
        if n <= 1 {
            return Ok(SolveReport {
                poses: self.nodes.clone(),
                initial_cost,
                final_cost: initial_cost,
                costs: vec![initial_cost],
                iterations: 0,
            });
        }
        if !self.connected_to_gauge() {
            return Err(LoopError::SingularSystem);
        }
        let dim = 6 * (n - 1);
        let mut poses = self.nodes.clone();
        let mut cost = initial_cost;
        let mut costs = vec![cost];
        let mut lambda = 1e-4;
        let mut iterations = 0;
        for _ in 0..cfg.max_iters {
            iterations += 1;
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut b = DVector::<f64>::zeros(dim);
            for e in &self.edges {
                let r = Self::edge_residual(e, &poses);
                let blocks = [e.from, e.to];
                let jacs: Vec<Option<nalgebra::Matrix6<f64>>> =
                    blocks.iter().map(|&k| (k != 0).then(|| numeric_jacobian(e, &poses, k))).collect();
                for (a, ja) in blocks.iter().zip(&jacs) {
                    let Some(ja) = ja else { continue };
                    let ia = 6 * (a - 1);
                    let g = ja.transpose() * e.information * r;
                    for i in 0..6 {
                        b[ia + i] += g[i];
                    }
                    for (c, jc) in blocks.iter().zip(&jacs) {
                        let Some(jc) = jc else { continue };
                        let ic = 6 * (c - 1);
                        let blk = ja.transpose() * e.information * jc;
                        let mut view = h.view_mut((ia, ic), (6, 6));
                        view += blk;
                    }
                }
            }
            if h.clone().cholesky().is_none() {
                return Err(LoopError::SingularSystem);
            }
            let scale = (h.trace() / dim as f64).max(1e-12);
            let mut accepted = false;
            let mut step_norm = 0.0;
            for _ in 0..30 {
                let mut damped = h.clone();
                for i in 0..dim {
                    damped[(i, i)] += lambda * scale;
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = -chol.solve(&b);
                let mut cand = poses.clone();
                for k in 1..n {
                    let d = Vector6::from_iterator(delta.rows(6 * (k - 1), 6).iter().copied());
                    cand[k] = Pose::exp(&d).compose(&poses[k]);
                }
                let c = self.cost_at(&cand);
                if c < cost {
                    poses = cand;
                    step_norm = delta.norm();
                    let improvement = cost - c;
                    cost = c;
                    costs.push(c);
                    lambda = (lambda * 0.1).max(1e-15);
                    accepted = improvement > cfg.cost_tolerance;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted || step_norm < cfg.step_tolerance {
                break;
            }
        }
        Ok(SolveReport {
            poses,
            initial_cost,
            final_cost: cost,
            costs,
            iterations,
        })
    }

    /// `NODE id tx ty tz qw qx qy qz` and
    /// `EDGE i j tx ty tz qw qx qy qz` followed by the 21 upper-triangular
    /// information entries.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pose_fields = |p: &Pose| {
            let t = p.translation;
            let q = p.rotation;
            format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.w, q.i, q.j, q.k)
        };
        for (i, p) in self.nodes.iter().enumerate() {
            writeln!(s, "NODE {i} {}", pose_fields(p)).expect("string write");
        }
        for e in &self.edges {
            let mut info = Vec::with_capacity(21);
            for r in 0..6 {
                for c in r..6 {
                    info.push(e.information[(r, c)].to_string());
                }
            }
            writeln!(s, "EDGE {} {} {} {}", e.from, e.to, pose_fields(&e.measurement), info.join(" ")).expect("string write");
        }
        s
    }

    /// Parses [`PoseGraph::to_text`] output. Edge kinds are not stored;
    /// edges between consecutive nodes read back as odometry.
    pub fn from_text(text: &str) -> Result<Self, LoopError> {
        let mut g = PoseGraph::default();
        let bad = |l: &str| LoopError::Parse(l.to_string());
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let nums = |from: usize| -> Result<Vec<f64>, LoopError> {
                toks[from..].iter().map(|t| t.parse::<f64>().map_err(|_| bad(line))).collect()
            };
            let pose = |v: &[f64]| Pose::new(quat_wxyz(v[3], v[4], v[5], v[6]), Vector3::new(v[0], v[1], v[2]));
            match toks.first() {
                Some(&"NODE") if toks.len() == 9 => {
                    let id: usize = toks[1].parse().map_err(|_| bad(line))?;
                    if id != g.nodes.len() {
                        return Err(bad(line));
                    }
                    g.nodes.push(pose(&nums(2)?));
                }
                Some(&"EDGE") if toks.len() == 3 + 7 + 21 => {
                    let from: usize = toks[1].parse().map_err(|_| bad(line))?;
                    let to: usize = toks[2].parse().map_err(|_| bad(line))?;
                    let v = nums(3)?;
                    let mut info = Matrix6::zeros();
                    let mut k = 7;
                    for r in 0..6 {
                        for c in r..6 {
                            info[(r, c)] = v[k];
                            info[(c, r)] = v[k];
                            k += 1;
                        }
                    }
                    if from >= g.nodes.len() || to >= g.nodes.len() {
                        return Err(bad(line));
                    }
                    let kind = if to == from + 1 { EdgeKind::Odometry } else { EdgeKind::Loop };
                    g.add_edge(from, to, pose(&v), info, kind);
                }
                _ => return Err(bad(line)),
            }
        }
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<(), LoopError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Central-difference Jacobian of an edge residual with respect to a left
/// perturbation of node `k`.
fn numeric_jacobian(edge: &Edge, poses: &[Pose], k: usize) -> Matrix6<f64> {
    const H: f64 = 1e-6;
    let mut jac = Matrix6::zeros();
    let mut work = poses.to_vec();
    for d in 0..6 {
        let mut delta = Vector6::zeros();
        delta[d] = H;
        work[k] = Pose::exp(&delta).compose(&poses[k]);
        let plus = PoseGraph::edge_residual(edge, &work);
        work[k] = Pose::exp(&-delta).compose(&poses[k]);
        let minus = PoseGraph::edge_residual(edge, &work);
        jac.set_column(d, &((plus - minus) / (2.0 * H)));
    }
    jac
}
