//! Closes a square trajectory whose odometry carries a 2 degree yaw bias.

use nalgebra::{Matrix6, UnitQuaternion, Vector3};
use splatslam::geom::Pose;
use splatslam::loop_graph::{EdgeKind, PoseGraph, SolverConfig};

fn main() -> anyhow::Result<()> {
    let yaw = |a: f64| UnitQuaternion::from_euler_angles(0.0, 0.0, a);
    let corners = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)];
    let truth: Vec<Pose> = corners
        .iter()
        .enumerate()
        .map(|(k, (x, y))| Pose::new(yaw(k as f64 * std::f64::consts::FRAC_PI_2), Vector3::new(*x, *y, 0.0)))
        .collect();

    let mut graph = PoseGraph::new(vec![Pose::identity(); 4]);
    for i in 0..3 {
        let z = truth[i].inverse().compose(&truth[i + 1]);
        graph.add_edge(i, i + 1, z, Matrix6::identity(), EdgeKind::Odometry);
        let biased = Pose::new(yaw(2f64.to_radians()) * z.rotation, z.translation);
        graph.nodes[i + 1] = graph.nodes[i].compose(&biased);
    }
    graph.add_edge(3, 0, truth[3].inverse().compose(&truth[0]), Matrix6::identity() * 10.0, EdgeKind::Loop);

    let before: Vec<f64> = graph.nodes.iter().zip(&truth).map(|(p, t)| p.distance_to(t)).collect();
    let report = graph.optimize(&SolverConfig::default())?;
    println!("cost {:.3e} -> {:.3e} in {} steps", report.initial_cost, report.final_cost, report.costs.len() - 1);
    for (k, (p, t)) in report.poses.iter().zip(&truth).enumerate() {
        println!(
            "node {k}: error before {:.3} m, after {:.2e} m / {:.2e} rad",
            before[k],
            p.distance_to(t),
            p.angle_to(t)
        );
    }
    Ok(())
}
