//! Evaluation: absolute trajectory error, object found/correct rates,
//! place position error, and the per-iteration metrics CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::frontend::{BandwidthLedger, Channel};
use crate::graph::{Layer, RobotId, SceneGraph};
use crate::se3::Pose;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no matching timestamps between trajectories")]
    EmptyOverlap,
}

/// A timestamped trajectory.
pub type Trajectory = Vec<(f64, Pose)>;

fn associate<'a>(est: &'a Trajectory, gt: &'a Trajectory) -> Vec<(&'a Pose, &'a Pose)> {
    let gt_map: BTreeMap<u64, &Pose> = gt.iter().map(|(t, p)| (t.to_bits(), p)).collect();
    est.iter()
        .filter_map(|(t, p)| gt_map.get(&t.to_bits()).map(|g| (p, *g)))
        .collect()
}

/// Translational RMSE between timestamp-matched poses. No alignment is
/// applied here; callers map both trajectories into the evaluation frame
/// first.
pub fn evaluate_ate(est: &Trajectory, gt: &Trajectory) -> Result<f64, MetricsError> {
    let pairs = associate(est, gt);
    if pairs.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    let sum_sq: f64 = pairs
        .iter()
        .map(|(e, g)| (e.translation() - g.translation()).norm_squared())
        .sum();
    Ok((sum_sq / pairs.len() as f64).sqrt())
}

/// Rigid transform (no scale) mapping `src` points onto `dst` in the
/// least-squares sense.
pub fn rigid_fit(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    assert_eq!(src.len(), dst.len());
    if src.len() < 3 {
        return Pose::identity();
    }
    let n = src.len() as f64;
    let c_src = src.iter().sum::<Vector3<f64>>() / n;
    let c_dst = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst.iter()) {
        h += (d - c_dst) * (s - c_src).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = u * flip * v_t;
    }
    let rot = nalgebra::UnitQuaternion::from_matrix(&r);
    Pose::new(rot, c_dst - rot * c_src)
}

/// Multi-robot ATE in the evaluation frame: one rigid alignment fitted on
/// the root robot only (lowest id present in both maps), applied to every
/// estimated trajectory, then per-robot RMSE. Inter-robot frame errors
/// stay visible this way.
/// The evaluation-frame transform: a single rigid fit on the root robot's
/// matched keyframe poses, mapping estimates onto ground truth. Fitting on
/// full poses (chordal-mean rotation, then least-squares translation) stays
/// well-posed even for straight-line trajectories, where a position-only
/// fit leaves a rotation about the path undetermined.
pub fn root_alignment(
    est: &BTreeMap<RobotId, Trajectory>,
    gt: &BTreeMap<RobotId, Trajectory>,
) -> Result<Pose, MetricsError> {
    let root = est
        .keys()
        .filter(|r| gt.contains_key(r))
        .min()
        .copied()
        .ok_or(MetricsError::EmptyOverlap)?;
    let root_pairs = associate(&est[&root], &gt[&root]);
    if root_pairs.is_empty() {
        return Err(MetricsError::EmptyOverlap);
    }
    let mut rot_sum = Matrix3::zeros();
    for (e, g) in &root_pairs {
        rot_sum += g.rotation_matrix() * e.rotation_matrix().transpose();
    }
    let rot = project_rotation(&rot_sum);
    let n = root_pairs.len() as f64;
    let t = root_pairs
        .iter()
        .map(|(e, g)| g.translation() - rot * e.translation())
        .sum::<Vector3<f64>>()
        / n;
    Ok(Pose::new(nalgebra::UnitQuaternion::from_matrix(&rot), t))
}

/// Nearest rotation matrix in the Frobenius sense.
fn project_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = u * flip * v_t;
    }
    r
}

pub fn multi_robot_ate(
    est: &BTreeMap<RobotId, Trajectory>,
    gt: &BTreeMap<RobotId, Trajectory>,
) -> Result<BTreeMap<RobotId, f64>, MetricsError> {
    let s = root_alignment(est, gt)?;

    let mut out = BTreeMap::new();
    for (robot, traj) in est {
        let Some(gt_traj) = gt.get(robot) else {
            continue;
        };
        let aligned: Trajectory = traj.iter().map(|(t, p)| (*t, s * *p)).collect();
        out.insert(*robot, evaluate_ate(&aligned, gt_traj)?);
    }
    Ok(out)
}

/// Agent trajectories per robot read straight off a scene graph.
pub fn graph_trajectories(g: &SceneGraph) -> BTreeMap<RobotId, Trajectory> {
    let mut out: BTreeMap<RobotId, Trajectory> = BTreeMap::new();
    for (id, payload) in g.nodes_in_layer(Layer::Agent) {
        let agent = payload.as_agent().unwrap();
        out.entry(id.robot)
            .or_default()
            .push((agent.timestamp, agent.pose));
    }
    out
}

/// A ground-truth object: label plus world-frame centroid.
#[derive(Clone, Debug)]
pub struct GtObject {
    pub label: u32,
    pub centroid: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectMetrics {
    /// Percentage of ground-truth objects with a same-label estimated node
    /// within the threshold.
    pub found_pct: f64,
    /// Percentage of estimated objects with a same-label ground-truth
    /// object within the threshold.
    pub correct_pct: f64,
    /// False when a side was empty and the percentage is reported as 0 by
    /// convention.
    pub found_defined: bool,
    pub correct_defined: bool,
    pub estimated_count: usize,
    pub gt_count: usize,
}

/// Found/correct rates under a distance threshold, matching by semantic
/// label and centroid distance.
pub fn evaluate_objects(
    est: &SceneGraph,
    gt: &[GtObject],
    threshold: f64,
) -> ObjectMetrics {
    let est_objects: Vec<(u32, Vector3<f64>)> = est
        .nodes_in_layer(Layer::Object)
        .map(|(_, p)| {
            let o = p.as_object().unwrap();
            (o.semantic_label, o.centroid)
        })
        .collect();

    let near = |label: u32, pos: &Vector3<f64>, pool: &[(u32, Vector3<f64>)]| {
        pool.iter()
            .any(|(l, c)| *l == label && (c - pos).norm() <= threshold)
    };
    let gt_pool: Vec<(u32, Vector3<f64>)> = gt.iter().map(|o| (o.label, o.centroid)).collect();

    let correct = est_objects
        .iter()
        .filter(|(l, c)| near(*l, c, &gt_pool))
        .count();
    let found = gt_pool
        .iter()
        .filter(|(l, c)| near(*l, c, &est_objects))
        .count();

    ObjectMetrics {
        found_pct: if gt.is_empty() {
            0.0
        } else {
            100.0 * found as f64 / gt.len() as f64
        },
        correct_pct: if est_objects.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / est_objects.len() as f64
        },
        found_defined: !gt.is_empty(),
        correct_defined: !est_objects.is_empty(),
        estimated_count: est_objects.len(),
        gt_count: gt.len(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlaceMetrics {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
}

/// Distance from each estimated place to the nearest ground-truth place
/// position.
pub fn evaluate_places(est: &SceneGraph, gt_places: &[Vector3<f64>]) -> PlaceMetrics {
    let mut dists: Vec<f64> = est
        .nodes_in_layer(Layer::Place)
        .filter_map(|(_, p)| {
            let pos = p.as_place().unwrap().position;
            gt_places
                .iter()
                .map(|g| (g - pos).norm())
                .min_by(|a, b| a.partial_cmp(b).unwrap())
        })
        .collect();
    if dists.is_empty() {
        return PlaceMetrics::default();
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let median = dists[dists.len() / 2];
    PlaceMetrics {
        mean,
        median,
        max: *dists.last().unwrap(),
        count: dists.len(),
    }
}

/// One row of the per-iteration metrics report. Stage timings are kept out
/// of the CSV so identical seeds produce identical files; they go to the
/// separate timings output.
#[derive(Clone, Debug, Default)]
pub struct MetricsRow {
    pub iteration: u64,
    pub robots_initialized: usize,
    pub ate: BTreeMap<RobotId, f64>,
    pub objects: ObjectMetrics,
    pub places: PlaceMetrics,
    pub merges_proposed: usize,
    pub merges_valid: usize,
    pub merges_applied: usize,
    pub merges_undone: usize,
    pub frame_error_trans_max: f64,
    pub frame_error_rot_max: f64,
    pub bandwidth_graph: u64,
    pub bandwidth_mesh: u64,
    pub bandwidth_aux: u64,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Wall-clock seconds per stage, excluded from the CSV.
    pub stage_seconds: BTreeMap<&'static str, f64>,
}

impl MetricsRow {
    pub fn record_bandwidth(&mut self, ledger: &BandwidthLedger) {
        self.bandwidth_graph = ledger.channel_total(Channel::Graph);
        self.bandwidth_mesh = ledger.channel_total(Channel::MeshControl);
        self.bandwidth_aux = ledger.channel_total(Channel::LoopClosureAux);
    }
}

/// Renders the metrics CSV (schema versioned in the leading comment line).
pub fn metrics_csv(rows: &[MetricsRow], robots: &[RobotId]) -> String {
    let mut out = String::from("# sgfuse metrics schema v1\n");
    out.push_str("iteration,robots_initialized");
    for r in robots {
        let _ = write!(out, ",ate_r{r}");
    }
    out.push_str(
        ",found_pct,correct_pct,place_err_mean,place_err_median,place_err_max,\
         merges_proposed,merges_valid,merges_applied,merges_undone,\
         frame_err_trans_max,frame_err_rot_max,\
         bandwidth_graph,bandwidth_mesh,bandwidth_aux,objective_before,objective_after\n",
    );
    for row in rows {
        let _ = write!(out, "{},{}", row.iteration, row.robots_initialized);
        for r in robots {
            match row.ate.get(r) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push_str(",nan"),
            }
        }
        let _ = write!(
            out,
            ",{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.objects.found_pct,
            row.objects.correct_pct,
            row.places.mean,
            row.places.median,
            row.places.max,
            row.merges_proposed,
            row.merges_valid,
            row.merges_applied,
            row.merges_undone,
            row.frame_error_trans_max,
            row.frame_error_rot_max,
            row.bandwidth_graph,
            row.bandwidth_mesh,
            row.bandwidth_aux,
            row.objective_before,
            row.objective_after,
        );
    }
    out
}

/// Renders the stage timing CSV (not deterministic, kept separate).
pub fn timings_csv(rows: &[MetricsRow]) -> String {
    let mut stages: Vec<&'static str> = rows
        .iter()
        .flat_map(|r| r.stage_seconds.keys().copied())
        .collect();
    stages.sort_unstable();
    stages.dedup();
    let mut out = String::from("# sgfuse timings schema v1\niteration");
    for s in &stages {
        let _ = write!(out, ",{s}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{}", row.iteration);
        for s in &stages {
            let _ = write!(out, ",{}", row.stage_seconds.get(s).copied().unwrap_or(0.0));
        }
        out.push('\n');
    }
    out
}
