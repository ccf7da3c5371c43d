//! Initial frame alignment: per-closure relative-frame samples, robust pose
//! averaging, spanning-tree chaining into the global frame, and the
//! re-alignment trigger.

use std::collections::{BTreeMap, BTreeSet};

use crate::gnc::{solve_gnc, GncConfig, Noise, ResidualKind, RobustProblem};
use crate::graph::{Layer, NodeId, RobotId, SceneGraph};
use crate::se3::{Covariance6, Pose};

/// A relative-pose measurement between two agent nodes, possibly from
/// different robots, possibly spurious.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopClosure {
    pub from: NodeId,
    pub to: NodeId,
    /// Pose of `to`'s agent node expressed in `from`'s agent frame.
    pub measurement: Pose,
    pub covariance: Covariance6,
}

impl LoopClosure {
    pub fn is_intra_robot(&self) -> bool {
        self.from.robot == self.to.robot
    }

    /// Normalized robot pair, lower id first.
    pub fn robot_pair(&self) -> (RobotId, RobotId) {
        let (a, b) = (self.from.robot, self.to.robot);
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignmentConfig {
    /// A robot pair initializes only with at least this many GNC inliers.
    pub k_min_inliers: usize,
    /// Re-align when the initial and optimized relative translations
    /// disagree by more than this (meters).
    pub realign_translation_threshold: f64,
    /// Covariance of the pose-averaging residuals.
    pub sigma: Covariance6,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            k_min_inliers: 5,
            realign_translation_threshold: 10.0,
            sigma: Covariance6::isotropic(1e-4, 2.5e-3).unwrap(),
        }
    }
}

/// Robot-level dependence graph: an edge per robot pair that shares
/// inter-robot loop closures.
#[derive(Clone, Debug, Default)]
pub struct DependenceGraph {
    edges: BTreeMap<(RobotId, RobotId), Vec<LoopClosure>>,
}

impl DependenceGraph {
    pub fn from_closures<'a>(closures: impl IntoIterator<Item = &'a LoopClosure>) -> Self {
        let mut edges: BTreeMap<(RobotId, RobotId), Vec<LoopClosure>> = BTreeMap::new();
        for lc in closures {
            if lc.is_intra_robot() {
                continue;
            }
            edges.entry(lc.robot_pair()).or_default().push(lc.clone());
        }
        DependenceGraph { edges }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(RobotId, RobotId), &Vec<LoopClosure>)> {
        self.edges.iter()
    }

    pub fn robots(&self) -> BTreeSet<RobotId> {
        self.edges
            .keys()
            .flat_map(|(a, b)| [*a, *b])
            .collect()
    }
}

/// One estimated relative frame between a robot pair.
#[derive(Clone, Debug)]
pub struct FrameEstimate {
    pub pair: (RobotId, RobotId),
    /// `X^A_B`: B's frame expressed in A's frame, for `pair = (A, B)`.
    pub estimate: Pose,
    pub inlier_count: usize,
    pub samples_used: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("loop closure `{0}` -- `{1}` is intra-robot; frame samples need an inter-robot closure")]
    IntraRobot(NodeId, NodeId),
    #[error("no samples to average")]
    NoSamples,
    #[error("agent node `{0}` missing from snapshot")]
    MissingAgent(NodeId),
}

/// One noisy sample of B's reference frame in A's, from one inter-robot
/// closure: `pose_a * measurement * pose_b⁻¹` where the poses are the
/// odometric estimates of the two agent nodes in their local frames.
pub fn frame_sample(lc: &LoopClosure, pose_a: &Pose, pose_b: &Pose) -> Result<Pose, AlignError> {
    if lc.is_intra_robot() {
        return Err(AlignError::IntraRobot(lc.from, lc.to));
    }
    Ok(*pose_a * lc.measurement * pose_b.inverse())
}

/// Chordal distance used for the medoid initial guess.
fn chordal_sq(a: &Pose, b: &Pose) -> f64 {
    let dr = a.rotation_matrix() - b.rotation_matrix();
    let dt = a.translation() - b.translation();
    dr.norm_squared() + dt.norm_squared()
}

/// Index of the sample with minimal summed chordal distance to the others.
fn medoid(samples: &[Pose]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, s) in samples.iter().enumerate() {
        let sum: f64 = samples.iter().map(|t| chordal_sq(s, t)).sum();
        if sum < best.0 {
            best = (sum, i);
        }
    }
    best.1
}

/// Robust pose averaging over frame samples: one pose unknown, one robust
/// residual per sample, solved with GNC. Zero-inlier outcomes are returned
/// with `inlier_count = 0`, not as errors.
pub fn robust_pose_average(
    pair: (RobotId, RobotId),
    samples: &[Pose],
    cfg: &AlignmentConfig,
    gnc: &GncConfig,
) -> Result<FrameEstimate, AlignError> {
    if samples.is_empty() {
        return Err(AlignError::NoSamples);
    }
    let mut problem = RobustProblem::new();
    let var = problem.add_pose_variable(samples[medoid(samples)]);
    for s in samples {
        problem.add_residual(
            ResidualKind::PosePrior {
                var,
                measurement: *s,
            },
            Noise::Pose(cfg.sigma.clone()),
            true,
        );
    }
    let result = solve_gnc(&problem, gnc).expect("pose averaging problem is well-formed");
    Ok(FrameEstimate {
        pair,
        estimate: *result.values[var].as_pose().unwrap(),
        inlier_count: result.inlier_mask.iter().filter(|m| **m).count(),
        samples_used: samples.len(),
    })
}

/// Deterministic spanning forest over the dependence graph: maximum
/// inlier-count edges first (Kruskal), ties broken by robot-id order.
pub fn spanning_tree(
    estimates: &BTreeMap<(RobotId, RobotId), FrameEstimate>,
) -> Vec<(RobotId, RobotId)> {
    let mut edges: Vec<&FrameEstimate> = estimates.values().collect();
    edges.sort_by_key(|e| (std::cmp::Reverse(e.inlier_count), e.pair));

    let mut parent: BTreeMap<RobotId, RobotId> = BTreeMap::new();
    fn find(parent: &mut BTreeMap<RobotId, RobotId>, r: RobotId) -> RobotId {
        let p = *parent.entry(r).or_insert(r);
        if p == r {
            r
        } else {
            let root = find(parent, p);
            parent.insert(r, root);
            root
        }
    }

    let mut tree = Vec::new();
    for e in edges {
        let (a, b) = e.pair;
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent.insert(ra.max(rb), ra.min(rb));
            tree.push(e.pair);
        }
    }
    tree.sort();
    tree
}

/// Chains tree-edge estimates from anchor robots outward, skipping edges
/// that fail the k-inlier gate (their subtrees stay uninitialized).
pub fn chain_from_anchors(
    tree: &[(RobotId, RobotId)],
    estimates: &BTreeMap<(RobotId, RobotId), FrameEstimate>,
    anchors: &BTreeMap<RobotId, Pose>,
    k_min_inliers: usize,
) -> BTreeMap<RobotId, Pose> {
    let mut frames = anchors.clone();
    let mut changed = true;
    while changed {
        changed = false;
        for (a, b) in tree {
            let est = &estimates[&(*a, *b)];
            if est.inlier_count < k_min_inliers {
                continue;
            }
            if frames.contains_key(a) && !frames.contains_key(b) {
                let g = frames[a] * est.estimate;
                frames.insert(*b, g);
                changed = true;
            } else if frames.contains_key(b) && !frames.contains_key(a) {
                let g = frames[b] * est.estimate.inverse();
                frames.insert(*a, g);
                changed = true;
            }
        }
    }
    frames
}

/// Maps every reachable robot to its global frame. The root robot (lowest
/// id among those with estimates) maps to identity; everything else
/// composes along the unique tree path through gated edges.
pub fn chain_to_global(
    tree: &[(RobotId, RobotId)],
    estimates: &BTreeMap<(RobotId, RobotId), FrameEstimate>,
    k_min_inliers: usize,
) -> BTreeMap<RobotId, Pose> {
    let root = match estimates.keys().map(|(a, b)| (*a).min(*b)).min() {
        Some(r) => r,
        None => return BTreeMap::new(),
    };
    let mut anchors = BTreeMap::new();
    anchors.insert(root, Pose::identity());
    chain_from_anchors(tree, estimates, &anchors, k_min_inliers)
}

/// True when the initial estimate's translation disagrees with the
/// optimized relative translation by more than the threshold. The rule is
/// translation-only.
pub fn needs_realign(
    initial: &FrameEstimate,
    optimized_relative: &Pose,
    cfg: &AlignmentConfig,
) -> bool {
    let gap = (initial.estimate.translation() - optimized_relative.translation()).norm();
    gap > cfg.realign_translation_threshold
}

/// Incremental alignment state kept across backend iterations: frames are
/// cached once computed and only recomputed after a re-align trigger.
#[derive(Clone, Debug, Default)]
pub struct AlignmentState {
    pub frames: BTreeMap<RobotId, Pose>,
    pub estimates: BTreeMap<(RobotId, RobotId), FrameEstimate>,
    realign_pending: bool,
}

#[derive(Clone, Debug, Default)]
pub struct AlignmentReport {
    pub pairs_estimated: usize,
    pub newly_initialized: Vec<RobotId>,
    pub realigned: bool,
    /// Closures whose agent nodes were not yet in the snapshot.
    pub closures_skipped: usize,
}

impl AlignmentState {
    pub fn new() -> Self {
        AlignmentState::default()
    }

    pub fn request_realign(&mut self) {
        self.realign_pending = true;
    }

    pub fn is_initialized(&self, robot: RobotId) -> bool {
        self.frames.contains_key(&robot)
    }

    /// Recomputes estimates where needed and extends the set of initialized
    /// robots. Odometric poses are read from the raw snapshot.
    pub fn update(
        &mut self,
        snapshot: &SceneGraph,
        closures: &[LoopClosure],
        cfg: &AlignmentConfig,
        gnc: &GncConfig,
    ) -> Result<AlignmentReport, AlignError> {
        let mut report = AlignmentReport::default();
        if self.realign_pending {
            self.estimates.clear();
            self.frames.clear();
            self.realign_pending = false;
            report.realigned = true;
        }

        let dg = DependenceGraph::from_closures(closures.iter());
        for (pair, lcs) in dg.pairs() {
            let cached = self.estimates.contains_key(pair)
                && self.frames.contains_key(&pair.0)
                && self.frames.contains_key(&pair.1);
            if cached {
                continue;
            }
            let mut samples = Vec::with_capacity(lcs.len());
            for lc in lcs {
                // A closure can reference a keyframe the frontend has not
                // received yet; it contributes once a later snapshot lands.
                let (Ok(pose_from), Ok(pose_to)) =
                    (agent_pose(snapshot, lc.from), agent_pose(snapshot, lc.to))
                else {
                    report.closures_skipped += 1;
                    continue;
                };
                let sample = frame_sample(lc, &pose_from, &pose_to)?;
                // Orient the sample as X^A_B for the normalized pair (A, B).
                if lc.from.robot == pair.0 {
                    samples.push(sample);
                } else {
                    samples.push(sample.inverse());
                }
            }
            if samples.is_empty() {
                continue;
            }
            let estimate = robust_pose_average(*pair, &samples, cfg, gnc)?;
            self.estimates.insert(*pair, estimate);
            report.pairs_estimated += 1;
        }

        let tree = spanning_tree(&self.estimates);
        let frames = if self.frames.is_empty() {
            chain_to_global(&tree, &self.estimates, cfg.k_min_inliers)
        } else {
            chain_from_anchors(&tree, &self.estimates, &self.frames, cfg.k_min_inliers)
        };
        for (robot, pose) in frames {
            if !self.frames.contains_key(&robot) {
                report.newly_initialized.push(robot);
                self.frames.insert(robot, pose);
            }
        }
        Ok(report)
    }

    /// Fires the re-align rule against optimized relative frames; returns
    /// the pairs that disagreed.
    pub fn check_realign(
        &mut self,
        optimized_frames: &BTreeMap<RobotId, Pose>,
        cfg: &AlignmentConfig,
    ) -> Vec<(RobotId, RobotId)> {
        let mut fired = Vec::new();
        for (pair, est) in &self.estimates {
            let (Some(ga), Some(gb)) = (optimized_frames.get(&pair.0), optimized_frames.get(&pair.1))
            else {
                continue;
            };
            let optimized_relative = ga.inverse() * *gb;
            if needs_realign(est, &optimized_relative, cfg) {
                fired.push(*pair);
            }
        }
        if !fired.is_empty() {
            self.realign_pending = true;
        }
        fired
    }
}

fn agent_pose(snapshot: &SceneGraph, id: NodeId) -> Result<Pose, AlignError> {
    if id.layer != Layer::Agent {
        return Err(AlignError::MissingAgent(id));
    }
    snapshot
        .node(id)
        .and_then(|p| p.as_agent())
        .map(|a| a.pose)
        .ok_or(AlignError::MissingAgent(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn aid(robot: u32, index: u64) -> NodeId {
        NodeId::new(RobotId(robot), Layer::Agent, index)
    }

    fn lc(from: NodeId, to: NodeId, measurement: Pose) -> LoopClosure {
        LoopClosure {
            from,
            to,
            measurement,
            covariance: Covariance6::identity(),
        }
    }

    fn random_pose(rng: &mut StdRng, rot_max: f64, trans_max: f64) -> Pose {
        Pose::from_axis_angle(
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            rng.gen_range(-rot_max..rot_max),
            Vector3::from_fn(|_, _| rng.gen_range(-trans_max..trans_max)),
        )
    }

    #[test]
    fn frame_sample_identity_odometry_returns_measurement() {
        let t = Pose::from_axis_angle(Vector3::z(), 0.3, Vector3::new(1.0, 2.0, 0.0));
        let closure = lc(aid(0, 0), aid(1, 0), t);
        let sample = frame_sample(&closure, &Pose::identity(), &Pose::identity()).unwrap();
        assert!(crate::se3::boxminus(&sample, &t).norm() < 1e-12);
    }

    #[test]
    fn frame_sample_recovers_known_relative_frame() {
        // Two-robot world with known X^A_B; a noiseless closure must
        // reproduce it exactly regardless of where the robots are.
        let mut rng = StdRng::seed_from_u64(5);
        let x_ab = random_pose(&mut rng, 1.0, 5.0);
        for _ in 0..10 {
            let pose_a = random_pose(&mut rng, 1.0, 5.0); // X^A_{α}
            let pose_b = random_pose(&mut rng, 1.0, 5.0); // X^B_{β}
            // measurement: α's view of β = (X^A_α)⁻¹ X^A_B X^B_β
            let measurement = pose_a.inverse() * x_ab * pose_b;
            let closure = lc(aid(0, 0), aid(1, 0), measurement);
            let sample = frame_sample(&closure, &pose_a, &pose_b).unwrap();
            assert!(crate::se3::boxminus(&sample, &x_ab).norm() < 1e-9);
        }
    }

    #[test]
    fn frame_sample_rejects_intra_robot() {
        let closure = lc(aid(0, 0), aid(0, 5), Pose::identity());
        assert_eq!(
            frame_sample(&closure, &Pose::identity(), &Pose::identity()),
            Err(AlignError::IntraRobot(aid(0, 0), aid(0, 5)))
        );
    }

    #[test]
    fn pose_average_all_equal() {
        let t = Pose::from_axis_angle(Vector3::y(), 0.8, Vector3::new(3.0, 1.0, -2.0));
        let est = robust_pose_average(
            (RobotId(0), RobotId(1)),
            &vec![t; 6],
            &AlignmentConfig::default(),
            &GncConfig::for_dim(6),
        )
        .unwrap();
        assert_eq!(est.inlier_count, 6);
        assert!(crate::se3::boxminus(&est.estimate, &t).norm() < 1e-9);
    }

    #[test]
    fn pose_average_rejects_uniform_outliers() {
        let mut rng = StdRng::seed_from_u64(33);
        let truth = Pose::from_axis_angle(Vector3::z(), -0.6, Vector3::new(4.0, -2.0, 1.0));
        let mut samples = Vec::new();
        for _ in 0..7 {
            let noise = crate::se3::Twist(nalgebra::Vector6::new(
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
            ));
            samples.push(truth.boxplus(&noise));
        }
        for _ in 0..3 {
            samples.push(random_pose(&mut rng, PI, 15.0));
        }
        let est = robust_pose_average(
            (RobotId(0), RobotId(1)),
            &samples,
            &AlignmentConfig::default(),
            &GncConfig::for_dim(6),
        )
        .unwrap();
        assert_eq!(est.inlier_count, 7);
        assert_eq!(est.samples_used, 10);
        let err = crate::se3::boxminus(&est.estimate, &truth);
        assert!(err.translational().norm() < 0.05, "{err:?}");
        assert!(err.rotational().norm() < PI / 180.0, "{err:?}");
    }

    fn estimate(pair: (u32, u32), inliers: usize) -> ((RobotId, RobotId), FrameEstimate) {
        let pair = (RobotId(pair.0), RobotId(pair.1));
        (
            pair,
            FrameEstimate {
                pair,
                estimate: Pose::identity(),
                inlier_count: inliers,
                samples_used: inliers,
            },
        )
    }

    #[test]
    fn spanning_tree_prefers_high_inlier_edges() {
        let estimates: BTreeMap<_, _> = [
            estimate((0, 1), 9),
            estimate((1, 2), 7),
            estimate((0, 2), 3),
        ]
        .into_iter()
        .collect();
        let tree = spanning_tree(&estimates);
        assert_eq!(
            tree,
            vec![
                (RobotId(0), RobotId(1)),
                (RobotId(1), RobotId(2))
            ]
        );
    }

    #[test]
    fn two_robots_one_edge() {
        let estimates: BTreeMap<_, _> = [estimate((0, 1), 6)].into_iter().collect();
        assert_eq!(spanning_tree(&estimates), vec![(RobotId(0), RobotId(1))]);
    }

    #[test]
    fn chain_composes_along_tree_and_gates() {
        let x_ab = Pose::from_axis_angle(Vector3::z(), 0.5, Vector3::new(1.0, 0.0, 0.0));
        let x_bc = Pose::from_axis_angle(Vector3::x(), -0.2, Vector3::new(0.0, 2.0, 0.0));
        let mut estimates = BTreeMap::new();
        estimates.insert(
            (RobotId(0), RobotId(1)),
            FrameEstimate {
                pair: (RobotId(0), RobotId(1)),
                estimate: x_ab,
                inlier_count: 6,
                samples_used: 8,
            },
        );
        estimates.insert(
            (RobotId(1), RobotId(2)),
            FrameEstimate {
                pair: (RobotId(1), RobotId(2)),
                estimate: x_bc,
                inlier_count: 6,
                samples_used: 8,
            },
        );
        let tree = spanning_tree(&estimates);
        let frames = chain_to_global(&tree, &estimates, 5);
        assert!(crate::se3::boxminus(&frames[&RobotId(0)], &Pose::identity()).norm() < 1e-12);
        assert!(crate::se3::boxminus(&frames[&RobotId(1)], &x_ab).norm() < 1e-12);
        assert!(crate::se3::boxminus(&frames[&RobotId(2)], &(x_ab * x_bc)).norm() < 1e-12);

        // Gate the second edge: robot 2 stays uninitialized.
        estimates.get_mut(&(RobotId(1), RobotId(2))).unwrap().inlier_count = 4;
        let frames = chain_to_global(&tree, &estimates, 5);
        assert!(frames.contains_key(&RobotId(1)));
        assert!(!frames.contains_key(&RobotId(2)));
    }

    #[test]
    fn realign_rule_is_translation_only() {
        let cfg = AlignmentConfig::default();
        let initial = FrameEstimate {
            pair: (RobotId(0), RobotId(1)),
            estimate: Pose::from_translation(Vector3::new(0.0, 0.0, 0.0)),
            inlier_count: 6,
            samples_used: 6,
        };
        // identical → no
        assert!(!needs_realign(&initial, &Pose::identity(), &cfg));
        // 10.5 m gap → yes
        assert!(needs_realign(
            &initial,
            &Pose::from_translation(Vector3::new(10.5, 0.0, 0.0)),
            &cfg
        ));
        // 9.9 m gap with a 180° rotation gap → still no
        let twisted = Pose::from_axis_angle(Vector3::z(), PI, Vector3::new(9.9, 0.0, 0.0));
        assert!(!needs_realign(&initial, &twisted, &cfg));
    }

    #[test]
    fn equivariance_under_left_multiplication() {
        // Left-multiplying robot A's odometric poses by G transforms every
        // sample by G on the left; on noiseless samples the average follows.
        let mut rng = StdRng::seed_from_u64(9);
        let x_ab = random_pose(&mut rng, 1.0, 3.0);
        let g = random_pose(&mut rng, 1.0, 3.0);
        let cfg = AlignmentConfig::default();
        let gnc = GncConfig::for_dim(6);

        let mut samples = Vec::new();
        let mut shifted = Vec::new();
        for _ in 0..6 {
            let pose_a = random_pose(&mut rng, 1.0, 3.0);
            let pose_b = random_pose(&mut rng, 1.0, 3.0);
            let measurement = pose_a.inverse() * x_ab * pose_b;
            let closure = lc(aid(0, 0), aid(1, 0), measurement);
            samples.push(frame_sample(&closure, &pose_a, &pose_b).unwrap());
            shifted.push(frame_sample(&closure, &(g * pose_a), &pose_b).unwrap());
        }
        let base = robust_pose_average((RobotId(0), RobotId(1)), &samples, &cfg, &gnc).unwrap();
        let moved = robust_pose_average((RobotId(0), RobotId(1)), &shifted, &cfg, &gnc).unwrap();
        let expected = g * base.estimate;
        assert!(crate::se3::boxminus(&moved.estimate, &expected).norm() < 1e-9);
    }

    #[test]
    fn duplicate_inlier_never_shrinks_inlier_count() {
        let mut rng = StdRng::seed_from_u64(17);
        let truth = random_pose(&mut rng, 0.5, 2.0);
        let mut samples = vec![truth; 5];
        samples.push(random_pose(&mut rng, PI, 20.0));
        let cfg = AlignmentConfig::default();
        let gnc = GncConfig::for_dim(6);
        let base = robust_pose_average((RobotId(0), RobotId(1)), &samples, &cfg, &gnc).unwrap();
        samples.push(truth); // exact duplicate of an existing inlier
        let more = robust_pose_average((RobotId(0), RobotId(1)), &samples, &cfg, &gnc).unwrap();
        assert!(more.inlier_count >= base.inlier_count);
        assert_abs_diff_eq!(
            (more.estimate.translation() - base.estimate.translation()).norm(),
            0.0,
            epsilon = 1e-9
        );
    }
}
