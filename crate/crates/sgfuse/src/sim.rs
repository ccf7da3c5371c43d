//! Deterministic multi-robot simulator: waypoint trajectories with seeded
//! odometry noise, per-robot scene graph growth, full-snapshot
//! transmissions, and a loop-closure oracle with an exact outlier quota.
//!
//! Everything is a pure function of (scenario, seed): RNG streams are
//! derived per purpose, and the event order is fixed.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::align::LoopClosure;
use crate::graph::{
    Aabb, AgentNode, Layer, MeshControlNode, NodeId, NodePayload, ObjectNode, PlaceNode,
    RobotCapabilities, RobotId, RoomNode, SceneGraph,
};
use crate::scenario::{ObjectSpec, ScenarioConfig, ScenarioError};
use crate::se3::{Covariance6, Pose, Twist};
use crate::wire::{GraphUpdate, WireEvent};

/// Ground truth retained for evaluation only; the pipeline never sees it.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    /// True local-to-world frame per robot (its start pose).
    pub frames: BTreeMap<RobotId, Pose>,
    /// Keyframe world-frame trajectories.
    pub trajectories: BTreeMap<RobotId, Vec<(f64, Pose)>>,
    pub objects: Vec<crate::metrics::GtObject>,
    pub places: Vec<Vector3<f64>>,
    /// Loop closures labeled true when replaced by an outlier.
    pub outlier_labels: BTreeMap<(NodeId, NodeId), bool>,
    /// Ground-truth object indices each robot observed.
    pub observed_objects: BTreeMap<RobotId, BTreeSet<usize>>,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub events: Vec<WireEvent>,
    pub ground_truth: GroundTruth,
}

struct WorldObject {
    label: u32,
    centroid: Vector3<f64>,
    bbox: Aabb,
    controls: Vec<Vector3<f64>>,
    dense: Vec<Vector3<f64>>,
}

fn build_object(spec: &ObjectSpec) -> WorldObject {
    let centroid = Vector3::from_row_slice(&spec.centroid);
    let half = Vector3::from_row_slice(&spec.extents) / 2.0;
    let bbox = Aabb::new(centroid - half, centroid + half);
    let corners = bbox.corners();

    let mut candidates: Vec<Vector3<f64>> = corners.to_vec();
    // face centers
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut p = centroid;
            p[axis] += sign * half[axis];
            candidates.push(p);
        }
    }
    // edge midpoints
    for i in 0..8 {
        for j in (i + 1)..8 {
            let diff = corners[i] - corners[j];
            let zeros = (0..3).filter(|k| diff[*k].abs() < 1e-12).count();
            if zeros == 2 {
                candidates.push((corners[i] + corners[j]) / 2.0);
            }
        }
    }
    candidates.truncate(spec.control_points.max(3));

    // Dense vertices spread over the faces with a low-discrepancy pattern.
    let mut dense = Vec::with_capacity(spec.dense_vertices);
    const PHI: f64 = 0.618_033_988_749_894_9;
    for k in 0..spec.dense_vertices {
        let face = k % 6;
        let axis = face / 2;
        let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
        let u = ((k as f64 + 1.0) * PHI).fract() * 2.0 - 1.0;
        let v = ((k as f64 + 1.0) * PHI * PHI).fract() * 2.0 - 1.0;
        let mut p = centroid;
        p[axis] += sign * half[axis];
        p[(axis + 1) % 3] += u * half[(axis + 1) % 3];
        p[(axis + 2) % 3] += v * half[(axis + 2) % 3];
        dense.push(p);
    }

    WorldObject {
        label: spec.label,
        centroid,
        bbox,
        controls: candidates,
        dense,
    }
}

fn build_places(cfg: &ScenarioConfig) -> Vec<Vector3<f64>> {
    let spec = cfg.world.places;
    let mut seen = BTreeSet::new();
    let mut places = Vec::new();
    for room in &cfg.world.rooms {
        let (min, max) = (Vector3::from_row_slice(&room.min), Vector3::from_row_slice(&room.max));
        let mut x = min.x + spec.spacing / 2.0;
        while x < max.x {
            let mut y = min.y + spec.spacing / 2.0;
            while y < max.y {
                let quantized = (
                    (x / spec.spacing * 1e6).round() as i64,
                    (y / spec.spacing * 1e6).round() as i64,
                );
                if seen.insert(quantized) {
                    places.push(Vector3::new(x, y, spec.height));
                }
                y += spec.spacing;
            }
            x += spec.spacing;
        }
    }
    places
}

/// World poses along the waypoint path, one per step, yaw facing travel.
fn build_path(waypoints: &[[f64; 3]], step_length: f64) -> Vec<Pose> {
    let pts: Vec<Vector3<f64>> = waypoints.iter().map(|w| Vector3::from_row_slice(w)).collect();
    let mut path = Vec::new();
    let mut heading = 0.0f64;
    for seg in pts.windows(2) {
        let delta = seg[1] - seg[0];
        let planar = Vector3::new(delta.x, delta.y, 0.0);
        if planar.norm() > 1e-9 {
            heading = delta.y.atan2(delta.x);
        }
        let length = delta.norm();
        let steps = (length / step_length).floor() as usize;
        for s in 0..steps {
            let pos = seg[0] + delta * (s as f64 * step_length / length);
            path.push(Pose::from_axis_angle(Vector3::z(), heading, pos));
        }
    }
    path.push(Pose::from_axis_angle(Vector3::z(), heading, pts[pts.len() - 1]));
    path
}

struct RobotSim {
    id: RobotId,
    caps: RobotCapabilities,
    path: Vec<Pose>,
    /// Drifted odometric pose per step, local frame (starts at identity).
    odometry: Vec<Pose>,
    graph: SceneGraph,
    sequence: u64,
    /// step -> agent node for keyframes.
    keyframes: BTreeMap<u64, NodeId>,
    observed_places: BTreeMap<usize, NodeId>,
    observed_objects: BTreeSet<usize>,
    sensing_radius: f64,
    keyframe_every: u64,
    snapshot_period: u64,
}

impl RobotSim {
    /// Map from world coordinates into the robot's drifted local frame at
    /// step `k`: `L_k ∘ X_w(k)⁻¹`.
    fn drift_map(&self, k: u64) -> Pose {
        self.odometry[k as usize] * self.path[k as usize].inverse()
    }
}

/// Exact-quota outlier assignment: after n emissions the outlier count is
/// round(rate·n), so the configured regime holds in every prefix.
#[derive(Default)]
struct OutlierQuota {
    emitted: u64,
    outliers: u64,
}

impl OutlierQuota {
    fn next_is_outlier(&mut self, rate: f64) -> bool {
        self.emitted += 1;
        let target = (rate * self.emitted as f64).round() as u64;
        if self.outliers < target {
            self.outliers += 1;
            true
        } else {
            false
        }
    }
}

fn gaussian3(rng: &mut ChaCha12Rng, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

fn uniform_pose_in(rng: &mut ChaCha12Rng, bounds: &Aabb) -> Pose {
    let t = Vector3::from_fn(|i, _| rng.gen_range(bounds.min[i]..bounds.max[i]));
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    Pose::new(UnitQuaternion::from_quaternion(q), t)
}

/// Runs the scenario, producing the full event stream (graph updates, loop
/// closures, backend ticks) and the ground truth for evaluation.
pub fn simulate(cfg: &ScenarioConfig) -> Result<SimOutput, ScenarioError> {
    cfg.validate()?;
    let world_objects: Vec<WorldObject> = cfg.world.objects.iter().map(build_object).collect();
    let world_places = build_places(cfg);
    let bounds = Aabb::new(
        Vector3::from_row_slice(&cfg.world.bounds.min),
        Vector3::from_row_slice(&cfg.world.bounds.max),
    );

    let mut gt = GroundTruth {
        objects: world_objects
            .iter()
            .map(|o| crate::metrics::GtObject {
                label: o.label,
                centroid: o.centroid,
            })
            .collect(),
        places: world_places.clone(),
        ..GroundTruth::default()
    };

    let mut odom_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    odom_rng.set_stream(1);
    let mut lc_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    lc_rng.set_stream(2);

    // Robots, their paths, and pre-rolled drifted odometry.
    let mut robots: Vec<RobotSim> = Vec::new();
    for (i, rc) in cfg.robots.iter().enumerate() {
        let id = RobotId(i as u32);
        let caps = RobotCapabilities::from_flags(rc.has_semantics, rc.has_mesh);
        let path = build_path(&rc.waypoints, rc.step_length);
        let mut odometry = vec![Pose::identity()];
        for k in 1..path.len() {
            let rel = path[k - 1].inverse() * path[k];
            let dist = rel.translation().norm().max(1e-12);
            let noise = Twist(Vector6::from_iterator(
                gaussian3(&mut odom_rng, rc.odom_sigma_rot_per_m * dist)
                    .iter()
                    .chain(gaussian3(&mut odom_rng, rc.odom_sigma_trans_per_m * dist).iter())
                    .cloned(),
            ));
            let step = rel.boxplus(&noise);
            odometry.push(odometry[k - 1] * step);
        }
        gt.frames.insert(id, path[0]);
        gt.trajectories.insert(id, Vec::new());

        let mut graph = SceneGraph::new();
        graph.ensure_robot(id, caps.clone());
        for room in &cfg.world.rooms {
            let rid = graph.allocate_id(id, Layer::Room).unwrap();
            graph
                .add_node(
                    rid,
                    NodePayload::Room(RoomNode {
                        bbox: Aabb::new(
                            Vector3::from_row_slice(&room.min),
                            Vector3::from_row_slice(&room.max),
                        ),
                    }),
                )
                .unwrap();
        }
        robots.push(RobotSim {
            id,
            caps,
            path,
            odometry,
            graph,
            sequence: 0,
            keyframes: BTreeMap::new(),
            observed_places: BTreeMap::new(),
            observed_objects: BTreeSet::new(),
            sensing_radius: rc.sensing_radius,
            keyframe_every: rc.keyframe_every,
            snapshot_period: rc.snapshot_period,
        });
    }

    let total_steps = robots.iter().map(|r| r.path.len() as u64).max().unwrap();
    let lc_cfg = &cfg.loop_closures;
    let mut quotas: BTreeMap<(RobotId, RobotId), OutlierQuota> = BTreeMap::new();
    let mut pair_counts: BTreeMap<(RobotId, RobotId), u64> = BTreeMap::new();
    // Closures detected between keyframes the station has not received yet
    // wait here until both endpoints have been transmitted.
    let mut pending: Vec<(LoopClosure, u64, u64)> = Vec::new();
    let mut last_tx: BTreeMap<RobotId, u64> = BTreeMap::new();
    let mut events: Vec<WireEvent> = Vec::new();
    events.push(WireEvent::Header {
        solvers: cfg.solvers.clone(),
    });

    let place_spacing = cfg.world.places.spacing;
    for step in 0..total_steps {
        // Motion, observation, keyframes.
        for robot in robots.iter_mut() {
            if step as usize >= robot.path.len() {
                continue;
            }
            let world_pose = robot.path[step as usize];
            let drift = robot.drift_map(step);

            // Observe places in range.
            for (gi, place) in world_places.iter().enumerate() {
                if robot.observed_places.contains_key(&gi)
                    || (place - world_pose.translation()).norm() > robot.sensing_radius
                {
                    continue;
                }
                let pid = robot.graph.allocate_id(robot.id, Layer::Place).unwrap();
                robot
                    .graph
                    .add_node(
                        pid,
                        NodePayload::Place(PlaceNode {
                            position: drift.transform_point(place),
                            radius: cfg.world.places.radius,
                        }),
                    )
                    .unwrap();
                // adjacency to observed grid neighbors
                let neighbors: Vec<NodeId> = robot
                    .observed_places
                    .iter()
                    .filter(|(gj, _)| {
                        (world_places[**gj] - place).norm() <= 1.5 * place_spacing
                    })
                    .map(|(_, nid)| *nid)
                    .collect();
                for n in neighbors {
                    robot.graph.add_edge(pid, n).unwrap();
                }
                robot.observed_places.insert(gi, pid);
            }

            // Observe objects in range: mesh geometry for mesh robots,
            // object nodes for semantic robots.
            for (oi, object) in world_objects.iter().enumerate() {
                if robot.observed_objects.contains(&oi)
                    || (object.centroid - world_pose.translation()).norm() > robot.sensing_radius
                {
                    continue;
                }
                robot.observed_objects.insert(oi);
                let mut vertex_ids = Vec::new();
                if robot.caps.has_mesh {
                    for c in &object.controls {
                        let vid = robot.graph.allocate_id(robot.id, Layer::MeshControl).unwrap();
                        robot
                            .graph
                            .add_node(
                                vid,
                                NodePayload::MeshControl(MeshControlNode {
                                    position: drift.transform_point(c),
                                }),
                            )
                            .unwrap();
                        vertex_ids.push(vid);
                    }
                    let info = robot.graph.robot_mut(robot.id).unwrap();
                    for d in &object.dense {
                        info.mesh.vertices.push(drift.transform_point(d));
                    }
                }
                if robot.caps.has_semantics {
                    let oid = robot.graph.allocate_id(robot.id, Layer::Object).unwrap();
                    robot
                        .graph
                        .add_node(
                            oid,
                            NodePayload::Object(ObjectNode {
                                centroid: drift.transform_point(&object.centroid),
                                bbox: object.bbox.transformed(&drift),
                                semantic_label: object.label,
                                vertex_ids,
                            }),
                        )
                        .unwrap();
                    // nearest observed place
                    if let Some((_, place_id)) = robot
                        .observed_places
                        .iter()
                        .map(|(gi, nid)| ((world_places[*gi] - object.centroid).norm(), *nid))
                        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                    {
                        let _ = robot.graph.add_edge(oid, place_id);
                    }
                }
            }

            // Keyframe.
            if step % robot.keyframe_every == 0 {
                let aid = robot.graph.allocate_id(robot.id, Layer::Agent).unwrap();
                let timestamp = step as f64;
                robot
                    .graph
                    .add_node(
                        aid,
                        NodePayload::Agent(AgentNode {
                            pose: robot.odometry[step as usize],
                            timestamp,
                        }),
                    )
                    .unwrap();
                if let Some((_, place_id)) = robot
                    .observed_places
                    .iter()
                    .map(|(gi, nid)| {
                        ((world_places[*gi] - world_pose.translation()).norm(), *nid)
                    })
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                {
                    let _ = robot.graph.add_edge(aid, place_id);
                }
                robot.keyframes.insert(step, aid);
                gt.trajectories
                    .get_mut(&robot.id)
                    .unwrap()
                    .push((timestamp, world_pose));
            }
        }

        // Loop-closure oracle at keyframe steps.
        let mut step_closures: Vec<(LoopClosure, u64, u64)> = Vec::new();
        for i in 0..robots.len() {
            if step as usize >= robots[i].path.len() || !robots[i].keyframes.contains_key(&step) {
                continue;
            }
            let from_id = robots[i].keyframes[&step];
            let from_world = robots[i].path[step as usize];

            // Intra-robot: own past keyframes beyond the separation window.
            for (&j_step, &to_id) in robots[i].keyframes.iter() {
                if step.saturating_sub(j_step) < lc_cfg.min_separation_steps.max(1) {
                    continue;
                }
                let to_world = robots[i].path[j_step as usize];
                if (to_world.translation() - from_world.translation()).norm()
                    > lc_cfg.detection_radius
                {
                    continue;
                }
                if lc_rng.gen::<f64>() >= lc_cfg.intra_robot_rate {
                    continue;
                }
                let pair = (robots[i].id, robots[i].id);
                if lc_cfg.max_per_pair > 0
                    && *pair_counts.get(&pair).unwrap_or(&0) >= lc_cfg.max_per_pair
                {
                    continue;
                }
                *pair_counts.entry(pair).or_insert(0) += 1;
                let closure = make_closure(
                    from_id, to_id, &from_world, &to_world, lc_cfg, &bounds,
                    quotas.entry(pair).or_default(), &mut lc_rng, &mut gt,
                );
                step_closures.push((closure, step, j_step));
            }

            // Inter-robot: other robots' past-or-current keyframes.
            for (j, other) in robots.iter().enumerate() {
                if i == j {
                    continue;
                }
                for (&j_step, &to_id) in other.keyframes.iter() {
                    if j_step > step {
                        break;
                    }
                    let to_world = other.path[j_step as usize];
                    if (to_world.translation() - from_world.translation()).norm()
                        > lc_cfg.detection_radius
                    {
                        continue;
                    }
                    if lc_rng.gen::<f64>() >= lc_cfg.inter_robot_rate {
                        continue;
                    }
                    let pair = if robots[i].id <= other.id {
                        (robots[i].id, other.id)
                    } else {
                        (other.id, robots[i].id)
                    };
                    if lc_cfg.max_per_pair > 0
                        && *pair_counts.get(&pair).unwrap_or(&0) >= lc_cfg.max_per_pair
                    {
                        continue;
                    }
                    *pair_counts.entry(pair).or_insert(0) += 1;
                    let closure = make_closure(
                        from_id, to_id, &from_world, &to_world, lc_cfg, &bounds,
                        quotas.entry(pair).or_default(), &mut lc_rng, &mut gt,
                    );
                    step_closures.push((closure, step, j_step));
                }
            }
        }

        // Snapshots after observation, in robot order.
        for robot in robots.iter_mut() {
            let active = (step as usize) < robot.path.len();
            let last_step = step as usize == robot.path.len() - 1;
            if active && (step % robot.snapshot_period == 0 || last_step) {
                robot.sequence += 1;
                last_tx.insert(robot.id, step);
                events.push(WireEvent::GraphUpdate(GraphUpdate::new(
                    robot.id,
                    robot.sequence,
                    robot.graph.clone(),
                )));
            }
        }
        // Release closures whose endpoints the station now knows about.
        pending.extend(step_closures);
        let transmitted = |robot: RobotId, at: u64, last_tx: &BTreeMap<RobotId, u64>| {
            last_tx.get(&robot).map(|t| *t >= at).unwrap_or(false)
        };
        let mut released = Vec::new();
        pending.retain(|(lc, from_step, to_step)| {
            if transmitted(lc.from.robot, *from_step, &last_tx)
                && transmitted(lc.to.robot, *to_step, &last_tx)
            {
                released.push(lc.clone());
                false
            } else {
                true
            }
        });
        if !released.is_empty() {
            events.push(WireEvent::LoopClosures(released));
        }
        if (step + 1) % cfg.backend_period == 0 {
            events.push(WireEvent::BackendTick);
        }
    }
    events.push(WireEvent::BackendTick);

    for robot in &robots {
        gt.observed_objects
            .insert(robot.id, robot.observed_objects.clone());
    }
    Ok(SimOutput {
        events,
        ground_truth: gt,
    })
}

#[allow(clippy::too_many_arguments)]
fn make_closure(
    from_id: NodeId,
    to_id: NodeId,
    from_world: &Pose,
    to_world: &Pose,
    lc_cfg: &crate::scenario::LoopClosureOracleConfig,
    bounds: &Aabb,
    quota: &mut OutlierQuota,
    rng: &mut ChaCha12Rng,
    gt: &mut GroundTruth,
) -> LoopClosure {
    let outlier = quota.next_is_outlier(lc_cfg.outlier_rate);
    let measurement = if outlier {
        from_world.inverse() * uniform_pose_in(rng, bounds)
    } else {
        let truth = from_world.inverse() * *to_world;
        let noise = Twist(Vector6::from_iterator(
            gaussian3(rng, lc_cfg.sigma_rot)
                .iter()
                .chain(gaussian3(rng, lc_cfg.sigma_trans).iter())
                .cloned(),
        ));
        truth.boxplus(&noise)
    };
    gt.outlier_labels.insert((from_id, to_id), outlier);
    LoopClosure {
        from: from_id,
        to: to_id,
        measurement,
        covariance: Covariance6::isotropic(
            lc_cfg.sigma_rot.powi(2).max(1e-8),
            lc_cfg.sigma_trans.powi(2).max(1e-8),
        )
        .unwrap(),
    }
}
