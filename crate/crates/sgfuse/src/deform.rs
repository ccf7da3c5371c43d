//! The embedded deformation graph: one local frame per agent, place,
//! merge-candidate object, and mesh control vertex. Optimizing the frames
//! under relative-pose factors deforms the whole scene graph consistently;
//! the dense mesh follows by interpolation.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector3, Vector6};

use crate::align::LoopClosure;
use crate::gnc::{solve_gnc, GncConfig, GncError, GncResult, Noise, ResidualKind, RobustProblem};
use crate::graph::{write_canonical_f64, Layer, NodeId, RobotId, SceneGraph};
use crate::reconcile::{CandidateKind, CandidateStatus, MergeCandidate};
use crate::scenario::OmegaTable;
use crate::se3::{Covariance6, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeType {
    Odometry,
    LoopClosure,
    Rigidity,
    MergeFactor,
    PlaceAgent,
    PlaceObject,
}

impl EdgeType {
    pub fn name(&self) -> &'static str {
        match self {
            EdgeType::Odometry => "odometry",
            EdgeType::LoopClosure => "loop_closure",
            EdgeType::Rigidity => "rigidity",
            EdgeType::MergeFactor => "merge_factor",
            EdgeType::PlaceAgent => "place_agent",
            EdgeType::PlaceObject => "place_object",
        }
    }

    /// Loop closures and merge factors go through the robust cost; structure
    /// edges are always trusted.
    pub fn is_robust(&self) -> bool {
        matches!(self, EdgeType::LoopClosure | EdgeType::MergeFactor)
    }
}

#[derive(Clone, Debug)]
pub struct DefEdge {
    pub from: usize,
    pub to: usize,
    pub edge_type: EdgeType,
    /// Expected relative pose `T_from⁻¹ T_to`.
    pub measurement: Pose,
    /// Information diagonal, rotation-first.
    pub omega_diag: Vector6<f64>,
}

/// Content skipped at build time, by cause.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildReport {
    pub closures_skipped_uninitialized: usize,
    pub closures_skipped_missing_node: usize,
    pub unknowns_dropped_unconstrained: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct DeformationGraph {
    /// Unknown index -> scene node and initial (current global) pose.
    pub nodes: Vec<(NodeId, Pose)>,
    pub index: BTreeMap<NodeId, usize>,
    pub edges: Vec<DefEdge>,
    /// One fixed unknown per connected component.
    pub anchors: Vec<usize>,
    /// Edge index of each candidate's merge factor (parallel to the
    /// candidate list handed to `build`).
    pub candidate_edges: Vec<Option<usize>>,
    pub report: BuildReport,
}

fn omega_for(table: &OmegaTable, ty: EdgeType) -> Vector6<f64> {
    let [rot, trans] = match ty {
        EdgeType::Odometry => table.odometry,
        EdgeType::LoopClosure => table.loop_closure,
        EdgeType::Rigidity => table.rigidity,
        EdgeType::MergeFactor => table.merge_factor,
        EdgeType::PlaceAgent => table.place_agent,
        EdgeType::PlaceObject => table.place_object,
    };
    Vector6::new(rot, rot, rot, trans, trans, trans)
}

fn covariance_from_omega(diag: &Vector6<f64>) -> Covariance6 {
    Covariance6::from_diagonal(&diag.map(|x| 1.0 / x)).expect("positive information diagonal")
}

/// Initial frame for a non-agent unknown: identity rotation at its current
/// position.
fn frame_at(position: Vector3<f64>) -> Pose {
    Pose::from_translation(position)
}

/// Builds the deformation graph from the backend graph (current global
/// values), the raw snapshot (odometry measurements), the loop closures,
/// and the proposed merge candidates.
pub fn build(
    backend: &SceneGraph,
    raw: &SceneGraph,
    closures: &[LoopClosure],
    candidates: &[MergeCandidate],
    omega: &OmegaTable,
) -> DeformationGraph {
    let mut report = BuildReport::default();
    let mut nodes: Vec<(NodeId, Pose)> = Vec::new();
    let mut index: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut add_unknown = |id: NodeId, pose: Pose, nodes: &mut Vec<(NodeId, Pose)>| {
        if let std::collections::btree_map::Entry::Vacant(e) = index.entry(id) {
            e.insert(nodes.len());
            nodes.push((id, pose));
        }
    };

    // Candidate objects come first into the unknown set so both endpoints of
    // every merge factor exist; agents/places/meshes follow in id order.
    let mut candidate_objects: BTreeSet<NodeId> = BTreeSet::new();
    for c in candidates {
        if c.kind == CandidateKind::Object && c.status == CandidateStatus::Proposed {
            candidate_objects.insert(c.a);
            candidate_objects.insert(c.b);
        }
    }

    for (id, payload) in backend.nodes() {
        match id.layer {
            Layer::Agent => add_unknown(*id, payload.as_agent().unwrap().pose, &mut nodes),
            Layer::Place => {
                add_unknown(*id, frame_at(payload.as_place().unwrap().position), &mut nodes)
            }
            Layer::MeshControl => add_unknown(
                *id,
                frame_at(payload.as_mesh_control().unwrap().position),
                &mut nodes,
            ),
            Layer::Object => {
                if candidate_objects.contains(id) {
                    add_unknown(*id, frame_at(payload.as_object().unwrap().centroid), &mut nodes)
                }
            }
            Layer::Room => {}
        }
    }

    let mut edges: Vec<DefEdge> = Vec::new();
    let push_edge = |from: usize, to: usize, ty: EdgeType, measurement: Pose, edges: &mut Vec<DefEdge>| -> usize {
        edges.push(DefEdge {
            from,
            to,
            edge_type: ty,
            measurement,
            omega_diag: omega_for(omega, ty),
        });
        edges.len() - 1
    };

    // Odometry: consecutive agent keyframes per robot, measured on the raw
    // (drifting, local-frame) trajectory. Relative poses are frame
    // invariant, so they apply unchanged in the global frame.
    let robots: Vec<RobotId> = backend.robots().map(|(id, _)| *id).collect();
    for robot in &robots {
        let agents: Vec<NodeId> = backend
            .nodes_in_layer(Layer::Agent)
            .filter(|(id, _)| id.robot == *robot)
            .map(|(id, _)| *id)
            .collect();
        for pair in agents.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (Some(ra), Some(rb)) = (
                raw.node(a).and_then(|p| p.as_agent()),
                raw.node(b).and_then(|p| p.as_agent()),
            ) else {
                report.closures_skipped_missing_node += 1;
                continue;
            };
            let measurement = ra.pose.inverse() * rb.pose;
            push_edge(index[&a], index[&b], EdgeType::Odometry, measurement, &mut edges);
        }
    }

    // Loop closures: robust. Inter-robot closures participate only once
    // both robots are initialized into the global frame.
    let frame_ready = |robot: RobotId| {
        backend
            .robot(robot)
            .map(|info| info.frame.is_initialized())
            .unwrap_or(false)
    };
    for lc in closures {
        if !lc.is_intra_robot() && !(frame_ready(lc.from.robot) && frame_ready(lc.to.robot)) {
            report.closures_skipped_uninitialized += 1;
            continue;
        }
        let (Some(&from), Some(&to)) = (index.get(&lc.from), index.get(&lc.to)) else {
            report.closures_skipped_missing_node += 1;
            continue;
        };
        push_edge(from, to, EdgeType::LoopClosure, lc.measurement, &mut edges);
    }

    // Structure edges measured at their current relative pose, so they are
    // zero-residual at build time.
    let current_relative =
        |nodes: &[(NodeId, Pose)], i: usize, j: usize| nodes[i].1.inverse() * nodes[j].1;
    for (a, b) in backend.edges() {
        let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
            continue;
        };
        let ty = match (a.layer, b.layer) {
            (Layer::Place, Layer::Place) => EdgeType::Rigidity,
            (Layer::Agent, Layer::Place) | (Layer::Place, Layer::Agent) => EdgeType::PlaceAgent,
            (Layer::Object, Layer::Place) | (Layer::Place, Layer::Object) => EdgeType::PlaceObject,
            _ => continue,
        };
        let m = current_relative(&nodes, ia, ib);
        push_edge(ia, ib, ty, m, &mut edges);
    }

    // Attach every mesh control to the nearest place of its robot (falling
    // back to the nearest agent), mirroring local mesh rigidity.
    for (i, (id, pose)) in nodes.iter().enumerate() {
        if id.layer != Layer::MeshControl {
            continue;
        }
        let target = nearest_unknown(&nodes, &index, id.robot, pose.translation(), Layer::Place)
            .or_else(|| nearest_unknown(&nodes, &index, id.robot, pose.translation(), Layer::Agent));
        if let Some(j) = target {
            let m = current_relative(&nodes, j, i);
            push_edge(j, i, EdgeType::Rigidity, m, &mut edges);
        }
    }

    // Candidate objects without an inclusion edge still need a tie to their
    // robot's structure.
    for id in &candidate_objects {
        let Some(&i) = index.get(id) else { continue };
        let has_structure_edge = edges.iter().any(|e| {
            e.edge_type == EdgeType::PlaceObject && (e.from == i || e.to == i)
        });
        if has_structure_edge {
            continue;
        }
        let pos = nodes[i].1.translation();
        let target = nearest_unknown(&nodes, &index, id.robot, pos, Layer::Place)
            .or_else(|| nearest_unknown(&nodes, &index, id.robot, pos, Layer::Agent));
        if let Some(j) = target {
            let m = current_relative(&nodes, j, i);
            push_edge(j, i, EdgeType::PlaceObject, m, &mut edges);
        }
    }

    // Merge factors: identity measurement for places, the ICP registration
    // (conjugated into the frame pair) for objects.
    let mut candidate_edges = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.status != CandidateStatus::Proposed {
            candidate_edges.push(None);
            continue;
        }
        let (Some(&ia), Some(&ib)) = (index.get(&c.a), index.get(&c.b)) else {
            candidate_edges.push(None);
            continue;
        };
        let measurement = match c.kind {
            CandidateKind::Place => Pose::identity(),
            CandidateKind::Object => {
                // Geometry of b maps onto a by G: at consensus the frames
                // satisfy T_a⁻¹ T_b = T_a⁻¹ G T_b evaluated at build values.
                nodes[ia].1.inverse() * c.relative_transform * nodes[ib].1
            }
        };
        let e = push_edge(ia, ib, EdgeType::MergeFactor, measurement, &mut edges);
        candidate_edges.push(Some(e));
    }

    // Drop unknowns no edge touches; they cannot be estimated.
    let mut touched = vec![false; nodes.len()];
    for e in &edges {
        touched[e.from] = true;
        touched[e.to] = true;
    }
    if touched.iter().any(|t| !t) {
        let mut remap = vec![usize::MAX; nodes.len()];
        let mut kept: Vec<(NodeId, Pose)> = Vec::new();
        for (i, entry) in nodes.iter().enumerate() {
            if touched[i] {
                remap[i] = kept.len();
                kept.push(*entry);
            } else {
                report.unknowns_dropped_unconstrained.push(entry.0);
            }
        }
        for e in &mut edges {
            e.from = remap[e.from];
            e.to = remap[e.to];
        }
        index = kept
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (*id, i))
            .collect();
        nodes = kept;
    }

    // One gauge anchor per connected component: its lowest unknown index
    // (agents are added first, so trajectories anchor at their first pose).
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for e in &edges {
        let (ra, rb) = (find(&mut parent, e.from), find(&mut parent, e.to));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut anchors: BTreeSet<usize> = BTreeSet::new();
    for i in 0..nodes.len() {
        anchors.insert(find(&mut parent, i));
    }

    DeformationGraph {
        nodes,
        index,
        edges,
        anchors: anchors.into_iter().collect(),
        candidate_edges,
        report,
    }
}

fn nearest_unknown(
    nodes: &[(NodeId, Pose)],
    index: &BTreeMap<NodeId, usize>,
    robot: RobotId,
    position: Vector3<f64>,
    layer: Layer,
) -> Option<usize> {
    index
        .iter()
        .filter(|(id, _)| id.robot == robot && id.layer == layer)
        .map(|(_, &i)| (i, (nodes[i].1.translation() - position).norm()))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

#[derive(Clone, Debug)]
pub struct DefSolution {
    /// Solved frame per unknown.
    pub values: BTreeMap<NodeId, Pose>,
    /// Final weight per edge (trusted edges stay 1).
    pub edge_weights: Vec<f64>,
    pub edge_inliers: Vec<bool>,
    pub converged: bool,
    /// Weighted objective at the initial guess and after the solve.
    pub objective_before: f64,
    pub objective_after: f64,
}

impl DefSolution {
    /// Per-candidate inlier mask aligned with the candidate list given to
    /// `build` (candidates without a merge factor are outliers).
    pub fn candidate_mask(&self, dg: &DeformationGraph) -> Vec<bool> {
        dg.candidate_edges
            .iter()
            .map(|e| e.map(|i| self.edge_inliers[i]).unwrap_or(false))
            .collect()
    }
}

/// Minimizes the deformation objective with GNC over the robust edges.
/// Components are anchored at their first frame (gauge fixing).
pub fn optimize(dg: &DeformationGraph, gnc: &GncConfig) -> Result<DefSolution, GncError> {
    let mut problem = RobustProblem::new();
    for (_, pose) in &dg.nodes {
        problem.add_pose_variable(*pose);
    }
    for &a in &dg.anchors {
        problem.fix_variable(a);
    }
    for e in &dg.edges {
        problem.add_residual(
            ResidualKind::RelativePose {
                from: e.from,
                to: e.to,
                measurement: e.measurement,
            },
            Noise::Pose(covariance_from_omega(&e.omega_diag)),
            e.edge_type.is_robust(),
        );
    }
    let result: GncResult = solve_gnc(&problem, gnc)?;
    let values = dg
        .nodes
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (*id, *result.values[i].as_pose().unwrap()))
        .collect();
    let (objective_before, objective_after) = result
        .solve_trace
        .first()
        .map(|(b, _)| (*b, result.solve_trace.last().unwrap().1))
        .unwrap_or((0.0, 0.0));
    Ok(DefSolution {
        values,
        edge_weights: result.weights.clone(),
        edge_inliers: result.inlier_mask.clone(),
        converged: result.converged,
        objective_before,
        objective_after,
    })
}

/// The interpolation weights of one dense vertex: control indices with
/// normalized nonnegative weights.
pub type Binding = Vec<(usize, f64)>;

/// Binds each dense vertex to its `count` nearest control points with
/// inverse-distance weights (a vertex sitting on a control snaps to it).
/// Vertices with no controls available stay unbound.
pub fn bind_mesh(
    vertices: &[Vector3<f64>],
    controls: &[Vector3<f64>],
    count: usize,
) -> Vec<Binding> {
    vertices
        .iter()
        .map(|v| {
            if controls.is_empty() {
                return Vec::new();
            }
            let mut dists: Vec<(usize, f64)> = controls
                .iter()
                .enumerate()
                .map(|(i, c)| (i, (v - c).norm()))
                .collect();
            dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            dists.truncate(count);
            if dists[0].1 < 1e-12 {
                return vec![(dists[0].0, 1.0)];
            }
            let inv: Vec<(usize, f64)> = dists.iter().map(|(i, d)| (*i, 1.0 / d)).collect();
            let total: f64 = inv.iter().map(|(_, w)| w).sum();
            inv.into_iter().map(|(i, w)| (i, w / total)).collect()
        })
        .collect()
}

/// Deforms dense vertices from solved control frames:
/// `v' = Σ_j w_j (R_j (v - g_j) + p_j)` with `g_j` the rest position and
/// `(R_j, p_j)` the solved rotation and position of control `j`.
/// Returns the new positions and the count of unbound vertices (left
/// unmoved).
pub fn interpolate_mesh(
    vertices: &[Vector3<f64>],
    bindings: &[Binding],
    rest: &[Vector3<f64>],
    solved: &[Pose],
) -> (Vec<Vector3<f64>>, usize) {
    let mut unbound = 0usize;
    let moved = vertices
        .iter()
        .zip(bindings.iter())
        .map(|(v, binding)| {
            if binding.is_empty() {
                unbound += 1;
                return *v;
            }
            let mut out = Vector3::zeros();
            for (j, w) in binding {
                let r = solved[*j].rotation();
                let p = solved[*j].translation();
                out += (r * (v - rest[*j]) + p) * *w;
            }
            out
        })
        .collect();
    (moved, unbound)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WriteBackReport {
    pub agents_updated: usize,
    pub places_updated: usize,
    pub controls_updated: usize,
    pub objects_recomputed: usize,
    pub dense_vertices_moved: usize,
    pub dense_vertices_unbound: usize,
}

/// Writes the solved frames back into the backend graph: agent poses,
/// place positions, control positions, interpolated dense meshes, then
/// object centroids and bounding boxes recomputed from their supporting
/// vertices.
pub fn write_back(
    backend: &mut SceneGraph,
    solution: &DefSolution,
    binding_count: usize,
) -> WriteBackReport {
    let mut report = WriteBackReport::default();

    // Rest state of every robot's control set, captured before mutation.
    let robots: Vec<RobotId> = backend.robots().map(|(id, _)| *id).collect();
    let mut rest_controls: BTreeMap<RobotId, (Vec<NodeId>, Vec<Vector3<f64>>)> = BTreeMap::new();
    for robot in &robots {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for (id, payload) in backend.nodes_in_layer(Layer::MeshControl) {
            if id.robot == *robot {
                ids.push(*id);
                positions.push(payload.as_mesh_control().unwrap().position);
            }
        }
        rest_controls.insert(*robot, (ids, positions));
    }

    let updates: Vec<(NodeId, Pose)> = solution.values.iter().map(|(id, p)| (*id, *p)).collect();
    for (id, pose) in &updates {
        let Some(payload) = backend.node_mut(*id) else {
            continue;
        };
        match payload {
            crate::graph::NodePayload::Agent(a) => {
                a.pose = *pose;
                report.agents_updated += 1;
            }
            crate::graph::NodePayload::Place(p) => {
                p.position = pose.translation();
                report.places_updated += 1;
            }
            crate::graph::NodePayload::MeshControl(m) => {
                m.position = pose.translation();
                report.controls_updated += 1;
            }
            _ => {}
        }
    }

    // Dense meshes follow their robot's controls.
    for robot in &robots {
        let (ids, rest) = &rest_controls[robot];
        if ids.is_empty() {
            continue;
        }
        let solved: Vec<Pose> = ids
            .iter()
            .zip(rest.iter())
            .map(|(id, g)| solution.values.get(id).copied().unwrap_or(frame_at(*g)))
            .collect();
        let vertices = backend.robot(*robot).unwrap().mesh.vertices.clone();
        if vertices.is_empty() {
            continue;
        }
        let bindings = bind_mesh(&vertices, rest, binding_count);
        let (moved, unbound) = interpolate_mesh(&vertices, &bindings, rest, &solved);
        report.dense_vertices_moved += moved.len() - unbound;
        report.dense_vertices_unbound += unbound;
        backend.robot_mut(*robot).unwrap().mesh.vertices = moved;
    }

    // Object centroids and bounding boxes from their vertices' new
    // positions; merged objects pool both robots' vertices.
    let object_ids: Vec<NodeId> = backend
        .nodes_in_layer(Layer::Object)
        .map(|(id, _)| *id)
        .collect();
    for id in object_ids {
        let vertex_ids = backend
            .node(id)
            .unwrap()
            .as_object()
            .unwrap()
            .vertex_ids
            .clone();
        let positions: Vec<Vector3<f64>> = vertex_ids
            .iter()
            .filter_map(|vid| backend.node(*vid).and_then(|p| p.as_mesh_control()))
            .map(|m| m.position)
            .collect();
        if !positions.is_empty() {
            let centroid = positions.iter().sum::<Vector3<f64>>() / positions.len() as f64;
            let bbox = crate::graph::Aabb::hull(positions.iter()).unwrap();
            let obj = match backend.node_mut(id).unwrap() {
                crate::graph::NodePayload::Object(o) => o,
                _ => unreachable!(),
            };
            obj.centroid = centroid;
            obj.bbox = bbox;
            report.objects_recomputed += 1;
        } else if let Some(pose) = solution.values.get(&id) {
            // Vertex-less candidate object: move it rigidly by its solved
            // frame change.
            let obj = match backend.node_mut(id).unwrap() {
                crate::graph::NodePayload::Object(o) => o,
                _ => unreachable!(),
            };
            let delta = *pose * frame_at(obj.centroid).inverse();
            obj.centroid = pose.translation();
            obj.bbox = obj.bbox.transformed(&delta);
            report.objects_recomputed += 1;
        }
    }
    report
}

/// Plain-text edge-list dump (`FRAME` and `EDGE` lines) for external
/// cross-checks. Uses the solved values when given, otherwise the initial
/// ones.
pub fn dump_edgelist(dg: &DeformationGraph, solution: Option<&DefSolution>) -> String {
    let mut out = String::new();
    for (id, initial) in &dg.nodes {
        let pose = solution
            .and_then(|s| s.values.get(id))
            .unwrap_or(initial);
        out.push_str("FRAME ");
        out.push_str(&id.to_string());
        for x in pose.to_array() {
            out.push(' ');
            write_canonical_f64(&mut out, x);
        }
        out.push('\n');
    }
    for e in &dg.edges {
        out.push_str("EDGE ");
        out.push_str(e.edge_type.name());
        out.push(' ');
        out.push_str(&dg.nodes[e.from].0.to_string());
        out.push(' ');
        out.push_str(&dg.nodes[e.to].0.to_string());
        for x in e.measurement.to_array() {
            out.push(' ');
            write_canonical_f64(&mut out, x);
        }
        for k in 0..6 {
            out.push(' ');
            write_canonical_f64(&mut out, e.omega_diag[k]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::boxminus;
    use crate::graph::{
        AgentNode, FrameStatus, MeshControlNode, NodePayload, PlaceNode, RobotCapabilities,
    };
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn agent_id(robot: u32, i: u64) -> NodeId {
        NodeId::new(RobotId(robot), Layer::Agent, i)
    }

    /// Straight-line single-robot world; backend == raw (no drift).
    fn straight_graph(n: u64) -> SceneGraph {
        let mut g = SceneGraph::new();
        g.ensure_robot(RobotId(0), RobotCapabilities::full());
        g.set_frame(RobotId(0), FrameStatus::Initialized(Pose::identity()))
            .unwrap();
        for i in 0..n {
            g.add_node(
                agent_id(0, i),
                NodePayload::Agent(AgentNode {
                    pose: Pose::from_translation(Vector3::new(i as f64, 0.0, 0.0)),
                    timestamp: i as f64,
                }),
            )
            .unwrap();
        }
        g
    }

    #[test]
    fn straight_trajectory_builds_odometry_chain_only() {
        let g = straight_graph(6);
        let dg = build(&g, &g, &[], &[], &OmegaTable::default());
        assert_eq!(dg.nodes.len(), 6);
        assert_eq!(dg.edges.len(), 5);
        assert!(dg.edges.iter().all(|e| e.edge_type == EdgeType::Odometry));
        assert_eq!(dg.anchors, vec![0]);
    }

    #[test]
    fn place_candidate_gets_identity_merge_factor() {
        let mut g = straight_graph(2);
        g.ensure_robot(RobotId(1), RobotCapabilities::full());
        g.set_frame(RobotId(1), FrameStatus::Initialized(Pose::identity()))
            .unwrap();
        g.add_node(
            agent_id(1, 0),
            NodePayload::Agent(AgentNode {
                pose: Pose::identity(),
                timestamp: 0.0,
            }),
        )
        .unwrap();
        for robot in 0..2u32 {
            g.add_node(
                NodeId::new(RobotId(robot), Layer::Place, 0),
                NodePayload::Place(PlaceNode {
                    position: Vector3::new(0.5, 0.0, 0.0),
                    radius: 0.7,
                }),
            )
            .unwrap();
            g.add_edge(agent_id(robot, 0), NodeId::new(RobotId(robot), Layer::Place, 0))
                .unwrap();
        }
        let candidates = vec![MergeCandidate {
            a: NodeId::new(RobotId(0), Layer::Place, 0),
            b: NodeId::new(RobotId(1), Layer::Place, 0),
            kind: CandidateKind::Place,
            relative_transform: Pose::identity(),
            status: CandidateStatus::Proposed,
        }];
        let dg = build(&g, &g, &[], &candidates, &OmegaTable::default());
        let merge_edges: Vec<&DefEdge> = dg
            .edges
            .iter()
            .filter(|e| e.edge_type == EdgeType::MergeFactor)
            .collect();
        assert_eq!(merge_edges.len(), 1);
        assert!(boxminus(&merge_edges[0].measurement, &Pose::identity()).norm() < 1e-15);
        assert_eq!(dg.candidate_edges.len(), 1);
        assert!(dg.candidate_edges[0].is_some());
    }

    #[test]
    fn edge_counts_match_independent_recount() {
        // Two-robot scene: count expected edges by type straight off the
        // scene graph, then compare with the built deformation graph.
        let mut g = straight_graph(4);
        g.ensure_robot(RobotId(1), RobotCapabilities::full());
        g.set_frame(RobotId(1), FrameStatus::Initialized(Pose::identity()))
            .unwrap();
        for i in 0..3u64 {
            g.add_node(
                agent_id(1, i),
                NodePayload::Agent(AgentNode {
                    pose: Pose::from_translation(Vector3::new(i as f64, 2.0, 0.0)),
                    timestamp: i as f64,
                }),
            )
            .unwrap();
        }
        for robot in 0..2u32 {
            for i in 0..2u64 {
                g.add_node(
                    NodeId::new(RobotId(robot), Layer::Place, i),
                    NodePayload::Place(PlaceNode {
                        position: Vector3::new(i as f64, robot as f64 * 2.0, 1.0),
                        radius: 0.5,
                    }),
                )
                .unwrap();
            }
            g.add_edge(
                NodeId::new(RobotId(robot), Layer::Place, 0),
                NodeId::new(RobotId(robot), Layer::Place, 1),
            )
            .unwrap();
            g.add_edge(agent_id(robot, 0), NodeId::new(RobotId(robot), Layer::Place, 0))
                .unwrap();
            g.add_node(
                NodeId::new(RobotId(robot), Layer::MeshControl, 0),
                NodePayload::MeshControl(MeshControlNode {
                    position: Vector3::new(0.0, robot as f64 * 2.0, 0.5),
                }),
            )
            .unwrap();
        }
        let closures = vec![LoopClosure {
            from: agent_id(0, 0),
            to: agent_id(1, 0),
            measurement: Pose::from_translation(Vector3::new(0.0, 2.0, 0.0)),
            covariance: Covariance6::identity(),
        }];
        let dg = build(&g, &g, &closures, &[], &OmegaTable::default());

        let count = |ty: EdgeType| dg.edges.iter().filter(|e| e.edge_type == ty).count();
        // odometry: (4-1) + (3-1); rigidity: 2 place-place + 2 control
        // attachments; place_agent: 2; loop closures: 1
        assert_eq!(count(EdgeType::Odometry), 5);
        assert_eq!(count(EdgeType::Rigidity), 4);
        assert_eq!(count(EdgeType::PlaceAgent), 2);
        assert_eq!(count(EdgeType::LoopClosure), 1);
        assert_eq!(count(EdgeType::MergeFactor), 0);
        assert_eq!(dg.edges.len(), 12);
    }

    #[test]
    fn noiseless_build_is_zero_residual_and_optimal() {
        let g = straight_graph(5);
        let dg = build(&g, &g, &[], &[], &OmegaTable::default());
        let sol = optimize(&dg, &GncConfig::for_dim(6)).unwrap();
        assert!(sol.objective_before < 1e-18);
        assert!(sol.objective_after <= sol.objective_before + 1e-12);
        for (id, pose) in &sol.values {
            let built = dg.nodes[dg.index[id]].1;
            assert!(boxminus(pose, &built).norm() < 1e-10);
        }
    }

    #[test]
    fn uninitialized_robot_closures_are_skipped() {
        let mut g = straight_graph(2);
        g.ensure_robot(RobotId(1), RobotCapabilities::full());
        g.add_node(
            agent_id(1, 0),
            NodePayload::Agent(AgentNode {
                pose: Pose::identity(),
                timestamp: 0.0,
            }),
        )
        .unwrap();
        let closures = vec![LoopClosure {
            from: agent_id(0, 0),
            to: agent_id(1, 0),
            measurement: Pose::identity(),
            covariance: Covariance6::identity(),
        }];
        let dg = build(&g, &g, &closures, &[], &OmegaTable::default());
        assert_eq!(dg.report.closures_skipped_uninitialized, 1);
        assert!(dg.edges.iter().all(|e| e.edge_type != EdgeType::LoopClosure));
    }

    /// Independent reference: solve the same weighted least-squares problem
    /// with numeric Jacobians and a dense normal-equation solve, all local
    /// to this test.
    fn reference_solve(dg: &DeformationGraph, iterations: usize) -> Vec<Pose> {
        use nalgebra::{DMatrix, DVector};
        let free: Vec<usize> = (0..dg.nodes.len())
            .filter(|i| !dg.anchors.contains(i))
            .collect();
        let offset: BTreeMap<usize, usize> =
            free.iter().enumerate().map(|(k, i)| (*i, k * 6)).collect();
        let mut values: Vec<Pose> = dg.nodes.iter().map(|(_, p)| *p).collect();
        let dim = free.len() * 6;

        let residual = |values: &[Pose], e: &DefEdge| -> Vector6<f64> {
            let rel = values[e.from].inverse() * values[e.to];
            let r = boxminus(&rel, &e.measurement);
            Vector6::from_fn(|k, _| r.0[k] * e.omega_diag[k].sqrt())
        };
        for _ in 0..iterations {
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut gvec = DVector::<f64>::zeros(dim);
            for e in &dg.edges {
                let r0 = residual(&values, e);
                let mut jac: Vec<(usize, nalgebra::Matrix6<f64>)> = Vec::new();
                for &vi in [e.from, e.to].iter() {
                    if !offset.contains_key(&vi) {
                        continue;
                    }
                    let mut j = nalgebra::Matrix6::zeros();
                    for k in 0..6 {
                        let mut d = Vector6::zeros();
                        d[k] = 1e-7;
                        let mut pert = values.to_vec();
                        pert[vi] = pert[vi].boxplus(&crate::se3::Twist(d));
                        let rp = residual(&pert, e);
                        j.set_column(k, &((rp - r0) / 1e-7));
                    }
                    jac.push((vi, j));
                }
                for (vi, ji) in &jac {
                    let oi = offset[vi];
                    let gi = ji.transpose() * r0;
                    for k in 0..6 {
                        gvec[oi + k] += gi[k];
                    }
                    for (vj, jj) in &jac {
                        let oj = offset[vj];
                        let hij = ji.transpose() * jj;
                        for r in 0..6 {
                            for c in 0..6 {
                                h[(oi + r, oj + c)] += hij[(r, c)];
                            }
                        }
                    }
                }
            }
            for i in 0..dim {
                h[(i, i)] += 1e-9;
            }
            let delta = h.cholesky().unwrap().solve(&(-gvec));
            for (k, &vi) in free.iter().enumerate() {
                let d = Vector6::from_fn(|r, _| delta[k * 6 + r]);
                values[vi] = values[vi].boxplus(&crate::se3::Twist(d));
            }
        }
        values
    }

    #[test]
    fn square_loop_closure_fixes_drift_and_matches_reference() {
        // Square trajectory with accumulated odometry drift plus one exact
        // closure back to the start.
        let side = 5usize;
        let mut true_poses = Vec::new();
        let mut heading = 0.0f64;
        let mut position = Vector3::zeros();
        for leg in 0..4 {
            for _ in 0..side {
                true_poses.push(Pose::from_axis_angle(Vector3::z(), heading, position));
                let dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
                position += dir;
            }
            let _ = leg;
            heading += std::f64::consts::FRAC_PI_2;
        }
        true_poses.push(Pose::from_axis_angle(Vector3::z(), heading, position));
        let n = true_poses.len();

        // Drifted odometry: relative motions with a deterministic bias.
        let mut raw = SceneGraph::new();
        raw.ensure_robot(RobotId(0), RobotCapabilities::full());
        let mut drifted = vec![Pose::identity()];
        for i in 1..n {
            let rel = true_poses[i - 1].inverse() * true_poses[i];
            let bias = crate::se3::Twist(Vector6::new(0.0, 0.0, 0.004, 0.01, 0.0, 0.0));
            let noisy = rel.boxplus(&bias);
            let next = drifted[i - 1] * noisy;
            drifted.push(next);
        }
        for (i, pose) in drifted.iter().enumerate() {
            raw.add_node(
                agent_id(0, i as u64),
                NodePayload::Agent(AgentNode {
                    pose: *pose,
                    timestamp: i as f64,
                }),
            )
            .unwrap();
        }
        raw.set_frame(RobotId(0), FrameStatus::Initialized(Pose::identity()))
            .unwrap();

        let closure = LoopClosure {
            from: agent_id(0, 0),
            to: agent_id(0, (n - 1) as u64),
            measurement: true_poses[0].inverse() * true_poses[n - 1],
            covariance: Covariance6::identity(),
        };
        let dg = build(&raw, &raw, &[closure], &[], &OmegaTable::default());
        let sol = optimize(&dg, &GncConfig::for_dim(6)).unwrap();

        let drift_before = (drifted[n - 1].translation()
            - (true_poses[0].inverse() * true_poses[n - 1]).translation())
        .norm();
        let end = sol.values[&agent_id(0, (n - 1) as u64)];
        let expected_end = true_poses[0].inverse() * true_poses[n - 1];
        let err_after = (end.translation() - expected_end.translation()).norm();
        let trajectory_length = 4.0 * side as f64;
        assert!(drift_before > 0.1, "scenario should drift, got {drift_before}");
        assert!(
            err_after < 1e-3 * trajectory_length,
            "endpoint error {err_after}"
        );
        assert!(sol.objective_after <= sol.objective_before + 1e-9);

        // Independent numeric-Jacobian reference converges to the same
        // minimum.
        let reference = reference_solve(&dg, 15);
        for (i, (id, _)) in dg.nodes.iter().enumerate() {
            let gap = boxminus(&sol.values[id], &reference[i]).norm();
            assert!(gap < 1e-6, "unknown {id} differs from reference by {gap}");
        }
    }

    #[test]
    fn gauge_anchor_shift_moves_solution_rigidly() {
        let g = straight_graph(4);
        let dg = build(&g, &g, &[], &[], &OmegaTable::default());
        let sol = optimize(&dg, &GncConfig::for_dim(6)).unwrap();

        let shift = Pose::from_axis_angle(Vector3::z(), 0.3, Vector3::new(2.0, -1.0, 0.5));
        let mut moved = dg.clone();
        for (_, pose) in moved.nodes.iter_mut() {
            *pose = shift * *pose;
        }
        let sol2 = optimize(&moved, &GncConfig::for_dim(6)).unwrap();
        for (id, pose) in &sol.values {
            let expect = shift * *pose;
            assert!(boxminus(&sol2.values[id], &expect).norm() < 1e-9);
        }
        assert_abs_diff_eq!(
            sol.objective_after,
            sol2.objective_after,
            epsilon = 1e-9
        );
    }

    #[test]
    fn interpolation_identity_and_blend() {
        let controls = vec![Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)];
        let vertices = vec![Vector3::new(1.0, 0.0, 0.0)];
        let bindings = bind_mesh(&vertices, &controls, 2);
        assert_eq!(bindings[0].len(), 2);
        assert_abs_diff_eq!(bindings[0][0].1, 0.5, epsilon = 1e-12);

        // identity frames leave the vertex unchanged
        let solved = vec![frame_at(controls[0]), frame_at(controls[1])];
        let (moved, unbound) = interpolate_mesh(&vertices, &bindings, &controls, &solved);
        assert_eq!(unbound, 0);
        assert_abs_diff_eq!((moved[0] - vertices[0]).norm(), 0.0, epsilon = 1e-12);

        // one control translated +1 in x, 50/50 blend moves the vertex +0.5
        let solved = vec![
            frame_at(controls[0]),
            frame_at(controls[1] + Vector3::new(1.0, 0.0, 0.0)),
        ];
        let (moved, _) = interpolate_mesh(&vertices, &bindings, &controls, &solved);
        assert_abs_diff_eq!(
            (moved[0] - Vector3::new(1.5, 0.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rigid_motion_of_all_controls_moves_vertices_rigidly() {
        let mut rng = StdRng::seed_from_u64(4);
        let controls: Vec<Vector3<f64>> = (0..40)
            .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0)))
            .collect();
        let vertices: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0)))
            .collect();
        let bindings = bind_mesh(&vertices, &controls, 4);
        let motion = Pose::from_axis_angle(
            Vector3::new(0.3, -1.0, 0.5),
            0.8,
            Vector3::new(3.0, 0.5, -2.0),
        );
        let solved: Vec<Pose> = controls.iter().map(|g| motion * frame_at(*g)).collect();
        let (moved, unbound) = interpolate_mesh(&vertices, &bindings, &controls, &solved);
        assert_eq!(unbound, 0);
        let mut worst: f64 = 0.0;
        for (v, m) in vertices.iter().zip(moved.iter()) {
            worst = worst.max((m - motion.transform_point(v)).norm());
        }
        assert!(worst < 1e-9, "max deviation {worst}");
    }

    #[test]
    fn write_back_identity_changes_nothing() {
        let mut g = straight_graph(3);
        let dg = build(&g, &g.clone(), &[], &[], &OmegaTable::default());
        let sol = optimize(&dg, &GncConfig::for_dim(6)).unwrap();
        let before = crate::graph::to_canonical_json(&g).unwrap();
        write_back(&mut g, &sol, 4);
        assert_eq!(crate::graph::to_canonical_json(&g).unwrap(), before);
    }

    #[test]
    fn write_back_recomputes_object_geometry_from_vertices() {
        let mut g = straight_graph(2);
        let mut vertex_ids = Vec::new();
        for (i, corner) in crate::graph::Aabb::new(
            Vector3::new(-0.5, -0.5, -0.5),
            Vector3::new(0.5, 0.5, 0.5),
        )
        .corners()
        .iter()
        .enumerate()
        {
            let vid = NodeId::new(RobotId(0), Layer::MeshControl, i as u64);
            g.add_node(
                vid,
                NodePayload::MeshControl(MeshControlNode { position: *corner }),
            )
            .unwrap();
            vertex_ids.push(vid);
        }
        let oid = NodeId::new(RobotId(0), Layer::Object, 0);
        g.add_node(
            oid,
            NodePayload::Object(crate::graph::ObjectNode {
                centroid: Vector3::zeros(),
                bbox: crate::graph::Aabb::new(Vector3::repeat(-0.5), Vector3::repeat(0.5)),
                semantic_label: 2,
                vertex_ids,
            }),
        )
        .unwrap();

        // Pretend the optimizer moved every control +1 in x.
        let dg = build(&g, &g.clone(), &[], &[], &OmegaTable::default());
        let mut sol = optimize(&dg, &GncConfig::for_dim(6)).unwrap();
        for (id, pose) in sol.values.iter_mut() {
            if id.layer == Layer::MeshControl {
                *pose = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)) * *pose;
            }
        }
        write_back(&mut g, &sol, 4);
        let obj = g.node(oid).unwrap().as_object().unwrap();
        assert_abs_diff_eq!(
            (obj.centroid - Vector3::new(1.0, 0.0, 0.0)).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            (obj.bbox.min - Vector3::new(0.5, -0.5, -0.5)).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn edgelist_dump_has_frames_and_edges() {
        let g = straight_graph(3);
        let dg = build(&g, &g, &[], &[], &OmegaTable::default());
        let dump = dump_edgelist(&dg, None);
        let frames = dump.lines().filter(|l| l.starts_with("FRAME ")).count();
        let edges = dump.lines().filter(|l| l.starts_with("EDGE odometry ")).count();
        assert_eq!(frames, 3);
        assert_eq!(edges, 2);
        let first = dump.lines().next().unwrap();
        assert!(first.starts_with("FRAME 0/agent/0 1.0000000000000000e0"));
    }
}
