//! The layered scene graph: nodes with robot/frame provenance, intra-layer
//! adjacency, upward inclusion edges, and an exactly-undoable merge journal.

mod serialize;

pub use serialize::{from_canonical_json, to_canonical_json, write_canonical_f64, SerializeError};
pub(crate) use serialize::{doc_to_graph, graph_to_doc, CanonicalFormatter, GraphDoc};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::se3::Pose;

/// Identifies one robot in the team.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RobotId(pub u32);

impl fmt::Display for RobotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The scene graph layers, ordered bottom-up for inclusion checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    Agent,
    Object,
    Place,
    Room,
    MeshControl,
}

impl Layer {
    pub const ALL: [Layer; 5] = [
        Layer::Agent,
        Layer::Object,
        Layer::Place,
        Layer::Room,
        Layer::MeshControl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Agent => "agent",
            Layer::Object => "object",
            Layer::Place => "place",
            Layer::Room => "room",
            Layer::MeshControl => "mesh_control",
        }
    }

    pub fn from_name(name: &str) -> Option<Layer> {
        Layer::ALL.iter().copied().find(|l| l.name() == name)
    }
}

/// Globally unique node identity: robot, layer, and a monotone per-robot,
/// per-layer index that is never reused after deletion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub robot: RobotId,
    pub layer: Layer,
    pub index: u64,
}

impl NodeId {
    pub fn new(robot: RobotId, layer: Layer, index: u64) -> Self {
        NodeId {
            robot,
            layer,
            index,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.robot, self.layer.name(), self.index)
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('/');
        let robot = parts
            .next()
            .and_then(|p| p.parse::<u32>().ok())
            .ok_or_else(|| format!("bad robot id in `{s}`"))?;
        let layer = parts
            .next()
            .and_then(Layer::from_name)
            .ok_or_else(|| format!("bad layer in `{s}`"))?;
        let index = parts
            .next()
            .and_then(|p| p.parse::<u64>().ok())
            .ok_or_else(|| format!("bad index in `{s}`"))?;
        if parts.next().is_some() {
            return Err(format!("trailing junk in `{s}`"));
        }
        Ok(NodeId::new(RobotId(robot), layer, index))
    }
}

/// Axis-aligned box, `min <= max` componentwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Aabb { min, max }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i] <= self.max[i])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) / 2.0
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let (lo, hi) = (self.min, self.max);
        [
            Vector3::new(lo.x, lo.y, lo.z),
            Vector3::new(hi.x, lo.y, lo.z),
            Vector3::new(lo.x, hi.y, lo.z),
            Vector3::new(hi.x, hi.y, lo.z),
            Vector3::new(lo.x, lo.y, hi.z),
            Vector3::new(hi.x, lo.y, hi.z),
            Vector3::new(lo.x, hi.y, hi.z),
            Vector3::new(hi.x, hi.y, hi.z),
        ]
    }

    /// Axis-aligned hull of a point set; `None` when empty.
    pub fn hull<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut aabb = Aabb::new(first, first);
        for p in it {
            for i in 0..3 {
                aabb.min[i] = aabb.min[i].min(p[i]);
                aabb.max[i] = aabb.max[i].max(p[i]);
            }
        }
        Some(aabb)
    }

    /// Hull of this box's corners mapped through a rigid transform.
    pub fn transformed(&self, pose: &Pose) -> Aabb {
        let corners = self.corners().map(|c| pose.transform_point(&c));
        Aabb::hull(corners.iter()).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentNode {
    /// Pose in the owning robot's frame (local until the robot initializes).
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectNode {
    pub centroid: Vector3<f64>,
    pub bbox: Aabb,
    pub semantic_label: u32,
    /// Mesh-control nodes supporting this object.
    pub vertex_ids: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaceNode {
    pub position: Vector3<f64>,
    /// Free-space clearance, > 0.
    pub radius: f64,
}

/// Rooms are passive containers; nothing in the backend creates or segments
/// them.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomNode {
    pub bbox: Aabb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshControlNode {
    pub position: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodePayload {
    Agent(AgentNode),
    Object(ObjectNode),
    Place(PlaceNode),
    Room(RoomNode),
    MeshControl(MeshControlNode),
}

impl NodePayload {
    pub fn layer(&self) -> Layer {
        match self {
            NodePayload::Agent(_) => Layer::Agent,
            NodePayload::Object(_) => Layer::Object,
            NodePayload::Place(_) => Layer::Place,
            NodePayload::Room(_) => Layer::Room,
            NodePayload::MeshControl(_) => Layer::MeshControl,
        }
    }

    pub fn as_agent(&self) -> Option<&AgentNode> {
        match self {
            NodePayload::Agent(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_object(&self) -> Option<&ObjectNode> {
        match self {
            NodePayload::Object(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_place(&self) -> Option<&PlaceNode> {
        match self {
            NodePayload::Place(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_mesh_control(&self) -> Option<&MeshControlNode> {
        match self {
            NodePayload::MeshControl(n) => Some(n),
            _ => None,
        }
    }

    /// Representative position used for distance queries.
    pub fn position(&self) -> Vector3<f64> {
        match self {
            NodePayload::Agent(n) => n.pose.translation(),
            NodePayload::Object(n) => n.centroid,
            NodePayload::Place(n) => n.position,
            NodePayload::Room(n) => n.bbox.center(),
            NodePayload::MeshControl(n) => n.position,
        }
    }

    fn transformed(&self, pose: &Pose) -> NodePayload {
        match self {
            NodePayload::Agent(n) => NodePayload::Agent(AgentNode {
                pose: *pose * n.pose,
                timestamp: n.timestamp,
            }),
            NodePayload::Object(n) => NodePayload::Object(ObjectNode {
                centroid: pose.transform_point(&n.centroid),
                bbox: n.bbox.transformed(pose),
                semantic_label: n.semantic_label,
                vertex_ids: n.vertex_ids.clone(),
            }),
            NodePayload::Place(n) => NodePayload::Place(PlaceNode {
                position: pose.transform_point(&n.position),
                radius: n.radius,
            }),
            NodePayload::Room(n) => NodePayload::Room(RoomNode {
                bbox: n.bbox.transformed(pose),
            }),
            NodePayload::MeshControl(n) => NodePayload::MeshControl(MeshControlNode {
                position: pose.transform_point(&n.position),
            }),
        }
    }
}

/// What a robot contributes; robots never submit nodes outside
/// `layers_provided`.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotCapabilities {
    pub has_semantics: bool,
    pub has_mesh: bool,
    pub layers_provided: BTreeSet<Layer>,
}

impl RobotCapabilities {
    pub fn full() -> Self {
        RobotCapabilities {
            has_semantics: true,
            has_mesh: true,
            layers_provided: Layer::ALL.into_iter().collect(),
        }
    }

    /// Derives the layer set from the two capability flags.
    pub fn from_flags(has_semantics: bool, has_mesh: bool) -> Self {
        let mut layers: BTreeSet<Layer> = [Layer::Agent, Layer::Place, Layer::Room]
            .into_iter()
            .collect();
        if has_semantics {
            layers.insert(Layer::Object);
        }
        if has_mesh {
            layers.insert(Layer::MeshControl);
        }
        RobotCapabilities {
            has_semantics,
            has_mesh,
            layers_provided: layers,
        }
    }
}

/// Whether the robot's frame has been resolved into the global frame.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameStatus {
    Uninitialized,
    /// Transform from the robot's local frame to the global frame.
    Initialized(Pose),
}

impl FrameStatus {
    pub fn pose(&self) -> Option<&Pose> {
        match self {
            FrameStatus::Initialized(p) => Some(p),
            FrameStatus::Uninitialized => None,
        }
    }

    pub fn is_initialized(&self) -> bool {
        matches!(self, FrameStatus::Initialized(_))
    }
}

/// Dense mesh vertices owned by one robot; updated by interpolation, not
/// part of any node layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseMesh {
    pub vertices: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotInfo {
    pub capabilities: RobotCapabilities,
    pub frame: FrameStatus,
    pub mesh: DenseMesh,
    /// Next available node index per layer; indices are never reused.
    pub next_index: BTreeMap<Layer, u64>,
}

impl RobotInfo {
    pub fn new(capabilities: RobotCapabilities) -> Self {
        RobotInfo {
            capabilities,
            frame: FrameStatus::Uninitialized,
            mesh: DenseMesh::default(),
            next_index: BTreeMap::new(),
        }
    }
}

/// Record of one merge, sufficient to undo it exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeRecord {
    pub keep: NodeId,
    pub absorb: NodeId,
    pub absorb_payload: NodePayload,
    pub keep_payload_before: NodePayload,
    /// Neighbors of `absorb` at merge time, sorted.
    pub absorb_neighbors: Vec<NodeId>,
    /// Edges that were newly added to `keep` by the rewire, sorted.
    pub rewired: Vec<NodeId>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("node `{0}` already exists (or its id was already consumed)")]
    DuplicateId(NodeId),
    #[error("unknown node `{0}`")]
    UnknownId(NodeId),
    #[error("unknown robot `{0}`")]
    UnknownRobot(RobotId),
    #[error("payload layer {payload:?} does not match id layer {id:?}")]
    LayerMismatch { id: Layer, payload: Layer },
    #[error("robot {robot} does not provide layer {layer:?}")]
    LayerNotProvided { robot: RobotId, layer: Layer },
    #[error("edge `{0}` -- `{1}` violates the layer rules")]
    InvalidEdge(NodeId, NodeId),
    #[error("edge `{0}` -- `{1}` already exists")]
    DuplicateEdge(NodeId, NodeId),
    #[error("no edge `{0}` -- `{1}`")]
    UnknownEdge(NodeId, NodeId),
    #[error("cannot merge `{0}` with itself")]
    SelfMerge(NodeId),
    #[error("cannot merge across layers: `{0}` vs `{1}`")]
    CrossLayerMerge(NodeId, NodeId),
    #[error("cannot merge two nodes of the same robot: `{0}`, `{1}`")]
    SameRobotMerge(NodeId, NodeId),
    #[error("merge record for `{0}` <- `{1}` is stale or already undone")]
    StaleMergeRecord(NodeId, NodeId),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Allowed inclusion edges, bottom layer first.
const INCLUSIONS: [(Layer, Layer); 3] = [
    (Layer::Object, Layer::Place),
    (Layer::Place, Layer::Room),
    (Layer::Agent, Layer::Place),
];

fn edge_allowed(a: Layer, b: Layer) -> bool {
    a == b
        || INCLUSIONS
            .iter()
            .any(|&(lo, hi)| (a, b) == (lo, hi) || (b, a) == (lo, hi))
}

/// The layered multigraph with provenance and merge journal. Single-writer;
/// readers clone snapshots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGraph {
    robots: BTreeMap<RobotId, RobotInfo>,
    nodes: BTreeMap<NodeId, NodePayload>,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    merges: Vec<MergeRecord>,
    /// Absorbed node -> live representative.
    redirects: BTreeMap<NodeId, NodeId>,
}

impl SceneGraph {
    pub fn new() -> Self {
        SceneGraph::default()
    }

    pub fn ensure_robot(&mut self, robot: RobotId, capabilities: RobotCapabilities) {
        self.robots
            .entry(robot)
            .or_insert_with(|| RobotInfo::new(capabilities));
    }

    pub fn robots(&self) -> impl Iterator<Item = (&RobotId, &RobotInfo)> {
        self.robots.iter()
    }

    pub fn robot(&self, robot: RobotId) -> Option<&RobotInfo> {
        self.robots.get(&robot)
    }

    pub fn robot_mut(&mut self, robot: RobotId) -> Option<&mut RobotInfo> {
        self.robots.get_mut(&robot)
    }

    pub fn set_frame(&mut self, robot: RobotId, frame: FrameStatus) -> Result<(), GraphError> {
        self.robots
            .get_mut(&robot)
            .ok_or(GraphError::UnknownRobot(robot))?
            .frame = frame;
        Ok(())
    }

    /// Allocates the next id for `(robot, layer)`; never returns a
    /// previously used index.
    pub fn allocate_id(&mut self, robot: RobotId, layer: Layer) -> Result<NodeId, GraphError> {
        let info = self
            .robots
            .get_mut(&robot)
            .ok_or(GraphError::UnknownRobot(robot))?;
        let next = info.next_index.entry(layer).or_insert(0);
        let id = NodeId::new(robot, layer, *next);
        *next += 1;
        Ok(id)
    }

    pub fn add_node(&mut self, id: NodeId, payload: NodePayload) -> Result<(), GraphError> {
        if payload.layer() != id.layer {
            return Err(GraphError::LayerMismatch {
                id: id.layer,
                payload: payload.layer(),
            });
        }
        if self.nodes.contains_key(&id) || self.redirects.contains_key(&id) {
            return Err(GraphError::DuplicateId(id));
        }
        let info = self
            .robots
            .get_mut(&id.robot)
            .ok_or(GraphError::UnknownRobot(id.robot))?;
        // Keep the allocator ahead of externally supplied indices.
        let next = info.next_index.entry(id.layer).or_insert(0);
        *next = (*next).max(id.index + 1);
        self.nodes.insert(id, payload);
        self.adjacency.insert(id, BTreeSet::new());
        Ok(())
    }

    /// Removes a node and all incident edges.
    pub fn remove_node(&mut self, id: NodeId) -> Result<NodePayload, GraphError> {
        let payload = self.nodes.remove(&id).ok_or(GraphError::UnknownId(id))?;
        let neighbors = self.adjacency.remove(&id).unwrap_or_default();
        for n in neighbors {
            if let Some(adj) = self.adjacency.get_mut(&n) {
                adj.remove(&id);
            }
        }
        Ok(payload)
    }

    pub fn add_edge(&mut self, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        if a == b {
            return Err(GraphError::InvalidEdge(a, b));
        }
        if !self.nodes.contains_key(&a) {
            return Err(GraphError::UnknownId(a));
        }
        if !self.nodes.contains_key(&b) {
            return Err(GraphError::UnknownId(b));
        }
        if !edge_allowed(a.layer, b.layer) {
            return Err(GraphError::InvalidEdge(a, b));
        }
        if self.adjacency[&a].contains(&b) {
            return Err(GraphError::DuplicateEdge(a, b));
        }
        self.adjacency.get_mut(&a).unwrap().insert(b);
        self.adjacency.get_mut(&b).unwrap().insert(a);
        Ok(())
    }

    pub fn remove_edge(&mut self, a: NodeId, b: NodeId) -> Result<(), GraphError> {
        let present = self
            .adjacency
            .get(&a)
            .map(|adj| adj.contains(&b))
            .unwrap_or(false);
        if !present {
            return Err(GraphError::UnknownEdge(a, b));
        }
        self.adjacency.get_mut(&a).unwrap().remove(&b);
        self.adjacency.get_mut(&b).unwrap().remove(&a);
        Ok(())
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.adjacency
            .get(&a)
            .map(|adj| adj.contains(&b))
            .unwrap_or(false)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodePayload> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut NodePayload> {
        self.nodes.get_mut(&id)
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.values().map(|adj| adj.len()).sum::<usize>() / 2
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, &NodePayload)> {
        self.nodes.iter()
    }

    pub fn nodes_in_layer(&self, layer: Layer) -> impl Iterator<Item = (&NodeId, &NodePayload)> {
        self.nodes.iter().filter(move |(id, _)| id.layer == layer)
    }

    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = &NodeId> {
        self.adjacency.get(&id).into_iter().flatten()
    }

    /// All edges as normalized `(a, b)` pairs with `a < b`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.adjacency
            .iter()
            .flat_map(|(a, adj)| adj.iter().filter(move |b| a < b).map(move |b| (*a, *b)))
    }

    pub fn merge_journal(&self) -> &[MergeRecord] {
        &self.merges
    }

    /// Follows merge redirects to the live representative of `id`.
    pub fn resolve(&self, id: NodeId) -> NodeId {
        let mut current = id;
        while let Some(next) = self.redirects.get(&current) {
            current = *next;
        }
        current
    }

    /// Merges `absorb` into `keep`: rewires edges, unions object vertex
    /// sets, tombstones `absorb`, and journals a record that undoes it all.
    pub fn merge_nodes(&mut self, keep: NodeId, absorb: NodeId) -> Result<MergeRecord, GraphError> {
        if keep == absorb {
            return Err(GraphError::SelfMerge(keep));
        }
        if keep.layer != absorb.layer {
            return Err(GraphError::CrossLayerMerge(keep, absorb));
        }
        if keep.robot == absorb.robot {
            return Err(GraphError::SameRobotMerge(keep, absorb));
        }
        if !self.nodes.contains_key(&keep) {
            return Err(GraphError::UnknownId(keep));
        }
        if !self.nodes.contains_key(&absorb) {
            return Err(GraphError::UnknownId(absorb));
        }

        let absorb_neighbors: Vec<NodeId> =
            self.adjacency[&absorb].iter().copied().collect();
        let mut rewired = Vec::new();
        for n in &absorb_neighbors {
            self.remove_edge(absorb, *n)?;
            if *n != keep && !self.has_edge(keep, *n) {
                self.add_edge(keep, *n)?;
                rewired.push(*n);
            }
        }

        let keep_payload_before = self.nodes[&keep].clone();
        let absorb_payload = self.remove_node(absorb)?;

        // Objects pool their supporting vertices so centroid/bbox
        // recomputation sees both robots' geometry.
        if let (NodePayload::Object(k), NodePayload::Object(a)) =
            (self.nodes.get_mut(&keep).unwrap(), &absorb_payload)
        {
            let mut union: BTreeSet<NodeId> = k.vertex_ids.iter().copied().collect();
            union.extend(a.vertex_ids.iter().copied());
            k.vertex_ids = union.into_iter().collect();
        }

        let record = MergeRecord {
            keep,
            absorb,
            absorb_payload,
            keep_payload_before,
            absorb_neighbors,
            rewired,
        };
        self.merges.push(record.clone());
        self.redirects.insert(absorb, keep);
        Ok(record)
    }

    /// Undoes a merge exactly. The record must be the most recent un-undone
    /// merge touching either of its nodes.
    pub fn undo_merge(&mut self, record: &MergeRecord) -> Result<(), GraphError> {
        let touching = self.merges.iter().rposition(|r| {
            r.keep == record.keep
                || r.absorb == record.absorb
                || r.keep == record.absorb
                || r.absorb == record.keep
        });
        let pos = match touching {
            Some(pos) if self.merges[pos] == *record => pos,
            _ => return Err(GraphError::StaleMergeRecord(record.keep, record.absorb)),
        };
        self.merges.remove(pos);
        self.redirects.remove(&record.absorb);

        *self.nodes.get_mut(&record.keep).unwrap() = record.keep_payload_before.clone();
        for n in &record.rewired {
            self.remove_edge(record.keep, *n)?;
        }
        self.nodes
            .insert(record.absorb, record.absorb_payload.clone());
        self.adjacency.insert(record.absorb, BTreeSet::new());
        for n in &record.absorb_neighbors {
            self.add_edge(record.absorb, *n)?;
        }
        Ok(())
    }

    /// Rigidly moves every node (and the dense mesh) of one robot —
    /// all of that robot's content and nothing else.
    pub fn transform_robot(&mut self, robot: RobotId, pose: &Pose) -> Result<(), GraphError> {
        if !self.robots.contains_key(&robot) {
            return Err(GraphError::UnknownRobot(robot));
        }
        let ids: Vec<NodeId> = self
            .nodes
            .keys()
            .filter(|id| id.robot == robot)
            .copied()
            .collect();
        for id in ids {
            let payload = self.nodes.get_mut(&id).unwrap();
            *payload = payload.transformed(pose);
        }
        let mesh = &mut self.robots.get_mut(&robot).unwrap().mesh;
        for v in &mut mesh.vertices {
            *v = pose.transform_point(v);
        }
        Ok(())
    }

    /// Checks the structural invariants; used by tests and the stress
    /// harness rather than on every mutation.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (id, payload) in &self.nodes {
            if payload.layer() != id.layer {
                return Err(GraphError::Invariant(format!(
                    "node `{id}` payload layer mismatch"
                )));
            }
            if !self.robots.contains_key(&id.robot) {
                return Err(GraphError::Invariant(format!(
                    "node `{id}` references unknown robot"
                )));
            }
            match payload {
                NodePayload::Object(o) => {
                    if !o.bbox.is_valid() {
                        return Err(GraphError::Invariant(format!("object `{id}` bbox inverted")));
                    }
                }
                NodePayload::Place(p) => {
                    if p.radius <= 0.0 {
                        return Err(GraphError::Invariant(format!(
                            "place `{id}` has nonpositive radius"
                        )));
                    }
                }
                _ => {}
            }
        }
        for (a, adj) in &self.adjacency {
            if !self.nodes.contains_key(a) {
                return Err(GraphError::Invariant(format!(
                    "adjacency references dead node `{a}`"
                )));
            }
            for b in adj {
                if !self.nodes.contains_key(b) {
                    return Err(GraphError::Invariant(format!(
                        "edge `{a}` -- `{b}` references dead node"
                    )));
                }
                if !edge_allowed(a.layer, b.layer) {
                    return Err(GraphError::Invariant(format!(
                        "edge `{a}` -- `{b}` breaks layer rules"
                    )));
                }
            }
        }
        // Agent chains have strictly increasing timestamps per robot.
        for (robot, _) in &self.robots {
            let mut last: Option<f64> = None;
            for (_, payload) in self
                .nodes
                .iter()
                .filter(|(id, _)| id.robot == *robot && id.layer == Layer::Agent)
            {
                let t = payload.as_agent().unwrap().timestamp;
                if let Some(prev) = last {
                    if t <= prev {
                        return Err(GraphError::Invariant(format!(
                            "robot {robot} agent timestamps not strictly increasing"
                        )));
                    }
                }
                last = Some(t);
            }
        }
        Ok(())
    }
}
