//! The multi-robot frontend: ingests per-robot full snapshots into the
//! un-optimized, un-reconciled union graph, collects oracle loop closures,
//! and meters bandwidth per robot and channel.

use std::collections::{BTreeMap, BTreeSet};

use crate::align::LoopClosure;
use crate::graph::{
    to_canonical_json, FrameStatus, GraphError, Layer, NodeId, RobotId, SceneGraph,
};
use crate::wire::{GraphUpdate, WireEvent};

#[derive(Debug, thiserror::Error)]
pub enum FrontendError {
    #[error("malformed update from robot {robot}: {reason}")]
    Malformed { robot: RobotId, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Transmission channels mirrored by the bandwidth breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Channel {
    Graph,
    MeshControl,
    LoopClosureAux,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Graph, Channel::MeshControl, Channel::LoopClosureAux];

    pub fn name(&self) -> &'static str {
        match self {
            Channel::Graph => "graph",
            Channel::MeshControl => "mesh_control",
            Channel::LoopClosureAux => "loop_closure_aux",
        }
    }
}

/// Cumulative per-robot, per-channel byte counters plus the per-message
/// size history (the full-snapshot policy makes graph messages grow).
#[derive(Clone, Debug, Default)]
pub struct BandwidthLedger {
    totals: BTreeMap<(RobotId, Channel), u64>,
    history: BTreeMap<(RobotId, Channel), Vec<u64>>,
}

impl BandwidthLedger {
    pub fn record(&mut self, robot: RobotId, channel: Channel, bytes: u64) {
        *self.totals.entry((robot, channel)).or_insert(0) += bytes;
        self.history.entry((robot, channel)).or_default().push(bytes);
    }

    pub fn total(&self, robot: RobotId, channel: Channel) -> u64 {
        self.totals.get(&(robot, channel)).copied().unwrap_or(0)
    }

    pub fn channel_total(&self, channel: Channel) -> u64 {
        self.totals
            .iter()
            .filter(|((_, c), _)| *c == channel)
            .map(|(_, b)| *b)
            .sum()
    }

    pub fn history(&self, robot: RobotId, channel: Channel) -> &[u64] {
        self.history
            .get(&(robot, channel))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Node/edge counts from applying one snapshot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiffStats {
    pub nodes_added: usize,
    pub nodes_removed: usize,
    pub nodes_unchanged: usize,
    pub edges_added: usize,
    pub edges_removed: usize,
    pub edges_unchanged: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IngestOutcome {
    Applied(DiffStats),
    /// Out-of-order update dropped (non-fatal; counted).
    Stale { sequence: u64, last_applied: u64 },
}

/// The frontend graph: always the disjoint union of each robot's latest
/// snapshot, with no merges and no optimization applied.
#[derive(Clone, Debug, Default)]
pub struct FrontendGraph {
    graph: SceneGraph,
    last_sequence: BTreeMap<RobotId, u64>,
    stale_dropped: BTreeMap<RobotId, u64>,
    closures: Vec<LoopClosure>,
    bandwidth: BandwidthLedger,
}

impl FrontendGraph {
    pub fn new() -> Self {
        FrontendGraph::default()
    }

    /// Replaces the robot's slice of the union graph with the update's
    /// content. Stale sequences are dropped and counted, not errors.
    pub fn ingest(&mut self, update: &GraphUpdate) -> Result<IngestOutcome, FrontendError> {
        if let Some(last) = self.last_sequence.get(&update.robot) {
            if update.sequence <= *last {
                *self.stale_dropped.entry(update.robot).or_insert(0) += 1;
                return Ok(IngestOutcome::Stale {
                    sequence: update.sequence,
                    last_applied: *last,
                });
            }
        }
        self.validate_update(update)?;
        let stats = self.apply(update)?;
        self.last_sequence.insert(update.robot, update.sequence);
        Ok(IngestOutcome::Applied(stats))
    }

    fn validate_update(&self, update: &GraphUpdate) -> Result<(), FrontendError> {
        let robot = update.robot;
        let malformed = |reason: String| FrontendError::Malformed { robot, reason };
        let info = update
            .full_graph
            .robot(robot)
            .ok_or_else(|| malformed("update graph lacks the sending robot".into()))?;
        for (other, _) in update.full_graph.robots() {
            if *other != robot {
                return Err(malformed(format!("update contains foreign robot {other}")));
            }
        }
        for (id, _) in update.full_graph.nodes() {
            if id.robot != robot {
                return Err(malformed(format!("update contains foreign node `{id}`")));
            }
            if !info.capabilities.layers_provided.contains(&id.layer) {
                return Err(malformed(format!(
                    "node `{id}` is outside the robot's provided layers"
                )));
            }
        }
        update.full_graph.validate().map_err(FrontendError::Graph)
    }

    fn apply(&mut self, update: &GraphUpdate) -> Result<DiffStats, FrontendError> {
        let robot = update.robot;
        let incoming = &update.full_graph;

        let old_nodes: BTreeSet<NodeId> = self
            .graph
            .nodes()
            .filter(|(id, _)| id.robot == robot)
            .map(|(id, _)| *id)
            .collect();
        let new_nodes: BTreeSet<NodeId> = incoming.nodes().map(|(id, _)| *id).collect();
        let old_edges: BTreeSet<(NodeId, NodeId)> = self
            .graph
            .edges()
            .filter(|(a, _)| a.robot == robot)
            .collect();
        let new_edges: BTreeSet<(NodeId, NodeId)> = incoming.edges().collect();

        let stats = DiffStats {
            nodes_added: new_nodes.difference(&old_nodes).count(),
            nodes_removed: old_nodes.difference(&new_nodes).count(),
            nodes_unchanged: old_nodes.intersection(&new_nodes).count(),
            edges_added: new_edges.difference(&old_edges).count(),
            edges_removed: old_edges.difference(&new_edges).count(),
            edges_unchanged: old_edges.intersection(&new_edges).count(),
        };

        // Preserve the frame status the backend assigned; everything else
        // about the robot comes from the update.
        let prior_frame = self
            .graph
            .robot(robot)
            .map(|info| info.frame.clone())
            .unwrap_or(FrameStatus::Uninitialized);

        for (a, b) in &old_edges {
            self.graph.remove_edge(*a, *b)?;
        }
        for id in old_nodes.difference(&new_nodes) {
            self.graph.remove_node(*id)?;
        }
        let incoming_info = incoming.robot(robot).unwrap();
        self.graph
            .ensure_robot(robot, incoming_info.capabilities.clone());
        {
            let info = self.graph.robot_mut(robot).unwrap();
            info.capabilities = incoming_info.capabilities.clone();
            info.mesh = incoming_info.mesh.clone();
            info.frame = prior_frame;
        }
        for (id, payload) in incoming.nodes() {
            if old_nodes.contains(id) {
                *self.graph.node_mut(*id).unwrap() = payload.clone();
            } else {
                self.graph.add_node(*id, payload.clone())?;
            }
        }
        for (a, b) in &new_edges {
            self.graph.add_edge(*a, *b)?;
        }
        // The robot owns id allocation; mirror its allocator state exactly so
        // the union graph reproduces a from-scratch rebuild byte for byte.
        self.graph.robot_mut(robot).unwrap().next_index = incoming_info.next_index.clone();
        Ok(stats)
    }

    /// Immutable copy; later ingests never affect it.
    pub fn snapshot(&self) -> SceneGraph {
        self.graph.clone()
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }

    pub fn loop_closures(&self) -> &[LoopClosure] {
        &self.closures
    }

    pub fn add_loop_closures(&mut self, closures: &[LoopClosure]) {
        self.closures.extend_from_slice(closures);
    }

    pub fn set_frame_status(&mut self, robot: RobotId, status: FrameStatus) {
        if let Some(info) = self.graph.robot_mut(robot) {
            info.frame = status;
        }
    }

    pub fn last_sequence(&self, robot: RobotId) -> Option<u64> {
        self.last_sequence.get(&robot).copied()
    }

    pub fn stale_dropped(&self, robot: RobotId) -> u64 {
        self.stale_dropped.get(&robot).copied().unwrap_or(0)
    }

    pub fn bandwidth(&self) -> &BandwidthLedger {
        &self.bandwidth
    }

    pub fn record_bandwidth(&mut self, robot: RobotId, channel: Channel, bytes: u64) {
        self.bandwidth.record(robot, channel, bytes);
    }

    /// Splits a graph-update message into graph vs mesh bytes: the mesh
    /// share is the marginal cost of the mesh content (control nodes plus
    /// dense vertices), measured by re-encoding the update without it.
    pub fn record_update_bandwidth(&mut self, update: &GraphUpdate, total_bytes: u64) {
        let stripped = strip_mesh(&update.full_graph);
        let stripped_bytes = to_canonical_json(&stripped)
            .map(|b| b.len() as u64)
            .unwrap_or(0);
        let graph_bytes = total_bytes.min(stripped_bytes);
        let mesh_bytes = total_bytes.saturating_sub(graph_bytes);
        self.bandwidth.record(update.robot, Channel::Graph, graph_bytes);
        self.bandwidth
            .record(update.robot, Channel::MeshControl, mesh_bytes);
    }

    /// Applies one wire event: ingest, closure collection, and bandwidth
    /// metering. Returns true when the event was a backend tick.
    pub fn apply_event(
        &mut self,
        event: &WireEvent,
        encoded_len: u64,
    ) -> Result<bool, FrontendError> {
        match event {
            WireEvent::Header { .. } => Ok(false),
            WireEvent::GraphUpdate(update) => {
                self.ingest(update)?;
                self.record_update_bandwidth(update, encoded_len);
                Ok(false)
            }
            WireEvent::LoopClosures(lcs) => {
                if let Some(first) = lcs.first() {
                    let robot = first.from.robot;
                    self.record_bandwidth(robot, Channel::LoopClosureAux, encoded_len);
                }
                self.add_loop_closures(lcs);
                Ok(false)
            }
            WireEvent::BackendTick => Ok(true),
        }
    }
}

fn strip_mesh(g: &SceneGraph) -> SceneGraph {
    let mut stripped = g.clone();
    let mesh_ids: Vec<NodeId> = stripped
        .nodes_in_layer(Layer::MeshControl)
        .map(|(id, _)| *id)
        .collect();
    for id in mesh_ids {
        let _ = stripped.remove_node(id);
    }
    let robots: Vec<RobotId> = stripped.robots().map(|(id, _)| *id).collect();
    for robot in robots {
        stripped.robot_mut(robot).unwrap().mesh.vertices.clear();
    }
    stripped
}
