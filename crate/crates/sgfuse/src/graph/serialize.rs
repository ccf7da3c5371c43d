//! Canonical JSON serialization of the scene graph.
//!
//! The encoding is deterministic: maps are sorted, struct field order is
//! fixed, and every float is emitted with 17 significant digits so equal
//! graphs serialize to identical bytes and all values roundtrip exactly.

use std::collections::BTreeMap;
use std::io;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    Aabb, AgentNode, DenseMesh, FrameStatus, GraphError, Layer, MergeRecord, MeshControlNode,
    NodeId, NodePayload, ObjectNode, PlaceNode, RobotCapabilities, RobotId, RoomNode,
    SceneGraph,
};
use crate::se3::Pose;

#[derive(Debug, thiserror::Error)]
pub enum SerializeError {
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("non-finite float in graph content")]
    NonFinite,
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("graph rebuild failed: {0}")]
    Graph(#[from] GraphError),
}

/// serde_json formatter that writes every f64 with 17 significant digits.
pub(crate) struct CanonicalFormatter;

impl serde_json::ser::Formatter for CanonicalFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if !value.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "non-finite float",
            ));
        }
        write!(writer, "{value:.16e}")
    }

    // serde_json encodes non-finite floats as null before write_f64 is ever
    // reached; the canonical encoding contains no nulls, so refuse them.
    fn write_null<W>(&mut self, _writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "non-finite float",
        ))
    }
}

/// Writes one float the way the canonical graph encoding does.
pub fn write_canonical_f64(out: &mut String, value: f64) {
    use std::fmt::Write;
    write!(out, "{value:.16e}").unwrap();
}

#[derive(Serialize, Deserialize)]
pub(crate) struct GraphDoc {
    robots: BTreeMap<String, RobotDoc>,
    layers: BTreeMap<String, Vec<String>>,
    nodes: BTreeMap<String, NodeDoc>,
    edges: Vec<[String; 2]>,
    merges: Vec<MergeDoc>,
}

#[derive(Serialize, Deserialize)]
struct RobotDoc {
    capabilities: CapsDoc,
    frame: FrameDoc,
    mesh_vertices: Vec<[f64; 3]>,
    next_index: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct CapsDoc {
    has_semantics: bool,
    has_mesh: bool,
    layers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
enum FrameDoc {
    Uninitialized,
    Initialized { pose: [f64; 7] },
}

#[derive(Serialize, Deserialize)]
struct AabbDoc {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NodeDoc {
    Agent {
        pose: [f64; 7],
        timestamp: f64,
    },
    Object {
        centroid: [f64; 3],
        bbox: AabbDoc,
        label: u32,
        vertices: Vec<String>,
    },
    Place {
        position: [f64; 3],
        radius: f64,
    },
    Room {
        bbox: AabbDoc,
    },
    MeshControl {
        position: [f64; 3],
    },
}

#[derive(Serialize, Deserialize)]
struct MergeDoc {
    keep: String,
    absorb: String,
    absorb_payload: NodeDoc,
    keep_payload_before: NodeDoc,
    absorb_neighbors: Vec<String>,
    rewired: Vec<String>,
}

fn vec3_to(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn vec3_from(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn payload_to_doc(p: &NodePayload) -> NodeDoc {
    match p {
        NodePayload::Agent(n) => NodeDoc::Agent {
            pose: n.pose.to_array(),
            timestamp: n.timestamp,
        },
        NodePayload::Object(n) => NodeDoc::Object {
            centroid: vec3_to(&n.centroid),
            bbox: AabbDoc {
                min: vec3_to(&n.bbox.min),
                max: vec3_to(&n.bbox.max),
            },
            label: n.semantic_label,
            vertices: n.vertex_ids.iter().map(|id| id.to_string()).collect(),
        },
        NodePayload::Place(n) => NodeDoc::Place {
            position: vec3_to(&n.position),
            radius: n.radius,
        },
        NodePayload::Room(n) => NodeDoc::Room {
            bbox: AabbDoc {
                min: vec3_to(&n.bbox.min),
                max: vec3_to(&n.bbox.max),
            },
        },
        NodePayload::MeshControl(n) => NodeDoc::MeshControl {
            position: vec3_to(&n.position),
        },
    }
}

fn payload_from_doc(doc: &NodeDoc) -> Result<NodePayload, SerializeError> {
    Ok(match doc {
        NodeDoc::Agent { pose, timestamp } => NodePayload::Agent(AgentNode {
            pose: Pose::from_array(pose),
            timestamp: *timestamp,
        }),
        NodeDoc::Object {
            centroid,
            bbox,
            label,
            vertices,
        } => NodePayload::Object(ObjectNode {
            centroid: vec3_from(centroid),
            bbox: Aabb::new(vec3_from(&bbox.min), vec3_from(&bbox.max)),
            semantic_label: *label,
            vertex_ids: vertices
                .iter()
                .map(|s| parse_id(s))
                .collect::<Result<_, _>>()?,
        }),
        NodeDoc::Place { position, radius } => NodePayload::Place(PlaceNode {
            position: vec3_from(position),
            radius: *radius,
        }),
        NodeDoc::Room { bbox } => NodePayload::Room(RoomNode {
            bbox: Aabb::new(vec3_from(&bbox.min), vec3_from(&bbox.max)),
        }),
        NodeDoc::MeshControl { position } => NodePayload::MeshControl(MeshControlNode {
            position: vec3_from(position),
        }),
    })
}

fn parse_id(s: &str) -> Result<NodeId, SerializeError> {
    s.parse().map_err(SerializeError::Malformed)
}

pub(crate) fn graph_to_doc(g: &SceneGraph) -> GraphDoc {
    let mut layers: BTreeMap<String, Vec<String>> = Layer::ALL
        .iter()
        .map(|l| (l.name().to_string(), Vec::new()))
        .collect();
    let mut nodes = BTreeMap::new();
    for (id, payload) in g.nodes() {
        layers
            .get_mut(id.layer.name())
            .unwrap()
            .push(id.to_string());
        nodes.insert(id.to_string(), payload_to_doc(payload));
    }
    GraphDoc {
        robots: g
            .robots()
            .map(|(id, info)| {
                (
                    id.to_string(),
                    RobotDoc {
                        capabilities: CapsDoc {
                            has_semantics: info.capabilities.has_semantics,
                            has_mesh: info.capabilities.has_mesh,
                            layers: info
                                .capabilities
                                .layers_provided
                                .iter()
                                .map(|l| l.name().to_string())
                                .collect(),
                        },
                        frame: match &info.frame {
                            FrameStatus::Uninitialized => FrameDoc::Uninitialized,
                            FrameStatus::Initialized(p) => FrameDoc::Initialized {
                                pose: p.to_array(),
                            },
                        },
                        mesh_vertices: info.mesh.vertices.iter().map(vec3_to).collect(),
                        next_index: info
                            .next_index
                            .iter()
                            .map(|(l, n)| (l.name().to_string(), *n))
                            .collect(),
                    },
                )
            })
            .collect(),
        layers,
        nodes,
        edges: g
            .edges()
            .map(|(a, b)| [a.to_string(), b.to_string()])
            .collect(),
        merges: g
            .merge_journal()
            .iter()
            .map(|r| MergeDoc {
                keep: r.keep.to_string(),
                absorb: r.absorb.to_string(),
                absorb_payload: payload_to_doc(&r.absorb_payload),
                keep_payload_before: payload_to_doc(&r.keep_payload_before),
                absorb_neighbors: r.absorb_neighbors.iter().map(|n| n.to_string()).collect(),
                rewired: r.rewired.iter().map(|n| n.to_string()).collect(),
            })
            .collect(),
    }
}

/// Serializes to the canonical UTF-8 JSON document.
pub fn to_canonical_json(g: &SceneGraph) -> Result<Vec<u8>, SerializeError> {
    let doc = graph_to_doc(g);
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter);
    doc.serialize(&mut ser).map_err(|e| {
        if e.is_io() {
            SerializeError::NonFinite
        } else {
            SerializeError::Json(e)
        }
    })?;
    Ok(out)
}

/// Parses a canonical document back into a graph, revalidating structure.
/// JSON syntax errors carry line/column positions from the parser.
pub fn from_canonical_json(bytes: &[u8]) -> Result<SceneGraph, SerializeError> {
    let doc: GraphDoc = serde_json::from_slice(bytes)?;
    doc_to_graph(&doc)
}

pub(crate) fn doc_to_graph(doc: &GraphDoc) -> Result<SceneGraph, SerializeError> {
    let mut g = SceneGraph::new();
    for (rid, robot) in &doc.robots {
        let id = RobotId(
            rid.parse::<u32>()
                .map_err(|_| SerializeError::Malformed(format!("bad robot id `{rid}`")))?,
        );
        let mut layers = std::collections::BTreeSet::new();
        for name in &robot.capabilities.layers {
            layers.insert(Layer::from_name(name).ok_or_else(|| {
                SerializeError::Malformed(format!("unknown layer `{name}`"))
            })?);
        }
        g.ensure_robot(
            id,
            RobotCapabilities {
                has_semantics: robot.capabilities.has_semantics,
                has_mesh: robot.capabilities.has_mesh,
                layers_provided: layers,
            },
        );
        let info = g.robot_mut(id).unwrap();
        info.frame = match &robot.frame {
            FrameDoc::Uninitialized => FrameStatus::Uninitialized,
            FrameDoc::Initialized { pose } => FrameStatus::Initialized(Pose::from_array(pose)),
        };
        info.mesh = DenseMesh {
            vertices: robot.mesh_vertices.iter().map(vec3_from).collect(),
        };
    }

    for (ids, node) in &doc.nodes {
        let id = parse_id(ids)?;
        g.add_node(id, payload_from_doc(node)?)?;
    }
    for [a, b] in &doc.edges {
        g.add_edge(parse_id(a)?, parse_id(b)?)?;
    }
    for m in &doc.merges {
        let record = MergeRecord {
            keep: parse_id(&m.keep)?,
            absorb: parse_id(&m.absorb)?,
            absorb_payload: payload_from_doc(&m.absorb_payload)?,
            keep_payload_before: payload_from_doc(&m.keep_payload_before)?,
            absorb_neighbors: m
                .absorb_neighbors
                .iter()
                .map(|s| parse_id(s))
                .collect::<Result<_, _>>()?,
            rewired: m
                .rewired
                .iter()
                .map(|s| parse_id(s))
                .collect::<Result<_, _>>()?,
        };
        g.merges.push(record.clone());
        g.redirects.insert(record.absorb, record.keep);
    }

    // Restore allocator state last; adding nodes only ever advances it.
    for (rid, robot) in &doc.robots {
        let id = RobotId(rid.parse::<u32>().unwrap());
        let info = g.robot_mut(id).unwrap();
        for (lname, next) in &robot.next_index {
            let layer = Layer::from_name(lname).ok_or_else(|| {
                SerializeError::Malformed(format!("unknown layer `{lname}`"))
            })?;
            let entry = info.next_index.entry(layer).or_insert(0);
            *entry = (*entry).max(*next);
        }
    }

    // The layers table is redundant; require it to be consistent.
    let expect = graph_to_doc(&g).layers;
    if expect != doc.layers {
        return Err(SerializeError::Malformed(
            "layers table does not match node set".into(),
        ));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests_support::one_node_per_layer;

    #[test]
    fn empty_graph_is_a_fixed_minimal_document() {
        let g = SceneGraph::new();
        let bytes = to_canonical_json(&g).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            r#"{"robots":{},"layers":{"agent":[],"mesh_control":[],"object":[],"place":[],"room":[]},"nodes":{},"edges":[],"merges":[]}"#
        );
    }

    #[test]
    fn roundtrip_preserves_equality() {
        let g = one_node_per_layer();
        let bytes = to_canonical_json(&g).unwrap();
        let back = from_canonical_json(&bytes).unwrap();
        assert_eq!(back, g);
        // and the re-serialization is byte-identical
        assert_eq!(to_canonical_json(&back).unwrap(), bytes);
    }

    #[test]
    fn one_node_per_layer_matches_golden_file() {
        let g = one_node_per_layer();
        let bytes = to_canonical_json(&g).unwrap();
        let golden = include_str!("../../tests/golden/one_per_layer.json");
        assert_eq!(String::from_utf8(bytes).unwrap(), golden.trim_end());
    }

    #[test]
    fn malformed_input_is_diagnosed() {
        let err = from_canonical_json(b"{\"robots\": 3").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line") || msg.contains("column") || msg.contains("invalid"), "{msg}");

        // structurally valid JSON, semantically broken: edge to missing node
        let g = SceneGraph::new();
        let mut doc = String::from_utf8(to_canonical_json(&g).unwrap()).unwrap();
        doc = doc.replace(
            "\"edges\":[]",
            "\"edges\":[[\"0/place/0\",\"0/place/1\"]]",
        );
        assert!(from_canonical_json(doc.as_bytes()).is_err());
    }

    #[test]
    fn non_finite_floats_are_rejected() {
        let mut g = SceneGraph::new();
        g.ensure_robot(RobotId(0), RobotCapabilities::full());
        g.add_node(
            NodeId::new(RobotId(0), Layer::Place, 0),
            NodePayload::Place(PlaceNode {
                position: Vector3::new(f64::NAN, 0.0, 0.0),
                radius: 1.0,
            }),
        )
        .unwrap();
        assert!(matches!(
            to_canonical_json(&g),
            Err(SerializeError::NonFinite)
        ));
    }
}

