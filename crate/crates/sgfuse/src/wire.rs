//! Wire format between robots and the fusion station.
//!
//! Events are canonical JSON documents, carried either as length-prefixed
//! frames (4-byte big-endian length + payload) or newline-delimited for
//! offline replay files. A recorded stream replays to the same final graph
//! as the live run that produced it.

use std::io::{self, Read, Write};

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use crate::align::LoopClosure;
use crate::graph::{
    doc_to_graph, graph_to_doc, CanonicalFormatter, GraphDoc, RobotId, SceneGraph,
};
use crate::scenario::SolverConfig;
use crate::se3::{Covariance6, Pose};

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed wire message: {0}")]
    Malformed(String),
    #[error("frame length {0} exceeds the 256 MiB cap")]
    OversizedFrame(u64),
}

/// A robot's full-graph transmission. The wire policy is naive: the entire
/// current local graph every time.
#[derive(Clone, Debug)]
pub struct GraphUpdate {
    pub robot: RobotId,
    pub sequence: u64,
    pub full_graph: SceneGraph,
    /// Canonical byte length of `full_graph`.
    pub byte_size: u64,
}

impl GraphUpdate {
    pub fn new(robot: RobotId, sequence: u64, full_graph: SceneGraph) -> Self {
        let byte_size = crate::graph::to_canonical_json(&full_graph)
            .map(|b| b.len() as u64)
            .unwrap_or(0);
        GraphUpdate {
            robot,
            sequence,
            full_graph,
            byte_size,
        }
    }
}

/// Everything that can appear on the wire or in a replay file.
#[derive(Clone, Debug)]
pub enum WireEvent {
    /// First event of a recorded stream; carries the solver configuration
    /// so replay is self-contained.
    Header { solvers: SolverConfig },
    GraphUpdate(GraphUpdate),
    /// Oracle loop closures, metered on their own channel.
    LoopClosures(Vec<LoopClosure>),
    /// Marks the point where the live run triggered a backend iteration.
    BackendTick,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum WireDoc {
    Header {
        solvers: SolverConfig,
    },
    GraphUpdate {
        robot: String,
        sequence: u64,
        byte_size: u64,
        full_graph: GraphDoc,
    },
    LoopClosures {
        closures: Vec<LcDoc>,
    },
    BackendTick,
}

#[derive(Serialize, Deserialize)]
struct LcDoc {
    from: String,
    to: String,
    pose: [f64; 7],
    /// Row-major 6×6 covariance.
    covariance: Vec<f64>,
}

fn event_to_doc(event: &WireEvent) -> WireDoc {
    match event {
        WireEvent::Header { solvers } => WireDoc::Header {
            solvers: solvers.clone(),
        },
        WireEvent::GraphUpdate(u) => WireDoc::GraphUpdate {
            robot: u.robot.to_string(),
            sequence: u.sequence,
            byte_size: u.byte_size,
            full_graph: graph_to_doc(&u.full_graph),
        },
        WireEvent::LoopClosures(lcs) => WireDoc::LoopClosures {
            closures: lcs
                .iter()
                .map(|lc| LcDoc {
                    from: lc.from.to_string(),
                    to: lc.to.to_string(),
                    pose: lc.measurement.to_array(),
                    covariance: lc.covariance.matrix().iter().cloned().collect(),
                })
                .collect(),
        },
        WireEvent::BackendTick => WireDoc::BackendTick,
    }
}

fn event_from_doc(doc: WireDoc) -> Result<WireEvent, WireError> {
    Ok(match doc {
        WireDoc::Header { solvers } => WireEvent::Header { solvers },
        WireDoc::GraphUpdate {
            robot,
            sequence,
            byte_size,
            full_graph,
        } => {
            let robot = RobotId(
                robot
                    .parse::<u32>()
                    .map_err(|_| WireError::Malformed(format!("bad robot id `{robot}`")))?,
            );
            let graph = doc_to_graph(&full_graph)
                .map_err(|e| WireError::Malformed(format!("bad graph payload: {e}")))?;
            WireEvent::GraphUpdate(GraphUpdate {
                robot,
                sequence,
                full_graph: graph,
                byte_size,
            })
        }
        WireDoc::LoopClosures { closures } => {
            let mut lcs = Vec::with_capacity(closures.len());
            for doc in closures {
                if doc.covariance.len() != 36 {
                    return Err(WireError::Malformed(format!(
                        "covariance has {} entries, want 36",
                        doc.covariance.len()
                    )));
                }
                let cov = Covariance6::new(Matrix6::from_iterator(doc.covariance.iter().cloned()))
                    .map_err(|e| WireError::Malformed(e.to_string()))?;
                lcs.push(LoopClosure {
                    from: doc
                        .from
                        .parse()
                        .map_err(|e: String| WireError::Malformed(e))?,
                    to: doc.to.parse().map_err(|e: String| WireError::Malformed(e))?,
                    measurement: Pose::from_array(&doc.pose),
                    covariance: cov,
                });
            }
            WireEvent::LoopClosures(lcs)
        }
        WireDoc::BackendTick => WireEvent::BackendTick,
    })
}

/// Encodes an event as one canonical JSON document (no trailing newline).
pub fn encode_event(event: &WireEvent) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, CanonicalFormatter);
    event_to_doc(event).serialize(&mut ser)?;
    Ok(out)
}

pub fn decode_event(bytes: &[u8]) -> Result<WireEvent, WireError> {
    let doc: WireDoc = serde_json::from_slice(bytes)?;
    event_from_doc(doc)
}

const MAX_FRAME: u64 = 256 << 20;

/// Writes one length-prefixed frame.
pub fn write_frame<W: Write>(writer: &mut W, payload: &[u8]) -> Result<(), WireError> {
    let len = payload.len() as u64;
    if len > MAX_FRAME {
        return Err(WireError::OversizedFrame(len));
    }
    writer.write_all(&(len as u32).to_be_bytes())?;
    writer.write_all(payload)?;
    Ok(())
}

/// Reads one length-prefixed frame; `None` on clean end of stream.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut len_buf = [0u8; 4];
    match reader.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len_buf) as u64;
    if len > MAX_FRAME {
        return Err(WireError::OversizedFrame(len));
    }
    let mut payload = vec![0u8; len as usize];
    reader.read_exact(&mut payload)?;
    Ok(Some(payload))
}

/// Reads a whole event stream: newline-delimited JSON. Blank lines are
/// skipped.
pub fn read_ndjson(bytes: &[u8]) -> Result<Vec<(WireEvent, usize)>, WireError> {
    let mut events = Vec::new();
    for line in bytes.split(|b| *b == b'\n') {
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        events.push((decode_event(line)?, line.len()));
    }
    Ok(events)
}

/// Appends one event as an NDJSON line.
pub fn write_ndjson_line<W: Write>(writer: &mut W, event: &WireEvent) -> Result<usize, WireError> {
    let bytes = encode_event(event)?;
    writer.write_all(&bytes)?;
    writer.write_all(b"\n")?;
    Ok(bytes.len())
}
