//! The backend: one align → propose → optimize → reconcile → write-back
//! iteration over frontend snapshots, plus the pipeline that couples the
//! frontend ingest loop with backend iterations (threaded or strictly
//! serial; both produce identical output for the same event stream).

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::time::Instant;

use crate::align::{AlignmentConfig, AlignmentReport, AlignmentState, LoopClosure};
use crate::deform::{self, BuildReport, DefSolution};
use crate::frontend::{BandwidthLedger, FrontendError, FrontendGraph};
use crate::gnc::GncConfig;
use crate::graph::{FrameStatus, GraphError, Layer, NodeId, RobotId, SceneGraph};
use crate::metrics::{self, GtObject, MetricsRow};
use crate::reconcile::{self, ApplyReport, ReconciliationConfig};
use crate::scenario::{EvaluationSpec, OmegaTable, SolverConfig};
use crate::se3::Pose;
use crate::sim::GroundTruth;
use crate::wire::WireEvent;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend stage `{stage}` failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> BackendError {
    move |e| BackendError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Solver settings resolved out of the scenario document.
#[derive(Clone, Debug)]
pub struct BackendConfig {
    pub gnc: GncConfig,
    pub alignment: AlignmentConfig,
    pub reconciliation: ReconciliationConfig,
    pub omega: OmegaTable,
    pub binding_count: usize,
}

impl From<&SolverConfig> for BackendConfig {
    fn from(s: &SolverConfig) -> Self {
        BackendConfig {
            gnc: s.gnc_config(),
            alignment: s.alignment_config(),
            reconciliation: s.reconciliation_config(),
            omega: s.omega.clone(),
            binding_count: s.mesh_binding_count,
        }
    }
}

/// Persistent backend state across iterations: the optimized, reconciled
/// graph plus the cached alignment.
#[derive(Clone, Debug)]
pub struct BackendState {
    pub graph: SceneGraph,
    pub alignment: AlignmentState,
    pub config: BackendConfig,
    /// Frame each robot's content was placed into the global frame with.
    applied_frames: BTreeMap<RobotId, Pose>,
    pub iteration: u64,
}

#[derive(Clone, Debug, Default)]
pub struct IterationReport {
    pub iteration: u64,
    pub alignment: AlignmentReport,
    pub build: BuildReport,
    pub apply: ApplyReport,
    pub objective_before: f64,
    pub objective_after: f64,
    pub realign_fired: Vec<(RobotId, RobotId)>,
    pub robots_initialized: usize,
    pub stage_seconds: BTreeMap<&'static str, f64>,
}

impl BackendState {
    pub fn new(config: BackendConfig) -> Self {
        BackendState {
            graph: SceneGraph::new(),
            alignment: AlignmentState::new(),
            config,
            applied_frames: BTreeMap::new(),
            iteration: 0,
        }
    }

    /// Runs one full backend iteration against an immutable frontend
    /// snapshot. Failures leave the previous backend graph in place.
    pub fn iterate(
        &mut self,
        snapshot: &SceneGraph,
        closures: &[LoopClosure],
    ) -> Result<IterationReport, BackendError> {
        let mut report = IterationReport {
            iteration: self.iteration,
            ..IterationReport::default()
        };
        let mut clock = Instant::now();
        let mut lap = |report: &mut IterationReport, stage: &'static str| {
            report
                .stage_seconds
                .insert(stage, clock.elapsed().as_secs_f64());
            clock = Instant::now();
        };

        // (i) initial frame alignment (cached unless a re-align fired)
        report.alignment = self
            .alignment
            .update(snapshot, closures, &self.config.alignment, &self.config.gnc)
            .map_err(stage_err("alignment"))?;
        if report.alignment.realigned {
            // Frames moved wholesale; replace the backend content under the
            // new alignment. Merges are re-proposed from scratch.
            self.graph = SceneGraph::new();
            self.applied_frames.clear();
        }
        report.robots_initialized = self.alignment.frames.len();
        lap(&mut report, "alignment");

        // (ii) sync the snapshot into the backend graph in the global frame
        self.sync(snapshot).map_err(stage_err("sync"))?;
        lap(&mut report, "sync");

        // (iii) propose node reconciliations
        let mut candidates = reconcile::propose_place_merges(&self.graph, &self.config.reconciliation);
        candidates.extend(reconcile::propose_object_merges(
            &self.graph,
            &self.config.reconciliation,
        ));
        lap(&mut report, "proposal");

        // (iv) robust deformation-graph optimization
        let dg = deform::build(&self.graph, snapshot, closures, &candidates, &self.config.omega);
        report.build = dg.report.clone();
        let solution = deform::optimize(&dg, &self.config.gnc).map_err(stage_err("optimize"))?;
        report.objective_before = solution.objective_before;
        report.objective_after = solution.objective_after;
        lap(&mut report, "optimize");

        // (v) merge the valid reconciliations (all-or-nothing by ratio)
        let mask = solution.candidate_mask(&dg);
        report.apply =
            reconcile::validate_and_apply(&mut self.graph, &mut candidates, &mask, &self.config.reconciliation)
                .map_err(stage_err("reconcile"))?;
        lap(&mut report, "reconcile");

        // (vi) write the solution back into the scene graph
        deform::write_back(&mut self.graph, &solution, self.config.binding_count);
        lap(&mut report, "write_back");

        // (vii) compare optimized relative frames against the initial
        // alignment; a large translation gap re-aligns next iteration
        let optimized = self.optimized_frames(snapshot, &solution);
        report.realign_fired = self
            .alignment
            .check_realign(&optimized, &self.config.alignment);
        lap(&mut report, "realign_check");

        self.iteration += 1;
        report.iteration = self.iteration;
        Ok(report)
    }

    /// Global frame implied by the optimization for each initialized robot:
    /// solved first-keyframe pose composed against its raw local pose.
    fn optimized_frames(
        &self,
        snapshot: &SceneGraph,
        solution: &DefSolution,
    ) -> BTreeMap<RobotId, Pose> {
        let mut frames = BTreeMap::new();
        for (robot, _) in self.graph.robots() {
            if !self.alignment.is_initialized(*robot) {
                continue;
            }
            let Some(first_agent) = self
                .graph
                .nodes_in_layer(Layer::Agent)
                .map(|(id, _)| *id)
                .find(|id| id.robot == *robot)
            else {
                continue;
            };
            let (Some(solved), Some(raw)) = (
                solution.values.get(&first_agent),
                snapshot.node(first_agent).and_then(|p| p.as_agent()),
            ) else {
                continue;
            };
            frames.insert(*robot, *solved * raw.pose.inverse());
        }
        frames
    }

    /// Brings the backend graph up to date with the snapshot: new robots
    /// and nodes enter (transformed into the global frame when their robot
    /// is initialized), deleted nodes leave, merged nodes stay merged.
    fn sync(&mut self, snapshot: &SceneGraph) -> Result<(), GraphError> {
        let robots: Vec<RobotId> = snapshot.robots().map(|(id, _)| *id).collect();
        for robot in robots {
            let snap_info = snapshot.robot(robot).unwrap();
            self.graph.ensure_robot(robot, snap_info.capabilities.clone());
            self.graph
                .robot_mut(robot)
                .unwrap()
                .capabilities = snap_info.capabilities.clone();

            let frame = self.alignment.frames.get(&robot).copied();
            self.graph.set_frame(
                robot,
                match frame {
                    Some(f) => FrameStatus::Initialized(f),
                    None => FrameStatus::Uninitialized,
                },
            )?;

            // A robot that just initialized carries its accumulated local
            // content into the global frame in one rigid move.
            match (self.applied_frames.get(&robot).copied(), frame) {
                (None, Some(f)) => {
                    self.graph.transform_robot(robot, &f)?;
                    self.applied_frames.insert(robot, f);
                }
                (Some(af), Some(f)) if af != f => {
                    // Cached frame replaced outside a full re-align; re-place
                    // the robot's content accordingly.
                    let correction = f * af.inverse();
                    self.graph.transform_robot(robot, &correction)?;
                    self.applied_frames.insert(robot, f);
                }
                _ => {}
            }
            let placement = self.applied_frames.get(&robot).copied().unwrap_or_else(Pose::identity);

            let backend_ids: BTreeSet<NodeId> = self
                .graph
                .nodes()
                .filter(|(id, _)| id.robot == robot)
                .map(|(id, _)| *id)
                .collect();
            let snap_ids: BTreeSet<NodeId> =
                snapshot.nodes().filter(|(id, _)| id.robot == robot).map(|(id, _)| *id).collect();

            // Deletions on the robot side propagate; tombstoned merge
            // absorbees are left to the journal.
            for id in backend_ids.difference(&snap_ids) {
                if self.graph.resolve(*id) == *id {
                    self.graph.remove_node(*id)?;
                }
            }
            // New content enters in the global frame.
            for id in snap_ids.iter() {
                if self.graph.contains_node(*id) || self.graph.resolve(*id) != *id {
                    continue;
                }
                let payload = snapshot.node(*id).unwrap().clone();
                let placed = match &payload {
                    p => transform_payload(p, &placement),
                };
                self.graph.add_node(*id, placed)?;
            }
            // Robot-authored edges, mapped through merge redirects.
            let snap_edges: BTreeSet<(NodeId, NodeId)> = snapshot
                .edges()
                .filter(|(a, _)| a.robot == robot)
                .collect();
            for (a, b) in &snap_edges {
                let (ra, rb) = (self.graph.resolve(*a), self.graph.resolve(*b));
                if ra == rb || !self.graph.contains_node(ra) || !self.graph.contains_node(rb) {
                    continue;
                }
                let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
                if !self.graph.has_edge(lo, hi) {
                    self.graph.add_edge(lo, hi)?;
                }
            }
            // Same-robot edge deletions (cross-robot edges only exist via
            // merges, which the journal owns).
            let stale: Vec<(NodeId, NodeId)> = self
                .graph
                .edges()
                .filter(|(a, b)| {
                    a.robot == robot && b.robot == robot && !snap_edges.contains(&(*a, *b))
                })
                .collect();
            for (a, b) in stale {
                self.graph.remove_edge(a, b)?;
            }

            // Dense mesh vertices append (or truncate on the rare shrink).
            let snap_mesh = &snapshot.robot(robot).unwrap().mesh.vertices;
            let backend_mesh = &mut self.graph.robot_mut(robot).unwrap().mesh.vertices;
            if snap_mesh.len() >= backend_mesh.len() {
                for v in snap_mesh.iter().skip(backend_mesh.len()) {
                    backend_mesh.push(placement.transform_point(v));
                }
            } else {
                backend_mesh.truncate(snap_mesh.len());
            }
        }
        Ok(())
    }
}

fn transform_payload(
    payload: &crate::graph::NodePayload,
    pose: &Pose,
) -> crate::graph::NodePayload {
    use crate::graph::{AgentNode, MeshControlNode, NodePayload, ObjectNode, PlaceNode, RoomNode};
    match payload {
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

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] crate::wire::WireError),
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    /// Strict frontend/backend alternation instead of the two-thread loop.
    pub serial: bool,
    /// Record every consumed event as NDJSON.
    pub record_path: Option<std::path::PathBuf>,
}

pub struct PipelineResult {
    pub final_graph: SceneGraph,
    pub rows: Vec<MetricsRow>,
    pub bandwidth: BandwidthLedger,
    pub iterations: u64,
    pub robots: Vec<RobotId>,
    pub reports: Vec<IterationReport>,
}

struct TickJob {
    snapshot: SceneGraph,
    closures: Vec<LoopClosure>,
    bandwidth: BandwidthLedger,
}

fn build_row(
    backend: &BackendState,
    report: &IterationReport,
    bandwidth: &BandwidthLedger,
    ground_truth: Option<&GroundTruth>,
    evaluation: &EvaluationSpec,
) -> MetricsRow {
    let mut row = MetricsRow {
        iteration: report.iteration,
        robots_initialized: report.robots_initialized,
        merges_proposed: report.apply.proposed,
        merges_valid: report.apply.valid,
        merges_applied: report.apply.applied,
        merges_undone: report.apply.undone,
        objective_before: report.objective_before,
        objective_after: report.objective_after,
        stage_seconds: report.stage_seconds.clone(),
        ..MetricsRow::default()
    };
    row.record_bandwidth(bandwidth);
    if let Some(gt) = ground_truth {
        let est = metrics::graph_trajectories(&backend.graph);
        if let Ok(ate) = metrics::multi_robot_ate(&est, &gt.trajectories) {
            row.ate = ate;
        }
        // Objects and places are compared in the evaluation frame: ground
        // truth mapped through the inverse root alignment.
        let to_est = metrics::root_alignment(&est, &gt.trajectories)
            .map(|s| s.inverse())
            .unwrap_or_else(|_| Pose::identity());
        let gt_objects: Vec<GtObject> = gt
            .objects
            .iter()
            .map(|o| GtObject {
                label: o.label,
                centroid: to_est.transform_point(&o.centroid),
            })
            .collect();
        row.objects = metrics::evaluate_objects(
            &backend.graph,
            &gt_objects,
            evaluation.object_distance_threshold,
        );
        let gt_places: Vec<nalgebra::Vector3<f64>> =
            gt.places.iter().map(|p| to_est.transform_point(p)).collect();
        row.places = metrics::evaluate_places(&backend.graph, &gt_places);
        for (pair, est) in &backend.alignment.estimates {
            let (Some(ga), Some(gb)) = (gt.frames.get(&pair.0), gt.frames.get(&pair.1)) else {
                continue;
            };
            let gt_rel = ga.inverse() * *gb;
            let dt = (est.estimate.translation() - gt_rel.translation()).norm();
            let dr = (est.estimate.rotation().inverse() * gt_rel.rotation()).angle();
            row.frame_error_trans_max = row.frame_error_trans_max.max(dt);
            row.frame_error_rot_max = row.frame_error_rot_max.max(dr);
        }
    }
    row
}

/// Feeds an event stream through the frontend and runs one backend
/// iteration per tick. The snapshot contract makes the threaded and serial
/// modes produce identical results: each iteration sees exactly the state
/// at its tick.
pub fn run_pipeline(
    events: &[WireEvent],
    solvers: &SolverConfig,
    ground_truth: Option<&GroundTruth>,
    evaluation: &EvaluationSpec,
    options: &PipelineOptions,
) -> Result<PipelineResult, PipelineError> {
    let mut recorder = match &options.record_path {
        Some(path) => Some(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => None,
    };

    let mut frontend = FrontendGraph::new();
    let mut backend = BackendState::new(BackendConfig::from(solvers));
    let mut rows = Vec::new();
    let mut reports = Vec::new();

    if options.serial {
        for event in events {
            let encoded = crate::wire::encode_event(event)?;
            if let Some(w) = recorder.as_mut() {
                use std::io::Write;
                w.write_all(&encoded)?;
                w.write_all(b"\n")?;
            }
            let tick = frontend.apply_event(event, encoded.len() as u64)?;
            if tick {
                let snapshot = frontend.snapshot();
                let closures = frontend.loop_closures().to_vec();
                let report = backend.iterate(&snapshot, &closures)?;
                rows.push(build_row(&backend, &report, frontend.bandwidth(), ground_truth, evaluation));
                reports.push(report);
            }
        }
    } else {
        let (tx, rx) = mpsc::channel::<TickJob>();
        let solvers_owned = solvers.clone();
        let outcome = std::thread::scope(
            |scope| -> Result<(BackendState, Vec<MetricsRow>, Vec<IterationReport>), PipelineError> {
                let handle = scope.spawn(
                    move || -> Result<(BackendState, Vec<MetricsRow>, Vec<IterationReport>), BackendError> {
                        let mut backend = BackendState::new(BackendConfig::from(&solvers_owned));
                        let mut rows = Vec::new();
                        let mut reports = Vec::new();
                        while let Ok(job) = rx.recv() {
                            let report = backend.iterate(&job.snapshot, &job.closures)?;
                            rows.push(build_row(&backend, &report, &job.bandwidth, ground_truth, evaluation));
                            reports.push(report);
                        }
                        Ok((backend, rows, reports))
                    },
                );
                let mut producer_err: Option<PipelineError> = None;
                for event in events {
                    let step = (|| -> Result<bool, PipelineError> {
                        let encoded = crate::wire::encode_event(event)?;
                        if let Some(w) = recorder.as_mut() {
                            use std::io::Write;
                            w.write_all(&encoded)?;
                            w.write_all(b"\n")?;
                        }
                        Ok(frontend.apply_event(event, encoded.len() as u64)?)
                    })();
                    match step {
                        Ok(true) => {
                            let job = TickJob {
                                snapshot: frontend.snapshot(),
                                closures: frontend.loop_closures().to_vec(),
                                bandwidth: frontend.bandwidth().clone(),
                            };
                            if tx.send(job).is_err() {
                                break;
                            }
                        }
                        Ok(false) => {}
                        Err(e) => {
                            producer_err = Some(e);
                            break;
                        }
                    }
                }
                drop(tx);
                let worker = handle.join().map_err(|_| {
                    PipelineError::Backend(BackendError::Stage {
                        stage: "worker",
                        message: "backend thread panicked".into(),
                    })
                })?;
                if let Some(e) = producer_err {
                    return Err(e);
                }
                worker.map_err(PipelineError::Backend)
            },
        )?;
        let (b, r, rep) = outcome;
        backend = b;
        rows = r;
        reports = rep;
    }

    if let Some(w) = recorder.as_mut() {
        use std::io::Write;
        w.flush()?;
    }
    let robots = backend.graph.robots().map(|(id, _)| *id).collect();
    Ok(PipelineResult {
        final_graph: backend.graph.clone(),
        rows,
        bandwidth: frontend.bandwidth().clone(),
        iterations: backend.iteration,
        robots,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::to_canonical_json;
    use crate::scenario::ScenarioConfig;
    use crate::sim::simulate;

    fn overlap_scenario(seed: u64) -> ScenarioConfig {
        // Two robots covering the same corridor in opposite directions, with
        // shared objects and places and plenty of inter-robot closures.
        let doc = serde_json::json!({
            "seed": seed,
            "world": {
                "bounds": {"min": [-2.0, -3.0, 0.0], "max": [22.0, 8.0, 3.0]},
                "rooms": [{"min": [0.0, 0.0, 0.0], "max": [20.0, 5.0, 3.0]}],
                "objects": [
                    {"label": 1, "centroid": [4.0, 1.5, 1.0], "extents": [0.8, 0.8, 0.8], "control_points": 8},
                    {"label": 2, "centroid": [10.0, 2.5, 1.0], "extents": [1.0, 0.6, 0.5], "control_points": 8},
                    {"label": 3, "centroid": [16.0, 1.0, 1.0], "extents": [0.5, 0.5, 1.2], "control_points": 8}
                ],
                "places": {"spacing": 2.5, "radius": 0.6}
            },
            "robots": [
                {"waypoints": [[1.0, 1.0, 0.0], [19.0, 1.0, 0.0]], "snapshot_period": 16, "sensing_radius": 4.0},
                {"waypoints": [[19.0, 2.0, 0.0], [1.0, 2.0, 0.0]], "snapshot_period": 16, "sensing_radius": 4.0}
            ],
            "loop_closures": {"detection_radius": 2.0, "min_separation_steps": 60},
            "backend_period": 24
        });
        ScenarioConfig::from_json(doc.to_string().as_bytes()).unwrap()
    }

    #[test]
    fn zero_noise_two_robot_run_merges_duplicates() {
        let cfg = overlap_scenario(3);
        let out = simulate(&cfg).unwrap();
        let result = run_pipeline(
            &out.events,
            &cfg.solvers,
            Some(&out.ground_truth),
            &cfg.evaluation,
            &PipelineOptions {
                serial: true,
                ..PipelineOptions::default()
            },
        )
        .unwrap();
        assert!(result.iterations > 0);
        let last = result.rows.last().unwrap();
        // both robots initialized, every duplicate object reconciled
        assert_eq!(last.robots_initialized, 2);
        assert_eq!(last.objects.estimated_count, out.ground_truth.objects.len());
        assert_eq!(last.objects.found_pct, 100.0);
        assert_eq!(last.objects.correct_pct, 100.0);
        assert!(last.ate.values().all(|v| *v < 1e-6), "{:?}", last.ate);
        result.final_graph.validate().unwrap();
    }

    #[test]
    fn serial_and_threaded_modes_agree() {
        let cfg = overlap_scenario(5);
        let out = simulate(&cfg).unwrap();
        let run = |serial: bool| {
            run_pipeline(
                &out.events,
                &cfg.solvers,
                Some(&out.ground_truth),
                &cfg.evaluation,
                &PipelineOptions {
                    serial,
                    ..PipelineOptions::default()
                },
            )
            .unwrap()
        };
        let a = run(true);
        let b = run(false);
        assert_eq!(
            to_canonical_json(&a.final_graph).unwrap(),
            to_canonical_json(&b.final_graph).unwrap()
        );
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(
            crate::metrics::metrics_csv(&a.rows, &a.robots),
            crate::metrics::metrics_csv(&b.rows, &b.robots)
        );
    }

    #[test]
    fn no_closures_means_no_initialization_and_no_candidates() {
        let mut cfg = overlap_scenario(9);
        cfg.loop_closures.detection_radius = 0.0;
        let out = simulate(&cfg).unwrap();
        let result = run_pipeline(
            &out.events,
            &cfg.solvers,
            Some(&out.ground_truth),
            &cfg.evaluation,
            &PipelineOptions {
                serial: true,
                ..PipelineOptions::default()
            },
        )
        .unwrap();
        let last = result.rows.last().unwrap();
        assert_eq!(last.robots_initialized, 0);
        assert_eq!(last.merges_proposed, 0);
        // per-robot optimization still ran
        assert!(result.iterations > 0);
        result.final_graph.validate().unwrap();
    }

    #[test]
    fn backend_graph_stays_valid_between_iterations() {
        let cfg = overlap_scenario(11);
        let out = simulate(&cfg).unwrap();
        let mut frontend = FrontendGraph::new();
        let mut backend = BackendState::new(BackendConfig::from(&cfg.solvers));
        for event in &out.events {
            let len = crate::wire::encode_event(event).unwrap().len() as u64;
            if frontend.apply_event(event, len).unwrap() {
                let snapshot = frontend.snapshot();
                let closures = frontend.loop_closures().to_vec();
                backend.iterate(&snapshot, &closures).unwrap();
                backend.graph.validate().unwrap();
            }
        }
    }
}
