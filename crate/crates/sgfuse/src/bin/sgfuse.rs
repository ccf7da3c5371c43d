//! Thin command-line front for the fusion library: simulate-and-fuse,
//! replay recorded update streams, evaluate graphs, and dump graphs.

use std::io::Write;
use std::net::TcpStream;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use sgfuse::backend::{run_pipeline, PipelineOptions, PipelineResult};
use sgfuse::deform;
use sgfuse::graph::{from_canonical_json, to_canonical_json, Layer, SceneGraph};
use sgfuse::metrics::{self, GtObject};
use sgfuse::scenario::{ScenarioConfig, SolverConfig};
use sgfuse::sim::simulate;
use sgfuse::wire::{self, WireEvent};

#[derive(Parser)]
#[command(name = "sgfuse", about = "multi-robot 3D scene graph fusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and run the full fusion pipeline.
    Run {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Output directory (metrics.csv, final_graph.json, gt_graph.json).
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Record the consumed event stream as newline-delimited JSON.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Strict frontend/backend alternation (single-threaded).
        #[arg(long)]
        serial: bool,
        /// Write stage wall-clock timings (not covered by determinism).
        #[arg(long)]
        timings: Option<PathBuf>,
        /// Dump the final backend scene graph as a deformation edge list.
        #[arg(long)]
        dump_deformation: Option<PathBuf>,
    },
    /// Replay a recorded update stream (file or tcp source) through the
    /// pipeline.
    Replay {
        /// `file:PATH`, plain path, or `tcp://host:port`.
        input: String,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[arg(long)]
        serial: bool,
    },
    /// Object/place/trajectory metrics between two serialized graphs.
    Eval {
        estimated: PathBuf,
        ground_truth: PathBuf,
        /// Object association distance threshold in meters.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
    },
    /// Re-emit a serialized scene graph.
    DumpGraph {
        state: PathBuf,
        #[arg(long, value_parser = ["json", "edgelist"], default_value = "json")]
        format: String,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run {
            scenario,
            out_dir,
            record,
            serial,
            timings,
            dump_deformation,
        } => cmd_run(&scenario, &out_dir, record, serial, timings, dump_deformation),
        Command::Replay {
            input,
            out_dir,
            serial,
        } => cmd_replay(&input, &out_dir, serial),
        Command::Eval {
            estimated,
            ground_truth,
            threshold,
        } => cmd_eval(&estimated, &ground_truth, threshold),
        Command::DumpGraph { state, format } => cmd_dump(&state, &format),
    }
}

fn cmd_run(
    scenario_path: &Path,
    out_dir: &Path,
    record: Option<PathBuf>,
    serial: bool,
    timings: Option<PathBuf>,
    dump_deformation: Option<PathBuf>,
) -> Result<(), Box<dyn std::error::Error>> {
    let bytes = std::fs::read(scenario_path)?;
    let mut cfg = ScenarioConfig::from_json(&bytes)?;
    if let Ok(seed) = std::env::var("SGFUSE_SEED") {
        cfg.seed = seed
            .parse()
            .map_err(|_| format!("SGFUSE_SEED must be an integer, got `{seed}`"))?;
    }

    std::fs::create_dir_all(out_dir)?;
    let sim = simulate(&cfg)?;
    let options = PipelineOptions {
        serial,
        record_path: record,
    };
    let result = run_pipeline(
        &sim.events,
        &cfg.solvers,
        Some(&sim.ground_truth),
        &cfg.evaluation,
        &options,
    )?;

    std::fs::write(
        out_dir.join("metrics.csv"),
        metrics::metrics_csv(&result.rows, &result.robots),
    )?;
    std::fs::write(
        out_dir.join("final_graph.json"),
        to_canonical_json(&result.final_graph)?,
    )?;
    std::fs::write(
        out_dir.join("gt_graph.json"),
        to_canonical_json(&ground_truth_graph(&sim.ground_truth))?,
    )?;
    if let Some(path) = timings {
        std::fs::write(path, metrics::timings_csv(&result.rows))?;
    }
    if let Some(path) = dump_deformation {
        let dg = deform::build(
            &result.final_graph,
            &result.final_graph,
            &[],
            &[],
            &cfg.solvers.omega,
        );
        std::fs::write(path, deform::dump_edgelist(&dg, None))?;
    }
    print_summary(&result);
    Ok(())
}

/// The ground truth rendered as a scene graph for `eval`: world-frame
/// trajectories per robot, with objects and places attributed to a synthetic
/// robot entry.
fn ground_truth_graph(gt: &sgfuse::sim::GroundTruth) -> SceneGraph {
    use sgfuse::graph::*;
    let mut g = SceneGraph::new();
    for (robot, traj) in &gt.trajectories {
        g.ensure_robot(*robot, RobotCapabilities::full());
        g.set_frame(*robot, FrameStatus::Initialized(sgfuse::se3::Pose::identity()))
            .unwrap();
        for (t, pose) in traj {
            let id = g.allocate_id(*robot, Layer::Agent).unwrap();
            g.add_node(
                id,
                NodePayload::Agent(AgentNode {
                    pose: *pose,
                    timestamp: *t,
                }),
            )
            .unwrap();
        }
    }
    let holder = RobotId(gt.trajectories.keys().map(|r| r.0).max().unwrap_or(0) + 1);
    g.ensure_robot(holder, RobotCapabilities::full());
    for o in &gt.objects {
        let id = g.allocate_id(holder, Layer::Object).unwrap();
        g.add_node(
            id,
            NodePayload::Object(ObjectNode {
                centroid: o.centroid,
                bbox: Aabb::new(o.centroid, o.centroid),
                semantic_label: o.label,
                vertex_ids: vec![],
            }),
        )
        .unwrap();
    }
    for p in &gt.places {
        let id = g.allocate_id(holder, Layer::Place).unwrap();
        g.add_node(
            id,
            NodePayload::Place(PlaceNode {
                position: *p,
                radius: 0.5,
            }),
        )
        .unwrap();
    }
    g
}

fn read_events(input: &str) -> Result<Vec<(WireEvent, usize)>, Box<dyn std::error::Error>> {
    if let Some(addr) = input.strip_prefix("tcp://") {
        let mut stream = TcpStream::connect(addr)?;
        let mut events = Vec::new();
        while let Some(frame) = wire::read_frame(&mut stream)? {
            events.push((wire::decode_event(&frame)?, frame.len()));
        }
        Ok(events)
    } else {
        let path = input.strip_prefix("file:").unwrap_or(input);
        let bytes = std::fs::read(path)?;
        Ok(wire::read_ndjson(&bytes)?)
    }
}

fn cmd_replay(input: &str, out_dir: &Path, serial: bool) -> Result<(), Box<dyn std::error::Error>> {
    let events = read_events(input)?;
    let solvers = events
        .iter()
        .find_map(|(e, _)| match e {
            WireEvent::Header { solvers } => Some(solvers.clone()),
            _ => None,
        })
        .unwrap_or_else(SolverConfig::default);
    let plain: Vec<WireEvent> = events.into_iter().map(|(e, _)| e).collect();
    let result = run_pipeline(
        &plain,
        &solvers,
        None,
        &Default::default(),
        &PipelineOptions {
            serial,
            record_path: None,
        },
    )?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("final_graph.json"),
        to_canonical_json(&result.final_graph)?,
    )?;
    print_summary(&result);
    Ok(())
}

fn cmd_eval(
    estimated: &Path,
    ground_truth: &Path,
    threshold: f64,
) -> Result<(), Box<dyn std::error::Error>> {
    let est = from_canonical_json(&std::fs::read(estimated)?)?;
    let gt = from_canonical_json(&std::fs::read(ground_truth)?)?;

    let est_traj = metrics::graph_trajectories(&est);
    let gt_traj = metrics::graph_trajectories(&gt);
    let to_est = metrics::root_alignment(&est_traj, &gt_traj)
        .map(|s| s.inverse())
        .unwrap_or_else(|_| sgfuse::se3::Pose::identity());

    let gt_objects: Vec<GtObject> = gt
        .nodes_in_layer(Layer::Object)
        .map(|(_, p)| {
            let o = p.as_object().unwrap();
            GtObject {
                label: o.semantic_label,
                centroid: to_est.transform_point(&o.centroid),
            }
        })
        .collect();
    let gt_places: Vec<nalgebra::Vector3<f64>> = gt
        .nodes_in_layer(Layer::Place)
        .map(|(_, p)| to_est.transform_point(&p.as_place().unwrap().position))
        .collect();

    let mut out = std::io::stdout().lock();
    match metrics::multi_robot_ate(&est_traj, &gt_traj) {
        Ok(ate) => {
            for (robot, rmse) in ate {
                writeln!(out, "ate_r{robot},{rmse}")?;
            }
        }
        Err(e) => writeln!(out, "ate,unavailable ({e})")?,
    }
    let om = metrics::evaluate_objects(&est, &gt_objects, threshold);
    writeln!(out, "found_pct,{}", om.found_pct)?;
    writeln!(out, "correct_pct,{}", om.correct_pct)?;
    let pm = metrics::evaluate_places(&est, &gt_places);
    writeln!(out, "place_err_mean,{}", pm.mean)?;
    writeln!(out, "place_err_median,{}", pm.median)?;
    writeln!(out, "place_err_max,{}", pm.max)?;
    Ok(())
}

fn cmd_dump(state: &Path, format: &str) -> Result<(), Box<dyn std::error::Error>> {
    let graph = from_canonical_json(&std::fs::read(state)?)?;
    let mut out = std::io::stdout().lock();
    match format {
        "json" => {
            out.write_all(&to_canonical_json(&graph)?)?;
            writeln!(out)?;
        }
        "edgelist" => {
            let dg = deform::build(&graph, &graph, &[], &[], &Default::default());
            out.write_all(deform::dump_edgelist(&dg, None).as_bytes())?;
        }
        _ => unreachable!("clap validates the format"),
    }
    Ok(())
}

fn print_summary(result: &PipelineResult) {
    eprintln!(
        "iterations: {}, nodes: {}, edges: {}, merges: {}",
        result.iterations,
        result.final_graph.num_nodes(),
        result.final_graph.num_edges(),
        result.final_graph.merge_journal().len(),
    );
    if let Some(last) = result.rows.last() {
        eprintln!(
            "robots initialized: {}, found: {:.1}%, correct: {:.1}%",
            last.robots_initialized, last.objects.found_pct, last.objects.correct_pct
        );
    }
}
