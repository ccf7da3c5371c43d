//! Scenario files: the single JSON document driving the simulator, the
//! loop-closure oracle, and every solver knob.

use serde::{Deserialize, Serialize};

use crate::align::AlignmentConfig;
use crate::gnc::GncConfig;
use crate::reconcile::{IcpConfig, ReconciliationConfig};
use crate::se3::Covariance6;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario at `{path}`: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        path: path.to_string(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub robots: Vec<RobotConfig>,
    #[serde(default)]
    pub loop_closures: LoopClosureOracleConfig,
    #[serde(default)]
    pub solvers: SolverConfig,
    /// Simulation steps between backend iterations.
    #[serde(default = "default_backend_period")]
    pub backend_period: u64,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
}

/// Thresholds for the metrics report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    pub object_distance_threshold: f64,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        EvaluationSpec {
            object_distance_threshold: 1.0,
        }
    }
}

fn default_backend_period() -> u64 {
    25
}

impl ScenarioConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.robots.is_empty() {
            return Err(invalid("robots", "at least one robot required"));
        }
        for (i, r) in self.robots.iter().enumerate() {
            if r.waypoints.len() < 2 {
                return Err(invalid(
                    &format!("robots[{i}].waypoints"),
                    "need at least two waypoints",
                ));
            }
            if r.step_length <= 0.0 {
                return Err(invalid(&format!("robots[{i}].step_length"), "must be > 0"));
            }
            if r.snapshot_period == 0 {
                return Err(invalid(
                    &format!("robots[{i}].snapshot_period"),
                    "must be >= 1",
                ));
            }
            if r.keyframe_every == 0 {
                return Err(invalid(
                    &format!("robots[{i}].keyframe_every"),
                    "must be >= 1",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.loop_closures.outlier_rate) {
            return Err(invalid("loop_closures.outlier_rate", "must be in [0, 1)"));
        }
        if self.world.places.spacing <= 0.0 {
            return Err(invalid("world.places.spacing", "must be > 0"));
        }
        if self.world.places.radius <= 0.0 {
            return Err(invalid("world.places.radius", "must be > 0"));
        }
        if self.backend_period == 0 {
            return Err(invalid("backend_period", "must be >= 1"));
        }
        self.solvers.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    /// Outer bounds; outlier loop closures are drawn uniformly inside.
    pub bounds: BoxSpec,
    #[serde(default)]
    pub rooms: Vec<BoxSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    pub places: PlacesSpec,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub label: u32,
    pub centroid: [f64; 3],
    pub extents: [f64; 3],
    /// Mesh control vertices generated on the box (corners first).
    #[serde(default = "default_control_points")]
    pub control_points: usize,
    /// Additional dense mesh vertices sampled on the box faces.
    #[serde(default)]
    pub dense_vertices: usize,
}

fn default_control_points() -> usize {
    8
}

/// Places are generated on a horizontal grid inside each room.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacesSpec {
    pub spacing: f64,
    pub radius: f64,
    #[serde(default = "default_place_height")]
    pub height: f64,
}

fn default_place_height() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default = "default_step_length")]
    pub step_length: f64,
    /// Agent keyframes are emitted every this many steps.
    #[serde(default = "default_keyframe_every")]
    pub keyframe_every: u64,
    #[serde(default)]
    pub odom_sigma_rot_per_m: f64,
    #[serde(default)]
    pub odom_sigma_trans_per_m: f64,
    /// Full snapshots are transmitted every this many steps.
    #[serde(default = "default_snapshot_period")]
    pub snapshot_period: u64,
    #[serde(default = "default_sensing_radius")]
    pub sensing_radius: f64,
    #[serde(default = "default_true")]
    pub has_semantics: bool,
    #[serde(default = "default_true")]
    pub has_mesh: bool,
}

fn default_step_length() -> f64 {
    0.25
}

fn default_keyframe_every() -> u64 {
    4
}

fn default_snapshot_period() -> u64 {
    25
}

fn default_sensing_radius() -> f64 {
    4.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopClosureOracleConfig {
    pub detection_radius: f64,
    pub inter_robot_rate: f64,
    pub intra_robot_rate: f64,
    pub outlier_rate: f64,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    /// 0 means unlimited.
    pub max_per_pair: u64,
    /// Minimum keyframe-step separation for intra-robot closures.
    pub min_separation_steps: u64,
}

impl Default for LoopClosureOracleConfig {
    fn default() -> Self {
        LoopClosureOracleConfig {
            detection_radius: 1.5,
            inter_robot_rate: 1.0,
            intra_robot_rate: 1.0,
            outlier_rate: 0.0,
            sigma_rot: 0.0,
            sigma_trans: 0.0,
            max_per_pair: 0,
            min_separation_steps: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub gnc: GncSpec,
    pub alignment: AlignmentSpec,
    pub reconciliation: ReconciliationSpec,
    pub omega: OmegaTable,
    /// Dense mesh vertices bind to this many nearest control points.
    pub mesh_binding_count: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gnc: GncSpec::default(),
            alignment: AlignmentSpec::default(),
            reconciliation: ReconciliationSpec::default(),
            omega: OmegaTable::default(),
            mesh_binding_count: 4,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), ScenarioError> {
        if self.gnc.mu_update_factor <= 1.0 {
            return Err(invalid("solvers.gnc.mu_update_factor", "must be > 1"));
        }
        if let Some(eps) = self.gnc.inlier_threshold {
            if eps <= 0.0 {
                return Err(invalid("solvers.gnc.inlier_threshold", "must be > 0"));
            }
        }
        if self.alignment.k_min_inliers < 1 {
            return Err(invalid("solvers.alignment.k_min_inliers", "must be >= 1"));
        }
        if self.alignment.realign_translation_threshold <= 0.0 {
            return Err(invalid(
                "solvers.alignment.realign_translation_threshold",
                "must be > 0",
            ));
        }
        let rc = &self.reconciliation;
        if rc.place_distance_max <= 0.0
            || rc.place_radius_diff_max <= 0.0
            || rc.icp_max_correspondence_distance <= 0.0
        {
            return Err(invalid("solvers.reconciliation", "distances must be > 0"));
        }
        if !(0.0 < rc.undo_ratio_threshold && rc.undo_ratio_threshold <= 1.0) {
            return Err(invalid(
                "solvers.reconciliation.undo_ratio_threshold",
                "must be in (0, 1]",
            ));
        }
        if self.mesh_binding_count == 0 {
            return Err(invalid("solvers.mesh_binding_count", "must be >= 1"));
        }
        Ok(())
    }

    pub fn gnc_config(&self) -> GncConfig {
        let mut cfg = GncConfig::for_dim(6);
        if let Some(eps) = self.gnc.inlier_threshold {
            cfg.inlier_threshold = eps;
        }
        cfg.mu_update_factor = self.gnc.mu_update_factor;
        cfg.max_outer_iterations = self.gnc.max_outer_iterations;
        cfg.max_inner_iterations = self.gnc.max_inner_iterations;
        cfg.convergence_tol = self.gnc.convergence_tol;
        cfg
    }

    pub fn alignment_config(&self) -> AlignmentConfig {
        AlignmentConfig {
            k_min_inliers: self.alignment.k_min_inliers,
            realign_translation_threshold: self.alignment.realign_translation_threshold,
            sigma: Covariance6::isotropic(
                self.alignment.sigma_rot_var,
                self.alignment.sigma_trans_var,
            )
            .expect("validated variances"),
        }
    }

    pub fn reconciliation_config(&self) -> ReconciliationConfig {
        let rc = &self.reconciliation;
        ReconciliationConfig {
            place_distance_max: rc.place_distance_max,
            place_radius_diff_max: rc.place_radius_diff_max,
            undo_ratio_threshold: rc.undo_ratio_threshold,
            icp: IcpConfig {
                max_iterations: rc.icp_max_iterations,
                convergence_tol: rc.icp_convergence_tol,
                max_correspondence_distance: rc.icp_max_correspondence_distance,
                vertex_cap: rc.icp_vertex_cap,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GncSpec {
    /// Defaults to the χ²(0.99) quantile at the residual dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inlier_threshold: Option<f64>,
    pub mu_update_factor: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub convergence_tol: f64,
}

impl Default for GncSpec {
    fn default() -> Self {
        GncSpec {
            inlier_threshold: None,
            mu_update_factor: 1.4,
            max_outer_iterations: 100,
            max_inner_iterations: 50,
            convergence_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentSpec {
    pub k_min_inliers: usize,
    pub realign_translation_threshold: f64,
    pub sigma_rot_var: f64,
    pub sigma_trans_var: f64,
}

impl Default for AlignmentSpec {
    fn default() -> Self {
        AlignmentSpec {
            k_min_inliers: 5,
            realign_translation_threshold: 10.0,
            sigma_rot_var: 1e-4,
            sigma_trans_var: 2.5e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconciliationSpec {
    pub place_distance_max: f64,
    pub place_radius_diff_max: f64,
    pub undo_ratio_threshold: f64,
    pub icp_max_iterations: usize,
    pub icp_convergence_tol: f64,
    pub icp_max_correspondence_distance: f64,
    pub icp_vertex_cap: usize,
}

impl Default for ReconciliationSpec {
    fn default() -> Self {
        ReconciliationSpec {
            place_distance_max: 0.01,
            place_radius_diff_max: 0.01,
            undo_ratio_threshold: 0.5,
            icp_max_iterations: 50,
            icp_convergence_tol: 1e-10,
            icp_max_correspondence_distance: 0.25,
            icp_vertex_cap: 1000,
        }
    }
}

/// Per-edge-type information diagonals `[rotation, translation]` for the
/// deformation optimization; larger means stiffer.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OmegaTable {
    pub odometry: [f64; 2],
    pub loop_closure: [f64; 2],
    pub rigidity: [f64; 2],
    pub merge_factor: [f64; 2],
    pub place_agent: [f64; 2],
    pub place_object: [f64; 2],
}

impl Default for OmegaTable {
    fn default() -> Self {
        OmegaTable {
            odometry: [1e2, 1e2],
            loop_closure: [1e2, 1e2],
            rigidity: [1e3, 1e3],
            merge_factor: [1e1, 1e1],
            place_agent: [1e3, 1e3],
            place_object: [1e3, 1e3],
        }
    }
}
