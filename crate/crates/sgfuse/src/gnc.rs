//! Graduated non-convexity over truncated-least-squares costs.
//!
//! Problems are weighted nonlinear least squares over manifold-valued
//! unknowns (poses and 3-vectors). The inner solver is Gauss-Newton with a
//! fixed Levenberg damping fallback; the outer loop anneals the TLS
//! surrogate, alternating weighted solves with the closed-form weight
//! update until every robust weight is binary.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use nalgebra_sparse::{CooMatrix, CscMatrix};

use crate::se3::{
    boxminus, se3_left_jacobian_inv, se3_right_jacobian_inv, Covariance6, CovarianceError, Pose,
    Twist,
};

/// χ²(0.99) quantiles for residual dimensions 1..=6, used for the default
/// inlier threshold on the Mahalanobis residual norm.
pub const CHI2_99: [f64; 6] = [
    6.6348966010212145,
    9.21034037197618,
    11.344866730144373,
    13.276704135987622,
    15.08627246938899,
    16.811893829770927,
];

/// Symmetric positive-definite 3×3 covariance for vector-valued residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariance3 {
    matrix: Matrix3<f64>,
    inverse: Matrix3<f64>,
}

impl Covariance3 {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self, CovarianceError> {
        let asym = (matrix - matrix.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(CovarianceError::NotSymmetric(asym));
        }
        let chol = matrix
            .cholesky()
            .ok_or(CovarianceError::NotPositiveDefinite)?;
        Ok(Covariance3 {
            matrix,
            inverse: chol.inverse(),
        })
    }

    pub fn isotropic(var: f64) -> Result<Self, CovarianceError> {
        Covariance3::new(Matrix3::identity() * var)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix3<f64> {
        &self.inverse
    }
}

/// A manifold-valued unknown.
#[derive(Clone, Debug, PartialEq)]
pub enum Variable {
    Pose(Pose),
    Point(Vector3<f64>),
}

impl Variable {
    pub fn dim(&self) -> usize {
        match self {
            Variable::Pose(_) => 6,
            Variable::Point(_) => 3,
        }
    }

    fn retract(&self, delta: &[f64]) -> Variable {
        match self {
            Variable::Pose(p) => {
                let v = Twist(nalgebra::Vector6::from_row_slice(delta));
                Variable::Pose(p.boxplus(&v))
            }
            Variable::Point(x) => {
                Variable::Point(x + Vector3::new(delta[0], delta[1], delta[2]))
            }
        }
    }

    pub fn as_pose(&self) -> Option<&Pose> {
        match self {
            Variable::Pose(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_point(&self) -> Option<&Vector3<f64>> {
        match self {
            Variable::Point(x) => Some(x),
            _ => None,
        }
    }
}

/// Residual functions. Pose residuals live in the tangent space
/// (rotation-first); point residuals are plain differences.
#[derive(Clone, Debug)]
pub enum ResidualKind {
    /// `log((T_from⁻¹ T_to)⁻¹ E)` — a relative-pose edge with measurement `E`.
    RelativePose {
        from: usize,
        to: usize,
        measurement: Pose,
    },
    /// `log(X⁻¹ Z)` — a direct pose observation, e.g. one averaging sample.
    PosePrior { var: usize, measurement: Pose },
    /// `x - z`.
    PointPrior {
        var: usize,
        measurement: Vector3<f64>,
    },
    /// `(x_to - x_from) - z`.
    RelativePoint {
        from: usize,
        to: usize,
        measurement: Vector3<f64>,
    },
}

#[derive(Clone, Debug)]
pub enum Noise {
    Pose(Covariance6),
    Point(Covariance3),
}

impl Noise {
    fn dim(&self) -> usize {
        match self {
            Noise::Pose(_) => 6,
            Noise::Point(_) => 3,
        }
    }

    fn information(&self) -> DMatrix<f64> {
        match self {
            Noise::Pose(c) => DMatrix::from_iterator(6, 6, c.inverse().iter().cloned()),
            Noise::Point(c) => DMatrix::from_iterator(3, 3, c.inverse().iter().cloned()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Residual {
    pub kind: ResidualKind,
    pub noise: Noise,
    /// Robust residuals go through the TLS cost; trusted ones keep weight 1.
    pub robust: bool,
}

/// A weighted nonlinear least-squares problem with a robust/trusted split.
#[derive(Clone, Debug, Default)]
pub struct RobustProblem {
    variables: Vec<Variable>,
    fixed: Vec<bool>,
    residuals: Vec<Residual>,
}

#[derive(Debug, thiserror::Error)]
pub enum GncError {
    #[error("problem has no residuals")]
    EmptyProblem,
    #[error("weight vector length {got} does not match residual count {want}")]
    WeightCount { got: usize, want: usize },
    #[error("weights must lie in [0, 1]")]
    WeightRange,
    #[error("normal equations are rank deficient; unconstrained variables: {variables:?}")]
    RankDeficient { variables: Vec<usize> },
    #[error("residual {residual} references unknown variable {variable}")]
    UnknownVariable { residual: usize, variable: usize },
    #[error("residual {residual} noise dimension {noise_dim} does not match residual dimension {residual_dim}")]
    DimensionMismatch {
        residual: usize,
        noise_dim: usize,
        residual_dim: usize,
    },
}

impl RobustProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_pose_variable(&mut self, initial: Pose) -> usize {
        self.variables.push(Variable::Pose(initial));
        self.fixed.push(false);
        self.variables.len() - 1
    }

    pub fn add_point_variable(&mut self, initial: Vector3<f64>) -> usize {
        self.variables.push(Variable::Point(initial));
        self.fixed.push(false);
        self.variables.len() - 1
    }

    /// Pins a variable at its current value (gauge anchor).
    pub fn fix_variable(&mut self, index: usize) {
        self.fixed[index] = true;
    }

    pub fn add_residual(&mut self, kind: ResidualKind, noise: Noise, robust: bool) -> usize {
        self.residuals.push(Residual {
            kind,
            noise,
            robust,
        });
        self.residuals.len() - 1
    }

    pub fn num_residuals(&self) -> usize {
        self.residuals.len()
    }

    pub fn num_variables(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn residuals(&self) -> &[Residual] {
        &self.residuals
    }

    fn validate(&self) -> Result<(), GncError> {
        if self.residuals.is_empty() {
            return Err(GncError::EmptyProblem);
        }
        for (i, res) in self.residuals.iter().enumerate() {
            let vars = residual_vars(&res.kind);
            for &v in &vars {
                if v >= self.variables.len() {
                    return Err(GncError::UnknownVariable {
                        residual: i,
                        variable: v,
                    });
                }
            }
            let rdim = match res.kind {
                ResidualKind::RelativePose { .. } | ResidualKind::PosePrior { .. } => 6,
                ResidualKind::PointPrior { .. } | ResidualKind::RelativePoint { .. } => 3,
            };
            if res.noise.dim() != rdim {
                return Err(GncError::DimensionMismatch {
                    residual: i,
                    noise_dim: res.noise.dim(),
                    residual_dim: rdim,
                });
            }
        }
        Ok(())
    }
}

fn residual_vars(kind: &ResidualKind) -> Vec<usize> {
    match *kind {
        ResidualKind::RelativePose { from, to, .. } => vec![from, to],
        ResidualKind::PosePrior { var, .. } => vec![var],
        ResidualKind::PointPrior { var, .. } => vec![var],
        ResidualKind::RelativePoint { from, to, .. } => vec![from, to],
    }
}

/// Evaluates one residual at the given values: the residual vector and the
/// Jacobian block for each involved variable (closed form throughout).
fn evaluate(
    kind: &ResidualKind,
    values: &[Variable],
) -> (DVector<f64>, Vec<(usize, DMatrix<f64>)>) {
    match *kind {
        ResidualKind::RelativePose {
            from,
            to,
            ref measurement,
        } => {
            let ti = values[from].as_pose().expect("pose variable");
            let tj = values[to].as_pose().expect("pose variable");
            let r = boxminus(&(ti.inverse() * *tj), measurement);
            // r = log(Z), Z = T_j⁻¹ T_i E.
            // T_i ⊞ δ: Z exp(Ad(E⁻¹) δ)  →  J_i = Jr⁻¹(r) Ad(E⁻¹)
            // T_j ⊞ δ: exp(-δ) Z        →  J_j = -Jl⁻¹(r)
            let jr_inv = se3_right_jacobian_inv(&r);
            let ad_e_inv = measurement.inverse().adjoint();
            let ji = jr_inv * ad_e_inv;
            let jj = -se3_left_jacobian_inv(&r);
            (
                DVector::from_column_slice(r.as_vector().as_slice()),
                vec![
                    (from, DMatrix::from_iterator(6, 6, ji.iter().cloned())),
                    (to, DMatrix::from_iterator(6, 6, jj.iter().cloned())),
                ],
            )
        }
        ResidualKind::PosePrior {
            var,
            ref measurement,
        } => {
            let x = values[var].as_pose().expect("pose variable");
            let r = boxminus(x, measurement);
            // X ⊞ δ: log(exp(-δ) X⁻¹ Z)  →  J = -Jl⁻¹(r)
            let j = -se3_left_jacobian_inv(&r);
            (
                DVector::from_column_slice(r.as_vector().as_slice()),
                vec![(var, DMatrix::from_iterator(6, 6, j.iter().cloned()))],
            )
        }
        ResidualKind::PointPrior {
            var,
            ref measurement,
        } => {
            let x = values[var].as_point().expect("point variable");
            let r = x - measurement;
            (
                DVector::from_column_slice(r.as_slice()),
                vec![(var, DMatrix::identity(3, 3))],
            )
        }
        ResidualKind::RelativePoint {
            from,
            to,
            ref measurement,
        } => {
            let xi = values[from].as_point().expect("point variable");
            let xj = values[to].as_point().expect("point variable");
            let r = (xj - xi) - measurement;
            (
                DVector::from_column_slice(r.as_slice()),
                vec![
                    (from, -DMatrix::identity(3, 3)),
                    (to, DMatrix::identity(3, 3)),
                ],
            )
        }
    }
}

/// Squared Mahalanobis norm of residual `i` at `values`.
fn residual_sq(problem: &RobustProblem, values: &[Variable], i: usize) -> f64 {
    let (r, _) = evaluate(&problem.residuals[i].kind, values);
    let info = problem.residuals[i].noise.information();
    (r.transpose() * info * r)[(0, 0)]
}

fn weighted_cost(problem: &RobustProblem, values: &[Variable], weights: &[f64]) -> f64 {
    (0..problem.residuals.len())
        .map(|i| {
            if weights[i] == 0.0 {
                0.0
            } else {
                weights[i] * residual_sq(problem, values, i)
            }
        })
        .sum()
}

/// Solver settings shared by the inner Gauss-Newton loop and the outer
/// annealing schedule.
#[derive(Clone, Debug)]
pub struct GncConfig {
    /// Max admissible Mahalanobis residual norm for an inlier (ε).
    pub inlier_threshold: f64,
    /// Multiplicative annealing factor for μ, > 1.
    pub mu_update_factor: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Inner convergence threshold on the update norm.
    pub convergence_tol: f64,
}

impl GncConfig {
    /// Default threshold from the χ²(0.99) quantile at the residual dimension.
    pub fn for_dim(dim: usize) -> Self {
        GncConfig {
            inlier_threshold: CHI2_99[dim - 1].sqrt(),
            ..GncConfig::default()
        }
    }
}

impl Default for GncConfig {
    fn default() -> Self {
        GncConfig {
            inlier_threshold: CHI2_99[5].sqrt(),
            mu_update_factor: 1.4,
            max_outer_iterations: 100,
            max_inner_iterations: 50,
            convergence_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GncResult {
    pub values: Vec<Variable>,
    /// Final per-residual weights; trusted residuals are exactly 1.
    pub weights: Vec<f64>,
    /// `weights[i] > 0.5`.
    pub inlier_mask: Vec<bool>,
    pub converged: bool,
    pub outer_iterations: usize,
    /// `(cost_before, cost_after)` of every inner weighted solve, at the
    /// weights used for that solve. The surrogate never increases.
    pub solve_trace: Vec<(f64, f64)>,
}

impl GncResult {
    /// True when every robust weight annealed to zero.
    pub fn no_inliers(&self) -> bool {
        self.weights.iter().all(|w| *w < 0.5) && !self.weights.is_empty()
    }
}

const DAMPING_INITIAL: f64 = 1e-6;
const DAMPING_GROWTH: f64 = 10.0;
const MAX_DAMPING_ESCALATIONS: usize = 12;

/// Gauss-Newton on the manifold minimizing `Σ wᵢ ‖rᵢ‖²_Σᵢ` from the problem's
/// stored initial values. Deterministic; only cost-decreasing steps are taken.
pub fn solve_weighted(problem: &RobustProblem, weights: &[f64]) -> Result<Vec<Variable>, GncError> {
    problem.validate()?;
    check_weights(problem, weights)?;
    let mut values = problem.variables.to_vec();
    let cfg = GncConfig::default();
    solve_weighted_in_place(problem, weights, &mut values, &cfg)?;
    Ok(values)
}

fn check_weights(problem: &RobustProblem, weights: &[f64]) -> Result<(), GncError> {
    if weights.len() != problem.residuals.len() {
        return Err(GncError::WeightCount {
            got: weights.len(),
            want: problem.residuals.len(),
        });
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(GncError::WeightRange);
    }
    Ok(())
}

/// Runs the inner solver, mutating `values`. Returns (initial cost, final cost).
fn solve_weighted_in_place(
    problem: &RobustProblem,
    weights: &[f64],
    values: &mut Vec<Variable>,
    cfg: &GncConfig,
) -> Result<(f64, f64), GncError> {
    // Active-variable layout (fixed variables are excluded from the system).
    let mut offsets = vec![usize::MAX; problem.variables.len()];
    let mut total_dim = 0usize;
    for (i, var) in problem.variables.iter().enumerate() {
        if !problem.fixed[i] {
            offsets[i] = total_dim;
            total_dim += var.dim();
        }
    }
    let cost_initial = weighted_cost(problem, values, weights);
    if total_dim == 0 {
        return Ok((cost_initial, cost_initial));
    }

    let mut cost_current = cost_initial;
    for _ in 0..cfg.max_inner_iterations {
        let (h_coo, g, touched) = assemble(problem, values, weights, &offsets, total_dim);

        // A variable no weighted residual touches leaves a zero diagonal
        // block; the system cannot determine it.
        let untouched: Vec<usize> = problem
            .variables
            .iter()
            .enumerate()
            .filter(|(i, _)| offsets[*i] != usize::MAX && !touched[*i])
            .map(|(i, _)| i)
            .collect();
        if !untouched.is_empty() {
            return Err(GncError::RankDeficient {
                variables: untouched,
            });
        }

        if g.norm() == 0.0 {
            break;
        }

        let mut lambda = DAMPING_INITIAL;
        let mut accepted = false;
        for _ in 0..=MAX_DAMPING_ESCALATIONS {
            let delta = match solve_normal_equations(&h_coo, &g, lambda, total_dim) {
                Some(d) => d,
                None => {
                    lambda *= DAMPING_GROWTH;
                    continue;
                }
            };
            let candidate = retract_all(values, &offsets, &delta);
            let cost_new = weighted_cost(problem, &candidate, weights);
            if cost_new <= cost_current + 1e-12 {
                *values = candidate;
                let step_norm = delta.norm();
                cost_current = cost_new;
                accepted = true;
                if step_norm < cfg.convergence_tol {
                    return Ok((cost_initial, cost_current));
                }
                break;
            }
            lambda *= DAMPING_GROWTH;
        }
        if !accepted {
            break; // no improving step found at any damping level
        }
    }
    Ok((cost_initial, cost_current))
}

/// Builds the normal equations `H δ = -g` in triplet form, plus a map of
/// which variables any weighted residual touched.
fn assemble(
    problem: &RobustProblem,
    values: &[Variable],
    weights: &[f64],
    offsets: &[usize],
    total_dim: usize,
) -> (CooMatrix<f64>, DVector<f64>, Vec<bool>) {
    let mut coo = CooMatrix::new(total_dim, total_dim);
    let mut g = DVector::zeros(total_dim);
    let mut touched = vec![false; problem.variables.len()];

    for (ri, res) in problem.residuals.iter().enumerate() {
        let w = weights[ri];
        if w < 1e-12 {
            continue;
        }
        let (r, jacobians) = evaluate(&res.kind, values);
        let info = res.noise.information();
        let weighted_info = info * w;
        for (vi, ji) in &jacobians {
            if offsets[*vi] == usize::MAX {
                continue;
            }
            touched[*vi] = true;
            let jti = ji.transpose() * &weighted_info;
            let gi = &jti * &r;
            let oi = offsets[*vi];
            for k in 0..gi.len() {
                g[oi + k] += gi[k];
            }
            for (vj, jj) in &jacobians {
                if offsets[*vj] == usize::MAX {
                    continue;
                }
                let hij = &jti * jj;
                let oj = offsets[*vj];
                for c in 0..hij.ncols() {
                    for rr in 0..hij.nrows() {
                        let v = hij[(rr, c)];
                        if v != 0.0 {
                            coo.push(oi + rr, oj + c, v);
                        }
                    }
                }
            }
        }
    }
    (coo, g, touched)
}

/// Solves `(H + λI) δ = -g`. Dense Cholesky for small systems, sparse for
/// the rest. Returns `None` when the factorization fails.
fn solve_normal_equations(
    h_coo: &CooMatrix<f64>,
    g: &DVector<f64>,
    lambda: f64,
    total_dim: usize,
) -> Option<DVector<f64>> {
    if total_dim <= 96 {
        let mut h = DMatrix::zeros(total_dim, total_dim);
        for (i, j, v) in h_coo.triplet_iter() {
            h[(i, j)] += v;
        }
        for i in 0..total_dim {
            h[(i, i)] += lambda;
        }
        let chol = h.cholesky()?;
        Some(chol.solve(&(-g)))
    } else {
        let mut coo = h_coo.clone();
        for i in 0..total_dim {
            coo.push(i, i, lambda);
        }
        let csc = CscMatrix::from(&coo);
        let chol = nalgebra_sparse::factorization::CscCholesky::factor(&csc).ok()?;
        let rhs = DMatrix::from_column_slice(total_dim, 1, (-g).as_slice());
        let sol = chol.solve(&rhs);
        Some(DVector::from_column_slice(sol.as_slice()))
    }
}

fn retract_all(
    values: &[Variable],
    offsets: &[usize],
    delta: &DVector<f64>,
) -> Vec<Variable> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if offsets[i] == usize::MAX {
                v.clone()
            } else {
                let d = &delta.as_slice()[offsets[i]..offsets[i] + v.dim()];
                v.retract(d)
            }
        })
        .collect()
}

/// Closed-form TLS weight update at annealing parameter μ.
fn tls_weight(r_sq: f64, mu: f64, eps_sq: f64) -> f64 {
    let upper = (mu + 1.0) / mu * eps_sq;
    let lower = mu / (mu + 1.0) * eps_sq;
    if r_sq >= upper {
        0.0
    } else if r_sq <= lower {
        1.0
    } else {
        (eps_sq * mu * (mu + 1.0) / r_sq).sqrt() - mu
    }
}

/// Runs GNC-TLS: anneals μ from the max initial residual, alternating
/// weighted solves with the closed-form weight update until the robust
/// weights are binary (within 1e-3) or the iteration cap is hit.
///
/// An all-outliers outcome is a valid result (see [`GncResult::no_inliers`]),
/// not an error.
pub fn solve_gnc(problem: &RobustProblem, config: &GncConfig) -> Result<GncResult, GncError> {
    problem.validate()?;
    let n = problem.residuals.len();
    let eps_sq = config.inlier_threshold * config.inlier_threshold;
    let mut values = problem.variables.to_vec();
    let mut weights = vec![1.0; n];
    let mut trace = Vec::new();

    let robust: Vec<usize> = (0..n).filter(|i| problem.residuals[*i].robust).collect();
    if robust.is_empty() {
        let (c0, c1) = solve_weighted_in_place(problem, &weights, &mut values, config)?;
        trace.push((c0, c1));
        return Ok(finish(values, weights, true, 1, trace));
    }

    let r_max_sq = robust
        .iter()
        .map(|&i| residual_sq(problem, &values, i))
        .fold(0.0_f64, f64::max);
    let denom = 2.0 * r_max_sq - eps_sq;
    let mut mu = if denom > 0.0 { eps_sq / denom } else { 1e6 };

    let mut converged = false;
    let mut outer = 0;
    while outer < config.max_outer_iterations {
        outer += 1;
        let (c0, c1) = solve_weighted_in_place(problem, &weights, &mut values, config)?;
        trace.push((c0, c1));

        for &i in &robust {
            let r_sq = residual_sq(problem, &values, i);
            weights[i] = tls_weight(r_sq, mu, eps_sq);
        }

        // Early in the schedule the transition band covers everything and all
        // weights are tiny, so near-binary values only count as converged
        // once μ has tightened the band around ε².
        let band_is_tight = mu >= 1.0;
        let binary = robust.iter().all(|&i| {
            weights[i] == 0.0
                || weights[i] == 1.0
                || (band_is_tight && (weights[i] < 1e-3 || weights[i] > 1.0 - 1e-3))
        });
        if binary {
            converged = true;
            break;
        }
        mu *= config.mu_update_factor;
    }

    // Polish: round the weights and re-solve on the selected inlier set so
    // the solution is the plain least-squares optimum of that set.
    for &i in &robust {
        weights[i] = if weights[i] > 0.5 { 1.0 } else { 0.0 };
    }
    if weights.iter().any(|w| *w > 0.0) {
        let (c0, c1) = solve_weighted_in_place(problem, &weights, &mut values, config)?;
        trace.push((c0, c1));
    }
    Ok(finish(values, weights, converged, outer, trace))
}

fn finish(
    values: Vec<Variable>,
    weights: Vec<f64>,
    converged: bool,
    outer: usize,
    trace: Vec<(f64, f64)>,
) -> GncResult {
    let inlier_mask = weights.iter().map(|w| *w > 0.5).collect();
    GncResult {
        values,
        weights,
        inlier_mask,
        converged,
        outer_iterations: outer,
        solve_trace: trace,
    }
}
