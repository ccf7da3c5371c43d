//! SE(3) poses, twists, and the tangent-space machinery used by the solvers.
//!
//! Conventions, fixed once and asserted in tests:
//! - twists are rotation-first: `(wx, wy, wz, vx, vy, vz)`;
//! - perturbations act on the right: `X ⊞ v = X * exp(v)`;
//! - `boxminus(x, y) = log(x⁻¹ y)`;
//! - `log` takes the principal branch; at a π rotation the axis sign is
//!   chosen so that its first nonzero component is positive.

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

/// Rotation magnitude below which series expansions replace the exact
/// trigonometric coefficients. The exact forms cancel catastrophically for
/// small angles while the series (carried to θ⁴) are at machine precision
/// up to this point.
const SMALL_ANGLE: f64 = 1e-2;

/// A rigid-body transform: unit-quaternion rotation plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, renormalizing the quaternion and canonicalizing its sign.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: canonical_quat(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation of `angle` radians about the given axis, plus translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Pose::new(UnitQuaternion::from_axis_angle(&axis, angle), translation)
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Applies the transform to a point: `R p + t`.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose::new(inv_rot, -(inv_rot * self.translation))
    }

    /// Exponential map from a twist; the resulting transform applies the
    /// screw motion described by the twist.
    pub fn exp(v: &Twist) -> Pose {
        let w = v.rotational();
        let rho = v.translational();
        let rotation = so3_exp(&w);
        let translation = so3_left_jacobian(&w) * rho;
        Pose::new(rotation, translation)
    }

    /// Logarithm map; inverse of [`Pose::exp`] away from the π-rotation
    /// singularity (there the documented axis tie-break applies).
    pub fn log(&self) -> Twist {
        let w = so3_log(&self.rotation);
        let rho = so3_left_jacobian_inv(&w) * self.translation;
        Twist::from_parts(w, rho)
    }

    /// Right-perturbation: `self * exp(v)`.
    pub fn boxplus(&self, v: &Twist) -> Pose {
        self.compose(&Pose::exp(v))
    }

    /// Matrix product `self * other` (apply `other` first, then `self`).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Adjoint matrix `Ad(T)` satisfying `exp(Ad(T) v) = T exp(v) T⁻¹`,
    /// in rotation-first twist coordinates.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let t_skew = skew(&self.translation);
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(t_skew * r));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }

    /// Serializes as `(qw, qx, qy, qz, tx, ty, tz)` with `qw >= 0`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = canonical_quat(self.rotation);
        let t = self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn from_array(a: &[f64; 7]) -> Pose {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(a[0], a[1], a[2], a[3]));
        Pose::new(q, Vector3::new(a[4], a[5], a[6]))
    }

    /// Rotation angle (radians) of the rotation part, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }
}

impl std::ops::Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Tangent-space difference `log(x⁻¹ y)`.
pub fn boxminus(x: &Pose, y: &Pose) -> Twist {
    (x.inverse() * *y).log()
}

/// Element of the SE(3) tangent space, rotation-first:
/// `(wx, wy, wz, vx, vy, vz)` in radians and meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn from_parts(rotational: Vector3<f64>, translational: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            rotational.x,
            rotational.y,
            rotational.z,
            translational.x,
            translational.y,
            translational.z,
        ))
    }

    pub fn rotational(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }

    pub fn translational(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn as_vector(&self) -> &Vector6<f64> {
        &self.0
    }
}

/// Symmetric positive-definite 6×6 covariance. The inverse is cached at
/// construction so Mahalanobis evaluations are a single quadratic form.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariance6 {
    matrix: Matrix6<f64>,
    inverse: Matrix6<f64>,
}

/// Construction-time validation failures for covariance matrices.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CovarianceError {
    #[error("covariance is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
}

impl Covariance6 {
    pub fn new(matrix: Matrix6<f64>) -> Result<Self, CovarianceError> {
        let asym = (matrix - matrix.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(CovarianceError::NotSymmetric(asym));
        }
        let chol = matrix
            .cholesky()
            .ok_or(CovarianceError::NotPositiveDefinite)?;
        Ok(Covariance6 {
            matrix,
            inverse: chol.inverse(),
        })
    }

    pub fn identity() -> Self {
        Covariance6::new(Matrix6::identity()).unwrap()
    }

    pub fn from_diagonal(diag: &Vector6<f64>) -> Result<Self, CovarianceError> {
        Covariance6::new(Matrix6::from_diagonal(diag))
    }

    /// Isotropic rotation/translation variances, rotation-first.
    pub fn isotropic(rot_var: f64, trans_var: f64) -> Result<Self, CovarianceError> {
        Covariance6::from_diagonal(&Vector6::new(
            rot_var, rot_var, rot_var, trans_var, trans_var, trans_var,
        ))
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &Matrix6<f64> {
        &self.inverse
    }
}

/// Squared Mahalanobis distance `vᵀ Σ⁻¹ v`.
pub fn mahalanobis_sq(v: &Twist, sigma: &Covariance6) -> f64 {
    (v.0.transpose() * sigma.inverse() * v.0)[(0, 0)]
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn canonical_quat(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let mut raw = q.into_inner();
    let norm = raw.norm();
    if norm > 0.0 {
        raw /= norm;
    }
    if raw.w.abs() <= 1e-12 {
        // π rotation: snap to the exact branch point and pick the axis whose
        // first nonzero component is positive, so the logarithm is
        // deterministic on both sides of the cut.
        raw.w = 0.0;
        let n = (raw.i * raw.i + raw.j * raw.j + raw.k * raw.k).sqrt();
        raw.i /= n;
        raw.j /= n;
        raw.k /= n;
        let v = [raw.i, raw.j, raw.k];
        if let Some(first) = v.iter().find(|c| **c != 0.0) {
            if *first < 0.0 {
                raw = -raw;
            }
        }
    } else if raw.w < 0.0 {
        raw = -raw;
    }
    UnitQuaternion::new_unchecked(raw)
}

pub fn so3_exp(w: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta2 = w.norm_squared();
    let (re, im) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // cos(θ/2), sin(θ/2)/θ
        (
            1.0 - theta2 / 8.0 + theta2 * theta2 / 384.0,
            0.5 - theta2 / 48.0 + theta2 * theta2 / 3840.0,
        )
    } else {
        let theta = theta2.sqrt();
        ((theta / 2.0).cos(), (theta / 2.0).sin() / theta)
    };
    canonical_quat(UnitQuaternion::new_unchecked(Quaternion::new(
        re,
        im * w.x,
        im * w.y,
        im * w.z,
    )))
}

pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonical_quat(*q).into_inner();
    let im = Vector3::new(q.i, q.j, q.k);
    let n = im.norm();
    if n < 1e-9 {
        // θ/n → 2/w for small imaginary part
        im * (2.0 / q.w)
    } else {
        let theta = 2.0 * n.atan2(q.w);
        im * (theta / n)
    }
}

/// SO(3) left Jacobian `V(w) = I + a w× + b w×²`, which also maps a twist's
/// translational part into the group translation in `exp`.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + wx * a + wx * wx * b
}

pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    let e = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let theta = theta2.sqrt();
        // Stable through θ → π: (1 - cos θ) stays away from zero.
        1.0 / theta2 - theta.sin() / (2.0 * theta * (1.0 - theta.cos()))
    };
    Matrix3::identity() - wx * 0.5 + wx * wx * e
}

/// Q block of the SE(3) left Jacobian (rotation-first ordering puts it in
/// the lower-left corner).
fn se3_jacobian_q(w: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    let px = skew(rho);
    let (c1, c2, c3) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
            1.0 / 24.0 - theta2 / 720.0 + theta2 * theta2 / 40320.0,
            1.0 / 120.0 - theta2 / 5040.0 + theta2 * theta2 / 362880.0,
        )
    } else {
        let theta = theta2.sqrt();
        let s = theta.sin();
        let c = theta.cos();
        (
            (theta - s) / (theta2 * theta),
            (theta2 / 2.0 + c - 1.0) / (theta2 * theta2),
            (s - theta + theta2 * theta / 6.0) / (theta2 * theta2 * theta),
        )
    };
    let wpw = wx * px * wx;
    px * 0.5
        + (wx * px + px * wx + wpw) * c1
        + (wx * wx * px + px * wx * wx - wpw * 3.0) * c2
        + (wx * wpw + wpw * wx) * (0.5 * c2 - 1.5 * c3)
}

/// SE(3) left Jacobian in rotation-first coordinates:
/// `[[J, 0], [Q, J]]` with `J = so3_left_jacobian`.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let w = xi.rotational();
    let rho = xi.translational();
    let j3 = so3_left_jacobian(&w);
    let q = se3_jacobian_q(&w, &rho);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&j3);
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&j3);
    j
}

pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let w = xi.rotational();
    let rho = xi.translational();
    let j3_inv = so3_left_jacobian_inv(&w);
    let q = se3_jacobian_q(&w, &rho);
    let lower = -j3_inv * q * j3_inv;
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&j3_inv);
    j.fixed_view_mut::<3, 3>(3, 0).copy_from(&lower);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&j3_inv);
    j
}

/// Inverse right Jacobian: `Jr⁻¹(ξ) = Jl⁻¹(-ξ)`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&Twist(-xi.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

    fn rz(angle: f64) -> Pose {
        Pose::from_axis_angle(Vector3::z(), angle, Vector3::zeros())
    }

    fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
        boxminus(a, b).norm() < tol
    }

    #[test]
    fn compose_identities() {
        let id = Pose::identity();
        assert!(pose_close(&id.compose(&id), &id, 1e-15));
        let x = Pose::from_axis_angle(
            Vector3::new(1.0, 2.0, -0.5),
            1.1,
            Vector3::new(0.3, -2.0, 5.0),
        );
        assert!(pose_close(&(x * x.inverse()), &Pose::identity(), 1e-9));
    }

    #[test]
    fn compose_matches_hand_matrix_product() {
        // Rz(90°)+t[1,0,0] composed with Rz(90°) = Rz(180°)+t[1,0,0]
        let a = Pose::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::new(1.0, 0.0, 0.0));
        let b = rz(FRAC_PI_2);
        let c = a.compose(&b);
        let expected = Pose::from_axis_angle(Vector3::z(), PI, Vector3::new(1.0, 0.0, 0.0));
        assert!(pose_close(&c, &expected, 1e-12));
    }

    #[test]
    fn boxminus_examples() {
        let x = Pose::from_axis_angle(Vector3::new(0.3, 0.8, 0.1), 0.9, Vector3::new(1.0, 2.0, 3.0));
        assert_abs_diff_eq!(boxminus(&x, &x).norm(), 0.0, epsilon = 1e-12);

        let t = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let v = boxminus(&Pose::identity(), &t);
        assert_abs_diff_eq!(v.0, Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0), epsilon = 1e-12);

        let v = boxminus(&rz(FRAC_PI_6), &rz(2.0 * FRAC_PI_6));
        assert_abs_diff_eq!(
            v.0,
            Vector6::new(0.0, 0.0, FRAC_PI_6, 0.0, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn mahalanobis_examples() {
        let zero = Twist::zero();
        assert_eq!(mahalanobis_sq(&zero, &Covariance6::identity()), 0.0);

        let v = Twist(Vector6::new(0.0, 0.0, 0.0, 3.0, 0.0, 0.0));
        assert_abs_diff_eq!(mahalanobis_sq(&v, &Covariance6::identity()), 9.0, epsilon = 1e-12);

        let sigma =
            Covariance6::from_diagonal(&Vector6::new(1.0, 1.0, 1.0, 4.0, 1.0, 1.0)).unwrap();
        let v = Twist(Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0));
        assert_abs_diff_eq!(mahalanobis_sq(&v, &sigma), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn covariance_rejects_bad_input() {
        let mut m = Matrix6::identity();
        m[(0, 1)] = 1e-6;
        assert!(matches!(
            Covariance6::new(m),
            Err(CovarianceError::NotSymmetric(_))
        ));
        let m = Matrix6::from_diagonal(&Vector6::new(1.0, 1.0, -1.0, 1.0, 1.0, 1.0));
        assert_eq!(Covariance6::new(m), Err(CovarianceError::NotPositiveDefinite));
    }

    #[test]
    fn exp_log_examples() {
        assert!(pose_close(&Pose::exp(&Twist::zero()), &Pose::identity(), 1e-15));

        let v = Twist(Vector6::new(0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0));
        assert!(pose_close(&Pose::exp(&v), &rz(FRAC_PI_2), 1e-12));
    }

    #[test]
    fn log_near_pi_uses_principal_branch() {
        let x = Pose::from_axis_angle(Vector3::new(1.0, 0.0, 0.0), PI, Vector3::zeros());
        let w = x.log().rotational();
        assert_abs_diff_eq!(w.norm(), PI, epsilon = 1e-9);
        assert!(w.x > 0.0);

        // Same rotation entered with the opposite axis sign maps to the same
        // canonical logarithm.
        let y = Pose::from_axis_angle(Vector3::new(-1.0, 0.0, 0.0), PI, Vector3::zeros());
        assert_abs_diff_eq!((x.log().0 - y.log().0).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn pose7_roundtrip_canonicalizes_sign() {
        let x = Pose::from_axis_angle(Vector3::new(0.1, -0.7, 0.4), 2.9, Vector3::new(4.0, 5.0, 6.0));
        let a = x.to_array();
        assert!(a[0] >= 0.0);
        assert!(pose_close(&Pose::from_array(&a), &x, 1e-12));
    }

    #[test]
    fn adjoint_conjugation_identity() {
        let t = Pose::from_axis_angle(Vector3::new(0.2, 0.5, -1.0), 0.7, Vector3::new(1.0, -2.0, 0.5));
        let xi = Twist(Vector6::new(0.1, -0.2, 0.3, 0.4, 0.5, -0.6));
        let lhs = Pose::exp(&Twist(t.adjoint() * xi.0));
        let rhs = t * Pose::exp(&xi) * t.inverse();
        assert!(pose_close(&lhs, &rhs, 1e-9));
    }

    fn numeric_diff<F: Fn(&Twist) -> Twist>(f: F) -> Matrix6<f64> {
        let h = 1e-6;
        let mut j = Matrix6::zeros();
        for k in 0..6 {
            let mut dp = Vector6::zeros();
            dp[k] = h;
            let fp = f(&Twist(dp)).0;
            let fm = f(&Twist(-dp)).0;
            j.set_column(k, &((fp - fm) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_differences() {
        for xi in [
            Twist(Vector6::new(0.3, -0.2, 0.5, 1.0, -2.0, 0.4)),
            Twist(Vector6::new(1e-6, 2e-6, -1e-6, 0.3, 0.1, -0.2)),
            Twist(Vector6::new(1.5, 0.4, -0.9, 0.0, 0.0, 0.0)),
        ] {
            let z = Pose::exp(&xi);
            // d/dδ log(Z exp(δ)) at δ=0 is Jr⁻¹(log Z)
            let numeric = numeric_diff(|d| (z * Pose::exp(d)).log());
            let analytic = se3_right_jacobian_inv(&xi);
            assert_abs_diff_eq!(numeric, analytic, epsilon = 1e-5);
        }
    }

    #[test]
    fn left_jacobian_inverse_matches_finite_differences() {
        let xi = Twist(Vector6::new(-0.4, 0.7, 0.2, 0.8, -0.3, 1.2));
        let z = Pose::exp(&xi);
        // d/dδ log(exp(δ) Z) at δ=0 is Jl⁻¹(log Z)
        let numeric = numeric_diff(|d| (Pose::exp(d) * z).log());
        let analytic = se3_left_jacobian_inv(&xi);
        assert_abs_diff_eq!(numeric, analytic, epsilon = 1e-5);
    }

    #[test]
    fn left_jacobian_inverse_is_inverse() {
        let xi = Twist(Vector6::new(0.9, -1.1, 0.3, 2.0, 0.4, -0.7));
        let prod = se3_left_jacobian(&xi) * se3_left_jacobian_inv(&xi);
        assert_abs_diff_eq!(prod, Matrix6::identity(), epsilon = 1e-10);
    }

    fn arb_twist(max: f64) -> impl Strategy<Value = Twist> {
        proptest::array::uniform6(-max..max).prop_map(|a| Twist(Vector6::from_row_slice(&a)))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        arb_twist(1.5).prop_map(|t| Pose::exp(&t))
    }

    proptest! {
        #[test]
        fn composition_is_associative(x in arb_pose(), y in arb_pose(), z in arb_pose()) {
            let a = (x * y) * z;
            let b = x * (y * z);
            prop_assert!(boxminus(&a, &b).norm() < 1e-9);
        }

        #[test]
        fn exp_log_roundtrip(v in arb_twist(1.0)) {
            let back = Pose::exp(&v).log();
            prop_assert!((back.0 - v.0).norm() < 1e-9);
        }

        #[test]
        fn boxminus_inverts_boxplus(x in arb_pose(), v in arb_twist(0.4)) {
            let y = x.boxplus(&v);
            prop_assert!((boxminus(&x, &y).0 - v.0).norm() < 1e-8);
        }

        #[test]
        fn quaternion_stays_normalized(x in arb_pose(), y in arb_pose()) {
            let q = (x * y).rotation().into_inner();
            prop_assert!((q.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn mahalanobis_invariant_under_adjoint(v in arb_twist(1.0), t in arb_pose()) {
            let sigma = Covariance6::isotropic(0.5, 2.0).unwrap();
            let ad = t.adjoint();
            let rotated = Twist(ad * v.0);
            let conj = Covariance6::new(ad * sigma.matrix() * ad.transpose()).unwrap();
            let d0 = mahalanobis_sq(&v, &sigma);
            let d1 = mahalanobis_sq(&rotated, &conj);
            prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0));
        }
    }
}
