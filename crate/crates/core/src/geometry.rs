//! Rotation and rigid-transform primitives.
//!
//! Rotations are stored as unit quaternions with the scalar part kept
//! non-negative, so every rotation has exactly one stored representation.
//! The tangent-space convention throughout the crate is the right
//! perturbation `R ← R · exp(δ)`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::{Error, Result};

/// Below this rotation angle the exponential and Jacobians switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// `[v]×`, the cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A 3-D rotation (unit quaternion, `w ≥ 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Builds a rotation from quaternion coefficients, normalizing and
    /// canonicalizing the sign.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidInput(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        // Already-unit input is kept bit-exact so text round trips are lossless.
        let q = if (n - 1.0).abs() <= 4.0 * f64::EPSILON { q } else { q / n };
        Ok(Self::canonical(q))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self::canonical(q.into_inner())
    }

    fn canonical(q: Quaternion<f64>) -> Self {
        let q = if q.w < 0.0 { -q } else { q };
        Rotation(UnitQuaternion::new_unchecked(q))
    }

    /// `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Exponential map of a rotation vector (radians).
    pub fn exp(omega: &Vector3<f64>) -> Result<Self> {
        if !omega.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rotation vector"));
        }
        Ok(Self::exp_unchecked(omega))
    }

    pub(crate) fn exp_unchecked(omega: &Vector3<f64>) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let (w, s) = if theta < SMALL_ANGLE {
            // cos(θ/2) ≈ 1 − θ²/8, sin(θ/2)/θ ≈ 1/2 − θ²/48
            (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        Self::canonical(
            Quaternion::new(w, s * omega.x, s * omega.y, s * omega.z).normalize(),
        )
    }

    /// Principal logarithm, magnitude in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.0.quaternion();
        let v = Vector3::new(q.i, q.j, q.k);
        let sin_half = v.norm();
        if sin_half < 0.5 * SMALL_ANGLE {
            // θ ≈ 2 sin(θ/2) / cos(θ/2) for tiny angles
            return v * (2.0 / q.w);
        }
        // atan2 stays well conditioned near θ = π where w → 0.
        let theta = 2.0 * sin_half.atan2(q.w);
        v * (theta / sin_half)
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.inverse().into_inner())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self::canonical((self.0 * other.0).into_inner())
    }

    pub fn act(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn inverse_act(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.inverse_transform_vector(v)
    }

    /// Angle of the relative rotation, radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.inverse().compose(other).log().norm()
    }

    /// `R · exp(δ)`.
    pub fn retract(&self, delta: &Vector3<f64>) -> Self {
        self.compose(&Self::exp_unchecked(delta))
    }
}

/// Right Jacobian of SO(3): `exp(φ + δ) ≈ exp(φ) exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    if theta2.sqrt() < SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * k + k2 / 6.0;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() - (1.0 - theta.cos()) / theta2 * k
        + (theta - theta.sin()) / (theta2 * theta) * k2
}

/// Inverse of [`right_jacobian`]: `log(exp(φ) exp(ε)) ≈ φ + Jr⁻¹(φ) ε`.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    if theta2.sqrt() < SMALL_ANGLE {
        return Matrix3::identity() + 0.5 * k + k2 / 12.0;
    }
    let theta = theta2.sqrt();
    let coeff = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k2
}

/// Rigid transform: `x ↦ R x + p`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, position: Vector3<f64>) -> Self {
        Pose { rotation, position }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            position: self.rotation.act(&other.position) + self.position,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            position: -rotation.act(&self.position),
            rotation,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.act(x) + self.position
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.rotation.wxyz().iter()).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
        let theta = omega.norm();
        let k = skew(&(omega / theta));
        Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * k * k
    }

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            Rotation::exp_unchecked(&random_vec(rng, 1.5)),
            random_vec(rng, 10.0),
        )
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        let r = Rotation::exp(&Vector3::zeros()).unwrap();
        assert_eq!(r.wxyz(), [1.0, 0.0, 0.0, 0.0]);
        let q = Rotation::exp(&Vector3::new(PI / 2.0, 0.0, 0.0)).unwrap();
        let v = q.act(&Vector3::new(0.0, 1.0, 0.0));
        assert_abs_diff_eq!(v, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn exp_matches_rodrigues() {
        let w = Vector3::new(0.1, 0.2, 0.3);
        let m = Rotation::exp(&w).unwrap().matrix();
        assert_abs_diff_eq!(m, rodrigues(&w), epsilon = 1e-12);
    }

    #[test]
    fn exp_rejects_non_finite() {
        assert!(Rotation::exp(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(Rotation::exp(&Vector3::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let dir = Vector3::new(0.3, -0.5, 0.8).normalize();
        let below = Rotation::exp(&(dir * 0.999e-6)).unwrap();
        let above = Rotation::exp(&(dir * 1.001e-6)).unwrap();
        assert!(below.angle_to(&above) < 3e-9);
        assert_abs_diff_eq!(below.log(), dir * 0.999e-6, epsilon = 1e-18);
    }

    #[test]
    fn log_examples() {
        assert_eq!(Rotation::identity().log(), Vector3::zeros());
        let r = Rotation::exp(&Vector3::new(0.3, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(r.log(), Vector3::new(0.3, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn log_at_pi() {
        let r = Rotation::exp(&Vector3::new(0.0, PI, 0.0)).unwrap();
        let l = r.log();
        assert_abs_diff_eq!(l.norm(), PI, epsilon = 1e-12);
        assert!(Rotation::exp(&l).unwrap().angle_to(&r) < 1e-9);
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let dir = random_vec(&mut rng, 1.0).normalize();
            let angle = rng.random_range(0.0..PI * 0.999);
            let r = Rotation::exp(&(dir * angle)).unwrap();
            let back = Rotation::exp(&r.log()).unwrap();
            for (a, b) in r.wxyz().iter().zip(back.wxyz().iter()) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_abs_diff_eq!(r.log(), dir * angle, epsilon = 1e-9);
        }
    }

    #[test]
    fn canonical_sign() {
        let r = Rotation::from_wxyz(-0.5, 0.5, 0.5, 0.5).unwrap();
        assert_eq!(r.wxyz(), [0.5, -0.5, -0.5, -0.5]);
        assert!(Rotation::from_wxyz(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pose_group_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let id = Pose::identity();
        assert_eq!(id.apply(&Vector3::new(1.0, 2.0, 3.0)), Vector3::new(1.0, 2.0, 3.0));
        for _ in 0..100 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);
            let x = random_vec(&mut rng, 5.0);
            let e = a.compose(&a.inverse());
            assert!(e.rotation.angle_to(&Rotation::identity()) < 1e-12);
            assert!(e.position.norm() < 1e-12);
            assert_abs_diff_eq!(
                a.compose(&b).apply(&x),
                a.apply(&b.apply(&x)),
                epsilon = 1e-10
            );
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            assert!(l.rotation.angle_to(&r.rotation) < 1e-10);
            assert_abs_diff_eq!(l.position, r.position, epsilon = 1e-10);
            assert!((a.rotation.act(&x).norm() - x.norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn right_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for scale in [1e-8, 0.3, 2.5] {
            let phi = random_vec(&mut rng, 1.0).normalize() * scale;
            let jr = right_jacobian(&phi);
            let base = Rotation::exp_unchecked(&phi);
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let plus = base.inverse().compose(&Rotation::exp_unchecked(&(phi + e))).log();
                let minus = base.inverse().compose(&Rotation::exp_unchecked(&(phi - e))).log();
                let col = (plus - minus) / (2.0 * h);
                assert_abs_diff_eq!(col, jr.column(k).into_owned(), epsilon = 1e-8);
            }
            assert_abs_diff_eq!(right_jacobian_inv(&phi) * jr, Matrix3::identity(), epsilon = 1e-10);
        }
    }
}
