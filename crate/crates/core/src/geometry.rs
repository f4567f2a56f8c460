//! Rigid-body geometry on SE(3) in exponential coordinates.
//!
//! Twists are stored as `(linear; angular)`. A pose `p` maps a point `x` to
//! `R x + t` where `(R, t) = exp(p)`. Poses are kept on the principal branch of
//! the logarithm (rotation angle at most π).

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::ops::Mul;

use crate::error::{Error, Result};

/// Below this rotation norm the closed forms switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-8;
/// Distance to π at which a rotation is reported as sitting on the branch cut.
pub const BRANCH_CUT_TOLERANCE: f64 = 1e-6;

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Flips `v` so that its first component with magnitude above `1e-12` is
/// non-negative. Returns the flipped vector and the sign that was applied.
pub fn canonical_sign(v: &Vector3<f64>) -> (Vector3<f64>, f64) {
    for i in 0..3 {
        if v[i].abs() > 1e-12 {
            return if v[i] < 0.0 { (-v, -1.0) } else { (*v, 1.0) };
        }
    }
    (*v, 1.0)
}

/// Rodrigues' formula.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Rotation vector of `r` on the principal branch, plus whether the angle is
/// within [`BRANCH_CUT_TOLERANCE`] of π.
pub fn log_so3(r: &Matrix3<f64>) -> (Vector3<f64>, bool) {
    let skew = vee(&(r - r.transpose())) * 0.5;
    let s = skew.norm();
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = s.atan2(c);

    if theta < SMALL_ANGLE {
        return (skew, false);
    }
    if theta < PI - 1e-3 {
        return (skew * (theta / s), false);
    }

    // Close to π the antisymmetric part vanishes; recover the axis from the
    // symmetric part (R + Rᵀ)/2 = cos θ I + (1 − cos θ) a aᵀ.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let (mut best, mut best_val) = (0, sym[(0, 0)]);
    for i in 1..3 {
        if sym[(i, i)] > best_val {
            best = i;
            best_val = sym[(i, i)];
        }
    }
    let mut axis = sym.column(best).into_owned();
    axis /= axis.norm();
    let near_cut = PI - theta < BRANCH_CUT_TOLERANCE;
    if near_cut || s < 1e-12 {
        axis = canonical_sign(&axis).0;
    } else if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    (axis * theta, near_cut)
}

/// Left Jacobian of SO(3); maps the linear part of a twist to the translation.
pub fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() + (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

pub fn left_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    let coeff = if theta < 1e-5 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let t2 = theta * theta;
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / t2
    };
    Matrix3::identity() - 0.5 * k + coeff * k * k
}

/// Rotation plus translation, `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    /// Rotation by `angle` about the line through `point` with unit `direction`.
    pub fn rotation_about_line(direction: &Vector3<f64>, point: &Vector3<f64>, angle: f64) -> Self {
        let rotation = exp_so3(&(direction * angle));
        Self { rotation, translation: point - rotation * point }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Accepts a homogeneous matrix whose rotation block is orthonormal with
    /// determinant one (to `1e-6`) and whose last row is `(0, 0, 0, 1)`.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let rotation: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let bottom = (m[(3, 0)].abs() + m[(3, 1)].abs() + m[(3, 2)].abs() + (m[(3, 3)] - 1.0).abs()) > 1e-9;
        if ortho > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 || bottom {
            return Err(Error::InvalidTransform);
        }
        Ok(Self { rotation, translation })
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

/// Exponential of a twist `(linear; angular)`.
pub fn exp_twist(twist: &Vector6<f64>) -> RigidTransform {
    let v = twist.fixed_rows::<3>(0).into_owned();
    let w = twist.fixed_rows::<3>(3).into_owned();
    RigidTransform { rotation: exp_so3(&w), translation: left_jacobian(&w) * v }
}

/// Logarithm of a rigid transform as a twist, with the branch-cut flag of
/// [`log_so3`].
pub fn log_twist(t: &RigidTransform) -> (Vector6<f64>, bool) {
    let (w, near_cut) = log_so3(&t.rotation);
    let v = left_jacobian_inverse(&w) * t.translation;
    let mut out = Vector6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&v);
    out.fixed_rows_mut::<3>(3).copy_from(&w);
    (out, near_cut)
}

/// Rigid-body pose in exponential coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseWire", into = "PoseWire")]
pub struct Pose6 {
    linear: Vector3<f64>,
    angular: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseWire {
    linear: [f64; 3],
    angular: [f64; 3],
}

impl TryFrom<PoseWire> for Pose6 {
    type Error = Error;

    fn try_from(w: PoseWire) -> Result<Self> {
        if w.linear.iter().chain(w.angular.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        Ok(Pose6::new(Vector3::from(w.linear), Vector3::from(w.angular)))
    }
}

impl From<Pose6> for PoseWire {
    fn from(p: Pose6) -> Self {
        PoseWire { linear: p.linear.into(), angular: p.angular.into() }
    }
}

impl Default for Pose6 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose6 {
    /// Builds a pose, moving rotations of norm above π onto the principal branch
    /// while keeping the represented transform.
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        let raw = Self { linear, angular };
        if angular.norm() <= PI {
            raw
        } else {
            Self::from_transform(&raw.to_transform())
        }
    }

    pub fn identity() -> Self {
        Self { linear: Vector3::zeros(), angular: Vector3::zeros() }
    }

    pub fn linear(&self) -> &Vector3<f64> {
        &self.linear
    }

    pub fn angular(&self) -> &Vector3<f64> {
        &self.angular
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        out.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        out
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into_owned(), v.fixed_rows::<3>(3).into_owned())
    }

    pub fn to_transform(&self) -> RigidTransform {
        exp_twist(&self.to_vector())
    }

    pub fn from_transform(t: &RigidTransform) -> Self {
        let (v, _) = log_twist(t);
        Self { linear: v.fixed_rows::<3>(0).into_owned(), angular: v.fixed_rows::<3>(3).into_owned() }
    }
}

/// Body velocity as a spatial twist.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Velocity6 {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Velocity6 {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.linear);
        out.fixed_rows_mut::<3>(3).copy_from(&self.angular);
        out
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self { linear: v.fixed_rows::<3>(0).into_owned(), angular: v.fixed_rows::<3>(3).into_owned() }
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|x| x.is_finite())
    }
}

/// SE(3) exponential as a homogeneous matrix.
pub fn exp_map(p: &Pose6) -> Matrix4<f64> {
    p.to_transform().to_homogeneous()
}

/// Result of [`log_map_flagged`].
#[derive(Clone, Copy, Debug)]
pub struct LogMap {
    pub pose: Pose6,
    pub near_branch_cut: bool,
}

/// SE(3) logarithm of a homogeneous transform.
pub fn log_map_flagged(t: &Matrix4<f64>) -> Result<LogMap> {
    let rigid = RigidTransform::from_homogeneous(t)?;
    let (v, near_branch_cut) = log_twist(&rigid);
    let pose = Pose6 { linear: v.fixed_rows::<3>(0).into_owned(), angular: v.fixed_rows::<3>(3).into_owned() };
    Ok(LogMap { pose, near_branch_cut })
}

pub fn log_map(t: &Matrix4<f64>) -> Result<Pose6> {
    log_map_flagged(t).map(|l| l.pose)
}

pub fn transform_point(p: &Pose6, x: &Vector3<f64>) -> Vector3<f64> {
    p.to_transform().apply(x)
}

/// Axis direction in spherical coordinates: azimuth `phi ∈ [0, 2π)` and polar
/// angle `theta ∈ [0, π]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpherical {
    pub phi: f64,
    pub theta: f64,
}

impl AxisSpherical {
    pub fn new(phi: f64, theta: f64) -> Self {
        Self::from_direction(&axis_direction(&Self { phi, theta }))
    }

    pub fn from_direction(d: &Vector3<f64>) -> Self {
        let d = d.normalize();
        let theta = d.z.clamp(-1.0, 1.0).acos();
        let mut phi = if d.x.abs() < 1e-15 && d.y.abs() < 1e-15 { 0.0 } else { d.y.atan2(d.x) };
        if phi < 0.0 {
            phi += TAU;
        }
        if phi >= TAU {
            phi -= TAU;
        }
        Self { phi, theta }
    }

    pub fn direction(&self) -> Vector3<f64> {
        axis_direction(self)
    }
}

pub fn axis_direction(a: &AxisSpherical) -> Vector3<f64> {
    let (st, ct) = a.theta.sin_cos();
    let (sp, cp) = a.phi.sin_cos();
    Vector3::new(st * cp, st * sp, ct).normalize()
}

/// Multivariate normal belief.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension { expected: mean.len(), found: cov.nrows() });
        }
        let mut cov = cov;
        symmetrize(&mut cov);
        if min_eigenvalue(&cov) < -1e-9 {
            return Err(Error::NotPositiveSemidefinite("gaussian covariance".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Replaces `m` by `(m + mᵀ)/2`, making it exactly symmetric.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    /// Power series of the 4×4 twist matrix; independent of Rodrigues.
    fn exp_series(twist: &Vector6<f64>) -> Matrix4<f64> {
        let mut xi = Matrix4::zeros();
        xi.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&twist.fixed_rows::<3>(3).into_owned()));
        xi.fixed_view_mut::<3, 1>(0, 3).copy_from(&twist.fixed_rows::<3>(0));
        // Scaling and squaring keeps the series short and accurate.
        let scale = 2f64.powi(8);
        let small = xi / scale;
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..30 {
            term = term * small / k as f64;
            sum += term;
        }
        for _ in 0..8 {
            sum = sum * sum;
        }
        sum
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    fn rotation_vector(max_norm: f64) -> impl Strategy<Value = Vector3<f64>> {
        (vec3(), 0.0..max_norm).prop_map(|(v, n)| {
            if v.norm() < 1e-6 {
                Vector3::zeros()
            } else {
                v.normalize() * n
            }
        })
    }

    #[test]
    fn zero_pose_is_identity() {
        assert_eq!(exp_map(&Pose6::identity()), Matrix4::identity());
        assert_eq!(log_map(&Matrix4::identity()).unwrap(), Pose6::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = Pose6::new(Vector3::zeros(), Vector3::new(0.0, 0.0, FRAC_PI_2));
        let t = exp_map(&p);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(t.fixed_view::<3, 3>(0, 0).into_owned(), expected, epsilon = 1e-15);
        assert_relative_eq!(t.fixed_view::<3, 1>(0, 3).into_owned(), Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn pure_translation_log() {
        let mut t = Matrix4::identity();
        t[(0, 3)] = 0.1;
        let p = log_map(&t).unwrap();
        assert_relative_eq!(*p.linear(), Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
        assert_eq!(*p.angular(), Vector3::zeros());
    }

    #[test]
    fn transform_point_examples() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&Pose6::identity(), &x), x);
        let half = Pose6::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI));
        assert_relative_eq!(
            transform_point(&half, &Vector3::x()),
            Vector3::new(-1.0, 0.0, 0.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn near_pi_rotation_is_flagged_and_canonical() {
        let r = exp_so3(&Vector3::new(0.0, -PI, 0.0));
        let (w, cut) = log_so3(&r);
        assert!(cut);
        assert_relative_eq!(w, Vector3::new(0.0, PI, 0.0), epsilon = 1e-12);

        let r = exp_so3(&Vector3::new(0.0, 0.0, PI - 1e-4));
        let (w, cut) = log_so3(&r);
        assert!(!cut);
        assert_relative_eq!(w, Vector3::new(0.0, 0.0, PI - 1e-4), epsilon = 1e-10);
    }

    #[test]
    fn construction_renormalizes_large_rotations() {
        let p = Pose6::new(Vector3::new(0.3, -0.1, 0.2), Vector3::new(0.0, 0.0, 1.5 * PI));
        assert!(p.angular().norm() <= PI);
        assert_relative_eq!(p.angular().z, -0.5 * PI, epsilon = 1e-12);
        let raw = exp_twist(&Vector6::new(0.3, -0.1, 0.2, 0.0, 0.0, 1.5 * PI)).to_homogeneous();
        assert_relative_eq!(exp_map(&p), raw, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_rigid_matrix() {
        let mut m = Matrix4::identity();
        m[(0, 0)] = 2.0;
        assert!(matches!(log_map(&m), Err(Error::InvalidTransform)));
    }

    #[test]
    fn axis_direction_examples() {
        assert_relative_eq!(axis_direction(&AxisSpherical { phi: 1.3, theta: 0.0 }), Vector3::z(), epsilon = 1e-15);
        assert_relative_eq!(
            axis_direction(&AxisSpherical { phi: 0.0, theta: FRAC_PI_2 }),
            Vector3::x(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn gaussian_rejects_indefinite_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Gaussian::new(DVector::zeros(2), cov).is_err());
        let g = Gaussian::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0])).unwrap();
        assert_eq!(g.cov[(0, 1)], g.cov[(1, 0)]);
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(v in vec3(), w in rotation_vector(PI - 1e-3)) {
            let p = Pose6::new(v, w);
            let back = log_map(&exp_map(&p)).unwrap();
            prop_assert!((back.to_vector() - p.to_vector()).norm() < 1e-9);
        }

        #[test]
        fn exp_matches_series_oracle(v in vec3(), w in rotation_vector(3.0)) {
            let p = Pose6::new(v, w);
            let diff = exp_map(&p) - exp_series(&p.to_vector());
            prop_assert!(diff.amax() < 1e-10);
            let r = exp_map(&p).fixed_view::<3, 3>(0, 0).into_owned();
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_of_composition_matches_direct_product(
            va in vec3(), wa in rotation_vector(1.2), vb in vec3(), wb in rotation_vector(1.2)
        ) {
            let a = Pose6::new(va, wa);
            let b = Pose6::new(vb, wb);
            let direct = exp_series(&a.to_vector()) * exp_series(&b.to_vector());
            let composed = log_map(&direct).unwrap();
            prop_assert!((exp_map(&composed) - direct).amax() < 1e-9);
        }

        #[test]
        fn transforms_preserve_distances(v in vec3(), w in rotation_vector(PI), a in vec3(), b in vec3()) {
            let p = Pose6::new(v, w);
            let d0 = (a - b).norm();
            let d1 = (transform_point(&p, &a) - transform_point(&p, &b)).norm();
            prop_assert!((d0 - d1).abs() < 1e-12);
        }

        #[test]
        fn spherical_round_trip(phi in 0.0..TAU, theta in 0.01..(PI - 0.01)) {
            let a = AxisSpherical { phi, theta };
            let d = axis_direction(&a);
            prop_assert!((d.norm() - 1.0).abs() < 1e-12);
            let back = AxisSpherical::from_direction(&d);
            prop_assert!((back.theta - theta).abs() < 1e-10);
            let dphi = (back.phi - phi).rem_euclid(TAU);
            prop_assert!(dphi.min(TAU - dphi) < 1e-10);
        }
    }
}
