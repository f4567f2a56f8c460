//! Tangent-error evaluation and the two baseline estimators.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{log_so3, Pose6};
use crate::joint::{
    ArticulatedState, JointAxis, JointEstimate, JointModel, JointType, PrismaticState, RevoluteState,
};

pub const DEFAULT_SAMPLES: usize = 100;

/// Known joint of a synthetic scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GroundTruthWire", into = "GroundTruthWire")]
pub struct GroundTruthJoint {
    pub axis: JointAxis,
    /// Articulation range end, meters or radians.
    pub q_max: f64,
    /// Point whose tangent is evaluated.
    pub grasp_point: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruthWire {
    #[serde(rename = "type")]
    joint_type: JointType,
    axis_direction: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis_point: Option<[f64; 3]>,
    q_max: f64,
    grasp_point: [f64; 3],
}

impl TryFrom<GroundTruthWire> for GroundTruthJoint {
    type Error = Error;

    fn try_from(w: GroundTruthWire) -> Result<Self> {
        let direction = Vector3::from(w.axis_direction);
        let axis = match (w.joint_type, w.axis_point) {
            (JointType::Prismatic, _) => JointAxis::Prismatic { direction },
            (JointType::Revolute, Some(p)) => JointAxis::Revolute { direction, point: Vector3::from(p) },
            (JointType::Revolute, None) => {
                return Err(Error::InvalidScenario("revolute ground truth needs axis_point".into()))
            }
            (t, _) => return Err(Error::InvalidScenario(format!("ground truth joint cannot be {t}"))),
        };
        GroundTruthJoint::new(axis, w.q_max, Vector3::from(w.grasp_point))
    }
}

impl From<GroundTruthJoint> for GroundTruthWire {
    fn from(g: GroundTruthJoint) -> Self {
        let axis_point = match g.axis {
            JointAxis::Revolute { point, .. } => Some(point.into()),
            JointAxis::Prismatic { .. } => None,
        };
        GroundTruthWire {
            joint_type: g.axis.joint_type(),
            axis_direction: g.axis.direction().into(),
            axis_point,
            q_max: g.q_max,
            grasp_point: g.grasp_point.into(),
        }
    }
}

impl GroundTruthJoint {
    pub fn new(axis: JointAxis, q_max: f64, grasp_point: Vector3<f64>) -> Result<Self> {
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        let ok_point = match &axis {
            JointAxis::Revolute { point, .. } => finite(point),
            JointAxis::Prismatic { .. } => true,
        };
        if !finite(&axis.direction()) || !ok_point || !finite(&grasp_point) {
            return Err(Error::NonFinite("ground truth joint"));
        }
        if (axis.direction().norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidScenario("axis direction must be unit length".into()));
        }
        if !(q_max > 0.0) {
            return Err(Error::InvalidScenario(format!("q_max must be positive, got {q_max}")));
        }
        Ok(Self { axis, q_max, grasp_point })
    }

    pub fn joint_type(&self) -> JointType {
        self.axis.joint_type()
    }
}

/// Unit direction of admissible motion of `point` under the joint at `q`.
pub fn tangent_at(axis: &JointAxis, q: f64, grasp_point: &Vector3<f64>) -> Result<Vector3<f64>> {
    let p = axis.articulate(q, grasp_point);
    tangent_through(axis, &p)
}

/// Tangent of the motion field of `axis` at the world point `p`.
fn tangent_through(axis: &JointAxis, p: &Vector3<f64>) -> Result<Vector3<f64>> {
    match axis {
        JointAxis::Prismatic { direction } => Ok(direction.normalize()),
        JointAxis::Revolute { direction, point } => {
            let t = direction.cross(&(p - point));
            let n = t.norm();
            if n < 1e-12 {
                Err(Error::UndefinedTangent)
            } else {
                Ok(t / n)
            }
        }
    }
}

/// Angle between two directions with sign ignored, in degrees.
fn unsigned_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    let theta = c.clamp(-1.0, 1.0).acos().to_degrees();
    theta.min(180.0 - theta)
}

/// Mean angle between the estimated and true tangents along the true
/// trajectory of the grasp point, `q ∈ [0, q_max]`, by trapezoid quadrature.
///
/// Both tangents are evaluated at the true articulated grasp point, so the
/// estimate's joint value convention does not matter. A prismatic pair needs
/// no quadrature and returns the single angle.
pub fn tangent_error_axis(est: &JointAxis, gt: &GroundTruthJoint, samples: usize) -> Result<f64> {
    if samples < 2 {
        return Err(Error::InsufficientData(format!("{samples} quadrature samples, need at least 2")));
    }
    if let (JointAxis::Prismatic { direction: a }, JointAxis::Prismatic { direction: b }) = (est, &gt.axis) {
        return Ok(unsigned_angle_deg(a, b));
    }
    let h = gt.q_max / (samples - 1) as f64;
    let mut acc = 0.0;
    for i in 0..samples {
        let p = gt.axis.articulate(h * i as f64, &gt.grasp_point);
        let angle = unsigned_angle_deg(&tangent_through(est, &p)?, &tangent_through(&gt.axis, &p)?);
        let w = if i == 0 || i == samples - 1 { 0.5 } else { 1.0 };
        acc += w * angle;
    }
    Ok(acc / (samples - 1) as f64)
}

pub fn tangent_error(est: &JointModel, gt: &GroundTruthJoint, samples: usize) -> Result<f64> {
    let axis = est.joint_axis().ok_or(Error::NoArticulation)?;
    tangent_error_axis(&axis, gt, samples)
}

fn articulated_model(state: ArticulatedState) -> JointModel {
    JointModel {
        estimate: JointEstimate::Articulated(state.canonical()),
        reference: Pose6::identity(),
        log_likelihood_window: f64::NAN,
    }
}

fn principal_axes(points: &[Vector3<f64>]) -> (Vector3<f64>, SymmetricEigen<f64, nalgebra::U3>) {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    (centroid, SymmetricEigen::new(scatter / n))
}

fn sorted_eigen(eig: &SymmetricEigen<f64, nalgebra::U3>) -> [(f64, Vector3<f64>); 3] {
    let mut pairs: Vec<(f64, Vector3<f64>)> =
        (0..3).map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned())).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    [pairs[0], pairs[1], pairs[2]]
}

struct CircleFit {
    center: Vector3<f64>,
    normal: Vector3<f64>,
    radius: f64,
    rss: f64,
}

/// Plane by PCA, then a least-squares (Kasa) circle in the plane, refined
/// by Gauss-Newton on geometric distance.
fn fit_circle(points: &[Vector3<f64>], centroid: &Vector3<f64>, axes: &[(f64, Vector3<f64>); 3]) -> Option<CircleFit> {
    let (u, v, normal) = (axes[0].1, axes[1].1, axes[2].1);
    let planar: Vec<(f64, f64)> = points.iter().map(|p| ((p - centroid).dot(&u), (p - centroid).dot(&v))).collect();
    let n = planar.len();
    let mut a = DMatrix::zeros(n, 3);
    let mut b = DVector::zeros(n);
    for (i, (x, y)) in planar.iter().enumerate() {
        a[(i, 0)] = 2.0 * x;
        a[(i, 1)] = 2.0 * y;
        a[(i, 2)] = 1.0;
        b[i] = x * x + y * y;
    }
    let sol = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let (mut cx, mut cy) = (sol[0], sol[1]);
    let mut r = (sol[2] + cx * cx + cy * cy).max(0.0).sqrt();
    if !r.is_finite() || r == 0.0 {
        return None;
    }
    for _ in 0..20 {
        let mut jtj = nalgebra::Matrix3::<f64>::zeros();
        let mut jtr = Vector3::zeros();
        for (x, y) in &planar {
            let (dx, dy) = (x - cx, y - cy);
            let d = (dx * dx + dy * dy).sqrt().max(1e-15);
            let res = d - r;
            let j = Vector3::new(-dx / d, -dy / d, -1.0);
            jtj += j * j.transpose();
            jtr += j * res;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else { break };
        cx += step.x;
        cy += step.y;
        r += step.z;
        if step.norm() < 1e-14 {
            break;
        }
    }
    let rss = points
        .iter()
        .zip(&planar)
        .map(|(p, (x, y))| {
            let in_plane = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r;
            let off = (p - centroid).dot(&normal);
            in_plane * in_plane + off * off
        })
        .sum();
    Some(CircleFit { center: centroid + u * cx + v * cy, normal, radius: r.abs(), rss })
}

/// Screw fit to the trajectory of a single tracked point: a line (prismatic)
/// or a circle in a plane (revolute), whichever has the lower Bayesian
/// information criterion. Circles wider than the radius cap count as lines.
pub fn baseline_single_point(track: &[(f64, Vector3<f64>)], cfg: &PipelineConfig) -> Result<JointModel> {
    if track.len() < 3 {
        return Err(Error::InsufficientData(format!("{} track points, need at least 3", track.len())));
    }
    let points: Vec<Vector3<f64>> = track.iter().map(|(_, p)| *p).collect();
    let (centroid, eig) = principal_axes(&points);
    let axes = sorted_eigen(&eig);
    let spread = axes[0].0;
    if !(spread > 1e-18) {
        return Err(Error::Degenerate("track points coincide".into()));
    }
    let n = points.len() as f64;
    let line_dir = {
        let d = axes[0].1;
        if (points[points.len() - 1] - points[0]).dot(&d) < 0.0 { -d } else { d }
    };
    let line_rss: f64 = points
        .iter()
        .map(|p| {
            let r = p - centroid;
            (r - line_dir * r.dot(&line_dir)).norm_squared()
        })
        .sum();
    let bic = |rss: f64, k: f64| n * (rss / n).max(1e-30).ln() + k * n.ln();

    let prismatic = || {
        let mut s = PrismaticState::new(&line_dir, cfg);
        s.q = (points[points.len() - 1] - points[0]).dot(&line_dir);
        articulated_model(ArticulatedState::Prismatic(s))
    };
    let Some(circle) = fit_circle(&points, &centroid, &axes) else { return Ok(prismatic()) };
    if circle.radius > cfg.model_select.radius_cap || bic(circle.rss, 6.0) >= bic(line_rss, 4.0) {
        return Ok(prismatic());
    }
    let first = points[0] - circle.center;
    let last = points[points.len() - 1] - circle.center;
    let swept = first.cross(&last).dot(&circle.normal).atan2(first.dot(&last));
    let mut s = RevoluteState::new(&circle.normal, &circle.center, &Vector3::zeros(), cfg);
    s.q = swept;
    Ok(articulated_model(ArticulatedState::Revolute(s)))
}

/// Screw fit to a sequence of hand poses relative to the first one.
///
/// The rotation axis is the principal direction of the rotation vectors; the
/// axis point solves `(I − R_k)·a = t_k⊥` in least squares over all frames.
/// Sequences whose largest rotation stays under one degree, or whose fitted
/// axis lies beyond the radius cap from `probe`, are fitted as prismatic along
/// the principal translation direction.
pub fn baseline_rigid_hand(poses: &[(f64, Pose6)], probe: &Vector3<f64>, cfg: &PipelineConfig) -> Result<JointModel> {
    if poses.len() < 2 {
        return Err(Error::InsufficientData(format!("{} poses, need at least 2", poses.len())));
    }
    let first = poses[0].1.to_transform().inverse();
    let rel: Vec<_> = poses[1..].iter().map(|(_, p)| p.to_transform() * first).collect();
    let rotations: Vec<Vector3<f64>> = rel.iter().map(|t| log_so3(&t.rotation).0).collect();
    let max_angle = rotations.iter().map(|w| w.norm()).fold(0.0, f64::max);
    let max_shift = rel.iter().map(|t| t.translation.norm()).fold(0.0, f64::max);
    if max_angle < 1f64.to_radians() && max_shift < 1e-3 {
        return Err(Error::InsufficientMotion);
    }

    let principal = |vs: &[Vector3<f64>]| {
        let m = vs.iter().fold(Matrix3::zeros(), |acc, v| acc + v * v.transpose());
        let axes = sorted_eigen(&SymmetricEigen::new(m));
        let d = axes[0].1;
        let s: f64 = vs.iter().map(|v| v.dot(&d)).sum();
        if s < 0.0 { -d } else { d }
    };
    let translations: Vec<Vector3<f64>> = rel.iter().map(|t| t.translation).collect();
    let prismatic = || {
        let d = principal(&translations);
        let mut s = PrismaticState::new(&d, cfg);
        s.q = translations.last().map_or(0.0, |t| t.dot(&d));
        articulated_model(ArticulatedState::Prismatic(s))
    };
    if max_angle < 1f64.to_radians() {
        return Ok(prismatic());
    }
    let d = principal(&rotations);
    let mut a = DMatrix::zeros(3 * rel.len(), 3);
    let mut b = DVector::zeros(3 * rel.len());
    for (k, t) in rel.iter().enumerate() {
        a.view_mut((3 * k, 0), (3, 3)).copy_from(&(Matrix3::identity() - t.rotation));
        b.rows_mut(3 * k, 3).copy_from(&(t.translation - d * t.translation.dot(&d)));
    }
    let Ok(point) = a.svd(true, true).solve(&b, 1e-9) else { return Ok(prismatic()) };
    let point = Vector3::from_column_slice(point.as_slice());
    let axis = JointAxis::Revolute { direction: d, point };
    if !point.iter().all(|v| v.is_finite()) || axis.radius_of(probe) > cfg.model_select.radius_cap {
        return Ok(prismatic());
    }
    let mut s = RevoluteState::new(&d, &point, &Vector3::zeros(), cfg);
    s.q = rotations.last().map_or(0.0, |w| w.dot(&d));
    Ok(articulated_model(ArticulatedState::Revolute(s)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    fn revolute_z(point: Vector3<f64>) -> JointAxis {
        JointAxis::Revolute { direction: Vector3::z(), point }
    }

    #[test]
    fn tangent_examples() {
        let pris = JointAxis::Prismatic { direction: Vector3::x() };
        for q in [0.0, 0.1, 5.0] {
            assert_eq!(tangent_at(&pris, q, &Vector3::new(0.3, 0.2, 0.1)).unwrap(), Vector3::x());
        }
        let t = tangent_at(&revolute_z(Vector3::zeros()), 0.0, &Vector3::x()).unwrap();
        assert_relative_eq!(t, Vector3::y(), epsilon = 1e-15);
        assert!(matches!(tangent_at(&revolute_z(Vector3::zeros()), 0.3, &Vector3::new(0.0, 0.0, 2.0)), Err(Error::UndefinedTangent)));
    }

    #[test]
    fn revolute_tangent_matches_finite_difference() {
        let axis = JointAxis::Revolute { direction: Vector3::new(0.2, -0.4, 0.9).normalize(), point: Vector3::new(0.3, 0.1, -0.2) };
        let grasp = Vector3::new(0.7, 0.4, 0.1);
        let h = 1e-6;
        for q in [0.0, 0.4, 1.2, 2.5] {
            let fd = (axis.articulate(q + h, &grasp) - axis.articulate(q - h, &grasp)).normalize();
            assert_relative_eq!(tangent_at(&axis, q, &grasp).unwrap(), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn tangent_error_examples() {
        let gt = GroundTruthJoint::new(JointAxis::Prismatic { direction: Vector3::x() }, 0.3, Vector3::zeros()).unwrap();
        assert_eq!(tangent_error_axis(&gt.axis, &gt, 100).unwrap(), 0.0);
        assert_relative_eq!(tangent_error_axis(&JointAxis::Prismatic { direction: Vector3::y() }, &gt, 100).unwrap(), 90.0, epsilon = 1e-12);
        assert_relative_eq!(tangent_error_axis(&JointAxis::Prismatic { direction: -Vector3::x() }, &gt, 100).unwrap(), 0.0, epsilon = 1e-6);
        assert!(tangent_error_axis(&gt.axis, &gt, 1).is_err());
    }

    #[test]
    fn prismatic_error_is_symmetric() {
        let a = Vector3::new(0.3, 0.5, -0.2).normalize();
        let b = Vector3::new(-0.1, 0.9, 0.4).normalize();
        let ga = GroundTruthJoint::new(JointAxis::Prismatic { direction: a }, 1.0, Vector3::zeros()).unwrap();
        let gb = GroundTruthJoint::new(JointAxis::Prismatic { direction: b }, 1.0, Vector3::zeros()).unwrap();
        let ab = tangent_error_axis(&gb.axis, &ga, 10).unwrap();
        let ba = tangent_error_axis(&ga.axis, &gb, 10).unwrap();
        assert_relative_eq!(ab, ba, epsilon = 1e-12);
    }

    #[test]
    fn tilted_revolute_axis_limit() {
        // Tilt about the grasp-radius direction: at q = 0 the tangents differ by the tilt.
        let tilt = 5f64.to_radians();
        let est = JointAxis::Revolute { direction: Vector3::new(0.0, -tilt.sin(), tilt.cos()), point: Vector3::zeros() };
        let mut previous = f64::INFINITY;
        for q_max in [0.5, 0.1, 1e-3] {
            let gt = GroundTruthJoint::new(revolute_z(Vector3::zeros()), q_max, Vector3::x()).unwrap();
            let e = tangent_error_axis(&est, &gt, 200).unwrap();
            assert!((e - 5.0).abs() <= (previous - 5.0).abs() + 1e-12);
            previous = e;
        }
        assert_relative_eq!(previous, 5.0, epsilon = 1e-3);
    }

    #[test]
    fn quadrature_converges() {
        let est = JointAxis::Revolute { direction: Vector3::new(0.1, 0.05, 1.0).normalize(), point: Vector3::new(0.02, 0.0, 0.0) };
        let gt = GroundTruthJoint::new(revolute_z(Vector3::zeros()), FRAC_PI_2, Vector3::new(0.5, 0.1, 0.2)).unwrap();
        let e100 = tangent_error_axis(&est, &gt, 100).unwrap();
        let e200 = tangent_error_axis(&est, &gt, 200).unwrap();
        assert!((e100 - e200).abs() < 0.01);
    }

    #[test]
    fn error_ignores_estimated_axis_sign() {
        let gt = GroundTruthJoint::new(revolute_z(Vector3::zeros()), FRAC_PI_2, Vector3::new(0.5, 0.0, 0.0)).unwrap();
        let est = JointAxis::Revolute { direction: Vector3::new(0.1, 0.0, 1.0).normalize(), point: Vector3::new(0.0, 0.03, 0.0) };
        let flipped = JointAxis::Revolute { direction: -est.direction(), point: Vector3::new(0.0, 0.03, 0.0) };
        assert_relative_eq!(tangent_error_axis(&est, &gt, 50).unwrap(), tangent_error_axis(&flipped, &gt, 50).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn ground_truth_wire_round_trip() {
        let gt = GroundTruthJoint::new(revolute_z(Vector3::new(0.1, 0.2, 0.0)), 1.0, Vector3::x()).unwrap();
        let text = serde_json::to_string(&gt).unwrap();
        assert_eq!(serde_json::from_str::<GroundTruthJoint>(&text).unwrap(), gt);
        assert!(serde_json::from_str::<GroundTruthJoint>(
            r#"{"type":"prismatic","axis_direction":[2,0,0],"q_max":1,"grasp_point":[0,0,0]}"#
        )
        .is_err());
    }

    #[test]
    fn single_point_line_and_circle() {
        let d = Vector3::new(1.0, 2.0, -0.5).normalize();
        let line: Vec<_> = (0..30).map(|i| (i as f64, Vector3::new(0.1, 0.0, 0.3) + d * (0.01 * i as f64))).collect();
        let m = baseline_single_point(&line, &cfg()).unwrap();
        assert_eq!(m.joint_type(), JointType::Prismatic);
        assert_relative_eq!(m.joint_axis().unwrap().direction().dot(&d).abs(), 1.0, epsilon = 1e-9);

        let axis = JointAxis::Revolute { direction: Vector3::new(0.3, 0.2, 0.9).normalize(), point: Vector3::new(0.2, -0.1, 0.4) };
        let grasp = Vector3::new(0.6, 0.1, 0.3);
        let arc: Vec<_> = (0..40).map(|i| (i as f64, axis.articulate(PI * 0.6 * i as f64 / 39.0, &grasp))).collect();
        let m = baseline_single_point(&arc, &cfg()).unwrap();
        assert_eq!(m.joint_type(), JointType::Revolute);
        let est = m.joint_axis().unwrap();
        assert_relative_eq!(est.direction().dot(&axis.direction()).abs(), 1.0, epsilon = 1e-6);
        let JointAxis::Revolute { point, .. } = est else { unreachable!() };
        assert!(axis.radius_of(&point) < 1e-6);

        let still = vec![(0.0, Vector3::zeros()); 5];
        assert!(matches!(baseline_single_point(&still, &cfg()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rigid_hand_examples() {
        let axis = JointAxis::Revolute { direction: Vector3::new(0.0, 0.6, 0.8), point: Vector3::new(0.4, 0.0, 0.1) };
        let poses: Vec<_> = (0..20).map(|i| (i as f64, Pose6::from_transform(&axis.transform(1.2 * i as f64 / 19.0)))).collect();
        let m = baseline_rigid_hand(&poses, &Vector3::zeros(), &cfg()).unwrap();
        let est = m.joint_axis().unwrap();
        assert_relative_eq!(est.direction().dot(&axis.direction()).abs(), 1.0, epsilon = 1e-9);
        let JointAxis::Revolute { point, .. } = est else { panic!("expected revolute") };
        assert!(axis.radius_of(&point) < 1e-9);

        let slide = JointAxis::Prismatic { direction: Vector3::new(0.0, 1.0, 1.0).normalize() };
        let poses: Vec<_> = (0..10).map(|i| (i as f64, Pose6::from_transform(&slide.transform(0.03 * i as f64)))).collect();
        let m = baseline_rigid_hand(&poses, &Vector3::zeros(), &cfg()).unwrap();
        assert_eq!(m.joint_type(), JointType::Prismatic);

        let still = vec![(0.0, Pose6::identity()), (1.0, Pose6::identity())];
        assert!(matches!(baseline_rigid_hand(&still, &Vector3::zeros(), &cfg()), Err(Error::InsufficientMotion)));
    }
}
