//! Kinematic-model level: prismatic and revolute EKFs over the hand pose
//! trajectory, with windowed likelihood model selection.
//!
//! The measurement is the hand body pose. Both filters predict it as the
//! reference pose articulated by the joint: `T(q) = J(q) · T_ref`, with
//! `J(q)` a translation along the axis (prismatic) or a rotation about the
//! axis line (revolute). Innovations live in the tangent space of the
//! prediction, `log(T_pred⁻¹ · T_meas)`.
//!
//! The axis direction is a unit vector updated through a 2-parameter local
//! chart (rotation increments along a tangent basis), so the filter has no
//! coordinate singularity at the poles. [`AxisSpherical`] is available for
//! reporting.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt;

use crate::config::{Matrix7, PipelineConfig};
use crate::error::{Error, Result};
use crate::filter::{gaussian_log_likelihood, iterated_update, numeric_jacobian};
use crate::geometry::{
    canonical_sign, exp_so3, log_so3, log_twist, symmetrize, AxisSpherical, Pose6, RigidTransform, Velocity6,
};
use crate::landmark::symmetrize_fixed;

const IEKF_ITERATIONS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Rigid,
    Prismatic,
    Revolute,
    Disconnected,
}

impl JointType {
    /// Free parameters charged by the parsimony penalty.
    pub fn parameter_count(self) -> usize {
        match self {
            JointType::Rigid | JointType::Disconnected => 0,
            JointType::Prismatic => 4,
            JointType::Revolute => 7,
        }
    }
}

impl fmt::Display for JointType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JointType::Rigid => "rigid",
            JointType::Prismatic => "prismatic",
            JointType::Revolute => "revolute",
            JointType::Disconnected => "disconnected",
        };
        f.write_str(s)
    }
}

/// Geometry of a one-degree-of-freedom joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JointAxis {
    Prismatic { direction: Vector3<f64> },
    Revolute { direction: Vector3<f64>, point: Vector3<f64> },
}

impl JointAxis {
    pub fn direction(&self) -> Vector3<f64> {
        match self {
            JointAxis::Prismatic { direction } | JointAxis::Revolute { direction, .. } => *direction,
        }
    }

    pub fn joint_type(&self) -> JointType {
        match self {
            JointAxis::Prismatic { .. } => JointType::Prismatic,
            JointAxis::Revolute { .. } => JointType::Revolute,
        }
    }

    /// World-frame displacement at joint value `q`.
    pub fn transform(&self, q: f64) -> RigidTransform {
        match self {
            JointAxis::Prismatic { direction } => RigidTransform::from_translation(direction * q),
            JointAxis::Revolute { direction, point } => RigidTransform::rotation_about_line(direction, point, q),
        }
    }

    /// Spatial twist generated by a unit joint rate.
    pub fn unit_twist(&self) -> Vector6<f64> {
        let mut twist = Vector6::zeros();
        match self {
            JointAxis::Prismatic { direction } => twist.fixed_rows_mut::<3>(0).copy_from(direction),
            JointAxis::Revolute { direction, point } => {
                twist.fixed_rows_mut::<3>(0).copy_from(&point.cross(direction));
                twist.fixed_rows_mut::<3>(3).copy_from(direction);
            }
        }
        twist
    }

    pub fn articulate(&self, q: f64, point: &Vector3<f64>) -> Vector3<f64> {
        self.transform(q).apply(point)
    }

    /// Distance from `p` to the revolute axis line; infinite for prismatic.
    pub fn radius_of(&self, p: &Vector3<f64>) -> f64 {
        match self {
            JointAxis::Prismatic { .. } => f64::INFINITY,
            JointAxis::Revolute { direction, point } => {
                let r = p - point;
                (r - direction * r.dot(direction)).norm()
            }
        }
    }
}

/// Unit axis direction with a right-handed tangent basis `(b1, b2)` for local
/// increments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitAxis {
    dir: Vector3<f64>,
    b1: Vector3<f64>,
    b2: Vector3<f64>,
}

impl UnitAxis {
    pub fn new(direction: &Vector3<f64>) -> Self {
        let dir = direction.normalize();
        let (i, _) = dir.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| {
            if v.abs() < acc.1 {
                (i, v.abs())
            } else {
                acc
            }
        });
        let b1 = dir.cross(&Vector3::ith(i, 1.0)).normalize();
        let b2 = dir.cross(&b1);
        Self { dir, b1, b2 }
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.dir
    }

    pub fn spherical(&self) -> AxisSpherical {
        AxisSpherical::from_direction(&self.dir)
    }

    /// Rotates the direction by the tangent increment `delta1·b1 + delta2·b2`
    /// and carries the basis along with the same rotation.
    pub fn retract(&self, delta1: f64, delta2: f64) -> Self {
        let v = self.b1 * delta1 + self.b2 * delta2;
        let angle = v.norm();
        if angle < 1e-15 {
            return *self;
        }
        let rotation = exp_so3(&self.dir.cross(&v));
        let dir = (rotation * self.dir).normalize();
        let b1 = rotation * self.b1;
        let b1 = (b1 - dir * b1.dot(&dir)).normalize();
        Self { dir, b1, b2: dir.cross(&b1) }
    }

    /// Tangent increment that [`retract`](Self::retract) maps onto `target`.
    pub fn local_coordinates(&self, target: &Vector3<f64>) -> (f64, f64) {
        let target = target.normalize();
        let perp = target - self.dir * target.dot(&self.dir);
        let s = perp.norm();
        if s < 1e-15 {
            return (0.0, 0.0);
        }
        let angle = s.atan2(target.dot(&self.dir));
        let v = perp / s * angle;
        (v.dot(&self.b1), v.dot(&self.b2))
    }

    pub fn flipped(&self) -> Self {
        Self { dir: -self.dir, b1: self.b1, b2: -self.b2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrismaticState {
    pub axis: UnitAxis,
    /// Displacement along the axis (meters).
    pub q: f64,
    pub q_dot: f64,
    /// Covariance over `(axis increment (2), q, q_dot)`.
    pub cov: nalgebra::Matrix4<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RevoluteState {
    pub axis: UnitAxis,
    /// Point on the axis closest to the reference-pose origin.
    pub point: Vector3<f64>,
    /// Rotation angle about the axis, right-handed (radians).
    pub q: f64,
    pub q_dot: f64,
    /// Covariance over `(axis increment (2), point (3), q, q_dot)`.
    pub cov: Matrix7,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ArticulatedState {
    Prismatic(PrismaticState),
    Revolute(RevoluteState),
}

impl PrismaticState {
    pub fn new(direction: &Vector3<f64>, cfg: &PipelineConfig) -> Self {
        Self { axis: UnitAxis::new(direction), q: 0.0, q_dot: 0.0, cov: cfg.p0_pris }
    }

    pub fn joint_axis(&self) -> JointAxis {
        JointAxis::Prismatic { direction: self.axis.direction() }
    }

    fn retract(&self, d: &DVector<f64>) -> Self {
        Self { axis: self.axis.retract(d[0], d[1]), q: self.q + d[2], q_dot: self.q_dot + d[3], cov: self.cov }
    }

    fn flipped(&self) -> Self {
        let signs = nalgebra::Matrix4::from_diagonal(&nalgebra::Vector4::new(-1.0, 1.0, -1.0, -1.0));
        Self { axis: self.axis.flipped(), q: -self.q, q_dot: -self.q_dot, cov: signs * self.cov * signs }
    }
}

impl RevoluteState {
    pub fn new(direction: &Vector3<f64>, point: &Vector3<f64>, origin: &Vector3<f64>, cfg: &PipelineConfig) -> Self {
        let axis = UnitAxis::new(direction);
        Self { axis, point: gauge_point(&axis.direction(), point, origin), q: 0.0, q_dot: 0.0, cov: cfg.p0_rev }
    }

    pub fn joint_axis(&self) -> JointAxis {
        JointAxis::Revolute { direction: self.axis.direction(), point: self.point }
    }

    fn retract(&self, d: &DVector<f64>) -> Self {
        Self {
            axis: self.axis.retract(d[0], d[1]),
            point: self.point + Vector3::new(d[2], d[3], d[4]),
            q: self.q + d[5],
            q_dot: self.q_dot + d[6],
            cov: self.cov,
        }
    }

    fn flipped(&self) -> Self {
        let signs = Matrix7::from_diagonal(&SMatrix::<f64, 7, 1>::from_column_slice(&[
            -1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0,
        ]));
        Self { axis: self.axis.flipped(), point: self.point, q: -self.q, q_dot: -self.q_dot, cov: signs * self.cov * signs }
    }

    /// Moves the point along the axis to the foot of the perpendicular from
    /// `origin` and resets the unobservable along-axis variance to its prior.
    fn gauge_fix(&mut self, origin: &Vector3<f64>, cfg: &PipelineConfig) {
        let d = self.axis.direction();
        self.point = gauge_point(&d, &self.point, origin);
        let proj = Matrix3::identity() - d * d.transpose();
        let mut g = Matrix7::identity();
        g.fixed_view_mut::<3, 3>(2, 2).copy_from(&proj);
        let mut cov = g * self.cov * g.transpose();
        let along = d * d.transpose() * cfg.p0_rev[(2, 2)];
        let block = cov.fixed_view::<3, 3>(2, 2) + along;
        cov.fixed_view_mut::<3, 3>(2, 2).copy_from(&block);
        symmetrize_fixed(&mut cov);
        self.cov = cov;
    }
}

fn gauge_point(direction: &Vector3<f64>, point: &Vector3<f64>, origin: &Vector3<f64>) -> Vector3<f64> {
    point - direction * (point - origin).dot(direction)
}

impl ArticulatedState {
    pub fn joint_type(&self) -> JointType {
        match self {
            ArticulatedState::Prismatic(_) => JointType::Prismatic,
            ArticulatedState::Revolute(_) => JointType::Revolute,
        }
    }

    pub fn joint_axis(&self) -> JointAxis {
        match self {
            ArticulatedState::Prismatic(s) => s.joint_axis(),
            ArticulatedState::Revolute(s) => s.joint_axis(),
        }
    }

    pub fn q(&self) -> f64 {
        match self {
            ArticulatedState::Prismatic(s) => s.q,
            ArticulatedState::Revolute(s) => s.q,
        }
    }

    pub fn q_dot(&self) -> f64 {
        match self {
            ArticulatedState::Prismatic(s) => s.q_dot,
            ArticulatedState::Revolute(s) => s.q_dot,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ArticulatedState::Prismatic(_) => 4,
            ArticulatedState::Revolute(_) => 7,
        }
    }

    pub fn cov(&self) -> DMatrix<f64> {
        match self {
            ArticulatedState::Prismatic(s) => DMatrix::from_column_slice(4, 4, s.cov.as_slice()),
            ArticulatedState::Revolute(s) => DMatrix::from_column_slice(7, 7, s.cov.as_slice()),
        }
    }

    fn set_cov(&mut self, cov: &DMatrix<f64>) {
        match self {
            ArticulatedState::Prismatic(s) => s.cov = nalgebra::Matrix4::from_column_slice(cov.as_slice()),
            ArticulatedState::Revolute(s) => s.cov = Matrix7::from_column_slice(cov.as_slice()),
        }
    }

    fn retract(&self, d: &DVector<f64>) -> Self {
        match self {
            ArticulatedState::Prismatic(s) => ArticulatedState::Prismatic(s.retract(d)),
            ArticulatedState::Revolute(s) => ArticulatedState::Revolute(s.retract(d)),
        }
    }

    /// Same predictions with the axis direction negated; the direction is
    /// flipped so its first nonzero component is non-negative.
    pub fn canonical(&self) -> Self {
        let (_, sign) = canonical_sign(&self.joint_axis().direction());
        if sign > 0.0 {
            return *self;
        }
        match self {
            ArticulatedState::Prismatic(s) => ArticulatedState::Prismatic(s.flipped()),
            ArticulatedState::Revolute(s) => ArticulatedState::Revolute(s.flipped()),
        }
    }
}

/// Constant joint-velocity prediction.
pub fn predict_joint(state: &ArticulatedState, dt: f64, cfg: &PipelineConfig) -> Result<ArticulatedState> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveTimeStep(dt));
    }
    let scale = cfg.time_scale(dt);
    Ok(match state {
        ArticulatedState::Prismatic(s) => {
            let mut f = nalgebra::Matrix4::identity();
            f[(2, 3)] = dt;
            let mut cov = f * s.cov * f.transpose() + cfg.q_pris * scale;
            symmetrize_fixed(&mut cov);
            ArticulatedState::Prismatic(PrismaticState { q: s.q + dt * s.q_dot, cov, ..*s })
        }
        ArticulatedState::Revolute(s) => {
            let mut f = Matrix7::identity();
            f[(5, 6)] = dt;
            let mut cov = f * s.cov * f.transpose() + cfg.q_rev * scale;
            symmetrize_fixed(&mut cov);
            ArticulatedState::Revolute(RevoluteState { q: s.q + dt * s.q_dot, cov, ..*s })
        }
    })
}

/// Predicted body pose: the reference pose articulated to the current `q`.
pub fn joint_measurement_model(state: &ArticulatedState, reference: &Pose6) -> Pose6 {
    Pose6::from_transform(&predicted_transform(state, &reference.to_transform()))
}

fn predicted_transform(state: &ArticulatedState, reference: &RigidTransform) -> RigidTransform {
    state.joint_axis().transform(state.q()) * *reference
}

fn twist_dvec(t: &RigidTransform) -> DVector<f64> {
    DVector::from_column_slice(log_twist(t).0.as_slice())
}

/// Outcome of [`correct_joint`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointUpdate {
    /// Log-likelihood of the prior innovation under its predicted covariance.
    pub predictive_log_likelihood: f64,
    /// Log-likelihood of the remaining innovation under the measurement
    /// covariance; this is what model selection ranks.
    pub fit_log_likelihood: f64,
    /// Correction skipped because the innovation sits on the rotation branch cut.
    pub skipped: bool,
}

/// Tangent-space covariance of a pose measurement given in exponential
/// coordinates, expressed at `anchor`: `J Σ Jᵀ` with `J` the derivative of
/// `log(anchor⁻¹ · exp(p + ε))` at `ε = 0`.
fn tangent_covariance(anchor: &RigidTransform, measured: &Pose6, cov: &Matrix6<f64>) -> DMatrix<f64> {
    let p = DVector::from_column_slice(measured.to_vector().as_slice());
    let inv = anchor.inverse();
    let jac = numeric_jacobian(
        |x: &DVector<f64>| {
            let pose = Pose6::from_vector(&Vector6::from_column_slice(x.as_slice()));
            twist_dvec(&(inv * pose.to_transform()))
        },
        &p,
    );
    let cov = DMatrix::from_column_slice(6, 6, cov.as_slice());
    let mut out = &jac * cov * jac.transpose();
    symmetrize(&mut out);
    out
}

/// Closed-form joint parameters from the world-frame displacement of the
/// measurement relative to the reference, expressed as an increment on
/// `state`. Serves as an extra starting point for the iterated update.
fn closed_form_start(state: &ArticulatedState, displacement: &RigidTransform, origin: &Vector3<f64>) -> Option<DVector<f64>> {
    match state {
        ArticulatedState::Prismatic(s) => {
            let t = displacement.translation;
            let len = t.norm();
            if len < 1e-6 {
                return None;
            }
            let (dir, q) = if t.dot(&s.axis.direction()) >= 0.0 { (t / len, len) } else { (-t / len, -len) };
            let (a, b) = s.axis.local_coordinates(&dir);
            Some(DVector::from_vec(vec![a, b, q - s.q, 0.0]))
        }
        ArticulatedState::Revolute(s) => {
            let (w, _) = log_so3(&displacement.rotation);
            let angle = w.norm();
            if angle < 1e-3 {
                return None;
            }
            let (dir, q) = if w.dot(&s.axis.direction()) >= 0.0 { (w / angle, angle) } else { (-w / angle, -angle) };
            let t = displacement.translation;
            let t_perp = t - dir * t.dot(&dir);
            let a = DMatrix::from_column_slice(3, 3, (Matrix3::identity() - displacement.rotation).as_slice());
            let svd = a.svd(true, true);
            let point = svd.solve(&DVector::from_column_slice(t_perp.as_slice()), 1e-9).ok()?;
            let point = gauge_point(&dir, &Vector3::from_column_slice(point.as_slice()), origin);
            let (da, db) = s.axis.local_coordinates(&dir);
            let dp = point - s.point;
            Some(DVector::from_vec(vec![da, db, dp.x, dp.y, dp.z, q - s.q, 0.0]))
        }
    }
}

/// Iterated EKF update of a joint filter with a body pose measurement.
pub fn correct_joint(
    state: &ArticulatedState,
    reference: &Pose6,
    measured: &Pose6,
    measured_cov: &Matrix6<f64>,
    cfg: &PipelineConfig,
) -> Result<(ArticulatedState, JointUpdate)> {
    let reference_t = reference.to_transform();
    let measured_t = measured.to_transform();
    let prior_pred = predicted_transform(state, &reference_t);
    let (_, near_cut) = log_twist(&(prior_pred.inverse() * measured_t));
    let noise = tangent_covariance(&prior_pred, measured, measured_cov);
    if near_cut {
        return Ok((*state, JointUpdate { predictive_log_likelihood: f64::NEG_INFINITY, fit_log_likelihood: f64::NEG_INFINITY, skipped: true }));
    }

    let residual = |d: &DVector<f64>| {
        let pred = predicted_transform(&state.retract(d), &reference_t);
        twist_dvec(&(pred.inverse() * measured_t))
    };
    let origin = reference_t.translation;
    let displacement = measured_t * reference_t.inverse();
    let starts: Vec<DVector<f64>> = closed_form_start(state, &displacement, &origin).into_iter().collect();
    let update = iterated_update(&state.cov(), &noise, residual, &starts, IEKF_ITERATIONS)?;

    let predictive = gaussian_log_likelihood(&update.prior_innovation, &update.prior_innovation_cov)?;
    let fit = gaussian_log_likelihood(&update.posterior_innovation, &noise)?;

    let mut next = state.retract(&update.delta);
    next.set_cov(&update.cov);
    if let ArticulatedState::Revolute(s) = &mut next {
        s.gauge_fix(&origin, cfg);
    }
    Ok((next, JointUpdate { predictive_log_likelihood: predictive, fit_log_likelihood: fit, skipped: false }))
}

/// Log-likelihood of the measurement under the rigid (no articulation) model.
pub fn rigid_log_likelihood(reference: &Pose6, measured: &Pose6, measured_cov: &Matrix6<f64>) -> Result<f64> {
    let reference_t = reference.to_transform();
    let innovation = twist_dvec(&(reference_t.inverse() * measured.to_transform()));
    gaussian_log_likelihood(&innovation, &tangent_covariance(&reference_t, measured, measured_cov))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JointEstimate {
    Rigid,
    Articulated(ArticulatedState),
    Disconnected,
}

/// Selected kinematic model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointModel {
    pub estimate: JointEstimate,
    /// Body pose the joint is articulated from.
    pub reference: Pose6,
    /// Windowed mean log-likelihood of the selected model.
    pub log_likelihood_window: f64,
}

impl JointModel {
    pub fn joint_type(&self) -> JointType {
        match &self.estimate {
            JointEstimate::Rigid => JointType::Rigid,
            JointEstimate::Articulated(s) => s.joint_type(),
            JointEstimate::Disconnected => JointType::Disconnected,
        }
    }

    pub fn articulation(&self) -> Option<&ArticulatedState> {
        match &self.estimate {
            JointEstimate::Articulated(s) => Some(s),
            _ => None,
        }
    }

    pub fn joint_axis(&self) -> Option<JointAxis> {
        self.articulation().map(|s| s.joint_axis())
    }

    /// Current joint value; zero without an articulation.
    pub fn q(&self) -> f64 {
        self.articulation().map_or(0.0, |s| s.q())
    }
}

/// Body pose and spatial velocity obtained by advancing the joint by
/// `dt·q_dot`.
pub fn joint_prediction_for_body(model: &JointModel, dt: f64) -> Result<(Pose6, Velocity6)> {
    let state = model.articulation().ok_or(Error::NoArticulation)?;
    let axis = state.joint_axis();
    let q = state.q() + dt * state.q_dot();
    let pose = Pose6::from_transform(&(axis.transform(q) * model.reference.to_transform()));
    let velocity = Velocity6::from_vector(&(axis.unit_twist() * state.q_dot()));
    Ok((pose, velocity))
}

/// Rolling window of per-frame log-likelihoods.
#[derive(Clone, Debug, Default)]
pub struct LikelihoodWindow {
    values: VecDeque<f64>,
    capacity: usize,
}

impl LikelihoodWindow {
    pub fn new(capacity: usize) -> Self {
        Self { values: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, value: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(value);
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One competing model for [`select_model`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub joint_type: JointType,
    /// `None` when the model has not been scored yet.
    pub window_mean: Option<f64>,
    pub state: Option<ArticulatedState>,
}

/// Picks the model with the highest penalized windowed log-likelihood.
///
/// Each free parameter costs `parameter_penalty`; exact ties go to the simpler
/// model. A revolute winner whose axis is farther than the radius cap from
/// `probe` yields the prismatic candidate instead. If no window reaches the
/// floor the result is `Disconnected`.
pub fn select_model(candidates: &[Candidate], reference: &Pose6, probe: &Vector3<f64>, cfg: &PipelineConfig) -> JointModel {
    let ms = &cfg.model_select;
    let disconnected = JointModel { estimate: JointEstimate::Disconnected, reference: *reference, log_likelihood_window: f64::NEG_INFINITY };
    let mut ranked: Vec<(f64, &Candidate)> = candidates
        .iter()
        .filter_map(|c| c.window_mean.filter(|m| m.is_finite()).map(|m| (m, c)))
        .collect();
    if ranked.is_empty() || ranked.iter().all(|(m, _)| *m < ms.disconnected_floor) {
        return disconnected;
    }
    ranked.sort_by(|(ma, a), (mb, b)| {
        let sa = ma - ms.parameter_penalty * a.joint_type.parameter_count() as f64;
        let sb = mb - ms.parameter_penalty * b.joint_type.parameter_count() as f64;
        sb.total_cmp(&sa).then(a.joint_type.cmp(&b.joint_type))
    });

    for (mean, cand) in ranked {
        let model = |estimate| JointModel { estimate, reference: *reference, log_likelihood_window: mean };
        match cand.joint_type {
            JointType::Rigid => return model(JointEstimate::Rigid),
            JointType::Prismatic | JointType::Revolute => {
                let Some(state) = cand.state else { continue };
                if let ArticulatedState::Revolute(s) = &state {
                    if s.joint_axis().radius_of(probe) > ms.radius_cap {
                        if let Some(p) = candidates.iter().find(|c| c.joint_type == JointType::Prismatic) {
                            if let Some(ps) = p.state {
                                let m = p.window_mean.unwrap_or(mean);
                                return JointModel {
                                    estimate: JointEstimate::Articulated(ps.canonical()),
                                    reference: *reference,
                                    log_likelihood_window: m,
                                };
                            }
                        }
                        continue;
                    }
                }
                return model(JointEstimate::Articulated(state.canonical()));
            }
            JointType::Disconnected => return disconnected,
        }
    }
    disconnected
}

/// Per-frame output of the joint level.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBelief {
    pub model: JointModel,
    /// Windowed mean log-likelihoods of rigid, prismatic and revolute.
    pub window_means: [Option<f64>; 3],
    pub frame_log_likelihoods: [f64; 3],
}

/// Level-three estimator: runs both joint filters and the rigid hypothesis
/// against every body pose and selects a model per frame.
#[derive(Clone, Debug)]
pub struct JointEstimator {
    reference: Pose6,
    probe: Vector3<f64>,
    prismatic: ArticulatedState,
    revolute: ArticulatedState,
    windows: [LikelihoodWindow; 3],
    last_t: f64,
}

impl JointEstimator {
    /// `reference` is the body pose at initialization; `probe` a point on the
    /// hand (in the reference configuration) used for the radius cap.
    pub fn new(t: f64, reference: Pose6, probe: Vector3<f64>, cfg: &PipelineConfig) -> Self {
        let origin = reference.to_transform().translation;
        let up = Vector3::z();
        let probe_offset = probe + Vector3::new(0.1, 0.0, 0.0);
        Self {
            reference,
            probe,
            prismatic: ArticulatedState::Prismatic(PrismaticState::new(&up, cfg)),
            revolute: ArticulatedState::Revolute(RevoluteState::new(&up, &probe_offset, &origin, cfg)),
            windows: std::array::from_fn(|_| LikelihoodWindow::new(cfg.model_select.window)),
            last_t: t,
        }
    }

    pub fn reference(&self) -> &Pose6 {
        &self.reference
    }

    pub fn prismatic(&self) -> &ArticulatedState {
        &self.prismatic
    }

    pub fn revolute(&self) -> &ArticulatedState {
        &self.revolute
    }

    /// Windowed mean log-likelihoods of rigid, prismatic and revolute.
    pub fn window_means(&self) -> [Option<f64>; 3] {
        [self.windows[0].mean(), self.windows[1].mean(), self.windows[2].mean()]
    }

    pub fn step(&mut self, t: f64, measured: &Pose6, measured_cov: &Matrix6<f64>, cfg: &PipelineConfig) -> Result<JointBelief> {
        let dt = t - self.last_t;
        if dt > 0.0 {
            self.prismatic = predict_joint(&self.prismatic, dt, cfg)?;
            self.revolute = predict_joint(&self.revolute, dt, cfg)?;
            self.last_t = t;
        }
        let mut frame = [f64::NEG_INFINITY; 3];
        frame[0] = rigid_log_likelihood(&self.reference, measured, measured_cov)?;
        for (slot, state) in [(1, &mut self.prismatic), (2, &mut self.revolute)] {
            let (next, update) = correct_joint(state, &self.reference, measured, measured_cov, cfg)?;
            *state = next;
            frame[slot] = update.fit_log_likelihood;
        }
        for (w, v) in self.windows.iter_mut().zip(frame) {
            if v.is_finite() {
                w.push(v);
            }
        }
        let means = self.window_means();
        let candidates = [
            Candidate { joint_type: JointType::Rigid, window_mean: means[0], state: None },
            Candidate { joint_type: JointType::Prismatic, window_mean: means[1], state: Some(self.prismatic) },
            Candidate { joint_type: JointType::Revolute, window_mean: means[2], state: Some(self.revolute) },
        ];
        let model = select_model(&candidates, &self.reference, &self.probe, cfg);
        Ok(JointBelief { model, window_means: means, frame_log_likelihoods: frame })
    }
}

/// Joint pose derivative check helper shared with tests: homogeneous matrix
/// of the predicted pose.
pub fn predicted_pose_matrix(state: &ArticulatedState, reference: &Pose6) -> Matrix4<f64> {
    predicted_transform(state, &reference.to_transform()).to_homogeneous()
}
