//! Body level: rigid-body EKF over the hand pose.
//!
//! The state is the pose in exponential coordinates plus a spatial twist,
//! relative to the hand configuration at the initialization start snapshot.
//! Landmark positions in that snapshot form the reference constellation; the
//! measurement model maps them through the current pose.

pub mod ransac;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::config::{Matrix12, PipelineConfig};
use crate::error::{Error, Result};
use crate::filter::{cholesky, gaussian_log_likelihood, iterated_update, numeric_jacobian};
use crate::geometry::{exp_twist, log_twist, Pose6, Velocity6};
use crate::joint::{joint_prediction_for_body, JointModel};
use crate::landmark::{symmetrize_fixed, LandmarkMeasurement};
use ransac::{ransac, RansacOutcome, Track};

const IEKF_ITERATIONS: usize = 5;
/// Fewest landmarks that constrain a rigid pose.
pub const MIN_LANDMARKS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    Static,
    ConstantVelocity,
    KinematicPrior,
}

impl MotionModel {
    pub const ALL: [MotionModel; 3] = [MotionModel::Static, MotionModel::ConstantVelocity, MotionModel::KinematicPrior];
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyState {
    pub t: f64,
    pub pose: Pose6,
    /// Spatial twist: `T(t + dt) = exp(dt·ξ) · T(t)`.
    pub velocity: Velocity6,
    /// Covariance over `(pose (6), velocity (6))`.
    pub cov: Matrix12,
    /// Time of the reference configuration, where the pose is the identity.
    pub t_ref: f64,
    /// Landmark positions in the reference configuration.
    pub ref_landmarks: BTreeMap<u8, Vector3<f64>>,
}

impl BodyState {
    fn vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(12);
        v.rows_mut(0, 6).copy_from(&self.pose.to_vector());
        v.rows_mut(6, 6).copy_from(&self.velocity.to_vector());
        v
    }

    fn with_vector(&self, v: &DVector<f64>) -> Self {
        Self {
            pose: Pose6::from_vector(&Vector6::from_column_slice(&v.as_slice()[0..6])),
            velocity: Velocity6::from_vector(&Vector6::from_column_slice(&v.as_slice()[6..12])),
            ..self.clone()
        }
    }

    /// Centroid of the reference constellation.
    pub fn ref_centroid(&self) -> Vector3<f64> {
        let n = self.ref_landmarks.len().max(1) as f64;
        self.ref_landmarks.values().sum::<Vector3<f64>>() / n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyInit {
    /// State at the end snapshot.
    pub state: BodyState,
    pub ransac: RansacOutcome,
}

/// Initializes the body filter from two snapshots of filtered landmarks taken
/// `t_end − t_start` apart.
///
/// The reference configuration is the start snapshot (pose identity at
/// `t_start`); the returned state sits at `t_end` with the RANSAC transform as
/// pose and `log(T)/Δt` as velocity. Only RANSAC inliers enter the reference
/// constellation.
pub fn init_ransac(
    start: &[LandmarkMeasurement],
    t_start: f64,
    end: &[LandmarkMeasurement],
    t_end: f64,
    cfg: &PipelineConfig,
) -> Result<BodyInit> {
    let dt = t_end - t_start;
    if !(dt > 0.0) {
        return Err(Error::NonPositiveTimeStep(dt));
    }
    let start_by_id: BTreeMap<u8, &LandmarkMeasurement> = start.iter().map(|m| (m.id, m)).collect();
    let tracks: Vec<Track> = end
        .iter()
        .filter_map(|e| start_by_id.get(&e.id).map(|s| Track { id: e.id, start: s.pos, end: e.pos, cov: e.cov }))
        .collect();
    let outcome = ransac(&tracks, &cfg.ransac)?;
    let ref_landmarks = outcome.inliers.iter().map(|id| (*id, start_by_id[id].pos)).collect();
    let (twist, _) = log_twist(&outcome.transform);
    let state = BodyState {
        t: t_end,
        pose: Pose6::from_vector(&twist),
        velocity: Velocity6::from_vector(&(twist / dt)),
        cov: cfg.p0_rb,
        t_ref: t_start,
        ref_landmarks,
    };
    Ok(BodyInit { state, ransac: outcome })
}

/// Propagates the body state by `dt` under one motion model.
pub fn predict_body(
    state: &BodyState,
    dt: f64,
    model: MotionModel,
    joint_hint: Option<&JointModel>,
    cfg: &PipelineConfig,
) -> Result<BodyState> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveTimeStep(dt));
    }
    let q = cfg.q_rb * cfg.time_scale(dt);
    let mut next = state.clone();
    next.t = state.t + dt;
    match model {
        MotionModel::Static => next.cov = state.cov + q,
        MotionModel::ConstantVelocity => {
            let f = |x: &DVector<f64>| {
                let pose = Pose6::from_vector(&Vector6::from_column_slice(&x.as_slice()[0..6])).to_transform();
                let xi = Vector6::from_column_slice(&x.as_slice()[6..12]);
                let moved = exp_twist(&(xi * dt)) * pose;
                let mut out = x.clone();
                out.rows_mut(0, 6).copy_from(&log_twist(&moved).0);
                out
            };
            let x = state.vector();
            let jac = numeric_jacobian(f, &x);
            let jac = Matrix12::from_column_slice(jac.as_slice());
            next = state.with_vector(&f(&x));
            next.t = state.t + dt;
            next.cov = jac * state.cov * jac.transpose() + q;
        }
        MotionModel::KinematicPrior => {
            let hint = joint_hint.ok_or(Error::MissingJointHint)?;
            let (pose, velocity) = joint_prediction_for_body(hint, dt)?;
            next.pose = pose;
            next.velocity = velocity;
            next.cov = state.cov + q;
        }
    }
    symmetrize_fixed(&mut next.cov);
    Ok(next)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyCorrection {
    pub state: BodyState,
    pub model: MotionModel,
    /// Log-likelihood of the common landmark set under each candidate model.
    pub log_likelihoods: Vec<(MotionModel, f64)>,
    /// Landmarks that entered the update.
    pub used: Vec<u8>,
    /// Landmarks gated out under the selected model.
    pub gated: Vec<u8>,
    /// False when fewer than three usable landmarks remained.
    pub updated: bool,
}

struct Evaluation {
    innovations: Vec<Vector3<f64>>,
    gated: Vec<bool>,
}

fn stacked_prediction(pose: &Vector6<f64>, refs: &[Vector3<f64>]) -> DVector<f64> {
    let t = Pose6::from_vector(pose).to_transform();
    let mut out = DVector::zeros(refs.len() * 3);
    for (i, r) in refs.iter().enumerate() {
        out.rows_mut(3 * i, 3).copy_from(&t.apply(r));
    }
    out
}

fn evaluate(state: &BodyState, refs: &[Vector3<f64>], meas: &[&LandmarkMeasurement], cfg: &PipelineConfig) -> Result<Evaluation> {
    let pose = state.pose.to_vector();
    let pred = stacked_prediction(&pose, refs);
    let h = numeric_jacobian(
        |x: &DVector<f64>| stacked_prediction(&Vector6::from_column_slice(x.as_slice()), refs),
        &DVector::from_column_slice(pose.as_slice()),
    );
    let p_pose: Matrix6<f64> = state.cov.fixed_view::<6, 6>(0, 0).into_owned();
    let mut innovations = Vec::with_capacity(meas.len());
    let mut gated = Vec::with_capacity(meas.len());
    for (i, m) in meas.iter().enumerate() {
        let nu = m.pos - Vector3::from_column_slice(&pred.as_slice()[3 * i..3 * i + 3]);
        let hi = nalgebra::Matrix3x6::from_fn(|r, c| h[(3 * i + r, c)]);
        let s: Matrix3<f64> = hi * p_pose * hi.transpose() + m.cov;
        let maha = s
            .cholesky()
            .map(|c| nu.dot(&c.solve(&nu)).max(0.0).sqrt())
            .ok_or_else(|| Error::NotPositiveDefinite("body innovation covariance".into()))?;
        innovations.push(nu);
        gated.push(cfg.uncertainty.body_gating && maha >= cfg.maha_rb_thresh);
    }
    Ok(Evaluation { innovations, gated })
}

fn block_diagonal(meas: &[&LandmarkMeasurement]) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(meas.len() * 3, meas.len() * 3);
    for (i, m) in meas.iter().enumerate() {
        r.view_mut((3 * i, 3 * i), (3, 3)).copy_from(&m.cov);
    }
    r
}

/// Selects the most likely motion-model prediction and applies an iterated
/// EKF update with the landmarks that pass gating.
///
/// Models are compared on the landmarks gated by none of them, each
/// innovation scored under its landmark's measurement covariance. Exact ties
/// go to the earlier model in `predictions`.
pub fn correct_body(
    predictions: &[(MotionModel, BodyState)],
    measurements: &[LandmarkMeasurement],
    cfg: &PipelineConfig,
) -> Result<BodyCorrection> {
    let (_, first) = predictions.first().ok_or_else(|| Error::InsufficientData("no body prediction".into()))?;
    let meas: Vec<&LandmarkMeasurement> = measurements.iter().filter(|m| first.ref_landmarks.contains_key(&m.id)).collect();
    let refs: Vec<Vector3<f64>> = meas.iter().map(|m| first.ref_landmarks[&m.id]).collect();

    let evals = predictions
        .iter()
        .map(|(_, s)| evaluate(s, &refs, &meas, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut common: Vec<usize> = (0..meas.len()).filter(|&i| evals.iter().all(|e| !e.gated[i])).collect();
    if common.len() < MIN_LANDMARKS {
        common = (0..meas.len()).collect();
    }
    let mut log_likelihoods = Vec::with_capacity(predictions.len());
    let mut best = 0;
    for (k, ((model, _), e)) in predictions.iter().zip(&evals).enumerate() {
        let mut ll = 0.0;
        for &i in &common {
            let nu = DVector::from_column_slice(e.innovations[i].as_slice());
            let r = DMatrix::from_column_slice(3, 3, meas[i].cov.as_slice());
            ll += gaussian_log_likelihood(&nu, &r)?;
        }
        log_likelihoods.push((*model, ll));
        if ll > log_likelihoods[best].1 {
            best = k;
        }
    }

    let (model, prior) = &predictions[best];
    let used_idx: Vec<usize> = (0..meas.len()).filter(|&i| !evals[best].gated[i]).collect();
    let gated: Vec<u8> = (0..meas.len()).filter(|&i| evals[best].gated[i]).map(|i| meas[i].id).collect();
    if used_idx.len() < MIN_LANDMARKS {
        return Ok(BodyCorrection { state: prior.clone(), model: *model, log_likelihoods, used: Vec::new(), gated, updated: false });
    }

    let used: Vec<&LandmarkMeasurement> = used_idx.iter().map(|&i| meas[i]).collect();
    let used_refs: Vec<Vector3<f64>> = used_idx.iter().map(|&i| refs[i]).collect();
    let mut z = DVector::zeros(used.len() * 3);
    for (i, m) in used.iter().enumerate() {
        z.rows_mut(3 * i, 3).copy_from(&m.pos);
    }
    let pose0 = prior.pose.to_vector();
    let residual = |d: &DVector<f64>| {
        let pose = pose0 + Vector6::from_column_slice(&d.as_slice()[0..6]);
        &z - stacked_prediction(&pose, &used_refs)
    };
    let noise = block_diagonal(&used);
    let prior_cov = DMatrix::from_column_slice(12, 12, prior.cov.as_slice());
    cholesky(&prior_cov)?;
    let update = iterated_update(&prior_cov, &noise, residual, &[], IEKF_ITERATIONS)?;

    let mut state = prior.with_vector(&(prior.vector() + &update.delta));
    state.cov = Matrix12::from_column_slice(update.cov.as_slice());
    symmetrize_fixed(&mut state.cov);
    Ok(BodyCorrection {
        state,
        model: *model,
        log_likelihoods,
        used: used.iter().map(|m| m.id).collect(),
        gated,
        updated: true,
    })
}

/// Pose belief handed to the joint level.
pub fn body_pose_measurement(state: &BodyState) -> (Pose6, Matrix6<f64>) {
    (state.pose, state.cov.fixed_view::<6, 6>(0, 0).into_owned())
}
