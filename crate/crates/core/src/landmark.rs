//! Landmark level: a bank of constant-velocity Kalman filters, one per hand
//! landmark, each tracking location and velocity.
//!
//! Observations pass a visibility filter and a Mahalanobis gate before they
//! correct a filter. A filter whose location covariance trace reaches the
//! configured bound is marked lost and respawns on its next accepted
//! observation. Downstream consumers receive the filtered location together
//! with its covariance scaled by the landmark class saliency.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};

/// Hand landmarks in the 21-point MediaPipe topology.
pub const NUM_LANDMARKS: u8 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LandmarkClass {
    Wrist,
    Thumb,
    Mcp,
    Pip,
    Dip,
    Tip,
}

impl LandmarkClass {
    /// `0` wrist; `1..=3` thumb joints; then four per finger (MCP, PIP, DIP,
    /// tip). Both the thumb tip (`4`) and the finger tips are `Tip`.
    pub fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => Self::Wrist,
            1..=3 => Self::Thumb,
            4 => Self::Tip,
            5..=20 => match (id - 5) % 4 {
                0 => Self::Mcp,
                1 => Self::Pip,
                2 => Self::Dip,
                _ => Self::Tip,
            },
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkObservation {
    pub t: f64,
    pub id: u8,
    pub pos: Vector3<f64>,
    pub vis: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    LowVisibility,
    ExcludedClass,
    InvalidId,
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ingest {
    Accepted,
    Rejected(Rejection),
}

pub fn ingest(obs: &LandmarkObservation, cfg: &PipelineConfig) -> Ingest {
    let Some(class) = LandmarkClass::from_id(obs.id) else {
        return Ingest::Rejected(Rejection::InvalidId);
    };
    if !obs.pos.iter().all(|v| v.is_finite()) || !obs.vis.is_finite() {
        return Ingest::Rejected(Rejection::NonFinite);
    }
    if obs.vis < cfg.vis_thresh {
        return Ingest::Rejected(Rejection::LowVisibility);
    }
    if class == LandmarkClass::Wrist {
        return Ingest::Rejected(Rejection::ExcludedClass);
    }
    Ingest::Accepted
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkStatus {
    Active,
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkFilterState {
    pub id: u8,
    /// Location followed by velocity.
    pub x: Vector6<f64>,
    pub p: Matrix6<f64>,
    pub class: LandmarkClass,
    pub missed_updates: u32,
    pub status: LandmarkStatus,
}

pub(crate) fn symmetrize_fixed<const N: usize>(m: &mut SMatrix<f64, N, N>) {
    for i in 0..N {
        for j in (i + 1)..N {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn observation_matrix() -> Matrix3x6<f64> {
    let mut h = Matrix3x6::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    h
}

impl LandmarkFilterState {
    /// Fresh filter at the observed location with zero velocity and `P₀`.
    pub fn spawn(obs: &LandmarkObservation, cfg: &PipelineConfig) -> Result<Self> {
        let class = LandmarkClass::from_id(obs.id)
            .ok_or_else(|| Error::Degenerate(format!("landmark id {} out of range", obs.id)))?;
        let mut x = Vector6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&obs.pos);
        Ok(Self { id: obs.id, x, p: cfg.p0_lm, class, missed_updates: 0, status: LandmarkStatus::Active })
    }

    pub fn location(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3).into_owned()
    }

    pub fn location_cov(&self) -> Matrix3<f64> {
        self.p.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn location_trace(&self) -> f64 {
        self.location_cov().trace()
    }

    /// Predicted measurement and innovation covariance `H P Hᵀ + R`.
    pub fn predicted_measurement(&self, cfg: &PipelineConfig) -> (Vector3<f64>, Matrix3<f64>) {
        (self.location(), self.location_cov() + cfg.r_lm)
    }
}

/// Constant-velocity prediction over `dt` seconds.
pub fn predict(state: &LandmarkFilterState, dt: f64, cfg: &PipelineConfig) -> Result<LandmarkFilterState> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveTimeStep(dt));
    }
    let mut f = Matrix6::identity();
    f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * dt));
    let mut out = *state;
    out.x = f * state.x;
    out.p = f * state.p * f.transpose() + cfg.q_lm * cfg.time_scale(dt);
    symmetrize_fixed(&mut out.p);
    Ok(out)
}

pub fn mahalanobis(z: &Vector3<f64>, z_pred: &Vector3<f64>, s: &Matrix3<f64>) -> Result<f64> {
    let chol = s.cholesky().ok_or(Error::SingularCovariance)?;
    let d = z - z_pred;
    Ok(d.dot(&chol.solve(&d)).max(0.0).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionOutcome {
    Corrected,
    GatedOutlier,
}

/// Kalman update with `H = (I₃ 0₃)`. Observations at Mahalanobis distance at
/// or above the threshold are skipped and counted as missed updates.
pub fn correct(
    state: &LandmarkFilterState,
    obs: &LandmarkObservation,
    cfg: &PipelineConfig,
) -> (LandmarkFilterState, CorrectionOutcome) {
    let (z_pred, s) = state.predicted_measurement(cfg);
    let Some(chol) = s.cholesky() else {
        let mut out = *state;
        out.missed_updates += 1;
        return (out, CorrectionOutcome::GatedOutlier);
    };
    let innovation = obs.pos - z_pred;
    if cfg.uncertainty.landmark_gating {
        let m = innovation.dot(&chol.solve(&innovation)).max(0.0).sqrt();
        if m >= cfg.maha_lm_thresh {
            let mut out = *state;
            out.missed_updates += 1;
            return (out, CorrectionOutcome::GatedOutlier);
        }
    }
    let h = observation_matrix();
    let pht = state.p * h.transpose();
    let gain = pht * chol.inverse();
    let ikh = Matrix6::identity() - gain * h;
    let mut out = *state;
    out.x = state.x + gain * innovation;
    out.p = ikh * state.p * ikh.transpose() + gain * cfg.r_lm * gain.transpose();
    symmetrize_fixed(&mut out.p);
    (out, CorrectionOutcome::Corrected)
}

/// Marks the filter lost once its location covariance trace reaches the bound.
pub fn check_lost(state: &LandmarkFilterState, cfg: &PipelineConfig) -> LandmarkFilterState {
    let mut out = *state;
    if state.location_trace() >= cfg.landmark_unc_thresh {
        out.status = LandmarkStatus::Lost;
    }
    out
}

/// Location covariance scaled by the class saliency factor; this is the
/// measurement covariance the body level uses for the landmark.
pub fn adjusted_covariance(state: &LandmarkFilterState, cfg: &PipelineConfig) -> Matrix3<f64> {
    let s = cfg.saliency_factor(state.class).unwrap_or(1.0);
    state.location_cov() * s
}

/// Filtered landmark handed to the body level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandmarkMeasurement {
    pub id: u8,
    pub pos: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkEvent {
    Corrected,
    GatedOutlier,
    Spawned,
    Rejected(Rejection),
}

#[derive(Clone, Debug)]
struct Slot {
    state: LandmarkFilterState,
    /// Predicted state kept for rolling back this frame's correction.
    prior: Option<LandmarkFilterState>,
}

/// Result of one frame at the landmark level.
#[derive(Clone, Debug, Default)]
pub struct LandmarkFrame {
    pub measurements: Vec<LandmarkMeasurement>,
    pub events: BTreeMap<u8, LandmarkEvent>,
}

/// All landmark filters of one hand.
#[derive(Clone, Debug, Default)]
pub struct LandmarkBank {
    slots: BTreeMap<u8, Slot>,
    last_t: Option<f64>,
}

impl LandmarkBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self, id: u8) -> Option<&LandmarkFilterState> {
        self.slots.get(&id).map(|s| &s.state)
    }

    pub fn states(&self) -> impl Iterator<Item = &LandmarkFilterState> {
        self.slots.values().map(|s| &s.state)
    }

    pub fn is_active(&self, id: u8) -> bool {
        self.state(id).is_some_and(|s| s.status == LandmarkStatus::Active)
    }

    /// Advances every active filter to `t` and processes the frame's
    /// observations. Only filters corrected in this frame produce measurements.
    pub fn step(&mut self, t: f64, observations: &[LandmarkObservation], cfg: &PipelineConfig) -> Result<LandmarkFrame> {
        let dt = match self.last_t {
            Some(prev) if t < prev => {
                return Err(Error::Degenerate(format!("time went backwards: {t} < {prev}")));
            }
            Some(prev) => t - prev,
            None => 0.0,
        };
        self.last_t = Some(t);

        for slot in self.slots.values_mut() {
            slot.prior = None;
            if slot.state.status == LandmarkStatus::Active && dt > 0.0 {
                slot.state = predict(&slot.state, dt, cfg)?;
            }
        }

        let mut frame = LandmarkFrame::default();
        for obs in observations {
            if let Ingest::Rejected(reason) = ingest(obs, cfg) {
                frame.events.insert(obs.id, LandmarkEvent::Rejected(reason));
                continue;
            }
            match self.slots.get_mut(&obs.id) {
                Some(slot) if slot.state.status == LandmarkStatus::Active => {
                    let (next, outcome) = correct(&slot.state, obs, cfg);
                    slot.prior = Some(slot.state);
                    slot.state = next;
                    let event = match outcome {
                        CorrectionOutcome::Corrected => LandmarkEvent::Corrected,
                        CorrectionOutcome::GatedOutlier => LandmarkEvent::GatedOutlier,
                    };
                    frame.events.insert(obs.id, event);
                }
                _ => {
                    let state = LandmarkFilterState::spawn(obs, cfg)?;
                    self.slots.insert(obs.id, Slot { state, prior: None });
                    frame.events.insert(obs.id, LandmarkEvent::Spawned);
                }
            }
        }

        for (id, slot) in self.slots.iter_mut() {
            if slot.state.status == LandmarkStatus::Active && !frame.events.contains_key(id) {
                slot.state.missed_updates += 1;
            }
            slot.state = check_lost(&slot.state, cfg);
        }

        for (id, event) in &frame.events {
            if *event != LandmarkEvent::Corrected {
                continue;
            }
            let state = &self.slots[id].state;
            if state.status == LandmarkStatus::Active {
                frame.measurements.push(LandmarkMeasurement {
                    id: *id,
                    pos: state.location(),
                    cov: adjusted_covariance(state, cfg),
                });
            }
        }
        Ok(frame)
    }

    /// Body-level feedback: undo this frame's correction of landmark `id`, as
    /// if its observation had been gated.
    pub fn reject(&mut self, id: u8, cfg: &PipelineConfig) {
        if let Some(slot) = self.slots.get_mut(&id) {
            if let Some(prior) = slot.prior.take() {
                let mut state = prior;
                state.missed_updates += 1;
                slot.state = check_lost(&state, cfg);
            }
        }
    }
}
