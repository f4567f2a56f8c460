//! Per-frame orchestration of the three estimation levels.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::ransac::RansacOutcome;
use crate::body::{body_pose_measurement, correct_body, init_ransac, predict_body, BodyState, MotionModel};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{Pose6, RigidTransform};
use crate::io::ObservationRecord;
use crate::joint::{JointEstimator, JointModel, JointType};
use crate::landmark::{LandmarkBank, LandmarkMeasurement};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Waiting for enough landmarks to initialize the hand body.
    Initializing,
    Tracking,
}

/// Windowed mean log-likelihood of each kinematic model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLikelihoods {
    pub rigid: Option<f64>,
    pub prismatic: Option<f64>,
    pub revolute: Option<f64>,
}

/// Belief emitted after each frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameBelief {
    pub t: f64,
    pub stage: Stage,
    /// Filtered landmarks handed to the body level.
    pub landmarks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub body_model: Option<MotionModel>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub body_gated: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joint_type: Option<JointType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_likelihood: Option<ModelLikelihoods>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

#[derive(Clone, Debug)]
struct Snapshot {
    t: f64,
    measurements: Vec<LandmarkMeasurement>,
}

#[derive(Clone, Debug)]
enum Phase {
    Collecting { start: Option<Snapshot>, frames: usize },
    Tracking(BodyState),
}

/// The full estimator for one hand.
#[derive(Clone, Debug)]
pub struct Pipeline {
    cfg: PipelineConfig,
    bank: LandmarkBank,
    phase: Phase,
    /// Pose of the current body reference relative to the first one; the
    /// identity until the body filter re-initializes.
    base: RigidTransform,
    joint: Option<JointEstimator>,
    model: Option<JointModel>,
    ransac: Option<RansacOutcome>,
    q_extent: f64,
    frames: usize,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            bank: LandmarkBank::new(),
            phase: Phase::Collecting { start: None, frames: 0 },
            base: RigidTransform::identity(),
            joint: None,
            model: None,
            ransac: None,
            q_extent: 0.0,
            frames: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Latest selected kinematic model, once the joint level has run.
    pub fn joint_model(&self) -> Option<&JointModel> {
        self.model.as_ref()
    }

    /// Outcome of the most recent body initialization.
    pub fn ransac_outcome(&self) -> Option<&RansacOutcome> {
        self.ransac.as_ref()
    }

    pub fn body_state(&self) -> Option<&BodyState> {
        match &self.phase {
            Phase::Tracking(s) => Some(s),
            Phase::Collecting { .. } => None,
        }
    }

    /// Largest |q| of the selected articulated model over all frames.
    pub fn q_extent(&self) -> f64 {
        self.q_extent
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn step(&mut self, record: &ObservationRecord) -> Result<FrameBelief> {
        self.frames += 1;
        let frame = self.bank.step(record.t, &record.landmarks, &self.cfg)?;
        let mut belief = FrameBelief {
            t: record.t,
            stage: Stage::Initializing,
            landmarks: frame.measurements.len(),
            body_model: None,
            body_gated: Vec::new(),
            joint_type: None,
            log_likelihood: None,
            q: None,
        };

        let phase = std::mem::replace(&mut self.phase, Phase::Collecting { start: None, frames: 0 });
        self.phase = match phase {
            Phase::Collecting { start, frames } => self.collect(start, frames, record.t, frame.measurements)?,
            Phase::Tracking(state) => self.track(state, record.t, &frame.measurements, &mut belief)?,
        };
        if let Phase::Tracking(_) = self.phase {
            belief.stage = Stage::Tracking;
        }
        if let Some(m) = &self.model {
            belief.joint_type = Some(m.joint_type());
            if let Some(a) = m.articulation() {
                belief.q = Some(a.q());
            }
        }
        if let Some(j) = &self.joint {
            let w = j.window_means();
            belief.log_likelihood = Some(ModelLikelihoods { rigid: w[0], prismatic: w[1], revolute: w[2] });
        }
        Ok(belief)
    }

    fn collect(&mut self, start: Option<Snapshot>, frames: usize, t: f64, measurements: Vec<LandmarkMeasurement>) -> Result<Phase> {
        let min = self.cfg.ransac.min_inliers.max(3);
        let Some(start) = start else {
            let start = (measurements.len() >= min).then_some(Snapshot { t, measurements });
            return Ok(Phase::Collecting { start, frames: 0 });
        };
        let frames = frames + 1;
        if frames < self.cfg.ransac.init_window || t <= start.t {
            return Ok(Phase::Collecting { start: Some(start), frames });
        }
        match init_ransac(&start.measurements, start.t, &measurements, t, &self.cfg) {
            Ok(init) => {
                let state = init.state;
                self.ransac = Some(init.ransac);
                if self.joint.is_none() {
                    let probe = state.ref_centroid();
                    self.joint = Some(JointEstimator::new(start.t, Pose6::identity(), probe, &self.cfg));
                }
                self.update_joint(&state)?;
                Ok(Phase::Tracking(state))
            }
            Err(Error::InsufficientData(_) | Error::Degenerate(_)) => {
                let start = (measurements.len() >= min).then_some(Snapshot { t, measurements });
                Ok(Phase::Collecting { start, frames: 0 })
            }
            Err(e) => Err(e),
        }
    }

    fn track(&mut self, state: BodyState, t: f64, measurements: &[LandmarkMeasurement], belief: &mut FrameBelief) -> Result<Phase> {
        let dt = t - state.t;
        if !(dt > 0.0) {
            return Ok(Phase::Tracking(state));
        }
        let hint = self.model.filter(|m| m.articulation().is_some()).map(|m| self.local_hint(&m));
        let mut predictions = Vec::with_capacity(3);
        for model in MotionModel::ALL {
            if model == MotionModel::KinematicPrior && hint.is_none() {
                continue;
            }
            predictions.push((model, predict_body(&state, dt, model, hint.as_ref(), &self.cfg)?));
        }
        let out = correct_body(&predictions, measurements, &self.cfg)?;
        for id in &out.gated {
            self.bank.reject(*id, &self.cfg);
        }
        belief.body_model = Some(out.model);
        belief.body_gated = out.gated.clone();
        if out.updated {
            self.update_joint(&out.state)?;
        }

        let lost = out.state.ref_landmarks.keys().filter(|id| !self.bank.is_active(**id)).count();
        if 2 * lost > out.state.ref_landmarks.len() {
            self.base = out.state.pose.to_transform() * self.base;
            return Ok(Phase::Collecting { start: None, frames: 0 });
        }
        Ok(Phase::Tracking(out.state))
    }

    /// Joint model expressed against the current body reference.
    fn local_hint(&self, model: &JointModel) -> JointModel {
        let mut m = *model;
        m.reference = Pose6::from_transform(&(model.reference.to_transform() * self.base.inverse()));
        m
    }

    fn update_joint(&mut self, state: &BodyState) -> Result<()> {
        let Some(joint) = self.joint.as_mut() else { return Ok(()) };
        let (pose, cov) = body_pose_measurement(state);
        let global = Pose6::from_transform(&(pose.to_transform() * self.base));
        let belief = joint.step(state.t, &global, &cov, &self.cfg)?;
        if let Some(a) = belief.model.articulation() {
            self.q_extent = self.q_extent.max(a.q().abs());
        }
        self.model = Some(belief.model);
        Ok(())
    }
}

/// Final estimate summary of a processed sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub joint_type: JointType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub axis_direction: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub axis_point: Option<[f64; 3]>,
    pub q_max: f64,
    pub frames: usize,
    #[serde(default)]
    pub ransac_outliers: Vec<u8>,
}

impl EstimateSummary {
    pub fn from_pipeline(p: &Pipeline) -> Self {
        let model = p.joint_model();
        let axis = model.and_then(|m| m.joint_axis());
        let (axis_direction, axis_point) = match axis {
            Some(crate::joint::JointAxis::Prismatic { direction }) => (Some(direction.into()), None),
            Some(crate::joint::JointAxis::Revolute { direction, point }) => (Some(direction.into()), Some(point.into())),
            None => (None, None),
        };
        Self {
            joint_type: model.map_or(JointType::Disconnected, |m| m.joint_type()),
            axis_direction,
            axis_point,
            q_max: p.q_extent(),
            frames: p.frames(),
            ransac_outliers: p.ransac_outcome().map(|r| r.outliers.clone()).unwrap_or_default(),
        }
    }

    pub fn joint_axis(&self) -> Option<crate::joint::JointAxis> {
        let direction = Vector3::from(self.axis_direction?);
        match self.joint_type {
            JointType::Prismatic => Some(crate::joint::JointAxis::Prismatic { direction }),
            JointType::Revolute => Some(crate::joint::JointAxis::Revolute { direction, point: Vector3::from(self.axis_point?) }),
            _ => None,
        }
    }
}

/// Runs a whole sequence and returns the final model.
pub fn run_sequence<'a, I>(records: I, cfg: &PipelineConfig) -> Result<Pipeline>
where
    I: IntoIterator<Item = &'a ObservationRecord>,
{
    let mut p = Pipeline::new(cfg.clone())?;
    for r in records {
        p.step(r)?;
    }
    if p.frames() == 0 {
        return Err(Error::NoFrames);
    }
    Ok(p)
}
