//! Synthetic hand-landmark sequences with known articulation.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::config::Saliency;
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Pose6};
use crate::io::ObservationRecord;
use crate::joint::{JointAxis, JointType};
use crate::landmark::{LandmarkClass, LandmarkObservation};
use crate::metrics::GroundTruthJoint;

/// Noise multiplier of the wrist decoy relative to the base sigma.
const WRIST_NOISE_SCALE: f64 = 3.0;

/// Landmark offsets of a right hand in its own frame (meters): wrist at the
/// origin, fingers along +y, palm normal along +z.
pub const HAND_OFFSETS: [[f64; 3]; 21] = [
    [0.0, 0.0, 0.0],
    [0.030, 0.020, 0.000],
    [0.050, 0.040, 0.005],
    [0.065, 0.060, 0.010],
    [0.075, 0.080, 0.015],
    [0.030, 0.090, 0.000],
    [0.033, 0.130, 0.005],
    [0.035, 0.155, 0.010],
    [0.036, 0.175, 0.015],
    [0.010, 0.095, 0.000],
    [0.010, 0.140, 0.005],
    [0.010, 0.168, 0.010],
    [0.010, 0.190, 0.015],
    [-0.010, 0.090, 0.000],
    [-0.012, 0.130, 0.005],
    [-0.013, 0.155, 0.010],
    [-0.014, 0.175, 0.015],
    [-0.030, 0.080, 0.000],
    [-0.034, 0.110, 0.004],
    [-0.036, 0.130, 0.008],
    [-0.038, 0.148, 0.012],
];

/// Joint value over time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Hold, smooth-step ramp from 0 to `q_max`, hold.
    SmoothRamp { hold: f64 },
    /// Like `SmoothRamp`, with the ramp split in two by a pause at half range.
    PausedRamp { hold: f64, pause: f64 },
}

impl Default for Profile {
    fn default() -> Self {
        Profile::SmoothRamp { hold: 0.5 }
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

impl Profile {
    pub fn q(&self, t: f64, duration: f64, q_max: f64) -> f64 {
        match *self {
            Profile::SmoothRamp { hold } => {
                let ramp = (duration - 2.0 * hold).max(1e-9);
                q_max * smoothstep((t - hold) / ramp)
            }
            Profile::PausedRamp { hold, pause } => {
                let half = ((duration - 2.0 * hold - pause) / 2.0).max(1e-9);
                let first = smoothstep((t - hold) / half);
                let second = smoothstep((t - hold - half - pause) / half);
                q_max * 0.5 * (first + second)
            }
        }
    }
}

/// A landmark drifting independently of the hand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mover {
    pub id: u8,
    /// Drift velocity (m/s), starting at `t = 0`.
    pub velocity: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub joint: GroundTruthJoint,
    /// World positions of the tracked landmarks at `q = 0`, keyed by id.
    pub constellation: BTreeMap<u8, Vector3<f64>>,
    /// World position of the wrist decoy at `q = 0`, if emitted.
    pub wrist_decoy: Option<Vector3<f64>>,
    pub duration: f64,
    pub rate: f64,
    /// Observation noise standard deviation per landmark class (meters).
    pub noise_sigma: BTreeMap<LandmarkClass, f64>,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    pub dropout_rate: f64,
    pub independent_movers: Vec<Mover>,
    pub profile: Profile,
    pub seed: u64,
}

/// Per-class noise proportional to the saliency scores; the wrist gets a
/// fixed larger factor.
pub fn class_scaled_noise(sigma: f64) -> BTreeMap<LandmarkClass, f64> {
    let saliency = Saliency::default();
    [LandmarkClass::Wrist, LandmarkClass::Thumb, LandmarkClass::Mcp, LandmarkClass::Pip, LandmarkClass::Dip, LandmarkClass::Tip]
        .into_iter()
        .map(|c| (c, sigma * saliency.score(c).unwrap_or(WRIST_NOISE_SCALE)))
        .collect()
}

/// Knobs for [`Scenario::synthetic`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub duration: f64,
    pub rate: f64,
    /// Base noise sigma (meters), scaled per class by saliency.
    pub noise: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    pub dropout_rate: f64,
    /// Number of landmarks drifting independently of the hand.
    pub movers: usize,
    pub mover_speed: f64,
    pub profile: Profile,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            duration: 4.0,
            rate: 30.0,
            noise: 0.002,
            outlier_rate: 0.05,
            outlier_magnitude: 0.1,
            dropout_rate: 0.05,
            movers: 0,
            mover_speed: 0.1,
            profile: Profile::default(),
        }
    }
}

impl ScenarioParams {
    pub fn noiseless() -> Self {
        Self { noise: 0.0, outlier_rate: 0.0, dropout_rate: 0.0, ..Self::default() }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    exp_so3(&(Vector3::from(axis) * angle))
}

fn perpendicular(d: &Vector3<f64>, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v: [f64; 3] = UnitSphere.sample(rng);
        let v = Vector3::from(v);
        let p = v - d * v.dot(d);
        if p.norm() > 0.1 {
            return p.normalize();
        }
    }
}

impl Scenario {
    /// Random hand placement and joint axis drawn from `seed`: hand centroid
    /// near `(0, 0, 0.6)`, uniformly random orientation and axis direction,
    /// revolute radius in `[0.15, 0.5]` m.
    pub fn synthetic(joint_type: JointType, q_max: f64, params: &ScenarioParams, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a1c0);
        let rotation = random_rotation(&mut rng);
        let jitter = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let centroid_local = HAND_OFFSETS[1..].iter().map(|o| Vector3::from(*o)).sum::<Vector3<f64>>() / 20.0;
        let origin = Vector3::new(0.0, 0.0, 0.6) + jitter - rotation * centroid_local;
        let place = |o: &[f64; 3]| origin + rotation * Vector3::from(*o);
        let constellation: BTreeMap<u8, Vector3<f64>> = (1..21u8).map(|id| (id, place(&HAND_OFFSETS[id as usize]))).collect();
        let grasp = constellation.values().sum::<Vector3<f64>>() / constellation.len() as f64;

        let d: [f64; 3] = UnitSphere.sample(&mut rng);
        let direction = Vector3::from(d);
        let axis = match joint_type {
            JointType::Prismatic => JointAxis::Prismatic { direction },
            JointType::Revolute => {
                let radius = rng.random_range(0.15..0.5);
                let point = grasp - perpendicular(&direction, &mut rng) * radius;
                JointAxis::Revolute { direction, point }
            }
            t => return Err(Error::InvalidScenario(format!("cannot simulate a {t} joint"))),
        };
        let ids: Vec<u8> = constellation.keys().copied().collect();
        let mut movers = Vec::new();
        while movers.len() < params.movers.min(ids.len()) {
            let id = ids[rng.random_range(0..ids.len())];
            if movers.iter().any(|m: &Mover| m.id == id) {
                continue;
            }
            let v: [f64; 3] = UnitSphere.sample(&mut rng);
            movers.push(Mover { id, velocity: Vector3::from(v) * params.mover_speed });
        }
        movers.sort_by_key(|m| m.id);

        let scenario = Scenario {
            joint: GroundTruthJoint::new(axis, q_max, grasp)?,
            constellation,
            wrist_decoy: Some(place(&HAND_OFFSETS[0])),
            duration: params.duration,
            rate: params.rate,
            noise_sigma: class_scaled_noise(params.noise),
            outlier_rate: params.outlier_rate,
            outlier_magnitude: params.outlier_magnitude,
            dropout_rate: params.dropout_rate,
            independent_movers: movers,
            profile: params.profile,
            seed,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// Same scenario with a different noise/outlier/dropout setting and seed
    /// kept, for twin comparisons.
    pub fn with_corruption(&self, noise: f64, outlier_rate: f64, dropout_rate: f64) -> Self {
        Self { noise_sigma: class_scaled_noise(noise), outlier_rate, dropout_rate, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if !(self.rate > 0.0) || !self.rate.is_finite() {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        for (name, p) in [("outlier_rate", self.outlier_rate), ("dropout_rate", self.dropout_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.noise_sigma.values().any(|s| !(*s >= 0.0) || !s.is_finite()) || !(self.outlier_magnitude >= 0.0) {
            return bad("noise and outlier magnitudes must be non-negative".into());
        }
        let pts: Vec<&Vector3<f64>> = self.constellation.values().collect();
        let non_collinear = pts.len() >= 3
            && pts.iter().any(|c| (*pts[1] - *pts[0]).cross(&(**c - *pts[0])).norm() > 1e-9);
        if !non_collinear {
            return Err(Error::Degenerate("constellation is collinear".into()));
        }
        if let Some(m) = self.independent_movers.iter().find(|m| !self.constellation.contains_key(&m.id)) {
            return bad(format!("independent mover {} is not in the constellation", m.id));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    pub fn time(&self, frame: usize) -> f64 {
        frame as f64 / self.rate
    }

    pub fn q_at(&self, t: f64) -> f64 {
        self.profile.q(t, self.duration, self.joint.q_max)
    }

    /// Noise-free position of landmark `id` at time `t`.
    pub fn true_position(&self, id: u8, t: f64) -> Option<Vector3<f64>> {
        let base = if id == 0 { self.wrist_decoy? } else { *self.constellation.get(&id)? };
        let q = self.q_at(t);
        if let Some(m) = self.independent_movers.iter().find(|m| m.id == id) {
            return Some(base + m.velocity * t);
        }
        Some(articulate(&self.joint.axis, q, &base))
    }
}

/// Point carried by the joint to value `q`.
pub fn articulate(joint: &JointAxis, q: f64, point: &Vector3<f64>) -> Vector3<f64> {
    joint.articulate(q, point)
}

/// Ground-truth hand pose of one frame, relative to `q = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub t: f64,
    pub q: f64,
    pub pose: Pose6,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub records: Vec<ObservationRecord>,
    pub joint: GroundTruthJoint,
    pub truth: Vec<TruthFrame>,
}

/// Samples an observation sequence. Each landmark and frame draws, in order:
/// dropout, then noise, then outlier replacement. An outlier is the true
/// position plus an offset uniform in `[-m, m]` per axis, `m` the outlier
/// magnitude. Half of the dropouts omit
/// the landmark; the other half report it with visibility below the
/// tracking threshold and a meaningless position.
pub fn generate(scenario: &Scenario) -> Result<Generated> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let ids: Vec<u8> = scenario.wrist_decoy.map(|_| 0u8).into_iter().chain(scenario.constellation.keys().copied()).collect();

    let n = scenario.frame_count();
    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for k in 0..n {
        let t = scenario.time(k);
        let q = scenario.q_at(t);
        truth.push(TruthFrame { t, q, pose: Pose6::from_transform(&scenario.joint.axis.transform(q)) });
        let mut landmarks = Vec::with_capacity(ids.len());
        for &id in &ids {
            let Some(p) = scenario.true_position(id, t) else { continue };
            let class = LandmarkClass::from_id(id).unwrap_or(LandmarkClass::Wrist);
            let dropped = rng.random::<f64>() < scenario.dropout_rate;
            let omit = rng.random::<bool>();
            let sigma = scenario.noise_sigma.get(&class).copied().unwrap_or(0.0);
            let noise = Vector3::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)) * sigma;
            let outlier = rng.random::<f64>() < scenario.outlier_rate;
            let m = scenario.outlier_magnitude;
            let offset = if m > 0.0 {
                Vector3::new(rng.random_range(-m..m), rng.random_range(-m..m), rng.random_range(-m..m))
            } else {
                Vector3::zeros()
            };
            let garbage = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let vis_high = rng.random_range(0.5..1.0);
            let vis_low = rng.random_range(0.0..0.005);
            if dropped {
                if !omit {
                    landmarks.push(LandmarkObservation { t, id, pos: p + garbage, vis: vis_low });
                }
                continue;
            }
            let pos = if outlier { p + offset } else { p + noise };
            landmarks.push(LandmarkObservation { t, id, pos, vis: vis_high });
        }
        records.push(ObservationRecord { t, landmarks });
    }
    Ok(Generated { records, joint: scenario.joint, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn noiseless(joint: JointType, q_max: f64) -> Scenario {
        Scenario::synthetic(joint, q_max, &ScenarioParams::noiseless(), 3).unwrap()
    }

    #[test]
    fn prismatic_truth_is_rigid() {
        let s = noiseless(JointType::Prismatic, 0.3);
        let d0: Vec<f64> = (1..21u8).flat_map(|a| (a + 1..21).map(move |b| (a, b))).map(|(a, b)| (s.true_position(a, 0.0).unwrap() - s.true_position(b, 0.0).unwrap()).norm()).collect();
        for k in 0..s.frame_count() {
            let t = s.time(k);
            let d: Vec<f64> = (1..21u8).flat_map(|a| (a + 1..21).map(move |b| (a, b))).map(|(a, b)| (s.true_position(a, t).unwrap() - s.true_position(b, t).unwrap()).norm()).collect();
            for (x, y) in d.iter().zip(&d0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn revolute_landmarks_keep_axis_distance() {
        let s = noiseless(JointType::Revolute, FRAC_PI_2);
        let g = generate(&s).unwrap();
        for rec in &g.records {
            for obs in &rec.landmarks {
                let r0 = s.joint.axis.radius_of(&s.true_position(obs.id, 0.0).unwrap());
                assert!((s.joint.axis.radius_of(&obs.pos) - r0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = Scenario::synthetic(JointType::Revolute, FRAC_PI_2, &ScenarioParams::default(), 42).unwrap();
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }

    #[test]
    fn articulate_examples() {
        let axis = JointAxis::Revolute { direction: Vector3::z(), point: Vector3::zeros() };
        let p = Vector3::new(0.3, -0.2, 0.5);
        assert_eq!(articulate(&axis, 0.0, &p), p);
        assert_relative_eq!(articulate(&axis, PI, &Vector3::x()), -Vector3::x(), epsilon = 1e-15);
        let tilted = JointAxis::Revolute { direction: Vector3::new(0.3, 0.4, 0.5).normalize(), point: Vector3::new(0.1, 0.0, -0.3) };
        for joint in [tilted, JointAxis::Prismatic { direction: Vector3::new(0.0, 0.6, 0.8) }] {
            let (a, b) = (0.7, -0.25);
            assert_relative_eq!(articulate(&joint, a + b, &p), articulate(&joint, b, &articulate(&joint, a, &p)), epsilon = 1e-12);
        }
    }

    #[test]
    fn tangent_oracle_matches_articulation() {
        let s = noiseless(JointType::Revolute, FRAC_PI_2);
        let h = 1e-6;
        for q in [0.0, 0.5, 1.5] {
            let g = s.joint.grasp_point;
            let fd = (articulate(&s.joint.axis, q + h, &g) - articulate(&s.joint.axis, q, &g)).normalize();
            let t = crate::metrics::tangent_at(&s.joint.axis, q, &g).unwrap();
            assert!((t - fd).norm() < 1e-5);
        }
    }

    #[test]
    fn per_class_noise_matches_configuration() {
        let params = ScenarioParams { noise: 0.002, outlier_rate: 0.0, dropout_rate: 0.0, duration: 200.0, ..ScenarioParams::default() };
        let s = Scenario::synthetic(JointType::Prismatic, 0.3, &params, 9).unwrap();
        let g = generate(&s).unwrap();
        let mut sums: BTreeMap<LandmarkClass, (f64, usize)> = BTreeMap::new();
        for rec in &g.records {
            for obs in &rec.landmarks {
                let class = LandmarkClass::from_id(obs.id).unwrap();
                let e = obs.pos - s.true_position(obs.id, rec.t).unwrap();
                let entry = sums.entry(class).or_default();
                entry.0 += e.norm_squared();
                entry.1 += 3;
            }
        }
        for (class, (sum, count)) in sums {
            assert!(count >= 10_000, "{class:?}: {count} samples");
            let var = sum / count as f64;
            let expected = s.noise_sigma[&class].powi(2);
            assert!((var / expected - 1.0).abs() < 0.05, "{class:?}: {var} vs {expected}");
        }
    }

    #[test]
    fn dropouts_and_outliers_follow_rates() {
        let params = ScenarioParams { duration: 60.0, ..ScenarioParams::default() };
        let s = Scenario::synthetic(JointType::Revolute, 1.0, &params, 5).unwrap();
        let g = generate(&s).unwrap();
        let expected = s.frame_count() * 21;
        let present: usize = g.records.iter().map(|r| r.landmarks.len()).sum();
        let hidden: usize = g.records.iter().flat_map(|r| &r.landmarks).filter(|o| o.vis < 0.006).count();
        let omitted = expected - present;
        let drop_rate = (omitted + hidden) as f64 / expected as f64;
        assert!((drop_rate - 0.05).abs() < 0.01, "{drop_rate}");
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut s = noiseless(JointType::Prismatic, 0.3);
        s.rate = 0.0;
        assert!(s.validate().is_err());
        let mut s = noiseless(JointType::Prismatic, 0.3);
        s.dropout_rate = 1.5;
        assert!(s.validate().is_err());
        let mut s = noiseless(JointType::Prismatic, 0.3);
        s.constellation = (1..5u8).map(|i| (i, Vector3::new(i as f64, 0.0, 0.0))).collect();
        assert!(matches!(s.validate(), Err(Error::Degenerate(_))));
        assert!(Scenario::synthetic(JointType::Rigid, 1.0, &ScenarioParams::default(), 0).is_err());
    }

    #[test]
    fn movers_drift_away_from_the_hand() {
        let params = ScenarioParams { movers: 2, ..ScenarioParams::noiseless() };
        let s = Scenario::synthetic(JointType::Prismatic, 0.3, &params, 11).unwrap();
        assert_eq!(s.independent_movers.len(), 2);
        let m = s.independent_movers[0];
        let rigid = articulate(&s.joint.axis, s.q_at(2.0), &s.constellation[&m.id]);
        assert!((s.true_position(m.id, 2.0).unwrap() - rigid).norm() > 0.01);
    }
}
