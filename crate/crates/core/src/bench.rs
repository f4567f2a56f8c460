//! Benchmark harness: scenario grid × estimation methods → tangent errors.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use crate::body::ransac::rigid_alignment;
use crate::config::{PipelineConfig, UncertaintySwitches};
use crate::error::{Error, Result};
use crate::geometry::Pose6;
use crate::io::ObservationRecord;
use crate::joint::{JointModel, JointType};
use crate::landmark::{ingest, Ingest, LandmarkBank};
use crate::metrics::{baseline_rigid_hand, baseline_single_point, tangent_error, GroundTruthJoint, DEFAULT_SAMPLES};
use crate::pipeline::run_sequence;
use crate::simulator::{generate, Scenario, ScenarioParams};

/// Error charged when a method produces no joint axis at all: the largest
/// possible sign-free tangent deviation.
pub const NO_AXIS_ERROR_DEG: f64 = 90.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    /// Saliency scaling and both gating levels disabled.
    NoUncertainty,
    SinglePoint,
    RigidHand,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Full, Method::NoUncertainty, Method::SinglePoint, Method::RigidHand];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Full => "full",
            Method::NoUncertainty => "no_uncertainty",
            Method::SinglePoint => "single_point",
            Method::RigidHand => "rigid_hand",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub joint: JointType,
    pub q_max: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub name: String,
    #[serde(default)]
    pub params: ScenarioParams,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<ScenarioSpec>,
}

impl Suite {
    /// Five prismatic (0.3 m) and five revolute (90°) scenarios with seeds
    /// 1 to 10.
    pub fn grid(name: &str, params: ScenarioParams) -> Self {
        let scenarios = (1..=10u64)
            .map(|seed| {
                if seed <= 5 {
                    ScenarioSpec { joint: JointType::Prismatic, q_max: 0.3, seed }
                } else {
                    ScenarioSpec { joint: JointType::Revolute, q_max: std::f64::consts::FRAC_PI_2, seed }
                }
            })
            .collect();
        Self { name: name.into(), params, scenarios }
    }

    /// 2 mm class-scaled noise, 5% outliers, 5% dropout.
    pub fn default_noisy() -> Self {
        Self::grid("default", ScenarioParams::default())
    }

    pub fn noiseless() -> Self {
        Self::grid("noiseless", ScenarioParams::noiseless())
    }

    /// Built-in suite: `"default"` or `"noiseless"`.
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default_noisy()),
            "noiseless" => Some(Self::noiseless()),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let suite: Suite = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        if suite.scenarios.is_empty() {
            return Err(Error::Config { field: "scenario".into(), reason: "suite has no scenarios".into() });
        }
        Ok(suite)
    }

    pub fn scenario(&self, index: usize) -> Result<Scenario> {
        let spec = &self.scenarios[index];
        Scenario::synthetic(spec.joint, spec.q_max, &self.params, spec.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub scenario: usize,
    pub joint: JointType,
    pub seed: u64,
    pub method: Method,
    pub estimated: Option<JointType>,
    pub tangent_error: Option<f64>,
    /// `ok`, `no_axis`, or the error message of a failed run.
    pub status: String,
}

/// Final joint estimate of the full pipeline, or of its ablation.
pub fn pipeline_estimate(records: &[ObservationRecord], cfg: &PipelineConfig) -> Result<Option<JointModel>> {
    Ok(run_sequence(records, cfg)?.joint_model().copied())
}

/// The landmark track with the most filtered observations (lowest id on
/// ties), with landmark-level gating applied.
pub fn single_point_track(records: &[ObservationRecord], cfg: &PipelineConfig) -> Result<Vec<(f64, Vector3<f64>)>> {
    let mut bank = LandmarkBank::new();
    let mut tracks: BTreeMap<u8, Vec<(f64, Vector3<f64>)>> = BTreeMap::new();
    for r in records {
        for m in bank.step(r.t, &r.landmarks, cfg)?.measurements {
            tracks.entry(m.id).or_default().push((r.t, m.pos));
        }
    }
    let best = tracks.into_iter().fold(None::<(u8, Vec<_>)>, |acc, (id, t)| match acc {
        Some((_, ref b)) if b.len() >= t.len() => acc,
        _ => Some((id, t)),
    });
    best.map(|(_, t)| t).ok_or_else(|| Error::InsufficientData("no landmark track".into()))
}

/// Hand poses relative to the first usable frame, each an unweighted rigid
/// fit of all visible raw landmarks, plus the reference centroid.
pub fn rigid_hand_poses(records: &[ObservationRecord], cfg: &PipelineConfig) -> Result<(Vec<(f64, Pose6)>, Vector3<f64>)> {
    let visible = |r: &ObservationRecord| -> BTreeMap<u8, Vector3<f64>> {
        r.landmarks.iter().filter(|o| matches!(ingest(o, cfg), Ingest::Accepted)).map(|o| (o.id, o.pos)).collect()
    };
    let min = cfg.ransac.min_inliers.max(3);
    let mut reference: Option<BTreeMap<u8, Vector3<f64>>> = None;
    let mut poses = Vec::new();
    for r in records {
        let cur = visible(r);
        let Some(base) = &reference else {
            if cur.len() >= min {
                poses.push((r.t, Pose6::identity()));
                reference = Some(cur);
            }
            continue;
        };
        let common: Vec<u8> = cur.keys().filter(|id| base.contains_key(id)).copied().collect();
        if common.len() < 3 {
            continue;
        }
        let src: Vec<_> = common.iter().map(|id| base[id]).collect();
        let dst: Vec<_> = common.iter().map(|id| cur[id]).collect();
        if let Some(t) = rigid_alignment(&src, &dst, &vec![1.0; common.len()]) {
            poses.push((r.t, Pose6::from_transform(&t)));
        }
    }
    let base = reference.ok_or_else(|| Error::InsufficientData("no frame with enough visible landmarks".into()))?;
    let centroid = base.values().sum::<Vector3<f64>>() / base.len() as f64;
    Ok((poses, centroid))
}

/// Runs one method on one sequence and scores its final estimate.
pub fn evaluate_method(
    records: &[ObservationRecord],
    gt: &GroundTruthJoint,
    method: Method,
    cfg: &PipelineConfig,
) -> Result<(Option<JointType>, f64)> {
    let model = match method {
        Method::Full => pipeline_estimate(records, cfg)?,
        Method::NoUncertainty => {
            let mut ablated = cfg.clone();
            ablated.uncertainty = UncertaintySwitches::all_off();
            pipeline_estimate(records, &ablated)?
        }
        Method::SinglePoint => Some(baseline_single_point(&single_point_track(records, cfg)?, cfg)?),
        Method::RigidHand => {
            let (poses, probe) = rigid_hand_poses(records, cfg)?;
            Some(baseline_rigid_hand(&poses, &probe, cfg)?)
        }
    };
    let estimated = model.map(|m| m.joint_type());
    let error = match model.filter(|m| m.articulation().is_some()) {
        Some(m) => tangent_error(&m, gt, DEFAULT_SAMPLES)?,
        None => NO_AXIS_ERROR_DEG,
    };
    Ok((estimated, error))
}

/// Every scenario of the suite under every method, scenarios in parallel.
/// Rows come out in suite order, methods in [`Method::ALL`] order.
pub fn run_suite(suite: &Suite, cfg: &PipelineConfig) -> Vec<BenchRow> {
    (0..suite.scenarios.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let spec = suite.scenarios[i];
            let generated = suite.scenario(i).and_then(|s| generate(&s));
            Method::ALL.into_iter().map(move |method| {
                let outcome = generated.as_ref().map_err(|e| e.to_string()).and_then(|g| {
                    evaluate_method(&g.records, &g.joint, method, cfg).map_err(|e| e.to_string())
                });
                let (estimated, tangent_error, status) = match outcome {
                    Ok((est, err)) => {
                        let axis = est.is_some_and(|t| matches!(t, JointType::Prismatic | JointType::Revolute));
                        (est, Some(err), if axis { "ok".to_string() } else { "no_axis".to_string() })
                    }
                    Err(e) => (None, None, e),
                };
                BenchRow { scenario: i, joint: spec.joint, seed: spec.seed, method, estimated, tangent_error, status }
            })
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv<W: Write>(mut out: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(out, "scenario,joint,seed,method,estimated,tangent_error_deg,status")?;
    for r in rows {
        let est = r.estimated.map_or(String::new(), |t| t.to_string());
        let err = r.tangent_error.map_or(String::new(), |e| format!("{e:.6}"));
        writeln!(out, "{},{},{},{},{},{},{}", r.scenario, r.joint, r.seed, r.method, est, err, csv_field(&r.status))?;
    }
    out.flush()?;
    Ok(())
}

/// Mean over rows of `method`; failed runs count as [`NO_AXIS_ERROR_DEG`].
pub fn mean_error(rows: &[BenchRow], method: Method) -> Option<f64> {
    let errs: Vec<f64> = rows.iter().filter(|r| r.method == method).map(|r| r.tangent_error.unwrap_or(NO_AXIS_ERROR_DEG)).collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

pub fn max_error(rows: &[BenchRow], method: Method) -> Option<f64> {
    rows.iter().filter(|r| r.method == method).map(|r| r.tangent_error.unwrap_or(NO_AXIS_ERROR_DEG)).reduce(f64::max)
}
