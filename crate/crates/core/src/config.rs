//! Pipeline hyperparameters.
//!
//! Every field has a default; a config file only needs to list overrides.
//! Covariances accept three TOML forms: a scalar `s` (meaning `s·I`), a list of
//! diagonal entries, or a full matrix given as a list of rows.

use nalgebra::{DMatrix, SMatrix};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::landmark::LandmarkClass;

pub type Matrix12 = SMatrix<f64, 12, 12>;
pub type Matrix7 = SMatrix<f64, 7, 7>;

/// Camera rate the process covariances are expressed at.
pub const DEFAULT_DT_REF: f64 = 1.0 / 30.0;

/// Per-class covariance scale factors. The wrist has no score: it is never
/// tracked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Saliency {
    pub thumb: f64,
    pub mcp: f64,
    pub pip: f64,
    pub dip: f64,
    pub tip: f64,
}

impl Default for Saliency {
    fn default() -> Self {
        Self { thumb: 1.5, mcp: 1.5, pip: 1.0, dip: 1.5, tip: 0.5 }
    }
}

impl Saliency {
    pub fn score(&self, class: LandmarkClass) -> Option<f64> {
        match class {
            LandmarkClass::Wrist => None,
            LandmarkClass::Thumb => Some(self.thumb),
            LandmarkClass::Mcp => Some(self.mcp),
            LandmarkClass::Pip => Some(self.pip),
            LandmarkClass::Dip => Some(self.dip),
            LandmarkClass::Tip => Some(self.tip),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Residual (meters) below which a track counts as an inlier.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    /// Frames between the start and end snapshots used for initialization.
    pub init_window: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { iterations: 200, inlier_threshold: 0.01, min_inliers: 6, init_window: 10, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSelectConfig {
    /// Frames in the rolling log-likelihood window.
    pub window: usize,
    /// Revolute estimates whose axis lies farther than this (meters) from the
    /// hand are reported as prismatic.
    pub radius_cap: f64,
    /// Log-likelihood charged per free joint parameter when ranking models.
    pub parameter_penalty: f64,
    /// Below this windowed mean log-likelihood every model is rejected.
    pub disconnected_floor: f64,
}

impl Default for ModelSelectConfig {
    fn default() -> Self {
        Self { window: 30, radius_cap: 5.0, parameter_penalty: 0.01, disconnected_floor: -1.0e3 }
    }
}

/// Switches for the uncertainty models; all on by default. Turning them off
/// gives the ablated estimator used in benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySwitches {
    pub saliency: bool,
    pub landmark_gating: bool,
    pub body_gating: bool,
}

impl Default for UncertaintySwitches {
    fn default() -> Self {
        Self { saliency: true, landmark_gating: true, body_gating: true }
    }
}

impl UncertaintySwitches {
    pub fn all_off() -> Self {
        Self { saliency: false, landmark_gating: false, body_gating: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub p0_lm: nalgebra::Matrix6<f64>,
    pub q_lm: nalgebra::Matrix6<f64>,
    pub r_lm: nalgebra::Matrix3<f64>,
    pub p0_rb: Matrix12,
    pub q_rb: Matrix12,
    pub p0_pris: nalgebra::Matrix4<f64>,
    pub q_pris: nalgebra::Matrix4<f64>,
    pub p0_rev: Matrix7,
    pub q_rev: Matrix7,
    /// Landmark lost once the trace of its location covariance reaches this.
    pub landmark_unc_thresh: f64,
    pub vis_thresh: f64,
    pub maha_lm_thresh: f64,
    pub maha_rb_thresh: f64,
    pub dt_ref: f64,
    pub saliency: Saliency,
    pub ransac: RansacConfig,
    pub model_select: ModelSelectConfig,
    pub uncertainty: UncertaintySwitches,
}

fn blkdiag<const N: usize>(blocks: &[(f64, usize)]) -> SMatrix<f64, N, N> {
    let mut m = SMatrix::<f64, N, N>::zeros();
    let mut i = 0;
    for &(v, n) in blocks {
        for _ in 0..n {
            m[(i, i)] = v;
            i += 1;
        }
    }
    debug_assert_eq!(i, N);
    m
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            p0_lm: blkdiag(&[(0.09, 3), (0.06, 3)]),
            q_lm: blkdiag(&[(0.13, 3), (0.05, 3)]),
            r_lm: blkdiag(&[(0.05, 3)]),
            p0_rb: blkdiag(&[(0.05, 3), (0.2, 3), (0.1, 3), (0.2, 3)]),
            q_rb: blkdiag(&[(0.75, 3), (3.0, 3), (2.4, 3), (4.8, 3)]),
            p0_pris: blkdiag(&[(3.0, 4)]),
            q_pris: blkdiag(&[(2.55, 2), (0.7, 1), (75.0, 1)]),
            p0_rev: blkdiag(&[(1.0, 7)]),
            q_rev: blkdiag(&[(2.55, 2), (0.3, 3), (5.1, 1), (75.0, 1)]),
            landmark_unc_thresh: 0.3,
            vis_thresh: 0.006,
            maha_lm_thresh: 0.19,
            maha_rb_thresh: 0.25,
            dt_ref: DEFAULT_DT_REF,
            saliency: Saliency::default(),
            ransac: RansacConfig::default(),
            model_select: ModelSelectConfig::default(),
            uncertainty: UncertaintySwitches::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum CovarianceSpec {
    Scale(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl CovarianceSpec {
    fn from_matrix<const N: usize>(m: &SMatrix<f64, N, N>) -> Self {
        let off_diagonal = (0..N).any(|i| (0..N).any(|j| i != j && m[(i, j)] != 0.0));
        if off_diagonal {
            Self::Full((0..N).map(|i| (0..N).map(|j| m[(i, j)]).collect()).collect())
        } else {
            Self::Diagonal((0..N).map(|i| m[(i, i)]).collect())
        }
    }

    fn to_matrix<const N: usize>(&self, field: &str) -> Result<SMatrix<f64, N, N>> {
        let bad = |reason: String| Error::Config { field: field.to_string(), reason };
        let m = match self {
            Self::Scale(s) => SMatrix::<f64, N, N>::identity() * *s,
            Self::Diagonal(d) => {
                if d.len() != N {
                    return Err(bad(format!("expected {N} diagonal entries, found {}", d.len())));
                }
                SMatrix::<f64, N, N>::from_diagonal(&nalgebra::SVector::<f64, N>::from_column_slice(d))
            }
            Self::Full(rows) => {
                if rows.len() != N || rows.iter().any(|r| r.len() != N) {
                    return Err(bad(format!("expected a {N}x{N} matrix")));
                }
                SMatrix::<f64, N, N>::from_fn(|i, j| rows[i][j])
            }
        };
        Ok(m)
    }
}

/// On-disk layout; every field optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    p0_lm: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_lm: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_lm: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p0_rb: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_rb: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p0_pris: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_pris: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p0_rev: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_rev: Option<CovarianceSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    landmark_unc_thresh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vis_thresh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    maha_lm_thresh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    maha_rb_thresh: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt_ref: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    saliency: Option<PartialSaliency>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ransac: Option<PartialRansac>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_select: Option<PartialModelSelect>,
    #[serde(skip_serializing_if = "Option::is_none")]
    uncertainty: Option<PartialSwitches>,
}

macro_rules! partial {
    ($name:ident => $full:ty { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Debug, Default, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        struct $name {
            $(#[serde(skip_serializing_if = "Option::is_none")] $field: Option<$ty>,)*
        }

        impl $name {
            fn apply(&self, base: &mut $full) {
                $(if let Some(v) = self.$field { base.$field = v; })*
            }

            fn from_full(full: &$full) -> Self {
                Self { $($field: Some(full.$field),)* }
            }
        }
    };
}

partial!(PartialSaliency => Saliency { thumb: f64, mcp: f64, pip: f64, dip: f64, tip: f64 });
partial!(PartialRansac => RansacConfig {
    iterations: usize, inlier_threshold: f64, min_inliers: usize, init_window: usize, seed: u64
});
partial!(PartialModelSelect => ModelSelectConfig {
    window: usize, radius_cap: f64, parameter_penalty: f64, disconnected_floor: f64
});
partial!(PartialSwitches => UncertaintySwitches { saliency: bool, landmark_gating: bool, body_gating: bool });

fn check_spd<const N: usize>(field: &str, m: &SMatrix<f64, N, N>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config { field: field.into(), reason: "non-finite entry".into() });
    }
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Config { field: field.into(), reason: "not symmetric".into() });
    }
    if DMatrix::from_column_slice(N, N, m.as_slice()).cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(field.into()));
    }
    Ok(())
}

fn check_positive(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Config { field: field.into(), reason: format!("must be positive, got {v}") });
    }
    Ok(())
}

impl PipelineConfig {
    /// Checks the invariants: covariance blocks symmetric positive definite,
    /// thresholds and saliency scores positive.
    pub fn validate(&self) -> Result<()> {
        check_spd("p0_lm", &self.p0_lm)?;
        check_spd("q_lm", &self.q_lm)?;
        check_spd("r_lm", &self.r_lm)?;
        check_spd("p0_rb", &self.p0_rb)?;
        check_spd("q_rb", &self.q_rb)?;
        check_spd("p0_pris", &self.p0_pris)?;
        check_spd("q_pris", &self.q_pris)?;
        check_spd("p0_rev", &self.p0_rev)?;
        check_spd("q_rev", &self.q_rev)?;
        check_positive("landmark_unc_thresh", self.landmark_unc_thresh)?;
        check_positive("vis_thresh", self.vis_thresh)?;
        check_positive("maha_lm_thresh", self.maha_lm_thresh)?;
        check_positive("maha_rb_thresh", self.maha_rb_thresh)?;
        check_positive("dt_ref", self.dt_ref)?;
        let s = &self.saliency;
        for (name, v) in [("saliency.thumb", s.thumb), ("saliency.mcp", s.mcp), ("saliency.pip", s.pip), ("saliency.dip", s.dip), ("saliency.tip", s.tip)] {
            check_positive(name, v)?;
        }
        check_positive("ransac.inlier_threshold", self.ransac.inlier_threshold)?;
        if self.ransac.iterations == 0 {
            return Err(Error::Config { field: "ransac.iterations".into(), reason: "must be positive".into() });
        }
        if self.ransac.min_inliers < 3 {
            return Err(Error::Config { field: "ransac.min_inliers".into(), reason: "must be at least 3".into() });
        }
        if self.ransac.init_window == 0 {
            return Err(Error::Config { field: "ransac.init_window".into(), reason: "must be positive".into() });
        }
        if self.model_select.window == 0 {
            return Err(Error::Config { field: "model_select.window".into(), reason: "must be positive".into() });
        }
        check_positive("model_select.radius_cap", self.model_select.radius_cap)?;
        if !(self.model_select.parameter_penalty.is_finite() && self.model_select.parameter_penalty >= 0.0) {
            return Err(Error::Config {
                field: "model_select.parameter_penalty".into(),
                reason: "must be non-negative".into(),
            });
        }
        if !self.model_select.disconnected_floor.is_finite() {
            return Err(Error::Config { field: "model_select.disconnected_floor".into(), reason: "must be finite".into() });
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let mut cfg = Self::default();
        macro_rules! cov {
            ($($f:ident),*) => {$(
                if let Some(spec) = &file.$f { cfg.$f = spec.to_matrix(stringify!($f))?; }
            )*};
        }
        cov!(p0_lm, q_lm, r_lm, p0_rb, q_rb, p0_pris, q_pris, p0_rev, q_rev);
        macro_rules! scalar {
            ($($f:ident),*) => {$( if let Some(v) = file.$f { cfg.$f = v; } )*};
        }
        scalar!(landmark_unc_thresh, vis_thresh, maha_lm_thresh, maha_rb_thresh, dt_ref);
        if let Some(p) = &file.saliency {
            p.apply(&mut cfg.saliency);
        }
        if let Some(p) = &file.ransac {
            p.apply(&mut cfg.ransac);
        }
        if let Some(p) = &file.model_select {
            p.apply(&mut cfg.model_select);
        }
        if let Some(p) = &file.uncertainty {
            p.apply(&mut cfg.uncertainty);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes every field explicitly.
    pub fn to_toml_string(&self) -> String {
        let file = ConfigFile {
            p0_lm: Some(CovarianceSpec::from_matrix(&self.p0_lm)),
            q_lm: Some(CovarianceSpec::from_matrix(&self.q_lm)),
            r_lm: Some(CovarianceSpec::from_matrix(&self.r_lm)),
            p0_rb: Some(CovarianceSpec::from_matrix(&self.p0_rb)),
            q_rb: Some(CovarianceSpec::from_matrix(&self.q_rb)),
            p0_pris: Some(CovarianceSpec::from_matrix(&self.p0_pris)),
            q_pris: Some(CovarianceSpec::from_matrix(&self.q_pris)),
            p0_rev: Some(CovarianceSpec::from_matrix(&self.p0_rev)),
            q_rev: Some(CovarianceSpec::from_matrix(&self.q_rev)),
            landmark_unc_thresh: Some(self.landmark_unc_thresh),
            vis_thresh: Some(self.vis_thresh),
            maha_lm_thresh: Some(self.maha_lm_thresh),
            maha_rb_thresh: Some(self.maha_rb_thresh),
            dt_ref: Some(self.dt_ref),
            saliency: Some(PartialSaliency::from_full(&self.saliency)),
            ransac: Some(PartialRansac::from_full(&self.ransac)),
            model_select: Some(PartialModelSelect::from_full(&self.model_select)),
            uncertainty: Some(PartialSwitches::from_full(&self.uncertainty)),
        };
        toml::to_string(&file).expect("config serializes")
    }

    /// Process covariance scale for a step of `dt` seconds.
    pub fn time_scale(&self, dt: f64) -> f64 {
        dt / self.dt_ref
    }

    /// Saliency factor applied to a landmark class, honoring the ablation switch.
    pub fn saliency_factor(&self, class: LandmarkClass) -> Option<f64> {
        let s = self.saliency.score(class)?;
        Some(if self.uncertainty.saliency { s } else { 1.0 })
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)?;
    PipelineConfig::from_toml_str(&text)
}
