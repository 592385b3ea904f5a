//! Domain types shared by every stage of the audit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::certify::CertifierModel;
use crate::error::{MdfaError, Result};
use crate::metrics::SubgroupProfile;

/// A binary value in {-1, +1}, used for both the sensitive attribute and the outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Neg,
    Pos,
}

impl Sign {
    pub fn from_f64(v: f64) -> Sign {
        if v >= 0.0 {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Pos => 1.0,
            Sign::Neg => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Sign::Pos => 1,
            Sign::Neg => -1,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Pos => Sign::Neg,
            Sign::Neg => Sign::Pos,
        }
    }

    pub fn times(self, other: Sign) -> Sign {
        if self == other {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sign::Pos => write!(f, "+1"),
            Sign::Neg => write!(f, "-1"),
        }
    }
}

impl FromStr for Sign {
    type Err = MdfaError;

    fn from_str(s: &str) -> Result<Sign> {
        match s.trim() {
            "+1" | "1" | "+" | "pos" => Ok(Sign::Pos),
            "-1" | "-" | "neg" => Ok(Sign::Neg),
            other => Err(MdfaError::InvalidArgument(format!(
                "expected +1 or -1, got `{other}`"
            ))),
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Sign, D::Error> {
        let v = i8::deserialize(de)?;
        match v {
            1 => Ok(Sign::Pos),
            -1 => Ok(Sign::Neg),
            other => Err(serde::de::Error::custom(format!(
                "sign must be 1 or -1, got {other}"
            ))),
        }
    }
}

/// One audited individual: features, sensitive attribute and the classifier outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub x: Vec<f64>,
    pub s: Sign,
    pub y: Sign,
}

impl AuditSample {
    pub fn new(x: Vec<f64>, s: Sign, y: Sign) -> Result<AuditSample> {
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(MdfaError::InvalidDataset(format!(
                "feature {i} is not finite ({})",
                x[i]
            )));
        }
        Ok(AuditSample { x, s, y })
    }
}

/// The audited population.
///
/// Construction checks that every sample has the same dimension and that both
/// sensitive values and both outcome values occur at least once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditDataset {
    samples: Vec<AuditSample>,
    feature_names: Vec<String>,
    /// Optional external predictions, aligned with `samples`.
    predictions: Option<Vec<Sign>>,
}

impl AuditDataset {
    pub fn new(samples: Vec<AuditSample>, feature_names: Vec<String>) -> Result<AuditDataset> {
        Self::with_predictions(samples, feature_names, None)
    }

    pub fn with_predictions(
        samples: Vec<AuditSample>,
        feature_names: Vec<String>,
        predictions: Option<Vec<Sign>>,
    ) -> Result<AuditDataset> {
        if samples.is_empty() {
            return Err(MdfaError::InvalidDataset("no samples".into()));
        }
        let dim = feature_names.len();
        for (i, smp) in samples.iter().enumerate() {
            if smp.x.len() != dim {
                return Err(MdfaError::InvalidDataset(format!(
                    "sample {i} has {} features, expected {dim}",
                    smp.x.len()
                )));
            }
            if smp.x.iter().any(|v| !v.is_finite()) {
                return Err(MdfaError::InvalidDataset(format!(
                    "sample {i} has a non-finite feature"
                )));
            }
        }
        if let Some(p) = &predictions {
            if p.len() != samples.len() {
                return Err(MdfaError::InvalidDataset(format!(
                    "{} predictions for {} samples",
                    p.len(),
                    samples.len()
                )));
            }
        }
        let ds = AuditDataset {
            samples,
            feature_names,
            predictions,
        };
        if let Some(missing) = ds.missing_cell() {
            return Err(MdfaError::InvalidDataset(missing));
        }
        Ok(ds)
    }

    /// Names the first absent sensitive or outcome value, if any.
    pub(crate) fn missing_cell(&self) -> Option<String> {
        for (label, sign) in [("S", Sign::Pos), ("S", Sign::Neg)] {
            if !self.samples.iter().any(|s| s.s == sign) {
                return Some(format!("no sample with {label} = {sign}"));
            }
        }
        for (label, sign) in [("Y", Sign::Pos), ("Y", Sign::Neg)] {
            if !self.samples.iter().any(|s| s.y == sign) {
                return Some(format!("no sample with {label} = {sign}"));
            }
        }
        None
    }

    pub fn samples(&self) -> &[AuditSample] {
        &self.samples
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn predictions(&self) -> Option<&[Sign]> {
        self.predictions.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    /// Sub-dataset with the given sample indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<AuditDataset> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let predictions = self
            .predictions
            .as_ref()
            .map(|p| indices.iter().map(|&i| p[i]).collect());
        AuditDataset::with_predictions(samples, self.feature_names.clone(), predictions)
    }

    /// Replace the audited outcome with the external prediction column.
    pub fn predictions_as_outcome(&self) -> Result<AuditDataset> {
        let preds = self.predictions.as_ref().ok_or_else(|| {
            MdfaError::InvalidDataset("dataset has no prediction column".into())
        })?;
        let samples = self
            .samples
            .iter()
            .zip(preds)
            .map(|(s, &p)| AuditSample {
                x: s.x.clone(),
                s: s.s,
                y: p,
            })
            .collect();
        AuditDataset::new(samples, self.feature_names.clone())
    }
}

/// Nonnegative per-sample weights. Estimators only ever use ratios of sums,
/// so the overall scale is irrelevant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(u: Vec<f64>) -> Result<WeightVector> {
        if let Some(i) = u.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MdfaError::InvalidArgument(format!(
                "weight {i} = {} is not a finite nonnegative number",
                u[i]
            )));
        }
        if u.iter().sum::<f64>() <= 0.0 {
            return Err(MdfaError::InvalidArgument("weights sum to zero".into()));
        }
        Ok(WeightVector(u))
    }

    pub fn uniform(n: usize) -> WeightVector {
        WeightVector(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Result<WeightVector> {
        WeightVector::new(self.0.iter().map(|v| v * c).collect())
    }

    /// Element-wise product with a multiplier vector.
    pub fn times(&self, multipliers: &[f64]) -> Result<WeightVector> {
        if multipliers.len() != self.0.len() {
            return Err(MdfaError::DimensionMismatch {
                expected: self.0.len(),
                actual: multipliers.len(),
            });
        }
        WeightVector::new(self.0.iter().zip(multipliers).map(|(a, b)| a * b).collect())
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(MdfaError::DimensionMismatch {
                expected: n,
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Kernel bandwidth: a fixed value or a multiple of the median pairwise distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Median { factor: f64 },
}

impl Bandwidth {
    pub const MEDIAN: Bandwidth = Bandwidth::Median { factor: 1.0 };
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Fixed(v) => write!(f, "{v}"),
            Bandwidth::Median { factor } if *factor == 1.0 => write!(f, "median"),
            Bandwidth::Median { factor } => write!(f, "{factor}xmedian"),
        }
    }
}

impl FromStr for Bandwidth {
    type Err = MdfaError;

    /// Accepts `median`, `<k>xmedian` or a positive number.
    fn from_str(s: &str) -> Result<Bandwidth> {
        let s = s.trim();
        if s == "median" || s == "median-heuristic" {
            return Ok(Bandwidth::MEDIAN);
        }
        if let Some(k) = s.strip_suffix("xmedian") {
            let factor: f64 = k
                .parse()
                .map_err(|_| MdfaError::InvalidArgument(format!("bad bandwidth `{s}`")))?;
            if factor > 0.0 && factor.is_finite() {
                return Ok(Bandwidth::Median { factor });
            }
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Bandwidth::Fixed(v)),
            _ => Err(MdfaError::InvalidArgument(format!(
                "bandwidth must be positive, `median` or `<k>xmedian`, got `{s}`"
            ))),
        }
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Bandwidth, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Surrogate loss used by the certifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Logistic,
    SmoothedHinge,
}

/// One grid point of the cross-validation search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda_reg: f64,
    pub bandwidth: Bandwidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub feature_map_dim: usize,
    pub kernel_bandwidth: Bandwidth,
    pub lambda_reg: f64,
    /// Escalation rate of the worst-violation loop.
    pub xi: f64,
    pub alpha_floor: f64,
    pub tie_band_tau: f64,
    pub max_iterations: usize,
    pub weight_bound_b: f64,
    pub seed: u64,
    pub cv_grid: Vec<GridPoint>,
    pub loss: LossKind,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            feature_map_dim: 256,
            kernel_bandwidth: Bandwidth::MEDIAN,
            lambda_reg: 1e-3,
            xi: 0.05,
            alpha_floor: 0.05,
            tie_band_tau: 0.0,
            max_iterations: 200,
            weight_bound_b: 10.0,
            seed: 0,
            cv_grid: vec![
                GridPoint {
                    lambda_reg: 1e-3,
                    bandwidth: Bandwidth::MEDIAN,
                },
                GridPoint {
                    lambda_reg: 1e-2,
                    bandwidth: Bandwidth::MEDIAN,
                },
                GridPoint {
                    lambda_reg: 1e-3,
                    bandwidth: Bandwidth::Median { factor: 2.0 },
                },
                GridPoint {
                    lambda_reg: 1e-2,
                    bandwidth: Bandwidth::Median { factor: 2.0 },
                },
            ],
            loss: LossKind::Logistic,
        }
    }
}

impl AuditConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(MdfaError::InvalidArgument(msg.to_string()));
        if self.feature_map_dim == 0 {
            return bad("feature_map_dim must be positive");
        }
        if let Bandwidth::Fixed(v) = self.kernel_bandwidth {
            if !(v > 0.0 && v.is_finite()) {
                return bad("kernel_bandwidth must be positive");
            }
        }
        if !(self.lambda_reg > 0.0 && self.lambda_reg.is_finite()) {
            return bad("lambda_reg must be positive");
        }
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return bad("xi must be nonnegative");
        }
        if !(self.alpha_floor > 0.0 && self.alpha_floor < 1.0) {
            return bad("alpha_floor must lie in (0, 1)");
        }
        if !(self.tie_band_tau >= 0.0 && self.tie_band_tau.is_finite()) {
            return bad("tie_band_tau must be nonnegative");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.weight_bound_b > 1.0 && self.weight_bound_b.is_finite()) {
            return bad("weight_bound_B must exceed 1");
        }
        if self.cv_grid.is_empty() {
            return bad("cv_grid must be nonempty");
        }
        for g in &self.cv_grid {
            if !(g.lambda_reg > 0.0 && g.lambda_reg.is_finite()) {
                return bad("cv_grid lambda_reg must be positive");
            }
        }
        Ok(())
    }
}

/// A gamma-unfairness certificate: indicator, target outcome and sensitive value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Certificate {
    pub model: CertifierModel,
    pub target_y: Sign,
    pub target_s: Sign,
    pub gamma_hat: f64,
    /// Weighted fraction of samples with c(x) = 1 and Y = target_y.
    pub support_mass: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    /// Measured on the test split; `None` when a sensitive cell of the support was empty.
    pub delta_hat: Option<f64>,
    /// Mass of `c = 1, Y = target_y` on the training split, the stopping statistic.
    pub alpha_hat: f64,
}

/// Worst-case sub-population found by the escalation loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViolationReport {
    /// Natural-log severity of the reported iterate.
    pub delta_m: f64,
    /// Test-split mass of `c = 1, Y = target_y` for the reported certificate.
    pub alpha: f64,
    pub reported_iteration: usize,
    pub certificate: Certificate,
    pub trace: Vec<TraceRow>,
    pub profile: SubgroupProfile,
    pub dt_g: f64,
    /// Whether the loop stopped because alpha_hat crossed the floor.
    pub crossed_floor: bool,
}
