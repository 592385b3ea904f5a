//! CSV ingestion and export, seeded train/test splits, and the synthetic
//! generator with a planted violation of known severity.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MdfaError, Result};
use crate::types::{AuditDataset, AuditSample, Sign};

/// How raw cell values map to a sign.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryColumn {
    pub name: String,
    pub positive: Vec<String>,
    /// `None` maps every non-positive value to -1.
    pub negative: Option<Vec<String>>,
}

impl BinaryColumn {
    pub fn new(name: &str, positive: &[&str], negative: Option<&[&str]>) -> BinaryColumn {
        BinaryColumn {
            name: name.to_string(),
            positive: positive.iter().map(|s| s.to_string()).collect(),
            negative: negative.map(|n| n.iter().map(|s| s.to_string()).collect()),
        }
    }

    fn map(&self, raw: &str, row: usize) -> Result<Sign> {
        if self.positive.iter().any(|p| same_value(p, raw)) {
            return Ok(Sign::Pos);
        }
        match &self.negative {
            None => Ok(Sign::Neg),
            Some(neg) if neg.iter().any(|p| same_value(p, raw)) => Ok(Sign::Neg),
            Some(_) => Err(MdfaError::UnmappedValue {
                row,
                column: self.name.clone(),
                value: raw.to_string(),
            }),
        }
    }
}

/// Values compare numerically when both parse as numbers, otherwise as trimmed strings.
fn same_value(rule: &str, raw: &str) -> bool {
    let (a, b) = (rule.trim(), raw.trim());
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Which columns hold the features, the sensitive attribute, the audited
/// outcome and, optionally, an external prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub sensitive: BinaryColumn,
    pub outcome: BinaryColumn,
    pub prediction: Option<BinaryColumn>,
}

impl CsvSchema {
    pub fn new(
        feature_columns: Vec<String>,
        sensitive: BinaryColumn,
        outcome: BinaryColumn,
        prediction: Option<BinaryColumn>,
    ) -> Result<CsvSchema> {
        let schema = CsvSchema {
            feature_columns,
            sensitive,
            outcome,
            prediction,
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(MdfaError::Schema("no feature columns".into()));
        }
        let mut names: Vec<&str> = self.feature_columns.iter().map(String::as_str).collect();
        names.push(&self.sensitive.name);
        names.push(&self.outcome.name);
        if let Some(p) = &self.prediction {
            names.push(&p.name);
        }
        let mut sorted = names.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(MdfaError::Schema(format!("column `{}` is used twice", w[0])));
        }
        for col in [Some(&self.sensitive), Some(&self.outcome), self.prediction.as_ref()]
            .into_iter()
            .flatten()
        {
            if col.positive.is_empty() {
                return Err(MdfaError::Schema(format!(
                    "column `{}` has no positive values",
                    col.name
                )));
            }
        }
        Ok(())
    }

    /// Parses the `key=value` config format. Lines starting with `#` are ignored.
    ///
    /// ```text
    /// features=priors_count,age
    /// sensitive=race
    /// sensitive_positive=African-American
    /// sensitive_negative=*
    /// outcome=high_risk
    /// outcome_positive=1
    /// ```
    pub fn parse(text: &str) -> Result<CsvSchema> {
        let mut features = None;
        let mut cols: [(Option<String>, Option<Vec<String>>, Option<Option<Vec<String>>>); 3] =
            Default::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MdfaError::Schema(format!("line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let list = || -> Vec<String> {
                value
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .collect()
            };
            let slot = |prefix: &str| match prefix {
                "sensitive" => Some(0),
                "outcome" => Some(1),
                "prediction" => Some(2),
                _ => None,
            };
            if key == "features" {
                features = Some(list());
                continue;
            }
            let (prefix, field) = key.split_once('_').unwrap_or((key, ""));
            let idx = slot(prefix)
                .ok_or_else(|| MdfaError::Schema(format!("unknown key `{key}`")))?;
            match field {
                "" => cols[idx].0 = Some(value.to_string()),
                "positive" => cols[idx].1 = Some(list()),
                "negative" if value == "*" => cols[idx].2 = Some(None),
                "negative" => cols[idx].2 = Some(Some(list())),
                _ => return Err(MdfaError::Schema(format!("unknown key `{key}`"))),
            }
        }
        let features = features.ok_or_else(|| MdfaError::Schema("missing `features`".into()))?;
        let mut built: Vec<Option<BinaryColumn>> = Vec::new();
        for (i, (name, pos, neg)) in cols.into_iter().enumerate() {
            let label = ["sensitive", "outcome", "prediction"][i];
            match name {
                Some(name) => built.push(Some(BinaryColumn {
                    name,
                    positive: pos.unwrap_or_else(|| vec!["1".to_string()]),
                    negative: neg.unwrap_or(None),
                })),
                None if i == 2 => built.push(None),
                None => return Err(MdfaError::Schema(format!("missing `{label}`"))),
            }
        }
        let prediction = built.pop().flatten();
        let outcome = built.pop().flatten().expect("outcome column present");
        let sensitive = built.pop().flatten().expect("sensitive column present");
        CsvSchema::new(features, sensitive, outcome, prediction)
    }

    pub fn from_file(path: &Path) -> Result<CsvSchema> {
        CsvSchema::parse(&fs::read_to_string(path)?)
    }

    /// Schema matching the layout written by [`write_csv`].
    pub fn for_export(dataset: &AuditDataset) -> CsvSchema {
        let bin = |name: &str| BinaryColumn::new(name, &["1"], Some(&["-1"]));
        CsvSchema {
            feature_columns: dataset.feature_names().to_vec(),
            sensitive: bin(EXPORT_SENSITIVE),
            outcome: bin(EXPORT_OUTCOME),
            prediction: dataset.predictions().map(|_| bin(EXPORT_PREDICTION)),
        }
    }

    /// Inverse of [`CsvSchema::parse`].
    pub fn to_config(&self) -> String {
        let mut out = format!("features={}\n", self.feature_columns.join(","));
        let cols = [
            ("sensitive", Some(&self.sensitive)),
            ("outcome", Some(&self.outcome)),
            ("prediction", self.prediction.as_ref()),
        ];
        for (key, col) in cols {
            if let Some(col) = col {
                out.push_str(&format!("{key}={}\n", col.name));
                out.push_str(&format!("{key}_positive={}\n", col.positive.join(",")));
                let neg = col.negative.as_ref().map_or("*".to_string(), |n| n.join(","));
                out.push_str(&format!("{key}_negative={neg}\n"));
            }
        }
        out
    }
}

const EXPORT_SENSITIVE: &str = "sensitive";
const EXPORT_OUTCOME: &str = "outcome";
const EXPORT_PREDICTION: &str = "prediction";

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<AuditDataset> {
    load_csv_from(fs::File::open(path)?, schema)
}

/// Same as [`load_csv`] for any reader. Row numbers in errors count data rows from 1.
pub fn load_csv_from<R: Read>(reader: R, schema: &CsvSchema) -> Result<AuditDataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MdfaError::MissingColumn(name.to_string()))
    };
    let feat_idx = schema
        .feature_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let s_idx = find(&schema.sensitive.name)?;
    let y_idx = find(&schema.outcome.name)?;
    let p_idx = schema.prediction.as_ref().map(|p| find(&p.name)).transpose()?;

    let mut samples = Vec::new();
    let mut predictions = p_idx.map(|_| Vec::new());
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let mut x = Vec::with_capacity(feat_idx.len());
        for (&j, name) in feat_idx.iter().zip(&schema.feature_columns) {
            let raw = &record[j];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => x.push(v),
                _ => {
                    return Err(MdfaError::NonNumeric {
                        row,
                        column: name.clone(),
                        value: raw.to_string(),
                    })
                }
            }
        }
        let s = schema.sensitive.map(&record[s_idx], row)?;
        let y = schema.outcome.map(&record[y_idx], row)?;
        if let (Some(j), Some(col), Some(preds)) =
            (p_idx, schema.prediction.as_ref(), predictions.as_mut())
        {
            preds.push(col.map(&record[j], row)?);
        }
        samples.push(AuditSample { x, s, y });
    }
    AuditDataset::with_predictions(samples, schema.feature_columns.clone(), predictions)
}

/// Writes features, then `sensitive`, `outcome` and (if present) `prediction`
/// as +1/-1. Floats use the shortest representation that parses back exactly.
pub fn write_csv<W: Write>(dataset: &AuditDataset, writer: W) -> Result<()> {
    let schema = CsvSchema::for_export(dataset);
    schema.validate()?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = dataset.feature_names().iter().map(String::as_str).collect();
    header.extend([EXPORT_SENSITIVE, EXPORT_OUTCOME]);
    if dataset.predictions().is_some() {
        header.push(EXPORT_PREDICTION);
    }
    w.write_record(&header)?;
    for (i, smp) in dataset.samples().iter().enumerate() {
        let mut rec: Vec<String> = smp.x.iter().map(|v| v.to_string()).collect();
        rec.push(smp.s.as_i8().to_string());
        rec.push(smp.y.as_i8().to_string());
        if let Some(p) = dataset.predictions() {
            rec.push(p[i].as_i8().to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &AuditDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(dataset, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Seeded permutation split of `0..n`; each side is returned sorted.
pub(crate) fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(MdfaError::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * n as f64 + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx.split_off(n_train);
    idx.sort_unstable();
    test.sort_unstable();
    Ok((idx, test))
}

/// Seeded split with `floor(train_fraction * n)` training samples.
pub fn split(dataset: &AuditDataset, train_fraction: f64, seed: u64) -> Result<(AuditDataset, AuditDataset)> {
    let (tr, te) = split_indices(dataset.len(), train_fraction, seed)?;
    let side = |idx: &[usize], name: &str| {
        if idx.is_empty() {
            return Err(MdfaError::DegenerateSplit(format!("{name} side is empty")));
        }
        dataset.subset(idx).map_err(|e| match e {
            MdfaError::InvalidDataset(msg) => MdfaError::DegenerateSplit(format!("{name} side: {msg}")),
            other => other,
        })
    };
    Ok((side(&tr, "train")?, side(&te, "test")?))
}

/// Knobs of the two-feature synthetic population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub m: usize,
    /// Imbalance factor; 0 makes S independent of the features.
    pub mu: f64,
    /// Fraction of S = -1 individuals left untreated inside the violating region.
    pub nu: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(m: usize, mu: f64, nu: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            m,
            mu,
            nu,
            noise_std: 0.2,
            seed,
        }
    }

    /// Spec whose planted violation has log-severity `delta`.
    pub fn with_delta(m: usize, mu: f64, delta: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec::new(m, mu, 1.0 - (-delta).exp(), seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 100 {
            return Err(MdfaError::InvalidArgument(format!("m must be >= 100, got {}", self.m)));
        }
        if !(self.nu >= 0.0 && self.nu < 1.0) {
            return Err(MdfaError::InvalidArgument(format!(
                "nu must lie in [0, 1), got {} (nu = 1 gives an infinite delta)",
                self.nu
            )));
        }
        if !self.mu.is_finite() {
            return Err(MdfaError::InvalidArgument("mu must be finite".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(MdfaError::InvalidArgument("noise_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Pr[S = +1 | x] of the synthetic population.
pub fn synthetic_propensity(mu: f64, x: &[f64]) -> f64 {
    sigmoid(mu * (x[0] + x[1]).powi(2))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Linear classifier `sign(w . x + b)` with ties mapped to +1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl LinearClassifier {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.intercept
    }

    pub fn predict(&self, x: &[f64]) -> Sign {
        Sign::from_f64(self.score(x))
    }

    /// Unregularized logistic regression, full-batch gradient descent on the mean loss.
    pub fn fit_logistic(xs: &[Vec<f64>], labels: &[Sign], iterations: usize, step: f64) -> LinearClassifier {
        let d = xs.first().map_or(0, Vec::len);
        let n = xs.len() as f64;
        let mut coef = vec![0.0; d];
        let mut intercept = 0.0;
        let mut grad = vec![0.0; d];
        for _ in 0..iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut grad_b = 0.0;
            for (x, l) in xs.iter().zip(labels) {
                let y = l.value();
                let z: f64 = coef.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + intercept;
                // d/dz log(1 + e^{-yz}) = -y * sigmoid(-yz)
                let g = -y * sigmoid(-y * z) / n;
                for (gj, xj) in grad.iter_mut().zip(x) {
                    *gj += g * xj;
                }
                grad_b += g;
            }
            for (c, g) in coef.iter_mut().zip(&grad) {
                *c -= step * g;
            }
            intercept -= step * grad_b;
        }
        LinearClassifier { coef, intercept }
    }
}

/// Membership test for the planted violating region: the unit disk intersected
/// with the pre-alteration negative side of the base classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolatingRegion {
    pub classifier: LinearClassifier,
}

impl ViolatingRegion {
    pub fn contains(&self, x: &[f64]) -> bool {
        x[0] * x[0] + x[1] * x[1] <= 1.0 && self.classifier.predict(x) == Sign::Neg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// ln(1 / (1 - nu))
    pub delta_m: f64,
    pub target_y: Sign,
    pub target_s: Sign,
    pub region: ViolatingRegion,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: AuditDataset,
    pub ground_truth: GroundTruth,
    /// Region membership of every generated sample.
    pub in_region: Vec<bool>,
    /// Base classifier output before the violation was planted.
    pub pre_outcome: Vec<Sign>,
}

/// Draws the synthetic population.
///
/// Per sample, in order: x1, x2, the label noise, the uniform deciding S and
/// the uniform deciding whether an S = -1 outcome in the region is flipped.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std)
        .map_err(|e| MdfaError::InvalidArgument(e.to_string()))?;
    let mut xs = Vec::with_capacity(spec.m);
    let mut ss = Vec::with_capacity(spec.m);
    let mut base = Vec::with_capacity(spec.m);
    let mut flips = Vec::with_capacity(spec.m);
    for _ in 0..spec.m {
        let x1: f64 = StandardNormal.sample(&mut rng);
        let x2: f64 = StandardNormal.sample(&mut rng);
        let e = noise.sample(&mut rng);
        let u_s: f64 = rng.random();
        let u_flip: f64 = rng.random();
        let x = vec![x1, x2];
        ss.push(if u_s < synthetic_propensity(spec.mu, &x) {
            Sign::Pos
        } else {
            Sign::Neg
        });
        // sign((x1 + x2 + e)^3) == sign(x1 + x2 + e)
        base.push(Sign::from_f64(x1 + x2 + e));
        flips.push(u_flip < 1.0 - spec.nu);
        xs.push(x);
    }
    let classifier = LinearClassifier::fit_logistic(&xs, &base, 500, 0.1);
    let region = ViolatingRegion { classifier };
    let mut samples = Vec::with_capacity(spec.m);
    let mut in_region = Vec::with_capacity(spec.m);
    let mut pre_outcome = Vec::with_capacity(spec.m);
    for ((x, s), flip) in xs.into_iter().zip(ss).zip(flips) {
        let pre = region.classifier.predict(&x);
        let inside = region.contains(&x);
        let y = match (inside, s) {
            (false, _) => pre,
            (true, Sign::Pos) => Sign::Pos,
            (true, Sign::Neg) if flip => Sign::Pos,
            (true, Sign::Neg) => Sign::Neg,
        };
        pre_outcome.push(pre);
        in_region.push(inside);
        samples.push(AuditSample { x, s, y });
    }
    let dataset = AuditDataset::new(samples, vec!["x1".into(), "x2".into()])?;
    Ok(SyntheticData {
        dataset,
        ground_truth: GroundTruth {
            delta_m: -(1.0 - spec.nu).ln(),
            target_y: Sign::Pos,
            target_s: Sign::Pos,
            region,
        },
        in_region,
        pre_outcome,
    })
}

/// Probability of the violating region under `p(x | S = -1)` of the synthetic
/// population, by midpoint quadrature in polar coordinates.
pub fn region_mass_given_negative(mu: f64, region: &ViolatingRegion) -> f64 {
    let std_pdf = |x1: f64, x2: f64| (-(x1 * x1 + x2 * x2) / 2.0).exp() / (2.0 * std::f64::consts::PI);
    let neg = |x1: f64, x2: f64| sigmoid(-mu * (x1 + x2).powi(2));
    let (nr, nt) = (400usize, 800usize);
    let (dr, dt) = (1.0 / nr as f64, 2.0 * std::f64::consts::PI / nt as f64);
    let mut num = 0.0;
    for i in 0..nr {
        let r = (i as f64 + 0.5) * dr;
        for j in 0..nt {
            let t = (j as f64 + 0.5) * dt;
            let (x1, x2) = (r * t.cos(), r * t.sin());
            if region.classifier.predict(&[x1, x2]) == Sign::Neg {
                num += std_pdf(x1, x2) * neg(x1, x2) * r * dr * dt;
            }
        }
    }
    // (x1 + x2)^2 = 2 u^2 with u ~ N(0, 1) along the diagonal
    let nu_pts = 20_000usize;
    let du = 20.0 / nu_pts as f64;
    let den: f64 = (0..nu_pts)
        .map(|k| {
            let u = -10.0 + (k as f64 + 0.5) * du;
            (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() * sigmoid(-2.0 * mu * u * u) * du
        })
        .sum();
    num / den
}
