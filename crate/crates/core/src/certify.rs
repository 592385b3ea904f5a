//! Certificate search by reduction to weighted classification: a scorer over
//! the feature map is trained to predict where the sensitive attribute and
//! the outcome agree, and its positive region is the certificate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::sigmoid;
use crate::error::{MdfaError, Result};
use crate::kernels::{dot, resolve_bandwidth, FeatureMap, FeatureMatrix};
use crate::optim;
use crate::rebalance::{softplus, WeightScheme};
use crate::types::{AuditConfig, AuditDataset, Certificate, LossKind, Sign, WeightVector};

/// `l_i = sign(target_y) * s_i * y_i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReductionLabels(Vec<Sign>);

impl ReductionLabels {
    pub fn as_slice(&self) -> &[Sign] {
        &self.0
    }

    /// Flips every label, which retargets the certificate to the other sensitive value.
    pub fn oriented(&self, target_s: Sign) -> ReductionLabels {
        ReductionLabels(self.0.iter().map(|l| l.times(target_s)).collect())
    }
}

pub fn reduction_labels(dataset: &AuditDataset, target_y: Sign) -> ReductionLabels {
    ReductionLabels(
        dataset
            .samples()
            .iter()
            .map(|s| target_y.times(s.s).times(s.y))
            .collect(),
    )
}

/// Labels whose positive class is `{S = target_s}` within `{Y = target_y}`.
pub(crate) fn certificate_labels(dataset: &AuditDataset, target_y: Sign, target_s: Sign) -> ReductionLabels {
    reduction_labels(dataset, target_y).oriented(target_s)
}

/// Weighted base rate `P[l = +1]` of the oriented labels.
pub fn label_base_rate(dataset: &AuditDataset, weights: &WeightVector, target_y: Sign, target_s: Sign) -> f64 {
    let labels = certificate_labels(dataset, target_y, target_s);
    let w = weights.as_slice();
    let hit: f64 = labels.0.iter().zip(w).filter(|(l, _)| **l == Sign::Pos).map(|(_, u)| u).sum();
    hit / weights.total()
}

/// Hyper-parameters of the certifier fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifierSettings {
    pub loss: LossKind,
    pub lambda_reg: f64,
    pub tie_band_tau: f64,
    /// Seeds the randomized indicator inside the tie band.
    pub seed: u64,
}

impl CertifierSettings {
    pub fn from_config(config: &AuditConfig) -> CertifierSettings {
        CertifierSettings {
            loss: config.loss,
            lambda_reg: config.lambda_reg,
            tie_band_tau: config.tie_band_tau,
            seed: config.seed,
        }
    }
}

/// Linear scorer `h(x) = <beta, phi(x)> + b` with the indicator
/// `c(x) = sign(h)` outside the tie band `|h| <= tau/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifierModel {
    pub map: FeatureMap,
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub settings: CertifierSettings,
}

impl CertifierModel {
    pub fn scores(&self, features: &FeatureMatrix) -> Vec<f64> {
        let mut h = vec![0.0; features.rows()];
        features.mul_vec(&self.coef, &mut h);
        h.iter_mut().for_each(|v| *v += self.intercept);
        h
    }

    /// `c(x_i) = +1` flags. Inside the tie band, +1 is drawn with probability
    /// `(h + tau/2) / tau` from a generator seeded by the settings.
    pub fn indicators(&self, features: &FeatureMatrix) -> Vec<bool> {
        let tau = self.settings.tie_band_tau;
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed);
        self.scores(features)
            .into_iter()
            .map(|h| {
                if tau == 0.0 {
                    return h >= 0.0;
                }
                // one draw per sample keeps the stream aligned with sample order
                let u: f64 = rng.random();
                if h.abs() > tau / 2.0 {
                    h > 0.0
                } else {
                    u < (h + tau / 2.0) / tau
                }
            })
            .collect()
    }

    pub fn indicators_for(&self, dataset: &AuditDataset) -> Result<Vec<bool>> {
        Ok(self.indicators(&self.map.transform(dataset)?))
    }
}

fn loss_and_slope(kind: LossKind, z: f64) -> (f64, f64) {
    match kind {
        LossKind::Logistic => (softplus(-z), -sigmoid(-z)),
        LossKind::SmoothedHinge => {
            if z >= 1.0 {
                (0.0, 0.0)
            } else if z > 0.0 {
                (0.5 * (1.0 - z).powi(2), z - 1.0)
            } else {
                (0.5 - z, -1.0)
            }
        }
    }
}

pub(crate) fn surrogate_loss(kind: LossKind, z: f64) -> f64 {
    loss_and_slope(kind, z).0
}

/// Outcome of a certifier fit, including the objective after every accepted step.
#[derive(Clone, Debug)]
pub struct FitSummary {
    pub model: CertifierModel,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

/// Minimizes `(1/W) sum_i u_i m_i loss(l_i h(x_i)) + lambda ||beta||^2`, where
/// `W = sum_i u_i` and `m` are the optional multipliers.
pub fn fit_certifier(
    dataset: &AuditDataset,
    weights: &WeightVector,
    labels: &ReductionLabels,
    map: &FeatureMap,
    settings: CertifierSettings,
    multipliers: Option<&[f64]>,
) -> Result<CertifierModel> {
    let phi = map.transform(dataset)?;
    Ok(fit_on_features(&phi, weights, labels, map, settings, multipliers, None)?.model)
}

pub(crate) fn fit_on_features(
    features: &FeatureMatrix,
    weights: &WeightVector,
    labels: &ReductionLabels,
    map: &FeatureMap,
    settings: CertifierSettings,
    multipliers: Option<&[f64]>,
    warm_start: Option<&CertifierModel>,
) -> Result<FitSummary> {
    let n = features.rows();
    weights.check_len(n)?;
    if labels.0.len() != n {
        return Err(MdfaError::DimensionMismatch { expected: n, actual: labels.0.len() });
    }
    if let Some(m) = multipliers {
        if m.len() != n {
            return Err(MdfaError::DimensionMismatch { expected: n, actual: m.len() });
        }
        if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MdfaError::InvalidArgument("multipliers must be finite and nonnegative".into()));
        }
    }
    if !(settings.lambda_reg > 0.0 && settings.lambda_reg.is_finite()) {
        return Err(MdfaError::InvalidArgument("lambda_reg must be positive".into()));
    }
    let d = features.cols();
    let total = weights.total();
    let coeff: Vec<f64> = (0..n)
        .map(|i| weights.as_slice()[i] * multipliers.map_or(1.0, |m| m[i]) / total)
        .collect();
    let ell: Vec<f64> = labels.0.iter().map(|l| l.value()).collect();
    let lambda = settings.lambda_reg;
    let mut h = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut gb = vec![0.0; d];
    let objective = |theta: &[f64], grad: &mut [f64]| {
        let (beta, b) = theta.split_at(d);
        features.mul_vec(beta, &mut h);
        let mut loss = 0.0;
        let mut grad_b = 0.0;
        for i in 0..n {
            if coeff[i] == 0.0 {
                r[i] = 0.0;
                continue;
            }
            let (l, slope) = loss_and_slope(settings.loss, ell[i] * (h[i] + b[0]));
            loss += coeff[i] * l;
            r[i] = coeff[i] * slope * ell[i];
            grad_b += r[i];
        }
        features.tmul_vec(&r, &mut gb);
        for j in 0..d {
            grad[j] = gb[j] + 2.0 * lambda * beta[j];
        }
        grad[d] = grad_b;
        loss + lambda * dot(beta, beta)
    };
    let x0 = match warm_start {
        Some(m) if m.coef.len() == d => {
            let mut x = m.coef.clone();
            x.push(m.intercept);
            x
        }
        _ => vec![0.0; d + 1],
    };
    let fit = optim::minimize(objective, x0, 1e-6, 5000)?;
    let (coef, b) = fit.x.split_at(d);
    Ok(FitSummary {
        model: CertifierModel {
            map: map.clone(),
            coef: coef.to_vec(),
            intercept: b[0],
            settings,
        },
        iterations: fit.iterations,
        converged: fit.converged,
        objective_trace: fit.trace,
    })
}

/// Weighted masses inside `{c = 1, Y = target_y}`: (S = target_s, S != target_s, total weight).
pub(crate) fn support_cells(
    dataset: &AuditDataset,
    weights: &[f64],
    indicators: &[bool],
    target_y: Sign,
    target_s: Sign,
) -> (f64, f64, f64) {
    let (mut a_s, mut a_other, mut total) = (0.0, 0.0, 0.0);
    for ((smp, &w), &c) in dataset.samples().iter().zip(weights).zip(indicators) {
        total += w;
        if c && smp.y == target_y {
            if smp.s == target_s {
                a_s += w;
            } else {
                a_other += w;
            }
        }
    }
    (a_s, a_other, total)
}

/// `(gamma, support_mass)` of the indicator set, from weighted frequencies.
pub fn gamma_of_indicators(
    dataset: &AuditDataset,
    weights: &WeightVector,
    indicators: &[bool],
    target_y: Sign,
    target_s: Sign,
) -> Result<(f64, f64)> {
    weights.check_len(dataset.len())?;
    let (a_s, a_o, total) = support_cells(dataset, weights.as_slice(), indicators, target_y, target_s);
    let mass = a_s + a_o;
    if mass <= 0.0 {
        return Err(MdfaError::EmptyCertificateSupport { target_y: target_y.as_i8() });
    }
    // P[c=1, Y=y] * (P[S=s | c=1, Y=y] - 1/2)
    Ok(((a_s - 0.5 * mass) / total, mass / total))
}

/// Log ratio of the two sensitive cells of the support, from weighted frequencies.
pub fn delta_of_indicators(
    dataset: &AuditDataset,
    weights: &WeightVector,
    indicators: &[bool],
    target_y: Sign,
    target_s: Sign,
) -> Result<f64> {
    weights.check_len(dataset.len())?;
    let (a_s, a_o, _) = support_cells(dataset, weights.as_slice(), indicators, target_y, target_s);
    let empty = |s: Sign| MdfaError::UnboundedDivergenceInSample {
        cell: format!("c = 1, Y = {target_y}, S = {s}"),
    };
    if a_s <= 0.0 {
        return Err(empty(target_s));
    }
    if a_o <= 0.0 {
        return Err(empty(target_s.flip()));
    }
    Ok((a_s / a_o).ln())
}

pub fn estimate_gamma(
    dataset: &AuditDataset,
    weights: &WeightVector,
    model: &CertifierModel,
    target_y: Sign,
    target_s: Sign,
) -> Result<f64> {
    let c = model.indicators_for(dataset)?;
    Ok(gamma_of_indicators(dataset, weights, &c, target_y, target_s)?.0)
}

/// Log of the weighted count ratio of `S = target_s` to `S != target_s` inside the support.
pub fn estimate_delta(
    dataset: &AuditDataset,
    weights: &WeightVector,
    model: &CertifierModel,
    target_y: Sign,
    target_s: Sign,
) -> Result<f64> {
    let c = model.indicators_for(dataset)?;
    delta_of_indicators(dataset, weights, &c, target_y, target_s)
}

/// Feature map, mapped splits and scheme weights shared by one audit run.
pub(crate) struct Prepared {
    pub map: FeatureMap,
    pub phi_train: FeatureMatrix,
    pub phi_test: FeatureMatrix,
    pub w_train: WeightVector,
    pub w_test: WeightVector,
}

pub(crate) fn prepare(
    train: &AuditDataset,
    test: &AuditDataset,
    config: &AuditConfig,
    target_s: Sign,
    scheme: &WeightScheme,
) -> Result<Prepared> {
    config.validate()?;
    if train.dim() != test.dim() {
        return Err(MdfaError::DimensionMismatch { expected: train.dim(), actual: test.dim() });
    }
    let bw = resolve_bandwidth(config.kernel_bandwidth, train, config.seed);
    let map = FeatureMap::random_fourier(train.dim(), config.feature_map_dim, bw, config.seed)?;
    let phi_train = map.transform(train)?;
    let phi_test = map.transform(test)?;
    let w_train = scheme.weights_with_features(train, &phi_train, target_s, config.lambda_reg)?;
    let w_test = scheme.weights_with_features(test, &phi_test, target_s, config.lambda_reg)?;
    Ok(Prepared { map, phi_train, phi_test, w_train, w_test })
}

/// One-shot certificate: weights and fit on `train`, estimates on `test`.
pub fn certify(
    train: &AuditDataset,
    test: &AuditDataset,
    config: &AuditConfig,
    target_y: Sign,
    target_s: Sign,
    scheme: &WeightScheme,
) -> Result<Certificate> {
    let prep = prepare(train, test, config, target_s, scheme)?;
    let labels = certificate_labels(train, target_y, target_s);
    let settings = CertifierSettings::from_config(config);
    let fit = fit_on_features(&prep.phi_train, &prep.w_train, &labels, &prep.map, settings, None, None)?;
    let c = fit.model.indicators(&prep.phi_test);
    let (gamma_hat, support_mass) = gamma_of_indicators(test, &prep.w_test, &c, target_y, target_s)?;
    Ok(Certificate {
        model: fit.model,
        target_y,
        target_s,
        gamma_hat,
        support_mass,
    })
}

/// Exhaustive supremum over unions of distinct feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCertificate {
    pub members: Vec<Vec<f64>>,
    pub gamma: f64,
}

pub fn oracle_best_gamma(
    dataset: &AuditDataset,
    weights: &WeightVector,
    target_y: Sign,
    target_s: Sign,
) -> Result<OracleCertificate> {
    weights.check_len(dataset.len())?;
    let mut distinct: Vec<&[f64]> = Vec::new();
    let mut cell_of = Vec::with_capacity(dataset.len());
    for smp in dataset.samples() {
        let pos = match distinct.iter().position(|d| *d == smp.x.as_slice()) {
            Some(p) => p,
            None => {
                distinct.push(&smp.x);
                distinct.len() - 1
            }
        };
        cell_of.push(pos);
    }
    let k = distinct.len();
    if k > 12 {
        return Err(MdfaError::TooManyDistinct(k));
    }
    let mut best = (0.0, 0u32);
    let mut c = vec![false; dataset.len()];
    for mask in 0u32..(1 << k) {
        for (ci, &cell) in c.iter_mut().zip(&cell_of) {
            *ci = mask >> cell & 1 == 1;
        }
        let gamma = match gamma_of_indicators(dataset, weights, &c, target_y, target_s) {
            Ok((g, _)) => g,
            Err(MdfaError::EmptyCertificateSupport { .. }) => 0.0,
            Err(e) => return Err(e),
        };
        if gamma > best.0 {
            best = (gamma, mask);
        }
    }
    Ok(OracleCertificate {
        members: (0..k).filter(|j| best.1 >> j & 1 == 1).map(|j| distinct[j].to_vec()).collect(),
        gamma: best.0,
    })
}
