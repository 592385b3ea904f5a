//! Sample weights that remove the information the features carry about the
//! sensitive attribute: uniform, importance-sampling and kernel-mean-matching.

use std::fmt;
use std::sync::Arc;

use crate::data::sigmoid;
use crate::error::{MdfaError, Result};
use crate::kernels::{axpy, dot, FeatureMap, FeatureMatrix};
use crate::optim;
use crate::types::{AuditDataset, Sign, WeightVector};

/// Pr[S = +1 | x] as a plain function of the features.
pub type PropensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Source of Pr[S = +1 | x] for importance weights.
#[derive(Clone)]
pub enum Propensity {
    Exact(PropensityFn),
    /// L2-regularized logistic regression of S on the mapped features.
    Estimate { map: FeatureMap, lambda_reg: f64 },
}

impl fmt::Debug for Propensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Propensity::Exact(_) => write!(f, "Exact(..)"),
            Propensity::Estimate { lambda_reg, .. } => {
                write!(f, "Estimate {{ lambda_reg: {lambda_reg} }}")
            }
        }
    }
}

#[derive(Clone)]
pub enum SchemeKind {
    Uniform,
    ImportanceExact(PropensityFn),
    ImportanceEstimated,
    MmdMatch,
}

impl fmt::Debug for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SchemeKind::Uniform => "Uniform",
            SchemeKind::ImportanceExact(_) => "ImportanceExact",
            SchemeKind::ImportanceEstimated => "ImportanceEstimated",
            SchemeKind::MmdMatch => "MmdMatch",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug)]
pub struct WeightScheme {
    pub kind: SchemeKind,
    pub bound_b: f64,
    /// Allowed deviation of the matched group's total weight from 1.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl WeightScheme {
    pub fn new(kind: SchemeKind) -> WeightScheme {
        WeightScheme {
            kind,
            bound_b: 10.0,
            tolerance: 1e-3,
            max_iters: 2000,
        }
    }

    pub fn uniform() -> WeightScheme {
        WeightScheme::new(SchemeKind::Uniform)
    }

    pub fn mmd() -> WeightScheme {
        WeightScheme::new(SchemeKind::MmdMatch)
    }

    pub fn importance_estimated() -> WeightScheme {
        WeightScheme::new(SchemeKind::ImportanceEstimated)
    }

    pub fn importance_exact(p: PropensityFn) -> WeightScheme {
        WeightScheme::new(SchemeKind::ImportanceExact(p))
    }

    pub fn with_bound(mut self, b: f64) -> WeightScheme {
        self.bound_b = b;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SchemeKind::Uniform => "uw",
            SchemeKind::ImportanceExact(_) | SchemeKind::ImportanceEstimated => "is",
            SchemeKind::MmdMatch => "mmd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bound_b > 1.0 && self.bound_b.is_finite()) {
            return Err(MdfaError::InvalidArgument(format!(
                "bound_B must exceed 1, got {}",
                self.bound_b
            )));
        }
        if !(self.tolerance > 0.0) || self.max_iters == 0 {
            return Err(MdfaError::InvalidArgument(
                "tolerance and max_iters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Weights for `dataset` that rebalance group `s` against its complement.
    /// `features` are the mapped rows of `dataset`.
    pub(crate) fn weights_with_features(
        &self,
        dataset: &AuditDataset,
        features: &FeatureMatrix,
        s: Sign,
        lambda_reg: f64,
    ) -> Result<WeightVector> {
        self.validate()?;
        match &self.kind {
            SchemeKind::Uniform => Ok(uniform_weights(dataset)),
            SchemeKind::ImportanceExact(p) => {
                importance_weights(dataset, s, &Propensity::Exact(p.clone()))
            }
            SchemeKind::ImportanceEstimated => {
                let p = estimate_propensity_from_features(dataset, features, lambda_reg)?;
                importance_from_values(dataset, s, &p)
            }
            SchemeKind::MmdMatch => Ok(match_features(dataset, features, s, self)?.weights),
        }
    }

    pub fn weights(&self, dataset: &AuditDataset, s: Sign, map: &FeatureMap, lambda_reg: f64) -> Result<WeightVector> {
        let phi = map.transform(dataset)?;
        self.weights_with_features(dataset, &phi, s, lambda_reg)
    }
}

pub fn uniform_weights(dataset: &AuditDataset) -> WeightVector {
    WeightVector::uniform(dataset.len())
}

/// `Pr[S != s | x] / Pr[S = s | x]` on group `s`, 1 on its complement.
pub fn importance_weights(dataset: &AuditDataset, s: Sign, propensity: &Propensity) -> Result<WeightVector> {
    let p = match propensity {
        Propensity::Exact(f) => dataset.samples().iter().map(|smp| f(&smp.x)).collect(),
        Propensity::Estimate { map, lambda_reg } => {
            let phi = map.transform(dataset)?;
            estimate_propensity_from_features(dataset, &phi, *lambda_reg)?
        }
    };
    importance_from_values(dataset, s, &p)
}

fn importance_from_values(dataset: &AuditDataset, s: Sign, p_pos: &[f64]) -> Result<WeightVector> {
    let mut u = Vec::with_capacity(dataset.len());
    for (i, (smp, &p)) in dataset.samples().iter().zip(p_pos).enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return Err(MdfaError::ViolatedCommonSupport { index: i, propensity: p });
        }
        let p_s = if s == Sign::Pos { p } else { 1.0 - p };
        u.push(if smp.s == s { (1.0 - p_s) / p_s } else { 1.0 });
    }
    WeightVector::new(u)
}

/// Fitted Pr[S = +1 | x] for every sample.
pub(crate) fn estimate_propensity_from_features(
    dataset: &AuditDataset,
    features: &FeatureMatrix,
    lambda_reg: f64,
) -> Result<Vec<f64>> {
    let n = dataset.len();
    let d = features.cols();
    let labels: Vec<f64> = dataset.samples().iter().map(|s| s.s.value()).collect();
    let mut h = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut gb = vec![0.0; d];
    let objective = |theta: &[f64], grad: &mut [f64]| {
        let (beta, b) = theta.split_at(d);
        features.mul_vec(beta, &mut h);
        let mut loss = 0.0;
        let mut grad_b = 0.0;
        for i in 0..n {
            let z = labels[i] * (h[i] + b[0]);
            loss += softplus(-z) / n as f64;
            r[i] = -labels[i] * sigmoid(-z) / n as f64;
            grad_b += r[i];
        }
        features.tmul_vec(&r, &mut gb);
        for j in 0..d {
            grad[j] = gb[j] + 2.0 * lambda_reg * beta[j];
        }
        grad[d] = grad_b;
        loss + lambda_reg * dot(beta, beta)
    };
    let fit = optim::minimize(objective, vec![0.0; d + 1], 1e-6, 5000)?;
    let (beta, b) = fit.x.split_at(d);
    let mut scores = vec![0.0; n];
    features.mul_vec(beta, &mut scores);
    Ok(scores.into_iter().map(|z| sigmoid(z + b[0])).collect())
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Kernel-mean-matching result. `converged` is false when the projected
/// gradient loop hit its iteration cap; the weights are then the best iterate.
#[derive(Clone, Debug)]
pub struct MatchedWeights {
    pub weights: WeightVector,
    pub converged: bool,
    pub iterations: usize,
    /// Half the squared feature-mean distance at the returned weights.
    pub objective: f64,
}

/// Reweights group `s` so its feature mean matches the complement's uniform
/// feature mean, with per-sample weights capped at `B / n_s`.
pub fn mmd_match_weights(
    dataset: &AuditDataset,
    s: Sign,
    map: &FeatureMap,
    scheme: &WeightScheme,
) -> Result<MatchedWeights> {
    scheme.validate()?;
    let phi = map.transform(dataset)?;
    match_features(dataset, &phi, s, scheme)
}

pub(crate) fn match_features(
    dataset: &AuditDataset,
    features: &FeatureMatrix,
    s: Sign,
    scheme: &WeightScheme,
) -> Result<MatchedWeights> {
    let group: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples()[i].s == s).collect();
    let rest: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples()[i].s != s).collect();
    if group.is_empty() {
        return Err(MdfaError::ZeroGroupWeight(s.as_i8()));
    }
    if rest.is_empty() {
        return Err(MdfaError::ZeroGroupWeight(s.flip().as_i8()));
    }
    let phi_s = features.select(&group);
    let d = features.cols();
    let mut target = vec![0.0; d];
    for &i in &rest {
        axpy(1.0 / rest.len() as f64, features.row(i), &mut target);
    }
    let n_s = group.len();
    let cap = scheme.bound_b / n_s as f64;

    // Lipschitz constant of the gradient: top eigenvalue of phi_s^T phi_s.
    let mut z = vec![1.0 / (d as f64).sqrt(); d];
    let mut tmp = vec![0.0; n_s];
    let mut lip = 0.0;
    for _ in 0..20 {
        phi_s.mul_vec(&z, &mut tmp);
        let mut next = vec![0.0; d];
        phi_s.tmul_vec(&tmp, &mut next);
        let nn = dot(&next, &next).sqrt();
        if nn == 0.0 {
            break;
        }
        lip = dot(&z, &next);
        z = next.into_iter().map(|v| v / nn).collect();
    }
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };

    // residual r(v) = phi_s^T v - target is affine in v, so the residual at the
    // extrapolated point follows from the residuals of the last two iterates
    let residual = |v: &[f64], out: &mut Vec<f64>| {
        phi_s.tmul_vec(v, out);
        for (r, t) in out.iter_mut().zip(&target) {
            *r -= t;
        }
    };
    // accelerated projected gradient with gradient-based restart
    let mut v = vec![1.0 / n_s as f64; n_s];
    let mut r_v = vec![0.0; d];
    residual(&v, &mut r_v);
    let mut best_obj = 0.5 * dot(&r_v, &r_v);
    let start_obj = best_obj;
    let mut best = v.clone();
    let mut y = v.clone();
    let mut r_y = r_v.clone();
    let mut momentum = 1.0f64;
    let mut grad = vec![0.0; n_s];
    let mut r_next = vec![0.0; d];
    let mut converged = false;
    let mut iterations = scheme.max_iters;
    for it in 0..scheme.max_iters {
        phi_s.mul_vec(&r_y, &mut grad);
        let trial: Vec<f64> = y.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
        let next = project_capped_simplex(&trial, cap);
        residual(&next, &mut r_next);
        let f = 0.5 * dot(&r_next, &r_next);
        if f < best_obj {
            best_obj = f;
            best.copy_from_slice(&next);
        }
        let mapping = next.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / step;
        let restart = y.iter().zip(&next).zip(&v).map(|((yi, ni), vi)| (yi - ni) * (ni - vi)).sum::<f64>() > 0.0;
        if restart {
            momentum = 1.0;
            y.copy_from_slice(&next);
            r_y.copy_from_slice(&r_next);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / t_next;
            for i in 0..n_s {
                y[i] = next[i] + beta * (next[i] - v[i]);
            }
            for j in 0..d {
                r_y[j] = r_next[j] + beta * (r_next[j] - r_v[j]);
            }
            momentum = t_next;
        }
        v = next;
        std::mem::swap(&mut r_v, &mut r_next);
        // stationary on the feasible set, or the discrepancy is down by 1e3
        if mapping <= 1e-9 || best_obj <= 1e-6 * start_obj {
            converged = true;
            iterations = it + 1;
            break;
        }
    }
    let mut u = vec![0.0; dataset.len()];
    for (k, &i) in group.iter().enumerate() {
        u[i] = best[k];
    }
    for &i in &rest {
        u[i] = 1.0 / rest.len() as f64;
    }
    Ok(MatchedWeights {
        weights: WeightVector::new(u)?,
        converged,
        iterations,
        objective: best_obj,
    })
}

/// Euclidean projection onto `{0 <= v <= cap, sum v = 1}`; needs `cap * len >= 1`.
pub(crate) fn project_capped_simplex(z: &[f64], cap: f64) -> Vec<f64> {
    let total = |theta: f64| z.iter().map(|&x| (x - theta).clamp(0.0, cap)).sum::<f64>();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = z.iter().cloned().fold(f64::INFINITY, f64::min);
    // total(lo) = n * cap >= 1 and total(hi) = 0
    let (mut lo, mut hi) = (min - cap, max);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
    }
    let theta = 0.5 * (lo + hi);
    z.iter().map(|&x| (x - theta).clamp(0.0, cap)).collect()
}
