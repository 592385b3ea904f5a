//! Orchestration: cross-validated parameter choice, repeated 70/30 audits
//! with aggregation, the weight-scheme comparison on synthetic data, and the
//! JSON/TSV report formats.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{
    certificate_labels, certify, delta_of_indicators, fit_on_features, surrogate_loss,
    CertifierSettings,
};
use crate::data::{
    generate_synthetic, region_mass_given_negative, split, synthetic_propensity, SyntheticSpec,
    ViolatingRegion,
};
use crate::error::{MdfaError, Result};
use crate::kernels::{mmd_from_features, resolve_bandwidth, FeatureMap, FeatureMatrix};
use crate::metrics::{disparate_treatment, gamma_from_delta, outcome_rate_ratio, subgroup_profile, SubgroupProfile};
use crate::rebalance::WeightScheme;
use crate::types::{AuditConfig, AuditDataset, Bandwidth, GridPoint, Sign, TraceRow, WeightVector};
use crate::wva::wva_run;

const FOLDS: usize = 5;
const TRAIN_FRACTION: f64 = 0.7;
/// More failed splits than this fraction aborts the run.
const MAX_FAILED_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditMode {
    Certify,
    Wva,
}

/// Thread pool sized by `MDFA_THREADS`, or by the available cores when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("MDFA_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            MdfaError::InvalidArgument(format!("MDFA_THREADS must be a positive integer, got `{v}`"))
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MdfaError::InvalidArgument(e.to_string()))
}

/// `n` per-unit seeds drawn from one master seed.
pub fn derive_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn is_degenerate(e: &MdfaError) -> bool {
    matches!(
        e,
        MdfaError::InvalidDataset(_) | MdfaError::DegenerateSplit(_) | MdfaError::ZeroGroupWeight(_)
    )
}

struct FoldCache {
    fit: AuditDataset,
    held: AuditDataset,
    phi_fit: FeatureMatrix,
    phi_held: FeatureMatrix,
    w_fit: WeightVector,
    w_held: WeightVector,
    map: FeatureMap,
}

/// Picks the grid point minimizing held-out surrogate risk plus held-out MMD,
/// each averaged over folds and divided by its largest value on the grid.
/// Ties go to the larger `lambda_reg`, then to the larger bandwidth.
pub fn cross_validate(
    train: &AuditDataset,
    config: &AuditConfig,
    target_y: Sign,
    target_s: Sign,
    scheme: &WeightScheme,
) -> Result<GridPoint> {
    config.validate()?;
    if config.cv_grid.len() == 1 {
        return Ok(config.cv_grid[0]);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut bandwidths: Vec<Bandwidth> = Vec::new();
    for g in &config.cv_grid {
        if !bandwidths.contains(&g.bandwidth) {
            bandwidths.push(g.bandwidth);
        }
    }
    let settings = CertifierSettings::from_config(config);
    // [grid point] -> (risk sum, mmd sum, folds used)
    let mut sums = vec![(0.0, 0.0, 0usize); config.cv_grid.len()];
    for f in 0..FOLDS {
        let mut held_idx: Vec<usize> = order.iter().copied().skip(f).step_by(FOLDS).collect();
        held_idx.sort_unstable();
        let mut fit_idx: Vec<usize> = (0..train.len()).filter(|i| held_idx.binary_search(i).is_err()).collect();
        fit_idx.sort_unstable();
        let (fit, held) = match (train.subset(&fit_idx), train.subset(&held_idx)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        let mut caches: Vec<Option<FoldCache>> = Vec::with_capacity(bandwidths.len());
        for bw in &bandwidths {
            let width = resolve_bandwidth(*bw, &fit, config.seed);
            let map = FeatureMap::random_fourier(fit.dim(), config.feature_map_dim, width, config.seed)?;
            let phi_fit = map.transform(&fit)?;
            let phi_held = map.transform(&held)?;
            let weights = scheme
                .weights_with_features(&fit, &phi_fit, target_s, config.lambda_reg)
                .and_then(|wf| {
                    scheme
                        .weights_with_features(&held, &phi_held, target_s, config.lambda_reg)
                        .map(|wh| (wf, wh))
                });
            caches.push(match weights {
                Ok((w_fit, w_held)) => Some(FoldCache {
                    fit: fit.clone(),
                    held: held.clone(),
                    phi_fit,
                    phi_held,
                    w_fit,
                    w_held,
                    map,
                }),
                Err(e) if is_degenerate(&e) => None,
                Err(e) => return Err(e),
            });
        }
        if caches.iter().any(Option::is_none) {
            continue;
        }
        for (p, g) in config.cv_grid.iter().enumerate() {
            let b = bandwidths.iter().position(|x| x == &g.bandwidth).expect("bandwidth listed");
            let cache = caches[b].as_ref().expect("checked above");
            let labels = certificate_labels(&cache.fit, target_y, target_s);
            let st = CertifierSettings { lambda_reg: g.lambda_reg, ..settings };
            let model = fit_on_features(&cache.phi_fit, &cache.w_fit, &labels, &cache.map, st, None, None)?.model;
            let held_labels = certificate_labels(&cache.held, target_y, target_s);
            let h = model.scores(&cache.phi_held);
            let w = cache.w_held.as_slice();
            let risk = h
                .iter()
                .zip(held_labels.as_slice())
                .zip(w)
                .map(|((hi, l), wi)| wi * surrogate_loss(config.loss, l.value() * hi))
                .sum::<f64>()
                / cache.w_held.total();
            let mmd = mmd_from_features(&cache.phi_held, &cache.held, &cache.w_held, target_s)?;
            sums[p].0 += risk;
            sums[p].1 += mmd;
            sums[p].2 += 1;
        }
    }
    if sums.iter().all(|s| s.2 == 0) {
        return Err(MdfaError::AllFoldsDegenerate);
    }
    let avg: Vec<(f64, f64)> = sums.iter().map(|&(r, m, k)| (r / k as f64, m / k as f64)).collect();
    let max_r = avg.iter().map(|a| a.0).fold(0.0, f64::max);
    let max_m = avg.iter().map(|a| a.1).fold(0.0, f64::max);
    let norm = |v: f64, max: f64| if max > 0.0 { v / max } else { 0.0 };
    let width_of = |b: Bandwidth| resolve_bandwidth(b, train, config.seed);
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (p, g) in config.cv_grid.iter().enumerate() {
        let score = norm(avg[p].0, max_r) + norm(avg[p].1, max_m);
        let better = score < best_score
            || (score == best_score
                && (g.lambda_reg > config.cv_grid[best].lambda_reg
                    || (g.lambda_reg == config.cv_grid[best].lambda_reg
                        && width_of(g.bandwidth) > width_of(config.cv_grid[best].bandwidth))));
        if better {
            best = p;
            best_score = score;
        }
    }
    Ok(config.cv_grid[best])
}

/// Metrics of one train/test split, all measured on the test side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split: usize,
    pub seed: u64,
    pub gamma_hat: f64,
    /// `None` when a sensitive cell of the certificate support is empty.
    pub delta_m: Option<f64>,
    pub alpha: f64,
    pub dt_g: Option<f64>,
    pub di: f64,
    pub lambda_reg: f64,
    pub bandwidth: Bandwidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFailure {
    pub split: usize,
    pub seed: u64,
    pub error: String,
}

/// Means and sample standard deviations (n - 1 denominator) over the splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub gamma_mean: f64,
    pub gamma_std: f64,
    pub delta_m_mean: Option<f64>,
    pub delta_m_std: Option<f64>,
    pub dt_g_mean: Option<f64>,
    pub di_mean: f64,
    pub count: usize,
    /// False when fewer than two splits contributed; the stds are then reported as 0.
    pub std_defined: bool,
}

/// Mean and n-1 standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

impl Aggregates {
    pub fn from_records(records: &[SplitRecord]) -> Aggregates {
        let gammas: Vec<f64> = records.iter().map(|r| r.gamma_hat).collect();
        let deltas: Vec<f64> = records.iter().filter_map(|r| r.delta_m).collect();
        let dts: Vec<f64> = records.iter().filter_map(|r| r.dt_g).collect();
        let dis: Vec<f64> = records.iter().map(|r| r.di).collect();
        let (gamma_mean, gamma_std) = mean_std(&gammas).unwrap_or((f64::NAN, 0.0));
        let delta = mean_std(&deltas);
        Aggregates {
            gamma_mean,
            gamma_std,
            delta_m_mean: delta.map(|d| d.0),
            delta_m_std: delta.map(|d| d.1),
            dt_g_mean: mean_std(&dts).map(|d| d.0),
            di_mean: mean_std(&dis).map_or(f64::NAN, |d| d.0),
            count: records.len(),
            std_defined: records.len() >= 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditRunResult {
    pub config_echo: AuditConfig,
    pub mode: AuditMode,
    pub scheme: String,
    pub target_y: Sign,
    pub target_s: Sign,
    pub n_splits: usize,
    pub per_split: Vec<SplitRecord>,
    pub failures: Vec<SplitFailure>,
    pub aggregates: Aggregates,
    /// Subgroup profile of the split with the median `delta_m`.
    pub profile: Option<SubgroupProfile>,
    pub representative_split: Option<usize>,
    /// Escalation trace of the representative split (wva mode only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceRow>>,
}

impl AuditRunResult {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per split.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        let mut out = String::from("split\tseed\tgamma_hat\tdelta_m\talpha\tdt_g\tdi\tlambda_reg\tbandwidth\n");
        for r in &self.per_split {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.split,
                r.seed,
                r.gamma_hat,
                opt(r.delta_m),
                r.alpha,
                opt(r.dt_g),
                r.di,
                r.lambda_reg,
                r.bandwidth
            ));
        }
        out
    }
}

pub fn trace_tsv(trace: &[TraceRow]) -> String {
    let mut out = String::from("t\tdelta_hat\talpha_hat\n");
    for row in trace {
        let d = row.delta_hat.map_or("NA".to_string(), |v| v.to_string());
        out.push_str(&format!("{}\t{}\t{}\n", row.t, d, row.alpha_hat));
    }
    out
}

struct SplitOutcome {
    record: SplitRecord,
    profile: SubgroupProfile,
    trace: Option<Vec<TraceRow>>,
}

#[allow(clippy::too_many_arguments)]
fn audit_split(
    dataset: &AuditDataset,
    index: usize,
    seed: u64,
    config: &AuditConfig,
    target_y: Sign,
    target_s: Sign,
    scheme: &WeightScheme,
    mode: AuditMode,
) -> Result<SplitOutcome> {
    let (train, test) = split(dataset, TRAIN_FRACTION, seed)?;
    let split_config = AuditConfig { seed, ..config.clone() };
    let chosen = cross_validate(&train, &split_config, target_y, target_s, scheme)?;
    let run_config = AuditConfig {
        lambda_reg: chosen.lambda_reg,
        kernel_bandwidth: chosen.bandwidth,
        ..split_config
    };
    let everyone = vec![true; test.len()];
    let di = disparate_treatment(&test, &WeightVector::uniform(test.len()), &everyone, target_s)?;
    let (gamma_hat, delta_m, alpha, dt_g, profile, trace) = match mode {
        AuditMode::Certify => {
            let cert = certify(&train, &test, &run_config, target_y, target_s, scheme)?;
            let c = cert.model.indicators_for(&test)?;
            // the test weights are recomputed exactly as inside certify
            let w_test = scheme.weights(&test, target_s, &cert.model.map, run_config.lambda_reg)?;
            let delta = delta_of_indicators(&test, &w_test, &c, target_y, target_s).ok();
            let dt = outcome_rate_ratio(&test, &w_test, &c, target_s, target_y).ok();
            let profile = subgroup_profile(&test, &c)?;
            (cert.gamma_hat, delta, cert.support_mass, dt, profile, None)
        }
        AuditMode::Wva => {
            let r = wva_run(&train, &test, &run_config, target_y, target_s, scheme)?;
            (r.certificate.gamma_hat, Some(r.delta_m), r.alpha, Some(r.dt_g), r.profile, Some(r.trace))
        }
    };
    Ok(SplitOutcome {
        record: SplitRecord {
            split: index,
            seed,
            gamma_hat,
            delta_m,
            alpha,
            dt_g,
            di,
            lambda_reg: chosen.lambda_reg,
            bandwidth: chosen.bandwidth,
        },
        profile,
        trace,
    })
}

/// Audits `n_splits` seeded 70/30 splits in parallel and aggregates in split order.
pub fn repeated_audit(
    dataset: &AuditDataset,
    n_splits: usize,
    config: &AuditConfig,
    target_y: Sign,
    target_s: Sign,
    scheme: &WeightScheme,
    mode: AuditMode,
) -> Result<AuditRunResult> {
    if n_splits == 0 {
        return Err(MdfaError::InvalidArgument("n_splits must be at least 1".into()));
    }
    config.validate()?;
    scheme.validate()?;
    let seeds = derive_seeds(config.seed, n_splits);
    let pool = thread_pool()?;
    let outcomes: Vec<Result<SplitOutcome>> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(i, &seed)| audit_split(dataset, i, seed, config, target_y, target_s, scheme, mode))
            .collect()
    });
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(o) => ok.push(o),
            Err(e) => failures.push(SplitFailure { split: i, seed: seeds[i], error: e.to_string() }),
        }
    }
    if failures.len() as f64 > MAX_FAILED_FRACTION * n_splits as f64 || ok.is_empty() {
        return Err(MdfaError::TooManySplitFailures {
            failed: failures.len(),
            total: n_splits,
            first: failures.first().map_or_else(String::new, |f| f.error.clone()),
        });
    }
    let records: Vec<SplitRecord> = ok.iter().map(|o| o.record.clone()).collect();
    let aggregates = Aggregates::from_records(&records);
    // lower median of delta_m; falls back to the first split
    let mut ranked: Vec<(f64, usize)> = ok
        .iter()
        .enumerate()
        .filter_map(|(k, o)| o.record.delta_m.map(|d| (d, k)))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let rep = if ranked.is_empty() { 0 } else { ranked[(ranked.len() - 1) / 2].1 };
    let representative = &ok[rep];
    Ok(AuditRunResult {
        config_echo: config.clone(),
        mode,
        scheme: scheme.name().to_string(),
        target_y,
        target_s,
        n_splits,
        per_split: records,
        failures,
        aggregates,
        profile: Some(representative.profile.clone()),
        representative_split: Some(representative.record.split),
        trace: representative.trace.clone(),
    })
}

/// Audits the external prediction column in place of the outcome, in wva mode.
pub fn audit_external_predictions(
    dataset: &AuditDataset,
    n_splits: usize,
    config: &AuditConfig,
    target_y: Sign,
    target_s: Sign,
    scheme: &WeightScheme,
) -> Result<AuditRunResult> {
    let audited = dataset.predictions_as_outcome()?;
    repeated_audit(&audited, n_splits, config, target_y, target_s, scheme, AuditMode::Wva)
}

/// Certificate strength of the planted violation after rebalancing group
/// S = +1 onto the distribution of S = -1.
pub fn synthetic_true_gamma(spec: &SyntheticSpec, region: &ViolatingRegion) -> Result<f64> {
    let delta = -(1.0 - spec.nu).ln();
    let mass = region_mass_given_negative(spec.mu, region) * (1.0 - spec.nu / 2.0);
    gamma_from_delta(delta, mass)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub mu: f64,
    pub scheme: String,
    pub bias_mean: f64,
    pub bias_std: f64,
    pub n: usize,
}

pub fn bias_tsv(rows: &[BiasRow]) -> String {
    let mut out = String::from("mu\tscheme\tbias_mean\tbias_std\n");
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.mu, r.scheme, r.bias_mean, r.bias_std));
    }
    out
}

/// Bias of one-shot certificates under uniform, exact importance and matched
/// weights. `base` supplies `m`, `nu` and the noise; seeds run from `base.seed`.
pub fn compare_weight_schemes(
    mus: &[f64],
    base: &SyntheticSpec,
    n_seeds: usize,
    config: &AuditConfig,
) -> Result<Vec<BiasRow>> {
    if mus.is_empty() || n_seeds == 0 {
        return Err(MdfaError::InvalidArgument("need at least one mu and one seed".into()));
    }
    config.validate()?;
    let units: Vec<(usize, u64)> = (0..mus.len())
        .flat_map(|k| (0..n_seeds as u64).map(move |s| (k, s)))
        .collect();
    let pool = thread_pool()?;
    let biases: Vec<Result<[f64; 3]>> = pool.install(|| {
        units
            .par_iter()
            .map(|&(k, s)| {
                let mu = mus[k];
                let spec = SyntheticSpec { mu, seed: base.seed.wrapping_add(s), ..base.clone() };
                let data = generate_synthetic(&spec)?;
                let truth = synthetic_true_gamma(&spec, &data.ground_truth.region)?;
                let (train, test) = split(&data.dataset, TRAIN_FRACTION, spec.seed)?;
                let cfg = AuditConfig { seed: spec.seed, ..config.clone() };
                let is = WeightScheme::importance_exact(Arc::new(move |x: &[f64]| synthetic_propensity(mu, x)));
                let mut out = [0.0; 3];
                for (j, scheme) in [WeightScheme::uniform(), is, WeightScheme::mmd()].iter().enumerate() {
                    let scheme = scheme.clone().with_bound(config.weight_bound_b);
                    let cert = certify(&train, &test, &cfg, Sign::Pos, Sign::Pos, &scheme)?;
                    out[j] = cert.gamma_hat - truth;
                }
                Ok(out)
            })
            .collect()
    });
    let biases = biases.into_iter().collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (k, &mu) in mus.iter().enumerate() {
        for (j, name) in ["uw", "is", "mmd"].iter().enumerate() {
            let vals: Vec<f64> = biases[k * n_seeds..(k + 1) * n_seeds].iter().map(|b| b[j]).collect();
            let (m, s) = mean_std(&vals).expect("n_seeds >= 1");
            rows.push(BiasRow { mu, scheme: name.to_string(), bias_mean: m, bias_std: s, n: n_seeds });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_streaming_pass() {
        let v = [0.3, -1.2, 4.5, 2.25, 0.0, 7.125];
        let (m, s) = mean_std(&v).unwrap();
        // Welford
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, x) in v.iter().enumerate() {
            let d = x - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (x - mean);
        }
        assert!((m - mean).abs() < 1e-12);
        assert!((s - (m2 / (v.len() - 1) as f64).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[2.5]), Some((2.5, 0.0)));
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn seeds_are_reproducible_and_distinct() {
        let a = derive_seeds(7, 5);
        assert_eq!(a, derive_seeds(7, 5));
        let mut b = a.clone();
        b.dedup();
        assert_eq!(b.len(), 5);
    }

    #[test]
    fn single_grid_point_short_circuits() {
        let data = generate_synthetic(&SyntheticSpec::new(200, 0.0, 0.5, 1)).unwrap();
        let g = GridPoint { lambda_reg: 0.5, bandwidth: Bandwidth::Fixed(2.0) };
        let cfg = AuditConfig { cv_grid: vec![g], ..AuditConfig::default() };
        let chosen = cross_validate(&data.dataset, &cfg, Sign::Pos, Sign::Pos, &WeightScheme::uniform()).unwrap();
        assert_eq!(chosen, g);
    }

    #[test]
    fn trace_tsv_marks_missing_delta() {
        let t = [TraceRow { t: 1, delta_hat: Some(0.5), alpha_hat: 0.3 }, TraceRow { t: 2, delta_hat: None, alpha_hat: 0.1 }];
        assert_eq!(trace_tsv(&t), "t\tdelta_hat\talpha_hat\n1\t0.5\t0.3\n2\tNA\t0.1\n");
    }
}
