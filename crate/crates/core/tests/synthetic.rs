//! End-to-end checks on generated populations against frequency-count oracles.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdfa_core::audit::{audit_external_predictions, cross_validate, repeated_audit, AuditMode};
use mdfa_core::certify::{certify, delta_of_indicators};
use mdfa_core::data::{generate_synthetic, load_csv_from, split, synthetic_propensity, CsvSchema, SyntheticSpec};
use mdfa_core::kernels::{mmd_hat, FeatureMap};
use mdfa_core::rebalance::{importance_weights, mmd_match_weights, Propensity, WeightScheme};
use mdfa_core::wva::wva_run;
use mdfa_core::{AuditConfig, AuditDataset, AuditSample, Bandwidth, GridPoint, Sign, WeightVector};

fn single_point(lambda_reg: f64) -> Vec<GridPoint> {
    vec![GridPoint { lambda_reg, bandwidth: Bandwidth::MEDIAN }]
}

#[test]
fn balanced_generator_splits_sensitive_values_evenly() {
    let data = generate_synthetic(&SyntheticSpec::new(5000, 0.0, 0.5, 1)).unwrap();
    let pos = data.dataset.samples().iter().filter(|s| s.s == Sign::Pos).count() as f64 / 5000.0;
    let sigma = (0.25f64 / 5000.0).sqrt();
    assert!((pos - 0.5).abs() <= 3.0 * sigma, "P[S=+1] = {pos}");
}

#[test]
fn planted_rate_ratio_matches_ground_truth() {
    let data = generate_synthetic(&SyntheticSpec::with_delta(5000, 0.0, 2.0, 2)).unwrap();
    assert!((data.ground_truth.delta_m - 2.0).abs() < 1e-12);
    let (mut n, mut k) = ([0.0f64; 2], [0.0f64; 2]);
    for (smp, inside) in data.dataset.samples().iter().zip(&data.in_region) {
        if *inside {
            let g = usize::from(smp.s == Sign::Neg);
            n[g] += 1.0;
            if smp.y == Sign::Pos {
                k[g] += 1.0;
            }
        }
    }
    let ratio = (k[0] / n[0]) / (k[1] / n[1]);
    // delta method on the log of the S = -1 rate; the S = +1 rate is exactly 1
    let p = k[1] / n[1];
    let se = ((1.0 - p) / (p * n[1])).sqrt();
    assert_eq!(k[0], n[0]);
    assert!((ratio.ln() - 2.0).abs() <= 3.0 * se, "ratio {ratio}, se {se}");
}

#[test]
fn identity_mmd_is_difference_of_group_means() {
    let data = generate_synthetic(&SyntheticSpec::new(3000, 0.3, 0.0, 3)).unwrap();
    let ds = &data.dataset;
    let got = mmd_hat(ds, &WeightVector::uniform(ds.len()), Sign::Pos, &FeatureMap::identity(2)).unwrap();
    let mut means = [[0.0f64; 2]; 2];
    let mut counts = [0.0f64; 2];
    for smp in ds.samples() {
        counts[usize::from(smp.s == Sign::Neg)] += 1.0;
    }
    for smp in ds.samples() {
        let g = usize::from(smp.s == Sign::Neg);
        for j in 0..2 {
            means[g][j] += smp.x[j] / counts[g];
        }
    }
    let want = ((means[0][0] - means[1][0]).powi(2) + (means[0][1] - means[1][1]).powi(2)).sqrt();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn exact_importance_weights_balance_the_shifted_moment() {
    let mu = 0.2;
    let data = generate_synthetic(&SyntheticSpec::new(5000, mu, 0.0, 4)).unwrap();
    let ds = &data.dataset;
    let prop = Propensity::Exact(Arc::new(move |x: &[f64]| synthetic_propensity(mu, x)));
    let w = importance_weights(ds, Sign::Pos, &prop).unwrap();
    let moment = |x: &[f64]| (x[0] + x[1]).powi(2);
    let weighted_mean = |u: &[f64], idx: &[usize]| {
        let total: f64 = idx.iter().map(|&i| u[i]).sum();
        idx.iter().map(|&i| u[i] * moment(&ds.samples()[i].x)).sum::<f64>() / total
    };
    let pos: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples()[i].s == Sign::Pos).collect();
    let neg: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples()[i].s == Sign::Neg).collect();
    let gap = |u: &[f64], p: &[usize], n: &[usize]| weighted_mean(u, p) - weighted_mean(u, n);
    let observed = gap(w.as_slice(), &pos, &neg);

    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let boots: Vec<f64> = (0..200)
        .map(|_| {
            let p: Vec<usize> = (0..pos.len()).map(|_| pos[rng.random_range(0..pos.len())]).collect();
            let n: Vec<usize> = (0..neg.len()).map(|_| neg[rng.random_range(0..neg.len())]).collect();
            gap(w.as_slice(), &p, &n)
        })
        .collect();
    let mean = boots.iter().sum::<f64>() / boots.len() as f64;
    let sd = (boots.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (boots.len() - 1) as f64).sqrt();
    assert!(observed.abs() <= 3.0 * sd, "gap {observed}, bootstrap sd {sd}");

    let uniform = gap(&vec![1.0; ds.len()], &pos, &neg);
    assert!(uniform.abs() > 3.0 * sd, "the raw groups should differ: {uniform}");
}

#[test]
fn matched_weights_shrink_mmd_and_reach_the_long_solve() {
    let data = generate_synthetic(&SyntheticSpec::new(2000, 0.3, 0.0, 5)).unwrap();
    let ds = &data.dataset;
    let bw = mdfa_core::kernels::median_heuristic(ds, 1000, 5);
    let map = FeatureMap::random_fourier(2, 256, bw, 5).unwrap();
    let scheme = WeightScheme::mmd();
    let matched = mmd_match_weights(ds, Sign::Pos, &map, &scheme).unwrap();
    let uniform = mmd_hat(ds, &WeightVector::uniform(ds.len()), Sign::Pos, &map).unwrap();
    let after = mmd_hat(ds, &matched.weights, Sign::Pos, &map).unwrap();
    assert!(after <= 0.25 * uniform, "{after} vs {uniform}");

    let long = WeightScheme { max_iters: 10 * scheme.max_iters, ..scheme.clone() };
    let reference = mmd_match_weights(ds, Sign::Pos, &map, &long).unwrap();
    let start = 0.5 * uniform * uniform;
    // within 5% of the reduction achieved by the long solve
    assert!(
        matched.objective - reference.objective <= 0.05 * (start - reference.objective),
        "objective {} vs long solve {} from {start}",
        matched.objective,
        reference.objective
    );
}

#[test]
fn oracle_region_recovers_planted_delta() {
    let data = generate_synthetic(&SyntheticSpec::with_delta(5000, 0.0, 2.0, 6)).unwrap();
    let ds = &data.dataset;
    let d = delta_of_indicators(ds, &WeightVector::uniform(ds.len()), &data.in_region, Sign::Pos, Sign::Pos).unwrap();
    assert!((d - 2.0).abs() <= 0.15, "delta {d}");
}

/// Overlap among `Y = +1` samples, the outcome the certificate is about.
fn overlap(ds: &AuditDataset, c: &[bool], region: &[bool]) -> (f64, f64) {
    let (mut both, mut either, mut inside) = (0.0, 0.0, 0.0);
    for ((smp, &ci), &ri) in ds.samples().iter().zip(c).zip(region) {
        if smp.y != Sign::Pos {
            continue;
        }
        both += f64::from(u8::from(ci && ri));
        either += f64::from(u8::from(ci || ri));
        inside += f64::from(u8::from(ri));
    }
    (both / either, both / inside)
}

#[test]
fn certificates_recover_planted_region() {
    let data = generate_synthetic(&SyntheticSpec::with_delta(5000, 0.0, 2.0, 7)).unwrap();
    let (train, test) = split(&data.dataset, 0.7, 7).unwrap();
    let (region_train, region_test): (Vec<bool>, Vec<bool>) = {
        let r = &data.ground_truth.region;
        (train.samples().iter().map(|s| r.contains(&s.x)).collect(), test.samples().iter().map(|s| r.contains(&s.x)).collect())
    };
    let config = AuditConfig { seed: 7, xi: 0.2, alpha_floor: 0.11, ..AuditConfig::default() };
    let one = certify(&train, &test, &config, Sign::Pos, Sign::Pos, &WeightScheme::uniform()).unwrap();
    let (j1, recall) = overlap(&train, &one.model.indicators_for(&train).unwrap(), &region_train);
    let worst = wva_run(&train, &test, &config, Sign::Pos, Sign::Pos, &WeightScheme::uniform()).unwrap();
    let (jw, _) = overlap(&test, &worst.certificate.model.indicators_for(&test).unwrap(), &region_test);
    assert!(recall >= 0.8, "one-shot recall {recall}");
    assert!(jw >= 0.8, "Jaccard {jw}");
}

#[test]
fn worst_violation_tracks_planted_delta() {
    let data = generate_synthetic(&SyntheticSpec::with_delta(5000, 0.2, 2.0, 0)).unwrap();
    let (train, test) = split(&data.dataset, 0.7, 0).unwrap();
    let config = AuditConfig { xi: 0.2, alpha_floor: 0.11, seed: 0, ..AuditConfig::default() };
    let r = wva_run(&train, &test, &config, Sign::Pos, Sign::Pos, &WeightScheme::mmd()).unwrap();
    assert!((1.7..=2.3).contains(&r.delta_m), "delta {}", r.delta_m);
    assert!(r.delta_m >= r.trace[0].delta_hat.unwrap() - 0.05);
}

fn shuffled(ds: &AuditDataset, seed: u64) -> AuditDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s: Vec<Sign> = ds.samples().iter().map(|x| x.s).collect();
    for i in (1..s.len()).rev() {
        s.swap(i, rng.random_range(0..=i));
    }
    let samples = ds.samples().iter().zip(s).map(|(x, s)| AuditSample { s, ..x.clone() }).collect();
    AuditDataset::new(samples, ds.feature_names().to_vec()).unwrap()
}

#[test]
fn fair_and_unfair_instances_against_permutation_null() {
    let config = AuditConfig { seed: 8, cv_grid: single_point(1e-3), ..AuditConfig::default() };
    let scheme = WeightScheme::uniform();
    let run = |ds: &AuditDataset, splits: usize, seed: u64| {
        let cfg = AuditConfig { seed, ..config.clone() };
        repeated_audit(ds, splits, &cfg, Sign::Pos, Sign::Pos, &scheme, AuditMode::Certify).unwrap()
    };
    let fair = generate_synthetic(&SyntheticSpec::new(2000, 0.0, 0.0, 8)).unwrap().dataset;
    let unfair = generate_synthetic(&SyntheticSpec::with_delta(2000, 0.0, 2.0, 8)).unwrap().dataset;
    let null: Vec<f64> = (0..10).map(|p| run(&shuffled(&fair, 80 + p), 1, 800 + p).aggregates.gamma_mean).collect();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let sd = (null.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();

    let fair_run = run(&fair, 20, 8);
    assert!(fair_run.aggregates.gamma_mean.abs() <= mean.abs() + 3.0 * sd, "{:?} vs sd {sd}", fair_run.aggregates);
    assert!(fair_run.aggregates.gamma_mean.abs() <= 2.0 * fair_run.aggregates.gamma_std);

    let unfair_run = run(&unfair, 5, 9);
    assert!(unfair_run.aggregates.gamma_mean > mean + 3.0 * sd, "{:?} vs sd {sd}", unfair_run.aggregates);
}

#[test]
fn cross_validation_is_reproducible() {
    let data = generate_synthetic(&SyntheticSpec::with_delta(1000, 0.2, 1.0, 9)).unwrap();
    let mut grid = Vec::new();
    for lambda_reg in [0.01, 0.1, 1.0] {
        for bandwidth in [Bandwidth::MEDIAN, Bandwidth::Median { factor: 2.0 }] {
            grid.push(GridPoint { lambda_reg, bandwidth });
        }
    }
    let config = AuditConfig { seed: 9, feature_map_dim: 64, cv_grid: grid.clone(), ..AuditConfig::default() };
    let a = cross_validate(&data.dataset, &config, Sign::Pos, Sign::Pos, &WeightScheme::mmd()).unwrap();
    let b = cross_validate(&data.dataset, &config, Sign::Pos, Sign::Pos, &WeightScheme::mmd()).unwrap();
    assert_eq!(a, b);
    assert!(grid.contains(&a));
}

#[test]
fn planted_prediction_disparity_is_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut samples = Vec::new();
    for _ in 0..2000 {
        let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let s = if rng.random_bool(0.5) { Sign::Pos } else { Sign::Neg };
        let y = if rng.random_bool(0.5) { Sign::Pos } else { Sign::Neg };
        samples.push(AuditSample { x, s, y });
    }
    // exact positive-prediction rates per cell: 0.9 vs 0.18 on x1 > -0.5, 0.5 elsewhere
    let mut preds = vec![Sign::Neg; samples.len()];
    for (inside, s, rate) in [(true, Sign::Pos, 0.9), (true, Sign::Neg, 0.18), (false, Sign::Pos, 0.5), (false, Sign::Neg, 0.5)] {
        let mut cell: Vec<usize> =
            (0..samples.len()).filter(|&i| (samples[i].x[0] > -0.5) == inside && samples[i].s == s).collect();
        for i in (1..cell.len()).rev() {
            cell.swap(i, rng.random_range(0..=i));
        }
        let k = (rate * cell.len() as f64).round() as usize;
        for &i in &cell[..k] {
            preds[i] = Sign::Pos;
        }
    }
    let ds = AuditDataset::with_predictions(samples, vec!["a".into(), "b".into()], Some(preds)).unwrap();
    // the planted group carries mass 0.75 * 0.54 = 0.405 of Y = +1
    let config = AuditConfig { seed: 10, xi: 0.2, alpha_floor: 0.35, cv_grid: single_point(1e-3), ..AuditConfig::default() };
    let r = audit_external_predictions(&ds, 10, &config, Sign::Pos, Sign::Pos, &WeightScheme::uniform()).unwrap();
    let dt = r.aggregates.dt_g_mean.unwrap();
    assert!((4.0..=6.0).contains(&dt), "DT_G {dt}");
    // population ratio is 0.8 / 0.26
    assert!(r.aggregates.di_mean < dt, "DI {}", r.aggregates.di_mean);
}

#[test]
fn recidivism_extract_maps_to_five_features() {
    let csv = "priors_count,charge_degree,age,juv_fel_count,juv_misd_count,race,high_risk\n\
               3,1,25,0,1,African-American,1\n\
               0,0,41,0,0,Caucasian,0\n\
               7,1,30,1,0,Hispanic,1\n";
    let schema = CsvSchema::parse(
        "features = priors_count,charge_degree,age,juv_fel_count,juv_misd_count\n\
         sensitive = race\n\
         sensitive_positive = African-American\n\
         outcome = high_risk\n",
    )
    .unwrap();
    let ds = load_csv_from(csv.as_bytes(), &schema).unwrap();
    assert_eq!(ds.dim(), 5);
    assert_eq!(ds.len(), 3);
    let s: Vec<Sign> = ds.samples().iter().map(|x| x.s).collect();
    assert_eq!(s, vec![Sign::Pos, Sign::Neg, Sign::Neg]);
    assert_eq!(ds.samples()[2].y, Sign::Pos);
}
