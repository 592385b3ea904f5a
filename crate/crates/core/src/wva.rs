//! The worst-violation loop: refit the certifier while escalating the weight of
//! samples that argue against the violation, so the certificate shrinks toward
//! the sub-population where the disparity is most severe.

use crate::certify::{
    certificate_labels, delta_of_indicators, fit_on_features, gamma_of_indicators, prepare,
    support_cells, CertifierModel, CertifierSettings, Prepared,
};
use crate::error::{MdfaError, Result};
use crate::metrics::{outcome_rate_ratio, subgroup_profile};
use crate::rebalance::WeightScheme;
use crate::types::{AuditConfig, AuditDataset, Certificate, Sign, TraceRow, ViolationReport, WeightVector};

/// Loop state after iteration `t`.
#[derive(Clone, Debug)]
pub struct WvaState {
    pub t: usize,
    /// Per training sample; starts at 1 and only grows.
    pub multipliers: Vec<f64>,
    pub model: Option<CertifierModel>,
    /// Held-out estimate at iterate `t`.
    pub delta_hat: Option<f64>,
    /// Training-split mass that drives the stopping rule.
    pub alpha_hat: f64,
    pub trace: Vec<TraceRow>,
}

impl WvaState {
    pub fn new(n_train: usize) -> WvaState {
        WvaState {
            t: 0,
            multipliers: vec![1.0; n_train],
            model: None,
            delta_hat: None,
            alpha_hat: 1.0,
            trace: Vec::new(),
        }
    }

    /// Adds `xi` to every sample with `y_i = target_y` and `s_i != target_s`.
    pub fn escalate(&mut self, train: &AuditDataset, xi: f64, target_y: Sign, target_s: Sign) {
        for (m, smp) in self.multipliers.iter_mut().zip(train.samples()) {
            if smp.y == target_y && smp.s != target_s {
                *m += xi;
            }
        }
    }
}

/// Weighted fraction of the sample with `c = 1` and `Y = target_y`.
pub fn wva_alpha_hat(
    dataset: &AuditDataset,
    weights: &WeightVector,
    model: &CertifierModel,
    target_y: Sign,
) -> Result<f64> {
    let c = model.indicators_for(dataset)?;
    alpha_of_indicators(dataset, weights, &c, target_y)
}

pub(crate) fn alpha_of_indicators(
    dataset: &AuditDataset,
    weights: &WeightVector,
    indicators: &[bool],
    target_y: Sign,
) -> Result<f64> {
    weights.check_len(dataset.len())?;
    let (a, b, total) = support_cells(dataset, weights.as_slice(), indicators, target_y, Sign::Pos);
    Ok((a + b) / total)
}

pub fn wva_run(
    train: &AuditDataset,
    test: &AuditDataset,
    config: &AuditConfig,
    target_y: Sign,
    target_s: Sign,
    scheme: &WeightScheme,
) -> Result<ViolationReport> {
    let prep = prepare(train, test, config, target_s, scheme)?;
    run_prepared(train, test, &prep, config, target_y, target_s)
}

struct Candidate {
    t: usize,
    model: CertifierModel,
    delta: f64,
    alpha: f64,
    indicators: Vec<bool>,
}

pub(crate) fn run_prepared(
    train: &AuditDataset,
    test: &AuditDataset,
    prep: &Prepared,
    config: &AuditConfig,
    target_y: Sign,
    target_s: Sign,
) -> Result<ViolationReport> {
    let labels = certificate_labels(train, target_y, target_s);
    let settings = CertifierSettings::from_config(config);
    let mut state = WvaState::new(train.len());
    let mut best: Option<Candidate> = None;
    let mut last_gap = None;
    let mut crossed_floor = false;
    for t in 1..=config.max_iterations {
        let fit = fit_on_features(
            &prep.phi_train,
            &prep.w_train,
            &labels,
            &prep.map,
            settings,
            Some(&state.multipliers),
            state.model.as_ref(),
        )?;
        // the stopping mass comes from the training split so that the
        // held-out estimate of the reported iterate is not selected on its own noise
        let alpha = alpha_of_indicators(train, &prep.w_train, &fit.model.indicators(&prep.phi_train), target_y)?;
        let c = fit.model.indicators(&prep.phi_test);
        let delta = match delta_of_indicators(test, &prep.w_test, &c, target_y, target_s) {
            Ok(d) => Some(d),
            Err(e @ MdfaError::UnboundedDivergenceInSample { .. }) => {
                last_gap = Some(e);
                None
            }
            Err(e) => return Err(e),
        };
        state.t = t;
        state.alpha_hat = alpha;
        state.delta_hat = delta;
        state.trace.push(TraceRow { t, delta_hat: delta, alpha_hat: alpha });
        if alpha <= config.alpha_floor {
            if t == 1 {
                return Err(MdfaError::FloorTooHigh { alpha_hat: alpha, floor: config.alpha_floor });
            }
            crossed_floor = true;
            break;
        }
        if let Some(d) = delta {
            let alpha = alpha_of_indicators(test, &prep.w_test, &c, target_y)?;
            best = Some(Candidate { t, model: fit.model.clone(), delta: d, alpha, indicators: c });
        }
        state.model = Some(fit.model);
        state.escalate(train, config.xi, target_y, target_s);
    }
    let Some(best) = best else {
        return Err(last_gap.unwrap_or(MdfaError::EmptyCertificateSupport { target_y: target_y.as_i8() }));
    };
    let (gamma_hat, support_mass) =
        gamma_of_indicators(test, &prep.w_test, &best.indicators, target_y, target_s)?;
    let dt_g = outcome_rate_ratio(test, &prep.w_test, &best.indicators, target_s, target_y)?;
    let profile = subgroup_profile(test, &best.indicators)?;
    Ok(ViolationReport {
        delta_m: best.delta,
        alpha: best.alpha,
        reported_iteration: best.t,
        certificate: Certificate {
            model: best.model,
            target_y,
            target_s,
            gamma_hat,
            support_mass,
        },
        trace: state.trace,
        profile,
        dt_g,
        crossed_floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::certify;
    use crate::data::{generate_synthetic, split, SyntheticSpec};
    use crate::types::AuditSample;

    #[test]
    fn escalation_touches_only_disagreeing_target_outcomes() {
        let samples = vec![
            AuditSample { x: vec![0.0], s: Sign::Pos, y: Sign::Pos },
            AuditSample { x: vec![0.0], s: Sign::Neg, y: Sign::Pos },
            AuditSample { x: vec![0.0], s: Sign::Pos, y: Sign::Neg },
            AuditSample { x: vec![0.0], s: Sign::Neg, y: Sign::Neg },
        ];
        let ds = AuditDataset::new(samples, vec!["x".into()]).unwrap();
        let mut st = WvaState::new(4);
        st.escalate(&ds, 0.5, Sign::Pos, Sign::Pos);
        st.escalate(&ds, 0.5, Sign::Pos, Sign::Pos);
        assert_eq!(st.multipliers, vec![1.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn alpha_hat_examples() {
        let samples = vec![
            AuditSample { x: vec![0.0], s: Sign::Pos, y: Sign::Pos },
            AuditSample { x: vec![1.0], s: Sign::Neg, y: Sign::Pos },
            AuditSample { x: vec![2.0], s: Sign::Pos, y: Sign::Neg },
            AuditSample { x: vec![3.0], s: Sign::Neg, y: Sign::Neg },
        ];
        let ds = AuditDataset::new(samples, vec!["x".into()]).unwrap();
        let w = WeightVector::uniform(4);
        assert_eq!(alpha_of_indicators(&ds, &w, &[true; 4], Sign::Pos).unwrap(), 0.5);
        assert_eq!(alpha_of_indicators(&ds, &w, &[false; 4], Sign::Pos).unwrap(), 0.0);
        let only_pos: Vec<AuditSample> = (0..4)
            .map(|i| AuditSample { x: vec![i as f64], s: Sign::from_f64(i as f64 - 1.5), y: Sign::Pos })
            .collect();
        let mut with_neg = only_pos.clone();
        with_neg.push(AuditSample { x: vec![9.0], s: Sign::Pos, y: Sign::Neg });
        let ds = AuditDataset::new(with_neg, vec!["x".into()]).unwrap();
        let w = WeightVector::new(vec![1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(alpha_of_indicators(&ds, &w, &[true; 5], Sign::Pos).unwrap(), 1.0);
    }

    #[test]
    fn zero_escalation_reproduces_one_shot_certificate() {
        let data = generate_synthetic(&SyntheticSpec::with_delta(600, 0.0, 2.0, 3)).unwrap();
        let (train, test) = split(&data.dataset, 0.7, 1).unwrap();
        let config = AuditConfig { xi: 0.0, max_iterations: 3, feature_map_dim: 32, alpha_floor: 0.01, ..AuditConfig::default() };
        let scheme = WeightScheme::uniform();
        let one = certify(&train, &test, &config, Sign::Pos, Sign::Pos, &scheme).unwrap();
        let report = wva_run(&train, &test, &config, Sign::Pos, Sign::Pos, &scheme).unwrap();
        assert_eq!(report.trace.len(), 3);
        assert_eq!(report.trace[0].delta_hat, report.trace[2].delta_hat);
        assert_eq!(report.certificate.model, one.model);
        assert_eq!(report.certificate.gamma_hat, one.gamma_hat);
    }

    #[test]
    fn floor_above_first_iterate_is_rejected() {
        let data = generate_synthetic(&SyntheticSpec::with_delta(600, 0.0, 2.0, 4)).unwrap();
        let (train, test) = split(&data.dataset, 0.7, 1).unwrap();
        let config = AuditConfig { alpha_floor: 0.99, feature_map_dim: 32, ..AuditConfig::default() };
        let r = wva_run(&train, &test, &config, Sign::Pos, Sign::Pos, &WeightScheme::uniform());
        assert!(matches!(r, Err(MdfaError::FloorTooHigh { .. })), "{r:?}");
    }
}
