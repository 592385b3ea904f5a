//! Closed-form links between certificate strength, severity and mass, plus the
//! weighted disparity ratios and subgroup profiles used in reports.

use serde::{Deserialize, Serialize};

use crate::error::{MdfaError, Result};
use crate::types::{AuditDataset, Sign, WeightVector};

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MdfaError::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// Certificate strength for a subgroup of mass `alpha` with log-severity `delta`:
/// `alpha * (e^delta / (1 + e^delta) - 1/2)`.
pub fn gamma_from_delta(delta: f64, alpha: f64) -> Result<f64> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(MdfaError::InvalidArgument(format!(
            "delta must be finite and nonnegative, got {delta}"
        )));
    }
    check_alpha(alpha)?;
    // e^d/(1+e^d) - 1/2 == tanh(d/2)/2, without overflow for large d
    Ok(0.5 * alpha * (0.5 * delta).tanh())
}

/// Inverse of [`gamma_from_delta`] in its first argument.
pub fn delta_from_gamma(gamma: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(gamma >= 0.0) {
        return Err(MdfaError::InvalidArgument(format!(
            "gamma must be nonnegative, got {gamma}"
        )));
    }
    let limit = 0.5 * alpha;
    if gamma >= limit {
        return Err(MdfaError::UnboundedDivergence { gamma, limit });
    }
    Ok(2.0 * (gamma / limit).atanh())
}

/// Weighted ratio `P[Y=1 | S=s, G] / P[Y=1 | S!=s, G]` over the members of `G`.
pub fn disparate_treatment(
    dataset: &AuditDataset,
    weights: &WeightVector,
    members: &[bool],
    s: Sign,
) -> Result<f64> {
    outcome_rate_ratio(dataset, weights, members, s, Sign::Pos)
}

/// Same as [`disparate_treatment`] for an arbitrary outcome value `y`.
pub fn outcome_rate_ratio(
    dataset: &AuditDataset,
    weights: &WeightVector,
    members: &[bool],
    s: Sign,
    y: Sign,
) -> Result<f64> {
    weights.check_len(dataset.len())?;
    if members.len() != dataset.len() {
        return Err(MdfaError::DimensionMismatch {
            expected: dataset.len(),
            actual: members.len(),
        });
    }
    // [S = s, S != s] x [all, Y = y]
    let mut mass = [[0.0f64; 2]; 2];
    for ((smp, &u), _) in dataset
        .samples()
        .iter()
        .zip(weights.as_slice())
        .zip(members)
        .filter(|(_, &m)| m)
    {
        let g = usize::from(smp.s != s);
        mass[g][0] += u;
        if smp.y == y {
            mass[g][1] += u;
        }
    }
    let names = [format!("S = {s}"), format!("S = {}", s.flip())];
    for g in 0..2 {
        if mass[g][0] <= 0.0 {
            return Err(MdfaError::DegenerateSubgroup(format!(
                "{} within subgroup",
                names[g]
            )));
        }
    }
    if mass[1][1] <= 0.0 {
        return Err(MdfaError::DegenerateSubgroup(format!(
            "Y = {y} and {} within subgroup",
            names[1]
        )));
    }
    Ok((mass[0][1] / mass[0][0]) / (mass[1][1] / mass[1][0]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub mean: f64,
    pub std: f64,
}

/// Weighted moments of one sensitive group inside one population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMoments {
    pub count: usize,
    pub features: Vec<Moment>,
    /// Moments of the indicator `Y = +1`.
    pub outcome: Moment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitiveSplit {
    pub positive: Option<GroupMoments>,
    pub negative: Option<GroupMoments>,
}

/// Per-feature and outcome moments by sensitive value, inside the subgroup and
/// over the full population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupProfile {
    pub feature_names: Vec<String>,
    pub subgroup: SensitiveSplit,
    pub population: SensitiveSplit,
}

fn moments(dataset: &AuditDataset, weights: &[f64], keep: impl Fn(usize) -> bool) -> Option<GroupMoments> {
    let d = dataset.dim();
    let mut w_sum = 0.0;
    let mut count = 0usize;
    let mut mean = vec![0.0; d + 1];
    for (i, smp) in dataset.samples().iter().enumerate() {
        if !keep(i) || weights[i] <= 0.0 {
            continue;
        }
        let w = weights[i];
        count += 1;
        w_sum += w;
        for (m, v) in mean.iter_mut().zip(&smp.x) {
            *m += w * v;
        }
        if smp.y == Sign::Pos {
            mean[d] += w;
        }
    }
    if count == 0 {
        return None;
    }
    mean.iter_mut().for_each(|m| *m /= w_sum);
    let mut var = vec![0.0; d + 1];
    for (i, smp) in dataset.samples().iter().enumerate() {
        if !keep(i) || weights[i] <= 0.0 {
            continue;
        }
        let w = weights[i];
        for j in 0..d {
            var[j] += w * (smp.x[j] - mean[j]).powi(2);
        }
        let yv = if smp.y == Sign::Pos { 1.0 } else { 0.0 };
        var[d] += w * (yv - mean[d]).powi(2);
    }
    let mom: Vec<Moment> = mean
        .iter()
        .zip(&var)
        .map(|(&m, &v)| Moment {
            mean: m,
            std: (v / w_sum).max(0.0).sqrt(),
        })
        .collect();
    Some(GroupMoments {
        count,
        features: mom[..d].to_vec(),
        outcome: mom[d],
    })
}

/// Unweighted profile of a subgroup.
pub fn subgroup_profile(dataset: &AuditDataset, members: &[bool]) -> Result<SubgroupProfile> {
    subgroup_profile_weighted(dataset, &WeightVector::uniform(dataset.len()), members)
}

pub fn subgroup_profile_weighted(
    dataset: &AuditDataset,
    weights: &WeightVector,
    members: &[bool],
) -> Result<SubgroupProfile> {
    weights.check_len(dataset.len())?;
    if members.len() != dataset.len() {
        return Err(MdfaError::DimensionMismatch {
            expected: dataset.len(),
            actual: members.len(),
        });
    }
    let u = weights.as_slice();
    if !members.iter().zip(u).any(|(&m, &w)| m && w > 0.0) {
        return Err(MdfaError::DegenerateSubgroup("subgroup is empty".into()));
    }
    let samples = dataset.samples();
    let split = |inside: &dyn Fn(usize) -> bool| SensitiveSplit {
        positive: moments(dataset, u, |i| inside(i) && samples[i].s == Sign::Pos),
        negative: moments(dataset, u, |i| inside(i) && samples[i].s == Sign::Neg),
    };
    Ok(SubgroupProfile {
        feature_names: dataset.feature_names().to_vec(),
        subgroup: split(&|i| members[i]),
        population: split(&|_| true),
    })
}
