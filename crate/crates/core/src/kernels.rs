//! Explicit feature maps, the kernels they induce, and the weighted
//! maximum-mean-discrepancy between the two sensitive groups.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MdfaError, Result};
use crate::types::{AuditDataset, Bandwidth, Sign, WeightVector};

/// Feature map phi with k(x, x') = <phi(x), phi(x')>.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureMap {
    Identity {
        input_dim: usize,
    },
    Standardized {
        means: Vec<f64>,
        scales: Vec<f64>,
    },
    /// Random Fourier features for the Gaussian kernel with the given bandwidth.
    /// Each frequency contributes a (cos, sin) pair scaled so that ||phi(x)|| = 1.
    RandomFourier {
        input_dim: usize,
        bandwidth: f64,
        /// Row-major `n_freq x input_dim`.
        frequencies: Vec<f64>,
    },
}

impl FeatureMap {
    pub fn identity(input_dim: usize) -> FeatureMap {
        FeatureMap::Identity { input_dim }
    }

    /// Z-score map fitted on `dataset`; constant columns are left unscaled.
    pub fn standardized(dataset: &AuditDataset) -> FeatureMap {
        let d = dataset.dim();
        let n = dataset.len() as f64;
        let mut means = vec![0.0; d];
        for s in dataset.samples() {
            for (m, v) in means.iter_mut().zip(&s.x) {
                *m += v / n;
            }
        }
        let mut scales = vec![0.0; d];
        for s in dataset.samples() {
            for j in 0..d {
                scales[j] += (s.x[j] - means[j]).powi(2) / n;
            }
        }
        for sc in &mut scales {
            *sc = if *sc > 0.0 { sc.sqrt() } else { 1.0 };
        }
        FeatureMap::Standardized { means, scales }
    }

    pub fn random_fourier(input_dim: usize, dim: usize, bandwidth: f64, seed: u64) -> Result<FeatureMap> {
        if dim < 2 || dim % 2 != 0 {
            return Err(MdfaError::InvalidArgument(format!(
                "random Fourier dimension must be even and >= 2, got {dim}"
            )));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(MdfaError::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..dim / 2 * input_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / bandwidth
            })
            .collect();
        Ok(FeatureMap::RandomFourier {
            input_dim,
            bandwidth,
            frequencies,
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { input_dim } => *input_dim,
            FeatureMap::Standardized { means, .. } => means.len(),
            FeatureMap::RandomFourier { input_dim, .. } => *input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { input_dim } => *input_dim,
            FeatureMap::Standardized { means, .. } => means.len(),
            FeatureMap::RandomFourier {
                input_dim,
                frequencies,
                ..
            } => 2 * frequencies.len() / input_dim.max(&1),
        }
    }

    /// Writes phi(x) into `out`, which must have length `output_dim()`.
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            FeatureMap::Identity { .. } => out.copy_from_slice(x),
            FeatureMap::Standardized { means, scales } => {
                for j in 0..x.len() {
                    out[j] = (x[j] - means[j]) / scales[j];
                }
            }
            FeatureMap::RandomFourier {
                input_dim,
                frequencies,
                ..
            } => {
                let n_freq = out.len() / 2;
                let scale = (1.0 / n_freq as f64).sqrt();
                let (cos_part, sin_part) = out.split_at_mut(n_freq);
                for (j, w) in frequencies.chunks_exact(*input_dim).enumerate() {
                    let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
                    let (s, c) = z.sin_cos();
                    cos_part[j] = scale * c;
                    sin_part[j] = scale * s;
                }
            }
        }
    }

    pub fn transform(&self, dataset: &AuditDataset) -> Result<FeatureMatrix> {
        if dataset.dim() != self.input_dim() {
            return Err(MdfaError::DimensionMismatch {
                expected: self.input_dim(),
                actual: dataset.dim(),
            });
        }
        let rows: Vec<&[f64]> = dataset.samples().iter().map(|s| s.x.as_slice()).collect();
        Ok(self.transform_rows(&rows))
    }

    pub(crate) fn transform_rows(&self, rows: &[&[f64]]) -> FeatureMatrix {
        let cols = self.output_dim();
        let mut data = vec![0.0; rows.len() * cols];
        // rows are independent, so the parallel fill is bit-identical to a sequential one
        data.par_chunks_mut(cols.max(1))
            .zip(rows.par_iter())
            .for_each(|(out, x)| self.apply_into(x, out));
        FeatureMatrix {
            rows: rows.len(),
            cols,
            data,
        }
    }
}

/// phi(x) for a single input vector.
pub fn apply_map(map: &FeatureMap, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != map.input_dim() {
        return Err(MdfaError::DimensionMismatch {
            expected: map.input_dim(),
            actual: x.len(),
        });
    }
    let mut out = vec![0.0; map.output_dim()];
    map.apply_into(x, &mut out);
    Ok(out)
}

/// exp(-||x - x'||^2 / (2 bandwidth^2))
pub fn gaussian_kernel(x: &[f64], z: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

/// Dense row-major matrix of mapped features, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// out[i] = <row_i, v>
    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, v);
        }
    }

    /// out = sum_i r[i] * row_i, accumulated in row order.
    pub fn tmul_vec(&self, r: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&ri, row) in r.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if ri != 0.0 {
                axpy(ri, row, out);
            }
        }
    }

    /// Matrix restricted to the given rows.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Median Euclidean distance over `n_pairs` random distinct pairs.
pub fn median_heuristic(dataset: &AuditDataset, n_pairs: usize, seed: u64) -> f64 {
    let n = dataset.len();
    if n < 2 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = dataset.samples();
    let mut dists: Vec<f64> = (0..n_pairs)
        .map(|_| {
            let pair = sample_indices(&mut rng, n, 2);
            let (i, j) = (pair.index(0), pair.index(1));
            samples[i]
                .x
                .iter()
                .zip(&samples[j].x)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let med = if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Concrete bandwidth for `dataset`; the median heuristic uses 1000 pairs.
pub fn resolve_bandwidth(bandwidth: Bandwidth, dataset: &AuditDataset, seed: u64) -> f64 {
    match bandwidth {
        Bandwidth::Fixed(v) => v,
        Bandwidth::Median { factor } => factor * median_heuristic(dataset, 1000, seed),
    }
}

/// Weighted feature mean of each sensitive group: (group s, complement).
pub(crate) fn group_means(
    features: &FeatureMatrix,
    dataset: &AuditDataset,
    weights: &[f64],
    s: Sign,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = features.cols();
    let mut mean_s = vec![0.0; d];
    let mut mean_c = vec![0.0; d];
    let (mut tot_s, mut tot_c) = (0.0, 0.0);
    for (i, smp) in dataset.samples().iter().enumerate() {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        if smp.s == s {
            axpy(w, features.row(i), &mut mean_s);
            tot_s += w;
        } else {
            axpy(w, features.row(i), &mut mean_c);
            tot_c += w;
        }
    }
    if tot_s <= 0.0 {
        return Err(MdfaError::ZeroGroupWeight(s.as_i8()));
    }
    if tot_c <= 0.0 {
        return Err(MdfaError::ZeroGroupWeight(s.flip().as_i8()));
    }
    mean_s.iter_mut().for_each(|v| *v /= tot_s);
    mean_c.iter_mut().for_each(|v| *v /= tot_c);
    Ok((mean_s, mean_c))
}

pub(crate) fn mmd_from_features(
    features: &FeatureMatrix,
    dataset: &AuditDataset,
    weights: &WeightVector,
    s: Sign,
) -> Result<f64> {
    weights.check_len(dataset.len())?;
    let (a, b) = group_means(features, dataset, weights.as_slice(), s)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Distance between the group-normalized weighted feature means of
/// `{S = s}` and `{S != s}`.
pub fn mmd_hat(dataset: &AuditDataset, weights: &WeightVector, s: Sign, map: &FeatureMap) -> Result<f64> {
    let phi = map.transform(dataset)?;
    mmd_from_features(&phi, dataset, weights, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AuditSample;
    use rand::Rng;

    fn dataset(points: &[([f64; 2], i8, i8)]) -> AuditDataset {
        let samples = points
            .iter()
            .map(|&(x, s, y)| {
                AuditSample::new(x.to_vec(), Sign::from_f64(s as f64), Sign::from_f64(y as f64))
                    .unwrap()
            })
            .collect();
        AuditDataset::new(samples, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn identity_map_is_identity() {
        let m = FeatureMap::identity(3);
        assert_eq!(apply_map(&m, &[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(matches!(
            apply_map(&m, &[1.0]),
            Err(MdfaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fourier_features_have_unit_norm() {
        let m = FeatureMap::random_fourier(2, 256, 1.3, 7).unwrap();
        for x in [[0.0, 0.0], [3.0, -1.0], [1e3, 2e-3]] {
            let phi = apply_map(&m, &x).unwrap();
            assert_eq!(phi.len(), 256);
            let n2: f64 = phi.iter().map(|v| v * v).sum();
            assert!((n2 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fourier_map_rejects_odd_dim() {
        assert!(FeatureMap::random_fourier(2, 7, 1.0, 0).is_err());
        assert!(FeatureMap::random_fourier(2, 8, 0.0, 0).is_err());
    }

    #[test]
    fn fourier_map_is_deterministic() {
        let a = FeatureMap::random_fourier(2, 64, 1.0, 11).unwrap();
        let b = FeatureMap::random_fourier(2, 64, 1.0, 11).unwrap();
        assert_eq!(a, b);
        let c = FeatureMap::random_fourier(2, 64, 1.0, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fourier_kernel_approximates_gaussian() {
        let m = FeatureMap::random_fourier(2, 2048, 1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let approx = dot(&apply_map(&m, &x).unwrap(), &apply_map(&m, &z).unwrap());
            let exact = gaussian_kernel(&x, &z, 1.0);
            worst = worst.max((approx - exact).abs());
        }
        assert!(worst <= 0.05, "max abs error {worst}");
    }

    #[test]
    fn mmd_zero_for_identical_groups() {
        let ds = dataset(&[
            ([0.0, 1.0], 1, 1),
            ([2.0, -1.0], 1, -1),
            ([0.0, 1.0], -1, 1),
            ([2.0, -1.0], -1, -1),
        ]);
        let m = FeatureMap::random_fourier(2, 64, 1.0, 0).unwrap();
        let v = mmd_hat(&ds, &WeightVector::uniform(4), Sign::Pos, &m).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn mmd_zero_when_weights_isolate_identical_pair() {
        let ds = dataset(&[
            ([0.5, 0.5], 1, 1),
            ([9.0, 1.0], 1, -1),
            ([0.5, 0.5], -1, 1),
            ([-4.0, 2.0], -1, -1),
        ]);
        let w = WeightVector::new(vec![1.0, 0.0, 3.0, 0.0]).unwrap();
        let m = FeatureMap::random_fourier(2, 64, 1.0, 0).unwrap();
        assert!(mmd_hat(&ds, &w, Sign::Pos, &m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mmd_identity_is_distance_of_means() {
        let ds = dataset(&[
            ([1.0, 0.0], 1, 1),
            ([3.0, 2.0], 1, -1),
            ([0.0, 0.0], -1, 1),
            ([0.0, 4.0], -1, -1),
        ]);
        let w = WeightVector::uniform(4);
        let v = mmd_hat(&ds, &w, Sign::Pos, &FeatureMap::identity(2)).unwrap();
        // means (2,1) vs (0,2)
        assert!((v - 5f64.sqrt()).abs() < 1e-12);
        let v_neg = mmd_hat(&ds, &w, Sign::Neg, &FeatureMap::identity(2)).unwrap();
        assert_eq!(v, v_neg);
    }

    #[test]
    fn mmd_rejects_zero_group_weight() {
        let ds = dataset(&[
            ([1.0, 0.0], 1, 1),
            ([3.0, 2.0], 1, -1),
            ([0.0, 0.0], -1, 1),
            ([0.0, 4.0], -1, -1),
        ]);
        let w = WeightVector::new(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            mmd_hat(&ds, &w, Sign::Pos, &FeatureMap::identity(2)),
            Err(MdfaError::ZeroGroupWeight(-1))
        ));
    }

    #[test]
    fn median_heuristic_of_constant_spacing() {
        let ds = dataset(&[
            ([0.0, 0.0], 1, 1),
            ([1.0, 0.0], -1, -1),
        ]);
        assert_eq!(median_heuristic(&ds, 50, 0), 1.0);
    }

    #[test]
    fn standardized_map_centers_and_scales() {
        let ds = dataset(&[
            ([0.0, 5.0], 1, 1),
            ([2.0, 5.0], -1, -1),
        ]);
        let m = FeatureMap::standardized(&ds);
        assert_eq!(apply_map(&m, &[0.0, 5.0]).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(apply_map(&m, &[2.0, 5.0]).unwrap(), vec![1.0, 0.0]);
    }
}
