//! Substrate expectation under the prior, quantile thresholding on the
//! calibration split, and lesion reconstruction.

use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{sigmoid, softplus, Dlm};
use super::train::batch_of;
use super::{DlmError, LabelKind};
use crate::grids::VolumeGrid;
use crate::rng::rng;
use crate::simulate::Dataset;

/// Threshold grid t = 0.01, 0.02, ..., 0.99.
pub const THRESHOLD_STEPS: usize = 99;

pub fn threshold_grid() -> Vec<f64> {
    (1..=THRESHOLD_STEPS).map(|i| i as f64 / 100.0).collect()
}

/// Voxels kept above the quantile level `i / 100`: ceil((1 - t) V).
pub fn quantile_keep(step: usize, voxels: usize) -> usize {
    ((100 - step) * voxels).div_ceil(100)
}

/// Mean raw substrate decoder output over `z_i ~ N(0, I)` (mean channel for
/// Gaussian labels).
pub fn expected_gamma(model: &mut Dlm, n_samples: usize, seed: u64) -> Result<Vec<f64>, DlmError> {
    if n_samples == 0 {
        return Err(DlmError::Config("n_samples must be >= 1".into()));
    }
    let l = model.config().latent_dim;
    let mut g = rng(seed);
    let z: Vec<f64> = (0..n_samples * l).map(|_| g.sample(StandardNormal)).collect();
    Ok(mean_gamma(model, &z))
}

/// Mean raw substrate map over the rows of `z`.
pub fn mean_gamma(model: &mut Dlm, z: &[f64]) -> Vec<f64> {
    let l = model.config().latent_dim;
    let v = model.config().voxels();
    let gc = model.gamma_channels();
    let n = z.len() / l;
    let mut acc = vec![0.0; v];
    // bounded chunks keep activations small
    for chunk in z.chunks(16 * l) {
        let out = model.decode_substrate(chunk);
        for row in out.chunks(v * gc) {
            for (a, px) in acc.iter_mut().zip(row.chunks(gc)) {
                *a += px[0];
            }
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Inferred substrate map in [0, 1]: logistic of the prior-averaged raw map.
pub fn infer_substrate(model: &mut Dlm, n_samples: usize, seed: u64) -> Result<VolumeGrid, DlmError> {
    let raw = expected_gamma(model, n_samples, seed)?;
    let m: Vec<f64> = raw.into_iter().map(sigmoid).collect();
    VolumeGrid::real_from_f64(&model.config().dims, &m).map_err(|e| DlmError::Shape(e.to_string()))
}

/// Top `keep` voxels of `map` (ties broken by lower index).
pub fn top_k_mask(map: &[f64], keep: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
    let mut mask = vec![false; map.len()];
    for &i in &order[..keep.min(map.len())] {
        mask[i] = true;
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferredSubstrate {
    pub mean_map: VolumeGrid,
    pub threshold: f64,
    pub binary_map: VolumeGrid,
    /// Calibration log-likelihood per grid threshold.
    pub scores: Vec<f64>,
}

/// Two-parameter readout `a * <x, b> + c` through the label likelihood,
/// where `b` is a binary map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileReadout {
    pub kind: LabelKind,
    pub a: f64,
    pub c: f64,
    /// Gaussian residual scale; unused for Bernoulli labels.
    pub sigma: f64,
}

const RIDGE: f64 = 1e-3;

impl ProfileReadout {
    /// Fits by penalized maximum likelihood on overlap counts `s`.
    pub fn fit(kind: LabelKind, s: &[f64], y: &[f64], sigma_floor: f64) -> Self {
        match kind {
            LabelKind::Bernoulli => {
                let (mut a, mut c) = (0.0, 0.0);
                for _ in 0..100 {
                    // Newton step on the ridge-penalized log-likelihood
                    let (mut ga, mut gc) = (-RIDGE * a, -RIDGE * c);
                    let (mut haa, mut hac, mut hcc) = (RIDGE, 0.0, RIDGE);
                    for (&si, &yi) in s.iter().zip(y) {
                        let p = sigmoid(a * si + c);
                        let w = p * (1.0 - p);
                        ga += (yi - p) * si;
                        gc += yi - p;
                        haa += w * si * si;
                        hac += w * si;
                        hcc += w;
                    }
                    let det = haa * hcc - hac * hac;
                    let da = (hcc * ga - hac * gc) / det;
                    let dc = (haa * gc - hac * ga) / det;
                    a += da;
                    c += dc;
                    if da.abs() + dc.abs() < 1e-10 {
                        break;
                    }
                }
                Self {
                    kind,
                    a,
                    c,
                    sigma: 1.0,
                }
            }
            LabelKind::Gaussian => {
                let n = s.len() as f64;
                let ms = s.iter().sum::<f64>() / n;
                let my = y.iter().sum::<f64>() / n;
                let sxy: f64 = s.iter().zip(y).map(|(a, b)| (a - ms) * (b - my)).sum();
                let sxx: f64 = s.iter().map(|a| (a - ms) * (a - ms)).sum::<f64>() + RIDGE;
                let a = sxy / sxx;
                let c = my - a * ms;
                let rss: f64 = s.iter().zip(y).map(|(si, yi)| (yi - a * si - c).powi(2)).sum();
                Self {
                    kind,
                    a,
                    c,
                    sigma: (rss / n).sqrt().max(sigma_floor),
                }
            }
        }
    }

    pub fn loglik(&self, s: f64, y: f64) -> f64 {
        let t = self.a * s + self.c;
        match self.kind {
            LabelKind::Bernoulli => y * t - softplus(t),
            LabelKind::Gaussian => {
                let r = (y - t) / self.sigma;
                -0.5 * (2.0 * std::f64::consts::PI).ln() - self.sigma.ln() - 0.5 * r * r
            }
        }
    }
}

fn overlaps(dataset: &Dataset, idx: &[usize], mask: &[bool]) -> Vec<f64> {
    idx.iter()
        .map(|&i| {
            let x = &dataset.lesions[i];
            mask.iter()
                .enumerate()
                .filter(|&(k, &m)| m && x.get(k) != 0.0)
                .count() as f64
        })
        .collect()
}

/// Scans the threshold grid. At each level the binarized map replaces the
/// substrate in a two-parameter readout fitted on the training split; the
/// level with the highest calibration log-likelihood wins (first on ties).
pub fn calibrate_threshold(
    mean_map: &VolumeGrid,
    label_kind: LabelKind,
    sigma_floor: f64,
    dataset: &Dataset,
) -> Result<InferredSubstrate, DlmError> {
    if dataset.splits.calibration.is_empty() {
        return Err(DlmError::Config("calibration split is empty".into()));
    }
    if dataset.dims() != mean_map.dims() {
        return Err(DlmError::Shape("map and dataset dims differ".into()));
    }
    let map = mean_map.to_f64();
    let v = map.len();
    let y = |idx: &[usize]| idx.iter().map(|&i| dataset.labels[i]).collect::<Vec<_>>();
    let (y_train, y_cal) = (y(&dataset.splits.train), y(&dataset.splits.calibration));
    let mut scores = Vec::with_capacity(THRESHOLD_STEPS);
    let mut best = (f64::NEG_INFINITY, 1, vec![]);
    for step in 1..=THRESHOLD_STEPS {
        let mask = top_k_mask(&map, quantile_keep(step, v));
        let s_train = overlaps(dataset, &dataset.splits.train, &mask);
        let fit = ProfileReadout::fit(label_kind, &s_train, &y_train, sigma_floor);
        let s_cal = overlaps(dataset, &dataset.splits.calibration, &mask);
        let ll: f64 = s_cal.iter().zip(&y_cal).map(|(&s, &y)| fit.loglik(s, y)).sum();
        scores.push(ll);
        if ll > best.0 {
            best = (ll, step, mask);
        }
    }
    let (_, step, mask) = best;
    let mask = if mask.is_empty() {
        top_k_mask(&map, quantile_keep(step, v))
    } else {
        mask
    };
    Ok(InferredSubstrate {
        mean_map: mean_map.clone(),
        threshold: step as f64 / 100.0,
        binary_map: VolumeGrid::from_mask(mean_map.dims(), &mask)
            .map_err(|e| DlmError::Shape(e.to_string()))?,
        scores,
    })
}

/// Lesion decoder probabilities at the posterior mean of `(x, y)`.
pub fn reconstruct(model: &mut Dlm, x: &VolumeGrid, y: f64) -> Result<VolumeGrid, DlmError> {
    let batch = super::Batch {
        lesions: x.to_f64(),
        labels: vec![y],
    };
    let (mu, _) = model.encode(&batch)?;
    let p: Vec<f64> = model.decode_lesion(&mu).into_iter().map(sigmoid).collect();
    VolumeGrid::real_from_f64(x.dims(), &p).map_err(|e| DlmError::Shape(e.to_string()))
}

/// Reconstructions for the samples at `idx`, binarized at 0.5.
pub fn reconstruct_binary(
    model: &mut Dlm,
    dataset: &Dataset,
    idx: &[usize],
) -> Result<Vec<VolumeGrid>, DlmError> {
    let v = model.config().voxels();
    let dims = model.config().dims.clone();
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(16) {
        let batch = batch_of(dataset, chunk);
        let (mu, _) = model.encode(&batch)?;
        let logits = model.decode_lesion(&mu);
        for row in logits.chunks(v) {
            let mask: Vec<bool> = row.iter().map(|&t| t > 0.0).collect();
            out.push(VolumeGrid::from_mask(&dims, &mask).map_err(|e| DlmError::Shape(e.to_string()))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlm::DlmConfig;
    use crate::simulate::LabelType;

    fn tiny_model(seed: u64) -> Dlm {
        Dlm::new(DlmConfig {
            dims: vec![8, 8],
            latent_dim: 3,
            base_channels: 2,
            levels: 3,
            rng_seed: seed,
            ..DlmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn quantile_counts() {
        assert_eq!(quantile_keep(99, 1024), 11);
        assert_eq!(quantile_keep(99, 100), 1);
        assert_eq!(quantile_keep(50, 1024), 512);
        assert_eq!(quantile_keep(1, 64), 64);
        let map: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64).collect();
        for step in 1..=99 {
            let k = quantile_keep(step, 64);
            let m = top_k_mask(&map, k);
            assert_eq!(m.iter().filter(|&&b| b).count(), k);
            let floor = (0..64).filter(|&i| m[i]).map(|i| map[i]).fold(f64::INFINITY, f64::min);
            assert!((0..64).filter(|&i| !m[i]).all(|i| map[i] < floor));
        }
    }

    #[test]
    fn single_sample_is_decoder_activation() {
        let mut m = tiny_model(1);
        let z = vec![0.3, -1.0, 0.5];
        let raw = m.decode_substrate(&z);
        let map = mean_gamma(&mut m, &z);
        assert_eq!(map, raw);
        let inferred = infer_substrate(&mut m, 8, 2).unwrap();
        assert!(inferred.to_f64().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn more_samples_reduce_variance() {
        let mut m = tiny_model(3);
        let var = |m: &mut Dlm, n: usize| {
            let maps: Vec<Vec<f64>> = (0..20)
                .map(|r| infer_substrate(m, n, 100 + r).unwrap().to_f64())
                .collect();
            let v = maps[0].len();
            (0..v)
                .map(|k| {
                    let mean = maps.iter().map(|mp| mp[k]).sum::<f64>() / 20.0;
                    maps.iter().map(|mp| (mp[k] - mean).powi(2)).sum::<f64>() / 19.0
                })
                .sum::<f64>()
                / v as f64
        };
        assert!(var(&mut m, 64) < var(&mut m, 8));
    }

    fn planted(seed: u64) -> (Dataset, Vec<bool>) {
        let mut g = rng(seed);
        let dims = [8usize, 8];
        let plant: Vec<bool> = (0..64).map(|i| (2..5).contains(&(i / 8)) && (3..6).contains(&(i % 8))).collect();
        let mut lesions = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..200 {
            let bits: Vec<u8> = (0..64).map(|_| u8::from(g.gen::<f64>() < 0.15)).collect();
            let hit = bits.iter().zip(&plant).any(|(&b, &p)| b == 1 && p);
            labels.push(f64::from(u8::from(hit)));
            lesions.push(VolumeGrid::binary(&dims, bits).unwrap());
        }
        let d = Dataset::new(lesions, labels, LabelType::Binary, vec![0; 200], seed).unwrap();
        (d, plant)
    }

    #[test]
    fn chosen_threshold_is_grid_argmax() {
        let (d, plant) = planted(5);
        let mut g = rng(6);
        let map: Vec<f64> = plant
            .iter()
            .map(|&p| if p { 0.7 } else { 0.3 } + 0.2 * g.gen::<f64>())
            .collect();
        let grid = VolumeGrid::real_from_f64(&[8, 8], &map).unwrap();
        let inf = calibrate_threshold(&grid, LabelKind::Bernoulli, 1e-3, &d).unwrap();
        let best = inf.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let step = (inf.threshold * 100.0).round() as usize;
        assert_eq!(inf.scores[step - 1], best);
        assert_eq!(inf.binary_map.count_nonzero(), quantile_keep(step, 64));
    }

    #[test]
    fn planted_map_local_optimum() {
        let (d, plant) = planted(7);
        // monotone map: plant high, ramp elsewhere
        let map: Vec<f64> = (0..64)
            .map(|i| if plant[i] { 0.9 + i as f64 * 1e-4 } else { i as f64 / 200.0 })
            .collect();
        let grid = VolumeGrid::real_from_f64(&[8, 8], &map).unwrap();
        let inf = calibrate_threshold(&grid, LabelKind::Bernoulli, 1e-3, &d).unwrap();
        let dice = |m: &[bool]| {
            let inter = m.iter().zip(&plant).filter(|(a, b)| **a && **b).count() as f64;
            let total = (m.iter().filter(|&&a| a).count() + plant.iter().filter(|&&a| a).count()) as f64;
            2.0 * inter / total
        };
        let step = (inf.threshold * 100.0).round() as usize;
        let chosen = dice(&inf.binary_map.mask());
        for nb in [step.saturating_sub(1), step + 1] {
            if (1..=THRESHOLD_STEPS).contains(&nb) {
                let m = top_k_mask(&map, quantile_keep(nb, 64));
                assert!(chosen >= dice(&m), "t={} dice {chosen} < neighbour {nb}", inf.threshold);
            }
        }
    }

    #[test]
    fn gaussian_profile_fit_recovers_line() {
        let s: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = s.iter().map(|v| 0.5 - 0.01 * v).collect();
        let f = ProfileReadout::fit(LabelKind::Gaussian, &s, &y, 1e-3);
        assert!((f.a + 0.01).abs() < 1e-6 && (f.c - 0.5).abs() < 1e-5);
        assert_eq!(f.sigma, 1e-3);
    }

    #[test]
    fn reconstruction_is_probability_and_deterministic() {
        let mut m = tiny_model(4);
        let bits: Vec<u8> = (0..64).map(|i| u8::from(i % 5 == 0)).collect();
        let x = VolumeGrid::binary(&[8, 8], bits).unwrap();
        let a = reconstruct(&mut m, &x, 1.0).unwrap();
        let b = reconstruct(&mut m, &x, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(a.to_f64().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn empty_calibration_is_rejected() {
        let (mut d, _) = planted(8);
        d.splits.calibration.clear();
        let grid = VolumeGrid::real_from_f64(&[8, 8], &[0.5; 64]).unwrap();
        assert!(calibrate_threshold(&grid, LabelKind::Bernoulli, 1e-3, &d).is_err());
    }
}
