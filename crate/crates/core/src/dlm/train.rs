//! Mini-batch Adam with early stopping on validation label likelihood.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ElboTerms, LabelKind, LatentMode, MIN_BATCH};
use super::layers::Mode;
use super::model::{Batch, Dlm};
use super::{DlmConfig, DlmError};
use crate::rng::{derive_seed, rng};
use crate::simulate::{Dataset, LabelType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_label_ll: f64,
    /// Absent when the lesion likelihood is not trained.
    pub train_lesion_ll: Option<f64>,
    pub train_kl: f64,
    pub val_label_ll: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the returned snapshot.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn best_val_label_ll(&self) -> f64 {
        self.epochs[self.best_epoch].val_label_ll
    }

    pub fn to_csv(&self, with_lesion: bool) -> String {
        let mut s = String::from("epoch,train_loss,train_label_ll,");
        if with_lesion {
            s.push_str("train_lesion_ll,");
        }
        s.push_str("train_kl,val_label_ll\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},", e.epoch, e.train_loss, e.train_label_ll));
            if with_lesion {
                s.push_str(&format!("{},", e.train_lesion_ll.unwrap_or(f64::NAN)));
            }
            s.push_str(&format!("{},{}\n", e.train_kl, e.val_label_ll));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDlm {
    pub model: Dlm,
    pub log: TrainingLog,
}

/// Adam state, one moment pair per parameter tensor in visit order.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &DlmConfig) -> Self {
        Self {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Dlm) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_params(&mut |p| {
            if ms.len() == k {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            k += 1;
        });
    }
}

/// Flattened lesions and labels of `dataset` at `idx`.
pub fn batch_of(dataset: &Dataset, idx: &[usize]) -> Batch {
    let mut lesions = Vec::with_capacity(idx.len() * dataset.lesions[0].len());
    for &i in idx {
        lesions.extend(dataset.lesions[i].to_f64());
    }
    Batch {
        lesions,
        labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
    }
}

fn rows(b: &Batch, idx: &[usize], v: usize) -> Batch {
    let mut lesions = Vec::with_capacity(idx.len() * v);
    for &i in idx {
        lesions.extend_from_slice(&b.lesions[i * v..(i + 1) * v]);
    }
    Batch {
        lesions,
        labels: idx.iter().map(|&i| b.labels[i]).collect(),
    }
}

/// Splits `n` shuffled positions into batches no smaller than
/// `min(n, batch_size)`, sizes differing by at most one.
fn partition(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let n = order.len();
    let k = (n / batch_size).max(1);
    let (q, r) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for j in 0..k {
        let len = q + usize::from(j < r);
        out.push(&order[start..start + len]);
        start += len;
    }
    out
}

fn check_dataset(config: &DlmConfig, dataset: &Dataset) -> Result<(), DlmError> {
    if dataset.dims() != config.dims.as_slice() {
        return Err(DlmError::Shape(format!(
            "dataset dims {:?} differ from model dims {:?}",
            dataset.dims(),
            config.dims
        )));
    }
    if config.label_kind == LabelKind::Bernoulli && dataset.label_type != LabelType::Binary {
        return Err(DlmError::Config("bernoulli labels need a binary dataset".into()));
    }
    if dataset.splits.train.len() < MIN_BATCH {
        return Err(DlmError::Config(format!(
            "training split has {} samples, need at least {MIN_BATCH}",
            dataset.splits.train.len()
        )));
    }
    if dataset.splits.validation.is_empty() {
        return Err(DlmError::Config("validation split is empty".into()));
    }
    Ok(())
}

/// Fresh model with data-initialized output biases, trained on `dataset`.
pub fn train(config: &DlmConfig, dataset: &Dataset) -> Result<TrainedDlm, DlmError> {
    let mut model = Dlm::new(config.clone())?;
    let idx = &dataset.splits.train;
    if !idx.is_empty() {
        let n = idx.len() as f64;
        let occupancy = idx.iter().map(|&i| dataset.lesions[i].count_nonzero() as f64).sum::<f64>()
            / (n * config.voxels() as f64);
        let label_mean = idx.iter().map(|&i| dataset.labels[i]).sum::<f64>() / n;
        model.init_output_biases(occupancy, label_mean);
    }
    train_model(model, dataset)
}

/// Trains `model` on the training split and returns the snapshot with the
/// best validation label log-likelihood.
pub fn train_model(mut model: Dlm, dataset: &Dataset) -> Result<TrainedDlm, DlmError> {
    let config = model.config().clone();
    check_dataset(&config, dataset)?;
    let v = config.voxels();
    let l = config.latent_dim;
    let train_all = batch_of(dataset, &dataset.splits.train);
    let val = batch_of(dataset, &dataset.splits.validation);
    let variational = config.latent_mode == LatentMode::Variational;
    let with_lesion = config.elbo_terms == ElboTerms::Full;

    let mut adam = Adam::new(&config);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_all.len()).collect();

    for epoch in 0..config.max_epochs {
        let mut g = rng(derive_seed(config.rng_seed, 1 + epoch as u64));
        order.shuffle(&mut g);
        let (mut loss, mut lab, mut les, mut kl) = (0.0, 0.0, 0.0, 0.0);
        let batches = partition(&order, config.batch_size);
        for (bi, idx) in batches.iter().enumerate() {
            let batch = rows(&train_all, idx, v);
            let eps: Vec<f64> = if variational {
                (0..idx.len() * l).map(|_| g.sample(StandardNormal)).collect()
            } else {
                Vec::new()
            };
            model.zero_grad();
            let terms = model.loss(&batch, &eps, Mode::Train, true)?;
            if !terms.loss.is_finite() {
                return Err(DlmError::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}: {terms:?}"
                )));
            }
            adam.step(&mut model);
            let w = idx.len() as f64;
            loss += terms.loss * w;
            lab += terms.label_ll * w;
            les += terms.lesion_ll.unwrap_or(0.0) * w;
            kl += terms.kl * w;
        }
        let n = train_all.len() as f64;
        let val_ll = model.label_loglik_at_mean(&val)?;
        if !val_ll.is_finite() {
            return Err(DlmError::Diverged(format!(
                "non-finite validation likelihood at epoch {epoch}"
            )));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss / n,
            train_label_ll: lab / n,
            train_lesion_ll: with_lesion.then_some(les / n),
            train_kl: kl / n,
            val_label_ll: val_ll,
        });
        if best.as_ref().map_or(true, |(b, _)| val_ll > *b) {
            best = Some((val_ll, model.state()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, state)) = best {
        model.load_state(&state)?;
    }
    Ok(TrainedDlm { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::VolumeGrid;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut g = rng(seed);
        let dims = [8usize, 8];
        let mut lesions = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let (r, c) = (g.gen_range(0..6), g.gen_range(0..6));
            let mut bits = vec![0u8; 64];
            for dr in 0..3 {
                for dc in 0..3 {
                    bits[(r + dr) * 8 + c + dc] = 1;
                }
            }
            // substrate: voxel (3, 3)
            labels.push(f64::from(bits[3 * 8 + 3]));
            lesions.push(VolumeGrid::binary(&dims, bits).unwrap());
        }
        let tags = vec![0; n];
        Dataset::new(lesions, labels, LabelType::Binary, tags, seed).unwrap()
    }

    fn small_config() -> DlmConfig {
        DlmConfig {
            dims: vec![8, 8],
            latent_dim: 4,
            base_channels: 2,
            levels: 3,
            batch_size: 8,
            max_epochs: 12,
            early_stop_patience: 5,
            ..DlmConfig::default()
        }
    }

    #[test]
    fn partition_sizes() {
        let order: Vec<usize> = (0..45).collect();
        let parts = partition(&order, 8);
        assert_eq!(parts.len(), 5);
        assert!(parts.iter().all(|p| p.len() == 9));
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(partition(&order, 8).len(), 1);
    }

    #[test]
    fn overfits_small_set() {
        let data = toy(50, 1);
        let mut cfg = small_config();
        cfg.lr = 3e-3;
        let mut model = Dlm::new(cfg.clone()).unwrap();
        let batch = batch_of(&data, &(0..50).collect::<Vec<_>>());
        let mut adam = Adam::new(&cfg);
        let mut g = rng(0);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let eps: Vec<f64> = (0..50 * 4).map(|_| g.sample(StandardNormal)).collect();
            model.zero_grad();
            let t = model.loss(&batch, &eps, Mode::Train, true).unwrap();
            first.get_or_insert(t.loss);
            last = t.loss;
            adam.step(&mut model);
        }
        assert!(last < first.unwrap(), "{last} vs {first:?}");
    }

    #[test]
    fn early_stopping_contract_and_determinism() {
        let data = toy(80, 2);
        let cfg = small_config();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.log, b.log);
        let log = &a.log;
        let best = log.best_val_label_ll();
        assert!(log.epochs.iter().all(|e| e.val_label_ll <= best));
        if log.stopped_early {
            assert!(log.epochs.len() - 1 - log.best_epoch >= cfg.early_stop_patience);
        } else {
            assert_eq!(log.epochs.len(), cfg.max_epochs);
        }
        // the returned parameters are the best snapshot
        let mut m = a.model.clone();
        let val = batch_of(&data, &data.splits.validation);
        let ll = m.label_loglik_at_mean(&val).unwrap();
        assert!((ll - best).abs() < 1e-12);
    }

    #[test]
    fn labels_only_log_has_no_lesion_column() {
        let data = toy(40, 3);
        let mut cfg = small_config();
        cfg.elbo_terms = ElboTerms::LabelsOnly;
        cfg.max_epochs = 2;
        let t = train(&cfg, &data).unwrap();
        assert!(t.log.epochs.iter().all(|e| e.train_lesion_ll.is_none()));
        assert!(!t.log.to_csv(false).contains("lesion"));
    }

    #[test]
    fn rejects_mismatched_data() {
        let data = toy(40, 4);
        let mut cfg = small_config();
        cfg.dims = vec![16, 16];
        assert!(train(&cfg, &data).is_err());
    }
}
