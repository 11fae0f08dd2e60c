use serde::{Deserialize, Serialize};

use super::DlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Bernoulli,
    Gaussian,
}

/// Which log-likelihood terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElboTerms {
    /// Label and lesion likelihoods.
    Full,
    /// Label likelihood only; the lesion decoder is never trained.
    LabelsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    Variational,
    /// Plain autoencoder: z = mu and no KL term.
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DlmConfig {
    pub dims: Vec<usize>,
    pub latent_dim: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub label_kind: LabelKind,
    pub l2_weight: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub elbo_terms: ElboTerms,
    pub latent_mode: LatentMode,
    /// Feed the label to the encoder as a constant input plane. Off by
    /// default: the posterior then carries the label past the substrate
    /// readout and the inferred map degrades.
    pub label_input: bool,
    /// Coordinate channels appended to every decoder convolution input.
    pub decoder_coords: bool,
    pub n_substrate_samples: usize,
    pub sigma_floor: f64,
    pub rng_seed: u64,
}

impl Default for DlmConfig {
    fn default() -> Self {
        Self {
            dims: vec![32, 32],
            latent_dim: 32,
            base_channels: 8,
            levels: 5,
            label_kind: LabelKind::Bernoulli,
            l2_weight: 1e-4,
            early_stop_patience: 20,
            max_epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            elbo_terms: ElboTerms::Full,
            latent_mode: LatentMode::Variational,
            label_input: false,
            decoder_coords: true,
            n_substrate_samples: 64,
            sigma_floor: 1e-3,
            rng_seed: 0,
        }
    }
}

/// Smallest batch for which batch-norm statistics are trusted in training.
pub const MIN_BATCH: usize = 8;

impl DlmConfig {
    /// Desk-scale defaults for a grid: as many halvings as the smallest
    /// power-of-two factor shared by every axis allows.
    pub fn for_dims(dims: &[usize]) -> Self {
        let levels = dims
            .iter()
            .map(|&d| d.trailing_zeros() as usize)
            .min()
            .unwrap_or(0);
        Self {
            dims: dims.to_vec(),
            levels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DlmError> {
        let bad = |msg: String| Err(DlmError::Config(msg));
        if !(2..=3).contains(&self.dims.len()) {
            return bad(format!("dims must have 2 or 3 axes, got {:?}", self.dims));
        }
        let block = 1usize << self.levels;
        if self.dims.iter().any(|&d| d == 0 || d % block != 0) {
            return bad(format!(
                "dims {:?} not divisible by 2^levels = {block}",
                self.dims
            ));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        if self.sigma_floor <= 0.0 || !self.sigma_floor.is_finite() {
            return bad("sigma_floor must be positive".into());
        }
        if self.batch_size < MIN_BATCH {
            return bad(format!("batch_size must be >= {MIN_BATCH}"));
        }
        if self.n_substrate_samples == 0 {
            return bad("n_substrate_samples must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Encoder output channels per level; the decoders use the reverse.
    pub fn channel_plan(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.base_channels << l).collect()
    }

    pub fn bottom_dims(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d >> self.levels).collect()
    }
}
