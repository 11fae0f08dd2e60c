//! The latent-substrate network: a CoordConv encoder producing a Gaussian
//! posterior over `z`, a substrate decoder `gamma(z)` read out linearly
//! against the lesion, and a lesion decoder `theta(z)` with a per-voxel
//! Bernoulli likelihood.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DlmConfig, ElboTerms, LabelKind, LatentMode};
use super::layers::{Act, AppendCoords, AvgPool, BatchNorm, Conv, Gelu, Linear, Mode, Param, Upsample};
use super::DlmError;
use crate::grids::make_coordinate_field;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// z = mu + sigma * eps.
pub fn reparameterize(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// KL( N(mu, diag sigma^2) || N(0, I) ).
pub fn kl_to_standard_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum()
}

/// Bernoulli log-likelihood of a binary lesion under decoder logits.
pub fn lesion_loglik(lesion: &[f64], logits: &[f64]) -> f64 {
    lesion
        .iter()
        .zip(logits)
        .map(|(&x, &t)| x * t - softplus(t))
        .sum()
}

/// Same, from probabilities; clamps so that exact 0/1 predictions give a
/// finite (or zero) result.
pub fn lesion_loglik_from_probs(lesion: &[f64], probs: &[f64]) -> f64 {
    lesion
        .iter()
        .zip(probs)
        .map(|(&x, &p)| {
            let lp = if x > 0.5 { p } else { 1.0 - p };
            if lp >= 1.0 {
                0.0
            } else {
                lp.max(f64::MIN_POSITIVE).ln()
            }
        })
        .sum()
}

/// Substrate readout of one lesion.
///
/// `gamma` holds one channel per voxel for a Bernoulli label and two
/// interleaved channels (mean, raw scale) for a Gaussian label.
#[derive(Debug, Clone, Copy)]
pub struct Readout {
    pub kind: LabelKind,
    pub bias: f64,
    pub sigma_floor: f64,
}

impl Readout {
    pub fn channels(&self) -> usize {
        match self.kind {
            LabelKind::Bernoulli => 1,
            LabelKind::Gaussian => 2,
        }
    }

    pub fn loglik(&self, lesion: &[f64], gamma: &[f64], y: f64) -> f64 {
        self.loglik_and_grad(lesion, gamma, y, None)
    }

    /// Log-likelihood of `y`; optionally writes d(loglik)/d(gamma) and
    /// returns it alongside via `grad = Some((dgamma, dbias))`.
    pub fn loglik_and_grad(
        &self,
        lesion: &[f64],
        gamma: &[f64],
        y: f64,
        grad: Option<(&mut [f64], &mut f64)>,
    ) -> f64 {
        match self.kind {
            LabelKind::Bernoulli => {
                let s: f64 = lesion.iter().zip(gamma).map(|(x, g)| x * g).sum::<f64>() + self.bias;
                if let Some((dg, db)) = grad {
                    let ds = y - sigmoid(s);
                    for (d, &x) in dg.iter_mut().zip(lesion) {
                        *d = ds * x;
                    }
                    *db = ds;
                }
                y * s - softplus(s)
            }
            LabelKind::Gaussian => {
                let mut mean = self.bias;
                let mut scale_sum = 0.0;
                for (v, &x) in lesion.iter().enumerate() {
                    if x != 0.0 {
                        mean += x * gamma[2 * v];
                        scale_sum += x * (softplus(gamma[2 * v + 1]) + self.sigma_floor);
                    }
                }
                let clamped = scale_sum < self.sigma_floor;
                let scale = if clamped { self.sigma_floor } else { scale_sum };
                let r = y - mean;
                if let Some((dg, db)) = grad {
                    let dmean = r / (scale * scale);
                    let dscale = if clamped {
                        0.0
                    } else {
                        -1.0 / scale + r * r / (scale * scale * scale)
                    };
                    for (v, &x) in lesion.iter().enumerate() {
                        dg[2 * v] = dmean * x;
                        dg[2 * v + 1] = dscale * x * sigmoid(gamma[2 * v + 1]);
                    }
                    *db = dmean;
                }
                -0.5 * LN_2PI - scale.ln() - 0.5 * r * r / (scale * scale)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DownStage {
    conv: Conv,
    bn: BatchNorm,
    act: Gelu,
    pool: AvgPool,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Upsample,
    coords: Option<AppendCoords>,
    conv: Conv,
    bn: BatchNorm,
    act: Gelu,
}

#[derive(Debug, Clone)]
struct Encoder {
    stages: Vec<DownStage>,
    mu: Linear,
    log_sigma: Linear,
    bottom: Vec<usize>,
}

impl Encoder {
    fn forward(&mut self, x: Act, mode: Mode) -> (Act, Act) {
        let mut h = x;
        for st in &mut self.stages {
            h = st.conv.forward(&h);
            h = st.bn.forward(&h, mode);
            h = st.act.forward(&h);
            h = st.pool.forward(&h);
        }
        let h = h.flatten();
        (self.mu.forward(&h), self.log_sigma.forward(&h))
    }

    fn backward(&mut self, dmu: &Act, dlog_sigma: &Act) {
        let mut g = self.mu.backward(dmu);
        let g2 = self.log_sigma.backward(dlog_sigma);
        g.data.iter_mut().zip(&g2.data).for_each(|(a, b)| *a += b);
        let mut g = g.unflatten(&self.bottom);
        for st in self.stages.iter_mut().rev() {
            g = st.pool.backward(&g);
            g = st.act.backward(&g);
            g = st.bn.backward(&g);
            g = st.conv.backward(&g);
        }
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for st in &mut self.stages {
            st.conv.params_mut().into_iter().for_each(&mut *f);
            st.bn.params_mut().into_iter().for_each(&mut *f);
        }
        self.mu.params_mut().into_iter().for_each(&mut *f);
        self.log_sigma.params_mut().into_iter().for_each(&mut *f);
    }

    fn buffers(&mut self) -> Vec<&mut Vec<f64>> {
        self.stages
            .iter_mut()
            .flat_map(|s| [&mut s.bn.running_mean, &mut s.bn.running_var])
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    fc: Linear,
    stages: Vec<UpStage>,
    head: Linear,
    bottom: Vec<usize>,
}

impl Decoder {
    fn forward(&mut self, z: &Act, mode: Mode) -> Act {
        let mut h = self.fc.forward(z).unflatten(&self.bottom);
        for st in &mut self.stages {
            h = st.up.forward(&h);
            if let Some(c) = &mut st.coords {
                h = c.forward(&h);
            }
            h = st.conv.forward(&h);
            h = st.bn.forward(&h, mode);
            h = st.act.forward(&h);
        }
        self.head.forward(&h)
    }

    fn backward(&mut self, g: &Act) -> Act {
        let mut g = self.head.backward(g);
        for st in self.stages.iter_mut().rev() {
            g = st.act.backward(&g);
            g = st.bn.backward(&g);
            g = st.conv.backward(&g);
            if let Some(c) = &mut st.coords {
                g = c.backward(&g);
            }
            g = st.up.backward(&g);
        }
        self.fc.backward(&g.flatten())
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc.params_mut().into_iter().for_each(&mut *f);
        for st in &mut self.stages {
            st.conv.params_mut().into_iter().for_each(&mut *f);
            st.bn.params_mut().into_iter().for_each(&mut *f);
        }
        self.head.params_mut().into_iter().for_each(&mut *f);
    }

    fn buffers(&mut self) -> Vec<&mut Vec<f64>> {
        self.stages
            .iter_mut()
            .flat_map(|s| [&mut s.bn.running_mean, &mut s.bn.running_var])
            .collect()
    }
}

/// A mini-batch of lesions (flattened, one row per sample) and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lesions: Vec<f64>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-sample averages of the objective's pieces for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Negative ELBO averaged over the batch, plus the L2 penalty.
    pub loss: f64,
    pub label_ll: f64,
    /// `None` when the lesion likelihood is not part of the objective.
    pub lesion_ll: Option<f64>,
    pub kl: f64,
    pub l2: f64,
}

#[derive(Debug, Clone)]
pub struct Dlm {
    config: DlmConfig,
    coords: Vec<f64>,
    encoder: Encoder,
    gamma: Decoder,
    theta: Decoder,
    readout_bias: Param,
}

fn build_decoder<R: Rng>(name: &str, cfg: &DlmConfig, out_ch: usize, rng: &mut R) -> Decoder {
    let nd = cfg.dims.len();
    let plan = cfg.channel_plan();
    let top = plan.last().copied().unwrap_or(cfg.base_channels);
    let bottom = cfg.bottom_dims();
    let bottom_vox: usize = bottom.iter().product();
    let fc = Linear::new(&format!("{name}.fc"), cfg.latent_dim, top * bottom_vox, rng);
    let mut stages = Vec::new();
    let mut cin = top;
    let extra = if cfg.decoder_coords { nd } else { 0 };
    for (i, &cout) in plan.iter().rev().enumerate() {
        stages.push(UpStage {
            up: Upsample::default(),
            coords: cfg.decoder_coords.then(AppendCoords::default),
            conv: Conv::new(&format!("{name}.up{i}.conv"), nd, cin + extra, cout, rng),
            bn: BatchNorm::new(&format!("{name}.up{i}.bn"), cout),
            act: Gelu::default(),
        });
        cin = cout;
    }
    let head = Linear::new(&format!("{name}.head"), cin, out_ch, rng);
    Decoder {
        fc,
        stages,
        head,
        bottom,
    }
}

impl Dlm {
    /// Fresh network with parameters drawn from `config.rng_seed`.
    pub fn new(config: DlmConfig) -> Result<Self, DlmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let nd = config.dims.len();
        let field = make_coordinate_field(&config.dims).map_err(|e| DlmError::Config(e.to_string()))?;
        let v = config.voxels();
        let mut coords = vec![0.0; v * nd];
        for (a, ch) in field.channels().iter().enumerate() {
            for (s, &c) in ch.iter().enumerate() {
                coords[s * nd + a] = c;
            }
        }

        let plan = config.channel_plan();
        let mut stages = Vec::new();
        let mut cin = Self::input_channels_for(nd, config.label_input);
        for (l, &cout) in plan.iter().enumerate() {
            stages.push(DownStage {
                conv: Conv::new(&format!("encoder.down{l}.conv"), nd, cin, cout, &mut rng),
                bn: BatchNorm::new(&format!("encoder.down{l}.bn"), cout),
                act: Gelu::default(),
                pool: AvgPool::default(),
            });
            cin = cout;
        }
        let bottom = config.bottom_dims();
        let flat = cin * bottom.iter().product::<usize>();
        let encoder = Encoder {
            stages,
            mu: Linear::new("encoder.mu", flat, config.latent_dim, &mut rng),
            log_sigma: Linear::new("encoder.log_sigma", flat, config.latent_dim, &mut rng),
            bottom,
        };
        let gamma_ch = match config.label_kind {
            LabelKind::Bernoulli => 1,
            LabelKind::Gaussian => 2,
        };
        let gamma = build_decoder("gamma", &config, gamma_ch, &mut rng);
        let theta = build_decoder("theta", &config, 1, &mut rng);
        Ok(Self {
            config,
            coords,
            encoder,
            gamma,
            theta,
            readout_bias: Param::new("readout.bias", vec![0.0]),
        })
    }

    /// Lesion, one coordinate channel per axis, and optionally a constant
    /// label plane.
    pub fn input_channels_for(ndim: usize, label_input: bool) -> usize {
        ndim + 1 + label_input as usize
    }

    pub fn input_channels(&self) -> usize {
        Self::input_channels_for(self.config.dims.len(), self.config.label_input)
    }

    pub fn config(&self) -> &DlmConfig {
        &self.config
    }

    /// Starts the lesion decoder at the mean voxel occupancy and the
    /// Bernoulli readout at the mean label, both as logits. The substrate
    /// head starts at zero, so the first label predictions are the base
    /// rate rather than a random function of lesion size.
    pub fn init_output_biases(&mut self, occupancy: f64, label_mean: f64) {
        self.gamma.head.weight.value.fill(0.0);
        self.gamma.head.bias.value.fill(0.0);
        let logit = |p: f64| {
            let p = p.clamp(1e-3, 1.0 - 1e-3);
            (p / (1.0 - p)).ln()
        };
        self.theta.head.bias.value[0] = logit(occupancy);
        if self.config.label_kind == LabelKind::Bernoulli {
            self.readout_bias.value[0] = logit(label_mean);
        }
    }

    pub fn readout(&self) -> Readout {
        Readout {
            kind: self.config.label_kind,
            bias: self.readout_bias.value[0],
            sigma_floor: self.config.sigma_floor,
        }
    }

    /// Spatial extent at each encoder stage input, ending at the bottom.
    pub fn encoder_spatial_path(&self) -> Vec<usize> {
        (0..=self.config.levels)
            .map(|l| self.config.dims[0] >> l)
            .collect()
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        self.encoder.stages.iter().map(|s| s.conv.out_channels()).collect()
    }

    pub fn decoder_channels(&self) -> Vec<usize> {
        self.gamma.stages.iter().map(|s| s.conv.out_channels()).collect()
    }

    pub fn gamma_channels(&self) -> usize {
        self.readout().channels()
    }

    /// Visits every trainable parameter in a fixed order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit(f);
        self.gamma.visit(f);
        self.theta.visit(f);
        f(&mut self.readout_bias);
    }

    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name.clone()));
        names
    }

    /// Batch-norm running statistics, in a fixed order.
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut b = self.encoder.buffers();
        b.extend(self.gamma.buffers());
        b.extend(self.theta.buffers());
        b
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    /// All parameter values followed by all buffers.
    pub fn state(&mut self) -> Vec<Vec<f64>> {
        let mut s = Vec::new();
        self.visit_params(&mut |p| s.push(p.value.clone()));
        s.extend(self.buffers_mut().into_iter().map(|b| b.clone()));
        s
    }

    pub fn load_state(&mut self, state: &[Vec<f64>]) -> Result<(), DlmError> {
        let mut it = state.iter();
        let mut err = None;
        self.visit_params(&mut |p| match it.next() {
            Some(v) if v.len() == p.value.len() => p.value.clone_from(v),
            _ => err = Some(p.name.clone()),
        });
        for b in self.buffers_mut() {
            match it.next() {
                Some(v) if v.len() == b.len() => b.clone_from(v),
                _ => err = Some("batch-norm buffer".into()),
            }
        }
        if it.next().is_some() {
            err = Some("trailing state".into());
        }
        match err {
            Some(name) => Err(DlmError::State(name)),
            None => Ok(()),
        }
    }

    fn encoder_input(&self, lesions: &[f64], labels: &[f64]) -> Act {
        let nd = self.config.dims.len();
        let v = self.config.voxels();
        let c = self.input_channels();
        let b = labels.len();
        let mut a = Act::zeros(b, &self.config.dims, c);
        for i in 0..b {
            for s in 0..v {
                let row = &mut a.data[(i * v + s) * c..(i * v + s + 1) * c];
                row[0] = lesions[i * v + s];
                row[1..1 + nd].copy_from_slice(&self.coords[s * nd..(s + 1) * nd]);
                if c > 1 + nd {
                    row[1 + nd] = labels[i];
                }
            }
        }
        a
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), DlmError> {
        let v = self.config.voxels();
        if batch.lesions.len() != batch.len() * v {
            return Err(DlmError::Shape(format!(
                "batch of {} labels carries {} lesion values, expected {}",
                batch.len(),
                batch.lesions.len(),
                batch.len() * v
            )));
        }
        Ok(())
    }

    /// Posterior mean and scale for each sample (evaluation mode).
    pub fn encode(&mut self, batch: &Batch) -> Result<(Vec<f64>, Vec<f64>), DlmError> {
        self.check_batch(batch)?;
        let x = self.encoder_input(&batch.lesions, &batch.labels);
        let (mu, ls) = self.encoder.forward(x, Mode::Eval);
        Ok((mu.data, ls.data.iter().map(|v| v.exp()).collect()))
    }

    /// Raw decoder output `gamma(z)` for each row of `z` (evaluation mode).
    pub fn decode_substrate(&mut self, z: &[f64]) -> Vec<f64> {
        let n = z.len() / self.config.latent_dim;
        let za = Act {
            batch: n,
            dims: vec![],
            channels: self.config.latent_dim,
            data: z.to_vec(),
        };
        self.gamma.forward(&za, Mode::Eval).data
    }

    /// Lesion decoder logits for each row of `z` (evaluation mode).
    pub fn decode_lesion(&mut self, z: &[f64]) -> Vec<f64> {
        let n = z.len() / self.config.latent_dim;
        let za = Act {
            batch: n,
            dims: vec![],
            channels: self.config.latent_dim,
            data: z.to_vec(),
        };
        self.theta.forward(&za, Mode::Eval).data
    }

    /// Objective for one batch, with gradients accumulated into the
    /// parameters when `backprop` is set. `eps` supplies the standard normal
    /// draws (one row of `latent_dim` per sample); it is ignored in
    /// deterministic mode.
    pub fn loss(
        &mut self,
        batch: &Batch,
        eps: &[f64],
        mode: Mode,
        backprop: bool,
    ) -> Result<LossTerms, DlmError> {
        self.check_batch(batch)?;
        let b = batch.len();
        let l = self.config.latent_dim;
        let v = self.config.voxels();
        let variational = self.config.latent_mode == LatentMode::Variational;
        let with_lesion = self.config.elbo_terms == ElboTerms::Full;
        if variational && eps.len() != b * l {
            return Err(DlmError::Shape(format!(
                "eps has {} values, expected {}",
                eps.len(),
                b * l
            )));
        }
        let bf = b as f64;

        let x = self.encoder_input(&batch.lesions, &batch.labels);
        let (mu, log_sigma) = self.encoder.forward(x, mode);
        let sigma: Vec<f64> = log_sigma.data.iter().map(|v| v.exp()).collect();
        let z_data = if variational {
            reparameterize(&mu.data, &sigma, eps)
        } else {
            mu.data.clone()
        };
        let z = Act {
            batch: b,
            dims: vec![],
            channels: l,
            data: z_data,
        };

        let readout = self.readout();
        let gc = readout.channels();
        let gamma = self.gamma.forward(&z, mode);
        let mut dgamma = Act::zeros(b, &self.config.dims, gc);
        let mut dbias_total = 0.0;
        let mut label_ll = 0.0;
        for i in 0..b {
            let lesion = &batch.lesions[i * v..(i + 1) * v];
            let g = &gamma.data[i * v * gc..(i + 1) * v * gc];
            let mut db = 0.0;
            let ll = if backprop {
                let dg = &mut dgamma.data[i * v * gc..(i + 1) * v * gc];
                readout.loglik_and_grad(lesion, g, batch.labels[i], Some((dg, &mut db)))
            } else {
                readout.loglik(lesion, g, batch.labels[i])
            };
            label_ll += ll;
            dbias_total += db;
        }
        // d(loss)/d(.) = -d(ll)/d(.) / B
        dgamma.data.iter_mut().for_each(|d| *d *= -1.0 / bf);

        let mut lesion_ll = None;
        let mut dtheta = None;
        if with_lesion {
            let theta = self.theta.forward(&z, mode);
            let ll = lesion_loglik(&batch.lesions, &theta.data);
            lesion_ll = Some(ll / bf);
            if backprop {
                let mut d = theta.clone();
                for (dv, (&x, &t)) in d.data.iter_mut().zip(batch.lesions.iter().zip(&theta.data)) {
                    *dv = -(x - sigmoid(t)) / bf;
                }
                dtheta = Some(d);
            }
        }

        let kl = if variational {
            (0..b)
                .map(|i| kl_to_standard_normal(&mu.data[i * l..(i + 1) * l], &sigma[i * l..(i + 1) * l]))
                .sum::<f64>()
                / bf
        } else {
            0.0
        };

        let mut l2 = 0.0;
        let lambda = self.config.l2_weight;
        self.visit_params(&mut |p| l2 += 0.5 * lambda * p.value.iter().map(|w| w * w).sum::<f64>());

        let loss = -label_ll / bf - lesion_ll.unwrap_or(0.0) + kl + l2;

        if backprop {
            self.readout_bias.grad[0] -= dbias_total / bf;
            let mut dz = self.gamma.backward(&dgamma);
            if let Some(dt) = dtheta {
                let d2 = self.theta.backward(&dt);
                dz.data.iter_mut().zip(&d2.data).for_each(|(a, b)| *a += b);
            }
            let mut dmu = dz.clone();
            let mut dls = Act::zeros(b, &[], l);
            if variational {
                for k in 0..b * l {
                    dmu.data[k] += mu.data[k] / bf;
                    dls.data[k] = dz.data[k] * eps[k] * sigma[k] + (sigma[k] * sigma[k] - 1.0) / bf;
                }
            }
            self.encoder.backward(&dmu, &dls);
            self.visit_params(&mut |p| {
                for (g, w) in p.grad.iter_mut().zip(&p.value) {
                    *g += lambda * w;
                }
            });
        }

        Ok(LossTerms {
            loss,
            label_ll: label_ll / bf,
            lesion_ll,
            kl,
            l2,
        })
    }

    /// Mean label log-likelihood using the posterior mean (evaluation mode).
    pub fn label_loglik_at_mean(&mut self, batch: &Batch) -> Result<f64, DlmError> {
        let (mu, _) = self.encode(batch)?;
        let v = self.config.voxels();
        let gamma = self.decode_substrate(&mu);
        let readout = self.readout();
        let gc = readout.channels();
        let total: f64 = (0..batch.len())
            .map(|i| {
                readout.loglik(
                    &batch.lesions[i * v..(i + 1) * v],
                    &gamma[i * v * gc..(i + 1) * v * gc],
                    batch.labels[i],
                )
            })
            .sum();
        Ok(total / batch.len() as f64)
    }
}
