//! Dimension-generic layers with hand-written backward passes.
//!
//! Activations are channel-last: `[batch, spatial..., channels]`, so a
//! batch of feature maps is also a `(batch * voxels) x channels` row
//! matrix and both convolutions (via im2col) and per-voxel linear maps
//! reduce to one GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use statrs::function::erf::erf;

use crate::grids::{make_coordinate_field, unflatten};

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub batch: usize,
    pub dims: Vec<usize>,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(batch: usize, dims: &[usize], channels: usize) -> Self {
        let n = batch * dims.iter().product::<usize>() * channels;
        Self {
            batch,
            dims: dims.to_vec(),
            channels,
            data: vec![0.0; n],
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.batch * self.voxels()
    }

    /// Collapse spatial axes into the channel axis.
    pub fn flatten(mut self) -> Self {
        self.channels *= self.voxels();
        self.dims.clear();
        self
    }

    pub fn unflatten(mut self, dims: &[usize]) -> Self {
        let v: usize = dims.iter().product();
        assert_eq!(self.channels % v, 0);
        self.channels /= v;
        self.dims = dims.to_vec();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Vec<f64>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    fn uniform<R: Rng>(name: String, n: usize, bound: f64, rng: &mut R) -> Self {
        Self::new(name, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
    }
}

/// C (m x n) = beta * C + A (m x k) * B (k x n), with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let a = ArrayView2::from_shape((a_rows, a_cols), a).unwrap();
    let b = ArrayView2::from_shape((b_rows, b_cols), b).unwrap();
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).unwrap();
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Input voxel for each (output voxel, kernel tap), `usize::MAX` for padding.
fn neighbour_table(dims: &[usize]) -> (Vec<usize>, usize) {
    let nd = dims.len();
    let taps = 3usize.pow(nd as u32);
    let voxels: usize = dims.iter().product();
    let mut table = vec![usize::MAX; voxels * taps];
    for s in 0..voxels {
        let c = unflatten(dims, s);
        'tap: for t in 0..taps {
            let off = unflatten(&vec![3; nd], t);
            let mut idx = 0;
            for a in 0..nd {
                let p = c[a] as isize + off[a] as isize - 1;
                if p < 0 || p >= dims[a] as isize {
                    continue 'tap;
                }
                idx = idx * dims[a] + p as usize;
            }
            table[s * taps + t] = idx;
        }
    }
    (table, taps)
}

/// Coarse voxel each fine voxel maps to under a factor-2 resampling.
fn parent_table(fine: &[usize]) -> Vec<usize> {
    let coarse: Vec<usize> = fine.iter().map(|d| d / 2).collect();
    let n: usize = fine.iter().product();
    (0..n)
        .map(|s| {
            let c = unflatten(fine, s);
            c.iter()
                .zip(&coarse)
                .fold(0, |acc, (&ci, &d)| acc * d + ci / 2)
        })
        .collect()
}

/// 3^D convolution, stride 1, unit zero padding, no bias (every
/// convolution feeds a batch norm, which absorbs one).
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Param,
    in_ch: usize,
    out_ch: usize,
    table_dims: Vec<usize>,
    table: Vec<usize>,
    taps: usize,
    cols: Vec<f64>,
    in_shape: (usize, Vec<usize>),
}

impl Conv {
    pub fn new<R: Rng>(name: &str, ndim: usize, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let taps = 3usize.pow(ndim as u32);
        let fan_in = (in_ch * taps) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), out_ch * taps * in_ch, bound, rng),
            in_ch,
            out_ch,
            table_dims: Vec::new(),
            table: Vec::new(),
            taps,
            cols: Vec::new(),
            in_shape: (0, Vec::new()),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn forward(&mut self, x: &Act) -> Act {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        if self.table_dims != x.dims {
            let (table, taps) = neighbour_table(&x.dims);
            self.table = table;
            self.taps = taps;
            self.table_dims = x.dims.clone();
        }
        let (v, taps, cin) = (x.voxels(), self.taps, self.in_ch);
        let width = taps * cin;
        let rows = x.batch * v;
        self.cols.clear();
        self.cols.resize(rows * width, 0.0);
        for b in 0..x.batch {
            let xb = &x.data[b * v * cin..(b + 1) * v * cin];
            for s in 0..v {
                let row = &mut self.cols[(b * v + s) * width..(b * v + s + 1) * width];
                for t in 0..taps {
                    let src = self.table[s * taps + t];
                    if src != usize::MAX {
                        row[t * cin..(t + 1) * cin].copy_from_slice(&xb[src * cin..(src + 1) * cin]);
                    }
                }
            }
        }
        let mut out = Act::zeros(x.batch, &x.dims, self.out_ch);
        gemm(
            &self.cols, rows, width, false, &self.weight.value, self.out_ch, width, true,
            &mut out.data, 0.0,
        );
        self.in_shape = (x.batch, x.dims.clone());
        out
    }

    pub fn backward(&mut self, g: &Act) -> Act {
        let (batch, dims) = self.in_shape.clone();
        let v: usize = dims.iter().product();
        let (taps, cin, cout) = (self.taps, self.in_ch, self.out_ch);
        let width = taps * cin;
        let rows = batch * v;
        gemm(
            &g.data, rows, cout, true, &self.cols, rows, width, false, &mut self.weight.grad, 1.0,
        );
        let mut dcols = vec![0.0; rows * width];
        gemm(
            &g.data, rows, cout, false, &self.weight.value, cout, width, false, &mut dcols, 0.0,
        );
        let mut dx = Act::zeros(batch, &dims, cin);
        for b in 0..batch {
            let dxb = &mut dx.data[b * v * cin..(b + 1) * v * cin];
            for s in 0..v {
                let row = &dcols[(b * v + s) * width..(b * v + s + 1) * width];
                for t in 0..taps {
                    let src = self.table[s * taps + t];
                    if src != usize::MAX {
                        for (d, r) in dxb[src * cin..(src + 1) * cin].iter_mut().zip(&row[t * cin..]) {
                            *d += r;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 1] {
        [&mut self.weight]
    }
}

/// Affine map over the channel axis of every row (a fully connected layer
/// on flattened input, or a 1x1 convolution on a feature map).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_f: usize,
    out_f: usize,
    input: Act,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, in_f: usize, out_f: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        Self::with_bound(name, in_f, out_f, bound, rng)
    }

    pub fn with_bound<R: Rng>(name: &str, in_f: usize, out_f: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(format!("{name}.weight"), out_f * in_f, bound, rng),
            bias: Param::uniform(format!("{name}.bias"), out_f, bound, rng),
            in_f,
            out_f,
            input: Act::zeros(0, &[], 0),
        }
    }

    pub fn forward(&mut self, x: &Act) -> Act {
        assert_eq!(x.channels, self.in_f, "linear input width");
        let rows = x.rows();
        let mut out = Act::zeros(x.batch, &x.dims, self.out_f);
        for r in 0..rows {
            out.data[r * self.out_f..(r + 1) * self.out_f].copy_from_slice(&self.bias.value);
        }
        gemm(
            &x.data, rows, self.in_f, false, &self.weight.value, self.out_f, self.in_f, true,
            &mut out.data, 1.0,
        );
        self.input = x.clone();
        out
    }

    pub fn backward(&mut self, g: &Act) -> Act {
        let rows = self.input.rows();
        gemm(
            &g.data, rows, self.out_f, true, &self.input.data, rows, self.in_f, false,
            &mut self.weight.grad, 1.0,
        );
        for r in 0..rows {
            for (gb, gv) in self.bias.grad.iter_mut().zip(&g.data[r * self.out_f..]) {
                *gb += gv;
            }
        }
        let mut dx = Act::zeros(self.input.batch, &self.input.dims, self.in_f);
        gemm(
            &g.data, rows, self.out_f, false, &self.weight.value, self.out_f, self.in_f, false,
            &mut dx.data, 0.0,
        );
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Per-channel normalization with batch statistics in training and
/// running averages in evaluation.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: (usize, Vec<usize>),
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: (0, Vec::new()),
        }
    }

    pub fn forward(&mut self, x: &Act, mode: Mode) -> Act {
        let c = x.channels;
        let rows = x.rows();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for row in x.data.chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in x.data.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let unbias = if rows > 1 {
                    rows as f64 / (rows - 1) as f64
                } else {
                    1.0
                };
                for ch in 0..c {
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                    self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch]
                        + self.momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        self.inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = Act::zeros(x.batch, &x.dims, c);
        self.xhat.clear();
        self.xhat.resize(x.data.len(), 0.0);
        for (i, (&v, (xh, o))) in x
            .data
            .iter()
            .zip(self.xhat.iter_mut().zip(out.data.iter_mut()))
            .enumerate()
        {
            let ch = i % c;
            *xh = (v - mean[ch]) * self.inv_std[ch];
            *o = self.gamma.value[ch] * *xh + self.beta.value[ch];
        }
        self.shape = (x.batch, x.dims.clone());
        out
    }

    /// Gradient of the training-mode (batch statistics) forward pass.
    pub fn backward(&mut self, g: &Act) -> Act {
        let c = g.channels;
        let m = g.rows() as f64;
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for (i, (&gv, &xh)) in g.data.iter().zip(&self.xhat).enumerate() {
            let ch = i % c;
            self.gamma.grad[ch] += gv * xh;
            self.beta.grad[ch] += gv;
            let dxh = gv * self.gamma.value[ch];
            sum_dxhat[ch] += dxh;
            sum_dxhat_xhat[ch] += dxh * xh;
        }
        let mut dx = Act::zeros(self.shape.0, &self.shape.1, c);
        for (i, ((d, &gv), &xh)) in dx.data.iter_mut().zip(&g.data).zip(&self.xhat).enumerate() {
            let ch = i % c;
            let dxh = gv * self.gamma.value[ch];
            *d = self.inv_std[ch] / m * (m * dxh - sum_dxhat[ch] - xh * sum_dxhat_xhat[ch]);
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[derive(Debug, Clone, Default)]
pub struct Gelu {
    input: Vec<f64>,
}

impl Gelu {
    pub fn forward(&mut self, x: &Act) -> Act {
        self.input = x.data.clone();
        Act {
            batch: x.batch,
            dims: x.dims.clone(),
            channels: x.channels,
            data: x.data.iter().map(|&v| gelu(v)).collect(),
        }
    }

    pub fn backward(&mut self, g: &Act) -> Act {
        Act {
            batch: g.batch,
            dims: g.dims.clone(),
            channels: g.channels,
            data: g
                .data
                .iter()
                .zip(&self.input)
                .map(|(&gv, &x)| gv * gelu_grad(x))
                .collect(),
        }
    }
}

/// Mean over non-overlapping 2^D blocks.
#[derive(Debug, Clone, Default)]
pub struct AvgPool {
    parents: Vec<usize>,
    fine: Vec<usize>,
}

impl AvgPool {
    pub fn forward(&mut self, x: &Act) -> Act {
        if self.fine != x.dims {
            self.parents = parent_table(&x.dims);
            self.fine = x.dims.clone();
        }
        let coarse: Vec<usize> = x.dims.iter().map(|d| d / 2).collect();
        let mut out = Act::zeros(x.batch, &coarse, x.channels);
        let (vf, vc, c) = (x.voxels(), out.voxels(), x.channels);
        let w = 1.0 / (1usize << x.dims.len()) as f64;
        for b in 0..x.batch {
            for s in 0..vf {
                let p = self.parents[s];
                let src = &x.data[(b * vf + s) * c..(b * vf + s + 1) * c];
                let dst = &mut out.data[(b * vc + p) * c..(b * vc + p + 1) * c];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += w * v;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, g: &Act) -> Act {
        let mut dx = Act::zeros(g.batch, &self.fine, g.channels);
        let (vf, vc, c) = (dx.voxels(), g.voxels(), g.channels);
        let w = 1.0 / (1usize << self.fine.len()) as f64;
        for b in 0..g.batch {
            for s in 0..vf {
                let p = self.parents[s];
                let src = &g.data[(b * vc + p) * c..(b * vc + p + 1) * c];
                let dst = &mut dx.data[(b * vf + s) * c..(b * vf + s + 1) * c];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = w * v;
                }
            }
        }
        dx
    }
}

/// Appends one coordinate channel per axis (spanning [-1, 1]) to every
/// voxel, so a convolution can place features by position.
#[derive(Debug, Clone, Default)]
pub struct AppendCoords {
    dims: Vec<usize>,
    coords: Vec<f64>,
    in_ch: usize,
}

impl AppendCoords {
    pub fn forward(&mut self, x: &Act) -> Act {
        let nd = x.dims.len();
        if self.dims != x.dims {
            let field = make_coordinate_field(&x.dims).expect("every axis >= 2");
            let v = x.voxels();
            self.coords = vec![0.0; v * nd];
            for (a, ch) in field.channels().iter().enumerate() {
                for (s, &c) in ch.iter().enumerate() {
                    self.coords[s * nd + a] = c;
                }
            }
            self.dims = x.dims.clone();
        }
        self.in_ch = x.channels;
        let (v, c) = (x.voxels(), x.channels);
        let mut out = Act::zeros(x.batch, &x.dims, c + nd);
        for r in 0..x.batch * v {
            let row = &mut out.data[r * (c + nd)..(r + 1) * (c + nd)];
            row[..c].copy_from_slice(&x.data[r * c..(r + 1) * c]);
            let s = r % v;
            row[c..].copy_from_slice(&self.coords[s * nd..(s + 1) * nd]);
        }
        out
    }

    pub fn backward(&mut self, g: &Act) -> Act {
        let c = self.in_ch;
        let w = g.channels;
        Act {
            batch: g.batch,
            dims: g.dims.clone(),
            channels: c,
            data: g.data.chunks(w).flat_map(|row| row[..c].iter().copied()).collect(),
        }
    }
}

/// Nearest-neighbour upsampling by 2 along every axis.
#[derive(Debug, Clone, Default)]
pub struct Upsample {
    parents: Vec<usize>,
    fine: Vec<usize>,
    coarse: Vec<usize>,
}

impl Upsample {
    pub fn forward(&mut self, x: &Act) -> Act {
        let fine: Vec<usize> = x.dims.iter().map(|d| d * 2).collect();
        if self.fine != fine {
            self.parents = parent_table(&fine);
            self.fine = fine.clone();
        }
        self.coarse = x.dims.clone();
        let mut out = Act::zeros(x.batch, &fine, x.channels);
        let (vf, vc, c) = (out.voxels(), x.voxels(), x.channels);
        for b in 0..x.batch {
            for s in 0..vf {
                let p = self.parents[s];
                out.data[(b * vf + s) * c..(b * vf + s + 1) * c]
                    .copy_from_slice(&x.data[(b * vc + p) * c..(b * vc + p + 1) * c]);
            }
        }
        out
    }

    pub fn backward(&mut self, g: &Act) -> Act {
        let mut dx = Act::zeros(g.batch, &self.coarse, g.channels);
        let (vf, vc, c) = (g.voxels(), dx.voxels(), g.channels);
        for b in 0..g.batch {
            for s in 0..vf {
                let p = self.parents[s];
                let src = &g.data[(b * vf + s) * c..(b * vf + s + 1) * c];
                let dst = &mut dx.data[(b * vc + p) * c..(b * vc + p + 1) * c];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        dx
    }
}
