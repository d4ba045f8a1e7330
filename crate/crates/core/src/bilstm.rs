//! Bidirectional LSTM classifier with hand-written backpropagation through
//! time and Adam.
//!
//! Architecture, per record:
//!
//! ```text
//! features ──fold──▶ x_1..x_L ──ReLU dense──▶ p_1..p_L
//!   layer k: forward cell over t = 1..L, backward cell over t = L..1,
//!            output_t = [h_fwd_t ; h_bwd_t]  (inverted dropout when training)
//!   logits = Q_fwd · h_fwd_L + Q_bwd · h_bwd_1 + b_y   (top layer)
//!   probabilities = softmax(logits)
//! ```
//!
//! Gate rows are stacked in the order input, forget, candidate, output.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureMask, Normalizer};
use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Self {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `out += self · x`
    fn mul_vec_acc(&self, x: &[f64], out: &mut [f64]) {
        for (row, o) in self.data.chunks_exact(self.cols).zip(out.iter_mut()) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `out += selfᵀ · y`
    fn mul_t_vec_acc(&self, y: &[f64], out: &mut [f64]) {
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            if yi != 0.0 {
                for (o, a) in out.iter_mut().zip(row) {
                    *o += a * yi;
                }
            }
        }
    }

    /// `self += y ⊗ x`
    fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        for (row, &yi) in self.data.chunks_exact_mut(self.cols).zip(y) {
            if yi != 0.0 {
                for (a, &xj) in row.iter_mut().zip(x) {
                    *a += yi * xj;
                }
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weights of one LSTM cell. `w` is `4·units × input_dim`, `u` is
/// `4·units × units`, `b` has `4·units` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub input_dim: usize,
    pub units: usize,
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vec<f64>,
}

/// Gate activations recorded by one cell step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, units: usize) -> Self {
        LstmCellParams {
            input_dim,
            units,
            w: Matrix::zeros(4 * units, input_dim),
            u: Matrix::zeros(4 * units, units),
            b: vec![0.0; 4 * units],
        }
    }

    /// Uniform in `±1/√fan_in`, forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, units: usize, rng: &mut R) -> Self {
        let w = Matrix::uniform(4 * units, input_dim, 1.0 / (input_dim as f64).sqrt(), rng);
        let u = Matrix::uniform(4 * units, units, 1.0 / (units as f64).sqrt(), rng);
        let mut b = vec![0.0; 4 * units];
        b[units..2 * units].fill(1.0);
        LstmCellParams {
            input_dim,
            units,
            w,
            u,
            b,
        }
    }

    fn step_cached(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<StepCache> {
        let n = self.units;
        if x.len() != self.input_dim || h_prev.len() != n || c_prev.len() != n {
            return Err(Error::Shape(format!(
                "cell expects input {} and state {n}, got input {}, h {}, c {}",
                self.input_dim,
                x.len(),
                h_prev.len(),
                c_prev.len()
            )));
        }
        let mut pre = self.b.clone();
        self.w.mul_vec_acc(x, &mut pre);
        self.u.mul_vec_acc(h_prev, &mut pre);
        let i: Vec<f64> = pre[..n].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = pre[n..2 * n].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = pre[2 * n..3 * n].iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = pre[3 * n..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..n).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..n).map(|k| o[k] * tanh_c[k]).collect();
        Ok(StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            c,
            tanh_c,
            h,
        })
    }

    /// One LSTM step: returns the new hidden and cell state.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.step_cached(x, h_prev, c_prev)?;
        Ok((s.h, s.c))
    }

    fn tensors(&self) -> [&[f64]; 3] {
        [&self.w.data, &self.u.data, &self.b]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.w.data, &mut self.u.data, &mut self.b]
    }
}

/// Free-function form of [`LstmCellParams::step`].
pub fn cell_step(params: &LstmCellParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    params.step(x, h_prev, c_prev)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLayer {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

/// How a flat feature vector is folded into timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    /// Number of features the model consumes (after masking).
    pub input_width: usize,
    /// Number of timesteps.
    pub chunks: usize,
}

impl SequenceLayout {
    pub fn timestep_dim(&self) -> usize {
        self.input_width.div_ceil(self.chunks)
    }
}

/// A record folded into `len` equal timesteps, zero-padded at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceView {
    pub steps: Vec<Vec<f64>>,
}

impl SequenceView {
    pub fn fold(features: &[f64], layout: SequenceLayout) -> Result<Self> {
        if features.len() != layout.input_width {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                layout.input_width,
                features.len()
            )));
        }
        let dim = layout.timestep_dim();
        let steps = (0..layout.chunks)
            .map(|t| {
                (0..dim)
                    .map(|j| features.get(t * dim + j).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        Ok(SequenceView { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmModel {
    pub layout: SequenceLayout,
    pub input_projection: Dense,
    pub layers: Vec<BiLayer>,
    pub out_fwd: Matrix,
    pub out_bwd: Matrix,
    pub out_bias: Vec<f64>,
    pub dropout_rate: f64,
    pub num_classes: usize,
}

/// Shape parameters for [`BiLstmModel::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub layout: SequenceLayout,
    pub units: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

/// Everything [`BiLstmModel::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    proj_pre: Vec<Vec<f64>>,
    fwd_steps: Vec<Vec<StepCache>>,
    /// Indexed by timestep, not by scan order.
    bwd_steps: Vec<Vec<StepCache>>,
    /// Per layer, per timestep inverted-dropout multipliers (empty when not training).
    dropout: Vec<Vec<Vec<f64>>>,
    /// Top-layer outputs feeding the classifier, after dropout.
    top_fwd: Vec<f64>,
    top_bwd: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl BiLstmModel {
    pub fn new<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        let ModelShape {
            layout,
            units,
            num_layers,
            num_classes,
            dropout_rate,
        } = shape;
        if num_layers == 0 || units == 0 || num_classes < 2 || layout.chunks == 0 || layout.input_width == 0 {
            return Err(Error::Config(
                "model needs at least one layer, one unit, two classes and a non-empty input".into(),
            ));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!("dropout rate {dropout_rate} outside [0, 1)")));
        }
        let dim = layout.timestep_dim();
        let input_projection = Dense {
            weights: Matrix::uniform(units, dim, 1.0 / (dim as f64).sqrt(), rng),
            bias: vec![0.0; units],
        };
        let layers = (0..num_layers)
            .map(|k| {
                let input_dim = if k == 0 { units } else { 2 * units };
                BiLayer {
                    forward: LstmCellParams::init(input_dim, units, rng),
                    backward: LstmCellParams::init(input_dim, units, rng),
                }
            })
            .collect();
        let limit = 1.0 / ((2 * units) as f64).sqrt();
        Ok(BiLstmModel {
            layout,
            input_projection,
            layers,
            out_fwd: Matrix::uniform(num_classes, units, limit, rng),
            out_bwd: Matrix::uniform(num_classes, units, limit, rng),
            out_bias: vec![0.0; num_classes],
            dropout_rate,
            num_classes,
        })
    }

    pub fn units(&self) -> usize {
        self.input_projection.bias.len()
    }

    /// Same shapes, every parameter zero. Used as the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Flat parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.input_projection.weights.data, &self.input_projection.bias];
        for layer in &self.layers {
            out.extend(layer.forward.tensors());
            out.extend(layer.backward.tensors());
        }
        out.push(&self.out_fwd.data);
        out.push(&self.out_bwd.data);
        out.push(&self.out_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.input_projection.weights.data,
            &mut self.input_projection.bias,
        ];
        for layer in &mut self.layers {
            out.extend(layer.forward.tensors_mut());
            out.extend(layer.backward.tensors_mut());
        }
        out.push(&mut self.out_fwd.data);
        out.push(&mut self.out_bwd.data);
        out.push(&mut self.out_bias);
        out
    }

    /// Names matching [`BiLstmModel::tensors`], for reports and serialization.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["input.weights".to_string(), "input.bias".to_string()];
        for k in 0..self.layers.len() {
            for dir in ["fwd", "bwd"] {
                for part in ["w", "u", "b"] {
                    names.push(format!("layer{k}.{dir}.{part}"));
                }
            }
        }
        names.extend(["out.fwd".into(), "out.bwd".into(), "out.bias".into()]);
        names
    }

    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mat = |m: &Matrix| vec![m.rows, m.cols];
        let mut shapes = vec![mat(&self.input_projection.weights), vec![self.input_projection.bias.len()]];
        for layer in &self.layers {
            for cell in [&layer.forward, &layer.backward] {
                shapes.push(mat(&cell.w));
                shapes.push(mat(&cell.u));
                shapes.push(vec![cell.b.len()]);
            }
        }
        shapes.push(mat(&self.out_fwd));
        shapes.push(mat(&self.out_bwd));
        shapes.push(vec![self.out_bias.len()]);
        shapes
    }

    /// Class probabilities for one sequence. With `training`, inverted
    /// dropout is applied to every layer's outputs using `rng`.
    pub fn forward<R: Rng + ?Sized>(&self, seq: &SequenceView, training: bool, rng: &mut R) -> Result<(Vec<f64>, ForwardCache)> {
        let dim = self.layout.timestep_dim();
        if seq.is_empty() || seq.dim() != dim || seq.steps.iter().any(|s| s.len() != dim) {
            return Err(Error::Shape(format!(
                "sequence of {} steps × {} does not match timestep dimension {dim}",
                seq.len(),
                seq.dim()
            )));
        }
        let len = seq.len();
        let units = self.units();

        let mut proj_pre = Vec::with_capacity(len);
        let mut current: Vec<Vec<f64>> = Vec::with_capacity(len);
        for (t, x) in seq.steps.iter().enumerate() {
            let mut pre = self.input_projection.bias.clone();
            self.input_projection.weights.mul_vec_acc(x, &mut pre);
            if pre.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { layer: 0, timestep: t });
            }
            current.push(pre.iter().map(|&v| v.max(0.0)).collect());
            proj_pre.push(pre);
        }

        let keep = 1.0 - self.dropout_rate;
        let mut fwd_steps = Vec::with_capacity(self.layers.len());
        let mut bwd_steps = Vec::with_capacity(self.layers.len());
        let mut dropout = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let mut fwd: Vec<StepCache> = Vec::with_capacity(len);
            let (mut h, mut c) = (vec![0.0; units], vec![0.0; units]);
            for (t, x) in current.iter().enumerate() {
                let s = layer.forward.step_cached(x, &h, &c)?;
                if s.h.iter().chain(&s.c).any(|v| !v.is_finite()) {
                    return Err(Error::NumericOverflow { layer: k + 1, timestep: t });
                }
                h = s.h.clone();
                c = s.c.clone();
                fwd.push(s);
            }
            let mut bwd: Vec<Option<StepCache>> = vec![None; len];
            let (mut h, mut c) = (vec![0.0; units], vec![0.0; units]);
            for t in (0..len).rev() {
                let s = layer.backward.step_cached(&current[t], &h, &c)?;
                if s.h.iter().chain(&s.c).any(|v| !v.is_finite()) {
                    return Err(Error::NumericOverflow { layer: k + 1, timestep: t });
                }
                h = s.h.clone();
                c = s.c.clone();
                bwd[t] = Some(s);
            }
            let bwd: Vec<StepCache> = bwd.into_iter().map(|s| s.expect("every timestep visited")).collect();

            let masks: Vec<Vec<f64>> = if training && self.dropout_rate > 0.0 {
                (0..len)
                    .map(|_| {
                        (0..2 * units)
                            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            current = (0..len)
                .map(|t| {
                    let mut out: Vec<f64> = fwd[t].h.iter().chain(&bwd[t].h).copied().collect();
                    if let Some(m) = masks.get(t) {
                        for (v, s) in out.iter_mut().zip(m) {
                            *v *= s;
                        }
                    }
                    out
                })
                .collect();
            fwd_steps.push(fwd);
            bwd_steps.push(bwd);
            dropout.push(masks);
        }

        let top_fwd = current[len - 1][..units].to_vec();
        let top_bwd = current[0][units..].to_vec();
        let mut logits = self.out_bias.clone();
        self.out_fwd.mul_vec_acc(&top_fwd, &mut logits);
        self.out_bwd.mul_vec_acc(&top_bwd, &mut logits);
        let probabilities = softmax(&logits);
        if probabilities.iter().any(|p| !p.is_finite()) {
            return Err(Error::NumericOverflow {
                layer: self.layers.len() + 1,
                timestep: len - 1,
            });
        }

        let cache = ForwardCache {
            inputs: seq.steps.clone(),
            proj_pre,
            fwd_steps,
            bwd_steps,
            dropout,
            top_fwd,
            top_bwd,
            probabilities: probabilities.clone(),
        };
        Ok((probabilities, cache))
    }

    /// Probabilities in inference mode.
    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        let seq = SequenceView::fold(features, self.layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(&seq, false, &mut rng)?.0)
    }

    /// Gradients of the cross-entropy loss w.r.t. every parameter, in a
    /// model-shaped container.
    pub fn backward(&self, label: usize, cache: &ForwardCache) -> Result<BiLstmModel> {
        let units = self.units();
        let len = cache.inputs.len();
        if label >= self.num_classes
            || cache.probabilities.len() != self.num_classes
            || cache.fwd_steps.len() != self.layers.len()
            || cache.top_fwd.len() != units
            || len == 0
        {
            return Err(Error::Shape("forward cache does not belong to this model".into()));
        }
        let mut grads = self.zeros_like();

        let mut dlogits = cache.probabilities.clone();
        dlogits[label] -= 1.0;
        grads.out_fwd.add_outer(&dlogits, &cache.top_fwd);
        grads.out_bwd.add_outer(&dlogits, &cache.top_bwd);
        for (g, d) in grads.out_bias.iter_mut().zip(&dlogits) {
            *g += d;
        }

        // Gradient w.r.t. each layer's (post-dropout) outputs.
        let mut d_out = vec![vec![0.0; 2 * units]; len];
        self.out_fwd.mul_t_vec_acc(&dlogits, &mut d_out[len - 1][..units]);
        self.out_bwd.mul_t_vec_acc(&dlogits, &mut d_out[0][units..]);

        for k in (0..self.layers.len()).rev() {
            if let Some(masks) = cache.dropout.get(k).filter(|m| !m.is_empty()) {
                for (d, m) in d_out.iter_mut().zip(masks) {
                    for (v, s) in d.iter_mut().zip(m) {
                        *v *= s;
                    }
                }
            }
            let layer = &self.layers[k];
            let in_dim = layer.forward.input_dim;
            let mut d_in = vec![vec![0.0; in_dim]; len];
            let fwd_order: Vec<usize> = (0..len).collect();
            let bwd_order: Vec<usize> = (0..len).rev().collect();
            let dh_fwd: Vec<&[f64]> = d_out.iter().map(|d| &d[..units]).collect();
            let dh_bwd: Vec<&[f64]> = d_out.iter().map(|d| &d[units..]).collect();
            let gl = &mut grads.layers[k];
            cell_bptt(&layer.forward, &cache.fwd_steps[k], &fwd_order, &dh_fwd, &mut gl.forward, &mut d_in);
            cell_bptt(&layer.backward, &cache.bwd_steps[k], &bwd_order, &dh_bwd, &mut gl.backward, &mut d_in);
            d_out = d_in;
        }

        // d_out now holds the gradient w.r.t. the ReLU projection outputs.
        for t in 0..len {
            let d_pre: Vec<f64> = d_out[t]
                .iter()
                .zip(&cache.proj_pre[t])
                .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
                .collect();
            grads.input_projection.weights.add_outer(&d_pre, &cache.inputs[t]);
            for (g, d) in grads.input_projection.bias.iter_mut().zip(&d_pre) {
                *g += d;
            }
        }
        Ok(grads)
    }
}

/// Reverse-mode pass through one directional cell. `order` is the scan
/// order used in the forward pass; `steps` and `dh` are indexed by
/// timestep. Input gradients are accumulated into `d_in`.
fn cell_bptt(
    params: &LstmCellParams,
    steps: &[StepCache],
    order: &[usize],
    dh: &[&[f64]],
    grads: &mut LstmCellParams,
    d_in: &mut [Vec<f64>],
) {
    let n = params.units;
    let mut dh_next = vec![0.0; n];
    let mut dc_next = vec![0.0; n];
    let mut da = vec![0.0; 4 * n];
    for &t in order.iter().rev() {
        let s = &steps[t];
        for k in 0..n {
            let dh_k = dh[t][k] + dh_next[k];
            let dc = dc_next[k] + dh_k * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
            let d_o = dh_k * s.tanh_c[k];
            let d_i = dc * s.g[k];
            let d_g = dc * s.i[k];
            let d_f = dc * s.c_prev[k];
            da[k] = d_i * s.i[k] * (1.0 - s.i[k]);
            da[n + k] = d_f * s.f[k] * (1.0 - s.f[k]);
            da[2 * n + k] = d_g * (1.0 - s.g[k] * s.g[k]);
            da[3 * n + k] = d_o * s.o[k] * (1.0 - s.o[k]);
            dc_next[k] = dc * s.f[k];
        }
        grads.w.add_outer(&da, &s.x);
        grads.u.add_outer(&da, &s.h_prev);
        for (g, d) in grads.b.iter_mut().zip(&da) {
            *g += d;
        }
        params.w.mul_t_vec_acc(&da, &mut d_in[t]);
        dh_next.fill(0.0);
        params.u.mul_t_vec_acc(&da, &mut dh_next);
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Smallest probability fed to the logarithm.
pub const MIN_PROBABILITY: f64 = 1e-12;

/// Cross-entropy `−ln p[label]`, with `p` floored at 1e-12.
pub fn loss(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].max(MIN_PROBABILITY).ln()
}

/// Index of the largest probability; ties go to the lower index.
pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(model: &BiLstmModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Bias-corrected Adam update applied to raw tensors.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape("Adam state does not match parameter tree".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape("Adam state does not match parameter tree".into()));
            }
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

pub fn adam_step(model: &mut BiLstmModel, grads: &BiLstmModel, state: &mut AdamState, lr: f64) -> Result<()> {
    state.update(model.tensors_mut(), grads.tensors(), lr)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub units_per_layer: usize,
    pub num_layers: usize,
    pub seed: u64,
    /// Timesteps each record is folded into.
    pub sequence_chunks: usize,
    /// Fraction of rows held out for the validation curve; 0 disables it.
    pub validation_fraction: f64,
    /// Global gradient-norm ceiling per batch.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 64,
            epochs: 100,
            dropout: 0.5,
            units_per_layer: 128,
            num_layers: 3,
            seed: 0,
            sequence_chunks: 8,
            validation_fraction: 0.1,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: BiLstmModel,
    pub curves: Vec<EpochStats>,
    /// Inference-mode training loss of the initial model.
    pub initial_train_loss: f64,
}

/// Number of fixed work shards a batch is split into. Gradients are summed
/// shard by shard in index order, so results do not depend on thread count.
const BATCH_SHARDS: usize = 8;

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn add_into(acc: &mut BiLstmModel, g: &BiLstmModel) {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn scale_and_clip(grads: &mut BiLstmModel, scale: f64, clip_norm: f64) {
    let mut tensors = grads.tensors_mut();
    let mut sq = 0.0;
    for t in tensors.iter_mut() {
        for v in t.iter_mut() {
            *v *= scale;
            sq += *v * *v;
        }
    }
    let norm = sq.sqrt();
    if clip_norm > 0.0 && norm > clip_norm {
        let s = clip_norm / norm;
        for t in tensors {
            for v in t.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Mean loss and accuracy of `model` in inference mode.
pub fn evaluate_sequences(model: &BiLstmModel, seqs: &[SequenceView], labels: &[usize]) -> Result<(f64, f64)> {
    let scored = seqs
        .par_iter()
        .zip(labels)
        .map(|(s, &y)| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (p, _) = model.forward(s, false, &mut rng)?;
            Ok((loss(&p, y), usize::from(argmax(&p) == y)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scored.len().max(1) as f64;
    let total_loss: f64 = scored.iter().map(|s| s.0).sum();
    let correct: usize = scored.iter().map(|s| s.1).sum();
    Ok((total_loss / n, correct as f64 / n))
}

/// Mini-batch Adam training on the masked columns of a normalized dataset.
pub fn train(d: &Dataset, mask: &FeatureMask, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if d.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.sequence_chunks == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch size, sequence chunks and learning rate must be positive".into()));
    }
    let masked = d.apply_mask(mask)?;
    let layout = SequenceLayout {
        input_width: masked.num_features(),
        chunks: cfg.sequence_chunks,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = ModelShape {
        layout,
        units: cfg.units_per_layer,
        num_layers: cfg.num_layers,
        num_classes: d.schema.num_classes(),
        dropout_rate: cfg.dropout,
    };
    let mut model = BiLstmModel::new(shape, &mut rng)?;

    let (train_idx, val_idx) = if cfg.validation_fraction > 0.0 {
        masked.stratified_split_indices(cfg.validation_fraction, rng.gen())?
    } else {
        ((0..masked.len()).collect(), Vec::new())
    };
    let fold = |idx: &[usize]| -> Result<(Vec<SequenceView>, Vec<usize>)> {
        let seqs = idx
            .iter()
            .map(|&i| SequenceView::fold(&masked.rows[i].features, layout))
            .collect::<Result<Vec<_>>>()?;
        Ok((seqs, idx.iter().map(|&i| masked.rows[i].label).collect()))
    };
    let (train_seqs, train_labels) = fold(&train_idx)?;
    let (val_seqs, val_labels) = fold(&val_idx)?;

    let (initial_train_loss, _) = evaluate_sequences(&model, &train_seqs, &train_labels)?;
    let mut adam = AdamState::new(&model);
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let shard_len = batch.len().div_ceil(BATCH_SHARDS);
            let shards = batch
                .par_chunks(shard_len)
                .map(|shard| {
                    let mut acc = model.zeros_like();
                    for &i in shard {
                        let mut ex_rng = example_rng(cfg.seed, epoch, i);
                        let (_, cache) = model.forward(&train_seqs[i], true, &mut ex_rng)?;
                        add_into(&mut acc, &model.backward(train_labels[i], &cache)?);
                    }
                    Ok(acc)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = model.zeros_like();
            for shard in &shards {
                add_into(&mut grads, shard);
            }
            scale_and_clip(&mut grads, 1.0 / batch.len() as f64, cfg.clip_norm);
            adam_step(&mut model, &grads, &mut adam, cfg.learning_rate)?;
        }

        let (train_loss, train_acc) = evaluate_sequences(&model, &train_seqs, &train_labels)?;
        let (val_loss, val_acc) = if val_seqs.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate_sequences(&model, &val_seqs, &val_labels)?;
            (Some(l), Some(a))
        };
        curves.push(EpochStats {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
        });
    }

    Ok(TrainOutcome {
        model,
        curves,
        initial_train_loss,
    })
}

/// Writes training curves as `epoch,train_loss,train_acc,val_loss,val_acc`.
pub fn write_curves_csv<W: std::io::Write>(curves: &[EpochStats], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in curves {
        out.write_record([
            c.epoch.to_string(),
            c.train_loss.to_string(),
            c.train_acc.to_string(),
            opt(c.val_loss),
            opt(c.val_acc),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<curves writer>", e))?;
    Ok(())
}

/// Predicted class and probability vector for every row.
pub fn predict(model: &BiLstmModel, d: &Dataset, mask: &FeatureMask) -> Result<Vec<(usize, Vec<f64>)>> {
    let masked = d.apply_mask(mask)?;
    if masked.num_features() != model.layout.input_width {
        return Err(Error::Shape(format!(
            "model expects {} features, masked data has {}",
            model.layout.input_width,
            masked.num_features()
        )));
    }
    masked
        .rows
        .par_iter()
        .map(|r| {
            let p = model.probabilities(&r.features)?;
            Ok((argmax(&p), p))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// On-disk model: shapes plus flat row-major parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub num_classes: usize,
    pub units: usize,
    pub num_layers: usize,
    pub dropout_rate: f64,
    pub layout: SequenceLayout,
    /// Column bounds of the training data, over all (unmasked) features.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<Normalizer>,
    pub tensors: Vec<TensorRecord>,
}

impl ModelFile {
    pub fn from_model(model: &BiLstmModel, normalizer: Option<Normalizer>) -> Self {
        let tensors = model
            .tensor_names()
            .into_iter()
            .zip(model.tensor_shapes())
            .zip(model.tensors())
            .map(|((name, shape), values)| TensorRecord {
                name,
                shape,
                values: values.to_vec(),
            })
            .collect();
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            num_classes: model.num_classes,
            units: model.units(),
            num_layers: model.layers.len(),
            dropout_rate: model.dropout_rate,
            layout: model.layout,
            normalizer,
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<BiLstmModel> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Decode(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        let shape = ModelShape {
            layout: self.layout,
            units: self.units,
            num_layers: self.num_layers,
            num_classes: self.num_classes,
            dropout_rate: self.dropout_rate,
        };
        let mut model = BiLstmModel::new(shape, &mut ChaCha8Rng::seed_from_u64(0))?.zeros_like();
        let names = model.tensor_names();
        let shapes = model.tensor_shapes();
        if self.tensors.len() != names.len() {
            return Err(Error::Decode(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for (((dst, name), shape), rec) in model.tensors_mut().into_iter().zip(&names).zip(&shapes).zip(&self.tensors) {
            if &rec.name != name || &rec.shape != shape || rec.values.len() != dst.len() {
                return Err(Error::Decode(format!(
                    "tensor '{}' {:?} does not match expected '{name}' {shape:?}",
                    rec.name, rec.shape
                )));
            }
            if rec.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Decode(format!("tensor '{name}' has non-finite values")));
            }
            dst.copy_from_slice(&rec.values);
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
