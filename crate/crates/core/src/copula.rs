//! Copula flows.
//!
//! A stack of masked autoregressive layers, each applying one `[0, 1] -> [0, 1]`
//! spline per dimension whose parameters come from a masked MLP of the
//! preceding dimensions. Sampling runs the layers first to last, generating
//! dimensions one at a time; density evaluation inverts them last to first
//! with a single conditioner pass per layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{self, AdamConfig, EpochRecord, LoopConfig, Objective, ParamVector};
use crate::error::{Error, Result};
use crate::marginal::{split_indices, SaturationCounter};
use crate::spline::{n_raw_params, KnotGrad, LocalGrad, NormalizedSpline, SplineConstraints};

/// Layer inputs are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]`.
pub const CLAMP_EPS: f64 = 1e-6;

/// Conditioner hidden-layer nonlinearity, recorded in model files.
pub const ACTIVATION: &str = "tanh";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopulaArchitecture {
    pub dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub k_bins: usize,
    pub n_layers: usize,
}

impl CopulaArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "a copula flow needs at least 2 dimensions, got {}",
                self.dim
            )));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden sizes must be a non-empty list of positive sizes".into()));
        }
        if self.k_bins < 2 || self.n_layers == 0 {
            return Err(Error::Config("copula k_bins must be >= 2 and n_layers >= 1".into()));
        }
        Ok(())
    }

    /// Raw spline parameters per dimension.
    pub fn params_per_dim(&self) -> usize {
        n_raw_params(self.k_bins)
    }
}

/// MADE-style masked MLP producing spline parameters for every dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConditioner {
    /// `[d, hidden.., d * P]`.
    widths: Vec<usize>,
    /// Order index of each input dimension.
    order: Vec<usize>,
    /// One row-major `out x in` mask per dense layer.
    masks: Vec<Vec<bool>>,
    /// Position of this conditioner's first parameter in the stack vector.
    offset: usize,
}

impl MaskedConditioner {
    fn new(dim: usize, hidden: &[usize], per_dim: usize, ordering: &[usize], offset: usize) -> Self {
        let mut order = vec![0; dim];
        for (pos, &k) in ordering.iter().enumerate() {
            order[k] = pos;
        }
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim * per_dim);

        let hidden_degrees: Vec<Vec<usize>> = hidden
            .iter()
            .map(|&h| (0..h).map(|j| j % (dim - 1)).collect())
            .collect();
        let mut masks = Vec::with_capacity(hidden.len() + 1);
        let mut prev: Vec<usize> = order.clone();
        for degrees in &hidden_degrees {
            masks.push(
                degrees
                    .iter()
                    .flat_map(|&m| prev.iter().map(move |&p| m >= p))
                    .collect(),
            );
            prev = degrees.clone();
        }
        masks.push(
            (0..dim * per_dim)
                .flat_map(|o| {
                    let k_order = order[o / per_dim];
                    prev.iter().map(move |&m| k_order > m)
                })
                .collect(),
        );
        Self {
            widths,
            order,
            masks,
            offset,
        }
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.widths
    }

    /// Order index of each input dimension.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn param_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_params()
    }

    /// Copies the weights out of `params` with masked entries forced to zero.
    fn prepare(&self, params: &[f64]) -> PreparedConditioner {
        let mut at = self.offset;
        let dense = self
            .widths
            .windows(2)
            .zip(&self.masks)
            .map(|(w, mask)| {
                let (n_in, n_out) = (w[0], w[1]);
                let weights = params[at..at + n_in * n_out]
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v } else { 0.0 })
                    .collect();
                at += n_in * n_out;
                let bias = params[at..at + n_out].to_vec();
                at += n_out;
                Dense {
                    n_in,
                    n_out,
                    weights,
                    bias,
                }
            })
            .collect();
        PreparedConditioner { dense }
    }

    /// Zeroes masked entries of a gradient over the full stack vector.
    fn mask_gradient(&self, grad: &mut [f64]) {
        let mut at = self.offset;
        for (w, mask) in self.widths.windows(2).zip(&self.masks) {
            for (g, &m) in grad[at..at + w[0] * w[1]].iter_mut().zip(mask) {
                if !m {
                    *g = 0.0;
                }
            }
            at += w[0] * w[1] + w[1];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    n_in: usize,
    n_out: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct PreparedConditioner {
    dense: Vec<Dense>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl PreparedConditioner {
    /// Runs the hidden layers, storing post-activation values in `acts`.
    fn hidden(&self, input: &[f64], acts: &mut [Vec<f64>]) {
        let n_hidden = self.dense.len() - 1;
        for i in 0..n_hidden {
            let (before, rest) = acts.split_at_mut(i);
            let x = if i == 0 { input } else { &before[i - 1] };
            let layer = &self.dense[i];
            for (o, a) in rest[0].iter_mut().enumerate() {
                let w = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
                *a = (layer.bias[o] + dot(w, x)).tanh();
            }
        }
    }

    /// Output units `range` of the final layer given the last hidden activation.
    fn output(&self, last: &[f64], range: std::ops::Range<usize>, out: &mut [f64]) {
        let layer = self.dense.last().expect("conditioner has an output layer");
        for (o, v) in range.zip(out.iter_mut()) {
            let w = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
            *v = layer.bias[o] + dot(w, last);
        }
    }

    /// Back-propagates `g_out` (gradient on every output unit), adding weight
    /// gradients into `g_params` (this conditioner's slice) and the input
    /// gradient into `g_input`.
    fn backward(
        &self,
        input: &[f64],
        acts: &[Vec<f64>],
        g_out: &[f64],
        g_params: &mut [f64],
        g_input: &mut [f64],
        scratch: &mut [Vec<f64>; 2],
    ) {
        let offsets: Vec<usize> = self
            .dense
            .iter()
            .scan(0, |at, d| {
                let o = *at;
                *at += d.n_in * d.n_out + d.n_out;
                Some(o)
            })
            .collect();
        let n = self.dense.len();
        let [g_cur, g_next] = scratch;
        g_cur.clear();
        g_cur.extend_from_slice(g_out);
        for i in (0..n).rev() {
            let layer = &self.dense[i];
            let x = if i == 0 { input } else { &acts[i - 1][..] };
            if i + 1 < n {
                // Through tanh: d tanh = 1 - tanh^2.
                for (g, a) in g_cur.iter_mut().zip(&acts[i]) {
                    *g *= 1.0 - a * a;
                }
            }
            let (gw, gb) = g_params[offsets[i]..offsets[i] + layer.n_in * layer.n_out + layer.n_out]
                .split_at_mut(layer.n_in * layer.n_out);
            g_next.clear();
            g_next.resize(layer.n_in, 0.0);
            for (o, &g) in g_cur.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let row = o * layer.n_in..(o + 1) * layer.n_in;
                axpy(g, x, &mut gw[row.clone()]);
                axpy(g, &layer.weights[row], g_next);
            }
            std::mem::swap(g_cur, g_next);
        }
        for (gi, g) in g_input.iter_mut().zip(g_cur.iter()) {
            *gi += g;
        }
    }
}

/// One autoregressive spline layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaFlowLayer {
    conditioner: MaskedConditioner,
    /// Dimensions in generation order.
    ordering: Vec<usize>,
}

impl CopulaFlowLayer {
    pub fn conditioner(&self) -> &MaskedConditioner {
        &self.conditioner
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }
}

/// Per-row record of one layer's inverse pass, kept for back-propagation.
struct LayerTape {
    input: Vec<f64>,
    clamped: Vec<bool>,
    acts: Vec<Vec<f64>>,
    theta: Vec<f64>,
    splines: Vec<NormalizedSpline>,
    grads: Vec<LocalGrad>,
    output: Vec<f64>,
}

impl LayerTape {
    fn new(arch: &CopulaArchitecture) -> Self {
        let d = arch.dim;
        Self {
            input: vec![0.0; d],
            clamped: vec![false; d],
            acts: arch.hidden_sizes.iter().map(|&h| vec![0.0; h]).collect(),
            theta: vec![0.0; d * arch.params_per_dim()],
            splines: (0..d)
                .map(|_| NormalizedSpline::with_bins(arch.k_bins, (0.0, 1.0), SplineConstraints::default()))
                .collect(),
            grads: vec![LocalGrad::default(); d],
            output: vec![0.0; d],
        }
    }
}

fn clamp_unit(v: f64) -> (f64, bool) {
    let c = v.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    // NaN compares false and is reported as clamped.
    (if c.is_nan() { 0.5 } else { c }, c != v)
}

fn refill(spline: &mut NormalizedSpline, theta: &[f64], k: usize) {
    spline.refill(&theta[..k], &theta[k..2 * k], &theta[2 * k..]);
}

/// Inverse of one layer on `y`, recording into `tape`. Returns the log-determinant.
fn layer_inverse(
    arch: &CopulaArchitecture,
    prep: &PreparedConditioner,
    y: &[f64],
    tape: &mut LayerTape,
    with_grad: bool,
) -> f64 {
    let p = arch.params_per_dim();
    let k = arch.k_bins;
    for (i, &v) in y.iter().enumerate() {
        let (c, flag) = clamp_unit(v);
        tape.input[i] = c;
        tape.clamped[i] = flag;
    }
    prep.hidden(&tape.input, &mut tape.acts);
    let last: &[f64] = tape.acts.last().expect("at least one hidden layer");
    prep.output(last, 0..arch.dim * p, &mut tape.theta);
    let mut logdet = 0.0;
    for i in 0..arch.dim {
        let spline = &mut tape.splines[i];
        refill(spline, &tape.theta[i * p..(i + 1) * p], k);
        let e = if with_grad {
            let (e, g) = spline.inverse_with_grad(tape.input[i]);
            tape.grads[i] = g;
            e
        } else {
            spline.inverse(tape.input[i])
        };
        tape.output[i] = e.value;
        logdet += e.log_deriv;
    }
    logdet
}

/// Scratch buffers for back-propagation through one row.
struct BackwardScratch {
    knot: KnotGrad,
    g_theta: Vec<f64>,
    g_input: Vec<f64>,
    mlp: [Vec<f64>; 2],
}

/// Back-propagates through a recorded layer. `g` holds the gradient on the
/// layer output on entry and on the layer input on exit.
fn layer_backward(
    arch: &CopulaArchitecture,
    cond: &MaskedConditioner,
    prep: &PreparedConditioner,
    tape: &LayerTape,
    g: &mut [f64],
    g_logdet: f64,
    g_params: &mut [f64],
    s: &mut BackwardScratch,
) {
    let p = arch.params_per_dim();
    s.g_theta.iter_mut().for_each(|v| *v = 0.0);
    s.g_input.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..arch.dim {
        let lg = &tape.grads[i];
        s.knot.clear();
        s.knot.accumulate(lg, g[i], g_logdet);
        tape.splines[i].raw_gradient(&s.knot, &mut s.g_theta[i * p..(i + 1) * p]);
        s.g_input[i] += g[i] * lg.value_input + g_logdet * lg.log_deriv_input;
    }
    prep.backward(
        &tape.input,
        &tape.acts,
        &s.g_theta,
        &mut g_params[cond.param_range()],
        &mut s.g_input,
        &mut s.mlp,
    );
    for i in 0..arch.dim {
        g[i] = if tape.clamped[i] { 0.0 } else { s.g_input[i] };
    }
}

/// Forward (sampling) pass of one layer: `x` on the base side to `y`.
fn layer_sample(
    arch: &CopulaArchitecture,
    layer: &CopulaFlowLayer,
    prep: &PreparedConditioner,
    x: &[f64],
    y: &mut [f64],
    tape: &mut LayerTape,
) -> bool {
    let p = arch.params_per_dim();
    let mut any_clamped = false;
    // Not yet generated entries are masked out of the conditioner.
    tape.input.iter_mut().for_each(|v| *v = 0.5);
    for &k in &layer.ordering {
        prep.hidden(&tape.input, &mut tape.acts);
        let last: &[f64] = tape.acts.last().expect("at least one hidden layer");
        prep.output(last, k * p..(k + 1) * p, &mut tape.theta[..p]);
        let spline = &mut tape.splines[k];
        refill(spline, &tape.theta[..p], arch.k_bins);
        let (xc, flag) = clamp_unit(x[k]);
        any_clamped |= flag;
        y[k] = spline.forward(xc).value;
        tape.input[k] = clamp_unit(y[k]).0;
    }
    any_clamped
}

/// The copula flow: a stack of autoregressive spline layers.
#[derive(Debug, Clone)]
pub struct CopulaFlowStack {
    arch: CopulaArchitecture,
    layers: Vec<CopulaFlowLayer>,
    params: ParamVector,
    prepared: Vec<PreparedConditioner>,
    saturation: SaturationCounter,
}

impl PartialEq for CopulaFlowStack {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl CopulaFlowStack {
    /// Stack with every parameter zero: each layer is the identity.
    pub fn zeros(arch: CopulaArchitecture) -> Result<Self> {
        arch.validate()?;
        let d = arch.dim;
        let per_dim = arch.params_per_dim();
        let mut params = ParamVector::new();
        let mut layers = Vec::with_capacity(arch.n_layers);
        for l in 0..arch.n_layers {
            let ordering: Vec<usize> = if l % 2 == 0 {
                (0..d).collect()
            } else {
                (0..d).rev().collect()
            };
            let conditioner = MaskedConditioner::new(d, &arch.hidden_sizes, per_dim, &ordering, params.len());
            for (i, w) in conditioner.widths.windows(2).enumerate() {
                params.push_block(format!("flow{l}.dense{i}.weight"), &vec![0.0; w[0] * w[1]]);
                params.push_block(format!("flow{l}.dense{i}.bias"), &vec![0.0; w[1]]);
            }
            layers.push(CopulaFlowLayer { conditioner, ordering });
        }
        let mut stack = Self {
            arch,
            layers,
            params,
            prepared: Vec::new(),
            saturation: SaturationCounter::default(),
        };
        stack.prepared = stack.prepare(stack.params.values());
        Ok(stack)
    }

    /// Rebuilds a stack from a flat parameter vector.
    pub fn from_params(arch: CopulaArchitecture, values: Vec<f64>) -> Result<Self> {
        let mut stack = Self::zeros(arch)?;
        stack.set_params(values)?;
        Ok(stack)
    }

    pub fn architecture(&self) -> &CopulaArchitecture {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn layers(&self) -> &[CopulaFlowLayer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, values: Vec<f64>) -> Result<()> {
        self.params.set_values(values)?;
        self.params.validate()?;
        self.prepared = self.prepare(self.params.values());
        Ok(())
    }

    pub fn saturation_count(&self) -> u64 {
        self.saturation.get()
    }

    fn prepare(&self, values: &[f64]) -> Vec<PreparedConditioner> {
        self.layers.iter().map(|l| l.conditioner.prepare(values)).collect()
    }

    fn tapes(&self) -> Vec<LayerTape> {
        (0..self.arch.n_layers).map(|_| LayerTape::new(&self.arch)).collect()
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.arch.dim {
            return Err(Error::Argument(format!(
                "row has {} values, copula dimension is {}",
                row.len(),
                self.arch.dim
            )));
        }
        Ok(())
    }

    /// Maps `u_x` back to the base uniforms; returns them with the log-determinant.
    pub fn inverse(&self, u_x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_row(u_x)?;
        let mut tapes = self.tapes();
        let (u, logdet, clamped) = inverse_row(&self.arch, &self.prepared, u_x, &mut tapes, false);
        self.saturation.record(clamped);
        Ok((u, logdet))
    }

    pub fn logdensity(&self, u_x: &[f64]) -> Result<f64> {
        Ok(self.inverse(u_x)?.1)
    }

    /// Log-densities of the rows of a row-major matrix, in parallel.
    pub fn logdensity_rows(&self, data: &[f64]) -> Result<Vec<f64>> {
        let d = self.arch.dim;
        if data.len() % d != 0 {
            return Err(Error::Argument(format!("matrix length {} is not a multiple of {d}", data.len())));
        }
        let out: Vec<(f64, bool)> = data
            .par_chunks(d * diff::REDUCTION_CHUNK)
            .flat_map_iter(|block| {
                let mut tapes = self.tapes();
                block
                    .chunks(d)
                    .map(|row| {
                        let (_, ld, c) = inverse_row(&self.arch, &self.prepared, row, &mut tapes, false);
                        (ld, c)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(out
            .into_iter()
            .map(|(ld, c)| {
                self.saturation.record(c);
                ld
            })
            .collect())
    }

    /// Maps base uniforms to copula samples.
    pub fn sample(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_row(u)?;
        let mut tapes = self.tapes();
        let (x, clamped) = sample_row(&self.arch, &self.layers, &self.prepared, u, &mut tapes[0]);
        self.saturation.record(clamped);
        Ok(x)
    }

    /// Samples for every row of a row-major matrix of base uniforms, in parallel.
    pub fn sample_rows(&self, u: &[f64]) -> Result<Vec<f64>> {
        let d = self.arch.dim;
        if u.len() % d != 0 {
            return Err(Error::Argument(format!("matrix length {} is not a multiple of {d}", u.len())));
        }
        let blocks: Vec<Vec<f64>> = u
            .par_chunks(d * diff::REDUCTION_CHUNK)
            .map(|block| {
                let mut tape = LayerTape::new(&self.arch);
                let mut out = Vec::with_capacity(block.len());
                for row in block.chunks(d) {
                    let (x, clamped) = sample_row(&self.arch, &self.layers, &self.prepared, row, &mut tape);
                    self.saturation.record(clamped);
                    out.extend(x);
                }
                out
            })
            .collect();
        Ok(blocks.concat())
    }

    /// Output parameters of one layer's conditioner for input `y`, for tests
    /// and diagnostics.
    pub fn conditioner_output(&self, layer: usize, y: &[f64]) -> Result<Vec<f64>> {
        self.check_row(y)?;
        let prep = self
            .prepared
            .get(layer)
            .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
        let mut tape = LayerTape::new(&self.arch);
        prep.hidden(y, &mut tape.acts);
        let last: &[f64] = tape.acts.last().expect("at least one hidden layer");
        let p = self.arch.params_per_dim();
        prep.output(last, 0..self.arch.dim * p, &mut tape.theta);
        Ok(tape.theta)
    }
}

fn inverse_row(
    arch: &CopulaArchitecture,
    prepared: &[PreparedConditioner],
    u_x: &[f64],
    tapes: &mut [LayerTape],
    with_grad: bool,
) -> (Vec<f64>, f64, bool) {
    let mut logdet = 0.0;
    let mut clamped = false;
    for l in (0..arch.n_layers).rev() {
        let (done, rest) = tapes.split_at_mut(l + 1);
        let input: &[f64] = if l + 1 == arch.n_layers { u_x } else { &rest[0].output };
        logdet += layer_inverse(arch, &prepared[l], input, &mut done[l], with_grad);
        clamped |= done[l].clamped.iter().any(|&c| c);
    }
    (tapes[0].output.clone(), logdet, clamped)
}

fn sample_row(
    arch: &CopulaArchitecture,
    layers: &[CopulaFlowLayer],
    prepared: &[PreparedConditioner],
    u: &[f64],
    tape: &mut LayerTape,
) -> (Vec<f64>, bool) {
    let mut x = u.to_vec();
    let mut y = vec![0.0; arch.dim];
    let mut clamped = false;
    for (layer, prep) in layers.iter().zip(prepared) {
        clamped |= layer_sample(arch, layer, prep, &x, &mut y, tape);
        std::mem::swap(&mut x, &mut y);
    }
    (x, clamped)
}

/// Builds a stack whose every spline starts as the identity.
///
/// Hidden weights are drawn uniformly in `±1/sqrt(fan_in)`; the output layer
/// is zero, so the initial model is the independence copula.
pub fn build_copula_flow(
    dim: usize,
    hidden_sizes: &[usize],
    k_bins: usize,
    n_layers: usize,
    seed: u64,
) -> Result<CopulaFlowStack> {
    let arch = CopulaArchitecture {
        dim,
        hidden_sizes: hidden_sizes.to_vec(),
        k_bins,
        n_layers,
    };
    let mut stack = CopulaFlowStack::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = stack.params.values().to_vec();
    for layer in &stack.layers {
        let c = &layer.conditioner;
        let mut at = c.offset;
        let n_dense = c.widths.len() - 1;
        for (i, (w, mask)) in c.widths.windows(2).zip(&c.masks).enumerate() {
            let n_w = w[0] * w[1];
            if i + 1 < n_dense {
                let bound = 1.0 / (w[0] as f64).sqrt();
                for (v, &m) in values[at..at + n_w].iter_mut().zip(mask) {
                    let r: f64 = rng.random_range(-bound..bound);
                    *v = if m { r } else { 0.0 };
                }
            }
            at += n_w + w[1];
        }
    }
    stack.set_params(values)?;
    Ok(stack)
}

pub fn copula_inverse(stack: &CopulaFlowStack, u_x: &[f64]) -> Result<(Vec<f64>, f64)> {
    stack.inverse(u_x)
}

pub fn copula_logdensity(stack: &CopulaFlowStack, u_x: &[f64]) -> Result<f64> {
    stack.logdensity(u_x)
}

pub fn copula_sample(stack: &CopulaFlowStack, u: &[f64]) -> Result<Vec<f64>> {
    stack.sample(u)
}

/// Mean negative copula log-density over rows of a row-major matrix.
pub struct CopulaNll<'a> {
    pub stack: &'a CopulaFlowStack,
    pub data: &'a [f64],
}

impl CopulaNll<'_> {
    fn row(&self, r: usize) -> &[f64] {
        let d = self.stack.arch.dim;
        &self.data[r * d..(r + 1) * d]
    }
}

impl Objective for CopulaNll<'_> {
    fn n_params(&self) -> usize {
        self.stack.params.len()
    }

    fn loss_and_grad(&self, params: &[f64], rows: &[usize]) -> (f64, Vec<f64>) {
        let arch = &self.stack.arch;
        let prepared = self.stack.prepare(params);
        let n = self.n_params();
        let (loss, mut grad) = diff::par_sum_rows(rows, n, |chunk, acc| {
            let mut tapes = self.stack.tapes();
            let mut scratch = BackwardScratch {
                knot: KnotGrad::zeros(arch.k_bins),
                g_theta: vec![0.0; arch.dim * arch.params_per_dim()],
                g_input: vec![0.0; arch.dim],
                mlp: [Vec::new(), Vec::new()],
            };
            let mut g = vec![0.0; arch.dim];
            let mut loss = 0.0;
            for &r in chunk {
                let (_, logdet, _) = inverse_row(arch, &prepared, self.row(r), &mut tapes, true);
                loss -= logdet;
                g.iter_mut().for_each(|v| *v = 0.0);
                for (l, layer) in self.stack.layers.iter().enumerate() {
                    layer_backward(arch, &layer.conditioner, &prepared[l], &tapes[l], &mut g, -1.0, acc, &mut scratch);
                }
            }
            loss
        });
        let scale = 1.0 / rows.len() as f64;
        grad.iter_mut().for_each(|v| *v *= scale);
        for layer in &self.stack.layers {
            layer.conditioner.mask_gradient(&mut grad);
        }
        (loss * scale, grad)
    }

    fn loss(&self, params: &[f64], rows: &[usize]) -> f64 {
        let prepared = self.stack.prepare(params);
        let total = diff::par_sum_loss(rows, |chunk| {
            let mut tapes = self.stack.tapes();
            chunk
                .iter()
                .map(|&r| -inverse_row(&self.stack.arch, &prepared, self.row(r), &mut tapes, false).1)
                .sum()
        });
        total / rows.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CopulaConfig {
    pub n_layers: usize,
    pub hidden_sizes: Vec<usize>,
    pub k_bins: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for CopulaConfig {
    fn default() -> Self {
        Self {
            n_layers: 10,
            hidden_sizes: vec![512, 512],
            k_bins: 16,
            epochs: 100,
            batch_size: 512,
            learning_rate: 1e-4,
            seed: 0,
            val_fraction: 0.1,
            patience: 10,
        }
    }
}

impl CopulaConfig {
    pub fn architecture(&self, dim: usize) -> CopulaArchitecture {
        CopulaArchitecture {
            dim,
            hidden_sizes: self.hidden_sizes.clone(),
            k_bins: self.k_bins,
            n_layers: self.n_layers,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.architecture(2).validate()?;
        if self.epochs == 0
            || self.batch_size == 0
            || self.patience == 0
            || !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !(0.0..1.0).contains(&self.val_fraction)
        {
            return Err(Error::Config("invalid copula training configuration".into()));
        }
        Ok(())
    }
}

/// Trains `stack` on uniform marginals (row-major, `stack.dim()` columns).
pub fn fit_copula(
    stack: &CopulaFlowStack,
    u_data: &[f64],
    config: &CopulaConfig,
) -> Result<(CopulaFlowStack, Vec<EpochRecord>)> {
    config.validate()?;
    let d = stack.dim();
    if u_data.len() % d != 0 || u_data.is_empty() {
        return Err(Error::Data(format!(
            "uniform matrix of length {} does not hold rows of {d} values",
            u_data.len()
        )));
    }
    if let Some(i) = u_data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("uniform value at row {} is not finite", i / d)));
    }
    let n = u_data.len() / d;
    if n < 100 {
        log::warn!("fitting a copula flow on only {n} rows");
    }
    if n < 2 {
        return Err(Error::Data("need at least 2 rows".into()));
    }
    let objective = CopulaNll { stack, data: u_data };
    let (train, val) = split_indices(n, config.val_fraction, config.seed);
    let loop_config = LoopConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        patience: config.patience,
        seed: config.seed,
        adam: AdamConfig::default(),
    };
    let outcome = diff::minimize(&objective, stack.params.values().to_vec(), &train, &val, &loop_config)?;
    let mut fitted = stack.clone();
    fitted.set_params(outcome.params)?;
    Ok((fitted, outcome.trace))
}
