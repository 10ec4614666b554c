//! Monotone rational-quadratic splines.
//!
//! A spline maps the unit interval onto `[lower, upper]` through `K` bins whose
//! widths, heights and knot derivatives come from an unconstrained parameter
//! vector. The forward direction (`u -> x`) is a quantile function, the inverse
//! direction (`x -> u`) is the matching CDF. Both directions report
//! `log |d out / d in|` and, on request, analytic partial derivatives with
//! respect to the raw parameters and the input.
//!
//! Raw parameters are laid out as `[widths (K) | heights (K) | slopes (K + 1)]`.
//! Widths and heights pass through a softmax with a floor of `min_bin_fraction`;
//! slopes pass through a shifted softplus with a floor of `min_derivative`, so
//! that an all-zero raw vector yields unit dimensionless derivatives and
//! therefore an affine map.

use crate::error::{Error, Result};

pub const DEFAULT_MIN_BIN_FRACTION: f64 = 1e-3;
pub const DEFAULT_MIN_DERIVATIVE: f64 = 1e-3;

/// Number of raw parameters of a `k_bins` spline.
pub const fn n_raw_params(k_bins: usize) -> usize {
    3 * k_bins + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineConstraints {
    pub min_bin_fraction: f64,
    pub min_derivative: f64,
}

impl Default for SplineConstraints {
    fn default() -> Self {
        Self {
            min_bin_fraction: DEFAULT_MIN_BIN_FRACTION,
            min_derivative: DEFAULT_MIN_DERIVATIVE,
        }
    }
}

impl SplineConstraints {
    fn check(&self, k_bins: usize) -> Result<()> {
        if k_bins < 2 {
            return Err(Error::Config(format!("spline needs at least 2 bins, got {k_bins}")));
        }
        if !(self.min_bin_fraction >= 0.0 && self.min_bin_fraction * (k_bins as f64) < 1.0) {
            return Err(Error::Config(format!(
                "min_bin_fraction {} is infeasible for {k_bins} bins",
                self.min_bin_fraction
            )));
        }
        if !(self.min_derivative > 0.0 && self.min_derivative < 1.0) {
            return Err(Error::Config(format!(
                "min_derivative must lie in (0, 1), got {}",
                self.min_derivative
            )));
        }
        Ok(())
    }

    /// Shift applied to raw slopes so that a raw value of 0 maps to a derivative of 1.
    fn slope_shift(&self) -> f64 {
        (1.0 - self.min_derivative).exp_m1().ln()
    }
}

/// Unconstrained spline parameters together with the output bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSplineParams {
    pub widths_raw: Vec<f64>,
    pub heights_raw: Vec<f64>,
    pub slopes_raw: Vec<f64>,
    pub bounds: (f64, f64),
}

impl RawSplineParams {
    /// All-zero parameters: the affine map from `[0, 1]` onto `bounds`.
    pub fn zeros(k_bins: usize, bounds: (f64, f64)) -> Self {
        Self {
            widths_raw: vec![0.0; k_bins],
            heights_raw: vec![0.0; k_bins],
            slopes_raw: vec![0.0; k_bins + 1],
            bounds,
        }
    }

    /// Splits a flat `[widths | heights | slopes]` vector.
    pub fn from_flat(flat: &[f64], bounds: (f64, f64)) -> Result<Self> {
        if flat.len() < 7 || (flat.len() - 1) % 3 != 0 {
            return Err(Error::Config(format!(
                "flat spline vector of length {} is not 3K + 1 with K >= 2",
                flat.len()
            )));
        }
        let k = (flat.len() - 1) / 3;
        Ok(Self {
            widths_raw: flat[..k].to_vec(),
            heights_raw: flat[k..2 * k].to_vec(),
            slopes_raw: flat[2 * k..].to_vec(),
            bounds,
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(n_raw_params(self.k_bins()));
        flat.extend_from_slice(&self.widths_raw);
        flat.extend_from_slice(&self.heights_raw);
        flat.extend_from_slice(&self.slopes_raw);
        flat
    }

    pub fn k_bins(&self) -> usize {
        self.widths_raw.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k_bins();
        if k < 2 {
            return Err(Error::Config(format!("spline needs at least 2 bins, got {k}")));
        }
        if self.heights_raw.len() != k || self.slopes_raw.len() != k + 1 {
            return Err(Error::Parameter(format!(
                "inconsistent spline vector lengths: widths {}, heights {}, slopes {}",
                k,
                self.heights_raw.len(),
                self.slopes_raw.len()
            )));
        }
        check_bounds(self.bounds)?;
        let all = self
            .widths_raw
            .iter()
            .chain(&self.heights_raw)
            .chain(&self.slopes_raw);
        if let Some(bad) = all.into_iter().find(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite raw spline parameter {bad}")));
        }
        Ok(())
    }

    pub fn normalize(&self, constraints: SplineConstraints) -> Result<NormalizedSpline> {
        normalize_params(self, constraints)
    }
}

fn check_bounds((lower, upper): (f64, f64)) -> Result<()> {
    if !(lower.is_finite() && upper.is_finite() && lower < upper) {
        return Err(Error::Config(format!("invalid spline bounds ({lower}, {upper})")));
    }
    Ok(())
}

/// Validates `raw` and builds the knot representation.
pub fn normalize_params(
    raw: &RawSplineParams,
    constraints: SplineConstraints,
) -> Result<NormalizedSpline> {
    constraints.check(raw.k_bins())?;
    raw.validate()?;
    let mut spline = NormalizedSpline::with_bins(raw.k_bins(), raw.bounds, constraints);
    spline.refill(&raw.widths_raw, &raw.heights_raw, &raw.slopes_raw);
    Ok(spline)
}

/// Knot representation of a strictly monotone rational-quadratic spline.
///
/// `knot_u` are the input knots on `[0, 1]`, `knot_x` the output knots on
/// `[lower, upper]`, and `deriv` the dimensionless knot derivatives; the actual
/// slope `dx/du` at knot `k` is `deriv[k] * (upper - lower)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSpline {
    knot_u: Vec<f64>,
    knot_x: Vec<f64>,
    deriv: Vec<f64>,
    bounds: (f64, f64),
    constraints: SplineConstraints,
    // Cached for back-propagation into the raw parameters.
    width_probs: Vec<f64>,
    height_probs: Vec<f64>,
    slope_sigmoid: Vec<f64>,
}

/// Result of evaluating a spline at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineEval {
    pub value: f64,
    pub log_deriv: f64,
    /// The input lay outside the domain and was clamped onto it.
    pub clamped: bool,
}

/// Partial derivatives of one evaluation with respect to the six knot
/// quantities of the active bin, ordered
/// `[knot_u[b], knot_u[b+1], knot_x[b], knot_x[b+1], deriv[b], deriv[b+1]]`,
/// and with respect to the input.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalGrad {
    pub bin: usize,
    pub value: [f64; 6],
    pub log_deriv: [f64; 6],
    pub value_input: f64,
    pub log_deriv_input: f64,
    pub clamped: bool,
}

/// Dense gradient with respect to the knot representation of one spline.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotGrad {
    pub knot_u: Vec<f64>,
    pub knot_x: Vec<f64>,
    pub deriv: Vec<f64>,
}

impl KnotGrad {
    pub fn zeros(k_bins: usize) -> Self {
        Self {
            knot_u: vec![0.0; k_bins + 1],
            knot_x: vec![0.0; k_bins + 1],
            deriv: vec![0.0; k_bins + 1],
        }
    }

    pub fn clear(&mut self) {
        self.knot_u.iter_mut().for_each(|g| *g = 0.0);
        self.knot_x.iter_mut().for_each(|g| *g = 0.0);
        self.deriv.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `value_weight * d value + log_deriv_weight * d log_deriv`.
    pub fn accumulate(&mut self, g: &LocalGrad, value_weight: f64, log_deriv_weight: f64) {
        if g.clamped {
            return;
        }
        let b = g.bin;
        let c = |i: usize| value_weight * g.value[i] + log_deriv_weight * g.log_deriv[i];
        self.knot_u[b] += c(0);
        self.knot_u[b + 1] += c(1);
        self.knot_x[b] += c(2);
        self.knot_x[b + 1] += c(3);
        self.deriv[b] += c(4);
        self.deriv[b + 1] += c(5);
    }

    pub fn add(&mut self, other: &KnotGrad) {
        for (a, b) in self.knot_u.iter_mut().zip(&other.knot_u) {
            *a += b;
        }
        for (a, b) in self.knot_x.iter_mut().zip(&other.knot_x) {
            *a += b;
        }
        for (a, b) in self.deriv.iter_mut().zip(&other.deriv) {
            *a += b;
        }
    }
}

/// Which way a spline is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `u -> x`, the quantile map.
    Forward,
    /// `x -> u`, the CDF.
    Inverse,
}

/// Gradients of one evaluation with respect to the raw parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub value: Vec<f64>,
    pub log_deriv: Vec<f64>,
    pub value_input: f64,
    pub log_deriv_input: f64,
}

/// Analytic gradients of the output and of `log_deriv` with respect to every
/// raw parameter. A clamped evaluation point yields all-zero gradients.
pub fn rq_param_gradients(
    raw: &RawSplineParams,
    constraints: SplineConstraints,
    point: f64,
    direction: Direction,
) -> Result<ParamGradients> {
    let spline = normalize_params(raw, constraints)?;
    let (_, local) = match direction {
        Direction::Forward => spline.forward_with_grad(point),
        Direction::Inverse => spline.inverse_with_grad(point),
    };
    let k = spline.k_bins();
    let mut knot = KnotGrad::zeros(k);
    let mut value = vec![0.0; n_raw_params(k)];
    knot.accumulate(&local, 1.0, 0.0);
    spline.raw_gradient(&knot, &mut value);
    knot.clear();
    let mut log_deriv = vec![0.0; n_raw_params(k)];
    knot.accumulate(&local, 0.0, 1.0);
    spline.raw_gradient(&knot, &mut log_deriv);
    Ok(ParamGradients {
        value,
        log_deriv,
        value_input: local.value_input,
        log_deriv_input: local.log_deriv_input,
    })
}

pub fn rq_forward(spline: &NormalizedSpline, u: f64) -> SplineEval {
    spline.forward(u)
}

pub fn rq_inverse(spline: &NormalizedSpline, x: f64) -> SplineEval {
    spline.inverse(x)
}

/// Per-bin quantities needed by both directions.
#[derive(Debug, Clone, Copy)]
struct Bin {
    u0: f64,
    w: f64,
    x0: f64,
    h: f64,
    d0: f64,
    d1: f64,
}

impl Bin {
    fn slope(&self) -> f64 {
        self.h / self.w
    }

    /// Output and log-derivative at relative position `xi` in the bin.
    fn eval(&self, xi: f64) -> (f64, f64) {
        let s = self.slope();
        let t = xi * (1.0 - xi);
        let den = s + (self.d0 + self.d1 - 2.0 * s) * t;
        let num = self.h * (s * xi * xi + self.d0 * t);
        let n2 = self.d1 * xi * xi + 2.0 * s * t + self.d0 * (1.0 - xi) * (1.0 - xi);
        let x = self.x0 + num / den;
        let log_deriv = 2.0 * s.ln() + n2.ln() - 2.0 * den.ln();
        (x, log_deriv)
    }

    /// Partials of the output and log-derivative with respect to
    /// `(u, u0, w, x0, h, d0, d1)` at relative position `xi`.
    fn partials(&self, xi: f64) -> ([f64; 7], [f64; 7]) {
        let Bin { w, h, d0, d1, .. } = *self;
        let s = self.slope();
        let t = xi * (1.0 - xi);
        let q = d0 + d1 - 2.0 * s;
        let a = s * xi * xi + d0 * t;
        let den = s + q * t;
        let n2 = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) * (1.0 - xi);
        let one_m_2xi = 1.0 - 2.0 * xi;

        // Output, in terms of (xi, s, h, d0, d1).
        let x_a = h / den;
        let x_den = -h * a / (den * den);
        let x_xi = x_a * (2.0 * s * xi + d0 * one_m_2xi) + x_den * q * one_m_2xi;
        let x_s = x_a * xi * xi + x_den * (1.0 - 2.0 * t);
        let x_h = a / den;
        let x_d0 = (x_a + x_den) * t;
        let x_d1 = x_den * t;

        // Log-derivative.
        let l_xi = (2.0 * d1 * xi + 2.0 * s * one_m_2xi - 2.0 * d0 * (1.0 - xi)) / n2
            - 2.0 * q * one_m_2xi / den;
        let l_s = 2.0 / s + 2.0 * t / n2 - 2.0 * (1.0 - 2.0 * t) / den;
        let l_d0 = (1.0 - xi) * (1.0 - xi) / n2 - 2.0 * t / den;
        let l_d1 = xi * xi / n2 - 2.0 * t / den;

        // xi = (u - u0) / w, s = h / w.
        let chain = |f_xi: f64, f_s: f64, f_h: f64, f_d0: f64, f_d1: f64, f_x0: f64| {
            [
                f_xi / w,
                -f_xi / w,
                -f_xi * xi / w - f_s * s / w,
                f_x0,
                f_h + f_s / w,
                f_d0,
                f_d1,
            ]
        };
        (
            chain(x_xi, x_s, x_h, x_d0, x_d1, 1.0),
            chain(l_xi, l_s, 0.0, l_d0, l_d1, 0.0),
        )
    }
}

impl NormalizedSpline {
    /// An affine spline with `k_bins` equal bins, ready to be refilled.
    pub(crate) fn with_bins(
        k_bins: usize,
        bounds: (f64, f64),
        constraints: SplineConstraints,
    ) -> Self {
        let mut spline = Self {
            knot_u: vec![0.0; k_bins + 1],
            knot_x: vec![0.0; k_bins + 1],
            deriv: vec![1.0; k_bins + 1],
            bounds,
            constraints,
            width_probs: vec![0.0; k_bins],
            height_probs: vec![0.0; k_bins],
            slope_sigmoid: vec![0.0; k_bins + 1],
        };
        let zeros = vec![0.0; k_bins + 1];
        spline.refill(&zeros[..k_bins], &zeros[..k_bins], &zeros);
        spline
    }

    /// Recomputes the knots from raw slices without validation or allocation.
    /// Slice lengths must match the bin count.
    pub(crate) fn refill(&mut self, widths_raw: &[f64], heights_raw: &[f64], slopes_raw: &[f64]) {
        let k = self.k_bins();
        debug_assert_eq!(widths_raw.len(), k);
        debug_assert_eq!(heights_raw.len(), k);
        debug_assert_eq!(slopes_raw.len(), k + 1);
        let min_bin = self.constraints.min_bin_fraction;
        let scale = 1.0 - min_bin * k as f64;
        let (lower, upper) = self.bounds;
        let range = upper - lower;

        softmax(widths_raw, &mut self.width_probs);
        self.knot_u[0] = 0.0;
        let mut acc = 0.0;
        for i in 0..k - 1 {
            acc += min_bin + scale * self.width_probs[i];
            self.knot_u[i + 1] = acc;
        }
        self.knot_u[k] = 1.0;

        softmax(heights_raw, &mut self.height_probs);
        self.knot_x[0] = lower;
        let mut acc = 0.0;
        for i in 0..k - 1 {
            acc += min_bin + scale * self.height_probs[i];
            self.knot_x[i + 1] = lower + range * acc;
        }
        self.knot_x[k] = upper;

        let shift = self.constraints.slope_shift();
        let min_d = self.constraints.min_derivative;
        for (i, &r) in slopes_raw.iter().enumerate() {
            let z = r + shift;
            self.deriv[i] = min_d + softplus(z);
            self.slope_sigmoid[i] = sigmoid(z);
        }
    }

    pub fn k_bins(&self) -> usize {
        self.knot_u.len() - 1
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn constraints(&self) -> SplineConstraints {
        self.constraints
    }

    pub fn knot_u(&self) -> &[f64] {
        &self.knot_u
    }

    pub fn knot_x(&self) -> &[f64] {
        &self.knot_x
    }

    pub fn deriv(&self) -> &[f64] {
        &self.deriv
    }

    fn range(&self) -> f64 {
        self.bounds.1 - self.bounds.0
    }

    fn bin(&self, b: usize) -> Bin {
        let range = self.range();
        Bin {
            u0: self.knot_u[b],
            w: self.knot_u[b + 1] - self.knot_u[b],
            x0: self.knot_x[b],
            h: self.knot_x[b + 1] - self.knot_x[b],
            d0: self.deriv[b] * range,
            d1: self.deriv[b + 1] * range,
        }
    }

    fn locate(knots: &[f64], v: f64) -> usize {
        let k = knots.len() - 1;
        knots[1..k].partition_point(|&knot| knot <= v)
    }

    fn clamp_input(v: f64, lo: f64, hi: f64) -> (f64, bool) {
        if v < lo {
            (lo, true)
        } else if v > hi {
            (hi, true)
        } else {
            (v, false)
        }
    }

    /// Quantile direction `u -> x`. Inputs outside `[0, 1]` are clamped.
    pub fn forward(&self, u: f64) -> SplineEval {
        let (u, clamped) = Self::clamp_input(u, 0.0, 1.0);
        let b = Self::locate(&self.knot_u, u);
        let bin = self.bin(b);
        let xi = ((u - bin.u0) / bin.w).clamp(0.0, 1.0);
        let (x, log_deriv) = bin.eval(xi);
        SplineEval {
            value: x.clamp(self.knot_x[b], self.knot_x[b + 1]),
            log_deriv,
            clamped,
        }
    }

    /// CDF direction `x -> u`. Inputs outside the bounds are clamped.
    pub fn inverse(&self, x: f64) -> SplineEval {
        let (b, bin, xi, clamped) = self.solve_inverse(x);
        let (_, log_deriv) = bin.eval(xi);
        SplineEval {
            value: (bin.u0 + xi * bin.w).clamp(self.knot_u[b], self.knot_u[b + 1]),
            log_deriv: -log_deriv,
            clamped,
        }
    }

    fn solve_inverse(&self, x: f64) -> (usize, Bin, f64, bool) {
        let (x, clamped) = Self::clamp_input(x, self.bounds.0, self.bounds.1);
        let b = Self::locate(&self.knot_x, x);
        let bin = self.bin(b);
        let s = bin.slope();
        let q = bin.d0 + bin.d1 - 2.0 * s;
        let dx = x - bin.x0;
        let a = bin.h * (s - bin.d0) + dx * q;
        let bb = bin.h * bin.d0 - dx * q;
        let c = -s * dx;
        let disc = (bb * bb - 4.0 * a * c).max(0.0);
        // Stable root: avoids cancellation between -b and sqrt(disc).
        let denom = -bb - disc.sqrt();
        let xi = if denom == 0.0 { 0.0 } else { 2.0 * c / denom };
        (b, bin, xi.clamp(0.0, 1.0), clamped)
    }

    pub fn forward_with_grad(&self, u: f64) -> (SplineEval, LocalGrad) {
        let eval = self.forward(u);
        if eval.clamped {
            return (eval, clamped_grad());
        }
        let b = Self::locate(&self.knot_u, u);
        let bin = self.bin(b);
        let xi = ((u - bin.u0) / bin.w).clamp(0.0, 1.0);
        let (px, pl) = bin.partials(xi);
        let range = self.range();
        (
            eval,
            LocalGrad {
                bin: b,
                value: knot_partials(&px, range),
                log_deriv: knot_partials(&pl, range),
                value_input: px[0],
                log_deriv_input: pl[0],
                clamped: false,
            },
        )
    }

    /// Gradients of the inverse via the implicit function theorem applied to
    /// `forward(u(x, theta), theta) = x`.
    pub fn inverse_with_grad(&self, x: f64) -> (SplineEval, LocalGrad) {
        let (b, bin, xi, clamped) = self.solve_inverse(x);
        let (_, log_deriv) = bin.eval(xi);
        let eval = SplineEval {
            value: (bin.u0 + xi * bin.w).clamp(self.knot_u[b], self.knot_u[b + 1]),
            log_deriv: -log_deriv,
            clamped,
        };
        if clamped {
            return (eval, clamped_grad());
        }
        let (px, pl) = bin.partials(xi);
        let range = self.range();
        let fx = knot_partials(&px, range);
        let fl = knot_partials(&pl, range);
        let dxdu = log_deriv.exp();
        let u_x = 1.0 / dxdu;
        let l_u = pl[0];
        let mut value = [0.0; 6];
        let mut log_d = [0.0; 6];
        for i in 0..6 {
            value[i] = -fx[i] * u_x;
            log_d[i] = -(fl[i] + l_u * value[i]);
        }
        (
            eval,
            LocalGrad {
                bin: b,
                value,
                log_deriv: log_d,
                value_input: u_x,
                log_deriv_input: -l_u * u_x,
                clamped: false,
            },
        )
    }

    /// Back-propagates a knot-space gradient into the raw parameter layout
    /// `[widths | heights | slopes]`, adding into `out`.
    pub fn raw_gradient(&self, g: &KnotGrad, out: &mut [f64]) {
        let k = self.k_bins();
        debug_assert_eq!(out.len(), n_raw_params(k));
        let scale = 1.0 - self.constraints.min_bin_fraction * k as f64;
        let range = self.range();
        let (out_w, rest) = out.split_at_mut(k);
        let (out_h, out_s) = rest.split_at_mut(k);

        // knot_u[j] = sum_{i < j} width_i, so d/d width_i = sum_{j > i} g[j].
        softmax_backward(&self.width_probs, &g.knot_u, scale, out_w);
        softmax_backward(&self.height_probs, &g.knot_x, scale * range, out_h);
        for ((o, gd), sig) in out_s.iter_mut().zip(&g.deriv).zip(&self.slope_sigmoid) {
            *o += gd * sig;
        }
    }
}

fn clamped_grad() -> LocalGrad {
    LocalGrad {
        clamped: true,
        ..LocalGrad::default()
    }
}

/// Maps partials in `(u, u0, w, x0, h, d0, d1)` onto the six knot quantities.
fn knot_partials(p: &[f64; 7], range: f64) -> [f64; 6] {
    [
        p[1] - p[2],
        p[2],
        p[3] - p[4],
        p[4],
        p[5] * range,
        p[6] * range,
    ]
}

/// Adds the gradient with respect to the raw logits of a floored softmax whose
/// cumulative sums receive gradient `g_cum` (indexed like the knots).
fn softmax_backward(probs: &[f64], g_cum: &[f64], scale: f64, out: &mut [f64]) {
    let k = probs.len();
    let mut suffix = 0.0;
    let mut g_frac = vec![0.0; k];
    for i in (0..k).rev() {
        suffix += g_cum[i + 1];
        g_frac[i] = scale * suffix;
    }
    let dot: f64 = probs.iter().zip(&g_frac).map(|(p, g)| p * g).sum();
    for i in 0..k {
        out[i] += probs[i] * (g_frac[i] - dot);
    }
}

fn softmax(raw: &[f64], out: &mut [f64]) {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &r) in out.iter_mut().zip(raw) {
        *o = (r - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn spline_strategy() -> impl Strategy<Value = NormalizedSpline> {
        (2usize..32, -20.0f64..20.0, 0.05f64..40.0)
            .prop_flat_map(|(k, lo, width)| {
                let v = |n| prop::collection::vec(-2.0f64..2.0, n);
                (v(k), v(k), v(k + 1), Just((lo, lo + width)))
            })
            .prop_map(|(widths_raw, heights_raw, slopes_raw, bounds)| {
                RawSplineParams {
                    widths_raw,
                    heights_raw,
                    slopes_raw,
                    bounds,
                }
                .normalize(SplineConstraints::default())
                .unwrap()
            })
    }

    proptest! {
        #[test]
        fn inverse_undoes_forward(s in spline_strategy(), u in 0.0f64..=1.0) {
            let f = s.forward(u);
            let i = s.inverse(f.value);
            prop_assert!((i.value - u).abs() <= 1e-10);
            prop_assert!((f.log_deriv + i.log_deriv).abs() <= 1e-8);
            prop_assert!(f.log_deriv.is_finite());
        }

        #[test]
        fn forward_is_strictly_increasing(s in spline_strategy(), a in 0.0f64..1.0, gap in 1e-6f64..1.0) {
            let b = (a + gap).min(1.0);
            prop_assume!(b > a);
            prop_assert!(s.forward(a).value < s.forward(b).value);
        }

        #[test]
        fn forward_stays_in_bounds(s in spline_strategy(), u in -0.5f64..1.5) {
            let (lo, hi) = s.bounds();
            let f = s.forward(u);
            prop_assert!(f.value >= lo && f.value <= hi);
            prop_assert_eq!(f.clamped, !(0.0..=1.0).contains(&u));
        }
    }
}
