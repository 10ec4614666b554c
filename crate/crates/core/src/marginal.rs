//! Continuous marginal flows.
//!
//! A marginal flow is a single spline whose forward map is the column's
//! quantile function and whose inverse is its CDF. It is fitted by maximizing
//! the inverse log-derivative, i.e. the column log-density.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{self, AdamConfig, EpochRecord, LoopConfig, Objective};
use crate::error::{Error, Result};
use crate::spline::{
    n_raw_params, KnotGrad, NormalizedSpline, RawSplineParams, SplineConstraints,
};

/// Counts evaluations whose input fell outside the spline domain.
#[derive(Debug, Default)]
pub struct SaturationCounter(AtomicU64);

impl SaturationCounter {
    pub fn record(&self, clamped: bool) {
        if clamped {
            self.0.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

impl Clone for SaturationCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.get()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginalConfig {
    pub k_bins: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub patience: usize,
    /// Fraction of the data range added on each side when no explicit bounds are given.
    pub bound_margin: f64,
}

impl Default for MarginalConfig {
    fn default() -> Self {
        Self {
            k_bins: 512,
            epochs: 100,
            batch_size: 1024,
            learning_rate: 1e-3,
            seed: 0,
            val_fraction: 0.1,
            patience: 10,
            bound_margin: 0.05,
        }
    }
}

impl MarginalConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.k_bins < 2 || self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "marginal k_bins >= 2, epochs, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(
                "marginal learning_rate must be positive and val_fraction in [0, 1)".into(),
            ));
        }
        if !(self.bound_margin > 0.0) {
            return Err(Error::Config("bound_margin must be positive".into()));
        }
        Ok(())
    }

    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            seed: self.seed,
            adam: AdamConfig::default(),
        }
    }
}

/// A fitted continuous marginal.
#[derive(Debug, Clone)]
pub struct MarginalFlowModel {
    column_id: String,
    params: RawSplineParams,
    spline: NormalizedSpline,
    saturation: SaturationCounter,
}

impl PartialEq for MarginalFlowModel {
    fn eq(&self, other: &Self) -> bool {
        self.column_id == other.column_id && self.params == other.params
    }
}

impl MarginalFlowModel {
    pub fn new(column_id: impl Into<String>, params: RawSplineParams) -> Result<Self> {
        let spline = params.normalize(SplineConstraints::default())?;
        Ok(Self {
            column_id: column_id.into(),
            params,
            spline,
            saturation: SaturationCounter::default(),
        })
    }

    /// The affine model from `[0, 1]` onto `bounds`.
    pub fn affine(column_id: impl Into<String>, k_bins: usize, bounds: (f64, f64)) -> Result<Self> {
        Self::new(column_id, RawSplineParams::zeros(k_bins, bounds))
    }

    pub fn column_id(&self) -> &str {
        &self.column_id
    }

    pub fn params(&self) -> &RawSplineParams {
        &self.params
    }

    pub fn spline(&self) -> &NormalizedSpline {
        &self.spline
    }

    pub fn data_bounds(&self) -> (f64, f64) {
        self.params.bounds
    }

    pub fn saturation_count(&self) -> u64 {
        self.saturation.get()
    }

    /// Column CDF. Values outside the bounds clamp to 0 or 1.
    pub fn cdf(&self, x: f64) -> f64 {
        let e = self.spline.inverse(x);
        self.saturation.record(e.clamped);
        e.value
    }

    /// Column quantile function.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Argument(format!("quantile level {u} outside [0, 1]")));
        }
        Ok(self.spline.forward(u).value)
    }

    /// Column log-density. Out-of-bounds inputs are evaluated at the nearest bound.
    pub fn logpdf(&self, x: f64) -> f64 {
        let e = self.spline.inverse(x);
        self.saturation.record(e.clamped);
        e.log_deriv
    }
}

/// `[min - margin * range, max + margin * range]` of finite samples.
pub fn data_bounds(samples: &[f64], margin: f64) -> Result<(f64, f64)> {
    let (min, max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::Data("samples are empty or not finite".into()));
    }
    let range = max - min;
    if range <= 0.0 {
        return Err(Error::Degenerate(format!(
            "constant column (every value is {min}); model it as discrete"
        )));
    }
    Ok((min - margin * range, max + margin * range))
}

/// Splits `0..n` into seeded train and validation index sets.
pub(crate) fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if val_fraction > 0.0 { n_val.clamp(1, n - 1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Mean negative log-density of samples under a spline with raw parameters.
pub struct MarginalNll<'a> {
    pub samples: &'a [f64],
    pub k_bins: usize,
    pub bounds: (f64, f64),
}

impl MarginalNll<'_> {
    fn spline(&self, params: &[f64]) -> NormalizedSpline {
        let k = self.k_bins;
        let mut s = NormalizedSpline::with_bins(k, self.bounds, SplineConstraints::default());
        s.refill(&params[..k], &params[k..2 * k], &params[2 * k..]);
        s
    }
}

impl Objective for MarginalNll<'_> {
    fn n_params(&self) -> usize {
        n_raw_params(self.k_bins)
    }

    fn loss_and_grad(&self, params: &[f64], rows: &[usize]) -> (f64, Vec<f64>) {
        let spline = self.spline(params);
        let k1 = self.k_bins + 1;
        let (loss, flat) = diff::par_sum_rows(rows, 3 * k1, |chunk, acc| {
            let mut knot = KnotGrad::zeros(self.k_bins);
            let mut loss = 0.0;
            for &r in chunk {
                let (e, g) = spline.inverse_with_grad(self.samples[r]);
                loss -= e.log_deriv;
                knot.accumulate(&g, 0.0, -1.0);
            }
            acc[..k1].copy_from_slice(&knot.knot_u);
            acc[k1..2 * k1].copy_from_slice(&knot.knot_x);
            acc[2 * k1..].copy_from_slice(&knot.deriv);
            loss
        });
        let n = rows.len() as f64;
        let knot = KnotGrad {
            knot_u: flat[..k1].iter().map(|g| g / n).collect(),
            knot_x: flat[k1..2 * k1].iter().map(|g| g / n).collect(),
            deriv: flat[2 * k1..].iter().map(|g| g / n).collect(),
        };
        let mut grad = vec![0.0; self.n_params()];
        spline.raw_gradient(&knot, &mut grad);
        (loss / n, grad)
    }

    fn loss(&self, params: &[f64], rows: &[usize]) -> f64 {
        let spline = self.spline(params);
        let total = diff::par_sum_loss(rows, |chunk| {
            chunk
                .iter()
                .map(|&r| -spline.inverse(self.samples[r]).log_deriv)
                .sum()
        });
        total / rows.len() as f64
    }
}

/// Fits a marginal flow by maximum likelihood.
///
/// Bounds default to the data range widened by `config.bound_margin` on each
/// side; explicit bounds must strictly contain every sample.
pub fn fit_marginal(
    column_id: &str,
    samples: &[f64],
    bounds: Option<(f64, f64)>,
    config: &MarginalConfig,
) -> Result<(MarginalFlowModel, Vec<EpochRecord>)> {
    config.validate()?;
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("sample {i} is not finite")));
    }
    if samples.len() < 10 {
        return Err(Error::Data(format!(
            "need at least 10 samples, got {}",
            samples.len()
        )));
    }
    let observed = data_bounds(samples, config.bound_margin)?;
    let bounds = match bounds {
        None => observed,
        Some((lo, hi)) => {
            let (min, max) = samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            if !(lo < min && max < hi) {
                return Err(Error::Data(format!(
                    "samples span [{min}, {max}] which is not strictly inside bounds ({lo}, {hi})"
                )));
            }
            (lo, hi)
        }
    };
    let objective = MarginalNll {
        samples,
        k_bins: config.k_bins,
        bounds,
    };
    let (train, val) = split_indices(samples.len(), config.val_fraction, config.seed);
    let init = vec![0.0; objective.n_params()];
    let outcome = diff::minimize(&objective, init, &train, &val, &config.loop_config())?;
    let params = RawSplineParams::from_flat(&outcome.params, bounds)?;
    Ok((MarginalFlowModel::new(column_id, params)?, outcome.trace))
}
