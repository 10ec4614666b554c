//! Flat parameter vectors, value-and-gradient evaluation, the Adam optimizer
//! and the minibatch training loop shared by every flow in the crate.
//!
//! Gradients are produced by hand-written reverse passes inside each
//! [`Objective`]; this module only sums them deterministically and applies
//! updates.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, contiguous slice of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ParamBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Parameter values plus an ordered registry of named blocks covering them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamBlock>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its index range.
    pub fn push_block(&mut self, name: impl Into<String>, values: &[f64]) -> Range<usize> {
        let start = self.values.len();
        self.values.extend_from_slice(values);
        self.layout.push(ParamBlock {
            name: name.into(),
            start,
            len: values.len(),
        });
        start..start + values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.range()])
    }

    /// Replaces all values, keeping the layout.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Parameter(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values = values;
        Ok(())
    }

    /// Checks finiteness and that the layout tiles the vector exactly.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for block in &self.layout {
            if block.start != next {
                return Err(Error::Parameter(format!(
                    "block `{}` starts at {} but {} was expected",
                    block.name, block.start, next
                )));
            }
            next += block.len;
        }
        if next != self.values.len() {
            return Err(Error::Parameter(format!(
                "layout covers {next} of {} parameters",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("parameter {i} is not finite")));
        }
        Ok(())
    }
}

/// A differentiable mean loss over indexed rows of some dataset.
pub trait Objective: Sync {
    fn n_params(&self) -> usize;

    /// Mean loss over `rows` and its gradient with respect to `params`.
    fn loss_and_grad(&self, params: &[f64], rows: &[usize]) -> (f64, Vec<f64>);

    /// Mean loss over `rows`.
    fn loss(&self, params: &[f64], rows: &[usize]) -> f64 {
        self.loss_and_grad(params, rows).0
    }
}

/// Rows per parallel work item. Fixed so that the reduction order, and hence
/// every bit of the result, does not depend on the thread count.
pub const REDUCTION_CHUNK: usize = 64;

/// Sums `f` over fixed-size chunks of `rows` in parallel, then reduces the
/// partial results in chunk order. `f` returns the summed loss of its chunk
/// and adds the summed gradient into the provided buffer.
pub fn par_sum_rows<F>(rows: &[usize], n_params: usize, f: F) -> (f64, Vec<f64>)
where
    F: Fn(&[usize], &mut [f64]) -> f64 + Sync,
{
    let partials: Vec<(f64, Vec<f64>)> = rows
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; n_params];
            let loss = f(chunk, &mut grad);
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Loss-only counterpart of [`par_sum_rows`].
pub fn par_sum_loss<F>(rows: &[usize], f: F) -> f64
where
    F: Fn(&[usize]) -> f64 + Sync + Send,
{
    let partials: Vec<f64> = rows.par_chunks(REDUCTION_CHUNK).map(f).collect();
    partials.into_iter().sum()
}

/// Evaluates an objective and rejects non-finite results.
pub fn value_and_grad<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    batch: &[usize],
    batch_index: usize,
) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = objective.loss_and_grad(params.values(), batch);
    if !loss.is_finite() {
        return Err(Error::Training {
            batch: batch_index,
            message: format!("loss is {loss}"),
        });
    }
    debug_assert_eq!(grad.len(), params.len());
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale gradients whose Euclidean norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update. On a non-finite gradient nothing is
/// modified and an error is returned; an update that overflows the
/// parameters is also an error.
pub fn optimizer_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut OptimizerState,
    learning_rate: f64,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grad.len() || state.first_moment.len() != params.len() {
        return Err(Error::Parameter(format!(
            "shape mismatch: {} params, {} gradients, {} moments",
            params.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Training {
            batch: state.step_count as usize,
            message: "non-finite gradient".into(),
        });
    }
    let scale = match config.clip_norm {
        Some(max) if norm > max => max / norm,
        _ => 1.0,
    };
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i] * scale;
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Training {
            batch: state.step_count as usize - 1,
            message: "parameters diverged to non-finite values".into(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

/// One line of a training trace. Epoch 0 is the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// Parameters of the best validation epoch.
    pub params: Vec<f64>,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Minibatch Adam with early stopping on the validation loss. When
/// `val_rows` is empty the training loss is monitored instead.
pub fn minimize<O: Objective + ?Sized>(
    objective: &O,
    init: Vec<f64>,
    train_rows: &[usize],
    val_rows: &[usize],
    config: &LoopConfig,
) -> Result<FitOutcome> {
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    if train_rows.is_empty() {
        return Err(Error::Data("no training rows".into()));
    }
    let monitor = |params: &[f64]| {
        if val_rows.is_empty() {
            objective.loss(params, train_rows)
        } else {
            objective.loss(params, val_rows)
        }
    };

    let mut params = init;
    let mut state = OptimizerState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train_rows.to_vec();

    let initial_val = monitor(&params);
    if !initial_val.is_finite() {
        return Err(Error::Training {
            batch: 0,
            message: format!("initial validation loss is {initial_val}"),
        });
    }
    let mut trace = vec![EpochRecord {
        epoch: 0,
        train_nll: objective.loss(&params, train_rows),
        val_nll: initial_val,
    }];
    let mut best = (initial_val, 0usize, params.clone());
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grad) = objective.loss_and_grad(&params, batch);
            if !loss.is_finite() {
                return Err(Error::Training {
                    batch: step,
                    message: format!("loss is {loss} in epoch {epoch}"),
                });
            }
            optimizer_step(&mut params, &grad, &mut state, config.learning_rate, &config.adam)
                .map_err(|e| match e {
                    Error::Training { message, .. } => Error::Training {
                        batch: step,
                        message,
                    },
                    other => other,
                })?;
            total += loss * batch.len() as f64;
            step += 1;
        }
        let val = monitor(&params);
        trace.push(EpochRecord {
            epoch,
            train_nll: total / order.len() as f64,
            val_nll: val,
        });
        if val < best.0 {
            best = (val, epoch, params.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    Ok(FitOutcome {
        params: best.2,
        trace,
        best_epoch: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SumOfSquares;

    impl Objective for SumOfSquares {
        fn n_params(&self) -> usize {
            2
        }

        fn loss_and_grad(&self, params: &[f64], _rows: &[usize]) -> (f64, Vec<f64>) {
            let loss = params.iter().map(|p| p * p).sum();
            (loss, params.iter().map(|p| 2.0 * p).collect())
        }
    }

    /// Mean of (p - target_i)^2 over rows.
    struct Quadratic {
        targets: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn n_params(&self) -> usize {
            1
        }

        fn loss_and_grad(&self, params: &[f64], rows: &[usize]) -> (f64, Vec<f64>) {
            let (l, g) = par_sum_rows(rows, 1, |chunk, grad| {
                chunk
                    .iter()
                    .map(|&r| {
                        let d = params[0] - self.targets[r];
                        grad[0] += 2.0 * d;
                        d * d
                    })
                    .sum()
            });
            let n = rows.len() as f64;
            (l / n, vec![g[0] / n])
        }
    }

    #[test]
    fn sum_of_squares_value_and_grad() {
        let mut p = ParamVector::new();
        p.push_block("x", &[1.0, -2.0]);
        let (v, g) = value_and_grad(&SumOfSquares, &p, &[0], 0).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g, vec![2.0, -4.0]);
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let mut p = ParamVector::new();
        p.push_block("x", &[f64::INFINITY, 0.0]);
        let err = value_and_grad(&SumOfSquares, &p, &[0], 17).unwrap_err();
        assert!(matches!(err, Error::Training { batch: 17, .. }));
    }

    #[test]
    fn layout_validation() {
        let mut p = ParamVector::new();
        p.push_block("a", &[1.0, 2.0]);
        p.push_block("b", &[3.0]);
        p.validate().unwrap();
        assert_eq!(p.block("b"), Some(&[3.0][..]));
        p.values_mut()[1] = f64::NAN;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![0.5, -1.5, 3.0];
        let mut state = OptimizerState::new(3);
        optimizer_step(&mut params, &[0.0; 3], &mut state, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(params, vec![0.5, -1.5, 3.0]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient_sign() {
        let grad = [0.3, -2.0, 1e-3];
        let mut params = vec![0.0; 3];
        let mut state = OptimizerState::new(3);
        let cfg = AdamConfig::default();
        let lr = 1e-2;
        optimizer_step(&mut params, &grad, &mut state, lr, &cfg).unwrap();
        // m_hat = g and v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + eps).
        for (p, g) in params.iter().zip(grad) {
            let expected = -lr * g / (g.abs() + cfg.epsilon);
            assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
            assert!((p.abs() - lr).abs() < lr * 1e-4);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut params = vec![1.0, 2.0];
        let mut state = OptimizerState::new(2);
        let err = optimizer_step(
            &mut params,
            &[f64::NAN, 0.0],
            &mut state,
            0.1,
            &AdamConfig::default(),
        );
        assert!(err.is_err());
        assert_eq!(params, vec![1.0, 2.0]);
        assert_eq!(state.step_count, 0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(p) = sum_i (p_i - c_i)^2 with minimum at c. First-moment decay 0.9
        // bounds the contraction to about sqrt(0.9) per step, so 1e-6 takes a
        // few hundred steps from an O(1) start.
        let target = [0.7, -1.3, 2.0];
        let mut params = vec![0.0; 3];
        let mut state = OptimizerState::new(3);
        let cfg = AdamConfig {
            clip_norm: None,
            ..AdamConfig::default()
        };
        let max_err = |p: &[f64]| {
            p.iter()
                .zip(target)
                .map(|(p, c)| (p - c).abs())
                .fold(0.0, f64::max)
        };
        for step in 1..=300 {
            let grad: Vec<f64> = params.iter().zip(target).map(|(p, c)| 2.0 * (p - c)).collect();
            optimizer_step(&mut params, &grad, &mut state, 0.1, &cfg).unwrap();
            if step == 100 {
                assert!(max_err(&params) <= 1e-2);
            }
        }
        assert!(max_err(&params) <= 1e-6, "{params:?}");
    }

    #[test]
    fn minimize_is_deterministic_and_keeps_best() {
        let obj = Quadratic {
            targets: (0..500).map(|i| (i as f64 * 0.37).sin()).collect(),
        };
        let rows: Vec<usize> = (0..400).collect();
        let val: Vec<usize> = (400..500).collect();
        let cfg = LoopConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            patience: 5,
            seed: 9,
            adam: AdamConfig::default(),
        };
        let a = minimize(&obj, vec![3.0], &rows, &val, &cfg).unwrap();
        let b = minimize(&obj, vec![3.0], &rows, &val, &cfg).unwrap();
        assert_eq!(a, b);
        let best = a.trace[a.best_epoch].val_nll;
        assert!(a.trace.iter().all(|r| r.val_nll >= best));
        assert!(best < a.trace[0].val_nll);
    }
}
