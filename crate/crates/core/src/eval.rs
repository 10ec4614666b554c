//! Goodness-of-fit statistics, ML efficacy and plot data.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{write_atomic, Column, Dataset};
use crate::discrete::CodecKind;
use crate::error::{Error, Result};
use crate::trainer::FittedModel;

/// Samples above this size are subsampled before a KS test.
pub const KS_MAX_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// `sup |ECDF_a - ECDF_b|` of two sorted samples.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // Theta-function form, fast for small arguments.
        let c = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=100).map(|k| (c * ((2 * k - 1) as f64).powi(2)).exp()).sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

fn subsample(v: &[f64], max: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if v.len() <= max {
        return v.to_vec();
    }
    let mut idx = sample(rng, v.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| v[i]).collect()
}

/// Two-sample KS test with samples subsampled to at most 10,000 points (seed 0).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    ks_two_sample_seeded(a, b, 0)
}

pub fn ks_two_sample_seeded(a: &[f64], b: &[f64], seed: u64) -> Result<KsResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data("KS test needs at least 2 points per sample".into()));
    }
    check_finite(a, "first KS sample")?;
    check_finite(b, "second KS sample")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = subsample(a, KS_MAX_SAMPLES, &mut rng);
    let mut b = subsample(b, KS_MAX_SAMPLES, &mut rng);
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let d = ks_statistic(&a, &b);
    let (n1, n2) = (a.len(), b.len());
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(ne.sqrt() * d),
        n1,
        n2,
    })
}

/// Kendall's tau-b in `O(n log n)`.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data("Kendall's tau needs two samples of equal length >= 2".into()));
    }
    check_finite(x, "tau sample")?;
    check_finite(y, "tau sample")?;
    let n = x.len();
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let tied = |n: u64| n * (n.saturating_sub(1)) / 2;
    let (mut ties_x, mut ties_xy) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in pairs.windows(2) {
        if w[0].0 == w[1].0 {
            run_x += 1;
            if w[0].1 == w[1].1 {
                run_xy += 1;
            } else {
                ties_xy += tied(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += tied(run_x);
            ties_xy += tied(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += tied(run_x);
    ties_xy += tied(run_xy);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);

    let mut ties_y = 0u64;
    let mut run = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            ties_y += tied(run);
            run = 1;
        }
    }
    ties_y += tied(run);

    let n0 = tied(n as u64);
    let denom = (((n0 - ties_x) as f64) * ((n0 - ties_y) as f64)).sqrt();
    if denom == 0.0 {
        return Err(Error::Data("Kendall's tau is undefined for a constant sample".into()));
    }
    let numer = n0 as f64 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    Ok(numer / denom)
}

/// Sorts `v` and returns the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Per-column KS of the probability-integral-transformed data against fresh
/// uniforms. Discrete columns use the distributional transform.
pub fn marginal_uniformity_report(model: &FittedModel, data: &Dataset, seed: u64) -> Result<Vec<(String, KsResult)>> {
    let d = data.n_cols();
    let u = model.uniform_matrix(data, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    data.schema()
        .names()
        .enumerate()
        .map(|(c, name)| {
            let col: Vec<f64> = u.iter().skip(c).step_by(d).copied().collect();
            let fresh: Vec<f64> = (0..col.len().min(KS_MAX_SAMPLES)).map(|_| rng.random()).collect();
            Ok((name.to_string(), ks_two_sample(&col, &fresh)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Scores of one arm on the real test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmScores {
    /// R² for regression, accuracy for classification.
    pub primary: f64,
    /// Macro F1 for classification.
    pub f1_macro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficacyResult {
    pub task: Task,
    pub target: String,
    /// Trained on real data.
    pub real: ArmScores,
    /// Trained on synthetic data.
    pub synth: ArmScores,
}

impl EfficacyResult {
    /// Real-arm minus synthetic-arm primary metric.
    pub fn gap(&self) -> f64 {
        self.real.primary - self.synth.primary
    }
}

/// Logistic regression iterations and L2 strength.
pub const LOGISTIC_ITERATIONS: usize = 500;
pub const LOGISTIC_L2: f64 = 1e-3;

/// Feature matrix (with a leading intercept column) of every column except the target.
/// Categorical features are one-hot encoded, ordinal ones use their numeric label.
fn features(data: &Dataset, target: usize) -> DMatrix<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (c, col) in data.columns().iter().enumerate() {
        if c == target {
            continue;
        }
        match col {
            Column::Discrete { codes, codec } if codec.kind() == CodecKind::Categorical => {
                for k in 1..codec.n_classes() {
                    cols.push(codes.iter().map(|&v| (v == k) as u8 as f64).collect());
                }
            }
            other => cols.push(other.numeric()),
        }
    }
    let n = data.n_rows();
    DMatrix::from_fn(n, cols.len() + 1, |r, c| if c == 0 { 1.0 } else { cols[c - 1][r] })
}

/// Column means and scales from `x`, leaving the intercept alone.
fn standardizer(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut mean = vec![0.0; x.ncols()];
    let mut scale = vec![1.0; x.ncols()];
    for c in 1..x.ncols() {
        let col = x.column(c);
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        mean[c] = m;
        scale[c] = if sd > 0.0 { sd } else { 1.0 };
    }
    (mean, scale)
}

fn standardize(x: &DMatrix<f64>, (mean, scale): &(Vec<f64>, Vec<f64>)) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - mean[c]) / scale[c])
}

fn ols_r2(train_x: &DMatrix<f64>, train_y: &[f64], test_x: &DMatrix<f64>, test_y: &[f64]) -> Result<f64> {
    let st = standardizer(train_x);
    let a = standardize(train_x, &st);
    let b = DVector::from_column_slice(train_y);
    let beta = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Task(format!("least squares failed: {e}")))?;
    let pred = standardize(test_x, &st) * beta;
    let mean = test_y.iter().sum::<f64>() / test_y.len() as f64;
    let sst: f64 = test_y.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = test_y.iter().zip(pred.iter()).map(|(y, p)| (y - p).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Task("test target is constant; R² is undefined".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Multinomial logistic regression by full-batch gradient descent.
fn logistic_scores(
    train_x: &DMatrix<f64>,
    train_y: &[usize],
    test_x: &DMatrix<f64>,
    test_y: &[usize],
    n_classes: usize,
) -> ArmScores {
    let st = standardizer(train_x);
    let x = standardize(train_x, &st);
    let (n, p) = (x.nrows(), x.ncols());
    let mut w = DMatrix::<f64>::zeros(p, n_classes);
    let mut onehot = DMatrix::<f64>::zeros(n, n_classes);
    for (r, &k) in train_y.iter().enumerate() {
        onehot[(r, k)] = 1.0;
    }
    let softmax = |logits: &mut DMatrix<f64>| {
        for mut row in logits.row_iter_mut() {
            let max = row.max();
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let s = row.sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    };
    let lr = 0.5;
    for _ in 0..LOGISTIC_ITERATIONS {
        let mut probs = &x * &w;
        softmax(&mut probs);
        let mut grad = x.transpose() * (probs - &onehot) / n as f64;
        // No penalty on the intercept row.
        let mut penalty = w.clone() * LOGISTIC_L2;
        penalty.row_mut(0).fill(0.0);
        grad += penalty;
        w -= grad * lr;
    }
    let scores = standardize(test_x, &st) * &w;
    let pred: Vec<usize> = scores.row_iter().map(|r| r.transpose().argmax().0).collect();
    let accuracy = pred.iter().zip(test_y).filter(|(a, b)| a == b).count() as f64 / test_y.len() as f64;
    let mut f1 = 0.0;
    let mut present = 0;
    for k in 0..n_classes {
        let tp = pred.iter().zip(test_y).filter(|(p, t)| **p == k && **t == k).count() as f64;
        let fp = pred.iter().zip(test_y).filter(|(p, t)| **p == k && **t != k).count() as f64;
        let fneg = pred.iter().zip(test_y).filter(|(p, t)| **p != k && **t == k).count() as f64;
        if tp + fp + fneg == 0.0 {
            continue;
        }
        present += 1;
        f1 += 2.0 * tp / (2.0 * tp + fp + fneg);
    }
    ArmScores {
        primary: accuracy,
        f1_macro: Some(f1 / present.max(1) as f64),
    }
}

fn compatible(a: &Dataset, b: &Dataset) -> bool {
    a.schema() == b.schema() && a.codecs() == b.codecs()
}

/// Trains the same learner on real and on synthetic data and scores both on real test data.
pub fn ml_efficacy(real_train: &Dataset, synth_train: &Dataset, real_test: &Dataset, target: &str) -> Result<EfficacyResult> {
    if !compatible(real_train, synth_train) || !compatible(real_train, real_test) {
        return Err(Error::Data("efficacy datasets must share schema and codecs".into()));
    }
    let t = real_train
        .schema()
        .index_of(target)
        .ok_or_else(|| Error::Task(format!("unknown target column `{target}`")))?;
    for (name, d) in [("real", real_train), ("synthetic", synth_train), ("test", real_test)] {
        let v = d.column(t).numeric();
        if v.len() < 2 || v.iter().all(|x| *x == v[0]) {
            return Err(Error::Task(format!("target `{target}` is constant in the {name} data")));
        }
    }
    let test_x = features(real_test, t);
    let arm = |train: &Dataset| -> Result<ArmScores> {
        let x = features(train, t);
        match (train.column(t), real_test.column(t)) {
            (Column::Discrete { codes, codec }, Column::Discrete { codes: test_codes, .. }) => {
                Ok(logistic_scores(&x, codes, &test_x, test_codes, codec.n_classes()))
            }
            (col, test_col) => Ok(ArmScores {
                primary: ols_r2(&x, &col.numeric(), &test_x, &test_col.numeric())?,
                f1_macro: None,
            }),
        }
    };
    let task = if real_train.schema().columns()[t].kind.is_discrete() {
        Task::Classification
    } else {
        Task::Regression
    };
    Ok(EfficacyResult {
        task,
        target: target.to_string(),
        real: arm(real_train)?,
        synth: arm(synth_train)?,
    })
}

/// Least-squares line `y = slope * x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn least_squares_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Data("a line fit needs two equal-length samples of >= 2 points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Data("x values are constant; slope is undefined".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// A labelled point cloud for plotting.
pub struct ScatterSet<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

const PALETTE: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];
const SVG_SIZE: f64 = 400.0;
const SVG_MARGIN: f64 = 40.0;
/// Points drawn per set in SVG output; CSV output keeps every point.
const SVG_MAX_POINTS: usize = 2000;

fn extent<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{s}\" height=\"{s}\" fill=\"white\"/>\n\
         <text x=\"{m}\" y=\"20\" font-size=\"12\">{t}</text>\n",
        s = SVG_SIZE,
        m = SVG_MARGIN,
        t = xml_escape(title)
    );
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `x,y,set` rows to `csv_path`, `set,slope,intercept` rows to the
/// sibling `*_fit.csv`, and optionally an SVG rendering to `svg_path`.
pub fn emit_scatter(
    sets: &[ScatterSet<'_>],
    names: (&str, &str),
    csv_path: &Path,
    svg_path: Option<&Path>,
) -> Result<Vec<LineFit>> {
    let fits = sets
        .iter()
        .map(|s| least_squares_line(s.x, s.y))
        .collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y", "set"])?;
    for s in sets {
        for (x, y) in s.x.iter().zip(s.y) {
            w.write_record([format!("{x:?}"), format!("{y:?}"), s.label.to_string()])?;
        }
    }
    write_atomic(csv_path, &w.into_inner().map_err(|e| Error::Data(e.to_string()))?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["set", "slope", "intercept"])?;
    for (s, f) in sets.iter().zip(&fits) {
        w.write_record([s.label.to_string(), format!("{:?}", f.slope), format!("{:?}", f.intercept)])?;
    }
    let stem = csv_path.file_stem().unwrap_or_default().to_string_lossy();
    let fit_path = csv_path.with_file_name(format!("{stem}_fit.csv"));
    write_atomic(&fit_path, &w.into_inner().map_err(|e| Error::Data(e.to_string()))?)?;

    if let Some(svg_path) = svg_path {
        let (x0, x1) = extent(sets.iter().flat_map(|s| s.x));
        let (y0, y1) = extent(sets.iter().flat_map(|s| s.y));
        let span = SVG_SIZE - 2.0 * SVG_MARGIN;
        let px = |x: f64| SVG_MARGIN + (x - x0) / (x1 - x0) * span;
        let py = |y: f64| SVG_SIZE - SVG_MARGIN - (y - y0) / (y1 - y0) * span;
        let mut out = String::new();
        svg_open(&mut out, &format!("{} vs {}", names.1, names.0));
        for (i, (s, f)) in sets.iter().zip(&fits).enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let step = (s.x.len() / SVG_MAX_POINTS).max(1);
            for (x, y) in s.x.iter().zip(s.y).step_by(step) {
                let _ = writeln!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{color}\" fill-opacity=\"0.4\"/>",
                    px(*x),
                    py(*y)
                );
            }
            let _ = writeln!(
                out,
                "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>",
                px(x0),
                py(f.slope * x0 + f.intercept),
                px(x1),
                py(f.slope * x1 + f.intercept)
            );
            let _ = writeln!(
                out,
                "<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"11\" fill=\"{color}\">{}</text>",
                SVG_SIZE - 120.0,
                20.0 + 14.0 * i as f64,
                xml_escape(s.label)
            );
        }
        out.push_str("</svg>\n");
        write_atomic(svg_path, out.as_bytes())?;
    }
    Ok(fits)
}

/// Histogram bins shared by several samples: `bin_lo,bin_hi,<label>...` counts.
pub fn emit_histogram(
    sets: &[(&str, &[f64])],
    title: &str,
    bins: usize,
    csv_path: &Path,
    svg_path: Option<&Path>,
) -> Result<()> {
    if bins == 0 || sets.iter().all(|(_, v)| v.is_empty()) {
        return Err(Error::Data("histogram needs bins and data".into()));
    }
    let (lo, hi) = extent(sets.iter().flat_map(|(_, v)| v.iter()));
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<usize>> = sets
        .iter()
        .map(|(_, v)| {
            let mut c = vec![0; bins];
            for &x in v.iter() {
                c[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            c
        })
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
    header.extend(sets.iter().map(|(l, _)| l.to_string()));
    w.write_record(&header)?;
    for b in 0..bins {
        let mut rec = vec![format!("{:?}", lo + b as f64 * width), format!("{:?}", lo + (b + 1) as f64 * width)];
        rec.extend(counts.iter().map(|c| c[b].to_string()));
        w.write_record(&rec)?;
    }
    write_atomic(csv_path, &w.into_inner().map_err(|e| Error::Data(e.to_string()))?)?;

    if let Some(svg_path) = svg_path {
        let dens: Vec<Vec<f64>> = counts
            .iter()
            .map(|c| {
                let n = c.iter().sum::<usize>().max(1) as f64;
                c.iter().map(|&k| k as f64 / n).collect()
            })
            .collect();
        let top = dens.iter().flatten().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let span = SVG_SIZE - 2.0 * SVG_MARGIN;
        let bar = span / bins as f64 / sets.len() as f64;
        let mut out = String::new();
        svg_open(&mut out, title);
        for (i, d) in dens.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            for (b, &v) in d.iter().enumerate() {
                let h = v / top * span;
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" fill-opacity=\"0.7\"/>",
                    SVG_MARGIN + (b * sets.len() + i) as f64 * bar,
                    SVG_SIZE - SVG_MARGIN - h,
                    bar,
                    h
                );
            }
            let _ = writeln!(
                out,
                "<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"11\" fill=\"{color}\">{}</text>",
                SVG_SIZE - 120.0,
                20.0 + 14.0 * i as f64,
                xml_escape(sets[i].0)
            );
        }
        out.push_str("</svg>\n");
        write_atomic(svg_path, out.as_bytes())?;
    }
    Ok(())
}
