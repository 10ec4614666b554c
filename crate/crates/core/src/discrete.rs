//! Discrete marginals.
//!
//! Class codes live on a latent real line: code `k` owns the cell `(k-1, k]`
//! of a spline on `(-1, n-1)`. Its probability is the spline CDF mass of that
//! cell, and generation rounds the spline output up to the next integer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diff::{self, AdamConfig, EpochRecord, LoopConfig, Objective};
use crate::error::{Error, Result};
use crate::marginal::split_indices;
use crate::spline::{n_raw_params, KnotGrad, NormalizedSpline, RawSplineParams, SplineConstraints};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    /// Numeric labels, coded in numeric order.
    Ordinal,
    /// Arbitrary labels, coded in lexicographic order.
    Categorical,
}

#[derive(Serialize, Deserialize)]
struct CodecRepr {
    kind: CodecKind,
    classes: Vec<String>,
}

/// Bijection between raw labels and codes `0..n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "CodecRepr", try_from = "CodecRepr")]
pub struct CategoryCodec {
    kind: CodecKind,
    classes: Vec<String>,
    lookup: HashMap<String, usize>,
    /// Numeric value of each class, ordinal codecs only.
    values: Vec<f64>,
}

impl PartialEq for CategoryCodec {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.classes == other.classes
    }
}

impl From<CategoryCodec> for CodecRepr {
    fn from(c: CategoryCodec) -> Self {
        CodecRepr {
            kind: c.kind,
            classes: c.classes,
        }
    }
}

impl TryFrom<CodecRepr> for CategoryCodec {
    type Error = Error;

    fn try_from(r: CodecRepr) -> Result<Self> {
        CategoryCodec::from_classes(r.kind, r.classes)
    }
}

fn parse_ordinal(label: &str) -> Result<f64> {
    label
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Data(format!("ordinal label `{label}` is not a finite number")))
}

impl CategoryCodec {
    /// Rebuilds a codec from its class list, which must already be in code order.
    pub fn from_classes(kind: CodecKind, classes: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Degenerate(format!(
                "{} distinct class(es); a discrete column needs at least 2",
                classes.len()
            )));
        }
        let values = match kind {
            CodecKind::Ordinal => classes
                .iter()
                .map(|c| parse_ordinal(c))
                .collect::<Result<Vec<_>>>()?,
            CodecKind::Categorical => Vec::new(),
        };
        let ordered = match kind {
            CodecKind::Ordinal => values.windows(2).all(|w| w[0] < w[1]),
            CodecKind::Categorical => classes.windows(2).all(|w| w[0] < w[1]),
        };
        if !ordered {
            return Err(Error::Data("codec classes are not distinct and sorted".into()));
        }
        let lookup = classes.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        Ok(Self {
            kind,
            classes,
            lookup,
            values,
        })
    }

    pub fn kind(&self) -> CodecKind {
        self.kind
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn encode(&self, label: &str) -> Result<usize> {
        if let Some(&code) = self.lookup.get(label) {
            return Ok(code);
        }
        if self.kind == CodecKind::Ordinal {
            if let Ok(v) = parse_ordinal(label) {
                if let Ok(i) = self.values.binary_search_by(|c| c.total_cmp(&v)) {
                    return Ok(i);
                }
            }
        }
        Err(Error::Data(format!("label `{label}` is not a known class")))
    }

    pub fn decode(&self, code: usize) -> Result<&str> {
        self.classes
            .get(code)
            .map(String::as_str)
            .ok_or_else(|| Error::Argument(format!("code {code} out of range 0..{}", self.n_classes())))
    }
}

/// Builds a codec from the distinct labels of a column.
pub fn build_codec<S: AsRef<str>>(labels: &[S], kind: CodecKind) -> Result<CategoryCodec> {
    let classes = match kind {
        CodecKind::Categorical => {
            let mut c: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
            c.sort();
            c.dedup();
            c
        }
        CodecKind::Ordinal => {
            let mut c: Vec<(f64, String)> = labels
                .iter()
                .map(|l| Ok((parse_ordinal(l.as_ref())?, l.as_ref().trim().to_string())))
                .collect::<Result<_>>()?;
            // Equal values with different spellings keep the smallest spelling.
            c.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            c.dedup_by(|a, b| a.0 == b.0);
            c.into_iter().map(|(_, s)| s).collect()
        }
    };
    CategoryCodec::from_classes(kind, classes)
}

/// Spline bin count used for a discrete column with `n_classes` classes.
pub fn default_discrete_bins(n_classes: usize) -> usize {
    (4 * n_classes).max(32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteConfig {
    /// Overrides the class-count based bin default.
    pub k_bins: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for DiscreteConfig {
    fn default() -> Self {
        Self {
            k_bins: None,
            epochs: 500,
            batch_size: 1 << 20,
            learning_rate: 0.05,
            seed: 0,
            val_fraction: 0.1,
            patience: 20,
        }
    }
}

impl DiscreteConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.k_bins.is_some_and(|k| k < 2)
            || self.epochs == 0
            || self.batch_size == 0
            || self.patience == 0
            || !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || !(0.0..1.0).contains(&self.val_fraction)
        {
            return Err(Error::Config("invalid discrete marginal configuration".into()));
        }
        Ok(())
    }
}

/// A fitted discrete marginal.
#[derive(Debug, Clone)]
pub struct DiscreteMarginalFlow {
    column_id: String,
    codec: CategoryCodec,
    params: RawSplineParams,
    spline: NormalizedSpline,
    /// `edges[k]` and `edges[k + 1]` are the CDF values bounding the cell of code `k`.
    edges: Vec<f64>,
}

impl PartialEq for DiscreteMarginalFlow {
    fn eq(&self, other: &Self) -> bool {
        self.column_id == other.column_id && self.codec == other.codec && self.params == other.params
    }
}

fn latent_bounds(n_classes: usize) -> (f64, f64) {
    (-1.0, n_classes as f64 - 1.0)
}

/// CDF at the upper edge of each code; the last one is 1 by construction.
fn cell_edges(spline: &NormalizedSpline, n_classes: usize) -> Vec<f64> {
    let mut edges = Vec::with_capacity(n_classes + 1);
    edges.push(0.0);
    for k in 0..n_classes - 1 {
        edges.push(spline.inverse(k as f64).value);
    }
    edges.push(1.0);
    edges
}

impl DiscreteMarginalFlow {
    pub fn new(column_id: impl Into<String>, codec: CategoryCodec, params: RawSplineParams) -> Result<Self> {
        let n = codec.n_classes();
        if params.bounds != latent_bounds(n) {
            return Err(Error::Parameter(format!(
                "latent bounds {:?} do not match {n} classes",
                params.bounds
            )));
        }
        let spline = params.normalize(SplineConstraints::default())?;
        let edges = cell_edges(&spline, n);
        Ok(Self {
            column_id: column_id.into(),
            codec,
            params,
            spline,
            edges,
        })
    }

    /// Untrained model with the default bin count: equal cell masses.
    pub fn uniform(column_id: impl Into<String>, codec: CategoryCodec) -> Result<Self> {
        let n = codec.n_classes();
        let params = RawSplineParams::zeros(default_discrete_bins(n), latent_bounds(n));
        Self::new(column_id, codec, params)
    }

    pub fn column_id(&self) -> &str {
        &self.column_id
    }

    pub fn codec(&self) -> &CategoryCodec {
        &self.codec
    }

    pub fn params(&self) -> &RawSplineParams {
        &self.params
    }

    pub fn n_classes(&self) -> usize {
        self.codec.n_classes()
    }

    /// CDF values `(C(k-1), C(k))` bounding the cell of code `k`.
    pub fn cell(&self, k: usize) -> Result<(f64, f64)> {
        if k >= self.n_classes() {
            return Err(Error::Argument(format!(
                "code {k} out of range 0..{}",
                self.n_classes()
            )));
        }
        Ok((self.edges[k], self.edges[k + 1]))
    }

    pub fn pmf(&self, k: usize) -> Result<f64> {
        let (lo, hi) = self.cell(k)?;
        Ok(hi - lo)
    }

    pub fn log_pmf(&self, k: usize) -> Result<f64> {
        Ok(self.pmf(k)?.ln())
    }

    /// Rounds the latent sample for `u` up to a code. Levels outside `[0, 1]` are clamped.
    pub fn sample_code(&self, u: f64) -> usize {
        let u = u.clamp(0.0, 1.0);
        let n = self.n_classes();
        let x = self.spline.forward(u).value;
        let mut k = (x.ceil().max(0.0) as usize).min(n - 1);
        // Settle rounding noise at cell edges against the exact edge table.
        while k > 0 && u <= self.edges[k] {
            k -= 1;
        }
        while k + 1 < n && u > self.edges[k + 1] {
            k += 1;
        }
        k
    }

    /// Distributional transform: a uniform level inside the cell of `k`.
    pub fn dist_transform(&self, k: usize, v: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Argument(format!("auxiliary uniform {v} outside [0, 1]")));
        }
        let (lo, hi) = self.cell(k)?;
        Ok(lo + v * (hi - lo))
    }
}

/// Mean negative log-probability of codes under a latent spline.
pub struct DiscreteNll<'a> {
    pub codes: &'a [usize],
    pub n_classes: usize,
    pub k_bins: usize,
}

impl DiscreteNll<'_> {
    fn spline(&self, params: &[f64]) -> NormalizedSpline {
        let k = self.k_bins;
        let mut s = NormalizedSpline::with_bins(k, latent_bounds(self.n_classes), SplineConstraints::default());
        s.refill(&params[..k], &params[k..2 * k], &params[2 * k..]);
        s
    }

    fn counts(&self, rows: &[usize]) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_classes];
        for &r in rows {
            counts[self.codes[r]] += 1.0;
        }
        counts
    }
}

impl Objective for DiscreteNll<'_> {
    fn n_params(&self) -> usize {
        n_raw_params(self.k_bins)
    }

    fn loss_and_grad(&self, params: &[f64], rows: &[usize]) -> (f64, Vec<f64>) {
        let n = self.n_classes;
        let spline = self.spline(params);
        let counts = self.counts(rows);
        let total = rows.len() as f64;
        let inner: Vec<_> = (0..n - 1).map(|k| spline.inverse_with_grad(k as f64)).collect();
        let cdf = |j: usize| if j + 1 == n { 1.0 } else { inner[j].0.value };
        let probs: Vec<f64> = (0..n)
            .map(|k| cdf(k) - if k == 0 { 0.0 } else { cdf(k - 1) })
            .collect();
        let loss = -counts
            .iter()
            .zip(&probs)
            .filter(|(c, _)| **c > 0.0)
            .map(|(c, p)| c * p.ln())
            .sum::<f64>()
            / total;
        // C(j) is the upper edge of cell j and the lower edge of cell j + 1.
        let mut knot = KnotGrad::zeros(self.k_bins);
        for (j, (_, g)) in inner.iter().enumerate() {
            let w = (-counts[j] / probs[j] + counts[j + 1] / probs[j + 1]) / total;
            knot.accumulate(g, w, 0.0);
        }
        let mut grad = vec![0.0; self.n_params()];
        spline.raw_gradient(&knot, &mut grad);
        (loss, grad)
    }
}

/// Fits a discrete marginal to codes of `codec` by maximum likelihood.
pub fn fit_discrete(
    column_id: &str,
    codec: &CategoryCodec,
    codes: &[usize],
    config: &DiscreteConfig,
) -> Result<(DiscreteMarginalFlow, Vec<EpochRecord>)> {
    config.validate()?;
    let n = codec.n_classes();
    if let Some(&c) = codes.iter().find(|&&c| c >= n) {
        return Err(Error::Data(format!("code {c} out of range 0..{n}")));
    }
    if codes.len() < 2 {
        return Err(Error::Data(format!("need at least 2 samples, got {}", codes.len())));
    }
    let k_bins = config.k_bins.unwrap_or_else(|| default_discrete_bins(n));
    let objective = DiscreteNll {
        codes,
        n_classes: n,
        k_bins,
    };
    let (train, val) = split_indices(codes.len(), config.val_fraction, config.seed);
    let loop_config = LoopConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        patience: config.patience,
        seed: config.seed,
        adam: AdamConfig::default(),
    };
    let outcome = diff::minimize(&objective, vec![0.0; objective.n_params()], &train, &val, &loop_config)?;
    let params = RawSplineParams::from_flat(&outcome.params, latent_bounds(n))?;
    Ok((DiscreteMarginalFlow::new(column_id, codec.clone(), params)?, outcome.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Hypergeometric};

    fn codec(n: usize) -> CategoryCodec {
        let labels: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        build_codec(&labels, CodecKind::Ordinal).unwrap()
    }

    fn random_model(rng: &mut impl Rng, n: usize) -> DiscreteMarginalFlow {
        let k = default_discrete_bins(n);
        let flat: Vec<f64> = (0..n_raw_params(k)).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let params = RawSplineParams::from_flat(&flat, latent_bounds(n)).unwrap();
        DiscreteMarginalFlow::new("y", codec(n), params).unwrap()
    }

    fn quick() -> DiscreteConfig {
        DiscreteConfig::default()
    }

    #[test]
    fn codec_orders() {
        let c = build_codec(&["b", "a", "c", "a"], CodecKind::Categorical).unwrap();
        assert_eq!(c.classes(), ["a", "b", "c"]);
        assert_eq!(c.encode("b").unwrap(), 1);
        let c = build_codec(&["3", "1", "2", "10"], CodecKind::Ordinal).unwrap();
        assert_eq!(c.classes(), ["1", "2", "3", "10"]);
        assert_eq!(c.encode("3").unwrap(), 2);
        assert_eq!(c.encode("3.0").unwrap(), 2);
        assert!(c.encode("4").is_err());
        assert!(c.decode(4).is_err());
        assert!(matches!(
            build_codec(&["x", "x"], CodecKind::Categorical),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(build_codec(&["1", "a"], CodecKind::Ordinal), Err(Error::Data(_))));
    }

    #[test]
    fn codec_serde_round_trip() {
        let c = build_codec(&["z", "y"], CodecKind::Categorical).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: CategoryCodec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode("z").unwrap(), 1);
        let bad = r#"{"kind":"categorical","classes":["b","a"]}"#;
        assert!(serde_json::from_str::<CategoryCodec>(bad).is_err());
    }

    proptest! {
        #[test]
        fn codec_round_trip(labels in proptest::collection::vec("[a-z]{0,4}", 2..1000)) {
            prop_assume!(labels.iter().any(|l| l != &labels[0]));
            let c = build_codec(&labels, CodecKind::Categorical).unwrap();
            for l in &labels {
                prop_assert_eq!(c.decode(c.encode(l).unwrap()).unwrap(), l.as_str());
            }
        }

        #[test]
        fn transform_round_trip(seed in any::<u64>(), n in 2usize..12, v in 1e-9f64..1.0 - 1e-9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, n);
            for k in 0..n {
                prop_assert_eq!(m.sample_code(m.dist_transform(k, v).unwrap()), k);
            }
        }
    }

    #[test]
    fn two_class_identity_cells() {
        let m = DiscreteMarginalFlow::new("y", codec(2), RawSplineParams::zeros(32, (-1.0, 1.0))).unwrap();
        assert_abs_diff_eq!(m.pmf(0).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m.pmf(1).unwrap(), 0.5, epsilon = 1e-12);
        // x = 2u - 1 on this spline.
        assert_eq!(m.sample_code(0.35), 0);
        assert_eq!(m.sample_code(0.7), 1);
        // x exactly 0 belongs to code 0.
        assert_eq!(m.sample_code(m.cell(0).unwrap().1), 0);
        assert_abs_diff_eq!(m.dist_transform(0, 0.6).unwrap(), 0.3, epsilon = 1e-12);
        assert_eq!(m.dist_transform(1, 1.0).unwrap(), 1.0);
        assert!(m.pmf(2).is_err());
        assert!(m.dist_transform(0, 1.5).is_err());
    }

    #[test]
    fn pmf_sums_to_one_and_cells_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.random_range(2..20);
            let m = random_model(&mut rng, n);
            let total: f64 = (0..n).map(|k| m.pmf(k).unwrap()).sum();
            assert!((total - 1.0).abs() <= 1e-10);
            assert!((0..n).all(|k| m.pmf(k).unwrap() > 0.0));
        }
        let m = random_model(&mut rng, 7);
        for i in 0..=10_000 {
            let u = i as f64 / 10_000.0;
            let k = m.sample_code(u);
            let (lo, hi) = m.cell(k).unwrap();
            assert!((lo < u || (k == 0 && u == 0.0)) && u <= hi, "u {u} code {k}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let codes: Vec<usize> = (0..200).map(|_| rng.random_range(0..5)).collect();
        let obj = DiscreteNll {
            codes: &codes,
            n_classes: 5,
            k_bins: 8,
        };
        let params: Vec<f64> = (0..obj.n_params()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let rows: Vec<usize> = (0..200).collect();
        let (_, grad) = obj.loss_and_grad(&params, &rows);
        let h = 1e-6;
        let (mut d2, mut n2) = (0.0, 0.0);
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            let plus = obj.loss(&p, &rows);
            p[i] -= 2.0 * h;
            let minus = obj.loss(&p, &rows);
            let fd = (plus - minus) / (2.0 * h);
            d2 += (fd - grad[i]).powi(2);
            n2 += fd * fd;
        }
        assert!((d2 / n2).sqrt() <= 1e-4);
    }

    #[test]
    fn fitted_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in [0.5, 0.7] {
            let codes: Vec<usize> = (0..10_000).map(|_| rng.random_bool(p) as usize).collect();
            let (m, _) = fit_discrete("b", &codec(2), &codes, &quick()).unwrap();
            assert!((m.pmf(1).unwrap() - p).abs() <= 0.02, "p {p}: {}", m.pmf(1).unwrap());
        }
    }

    #[test]
    fn fitted_hypergeometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let hyper = Hypergeometric::new(20, 7, 12).unwrap();
        let labels: Vec<String> = (0..10_000).map(|_| hyper.sample(&mut rng).to_string()).collect();
        let c = build_codec(&labels, CodecKind::Ordinal).unwrap();
        let codes: Vec<usize> = labels.iter().map(|l| c.encode(l).unwrap()).collect();
        let (m, _) = fit_discrete("h", &c, &codes, &quick()).unwrap();

        let n = c.n_classes();
        let mut freq = vec![0.0; n];
        codes.iter().for_each(|&k| freq[k] += 1e-4);
        let tv: f64 = (0..n).map(|k| (m.pmf(k).unwrap() - freq[k]).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.02, "total variation {tv}");

        let mut generated = vec![0.0; n];
        for _ in 0..100_000 {
            generated[m.sample_code(rng.random())] += 1e-5;
        }
        for k in 0..n {
            assert!((generated[k] - m.pmf(k).unwrap()).abs() <= 0.01);
        }
    }
}
