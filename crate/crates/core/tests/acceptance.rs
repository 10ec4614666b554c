//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=2,4` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Discrete, Hypergeometric};

use copulaflow::bench::{copula_logdensity_analytic, fixture, sample_bivariate_copula, CopulaSpec};
use copulaflow::copula::{build_copula_flow, copula_logdensity, fit_copula, CopulaConfig, CopulaFlowStack, CopulaNll};
use copulaflow::data::{Cell, Dataset};
use copulaflow::diff::Objective;
use copulaflow::discrete::{build_codec, fit_discrete, CodecKind, DiscreteConfig};
use copulaflow::eval::{kendall_tau, ks_two_sample, least_squares_line};
use copulaflow::marginal::{MarginalConfig, MarginalNll};
use copulaflow::model_file::{from_bytes, to_bytes};
use copulaflow::spline::{normalize_params, RawSplineParams, SplineConstraints};
use copulaflow::trainer::{train_pipeline, ColumnModel, FittedModel, TrainConfig, EVAL_V};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_raw(rng: &mut ChaCha8Rng, k: usize, bounds: (f64, f64), scale: f64) -> RawSplineParams {
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f64>>();
    RawSplineParams {
        widths_raw: draw(k),
        heights_raw: draw(k),
        slopes_raw: draw(k + 1),
        bounds,
    }
}

fn random_bounds(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let lo = rng.random_range(-50.0..50.0);
    (lo, lo + rng.random_range(0.01..100.0))
}

/// Criterion 1: inverse and forward maps invert each other and their
/// log-derivatives cancel.
fn spline_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_u, mut worst_x, mut worst_ld) = (0.0f64, 0.0f64, 0.0f64);
    let mut count = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=64);
        let bounds = random_bounds(&mut rng);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let raw = RawSplineParams {
            widths_raw: normal(k),
            heights_raw: normal(k),
            slopes_raw: normal(k + 1),
            bounds,
        };
        let spline = normalize_params(&raw, SplineConstraints::default()).unwrap();
        let range = bounds.1 - bounds.0;
        for _ in 0..100 {
            let u: f64 = rng.random();
            let f = spline.forward(u);
            let b = spline.inverse(f.value);
            worst_u = worst_u.max((b.value - u).abs());
            worst_ld = worst_ld.max((f.log_deriv + b.log_deriv).abs());
            let x = bounds.0 + rng.random::<f64>() * range;
            worst_x = worst_x.max((spline.forward(spline.inverse(x).value).value - x).abs() / range);
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_u <= 1e-10 && worst_x <= 1e-10 && worst_ld <= 1e-8 && secs < 30.0,
        format!(
            "{count} round trips, max |u err| {worst_u:.1e}, max |x err|/range {worst_x:.1e}, \
             max log-derivative sum {worst_ld:.1e}, {secs:.1}s"
        ),
    )
}

fn central_difference<O: Objective>(objective: &O, params: &[f64], rows: &[usize], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + h;
            let up = objective.loss(&p, rows);
            p[i] = params[i] - h;
            let down = objective.loss(&p, rows);
            p[i] = params[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Criterion 2: analytic gradients of both training losses against central differences.
fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_marginal = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=48);
        let bounds = random_bounds(&mut rng);
        let samples: Vec<f64> = (0..40)
            .map(|_| bounds.0 + (bounds.1 - bounds.0) * rng.random_range(0.001..0.999))
            .collect();
        let objective = MarginalNll {
            samples: &samples,
            k_bins: k,
            bounds,
        };
        let params = random_raw(&mut rng, k, bounds, 1.5).to_flat();
        let rows: Vec<usize> = (0..samples.len()).collect();
        let (_, grad) = objective.loss_and_grad(&params, &rows);
        worst_marginal = worst_marginal.max(relative_error(&grad, &central_difference(&objective, &params, &rows, 1e-5)));
    }
    let mut worst_copula = 0.0f64;
    for _ in 0..100 {
        let dim = rng.random_range(2..=4);
        let width = rng.random_range(4..=8);
        let hidden = vec![width; rng.random_range(1..=2)];
        let k = rng.random_range(2..=5);
        let layers = rng.random_range(1..=2);
        let template = build_copula_flow(dim, &hidden, k, layers, rng.random()).unwrap();
        let params: Vec<f64> = (0..template.params().len()).map(|_| rng.random_range(-0.4..0.4)).collect();
        let stack = CopulaFlowStack::from_params(template.architecture().clone(), params.clone()).unwrap();
        let data: Vec<f64> = (0..8 * dim).map(|_| rng.random_range(0.02..0.98)).collect();
        let objective = CopulaNll { stack: &stack, data: &data };
        let rows: Vec<usize> = (0..8).collect();
        let (_, grad) = objective.loss_and_grad(&params, &rows);
        worst_copula = worst_copula.max(relative_error(&grad, &central_difference(&objective, &params, &rows, 1e-5)));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_marginal <= 1e-4 && worst_copula <= 1e-4 && secs < 120.0,
        format!(
            "100 + 100 configurations, max rel err marginal {worst_marginal:.1e}, copula {worst_copula:.1e}, {secs:.1}s"
        ),
    )
}

/// Small budget used where only structure, not fit quality, matters.
fn quick_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.training.seed = seed;
    c.marginal = MarginalConfig {
        k_bins: 16,
        epochs: 10,
        batch_size: 256,
        learning_rate: 1e-2,
        ..MarginalConfig::default()
    };
    c.discrete.epochs = 50;
    c.copula = CopulaConfig {
        n_layers: 2,
        hidden_sizes: vec![16, 16],
        k_bins: 8,
        epochs: 3,
        batch_size: 256,
        learning_rate: 1e-2,
        ..CopulaConfig::default()
    };
    c
}

const FIXTURES: [&str; 6] = [
    "two-rings",
    "mixed-vine",
    "copula:gaussian:0.8",
    "copula:clayton:2",
    "copula:gumbel:2",
    "copula:frank:5",
];

/// Copula and marginal terms recomputed from the component models.
fn independent_terms(model: &FittedModel, row: &[Cell]) -> (f64, f64) {
    let mut u = Vec::new();
    let mut marginal = 0.0;
    for (m, &cell) in model.marginals().iter().zip(row) {
        match (m, cell) {
            (ColumnModel::Continuous(c), Cell::Real(x)) => {
                u.push(c.cdf(x));
                marginal += c.logpdf(x);
            }
            (ColumnModel::Discrete(d), Cell::Code(k)) => {
                let (lo, hi) = d.cell(k).unwrap();
                u.push(lo + EVAL_V * (hi - lo));
                marginal += (hi - lo).ln();
            }
            _ => panic!("cell kind mismatch"),
        }
    }
    let copula = model.copula().map_or(0.0, |c| copula_logdensity(c, &u).unwrap());
    (copula, marginal)
}

/// Criterion 3: joint log-density equals copula term plus marginal terms.
fn likelihood_decomposition() -> Outcome {
    let mut worst = 0.0f64;
    let mut rows_checked = 0;
    for (i, name) in FIXTURES.iter().enumerate() {
        let (_, train, _) = fixture(name, 2000, 30 + i as u64).unwrap();
        let (model, _) = train_pipeline(&train, &quick_config(i as u64)).unwrap();
        let (_, fresh, _) = fixture(name, 1000, 90 + i as u64).unwrap();
        // Mixed-vine codes come from a fixed support, so fresh rows share the codec.
        for r in 0..fresh.n_rows() {
            let row = fresh.row(r);
            let joint = model.joint_logdensity(&row).unwrap();
            let (c, m) = independent_terms(&model, &row);
            worst = worst.max((joint - (c + m)).abs());
            rows_checked += 1;
        }
        let report = model.loglik_report(&fresh).unwrap();
        let sum = report.copula_term + report.marginal_terms.iter().map(|t| t.1).sum::<f64>();
        worst = worst.max((report.total - sum).abs());
    }
    outcome(
        worst <= 1e-9,
        format!("{rows_checked} rows over {} fixtures, max |joint - (copula + marginals)| {worst:.1e}", FIXTURES.len()),
    )
}

/// Copula flow budget for the bivariate oracle fits.
fn oracle_copula_config(seed: u64) -> CopulaConfig {
    CopulaConfig {
        n_layers: 2,
        hidden_sizes: vec![64, 64],
        k_bins: 16,
        epochs: 60,
        batch_size: 256,
        learning_rate: 2e-3,
        seed,
        val_fraction: 0.1,
        patience: 10,
    }
}

/// Criterion 4: copula flow fitted to parametric copula samples.
fn copula_oracle() -> Outcome {
    let cases: [(&str, Option<f64>); 4] = [
        ("gaussian:0.8", None),
        ("clayton:2", Some(0.5)),
        ("gumbel:2", Some(0.5)),
        ("frank:5", None),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, tau_target)) in cases.iter().enumerate() {
        let spec: CopulaSpec = name.parse().unwrap();
        let start = Instant::now();
        let train = sample_bivariate_copula(&spec, 20_000, 100 + i as u64);
        let config = oracle_copula_config(i as u64);
        let init = build_copula_flow(2, &config.hidden_sizes, config.k_bins, config.n_layers, i as u64).unwrap();
        let (flow, _) = fit_copula(&init, &train, &config).unwrap();
        let secs = start.elapsed().as_secs_f64();

        let held = sample_bivariate_copula(&spec, 20_000, 200 + i as u64);
        let flow_mean = flow.logdensity_rows(&held).unwrap().iter().sum::<f64>() / 20_000.0;
        let true_mean = held
            .chunks(2)
            .map(|r| copula_logdensity_analytic(&spec, r[0], r[1]))
            .sum::<f64>()
            / 20_000.0;
        let gap = (flow_mean - true_mean).abs();

        let mut rng = ChaCha8Rng::seed_from_u64(300 + i as u64);
        let noise: Vec<f64> = (0..40_000).map(|_| rng.random()).collect();
        let synth = flow.sample_rows(&noise).unwrap();
        let (a, b): (Vec<f64>, Vec<f64>) = synth.chunks(2).map(|r| (r[0], r[1])).unzip();
        let tau = kendall_tau(&a, &b).unwrap();
        let tau_ok = tau_target.is_none_or(|t| (tau - t).abs() <= 0.03);
        let ok = gap <= 0.1 && tau_ok && secs < 600.0;
        pass &= ok;
        parts.push(format!(
            "{name}: flow {flow_mean:.3} vs analytic {true_mean:.3} nats, tau {tau:.3} (closed form {:.3}), {secs:.0}s{}",
            spec.kendall_tau(),
            if ok { "" } else { " FAIL" }
        ));
    }
    outcome(pass, parts.join("; "))
}

/// Desk-scale pipeline budget for the two-rings and mixed-vine fixtures.
fn desk_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.training.seed = seed;
    c.marginal = MarginalConfig {
        k_bins: 64,
        epochs: 100,
        batch_size: 512,
        learning_rate: 5e-3,
        patience: 15,
        ..MarginalConfig::default()
    };
    c.copula = CopulaConfig {
        n_layers: 4,
        hidden_sizes: vec![64, 64],
        k_bins: 16,
        epochs: 150,
        batch_size: 256,
        learning_rate: 2e-3,
        patience: 20,
        ..CopulaConfig::default()
    };
    c
}

/// Criterion 5: two-rings joint model against the independence baseline.
fn two_rings() -> Outcome {
    let (_, train, _) = fixture("two-rings", 20_000, 5).unwrap();
    let (_, held, _) = fixture("two-rings", 10_000, 6).unwrap();
    let (model, _) = train_pipeline(&train, &desk_config(5)).unwrap();
    let joint = model.loglik_report(&held).unwrap().total;
    let base = model.independence_baseline().loglik_report(&held).unwrap().total;
    let synth = model.generate(10_000, 7).unwrap();
    let mut pass = joint - base >= 0.3;
    let mut ks_parts = Vec::new();
    for c in 0..2 {
        let ks = ks_two_sample(&synth.column(c).numeric(), &held.column(c).numeric()).unwrap();
        pass &= ks.p_value > 0.01;
        ks_parts.push(format!("{} p {:.3}", held.schema().columns()[c].name, ks.p_value));
    }
    outcome(
        pass,
        format!(
            "held-out joint {joint:.3} vs independence {base:.3} nats/row (gain {:.3}); KS {}",
            joint - base,
            ks_parts.join(", ")
        ),
    )
}

/// Criterion 6: quantized flow on hypergeometric data.
fn discrete_pipeline() -> Outcome {
    let truth = Hypergeometric::new(20, 7, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cdf: Vec<f64> = (0..=7u64)
        .scan(0.0, |acc, k| {
            *acc += truth.pmf(k);
            Some(*acc)
        })
        .collect();
    let draws: Vec<u64> = (0..20_000)
        .map(|_| {
            let u: f64 = rng.random();
            cdf.iter().position(|&c| u <= c).unwrap_or(7) as u64
        })
        .collect();
    let support: Vec<String> = (0..=7).map(|k: u64| k.to_string()).collect();
    let codec = build_codec(&support, CodecKind::Ordinal).unwrap();
    let codes: Vec<usize> = draws.iter().map(|d| codec.encode(&d.to_string()).unwrap()).collect();
    let (flow, _) = fit_discrete("x", &codec, &codes, &DiscreteConfig::default()).unwrap();

    let tv = 0.5 * (0..8).map(|k| (flow.pmf(k).unwrap() - truth.pmf(k as u64)).abs()).sum::<f64>();
    let transformed: Vec<f64> = codes.iter().map(|&k| flow.dist_transform(k, rng.random()).unwrap()).collect();
    let fresh: Vec<f64> = (0..transformed.len()).map(|_| rng.random()).collect();
    let ks = ks_two_sample(&transformed, &fresh).unwrap();
    let mut identity_failures = 0;
    for k in 0..8 {
        for i in 1..=1000 {
            let u = flow.dist_transform(k, i as f64 / 1000.0).unwrap();
            if flow.sample_code(u) != k {
                identity_failures += 1;
            }
        }
    }
    outcome(
        tv <= 0.02 && ks.p_value > 0.01 && identity_failures == 0,
        format!(
            "TV {tv:.4}, transform KS p {:.3}, sample_code(dist_transform) mismatches {identity_failures}/8000",
            ks.p_value
        ),
    )
}

/// Criterion 7: pairwise regression slopes of synthetic against real mixed-vine rows.
fn mixed_vine_slopes() -> Outcome {
    let (_, real, _) = fixture("mixed-vine", 20_000, 7).unwrap();
    let (model, _) = train_pipeline(&real, &desk_config(7)).unwrap();
    let synth = model.generate(20_000, 8).unwrap();
    let names: Vec<&str> = real.schema().names().collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for a in 0..3 {
        for b in a + 1..3 {
            let slope = |d: &Dataset| least_squares_line(&d.column(a).numeric(), &d.column(b).numeric()).unwrap().slope;
            let (r, s) = (slope(&real), slope(&synth));
            pass &= (r - s).abs() <= 0.1;
            parts.push(format!("{} on {}: real {r:.3}, synthetic {s:.3}", names[b], names[a]));
        }
    }
    outcome(pass, parts.join("; "))
}

fn brute_force_ks(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |s: &[f64], t: f64| s.iter().filter(|&&v| v <= t).count() as f64 / s.len() as f64;
    a.iter().chain(b).map(|&t| (ecdf(a, t) - ecdf(b, t)).abs()).fold(0.0, f64::max)
}

/// Criterion 8: KS statistic against the quadratic-time oracle.
fn ks_implementation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    let cases = 200;
    for case in 0..cases {
        let (n1, n2) = (rng.random_range(2..=1000), rng.random_range(2..=1000));
        let mut draw = |n: usize| -> Vec<f64> {
            if case % 2 == 0 {
                (0..n).map(|_| rng.random_range(0..40) as f64).collect()
            } else {
                let shift = rng.random_range(0.0..0.3);
                (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng) + shift).collect::<Vec<f64>>()
            }
        };
        let (a, b) = (draw(n1), draw(n2));
        if ks_two_sample(&a, &b).unwrap().statistic != brute_force_ks(&a, &b) {
            mismatches += 1;
        }
    }
    let a: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    let same = ks_two_sample(&a, &a).unwrap();
    let disjoint = ks_two_sample(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]).unwrap();
    outcome(
        mismatches == 0 && (same.statistic, same.p_value) == (0.0, 1.0) && disjoint.statistic == 1.0,
        format!(
            "{mismatches}/{cases} mismatches; a = b gives ({}, {}); disjoint gives D = {}",
            same.statistic, same.p_value, disjoint.statistic
        ),
    )
}

/// Criterion 9: each conditioner output depends exactly on earlier dimensions.
fn mask_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut leaks, mut missing, mut checks) = (0, 0, 0);
    for &dim in &[2usize, 3, 5, 8] {
        let template = build_copula_flow(dim, &[16, 16], 4, 4, dim as u64).unwrap();
        let params: Vec<f64> = (0..template.params().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let stack = CopulaFlowStack::from_params(template.architecture().clone(), params).unwrap();
        let per_dim = stack.architecture().params_per_dim();
        for (l, layer) in stack.layers().iter().enumerate() {
            let order = layer.conditioner().order();
            let y: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..0.95)).collect();
            let base = stack.conditioner_output(l, &y).unwrap();
            for j in 0..dim {
                let mut moved = y.clone();
                moved[j] = 1.0 - y[j] * 0.5;
                let out = stack.conditioner_output(l, &moved).unwrap();
                for k in 0..dim {
                    let range = k * per_dim..(k + 1) * per_dim;
                    let changed = out[range.clone()].iter().zip(&base[range]).any(|(a, b)| a.to_bits() != b.to_bits());
                    checks += 1;
                    if order[j] >= order[k] && changed {
                        leaks += 1;
                    }
                    if order[j] < order[k] && !changed {
                        missing += 1;
                    }
                }
            }
        }
    }
    outcome(
        leaks == 0 && missing == 0,
        format!("{checks} (layer, input, output) pairs: {leaks} forbidden dependencies, {missing} absent allowed ones"),
    )
}

/// Criterion 10: a saved and reloaded model behaves bitwise identically.
fn serialization() -> Outcome {
    let (_, data, _) = fixture("mixed-vine", 2000, 10).unwrap();
    let (model, _) = train_pipeline(&data, &quick_config(10)).unwrap();
    let loaded = from_bytes(&to_bytes(&model).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut density_diffs = 0;
    for _ in 0..100 {
        let row = vec![
            Cell::Real(rng.random_range(-0.5..4.0)),
            Cell::Code(rng.random_range(0..8)),
            Cell::Real(rng.random_range(-0.5..12.0)),
        ];
        if model.joint_logdensity(&row).unwrap().to_bits() != loaded.joint_logdensity(&row).unwrap().to_bits() {
            density_diffs += 1;
        }
    }
    let mut sample_diffs = 0;
    for _ in 0..100 {
        let seed = rng.random();
        if model.generate(20, seed).unwrap() != loaded.generate(20, seed).unwrap() {
            sample_diffs += 1;
        }
    }
    outcome(
        density_diffs == 0 && sample_diffs == 0,
        format!("100 rows: {density_diffs} density differences; 100 seeds: {sample_diffs} sample differences"),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "spline correctness", spline_correctness),
        (2, "gradient suite", gradient_suite),
        (3, "likelihood decomposition", likelihood_decomposition),
        (4, "copula oracle", copula_oracle),
        (5, "two-rings", two_rings),
        (6, "discrete pipeline", discrete_pipeline),
        (7, "mixed-vine slopes", mixed_vine_slopes),
        (8, "KS implementation", ks_implementation),
        (9, "mask correctness", mask_correctness),
        (10, "serialization", serialization),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!result.pass);
        println!(
            "criterion {n:>2} {name}: {} ({}; total {:.1}s)",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if only.as_ref().is_none_or(|o| o.contains(&11)) {
        println!("criterion 11 UCI Power reference: SKIP (reference-only; needs the external benchmark data)");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
