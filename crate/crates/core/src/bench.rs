//! Seeded synthetic fixtures: bivariate parametric copulas, two rings, and a
//! three-variable mixed vine.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Discrete, Hypergeometric, Normal};

use crate::data::{Column, ColumnKind, ColumnSpec, Dataset, Schema};
use crate::discrete::{build_codec, CodecKind};
use crate::error::{Error, Result};

const EDGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopulaFamily {
    Gaussian,
    Clayton,
    Gumbel,
    Frank,
    Independence,
}

/// A bivariate parametric copula: `rho` for Gaussian, `theta` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopulaSpec {
    family: CopulaFamily,
    parameter: f64,
}

impl CopulaSpec {
    pub fn new(family: CopulaFamily, parameter: f64) -> Result<Self> {
        let ok = match family {
            CopulaFamily::Gaussian => parameter > -1.0 && parameter < 1.0,
            CopulaFamily::Clayton => parameter > 0.0 && parameter.is_finite(),
            CopulaFamily::Gumbel => parameter >= 1.0 && parameter.is_finite(),
            CopulaFamily::Frank => parameter != 0.0 && parameter.is_finite(),
            CopulaFamily::Independence => true,
        };
        if !ok {
            return Err(Error::Argument(format!(
                "parameter {parameter} is invalid for a {family:?} copula"
            )));
        }
        Ok(Self { family, parameter })
    }

    pub fn independence() -> Self {
        Self {
            family: CopulaFamily::Independence,
            parameter: 0.0,
        }
    }

    pub fn family(&self) -> CopulaFamily {
        self.family
    }

    pub fn parameter(&self) -> f64 {
        self.parameter
    }

    /// Closed-form Kendall's tau.
    pub fn kendall_tau(&self) -> f64 {
        let t = self.parameter;
        match self.family {
            CopulaFamily::Gaussian => 2.0 / PI * t.asin(),
            CopulaFamily::Clayton => t / (t + 2.0),
            CopulaFamily::Gumbel => 1.0 - 1.0 / t,
            CopulaFamily::Frank => 1.0 - 4.0 / t * (1.0 - debye1(t)),
            CopulaFamily::Independence => 0.0,
        }
    }

    /// Conditional CDF `P(V <= v | U = u)`.
    pub fn h(&self, v: f64, u: f64) -> f64 {
        let u = u.clamp(EDGE, 1.0 - EDGE);
        let v = v.clamp(EDGE, 1.0 - EDGE);
        let t = self.parameter;
        match self.family {
            CopulaFamily::Independence => v,
            CopulaFamily::Gaussian => {
                let n = std_normal();
                n.cdf((n.inverse_cdf(v) - t * n.inverse_cdf(u)) / (1.0 - t * t).sqrt())
            }
            CopulaFamily::Clayton => {
                (u.powf(-t) + v.powf(-t) - 1.0).powf(-1.0 / t - 1.0) * u.powf(-t - 1.0)
            }
            CopulaFamily::Frank => {
                let (eu, ev, e1) = ((-t * u).exp_m1(), (-t * v).exp_m1(), (-t).exp_m1());
                (eu + 1.0) * ev / (e1 + eu * ev)
            }
            CopulaFamily::Gumbel => {
                let (x, y) = (-u.ln(), -v.ln());
                let a = (x.powf(t) + y.powf(t)).powf(1.0 / t);
                (-a).exp() / u * x.powf(t - 1.0) * a.powf(1.0 - t)
            }
        }
    }

    /// Inverse of [`Self::h`] in `v`.
    pub fn h_inverse(&self, w: f64, u: f64) -> f64 {
        let u = u.clamp(EDGE, 1.0 - EDGE);
        let w = w.clamp(EDGE, 1.0 - EDGE);
        let t = self.parameter;
        let v = match self.family {
            CopulaFamily::Independence => w,
            CopulaFamily::Gaussian => {
                let n = std_normal();
                n.cdf(n.inverse_cdf(w) * (1.0 - t * t).sqrt() + t * n.inverse_cdf(u))
            }
            CopulaFamily::Clayton => {
                ((w.powf(-t / (1.0 + t)) - 1.0) * u.powf(-t) + 1.0).powf(-1.0 / t)
            }
            CopulaFamily::Frank => {
                let eu = (-t * u).exp();
                -(w * (-t).exp_m1() / (w + (1.0 - w) * eu)).ln_1p() / t
            }
            CopulaFamily::Gumbel => {
                // h is increasing in v; bisect to machine precision.
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if self.h(mid, u) < w {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        };
        v.clamp(0.0, 1.0)
    }
}

impl std::str::FromStr for CopulaSpec {
    type Err = Error;

    /// Parses `family:parameter`, e.g. `clayton:2.0`, or `independence`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let family = match name {
            "gaussian" => CopulaFamily::Gaussian,
            "clayton" => CopulaFamily::Clayton,
            "gumbel" => CopulaFamily::Gumbel,
            "frank" => CopulaFamily::Frank,
            "independence" => CopulaFamily::Independence,
            other => return Err(Error::Argument(format!("unknown copula family `{other}`"))),
        };
        let parameter = match (family, param) {
            (CopulaFamily::Independence, None) => 0.0,
            (_, Some(p)) => p
                .parse()
                .map_err(|_| Error::Argument(format!("copula parameter `{p}` is not a number")))?,
            (_, None) => return Err(Error::Argument(format!("copula `{name}` needs a parameter"))),
        };
        CopulaSpec::new(family, parameter)
    }
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// First Debye function `(1/x) ∫_0^x t / (e^t - 1) dt`, by Simpson's rule.
fn debye1(x: f64) -> f64 {
    let f = |t: f64| if t == 0.0 { 1.0 } else { t / t.exp_m1() };
    let n = 2000;
    let h = x / n as f64;
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 / x
}

/// Closed-form log copula density. Inputs are clamped to `[1e-12, 1 - 1e-12]`.
pub fn copula_logdensity_analytic(spec: &CopulaSpec, u: f64, v: f64) -> f64 {
    let u = u.clamp(EDGE, 1.0 - EDGE);
    let v = v.clamp(EDGE, 1.0 - EDGE);
    let t = spec.parameter;
    match spec.family {
        CopulaFamily::Independence => 0.0,
        CopulaFamily::Gaussian => {
            let n = std_normal();
            let (x, y) = (n.inverse_cdf(u), n.inverse_cdf(v));
            let r2 = 1.0 - t * t;
            -0.5 * r2.ln() - (t * t * (x * x + y * y) - 2.0 * t * x * y) / (2.0 * r2)
        }
        CopulaFamily::Clayton => {
            (1.0 + t).ln() - (1.0 + t) * (u.ln() + v.ln())
                - (2.0 + 1.0 / t) * (u.powf(-t) + v.powf(-t) - 1.0).ln()
        }
        CopulaFamily::Frank => {
            let (gu, gv, g1) = ((-t * u).exp_m1(), (-t * v).exp_m1(), (-t).exp_m1());
            let guv = (-t * (u + v)).exp_m1();
            (-t * g1 * (1.0 + guv)).ln() - 2.0 * (gu * gv + g1).abs().ln()
        }
        CopulaFamily::Gumbel => {
            let (x, y) = (-u.ln(), -v.ln());
            let a = (x.powf(t) + y.powf(t)).powf(1.0 / t);
            -a + (t - 1.0) * (x.ln() + y.ln()) + x + y + (1.0 - 2.0 * t) * a.ln() + (a + t - 1.0).ln()
        }
    }
}

/// Exact samples as a row-major `n x 2` matrix, by the conditional method.
pub fn sample_bivariate_copula(spec: &CopulaSpec, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        if spec.family == CopulaFamily::Gaussian {
            let nrm = std_normal();
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let y = spec.parameter * z1 + (1.0 - spec.parameter.powi(2)).sqrt() * z2;
            out.extend([nrm.cdf(z1), nrm.cdf(y)]);
        } else {
            let u: f64 = rng.random();
            let w: f64 = rng.random();
            out.extend([u, spec.h_inverse(w, u)]);
        }
    }
    out
}

/// Two noisy concentric circles (radii 1 and 2, radial noise 0.1), row-major `n x 2`.
pub fn gen_two_rings(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let radius = if rng.random_bool(0.5) { 1.0 } else { 2.0 };
        let noise: f64 = rng.sample(StandardNormal);
        let r = radius + 0.1 * noise;
        let angle = rng.random::<f64>() * 2.0 * PI;
        out.extend([r * angle.cos(), r * angle.sin()]);
    }
    out
}

/// Parameters of the mixed-vine fixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedVineParams {
    pub rho_12: f64,
    pub theta_23: f64,
    pub theta_13_given_2: f64,
}

impl Default for MixedVineParams {
    fn default() -> Self {
        Self {
            rho_12: 0.7,
            theta_23: 2.0,
            theta_13_given_2: 2.0,
        }
    }
}

/// Columns of the mixed vine: half-normal reals, hypergeometric counts, gamma reals.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedVineSample {
    pub x1: Vec<f64>,
    pub x2: Vec<u64>,
    pub x3: Vec<f64>,
}

/// Inverse CDF table of the hypergeometric(20, 7, 12) count.
fn hypergeometric_cdf() -> Vec<f64> {
    let dist = Hypergeometric::new(20, 7, 12).expect("valid hypergeometric");
    let mut acc = 0.0;
    (0..=7u64)
        .map(|k| {
            acc += dist.pmf(k);
            acc
        })
        .collect()
}

/// Gamma(2, 1) quantile by Newton's method on `F(x) = 1 - e^{-x}(1 + x)`.
fn gamma2_quantile(p: f64) -> f64 {
    let p = p.clamp(EDGE, 1.0 - EDGE);
    let mut x: f64 = 1.678; // the median
    for _ in 0..100 {
        let f = 1.0 - (-x).exp() * (1.0 + x) - p;
        let pdf = x * (-x).exp();
        let step = f / pdf;
        let next = (x - step).max(x / 10.0);
        if (next - x).abs() <= 1e-15 * x.max(1.0) {
            return next;
        }
        x = next;
    }
    x
}

/// Samples the D-vine X1 - X2 - X3 with a Gaussian pair for (X1, X2), a
/// Clayton pair for (X2, X3) and a Gumbel pair for (X1, X3 | X2).
pub fn gen_mixed_vine(n: usize, seed: u64, params: MixedVineParams) -> Result<MixedVineSample> {
    let c12 = CopulaSpec::new(CopulaFamily::Gaussian, params.rho_12)?;
    let c23 = CopulaSpec::new(CopulaFamily::Clayton, params.theta_23)?;
    let c13 = CopulaSpec::new(CopulaFamily::Gumbel, params.theta_13_given_2)?;
    let normal = std_normal();
    let table = hypergeometric_cdf();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MixedVineSample {
        x1: Vec::with_capacity(n),
        x2: Vec::with_capacity(n),
        x3: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let w: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let u2 = w[0];
        let u1 = c12.h_inverse(w[1], u2);
        // Pair (1, 3) conditioned on 2, then back through the (2, 3) pair.
        let a = c12.h(u1, u2);
        let b = c13.h_inverse(w[2], a);
        let u3 = c23.h_inverse(b, u2);

        out.x1.push(normal.inverse_cdf(0.5 * (1.0 + u1.min(1.0 - EDGE))));
        out.x2.push(table.iter().position(|&c| c >= u2).unwrap_or(7) as u64);
        out.x3.push(gamma2_quantile(u3));
    }
    Ok(out)
}

fn uniform_schema() -> Result<Schema> {
    Schema::new(vec![
        ColumnSpec::new("u1", ColumnKind::Continuous),
        ColumnSpec::new("u2", ColumnKind::Continuous),
    ])
}

/// A named fixture as a schema and dataset: `two-rings`, `mixed-vine` or
/// `copula:FAMILY:PARAM`.
pub fn fixture(name: &str, n: usize, seed: u64) -> Result<(Schema, Dataset, String)> {
    let split = |flat: Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        (flat.iter().step_by(2).copied().collect(), flat.iter().skip(1).step_by(2).copied().collect())
    };
    match name {
        "two-rings" => {
            let schema = Schema::new(vec![
                ColumnSpec::new("x", ColumnKind::Continuous),
                ColumnSpec::new("y", ColumnKind::Continuous),
            ])?;
            let (x, y) = split(gen_two_rings(n, seed));
            let data = Dataset::new(schema.clone(), vec![Column::Continuous(x), Column::Continuous(y)])?;
            Ok((schema, data, "two rings: radii 1 and 2, radial noise sd 0.1".into()))
        }
        "mixed-vine" => {
            let schema = Schema::new(vec![
                ColumnSpec::new("x1", ColumnKind::Continuous),
                ColumnSpec::new("x2", ColumnKind::Ordinal),
                ColumnSpec::new("x3", ColumnKind::Continuous),
            ])?;
            let s = gen_mixed_vine(n, seed, MixedVineParams::default())?;
            let labels: Vec<String> = s.x2.iter().map(u64::to_string).collect();
            let support: Vec<String> = (0..=7).map(|k: u64| k.to_string()).collect();
            let codec = build_codec(&support, CodecKind::Ordinal)?;
            let codes = labels.iter().map(|l| codec.encode(l)).collect::<Result<_>>()?;
            let data = Dataset::new(
                schema.clone(),
                vec![
                    Column::Continuous(s.x1),
                    Column::Discrete { codes, codec },
                    Column::Continuous(s.x3),
                ],
            )?;
            let p = MixedVineParams::default();
            Ok((
                schema,
                data,
                format!(
                    "mixed vine X1-X2-X3: half-normal, hypergeometric(20, 7, 12), gamma(2, 1); \
                     gaussian rho={} (X1,X2), clayton theta={} (X2,X3), gumbel theta={} (X1,X3|X2)",
                    p.rho_12, p.theta_23, p.theta_13_given_2
                ),
            ))
        }
        _ => {
            let spec: CopulaSpec = name
                .strip_prefix("copula:")
                .ok_or_else(|| Error::Argument(format!("unknown fixture `{name}`")))?
                .parse()?;
            let schema = uniform_schema()?;
            let (u, v) = split(sample_bivariate_copula(&spec, n, seed));
            let data = Dataset::new(schema.clone(), vec![Column::Continuous(u), Column::Continuous(v)])?;
            Ok((
                schema,
                data,
                format!("{:?} copula with parameter {}", spec.family, spec.parameter),
            ))
        }
    }
}
