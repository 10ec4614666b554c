//! Two-stage fitting pipeline and the composed joint model.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copula::{build_copula_flow, fit_copula, CopulaConfig, CopulaFlowStack};
use crate::data::{Cell, Column, Dataset, Schema};
use crate::diff::EpochRecord;
use crate::discrete::{fit_discrete, CategoryCodec, DiscreteConfig, DiscreteMarginalFlow};
use crate::error::{Error, Result};
use crate::marginal::{fit_marginal, MarginalConfig, MarginalFlowModel};

/// Auxiliary uniform used for discrete columns when reporting densities.
pub const EVAL_V: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Validation fraction used by every stage.
    pub val_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

/// Pipeline configuration. Stage `seed` and `val_fraction` fields are
/// overwritten from `[training]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub training: TrainingConfig,
    pub marginal: MarginalConfig,
    pub discrete: DiscreteConfig,
    pub copula: CopulaConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.training.val_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("val_fraction {f} must lie in (0, 1)")));
        }
        self.seeded(&StageSeeds::derive(self.training.seed, 0)).check()
    }

    fn check(&self) -> Result<()> {
        self.marginal.validate()?;
        self.discrete.validate()?;
        self.copula.validate()
    }

    /// Copy with stage seeds and validation fractions filled in.
    fn seeded(&self, seeds: &StageSeeds) -> Self {
        let mut c = self.clone();
        c.marginal.val_fraction = self.training.val_fraction;
        c.discrete.val_fraction = self.training.val_fraction;
        c.copula.val_fraction = self.training.val_fraction;
        c.copula.seed = seeds.copula;
        c
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of stage `tag`, sub-index `index`, derived from a master seed.
pub fn stage_seed(master: u64, tag: &str, index: u64) -> u64 {
    let t = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    splitmix64(splitmix64(master ^ t) ^ index)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub marginals: Vec<u64>,
    /// Seed of the auxiliary uniforms used to transform discrete training columns.
    pub v: u64,
    pub copula: u64,
}

impl StageSeeds {
    pub fn derive(master: u64, n_columns: usize) -> Self {
        Self {
            marginals: (0..n_columns as u64).map(|i| stage_seed(master, "marginal", i)).collect(),
            v: stage_seed(master, "v", 0),
            copula: stage_seed(master, "copula", 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub crate_version: String,
    pub seeds: StageSeeds,
    pub config: TrainConfig,
    pub n_rows: usize,
}

/// Marginal model of one column.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnModel {
    Continuous(MarginalFlowModel),
    Discrete(DiscreteMarginalFlow),
}

impl ColumnModel {
    pub fn column_id(&self) -> &str {
        match self {
            ColumnModel::Continuous(m) => m.column_id(),
            ColumnModel::Discrete(m) => m.column_id(),
        }
    }

    pub fn codec(&self) -> Option<&CategoryCodec> {
        match self {
            ColumnModel::Continuous(_) => None,
            ColumnModel::Discrete(m) => Some(m.codec()),
        }
    }

    /// Uniform level of a cell; `v` places discrete values inside their cell.
    pub fn to_uniform(&self, cell: Cell, v: f64) -> Result<f64> {
        match (self, cell) {
            (ColumnModel::Continuous(m), Cell::Real(x)) => Ok(m.cdf(x)),
            (ColumnModel::Discrete(m), Cell::Code(k)) => m.dist_transform(k, v),
            _ => Err(Error::Data(format!("cell kind does not match column `{}`", self.column_id()))),
        }
    }

    /// Log-density (continuous) or log-probability (discrete) of a cell.
    pub fn log_marginal(&self, cell: Cell) -> Result<f64> {
        match (self, cell) {
            (ColumnModel::Continuous(m), Cell::Real(x)) => Ok(m.logpdf(x)),
            (ColumnModel::Discrete(m), Cell::Code(k)) => m.log_pmf(k),
            _ => Err(Error::Data(format!("cell kind does not match column `{}`", self.column_id()))),
        }
    }

    pub fn from_uniform(&self, u: f64) -> Result<Cell> {
        match self {
            ColumnModel::Continuous(m) => Ok(Cell::Real(m.quantile(u)?)),
            ColumnModel::Discrete(m) => Ok(Cell::Code(m.sample_code(u))),
        }
    }

    fn saturation_count(&self) -> u64 {
        match self {
            ColumnModel::Continuous(m) => m.saturation_count(),
            ColumnModel::Discrete(_) => 0,
        }
    }
}

/// Per-row log-density split into its copula and marginal parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub copula: f64,
    pub marginals: Vec<f64>,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.copula + self.marginals.iter().sum::<f64>()
    }
}

/// Mean log-likelihood in nats per row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoglikReport {
    pub total: f64,
    pub copula_term: f64,
    pub marginal_terms: Vec<(String, f64)>,
    pub n_rows: usize,
}

/// Training curve of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub stage: String,
    pub records: Vec<EpochRecord>,
}

/// Schema, per-column marginals and the copula over their uniform levels.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    schema: Schema,
    marginals: Vec<ColumnModel>,
    /// Absent for single-column schemas and for the independence baseline.
    copula: Option<CopulaFlowStack>,
    metadata: FitMetadata,
}

impl FittedModel {
    pub fn new(
        schema: Schema,
        marginals: Vec<ColumnModel>,
        copula: Option<CopulaFlowStack>,
        metadata: FitMetadata,
    ) -> Result<Self> {
        if marginals.len() != schema.len() {
            return Err(Error::Data(format!(
                "{} marginals for a schema of {} columns",
                marginals.len(),
                schema.len()
            )));
        }
        for (spec, m) in schema.columns().iter().zip(&marginals) {
            let ok = match m {
                ColumnModel::Continuous(_) => !spec.kind.is_discrete(),
                ColumnModel::Discrete(d) => spec.kind.codec_kind() == Some(d.codec().kind()),
            };
            if !ok || m.column_id() != spec.name {
                return Err(Error::Data(format!("marginal for `{}` does not match the schema", spec.name)));
            }
        }
        if let Some(c) = &copula {
            if c.dim() != schema.len() {
                return Err(Error::Data(format!(
                    "copula dimension {} differs from column count {}",
                    c.dim(),
                    schema.len()
                )));
            }
        }
        Ok(Self {
            schema,
            marginals,
            copula,
            metadata,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn marginals(&self) -> &[ColumnModel] {
        &self.marginals
    }

    pub fn copula(&self) -> Option<&CopulaFlowStack> {
        self.copula.as_ref()
    }

    pub fn metadata(&self) -> &FitMetadata {
        &self.metadata
    }

    pub fn codecs(&self) -> Vec<Option<CategoryCodec>> {
        self.marginals.iter().map(|m| m.codec().cloned()).collect()
    }

    /// Clamped evaluations recorded by the marginals and the copula.
    pub fn saturation_count(&self) -> u64 {
        self.marginals.iter().map(ColumnModel::saturation_count).sum::<u64>()
            + self.copula.as_ref().map_or(0, CopulaFlowStack::saturation_count)
    }

    /// The same marginals joined by the independence copula.
    pub fn independence_baseline(&self) -> Self {
        Self {
            copula: None,
            ..self.clone()
        }
    }

    /// Replaces the marginal of column `index`, keeping the copula.
    pub fn replace_marginal(&self, index: usize, marginal: ColumnModel) -> Result<Self> {
        let mut marginals = self.marginals.clone();
        *marginals
            .get_mut(index)
            .ok_or_else(|| Error::Argument(format!("no column {index}")))? = marginal;
        Self::new(self.schema.clone(), marginals, self.copula.clone(), self.metadata.clone())
    }

    fn check_row(&self, row: &[Cell]) -> Result<()> {
        if row.len() != self.schema.len() {
            return Err(Error::Data(format!("row has {} cells, expected {}", row.len(), self.schema.len())));
        }
        Ok(())
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.schema() != &self.schema {
            return Err(Error::Data("dataset schema differs from the model schema".into()));
        }
        if data.codecs() != self.codecs() {
            return Err(Error::Data("dataset class codes differ from the model's; load it with the model codecs".into()));
        }
        Ok(())
    }

    /// Copula and marginal log terms of one row, discrete cells at `V = 0.5`.
    pub fn decompose(&self, row: &[Cell]) -> Result<Decomposition> {
        self.check_row(row)?;
        let mut u = Vec::with_capacity(row.len());
        let mut marginals = Vec::with_capacity(row.len());
        for ((m, &cell), spec) in self.marginals.iter().zip(row).zip(self.schema.columns()) {
            u.push(m.to_uniform(cell, EVAL_V).map_err(|e| e.in_column(&spec.name))?);
            marginals.push(m.log_marginal(cell).map_err(|e| e.in_column(&spec.name))?);
        }
        let copula = match &self.copula {
            Some(c) => c.logdensity(&u)?,
            None => 0.0,
        };
        Ok(Decomposition { copula, marginals })
    }

    /// Joint log-density of a row: copula term plus marginal terms.
    pub fn joint_logdensity(&self, row: &[Cell]) -> Result<f64> {
        Ok(self.decompose(row)?.total())
    }

    /// Row-major uniform levels of a dataset. Discrete columns draw their
    /// auxiliary uniforms from `v_seed`, row by row.
    pub fn uniform_matrix(&self, data: &Dataset, v_seed: u64) -> Result<Vec<f64>> {
        self.check_dataset(data)?;
        uniform_levels(&self.marginals, data, |rng| rng.random(), v_seed)
    }

    /// Mean per-row decomposition over a dataset.
    pub fn loglik_report(&self, data: &Dataset) -> Result<LoglikReport> {
        self.check_dataset(data)?;
        let n = data.n_rows();
        if n == 0 {
            return Err(Error::Data("cannot report the likelihood of an empty dataset".into()));
        }
        let u = uniform_levels(&self.marginals, data, |_| EVAL_V, 0)?;
        let copula_term = match &self.copula {
            Some(c) => c.logdensity_rows(&u)?.iter().sum::<f64>() / n as f64,
            None => 0.0,
        };
        let marginal_terms = self
            .marginals
            .par_iter()
            .zip(data.columns())
            .map(|(m, col)| {
                let s = (0..n)
                    .map(|r| m.log_marginal(col.cell(r)))
                    .sum::<Result<f64>>()
                    .map_err(|e| e.in_column(m.column_id()))?;
                Ok((m.column_id().to_string(), s / n as f64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LoglikReport {
            total: copula_term + marginal_terms.iter().map(|t| t.1).sum::<f64>(),
            copula_term,
            marginal_terms,
            n_rows: n,
        })
    }

    /// Synthetic rows: copula samples pushed through the marginal quantiles.
    pub fn generate(&self, n_rows: usize, seed: u64) -> Result<Dataset> {
        let d = self.schema.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..n_rows * d).map(|_| rng.random()).collect();
        let u = match &self.copula {
            Some(c) if n_rows > 0 => c.sample_rows(&noise)?,
            _ => noise,
        };
        let columns = self
            .marginals
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let cells = u.iter().skip(j).step_by(d).map(|&v| m.from_uniform(v));
                Ok(match m {
                    ColumnModel::Continuous(_) => Column::Continuous(
                        cells
                            .map(|c| match c? {
                                Cell::Real(x) => Ok(x),
                                Cell::Code(_) => unreachable!("continuous marginal yields reals"),
                            })
                            .collect::<Result<_>>()?,
                    ),
                    ColumnModel::Discrete(dm) => Column::Discrete {
                        codes: cells
                            .map(|c| match c? {
                                Cell::Code(k) => Ok(k),
                                Cell::Real(_) => unreachable!("discrete marginal yields codes"),
                            })
                            .collect::<Result<_>>()?,
                        codec: dm.codec().clone(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.schema.clone(), columns)
    }
}

fn uniform_levels(
    marginals: &[ColumnModel],
    data: &Dataset,
    mut v: impl FnMut(&mut ChaCha8Rng) -> f64,
    v_seed: u64,
) -> Result<Vec<f64>> {
    let (n, d) = (data.n_rows(), data.n_cols());
    let mut rng = ChaCha8Rng::seed_from_u64(v_seed);
    let mut out = vec![0.0; n * d];
    for r in 0..n {
        for (j, (m, col)) in marginals.iter().zip(data.columns()).enumerate() {
            let aux = if matches!(m, ColumnModel::Discrete(_)) { v(&mut rng) } else { 0.0 };
            out[r * d + j] = m.to_uniform(col.cell(r), aux).map_err(|e| e.in_column(m.column_id()))?;
        }
    }
    Ok(out)
}

fn fit_column(spec: &crate::data::ColumnSpec, col: &Column, seed: u64, config: &TrainConfig) -> Result<(ColumnModel, Vec<EpochRecord>)> {
    match col {
        Column::Continuous(x) => {
            let cfg = MarginalConfig {
                seed,
                ..config.marginal.clone()
            };
            let (m, trace) = fit_marginal(&spec.name, x, spec.bounds, &cfg)?;
            Ok((ColumnModel::Continuous(m), trace))
        }
        Column::Discrete { codes, codec } => {
            let cfg = DiscreteConfig {
                seed,
                ..config.discrete.clone()
            };
            let (m, trace) = fit_discrete(&spec.name, codec, codes, &cfg)?;
            Ok((ColumnModel::Discrete(m), trace))
        }
    }
}

/// Fits every marginal, maps the data to uniform levels, then fits the copula.
pub fn train_pipeline(data: &Dataset, config: &TrainConfig) -> Result<(FittedModel, Vec<StageTrace>)> {
    config.validate()?;
    let schema = data.schema().clone();
    let seeds = StageSeeds::derive(config.training.seed, schema.len());
    let config = config.seeded(&seeds);

    log::info!("stage 1: fitting {} marginal flows", schema.len());
    let fitted = schema
        .columns()
        .par_iter()
        .zip(data.columns())
        .zip(&seeds.marginals)
        .map(|((spec, col), &seed)| fit_column(spec, col, seed, &config).map_err(|e| e.in_column(&spec.name)))
        .collect::<Result<Vec<_>>>()?;
    let mut traces = Vec::with_capacity(schema.len() + 1);
    let mut marginals = Vec::with_capacity(schema.len());
    for (spec, (m, records)) in schema.columns().iter().zip(fitted) {
        log::info!(
            "stage 1: `{}` done, final val nll {:.4}",
            spec.name,
            records.last().map_or(f64::NAN, |r| r.val_nll)
        );
        traces.push(StageTrace {
            stage: format!("marginal:{}", spec.name),
            records,
        });
        marginals.push(m);
    }

    let metadata = FitMetadata {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: seeds.clone(),
        config: config.clone(),
        n_rows: data.n_rows(),
    };
    let mut model = FittedModel::new(schema, marginals, None, metadata)?;
    if model.schema.len() < 2 {
        log::info!("stage 2: skipped, a single column has no copula");
        return Ok((model, traces));
    }

    log::info!("stage 2: mapping {} rows to uniform marginals", data.n_rows());
    let u = model.uniform_matrix(data, seeds.v)?;
    let c = &config.copula;
    log::info!("stage 2: fitting copula flow ({} layers, hidden {:?})", c.n_layers, c.hidden_sizes);
    let init = build_copula_flow(model.schema.len(), &c.hidden_sizes, c.k_bins, c.n_layers, seeds.copula)?;
    let (copula, records) = fit_copula(&init, &u, c)?;
    traces.push(StageTrace {
        stage: "copula".into(),
        records,
    });
    model.copula = Some(copula);
    Ok((model, traces))
}

/// Writes `stage,epoch,train_nll,val_nll` rows.
pub fn write_trace_csv(traces: &[StageTrace], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stage", "epoch", "train_nll", "val_nll"])?;
    for t in traces {
        for r in &t.records {
            w.write_record([
                t.stage.clone(),
                r.epoch.to_string(),
                format!("{:?}", r.train_nll),
                format!("{:?}", r.val_nll),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    crate::data::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ColumnKind, ColumnSpec};
    use crate::discrete::{build_codec, CodecKind};
    use crate::spline::RawSplineParams;

    fn small_config(seed: u64) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.training.seed = seed;
        c.marginal = MarginalConfig {
            k_bins: 16,
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-2,
            ..MarginalConfig::default()
        };
        c.discrete.epochs = 100;
        c.copula = CopulaConfig {
            n_layers: 2,
            hidden_sizes: vec![16, 16],
            k_bins: 8,
            epochs: 5,
            batch_size: 256,
            learning_rate: 1e-3,
            ..CopulaConfig::default()
        };
        c
    }

    fn mixed_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
        let labels: Vec<String> = x
            .iter()
            .map(|v| ["lo", "mid", "hi"][((v + 1.0) + rng.random::<f64>()).floor().clamp(0.0, 2.0) as usize].to_string())
            .collect();
        let codec = build_codec(&labels, CodecKind::Categorical).unwrap();
        let codes = labels.iter().map(|l| codec.encode(l).unwrap()).collect();
        let schema = Schema::new(vec![
            ColumnSpec::new("x", ColumnKind::Continuous),
            ColumnSpec::new("c", ColumnKind::Categorical),
        ])
        .unwrap();
        Dataset::new(schema, vec![Column::Continuous(x), Column::Discrete { codes, codec }]).unwrap()
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let a = StageSeeds::derive(7, 3);
        assert_eq!(a, StageSeeds::derive(7, 3));
        assert_ne!(a, StageSeeds::derive(8, 3));
        let mut all = a.marginals.clone();
        all.extend([a.v, a.copula]);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 5);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = small_config(3);
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("[copula]\nn_layers = 3\n").unwrap();
        assert_eq!(partial.copula.n_layers, 3);
        assert_eq!(partial.marginal, MarginalConfig::default());
        assert!(matches!(TrainConfig::from_toml("[copula]\nlayers = 3\n"), Err(Error::Config(_))));
        assert!(TrainConfig::from_toml("[training]\nval_fraction = 1.5\n").is_err());
    }

    #[test]
    fn defaults_follow_the_synthetic_data_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.marginal.k_bins, c.marginal.epochs, c.marginal.batch_size), (512, 100, 1024));
        assert_eq!(c.marginal.learning_rate, 1e-3);
        assert_eq!((c.copula.n_layers, c.copula.k_bins, c.copula.batch_size), (10, 16, 512));
        assert_eq!(c.copula.hidden_sizes, vec![512, 512]);
        assert_eq!(c.copula.learning_rate, 1e-4);
    }

    #[test]
    fn decomposition_is_additive_and_reports_match_rows() {
        let data = mixed_dataset(600, 1);
        let (model, traces) = train_pipeline(&data, &small_config(1)).unwrap();
        assert_eq!(traces.len(), 3);
        assert_eq!(traces[2].stage, "copula");
        let report = model.loglik_report(&data).unwrap();
        let sum = report.copula_term + report.marginal_terms.iter().map(|t| t.1).sum::<f64>();
        assert!((report.total - sum).abs() <= 1e-9);
        let mut mean = 0.0;
        for r in 0..data.n_rows() {
            let row = data.row(r);
            let d = model.decompose(&row).unwrap();
            assert!((d.total() - model.joint_logdensity(&row).unwrap()).abs() <= 1e-12);
            mean += d.total();
        }
        assert!((mean / data.n_rows() as f64 - report.total).abs() <= 1e-9);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let data = mixed_dataset(300, 2);
        let (a, ta) = train_pipeline(&data, &small_config(5)).unwrap();
        let (b, tb) = train_pipeline(&data, &small_config(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.generate(50, 9).unwrap(), b.generate(50, 9).unwrap());
    }

    #[test]
    fn independence_baseline_has_zero_copula_term() {
        let data = mixed_dataset(300, 3);
        let (model, _) = train_pipeline(&data, &small_config(2)).unwrap();
        let base = model.independence_baseline();
        let report = base.loglik_report(&data).unwrap();
        assert_eq!(report.copula_term, 0.0);
        let row = data.row(0);
        let d = base.decompose(&row).unwrap();
        assert_eq!(d.total(), d.marginals.iter().sum::<f64>());
    }

    #[test]
    fn single_column_pipeline_has_no_copula() {
        let schema = Schema::new(vec![ColumnSpec::new("x", ColumnKind::Continuous)]).unwrap();
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let data = Dataset::new(schema, vec![Column::Continuous(x)]).unwrap();
        let (model, traces) = train_pipeline(&data, &small_config(0)).unwrap();
        assert!(model.copula().is_none());
        assert_eq!(traces.len(), 1);
        assert_eq!(model.generate(10, 0).unwrap().n_rows(), 10);
    }

    #[test]
    fn column_errors_name_the_column() {
        let schema = Schema::new(vec![
            ColumnSpec::new("ok", ColumnKind::Continuous),
            ColumnSpec::new("flat", ColumnKind::Continuous),
        ])
        .unwrap();
        let data = Dataset::new(
            schema,
            vec![Column::Continuous((0..50).map(f64::from).collect()), Column::Continuous(vec![1.0; 50])],
        )
        .unwrap();
        match train_pipeline(&data, &small_config(0)) {
            Err(Error::Column { column, source }) => {
                assert_eq!(column, "flat");
                assert!(matches!(*source, Error::Degenerate(_)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn marginal_replacement_keeps_the_copula_term() {
        let data = mixed_dataset(400, 4);
        let (model, _) = train_pipeline(&data, &small_config(4)).unwrap();
        let ColumnModel::Continuous(m) = &model.marginals()[0] else { unreachable!() };
        // Same spline stretched by x -> 2x + 1, with the data moved along.
        let (lo, hi) = m.params().bounds;
        let params = RawSplineParams {
            bounds: (2.0 * lo + 1.0, 2.0 * hi + 1.0),
            ..m.params().clone()
        };
        let swapped = model
            .replace_marginal(0, ColumnModel::Continuous(MarginalFlowModel::new("x", params).unwrap()))
            .unwrap();
        let Column::Continuous(x) = data.column(0) else { unreachable!() };
        let moved = Dataset::new(
            data.schema().clone(),
            vec![Column::Continuous(x.iter().map(|v| 2.0 * v + 1.0).collect()), data.column(1).clone()],
        )
        .unwrap();
        let before = model.loglik_report(&data).unwrap();
        let after = swapped.loglik_report(&moved).unwrap();
        assert!((before.copula_term - after.copula_term).abs() <= 1e-9);
        assert!((before.marginal_terms[0].1 - after.marginal_terms[0].1 - 2f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn generated_rows_conform_to_schema() {
        let data = mixed_dataset(300, 5);
        let (model, _) = train_pipeline(&data, &small_config(6)).unwrap();
        let g = model.generate(200, 1).unwrap();
        assert_eq!(g.schema(), data.schema());
        assert_eq!(g.codecs(), data.codecs());
        assert_eq!(model.generate(0, 1).unwrap().n_rows(), 0);
        let u = model.uniform_matrix(&g, 3).unwrap();
        assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mismatched_codecs_are_rejected() {
        let data = mixed_dataset(300, 6);
        let (model, _) = train_pipeline(&data, &small_config(0)).unwrap();
        let mut cols = data.columns().to_vec();
        let Column::Discrete { codes, .. } = &cols[1] else { unreachable!() };
        let other = CategoryCodec::from_classes(CodecKind::Categorical, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        cols[1] = Column::Discrete {
            codes: codes.clone(),
            codec: other,
        };
        let relabelled = Dataset::new(data.schema().clone(), cols).unwrap();
        assert!(matches!(model.loglik_report(&relabelled), Err(Error::Data(_))));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use std::sync::OnceLock;

        fn model() -> &'static FittedModel {
            static MODEL: OnceLock<FittedModel> = OnceLock::new();
            MODEL.get_or_init(|| train_pipeline(&mixed_dataset(600, 3), &small_config(3)).unwrap().0)
        }

        proptest! {
            #[test]
            fn joint_density_is_copula_plus_marginals(x in -3.0f64..4.0, code in 0usize..3) {
                let row = [Cell::Real(x), Cell::Code(code)];
                let d = model().decompose(&row).unwrap();
                let joint = model().joint_logdensity(&row).unwrap();
                prop_assert!((joint - d.total()).abs() <= 1e-9);
                prop_assert!((d.total() - (d.copula + d.marginals.iter().sum::<f64>())).abs() <= 1e-12);
            }

            #[test]
            fn generation_is_seed_deterministic(seed in any::<u64>(), n in 0usize..40) {
                let a = model().generate(n, seed).unwrap();
                prop_assert_eq!(a.n_rows(), n);
                prop_assert!(a == model().generate(n, seed).unwrap());
            }
        }
    }
}
