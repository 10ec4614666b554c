use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use copulaflow::bench::fixture;
use copulaflow::data::{load_csv, load_csv_with_codecs, save_csv, write_atomic, Dataset, Schema};
use copulaflow::eval::{emit_histogram, emit_scatter, ks_two_sample, ml_efficacy, ScatterSet};
use copulaflow::model_file::{load_model, save_model};
use copulaflow::trainer::{train_pipeline, write_trace_csv, FittedModel, LoglikReport, TrainConfig};
use copulaflow::Error;

/// Copula-flow density estimation and synthetic tabular data.
#[derive(Parser)]
#[command(name = "copulaflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit marginals and copula; writes the model and a `<out>.trace.csv` training trace.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// TOML file with [training], [marginal], [discrete] and [copula] sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `training.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate synthetic rows.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Likelihood decomposition, per-column KS and optional ML efficacy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        target: Option<String>,
    },
    /// Write the uniform-marginal matrix of a dataset.
    Transform {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a benchmark fixture: two-rings, mixed-vine or copula:FAMILY:PARAM.
    Bench {
        #[arg(long)]
        name: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pairwise scatter and marginal histogram files, real against synthetic.
    Plot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Seed of the synthetic sample drawn by `eval` and `plot`.
const REPORT_SEED: u64 = 0;

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        Error::Argument(_) | Error::Config(_) => 1,
        Error::Training { .. } | Error::Parameter(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("COPULAFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn require(path: &Path) -> copulaflow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        })
    }
}

fn load_for_model(model: &FittedModel, path: &Path) -> copulaflow::Result<Dataset> {
    load_csv_with_codecs(path, model.schema(), &model.codecs())
}

fn print_report(report: &LoglikReport) {
    let width = report.marginal_terms.iter().map(|t| t.0.len()).max().unwrap_or(0).max(10);
    println!("log-likelihood over {} rows (nats/row)", report.n_rows);
    // Full precision, so the printed terms add up to the printed total.
    println!("  {:<width$}  {:>24}", "term", "value");
    for (name, v) in &report.marginal_terms {
        println!("  {:<width$}  {:>24?}", format!("marginal {name}"), v);
    }
    println!("  {:<width$}  {:>24?}", "copula", report.copula_term);
    println!("  {:<width$}  {:>24?}", "total", report.total);
}

fn run(command: Command) -> copulaflow::Result<()> {
    match command {
        Command::Fit {
            data,
            schema,
            config,
            out,
            seed,
        } => {
            require(&schema)?;
            require(&data)?;
            let schema = Schema::load(&schema)?;
            let mut config = match config {
                Some(p) => {
                    require(&p)?;
                    TrainConfig::load(&p)?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                config.training.seed = s;
            }
            let data = load_csv(&data, &schema)?;
            let (model, traces) = train_pipeline(&data, &config)?;
            save_model(&model, &out)?;
            let mut trace_path = out.clone().into_os_string();
            trace_path.push(".trace.csv");
            write_trace_csv(&traces, Path::new(&trace_path))?;
            print_report(&model.loglik_report(&data)?);
            Ok(())
        }
        Command::Sample { model, n, seed, out } => {
            require(&model)?;
            let model = load_model(&model)?;
            save_csv(&model.generate(n, seed)?, &out)
        }
        Command::Eval { model, data, target } => {
            require(&model)?;
            require(&data)?;
            let model = load_model(&model)?;
            let data = load_for_model(&model, &data)?;
            if let Some(t) = &target {
                if data.schema().index_of(t).is_none() {
                    return Err(Error::Task(format!("unknown target column `{t}`")));
                }
            }
            print_report(&model.loglik_report(&data)?);

            let synth = model.generate(data.n_rows(), REPORT_SEED)?;
            println!("\ntwo-sample KS, model samples vs data");
            println!("  {:<16}  {:>10}  {:>10}", "column", "D", "p");
            for (c, name) in data.schema().names().enumerate() {
                let ks = ks_two_sample(&synth.column(c).numeric(), &data.column(c).numeric())?;
                println!("  {:<16}  {:>10.6}  {:>10.6}", name, ks.statistic, ks.p_value);
            }

            if let Some(t) = target {
                let mut rows: Vec<usize> = (0..data.n_rows()).collect();
                rows.shuffle(&mut ChaCha8Rng::seed_from_u64(REPORT_SEED));
                let cut = rows.len() * 4 / 5;
                let train = data.select_rows(&rows[..cut]);
                let test = data.select_rows(&rows[cut..]);
                let synth = model.generate(train.n_rows(), REPORT_SEED)?;
                let r = ml_efficacy(&train, &synth, &test, &t)?;
                println!("\nML efficacy, target `{}` ({:?})", r.target, r.task);
                let metric = if r.real.f1_macro.is_some() { "accuracy" } else { "r2" };
                println!("  {:<8}  {:>10}  {:>10}", "arm", metric, "f1_macro");
                for (arm, s) in [("real", r.real), ("synth", r.synth)] {
                    let f1 = s.f1_macro.map_or("-".to_string(), |f| format!("{f:.6}"));
                    println!("  {:<8}  {:>10.6}  {:>10}", arm, s.primary, f1);
                }
                println!("  gap       {:>10.6}", r.gap());
            }
            Ok(())
        }
        Command::Transform { model, data, out, seed } => {
            require(&model)?;
            require(&data)?;
            let model = load_model(&model)?;
            let data = load_for_model(&model, &data)?;
            let u = model.uniform_matrix(&data, seed)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(data.schema().names())?;
            for row in u.chunks(data.n_cols().max(1)) {
                w.write_record(row.iter().map(|v| format!("{v:?}")))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
            write_atomic(&out, &bytes)
        }
        Command::Bench { name, n, seed, out_dir } => {
            let (schema, data, description) = fixture(&name, n, seed)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io {
                path: out_dir.clone(),
                source: e,
            })?;
            let stem = name.replace(':', "-");
            save_csv(&data, out_dir.join(format!("{stem}.csv")))?;
            schema.save(out_dir.join(format!("{stem}.schema")))?;
            println!("{description}");
            Ok(())
        }
        Command::Plot { model, data, out } => {
            require(&model)?;
            require(&data)?;
            let model = load_model(&model)?;
            let data = load_for_model(&model, &data)?;
            if data.n_rows() < 2 {
                return Err(Error::Data("plotting needs at least 2 data rows".into()));
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let synth = model.generate(data.n_rows(), REPORT_SEED)?;
            let names: Vec<String> = data.schema().names().map(sanitize).collect();
            let real_cols: Vec<Vec<f64>> = data.columns().iter().map(|c| c.numeric()).collect();
            let synth_cols: Vec<Vec<f64>> = synth.columns().iter().map(|c| c.numeric()).collect();
            for a in 0..names.len() {
                for b in a + 1..names.len() {
                    let stem = format!("pair_{}_{}", names[a], names[b]);
                    let sets = [
                        ScatterSet {
                            label: "real",
                            x: &real_cols[a],
                            y: &real_cols[b],
                        },
                        ScatterSet {
                            label: "synth",
                            x: &synth_cols[a],
                            y: &synth_cols[b],
                        },
                    ];
                    let fits = emit_scatter(
                        &sets,
                        (&names[a], &names[b]),
                        &out.join(format!("{stem}.csv")),
                        Some(&out.join(format!("{stem}.svg"))),
                    );
                    // A constant column has no defined slope; skip the pair rather than fail the run.
                    if let Err(e) = fits {
                        log::warn!("skipping {stem}: {e}");
                    }
                }
                let stem = format!("marginal_{}", names[a]);
                emit_histogram(
                    &[("real", &real_cols[a]), ("synth", &synth_cols[a])],
                    &names[a],
                    30,
                    &out.join(format!("{stem}.csv")),
                    Some(&out.join(format!("{stem}.svg"))),
                )?;
            }
            Ok(())
        }
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}
