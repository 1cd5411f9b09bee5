//! `wvalab`: run sequential-task experiments, λ grid searches and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::{DeserializeOwned, IntoDeserializer};

use wva_core::config::{DataSource, ExperimentConfig, Preset};
use wva_core::continual::{Attenuation, Estimator, StrategyKind, Target};
use wva_core::harness::{self, average_accuracy};
use wva_core::optim::OptimizerKind;
use wva_core::{data, report, selftest};

const USAGE_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "wvalab", version, about = "Continual-learning lab: EWC and weight velocity attenuation on permuted tasks")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the task sequence once and write eval.csv, accuracy.svg and checkpoints.
    Run(Overrides),
    /// Repeat the run for every λ in the grid and write the accuracy surface.
    Grid(Overrides),
    /// Re-render SVGs from eval.csv / surface.csv in an output directory.
    Report {
        /// Directory holding the CSVs (defaults to --out or "out").
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Download the four MNIST IDX files and verify their lengths.
    FetchData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base URL the files are fetched from (`data.fetch_base_url`).
        #[arg(long)]
        base_url: Option<String>,
        /// Target directory (`data.data_dir`).
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run the built-in invariant checks and print pass/fail.
    Selftest,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    T::deserialize(IntoDeserializer::<serde::de::value::Error>::into_deserializer(s)).map_err(|e| e.to_string())
}

/// Every flag mirrors a config key; flags win over the file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk | paper (`preset`).
    #[arg(long, value_parser = parse_enum::<Preset>)]
    preset: Option<Preset>,
    /// `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// auto | mnist | synthetic (`data.source`).
    #[arg(long, value_parser = parse_enum::<DataSource>)]
    source: Option<DataSource>,
    /// `data.data_dir`
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// `data.num_tasks`
    #[arg(long)]
    tasks: Option<usize>,
    /// `data.permute_first_task`
    #[arg(long)]
    permute_first_task: bool,
    /// `data.train_subset`
    #[arg(long)]
    train_subset: Option<usize>,
    /// `data.eval_subset`
    #[arg(long)]
    eval_subset: Option<usize>,
    /// `training.epochs_per_task`
    #[arg(long)]
    epochs: Option<usize>,
    /// `training.batch_size`
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd | adam (`optimizer.optimizer`).
    #[arg(long, value_parser = parse_enum::<OptimizerKind>)]
    optimizer: Option<OptimizerKind>,
    /// `optimizer.learning_rate`
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Keep Adam moments across tasks (`optimizer.carry_state`).
    #[arg(long)]
    carry_state: bool,
    /// none | ewc | ewc_multi_anchor | wva (`strategy.kind`).
    #[arg(long, value_parser = parse_enum::<StrategyKind>)]
    strategy: Option<StrategyKind>,
    /// `strategy.lambda`
    #[arg(long)]
    lambda: Option<f64>,
    /// hyperbolic | exponential (`strategy.attenuation`).
    #[arg(long, value_parser = parse_enum::<Attenuation>)]
    attenuation: Option<Attenuation>,
    /// gradient | step (`strategy.target`).
    #[arg(long, value_parser = parse_enum::<Target>)]
    target: Option<Target>,
    /// total_abs_signal | fisher (`strategy.estimator`).
    #[arg(long, value_parser = parse_enum::<Estimator>)]
    estimator: Option<Estimator>,
    /// Online importance decay γ (`strategy.online_decay`).
    #[arg(long)]
    gamma: Option<f64>,
    /// `strategy.safe_coefficient`
    #[arg(long)]
    safe_coefficient: bool,
    /// Clip task and penalty gradients separately; 1.0 when given without a
    /// value (`strategy.separate_clip_threshold`).
    #[arg(long, num_args = 0..=1, default_missing_value = "1.0")]
    clip: Option<f64>,
    /// `strategy.normalize_importance`
    #[arg(long)]
    normalize_importance: bool,
    /// Comma-separated λ grid (`grid.lambdas`).
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    /// Output directory (`output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> wva_core::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path, self.preset)?,
            None => self.preset.map(ExperimentConfig::preset).unwrap_or_default(),
        };
        c.apply_env();
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {$(
                if let Some(v) = self.$flag.clone() {
                    c.$($field).+ = v;
                }
            )*};
        }
        set!(
            seed => seed,
            source => data.source,
            data_dir => data.data_dir,
            tasks => data.num_tasks,
            epochs => training.epochs_per_task,
            batch_size => training.batch_size,
            optimizer => optimizer.optimizer,
            strategy => strategy.kind,
            lambda => strategy.lambda,
            attenuation => strategy.attenuation,
            target => strategy.target,
            estimator => strategy.estimator,
            gamma => strategy.online_decay,
            lambdas => grid.lambdas,
            out => output.dir,
        );
        if self.train_subset.is_some() {
            c.data.train_subset = self.train_subset;
        }
        if self.eval_subset.is_some() {
            c.data.eval_subset = self.eval_subset;
        }
        if self.learning_rate.is_some() {
            c.optimizer.learning_rate = self.learning_rate;
        }
        if self.clip.is_some() {
            c.strategy.separate_clip_threshold = self.clip;
        }
        c.data.permute_first_task |= self.permute_first_task;
        c.optimizer.carry_state |= self.carry_state;
        c.strategy.safe_coefficient |= self.safe_coefficient;
        c.strategy.normalize_importance |= self.normalize_importance;
        c.validate()?;
        Ok(c)
    }
}

fn run(overrides: &Overrides) -> wva_core::Result<()> {
    let config = overrides.resolve()?;
    eprintln!("data source: {:?}", config.data.resolved_source());
    let tasks = harness::prepare_tasks(&config)?;
    let outcome = harness::run_sequence(&config, &tasks)?;
    for t in 0..outcome.eval.num_tasks() {
        let row: Vec<String> = outcome.eval.row(t).unwrap_or(&[]).iter().map(|c| format!("{:.4}", c.accuracy)).collect();
        println!(
            "after task {:>2}: avg {:.4}  [{}]",
            t + 1,
            average_accuracy(&outcome.eval, t)?,
            row.join(" ")
        );
    }
    let written = report::emit_run_reports(&config.output.dir, &config, &outcome)?;
    print_written(&written);
    Ok(())
}

fn grid(overrides: &Overrides) -> wva_core::Result<()> {
    let config = overrides.resolve()?;
    eprintln!("data source: {:?}", config.data.resolved_source());
    let tasks = harness::prepare_tasks(&config)?;
    let result = harness::grid_search(&config, &tasks, &config.grid.lambdas)?;
    print!("{}", result.surface);
    for (i, e) in result.surface.errors.iter().enumerate() {
        if let Some(e) = e {
            eprintln!("λ = {}: {e}", result.surface.lambdas[i]);
        }
    }
    for (t, best) in result.best_lambdas().iter().enumerate() {
        match best {
            Some(l) => println!("best λ after {} task(s): {l}", t + 1),
            None => println!("best λ after {} task(s): none (all runs failed)", t + 1),
        }
    }
    let written = report::emit_grid_reports(&config.output.dir, &config, &result)?;
    print_written(&written);
    Ok(())
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn fetch(config: Option<&Path>, base_url: Option<String>, data_dir: Option<PathBuf>) -> Result<(), (u8, String)> {
    let runtime = |e: wva_core::Error| (RUNTIME_ERROR, e.to_string());
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p, None).map_err(runtime)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env();
    if let Some(d) = data_dir {
        cfg.data.data_dir = d;
    }
    let base = base_url.unwrap_or(cfg.data.fetch_base_url);
    if base.is_empty() {
        return Err((
            USAGE_ERROR,
            "no download location: pass --base-url or set data.fetch_base_url".into(),
        ));
    }
    let dir = cfg.data.data_dir;
    std::fs::create_dir_all(&dir).map_err(|e| (RUNTIME_ERROR, format!("{}: {e}", dir.display())))?;
    let base = base.trim_end_matches('/');
    for (stem, _) in data::MNIST_FILES {
        let mut last_err = String::new();
        let mut saved = false;
        for name in [format!("{stem}.gz"), stem.to_string()] {
            let url = format!("{base}/{name}");
            match download(&url) {
                Ok(bytes) => {
                    let target = dir.join(&name);
                    data::verify_mnist_bytes(Path::new(&url), stem, &bytes).map_err(runtime)?;
                    std::fs::write(&target, &bytes)
                        .map_err(|e| (RUNTIME_ERROR, format!("{}: {e}", target.display())))?;
                    println!("fetched {url} -> {} ({} bytes)", target.display(), bytes.len());
                    saved = true;
                    break;
                }
                Err(e) => last_err = format!("{url}: {e}"),
            }
        }
        if !saved {
            return Err((RUNTIME_ERROR, last_err));
        }
    }
    Ok(())
}

fn download(url: &str) -> Result<Vec<u8>, String> {
    let mut response = ureq::get(url).call().map_err(|e| e.to_string())?;
    let declared: Option<usize> = response
        .headers()
        .get("content-length")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse().ok());
    let bytes = response
        .body_mut()
        .with_config()
        .limit(256 * 1024 * 1024)
        .read_to_vec()
        .map_err(|e| e.to_string())?;
    if let Some(n) = declared {
        if n != bytes.len() {
            return Err(format!("received {} bytes, server declared {n}", bytes.len()));
        }
    }
    Ok(bytes)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE_ERROR)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome: Result<(), (u8, String)> = match cli.command {
        Command::Run(o) => run(&o).map_err(|e| (code_for(&e), e.to_string())),
        Command::Grid(o) => grid(&o).map_err(|e| (code_for(&e), e.to_string())),
        Command::Report { dir, out } => {
            let dir = dir.or(out).unwrap_or_else(|| PathBuf::from("out"));
            report::rerender(&dir)
                .map(|w| print_written(&w))
                .map_err(|e| (RUNTIME_ERROR, e.to_string()))
        }
        Command::FetchData {
            config,
            base_url,
            data_dir,
        } => fetch(config.as_deref(), base_url, data_dir),
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{c}");
            }
            match checks.iter().filter(|c| !c.passed).count() {
                0 => Ok(()),
                n => Err((RUNTIME_ERROR, format!("{n} self-test check(s) failed"))),
            }
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

/// Bad config values are usage errors; everything else is a runtime failure.
fn code_for(e: &wva_core::Error) -> u8 {
    match e {
        wva_core::Error::Config(_) => USAGE_ERROR,
        _ => RUNTIME_ERROR,
    }
}
