//! Sequential-task training, evaluation matrices and λ grid search.

use std::fmt;

use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig};
use crate::continual::{ContinualState, ImportanceMap, StrategyKind};
use crate::data::{self, LabeledImages, SyntheticSpec, TaskDataset, TaskSplits};
use crate::error::{Error, Result};
use crate::model::{self, MlpParams};
use crate::numerics::{streams, RandomStream};
use crate::optim;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalCell {
    pub accuracy: f64,
    pub n_samples: usize,
}

/// `acc[t][j]`: accuracy on task `j` after training through task `t`,
/// defined for `j <= t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalMatrix {
    rows: Vec<Vec<EvalCell>>,
}

impl EvalMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<EvalCell>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends row `t`, which must hold exactly `t + 1` cells.
    pub fn push_row(&mut self, row: Vec<EvalCell>) -> Result<()> {
        let t = self.rows.len();
        if row.len() != t + 1 {
            return Err(Error::IncompleteRow { row: t });
        }
        if let Some(c) = row.iter().find(|c| !(0.0..=1.0).contains(&c.accuracy)) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {} outside [0, 1]",
                c.accuracy
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after_task: usize, eval_task: usize) -> Option<EvalCell> {
        self.rows.get(after_task)?.get(eval_task).copied()
    }

    pub fn accuracy(&self, after_task: usize, eval_task: usize) -> Option<f64> {
        self.get(after_task, eval_task).map(|c| c.accuracy)
    }

    pub fn row(&self, after_task: usize) -> Option<&[EvalCell]> {
        self.rows.get(after_task).map(Vec::as_slice)
    }

    /// `(after_task, eval_task, cell)` in row-major lower-triangular order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, EvalCell)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(t, row)| row.iter().enumerate().map(move |(j, c)| (t, j, *c)))
    }
}

/// Unweighted mean of `acc[t][0..=t]`.
pub fn average_accuracy(matrix: &EvalMatrix, t: usize) -> Result<f64> {
    let row = matrix.row(t).ok_or(Error::IncompleteRow { row: t })?;
    if row.len() != t + 1 {
        return Err(Error::IncompleteRow { row: t });
    }
    Ok(row.iter().map(|c| c.accuracy).sum::<f64>() / row.len() as f64)
}

/// Per-task training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStats {
    pub epoch_mean_loss: Vec<f64>,
    /// `max_i |θ_i(end) − θ_i(start)|` over the task.
    pub max_param_change: f64,
    /// `max_i |θ_i|` at the start of the task.
    pub max_param_start: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub eval: EvalMatrix,
    pub params: MlpParams,
    pub importance: Option<ImportanceMap>,
    pub anchor: Option<MlpParams>,
    pub task_stats: Vec<TaskStats>,
}

/// Loads or synthesizes the base splits, subsets them and builds the
/// permuted task family.
pub fn prepare_tasks(config: &ExperimentConfig) -> Result<Vec<TaskDataset>> {
    config.validate()?;
    let source = config.data.resolved_source();
    let splits = match source {
        DataSource::Mnist => data::load_mnist(&config.data.data_dir)?,
        DataSource::Synthetic => data::synth_splits(&SyntheticSpec {
            classes: config.training.architecture.outputs(),
            dims: config.training.architecture.inputs(),
            samples_per_class: config.data.synthetic.samples_per_class,
            cluster_spread: config.data.synthetic.cluster_spread,
            seed: config.seed,
        })?,
        DataSource::Auto => unreachable!("resolved_source never returns Auto"),
    };
    let width = config.training.architecture.inputs();
    if splits.train.width() != width {
        return Err(Error::Config(format!(
            "data width {} does not match the network input width {width}",
            splits.train.width()
        )));
    }
    let train = subset(splits.train, config.data.train_subset, config.seed, streams::TRAIN_SUBSET);
    let test = subset(splits.test, config.data.eval_subset, config.seed, streams::EVAL_SUBSET);
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split"));
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset("evaluation split"));
    }
    data::permuted_family(
        TaskSplits { train, test },
        config.data.num_tasks,
        config.seed,
        config.data.permute_first_task,
    )
}

fn subset(split: LabeledImages, n: Option<usize>, seed: u64, stream: u64) -> LabeledImages {
    match n {
        Some(n) => split.subset(n, &mut RandomStream::new(seed, stream)),
        None => split,
    }
}

/// Trains on each task in order with the configured strategy and evaluates
/// every task seen so far after each one. Deterministic in `config.seed`.
pub fn run_sequence(config: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<RunOutcome> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to train on".into()));
    }
    let mut init_stream = RandomStream::new(config.seed, streams::INIT);
    let mut shuffle = RandomStream::new(config.seed, streams::SHUFFLE);
    let mut params = MlpParams::init(&config.training.architecture, &mut init_stream)?;
    let mut optimizer = config.optimizer.build()?;
    let mut state = ContinualState::new(config.strategy.clone())?;
    let mut eval = EvalMatrix::new();
    let mut task_stats = Vec::with_capacity(tasks.len());

    for (t, task) in tasks.iter().enumerate() {
        if t > 0 && !config.optimizer.carry_state {
            optimizer.reset();
        }
        let hook = state.hook(optimizer.learning_rate())?;
        let start = params.clone();
        let mut epoch_mean_loss = Vec::with_capacity(config.training.epochs_per_task);
        for epoch in 0..config.training.epochs_per_task {
            let mut loss_sum = 0.0;
            let mut count = 0usize;
            for (batch, (x, y)) in data::batches(task, config.training.batch_size, &mut shuffle)?.enumerate() {
                let (loss, grads) = model::loss_and_gradient(&params, &x, &y).map_err(|e| match e {
                    Error::NonFiniteActivation { .. } => Error::NonFiniteLoss { task: t, epoch, batch },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { task: t, epoch, batch });
                }
                loss_sum += loss * y.len() as f64;
                count += y.len();
                optim::apply(&mut params, grads, &mut optimizer, &hook)?;
                if !params.is_finite() {
                    return Err(Error::NonFiniteLoss { task: t, epoch, batch });
                }
            }
            epoch_mean_loss.push(loss_sum / count as f64);
        }
        task_stats.push(TaskStats {
            epoch_mean_loss,
            max_param_change: params.zip_map(&start, |a, b| (a - b).abs())?.max_abs(),
            max_param_start: start.max_abs(),
        });

        state.consolidate(&params, task)?;

        let row = tasks[..=t]
            .iter()
            .map(|seen| {
                let images = seen.test_images();
                let accuracy = model::accuracy(&params, &images, seen.test_labels())?;
                Ok(EvalCell {
                    accuracy,
                    n_samples: seen.test_len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        eval.push_row(row)?;
    }

    let anchor = match config.strategy.kind {
        StrategyKind::Ewc | StrategyKind::EwcMultiAnchor => state.anchor().map(|a| a.params.clone()),
        _ => None,
    };
    Ok(RunOutcome {
        eval,
        params,
        importance: state.importance().cloned(),
        anchor,
        task_stats,
    })
}

/// `n` points log-spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "log grid needs 0 < lo < hi and n >= 2, got [{lo}, {hi}] with {n}"
        )));
    }
    let (a, b) = (lo.log10(), hi.log10());
    Ok((0..n)
        .map(|k| {
            let e = a + (b - a) * k as f64 / (n - 1) as f64;
            // snap integer exponents so decades print as 0.001, 0.01, ...
            let e = if (e - e.round()).abs() < 1e-12 { e.round() } else { e };
            10f64.powf(e)
        })
        .collect())
}

/// Average accuracy over `λ × tasks learned`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSurface {
    pub lambdas: Vec<f64>,
    /// `cells[i][t]`: average accuracy after task `t` (0-based) with
    /// `lambdas[i]`; `None` marks a failed run.
    pub cells: Vec<Vec<Option<f64>>>,
    pub errors: Vec<Option<String>>,
}

impl LambdaSurface {
    pub fn num_tasks(&self) -> usize {
        self.cells.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn get(&self, lambda_index: usize, t: usize) -> Option<f64> {
        self.cells.get(lambda_index)?.get(t).copied().flatten()
    }

    /// Grid index of the best λ after task `t`; ties go to the smaller λ.
    pub fn argmax(&self, t: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.lambdas.len() {
            if let Some(v) = self.get(i, t) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn best_lambda(&self, t: usize) -> Option<f64> {
        self.argmax(t).map(|i| self.lambdas[i])
    }
}

impl fmt::Display for LambdaSurface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>10}", "lambda")?;
        for t in 0..self.num_tasks() {
            write!(f, " {:>7}", format!("T{}", t + 1))?;
        }
        writeln!(f)?;
        for (i, l) in self.lambdas.iter().enumerate() {
            write!(f, "{l:>10.3e}")?;
            for t in 0..self.num_tasks() {
                match self.get(i, t) {
                    Some(v) => write!(f, " {v:>7.4}")?,
                    None => write!(f, " {:>7}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub struct GridResult {
    pub surface: LambdaSurface,
    /// Evaluation matrix of every successful run, by grid index.
    pub runs: Vec<Option<EvalMatrix>>,
}

impl GridResult {
    /// Best λ per task count (`None` where every run failed).
    pub fn best_lambdas(&self) -> Vec<Option<f64>> {
        (0..self.surface.num_tasks())
            .map(|t| self.surface.best_lambda(t))
            .collect()
    }
}

/// One [`run_sequence`] per λ, in parallel. Every run starts from the same
/// seed, so runs differ only in λ. Failures are recorded per λ and leave
/// gaps in the surface.
pub fn grid_search(config: &ExperimentConfig, tasks: &[TaskDataset], lambdas: &[f64]) -> Result<GridResult> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("λ grid is empty".into()));
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) || lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "λ grid must be non-negative and strictly increasing, got {lambdas:?}"
        )));
    }
    let results: Vec<Result<EvalMatrix>> = lambdas
        .par_iter()
        .map(|&lambda| {
            let mut cfg = config.clone();
            cfg.strategy.lambda = lambda;
            run_sequence(&cfg, tasks).map(|o| o.eval)
        })
        .collect();
    let num_tasks = tasks.len();
    let mut cells = Vec::with_capacity(lambdas.len());
    let mut errors = Vec::with_capacity(lambdas.len());
    let mut runs = Vec::with_capacity(lambdas.len());
    for result in results {
        match result {
            Ok(eval) => {
                cells.push((0..num_tasks).map(|t| average_accuracy(&eval, t).ok()).collect());
                errors.push(None);
                runs.push(Some(eval));
            }
            Err(e) => {
                cells.push(vec![None; num_tasks]);
                errors.push(Some(e.to_string()));
                runs.push(None);
            }
        }
    }
    Ok(GridResult {
        surface: LambdaSurface {
            lambdas: lambdas.to_vec(),
            cells,
            errors,
        },
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(a: f64) -> EvalCell {
        EvalCell {
            accuracy: a,
            n_samples: 10,
        }
    }

    #[test]
    fn average_accuracy_examples() {
        let m = EvalMatrix::from_rows(vec![vec![cell(0.95)], vec![cell(0.9), cell(0.8)]]).unwrap();
        assert_eq!(average_accuracy(&m, 0).unwrap(), 0.95);
        assert!((average_accuracy(&m, 1).unwrap() - 0.85).abs() < 1e-15);
        let swapped = EvalMatrix::from_rows(vec![vec![cell(0.95)], vec![cell(0.8), cell(0.9)]]).unwrap();
        assert_eq!(average_accuracy(&m, 1).unwrap(), average_accuracy(&swapped, 1).unwrap());
        assert!(matches!(
            average_accuracy(&m, 2).unwrap_err(),
            Error::IncompleteRow { row: 2 }
        ));
    }

    #[test]
    fn eval_matrix_rejects_bad_rows() {
        let mut m = EvalMatrix::new();
        assert!(m.push_row(vec![cell(0.5), cell(0.5)]).is_err());
        assert!(m.push_row(vec![cell(1.5)]).is_err());
        m.push_row(vec![cell(0.5)]).unwrap();
        assert_eq!(m.cells().count(), 1);
    }

    #[test]
    fn log_grid_decades() {
        let g = log_grid(1e-3, 1e3, 7).unwrap();
        assert_eq!(g, vec![0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0]);
        let g = log_grid(1e-3, 1e3, 13).unwrap();
        assert_eq!(g.len(), 13);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!((g[1] / g[0] - 10f64.sqrt()).abs() < 1e-12);
        assert!(log_grid(0.0, 1.0, 3).is_err());
    }

    #[test]
    fn surface_argmax_prefers_smaller_lambda_on_ties() {
        let s = LambdaSurface {
            lambdas: vec![0.1, 1.0, 10.0],
            cells: vec![vec![Some(0.5)], vec![Some(0.7)], vec![Some(0.7)]],
            errors: vec![None; 3],
        };
        assert_eq!(s.argmax(0), Some(1));
        assert_eq!(s.best_lambda(0), Some(1.0));
        assert_eq!(s.argmax(1), None);
    }
}
