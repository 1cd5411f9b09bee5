//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Criteria 4-8 run the desk preset on the synthetic source.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use wva_core::config::{DataSource, ExperimentConfig};
use wva_core::continual::{self, Anchor, Attenuation, ContinualState, ImportanceMap, StrategyKind, Target};
use wva_core::data::{self, TaskDataset};
use wva_core::harness::{self, average_accuracy, GridResult, RunOutcome};
use wva_core::model::{self, Architecture, MlpParams};
use wva_core::numerics::{streams, Matrix, RandomStream};
use wva_core::optim::{self, AdamConfig, AdamState, OptimizerKind};
use wva_core::report;

const GRAD_H: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-6;
const GRAD_SEEDS: u64 = 50;
const GRAD_BUDGET: Duration = Duration::from_secs(5);

const SGD_EQUIV_EPOCHS: usize = 2;
const SGD_EQUIV_LAMBDA: f64 = 10.0;

const CLOSED_FORM_TOL: f64 = 1e-12;

/// Baseline oracle run (desk, synthetic, Adam, no strategy, seed 0):
/// acc[0][0] = 0.9615, acc[1][0] = 0.6955, a drop of 0.266.
const FORGETTING_MARGIN: f64 = 0.20;
const FORGETTING_BUDGET: Duration = Duration::from_secs(120);

/// Oracle grid: WVA-on-step (hyperbolic) reaches 0.5377 after five tasks
/// against 0.4704 for the unprotected baseline.
const WVA_MARGIN: f64 = 0.05;
const WVA_BUDGET: Duration = Duration::from_secs(15 * 60);

const PARITY_TOL: f64 = 0.02;
const OFF_OPTIMUM_FACTOR: f64 = 100.0;
const ARGMAX_MAX_STEPS: usize = 1;
const ADAM_TOL: f64 = 1e-12;

struct Verdict {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

fn desk() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.data.source = DataSource::Synthetic;
    c
}

fn wva(attenuation: Attenuation, target: Target) -> ExperimentConfig {
    let mut c = desk();
    c.strategy.kind = StrategyKind::Wva;
    c.strategy.attenuation = attenuation;
    c.strategy.target = target;
    c
}

/// Desk-scale runs shared by criteria 5-8, computed on first use.
struct Desk {
    tasks: Vec<TaskDataset>,
    baseline: Option<RunOutcome>,
    hyp_step: Option<GridResult>,
    hyp_grad: Option<GridResult>,
    exp_step: Option<GridResult>,
    shared_time: Duration,
}

impl Desk {
    fn new() -> Self {
        Self {
            tasks: harness::prepare_tasks(&desk()).expect("desk tasks"),
            baseline: None,
            hyp_step: None,
            hyp_grad: None,
            exp_step: None,
            shared_time: Duration::ZERO,
        }
    }

    fn timed<T>(&mut self, f: impl FnOnce(&[TaskDataset]) -> T) -> T {
        let start = Instant::now();
        let out = f(&self.tasks);
        self.shared_time += start.elapsed();
        out
    }

    fn baseline(&mut self) -> &RunOutcome {
        if self.baseline.is_none() {
            let run = self.timed(|t| harness::run_sequence(&desk(), t).expect("baseline run"));
            self.baseline = Some(run);
        }
        self.baseline.as_ref().unwrap()
    }

    fn grid(&mut self, attenuation: Attenuation, target: Target) -> &GridResult {
        let missing = match (attenuation, target) {
            (Attenuation::Hyperbolic, Target::Step) => self.hyp_step.is_none(),
            (Attenuation::Hyperbolic, Target::Gradient) => self.hyp_grad.is_none(),
            (Attenuation::Exponential, _) => self.exp_step.is_none(),
        };
        if missing {
            let cfg = wva(attenuation, target);
            let grid = self.timed(|t| harness::grid_search(&cfg, t, &cfg.grid.lambdas).expect("grid"));
            for (i, e) in grid.surface.errors.iter().enumerate() {
                if let Some(e) = e {
                    println!("  grid {attenuation}/{target} λ#{i} failed: {e}");
                }
            }
            println!("  grid {attenuation}/{target}:\n{}", indent(&grid.surface.to_string()));
            match (attenuation, target) {
                (Attenuation::Hyperbolic, Target::Step) => self.hyp_step = Some(grid),
                (Attenuation::Hyperbolic, Target::Gradient) => self.hyp_grad = Some(grid),
                (Attenuation::Exponential, _) => self.exp_step = Some(grid),
            }
        }
        match (attenuation, target) {
            (Attenuation::Hyperbolic, Target::Step) => self.hyp_step.as_ref().unwrap(),
            (Attenuation::Hyperbolic, Target::Gradient) => self.hyp_grad.as_ref().unwrap(),
            (Attenuation::Exponential, _) => self.exp_step.as_ref().unwrap(),
        }
    }
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("    {l}\n")).collect()
}

fn last(grid: &GridResult) -> usize {
    grid.surface.num_tasks() - 1
}

/// (λ index, λ, average accuracy after the final task) at the grid optimum.
fn optimum(grid: &GridResult) -> Option<(usize, f64, f64)> {
    let t = last(grid);
    let i = grid.surface.argmax(t)?;
    Some((i, grid.surface.lambdas[i], grid.surface.get(i, t)?))
}

fn criterion_1() -> (bool, String) {
    let arch = Architecture(vec![4, 4, 3]);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..GRAD_SEEDS {
        let mut s = RandomStream::new(seed, 99);
        let params = MlpParams::init(&arch, &mut s).unwrap();
        let x: Vec<f64> = (0..6 * 4).map(|_| s.next_uniform(-1.0, 1.0).unwrap()).collect();
        let x = Matrix::from_vec(6, 4, x).unwrap();
        let y: Vec<usize> = (0..6).map(|_| (s.next_u64() % 3) as usize).collect();
        let (_, grads) = model::loss_and_gradient(&params, &x, &y).unwrap();
        let loss = |p: &MlpParams| model::cross_entropy(&model::forward(p, &x).unwrap(), &y).unwrap();
        let flat = params.to_flat();
        for (i, analytic) in grads.values().enumerate() {
            let shifted = |d: f64| {
                let mut q = params.clone();
                for (k, v) in q.values_mut().enumerate() {
                    *v = if k == i { flat[k] + d } else { flat[k] };
                }
                loss(&q)
            };
            let numeric = (shifted(GRAD_H) - shifted(-GRAD_H)) / (2.0 * GRAD_H);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
            checked += 1;
        }
    }
    (
        worst < GRAD_REL_TOL,
        format!("max relative error {worst:.2e} over {checked} parameters, {GRAD_SEEDS} seeds (< {GRAD_REL_TOL:e})"),
    )
}

struct Learner {
    params: MlpParams,
    optimizer: optim::Optimizer,
    state: ContinualState,
}

fn criterion_2() -> (bool, String) {
    let mut cfg = desk();
    cfg.data.num_tasks = 2;
    cfg.training.epochs_per_task = SGD_EQUIV_EPOCHS;
    cfg.optimizer.optimizer = OptimizerKind::Sgd;
    cfg.strategy.kind = StrategyKind::Wva;
    cfg.strategy.lambda = SGD_EQUIV_LAMBDA;
    let tasks = harness::prepare_tasks(&cfg).unwrap();
    let init = MlpParams::init(&cfg.training.architecture, &mut RandomStream::new(cfg.seed, streams::INIT)).unwrap();
    let mut learners: Vec<Learner> = [Target::Gradient, Target::Step]
        .into_iter()
        .map(|target| {
            let mut strategy = cfg.strategy.clone();
            strategy.target = target;
            Learner {
                params: init.clone(),
                optimizer: cfg.optimizer.build().unwrap(),
                state: ContinualState::new(strategy).unwrap(),
            }
        })
        .collect();
    let mut shuffle = RandomStream::new(cfg.seed, streams::SHUFFLE);
    let mut steps = 0usize;
    let mut attenuated_steps = 0usize;
    for task in &tasks {
        let hooks: Vec<_> = learners
            .iter()
            .map(|l| l.state.hook(l.optimizer.learning_rate()).unwrap())
            .collect();
        for _ in 0..SGD_EQUIV_EPOCHS {
            for (x, y) in data::batches(task, cfg.training.batch_size, &mut shuffle).unwrap() {
                for (l, hook) in learners.iter_mut().zip(&hooks) {
                    let (_, g) = model::loss_and_gradient(&l.params, &x, &y).unwrap();
                    optim::apply(&mut l.params, g, &mut l.optimizer, hook).unwrap();
                }
                steps += 1;
                if !hooks[0].is_identity() {
                    attenuated_steps += 1;
                }
                let same = learners[0]
                    .params
                    .values()
                    .zip(learners[1].params.values())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return (false, format!("trajectories diverge at step {steps}"));
                }
            }
        }
        for l in &mut learners {
            l.state.consolidate(&l.params, task).unwrap();
        }
    }
    (
        attenuated_steps > 0,
        format!("{steps} SGD steps bit-identical ({attenuated_steps} attenuated), λ = {SGD_EQUIV_LAMBDA}"),
    )
}

fn criterion_3() -> (bool, String) {
    let mut failures = Vec::new();
    let mut check = |what: &str, got: f64, want: f64| {
        if (got - want).abs() > CLOSED_FORM_TOL {
            failures.push(format!("{what}: {got} != {want}"));
        }
    };
    for kind in [Attenuation::Hyperbolic, Attenuation::Exponential] {
        for lambda in [0.0, 1e-3, 1.0, 1e6] {
            check("factor(Ω=0)", continual::wva_factor(0.0, lambda, kind), 1.0);
        }
    }
    for (lambda, omega) in [(1.0, 1.0), (4.0, 0.25), (0.5, 2.0), (1e3, 1e-3)] {
        check("hyperbolic(λΩ=1)", continual::wva_factor(omega, lambda, Attenuation::Hyperbolic), 0.5);
    }
    for lambda in [1.0, 2.0, 0.5] {
        let omega = 2f64.ln() / lambda;
        check("exponential(λΩ=ln 2)", continual::wva_factor(omega, lambda, Attenuation::Exponential), 0.5);
    }
    let arch = Architecture(vec![5, 4, 3]);
    let mut s = RandomStream::new(3, 0);
    let theta = MlpParams::init(&arch, &mut s).unwrap();
    let omega = ImportanceMap::new(theta.map(|v| v.abs() * 7.0)).unwrap();
    let anchor = Anchor {
        params: theta.clone(),
        task: 0,
    };
    let (value, grad) = continual::ewc_penalty(&theta, &anchor, &omega, 3.5).unwrap();
    check("ewc value at anchor", value, 0.0);
    check("ewc gradient at anchor", grad.max_abs(), 0.0);
    let mut bound_ok = true;
    for alpha in [1e-3, 0.2] {
        for lambda in [1e-3, 1.0, 1e3] {
            for k in 0..=60 {
                let o = 10f64.powf(-10.0 + k as f64 * 0.5);
                let c = continual::safe_coefficient(o, alpha, lambda);
                bound_ok &= c >= 0.0 && c <= 1.0 / (alpha * lambda) + CLOSED_FORM_TOL;
            }
        }
    }
    if !bound_ok {
        failures.push("safe coefficient exceeds 1/(αλ)".into());
    }
    let passed = failures.is_empty();
    let detail = if passed {
        format!("factor identities, EWC at anchor and safe-coefficient bound hold to {CLOSED_FORM_TOL:e}")
    } else {
        failures.join("; ")
    };
    (passed, detail)
}

fn criterion_4() -> (bool, String) {
    let start = Instant::now();
    let mut cfg = desk();
    cfg.data.num_tasks = 2;
    let tasks = harness::prepare_tasks(&cfg).unwrap();
    let out = harness::run_sequence(&cfg, &tasks).unwrap();
    let elapsed = start.elapsed();
    let before = out.eval.accuracy(0, 0).unwrap();
    let after = out.eval.accuracy(1, 0).unwrap();
    let drop = before - after;
    (
        drop >= FORGETTING_MARGIN && elapsed < FORGETTING_BUDGET,
        format!(
            "acc[0][0] {before:.4} -> acc[1][0] {after:.4}, drop {drop:.4} (>= {FORGETTING_MARGIN}); {:.1} s (< {} s)",
            elapsed.as_secs_f64(),
            FORGETTING_BUDGET.as_secs()
        ),
    )
}

fn criterion_5(desk: &mut Desk) -> (bool, String) {
    let before = desk.shared_time;
    let t = desk.tasks.len() - 1;
    let baseline = average_accuracy(&desk.baseline().eval, t).unwrap();
    let step = optimum(desk.grid(Attenuation::Hyperbolic, Target::Step));
    let grad = optimum(desk.grid(Attenuation::Hyperbolic, Target::Gradient));
    let elapsed = desk.shared_time - before;
    let (Some((_, ls, step_acc)), Some((_, lg, grad_acc))) = (step, grad) else {
        return (false, "a grid produced no successful run".into());
    };
    let gain = step_acc - baseline;
    (
        gain >= WVA_MARGIN && step_acc > grad_acc && elapsed < WVA_BUDGET,
        format!(
            "step {step_acc:.4} @ λ={ls} vs baseline {baseline:.4} (gain {gain:.4} >= {WVA_MARGIN}) and gradient {grad_acc:.4} @ λ={lg}; {:.0} s (< {} s)",
            elapsed.as_secs_f64(),
            WVA_BUDGET.as_secs()
        ),
    )
}

fn criterion_6(desk: &mut Desk) -> (bool, String) {
    let hyp = optimum(desk.grid(Attenuation::Hyperbolic, Target::Step));
    let exp = optimum(desk.grid(Attenuation::Exponential, Target::Step));
    let (Some((_, lh, h)), Some((_, le, e))) = (hyp, exp) else {
        return (false, "a grid produced no successful run".into());
    };
    let gap = (h - e).abs();
    (
        gap <= PARITY_TOL,
        format!("hyperbolic {h:.4} @ λ={lh}, exponential {e:.4} @ λ={le}, gap {gap:.4} (<= {PARITY_TOL})"),
    )
}

fn off_optimum(desk: &mut Desk, attenuation: Attenuation) -> Option<(f64, f64)> {
    let (_, best, _) = optimum(desk.grid(attenuation, Target::Step))?;
    let lambda = best * OFF_OPTIMUM_FACTOR;
    let grid = desk.grid(attenuation, Target::Step);
    let t = last(grid);
    let on_grid = grid
        .surface
        .lambdas
        .iter()
        .position(|l| (l / lambda - 1.0).abs() < 1e-9)
        .and_then(|i| grid.surface.get(i, t));
    let acc = match on_grid {
        Some(v) => v,
        None => {
            let mut cfg = wva(attenuation, Target::Step);
            cfg.strategy.lambda = lambda;
            let out = desk.timed(|tasks| harness::run_sequence(&cfg, tasks)).ok()?;
            average_accuracy(&out.eval, t).ok()?
        }
    };
    Some((lambda, acc))
}

fn criterion_7(desk: &mut Desk) -> (bool, String) {
    let (Some((lh, h)), Some((le, e))) = (
        off_optimum(desk, Attenuation::Hyperbolic),
        off_optimum(desk, Attenuation::Exponential),
    ) else {
        return (false, "off-optimum runs failed".into());
    };
    (
        e < h,
        format!("at {OFF_OPTIMUM_FACTOR}x optimal λ: exponential {e:.4} @ λ={le} < hyperbolic {h:.4} @ λ={lh}"),
    )
}

fn criterion_8(desk: &mut Desk) -> (bool, String) {
    let mut passed = true;
    let mut parts = Vec::new();
    for attenuation in [Attenuation::Hyperbolic, Attenuation::Exponential] {
        let grid = desk.grid(attenuation, Target::Step);
        let idx: Vec<Option<usize>> = (1..grid.surface.num_tasks()).map(|t| grid.surface.argmax(t)).collect();
        let found: Vec<usize> = idx.iter().flatten().copied().collect();
        let spread = match (found.iter().min(), found.iter().max()) {
            (Some(lo), Some(hi)) if found.len() == idx.len() => hi - lo,
            _ => usize::MAX,
        };
        passed &= spread <= ARGMAX_MAX_STEPS;
        let lambdas: Vec<String> = found.iter().map(|&i| format!("{}", grid.surface.lambdas[i])).collect();
        parts.push(format!("{attenuation}: argmax λ after tasks 2-5 = [{}]", lambdas.join(", ")));
    }
    (passed, format!("{} (spread <= {ARGMAX_MAX_STEPS} grid step)", parts.join("; ")))
}

fn criterion_9() -> (bool, String) {
    let mut cfg = wva(Attenuation::Hyperbolic, Target::Step);
    cfg.data.num_tasks = 2;
    cfg.strategy.lambda = 10.0;
    let lambdas = [1.0, 100.0];
    let mut evals = Vec::new();
    let mut surfaces = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let tasks = harness::prepare_tasks(&cfg).unwrap();
        let run = harness::run_sequence(&cfg, &tasks).unwrap();
        report::emit_run_reports(dir.path(), &cfg, &run).unwrap();
        let grid = harness::grid_search(&cfg, &tasks, &lambdas).unwrap();
        report::emit_grid_reports(&dir.path().join("grid"), &cfg, &grid).unwrap();
        evals.push(fs::read(dir.path().join(report::EVAL_CSV)).unwrap());
        surfaces.push(fs::read(dir.path().join("grid").join(report::SURFACE_CSV)).unwrap());
    }
    (
        evals[0] == evals[1] && surfaces[0] == surfaces[1],
        format!(
            "repeated run and grid give byte-identical {} ({} B) and {} ({} B)",
            report::EVAL_CSV,
            evals[0].len(),
            report::SURFACE_CSV,
            surfaces[0].len()
        ),
    )
}

fn criterion_10() -> (bool, String) {
    // plain scalar Adam, ε outside the square root
    let (lr, b1, b2, eps) = (0.001f64, 0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut state = AdamState::new(AdamConfig::default());
    let mut worst: f64 = 0.0;
    let mut trace = Vec::new();
    for (k, g) in [1.0, 1.0, 1.0, -1.0, -1.0].into_iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let expected = -lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let grads = MlpParams::zeros(&Architecture(vec![1, 1])).map(|_| g);
        let step = optim::adam_step(&mut state, &grads).unwrap();
        for got in step.values() {
            worst = worst.max((got - expected).abs());
        }
        trace.push(format!("{expected:.6e}"));
    }
    (
        worst <= ADAM_TOL,
        format!("steps [{}], max deviation {worst:.1e} (<= {ADAM_TOL:e})", trace.join(", ")),
    )
}

fn main() -> ExitCode {
    let mut verdicts = Vec::new();
    let mut record = |id: u8, name: &'static str, f: &mut dyn FnMut() -> (bool, String)| {
        let start = Instant::now();
        let (passed, detail) = f();
        let elapsed = start.elapsed();
        let v = Verdict {
            id,
            name,
            passed,
            detail,
            elapsed,
        };
        println!("{}", line(&v));
        verdicts.push(v);
    };

    record(1, "gradient correctness", &mut || {
        let start = Instant::now();
        let (ok, detail) = criterion_1();
        let elapsed = start.elapsed();
        (
            ok && elapsed < GRAD_BUDGET,
            format!("{detail}; {:.2} s (< {} s)", elapsed.as_secs_f64(), GRAD_BUDGET.as_secs()),
        )
    });
    record(2, "SGD attenuation-target equivalence", &mut criterion_2);
    record(3, "closed-form identities", &mut criterion_3);
    record(4, "catastrophic forgetting", &mut criterion_4);
    let mut shared = Desk::new();
    record(5, "WVA protection", &mut || criterion_5(&mut shared));
    record(6, "attenuation-function parity", &mut || criterion_6(&mut shared));
    record(7, "off-optimum degradation", &mut || criterion_7(&mut shared));
    record(8, "λ stability", &mut || criterion_8(&mut shared));
    record(9, "determinism", &mut criterion_9);
    record(10, "scalar Adam oracle", &mut criterion_10);

    println!("\nacceptance summary");
    for v in &verdicts {
        println!("{}", line(v));
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("{} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn line(v: &Verdict) -> String {
    format!(
        "criterion {:>2} {} {}: {} [{:.1} s]",
        v.id,
        if v.passed { "PASS" } else { "FAIL" },
        v.name,
        v.detail,
        v.elapsed.as_secs_f64()
    )
}
