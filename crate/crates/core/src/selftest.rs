//! Quick invariant checks: gradient correctness, attenuation bounds, SGD
//! target equivalence and the scalar Adam reference.

use std::fmt;

use crate::config::{DataSource, ExperimentConfig};
use crate::continual::{self, Attenuation, StrategyKind, Target};
use crate::harness;
use crate::model::{self, Architecture, MlpParams};
use crate::numerics::{Matrix, RandomStream};
use crate::optim::{self, AdamConfig, AdamState};
use crate::Result;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{verdict}] {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("gradient check", gradient_check(10)),
        check("attenuation bounds", attenuation_bounds()),
        check("sgd target equivalence", sgd_target_equivalence()),
        check("scalar adam reference", scalar_adam()),
    ]
}

/// Largest relative error between backprop and central differences
/// (`h = 1e-5`) over a 4-4-3 network for `seeds` seeds.
pub fn max_gradient_error(seeds: u64) -> Result<f64> {
    let arch = Architecture(vec![4, 4, 3]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut s = RandomStream::new(seed, 7);
        let params = MlpParams::init(&arch, &mut s)?;
        let x = Matrix::from_vec(5, 4, (0..20).map(|_| s.next_uniform(-1.0, 1.0)).collect::<Result<_>>()?)?;
        let y: Vec<usize> = (0..5).map(|_| (s.next_u64() % 3) as usize).collect();
        let (_, grads) = model::loss_and_gradient(&params, &x, &y)?;
        let loss = |p: &MlpParams| -> Result<f64> { model::cross_entropy(&model::forward(p, &x)?, &y) };
        for (i, analytic) in grads.values().enumerate() {
            let mut plus = params.clone();
            *plus.values_mut().nth(i).expect("index in range") += h;
            let mut minus = params.clone();
            *minus.values_mut().nth(i).expect("index in range") -= h;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

fn gradient_check(seeds: u64) -> Result<(bool, String)> {
    let err = max_gradient_error(seeds)?;
    Ok((err < 1e-6, format!("max relative error {err:.2e} over {seeds} seeds (< 1e-6)")))
}

fn attenuation_bounds() -> Result<(bool, String)> {
    let mut ok = true;
    for kind in [Attenuation::Hyperbolic, Attenuation::Exponential] {
        ok &= continual::wva_factor(0.0, 1.0, kind) == 1.0;
        let mut prev = 1.0;
        for k in 0..=200 {
            let omega = 10f64.powf(-8.0 + k as f64 * 0.08);
            let f = continual::wva_factor(omega, 1.0, kind);
            ok &= f > 0.0 || kind == Attenuation::Exponential;
            ok &= (0.0..=1.0).contains(&f) && f <= prev;
            prev = f;
        }
    }
    ok &= (continual::wva_factor(1.0, 1.0, Attenuation::Hyperbolic) - 0.5).abs() < 1e-12;
    ok &= (continual::wva_factor(2f64.ln(), 1.0, Attenuation::Exponential) - 0.5).abs() < 1e-12;
    Ok((ok, "factors in (0, 1], non-increasing, exact at 0 and at one half".into()))
}

fn sgd_target_equivalence() -> Result<(bool, String)> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.source = DataSource::Synthetic;
    cfg.data.num_tasks = 2;
    cfg.data.synthetic.samples_per_class = 40;
    cfg.training.architecture = Architecture(vec![16, 12, 4]);
    cfg.training.epochs_per_task = 2;
    cfg.training.batch_size = 10;
    cfg.optimizer.optimizer = optim::OptimizerKind::Sgd;
    cfg.strategy.kind = StrategyKind::Wva;
    cfg.strategy.lambda = 3.0;
    let tasks = harness::prepare_tasks(&cfg)?;
    let mut bits = Vec::new();
    for target in [Target::Gradient, Target::Step] {
        cfg.strategy.target = target;
        let out = harness::run_sequence(&cfg, &tasks)?;
        bits.push(out.params.values().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    Ok((bits[0] == bits[1], "WVA on gradient and on step give bit-identical SGD parameters".into()))
}

fn scalar_adam() -> Result<(bool, String)> {
    let cfg = AdamConfig::default();
    let mut state = AdamState::new(cfg);
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut worst: f64 = 0.0;
    for (t, g) in [1.0, 1.0, 1.0, -1.0, -1.0].into_iter().enumerate() {
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t as i32 + 1));
        let v_hat = v / (1.0 - 0.999f64.powi(t as i32 + 1));
        let expected = -0.001 * m_hat / (v_hat.sqrt() + 1e-8);
        let grads = MlpParams::zeros(&Architecture(vec![1, 1])).map(|_| g);
        let step = optim::adam_step(&mut state, &grads)?;
        for got in step.values() {
            worst = worst.max((got - expected).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.2e} over 5 steps (<= 1e-12)")))
}
