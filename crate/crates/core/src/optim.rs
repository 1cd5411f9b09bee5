//! SGD and Adam, expressed as functions from a gradient to an explicit
//! parameter step `Δθ`, plus the hook through which continual-learning
//! strategies rewrite the gradient before the optimizer or the step after it.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.2,
            OptimizerKind::Adam => 0.001,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Optimizer section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub optimizer: OptimizerKind,
    /// Defaults to 0.2 for SGD and 0.001 for Adam.
    pub learning_rate: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Keep Adam moments across task boundaries instead of resetting them.
    pub carry_state: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            carry_state: false,
        }
    }
}

impl OptimizerConfig {
    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| self.optimizer.default_learning_rate())
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {lr}")));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon >= 0.0 && self.adam_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "adam_epsilon must be non-negative, got {}",
                self.adam_epsilon
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Optimizer> {
        self.validate()?;
        Ok(match self.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdConfig {
                learning_rate: self.learning_rate(),
            }),
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(AdamConfig {
                learning_rate: self.learning_rate(),
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                epsilon: self.adam_epsilon,
            })),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 0.2 }
    }
}

/// `Δθ = −lr·g`.
pub fn sgd_step(config: &SgdConfig, grads: &Gradients) -> MlpParams {
    let lr = config.learning_rate;
    grads.map(|g| -lr * g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments and step counter. Moments are allocated lazily on the first
/// step, shaped like that step's gradient.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Option<MlpParams>,
    second_moment: Option<MlpParams>,
    steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: None,
            second_moment: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn reset(&mut self) {
        self.first_moment = None;
        self.second_moment = None;
        self.steps = 0;
    }
}

/// Bias-corrected Adam with ε added outside the square root:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `Δθ = −lr·m̂ / (√v̂ + ε)`.
pub fn adam_step(state: &mut AdamState, grads: &Gradients) -> Result<MlpParams> {
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.config;
    let m = state
        .first_moment
        .get_or_insert_with(|| grads.map(|_| 0.0));
    m.check_same_shape(grads, "adam_step")?;
    let v = state
        .second_moment
        .get_or_insert_with(|| grads.map(|_| 0.0));
    state.steps += 1;
    let t = state.steps as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut step = grads.clone();
    for (((s, g), mi), vi) in step
        .values_mut()
        .zip(grads.values())
        .zip(m.values_mut())
        .zip(v.values_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *s = -lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(step)
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(SgdConfig),
    Adam(AdamState),
}

impl Optimizer {
    pub fn step(&mut self, grads: &Gradients) -> Result<MlpParams> {
        match self {
            Optimizer::Sgd(cfg) => Ok(sgd_step(cfg, grads)),
            Optimizer::Adam(state) => adam_step(state, grads),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            Optimizer::Sgd(cfg) => cfg.learning_rate,
            Optimizer::Adam(state) => state.config.learning_rate,
        }
    }

    /// Whether the step is a fixed linear function of the gradient.
    pub fn is_linear(&self) -> bool {
        matches!(self, Optimizer::Sgd(_))
    }

    /// Clears accumulated state. SGD is stateless.
    pub fn reset(&mut self) {
        if let Optimizer::Adam(state) = self {
            state.reset();
        }
    }
}

type TransformFn = dyn Fn(&MlpParams, MlpParams) -> Result<MlpParams> + Send + Sync;

/// A shape-preserving rewrite of a gradient or step.
pub enum Transform {
    /// Elementwise multiplication by a parameter-shaped factor map.
    Scale(Arc<MlpParams>),
    /// Arbitrary rewrite; also sees the current parameters, which
    /// penalty-based strategies need.
    Map(Box<TransformFn>),
}

impl Transform {
    pub fn map(f: impl Fn(&MlpParams, MlpParams) -> Result<MlpParams> + Send + Sync + 'static) -> Self {
        Transform::Map(Box::new(f))
    }

    pub fn run(&self, params: &MlpParams, value: MlpParams) -> Result<MlpParams> {
        match self {
            Transform::Scale(factors) => value.zip_map(factors, |v, f| v * f),
            Transform::Map(f) => f(params, value),
        }
    }
}

impl fmt::Debug for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::Scale(_) => f.write_str("Scale"),
            Transform::Map(_) => f.write_str("Map"),
        }
    }
}

/// Interception points around the optimizer. Either side may be absent.
#[derive(Debug, Default)]
pub struct StepHook {
    pub pre_optimizer: Option<Transform>,
    pub post_optimizer: Option<Transform>,
}

impl StepHook {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn pre(transform: Transform) -> Self {
        Self {
            pre_optimizer: Some(transform),
            post_optimizer: None,
        }
    }

    pub fn post(transform: Transform) -> Self {
        Self {
            pre_optimizer: None,
            post_optimizer: Some(transform),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.pre_optimizer.is_none() && self.post_optimizer.is_none()
    }
}

fn run_transform(
    transform: Option<&Transform>,
    params: &MlpParams,
    value: MlpParams,
    op: &'static str,
) -> Result<MlpParams> {
    let Some(t) = transform else {
        return Ok(value);
    };
    let out = t.run(params, value)?;
    params.check_same_shape(&out, op)?;
    Ok(out)
}

/// One update: `g' = pre(g)`, `Δ = optimizer(g')`, `Δ' = post(Δ)`,
/// `θ ← θ + Δ'`. Returns the applied step `Δ'`.
///
/// For an optimizer that is linear in the gradient (SGD), a pre-optimizer
/// [`Transform::Scale`] is evaluated after the optimizer instead. The result
/// is the same real number; fixing one evaluation order makes gradient-side
/// and step-side scaling agree bit for bit instead of to within one rounding.
pub fn apply(
    params: &mut MlpParams,
    grads: Gradients,
    optimizer: &mut Optimizer,
    hook: &StepHook,
) -> Result<MlpParams> {
    params.check_same_shape(&grads, "apply")?;
    let (pre, deferred) = match &hook.pre_optimizer {
        Some(scale @ Transform::Scale(_)) if optimizer.is_linear() => (None, Some(scale)),
        other => (other.as_ref(), None),
    };
    let grads = run_transform(pre, params, grads, "pre_optimizer hook")?;
    let step = optimizer.step(&grads)?;
    let step = run_transform(deferred, params, step, "pre_optimizer hook")?;
    let step = run_transform(hook.post_optimizer.as_ref(), params, step, "post_optimizer hook")?;
    params.add_assign(&step)?;
    Ok(step)
}
