//! Weight importance, the EWC penalty family and weight velocity attenuation.
//!
//! Every strategy reaches the optimizer through a [`StepHook`]:
//!
//! * WVA multiplies the gradient (target `gradient`) or the optimizer's step
//!   (target `step`) by a per-parameter factor that decays with importance,
//!   `1/(λΩ+1)` or `e^{−λΩ}`. It stores importances only, never anchors.
//! * EWC adds the gradient of `(λ/2)·Σ Ω_i (θ_i − θ*_i)²` to the task
//!   gradient before the optimizer, optionally clipping the two gradients
//!   separately first. EWC always acts on the gradient; `target` is ignored.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::model::{self, Gradients, MlpParams};
use crate::optim::{StepHook, Transform};

/// Rows per forward pass while estimating importance.
const ESTIMATE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    Ewc,
    EwcMultiAnchor,
    Wva,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attenuation {
    Hyperbolic,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Gradient,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Fisher,
    TotalAbsSignal,
}

macro_rules! display_via_serde {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = toml::Value::try_from(self).map_err(|_| fmt::Error)?;
                f.write_str(v.as_str().ok_or(fmt::Error)?)
            }
        }
    )*};
}

display_via_serde!(StrategyKind, Attenuation, Target, Estimator);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub lambda: f64,
    /// Online decay γ applied to the running importance before each new
    /// task's importance is added.
    pub online_decay: f64,
    pub attenuation: Attenuation,
    pub target: Target,
    pub estimator: Estimator,
    /// EWC only: replace Ω with `Ω/(αλΩ+1)`, α being the learning rate.
    pub safe_coefficient: bool,
    /// EWC only: clip task and penalty gradients to this L2 norm separately.
    pub separate_clip_threshold: Option<f64>,
    /// Divide each task's importance map by its maximum before accumulating.
    pub normalize_importance: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::None,
            lambda: 1.0,
            online_decay: 1.0,
            attenuation: Attenuation::Hyperbolic,
            target: Target::Step,
            estimator: Estimator::TotalAbsSignal,
            safe_coefficient: false,
            separate_clip_threshold: None,
            normalize_importance: false,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.online_decay) {
            return Err(Error::Config(format!(
                "online_decay must lie in [0, 1], got {}",
                self.online_decay
            )));
        }
        if let Some(t) = self.separate_clip_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("clip threshold must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn is_ewc(&self) -> bool {
        matches!(self.kind, StrategyKind::Ewc | StrategyKind::EwcMultiAnchor)
    }
}

/// Per-parameter importance Ω: non-negative, finite, shaped like the
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap(MlpParams);

impl ImportanceMap {
    pub fn new(values: MlpParams) -> Result<Self> {
        if let Some(index) = values.values().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NonFinite {
                op: "importance map (entries must be finite and >= 0)",
                index,
            });
        }
        Ok(Self(values))
    }

    pub fn zeros_like(params: &MlpParams) -> Self {
        Self(params.map(|_| 0.0))
    }

    pub fn values(&self) -> &MlpParams {
        &self.0
    }

    pub fn into_inner(self) -> MlpParams {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.max_abs()
    }

    /// Divides by the largest entry; an all-zero map is returned unchanged.
    pub fn max_normalized(&self) -> Self {
        let max = self.max();
        if max > 0.0 {
            Self(self.0.map(|v| v / max))
        } else {
            self.clone()
        }
    }
}

/// Consolidated parameters θ* captured after a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub params: MlpParams,
    pub task: usize,
}

fn require_samples(dataset: &TaskDataset, op: &'static str) -> Result<()> {
    if dataset.train_len() == 0 {
        Err(Error::EmptyDataset(op))
    } else {
        Ok(())
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(ESTIMATE_CHUNK)
        .map(move |s| (s..(s + ESTIMATE_CHUNK).min(n)).collect())
}

/// Empirical Fisher diagonal over the task's training set:
/// `F_i = mean_s (∂ log p(y_s | x_s, θ) / ∂θ_i)²`.
///
/// Squared per-sample gradients come from one batched backward pass per
/// chunk: the weight gradient of sample `s` is the outer product `δ_s a_sᵀ`.
pub fn estimate_fisher(params: &MlpParams, dataset: &TaskDataset) -> Result<ImportanceMap> {
    require_samples(dataset, "estimate_fisher")?;
    let mut total = params.map(|_| 0.0);
    for idx in chunks(dataset.train_len()) {
        let (x, y) = dataset.train_rows(&idx);
        let trace = model::forward(params, &x)?;
        let deltas = model::backward_deltas(params, &trace, &y)?;
        for (l, dz) in deltas.iter().enumerate() {
            let inputs = &trace.activations[l];
            let layer = &mut total.layers[l];
            for (s, delta) in dz.row_iter().enumerate() {
                let a = inputs.row(s);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (w, &ai) in layer.weights.row_mut(o).iter_mut().zip(a) {
                        let g = d * ai;
                        *w += g * g;
                    }
                    layer.biases[o] += d * d;
                }
            }
        }
    }
    let inv_n = 1.0 / dataset.train_len() as f64;
    ImportanceMap::new(total.map(|v| v * inv_n))
}

/// Total absolute signal: for weight `w_ij` fed by activation `a_j`,
/// `Ω_ij = mean_s |a_sj · w_ij| = |w_ij| · mean_s |a_sj|`; for a bias,
/// `Ω_i = |b_i|`. Forward passes only.
pub fn estimate_total_abs_signal(params: &MlpParams, dataset: &TaskDataset) -> Result<ImportanceMap> {
    require_samples(dataset, "estimate_total_abs_signal")?;
    let mut mean_abs_input: Vec<Vec<f64>> = params
        .layers
        .iter()
        .map(|l| vec![0.0; l.weights.cols()])
        .collect();
    for idx in chunks(dataset.train_len()) {
        let (x, _) = dataset.train_rows(&idx);
        let trace = model::forward(params, &x)?;
        for (acc, a) in mean_abs_input.iter_mut().zip(&trace.activations) {
            for row in a.row_iter() {
                for (s, v) in acc.iter_mut().zip(row) {
                    *s += v.abs();
                }
            }
        }
    }
    let inv_n = 1.0 / dataset.train_len() as f64;
    let mut out = params.clone();
    for (layer, acc) in out.layers.iter_mut().zip(&mean_abs_input) {
        for r in 0..layer.weights.rows() {
            for (w, s) in layer.weights.row_mut(r).iter_mut().zip(acc) {
                *w = w.abs() * (s * inv_n);
            }
        }
        layer.biases.iter_mut().for_each(|b| *b = b.abs());
    }
    ImportanceMap::new(out)
}

pub fn estimate(estimator: Estimator, params: &MlpParams, dataset: &TaskDataset) -> Result<ImportanceMap> {
    match estimator {
        Estimator::Fisher => estimate_fisher(params, dataset),
        Estimator::TotalAbsSignal => estimate_total_abs_signal(params, dataset),
    }
}

/// `Ω' = γ·Ω_total + Ω_new`.
pub fn accumulate(total: &ImportanceMap, new: &ImportanceMap, decay: f64) -> Result<ImportanceMap> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("decay must lie in [0, 1], got {decay}")));
    }
    ImportanceMap::new(total.0.zip_map(&new.0, |t, n| decay * t + n)?)
}

/// `Ω / (αλΩ + 1)`: the EWC coefficient that keeps one penalty step from
/// overshooting the anchor.
pub fn safe_coefficient(omega: f64, alpha: f64, lambda: f64) -> f64 {
    omega / (alpha * lambda * omega + 1.0)
}

/// Value `(λ/2)·Σ Ω_i(θ_i − θ*_i)²` and gradient `λ·Ω_i(θ_i − θ*_i)`.
pub fn ewc_penalty(
    params: &MlpParams,
    anchor: &Anchor,
    importance: &ImportanceMap,
    lambda: f64,
) -> Result<(f64, Gradients)> {
    params.check_same_shape(&anchor.params, "ewc_penalty")?;
    params.check_same_shape(&importance.0, "ewc_penalty")?;
    let mut value = 0.0;
    let mut grad = params.clone();
    for ((g, a), o) in grad
        .values_mut()
        .zip(anchor.params.values())
        .zip(importance.0.values())
    {
        let d = *g - a;
        value += o * d * d;
        *g = lambda * o * d;
    }
    Ok((0.5 * lambda * value, grad))
}

/// Sum of independent quadratic penalties, one per `(anchor, Ω, λ)` triple.
/// Empty lists give value 0 and a zero gradient.
pub fn ewc_penalty_multi_anchor(
    params: &MlpParams,
    anchors: &[Anchor],
    importances: &[ImportanceMap],
    lambdas: &[f64],
) -> Result<(f64, Gradients)> {
    if anchors.len() != importances.len() || anchors.len() != lambdas.len() {
        return Err(Error::InvalidArgument(format!(
            "multi-anchor penalty needs equal lists, got {} anchors, {} maps, {} lambdas",
            anchors.len(),
            importances.len(),
            lambdas.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = params.map(|_| 0.0);
    for ((anchor, importance), &lambda) in anchors.iter().zip(importances).zip(lambdas) {
        let (v, g) = ewc_penalty(params, anchor, importance, lambda)?;
        value += v;
        grad.add_assign(&g)?;
    }
    Ok((value, grad))
}

fn clip_to_norm(g: &Gradients, threshold: f64) -> Gradients {
    let norm = g.l2_norm();
    if norm > threshold {
        g.scale(threshold / norm)
    } else {
        g.clone()
    }
}

/// Rescales each gradient to L2 norm at most `threshold`, then sums them.
pub fn clip_separately(task_grad: &Gradients, penalty_grad: &Gradients, threshold: f64) -> Result<Gradients> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let mut out = clip_to_norm(task_grad, threshold);
    out.add_assign(&clip_to_norm(penalty_grad, threshold))?;
    Ok(out)
}

/// Attenuation factor in `(0, 1]`: `1/(λΩ+1)` or `e^{−λΩ}`.
pub fn wva_factor(omega: f64, lambda: f64, kind: Attenuation) -> f64 {
    let x = lambda * omega;
    match kind {
        Attenuation::Hyperbolic => 1.0 / (x + 1.0),
        Attenuation::Exponential => (-x).exp(),
    }
}

/// Multiplies the gradient (target `Gradient`) or the optimizer step
/// (target `Step`) by `wva_factor(Ω_i)`.
pub fn make_wva_hook(importance: &ImportanceMap, lambda: f64, kind: Attenuation, target: Target) -> StepHook {
    let factors = Transform::Scale(Arc::new(importance.0.map(|o| wva_factor(o, lambda, kind))));
    match target {
        Target::Gradient => StepHook::pre(factors),
        Target::Step => StepHook::post(factors),
    }
}

/// One term of an EWC penalty as used inside a training hook.
#[derive(Debug, Clone)]
pub struct PenaltyTerm {
    pub anchor: Anchor,
    pub importance: ImportanceMap,
    pub lambda: f64,
}

/// Pre-optimizer hook adding the EWC penalty gradient to the task gradient.
///
/// With `safe_alpha = Some(α)` each `Ω_i` is replaced by
/// [`safe_coefficient`]`(Ω_i, α, λ)`; with `clip = Some(c)` the task and
/// penalty gradients are clipped separately by [`clip_separately`].
pub fn make_ewc_hook(terms: Vec<PenaltyTerm>, safe_alpha: Option<f64>, clip: Option<f64>) -> Result<StepHook> {
    let mut anchors = Vec::with_capacity(terms.len());
    let mut maps = Vec::with_capacity(terms.len());
    let mut lambdas = Vec::with_capacity(terms.len());
    for term in terms {
        let importance = match safe_alpha {
            Some(alpha) => ImportanceMap::new(
                term.importance
                    .0
                    .map(|o| safe_coefficient(o, alpha, term.lambda)),
            )?,
            None => term.importance,
        };
        anchors.push(term.anchor);
        maps.push(importance);
        lambdas.push(term.lambda);
    }
    if let Some(c) = clip {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!("clip threshold must be positive, got {c}")));
        }
    }
    Ok(StepHook::pre(Transform::map(move |params: &MlpParams, g: MlpParams| {
        let (_, penalty) = ewc_penalty_multi_anchor(params, &anchors, &maps, &lambdas)?;
        match clip {
            Some(c) => clip_separately(&g, &penalty, c),
            None => {
                let mut g = g;
                g.add_assign(&penalty)?;
                Ok(g)
            }
        }
    })))
}

/// Running state of a strategy across a task sequence.
#[derive(Debug, Clone)]
pub struct ContinualState {
    config: StrategyConfig,
    importance: Option<ImportanceMap>,
    /// Per-task maps and anchors; only kept for multi-anchor EWC.
    per_task: Vec<(Anchor, ImportanceMap)>,
    anchor: Option<Anchor>,
}

impl ContinualState {
    pub fn new(config: StrategyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            importance: None,
            per_task: Vec::new(),
            anchor: None,
        })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    /// Accumulated importance so far (`None` before the first task ends or
    /// when the strategy is `none`).
    pub fn importance(&self) -> Option<&ImportanceMap> {
        self.importance.as_ref()
    }

    pub fn anchor(&self) -> Option<&Anchor> {
        self.anchor.as_ref()
    }

    /// Hook for training the next task. Inert before any task has been
    /// consolidated.
    pub fn hook(&self, learning_rate: f64) -> Result<StepHook> {
        let cfg = &self.config;
        let Some(importance) = &self.importance else {
            return Ok(StepHook::identity());
        };
        let safe_alpha = cfg.safe_coefficient.then_some(learning_rate);
        match cfg.kind {
            StrategyKind::None => Ok(StepHook::identity()),
            StrategyKind::Wva => Ok(make_wva_hook(importance, cfg.lambda, cfg.attenuation, cfg.target)),
            StrategyKind::Ewc => {
                let anchor = self.anchor.clone().expect("anchor is captured with importance");
                make_ewc_hook(
                    vec![PenaltyTerm {
                        anchor,
                        importance: importance.clone(),
                        lambda: cfg.lambda,
                    }],
                    safe_alpha,
                    cfg.separate_clip_threshold,
                )
            }
            StrategyKind::EwcMultiAnchor => {
                // older tasks are discounted by γ per task of age
                let n = self.per_task.len();
                let terms = self
                    .per_task
                    .iter()
                    .enumerate()
                    .map(|(k, (anchor, map))| PenaltyTerm {
                        anchor: anchor.clone(),
                        importance: map.clone(),
                        lambda: cfg.lambda * cfg.online_decay.powi((n - 1 - k) as i32),
                    })
                    .collect();
                make_ewc_hook(terms, safe_alpha, cfg.separate_clip_threshold)
            }
        }
    }

    /// Estimates importance on the finished task, folds it into the running
    /// total and captures the anchor (EWC kinds only).
    pub fn consolidate(&mut self, params: &MlpParams, dataset: &TaskDataset) -> Result<()> {
        let cfg = &self.config;
        if cfg.kind == StrategyKind::None {
            return Ok(());
        }
        let mut fresh = estimate(cfg.estimator, params, dataset)?;
        if cfg.normalize_importance {
            fresh = fresh.max_normalized();
        }
        let total = match &self.importance {
            Some(total) => accumulate(total, &fresh, cfg.online_decay)?,
            None => fresh.clone(),
        };
        if cfg.is_ewc() {
            let anchor = Anchor {
                params: params.clone(),
                task: dataset.task_id,
            };
            if cfg.kind == StrategyKind::EwcMultiAnchor {
                self.per_task.push((anchor.clone(), fresh));
            }
            self.anchor = Some(anchor);
        }
        self.importance = Some(total);
        Ok(())
    }
}
