//! Training loops for the backbone and head.
//!
//! Every step function takes one batch (columns of a [`Dataset`]), updates
//! the backbone through an [`OptimizerState`] and the head either by a
//! gradient step or in closed form, and returns the batch objective measured
//! before the update together with `‖W_new − W_old‖_F`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardTape, MlpBackbone, ParamGrads};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::head::{
    argmax_columns, augment_features, proximal_solution, ridge_solution, HeadState, InitPolicy,
    Regularization,
};
use crate::linalg::Matrix;
use crate::losses::{batch_loss, cross_entropy_loss, squared_error, LossReport};
use crate::record::RunRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain gradient descent on `W` and `θ` together.
    JointSgdL2,
    /// Head refit by ridge on each batch, then a `θ` step with the new head.
    /// With a full batch this is the exact alternating scheme.
    ClosedFormRidge,
    /// `θ` step with the previous head, then a proximal refit on the same batch.
    ClosedFormProximalSimple,
    /// `θ` step with the current head, then a proximal refit on the next batch.
    ClosedFormProximalLookahead,
    /// Joint gradient descent on softmax cross-entropy.
    JointSgdXent,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::JointSgdL2,
        Method::ClosedFormRidge,
        Method::ClosedFormProximalSimple,
        Method::ClosedFormProximalLookahead,
        Method::JointSgdXent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::JointSgdL2 => "joint_sgd_l2",
            Method::ClosedFormRidge => "closed_form_ridge",
            Method::ClosedFormProximalSimple => "closed_form_proximal_simple",
            Method::ClosedFormProximalLookahead => "closed_form_proximal_lookahead",
            Method::JointSgdXent => "joint_sgd_xent",
        }
    }

    pub fn is_closed_form(self) -> bool {
        matches!(
            self,
            Method::ClosedFormRidge | Method::ClosedFormProximalSimple | Method::ClosedFormProximalLookahead
        )
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// `None` means full batch.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub seed: u64,
    pub head_init: InitPolicy,
    pub has_bias: bool,
    /// Fill `wall_ms`; off by default so records are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            batch_size: None,
            learning_rate: 1e-3,
            beta: None,
            lambda: None,
            momentum: 0.9,
            optimizer: OptimizerKind::Sgd,
            epochs: 10,
            seed: 0,
            head_init: InitPolicy::Zeros,
            has_bias: true,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        match self.method {
            Method::ClosedFormRidge => {
                if self.beta.is_none() || self.lambda.is_some() {
                    return Err(Error::Config("closed_form_ridge needs beta and no lambda".into()));
                }
            }
            Method::ClosedFormProximalSimple | Method::ClosedFormProximalLookahead => {
                if self.lambda.is_none() || self.beta.is_some() {
                    return Err(Error::Config(format!("{} needs lambda and no beta", self.method)));
                }
            }
            Method::JointSgdL2 | Method::JointSgdXent => {
                if self.beta.is_some_and(|b| !(b >= 0.0)) {
                    return Err(Error::Config("beta must be >= 0".into()));
                }
            }
        }
        if let Ok(reg) = self.regularization() {
            if self.method.is_closed_form() {
                reg.validate()?;
            }
        }
        Ok(())
    }

    /// The head's regularization: ridge for `beta`, proximal for `lambda`.
    /// Joint methods get `Ridge { beta }` with their (possibly zero) weight decay.
    pub fn regularization(&self) -> Result<Regularization> {
        match (self.beta, self.lambda) {
            (_, Some(lambda)) => Ok(Regularization::Proximal { lambda }),
            (Some(beta), None) => Ok(Regularization::Ridge { beta }),
            (None, None) => Err(Error::Config("neither beta nor lambda given".into())),
        }
    }

    pub fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(n).min(n)
    }
}

/// Momentum or Adam moment buffers, one per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn sgd(momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(0.0)
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Self::sgd(cfg.momentum),
            OptimizerKind::Adam => Self::adam(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.t
    }

    fn ensure_buffers(&mut self, grads: &[&[f64]]) -> Result<()> {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
            return Ok(());
        }
        let same = self.first.len() == grads.len()
            && self.first.iter().zip(grads).all(|(b, g)| b.len() == g.len());
        if same {
            Ok(())
        } else {
            Err(Error::State("optimizer buffers do not match the parameter layout".into()))
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => {
                let m = self.momentum;
                sgd_step(params, grads, self, lr, m)
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                adam_step(params, grads, self, lr, b1, b2, eps)
            }
        }
    }
}

fn check_layout(params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::State("parameter and gradient layouts differ".into()));
    }
    Ok(())
}

/// Nesterov momentum: `v ← γv + g`, `θ ← θ − α(γv + g)`.
pub fn sgd_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_layout(params, grads)?;
    state.ensure_buffers(grads)?;
    state.t += 1;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.first.iter_mut()) {
        for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * (momentum * *vi + gi);
        }
    }
    Ok(())
}

/// Bias-corrected Adam.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_layout(params, grads)?;
    state.ensure_buffers(grads)?;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[k];
        let v = &mut state.second[k];
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// What one step measured.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Batch objective before the update (a sum over the batch).
    pub loss: f64,
    /// `‖W_new − W_old‖_F`.
    pub w_delta: f64,
}

fn forward_aug(bb: &MlpBackbone, head: &HeadState, x: &Matrix) -> Result<(Matrix, ForwardTape)> {
    let (features, tape) = bb.forward(x)?;
    Ok((augment_features(&features, head.has_bias), tape))
}

/// Backbone gradient from a gradient on the augmented features; the bias row
/// has no parameters behind it.
fn backbone_grads(bb: &MlpBackbone, tape: &ForwardTape, grad_aug: &Matrix) -> Result<ParamGrads> {
    bb.backward(tape, &grad_aug.top_rows(bb.feature_dim()))
}

fn update_backbone(bb: &mut MlpBackbone, grads: &ParamGrads, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    bb.check_grads(grads)?;
    let slices = grads.slices();
    let mut params = bb.param_slices_mut();
    opt.step(&mut params, &slices, lr)
}

fn ensure_finite_loss(loss: f64, opt: &OptimizerState) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration: opt.steps() + 1,
            loss,
        })
    }
}

fn ensure_finite_state(bb: &MlpBackbone, head: &HeadState, loss: f64, opt: &OptimizerState) -> Result<()> {
    if bb.is_finite() && head.w.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration: opt.steps(),
            loss,
        })
    }
}

fn check_batch(batch: &Dataset) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    Ok(())
}

fn joint_step(
    bb: &mut MlpBackbone,
    head: &mut HeadState,
    batch: &Dataset,
    alpha: f64,
    opt: &mut OptimizerState,
    loss_fn: impl Fn(&Matrix, &Matrix, &Matrix) -> Result<LossReport>,
) -> Result<StepInfo> {
    check_batch(batch)?;
    let (phi, tape) = forward_aug(bb, head, &batch.x)?;
    let report = loss_fn(&head.w, &phi, &batch.y)?;
    ensure_finite_loss(report.value, opt)?;
    let grads = backbone_grads(bb, &tape, &report.grad_features)?;
    bb.check_grads(&grads)?;
    let w_old = head.w.clone();
    let mut slices = grads.slices();
    slices.push(report.grad_w.data());
    let mut params = bb.param_slices_mut();
    params.push(head.w.data_mut());
    opt.step(&mut params, &slices, alpha)?;
    ensure_finite_state(bb, head, report.value, opt)?;
    Ok(StepInfo {
        loss: report.value,
        w_delta: head.w.sub(&w_old)?.frobenius_norm(),
    })
}

/// Gradient step on `W` and `θ` for `‖Y − WΦ‖² + β‖W‖²` on the batch.
pub fn step_joint_sgd(
    bb: &mut MlpBackbone,
    head: &mut HeadState,
    batch: &Dataset,
    alpha: f64,
    beta: f64,
    opt: &mut OptimizerState,
) -> Result<StepInfo> {
    joint_step(bb, head, batch, alpha, opt, |w, phi, y| batch_loss(w, phi, y, beta))
}

/// Gradient step on `W` and `θ` for softmax cross-entropy with one-hot `Y`.
pub fn step_joint_xent(
    bb: &mut MlpBackbone,
    head: &mut HeadState,
    batch: &Dataset,
    alpha: f64,
    beta: f64,
    opt: &mut OptimizerState,
) -> Result<StepInfo> {
    joint_step(bb, head, batch, alpha, opt, |w, phi, y| cross_entropy_loss(w, phi, y, beta))
}

/// Ridge refit on the given columns at the current `θ`, then a `θ` step with
/// the refit head held fixed.
fn ridge_then_theta(
    bb: &mut MlpBackbone,
    head: &mut HeadState,
    data: &Dataset,
    alpha: f64,
    beta: f64,
    opt: &mut OptimizerState,
) -> Result<StepInfo> {
    check_batch(data)?;
    let (phi, tape) = forward_aug(bb, head, &data.x)?;
    let w_new = ridge_solution(&data.y, &phi, beta)?;
    let report = batch_loss(&w_new, &phi, &data.y, beta)?;
    ensure_finite_loss(report.value, opt)?;
    let w_delta = head.replace(w_new)?;
    let grads = backbone_grads(bb, &tape, &report.grad_features)?;
    update_backbone(bb, &grads, opt, alpha)?;
    ensure_finite_state(bb, head, report.value, opt)?;
    Ok(StepInfo {
        loss: report.value,
        w_delta,
    })
}

/// `W_{t+1} = ridge(Y, Φ(θ_t), β)` on the full data, then
/// `θ_{t+1} = θ_t − α ∇_θ L(W_{t+1}, θ_t)`. The reported loss is `L⋆(θ_t)`.
pub fn step_full_batch_closed_form(
    bb: &mut MlpBackbone,
    head: &mut HeadState,
    full: &Dataset,
    alpha: f64,
    beta: f64,
    opt: &mut OptimizerState,
) -> Result<StepInfo> {
    ridge_then_theta(bb, head, full, alpha, beta, opt)
}

/// Ridge refit on the batch alone followed by a `θ` step with that head, in
/// the same order as the full-batch scheme.
pub fn step_naive_batch_ridge(
    bb: &mut MlpBackbone,
    head: &mut HeadState,
    batch: &Dataset,
    alpha: f64,
    beta: f64,
    opt: &mut OptimizerState,
) -> Result<StepInfo> {
    ridge_then_theta(bb, head, batch, alpha, beta, opt)
}

/// `θ` step on the squared batch loss with the head fixed. Returns the loss.
fn theta_step_fixed_head(
    bb: &mut MlpBackbone,
    head: &HeadState,
    batch: &Dataset,
    alpha: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let (phi, tape) = forward_aug(bb, head, &batch.x)?;
    let report = squared_error(&head.w, &phi, &batch.y)?;
    ensure_finite_loss(report.value, opt)?;
    let grads = backbone_grads(bb, &tape, &report.grad_features)?;
    update_backbone(bb, &grads, opt, alpha)?;
    Ok(report.value)
}

fn proximal_refit(bb: &MlpBackbone, head: &mut HeadState, batch: &Dataset, lambda: f64) -> Result<f64> {
    let phi = augment_features(&bb.features(&batch.x)?, head.has_bias);
    let w_new = proximal_solution(&batch.y, &phi, &head.w, lambda)?;
    head.replace(w_new)
}

/// First `θ_t = θ_{t−1} − α ∇_θ L_B(W_{t−1}, θ_{t−1})`, then
/// `W_t = prox(B_t, Φ(θ_t), W_{t−1}, λ)`.
pub fn step_algorithm1(
    bb: &mut MlpBackbone,
    head: &mut HeadState,
    batch: &Dataset,
    alpha: f64,
    lambda: f64,
    opt: &mut OptimizerState,
) -> Result<StepInfo> {
    check_batch(batch)?;
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("proximal coefficient must be > 0, got {lambda}")));
    }
    let loss = theta_step_fixed_head(bb, head, batch, alpha, opt)?;
    let w_delta = proximal_refit(bb, head, batch, lambda)?;
    ensure_finite_state(bb, head, loss, opt)?;
    Ok(StepInfo { loss, w_delta })
}

/// `θ` step on the current batch with the already refit `W_t`, then
/// `W_{t+1} = prox(B_{t+1}, Φ(θ_{t+1}), W_t, λ)` on the next batch.
pub fn step_algorithm2(
    bb: &mut MlpBackbone,
    head: &mut HeadState,
    batch: &Dataset,
    next: &Dataset,
    alpha: f64,
    lambda: f64,
    opt: &mut OptimizerState,
) -> Result<StepInfo> {
    check_batch(batch)?;
    check_batch(next)?;
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("proximal coefficient must be > 0, got {lambda}")));
    }
    let loss = theta_step_fixed_head(bb, head, batch, alpha, opt)?;
    let w_delta = proximal_refit(bb, head, next, lambda)?;
    ensure_finite_state(bb, head, loss, opt)?;
    Ok(StepInfo { loss, w_delta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Mse,
    Accuracy,
}

/// `‖Y − Ŷ‖²_F / n`.
pub fn mse(pred: &Matrix, y: &Matrix) -> Result<f64> {
    Ok(pred.sub(y)?.sum_squares() / y.cols().max(1) as f64)
}

/// Fraction of columns whose argmax matches the argmax of the one-hot target.
pub fn accuracy(pred: &Matrix, y: &Matrix) -> f64 {
    let p = argmax_columns(pred);
    let t = argmax_columns(y);
    let hits = p.iter().zip(&t).filter(|(a, b)| a == b).count();
    hits as f64 / t.len().max(1) as f64
}

pub fn evaluate(bb: &MlpBackbone, head: &HeadState, data: &Dataset, kind: EvalKind) -> Result<f64> {
    let pred = head.predict(&bb.features(&data.x)?)?;
    match kind {
        EvalKind::Mse => mse(&pred, &data.y),
        EvalKind::Accuracy => Ok(accuracy(&pred, &data.y)),
    }
}

fn train_loss(bb: &MlpBackbone, head: &HeadState, data: &Dataset, method: Method) -> Result<f64> {
    let phi = augment_features(&bb.features(&data.x)?, head.has_bias);
    let n = data.len().max(1) as f64;
    let value = match method {
        Method::JointSgdXent => cross_entropy_loss(&head.w, &phi, &data.y, 0.0)?.value,
        _ => squared_error(&head.w, &phi, &data.y)?.value,
    };
    Ok(value / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub backbone: MlpBackbone,
    pub head: HeadState,
    /// One row before training and one per epoch.
    pub records: Vec<RunRecord>,
    pub iterations: usize,
    /// Mean `‖W_t − W_{t−1}‖_F` over all steps.
    pub mean_w_delta: f64,
    pub divergence: Option<DivergenceInfo>,
}

/// Runs `cfg.epochs` epochs of `cfg.method`. A divergence stops the run and is
/// reported in the outcome rather than as an error.
pub fn train(
    cfg: &TrainConfig,
    mut bb: MlpBackbone,
    mut head: HeadState,
    train_set: &Dataset,
    val: Option<&Dataset>,
    eval: EvalKind,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let eval_set = val.unwrap_or(train_set);
    let start = Instant::now();
    let wall = |cfg: &TrainConfig| {
        if cfg.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let n = train_set.len();
    let mut sampler = BatchSampler::new(n, cfg.effective_batch(n), cfg.seed)?;
    let mut opt = OptimizerState::from_config(cfg);
    let alpha = cfg.learning_rate;
    let beta = cfg.beta.unwrap_or(0.0);
    let lambda = cfg.lambda.unwrap_or(0.0);

    if cfg.method == Method::ClosedFormProximalLookahead {
        let first = train_set.select(sampler.peek());
        proximal_refit(&bb, &mut head, &first, lambda)?;
    }

    let mut records = vec![RunRecord {
        iter: 0,
        train_loss: train_loss(&bb, &head, train_set, cfg.method)?,
        eval_metric: evaluate(&bb, &head, eval_set, eval)?,
        w_delta: 0.0,
        wall_ms: wall(cfg),
    }];
    let mut iterations = 0;
    let mut delta_total = 0.0;
    let mut divergence = None;

    'epochs: for _ in 0..cfg.epochs {
        let mut epoch_delta = 0.0;
        let steps = sampler.batches_per_epoch();
        for _ in 0..steps {
            let batch = train_set.select(&sampler.next_batch());
            let result = match cfg.method {
                Method::JointSgdL2 => step_joint_sgd(&mut bb, &mut head, &batch, alpha, beta, &mut opt),
                Method::JointSgdXent => step_joint_xent(&mut bb, &mut head, &batch, alpha, beta, &mut opt),
                Method::ClosedFormRidge => {
                    step_naive_batch_ridge(&mut bb, &mut head, &batch, alpha, beta, &mut opt)
                }
                Method::ClosedFormProximalSimple => {
                    step_algorithm1(&mut bb, &mut head, &batch, alpha, lambda, &mut opt)
                }
                Method::ClosedFormProximalLookahead => {
                    let next = train_set.select(sampler.peek());
                    step_algorithm2(&mut bb, &mut head, &batch, &next, alpha, lambda, &mut opt)
                }
            };
            match result {
                Ok(info) => {
                    iterations += 1;
                    epoch_delta += info.w_delta;
                    delta_total += info.w_delta;
                }
                Err(Error::Divergence { iteration, loss }) => {
                    divergence = Some(DivergenceInfo { iteration, loss });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        records.push(RunRecord {
            iter: iterations,
            train_loss: train_loss(&bb, &head, train_set, cfg.method)?,
            eval_metric: evaluate(&bb, &head, eval_set, eval)?,
            w_delta: epoch_delta / steps as f64,
            wall_ms: wall(cfg),
        });
    }

    Ok(TrainOutcome {
        backbone: bb,
        head,
        records,
        iterations,
        mean_w_delta: if iterations > 0 { delta_total / iterations as f64 } else { 0.0 },
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Activation, Parameterization};
    use crate::losses::ridge_loss;
    use crate::rng;

    fn scalar_net(w: f64) -> MlpBackbone {
        // one linear-ish unit: relu on positive inputs is the identity
        MlpBackbone::from_parts(
            vec![Matrix::from_rows(&[&[w]])],
            vec![vec![0.0]],
            Activation::Relu,
            Parameterization::Standard,
        )
        .unwrap()
    }

    fn head(w: f64, reg: Regularization) -> HeadState {
        HeadState {
            w: Matrix::from_rows(&[&[w]]),
            has_bias: false,
            init_policy: InitPolicy::Zeros,
            reg,
        }
    }

    fn toy(seed: u64, n: usize) -> (MlpBackbone, Dataset) {
        let mut r = rng::seeded(seed);
        let x = rng::normal_matrix(&mut r, 3, n, 1.0);
        let y = Matrix::from_fn(2, n, |i, j| (x[(0, j)] * (i as f64 + 1.0)).sin() + 0.5 * x[(1, j)]);
        let bb = MlpBackbone::init(&[3, 6, 5], Activation::Tanh, Parameterization::Standard, seed).unwrap();
        (bb, Dataset::new(x, y).unwrap())
    }

    fn ridge_head(bb: &MlpBackbone, data: &Dataset, beta: f64) -> HeadState {
        HeadState::init(data.output_dim(), bb.feature_dim(), true, InitPolicy::Zeros, Regularization::Ridge { beta }, 0)
            .unwrap()
    }

    #[test]
    fn joint_sgd_scalar_step() {
        // φ = relu(θ x) = θ x for θ, x > 0
        let mut bb = scalar_net(1.0);
        let mut h = head(0.5, Regularization::Ridge { beta: 1.0 });
        let batch = Dataset::new(Matrix::from_rows(&[&[2.0]]), Matrix::from_rows(&[&[3.0]])).unwrap();
        let mut opt = OptimizerState::sgd(0.0);
        let info = step_joint_sgd(&mut bb, &mut h, &batch, 0.1, 0.0, &mut opt).unwrap();
        // residual r = 0.5·2 − 3 = −2; grad_W = 2·r·φ = −8; grad_θ = 2·W·r·x = −4
        assert_eq!(info.loss, 4.0);
        assert!((h.w[(0, 0)] - 1.3).abs() < 1e-15);
        assert!((bb.weights()[0][(0, 0)] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut bb, data) = toy(1, 12);
        let before = bb.clone();
        let mut h = ridge_head(&bb, &data, 0.1);
        h.w = Matrix::from_fn(2, 6, |i, j| 0.1 * (i + j) as f64);
        let w0 = h.w.clone();
        step_joint_sgd(&mut bb, &mut h, &data, 0.0, 0.1, &mut OptimizerState::sgd(0.9)).unwrap();
        assert_eq!(bb, before);
        assert_eq!(h.w, w0);
    }

    #[test]
    fn momentum_off_matches_plain_steps() {
        let (bb, data) = toy(2, 10);
        let h = ridge_head(&bb, &data, 0.1);
        let (mut bb1, mut h1) = (bb.clone(), h.clone());
        let mut opt = OptimizerState::sgd(0.0);
        for _ in 0..2 {
            step_joint_sgd(&mut bb1, &mut h1, &data, 0.01, 0.1, &mut opt).unwrap();
        }
        let (mut bb2, mut h2) = (bb, h);
        for _ in 0..2 {
            step_joint_sgd(&mut bb2, &mut h2, &data, 0.01, 0.1, &mut OptimizerState::sgd(0.0)).unwrap();
        }
        assert_eq!(bb1, bb2);
        assert_eq!(h1.w, h2.w);
    }

    #[test]
    fn nesterov_scalar_trace() {
        let mut p = vec![1.0];
        let mut opt = OptimizerState::sgd(0.9);
        // g = 1 constant: v1 = 1, step 1.9α; v2 = 1.9, step (0.9·1.9 + 1)α = 2.71α
        opt.step(&mut [p.as_mut_slice()], &[&[1.0]], 0.1).unwrap();
        assert!((p[0] - (1.0 - 0.19)).abs() < 1e-15);
        opt.step(&mut [p.as_mut_slice()], &[&[1.0]], 0.1).unwrap();
        assert!((p[0] - (1.0 - 0.19 - 0.271)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        let mut p = vec![0.3, -0.2];
        let mut opt = OptimizerState::adam();
        opt.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0]], 0.01).unwrap();
        assert_eq!(p, vec![0.3, -0.2]);

        let mut q = vec![0.0, 0.0];
        let mut opt = OptimizerState::adam();
        opt.step(&mut [q.as_mut_slice()], &[&[5.0, -0.02]], 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is α·g/(|g| + ε)
        assert!((q[0] + 0.01).abs() < 1e-10);
        assert!((q[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let grads = [0.5, -1.0, 2.0, 0.0, 0.3];
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        let mut p = vec![1.0];
        let mut opt = OptimizerState::adam();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            opt.step(&mut [p.as_mut_slice()], &[&[g]], lr).unwrap();
            assert!((p[0] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn optimizer_rejects_layout_change() {
        let mut opt = OptimizerState::sgd(0.9);
        let mut p = vec![0.0; 2];
        opt.step(&mut [p.as_mut_slice()], &[&[1.0, 1.0]], 0.1).unwrap();
        let mut q = vec![0.0; 3];
        assert!(opt.step(&mut [q.as_mut_slice()], &[&[1.0, 1.0, 1.0]], 0.1).is_err());
    }

    #[test]
    fn full_batch_closed_form_zeroes_w_gradient() {
        let (mut bb, data) = toy(3, 15);
        let mut h = ridge_head(&bb, &data, 0.2);
        let before = bb.clone();
        let mut opt = OptimizerState::sgd(0.0);
        step_full_batch_closed_form(&mut bb, &mut h, &data, 0.01, 0.2, &mut opt).unwrap();
        let phi = augment_features(&before.features(&data.x).unwrap(), true);
        let g = ridge_loss(&h.w, &phi, &data.y, 0.2).unwrap().grad_w;
        assert!(g.frobenius_norm() <= 1e-8 * (1.0 + data.y.frobenius_norm()));
    }

    #[test]
    fn frozen_backbone_reports_induced_loss() {
        let (mut bb, data) = toy(4, 15);
        let mut h = ridge_head(&bb, &data, 0.5);
        let phi = augment_features(&bb.features(&data.x).unwrap(), true);
        let expected = crate::losses::induced_loss(&phi, &data.y, 0.5).unwrap();
        let info = step_full_batch_closed_form(&mut bb, &mut h, &data, 0.0, 0.5, &mut OptimizerState::sgd(0.0))
            .unwrap();
        assert_eq!(info.loss, expected);
        assert_eq!(ridge_loss(&h.w, &phi, &data.y, 0.5).unwrap().value, expected);
    }

    #[test]
    fn full_batch_induced_loss_decreases() {
        let (mut bb, data) = toy(5, 20);
        let mut h = ridge_head(&bb, &data, 0.1);
        let mut opt = OptimizerState::sgd(0.0);
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(step_full_batch_closed_form(&mut bb, &mut h, &data, 0.005, 0.1, &mut opt).unwrap().loss);
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{losses:?}");
        assert!(losses[49] < losses[0]);
    }

    #[test]
    fn naive_ridge_on_full_data_equals_full_batch() {
        let (bb, data) = toy(6, 12);
        let h = ridge_head(&bb, &data, 0.3);
        let (mut b1, mut h1, mut o1) = (bb.clone(), h.clone(), OptimizerState::sgd(0.9));
        let (mut b2, mut h2, mut o2) = (bb, h, OptimizerState::sgd(0.9));
        for _ in 0..3 {
            let a = step_full_batch_closed_form(&mut b1, &mut h1, &data, 0.01, 0.3, &mut o1).unwrap();
            let b = step_naive_batch_ridge(&mut b2, &mut h2, &data, 0.01, 0.3, &mut o2).unwrap();
            assert_eq!(a, b);
        }
        assert_eq!(b1, b2);
    }

    #[test]
    fn zero_targets_keep_ridge_head_zero() {
        let (mut bb, data) = toy(7, 10);
        let data = Dataset::new(data.x, Matrix::zeros(2, 10)).unwrap();
        let mut h = ridge_head(&bb, &data, 0.3);
        let mut opt = OptimizerState::sgd(0.0);
        for k in 0..3 {
            let batch = data.slice(3 * k, 3 * k + 4);
            step_naive_batch_ridge(&mut bb, &mut h, &batch, 0.1, 0.3, &mut opt).unwrap();
            assert_eq!(h.w.max_abs(), 0.0);
        }
    }

    #[test]
    fn algorithm1_huge_lambda_freezes_head() {
        let (mut bb, data) = toy(8, 10);
        let mut h = ridge_head(&bb, &data, 0.3);
        h.w = Matrix::from_fn(2, 6, |i, j| 0.2 * i as f64 - 0.1 * j as f64 + 0.05);
        let w0 = h.w.clone();
        let mut opt = OptimizerState::sgd(0.0);
        step_algorithm1(&mut bb, &mut h, &data, 0.0, 1e9, &mut opt).unwrap();
        assert!(h.w.sub(&w0).unwrap().frobenius_norm() <= 1e-6 * w0.frobenius_norm());
    }

    #[test]
    fn algorithm1_order_uses_post_step_features() {
        let (bb, data) = toy(9, 10);
        let mut h = ridge_head(&bb, &data, 0.3);
        h.w = Matrix::from_fn(2, 6, |i, j| 0.1 * (i as f64 - j as f64));
        let w_prev = h.w.clone();
        let mut b = bb.clone();
        let mut opt = OptimizerState::sgd(0.0);
        step_algorithm1(&mut b, &mut h, &data, 0.05, 2.0, &mut opt).unwrap();
        let phi_new = augment_features(&b.features(&data.x).unwrap(), true);
        let expected = proximal_solution(&data.y, &phi_new, &w_prev, 2.0).unwrap();
        assert_eq!(h.w, expected);
        // and the head is a minimizer of the proximal loss at θ_t
        let g = crate::losses::proximal_loss(&h.w, &phi_new, &data.y, &w_prev, 2.0).unwrap().grad_w;
        assert!(g.frobenius_norm() < 1e-8 * (1.0 + data.y.frobenius_norm()));
    }

    #[test]
    fn algorithm2_fits_next_batch() {
        let (bb, data) = toy(10, 12);
        let cur = data.slice(0, 6);
        let next = data.slice(6, 12);
        let mut h = ridge_head(&bb, &data, 0.3);
        let w_prev = h.w.clone();
        let mut b = bb.clone();
        let mut opt = OptimizerState::sgd(0.0);
        step_algorithm2(&mut b, &mut h, &cur, &next, 0.05, 1.0, &mut opt).unwrap();
        let phi = augment_features(&b.features(&next.x).unwrap(), true);
        assert_eq!(h.w, proximal_solution(&next.y, &phi, &w_prev, 1.0).unwrap());
    }

    #[test]
    fn algorithm2_small_lambda_tracks_full_batch_scheme() {
        // With the whole data as every batch and λ → 0, the lookahead order
        // reduces to "refit, then step": the full-batch closed-form iteration.
        let (bb, data) = toy(11, 16);
        let beta = 1e-9;
        let mut h_a = ridge_head(&bb, &data, beta);
        let mut b_a = bb.clone();
        let phi0 = augment_features(&b_a.features(&data.x).unwrap(), true);
        h_a.w = ridge_solution(&data.y, &phi0, beta).unwrap();
        let mut h_b = ridge_head(&bb, &data, beta);
        let mut b_b = bb;
        let (mut oa, mut ob) = (OptimizerState::sgd(0.0), OptimizerState::sgd(0.0));
        for _ in 0..5 {
            step_algorithm2(&mut b_a, &mut h_a, &data, &data, 0.01, beta, &mut oa).unwrap();
            step_full_batch_closed_form(&mut b_b, &mut h_b, &data, 0.01, beta, &mut ob).unwrap();
        }
        let diff = b_a
            .params_flat()
            .iter()
            .zip(b_b.params_flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn divergence_is_reported() {
        let (bb, data) = toy(12, 10);
        let mut cfg = TrainConfig::new(Method::JointSgdL2);
        cfg.learning_rate = 1e6;
        cfg.momentum = 0.0;
        cfg.epochs = 50;
        cfg.head_init = InitPolicy::Lecun;
        let h = HeadState::init(2, 5, true, InitPolicy::Lecun, Regularization::Ridge { beta: 0.0 + 1e-3 }, 1)
            .unwrap();
        let out = train(&cfg, bb, h, &data, None, EvalKind::Mse).unwrap();
        let d = out.divergence.expect("should diverge");
        assert!(d.iteration >= 1);
        assert!(out.records.windows(2).all(|w| w[0].iter < w[1].iter));
    }

    #[test]
    fn train_is_deterministic() {
        for method in [
            Method::JointSgdL2,
            Method::ClosedFormRidge,
            Method::ClosedFormProximalSimple,
            Method::ClosedFormProximalLookahead,
        ] {
            let (bb, data) = toy(13, 30);
            let mut cfg = TrainConfig::new(method);
            cfg.batch_size = Some(7);
            cfg.epochs = 3;
            cfg.learning_rate = 0.01;
            match method {
                Method::ClosedFormProximalSimple | Method::ClosedFormProximalLookahead => cfg.lambda = Some(1.0),
                _ => cfg.beta = Some(0.1),
            }
            let h = HeadState::init(2, 5, true, InitPolicy::Zeros, cfg.regularization().unwrap(), 0).unwrap();
            let a = train(&cfg, bb.clone(), h.clone(), &data, None, EvalKind::Mse).unwrap();
            let b = train(&cfg, bb, h, &data, None, EvalKind::Mse).unwrap();
            assert_eq!(a.records, b.records, "{method}");
            assert_eq!(a.records.len(), 4);
            assert_eq!(a.iterations, 15);
            assert!(a.records.iter().all(|r| r.wall_ms == 0));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(Method::ClosedFormRidge);
        assert!(cfg.validate().is_err());
        cfg.beta = Some(0.1);
        assert!(cfg.validate().is_ok());
        cfg.lambda = Some(1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::new(Method::ClosedFormProximalSimple);
        cfg.lambda = Some(-1.0);
        assert!(cfg.validate().is_err());
        cfg.lambda = Some(1.0);
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        assert_eq!("closed-form-ridge".parse::<Method>().unwrap(), Method::ClosedFormRidge);
        assert!("bogus".parse::<Method>().is_err());
    }
}
