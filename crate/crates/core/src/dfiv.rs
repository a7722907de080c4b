//! Two-stage deep-feature instrumental-variable regression with closed-form
//! last layers in both stages.
//!
//! Stage 1 fits `W φ̃_Z(z) ≈ ψ̃_X(x)` on `(x, z)` pairs. Stage 2 fits
//! `w W⋆(θ_X) φ̃_Z(z) ≈ y` on `(y, z)` pairs, where `W⋆(θ_X)` is the stage-1
//! head re-solved on the stage-1 batch with the treatment features at the
//! current `θ_X`. The structural estimate is `f̂(x) = w ψ̃_X(x)`. Tildes mean
//! a trailing constant feature.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, ForwardTape, MlpBackbone, ParamGrads, Parameterization};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::head::{augment_features, proximal_solution, ridge_solution, HeadState};
use crate::linalg::{matmul, matmul_nt, solve_spd, Matrix};
use crate::losses::squared_error;
use crate::optim::{self, EvalKind, Method, OptimizerKind, OptimizerState, TrainConfig};
use crate::record::RunRecord;
use crate::rng;

pub const X_DIM: usize = 5;
pub const Z_DIM: usize = 3;

/// The structural function reads `vᵀx = (x₀ − x₁)/√2`, which the confounder
/// direction `1/√3` leaves unchanged.
const V: [f64; X_DIM] = [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2, 0.0, 0.0, 0.0];

const OUTCOME_NOISE: f64 = 0.5;

/// Latent treatment `s = z + c·e·1/√3 + σ·ε`.
fn latent(z: &[f64], confound: f64, e: f64, eps: &[f64], sigma: f64) -> [f64; Z_DIM] {
    let u = confound * e / (Z_DIM as f64).sqrt();
    std::array::from_fn(|k| z[k] + u + sigma * eps[k])
}

/// Fixed injective embedding of the latent treatment into `R⁵`:
/// `(s₀, s₁, s₂, tanh(s₀ − s₂), s₁s₂/2)`. Every function of `x` is a function
/// of `s`, as with an image rendered from a few latent factors.
pub fn embed(s: &[f64]) -> [f64; X_DIM] {
    [s[0], s[1], s[2], (s[0] - s[2]).tanh(), 0.5 * s[1] * s[2]]
}

/// `f(x) = ((vᵀx)² − a)/b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralFn {
    pub a: f64,
    pub b: f64,
}

impl StructuralFn {
    /// Picks `a` and `b` so that `f(X)` has mean ≈ 0 and variance ≈ 1 under
    /// the treatment law with noise scale `sigma`, by a fixed-seed Monte
    /// Carlo of 200 000 draws. The confounder does not move `vᵀX`, so `c` is
    /// irrelevant here.
    pub fn calibrated(sigma: f64) -> Self {
        static CACHE: Mutex<Vec<(u64, StructuralFn)>> = Mutex::new(Vec::new());
        let key = sigma.to_bits();
        if let Some((_, f)) = CACHE.lock().unwrap().iter().find(|(k, _)| *k == key) {
            return *f;
        }
        let f = Self::monte_carlo(sigma);
        CACHE.lock().unwrap().push((key, f));
        f
    }

    fn monte_carlo(sigma: f64) -> Self {
        let mut r = rng::seeded(0x5eed_f00d);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        let unit = Self { a: 0.0, b: 1.0 };
        for _ in 0..n {
            let z: Vec<f64> = (0..Z_DIM).map(|_| rand::Rng::random_range(&mut r, -2.0..2.0)).collect();
            let eps: Vec<f64> = (0..Z_DIM).map(|_| rng::normal(&mut r)).collect();
            let q = unit.eval(&embed(&latent(&z, 0.0, 0.0, &eps, sigma)));
            s1 += q;
            s2 += q * q;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        Self { a: mean, b: var.sqrt() }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let p: f64 = V.iter().zip(x).map(|(v, x)| v * x).sum();
        (p * p - self.a) / self.b
    }

    /// Row vector of `f` over the columns of `x`.
    pub fn eval_columns(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(1, x.cols(), |_, j| self.eval(&x.column(j)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvParams {
    pub confound: f64,
    pub noise: f64,
    pub seed: u64,
}

/// One stage's samples. DFIV reads only `(x, z)` of stage 1 and `(y, z)` of
/// stage 2; the rest is kept for baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvSamples {
    pub x: Matrix,
    pub z: Matrix,
    pub y: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvDataset {
    pub stage1: IvSamples,
    pub stage2: IvSamples,
    /// Held-out treatments with the true structural values, for selection.
    pub val_x: Matrix,
    pub val_f: Matrix,
    pub test_x: Matrix,
    pub test_f: Matrix,
    pub f_struct: StructuralFn,
    pub params: IvParams,
}

fn draw_samples(n: usize, c: f64, sigma: f64, f: &StructuralFn, r: &mut rng::SeededRng) -> IvSamples {
    let mut x = Matrix::zeros(X_DIM, n);
    let mut z = Matrix::zeros(Z_DIM, n);
    let mut y = Matrix::zeros(1, n);
    for j in 0..n {
        let zj: Vec<f64> = (0..Z_DIM).map(|_| rand::Rng::random_range(r, -2.0..2.0)).collect();
        let e = rng::normal(r);
        let eps: Vec<f64> = (0..Z_DIM).map(|_| rng::normal(r)).collect();
        let xj = embed(&latent(&zj, c, e, &eps, sigma));
        y[(0, j)] = f.eval(&xj) + c * e + OUTCOME_NOISE * rng::normal(r);
        for (k, v) in xj.iter().enumerate() {
            x[(k, j)] = *v;
        }
        for (k, v) in zj.iter().enumerate() {
            z[(k, j)] = *v;
        }
    }
    IvSamples { x, z, y }
}

/// Synthetic confounded IV data: `Z ~ U[−2,2]³`, `e ~ N(0,1)`,
/// `S = Z + c·e·1/√3 + N(0, σ²I)`, `X = embed(S)`,
/// `Y = f(X) + c·e + N(0, 0.5²)`. Validation and test sets both have
/// `n_test` treatments.
pub fn generate_iv_data(n1: usize, n2: usize, n_test: usize, confound: f64, noise: f64, seed: u64) -> Result<IvDataset> {
    if n1 == 0 || n2 == 0 || n_test == 0 {
        return Err(Error::Config("IV sample sizes must be positive".into()));
    }
    if !(noise >= 0.0 && confound.is_finite()) {
        return Err(Error::Config(format!("bad generator params c = {confound}, σ = {noise}")));
    }
    let f = StructuralFn::calibrated(noise);
    let mut r = rng::seeded(seed);
    let stage1 = draw_samples(n1, confound, noise, &f, &mut r);
    let stage2 = draw_samples(n2, confound, noise, &f, &mut r);
    let val = draw_samples(n_test, confound, noise, &f, &mut r);
    let test = draw_samples(n_test, confound, noise, &f, &mut r);
    Ok(IvDataset {
        val_f: f.eval_columns(&val.x),
        val_x: val.x,
        test_f: f.eval_columns(&test.x),
        test_x: test.x,
        stage1,
        stage2,
        f_struct: f,
        params: IvParams { confound, noise, seed },
    })
}

fn write_columns(path: &Path, header: &str, blocks: &[&Matrix]) -> Result<()> {
    use std::fmt::Write as _;
    let n = blocks[0].cols();
    let mut out = String::from(header);
    out.push('\n');
    for j in 0..n {
        let row: Vec<String> = blocks
            .iter()
            .flat_map(|m| (0..m.rows()).map(move |i| m[(i, j)].to_string()))
            .collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl IvDataset {
    /// Writes `stage1.csv`, `stage2.csv`, `val.csv`, `test.csv` and
    /// `params.json` into `dir`.
    pub fn write_csv_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let xs: Vec<String> = (0..X_DIM).map(|k| format!("x{k}")).collect();
        let zs: Vec<String> = (0..Z_DIM).map(|k| format!("z{k}")).collect();
        let stage_header = format!("{},{},y", xs.join(","), zs.join(","));
        for (name, s) in [("stage1.csv", &self.stage1), ("stage2.csv", &self.stage2)] {
            write_columns(&dir.join(name), &stage_header, &[&s.x, &s.z, &s.y])?;
        }
        let eval_header = format!("{},f", xs.join(","));
        write_columns(&dir.join("val.csv"), &eval_header, &[&self.val_x, &self.val_f])?;
        write_columns(&dir.join("test.csv"), &eval_header, &[&self.test_x, &self.test_f])?;
        let meta = serde_json::json!({ "params": self.params, "f_struct": self.f_struct });
        let path = dir.join("params.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfivVariant {
    /// Proximal heads with `λ₁` (stage 1) and `λ₂` (stage 2).
    Proximal { lambda1: f64, lambda2: f64 },
    /// Ridge heads re-solved per batch with `β₁`, `β₂`.
    Ridge { beta1: f64, beta2: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfivConfig {
    pub variant: DfivVariant,
    /// Coefficient of the stage-1 head re-solved inside stage 2 (proximal only).
    pub lambda12: f64,
    pub x_layers: Vec<usize>,
    pub z_layers: Vec<usize>,
    pub activation: Activation,
    pub lr1: f64,
    pub lr2: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub batch1: Option<usize>,
    pub batch2: Option<usize>,
    pub t1: usize,
    pub t2: usize,
    /// Outer iterations (each runs `t1` stage-1 and `t2` stage-2 updates).
    pub iterations: usize,
    /// Emit a record every this many outer iterations (and at the end).
    pub eval_every: usize,
    pub seed: u64,
    pub record_wall_time: bool,
}

impl Default for DfivConfig {
    fn default() -> Self {
        Self {
            variant: DfivVariant::Proximal {
                lambda1: 100.0,
                lambda2: 100.0,
            },
            lambda12: 1e-4,
            x_layers: vec![X_DIM, 32, 8],
            z_layers: vec![Z_DIM, 32, 32],
            activation: Activation::Relu,
            lr1: 1e-3,
            lr2: 1e-3,
            momentum: 0.9,
            optimizer: OptimizerKind::Adam,
            batch1: Some(64),
            batch2: Some(64),
            t1: 20,
            t2: 1,
            iterations: 600,
            eval_every: 10,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl DfivConfig {
    pub fn validate(&self) -> Result<()> {
        let coefs = match self.variant {
            DfivVariant::Proximal { lambda1, lambda2 } => [lambda1, lambda2, self.lambda12],
            DfivVariant::Ridge { beta1, beta2 } => [beta1, beta2, beta1],
        };
        if coefs.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Config(format!("DFIV coefficients must be > 0, got {coefs:?}")));
        }
        if self.t1 == 0 || self.t2 == 0 {
            return Err(Error::Config("T1 and T2 must be at least 1".into()));
        }
        if !(self.lr1 >= 0.0 && self.lr2 >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.x_layers.first() != Some(&X_DIM) || self.z_layers.first() != Some(&Z_DIM) {
            return Err(Error::Config(format!(
                "treatment net must start at {X_DIM} inputs and instrument net at {Z_DIM}"
            )));
        }
        if self.batch1 == Some(0) || self.batch2 == Some(0) || self.eval_every == 0 {
            return Err(Error::Config("batch sizes and eval_every must be positive".into()));
        }
        Ok(())
    }

    fn stage1_coef(&self) -> f64 {
        match self.variant {
            DfivVariant::Proximal { lambda1, .. } => lambda1,
            DfivVariant::Ridge { beta1, .. } => beta1,
        }
    }

    fn inner_coef(&self) -> f64 {
        match self.variant {
            DfivVariant::Proximal { .. } => self.lambda12,
            DfivVariant::Ridge { beta1, .. } => beta1,
        }
    }

    fn stage2_coef(&self) -> f64 {
        match self.variant {
            DfivVariant::Proximal { lambda2, .. } => lambda2,
            DfivVariant::Ridge { beta2, .. } => beta2,
        }
    }

    fn is_proximal(&self) -> bool {
        matches!(self.variant, DfivVariant::Proximal { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfivState {
    /// `ψ_{θ_X}`.
    pub x_net: MlpBackbone,
    /// `φ_{θ_Z}`.
    pub z_net: MlpBackbone,
    /// Stage-1 head, `(d_X + 1) × (d_Z + 1)`.
    pub w1: Matrix,
    /// Stage-2 head, `1 × (d_X + 1)`.
    pub w2: Matrix,
    pub t1: usize,
    pub t2: usize,
}

impl DfivState {
    pub fn init(cfg: &DfivConfig) -> Result<Self> {
        cfg.validate()?;
        let x_net = MlpBackbone::init(&cfg.x_layers, cfg.activation, Parameterization::Standard, cfg.seed)?;
        let z_net = MlpBackbone::init(
            &cfg.z_layers,
            cfg.activation,
            Parameterization::Standard,
            cfg.seed.wrapping_add(0x9e37_79b9),
        )?;
        let dx = x_net.feature_dim() + 1;
        let dz = z_net.feature_dim() + 1;
        Ok(Self {
            x_net,
            z_net,
            w1: Matrix::zeros(dx, dz),
            w2: Matrix::zeros(1, dx),
            t1: 0,
            t2: 0,
        })
    }

    /// `f̂(x) = w ψ̃(x)` over the columns of `x`.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        matmul(&self.w2, &augment_features(&self.x_net.features(x)?, true))
    }
}

/// Both optimizers of a run.
#[derive(Clone, Debug)]
pub struct DfivOptimizers {
    pub z: OptimizerState,
    pub x: OptimizerState,
}

impl DfivOptimizers {
    pub fn new(cfg: &DfivConfig) -> Self {
        let make = || match cfg.optimizer {
            OptimizerKind::Sgd => OptimizerState::sgd(cfg.momentum),
            OptimizerKind::Adam => OptimizerState::adam(),
        };
        Self { z: make(), x: make() }
    }
}

fn update_net(net: &mut MlpBackbone, tape: &ForwardTape, grad_aug: &Matrix, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    let grads = net.backward(tape, &grad_aug.top_rows(net.feature_dim()))?;
    let slices = grads.slices();
    let mut params = net.param_slices_mut();
    opt.step(&mut params, &slices, lr)
}

fn closed_form(y: &Matrix, phi: &Matrix, anchor: &Matrix, coef: f64, proximal: bool) -> Result<Matrix> {
    if proximal {
        proximal_solution(y, phi, anchor, coef)
    } else {
        ridge_solution(y, phi, coef)
    }
}

fn diverged(loss: f64, iteration: usize) -> Error {
    Error::Divergence { iteration, loss }
}

/// One stage-1 update on the batch `(x, z)`: a `θ_Z` step on
/// `Σ‖Wφ̃(z) − ψ̃(x)‖²` with `W` fixed, then the closed-form refit of `W` at
/// the new `θ_Z`. Returns the loss before the step and `‖ΔW‖_F`.
pub fn stage1_step(
    state: &mut DfivState,
    cfg: &DfivConfig,
    x: &Matrix,
    z: &Matrix,
    opt: &mut OptimizerState,
) -> Result<(f64, f64)> {
    let targets = augment_features(&state.x_net.features(x)?, true);
    let (phi, tape) = state.z_net.forward(z)?;
    let phi = augment_features(&phi, true);
    let report = squared_error(&state.w1, &phi, &targets)?;
    if !report.value.is_finite() {
        return Err(diverged(report.value, state.t1 + 1));
    }
    update_net(&mut state.z_net, &tape, &report.grad_features, opt, cfg.lr1)?;
    let phi_new = augment_features(&state.z_net.features(z)?, true);
    let w_new = closed_form(&targets, &phi_new, &state.w1, cfg.stage1_coef(), cfg.is_proximal())?;
    let delta = w_new.sub(&state.w1)?.frobenius_norm();
    state.w1 = w_new;
    state.t1 += 1;
    if !(state.w1.is_finite() && state.z_net.is_finite()) {
        return Err(diverged(report.value, state.t1));
    }
    Ok((report.value, delta))
}

/// The stage-1 head re-solved on the stage-1 batch at the current `θ_X`:
/// `(Ψ̃Φ̃ᵀ + cW₁)(Φ̃Φ̃ᵀ + cI)⁻¹` (anchor dropped for the ridge variant).
pub fn inner_head(state: &DfivState, cfg: &DfivConfig, psi1: &Matrix, phi1: &Matrix) -> Result<Matrix> {
    closed_form(psi1, phi1, &state.w1, cfg.inner_coef(), cfg.is_proximal())
}

/// Stage-2 loss `Σ‖w W⋆(θ_X) φ̃(z₂) − y‖²` and its gradient in `θ_X` with
/// `w` and `θ_Z` held fixed.
pub fn stage2_gradient(
    state: &DfivState,
    cfg: &DfivConfig,
    x1: &Matrix,
    z1: &Matrix,
    y2: &Matrix,
    z2: &Matrix,
) -> Result<(f64, ParamGrads)> {
    let phi1 = augment_features(&state.z_net.features(z1)?, true);
    let phi2 = augment_features(&state.z_net.features(z2)?, true);
    let (psi1, tape) = state.x_net.forward(x1)?;
    let psi1 = augment_features(&psi1, true);
    let w_star = inner_head(state, cfg, &psi1, &phi1)?;
    let report = squared_error(&state.w2, &matmul(&w_star, &phi2)?, y2)?;
    // ∂L/∂W⋆ = (∂L/∂F) φ̃₂ᵀ, and W⋆ = (Ψ̃Φ̃ᵀ + cA)M with M = (Φ̃Φ̃ᵀ + cI)⁻¹,
    // so ∂L/∂Ψ̃ = (∂L/∂W⋆) M Φ̃.
    let grad_w_star = matmul_nt(&report.grad_features, &phi2)?;
    let mut gram = matmul_nt(&phi1, &phi1)?;
    gram.add_diagonal(cfg.inner_coef());
    let m_phi = solve_spd(&gram, &phi1)?;
    let grad_psi = matmul(&grad_w_star, &m_phi)?;
    let grads = state.x_net.backward(&tape, &grad_psi.top_rows(state.x_net.feature_dim()))?;
    Ok((report.value, grads))
}

/// One stage-2 update: re-solve `W⋆(θ_X)` on the stage-1 batch, take a `θ_X`
/// step on `Σ‖w W⋆(θ_X) φ̃(z₂) − y‖²` with `w` fixed (differentiating through
/// `W⋆`'s dependence on the treatment features), re-solve `W⋆` at the new
/// `θ_X`, then refit `w` in closed form. Returns the loss and `‖Δw‖_F`.
pub fn stage2_step(
    state: &mut DfivState,
    cfg: &DfivConfig,
    x1: &Matrix,
    z1: &Matrix,
    y2: &Matrix,
    z2: &Matrix,
    opt: &mut OptimizerState,
) -> Result<(f64, f64)> {
    let (loss, grads) = stage2_gradient(state, cfg, x1, z1, y2, z2)?;
    if !loss.is_finite() {
        return Err(diverged(loss, state.t2 + 1));
    }
    let slices = grads.slices();
    opt.step(&mut state.x_net.param_slices_mut(), &slices, cfg.lr2)?;
    let phi1 = augment_features(&state.z_net.features(z1)?, true);
    let phi2 = augment_features(&state.z_net.features(z2)?, true);
    let psi1_new = augment_features(&state.x_net.features(x1)?, true);
    let w_star_new = inner_head(state, cfg, &psi1_new, &phi1)?;
    let features_new = matmul(&w_star_new, &phi2)?;
    let w_new = closed_form(y2, &features_new, &state.w2, cfg.stage2_coef(), cfg.is_proximal())?;
    let delta = w_new.sub(&state.w2)?.frobenius_norm();
    state.w2 = w_new;
    state.t2 += 1;
    if !(state.w2.is_finite() && state.x_net.is_finite()) {
        return Err(diverged(loss, state.t2));
    }
    Ok((loss, delta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Refit both heads by ridge (coefficient 0.01) on all training data.
    Reestimate,
    /// Use the heads as they are.
    Current,
}

pub const REESTIMATE_RIDGE: f64 = 0.01;

/// Stage-2 head refit by ridge on the whole training data (both stages).
pub fn reestimated_head(state: &DfivState, data: &IvDataset) -> Result<Matrix> {
    let psi = augment_features(&state.x_net.features(&data.stage1.x)?, true);
    let phi1 = augment_features(&state.z_net.features(&data.stage1.z)?, true);
    let w1 = ridge_solution(&psi, &phi1, REESTIMATE_RIDGE)?;
    let phi2 = augment_features(&state.z_net.features(&data.stage2.z)?, true);
    ridge_solution(&data.stage2.y, &matmul(&w1, &phi2)?, REESTIMATE_RIDGE)
}

fn mse_against(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    optim::mse(pred, truth)
}

/// Mean squared error of `f̂` against the true structural function on the
/// test treatments.
pub fn dfiv_evaluate(state: &DfivState, data: &IvDataset, mode: EvalMode) -> Result<f64> {
    evaluate_on(state, data, mode, &data.test_x, &data.test_f)
}

/// Same as [`dfiv_evaluate`] on the validation treatments.
pub fn dfiv_validate(state: &DfivState, data: &IvDataset, mode: EvalMode) -> Result<f64> {
    evaluate_on(state, data, mode, &data.val_x, &data.val_f)
}

fn evaluate_on(state: &DfivState, data: &IvDataset, mode: EvalMode, x: &Matrix, f: &Matrix) -> Result<f64> {
    let w2 = match mode {
        EvalMode::Current => state.w2.clone(),
        EvalMode::Reestimate => reestimated_head(state, data)?,
    };
    let psi = augment_features(&state.x_net.features(x)?, true);
    mse_against(&matmul(&w2, &psi)?, f)
}

#[derive(Clone, Debug)]
pub struct DfivOutcome {
    pub state: DfivState,
    /// `train_loss` is the stage-2 loss per sample over all stage-2 pairs,
    /// `eval_metric` the
    /// validation MSE with the current heads, `w_delta` the mean `‖Δw‖_F`.
    pub records: Vec<RunRecord>,
    pub divergence: Option<optim::DivergenceInfo>,
}

/// Runs the alternating two-stage loop: per outer iteration, sample one batch
/// per stage, do `T₁` stage-1 updates on it, then `T₂` stage-2 updates.
pub fn dfiv_train(cfg: &DfivConfig, data: &IvDataset) -> Result<DfivOutcome> {
    let mut state = DfivState::init(cfg)?;
    let mut opts = DfivOptimizers::new(cfg);
    let start = std::time::Instant::now();
    let n1 = data.stage1.x.cols();
    let n2 = data.stage2.y.cols();
    let mut s1 = BatchSampler::new(n1, cfg.batch1.unwrap_or(n1), cfg.seed.wrapping_mul(2).wrapping_add(1))?;
    let mut s2 = BatchSampler::new(n2, cfg.batch2.unwrap_or(n2), cfg.seed.wrapping_mul(2).wrapping_add(2))?;
    let wall = || {
        if cfg.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let mut records = vec![RunRecord {
        iter: 0,
        train_loss: stage2_train_loss(&state, data)?,
        eval_metric: dfiv_validate(&state, data, EvalMode::Current)?,
        w_delta: 0.0,
        wall_ms: wall(),
    }];
    let mut divergence = None;
    let (mut delta_acc, mut count) = (0.0, 0usize);
    for it in 1..=cfg.iterations {
        let b1 = s1.next_batch();
        let b2 = s2.next_batch();
        let x1 = data.stage1.x.select_columns(&b1);
        let z1 = data.stage1.z.select_columns(&b1);
        let y2 = data.stage2.y.select_columns(&b2);
        let z2 = data.stage2.z.select_columns(&b2);
        let result = (|| -> Result<()> {
            for _ in 0..cfg.t1 {
                stage1_step(&mut state, cfg, &x1, &z1, &mut opts.z)?;
            }
            for _ in 0..cfg.t2 {
                let (_, delta) = stage2_step(&mut state, cfg, &x1, &z1, &y2, &z2, &mut opts.x)?;
                delta_acc += delta;
                count += 1;
            }
            Ok(())
        })();
        match result {
            Ok(()) => {}
            Err(Error::Divergence { iteration, loss }) => {
                divergence = Some(optim::DivergenceInfo { iteration, loss });
                break;
            }
            Err(e) => return Err(e),
        }
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            records.push(RunRecord {
                iter: it,
                train_loss: stage2_train_loss(&state, data)?,
                eval_metric: dfiv_validate(&state, data, EvalMode::Current)?,
                w_delta: delta_acc / count.max(1) as f64,
                wall_ms: wall(),
            });
            (delta_acc, count) = (0.0, 0);
        }
    }
    Ok(DfivOutcome {
        state,
        records,
        divergence,
    })
}

/// `Σ‖w W φ̃(z) − y‖²/n` over all stage-2 pairs with the current heads.
pub fn stage2_train_loss(state: &DfivState, data: &IvDataset) -> Result<f64> {
    let phi = augment_features(&state.z_net.features(&data.stage2.z)?, true);
    let pred = matmul(&state.w2, &matmul(&state.w1, &phi)?)?;
    mse_against(&pred, &data.stage2.y)
}

/// Plain regression of `Y` on `X` over both stages' pairs, ignoring the
/// instrument. Returns the trained model's test MSE against `f`.
pub fn naive_regression(data: &IvDataset, cfg: &TrainConfig, hidden: &[usize], activation: Activation) -> Result<f64> {
    let x = data.stage1.x.hstack(&data.stage2.x)?;
    let y = data.stage1.y.hstack(&data.stage2.y)?;
    let train = Dataset::new(x, y)?;
    let mut dims = vec![X_DIM];
    dims.extend_from_slice(hidden);
    let bb = MlpBackbone::init(&dims, activation, Parameterization::Standard, cfg.seed)?;
    let head = HeadState::init(1, bb.feature_dim(), cfg.has_bias, cfg.head_init, cfg.regularization()?, cfg.seed)?;
    let out = optim::train(cfg, bb, head, &train, None, EvalKind::Mse)?;
    let pred = out.head.predict(&out.backbone.features(&data.test_x)?)?;
    mse_against(&pred, &data.test_f)
}

/// Default settings for [`naive_regression`].
pub fn naive_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(Method::ClosedFormProximalSimple);
    cfg.lambda = Some(1.0);
    cfg.batch_size = Some(64);
    cfg.optimizer = OptimizerKind::Adam;
    cfg.learning_rate = 1e-2;
    cfg.epochs = 50;
    cfg.seed = seed;
    cfg
}

/// `‖Y − Ŷ‖²/n` of the stage-1 head at the current nets, for diagnostics.
pub fn stage1_residual(state: &DfivState, x: &Matrix, z: &Matrix) -> Result<f64> {
    let targets = augment_features(&state.x_net.features(x)?, true);
    let phi = augment_features(&state.z_net.features(z)?, true);
    let pred = matmul(&state.w1, &phi)?;
    Ok(pred.sub(&targets)?.sum_squares() / x.cols().max(1) as f64)
}
