//! Numerical checks of the closed-form-head theory: the envelope gradient,
//! the Kalman/MAP reading of the proximal update, the critical-point
//! structure of the induced loss in feature space, and kernel gradient flow.
//!
//! In feature space, with `A = ΦΦᵀ + βI` and `P = ΦᵀA⁻¹Φ`, the targets split
//! into `Y⋆ = YP` (reachable through the features) and `Y⊥ = Y − Y⋆`. The
//! induced loss is `L⋆(Φ) = tr(Y(I − P)Yᵀ)` and its gradient is
//! `−2A⁻¹ΦYᵀY⊥`, which vanishes exactly when `Y⋆ᵀY⊥ = 0`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::MlpBackbone;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::head::{augment_features, proximal_solution, ridge_solution};
use crate::linalg::{matmul, matmul_nt, matmul_tn, solve_spd, sym_eigvals, sym_spectral_norm, Cholesky, Matrix};
use crate::losses::{induced_loss, induced_proximal_loss, proximal_loss, ridge_loss};

/// Which induced loss the envelope check differentiates.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvelopeMode {
    Ridge { beta: f64 },
    Proximal { w_prev: Matrix, lambda: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    /// `∇_θ L(W⋆, θ)` with `W⋆` held fixed, flattened in parameter order.
    pub analytic: Vec<f64>,
    /// Central differences of `θ ↦ L⋆(θ)`, re-solving `W⋆` at every evaluation.
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Entrywise relative error `|a − n| / max(|a|, |n|, floor)` with the floor at
/// `1e-3 · max|n|` (and never below `1e-12`), so that entries that are zero
/// up to rounding do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn induced_value(bb: &MlpBackbone, data: &Dataset, has_bias: bool, mode: &EnvelopeMode) -> Result<f64> {
    let phi = augment_features(&bb.features(&data.x)?, has_bias);
    match mode {
        EnvelopeMode::Ridge { beta } => induced_loss(&phi, &data.y, *beta),
        EnvelopeMode::Proximal { w_prev, lambda } => induced_proximal_loss(&phi, &data.y, w_prev, *lambda),
    }
}

/// Analytic envelope gradient only.
pub fn envelope_gradient(bb: &MlpBackbone, data: &Dataset, has_bias: bool, mode: &EnvelopeMode) -> Result<Vec<f64>> {
    let (features, tape) = bb.forward(&data.x)?;
    let phi = augment_features(&features, has_bias);
    let report = match mode {
        EnvelopeMode::Ridge { beta } => {
            let w = ridge_solution(&data.y, &phi, *beta)?;
            ridge_loss(&w, &phi, &data.y, *beta)?
        }
        EnvelopeMode::Proximal { w_prev, lambda } => {
            let w = proximal_solution(&data.y, &phi, w_prev, *lambda)?;
            proximal_loss(&w, &phi, &data.y, w_prev, *lambda)?
        }
    };
    let grad = report.grad_features.top_rows(bb.feature_dim());
    Ok(bb.backward(&tape, &grad)?.flatten())
}

/// Central differences of `θ ↦ L⋆(θ)` with `h = 1e-5·(1 + |θ_i|)`.
pub fn induced_loss_fd_gradient(
    bb: &MlpBackbone,
    data: &Dataset,
    has_bias: bool,
    mode: &EnvelopeMode,
) -> Result<Vec<f64>> {
    let theta = bb.params_flat();
    let mut probe = bb.clone();
    let mut out = Vec::with_capacity(theta.len());
    let mut params = theta.clone();
    for i in 0..theta.len() {
        let h = 1e-5 * (1.0 + theta[i].abs());
        params[i] = theta[i] + h;
        probe.set_params_flat(&params)?;
        let plus = induced_value(&probe, data, has_bias, mode)?;
        params[i] = theta[i] - h;
        probe.set_params_flat(&params)?;
        let minus = induced_value(&probe, data, has_bias, mode)?;
        params[i] = theta[i];
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn check_envelope_gradient(
    bb: &MlpBackbone,
    data: &Dataset,
    has_bias: bool,
    mode: &EnvelopeMode,
) -> Result<EnvelopeReport> {
    let analytic = envelope_gradient(bb, data, has_bias, mode)?;
    let numeric = induced_loss_fd_gradient(bb, data, has_bias, mode)?;
    let max_rel_err = max_relative_error(&analytic, &numeric);
    Ok(EnvelopeReport {
        analytic,
        numeric,
        max_rel_err,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanReport {
    pub lambda: f64,
    pub closed_form: Matrix,
    pub map: Matrix,
    pub rel_err: f64,
    pub cg_iterations: usize,
}

/// Minimizes `‖Y − WΦ‖²/(2σ_Y²) + ‖W − W_prev‖²/(2σ_W²)` by conjugate
/// gradients, never forming or factoring `ΦΦᵀ + λI`.
pub fn map_estimate(
    y: &Matrix,
    phi: &Matrix,
    w_prev: &Matrix,
    sigma_y: f64,
    sigma_w: f64,
) -> Result<(Matrix, usize)> {
    if !(sigma_y > 0.0 && sigma_w > 0.0) {
        return Err(Error::Config(format!(
            "noise scales must be positive (σ_Y = {sigma_y}, σ_W = {sigma_w})"
        )));
    }
    if w_prev.shape() != (y.rows(), phi.rows()) || y.cols() != phi.cols() {
        return Err(Error::dim(
            "map_estimate",
            format!("W_prev ({}, {}), matching sample counts", y.rows(), phi.rows()),
            format!("W_prev {:?}, Y {:?}, Φ {:?}", w_prev.shape(), y.shape(), phi.shape()),
        ));
    }
    let (py, pw) = (1.0 / (sigma_y * sigma_y), 1.0 / (sigma_w * sigma_w));
    // Hessian-vector product V ↦ (VΦ)Φᵀ/σ_Y² + V/σ_W²
    let hess = |v: &Matrix| -> Result<Matrix> {
        let mut out = matmul_nt(&matmul(v, phi)?, phi)?.scale(py);
        out.axpy(pw, v)?;
        Ok(out)
    };
    let mut b = matmul_nt(y, phi)?.scale(py);
    b.axpy(pw, w_prev)?;
    let b_norm = b.frobenius_norm();
    let mut w = w_prev.clone();
    if b_norm == 0.0 {
        return Ok((Matrix::zeros(w.rows(), w.cols()), 0));
    }
    let dim = w.rows() * w.cols();
    let mut iterations = 0;
    for _restart in 0..20 {
        let mut r = b.sub(&hess(&w)?)?;
        if r.frobenius_norm() <= 1e-15 * b_norm {
            break;
        }
        let mut p = r.clone();
        let mut rr = r.sum_squares();
        for _ in 0..dim.max(1) {
            let hp = hess(&p)?;
            let curv: f64 = p.data().iter().zip(hp.data()).map(|(a, b)| a * b).sum();
            if !(curv > 0.0) {
                break;
            }
            let step = rr / curv;
            w.axpy(step, &p)?;
            r.axpy(-step, &hp)?;
            iterations += 1;
            let rr_new = r.sum_squares();
            if rr_new.sqrt() <= 1e-15 * b_norm {
                break;
            }
            p = p.scale(rr_new / rr);
            p.axpy(1.0, &r)?;
            rr = rr_new;
        }
    }
    Ok((w, iterations))
}

/// Compares the proximal solution at `λ = σ_Y²/σ_W²` with the MAP estimate of
/// the Gaussian model `y = Wφ + N(0, σ_Y²)`, `W ~ N(W_prev, σ_W²)`.
pub fn check_kalman_equivalence(
    y: &Matrix,
    phi: &Matrix,
    w_prev: &Matrix,
    sigma_y: f64,
    sigma_w: f64,
) -> Result<KalmanReport> {
    let lambda = (sigma_y * sigma_y) / (sigma_w * sigma_w);
    let closed_form = proximal_solution(y, phi, w_prev, lambda)?;
    let (map, cg_iterations) = map_estimate(y, phi, w_prev, sigma_y, sigma_w)?;
    let rel_err = closed_form.sub(&map)?.frobenius_norm() / map.frobenius_norm().max(f64::MIN_POSITIVE);
    Ok(KalmanReport {
        lambda,
        closed_form,
        map,
        rel_err,
        cg_iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub y_star: Matrix,
    pub y_perp: Matrix,
    /// `Φᵀ(ΦΦᵀ + βI)⁻¹Φ`, `n × n`.
    pub p_beta: Matrix,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must be > 0, got {beta}")))
    }
}

fn regularized_gram(phi: &Matrix, beta: f64) -> Result<Matrix> {
    let mut a = matmul_nt(phi, phi)?;
    a.add_diagonal(beta);
    Ok(a)
}

pub fn decompose(y: &Matrix, phi: &Matrix, beta: f64) -> Result<Decomposition> {
    check_beta(beta)?;
    if y.cols() != phi.cols() {
        return Err(Error::dim("decompose", format!("{} columns", phi.cols()), y.cols()));
    }
    let s = solve_spd(&regularized_gram(phi, beta)?, phi)?;
    let p_beta = matmul_tn(phi, &s)?;
    let y_star = matmul(y, &p_beta)?;
    let y_perp = y.sub(&y_star)?;
    Ok(Decomposition {
        y_star,
        y_perp,
        p_beta,
    })
}

/// Exact gradient of `Φ ↦ L⋆(Φ)`: `−2(ΦΦᵀ + βI)⁻¹ΦYᵀY⊥ = 2W⋆ᵀ(W⋆Φ − Y)`.
pub fn functional_gradient(y: &Matrix, phi: &Matrix, beta: f64) -> Result<Matrix> {
    let dec = decompose(y, phi, beta)?;
    let rhs = matmul(phi, &matmul_tn(y, &dec.y_perp)?)?;
    Ok(solve_spd(&regularized_gram(phi, beta)?, &rhs)?.scale(-2.0))
}

/// `−2(ΦΦᵀ + βI)⁻¹ΦY⋆ᵀY⊥`, which replaces `Yᵀ` by `Y⋆ᵀ`. It agrees with
/// [`functional_gradient`] only as `β → 0`; kept for comparison.
pub fn compressed_functional_gradient(y: &Matrix, phi: &Matrix, beta: f64) -> Result<Matrix> {
    let dec = decompose(y, phi, beta)?;
    let rhs = matmul(phi, &matmul_tn(&dec.y_star, &dec.y_perp)?)?;
    Ok(solve_spd(&regularized_gram(phi, beta)?, &rhs)?.scale(-2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Criticality {
    pub critical: bool,
    pub is_global: bool,
    /// `‖Y⋆ᵀY⊥‖_F`.
    pub cross_norm: f64,
    /// `‖Y⊥‖_F`.
    pub perp_norm: f64,
}

pub const DEFAULT_CRITICAL_TOL: f64 = 1e-8;

/// Critical iff `‖Y⋆ᵀY⊥‖_F ≤ tol·(1 + ‖Y‖²_F)`; global iff also
/// `‖Y⊥‖_F ≤ tol·(1 + ‖Y‖_F)`.
pub fn is_critical(y: &Matrix, phi: &Matrix, beta: f64, tol: f64) -> Result<Criticality> {
    let dec = decompose(y, phi, beta)?;
    let cross_norm = matmul_tn(&dec.y_star, &dec.y_perp)?.frobenius_norm();
    let perp_norm = dec.y_perp.frobenius_norm();
    let y_norm = y.frobenius_norm();
    let critical = cross_norm <= tol * (1.0 + y_norm * y_norm);
    Ok(Criticality {
        critical,
        is_global: critical && perp_norm <= tol * (1.0 + y_norm),
        cross_norm,
        perp_norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// `dΦ/dt = −Ξ∇L⋆ = 2ΞA⁻¹ΦYᵀY⊥`.
    Exact,
    /// `dΦ/dt = 2ΞA⁻¹ΦY⋆ᵀY⊥`.
    Compressed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub phi: Matrix,
    pub xi: Matrix,
    pub beta: f64,
    pub t: f64,
}

impl FlowState {
    /// Checks that `Ξ` is symmetric positive definite and matches `Φ`.
    pub fn new(phi: Matrix, xi: Matrix, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        if xi.shape() != (phi.rows(), phi.rows()) {
            return Err(Error::dim(
                "flow kernel",
                format!("({0}, {0})", phi.rows()),
                format!("{:?}", xi.shape()),
            ));
        }
        let eigs = sym_eigvals(&xi)?;
        if eigs.first().is_some_and(|&e| !(e > 0.0)) {
            return Err(Error::NotPositiveDefinite {
                index: 0,
                pivot: eigs[0],
            });
        }
        Ok(Self { phi, xi, beta, t: 0.0 })
    }

    /// The default surrogate kernel `Ξ = MMᵀ/d + 0.1·I` with Gaussian `M`.
    pub fn default_kernel(d: usize, rng: &mut impl rand::Rng) -> Matrix {
        let m = crate::rng::normal_matrix(rng, d, d, 1.0);
        let mut xi = matmul_nt(&m, &m).unwrap().scale(1.0 / d as f64);
        xi.add_diagonal(0.1);
        // exact symmetry for the Jacobi/Cholesky checks
        Matrix::from_fn(d, d, |i, j| 0.5 * (xi[(i, j)] + xi[(j, i)]))
    }
}

/// Right-hand side of the flow at `Φ`.
pub fn flow_rhs(phi: &Matrix, xi: &Matrix, y: &Matrix, beta: f64, kind: FlowKind) -> Result<Matrix> {
    let grad = match kind {
        FlowKind::Exact => functional_gradient(y, phi, beta)?,
        FlowKind::Compressed => compressed_functional_gradient(y, phi, beta)?,
    };
    Ok(matmul(xi, &grad)?.scale(-1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    pub kind: FlowKind,
    /// Initial step; `None` means `0.1/‖Ξ‖₂`.
    pub dt: Option<f64>,
    /// Maximum number of accepted steps.
    pub max_steps: usize,
    /// Step-doubling error control; `false` integrates with a fixed `dt`.
    pub adaptive: bool,
    /// Local error tolerance for adaptive stepping, relative to `1 + max|Φ|`.
    pub tol: f64,
    /// Stop once `‖Y⊥‖_F ≤ stop_ratio·‖Y‖_F`.
    pub stop_ratio: Option<f64>,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            kind: FlowKind::Exact,
            dt: None,
            max_steps: 100_000,
            adaptive: true,
            tol: 1e-10,
            stop_ratio: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowPoint {
    pub t: f64,
    /// Eigenvalues of `Y⋆Y⋆ᵀ`, ascending.
    pub eigenvalues: Vec<f64>,
    pub perp_norm: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<FlowPoint>,
    pub final_state: FlowState,
    pub steps: usize,
    pub rejected: usize,
    pub converged: bool,
}

impl Trajectory {
    /// Same points in reverse time order (for negative controls).
    pub fn reversed(&self) -> Trajectory {
        let mut t = self.clone();
        t.points.reverse();
        t
    }

    pub fn to_csv(&self) -> String {
        let o = self.points.first().map_or(0, |p| p.eigenvalues.len());
        let mut out = String::from("t");
        for i in 0..o {
            write!(out, ",eig_{i}").unwrap();
        }
        out.push_str(",perp_norm,loss\n");
        for p in &self.points {
            write!(out, "{}", p.t).unwrap();
            for e in &p.eigenvalues {
                write!(out, ",{e}").unwrap();
            }
            writeln!(out, ",{},{}", p.perp_norm, p.loss).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn flow_point(phi: &Matrix, y: &Matrix, beta: f64, t: f64) -> Result<FlowPoint> {
    let dec = decompose(y, phi, beta)?;
    let gram = matmul_nt(&dec.y_star, &dec.y_star)?;
    let gram = Matrix::from_fn(gram.rows(), gram.cols(), |i, j| 0.5 * (gram[(i, j)] + gram[(j, i)]));
    // L⋆ = tr(Y(I − P)Yᵀ) = ⟨Y, Y⊥⟩
    let loss = y.data().iter().zip(dec.y_perp.data()).map(|(a, b)| a * b).sum();
    Ok(FlowPoint {
        t,
        eigenvalues: sym_eigvals(&gram)?,
        perp_norm: dec.y_perp.frobenius_norm(),
        loss,
    })
}

fn rk4(phi: &Matrix, xi: &Matrix, y: &Matrix, beta: f64, kind: FlowKind, dt: f64) -> Result<Matrix> {
    let k1 = flow_rhs(phi, xi, y, beta, kind)?;
    let mut p = phi.clone();
    p.axpy(0.5 * dt, &k1)?;
    let k2 = flow_rhs(&p, xi, y, beta, kind)?;
    let mut p = phi.clone();
    p.axpy(0.5 * dt, &k2)?;
    let k3 = flow_rhs(&p, xi, y, beta, kind)?;
    let mut p = phi.clone();
    p.axpy(dt, &k3)?;
    let k4 = flow_rhs(&p, xi, y, beta, kind)?;
    let mut out = phi.clone();
    out.axpy(dt / 6.0, &k1)?;
    out.axpy(dt / 3.0, &k2)?;
    out.axpy(dt / 3.0, &k3)?;
    out.axpy(dt / 6.0, &k4)?;
    Ok(out)
}

/// Integrates the kernel gradient flow on `Φ` with RK4, recording one point
/// per accepted step (plus the start).
pub fn integrate_flow(fs: &FlowState, y: &Matrix, opts: &FlowOptions) -> Result<Trajectory> {
    if y.cols() != fs.phi.cols() {
        return Err(Error::dim("integrate_flow", format!("{} columns", fs.phi.cols()), y.cols()));
    }
    let mut dt = match opts.dt {
        Some(dt) => dt,
        None => 0.1 / sym_spectral_norm(&fs.xi)?,
    };
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let y_norm = y.frobenius_norm();
    let phi0_norm = fs.phi.frobenius_norm();
    let blowup = 1e6 * phi0_norm.max(1.0);
    let mut state = fs.clone();
    let mut points = vec![flow_point(&state.phi, y, state.beta, state.t)?];
    let reached = |p: &FlowPoint| opts.stop_ratio.is_some_and(|r| p.perp_norm <= r * y_norm);
    let mut converged = reached(&points[0]);
    let (mut steps, mut rejected) = (0, 0);

    while !converged && steps < opts.max_steps {
        let (next, err) = if opts.adaptive {
            let full = rk4(&state.phi, &state.xi, y, state.beta, opts.kind, dt)?;
            let half = rk4(&state.phi, &state.xi, y, state.beta, opts.kind, 0.5 * dt)?;
            let half = rk4(&half, &state.xi, y, state.beta, opts.kind, 0.5 * dt)?;
            let err = full.sub(&half)?.max_abs() / (1.0 + half.max_abs());
            (half, err)
        } else {
            (rk4(&state.phi, &state.xi, y, state.beta, opts.kind, dt)?, 0.0)
        };
        if !next.is_finite() || next.frobenius_norm() > blowup {
            return Err(Error::Instability {
                t: state.t,
                reason: format!("‖Φ‖ exceeded {blowup:.3e}"),
            });
        }
        if opts.adaptive && !(err <= opts.tol) {
            rejected += 1;
            dt *= 0.5;
            if dt < 1e-14 * (1.0 + state.t) {
                return Err(Error::Instability {
                    t: state.t,
                    reason: "step size underflow".into(),
                });
            }
            continue;
        }
        state.phi = next;
        state.t += dt;
        steps += 1;
        let point = flow_point(&state.phi, y, state.beta, state.t)?;
        converged = reached(&point);
        points.push(point);
        if opts.adaptive && err < opts.tol / 30.0 {
            dt *= 2.0;
        }
    }
    Ok(Trajectory {
        points,
        final_state: state,
        steps,
        rejected,
        converged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    /// Largest `eig_t − ε − eig_{t+1}` over consecutive pairs (0 when none).
    pub max_violation: f64,
    pub violations: usize,
    pub pairs: usize,
}

/// Sorted eigenvalues of `Y⋆Y⋆ᵀ` must satisfy `eig_{t+1} ≥ eig_t − ε` with
/// `ε = 1e-6·(1 + eig_t)`.
pub fn check_eig_monotone(traj: &Trajectory) -> MonotoneReport {
    let mut report = MonotoneReport {
        max_violation: 0.0,
        violations: 0,
        pairs: 0,
    };
    for w in traj.points.windows(2) {
        report.pairs += 1;
        let mut bad = false;
        for (a, b) in w[0].eigenvalues.iter().zip(&w[1].eigenvalues) {
            let v = a - 1e-6 * (1.0 + a) - b;
            if v > 0.0 {
                bad = true;
                report.max_violation = report.max_violation.max(v);
            }
        }
        report.violations += usize::from(bad);
    }
    report
}

/// Same check for `tr(Y⋆Y⋆ᵀ)`, which is non-decreasing along the exact flow.
pub fn check_trace_monotone(traj: &Trajectory) -> MonotoneReport {
    let mut report = MonotoneReport {
        max_violation: 0.0,
        violations: 0,
        pairs: 0,
    };
    for w in traj.points.windows(2) {
        report.pairs += 1;
        let a: f64 = w[0].eigenvalues.iter().sum();
        let b: f64 = w[1].eigenvalues.iter().sum();
        let v = a - 1e-6 * (1.0 + a.abs()) - b;
        if v > 0.0 {
            report.violations += 1;
            report.max_violation = report.max_violation.max(v);
        }
    }
    report
}

/// `L⋆` must not increase by more than `tol·(1 + L⋆_t)` between points.
pub fn check_loss_monotone(traj: &Trajectory, tol: f64) -> MonotoneReport {
    let mut report = MonotoneReport {
        max_violation: 0.0,
        violations: 0,
        pairs: 0,
    };
    for w in traj.points.windows(2) {
        report.pairs += 1;
        let v = w[1].loss - w[0].loss - tol * (1.0 + w[0].loss.abs());
        if v > 0.0 {
            report.violations += 1;
            report.max_violation = report.max_violation.max(v);
        }
    }
    report
}

/// `2(AB + BA)` with `A = Y⊥Y⊥ᵀ` and `B = Y⋆ΦᵀG⁻¹ΞG⁻¹ΦY⋆ᵀ`, `G = ΦΦᵀ + βI`.
pub fn ystar_gram_rate(y: &Matrix, phi: &Matrix, xi: &Matrix, beta: f64) -> Result<Matrix> {
    let dec = decompose(y, phi, beta)?;
    let gram = regularized_gram(phi, beta)?;
    let chol = Cholesky::new(&gram)?;
    // C = G⁻¹ΦY⋆ᵀ, B = Cᵀ Ξ C
    let c = chol.solve(&matmul_nt(phi, &dec.y_star)?)?;
    let b = matmul_tn(&c, &matmul(xi, &c)?)?;
    let a = matmul_nt(&dec.y_perp, &dec.y_perp)?;
    Ok(matmul(&a, &b)?.add(&matmul(&b, &a)?)?.scale(2.0))
}

/// Central difference of `Y⋆Y⋆ᵀ` along the flow direction at `Φ`.
pub fn ystar_gram_rate_fd(
    y: &Matrix,
    phi: &Matrix,
    xi: &Matrix,
    beta: f64,
    kind: FlowKind,
    h: f64,
) -> Result<Matrix> {
    let dir = flow_rhs(phi, xi, y, beta, kind)?;
    let gram_at = |s: f64| -> Result<Matrix> {
        let mut p = phi.clone();
        p.axpy(s, &dir)?;
        let ys = decompose(y, &p, beta)?.y_star;
        matmul_nt(&ys, &ys)
    };
    Ok(gram_at(h)?.sub(&gram_at(-h)?)?.scale(0.5 / h))
}
