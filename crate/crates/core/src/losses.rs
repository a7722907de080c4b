//! Scalar objectives with their gradients in `W` and in the features.
//!
//! Values are sums over samples, never means; the harness normalizes for
//! display.

use crate::error::{Error, Result};
use crate::head::{proximal_solution, ridge_solution};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Gradient with respect to the head weights, same shape as `W`.
    pub grad_w: Matrix,
    /// Gradient with respect to the (augmented) features, same shape as `Φ`.
    pub grad_features: Matrix,
}

fn check_shapes(op: &'static str, w: &Matrix, phi: &Matrix, y: &Matrix) -> Result<()> {
    if w.cols() != phi.rows() || w.rows() != y.rows() || phi.cols() != y.cols() {
        return Err(Error::dim(
            op,
            format!("W (o×d'), Φ (d'×n), Y (o×n) with W={:?}", w.shape()),
            format!("Φ={:?}, Y={:?}", phi.shape(), y.shape()),
        ));
    }
    Ok(())
}

/// Squared error `‖Y − WΦ‖²_F` plus `coef · ‖W − anchor‖²_F` (anchor 0 when absent).
fn penalized_squared_error(
    op: &'static str,
    w: &Matrix,
    phi: &Matrix,
    y: &Matrix,
    anchor: Option<&Matrix>,
    coef: f64,
) -> Result<LossReport> {
    check_shapes(op, w, phi, y)?;
    let residual = matmul(w, phi)?.sub(y)?;
    let offset = match anchor {
        Some(a) => w.sub(a)?,
        None => w.clone(),
    };
    let value = residual.sum_squares() + coef * offset.sum_squares();
    let mut grad_w = matmul_nt(&residual, phi)?.scale(2.0);
    grad_w.axpy(2.0 * coef, &offset)?;
    let grad_features = matmul_tn(w, &residual)?.scale(2.0);
    Ok(LossReport {
        value,
        grad_w,
        grad_features,
    })
}

/// `‖Y − WΦ‖²_F + β‖W‖²_F` over the full data.
pub fn ridge_loss(w: &Matrix, phi: &Matrix, y: &Matrix, beta: f64) -> Result<LossReport> {
    penalized_squared_error("ridge_loss", w, phi, y, None, beta)
}

/// The ridge loss restricted to a batch's columns.
pub fn batch_loss(w: &Matrix, phi_batch: &Matrix, y_batch: &Matrix, beta: f64) -> Result<LossReport> {
    penalized_squared_error("batch_loss", w, phi_batch, y_batch, None, beta)
}

/// `Σ‖y − Wφ‖² + λ‖W − W_prev‖²_F` on a batch.
pub fn proximal_loss(
    w: &Matrix,
    phi_batch: &Matrix,
    y_batch: &Matrix,
    w_prev: &Matrix,
    lambda: f64,
) -> Result<LossReport> {
    if w_prev.shape() != w.shape() {
        return Err(Error::dim(
            "proximal_loss anchor",
            format!("{:?}", w.shape()),
            format!("{:?}", w_prev.shape()),
        ));
    }
    penalized_squared_error("proximal_loss", w, phi_batch, y_batch, Some(w_prev), lambda)
}

/// Plain `‖Y − WΦ‖²_F`, no penalty.
pub fn squared_error(w: &Matrix, phi: &Matrix, y: &Matrix) -> Result<LossReport> {
    penalized_squared_error("squared_error", w, phi, y, None, 0.0)
}

/// `L⋆(Φ) = min_W ‖Y − WΦ‖²_F + β‖W‖²_F`.
pub fn induced_loss(phi: &Matrix, y: &Matrix, beta: f64) -> Result<f64> {
    let w = ridge_solution(y, phi, beta)?;
    Ok(ridge_loss(&w, phi, y, beta)?.value)
}

/// `min_W Σ‖y − Wφ‖² + λ‖W − W_prev‖²_F`.
pub fn induced_proximal_loss(phi: &Matrix, y: &Matrix, w_prev: &Matrix, lambda: f64) -> Result<f64> {
    let w = proximal_solution(y, phi, w_prev, lambda)?;
    Ok(proximal_loss(&w, phi, y, w_prev, lambda)?.value)
}

/// Softmax cross-entropy summed over columns, with `Y` one-hot, plus
/// `β‖W‖²_F`. Only used by the cross-entropy baseline.
pub fn cross_entropy_loss(w: &Matrix, phi: &Matrix, y: &Matrix, beta: f64) -> Result<LossReport> {
    check_shapes("cross_entropy_loss", w, phi, y)?;
    let logits = matmul(w, phi)?;
    let (o, n) = logits.shape();
    let mut probs_minus_y = Matrix::zeros(o, n);
    let mut value = 0.0;
    for j in 0..n {
        let max = (0..o).map(|i| logits[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..o).map(|i| (logits[(i, j)] - max).exp()).sum();
        let log_denom = denom.ln() + max;
        for i in 0..o {
            let p = (logits[(i, j)] - log_denom).exp();
            value -= y[(i, j)] * (logits[(i, j)] - log_denom);
            probs_minus_y[(i, j)] = p - y[(i, j)];
        }
    }
    value += beta * w.sum_squares();
    let mut grad_w = matmul_nt(&probs_minus_y, phi)?;
    grad_w.axpy(2.0 * beta, w)?;
    let grad_features = matmul_tn(w, &probs_minus_y)?;
    Ok(LossReport {
        value,
        grad_w,
        grad_features,
    })
}
