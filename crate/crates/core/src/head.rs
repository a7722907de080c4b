//! The linear last layer and its closed-form solutions.
//!
//! With features `Φ ∈ R^{d'×n}` and targets `Y ∈ R^{o×n}`:
//!
//! * ridge:    `W⋆ = YΦᵀ (ΦΦᵀ + βI)⁻¹`
//! * proximal: `W⋆ = (YΦᵀ + λW_prev)(ΦΦᵀ + λI)⁻¹`
//!
//! Both are computed by a Cholesky solve of the `d'×d'` system, transposed.
//! When a bias is used the features get an extra row of ones and the bias is
//! the last column of `W`; it is penalized like every other weight.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, solve_spd, Matrix};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Zeros,
    Lecun,
    Xavier,
    He,
}

impl InitPolicy {
    pub const ALL: [InitPolicy; 4] = [InitPolicy::Zeros, InitPolicy::Lecun, InitPolicy::Xavier, InitPolicy::He];

    /// Variance of the weight entries for `o` outputs and `d` features.
    pub fn variance(self, outputs: usize, features: usize) -> f64 {
        let (o, d) = (outputs as f64, features as f64);
        match self {
            InitPolicy::Zeros => 0.0,
            InitPolicy::Lecun => 1.0 / d,
            InitPolicy::Xavier => 2.0 / (d + o),
            InitPolicy::He => 2.0 / d,
        }
    }
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zeros" | "zero" => Ok(InitPolicy::Zeros),
            "lecun" => Ok(InitPolicy::Lecun),
            "xavier" | "glorot" => Ok(InitPolicy::Xavier),
            "he" | "kaiming" => Ok(InitPolicy::He),
            other => Err(Error::Config(format!("unknown head initialization '{other}'"))),
        }
    }
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InitPolicy::Zeros => "zeros",
            InitPolicy::Lecun => "lecun",
            InitPolicy::Xavier => "xavier",
            InitPolicy::He => "he",
        };
        f.write_str(s)
    }
}

/// How the head is refit: full ridge (`β`) or anchored to its previous value (`λ`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    Ridge { beta: f64 },
    Proximal { lambda: f64 },
}

impl Regularization {
    pub fn coefficient(self) -> f64 {
        match self {
            Regularization::Ridge { beta } => beta,
            Regularization::Proximal { lambda } => lambda,
        }
    }

    pub fn validate(self) -> Result<Self> {
        let c = self.coefficient();
        if c > 0.0 && c.is_finite() {
            Ok(self)
        } else {
            Err(Error::Config(format!("regularization coefficient must be > 0, got {c}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadState {
    pub w: Matrix,
    pub has_bias: bool,
    pub init_policy: InitPolicy,
    pub reg: Regularization,
}

impl HeadState {
    /// Initializes an `o × d'` head. The variance uses the feature width `d`
    /// (without the bias column); the bias column always starts at zero.
    pub fn init(
        outputs: usize,
        features: usize,
        has_bias: bool,
        policy: InitPolicy,
        reg: Regularization,
        seed: u64,
    ) -> Result<Self> {
        if outputs == 0 || features == 0 {
            return Err(Error::Config("head needs at least one output and one feature".into()));
        }
        let reg = reg.validate()?;
        let std = policy.variance(outputs, features).sqrt();
        let cols = features + usize::from(has_bias);
        let mut w = Matrix::zeros(outputs, cols);
        if policy != InitPolicy::Zeros {
            let mut r = rng::seeded(seed);
            for i in 0..outputs {
                for j in 0..features {
                    w[(i, j)] = std * rng::normal(&mut r);
                }
            }
        }
        Ok(Self {
            w,
            has_bias,
            init_policy: policy,
            reg,
        })
    }

    pub fn outputs(&self) -> usize {
        self.w.rows()
    }

    /// Feature width the head expects before augmentation.
    pub fn feature_dim(&self) -> usize {
        self.w.cols() - usize::from(self.has_bias)
    }

    pub fn augment(&self, features: &Matrix) -> Matrix {
        augment_features(features, self.has_bias)
    }

    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        predict(self, features)
    }

    pub fn predict_class(&self, features: &Matrix) -> Result<Vec<usize>> {
        predict_class(self, features)
    }

    /// Replaces `W` with the closed-form solution for already augmented
    /// features, using this head's regularization (the proximal anchor is the
    /// current `W`). Returns `‖W_new − W_old‖_F`.
    pub fn refit(&mut self, y: &Matrix, phi_aug: &Matrix) -> Result<f64> {
        let next = match self.reg {
            Regularization::Ridge { beta } => ridge_solution(y, phi_aug, beta)?,
            Regularization::Proximal { lambda } => proximal_solution(y, phi_aug, &self.w, lambda)?,
        };
        self.replace(next)
    }

    pub(crate) fn replace(&mut self, next: Matrix) -> Result<f64> {
        if next.shape() != self.w.shape() {
            return Err(Error::dim(
                "head update",
                format!("{:?}", self.w.shape()),
                format!("{:?}", next.shape()),
            ));
        }
        let delta = next.sub(&self.w)?.frobenius_norm();
        self.w = next;
        Ok(delta)
    }
}

/// Appends a row of ones when `has_bias` is set.
pub fn augment_features(features: &Matrix, has_bias: bool) -> Matrix {
    if has_bias {
        features.with_constant_row(1.0)
    } else {
        features.clone()
    }
}

/// `YΦᵀ(ΦΦᵀ + βI)⁻¹`.
pub fn ridge_solution(y: &Matrix, phi: &Matrix, beta: f64) -> Result<Matrix> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("ridge coefficient must be > 0, got {beta}")));
    }
    solve_regularized(y, phi, None, beta)
}

/// `(YΦᵀ + λW_prev)(ΦΦᵀ + λI)⁻¹`, the minimizer of the proximal loss.
pub fn proximal_solution(y: &Matrix, phi: &Matrix, w_prev: &Matrix, lambda: f64) -> Result<Matrix> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("proximal coefficient must be > 0, got {lambda}")));
    }
    if w_prev.shape() != (y.rows(), phi.rows()) {
        return Err(Error::dim(
            "proximal_solution anchor",
            format!("({}, {})", y.rows(), phi.rows()),
            format!("{:?}", w_prev.shape()),
        ));
    }
    solve_regularized(y, phi, Some(w_prev), lambda)
}

fn solve_regularized(y: &Matrix, phi: &Matrix, anchor: Option<&Matrix>, coef: f64) -> Result<Matrix> {
    if y.cols() != phi.cols() {
        return Err(Error::dim("closed-form head", format!("{} samples", phi.cols()), y.cols()));
    }
    let mut gram = matmul_nt(phi, phi)?;
    gram.add_diagonal(coef);
    // rhs = Φ Yᵀ + coef · W_prevᵀ, shape d' × o
    let mut rhs = matmul_nt(phi, y)?;
    if let Some(w_prev) = anchor {
        rhs.axpy(coef, &w_prev.transpose())?;
    }
    Ok(solve_spd(&gram, &rhs)?.transpose())
}

/// `W · augment(features)`.
pub fn predict(head: &HeadState, features: &Matrix) -> Result<Matrix> {
    if features.rows() != head.feature_dim() {
        return Err(Error::dim("predict", head.feature_dim(), features.rows()));
    }
    matmul(&head.w, &head.augment(features))
}

/// Column-wise argmax of the head's outputs; ties go to the lowest index.
pub fn predict_class(head: &HeadState, features: &Matrix) -> Result<Vec<usize>> {
    Ok(argmax_columns(&predict(head, features)?))
}

/// Column-wise argmax with ties resolved to the lowest row index.
pub fn argmax_columns(scores: &Matrix) -> Vec<usize> {
    (0..scores.cols())
        .map(|j| {
            let mut best = 0;
            for i in 1..scores.rows() {
                if scores[(i, j)] > scores[(best, j)] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
