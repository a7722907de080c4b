//! Fully connected feature map with a hand-written forward/backward pass.
//!
//! Every layer is affine followed by the activation, including the last one,
//! so the features are `α⁽ᴸ⁾ = σ(W⁽ᴸ⁻¹⁾ α⁽ᴸ⁻¹⁾ + b⁽ᴸ⁻¹⁾)`. Under the `Ntk`
//! parameterization the affine map is scaled by `1/√fan_in` at forward time
//! and all parameters are drawn from N(0, 1).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activation value. The
    /// ReLU subgradient at 0 is 0.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Standard,
    Ntk,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(Parameterization::Standard),
            "ntk" => Ok(Parameterization::Ntk),
            other => Err(Error::Config(format!("unknown parameterization '{other}'"))),
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::Standard => "standard",
            Parameterization::Ntk => "ntk",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpBackbone {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
    parameterization: Parameterization,
}

/// Intermediates cached by [`MlpBackbone::forward`] for one batch.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.input.cols()
    }
}

/// Gradients for every weight matrix and bias vector, laid out like the
/// backbone's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    /// Parameter slots in the canonical order `W₀, b₀, W₁, b₁, …`.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.data(), b.as_slice()])
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

impl MlpBackbone {
    /// Draws a fresh backbone. Standard mode: `W ~ N(0, 1/fan_in)`, zero
    /// biases (LeCun normal). Ntk mode: every entry `~ N(0, 1)`.
    pub fn init(
        layer_dims: &[usize],
        activation: Activation,
        parameterization: Parameterization,
        seed: u64,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = rng::seeded(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            match parameterization {
                Parameterization::Standard => {
                    let std = (1.0 / fan_in as f64).sqrt();
                    weights.push(rng::normal_matrix(&mut rng, fan_out, fan_in, std));
                    biases.push(vec![0.0; fan_out]);
                }
                Parameterization::Ntk => {
                    weights.push(rng::normal_matrix(&mut rng, fan_out, fan_in, 1.0));
                    biases.push((0..fan_out).map(|_| rng::normal(&mut rng)).collect());
                }
            }
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
            parameterization,
        })
    }

    /// Assembles a backbone from explicit parameters.
    pub fn from_parts(
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        activation: Activation,
        parameterization: Parameterization,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config(format!(
                "need one bias per weight matrix ({} weights, {} biases)",
                weights.len(),
                biases.len()
            )));
        }
        let mut dims = vec![weights[0].cols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *dims.last().unwrap() || b.len() != w.rows() {
                return Err(Error::dim(
                    "backbone layer",
                    format!("layer {l}: ({}, {}) + bias {}", w.rows(), dims[l], w.rows()),
                    format!("({}, {}) + bias {}", w.rows(), w.cols(), b.len()),
                ));
            }
            dims.push(w.rows());
        }
        validate_dims(&dims)?;
        Ok(Self {
            layer_dims: dims,
            weights,
            biases,
            activation,
            parameterization,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data().len() + b.len())
            .sum()
    }

    fn layer_scale(&self, layer: usize) -> f64 {
        match self.parameterization {
            Parameterization::Standard => 1.0,
            Parameterization::Ntk => 1.0 / (self.layer_dims[layer] as f64).sqrt(),
        }
    }

    /// Features for the columns of `x` together with the tape needed by
    /// [`backward`](Self::backward).
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardTape)> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut post: Vec<Matrix> = Vec::with_capacity(self.weights.len());
        for l in 0..self.weights.len() {
            let input = if l == 0 { x } else { &post[l - 1] };
            let z = self.affine(l, input)?;
            let a = z.map(|v| self.activation.apply(v));
            pre.push(z);
            post.push(a);
        }
        let features = post.last().unwrap().clone();
        Ok((
            features,
            ForwardTape {
                input: x.clone(),
                pre,
                post,
            },
        ))
    }

    /// Features only, without keeping intermediates.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut a = x.clone();
        for l in 0..self.weights.len() {
            a = self.affine(l, &a)?.map(|v| self.activation.apply(v));
        }
        Ok(a)
    }

    fn affine(&self, layer: usize, input: &Matrix) -> Result<Matrix> {
        let mut z = matmul(&self.weights[layer], input)?;
        let scale = self.layer_scale(layer);
        let bias = &self.biases[layer];
        let cols = z.cols();
        for (i, row) in z.data_mut().chunks_mut(cols).enumerate() {
            for v in row {
                *v = scale * *v + bias[i];
            }
        }
        Ok(z)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(Error::dim("backbone forward", self.input_dim(), x.rows()));
        }
        Ok(())
    }

    /// Reverse-mode gradients of `⟨grad_features, φ_θ(X)⟩` with respect to
    /// every weight and bias.
    pub fn backward(&self, tape: &ForwardTape, grad_features: &Matrix) -> Result<ParamGrads> {
        let depth = self.weights.len();
        if tape.pre.len() != depth
            || tape.input.rows() != self.input_dim()
            || tape.pre.iter().zip(&self.layer_dims[1..]).any(|(z, &d)| z.rows() != d)
        {
            return Err(Error::State(
                "forward tape does not match this backbone's architecture".into(),
            ));
        }
        let batch = tape.batch_size();
        if grad_features.shape() != (self.feature_dim(), batch) {
            return Err(Error::dim(
                "backbone backward",
                format!("({}, {batch})", self.feature_dim()),
                format!("{:?}", grad_features.shape()),
            ));
        }

        let mut grad_w = vec![Matrix::zeros(0, 0); depth];
        let mut grad_b = vec![Vec::new(); depth];
        let mut upstream = grad_features.clone();
        for l in (0..depth).rev() {
            // delta = upstream ⊙ σ'(z)
            let mut delta = upstream;
            for ((d, &z), &a) in delta
                .data_mut()
                .iter_mut()
                .zip(tape.pre[l].data())
                .zip(tape.post[l].data())
            {
                *d *= self.activation.derivative(z, a);
            }
            let scale = self.layer_scale(l);
            let input = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            grad_w[l] = matmul_nt(&delta, input)?.scale(scale);
            grad_b[l] = (0..delta.rows()).map(|i| delta.row(i).iter().sum()).collect();
            if l > 0 {
                upstream = matmul_tn(&self.weights[l], &delta)?.scale(scale);
            } else {
                upstream = Matrix::zeros(0, 0);
            }
        }
        Ok(ParamGrads {
            weights: grad_w,
            biases: grad_b,
        })
    }

    /// `θ ← θ − step · grads`.
    pub fn apply_grads(&mut self, grads: &ParamGrads, step: f64) -> Result<()> {
        self.check_grads(grads)?;
        for (p, g) in self.param_slices_mut().into_iter().zip(grads.slices()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= step * gv;
            }
        }
        Ok(())
    }

    pub(crate) fn check_grads(&self, grads: &ParamGrads) -> Result<()> {
        let ok = grads.weights.len() == self.weights.len()
            && grads
                .weights
                .iter()
                .zip(&self.weights)
                .all(|(g, w)| g.shape() == w.shape())
            && grads
                .biases
                .iter()
                .zip(&self.biases)
                .all(|(g, b)| g.len() == b.len());
        if ok {
            Ok(())
        } else {
            Err(Error::State("gradient layout does not match backbone".into()))
        }
    }

    /// Mutable parameter slots in the order `W₀, b₀, W₁, b₁, …`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.data_mut(), b.as_mut_slice()])
            .collect()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.data().iter().chain(b.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("set_params_flat", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        for slot in self.param_slices_mut() {
            let n = slot.len();
            slot.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "backbone needs at least an input and an output width, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("layer widths must be positive, got {dims:?}")));
    }
    Ok(())
}
