//! Reference computations for the tests. Everything here works on plain
//! vectors and shares no numerical code with the library.

#![allow(dead_code)]

use lastlayer::{Activation, Matrix};

pub type Mat = Vec<Vec<f64>>;

pub fn to_rows(m: &Matrix) -> Mat {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn from_rows(rows: &Mat) -> Matrix {
    let c = rows.first().map_or(0, |r| r.len());
    Matrix::from_fn(rows.len(), c, |i, j| rows[i][j])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Mat, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

/// `min_W ‖Y − WΦ‖² + c‖W − A‖²` (A = 0 when absent) by cyclic coordinate
/// descent, run until no coordinate moves by more than `1e-15` relative.
pub fn coordinate_descent(y: &Matrix, phi: &Matrix, anchor: Option<&Matrix>, c: f64) -> Matrix {
    let (y, phi) = (to_rows(y), to_rows(phi));
    let (o, d, n) = (y.len(), phi.len(), y[0].len());
    let anchor = anchor.map(to_rows).unwrap_or_else(|| vec![vec![0.0; d]; o]);
    let sq: Vec<f64> = phi.iter().map(|r| dot(r, r) + c).collect();
    let mut w = anchor.clone();
    for r in 0..o {
        // residual_j = y_rj − Σ_k w_k φ_kj
        let mut res: Vec<f64> = (0..n).map(|j| y[r][j] - (0..d).map(|k| w[r][k] * phi[k][j]).sum::<f64>()).collect();
        for _sweep in 0..200_000 {
            let mut moved = 0.0f64;
            for k in 0..d {
                let num = dot(&res, &phi[k]) + w[r][k] * (sq[k] - c) + c * anchor[r][k];
                let new = num / sq[k];
                let delta = new - w[r][k];
                if delta != 0.0 {
                    for (rj, pj) in res.iter_mut().zip(&phi[k]) {
                        *rj -= delta * pj;
                    }
                    w[r][k] = new;
                }
                moved = moved.max(delta.abs() / (1.0 + new.abs()));
            }
            if moved < 1e-15 {
                break;
            }
        }
    }
    from_rows(&w)
}

/// Orthogonal projector onto the row space of `phi` (n × n), built by
/// modified Gram–Schmidt on its rows.
pub fn row_space_projector(phi: &Matrix) -> Mat {
    let rows = to_rows(phi);
    let n = phi.cols();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for q in &basis {
            let p = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-10 * (1.0 + dot(&r, &r).sqrt()) {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut p = vec![vec![0.0; n]; n];
    for q in &basis {
        for i in 0..n {
            for j in 0..n {
                p[i][j] += q[i] * q[j];
            }
        }
    }
    p
}

/// Small fully connected network described by its layer sizes, with
/// parameters flattened as `W₀ (row-major), b₀, W₁, b₁, …`.
pub struct OracleNet {
    pub dims: Vec<usize>,
    pub activation: Activation,
    /// Scale each layer's `W·a` by `1/√fan_in`.
    pub ntk: bool,
}

impl OracleNet {
    fn act(&self, v: f64) -> f64 {
        match self.activation {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Feature vector of one input.
    pub fn features(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let w = &theta[off..off + fan_in * fan_out];
            let b = &theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let scale = if self.ntk { 1.0 / (fan_in as f64).sqrt() } else { 1.0 };
            a = (0..fan_out)
                .map(|i| self.act(scale * dot(&w[i * fan_in..(i + 1) * fan_in], &a) + b[i]))
                .collect();
        }
        a
    }

    /// `min_W Σ‖y − Wφ̃‖² + c‖W − A‖²` with `φ̃ = (φ, 1)`, solved row by row.
    pub fn induced_loss(&self, theta: &[f64], x: &Matrix, y: &Matrix, c: f64, anchor: Option<&Matrix>) -> f64 {
        let n = x.cols();
        let feats: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut f = self.features(theta, &x.column(j));
                f.push(1.0);
                f
            })
            .collect();
        let d = feats[0].len();
        let mut total = 0.0;
        for r in 0..y.rows() {
            let a: Vec<f64> = (0..d).map(|k| anchor.map_or(0.0, |m| m[(r, k)])).collect();
            let mut g = vec![vec![0.0; d]; d];
            let mut rhs = a.iter().map(|v| c * v).collect::<Vec<_>>();
            for (j, f) in feats.iter().enumerate() {
                for p in 0..d {
                    rhs[p] += y[(r, j)] * f[p];
                    for q in 0..d {
                        g[p][q] += f[p] * f[q];
                    }
                }
            }
            for (p, row) in g.iter_mut().enumerate() {
                row[p] += c;
            }
            let w = solve(g, rhs);
            total += feats
                .iter()
                .enumerate()
                .map(|(j, f)| (y[(r, j)] - dot(&w, f)).powi(2))
                .sum::<f64>();
            total += c * w.iter().zip(&a).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        }
        total
    }

    /// Central differences of the induced loss in every parameter.
    pub fn fd_gradient(&self, theta: &[f64], x: &Matrix, y: &Matrix, c: f64, anchor: Option<&Matrix>) -> Vec<f64> {
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                let h = 1e-5 * (1.0 + theta[i].abs());
                t[i] = theta[i] + h;
                let plus = self.induced_loss(&t, x, y, c, anchor);
                t[i] = theta[i] - h;
                let minus = self.induced_loss(&t, x, y, c, anchor);
                t[i] = theta[i];
                (plus - minus) / (2.0 * h)
            })
            .collect()
    }
}

/// `L⋆(Φ) = min_W ‖Y − WΦ‖² + β‖W‖²` through the normal equations.
pub fn induced_loss_of_phi(y: &Matrix, phi: &Matrix, beta: f64) -> f64 {
    let (y, phi) = (to_rows(y), to_rows(phi));
    let d = phi.len();
    let mut total = 0.0;
    for yr in &y {
        let mut g: Mat = (0..d).map(|p| (0..d).map(|q| dot(&phi[p], &phi[q])).collect()).collect();
        for (p, row) in g.iter_mut().enumerate() {
            row[p] += beta;
        }
        let w = solve(g, phi.iter().map(|r| dot(r, yr)).collect());
        for (j, yj) in yr.iter().enumerate() {
            total += (yj - (0..d).map(|k| w[k] * phi[k][j]).sum::<f64>()).powi(2);
        }
        total += beta * dot(&w, &w);
    }
    total
}

/// Entrywise relative error with a floor of `1e-3 · max|numeric|`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `‖a − b‖_F / max(‖b‖_F, 1e-300)`.
pub fn frob_rel(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    let nb: f64 = b.data().iter().map(|y| y * y).sum();
    (diff / nb.max(1e-300)).sqrt()
}
