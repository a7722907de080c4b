//! Acceptance checks. Each test prints one `PASS`/`FAIL` line with the
//! measured value and its pinned tolerance.

mod common;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use common::{coordinate_descent, frob_rel, induced_loss_of_phi, rel_err, OracleNet};
use lastlayer::dfiv::{self, DfivConfig, EvalMode};
use lastlayer::harness::{self, gen_classification_task, gen_regression_task, ExperimentSpec, ModelSpec, Task};
use lastlayer::head::{argmax_columns, augment_features, proximal_solution, ridge_solution};
use lastlayer::linalg::{matmul, matmul_nt, matmul_tn, Matrix};
use lastlayer::losses::{proximal_loss, ridge_loss};
use lastlayer::optim::{self, EvalKind, Method};
use lastlayer::theory::{self, EnvelopeMode, FlowOptions, FlowState, DEFAULT_CRITICAL_TOL};
use lastlayer::{rng, Activation, Dataset, MlpBackbone, Parameterization};

/// Writes to stderr directly so the line shows up even when libtest captures
/// output.
fn verdict(name: &str, pass: bool, detail: String) -> bool {
    let _ = writeln!(std::io::stderr(), "{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Twenty networks of at most a thousand parameters, alternating tanh/ReLU
/// and standard/NTK scaling, each with its own regression batch.
fn envelope_nets() -> Vec<(MlpBackbone, Dataset, OracleNet)> {
    (0..20)
        .map(|i| {
            let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
            let ntk = i % 4 >= 2;
            let par = if ntk { Parameterization::Ntk } else { Parameterization::Standard };
            let dims = vec![2 + i % 4, 4 + i % 7, 3 + i % 5];
            let mut bb = MlpBackbone::init(&dims, act, par, 1000 + i as u64).unwrap();
            assert!(bb.num_params() <= 1000);
            let mut r = rng::seeded(2000 + i as u64);
            // Off the ReLU kinks that zero biases would leave dead samples on.
            let theta: Vec<f64> = bb.params_flat().iter().map(|t| t + 0.1 * rng::normal(&mut r)).collect();
            bb.set_params_flat(&theta).unwrap();
            let n = 8 + i % 6;
            let x = rng::normal_matrix(&mut r, dims[0], n, 1.0);
            let y = rng::normal_matrix(&mut r, 1 + i % 3, n, 1.0);
            let oracle = OracleNet {
                dims,
                activation: act,
                ntk,
            };
            (bb, Dataset::new(x, y).unwrap(), oracle)
        })
        .collect()
}

#[test]
fn envelope_gradient_ridge() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (i, (bb, data, oracle)) in envelope_nets().into_iter().enumerate() {
        let beta = [0.1, 0.5, 2.0][i % 3];
        let analytic = theory::envelope_gradient(&bb, &data, true, &EnvelopeMode::Ridge { beta }).unwrap();
        let numeric = oracle.fd_gradient(&bb.params_flat(), &data.x, &data.y, beta, None);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = verdict(
        "envelope gradient, ridge head",
        worst <= 1e-4 && secs <= 120.0,
        format!("max rel err {worst:.2e} (tol 1e-4) over 20 nets, {secs:.1}s (limit 120s)"),
    );
    assert!(pass);
}

#[test]
fn envelope_gradient_proximal() {
    let mut worst = 0.0f64;
    for (i, (bb, data, oracle)) in envelope_nets().into_iter().enumerate() {
        let lambda = [0.1, 1.0, 100.0][i % 3];
        let mut r = rng::seeded(3000 + i as u64);
        let w_prev = rng::normal_matrix(&mut r, data.output_dim(), bb.feature_dim() + 1, 1.0);
        let numeric = oracle.fd_gradient(&bb.params_flat(), &data.x, &data.y, lambda, Some(&w_prev));
        let mode = EnvelopeMode::Proximal { w_prev, lambda };
        let analytic = theory::envelope_gradient(&bb, &data, true, &mode).unwrap();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let pass = verdict(
        "envelope gradient, proximal head",
        worst <= 1e-4,
        format!("max rel err {worst:.2e} (tol 1e-4) over 20 nets, λ ∈ {{0.1, 1, 100}}"),
    );
    assert!(pass);
}

#[test]
fn closed_form_optimality() {
    let (mut grad, mut agree) = (0.0f64, 0.0f64);
    for i in 0..100u64 {
        let mut r = rng::seeded(4000 + i);
        let (d, n, o) = (1 + i as usize % 6, 2 + i as usize % 9, 1 + i as usize % 3);
        let phi = rng::normal_matrix(&mut r, d, n, 1.0);
        let y = rng::normal_matrix(&mut r, o, n, 1.0);
        let w_prev = rng::normal_matrix(&mut r, o, d, 1.0);
        let c = [1e-2, 0.1, 1.0, 10.0][i as usize % 4];
        let zero = Matrix::zeros(o, d);

        let w = ridge_solution(&y, &phi, c).unwrap();
        let g = ridge_loss(&w, &phi, &y, c).unwrap().grad_w.frobenius_norm();
        let g0 = ridge_loss(&zero, &phi, &y, c).unwrap().grad_w.frobenius_norm();
        grad = grad.max(g / g0);
        agree = agree.max(frob_rel(&w, &coordinate_descent(&y, &phi, None, c)));

        let w = proximal_solution(&y, &phi, &w_prev, c).unwrap();
        let g = proximal_loss(&w, &phi, &y, &w_prev, c).unwrap().grad_w.frobenius_norm();
        let g0 = proximal_loss(&zero, &phi, &y, &w_prev, c).unwrap().grad_w.frobenius_norm();
        grad = grad.max(g / g0);
        agree = agree.max(frob_rel(&w, &coordinate_descent(&y, &phi, Some(&w_prev), c)));
    }
    let pass = verdict(
        "closed-form optimality",
        grad <= 1e-8 && agree <= 1e-6,
        format!(
            "max ‖∇_W‖/‖∇_W(0)‖ {grad:.2e} (tol 1e-8), max distance to coordinate descent {agree:.2e} (tol 1e-6), 100 instances"
        ),
    );
    assert!(pass);
}

#[test]
fn kalman_map_equivalence() {
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let mut r = rng::seeded(5000 + i);
        let (d, n, o) = (2 + i as usize % 5, 4 + i as usize % 8, 1 + i as usize % 3);
        let phi = rng::normal_matrix(&mut r, d, n, 1.0);
        let y = rng::normal_matrix(&mut r, o, n, 1.0);
        let w_prev = rng::normal_matrix(&mut r, o, d, 1.0);
        let sy = 0.2 + 0.15 * i as f64;
        let sw = 2.0 / (1.0 + 0.3 * i as f64);
        let prox = proximal_solution(&y, &phi, &w_prev, sy * sy / (sw * sw)).unwrap();
        // Direct minimization of the negative log posterior; scaling by
        // 2σ_Y² turns it into the proximal objective with λ = σ_Y²/σ_W².
        let map = coordinate_descent(&y, &phi, Some(&w_prev), sy * sy / (sw * sw));
        worst = worst.max(frob_rel(&prox, &map));
        worst = worst.max(theory::check_kalman_equivalence(&y, &phi, &w_prev, sy, sw).unwrap().rel_err);
    }
    let pass = verdict(
        "Kalman/MAP equivalence",
        worst <= 1e-6,
        format!("max rel distance {worst:.2e} (tol 1e-6) over 20 instances"),
    );
    assert!(pass);
}

#[test]
fn critical_point_structure() {
    let tol = DEFAULT_CRITICAL_TOL;
    let (d, n, o) = (3, 8, 2);
    let mut fd_err = 0.0f64;
    let mut zero_ok = true;
    let mut forward_ok = true;
    let mut backward_ok = true;
    for i in 0..20u64 {
        let mut r = rng::seeded(6000 + i);
        let beta = [0.05, 0.5, 2.0][i as usize % 3];
        let y = rng::normal_matrix(&mut r, o, n, 1.0);
        let phi = rng::normal_matrix(&mut r, d, n, 1.0);

        let g = theory::functional_gradient(&y, &phi, beta).unwrap();
        let mut fd = Vec::new();
        let mut p = phi.clone();
        for a in 0..d {
            for b in 0..n {
                let h = 1e-5 * (1.0 + phi[(a, b)].abs());
                p[(a, b)] = phi[(a, b)] + h;
                let plus = induced_loss_of_phi(&y, &p, beta);
                p[(a, b)] = phi[(a, b)] - h;
                let minus = induced_loss_of_phi(&y, &p, beta);
                p[(a, b)] = phi[(a, b)];
                fd.push((plus - minus) / (2.0 * h));
            }
        }
        fd_err = fd_err.max(rel_err(g.data(), &fd));

        let z = theory::is_critical(&y, &Matrix::zeros(d, n), beta, tol).unwrap();
        zero_ok &= z.critical && !z.is_global;

        // Generic Φ: Y⋆ᵀY⊥ ≠ 0 and the gradient is nonzero.
        let c = theory::is_critical(&y, &phi, beta, tol).unwrap();
        forward_ok &= !c.critical && g.frobenius_norm() > 1e-3;

        // Targets orthogonal to the rows of Φ: Y⋆ᵀY⊥ = 0, and then the
        // gradient vanishes (checked against the oracle differences too).
        let proj = solve_projection(&phi);
        let y_orth = y.sub(&matmul(&y, &proj).unwrap()).unwrap();
        let c = theory::is_critical(&y_orth, &phi, beta, tol).unwrap();
        let g = theory::functional_gradient(&y_orth, &phi, beta).unwrap();
        let mut p = phi.clone();
        let mut fd_max = 0.0f64;
        for a in 0..d {
            for b in 0..n {
                let h = 1e-5 * (1.0 + phi[(a, b)].abs());
                p[(a, b)] = phi[(a, b)] + h;
                let plus = induced_loss_of_phi(&y_orth, &p, beta);
                p[(a, b)] = phi[(a, b)] - h;
                let minus = induced_loss_of_phi(&y_orth, &p, beta);
                p[(a, b)] = phi[(a, b)];
                fd_max = fd_max.max(((plus - minus) / (2.0 * h)).abs());
            }
        }
        backward_ok &= c.critical && g.max_abs() <= 1e-8 * (1.0 + y.sum_squares()) && fd_max < 1e-6;
    }
    let pass = verdict(
        "critical-point structure",
        fd_err <= 1e-4 && zero_ok && forward_ok && backward_ok,
        format!(
            "∇_Φ L⋆ max rel err {fd_err:.2e} (tol 1e-4); Φ=0 non-global critical: {zero_ok}; \
             Y⋆ᵀY⊥≠0 ⇒ not critical: {forward_ok}; Y⋆ᵀY⊥=0 ⇒ critical: {backward_ok}; 20 instances"
        ),
    );
    assert!(pass);
}

/// `Φᵀ(ΦΦᵀ)⁻¹Φ` through the library's solver, used only to build
/// orthogonal targets.
fn solve_projection(phi: &Matrix) -> Matrix {
    let s = lastlayer::linalg::solve_spd(&matmul_nt(phi, phi).unwrap(), phi).unwrap();
    matmul_tn(phi, &s).unwrap()
}

struct FlowRun {
    converged: bool,
    steps: usize,
    eig_violation: f64,
    loss_violation: f64,
}

fn flow_battery(outputs: usize) -> Vec<FlowRun> {
    let opts = FlowOptions {
        max_steps: 100_000,
        stop_ratio: Some(1e-3),
        ..FlowOptions::default()
    };
    (0..10u64)
        .map(|i| {
            let mut r = rng::seeded(7000 + i);
            let (d, n) = (3 + i as usize % 3, 6 + i as usize % 3);
            let xi = FlowState::default_kernel(d, &mut r);
            let phi = rng::normal_matrix(&mut r, d, n, 1.0);
            let y = rng::normal_matrix(&mut r, outputs, n, 1.0);
            let traj = theory::integrate_flow(&FlowState::new(phi, xi, 0.01).unwrap(), &y, &opts).unwrap();
            FlowRun {
                converged: traj.converged,
                steps: traj.steps,
                eig_violation: theory::check_eig_monotone(&traj).max_violation,
                loss_violation: theory::check_loss_monotone(&traj, 1e-9).max_violation,
            }
        })
        .collect()
}

#[test]
fn kernel_flow_dynamics() {
    let start = Instant::now();
    let runs = flow_battery(2);
    let converged = runs.iter().filter(|r| r.converged).count();
    let max_steps = runs.iter().map(|r| r.steps).max().unwrap();
    let eig = runs.iter().map(|r| r.eig_violation).fold(0.0, f64::max);
    let eig_bad = runs.iter().filter(|r| r.eig_violation > 0.0).count();
    let loss = runs.iter().map(|r| r.loss_violation).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();

    let conv = verdict(
        "kernel flow convergence (o = 2)",
        converged == 10 && secs <= 600.0,
        format!("{converged}/10 reach ‖Y⊥‖ ≤ 1e-3‖Y‖, max {max_steps} steps (limit 1e5), {secs:.1}s (limit 600s)"),
    );
    // Known failure: with two or more outputs the sorted eigenvalues of
    // Y⋆Y⋆ᵀ can decrease, since d/dt Y⋆Y⋆ᵀ = 2(AB + BA) is not PSD in general.
    verdict(
        "kernel flow eigenvalue monotonicity (o = 2)",
        eig == 0.0,
        format!("{eig_bad}/10 trajectories decrease an eigenvalue beyond 1e-6(1+eig), largest drop {eig:.2e}"),
    );
    let mono = verdict(
        "kernel flow L⋆ non-increasing (o = 2)",
        loss == 0.0,
        format!("largest increase {loss:.2e} over 10 trajectories"),
    );
    let rank1 = flow_battery(1);
    let eig1 = rank1.iter().map(|r| r.eig_violation).fold(0.0, f64::max);
    let r1 = verdict(
        "kernel flow eigenvalue monotonicity (o = 1, for reference)",
        eig1 == 0.0 && rank1.iter().all(|r| r.converged),
        format!("largest drop {eig1:.2e} over 10 trajectories"),
    );
    assert!(conv && mono && r1);
}

/// Iterations per epoch for `batch` on `n` samples.
fn steps_per_epoch(n: usize, batch: Option<usize>) -> usize {
    batch.map_or(1, |b| n.div_ceil(b))
}

struct Selected {
    lr: f64,
    reg: Option<f64>,
    train_mse: f64,
    w_delta: f64,
}

/// Runs every `(lr, reg)` pair over three seeds and keeps the pair with the
/// lowest mean final training MSE, the quantity being compared.
fn tune(
    splits: &lastlayer::Splits,
    model: &ModelSpec,
    method: Method,
    regs: &[Option<f64>],
    lrs: &[f64],
    batch: Option<usize>,
    steps: usize,
) -> Selected {
    let epochs = steps.div_ceil(steps_per_epoch(splits.train.len(), batch));
    let mut best: Option<Selected> = None;
    for &reg in regs {
        for &lr in lrs {
            let mut cfg = harness::default_train_config(method);
            match method {
                Method::ClosedFormRidge => cfg.beta = reg,
                Method::ClosedFormProximalSimple | Method::ClosedFormProximalLookahead => cfg.lambda = reg,
                _ => {}
            }
            cfg.learning_rate = lr;
            cfg.batch_size = batch;
            cfg.epochs = epochs;
            let (mut tr, mut wd) = (vec![], vec![]);
            for seed in 0..3 {
                cfg.seed = seed;
                let out = harness::train_once(model, &cfg, splits, EvalKind::Mse).unwrap();
                if out.divergence.is_some() {
                    tr.clear();
                    break;
                }
                tr.push(optim::evaluate(&out.backbone, &out.head, &splits.train, EvalKind::Mse).unwrap());
                wd.push(out.mean_w_delta);
            }
            if tr.len() < 3 || !mean(&tr).is_finite() {
                continue;
            }
            let cand = Selected {
                lr,
                reg,
                train_mse: mean(&tr),
                w_delta: mean(&wd),
            };
            if best.as_ref().is_none_or(|b| cand.train_mse < b.train_mse) {
                best = Some(cand);
            }
        }
    }
    best.expect("at least one configuration trains without diverging")
}

#[test]
fn stochastic_training_claims() {
    let splits = gen_regression_task(600, 4, 1, 16, 0.1, 0).unwrap();
    let model = ModelSpec {
        hidden: vec![32],
        activation: Activation::Tanh,
        parameterization: Parameterization::Standard,
    };
    let steps = 1000;
    let n = splits.train.len();
    // Losses are sums over the batch, so step sizes and penalties are swept
    // relative to the batch size.
    let lrs = |b: usize| [0.003, 0.01, 0.03, 0.1, 0.3].map(|c| c / b as f64);
    let prox_regs = |b: usize| [0.1, 1.0, 10.0].map(|c| Some(c * b as f64));
    let ridge_regs = |b: usize| [1e-4, 1e-3, 1e-2].map(|c| Some(c * b as f64));

    let mut all = true;
    let mut prox_at = Vec::new();
    for batch in [Some(8), Some(64), None] {
        let label = batch.map_or("full".to_string(), |b| b.to_string());
        let b = batch.unwrap_or(n);
        let prox = tune(&splits, &model, Method::ClosedFormProximalSimple, &prox_regs(b), &lrs(b), batch, steps);
        let joint = tune(&splits, &model, Method::JointSgdL2, &[None], &lrs(b), batch, steps);
        all &= verdict(
            &format!("proximal ≤ joint SGD train MSE, batch {label}"),
            prox.train_mse <= joint.train_mse,
            format!(
                "proximal {:.4e} (lr {:.2e}, λ {}) vs joint {:.4e} (lr {:.2e}), {steps} iterations, 3 seeds",
                prox.train_mse,
                prox.lr,
                prox.reg.unwrap_or(0.0),
                joint.train_mse,
                joint.lr
            ),
        );
        prox_at.push((batch, prox));
    }

    let full = tune(&splits, &model, Method::ClosedFormRidge, &ridge_regs(n), &lrs(n), None, steps);
    let prox_full = &prox_at[2].1;
    let ratio = full.train_mse.max(prox_full.train_mse) / full.train_mse.min(prox_full.train_mse);
    all &= verdict(
        "ridge matches proximal at full batch",
        ratio <= 1.2,
        format!(
            "train MSE ridge {:.4e} (β {}) vs proximal {:.4e} (λ {}), ratio {ratio:.3} (tol 1.2)",
            full.train_mse,
            full.reg.unwrap_or(0.0),
            prox_full.train_mse,
            prox_full.reg.unwrap_or(0.0)
        ),
    );

    let small = tune(&splits, &model, Method::ClosedFormRidge, &ridge_regs(8), &lrs(8), Some(8), steps);
    let prox_small = &prox_at[0].1;
    let jump = small.w_delta / prox_small.w_delta;
    all &= verdict(
        "ridge head jumps at batch 8",
        jump >= 3.0,
        format!(
            "mean ‖W_t − W_t−1‖_F ridge {:.3e} (β {}) vs proximal {:.3e} (λ {}), ratio {jump:.1} (need ≥ 3)",
            small.w_delta,
            small.reg.unwrap_or(0.0),
            prox_small.w_delta,
            prox_small.reg.unwrap_or(0.0)
        ),
    );
    assert!(all);
}

#[test]
fn classification_heuristic() {
    let splits = gen_classification_task(3000, 10, 16, 0).unwrap();
    let model = ModelSpec {
        hidden: vec![64],
        activation: Activation::Tanh,
        parameterization: Parameterization::Standard,
    };
    let mut cfg = harness::default_train_config(Method::ClosedFormProximalSimple);
    cfg.lambda = Some(1.0);
    cfg.batch_size = Some(64);
    cfg.learning_rate = 1e-2;
    cfg.epochs = 20;
    let out = harness::train_once(&model, &cfg, &splits, EvalKind::Accuracy).unwrap();
    let acc = optim::evaluate(&out.backbone, &out.head, &splits.test, EvalKind::Accuracy).unwrap();
    let acc_pass = verdict(
        "blob classification accuracy",
        acc >= 0.95,
        format!("test accuracy {:.2}% after 20 epochs (need ≥ 95%)", 100.0 * acc),
    );

    let phi = augment_features(&out.backbone.features(&splits.test.x).unwrap(), true);
    let logits = matmul(&out.head.w, &phi).unwrap();
    let base = argmax_columns(&logits);
    let invariant = [1e-6, 0.37, 1.0, 3.0, 1e6].iter().all(|&s| argmax_columns(&logits.scale(s)) == base);
    let inv_pass = verdict(
        "argmax invariant to positive logit scaling",
        invariant,
        format!("{} test predictions, scales 1e-6 to 1e6", base.len()),
    );
    assert!(acc_pass && inv_pass);
}

#[test]
fn dfiv_beats_naive_regression() {
    let cfg = DfivConfig::default();
    let (mut current, mut reest, mut naive) = (vec![], vec![], vec![]);
    for seed in 0..3 {
        let data = dfiv::generate_iv_data(5000, 5000, 1000, 2.0, 0.5, seed).unwrap();
        let out = dfiv::dfiv_train(&DfivConfig { seed, ..cfg.clone() }, &data).unwrap();
        assert!(out.divergence.is_none());
        current.push(dfiv::dfiv_evaluate(&out.state, &data, EvalMode::Current).unwrap());
        reest.push(dfiv::dfiv_evaluate(&out.state, &data, EvalMode::Reestimate).unwrap());
        naive.push(dfiv::naive_regression(&data, &dfiv::naive_config(seed), &[32, 16], Activation::Relu).unwrap());
    }
    let (c, r, nv) = (mean(&current), mean(&reest), mean(&naive));
    let mse_pass = verdict(
        "DFIV vs naive regression",
        r <= 0.5 * nv,
        format!("mean test MSE DFIV {r:.4} vs naive {nv:.4}, ratio {:.3} (tol 0.5), 3 seeds", r / nv),
    );
    let gap = c.max(r) / c.min(r);
    let per_seed: Vec<String> = current
        .iter()
        .zip(&reest)
        .map(|(a, b)| format!("{:.2}", a.max(*b) / a.min(*b)))
        .collect();
    let gap_pass = verdict(
        "DFIV current vs reestimate gap",
        gap <= 1.5,
        format!(
            "mean MSE current {c:.4} vs reestimate {r:.4}, ratio {gap:.3} (tol 1.5); per seed {}",
            per_seed.join(", ")
        ),
    );
    assert!(mse_pass && gap_pass);
}

fn run_twice(spec: &mut ExperimentSpec, a: &Path, b: &Path) -> bool {
    spec.out = a.to_path_buf();
    let s = harness::run_experiment(spec).unwrap();
    spec.out = b.to_path_buf();
    harness::run_experiment(spec).unwrap();
    s.cells.iter().flat_map(|c| &c.runs).all(|run| {
        std::fs::read(a.join(&run.csv)).unwrap() == std::fs::read(b.join(&run.csv)).unwrap()
    })
}

#[test]
fn runs_are_deterministic() {
    let mut identical = 0;
    let mut total = 0;
    for method in Method::ALL {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = ExperimentSpec::new(if method == Method::JointSgdXent {
            Task::SynthClassification
        } else {
            Task::SynthRegression
        });
        spec.train = harness::default_train_config(method);
        spec.train.epochs = 3;
        spec.train.batch_size = Some(16);
        spec.train.learning_rate = 1e-2;
        spec.data.n = 300;
        spec.data.classes = 3;
        spec.model.hidden = vec![8];
        spec.seeds = vec![0, 1];
        total += 1;
        identical += usize::from(run_twice(&mut spec, &dir.path().join("a"), &dir.path().join("b")));
    }
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::new(Task::Dfiv);
    spec.data.n1 = 200;
    spec.data.n2 = 200;
    spec.data.n_test = 50;
    spec.dfiv.iterations = 5;
    spec.dfiv.eval_every = 1;
    spec.seeds = vec![0, 1];
    total += 1;
    identical += usize::from(run_twice(&mut spec, &dir.path().join("a"), &dir.path().join("b")));

    let pass = verdict(
        "byte-identical repeated runs",
        identical == total,
        format!("{identical}/{total} configurations (5 methods and DFIV, 2 seeds each) reproduce their CSVs"),
    );
    assert!(pass);
}
