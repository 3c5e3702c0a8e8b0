use std::time::Instant;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tjac_core::data::{bundled_digits, Dataset};
use tjac_core::jacobian::{
    default_fd_step, fd_jacobian, full_jacobian, full_jacobian_with, gradient_flow_oracle, max_relative_column_error,
    quadratic_oracle,
};
use tjac_core::linalg::random_subspace;
use tjac_core::nn::{init_params, Activation, LossKind, ModelConfig, ParamLayout};
use tjac_core::objective::Quadratic;
use tjac_core::train::{train, train_objective, SgdSchedule};
use tjac_core::{Result as CoreResult, TrainConfig};

/// One oracle comparison with its threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub passed: bool,
}

fn timed(
    name: &str,
    metric: &str,
    tolerance: f64,
    f: impl FnOnce() -> CoreResult<f64>,
) -> CoreResult<OracleCheck> {
    let start = Instant::now();
    let value = f()?;
    Ok(OracleCheck {
        name: name.into(),
        metric: metric.into(),
        value,
        tolerance,
        seconds: start.elapsed().as_secs_f64(),
        // A zero tolerance demands exact equality.
        passed: if tolerance == 0.0 { value == 0.0 } else { value < tolerance },
    })
}

fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

/// `Q·diag(λ)·Qᵀ` with `Q` random orthogonal and λ uniform on `[lo, hi]`.
pub fn random_spd(d: usize, lo: f64, hi: f64, seed: u64) -> CoreResult<Mat<f64>> {
    let q = random_subspace::<f64>(d, d, seed)?;
    let q = q.basis();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let lam: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
    let h = Mat::from_fn(d, d, |i, j| (0..d).map(|k| q[(i, k)] * lam[k] * q[(j, k)]).sum::<f64>());
    // Exact symmetry.
    Ok(Mat::from_fn(d, d, |i, j| 0.5 * (h[(i, j)] + h[(j, i)])))
}

fn quadratic_loop_jacobian(h: &Mat<f64>, eta: f64, mu: f64, steps: usize, seed: u64) -> CoreResult<Mat<f64>> {
    let d = h.nrows();
    let q = Quadratic::new(h.clone())?;
    let sched = SgdSchedule { epochs: steps, batch_size: 1, learning_rate: eta, momentum: mu, shuffle_seed: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p0: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let traj = train_objective(&q, &p0, &sched, None)?;
    full_jacobian_with(&q, &traj, &sched, 4)
}

/// Training-loop Jacobian on quadratics against the closed-form matrix power.
pub fn quadratic_closed_form() -> CoreResult<OracleCheck> {
    timed("quadratic_closed_form", "max_abs_error", 1e-10, || {
        let mut worst = 0.0f64;
        for seed in 0..10u64 {
            let h = random_spd(10, 0.05, 1.0, 100 + seed)?;
            for mu in [0.0, 0.9] {
                let jac = quadratic_loop_jacobian(&h, 0.05, mu, 200, seed)?;
                let oracle = quadratic_oracle(h.as_ref(), 0.05, mu, 200)?;
                worst = worst.max(max_abs_diff(&jac, &oracle));
            }
        }
        Ok(worst)
    })
}

/// Small-step plain SGD on a quadratic against `exp(−H·t)` at `t = 1`.
pub fn gradient_flow() -> CoreResult<OracleCheck> {
    timed("gradient_flow", "frobenius_relative_error", 1e-3, || {
        let h = random_spd(10, 0.05, 1.0, 7)?;
        let jac = quadratic_loop_jacobian(&h, 1e-3, 0.0, 1000, 7)?;
        let oracle = gradient_flow_oracle(h.as_ref(), 1.0)?;
        Ok((&jac - &oracle).norm_l2() / oracle.norm_l2())
    })
}

fn toy_setup(epochs: usize) -> CoreResult<(Dataset, TrainConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Mat::from_fn(10, 4, |_, _| rng.random::<f64>());
    let y = (0..10).map(|i| usize::from(x[(i, 2)] > 0.5)).collect();
    let data = Dataset::new(x, y, "toy")?;
    let model = ModelConfig { activation: Activation::Tanh, loss: LossKind::CrossEntropy, layout: ParamLayout::new(4, 3, 2)? };
    Ok((data, TrainConfig { epochs, batch_size: 5, learning_rate: 0.2, momentum: 0.9, shuffle_seed: 1, model }))
}

/// 4-3-2 tanh network, 20 steps, against central differences.
pub fn finite_differences() -> CoreResult<OracleCheck> {
    timed("finite_differences", "max_relative_column_error", 1e-4, || {
        let (data, cfg) = toy_setup(10)?;
        let p0 = init_params::<f64>(cfg.model.layout, 3);
        let traj = train(&p0, &data, &cfg)?;
        let j = full_jacobian(&traj, &data, &cfg, 8)?.matrix;
        let fd = fd_jacobian(&p0, &data, &cfg, default_fd_step(p0.as_slice(), 1.0))?;
        Ok(max_relative_column_error(j.as_ref(), fd.as_ref()))
    })
}

fn digits_setup(epochs: usize) -> CoreResult<(Dataset, TrainConfig)> {
    let all = bundled_digits()?;
    let idx: Vec<usize> = (0..128).collect();
    let data = all.select(&idx, "digits-128");
    let model = ModelConfig::new(ParamLayout::digits(4));
    Ok((data, TrainConfig { epochs, batch_size: 64, learning_rate: 0.2, momentum: 0.9, shuffle_seed: 0, model }))
}

/// Zero epochs give the identity exactly, for the toy net and a digits net.
pub fn identity() -> CoreResult<OracleCheck> {
    timed("identity", "max_abs_deviation", 0.0, || {
        let mut worst = 0.0f64;
        for (data, cfg) in [toy_setup(0)?, digits_setup(0)?] {
            let p0 = init_params::<f64>(cfg.model.layout, 1);
            let traj = train(&p0, &data, &cfg)?;
            let j = full_jacobian(&traj, &data, &cfg, 16)?.matrix;
            worst = worst.max(max_abs_diff(&j, &Mat::identity(j.nrows(), j.ncols())));
        }
        Ok(worst)
    })
}

/// Jacobians from different block sizes agree bit for bit.
pub fn block_invariance() -> CoreResult<OracleCheck> {
    timed("block_invariance", "differing_entries", 0.0, || {
        let (data, cfg) = digits_setup(2)?;
        let p0 = init_params::<f64>(cfg.model.layout, 2);
        let traj = train(&p0, &data, &cfg)?;
        let n = p0.len();
        let reference = full_jacobian(&traj, &data, &cfg, 1)?.matrix;
        let mut differing = 0usize;
        for bs in [7, 64, n] {
            let j = full_jacobian(&traj, &data, &cfg, bs)?.matrix;
            for c in 0..n {
                for r in 0..n {
                    differing += usize::from(j[(r, c)].to_bits() != reference[(r, c)].to_bits());
                }
            }
        }
        Ok(differing as f64)
    })
}

pub fn run_all() -> CoreResult<Vec<OracleCheck>> {
    Ok(vec![quadratic_closed_form()?, gradient_flow()?, finite_differences()?, identity()?, block_invariance()?])
}
