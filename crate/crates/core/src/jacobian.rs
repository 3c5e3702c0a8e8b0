//! Training Jacobian `J(θ₀) = ∂θ_T/∂θ₀` by tangent propagation.
//!
//! Differentiating the SGD-with-momentum recursion gives, for a block of
//! tangent columns `dΘ` with `dM₀ = 0`,
//!
//! ```text
//! dM_{t+1} = μ·dM_t + H(θ_t; batch_t)·dΘ_t
//! dΘ_{t+1} = dΘ_t − η·dM_{t+1}
//! ```
//!
//! which is replayed over the cached primal trajectory. Columns never
//! interact, so the identity can be pushed through in independent blocks, on
//! any number of threads, without changing a single bit of the result.

use std::collections::BTreeMap;

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{mm, ParamVector};
use crate::objective::{MlpObjective, Objective, Workspace};
use crate::scalar::Scalar;
use crate::train::{train_objective, SgdSchedule, TrainConfig, TrajectoryCache};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JacobianMeta {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub data_tag: String,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingJacobian<T> {
    /// Column `j` is `∂θ_T/∂θ₀[j]`.
    pub matrix: Mat<T>,
    pub meta: JacobianMeta,
}

impl<T: Scalar> TrainingJacobian<T> {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

fn check_trajectory<T: Scalar, O: Objective<T>>(obj: &O, traj: &TrajectoryCache<T>, schedule: &SgdSchedule) -> Result<()> {
    let expected = schedule.total_steps(obj.n_examples());
    if traj.n_steps() != expected || traj.step_params.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} steps but the schedule implies {expected}",
            traj.n_steps()
        )));
    }
    if traj.final_params.len() != obj.n_params() {
        return Err(Error::InvalidArgument("trajectory does not match the objective's parameter count".into()));
    }
    Ok(())
}

/// Pushes `tangents0` (N×k) through every cached optimizer step.
pub fn propagate_tangents_with<T: Scalar, O: Objective<T>>(
    obj: &O,
    traj: &TrajectoryCache<T>,
    tangents0: MatRef<'_, T>,
    schedule: &SgdSchedule,
) -> Result<Mat<T>> {
    check_trajectory(obj, traj, schedule)?;
    if tangents0.nrows() != obj.n_params() {
        return Err(Error::InvalidArgument(format!(
            "tangents have {} rows, expected {}",
            tangents0.nrows(),
            obj.n_params()
        )));
    }
    if tangents0.ncols() == 0 {
        return Err(Error::InvalidArgument("need at least one tangent column".into()));
    }
    let eta = T::lit(schedule.learning_rate);
    let mu = T::lit(schedule.momentum);
    let mut d_theta = tangents0.to_owned();
    let mut d_mom = Mat::<T>::zeros(d_theta.nrows(), d_theta.ncols());
    let mut hv = Mat::<T>::zeros(d_theta.nrows(), d_theta.ncols());
    let mut ws = Workspace::default();
    for (step, (theta, batch)) in traj.step_params.iter().zip(&traj.step_batches).enumerate() {
        obj.hvp_block_into(theta, d_theta.as_ref(), batch, hv.as_mut(), &mut ws)?;
        let mut finite = true;
        for j in 0..d_theta.ncols() {
            let (dt, dm, h) = (d_theta.col_as_slice_mut(j), d_mom.col_as_slice_mut(j), hv.col_as_slice(j));
            for ((t, m), &hv) in dt.iter_mut().zip(dm.iter_mut()).zip(h) {
                *m = mu * *m + hv;
                *t -= eta * *m;
                finite &= t.is_finite();
            }
        }
        if !finite {
            return Err(Error::TangentDiverged { step });
        }
    }
    Ok(d_theta)
}

/// MLP tangent propagation over `data`.
pub fn propagate_tangents<T: Scalar>(
    traj: &TrajectoryCache<T>,
    tangents0: MatRef<'_, T>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Mat<T>> {
    let obj = MlpObjective::new(data, cfg.model)?;
    propagate_tangents_with(&obj, traj, tangents0, &cfg.schedule())
}

/// Full N×N Jacobian, identity columns pushed through in blocks of `block_size`.
///
/// Blocks run on the current rayon pool and are assembled in column order.
pub fn full_jacobian_with<T: Scalar, O: Objective<T>>(
    obj: &O,
    traj: &TrajectoryCache<T>,
    schedule: &SgdSchedule,
    block_size: usize,
) -> Result<Mat<T>> {
    if block_size == 0 {
        return Err(Error::InvalidArgument("block_size must be at least 1".into()));
    }
    check_trajectory(obj, traj, schedule)?;
    let n = obj.n_params();
    let starts: Vec<usize> = (0..n).step_by(block_size).collect();
    let blocks: Vec<Mat<T>> = starts
        .par_iter()
        .map(|&start| {
            let k = block_size.min(n - start);
            let seed = Mat::from_fn(n, k, |i, j| if i == start + j { T::one() } else { T::zero() });
            propagate_tangents_with(obj, traj, seed.as_ref(), schedule)
        })
        .collect::<Result<_>>()?;
    let mut out = Mat::<T>::zeros(n, n);
    for (&start, block) in starts.iter().zip(&blocks) {
        out.as_mut().subcols_mut(start, block.ncols()).copy_from(block.as_ref());
    }
    Ok(out)
}

/// Training Jacobian of the MLP run recorded in `traj`.
pub fn full_jacobian<T: Scalar>(
    traj: &TrajectoryCache<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    block_size: usize,
) -> Result<TrainingJacobian<T>> {
    let obj = MlpObjective::new(data, cfg.model)?;
    let matrix = full_jacobian_with(&obj, traj, &cfg.schedule(), block_size)?;
    let mut seeds = BTreeMap::new();
    seeds.insert("shuffle".to_string(), cfg.shuffle_seed);
    Ok(TrainingJacobian {
        matrix,
        meta: JacobianMeta { config_hash: String::new(), seeds, data_tag: data.name().to_string(), steps: traj.n_steps() },
    })
}

/// Exact Jacobian of `steps` SGD-with-momentum steps on `½θᵀHθ`.
///
/// Top-left d×d block of `A^steps` with `A = [[I − ηH, −ημI], [H, μI]]` acting
/// on the state `(θ, m)`.
pub fn quadratic_oracle<T: Scalar>(h: MatRef<'_, T>, eta: f64, mu: f64, steps: usize) -> Result<Mat<T>> {
    let d = h.nrows();
    if d == 0 || h.ncols() != d {
        return Err(Error::InvalidArgument("quadratic oracle needs a non-empty square matrix".into()));
    }
    let (eta, mu) = (T::lit(eta), T::lit(mu));
    let mut a = Mat::<T>::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            let id = if i == j { T::one() } else { T::zero() };
            a[(i, j)] = id - eta * h[(i, j)];
            a[(i, d + j)] = -eta * mu * id;
            a[(d + i, j)] = h[(i, j)];
            a[(d + i, d + j)] = mu * id;
        }
    }
    let mut acc = Mat::<T>::identity(2 * d, 2 * d);
    let mut base = a;
    let mut e = steps;
    while e > 0 {
        if e & 1 == 1 {
            let mut next = Mat::<T>::zeros(2 * d, 2 * d);
            mm(next.as_mut(), faer::Accum::Replace, acc.as_ref(), base.as_ref());
            acc = next;
        }
        e >>= 1;
        if e > 0 {
            let mut sq = Mat::<T>::zeros(2 * d, 2 * d);
            mm(sq.as_mut(), faer::Accum::Replace, base.as_ref(), base.as_ref());
            base = sq;
        }
    }
    Ok(acc.as_ref().submatrix(0, 0, d, d).to_owned())
}

/// `exp(−H·t)` for symmetric `H`, the training Jacobian of gradient flow on `½θᵀHθ`.
pub fn gradient_flow_oracle<T: Scalar>(h: MatRef<'_, T>, t: f64) -> Result<Mat<T>> {
    let d = h.nrows();
    if d == 0 || h.ncols() != d {
        return Err(Error::InvalidArgument("gradient-flow oracle needs a non-empty square matrix".into()));
    }
    let eig = h.self_adjoint_eigen(faer::Side::Lower).map_err(|_| Error::SvdFailed)?;
    let (q, lam) = (eig.U(), eig.S().column_vector());
    let scaled = Mat::from_fn(d, d, |i, j| q[(i, j)] * (-lam[j] * T::lit(t)).exp());
    let mut out = Mat::<T>::zeros(d, d);
    mm(out.as_mut(), faer::Accum::Replace, scaled.as_ref(), q.transpose());
    Ok(out)
}

/// Central finite differences of the training map along each coordinate.
pub fn fd_jacobian_with<T: Scalar, O: Objective<T>>(obj: &O, p0: &[T], schedule: &SgdSchedule, h: f64) -> Result<Mat<T>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} must be positive")));
    }
    let n = obj.n_params();
    let mut out = Mat::<T>::zeros(n, n);
    let step = T::lit(h);
    for j in 0..n {
        let mut plus = p0.to_vec();
        plus[j] += step;
        let mut minus = p0.to_vec();
        minus[j] -= step;
        let fp = train_objective(obj, &plus, schedule, None)?.final_params;
        let fm = train_objective(obj, &minus, schedule, None)?.final_params;
        let scale = T::lit(0.5 / h);
        for i in 0..n {
            out[(i, j)] = (fp[i] - fm[i]) * scale;
        }
    }
    Ok(out)
}

pub fn fd_jacobian<T: Scalar>(p0: &ParamVector<T>, data: &Dataset, cfg: &TrainConfig, h: f64) -> Result<Mat<T>> {
    let obj = MlpObjective::new(data, cfg.model)?;
    fd_jacobian_with(&obj, p0.as_slice(), &cfg.schedule(), h)
}

/// `1e-4·‖θ₀‖/‖v‖`, the default central-difference step along `v`.
pub fn default_fd_step<T: Scalar>(p0: &[T], direction_norm: f64) -> f64 {
    let norm = p0.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    1e-4 * norm / direction_norm
}

/// `max_j ‖a_j − b_j‖ / ‖b_j‖` over columns (absolute error where `b_j = 0`).
pub fn max_relative_column_error<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    (0..a.ncols())
        .map(|j| {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..a.nrows() {
                let (x, y) = (a[(i, j)].to_f64_lossy(), b[(i, j)].to_f64_lossy());
                num += (x - y) * (x - y);
                den += y * y;
            }
            if den > 0.0 { (num / den).sqrt() } else { num.sqrt() }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Activation, LossKind, ModelConfig, ParamLayout};
    use crate::objective::Quadratic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup(epochs: usize) -> (Dataset, TrainConfig, ParamVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Mat::from_fn(10, 4, |_, _| rng.random::<f64>());
        let y = (0..10).map(|i| usize::from(x[(i, 2)] > 0.5)).collect();
        let data = Dataset::new(x, y, "tiny").unwrap();
        let model = ModelConfig { activation: Activation::Tanh, loss: LossKind::CrossEntropy, layout: ParamLayout::new(4, 3, 2).unwrap() };
        let cfg = TrainConfig { epochs, batch_size: 5, learning_rate: 0.2, momentum: 0.9, shuffle_seed: 1, model };
        (data, cfg, init_params(model.layout, 3))
    }

    #[test]
    fn zero_tangents_stay_zero() {
        let (data, cfg, p0) = tiny_setup(3);
        let traj = crate::train::train(&p0, &data, &cfg).unwrap();
        let out = propagate_tangents(&traj, Mat::<f64>::zeros(23, 2).as_ref(), &data, &cfg).unwrap();
        assert!(out.col_iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_epochs_give_identity() {
        let (data, cfg, p0) = tiny_setup(0);
        let traj = crate::train::train(&p0, &data, &cfg).unwrap();
        let j = full_jacobian(&traj, &data, &cfg, 7).unwrap();
        assert_eq!(j.matrix, Mat::<f64>::identity(23, 23));
    }

    #[test]
    fn directional_derivative_matches_central_difference() {
        let (data, cfg, p0) = tiny_setup(10); // 20 steps
        let traj = crate::train::train(&p0, &data, &cfg).unwrap();
        assert_eq!(traj.n_steps(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..23).map(|_| rng.random::<f64>() - 0.5).collect();
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let jv = propagate_tangents(&traj, MatRef::from_column_major_slice(&v, 23, 1), &data, &cfg).unwrap();
        let h = default_fd_step(p0.as_slice(), vnorm);
        let shifted = |s: f64| {
            let vals = p0.as_slice().iter().zip(&v).map(|(a, b)| a + s * b).collect();
            crate::train::train(&ParamVector::new(vals, p0.layout()).unwrap(), &data, &cfg).unwrap().final_params
        };
        let (fp, fm) = (shifted(h), shifted(-h));
        let fd = Mat::from_fn(23, 1, |i, _| (fp[i] - fm[i]) / (2.0 * h));
        assert!(max_relative_column_error(jv.as_ref(), fd.as_ref()) < 1e-4);
    }

    #[test]
    fn propagation_is_linear() {
        let (data, cfg, p0) = tiny_setup(4);
        let traj = crate::train::train(&p0, &data, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let uv = Mat::from_fn(23, 2, |_, _| rng.random::<f64>() - 0.5);
        let (a, b) = (1.7, -0.3);
        let comb = Mat::from_fn(23, 1, |i, _| a * uv[(i, 0)] + b * uv[(i, 1)]);
        let out = propagate_tangents(&traj, uv.as_ref(), &data, &cfg).unwrap();
        let out_comb = propagate_tangents(&traj, comb.as_ref(), &data, &cfg).unwrap();
        let want = Mat::from_fn(23, 1, |i, _| a * out[(i, 0)] + b * out[(i, 1)]);
        assert!(max_relative_column_error(out_comb.as_ref(), want.as_ref()) < 1e-10);
    }

    #[test]
    fn block_size_does_not_change_a_bit() {
        let (data, cfg, p0) = tiny_setup(3);
        let traj = crate::train::train(&p0, &data, &cfg).unwrap();
        let j1 = full_jacobian(&traj, &data, &cfg, 1).unwrap().matrix;
        for bs in [4, 64] {
            let jb = full_jacobian(&traj, &data, &cfg, bs).unwrap().matrix;
            assert!((0..23).all(|c| (0..23).all(|r| j1[(r, c)].to_bits() == jb[(r, c)].to_bits())));
        }
        assert!(full_jacobian(&traj, &data, &cfg, 0).is_err());
    }

    #[test]
    fn mismatched_trajectory_is_rejected() {
        let (data, cfg, p0) = tiny_setup(3);
        let traj = crate::train::train(&p0, &data, &cfg).unwrap();
        let mut other = cfg;
        other.epochs = 4;
        assert!(propagate_tangents(&traj, Mat::<f64>::identity(23, 1).as_ref(), &data, &other).is_err());
    }

    #[test]
    fn gradient_flow_oracle_diagonal() {
        let h = Mat::from_fn(2, 2, |i, j| if i == j { [1.0f64, 0.5][i] } else { 0.0 });
        let e = gradient_flow_oracle(h.as_ref(), 2.0).unwrap();
        assert!((e[(0, 0)] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((e[(1, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        assert!(e[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn quadratic_oracle_scalar_cases() {
        let h = Mat::from_fn(1, 1, |_, _| 2.0f64);
        let j = quadratic_oracle(h.as_ref(), 0.1, 0.0, 3).unwrap();
        assert!((j[(0, 0)] - 0.512).abs() < 1e-15);
        let id = quadratic_oracle(h.as_ref(), 0.1, 0.9, 0).unwrap();
        assert_eq!(id[(0, 0)], 1.0);
        // Two momentum steps by hand: θ1 = (1−ηh)θ0, θ2 = (1−ηh)θ1 − ημ·hθ0.
        let (eta, mu, hh) = (0.1, 0.5, 2.0);
        let j2 = quadratic_oracle(h.as_ref(), eta, mu, 2).unwrap();
        let want = (1.0 - eta * hh) * (1.0 - eta * hh) - eta * mu * hh;
        assert!((j2[(0, 0)] - want).abs() < 1e-15);
    }

    #[test]
    fn training_loop_matches_quadratic_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mat::from_fn(4, 4, |_, _| rng.random::<f64>() - 0.5);
        let h = Mat::from_fn(4, 4, |i, j| (0..4).map(|k| a[(i, k)] * a[(j, k)]).sum::<f64>() + if i == j { 0.1 } else { 0.0 });
        let q = Quadratic::new(h.clone()).unwrap();
        let sched = SgdSchedule { epochs: 30, batch_size: 1, learning_rate: 0.1, momentum: 0.9, shuffle_seed: 0 };
        let p0 = [0.3, -0.1, 0.7, 0.2];
        let traj = train_objective(&q, &p0, &sched, None).unwrap();
        let jac = full_jacobian_with(&q, &traj, &sched, 3).unwrap();
        let oracle = quadratic_oracle(h.as_ref(), 0.1, 0.9, 30).unwrap();
        let fd = fd_jacobian_with(&q, &p0, &sched, 1e-3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((jac[(i, j)] - oracle[(i, j)]).abs() < 1e-12);
                assert!((fd[(i, j)] - oracle[(i, j)]).abs() < 1e-6);
            }
        }
    }
}
