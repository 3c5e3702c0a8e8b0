//! Deterministic minibatch SGD with momentum.
//!
//! Update rule, with `m₀ = 0`:
//!
//! ```text
//! m_{t+1} = μ·m_t + g_t
//! θ_{t+1} = θ_t − η·m_{t+1}
//! ```
//!
//! Every pre-update state θ_t and minibatch is kept in a [`TrajectoryCache`] so
//! tangent propagation can revisit the exact primal trajectory.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ModelConfig, ParamLayout, ParamVector};
use crate::objective::{MlpObjective, Objective, Restricted};
use crate::scalar::Scalar;

pub use crate::linalg::Subspace;

/// Optimizer hyperparameters independent of the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub shuffle_seed: u64,
}

impl SgdSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_examples)
    }

    /// Minibatch index lists for the whole run: a fresh permutation per epoch,
    /// the final short batch kept.
    pub fn batches(&self, n_examples: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        let mut out = Vec::with_capacity(self.total_steps(n_examples));
        let mut order: Vec<usize> = (0..n_examples).collect();
        for _ in 0..self.epochs {
            order.shuffle(&mut rng);
            out.extend(order.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        out
    }
}

/// Full recipe for a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub shuffle_seed: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// 25 epochs of batch-64 SGD, learning rate 0.15, momentum 0.9.
    pub fn with_defaults(model: ModelConfig) -> Self {
        Self { epochs: 25, batch_size: 64, learning_rate: 0.15, momentum: 0.9, shuffle_seed: 0, model }
    }

    pub fn schedule(&self) -> SgdSchedule {
        SgdSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            shuffle_seed: self.shuffle_seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// 0 is the initial state.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

/// Primal trajectory of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryCache<T> {
    /// θ_t for t = 0..T, pre-update.
    pub step_params: Vec<Vec<T>>,
    pub step_batches: Vec<Vec<usize>>,
    pub final_params: Vec<T>,
    pub final_momentum: Vec<T>,
    pub loss_curve: Vec<EpochLoss>,
}

impl<T: Scalar> TrajectoryCache<T> {
    pub fn n_steps(&self) -> usize {
        self.step_batches.len()
    }

    pub fn initial_params(&self) -> &[T] {
        self.step_params.first().unwrap_or(&self.final_params)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.loss_curve.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn final_param_vector(&self, layout: ParamLayout) -> Result<ParamVector<T>> {
        ParamVector::new(self.final_params.clone(), layout)
    }
}

/// Loss evaluated on a held-out set after each epoch.
pub type EvalFn<'a, T> = dyn Fn(&[T]) -> Result<T> + 'a;

/// Runs SGD with momentum on any objective.
pub fn train_objective<T: Scalar, O: Objective<T>>(
    obj: &O,
    p0: &[T],
    schedule: &SgdSchedule,
    eval: Option<&EvalFn<'_, T>>,
) -> Result<TrajectoryCache<T>> {
    schedule.validate()?;
    let n = obj.n_params();
    if p0.len() != n {
        return Err(Error::InvalidArgument(format!("initial parameters have length {}, expected {n}", p0.len())));
    }
    if obj.n_examples() == 0 {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let eta = T::lit(schedule.learning_rate);
    let mu = T::lit(schedule.momentum);
    let batches = schedule.batches(obj.n_examples());
    let per_epoch = schedule.steps_per_epoch(obj.n_examples());

    let record = |epoch: usize, theta: &[T]| -> Result<EpochLoss> {
        let train_loss = obj.full_loss(theta)?.to_f64_lossy();
        let test_loss = eval.map(|f| f(theta)).transpose()?.map(T::to_f64_lossy);
        Ok(EpochLoss { epoch, train_loss, test_loss })
    };

    let mut theta = p0.to_vec();
    let mut momentum = vec![T::zero(); n];
    let mut step_params = Vec::with_capacity(batches.len());
    let mut loss_curve = vec![record(0, &theta).map_err(|e| diverged(e, 0))?];
    for (step, batch) in batches.iter().enumerate() {
        step_params.push(theta.clone());
        let (loss, grad) = obj.loss_and_grad(&theta, batch).map_err(|e| diverged(e, step))?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { step });
        }
        for ((t, m), g) in theta.iter_mut().zip(momentum.iter_mut()).zip(&grad) {
            *m = mu * *m + *g;
            *t -= eta * *m;
        }
        if (step + 1) % per_epoch == 0 {
            let epoch = (step + 1) / per_epoch;
            loss_curve.push(record(epoch, &theta).map_err(|e| diverged(e, step + 1))?);
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDiverged { step: batches.len() });
    }
    Ok(TrajectoryCache { step_params, step_batches: batches, final_params: theta, final_momentum: momentum, loss_curve })
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::TrainingDiverged { step },
        other => other,
    }
}

/// Re-executes every cached step and checks θ_{t+1} bit for bit.
pub fn replay_matches<T: Scalar, O: Objective<T>>(obj: &O, traj: &TrajectoryCache<T>, schedule: &SgdSchedule) -> Result<bool> {
    let eta = T::lit(schedule.learning_rate);
    let mu = T::lit(schedule.momentum);
    let mut momentum = vec![T::zero(); obj.n_params()];
    for (t, batch) in traj.step_batches.iter().enumerate() {
        let mut theta = traj.step_params[t].clone();
        let (_, grad) = obj.loss_and_grad(&theta, batch)?;
        for ((th, m), g) in theta.iter_mut().zip(momentum.iter_mut()).zip(&grad) {
            *m = mu * *m + *g;
            *th -= eta * *m;
        }
        let next = traj.step_params.get(t + 1).unwrap_or(&traj.final_params);
        if theta.iter().zip(next).any(|(a, b)| differs(*a, *b)) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// NaN-aware inequality.
fn differs<T: Scalar>(a: T, b: T) -> bool {
    !(a == b || (a.is_nan() && b.is_nan()))
}

/// Trains the MLP on `data`.
pub fn train<T: Scalar>(p0: &ParamVector<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrajectoryCache<T>> {
    train_with_eval(p0, data, None, cfg)
}

/// Trains the MLP, also recording the loss on `eval` after every epoch.
pub fn train_with_eval<T: Scalar>(
    p0: &ParamVector<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrajectoryCache<T>> {
    check_layout(p0, cfg)?;
    let obj = MlpObjective::new(data, cfg.model)?;
    let eval_obj = eval.map(|d| MlpObjective::<T>::new(d, cfg.model)).transpose()?;
    let eval_fn = eval_obj.as_ref().map(|o| move |theta: &[T]| o.full_loss(theta));
    train_objective(&obj, p0.as_slice(), &cfg.schedule(), eval_fn.as_ref().map(|f| f as &EvalFn<'_, T>))
}

fn check_layout<T: Scalar>(p0: &ParamVector<T>, cfg: &TrainConfig) -> Result<()> {
    if p0.layout() != cfg.model.layout {
        return Err(Error::InvalidArgument("parameter layout does not match the model config".into()));
    }
    Ok(())
}

/// Training confined to `θ₀ + P·φ`, with `φ` starting at zero.
#[derive(Clone, Debug)]
pub struct RestrictedRun<T> {
    /// Trajectory of the subspace coordinates φ.
    pub trajectory: TrajectoryCache<T>,
    /// θ₀ + P·φ_T
    pub final_params: Vec<T>,
}

pub fn train_restricted<T: Scalar>(
    p0: &ParamVector<T>,
    basis: &Subspace<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<RestrictedRun<T>> {
    check_layout(p0, cfg)?;
    if basis.dim() == 0 {
        return Err(Error::InvalidArgument("restricted training needs a subspace of dimension ≥ 1".into()));
    }
    let inner = MlpObjective::new(data, cfg.model)?;
    let obj = Restricted::new(&inner, p0.as_slice().to_vec(), basis)?;
    let eval_obj = eval.map(|d| MlpObjective::<T>::new(d, cfg.model)).transpose()?;
    let eval_fn = eval_obj.as_ref().map(|o| {
        let obj = &obj;
        move |phi: &[T]| o.full_loss(&obj.lift(phi))
    });
    let phi0 = vec![T::zero(); basis.dim()];
    let trajectory = train_objective(&obj, &phi0, &cfg.schedule(), eval_fn.as_ref().map(|f| f as &EvalFn<'_, T>))?;
    let final_params = obj.lift(&trajectory.final_params);
    Ok(RestrictedRun { trajectory, final_params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::linalg::random_subspace;
    use crate::nn::{init_params, Activation, LossKind};
    use faer::Mat;
    use rand::Rng;

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(n, 4, |_, _| rng.random::<f64>());
        let y = (0..n).map(|i| usize::from(x[(i, 0)] + x[(i, 1)] > 1.0)).collect();
        Dataset::new(x, y, "toy").unwrap()
    }

    fn toy_cfg(epochs: usize) -> TrainConfig {
        let model = ModelConfig {
            activation: Activation::Tanh,
            loss: LossKind::CrossEntropy,
            layout: ParamLayout::new(4, 3, 2).unwrap(),
        };
        TrainConfig { epochs, batch_size: 5, learning_rate: 0.1, momentum: 0.9, shuffle_seed: 3, model }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let cfg = toy_cfg(0);
        let p0 = init_params::<f64>(cfg.model.layout, 1);
        let t = train(&p0, &toy_data(12, 0), &cfg).unwrap();
        assert_eq!(t.final_params, p0.as_slice());
        assert_eq!(t.n_steps(), 0);
    }

    #[test]
    fn step_count_and_determinism() {
        let cfg = toy_cfg(3);
        let data = toy_data(12, 0);
        let p0 = init_params::<f64>(cfg.model.layout, 1);
        let a = train(&p0, &data, &cfg).unwrap();
        let b = train(&p0, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_steps(), 3 * 3);
        assert_eq!(a.step_params.len(), a.step_batches.len());
        assert_eq!(a.step_batches[2].len(), 2, "short final batch kept");
        assert_eq!(a.loss_curve.len(), 4);
        let obj = MlpObjective::new(&data, cfg.model).unwrap();
        assert!(replay_matches(&obj, &a, &cfg.schedule()).unwrap());
    }

    #[test]
    fn momentum_free_matches_plain_sgd() {
        let mut cfg = toy_cfg(2);
        cfg.momentum = 0.0;
        let data = toy_data(10, 1);
        let p0 = init_params::<f64>(cfg.model.layout, 2);
        let t = train(&p0, &data, &cfg).unwrap();
        let obj = MlpObjective::new(&data, cfg.model).unwrap();
        let mut theta = p0.as_slice().to_vec();
        for batch in cfg.schedule().batches(10) {
            let (_, g) = obj.loss_and_grad(&theta, &batch).unwrap();
            for (t, g) in theta.iter_mut().zip(g) {
                *t -= 0.1 * g;
            }
        }
        assert_eq!(theta, t.final_params);
    }

    #[test]
    fn divergence_reports_step() {
        let mut cfg = toy_cfg(50);
        cfg.learning_rate = 1e6;
        cfg.momentum = 0.99;
        cfg.model.loss = LossKind::MseOnProbabilities;
        cfg.model.activation = Activation::Relu;
        let p0 = init_params::<f64>(cfg.model.layout, 1);
        let err = train(&p0, &toy_data(12, 0), &cfg);
        assert!(matches!(err, Err(Error::TrainingDiverged { .. }) | Ok(_)));
        let q = crate::objective::Quadratic::new(Mat::from_fn(1, 1, |_, _| 1.0)).unwrap();
        let sched = SgdSchedule { epochs: 5000, batch_size: 1, learning_rate: 10.0, momentum: 0.0, shuffle_seed: 0 };
        match train_objective(&q, &[1.0], &sched, None) {
            Err(Error::TrainingDiverged { step }) => assert!(step > 0 && step < 5000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let p0 = init_params::<f64>(toy_cfg(1).model.layout, 1);
        let data = toy_data(6, 0);
        for f in [
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.learning_rate = 0.0,
            |c: &mut TrainConfig| c.momentum = 1.0,
        ] {
            let mut cfg = toy_cfg(1);
            f(&mut cfg);
            assert!(matches!(train(&p0, &data, &cfg), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn full_basis_restriction_reproduces_training() {
        let cfg = toy_cfg(4);
        let data = toy_data(12, 4);
        let p0 = init_params::<f64>(cfg.model.layout, 5);
        let n = cfg.model.layout.n_params();
        let full = train(&p0, &data, &cfg).unwrap();
        let r = train_restricted(&p0, &Subspace::full(n), &data, None, &cfg).unwrap();
        for (a, b) in full.loss_curve.iter().zip(&r.trajectory.loss_curve) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-10);
        }
        for (a, b) in full.final_params.iter().zip(&r.final_params) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn restricted_gradient_is_projected_full_gradient() {
        let cfg = toy_cfg(1);
        let data = toy_data(12, 4);
        let p0 = init_params::<f64>(cfg.model.layout, 5);
        let n = cfg.model.layout.n_params();
        let basis = random_subspace::<f64>(n, 6, 1).unwrap();
        let inner = MlpObjective::new(&data, cfg.model).unwrap();
        let obj = Restricted::new(&inner, p0.as_slice().to_vec(), &basis).unwrap();
        let phi = [0.1, -0.2, 0.3, 0.0, 0.05, 0.4];
        let batch: Vec<usize> = (0..12).collect();
        let (_, g_phi) = obj.loss_and_grad(&phi, &batch).unwrap();
        let theta = obj.lift(&phi);
        let (_, g) = inner.loss_and_grad(&theta, &batch).unwrap();
        for (r, gr) in g_phi.iter().enumerate() {
            let want: f64 = (0..n).map(|i| basis.basis()[(i, r)] * g[i]).sum();
            assert!((gr - want).abs() < 1e-12);
        }
    }
}
