//! Differentiable training objectives.
//!
//! The SGD loop and tangent propagation only need minibatch gradients and
//! Hessian-vector products, so they are written against [`Objective`]. The MLP
//! is one implementation; the quadratic `½θᵀHθ` is another, which lets the
//! closed-form oracle exercise the very same training and propagation code.

use faer::{Accum, Mat, MatMut, MatRef};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Subspace;
use crate::nn::{self, mm, Batch, HvpScratch, ModelConfig, ParamVector};
use crate::scalar::Scalar;

pub trait Objective<T: Scalar>: Sync {
    fn n_params(&self) -> usize;

    /// Number of examples the minibatch schedule draws from.
    fn n_examples(&self) -> usize;

    /// Mean loss and gradient over the examples in `batch`.
    fn loss_and_grad(&self, params: &[T], batch: &[usize]) -> Result<(T, Vec<T>)>;

    /// Hessian of the minibatch loss applied to each column of `tangents`, written to `dst`.
    fn hvp_block_into(
        &self,
        params: &[T],
        tangents: MatRef<'_, T>,
        batch: &[usize],
        dst: MatMut<'_, T>,
        ws: &mut Workspace<T>,
    ) -> Result<()>;

    fn hvp_block(&self, params: &[T], tangents: MatRef<'_, T>, batch: &[usize]) -> Result<Mat<T>> {
        let mut out = Mat::<T>::zeros(tangents.nrows(), tangents.ncols());
        self.hvp_block_into(params, tangents, batch, out.as_mut(), &mut Workspace::default())?;
        Ok(out)
    }

    /// Mean loss over every example.
    fn full_loss(&self, params: &[T]) -> Result<T>;
}

/// Buffers reused across HVP calls on one thread.
pub struct Workspace<T> {
    hvp: HvpScratch<T>,
}

impl<T: Default> Default for Workspace<T> {
    fn default() -> Self {
        Self { hvp: HvpScratch::default() }
    }
}

/// MLP loss on a fixed dataset.
pub struct MlpObjective<T> {
    cfg: ModelConfig,
    features: Mat<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> MlpObjective<T> {
    pub fn new(data: &Dataset, cfg: ModelConfig) -> Result<Self> {
        if data.n_features() != cfg.layout.input {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} features, model expects {}",
                data.n_features(),
                cfg.layout.input
            )));
        }
        Ok(Self { cfg, features: nn::features_as(data), labels: data.labels().to_vec() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn params(&self, params: &[T]) -> Result<ParamVector<T>> {
        ParamVector::new(params.to_vec(), self.cfg.layout)
    }

    fn gather(&self, batch: &[usize]) -> (Mat<T>, Vec<usize>) {
        let x = Mat::from_fn(batch.len(), self.features.ncols(), |i, j| self.features[(batch[i], j)]);
        (x, batch.iter().map(|&i| self.labels[i]).collect())
    }
}

impl<T: Scalar> Objective<T> for MlpObjective<T> {
    fn n_params(&self) -> usize {
        self.cfg.layout.n_params()
    }

    fn n_examples(&self) -> usize {
        self.labels.len()
    }

    fn loss_and_grad(&self, params: &[T], batch: &[usize]) -> Result<(T, Vec<T>)> {
        let p = self.params(params)?;
        let (x, y) = self.gather(batch);
        let (loss, grad) = nn::loss_and_grad(&p, Batch::new(x.as_ref(), &y), &self.cfg)?;
        Ok((loss, grad.into_vec()))
    }

    fn hvp_block_into(
        &self,
        params: &[T],
        tangents: MatRef<'_, T>,
        batch: &[usize],
        dst: MatMut<'_, T>,
        ws: &mut Workspace<T>,
    ) -> Result<()> {
        let p = self.params(params)?;
        let (x, y) = self.gather(batch);
        nn::hvp_block_into(&p, tangents, Batch::new(x.as_ref(), &y), &self.cfg, dst, &mut ws.hvp)
    }

    fn full_loss(&self, params: &[T]) -> Result<T> {
        nn::dataset_loss(&self.params(params)?, self.features.as_ref(), &self.labels, &self.cfg)
    }
}

/// `L(θ) = ½ θᵀHθ` with symmetric `H`, treated as a single-example dataset.
pub struct Quadratic<T> {
    h: Mat<T>,
}

impl<T: Scalar> Quadratic<T> {
    pub fn new(h: Mat<T>) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() == 0 {
            return Err(Error::InvalidArgument("quadratic needs a non-empty square matrix".into()));
        }
        Ok(Self { h })
    }

    pub fn hessian(&self) -> MatRef<'_, T> {
        self.h.as_ref()
    }
}

impl<T: Scalar> Objective<T> for Quadratic<T> {
    fn n_params(&self) -> usize {
        self.h.nrows()
    }

    fn n_examples(&self) -> usize {
        1
    }

    fn loss_and_grad(&self, params: &[T], _batch: &[usize]) -> Result<(T, Vec<T>)> {
        let theta = MatRef::from_column_major_slice(params, params.len(), 1);
        let mut g = Mat::<T>::zeros(params.len(), 1);
        mm(g.as_mut(), Accum::Replace, self.h.as_ref(), theta);
        let grad: Vec<T> = g.col(0).iter().copied().collect();
        let loss = params.iter().zip(&grad).fold(T::zero(), |a, (&t, &g)| a + t * g) * T::lit(0.5);
        Ok((loss, grad))
    }

    fn hvp_block_into(
        &self,
        _params: &[T],
        tangents: MatRef<'_, T>,
        _batch: &[usize],
        mut dst: MatMut<'_, T>,
        _ws: &mut Workspace<T>,
    ) -> Result<()> {
        if tangents.nrows() != self.h.nrows() || dst.nrows() != self.h.nrows() || dst.ncols() != tangents.ncols() {
            return Err(Error::InvalidArgument("tangent block shape does not match the quadratic".into()));
        }
        for j in 0..tangents.ncols() {
            mm(dst.as_mut().subcols_mut(j, 1), Accum::Replace, self.h.as_ref(), tangents.subcols(j, 1));
        }
        Ok(())
    }

    fn full_loss(&self, params: &[T]) -> Result<T> {
        Ok(self.loss_and_grad(params, &[0])?.0)
    }
}

/// An objective reparameterized as `θ = θ₀ + P·φ`, optimized over `φ`.
pub struct Restricted<'a, T, O> {
    inner: &'a O,
    origin: Vec<T>,
    basis: &'a Subspace<T>,
}

impl<'a, T: Scalar, O: Objective<T>> Restricted<'a, T, O> {
    pub fn new(inner: &'a O, origin: Vec<T>, basis: &'a Subspace<T>) -> Result<Self> {
        if origin.len() != inner.n_params() || basis.ambient_dim() != inner.n_params() {
            return Err(Error::InvalidArgument(format!(
                "restricted objective: origin {} / basis {} vs {} parameters",
                origin.len(),
                basis.ambient_dim(),
                inner.n_params()
            )));
        }
        Ok(Self { inner, origin, basis })
    }

    /// Full-space parameters `θ₀ + P·φ`.
    pub fn lift(&self, phi: &[T]) -> Vec<T> {
        let phi = MatRef::from_column_major_slice(phi, phi.len(), 1);
        let mut theta = Mat::from_fn(self.origin.len(), 1, |i, _| self.origin[i]);
        mm(theta.as_mut(), Accum::Add, self.basis.basis(), phi);
        theta.col(0).iter().copied().collect()
    }

    fn project(&self, full: MatRef<'_, T>) -> Mat<T> {
        let mut out = Mat::<T>::zeros(self.basis.dim(), full.ncols());
        mm(out.as_mut(), Accum::Replace, self.basis.basis().transpose(), full);
        out
    }
}

impl<T: Scalar, O: Objective<T>> Objective<T> for Restricted<'_, T, O> {
    fn n_params(&self) -> usize {
        self.basis.dim()
    }

    fn n_examples(&self) -> usize {
        self.inner.n_examples()
    }

    fn loss_and_grad(&self, params: &[T], batch: &[usize]) -> Result<(T, Vec<T>)> {
        let (loss, g) = self.inner.loss_and_grad(&self.lift(params), batch)?;
        let g = self.project(MatRef::from_column_major_slice(&g, g.len(), 1));
        Ok((loss, g.col(0).iter().copied().collect()))
    }

    fn hvp_block_into(
        &self,
        params: &[T],
        tangents: MatRef<'_, T>,
        batch: &[usize],
        dst: MatMut<'_, T>,
        ws: &mut Workspace<T>,
    ) -> Result<()> {
        let mut full = Mat::<T>::zeros(self.inner.n_params(), tangents.ncols());
        mm(full.as_mut(), Accum::Replace, self.basis.basis(), tangents);
        let mut hv = Mat::<T>::zeros(full.nrows(), full.ncols());
        self.inner.hvp_block_into(&self.lift(params), full.as_ref(), batch, hv.as_mut(), ws)?;
        mm(dst, Accum::Replace, self.basis.basis().transpose(), hv.as_ref());
        Ok(())
    }

    fn full_loss(&self, params: &[T]) -> Result<T> {
        self.inner.full_loss(&self.lift(params))
    }
}
