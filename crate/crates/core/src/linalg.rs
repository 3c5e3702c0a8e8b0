//! Dense spectral and subspace primitives.

use serde::{Deserialize, Serialize};
use faer::{Accum, Mat, MatRef};
use faer::reborrow::{Reborrow, ReborrowMut};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::mm;
use crate::scalar::Scalar;

/// Orthonormal basis (N×k) of a subspace of R^N.
#[derive(Clone, Debug, PartialEq)]
pub struct Subspace<T> {
    basis: Mat<T>,
    origin: String,
}

impl<T: Scalar> Subspace<T> {
    /// Wraps `basis` after checking `‖BᵀB − I‖_max` against [`Scalar::orthonormal_tol`].
    pub fn new(basis: Mat<T>, origin: impl Into<String>) -> Result<Self> {
        if basis.ncols() == 0 || basis.nrows() == 0 {
            return Err(Error::InvalidArgument("subspace must have dimension at least 1".into()));
        }
        if basis.ncols() > basis.nrows() {
            return Err(Error::InvalidArgument(format!(
                "{} basis vectors in R^{}",
                basis.ncols(),
                basis.nrows()
            )));
        }
        let dev = orthonormality_error(basis.as_ref());
        if !(dev < T::orthonormal_tol()) {
            return Err(Error::NotOrthonormal { deviation: dev.to_f64_lossy() });
        }
        Ok(Self { basis, origin: origin.into() })
    }

    /// Skips the orthonormality check; for bases that are orthonormal by construction.
    pub(crate) fn trusted(basis: Mat<T>, origin: impl Into<String>) -> Self {
        Self { basis, origin: origin.into() }
    }

    /// Standard basis of R^n.
    pub fn full(n: usize) -> Self {
        Self::trusted(Mat::identity(n, n), "identity")
    }

    pub fn basis(&self) -> MatRef<'_, T> {
        self.basis.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }
}

/// `max |BᵀB − I|`.
pub fn orthonormality_error<T: Scalar>(b: MatRef<'_, T>) -> T {
    let k = b.ncols();
    let mut g = Mat::<T>::zeros(k, k);
    mm(g.as_mut(), Accum::Replace, b.transpose(), b);
    let mut worst = T::zero();
    for j in 0..k {
        for i in 0..k {
            let target = if i == j { T::one() } else { T::zero() };
            let d = (g[(i, j)] - target).abs();
            // NaN compares false, so keep it explicitly.
            if d > worst || d.is_nan() {
                worst = d;
            }
        }
    }
    worst
}

/// Thin SVD `A = U·diag(S)·Vᵀ` with `S` non-increasing.
///
/// Signs are fixed so that the largest-magnitude entry of every right singular
/// vector is positive (first such entry on ties), with `U` flipped to match.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult<T> {
    pub u: Mat<T>,
    pub s: Vec<T>,
    pub v: Mat<T>,
}

/// Residuals of an [`SvdResult`] against the matrix it decomposes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdCheck {
    pub u_orthonormality: f64,
    pub v_orthonormality: f64,
    pub relative_reconstruction: f64,
    pub ordered: bool,
}

impl SvdCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.ordered
            && self.u_orthonormality < tol
            && self.v_orthonormality < tol
            && self.relative_reconstruction < tol
    }
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn check(&self, a: MatRef<'_, T>) -> SvdCheck {
        let mut us = self.u.clone();
        for (j, &s) in self.s.iter().enumerate() {
            for v in us.col_mut(j).iter_mut() {
                *v *= s;
            }
        }
        let mut recon = a.to_owned();
        faer::linalg::matmul::matmul(
            recon.as_mut(),
            Accum::Add,
            us.as_ref(),
            self.v.transpose(),
            -T::one(),
            faer::Par::Seq,
        );
        let fro = |m: MatRef<'_, T>| -> f64 {
            m.col_iter().map(|c| c.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>()).sum::<f64>().sqrt()
        };
        let norm = fro(a);
        SvdCheck {
            u_orthonormality: orthonormality_error(self.u.as_ref()).to_f64_lossy(),
            v_orthonormality: orthonormality_error(self.v.as_ref()).to_f64_lossy(),
            relative_reconstruction: if norm > 0.0 { fro(recon.as_ref()) / norm } else { fro(recon.as_ref()) },
            ordered: self.s.windows(2).all(|w| w[0] >= w[1]) && self.s.iter().all(|&s| s >= T::zero()),
        }
    }
}

/// Thin SVD of a finite matrix.
pub fn svd<T: Scalar>(a: MatRef<'_, T>) -> Result<SvdResult<T>> {
    check_finite(a)?;
    let dec = a.thin_svd().map_err(|_| Error::SvdFailed)?;
    let r = a.nrows().min(a.ncols());
    let diag = dec.S().column_vector();
    let mut order: Vec<usize> = (0..r).collect();
    // Stable, so an already sorted spectrum keeps faer's order.
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap_or(std::cmp::Ordering::Equal));
    let (du, dv) = (dec.U(), dec.V());
    let mut u = Mat::<T>::zeros(a.nrows(), r);
    let mut v = Mat::<T>::zeros(a.ncols(), r);
    let mut s = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        let vc = dv.col(src);
        let mut pivot = 0;
        for i in 1..vc.nrows() {
            if vc[i].abs() > vc[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if vc[pivot] < T::zero() { -T::one() } else { T::one() };
        for i in 0..a.nrows() {
            u[(i, dst)] = sign * du[(i, src)];
        }
        for i in 0..a.ncols() {
            v[(i, dst)] = sign * vc[i];
        }
        let sv = diag[src];
        s.push(if sv < T::zero() { T::zero() } else { sv });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::SvdFailed);
    }
    Ok(SvdResult { u, s, v })
}

/// Singular values only, non-increasing.
pub fn singular_values<T: Scalar>(a: MatRef<'_, T>) -> Result<Vec<T>> {
    check_finite(a)?;
    let mut s = a.singular_values().map_err(|_| Error::SvdFailed)?;
    s.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    Ok(s)
}

fn check_finite<T: Scalar>(a: MatRef<'_, T>) -> Result<()> {
    if a.col_iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { layer: "svd input" });
    }
    Ok(())
}

/// Cosines of the principal angles between two subspaces.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalCosines<T> {
    /// Non-increasing, clamped to `[0, 1]`, length `min(k_a, k_b)`.
    pub cosines: Vec<T>,
    pub mean: T,
}

pub fn principal_cosines<T: Scalar>(a: &Subspace<T>, b: &Subspace<T>) -> Result<PrincipalCosines<T>> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::InvalidArgument(format!(
            "subspaces live in R^{} and R^{}",
            a.ambient_dim(),
            b.ambient_dim()
        )));
    }
    for s in [a, b] {
        let dev = orthonormality_error(s.basis());
        if !(dev < T::orthonormal_tol()) {
            return Err(Error::NotOrthonormal { deviation: dev.to_f64_lossy() });
        }
    }
    let mut cross = Mat::<T>::zeros(a.dim(), b.dim());
    mm(cross.as_mut(), Accum::Replace, a.basis().transpose(), b.basis());
    let cosines: Vec<T> = singular_values(cross.as_ref())?
        .into_iter()
        .map(|c| c.max(T::zero()).min(T::one()))
        .collect();
    let mean = cosines.iter().fold(T::zero(), |acc, &c| acc + c) / T::lit(cosines.len() as f64);
    Ok(PrincipalCosines { cosines, mean })
}

/// Gram-Schmidt with one reorthogonalization pass.
///
/// A column whose residual after projection falls below `√ε` times its
/// original norm is reported as rank deficient.
pub fn orthonormalize<T: Scalar>(m: MatRef<'_, T>, origin: impl Into<String>) -> Result<Subspace<T>> {
    let (n, k) = (m.nrows(), m.ncols());
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("cannot orthonormalize {k} columns in R^{n}")));
    }
    check_finite(m)?;
    let tol = T::epsilon().sqrt();
    let mut q = m.to_owned();
    let mut coeffs = Mat::<T>::zeros(k, 1);
    for j in 0..k {
        let norm0 = norm(q.col(j).iter().copied());
        if norm0 == T::zero() {
            return Err(Error::RankDeficient { column: j });
        }
        if j > 0 {
            for _ in 0..2 {
                let (done, mut rest) = q.as_mut().split_at_col_mut(j);
                let done = done.rb();
                let mut c = coeffs.as_mut().subrows_mut(0, j);
                mm(c.rb_mut(), Accum::Replace, done.transpose(), rest.rb().subcols(0, 1));
                faer::linalg::matmul::matmul(
                    rest.rb_mut().subcols_mut(0, 1),
                    Accum::Add,
                    done,
                    c.rb(),
                    -T::one(),
                    faer::Par::Seq,
                );
            }
        }
        let nr = norm(q.col(j).iter().copied());
        if !(nr > tol * norm0) {
            return Err(Error::RankDeficient { column: j });
        }
        for v in q.col_mut(j).iter_mut() {
            *v /= nr;
        }
    }
    Ok(Subspace::trusted(q, origin))
}

fn norm<T: Scalar>(it: impl Iterator<Item = T>) -> T {
    it.fold(T::zero(), |a, v| a + v * v).sqrt()
}

/// Orthonormalized i.i.d. Gaussian N×k matrix.
pub fn random_subspace<T: Scalar>(n: usize, k: usize, seed: u64) -> Result<Subspace<T>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("random subspace of dimension {k} in R^{n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..n * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let g = Mat::from_fn(n, k, |i, j| T::lit(draws[j * n + i]));
    orthonormalize(g.as_ref(), format!("random(seed={seed})"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian(n: usize, k: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let r = svd(Mat::<f64>::identity(6, 6).as_ref()).unwrap();
        assert!(r.s.iter().all(|&s| (s - 1.0).abs() < 1e-14));
    }

    #[test]
    fn diagonal_spectrum_and_axes() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { [1.0f64, 3.0, 2.0][i] } else { 0.0 });
        let r = svd(a.as_ref()).unwrap();
        assert_eq!(r.s.len(), 3);
        for (got, want) in r.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        // Largest entry positive, so axis vectors come out exactly +e_i.
        for (col, axis) in [1usize, 2, 0].into_iter().enumerate() {
            assert!((r.v[(axis, col)] - 1.0).abs() < 1e-14);
            assert!((r.u[(axis, col)] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn random_square_reconstruction() {
        let a = gaussian(50, 50, 1);
        let r = svd(a.as_ref()).unwrap();
        let c = r.check(a.as_ref());
        assert!(c.relative_reconstruction < 1e-10, "{c:?}");
        assert!(c.passes(1e-8));
    }

    #[test]
    fn rectangular_shapes() {
        for (m, n) in [(30, 12), (12, 30)] {
            let a = gaussian(m, n, 2);
            let r = svd(a.as_ref()).unwrap();
            assert_eq!(r.s.len(), 12);
            assert_eq!((r.u.nrows(), r.u.ncols(), r.v.nrows(), r.v.ncols()), (m, 12, n, 12));
            assert!(r.check(a.as_ref()).passes(1e-8));
        }
        let sv = singular_values(gaussian(30, 12, 2).as_ref()).unwrap();
        let r = svd(gaussian(30, 12, 2).as_ref()).unwrap();
        for (a, b) in sv.iter().zip(&r.s) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut a = Mat::<f64>::identity(3, 3);
        a[(1, 2)] = f64::NAN;
        assert!(svd(a.as_ref()).is_err());
    }

    #[test]
    fn same_and_orthogonal_subspaces() {
        let n = 8;
        let e = Mat::<f64>::identity(n, n);
        let a = Subspace::new(e.as_ref().subcols(0, 3).to_owned(), "a").unwrap();
        let b = Subspace::new(e.as_ref().subcols(3, 3).to_owned(), "b").unwrap();
        let same = principal_cosines(&a, &a).unwrap();
        assert_eq!(same.mean, 1.0);
        assert!(same.cosines.iter().all(|&c| c == 1.0));
        let orth = principal_cosines(&a, &b).unwrap();
        assert!(orth.cosines.iter().all(|&c| c.abs() < 1e-15));
    }

    #[test]
    fn principal_cosines_reject_bad_basis() {
        let a = Subspace::full(4);
        let bad = Subspace::trusted(Mat::from_fn(4, 2, |i, j| if i == j { 2.0 } else { 0.0 }), "bad");
        assert!(matches!(principal_cosines(&a, &bad), Err(Error::NotOrthonormal { .. })));
        assert!(Subspace::new(Mat::from_fn(4, 2, |_, _| 1.0), "x").is_err());
    }

    #[test]
    fn principal_cosines_are_rotation_invariant_and_symmetric() {
        let a = random_subspace::<f64>(60, 7, 1).unwrap();
        let b = random_subspace::<f64>(60, 5, 2).unwrap();
        let rot = random_subspace::<f64>(7, 7, 3).unwrap();
        let mut rotated = Mat::<f64>::zeros(60, 7);
        mm(rotated.as_mut(), Accum::Replace, a.basis(), rot.basis());
        let a2 = Subspace::new(rotated, "rotated").unwrap();
        let c1 = principal_cosines(&a, &b).unwrap();
        let c2 = principal_cosines(&a2, &b).unwrap();
        let c3 = principal_cosines(&b, &a).unwrap();
        assert_eq!(c1.cosines.len(), 5);
        for ((x, y), z) in c1.cosines.iter().zip(&c2.cosines).zip(&c3.cosines) {
            assert!((x - y).abs() < 1e-10 && (x - z).abs() < 1e-10);
        }
    }

    #[test]
    fn random_subspace_baseline_band() {
        // numpy Monte-Carlo over 20 pairs: 0.2713, std 0.0016.
        let means: Vec<f64> = (0..4)
            .map(|s| {
                let a = random_subspace::<f64>(1000, 100, 2 * s).unwrap();
                let b = random_subspace::<f64>(1000, 100, 2 * s + 1).unwrap();
                principal_cosines(&a, &b).unwrap().mean
            })
            .collect();
        for m in means {
            assert!((m - 0.2713).abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn full_random_subspace_matches_any_full_subspace() {
        let a = random_subspace::<f64>(20, 20, 4).unwrap();
        let c = principal_cosines(&a, &Subspace::full(20)).unwrap();
        assert!((c.mean - 1.0).abs() < 1e-12);
        assert_eq!(random_subspace::<f64>(20, 4, 9).unwrap(), random_subspace::<f64>(20, 4, 9).unwrap());
    }

    #[test]
    fn orthonormalize_preserves_span() {
        let m = gaussian(1000, 50, 5);
        let q = orthonormalize(m.as_ref(), "m").unwrap();
        assert!(orthonormality_error(q.basis()) < 1e-12);
        // Projector onto span(M) via normal equations on the QR factor vs QQᵀ.
        let qr = m.as_ref().qr();
        let qm = qr.compute_thin_Q();
        let mut diff = Mat::<f64>::zeros(1000, 1000);
        mm(diff.as_mut(), Accum::Replace, qm.as_ref(), qm.transpose());
        faer::linalg::matmul::matmul(diff.as_mut(), Accum::Add, q.basis(), q.basis().transpose(), -1.0, faer::Par::Seq);
        let fro: f64 = diff.col_iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        assert!(fro < 1e-8, "{fro}");
    }

    #[test]
    fn orthonormalize_keeps_orthonormal_input() {
        let e = Mat::<f64>::identity(5, 5).as_ref().subcols(1, 3).to_owned();
        let q = orthonormalize(e.as_ref(), "e").unwrap();
        assert!(orthonormality_error(q.basis()) < 1e-12);
        assert_eq!(q.basis(), e.as_ref());
    }

    #[test]
    fn orthonormalize_names_dependent_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Mat::from_fn(10, 4, |_, _| rng.random::<f64>());
        for i in 0..10 {
            m[(i, 2)] = m[(i, 0)];
        }
        assert!(matches!(orthonormalize(m.as_ref(), "m"), Err(Error::RankDeficient { column: 2 })));
    }
}
