//! Spectral analysis of a training Jacobian and the probes built on it.

use faer::{Accum, Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{principal_cosines, random_subspace, Subspace, SvdResult};
use crate::nn::{self, features_as, mm, ModelConfig, ParamVector};
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig, TrajectoryCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Chaotic,
    Bulk,
    Stable,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Chaotic => "chaotic",
            Region::Bulk => "bulk",
            Region::Stable => "stable",
        }
    }
}

/// Split of singular-value indices at `1 ± δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub chaotic: Vec<usize>,
    pub bulk: Vec<usize>,
    pub stable: Vec<usize>,
    pub delta: f64,
}

impl RegionPartition {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.chaotic.len(), self.bulk.len(), self.stable.len())
    }

    pub fn region_of(&self, i: usize) -> Option<Region> {
        if self.bulk.binary_search(&i).is_ok() {
            Some(Region::Bulk)
        } else if self.chaotic.binary_search(&i).is_ok() {
            Some(Region::Chaotic)
        } else if self.stable.binary_search(&i).is_ok() {
            Some(Region::Stable)
        } else {
            None
        }
    }

    pub fn indices(&self, region: Region) -> &[usize] {
        match region {
            Region::Chaotic => &self.chaotic,
            Region::Bulk => &self.bulk,
            Region::Stable => &self.stable,
        }
    }
}

pub fn partition_values<T: Scalar>(s: &[T], delta: f64) -> Result<RegionPartition> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta {delta} outside (0, 1)")));
    }
    let mut p = RegionPartition { chaotic: vec![], bulk: vec![], stable: vec![], delta };
    for (i, &v) in s.iter().enumerate() {
        let v = v.to_f64_lossy();
        if v > 1.0 + delta {
            p.chaotic.push(i);
        } else if v < 1.0 - delta {
            p.stable.push(i);
        } else {
            p.bulk.push(i);
        }
    }
    Ok(p)
}

pub fn partition_spectrum<T: Scalar>(s: &SvdResult<T>, delta: f64) -> Result<RegionPartition> {
    partition_values(&s.s, delta)
}

/// `cos(u_i, v_i)` for every singular pair.
pub fn lr_alignment<T: Scalar>(s: &SvdResult<T>) -> Result<Vec<T>> {
    if s.u.nrows() != s.v.nrows() {
        return Err(Error::InvalidArgument("left/right alignment needs a square matrix".into()));
    }
    Ok((0..s.rank())
        .map(|i| s.u.col(i).iter().zip(s.v.col(i).iter()).fold(T::zero(), |a, (&x, &y)| a + x * y))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

/// Indices sorted by `|σ_i − 1|` ascending, ties by index.
pub fn bulk_order<T: Scalar>(s: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (s[a] - T::one()).abs();
        let db = (s[b] - T::one()).abs();
        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order
}

fn columns<T: Scalar>(s: &SvdResult<T>, side: Side, idx: &[usize], origin: String) -> Result<Subspace<T>> {
    let src = match side {
        Side::Left => &s.u,
        Side::Right => &s.v,
    };
    let m = Mat::from_fn(src.nrows(), idx.len(), |i, j| src[(i, idx[j])]);
    Subspace::new(m, origin)
}

/// Span of the `k` singular vectors with singular values closest to one.
pub fn bulk_at_k<T: Scalar>(s: &SvdResult<T>, k: usize, side: Side) -> Result<Subspace<T>> {
    check_k(k, s.rank())?;
    let order = bulk_order(&s.s);
    columns(s, side, &order[..k], format!("bulk@{k}"))
}

/// `k` largest (chaotic), `k` closest to one (bulk) or `k` smallest (stable).
pub fn region_subspace<T: Scalar>(s: &SvdResult<T>, region: Region, k: usize, side: Side) -> Result<Subspace<T>> {
    check_k(k, s.rank())?;
    let r = s.rank();
    match region {
        Region::Bulk => bulk_at_k(s, k, side),
        Region::Chaotic => columns(s, side, &(0..k).collect::<Vec<_>>(), format!("chaotic@{k}")),
        Region::Stable => columns(s, side, &(r - k..r).collect::<Vec<_>>(), format!("stable@{k}")),
    }
}

fn check_k(k: usize, r: usize) -> Result<()> {
    if k == 0 || k > r {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={r}")));
    }
    Ok(())
}

/// `points` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && points >= 2);
    let (a, b) = (lo.log10(), hi.log10());
    (0..points).map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSearchRecord {
    pub index: usize,
    pub sigma: f64,
    pub lambdas: Vec<f64>,
    /// `⟨δ, u_i⟩` per λ; `None` where the perturbed run diverged.
    pub response: Vec<Option<f64>>,
    /// `‖δ − ⟨δ, u_i⟩u_i‖₂` per λ.
    pub residual: Vec<Option<f64>>,
}

/// Retrains from `θ₀ + λ·v_i` for every λ and projects the change in final
/// parameters onto `u_i` and its orthogonal complement.
pub fn line_search<T: Scalar>(
    traj: &TrajectoryCache<T>,
    s: &SvdResult<T>,
    i: usize,
    grid: &[f64],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<LineSearchRecord> {
    if i >= s.rank() {
        return Err(Error::InvalidArgument(format!("direction {i} outside spectrum of length {}", s.rank())));
    }
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("λ grid must be positive and strictly increasing".into()));
    }
    let theta0 = traj.initial_params();
    let base = &traj.final_params;
    let (u, v) = (s.u.col(i), s.v.col(i));
    let layout = cfg.model.layout;
    let runs: Vec<Result<Option<(f64, f64)>>> = grid
        .par_iter()
        .map(|&lambda| {
            let lam = T::lit(lambda);
            let start: Vec<T> = theta0.iter().zip(v.iter()).map(|(&a, &b)| a + lam * b).collect();
            let p = ParamVector::new(start, layout)?;
            match train(&p, data, cfg) {
                Ok(run) => {
                    let delta: Vec<f64> =
                        run.final_params.iter().zip(base).map(|(&a, &b)| (a - b).to_f64_lossy()).collect();
                    let resp: f64 = delta.iter().zip(u.iter()).map(|(d, uu)| d * uu.to_f64_lossy()).sum();
                    let resid = delta
                        .iter()
                        .zip(u.iter())
                        .map(|(d, uu)| (d - resp * uu.to_f64_lossy()).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    Ok(Some((resp, resid)))
                }
                Err(Error::TrainingDiverged { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut rec = LineSearchRecord {
        index: i,
        sigma: s.s[i].to_f64_lossy(),
        lambdas: grid.to_vec(),
        response: Vec::with_capacity(grid.len()),
        residual: Vec::with_capacity(grid.len()),
    };
    for r in runs {
        let r = r?;
        rec.response.push(r.map(|x| x.0));
        rec.residual.push(r.map(|x| x.1));
    }
    Ok(rec)
}

fn log_softmax_rows<T: Scalar>(z: MatRef<'_, T>) -> Mat<f64> {
    let o = z.ncols();
    Mat::from_fn(z.nrows(), o, |i, c| {
        let max = (0..o).map(|k| z[(i, k)].to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..o).map(|k| (z[(i, k)].to_f64_lossy() - max).exp()).sum::<f64>().ln();
        z[(i, c)].to_f64_lossy() - lse
    })
}

/// Mean over rows of `KL(p ‖ q)` given row-wise log-probabilities.
pub fn mean_kl(log_p: MatRef<'_, f64>, log_q: MatRef<'_, f64>) -> f64 {
    let n = log_p.nrows();
    let total: f64 = (0..n)
        .map(|i| {
            (0..log_p.ncols())
                .map(|c| {
                    let lp = log_p[(i, c)];
                    lp.exp() * (lp - log_q[(i, c)])
                })
                .sum::<f64>()
                // Rounding can push an exact-zero divergence slightly negative.
                .max(0.0)
        })
        .sum();
    total / n as f64
}

/// Entry `(i, s)`: mean over `eval_sets[s]` of `KL(g(x; θ) ‖ g(x; θ + d_i))`.
pub fn behavioral_effect<T: Scalar>(
    theta: &ParamVector<T>,
    directions: MatRef<'_, T>,
    eval_sets: &[Dataset],
    cfg: &ModelConfig,
) -> Result<Mat<f64>> {
    if directions.nrows() != theta.len() {
        return Err(Error::InvalidArgument(format!(
            "directions have {} rows, expected {}",
            directions.nrows(),
            theta.len()
        )));
    }
    let feats: Vec<Mat<T>> = eval_sets.iter().map(features_as).collect();
    let base: Vec<Mat<f64>> = feats
        .iter()
        .map(|x| Ok(log_softmax_rows(nn::logits(theta, x.as_ref(), cfg)?.as_ref())))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (0..directions.ncols())
        .into_par_iter()
        .map(|i| {
            let shifted: Vec<T> = theta.as_slice().iter().zip(directions.col(i).iter()).map(|(&a, &b)| a + b).collect();
            let p = ParamVector::new(shifted, theta.layout())?;
            feats
                .iter()
                .zip(&base)
                .map(|(x, lp)| {
                    let lq = log_softmax_rows(nn::logits(&p, x.as_ref(), cfg)?.as_ref());
                    Ok(mean_kl(lp.as_ref(), lq.as_ref()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(Mat::from_fn(rows.len(), eval_sets.len(), |i, s| rows[i][s]))
}

/// `|⟨θ_T − θ₀, v_i⟩|` for every right singular vector.
pub fn parameter_delta_per_direction<T: Scalar>(traj: &TrajectoryCache<T>, s: &SvdResult<T>) -> Result<Vec<T>> {
    let theta0 = traj.initial_params();
    if s.v.nrows() != theta0.len() {
        return Err(Error::InvalidArgument("SVD and trajectory disagree on the parameter count".into()));
    }
    let delta: Vec<T> = traj.final_params.iter().zip(theta0).map(|(&a, &b)| a - b).collect();
    let d = MatRef::from_column_major_slice(&delta, delta.len(), 1);
    let mut proj = Mat::<T>::zeros(s.rank(), 1);
    mm(proj.as_mut(), Accum::Replace, s.v.transpose(), d);
    Ok(proj.col(0).iter().map(|v| v.abs()).collect())
}

/// Parameter-function Jacobian: log-probability gradients of every example,
/// stacked example-major (`(n·O) × N`, row `e·O + c`).
pub fn pfj<T: Scalar>(p: &ParamVector<T>, data: &Dataset, cfg: &ModelConfig) -> Result<Mat<T>> {
    let o = cfg.layout.output;
    let x = features_as::<T>(data);
    let blocks: Vec<Mat<T>> = (0..data.len())
        .into_par_iter()
        .map(|e| {
            let row: Vec<T> = x.row(e).iter().copied().collect();
            nn::logprob_grads(p, &row, cfg)
        })
        .collect::<Result<_>>()?;
    let mut out = Mat::<T>::zeros(data.len() * o, p.len());
    for (e, b) in blocks.iter().enumerate() {
        out.as_mut().subrows_mut(e * o, o).copy_from(b.as_ref());
    }
    Ok(out)
}

/// Number of singular values more than `orders` decades below the median.
pub fn trailing_cluster_size<T: Scalar>(s: &[T], orders: f64) -> usize {
    if s.is_empty() {
        return 0;
    }
    let mut sorted: Vec<f64> = s.iter().map(|v| v.to_f64_lossy()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = sorted.len();
    let median = if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
    let cut = median * 10f64.powf(-orders);
    sorted.iter().filter(|&&v| v < cut).count()
}

/// Mean principal cosine at one cutoff, with a random-subspace reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub k: usize,
    pub mean_cosine: f64,
    pub random_baseline: f64,
}

impl OverlapRow {
    pub fn ratio(&self) -> f64 {
        self.mean_cosine / self.random_baseline
    }
}

fn overlap_rows<T: Scalar>(
    ks: &[usize],
    seed: u64,
    mut pair: impl FnMut(usize) -> Result<(Subspace<T>, Subspace<T>)>,
) -> Result<Vec<OverlapRow>> {
    ks.iter()
        .map(|&k| {
            let (a, b) = pair(k)?;
            let random = random_subspace::<T>(b.ambient_dim(), k, seed.wrapping_add(k as u64))?;
            Ok(OverlapRow {
                k,
                mean_cosine: principal_cosines(&a, &b)?.mean.to_f64_lossy(),
                random_baseline: principal_cosines(&random, &b)?.mean.to_f64_lossy(),
            })
        })
        .collect()
}

/// Trailing-`k` right singular vectors of the PFJ against the training-Jacobian bulk at `k`.
pub fn pfj_nullspace_overlap<T: Scalar>(
    pfj_svd: &SvdResult<T>,
    tj_svd: &SvdResult<T>,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<OverlapRow>> {
    if pfj_svd.v.nrows() != tj_svd.v.nrows() {
        return Err(Error::InvalidArgument("PFJ and training Jacobian live in different parameter spaces".into()));
    }
    overlap_rows(ks, seed, |k| {
        let r = pfj_svd.rank();
        check_k(k, r)?;
        let null = region_subspace(pfj_svd, Region::Stable, k, Side::Right)?;
        Ok((null, bulk_at_k(tj_svd, k, Side::Right)?))
    })
}

/// Bulk-at-`k` similarity between two training Jacobians.
pub fn bulk_similarity<T: Scalar>(a: &SvdResult<T>, b: &SvdResult<T>, ks: &[usize], side: Side, seed: u64) -> Result<Vec<OverlapRow>> {
    overlap_rows(ks, seed, |k| Ok((bulk_at_k(a, k, side)?, bulk_at_k(b, k, side)?)))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = v.len();
    if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) }
}
