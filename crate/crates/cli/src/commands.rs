use std::fs;
use std::path::{Path, PathBuf};

use faer::Mat;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tjac_core::analysis::{
    behavioral_effect, bulk_at_k, bulk_similarity, line_search, log_grid, lr_alignment, median,
    parameter_delta_per_direction, partition_spectrum, pfj, pfj_nullspace_overlap, region_subspace,
    trailing_cluster_size, LineSearchRecord, OverlapRow, Region, RegionPartition, Side,
};
use tjac_core::linalg::{random_subspace, svd, SvdCheck};
use tjac_core::train::train_restricted;
use tjac_core::{Dataset, Error as CoreError, Params, Svd};

use crate::config::{PfjPoint, RestrictRegion};
use crate::error::{CliError, StageExt};
use crate::pipeline::{loss_rows, verify_svd, write_csv, Context, RunSpec, Variant};

/// Result of one subcommand before it is wrapped in a manifest.
pub struct Report<S> {
    pub summary: S,
    pub artifacts: Vec<PathBuf>,
    pub runs: Vec<RunSpec>,
}

fn region_name(p: &RegionPartition, i: usize) -> &'static str {
    p.region_of(i).map(Region::name).unwrap_or("none")
}

/// Hard link, or copy where linking is not possible.
fn publish(src: &Path, dst: &Path) -> std::io::Result<()> {
    let _ = fs::remove_file(dst);
    fs::hard_link(src, dst).or_else(|_| fs::copy(src, dst).map(|_| ()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub n_params: usize,
    pub steps: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_test_loss: Option<f64>,
}

pub fn train(ctx: &Context) -> Result<Report<TrainSummary>, CliError> {
    let run = ctx.reference();
    let t = run.trained()?;
    let dir = ctx.command_dir("train")?;
    let curve = dir.join("loss_curve.csv");
    write_csv(&curve, loss_rows(&t.traj)).stage("train")?;
    let params = dir.join("final_params.tjm");
    publish(&run.dir().join("final_params.tjm"), &params).stage("train")?;
    let last = t.traj.loss_curve.last().expect("loss curve has the initial entry");
    Ok(Report {
        summary: TrainSummary {
            n_params: t.p0.len(),
            steps: t.traj.n_steps(),
            initial_train_loss: t.traj.loss_curve[0].train_loss,
            final_train_loss: last.train_loss,
            final_test_loss: last.test_loss,
        },
        artifacts: vec![curve, params],
        runs: vec![run.spec.clone()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianSummary {
    pub n_params: usize,
    pub block_size: usize,
}

pub fn jacobian(ctx: &Context) -> Result<Report<JacobianSummary>, CliError> {
    let run = ctx.reference();
    let j = run.jacobian()?;
    let dst = ctx.command_dir("jacobian")?.join("jacobian.tjm");
    publish(&run.dir().join("jacobian.tjm"), &dst).stage("jacobian")?;
    Ok(Report {
        summary: JacobianSummary { n_params: j.nrows(), block_size: ctx.config.jacobian.block_size },
        artifacts: vec![dst],
        runs: vec![run.spec.clone()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdSummary {
    pub rank: usize,
    pub max_sigma: f64,
    pub min_sigma: f64,
    pub check: Option<SvdCheck>,
}

#[derive(Serialize)]
struct SigmaRow {
    index: usize,
    sigma: f64,
}

pub fn svd_command(ctx: &Context) -> Result<Report<SvdSummary>, CliError> {
    let run = ctx.reference();
    let s = run.svd()?;
    let check = if ctx.verify { Some(s.check(run.jacobian()?.as_ref())) } else { None };
    let dir = ctx.command_dir("svd")?;
    let path = dir.join("singular_values.csv");
    write_csv(&path, s.s.iter().enumerate().map(|(index, &sigma)| SigmaRow { index, sigma })).stage("svd")?;
    let mut artifacts = vec![path];
    for p in tjac_core::io::svd_paths(run.dir(), "svd") {
        let dst = dir.join(p.file_name().expect("file name"));
        publish(&p, &dst).stage("svd")?;
        artifacts.push(dst);
    }
    Ok(Report {
        summary: SvdSummary { rank: s.rank(), max_sigma: s.s[0], min_sigma: s.s[s.rank() - 1], check },
        artifacts,
        runs: vec![run.spec.clone()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub n_params: usize,
    pub delta: f64,
    pub max_sigma: f64,
    pub min_sigma: f64,
    pub chaotic: usize,
    pub bulk: usize,
    pub stable: usize,
    /// Median `cos(u_i, v_i)` over bulk indices.
    pub median_cos_bulk: f64,
    /// Median `cos(u_i, v_i)` over the leading chaotic indices.
    pub median_cos_top: f64,
    pub top: usize,
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    sigma: f64,
    region: &'static str,
    lr_cosine: f64,
}

pub fn spectrum(ctx: &Context) -> Result<Report<SpectrumSummary>, CliError> {
    let run = ctx.reference();
    let s = run.svd()?;
    let delta = ctx.config.spectrum.delta;
    let part = partition_spectrum(&s, delta).stage("spectrum")?;
    let cos = lr_alignment(&s).stage("spectrum")?;
    let path = ctx.command_dir("spectrum")?.join("spectrum.csv");
    let rows = (0..s.rank()).map(|i| SpectrumRow { index: i, sigma: s.s[i], region: region_name(&part, i), lr_cosine: cos[i] });
    write_csv(&path, rows).stage("spectrum")?;
    let pick = |idx: &[usize]| median(&idx.iter().map(|&i| cos[i]).collect::<Vec<_>>());
    let top = ctx.config.spectrum.top.min(part.chaotic.len());
    let (chaotic, bulk, stable) = part.counts();
    Ok(Report {
        summary: SpectrumSummary {
            n_params: s.rank(),
            delta,
            max_sigma: s.s[0],
            min_sigma: s.s[s.rank() - 1],
            chaotic,
            bulk,
            stable,
            median_cos_bulk: pick(&part.bulk),
            median_cos_top: pick(&part.chaotic[..top]),
            top,
        },
        artifacts: vec![path],
        runs: vec![run.spec.clone()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSearchSummary {
    pub bulk_index: usize,
    pub bulk_sigma: f64,
    pub top_sigma: f64,
    pub linear_max: f64,
    /// Worst `|response − λσ|/(λσ)` along the bulk direction for λ ≤ `linear_max`.
    pub bulk_max_relative_error: f64,
    /// Worst residual/response along the bulk direction for λ ≤ `linear_max`.
    pub bulk_max_residual_ratio: f64,
    /// Smallest λ at which the residual exceeds the response along the top direction.
    pub top_overtake_lambda: Option<f64>,
    pub diverged_runs: usize,
}

#[derive(Serialize)]
struct LineSearchRow {
    direction: &'static str,
    index: usize,
    sigma: f64,
    lambda: f64,
    response: Option<f64>,
    residual: Option<f64>,
    predicted: f64,
}

pub fn linesearch(ctx: &Context) -> Result<Report<LineSearchSummary>, CliError> {
    let cfg = &ctx.config.linesearch;
    let run = ctx.reference();
    let s = run.svd()?;
    let part = partition_spectrum(&s, ctx.config.spectrum.delta).stage("linesearch")?;
    if part.bulk.is_empty() {
        return Err(CliError::numeric("linesearch", "the spectrum has no bulk directions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.direction_seed);
    let bulk_index = part.bulk[sample(&mut rng, part.bulk.len(), 1).index(0)];
    let grid = log_grid(cfg.lambda_min, cfg.lambda_max, cfg.points);
    let t = run.trained()?;
    let tc = ctx.config.train_config();
    let records: Vec<(&'static str, LineSearchRecord)> = [("bulk", bulk_index), ("top", 0)]
        .into_iter()
        .map(|(name, i)| Ok((name, line_search(&t.traj, &s, i, &grid, &t.train_set, &tc).stage("linesearch")?)))
        .collect::<Result<_, CliError>>()?;

    let mut rows = Vec::new();
    for (name, rec) in &records {
        for (j, &lambda) in rec.lambdas.iter().enumerate() {
            rows.push(LineSearchRow {
                direction: name,
                index: rec.index,
                sigma: rec.sigma,
                lambda,
                response: rec.response[j],
                residual: rec.residual[j],
                predicted: lambda * rec.sigma,
            });
        }
    }
    let path = ctx.command_dir("linesearch")?.join("linesearch.csv");
    write_csv(&path, rows).stage("linesearch")?;

    let bulk = &records[0].1;
    let top = &records[1].1;
    let (mut rel, mut ratio) = (0.0f64, 0.0f64);
    for (j, &lambda) in bulk.lambdas.iter().enumerate().filter(|(_, &l)| l <= cfg.linear_max * (1.0 + 1e-12)) {
        match (bulk.response[j], bulk.residual[j]) {
            (Some(r), Some(res)) => {
                let pred = lambda * bulk.sigma;
                rel = rel.max((r - pred).abs() / pred);
                ratio = ratio.max(res / r.abs());
            }
            _ => {
                rel = f64::INFINITY;
                ratio = f64::INFINITY;
            }
        }
    }
    let top_overtake_lambda = top
        .lambdas
        .iter()
        .enumerate()
        .find(|&(j, _)| matches!((top.response[j], top.residual[j]), (Some(r), Some(res)) if res > r.abs()))
        .map(|(_, &l)| l);
    let diverged_runs = records.iter().map(|(_, r)| r.response.iter().filter(|x| x.is_none()).count()).sum();
    Ok(Report {
        summary: LineSearchSummary {
            bulk_index,
            bulk_sigma: bulk.sigma,
            top_sigma: top.sigma,
            linear_max: cfg.linear_max,
            bulk_max_relative_error: rel,
            bulk_max_residual_ratio: ratio,
            top_overtake_lambda,
            diverged_runs,
        },
        artifacts: vec![path],
        runs: vec![run.spec.clone()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMedians {
    pub set: String,
    pub median_bulk: f64,
    pub median_chaotic: f64,
}

impl SetMedians {
    /// Chaotic median over bulk median.
    pub fn ratio(&self) -> f64 {
        self.median_chaotic / self.median_bulk
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSummary {
    pub side: Side,
    pub perturbation_norm: f64,
    pub kl_symmetrized: bool,
    pub sampled_bulk: Vec<usize>,
    pub sampled_chaotic: Vec<usize>,
    pub sets: Vec<SetMedians>,
    pub param_delta_median_bulk: f64,
    pub param_delta_median_chaotic: f64,
}

impl BehaviorSummary {
    pub fn set(&self, name: &str) -> Option<&SetMedians> {
        self.sets.iter().find(|s| s.set == name)
    }
}

#[derive(Serialize)]
struct BehaviorRow {
    index: usize,
    sigma: f64,
    region: &'static str,
    kl_test: f64,
    kl_noise: f64,
    kl_inverted: f64,
    param_delta: f64,
}

fn sample_indices(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = sample(rng, pool.len(), n.min(pool.len())).into_iter().map(|j| pool[j]).collect();
    picked.sort_unstable();
    picked
}

pub fn behavior(ctx: &Context) -> Result<Report<BehaviorSummary>, CliError> {
    let cfg = &ctx.config.behavior;
    let run = ctx.reference();
    let s = run.svd()?;
    let part = partition_spectrum(&s, ctx.config.spectrum.delta).stage("behavior")?;
    let t = run.trained()?;
    let model = ctx.config.model_config();
    let theta = Params::new(t.traj.final_params.clone(), model.layout).stage("behavior")?;
    let dirs = match cfg.side {
        Side::Right => &s.v,
        Side::Left => &s.u,
    };
    let names = ["test", "noise", "inverted"];
    let sets: Vec<Dataset> = vec![ctx.test_set.clone(), ctx.noise_eval(), ctx.inverted_eval()];
    let kl = behavioral_effect(&theta, dirs.as_ref(), &sets, &model).stage("behavior")?;
    let delta = parameter_delta_per_direction(&t.traj, &s).stage("behavior")?;

    let path = ctx.command_dir("behavior")?.join("behavior.csv");
    let rows = (0..s.rank()).map(|i| BehaviorRow {
        index: i,
        sigma: s.s[i],
        region: region_name(&part, i),
        kl_test: kl[(i, 0)],
        kl_noise: kl[(i, 1)],
        kl_inverted: kl[(i, 2)],
        param_delta: delta[i],
    });
    write_csv(&path, rows).stage("behavior")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed);
    let sampled_bulk = sample_indices(&part.bulk, cfg.samples, &mut rng);
    let sampled_chaotic = sample_indices(&part.chaotic, cfg.samples, &mut rng);
    let med = |idx: &[usize], col: usize| median(&idx.iter().map(|&i| kl[(i, col)]).collect::<Vec<_>>());
    let sets = names
        .iter()
        .enumerate()
        .map(|(c, name)| SetMedians {
            set: name.to_string(),
            median_bulk: med(&sampled_bulk, c),
            median_chaotic: med(&sampled_chaotic, c),
        })
        .collect();
    let dmed = |idx: &[usize]| median(&idx.iter().map(|&i| delta[i]).collect::<Vec<_>>());
    Ok(Report {
        summary: BehaviorSummary {
            side: cfg.side,
            perturbation_norm: 1.0,
            kl_symmetrized: false,
            param_delta_median_bulk: dmed(&part.bulk),
            param_delta_median_chaotic: dmed(&part.chaotic),
            sampled_bulk,
            sampled_chaotic,
            sets,
        },
        artifacts: vec![path],
        runs: vec![run.spec.clone()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfjSetSummary {
    pub set: String,
    pub rows: usize,
    pub median_sigma: f64,
    /// Singular values more than `orders` decades below the median.
    pub trailing: usize,
    pub overlap: Vec<OverlapRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfjSummary {
    pub at: PfjPoint,
    pub init_seed: u64,
    pub orders: f64,
    pub sets: Vec<PfjSetSummary>,
}

impl PfjSummary {
    pub fn set(&self, name: &str) -> Option<&PfjSetSummary> {
        self.sets.iter().find(|s| s.set == name)
    }
}

#[derive(Serialize)]
struct PfjSigmaRow<'a> {
    set: &'a str,
    index: usize,
    sigma: f64,
}

#[derive(Serialize)]
struct OverlapCsvRow<'a> {
    set: &'a str,
    k: usize,
    mean_cosine: f64,
    random_baseline: f64,
    ratio: f64,
}

pub fn pfj_command(ctx: &Context) -> Result<Report<PfjSummary>, CliError> {
    let cfg = &ctx.config.pfj;
    let run = ctx.reference();
    let tj = run.svd()?;
    let t = run.trained()?;
    let model = ctx.config.model_config();
    let p = match cfg.at {
        PfjPoint::Init => t.p0.clone(),
        PfjPoint::Final => Params::new(t.traj.final_params.clone(), model.layout).stage("pfj")?,
    };
    let n = p.len();
    let mut sigma_rows = Vec::new();
    let mut overlap_rows = Vec::new();
    let mut sets = Vec::new();
    for (name, set) in [("test", ctx.test_set.clone()), ("noise", ctx.noise_eval())] {
        let m = pfj(&p, &set, &model).stage("pfj")?;
        let rows = m.nrows();
        // Zero rows complete V when there are fewer outputs than parameters.
        let padded = if rows < n { Mat::from_fn(n, n, |i, j| if i < rows { m[(i, j)] } else { 0.0 }) } else { m };
        let s: Svd = svd(padded.as_ref()).stage("pfj")?;
        if ctx.verify {
            verify_svd(&s, padded.as_ref(), "pfj")?;
        }
        let thin = &s.s[..rows.min(n)];
        sigma_rows.extend(thin.iter().enumerate().map(|(index, &sigma)| PfjSigmaRow { set: name, index, sigma }));
        let overlap = pfj_nullspace_overlap(&s, &tj, &cfg.ks, cfg.baseline_seed).stage("pfj")?;
        overlap_rows.extend(overlap.iter().map(|r| OverlapCsvRow {
            set: name,
            k: r.k,
            mean_cosine: r.mean_cosine,
            random_baseline: r.random_baseline,
            ratio: r.ratio(),
        }));
        sets.push(PfjSetSummary {
            set: name.to_string(),
            rows,
            median_sigma: median(thin),
            trailing: trailing_cluster_size(thin, cfg.orders),
            overlap,
        });
    }
    let dir = ctx.command_dir("pfj")?;
    let spectrum = dir.join("pfj_spectrum.csv");
    let overlap = dir.join("pfj_overlap.csv");
    write_csv(&spectrum, sigma_rows).stage("pfj")?;
    write_csv(&overlap, overlap_rows).stage("pfj")?;
    Ok(Report {
        summary: PfjSummary { at: cfg.at, init_seed: run.spec.init_seed, orders: cfg.orders, sets },
        artifacts: vec![spectrum, overlap],
        runs: vec![run.spec.clone()],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub run: String,
    pub chaotic: usize,
    pub bulk: usize,
    pub stable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub rows: Vec<OverlapRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BulkSimSummary {
    pub delta: f64,
    pub comparisons: Vec<Comparison>,
    pub counts: Vec<RegionCounts>,
}

impl BulkSimSummary {
    pub fn comparison(&self, name: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.name == name)
    }

    pub fn bulk_count(&self, run: &str) -> Option<usize> {
        self.counts.iter().find(|c| c.run == run).map(|c| c.bulk)
    }
}

#[derive(Serialize)]
struct RunSigmaRow<'a> {
    run: &'a str,
    index: usize,
    sigma: f64,
}

pub fn bulk_sim(ctx: &Context) -> Result<Report<BulkSimSummary>, CliError> {
    let cfg = &ctx.config.bulk_sim;
    let seed = ctx.config.seed;
    let delta = ctx.config.spectrum.delta;
    let runs = [
        ("digits", ctx.reference()),
        ("second_seed", ctx.run(Variant::Digits, cfg.second_seed)),
        ("shuffled_labels", ctx.run(Variant::ShuffledLabels { seed: ctx.config.data.label_seed }, seed)),
        ("white_noise", ctx.run(Variant::WhiteNoise { seed: ctx.config.data.noise_seed }, seed)),
    ];
    let svds: Vec<Svd> = runs.iter().map(|(_, r)| r.svd()).collect::<Result<_, _>>()?;

    let mut counts = Vec::new();
    let mut sigma_rows = Vec::new();
    for ((name, _), s) in runs.iter().zip(&svds) {
        let (chaotic, bulk, stable) = partition_spectrum(s, delta).stage("bulk-sim")?.counts();
        counts.push(RegionCounts { run: name.to_string(), chaotic, bulk, stable });
        sigma_rows.extend(s.s.iter().enumerate().map(|(index, &sigma)| RunSigmaRow { run: name, index, sigma }));
    }
    let mut comparisons = Vec::new();
    let mut sim_rows = Vec::new();
    for (c, name) in [(1, "second_seed"), (2, "shuffled_labels")] {
        let rows = bulk_similarity(&svds[0], &svds[c], &cfg.ks, cfg.side, cfg.baseline_seed).stage("bulk-sim")?;
        sim_rows.extend(rows.iter().map(|r| OverlapCsvRow {
            set: name,
            k: r.k,
            mean_cosine: r.mean_cosine,
            random_baseline: r.random_baseline,
            ratio: r.ratio(),
        }));
        comparisons.push(Comparison { name: name.to_string(), rows });
    }

    let dir = ctx.command_dir("bulk-sim")?;
    let sim = dir.join("bulk_sim.csv");
    let count_path = dir.join("bulk_counts.csv");
    let spectra = dir.join("spectra.csv");
    write_csv(&sim, sim_rows).stage("bulk-sim")?;
    write_csv(&count_path, &counts).stage("bulk-sim")?;
    write_csv(&spectra, sigma_rows).stage("bulk-sim")?;
    Ok(Report {
        summary: BulkSimSummary { delta, comparisons, counts },
        artifacts: vec![sim, count_path, spectra],
        runs: runs.iter().map(|(_, r)| r.spec.clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedRunSummary {
    pub region: String,
    pub k: usize,
    /// `None` when training diverged.
    pub final_train_loss: Option<f64>,
    pub final_test_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedSummary {
    pub initial_train_loss: f64,
    pub unrestricted_final_train_loss: f64,
    pub runs: Vec<RestrictedRunSummary>,
}

impl RestrictedSummary {
    pub fn find(&self, region: &str, k: usize) -> Option<&RestrictedRunSummary> {
        self.runs.iter().find(|r| r.region == region && r.k == k)
    }
}

#[derive(Serialize)]
struct RestrictedRow<'a> {
    region: &'a str,
    k: usize,
    epoch: usize,
    train_loss: f64,
    test_loss: Option<f64>,
}

pub fn restricted(ctx: &Context) -> Result<Report<RestrictedSummary>, CliError> {
    let cfg = &ctx.config.restricted;
    let run = ctx.reference();
    let s = run.svd()?;
    let t = run.trained()?;
    let tc = ctx.config.train_config();
    let n = t.p0.len();
    let test_set = &ctx.test_set;
    let jobs: Vec<(RestrictRegion, usize)> =
        cfg.regions.iter().flat_map(|&r| cfg.ks.iter().map(move |&k| (r, k))).collect();
    let results: Vec<Option<tjac_core::Trajectory>> = jobs
        .par_iter()
        .map(|&(region, k)| {
            let basis = match region {
                RestrictRegion::Chaotic => region_subspace(&s, Region::Chaotic, k, Side::Right),
                RestrictRegion::Stable => region_subspace(&s, Region::Stable, k, Side::Right),
                RestrictRegion::Bulk => bulk_at_k(&s, k, Side::Right),
                RestrictRegion::Random => random_subspace(n, k, cfg.random_seed.wrapping_add(k as u64)),
            }
            .stage("restricted")?;
            match train_restricted(&t.p0, &basis, &t.train_set, Some(test_set), &tc) {
                Ok(r) => Ok(Some(r.trajectory)),
                Err(CoreError::TrainingDiverged { step }) => {
                    log::warn!("restricted training on {} at k = {k} diverged at step {step}", region.name());
                    Ok(None)
                }
                Err(e) => Err(e).stage("restricted"),
            }
        })
        .collect::<Result<_, CliError>>()?;

    let mut rows = Vec::new();
    let mut push_curve = |region: &'static str, k: usize, traj: &tjac_core::Trajectory| {
        for e in &traj.loss_curve {
            rows.push(RestrictedRow { region, k, epoch: e.epoch, train_loss: e.train_loss, test_loss: e.test_loss });
        }
    };
    push_curve("full", n, &t.traj);
    let mut summaries = Vec::new();
    for (&(region, k), traj) in jobs.iter().zip(&results) {
        if let Some(traj) = traj {
            push_curve(region.name(), k, traj);
        }
        let last = traj.as_ref().and_then(|tr| tr.loss_curve.last());
        summaries.push(RestrictedRunSummary {
            region: region.name().to_string(),
            k,
            final_train_loss: last.map(|e| e.train_loss),
            final_test_loss: last.and_then(|e| e.test_loss),
        });
    }
    let path = ctx.command_dir("restricted")?.join("restricted.csv");
    write_csv(&path, rows).stage("restricted")?;
    Ok(Report {
        summary: RestrictedSummary {
            initial_train_loss: t.traj.loss_curve[0].train_loss,
            unrestricted_final_train_loss: t.traj.final_train_loss(),
            runs: summaries,
        },
        artifacts: vec![path],
        runs: vec![run.spec.clone()],
    })
}
