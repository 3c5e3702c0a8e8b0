use std::cell::{OnceCell, RefCell};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, ErrorKind as IoErrorKind, Write};
use std::path::{Path, PathBuf};

use faer::MatRef;
use log::info;
use serde::{Deserialize, Serialize};
use tjac_core::data::{self, read_digits, split, Dataset, SplitSpec};
use tjac_core::jacobian::full_jacobian;
use tjac_core::linalg::svd;
use tjac_core::nn::init_params;
use tjac_core::train::train_with_eval;
use tjac_core::{io, Matrix, Params, Svd, TrainConfig, Trajectory};

use crate::config::{hex_digest, ExperimentConfig};
use crate::error::{CliError, StageExt};

/// Relative tolerance for the `--verify` SVD checks.
pub const VERIFY_TOL: f64 = 1e-9;

/// Held while an experiment writes into an output directory.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).stage("lock")?;
        let path = out.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).stage("lock")?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == IoErrorKind::AlreadyExists => Err(CliError::internal(
                "lock",
                format!("{} exists; another run is using this directory (delete the file if none is)", path.display()),
            )),
            Err(e) => Err(CliError::internal("lock", e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    Digits,
    ShuffledLabels { seed: u64 },
    WhiteNoise { seed: u64 },
}

/// Everything that determines a training trajectory, and therefore its cache key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: Variant,
    pub init_seed: u64,
    pub training: TrainConfig,
    pub data_digest: String,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl RunSpec {
    pub fn key(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("run spec serializes"))[..16].to_string()
    }

    pub fn label(&self) -> String {
        match self.variant {
            Variant::Digits => format!("digits/seed{}", self.init_seed),
            Variant::ShuffledLabels { seed } => format!("shuffled{seed}/seed{}", self.init_seed),
            Variant::WhiteNoise { seed } => format!("noise{seed}/seed{}", self.init_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEvent {
    pub artifact: String,
    pub run: String,
    pub reused: bool,
}

pub struct Trained {
    pub p0: Params,
    pub traj: Trajectory,
    pub train_set: Dataset,
}

/// Loaded data plus the cache rooted at `<out>/cache`.
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub verify: bool,
    pub train_set: Dataset,
    pub test_set: Dataset,
    pub data_digest: String,
    events: RefCell<Vec<CacheEvent>>,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: PathBuf, verify: bool) -> Result<Self, CliError> {
        let bytes = match &config.data.path {
            Some(p) => fs::read(p).map_err(|e| CliError::data("data", format!("cannot read {}: {e}", p.display())))?,
            None => data::BUNDLED_DIGITS.as_bytes().to_vec(),
        };
        let digest = hex_digest(&bytes);
        let all = read_digits(bytes.as_slice()).map_err(|e| CliError::data("data", e))?;
        let spec = SplitSpec { test_fraction: config.data.test_fraction, seed: config.data.split_seed };
        let (train_set, test_set) = split(&all, &spec).map_err(|e| CliError::data("data", e))?;
        Ok(Self { config, out, verify, train_set, test_set, data_digest: digest, events: RefCell::new(Vec::new()) })
    }

    pub fn run_spec(&self, variant: Variant, init_seed: u64) -> RunSpec {
        RunSpec {
            variant,
            init_seed,
            training: self.config.train_config(),
            data_digest: self.data_digest.clone(),
            test_fraction: self.config.data.test_fraction,
            split_seed: self.config.data.split_seed,
        }
    }

    pub fn reference(&self) -> Run<'_> {
        self.run(Variant::Digits, self.config.seed)
    }

    pub fn run(&self, variant: Variant, init_seed: u64) -> Run<'_> {
        Run { ctx: self, spec: self.run_spec(variant, init_seed), trained: OnceCell::new() }
    }

    pub fn train_set_for(&self, variant: Variant) -> Dataset {
        match variant {
            Variant::Digits => self.train_set.clone(),
            Variant::ShuffledLabels { seed } => data::shuffle_labels(&self.train_set, seed),
            Variant::WhiteNoise { seed } => data::make_noise_like(&self.train_set, seed),
        }
    }

    /// Uniform-noise images shaped like the test set.
    pub fn noise_eval(&self) -> Dataset {
        data::make_noise_like(&self.test_set, self.config.data.noise_seed + 1).with_name("noise")
    }

    pub fn inverted_eval(&self) -> Dataset {
        data::invert(&self.test_set)
    }

    pub fn command_dir(&self, command: &str) -> Result<PathBuf, CliError> {
        let d = self.out.join(command);
        fs::create_dir_all(&d).stage(command)?;
        Ok(d)
    }

    pub fn cache_events(&self) -> Vec<CacheEvent> {
        self.events.borrow().clone()
    }

    fn note(&self, artifact: &str, run: &RunSpec, reused: bool) {
        if reused {
            info!("reusing cached {artifact} for {} ({})", run.label(), run.key());
        } else {
            info!("computed {artifact} for {} ({})", run.label(), run.key());
        }
        self.events.borrow_mut().push(CacheEvent { artifact: artifact.to_string(), run: run.key(), reused });
    }
}

/// One training run with lazily computed, cached downstream artifacts.
pub struct Run<'a> {
    ctx: &'a Context,
    pub spec: RunSpec,
    trained: OnceCell<Trained>,
}

impl Run<'_> {
    pub fn dir(&self) -> PathBuf {
        self.ctx.out.join("cache").join(self.spec.key())
    }

    /// Retrains (cheap) and checks the result against any cached final parameters.
    pub fn trained(&self) -> Result<&Trained, CliError> {
        if let Some(t) = self.trained.get() {
            return Ok(t);
        }
        let cfg = self.spec.training;
        let train_set = self.ctx.train_set_for(self.spec.variant);
        let p0 = init_params::<f64>(cfg.model.layout, self.spec.init_seed);
        let traj = train_with_eval(&p0, &train_set, Some(&self.ctx.test_set), &cfg).stage("train")?;
        let dir = self.dir();
        fs::create_dir_all(&dir).stage("train")?;
        let path = dir.join("final_params.tjm");
        let final_col = column(&traj.final_params);
        if path.exists() {
            let cached: Matrix = io::load_matrix(&path).stage("train")?;
            if cached.as_ref() != final_col {
                return Err(CliError::internal(
                    "train",
                    format!("run {} no longer reproduces its cached parameters {}", self.spec.label(), path.display()),
                ));
            }
            self.ctx.note("final_params", &self.spec, true);
        } else {
            atomic_write(&dir.join("run.json"), |w| {
                serde_json::to_writer_pretty(&mut *w, &self.spec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")
            })
            .stage("train")?;
            save_matrix(&path, final_col).stage("train")?;
            write_csv(&dir.join("loss_curve.csv"), loss_rows(&traj)).stage("train")?;
            self.ctx.note("final_params", &self.spec, false);
        }
        let _ = self.trained.set(Trained { p0, traj, train_set });
        Ok(self.trained.get().expect("just set"))
    }

    pub fn jacobian(&self) -> Result<Matrix, CliError> {
        let path = self.dir().join("jacobian.tjm");
        if path.exists() {
            let j = io::load_matrix(&path).stage("jacobian")?;
            self.ctx.note("jacobian", &self.spec, true);
            return Ok(j);
        }
        let t = self.trained()?;
        let j = full_jacobian(&t.traj, &t.train_set, &self.spec.training, self.ctx.config.jacobian.block_size)
            .stage("jacobian")?;
        save_matrix(&path, j.matrix.as_ref()).stage("jacobian")?;
        self.ctx.note("jacobian", &self.spec, false);
        Ok(j.matrix)
    }

    pub fn svd(&self) -> Result<Svd, CliError> {
        let dir = self.dir();
        if io::svd_paths(&dir, "svd").iter().all(|p| p.exists()) {
            let s: Svd = io::load_svd(&dir, "svd").stage("svd")?;
            self.ctx.note("svd", &self.spec, true);
            if self.ctx.verify {
                verify_svd(&s, self.jacobian()?.as_ref(), "svd")?;
            }
            return Ok(s);
        }
        let j = self.jacobian()?;
        let s = svd(j.as_ref()).stage("svd")?;
        if self.ctx.verify {
            verify_svd(&s, j.as_ref(), "svd")?;
        }
        let [pu, ps, pv] = io::svd_paths(&dir, "svd");
        save_matrix(&pu, s.u.as_ref()).stage("svd")?;
        save_matrix(&ps, MatRef::from_row_major_slice(&s.s, 1, s.s.len())).stage("svd")?;
        save_matrix(&pv, s.v.as_ref()).stage("svd")?;
        self.ctx.note("svd", &self.spec, false);
        Ok(s)
    }
}

pub fn verify_svd(s: &Svd, a: MatRef<'_, f64>, stage: &str) -> Result<(), CliError> {
    let check = s.check(a);
    info!("svd check ({stage}): {check:?}");
    if check.passes(VERIFY_TOL) {
        Ok(())
    } else {
        Err(CliError::numeric(stage, format!("SVD fails its invariants: {check:?}")))
    }
}

fn column(v: &[f64]) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(v, v.len(), 1)
}

#[derive(Serialize)]
pub struct LossRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

pub fn loss_rows(traj: &Trajectory) -> Vec<LossRow> {
    traj.loss_curve
        .iter()
        .map(|e| LossRow { epoch: e.epoch, train_loss: e.train_loss, test_loss: e.test_loss })
        .collect()
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn atomic_write(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_matrix(path: &Path, m: MatRef<'_, f64>) -> std::io::Result<()> {
    atomic_write(path, |w| io::write_matrix(m, w).map_err(std::io::Error::other))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> std::io::Result<()> {
    atomic_write(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r).map_err(std::io::Error::other)?;
        }
        out.flush()
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> std::io::Result<()> {
    atomic_write(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::from)?;
        w.write_all(b"\n")
    })
}
