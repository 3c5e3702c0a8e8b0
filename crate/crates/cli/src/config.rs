use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tjac_core::analysis::Side;
use tjac_core::nn::{Activation, LossKind, ModelConfig, ParamLayout};
use tjac_core::TrainConfig;

use crate::error::CliError;

/// Model size preset. Both scales run the same code; only the hidden width
/// and the k grids differ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 64-16-10, N = 1210.
    Tiny,
    /// 64-64-10, N = 4810.
    Paper,
}

impl Scale {
    pub fn hidden(self) -> usize {
        match self {
            Scale::Tiny => 16,
            Scale::Paper => 64,
        }
    }

    pub fn n_params(self) -> usize {
        ParamLayout::digits(self.hidden()).n_params()
    }

    /// Maps a cutoff chosen for the N = 4810 model onto this scale, keeping k/N fixed.
    pub fn scale_k(self, k_full: usize) -> usize {
        let n = self.n_params() as f64;
        let full = Scale::Paper.n_params() as f64;
        ((k_full as f64 * n / full).round() as usize).max(1)
    }

    fn scale_ks(self, ks: &[usize]) -> Vec<usize> {
        ks.iter().map(|&k| self.scale_k(k)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub activation: Activation,
    pub loss: LossKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub shuffle_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Digits CSV; the bundled copy when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub test_fraction: f64,
    pub split_seed: u64,
    /// White-noise training images use this seed, the noise evaluation set `noise_seed + 1`.
    pub noise_seed: u64,
    pub label_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JacobianSection {
    pub block_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub delta: f64,
    /// Number of leading singular pairs summarized as "top chaotic".
    pub top: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSearchSection {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub points: usize,
    /// Upper end of the λ range over which the bulk direction is summarized.
    pub linear_max: f64,
    /// Picks the bulk direction.
    pub direction_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSection {
    /// Directions sampled per region for the summary medians.
    pub samples: usize,
    pub sample_seed: u64,
    pub side: Side,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfjPoint {
    Init,
    /// Exploration only.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfjSection {
    pub at: PfjPoint,
    pub ks: Vec<usize>,
    /// Decades below the median that define the trailing cluster.
    pub orders: f64,
    pub baseline_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BulkSimSection {
    pub second_seed: u64,
    pub ks: Vec<usize>,
    pub side: Side,
    pub baseline_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestrictRegion {
    Chaotic,
    Bulk,
    Stable,
    Random,
}

impl RestrictRegion {
    pub fn name(self) -> &'static str {
        match self {
            RestrictRegion::Chaotic => "chaotic",
            RestrictRegion::Bulk => "bulk",
            RestrictRegion::Stable => "stable",
            RestrictRegion::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictedSection {
    pub ks: Vec<usize>,
    pub regions: Vec<RestrictRegion>,
    pub random_seed: u64,
}

/// Everything an experiment needs. Every field has a value after loading, so
/// a stored copy reproduces a run without the preset it started from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Initialization seed of the reference run.
    pub seed: u64,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub jacobian: JacobianSection,
    pub spectrum: SpectrumSection,
    pub linesearch: LineSearchSection,
    pub behavior: BehaviorSection,
    pub pfj: PfjSection,
    pub bulk_sim: BulkSimSection,
    pub restricted: RestrictedSection,
}

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        Self {
            seed: 0,
            model: ModelSection { hidden: scale.hidden(), activation: Activation::Relu, loss: LossKind::CrossEntropy },
            training: TrainingSection { epochs: 25, batch_size: 64, learning_rate: 0.15, momentum: 0.9, shuffle_seed: 0 },
            data: DataSection { path: None, test_fraction: 0.2, split_seed: 0, noise_seed: 1, label_seed: 2 },
            jacobian: JacobianSection { block_size: tjac_core::jacobian::DEFAULT_BLOCK_SIZE },
            spectrum: SpectrumSection { delta: 1e-2, top: 100 },
            linesearch: LineSearchSection {
                lambda_min: 1e-3,
                lambda_max: 1e3,
                points: 13,
                linear_max: 1e2,
                direction_seed: 3,
            },
            behavior: BehaviorSection { samples: 50, sample_seed: 4, side: Side::Right },
            pfj: PfjSection {
                at: PfjPoint::Init,
                ks: scale.scale_ks(&[100, 250, 500, 1000, 2000]),
                orders: 3.0,
                baseline_seed: 5,
            },
            bulk_sim: BulkSimSection {
                second_seed: 1,
                ks: scale.scale_ks(&[250, 500, 1000, 2000, 3000, 4000]),
                side: Side::Right,
                baseline_seed: 6,
            },
            restricted: RestrictedSection {
                ks: scale.scale_ks(&[100, 300, 1000, 3000]),
                regions: vec![
                    RestrictRegion::Chaotic,
                    RestrictRegion::Stable,
                    RestrictRegion::Bulk,
                    RestrictRegion::Random,
                ],
                random_seed: 7,
            },
        }
    }

    /// Preset for `scale` with the TOML document at `path` merged over it.
    pub fn load(path: Option<&Path>, scale: Scale) -> Result<Self, CliError> {
        let Some(path) = path else {
            let cfg = Self::preset(scale);
            cfg.validate()?;
            return Ok(cfg);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_over(&text, scale)
    }

    pub fn from_toml_over(text: &str, scale: Scale) -> Result<Self, CliError> {
        let overrides: toml::Table = text.parse().map_err(|e| CliError::config("config", format!("{e}")))?;
        let mut base = toml::Table::try_from(Self::preset(scale)).map_err(|e| CliError::internal("config", e))?;
        merge(&mut base, overrides);
        let cfg: Self = toml::Value::Table(base).try_into().map_err(|e| CliError::config("config", format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON form; independent of how the source file was written.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes to JSON"))
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::digits(self.model.hidden)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { activation: self.model.activation, loss: self.model.loss, layout: self.layout() }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            shuffle_seed: t.shuffle_seed,
            model: self.model_config(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::config("config", msg));
        let n = self.layout().n_params();
        if self.model.hidden == 0 {
            return bad("model.hidden must be positive".into());
        }
        if let Err(e) = self.train_config().schedule().validate() {
            return bad(format!("training: {e}"));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!("data.test_fraction {} outside (0, 1)", self.data.test_fraction));
        }
        if self.jacobian.block_size == 0 {
            return bad("jacobian.block_size must be positive".into());
        }
        if !(self.spectrum.delta > 0.0 && self.spectrum.delta < 1.0) {
            return bad(format!("spectrum.delta {} outside (0, 1)", self.spectrum.delta));
        }
        if self.spectrum.top == 0 || self.spectrum.top > n {
            return bad(format!("spectrum.top must lie in 1..={n}"));
        }
        let ls = &self.linesearch;
        if !(ls.lambda_min > 0.0 && ls.lambda_max > ls.lambda_min && ls.points >= 2) {
            return bad("linesearch needs 0 < lambda_min < lambda_max and points ≥ 2".into());
        }
        if self.behavior.samples == 0 {
            return bad("behavior.samples must be positive".into());
        }
        if !(self.pfj.orders > 0.0) {
            return bad("pfj.orders must be positive".into());
        }
        for (name, ks) in [("pfj.ks", &self.pfj.ks), ("bulk_sim.ks", &self.bulk_sim.ks), ("restricted.ks", &self.restricted.ks)] {
            if ks.is_empty() {
                return bad(format!("{name} is empty"));
            }
            if let Some(k) = ks.iter().find(|&&k| k == 0 || k > n) {
                return bad(format!("{name} contains {k}, outside 1..={n}"));
            }
        }
        if self.restricted.regions.is_empty() {
            return bad("restricted.regions is empty".into());
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (key, value) in overrides {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for scale in [Scale::Tiny, Scale::Paper] {
            ExperimentConfig::preset(scale).validate().unwrap();
        }
        assert_eq!(Scale::Tiny.n_params(), 1210);
        assert_eq!(Scale::Paper.n_params(), 4810);
        assert_eq!(Scale::Tiny.scale_k(1000), 252);
        assert_eq!(Scale::Paper.scale_k(1000), 1000);
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = ExperimentConfig::from_toml_over("seed = 3\n[training]\nepochs = 5\n", Scale::Tiny).unwrap();
        let b = ExperimentConfig::from_toml_over(
            "# comment\nseed=3\n\n[model]\nhidden = 16\n[training]\n  epochs   =   5 # five\n",
            Scale::Tiny,
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_over("[training]\nepoch = 5", Scale::Tiny).is_err());
        assert!(ExperimentConfig::from_toml_over("[training]\nepochs = 5\nseed = 3", Scale::Tiny).is_err());
    }

    #[test]
    fn hash_tracks_semantic_fields() {
        let a = ExperimentConfig::preset(Scale::Tiny);
        let mut b = a.clone();
        b.training.learning_rate = 0.1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.spectrum.delta = 2e-2;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }

    #[test]
    fn stored_config_round_trips() {
        let mut a = ExperimentConfig::preset(Scale::Tiny);
        a.data.path = Some("digits.csv".into());
        let back = ExperimentConfig::from_toml_over(&a.to_toml(), Scale::Paper).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in ["[spectrum]\ndelta = 1.5", "[restricted]\nks = [0]", "[training]\nbatch_size = 0", "[model]\nactivation = \"gelu\""] {
            let e = ExperimentConfig::from_toml_over(doc, Scale::Tiny).unwrap_err();
            assert_eq!(e.kind, crate::error::ErrorKind::Config, "{doc}");
        }
    }

    #[test]
    fn scale_overridden_by_explicit_width() {
        let cfg = ExperimentConfig::from_toml_over("[model]\nhidden = 32", Scale::Tiny).unwrap();
        assert_eq!(cfg.layout().n_params(), 64 * 32 + 32 + 32 * 10 + 10);
    }
}
