//! Run configuration: one TOML file per command, merged over the
//! defaults of the selected profile and checked against the schema.

use std::path::Path;

use initforge::archspace::resnet_from_name;
use initforge::evalkit::{CorruptionKind, EnsembleRule};
use initforge::globalinit::GhnTrainConfig;
use initforge::localinit::vae::VaeConfig;
use initforge::localinit::vq::VqvaeConfig;
use initforge::localinit::LocalTrainConfig;
use initforge::train::{Cadence, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

/// Where images come from: `synthetic` (the bundled texture generator)
/// or a path to a class-subfolder directory or a `.bin` tensor file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset tag used in artifact names.
    pub name: String,
    pub source: String,
    /// Images generated when `source = "synthetic"`.
    pub n: usize,
    /// Seed of generation and of the 70/10/20 split.
    pub seed: u64,
    /// Shifted-domain source for transfer (same conventions as `source`).
    pub shifted_source: String,
    pub shifted_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvestConfig {
    pub arch: String,
    pub population: usize,
    pub filter_fraction: f64,
    pub workers: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub arch: String,
    pub methods: Vec<String>,
    /// Independent runs per method.
    pub seeds: usize,
    pub train: TrainConfig,
    pub thresholds: Vec<f64>,
    /// Trained networks per method from which ensembles are drawn.
    pub pool: usize,
    pub ensemble_k: usize,
    pub ensemble_n: usize,
    pub ensemble_rule: EnsembleRule,
    pub corruptions: Vec<CorruptionKind>,
    pub similarity_members: usize,
    pub transfer_train: usize,
    pub transfer_test: usize,
    pub transfer: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: Profile,
    pub data: DataConfig,
    pub harvest: HarvestConfig,
    pub local: LocalTrainConfig,
    pub ghn: GhnTrainConfig,
    pub evaluate: EvalConfig,
}

pub const METHODS: [&str; 6] = ["he", "xavier", "vae", "vqvae", "ghn", "noise_ghn"];

impl Config {
    pub fn defaults(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                profile,
                data: DataConfig {
                    name: "desk".into(),
                    source: "synthetic".into(),
                    n: 8000,
                    seed: 0,
                    shifted_source: "synthetic".into(),
                    shifted_n: 3000,
                },
                harvest: HarvestConfig {
                    arch: "resnet8".into(),
                    population: 8,
                    filter_fraction: 0.05,
                    workers: 1,
                    train: TrainConfig::standard(6, 0),
                },
                local: LocalTrainConfig::default(),
                ghn: GhnTrainConfig::desk(0),
                evaluate: EvalConfig {
                    arch: "resnet8".into(),
                    methods: METHODS.iter().map(|s| s.to_string()).collect(),
                    seeds: 5,
                    train: TrainConfig {
                        cadence: Cadence::Batches(5),
                        ..TrainConfig::standard(2, 0)
                    },
                    thresholds: vec![0.5, 0.7],
                    pool: 8,
                    ensemble_k: 5,
                    ensemble_n: 10,
                    ensemble_rule: EnsembleRule::MeanProbability,
                    corruptions: CorruptionKind::ALL.to_vec(),
                    similarity_members: 5,
                    transfer_train: 1000,
                    transfer_test: 2000,
                    transfer: initforge::evalkit::transfer_config(0),
                },
            },
            Profile::Paper => {
                let desk = Self::defaults(Profile::Desk);
                Self {
                    profile,
                    data: DataConfig {
                        name: "cifar10".into(),
                        source: "data/cifar10.bin".into(),
                        shifted_source: "data/pcam.bin".into(),
                        ..desk.data
                    },
                    harvest: HarvestConfig {
                        arch: "resnet20".into(),
                        population: 100,
                        train: TrainConfig::standard(120, 0),
                        ..desk.harvest
                    },
                    local: LocalTrainConfig {
                        vae: VaeConfig::default(),
                        vqvae: VqvaeConfig::default(),
                    },
                    ghn: GhnTrainConfig::paper(0),
                    evaluate: EvalConfig {
                        arch: "resnet20".into(),
                        seeds: 25,
                        train: TrainConfig::standard(120, 0),
                        thresholds: vec![0.65, 0.75],
                        pool: 25,
                        ensemble_n: 20,
                        transfer_train: 1000,
                        transfer_test: 10000,
                        ..desk.evaluate
                    },
                }
            }
        }
    }

    /// Reads `path` (if any), merges it over the profile defaults and
    /// validates the result. `profile` overrides the file's `profile` key.
    pub fn load(path: Option<&Path>, profile: Option<Profile>) -> Result<Self, CliError> {
        let user: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Missing(format!("config {}: {e}", p.display())))?;
                text.parse()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let chosen = match (profile, user.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .clone()
                .try_into()
                .map_err(|e| CliError::Config(format!("profile: {e}")))?,
            (None, None) => Profile::Desk,
        };
        let defaults = toml::Table::try_from(Self::defaults(chosen))
            .map_err(|e| CliError::Other(format!("serialising defaults: {e}")))?;
        let mut merged = defaults;
        merge(&mut merged, user);
        merged.insert("profile".into(), toml::Value::try_from(chosen).expect("profile serialises"));
        let text = toml::to_string(&merged).map_err(|e| CliError::Other(e.to_string()))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| CliError::Config(format!("schema error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let h = &self.harvest;
        if h.population == 0 {
            return bad("harvest.population: must be at least 1".into());
        }
        if !(0.0..1.0).contains(&h.filter_fraction) {
            return bad("harvest.filter_fraction: must lie in [0, 1)".into());
        }
        if h.workers == 0 {
            return bad("harvest.workers: must be at least 1".into());
        }
        let classes = self.ghn.num_classes;
        for (field, arch) in [("harvest.arch", &h.arch), ("evaluate.arch", &self.evaluate.arch)] {
            resnet_from_name(arch, classes).map_err(|e| CliError::Config(format!("{field}: {e}")))?;
        }
        h.train.validate().map_err(|e| CliError::Config(format!("harvest.train: {e}")))?;
        self.ghn.validate().map_err(|e| CliError::Config(format!("ghn: {e}")))?;
        let e = &self.evaluate;
        if let Some(m) = e.methods.iter().find(|m| !METHODS.contains(&m.as_str())) {
            return bad(format!("evaluate.methods: unknown method `{m}` (expected one of {METHODS:?})"));
        }
        e.train.validate().map_err(|x| CliError::Config(format!("evaluate.train: {x}")))?;
        e.transfer.validate().map_err(|x| CliError::Config(format!("evaluate.transfer: {x}")))?;
        if e.seeds == 0 {
            return bad("evaluate.seeds: must be at least 1".into());
        }
        if e.thresholds.windows(2).any(|w| w[0] > w[1]) {
            return bad("evaluate.thresholds: must be sorted ascending".into());
        }
        if e.ensemble_k == 0 || e.pool < e.ensemble_k {
            return bad("evaluate.pool: must hold at least ensemble_k networks".into());
        }
        if e.similarity_members < 2 {
            return bad("evaluate.similarity_members: must be at least 2".into());
        }
        if self.data.n == 0 || self.data.shifted_n == 0 {
            return bad("data.n: must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load_str(text: &str) -> Result<Config, CliError> {
        let dir = std::env::temp_dir().join(format!("initforge-cfg-{}-{}", std::process::id(), text.len()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.toml");
        std::fs::write(&p, text).unwrap();
        let r = Config::load(Some(&p), None);
        std::fs::remove_dir_all(dir).ok();
        r
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        for p in [Profile::Desk, Profile::Paper] {
            let c = Config::defaults(p);
            c.validate().unwrap();
            assert_eq!(Config::load(None, Some(p)).unwrap(), c);
        }
    }

    #[test]
    fn overrides_merge_and_unknown_fields_are_rejected() {
        let c = load_str("[harvest]\npopulation = 3\n[harvest.train]\nepochs = 2\n").unwrap();
        assert_eq!(c.harvest.population, 3);
        assert_eq!(c.harvest.train.epochs, 2);
        assert_eq!(c.harvest.arch, "resnet8");
        let e = load_str("[harvest]\npopulaton = 3\n").unwrap_err();
        assert!(matches!(&e, CliError::Config(m) if m.contains("populaton")), "{e}");
        assert!(matches!(load_str("[harvest]\npopulation = 0\n"), Err(CliError::Config(_))));
        assert!(matches!(load_str("profile = \"paper\"\n").unwrap().profile, Profile::Paper));
        assert!(matches!(load_str("[evaluate]\nmethods = [\"bogus\"]\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::defaults(Profile::Desk);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.harvest.population += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
