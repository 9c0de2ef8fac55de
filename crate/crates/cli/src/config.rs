//! Run configuration: presets, TOML files and `--set` overrides.

use std::path::Path;

use clap::ValueEnum;
use equibody::bodymodel::BodyConfig;
use equibody::equinet::NetworkConfig;
use equibody::trainer::LossWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// K = 16, 2000 vertices, 1000 points, 200 training samples.
    Desk,
    /// K = 22, C = 64, 5000 points: the full-size architecture.
    PaperShape,
    /// Tiny pipeline for tests.
    Smoke,
}

/// Dataset sizes and pose distributions for `gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
    /// Size of each of the ID and OOD test sets.
    pub test: usize,
    pub points: usize,
    /// Gaussian noise std in metres.
    pub noise: f64,
    /// Per-axis joint half-range of the in-distribution poses, degrees.
    pub id_range_deg: f64,
    /// Per-axis joint half-range of the out-of-distribution poses, degrees.
    pub ood_range_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment_so3: bool,
    pub loss: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub body: BodyConfig,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub train: TrainSettings,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        let train = TrainSettings {
            stage1_epochs: 10,
            stage2_epochs: 10,
            batch_size: 4,
            learning_rate: 1e-3,
            augment_so3: false,
            loss: LossWeights::default(),
        };
        let data = DataConfig { train: 200, val: 10, test: 20, points: 1000, noise: 0.005, id_range_deg: 30.0, ood_range_deg: 90.0 };
        match self {
            Preset::Desk => RunConfig {
                seed: 0,
                body: BodyConfig { joints: 16, vertices: 2000, ..BodyConfig::default() },
                network: NetworkConfig { channels: 32, ..NetworkConfig::default() },
                data,
                train,
            },
            Preset::PaperShape => RunConfig {
                seed: 0,
                body: BodyConfig { joints: 22, vertices: 6890, ..BodyConfig::default() },
                network: NetworkConfig::default(),
                data: DataConfig { points: 5000, ..data },
                train,
            },
            Preset::Smoke => RunConfig {
                seed: 0,
                body: BodyConfig { joints: 16, vertices: 800, ..BodyConfig::default() },
                network: NetworkConfig { channels: 8, heads: 2, embed: 16, hidden: 16, neighbor_cap: 16, ..NetworkConfig::default() },
                data: DataConfig { train: 8, val: 2, test: 3, points: 256, ..data },
                train: TrainSettings { stage1_epochs: 1, stage2_epochs: 1, ..train },
            },
        }
    }
}

/// Applies `dotted.key=value` to a TOML tree. The value is parsed as a TOML
/// literal, falling back to a bare string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one element");
    let mut table = root;
    for p in parents {
        table = table
            .get_mut(*p)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| CliError::Config(format!("unknown config section {p:?} in {key:?}")))?;
    }
    if !table.contains_key(*last) {
        return Err(CliError::Config(format!("unknown config key {key:?}")));
    }
    table.insert(last.to_string(), value);
    Ok(())
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

/// Resolves the configuration: preset, then the file (whose optional
/// top-level `preset` key replaces the command-line one), then overrides.
pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut preset = preset;
    let mut file_table = None;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut t: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(p) = t.remove("preset") {
            let name = p.as_str().ok_or_else(|| CliError::Config("preset must be a string".into()))?;
            preset = Preset::from_str(name, true).map_err(|_| CliError::Config(format!("unknown preset {name:?}")))?;
        }
        file_table = Some(t);
    }
    let mut table = toml::Table::try_from(preset.config()).expect("configs serialize");
    if let Some(t) = file_table {
        merge(&mut table, t);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if ![16, 22, 24].contains(&self.body.joints) {
            return bad(format!("body.joints must be 16, 22 or 24, got {}", self.body.joints));
        }
        let d = &self.data;
        if d.train == 0 || d.test == 0 || d.points < 16 {
            return bad("data.train and data.test must be positive and data.points at least 16".into());
        }
        for (name, v) in [("id_range_deg", d.id_range_deg), ("ood_range_deg", d.ood_range_deg)] {
            if !(0.0..=180.0).contains(&v) {
                return bad(format!("data.{name} must lie in [0, 180], got {v}"));
            }
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return bad(format!("data.noise must be finite and nonnegative, got {}", d.noise));
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad("train.batch_size and train.learning_rate must be positive".into());
        }
        t.loss.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_distinct() {
        let hashes: Vec<String> = [Preset::Desk, Preset::PaperShape, Preset::Smoke].iter().map(|p| {
            let c = p.config();
            c.validate().unwrap();
            c.hash()
        }).collect();
        assert_ne!(hashes[0], hashes[1]);
        assert_ne!(hashes[0], hashes[2]);
        let desk = Preset::Desk.config();
        assert_eq!((desk.body.joints, desk.body.vertices, desk.data.points, desk.data.train), (16, 2000, 1000, 200));
        let paper = Preset::PaperShape.config();
        assert_eq!((paper.body.joints, paper.network.channels, paper.data.points), (22, 64, 5000));
    }

    #[test]
    fn file_and_overrides_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "preset = \"smoke\"\nseed = 9\n[train]\nbatch_size = 2\n").unwrap();
        let cfg = resolve(Preset::Desk, Some(&path), &["network.channels=12".into(), "train.augment_so3=true".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.network.channels, 12);
        assert!(cfg.train.augment_so3);
        assert_eq!(cfg.data.points, Preset::Smoke.config().data.points);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[network]\nchanels = 3\n").unwrap();
        assert!(matches!(resolve(Preset::Desk, Some(&path), &[]), Err(CliError::Config(_))));
        assert!(matches!(resolve(Preset::Desk, None, &["train.epochs=3".into()]), Err(CliError::Config(_))));
        assert!(matches!(resolve(Preset::Desk, None, &["body.joints=17".into()]), Err(CliError::Config(_))));
    }
}
