//! Run settings merged from defaults, a flat TOML file and flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use gscnn::network::{parse_gate_list, GatePlacement, NetworkConfig};
use gscnn::training::{PairConfig, RmsPropConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable consulted when no dataset root is given.
pub const DATA_ROOT_ENV: &str = "GSCNN_DATA_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (f32 or f64)")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

macro_rules! settings {
    ($($(#[$doc:meta])* $field:ident: $ty:ty = $default:expr;)*) => {
        /// Every overridable setting. `None` means "not given at this layer".
        #[derive(Clone, Debug, Default, PartialEq, Deserialize, clap::Args)]
        #[serde(deny_unknown_fields)]
        pub struct Settings {
            $($(#[$doc])* #[arg(long)] pub $field: Option<$ty>,)*
        }

        /// Fully resolved settings.
        #[derive(Clone, Debug, PartialEq, Serialize)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($field: $default,)* }
            }
        }

        impl Settings {
            /// Fields set in `over` replace those of `self`.
            pub fn overlay(self, over: Settings) -> Settings {
                Settings { $($field: over.$field.or(self.$field),)* }
            }

            pub fn resolve(self) -> RunConfig {
                let d = RunConfig::default();
                RunConfig { $($field: self.$field.unwrap_or(d.$field),)* }
            }
        }
    };
}

settings! {
    /// CSV manifest of the dataset.
    manifest: PathBuf = PathBuf::new();
    /// Root that manifest image paths are relative to.
    data_root: PathBuf = PathBuf::new();
    /// Directory receiving every output.
    out_dir: PathBuf = PathBuf::from("out");
    seed: u64 = 0;
    /// f32 or f64.
    precision: Precision = Precision::F32;
    /// Worker threads; 1 keeps runs reproducible.
    workers: usize = 1;
    /// Gate placements: none, all, or a list such as 4-5,5-6.
    #[serde(alias = "gate_placements")]
    gates: String = "all".to_string();
    include_final_fc: bool = true;
    embedding_dim: usize = 150;
    p_init: f64 = 4.0;
    /// Differentiate through the gate mask into the partner stream.
    gate_gradient: bool = true;
    normalize_embedding: bool = false;
    margin: f64 = 1.0;
    batch_size: usize = 100;
    epochs: usize = 20;
    /// Stop after this many iterations (0 = no limit).
    max_iterations: usize = 0;
    learning_rate: f64 = 0.002;
    /// Multiplicative learning-rate decay per epoch.
    lr_decay: f64 = 0.9;
    /// RMSProp moving-average decay.
    rmsprop_decay: f64 = 0.95;
    rmsprop_epsilon: f64 = 1e-8;
    negatives_per_positive: usize = 5;
    augment: bool = true;
    translate_fraction: f64 = 0.05;
    same_camera_positives: bool = false;
    /// Fraction of training identities used for validation when the manifest has none.
    val_fraction: f64 = 0.1;
    early_stop_patience: usize = 3;
    early_stop_min_delta: f64 = 0.1;
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Settings> {
        Ok(toml::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Defaults, then `file`, then `flags`.
    pub fn merge(file: Option<&Path>, flags: Settings) -> Result<RunConfig> {
        let base = match file {
            Some(p) => Settings::read(p)?,
            None => Settings::default(),
        };
        Ok(base.overlay(flags).resolve())
    }
}

impl RunConfig {
    pub fn gate_placements(&self) -> Result<std::collections::BTreeSet<GatePlacement>> {
        parse_gate_list(&self.gates).context("gates")
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            gate_placements: self.gate_placements()?,
            include_final_fc: self.include_final_fc,
            embedding_dim: self.embedding_dim,
            p_init: self.p_init,
            gate_gradient: self.gate_gradient,
            normalize_embedding: self.normalize_embedding,
            ..NetworkConfig::baseline()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn training(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            margin: self.margin,
            optimizer: RmsPropConfig {
                learning_rate: self.learning_rate,
                decay: self.rmsprop_decay,
                epsilon: self.rmsprop_epsilon,
                lr_decay_per_epoch: self.lr_decay,
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_iterations: (self.max_iterations > 0).then_some(self.max_iterations),
            pairs: PairConfig {
                augment: self.augment,
                translate_fraction: self.translate_fraction,
                negatives_per_positive: self.negatives_per_positive,
                same_camera_positives: self.same_camera_positives,
            },
            val_fraction: self.val_fraction,
            early_stop_patience: self.early_stop_patience,
            early_stop_min_delta: self.early_stop_min_delta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The manifest path, which must be given.
    pub fn manifest_path(&self) -> Result<&Path> {
        if self.manifest.as_os_str().is_empty() {
            bail!("no manifest given (set --manifest or `manifest` in the config file)");
        }
        if !self.manifest.is_file() {
            bail!("manifest {} does not exist", self.manifest.display());
        }
        Ok(&self.manifest)
    }

    /// `data_root`, else the environment variable, else the manifest's directory.
    pub fn dataset_root(&self) -> PathBuf {
        if !self.data_root.as_os_str().is_empty() {
            return self.data_root.clone();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
