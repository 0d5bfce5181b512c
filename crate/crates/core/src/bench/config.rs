use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::error::{IdpError, Result};
use crate::networks::{architecture, validate_ranges, ArchOptions, NetworkSpec, ProfileRange};
use crate::profiles::ProfileKind;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilesConfig {
    pub kind: ProfileKind,
    /// `[lo, hi]` pairs; each profile serves `(lo, hi]`.
    pub ranges: Vec<[f64; 2]>,
    pub clamp: bool,
}

impl Default for ProfilesConfig {
    fn default() -> Self {
        ProfilesConfig { kind: ProfileKind::Linear, ranges: vec![[0.0, 1.0]], clamp: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// IDP percentages.
    pub grid: Vec<f64>,
    /// Evaluate every profile at every grid point instead of the one whose range holds it.
    pub all_profiles: bool,
    /// Record forward wall time; without it the column is left empty and the CSV is reproducible.
    pub timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { grid: (1..=10).map(|i| (i * 10) as f64).collect(), all_profiles: false, timing: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/experiment") }
    }
}

/// One experiment: what to build, what to train it on, and where results go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub architecture: String,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub network: ArchOptions,
    #[serde(default)]
    pub profiles: ProfilesConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// The settings used when a config file names only the architecture.
    pub fn defaults_for(architecture: &str) -> Result<Self> {
        let arch = architecture_or_err(architecture)?;
        let dataset = arch.dataset();
        let mut train = TrainConfig::default();
        match architecture {
            "mlp" => train.weight_decay = 0.0,
            "vgg" | "mobilenet" => {
                train.epochs = 30;
                train.augment = true;
            }
            _ => {}
        }
        Ok(ExperimentConfig {
            architecture: architecture.to_string(),
            dataset,
            data_dir: PathBuf::from(match dataset {
                DatasetKind::Mnist => "data/mnist",
                DatasetKind::Cifar10 => "data/cifar-10-batches-bin",
            }),
            train_subset: None,
            test_subset: None,
            network: ArchOptions::default(),
            profiles: ProfilesConfig::default(),
            train,
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        })
    }

    /// Parses TOML over the architecture's defaults and validates the result.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| IdpError::config("<file>", e.message()))?;
        let arch = match user.get("architecture") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(IdpError::config("architecture", "must be a string")),
            None => return Err(IdpError::config("architecture", "missing")),
        };
        let defaults = Self::defaults_for(&arch)?;
        let mut merged = toml::Table::try_from(&defaults).map_err(|e| IdpError::State(format!("config defaults: {e}")))?;
        merge(&mut merged, user);
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| IdpError::config("<file>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| IdpError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Every setting, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config is representable in TOML")
    }

    pub fn ranges(&self) -> Result<Vec<ProfileRange>> {
        let ranges: Vec<ProfileRange> = self.profiles.ranges.iter().map(|&[lo, hi]| ProfileRange { lo, hi }).collect();
        validate_ranges(&ranges)?;
        Ok(ranges)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let arch = architecture_or_err(&self.architecture)?;
        arch.build(&self.network, self.profiles.kind).map_err(|e| match e {
            IdpError::Argument(m) => IdpError::config("network", m),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let arch = architecture_or_err(&self.architecture)?;
        if arch.dataset() != self.dataset {
            return Err(IdpError::config("dataset", format!("{} is built for {:?}", self.architecture, arch.dataset())));
        }
        let spec = self.network_spec()?;
        spec.validate()?;
        self.ranges()?;
        self.train.validate()?;
        validate_grid(&self.sweep.grid).map_err(|e| match e {
            IdpError::Argument(m) => IdpError::config("sweep.grid", m),
            other => other,
        })?;
        for (field, v) in [("train_subset", self.train_subset), ("test_subset", self.test_subset)] {
            if v == Some(0) {
                return Err(IdpError::config(field, "must be positive"));
            }
        }
        Ok(())
    }
}

fn architecture_or_err(name: &str) -> Result<&'static dyn crate::networks::Architecture> {
    architecture(name).map_err(|e| match e {
        IdpError::Config { message, .. } => IdpError::config("architecture", message),
        other => other,
    })
}

/// Grid points are percentages in `(0, 100]`.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(IdpError::argument("empty IDP grid"));
    }
    for &g in grid {
        if !(g > 0.0 && g <= 100.0) {
            return Err(IdpError::argument(format!("IDP percentage {g} is outside (0, 100]")));
        }
    }
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml("architecture = \"mlp\"\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.dataset, DatasetKind::Mnist);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.weight_decay, 0.0);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn overlapping_ranges_name_the_field() {
        let text = "architecture = \"mlp\"\n[profiles]\nranges = [[0.0, 0.5], [0.4, 1.0]]\n";
        match ExperimentConfig::from_toml(text) {
            Err(IdpError::Config { path, .. }) => assert_eq!(path, "profiles.ranges[1]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_grid() {
        assert!(matches!(ExperimentConfig::from_toml("architecture = \"mlp\"\nepoch = 3\n"), Err(IdpError::Config { .. })));
        assert!(matches!(ExperimentConfig::from_toml("architecture = \"resnet\"\n"), Err(IdpError::Config { .. })));
        let bad = "architecture = \"mlp\"\n[sweep]\ngrid = [0.0, 50.0]\n";
        assert!(matches!(ExperimentConfig::from_toml(bad), Err(IdpError::Config { path, .. }) if path == "sweep.grid"));
    }
}
