use std::path::{Path, PathBuf};

use atlasflow_core::synth::{ManifoldKind, ManifoldSpec};
use atlasflow_core::TrainConfig;
use serde::Deserialize;
use serde_json::Value;

use crate::CliError;

/// Named hyperparameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Torus,
    Trefoil,
    Stylegan,
}

impl Preset {
    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Torus => TrainConfig::torus(),
            Preset::Trefoil => TrainConfig::trefoil(),
            Preset::Stylegan => TrainConfig::stylegan(2),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub manifold: Option<String>,
    pub n: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    pub data: Option<PathBuf>,
    pub cover: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Contents of a `--config` file. `train` holds any subset of the training
/// configuration and is layered over the preset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    preset: Option<Preset>,
    #[serde(default)]
    dataset: DatasetSection,
    #[serde(default)]
    outputs: Outputs,
    train: Option<Value>,
}

/// A resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSection,
    pub outputs: Outputs,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Preset values, overridden by the file when one is given. A preset
    /// named on the command line wins over one named in the file.
    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::other(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<RunFile>(&text).map_err(|e| CliError::other(format!("{}: {e}", p.display())))?
            }
            None => RunFile::default(),
        };
        let preset = preset.or(file.preset).unwrap_or(Preset::Torus);
        let mut value = serde_json::to_value(preset.train_config()).expect("config serialises");
        let file_seed = file.train.as_ref().is_some_and(|t| t.get("seed").is_some());
        if !file_seed {
            value["seed"] = default_seed()?.into();
        }
        if let Some(t) = file.train {
            merge(&mut value, t);
        }
        let train: TrainConfig = serde_json::from_value(value).map_err(|e| CliError::other(format!("train section: {e}")))?;
        Ok(RunConfig {
            train,
            dataset: file.dataset,
            outputs: file.outputs,
        })
    }
}

pub fn parse_manifold(name: &str) -> Result<ManifoldKind, CliError> {
    match name.to_ascii_lowercase().as_str() {
        "torus" => Ok(ManifoldKind::Torus),
        "trefoil" => Ok(ManifoldKind::Trefoil),
        _ => Err(CliError::new(
            2,
            format!("unknown manifold '{name}'; valid manifolds are: torus, trefoil"),
        )),
    }
}

pub fn manifold_spec(kind: ManifoldKind, n: usize, noise: f64, seed: u64) -> ManifoldSpec {
    let mut spec = match kind {
        ManifoldKind::Torus => ManifoldSpec::torus(n, seed),
        ManifoldKind::Trefoil => ManifoldSpec::trefoil(n, seed),
    };
    spec.noise_sigma = noise;
    spec
}

/// Seed from `ATLASFLOW_SEED`, or 0.
pub fn default_seed() -> Result<u64, CliError> {
    match std::env::var("ATLASFLOW_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::other(format!("ATLASFLOW_SEED must be an unsigned integer, got '{s}'"))),
        Err(_) => Ok(0),
    }
}
