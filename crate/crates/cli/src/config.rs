//! Run configuration files (TOML) and dataset resolution.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ror_core::arch::ArchSpec;
use ror_core::data::{assign_folds, load_manifest, synth_dataset, Dataset, LabelField, SynthConfig};
use ror_core::objective::LabelSpace;
use ror_core::trainer::{OptimConfig, PipelineStage};
use serde::Deserialize;

use crate::CliError;

/// Architecture given inline or as a path to a spec file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ArchRef {
    Path(PathBuf),
    Inline(ArchSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    #[serde(default)]
    pub val_synthetic: Option<SynthConfig>,
    /// Subject-exclusive folds over the training data; `fold` is held out.
    #[serde(default)]
    pub folds: Option<usize>,
    #[serde(default)]
    pub fold: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub arch: ArchRef,
    pub datasets: BTreeMap<String, DatasetConfig>,
    pub stages: Vec<PipelineStage>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveRunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub arch: ArchRef,
    pub optim: OptimConfig,
    #[serde(default)]
    pub drop_p_last: Option<f64>,
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    pub dataset: DatasetConfig,
}

fn default_classes() -> usize {
    8
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Relative paths in a config are taken from the config's directory.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_arch(arch: &ArchRef, base: &Path) -> Result<(ArchSpec, Option<PathBuf>), CliError> {
    match arch {
        ArchRef::Path(p) => {
            let path = resolve(base, p);
            let text = fs::read_to_string(&path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            let spec = ArchSpec::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            Ok((spec, Some(path)))
        }
        ArchRef::Inline(spec) => {
            spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
            Ok((spec.clone(), None))
        }
    }
}

pub struct Split {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub inputs: Vec<PathBuf>,
}

fn one_source(
    manifest: &Option<PathBuf>,
    synthetic: &Option<SynthConfig>,
    base: &Path,
    what: &str,
    inputs: &mut Vec<PathBuf>,
) -> Result<Option<Dataset>, CliError> {
    match (manifest, synthetic) {
        (Some(_), Some(_)) => Err(CliError::usage(format!("{what}: give either a manifest or a synthetic config, not both"))),
        (Some(m), None) => {
            let path = resolve(base, m);
            let ds = load_manifest(&path).map_err(|e| CliError::usage(e.to_string()))?;
            inputs.push(path);
            Ok(Some(ds))
        }
        (None, Some(cfg)) => Ok(Some(synth_dataset(cfg).map_err(|e| CliError::usage(e.to_string()))?.dataset)),
        (None, None) => Ok(None),
    }
}

impl DatasetConfig {
    pub fn load(&self, name: &str, base: &Path, seed: u64) -> Result<Split, CliError> {
        let mut inputs = Vec::new();
        let train = one_source(&self.manifest, &self.synthetic, base, name, &mut inputs)?
            .ok_or_else(|| CliError::usage(format!("dataset `{name}` needs `manifest` or `synthetic`")))?;
        let val = one_source(&self.val_manifest, &self.val_synthetic, base, name, &mut inputs)?;
        match (self.folds, val) {
            (Some(_), Some(_)) => Err(CliError::usage(format!("dataset `{name}`: `folds` and a validation source exclude each other"))),
            (Some(n), None) => {
                if self.fold >= n {
                    return Err(CliError::usage(format!("dataset `{name}`: fold {} outside 0..{n}", self.fold)));
                }
                let folds = assign_folds(&train, n, seed).map_err(|e| CliError::usage(e.to_string()))?;
                let (tr, va) = folds.split(&train, self.fold);
                Ok(Split {
                    val: Some(train.subset(&va)),
                    train: train.subset(&tr),
                    inputs,
                })
            }
            (None, val) => Ok(Split { train, val, inputs }),
        }
    }
}

/// Age groups are ordered; anything else is treated as unordered.
pub fn label_space(field: LabelField, classes: usize) -> LabelSpace {
    match field {
        LabelField::Age => LabelSpace::ordered(classes),
        LabelField::Gender => LabelSpace::unordered(classes),
    }
}
