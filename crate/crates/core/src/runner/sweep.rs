use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{parse_ratio, ExperimentConfig, MixConfig};
use super::RunError;

/// Values to sweep over. Empty lists leave the base value in place.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    #[serde(default)]
    pub k: Vec<usize>,
    #[serde(default)]
    pub ratio: Vec<String>,
}

/// A sweep file: a base experiment config plus the axes to expand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub base: PathBuf,
    pub axes: SweepAxes,
}

impl SweepFile {
    pub fn load(path: &Path) -> Result<(ExperimentConfig, SweepAxes), RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let file: SweepFile = toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let base = if file.base.is_relative() { dir.join(&file.base) } else { file.base };
        Ok((ExperimentConfig::load(&base)?, file.axes))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub name: String,
    pub config: ExperimentConfig,
}

fn axis<T: Clone>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().cloned().map(Some).collect()
    }
}

/// Cartesian product of the axes in the order alpha, beta, k, ratio. Each
/// run writes under `<base output_dir>/<name>`.
pub fn expand_sweep(base: &ExperimentConfig, axes: &SweepAxes) -> Result<Vec<SweepRun>, RunError> {
    for r in &axes.ratio {
        parse_ratio(r).map_err(RunError::Config)?;
    }
    let mut runs = Vec::new();
    for alpha in axis(&axes.alpha) {
        for beta in axis(&axes.beta) {
            for k in axis(&axes.k) {
                for ratio in axis(&axes.ratio) {
                    let mut cfg = base.clone();
                    let mut parts = Vec::new();
                    if let Some(a) = alpha {
                        cfg.alpha = a;
                        parts.push(format!("alpha={a}"));
                    }
                    if let Some(b) = beta {
                        cfg.beta = b;
                        parts.push(format!("beta={b}"));
                    }
                    if let Some(k) = k {
                        cfg.k = k;
                        parts.push(format!("k={k}"));
                    }
                    if let Some(r) = &ratio {
                        cfg.mix = MixConfig {
                            ratio: Some(r.clone()),
                            ..MixConfig::default()
                        };
                        parts.push(format!("ratio={}", r.replace(':', "-")));
                    }
                    let name = if parts.is_empty() { "base".to_string() } else { parts.join("_") };
                    cfg.output_dir = base.output_dir.join(&name);
                    runs.push(SweepRun { name, config: cfg });
                }
            }
        }
    }
    Ok(runs)
}
