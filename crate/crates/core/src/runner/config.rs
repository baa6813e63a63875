use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::corpus::ConflictMixSpec;
use crate::prompt::{template_text, DEFAULT_TEMPLATE};

/// Where a backend role is served from.
///
/// Written in config files as `http://host:port`, `bigram:<corpus.txt>`,
/// `table:<table.json>` or `echo`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Http(String),
    Bigram(PathBuf),
    Table(PathBuf),
    Echo,
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.starts_with("http://") || s.starts_with("https://") {
            Ok(BackendSpec::Http(s.to_string()))
        } else if let Some(p) = s.strip_prefix("bigram:") {
            Ok(BackendSpec::Bigram(PathBuf::from(p)))
        } else if let Some(p) = s.strip_prefix("table:") {
            Ok(BackendSpec::Table(PathBuf::from(p)))
        } else if s == "echo" {
            Ok(BackendSpec::Echo)
        } else {
            Err(format!(
                "unrecognised backend {s:?}; expected http(s)://..., bigram:<path>, table:<path> or echo"
            ))
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        b.to_string()
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Http(u) => f.write_str(u),
            BackendSpec::Bigram(p) => write!(f, "bigram:{}", p.display()),
            BackendSpec::Table(p) => write!(f, "table:{}", p.display()),
            BackendSpec::Echo => f.write_str("echo"),
        }
    }
}

impl BackendSpec {
    fn resolve(&mut self, base: &Path) {
        match self {
            BackendSpec::Bigram(p) | BackendSpec::Table(p) if p.is_relative() => *p = base.join(&*p),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub expert: Option<BackendSpec>,
    pub internal: Option<BackendSpec>,
    pub amateur: Option<BackendSpec>,
    pub generation: Option<BackendSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ClosedBook,
    InContext,
    Cd2InternalExternal,
    Cd2ExpertAmateur,
}

impl Mode {
    pub fn uses_evidence(&self) -> bool {
        !matches!(self, Mode::ClosedBook)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::ClosedBook => "closed_book",
            Mode::InContext => "in_context",
            Mode::Cd2InternalExternal => "cd2_internal_external",
            Mode::Cd2ExpertAmateur => "cd2_expert_amateur",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "closed_book" => Ok(Mode::ClosedBook),
            "in_context" => Ok(Mode::InContext),
            "cd2_internal_external" => Ok(Mode::Cd2InternalExternal),
            "cd2_expert_amateur" => Ok(Mode::Cd2ExpertAmateur),
            other => Err(format!(
                "unknown mode {other:?}; expected closed_book, in_context, cd2_internal_external or cd2_expert_amateur"
            )),
        }
    }
}

/// Evidence composition: explicit counts or a `truthful:misleading` ratio.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truthful: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub misleading: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub irrelevant: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<String>,
}

pub fn parse_ratio(s: &str) -> Result<(u32, u32), String> {
    let (t, m) = s.split_once(':').ok_or_else(|| format!("ratio {s:?} is not of the form t:m"))?;
    let t = t.trim().parse().map_err(|_| format!("bad truthful part in ratio {s:?}"))?;
    let m = m.trim().parse().map_err(|_| format!("bad misleading part in ratio {s:?}"))?;
    Ok((t, m))
}

impl MixConfig {
    /// Counts for `k` docs. Without any setting, all `k` docs are truthful;
    /// with counts, an omitted irrelevant count takes up the remainder.
    pub fn resolve(&self, k: usize, seed: u64) -> Result<ConflictMixSpec, String> {
        if let Some(r) = &self.ratio {
            if self.truthful.is_some() || self.misleading.is_some() || self.irrelevant.is_some() {
                return Err("mix.ratio cannot be combined with explicit counts".into());
            }
            let (t, m) = parse_ratio(r)?;
            return ConflictMixSpec::from_ratio(k, t, m, seed).map_err(|e| e.to_string());
        }
        let (t, m) = match (self.truthful, self.misleading) {
            (None, None) if self.irrelevant.is_none() => (k, 0),
            (t, m) => (t.unwrap_or(0), m.unwrap_or(0)),
        };
        let i = match self.irrelevant {
            Some(i) => i,
            None => k
                .checked_sub(t + m)
                .ok_or_else(|| format!("truthful {t} + misleading {m} exceeds K = {k}"))?,
        };
        if t + m + i != k {
            return Err(format!("mix counts {t} + {m} + {i} do not add up to K = {k}"));
        }
        Ok(ConflictMixSpec::new(t, m, i, seed))
    }
}

fn default_seed() -> u64 {
    0
}
fn default_template() -> String {
    DEFAULT_TEMPLATE.to_string()
}
fn default_alpha() -> f64 {
    0.5
}
fn default_beta() -> f64 {
    0.5
}
fn default_max_len() -> usize {
    32
}
fn default_workers() -> usize {
    4
}
fn default_ceiling() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// A complete experiment description, loaded from TOML.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    /// Number of evaluation items. Required; there is no default.
    pub sample_size: usize,
    pub mode: Mode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Demonstrations per prompt (M).
    #[serde(default)]
    pub demos: usize,
    #[serde(default = "default_template")]
    pub template: String,
    /// Evidence docs per prompt (K). Ignored in closed-book mode.
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Largest tolerated fraction of failed items.
    #[serde(default = "default_ceiling")]
    pub failure_ceiling: f64,
    /// Whether the internal (evidence-free) context also carries the demonstrations.
    #[serde(default = "default_true")]
    pub internal_demos: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactuals: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifests: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<PathBuf>,
    /// Newline-separated entity names for substitution counterfactuals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_pool: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub backends: BackendsConfig,
}

pub const USUAL_DEMOS: [usize; 3] = [4, 8, 16];
pub const USUAL_K: [usize; 4] = [3, 5, 10, 20];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        for p in [&mut self.counterfactuals, &mut self.manifests, &mut self.memory, &mut self.entity_pool]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for b in [
            &mut self.backends.expert,
            &mut self.backends.internal,
            &mut self.backends.amateur,
            &mut self.backends.generation,
        ]
        .into_iter()
        .flatten()
        {
            b.resolve(base);
        }
    }

    pub fn mix_spec(&self) -> Result<ConflictMixSpec, RunError> {
        self.mix.resolve(self.k, self.seed).map_err(RunError::Config)
    }

    /// Checks the invariants and returns warnings for unusual but accepted values.
    pub fn validate(&self) -> Result<Vec<String>, RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        let mut warnings = Vec::new();
        if self.sample_size == 0 {
            return bad("sample_size must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.failure_ceiling) {
            return bad(format!("failure_ceiling must lie in [0, 1], got {}", self.failure_ceiling));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.top_k == Some(0) {
            return bad("top_k must be positive when set".into());
        }
        template_text(&self.template).map_err(|e| RunError::Config(e.to_string()))?;
        if !USUAL_DEMOS.contains(&self.demos) {
            warnings.push(format!("M = {} demonstrations is outside the usual {{4, 8, 16}}", self.demos));
        }
        if self.mode.uses_evidence() {
            if self.k == 0 {
                return bad(format!("mode {} needs k > 0", self.mode.as_str()));
            }
            if !USUAL_K.contains(&self.k) {
                warnings.push(format!("K = {} is outside the usual {{3, 5, 10, 20}}", self.k));
            }
            if self.manifests.is_none() {
                self.mix_spec()?;
            }
        }
        let need = |role: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(RunError::Config(format!(
                    "mode {} requires backends.{role}",
                    self.mode.as_str()
                )))
            }
        };
        need("expert", self.backends.expert.is_some())?;
        match self.mode {
            Mode::Cd2InternalExternal => need("internal", self.backends.internal.is_some())?,
            Mode::Cd2ExpertAmateur => need("amateur", self.backends.amateur.is_some())?,
            _ => {}
        }
        if self.backends.expert == Some(BackendSpec::Echo) {
            return bad("echo can only serve the generation role".into());
        }
        Ok(warnings)
    }
}
