use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::{BackendSpec, BackendsConfig};
use super::RunError;
use crate::backends::{
    BackendError, BigramProvider, CountingProvider, EchoGenerator, LogitProvider, RemoteClient, RemoteGenerator,
    RemoteOptions, RemoteProvider, RemoteTokenizer, TableFile, TableProvider, TextGenerator, Tokenizer,
};
use crate::decoder::{GreedyTextGenerator, Model};

/// Environment variable holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "KCONFLICT_API_KEY";

type Counted = Arc<CountingProvider<Arc<dyn LogitProvider>>>;

enum Built {
    Logits {
        provider: Arc<dyn LogitProvider>,
        tokenizer: Arc<dyn Tokenizer>,
        remote: Option<Arc<RemoteClient>>,
    },
    Generator(Arc<dyn TextGenerator>),
}

fn remote_options() -> RemoteOptions {
    RemoteOptions {
        api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        ..RemoteOptions::default()
    }
}

fn build(spec: &BackendSpec) -> Result<Built, BackendError> {
    match spec {
        BackendSpec::Http(url) => {
            let client = RemoteClient::new(url, remote_options());
            // connecting fetches the descriptor, which doubles as the startup probe
            let provider = RemoteProvider::connect(Arc::clone(&client))?;
            let fp = provider.descriptor().tokenizer_fingerprint.clone();
            Ok(Built::Logits {
                provider: Arc::new(provider),
                tokenizer: Arc::new(RemoteTokenizer::new(Arc::clone(&client), fp)),
                remote: Some(client),
            })
        }
        BackendSpec::Bigram(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| BackendError::Usage(format!("cannot read corpus {}: {e}", path.display())))?;
            let (tok, model) = BigramProvider::from_corpus(&text)?;
            Ok(Built::Logits {
                provider: Arc::new(model),
                tokenizer: Arc::new(tok),
                remote: None,
            })
        }
        BackendSpec::Table(path) => {
            let file = TableFile::read(path)?;
            let tok = file.tokenizer()?.ok_or_else(|| {
                BackendError::Usage(format!("table {} has no vocab, so prompts cannot be tokenized", path.display()))
            })?;
            Ok(Built::Logits {
                provider: Arc::new(TableProvider::from_file(file)?),
                tokenizer: Arc::new(tok),
                remote: None,
            })
        }
        BackendSpec::Echo => Ok(Built::Generator(Arc::new(EchoGenerator))),
    }
}

/// The backends one experiment talks to, each logit role wrapped in a call counter.
pub struct Backends {
    pub expert: Option<Model>,
    pub internal: Option<Model>,
    pub amateur: Option<Model>,
    pub generation: Option<Arc<dyn TextGenerator>>,
    counters: Vec<(String, Counted)>,
}

impl Backends {
    pub fn connect(cfg: &BackendsConfig) -> Result<Self, RunError> {
        let mut cache: BTreeMap<BackendSpec, Built> = BTreeMap::new();
        let mut counters = Vec::new();
        let mut logit_role = |role: &str, spec: &Option<BackendSpec>| -> Result<Option<Model>, RunError> {
            let Some(spec) = spec else {
                return Ok(None);
            };
            if !cache.contains_key(spec) {
                let built = build(spec).map_err(|e| RunError::Backend(format!("{role} ({spec}): {e}")))?;
                cache.insert(spec.clone(), built);
            }
            match &cache[spec] {
                Built::Logits { provider, tokenizer, .. } => {
                    let counted: Counted = Arc::new(CountingProvider::new(Arc::clone(provider)));
                    counters.push((role.to_string(), Arc::clone(&counted)));
                    let model = Model::new(counted, Arc::clone(tokenizer))
                        .map_err(|e| RunError::Backend(format!("{role} ({spec}): {e}")))?;
                    Ok(Some(model))
                }
                Built::Generator(_) => Err(RunError::Config(format!("{role} ({spec}) cannot provide logits"))),
            }
        };
        let expert = logit_role("expert", &cfg.expert)?;
        let internal = logit_role("internal", &cfg.internal)?;
        let amateur = logit_role("amateur", &cfg.amateur)?;
        let generation = match &cfg.generation {
            None => None,
            Some(spec) => {
                let built = match cache.remove(spec) {
                    Some(b) => b,
                    None => build(spec).map_err(|e| RunError::Backend(format!("generation ({spec}): {e}")))?,
                };
                Some(match built {
                    Built::Generator(g) => g,
                    Built::Logits {
                        remote: Some(client), ..
                    } => Arc::new(RemoteGenerator::new(client)) as Arc<dyn TextGenerator>,
                    Built::Logits {
                        provider, tokenizer, ..
                    } => Arc::new(GreedyTextGenerator { provider, tokenizer }),
                })
            }
        };
        Ok(Self {
            expert,
            internal,
            amateur,
            generation,
            counters,
        })
    }

    /// Wraps already-built models, e.g. in-process toy providers.
    pub fn from_models(expert: Model, internal: Option<Model>, amateur: Option<Model>) -> Self {
        let mut counters = Vec::new();
        let mut wrap = |role: &str, m: Model| {
            let counted: Counted = Arc::new(CountingProvider::new(m.provider));
            counters.push((role.to_string(), Arc::clone(&counted)));
            Model {
                provider: counted,
                tokenizer: m.tokenizer,
            }
        };
        let expert = Some(wrap("expert", expert));
        let internal = internal.map(|m| wrap("internal", m));
        let amateur = amateur.map(|m| wrap("amateur", m));
        Self {
            expert,
            internal,
            amateur,
            generation: None,
            counters,
        }
    }

    /// `logits` calls per role so far.
    pub fn call_counts(&self) -> BTreeMap<String, u64> {
        self.counters.iter().map(|(r, c)| (r.clone(), c.calls())).collect()
    }
}
