use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{
    DetokenizeRequest, DetokenizeResponse, ErrorBody, GenerateRequest, GenerateResponse, LogitsRequest,
    LogitsResponse, TokenizeRequest, TokenizeResponse, DESCRIPTOR_PATH, DETOKENIZE_PATH, GENERATE_PATH, LOGITS_PATH,
    TOKENIZE_PATH,
};
use super::{BackendError, LogitProvider, ProviderDescriptor, TextGenerator, TokenContext, TokenId, Tokenizer};

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    /// Extra attempts after a transport failure. HTTP error statuses are not retried.
    pub retries: u32,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub backoff: Duration,
    /// Sent as a bearer token when set.
    pub api_key: Option<String>,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            retries: 2,
            timeout: Duration::from_secs(60),
            max_in_flight: 8,
            backoff: Duration::from_millis(50),
            api_key: None,
        }
    }
}

/// HTTP client for one backend base URL, shared by the provider, tokenizer
/// and generator views of that backend.
pub struct RemoteClient {
    base: String,
    agent: ureq::Agent,
    opts: RemoteOptions,
    permits_tx: Sender<()>,
    permits_rx: Receiver<()>,
}

impl RemoteClient {
    pub fn new(base_url: &str, opts: RemoteOptions) -> Arc<Self> {
        let n = opts.max_in_flight.max(1);
        let (permits_tx, permits_rx) = bounded(n);
        for _ in 0..n {
            permits_tx.send(()).expect("fresh channel has room");
        }
        let agent = ureq::AgentBuilder::new().timeout(opts.timeout).build();
        Arc::new(Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            opts,
            permits_tx,
            permits_rx,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn call<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<R, BackendError> {
        let url = format!("{}{}", self.base, path);
        // blocks while max_in_flight requests are outstanding
        self.permits_rx.recv().expect("permit channel lives as long as the client");
        let result = self.call_with_retry(&url, body);
        let _ = self.permits_tx.send(());
        result
    }

    fn call_with_retry<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: Option<&B>) -> Result<R, BackendError> {
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let req = match body {
                Some(_) => self.agent.post(url),
                None => self.agent.get(url),
            };
            let req = match &self.opts.api_key {
                Some(key) => req.set("Authorization", &format!("Bearer {key}")),
                None => req,
            };
            let resp = match body {
                Some(b) => req.send_json(b),
                None => req.call(),
            };
            match resp {
                Ok(r) => {
                    return r
                        .into_json::<R>()
                        .map_err(|e| BackendError::Protocol(format!("malformed response from {url}: {e}")));
                }
                Err(ureq::Error::Status(status, r)) => {
                    let message = match r.into_string() {
                        Ok(text) => serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text),
                        Err(e) => format!("unreadable error body: {e}"),
                    };
                    return Err(BackendError::Remote {
                        endpoint: url.to_string(),
                        status,
                        message,
                    });
                }
                Err(ureq::Error::Transport(t)) => {
                    if attempts > self.opts.retries {
                        return Err(BackendError::Transport {
                            endpoint: url.to_string(),
                            attempts,
                            message: t.to_string(),
                        });
                    }
                    log::debug!("transport failure on {url} (attempt {attempts}): {t}");
                    std::thread::sleep(self.opts.backoff * attempts);
                }
            }
        }
    }

    pub fn fetch_descriptor(&self) -> Result<ProviderDescriptor, BackendError> {
        let d: ProviderDescriptor = self.call::<(), _>(DESCRIPTOR_PATH, None)?;
        d.validate()?;
        Ok(d)
    }

    pub fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>, BackendError> {
        let resp: LogitsResponse = self.call(
            LOGITS_PATH,
            Some(&LogitsRequest {
                context: context.to_vec(),
            }),
        )?;
        Ok(resp.logits)
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<String, BackendError> {
        let resp: GenerateResponse = self.call(GENERATE_PATH, Some(req))?;
        Ok(resp.text)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let resp: TokenizeResponse = self.call(TOKENIZE_PATH, Some(&TokenizeRequest { text: text.to_string() }))?;
        Ok(resp.tokens)
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        let resp: DetokenizeResponse = self.call(
            DETOKENIZE_PATH,
            Some(&DetokenizeRequest {
                tokens: tokens.to_vec(),
            }),
        )?;
        Ok(resp.text)
    }
}

/// Logit provider served over HTTP. The descriptor is fetched once at connect time.
pub struct RemoteProvider {
    client: Arc<RemoteClient>,
    descriptor: ProviderDescriptor,
}

impl RemoteProvider {
    pub fn connect(client: Arc<RemoteClient>) -> Result<Self, BackendError> {
        let descriptor = client.fetch_descriptor()?;
        Ok(Self { client, descriptor })
    }

    pub fn client(&self) -> &Arc<RemoteClient> {
        &self.client
    }
}

impl LogitProvider for RemoteProvider {
    fn descriptor(&self) -> &ProviderDescriptor {
        &self.descriptor
    }

    fn logits(&self, ctx: &TokenContext) -> Result<Vec<f64>, BackendError> {
        self.client.logits(&ctx.tokens)
    }
}

pub struct RemoteTokenizer {
    client: Arc<RemoteClient>,
    fingerprint: String,
}

impl RemoteTokenizer {
    pub fn new(client: Arc<RemoteClient>, fingerprint: impl Into<String>) -> Self {
        Self {
            client,
            fingerprint: fingerprint.into(),
        }
    }
}

impl Tokenizer for RemoteTokenizer {
    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.client.tokenize(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        self.client.detokenize(tokens)
    }
}

pub struct RemoteGenerator {
    client: Arc<RemoteClient>,
}

impl RemoteGenerator {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        Self { client }
    }
}

impl TextGenerator for RemoteGenerator {
    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<String, BackendError> {
        self.client.generate(&GenerateRequest {
            prompt: prompt.to_string(),
            temperature,
            max_tokens,
        })
    }
}
