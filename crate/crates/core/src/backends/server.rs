//! Reference HTTP server for the logit protocol, backed by in-process providers.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{
    DetokenizeRequest, DetokenizeResponse, ErrorBody, GenerateRequest, GenerateResponse, LogitsRequest,
    LogitsResponse, TokenizeRequest, TokenizeResponse, DESCRIPTOR_PATH, DETOKENIZE_PATH, GENERATE_PATH, LOGITS_PATH,
    TOKENIZE_PATH,
};
use super::{generate_text, next_logits, BackendError, LogitProvider, TextGenerator, TokenContext, Tokenizer};

/// The roles a mock server answers for. Routes for missing roles return 501.
#[derive(Clone, Default)]
pub struct ServedBackend {
    pub provider: Option<Arc<dyn LogitProvider>>,
    pub tokenizer: Option<Arc<dyn Tokenizer>>,
    pub generator: Option<Arc<dyn TextGenerator>>,
}

/// One received request: method, path and raw body.
pub type RequestRecord = (String, String, String);

pub struct MockServer {
    addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    log: Arc<Mutex<Vec<RequestRecord>>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves on `threads` workers.
    pub fn start(addr: &str, backend: ServedBackend, threads: usize) -> Result<Self, BackendError> {
        let server = Server::http(addr).map_err(|e| BackendError::Transport {
            endpoint: addr.to_string(),
            attempts: 1,
            message: e.to_string(),
        })?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| BackendError::Usage("server is not bound to an IP address".into()))?;
        let server = Arc::new(server);
        let backend = Arc::new(backend);
        let log = Arc::new(Mutex::new(Vec::new()));
        let workers = (0..threads.max(1))
            .map(|_| {
                let server = Arc::clone(&server);
                let backend = Arc::clone(&backend);
                let log = Arc::clone(&log);
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(req, &backend, &log);
                    }
                })
            })
            .collect();
        Ok(Self {
            addr,
            server,
            workers,
            log,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.log.lock().expect("request log poisoned").clone()
    }

    /// Serves until the process exits.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop();
    }
}

type Reply = (u16, String);

fn json<T: Serialize>(status: u16, body: &T) -> Reply {
    (status, serde_json::to_string(body).expect("wire bodies serialize"))
}

fn error(status: u16, message: impl Into<String>) -> Reply {
    json(status, &ErrorBody { error: message.into() })
}

fn backend_error(e: BackendError) -> Reply {
    match e {
        BackendError::OutOfVocab { .. } | BackendError::Usage(_) => error(400, e.to_string()),
        _ => error(500, e.to_string()),
    }
}

fn parse<T: DeserializeOwned>(body: &str) -> Result<T, Reply> {
    serde_json::from_str(body).map_err(|e| error(400, format!("malformed request body: {e}")))
}

fn route(method: &Method, path: &str, body: &str, backend: &ServedBackend) -> Reply {
    let unavailable = |role: &str| error(501, format!("this server has no {role} backend"));
    match (method, path) {
        (Method::Get, DESCRIPTOR_PATH) => match &backend.provider {
            Some(p) => json(200, p.descriptor()),
            None => unavailable("logit"),
        },
        (Method::Post, LOGITS_PATH) => {
            let Some(p) = &backend.provider else {
                return unavailable("logit");
            };
            let req: LogitsRequest = match parse(body) {
                Ok(r) => r,
                Err(reply) => return reply,
            };
            match next_logits(p.as_ref(), &TokenContext::new(req.context)) {
                Ok(v) => json(200, &LogitsResponse { logits: v.scores }),
                Err(e) => backend_error(e),
            }
        }
        (Method::Post, GENERATE_PATH) => {
            let Some(g) = &backend.generator else {
                return unavailable("generation");
            };
            let req: GenerateRequest = match parse(body) {
                Ok(r) => r,
                Err(reply) => return reply,
            };
            match generate_text(g.as_ref(), &req.prompt, req.temperature, req.max_tokens) {
                Ok(text) => json(200, &GenerateResponse { text }),
                Err(e) => backend_error(e),
            }
        }
        (Method::Post, TOKENIZE_PATH) => {
            let Some(t) = &backend.tokenizer else {
                return unavailable("tokenizer");
            };
            let req: TokenizeRequest = match parse(body) {
                Ok(r) => r,
                Err(reply) => return reply,
            };
            match t.encode(&req.text) {
                Ok(tokens) => json(200, &TokenizeResponse { tokens }),
                Err(e) => backend_error(e),
            }
        }
        (Method::Post, DETOKENIZE_PATH) => {
            let Some(t) = &backend.tokenizer else {
                return unavailable("tokenizer");
            };
            let req: DetokenizeRequest = match parse(body) {
                Ok(r) => r,
                Err(reply) => return reply,
            };
            match t.decode(&req.tokens) {
                Ok(text) => json(200, &DetokenizeResponse { text }),
                Err(e) => backend_error(e),
            }
        }
        (_, DESCRIPTOR_PATH | LOGITS_PATH | GENERATE_PATH | TOKENIZE_PATH | DETOKENIZE_PATH) => {
            error(405, format!("method {method} not allowed on {path}"))
        }
        _ => error(404, format!("no route for {path}")),
    }
}

fn handle(mut req: Request, backend: &ServedBackend, log: &Mutex<Vec<RequestRecord>>) {
    let mut body = String::new();
    let (status, text) = match req.as_reader().read_to_string(&mut body) {
        Ok(_) => {
            let path = req.url().split('?').next().unwrap_or("").to_string();
            log.lock()
                .expect("request log poisoned")
                .push((req.method().to_string(), path.clone(), body.clone()));
            route(req.method(), &path, &body, backend)
        }
        Err(e) => error(400, format!("unreadable body: {e}")),
    };
    let header = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let resp = Response::from_string(text).with_status_code(status).with_header(header);
    if let Err(e) = req.respond(resp) {
        log::warn!("failed to send response: {e}");
    }
}
