//! JSON bodies of the remote logit protocol.
//!
//! | route                  | request                                   | response                     |
//! |------------------------|-------------------------------------------|------------------------------|
//! | `GET /v1/descriptor`   |                                           | [`ProviderDescriptor`]        |
//! | `POST /v1/logits`      | `{"context":[int,...]}`                   | `{"logits":[float,...]}`     |
//! | `POST /v1/generate`    | `{"prompt":str,"temperature":float,"max_tokens":int}` | `{"text":str}`   |
//! | `POST /v1/tokenize`    | `{"text":str}`                            | `{"tokens":[int,...]}`       |
//! | `POST /v1/detokenize`  | `{"tokens":[int,...]}`                    | `{"text":str}`               |
//!
//! Every non-200 response carries `{"error":str}`. Floats are written in the
//! shortest decimal form that parses back to the same IEEE-754 double.
//!
//! [`ProviderDescriptor`]: super::ProviderDescriptor

use serde::{Deserialize, Serialize};

use super::TokenId;

pub const DESCRIPTOR_PATH: &str = "/v1/descriptor";
pub const LOGITS_PATH: &str = "/v1/logits";
pub const GENERATE_PATH: &str = "/v1/generate";
pub const TOKENIZE_PATH: &str = "/v1/tokenize";
pub const DETOKENIZE_PATH: &str = "/v1/detokenize";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitsRequest {
    pub context: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetokenizeRequest {
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}
