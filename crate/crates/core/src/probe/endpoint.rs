//! Completion endpoints that report per-token log-probabilities.
//!
//! [`HttpEndpoint`] speaks the OpenAI-compatible completion and chat
//! protocols served by most open inference runtimes (vLLM, llama.cpp
//! server, TGI, ...). Tests and the synthetic pipeline plug in their own
//! [`CompletionEndpoint`] implementations.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// One generation request. Decoding is always greedy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedToken {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    /// Model name as reported by the endpoint.
    pub model: String,
    pub tokens: Vec<GeneratedToken>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EndpointError {
    /// Connection, timeout or other transport failure.
    Transport(String),
    Status { code: u16, body: String },
    /// The endpoint cannot provide token log-probabilities.
    Capability(String),
    Malformed(String),
}

impl EndpointError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EndpointError::Transport(_) => true,
            EndpointError::Status { code, .. } => *code == 408 || *code == 429 || *code >= 500,
            EndpointError::Capability(_) | EndpointError::Malformed(_) => false,
        }
    }
}

impl std::fmt::Display for EndpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EndpointError::Transport(m) => write!(f, "transport error: {m}"),
            EndpointError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            EndpointError::Capability(m) => write!(f, "capability error: {m}"),
            EndpointError::Malformed(m) => write!(f, "malformed response: {m}"),
        }
    }
}

pub trait CompletionEndpoint: Send + Sync {
    /// Model name used in cache keys.
    fn model(&self) -> &str;

    /// The exact string the model sees for `prompt`, after any chat
    /// envelope has been applied.
    fn envelope(&self, prompt: &str) -> String {
        prompt.to_owned()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, EndpointError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApiStyle {
    #[default]
    Completions,
    Chat,
}

pub struct HttpEndpoint {
    agent: ureq::Agent,
    base_url: String,
    model: String,
    api: ApiStyle,
    api_key: Option<String>,
    system_prompt: Option<String>,
}

impl HttpEndpoint {
    pub fn new(base_url: &str, model: &str, api: ApiStyle, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
            base_url: base_url.trim_end_matches('/').to_owned(),
            model: model.to_owned(),
            api,
            api_key: None,
            system_prompt: None,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key.filter(|k| !k.is_empty());
        self
    }

    pub fn with_system_prompt(mut self, system: Option<String>) -> Self {
        self.system_prompt = system;
        self
    }

    fn messages(&self, prompt: &str) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &self.system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": prompt}));
        Value::Array(messages)
    }

    fn request_body(&self, request: &CompletionRequest) -> (String, Value) {
        match self.api {
            ApiStyle::Completions => (
                format!("{}/completions", self.base_url),
                json!({
                    "model": self.model,
                    "prompt": request.prompt,
                    "max_tokens": request.max_new_tokens,
                    "temperature": 0.0,
                    "logprobs": 1,
                    "stop": request.stop,
                }),
            ),
            ApiStyle::Chat => (
                format!("{}/chat/completions", self.base_url),
                json!({
                    "model": self.model,
                    "messages": self.messages(&request.prompt),
                    "max_tokens": request.max_new_tokens,
                    "temperature": 0.0,
                    "logprobs": true,
                    "stop": request.stop,
                }),
            ),
        }
    }
}

impl CompletionEndpoint for HttpEndpoint {
    fn model(&self) -> &str {
        &self.model
    }

    fn envelope(&self, prompt: &str) -> String {
        match self.api {
            ApiStyle::Completions => prompt.to_owned(),
            ApiStyle::Chat => self.messages(prompt).to_string(),
        }
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, EndpointError> {
        let (url, body) = self.request_body(request);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(EndpointError::Status { code, body: text });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| EndpointError::Malformed(e.to_string()))?;
        parse_response(self.api, &value, &self.model)
    }
}

/// Extracts generated tokens and their log-probabilities from a completion
/// or chat completion response body.
pub fn parse_response(api: ApiStyle, body: &Value, fallback_model: &str) -> Result<Completion, EndpointError> {
    let model = body
        .get("model")
        .and_then(Value::as_str)
        .unwrap_or(fallback_model)
        .to_owned();
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| EndpointError::Malformed("response has no choices".into()))?;
    let logprobs = match choice.get("logprobs") {
        Some(v) if !v.is_null() => v,
        _ => {
            return Err(EndpointError::Capability(
                "response carries no token log-probabilities".into(),
            ))
        }
    };
    let tokens = match api {
        ApiStyle::Completions => {
            let texts = logprobs.get("tokens").and_then(Value::as_array);
            let lps = logprobs.get("token_logprobs").and_then(Value::as_array);
            let (Some(texts), Some(lps)) = (texts, lps) else {
                return Err(EndpointError::Capability(
                    "logprobs object lacks tokens/token_logprobs".into(),
                ));
            };
            if texts.len() != lps.len() {
                return Err(EndpointError::Malformed(format!(
                    "{} tokens but {} logprobs",
                    texts.len(),
                    lps.len()
                )));
            }
            texts
                .iter()
                .zip(lps)
                .map(|(t, lp)| token(t, lp))
                .collect::<Result<Vec<_>, _>>()?
        }
        ApiStyle::Chat => {
            let content = logprobs.get("content").and_then(Value::as_array).ok_or_else(|| {
                EndpointError::Capability("chat logprobs lack a content array".into())
            })?;
            content
                .iter()
                .map(|entry| {
                    let t = entry.get("token").unwrap_or(&Value::Null);
                    let lp = entry.get("logprob").unwrap_or(&Value::Null);
                    token(t, lp)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok(Completion { model, tokens })
}

fn token(text: &Value, logprob: &Value) -> Result<GeneratedToken, EndpointError> {
    let text = text
        .as_str()
        .ok_or_else(|| EndpointError::Malformed(format!("token is not a string: {text}")))?;
    let logprob = logprob
        .as_f64()
        .ok_or_else(|| EndpointError::Malformed(format!("logprob is not a number: {logprob}")))?;
    Ok(GeneratedToken {
        text: text.to_owned(),
        logprob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_completion_logprobs() {
        let body = json!({
            "model": "m",
            "choices": [{"text": " China", "logprobs": {"tokens": [" Ch", "ina"], "token_logprobs": [-0.1, -0.2]}}]
        });
        let c = parse_response(ApiStyle::Completions, &body, "x").unwrap();
        assert_eq!(c.model, "m");
        assert_eq!(c.tokens.len(), 2);
        assert_eq!(c.tokens[1].text, "ina");
        assert_eq!(c.tokens[1].logprob, -0.2);
    }

    #[test]
    fn parses_chat_logprobs() {
        let body = json!({
            "choices": [{"message": {"content": "China"}, "logprobs": {"content": [{"token": "China", "logprob": -0.05, "top_logprobs": []}]}}]
        });
        let c = parse_response(ApiStyle::Chat, &body, "fallback").unwrap();
        assert_eq!(c.model, "fallback");
        assert_eq!(c.tokens[0].text, "China");
    }

    #[test]
    fn missing_logprobs_is_capability_error() {
        let body = json!({"choices": [{"text": "China", "logprobs": null}]});
        assert!(matches!(
            parse_response(ApiStyle::Completions, &body, "m"),
            Err(EndpointError::Capability(_))
        ));
        let body = json!({"choices": [{"message": {"content": "China"}}]});
        assert!(matches!(
            parse_response(ApiStyle::Chat, &body, "m"),
            Err(EndpointError::Capability(_))
        ));
    }

    #[test]
    fn chat_envelope_changes_cache_string() {
        let e = HttpEndpoint::new("http://127.0.0.1:1/v1", "m", ApiStyle::Chat, Duration::from_secs(1))
            .with_system_prompt(Some("be brief".into()));
        let env = e.envelope("hi");
        assert!(env.contains("\"system\"") && env.contains("\"hi\""));
        let plain = HttpEndpoint::new("http://127.0.0.1:1/v1", "m", ApiStyle::Completions, Duration::from_secs(1));
        assert_eq!(plain.envelope("hi"), "hi");
    }

    #[test]
    fn retryability() {
        assert!(EndpointError::Transport("x".into()).is_retryable());
        assert!(EndpointError::Status { code: 503, body: String::new() }.is_retryable());
        assert!(EndpointError::Status { code: 429, body: String::new() }.is_retryable());
        assert!(!EndpointError::Status { code: 400, body: String::new() }.is_retryable());
        assert!(!EndpointError::Capability("x".into()).is_retryable());
    }
}
