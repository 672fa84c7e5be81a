//! Greedy, phrase-form probing of a completion endpoint with per-token
//! probabilities and a persistent result cache.

mod cache;
mod endpoint;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{CacheKey, CacheStore};
pub use endpoint::{
    parse_response, ApiStyle, Completion, CompletionEndpoint, CompletionRequest, EndpointError,
    GeneratedToken, HttpEndpoint,
};

use crate::error::{Error, Result};
use crate::prompts::PromptTemplate;
use crate::signals::{compute_all_signals, SignalSet, TokenProbSequence};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub text: String,
    pub gold_answers: Vec<String>,
    pub source: String,
}

impl QuestionRecord {
    pub fn validate_all(questions: &[QuestionRecord]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for q in questions {
            if q.text.trim().is_empty() {
                return Err(Error::invalid(format!("question {} has empty text", q.id)));
            }
            if !seen.insert(q.id.as_str()) {
                return Err(Error::invalid(format!("duplicate question id {}", q.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub question_id: String,
    pub question: String,
    pub prompt_text: String,
    pub prediction: String,
    pub token_probs: TokenProbSequence,
    pub signals: SignalSet,
    pub model_id: String,
    pub created_at: String,
}

impl ProbeResult {
    /// Checks that the prediction and signals agree with the stored token
    /// probabilities.
    pub fn verify(&self) -> Result<()> {
        if self.prediction != self.token_probs.text().trim() {
            return Err(Error::invalid(format!(
                "{}: prediction does not match its tokens",
                self.question_id
            )));
        }
        if compute_all_signals(&self.token_probs) != self.signals {
            return Err(Error::invalid(format!(
                "{}: stored signals do not match token probabilities",
                self.question_id
            )));
        }
        Ok(())
    }
}

fn default_max_new_tokens() -> u32 {
    32
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_parallel() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_failure_limit() -> f64 {
    0.01
}
fn default_stop() -> Vec<String> {
    vec!["\n".to_owned()]
}

/// Endpoint and decoding settings. Sampling temperature is always 0 and
/// has no field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub api: ApiStyle,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    pub timeout_secs: u64,
    pub max_new_tokens: u32,
    pub max_parallel: usize,
    pub retries: u32,
    pub backoff_ms: u64,
    /// Largest tolerated fraction of failed probes in one dataset run.
    pub failure_limit: f64,
    pub stop: Vec<String>,
}

impl Default for EndpointConfig {
    /// A local OpenAI-compatible server; the model name must still be set.
    fn default() -> Self {
        Self::new("http://127.0.0.1:8000/v1", "")
    }
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api: ApiStyle::default(),
            system_prompt: None,
            timeout_secs: default_timeout_secs(),
            max_new_tokens: default_max_new_tokens(),
            max_parallel: default_max_parallel(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            failure_limit: default_failure_limit(),
            stop: default_stop(),
        }
    }

    pub const TEMPERATURE: f64 = 0.0;

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.base_url.trim().is_empty() {
            out.push("endpoint.base_url is empty".to_owned());
        }
        if self.model.trim().is_empty() {
            out.push("endpoint.model is empty".to_owned());
        }
        if self.max_new_tokens < 1 {
            out.push("endpoint.max_new_tokens must be at least 1".to_owned());
        }
        if self.max_parallel < 1 {
            out.push("endpoint.max_parallel must be at least 1".to_owned());
        }
        if !(0.0..=1.0).contains(&self.failure_limit) {
            out.push("endpoint.failure_limit must lie in [0, 1]".to_owned());
        }
        if self.stop.iter().any(String::is_empty) {
            out.push("endpoint.stop contains an empty string".to_owned());
        }
        out
    }

    pub fn http_endpoint(&self, api_key: Option<String>) -> HttpEndpoint {
        HttpEndpoint::new(
            &self.base_url,
            &self.model,
            self.api,
            Duration::from_secs(self.timeout_secs),
        )
        .with_api_key(api_key)
        .with_system_prompt(self.system_prompt.clone())
    }

    pub fn cache_key(&self, endpoint: &dyn CompletionEndpoint, prompt: &str) -> CacheKey {
        CacheKey::new(
            endpoint.model(),
            &endpoint.envelope(prompt),
            self.max_new_tokens,
            &self.stop,
        )
    }
}

/// Text of a completion after the stop rule, with linear token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub model: String,
    pub tokens: Vec<String>,
    pub probs: Vec<f64>,
}

impl Generation {
    pub fn text(&self) -> String {
        self.tokens.concat().trim().to_owned()
    }
}

/// Drops leading whitespace-only tokens and cuts the completion at the
/// first stop string. A token straddling the cut keeps its probability.
pub fn apply_stop(tokens: &[GeneratedToken], stop: &[String]) -> Vec<GeneratedToken> {
    let first = tokens
        .iter()
        .position(|t| !t.text.trim().is_empty())
        .unwrap_or(tokens.len());
    let tokens = &tokens[first..];
    let text: String = tokens.iter().map(|t| t.text.as_str()).collect();
    let cut = stop
        .iter()
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    let mut out = Vec::new();
    let mut offset = 0;
    for t in tokens {
        if offset >= cut {
            break;
        }
        let end = offset + t.text.len();
        let kept = &t.text[..(end.min(cut) - offset)];
        if !kept.is_empty() {
            out.push(GeneratedToken {
                text: kept.to_owned(),
                logprob: t.logprob,
            });
        }
        offset = end;
    }
    out
}

/// Converts a reported log-probability to a probability in (0, 1].
pub fn logprob_to_prob(logprob: f64) -> f64 {
    if logprob.is_nan() {
        return f64::MIN_POSITIVE;
    }
    logprob.min(0.0).exp().max(f64::MIN_POSITIVE)
}

/// Sends one prompt with retries and applies the stop rule.
pub fn generate(
    cfg: &EndpointConfig,
    endpoint: &dyn CompletionEndpoint,
    prompt: &str,
) -> Result<Generation, EndpointError> {
    let request = CompletionRequest {
        prompt: prompt.to_owned(),
        max_new_tokens: cfg.max_new_tokens,
        stop: cfg.stop.clone(),
    };
    let mut attempt = 0;
    loop {
        match endpoint.complete(&request) {
            Ok(c) => {
                let tokens = apply_stop(&c.tokens, &cfg.stop);
                return Ok(Generation {
                    model: c.model,
                    probs: tokens.iter().map(|t| logprob_to_prob(t.logprob)).collect(),
                    tokens: tokens.into_iter().map(|t| t.text).collect(),
                });
            }
            Err(e) if e.is_retryable() && attempt < cfg.retries => {
                let wait = cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                std::thread::sleep(Duration::from_millis(wait));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn endpoint_error(question_id: &str, e: EndpointError) -> Error {
    match e {
        EndpointError::Capability(m) => Error::Capability(m),
        other => Error::Probe {
            question_id: question_id.to_owned(),
            message: other.to_string(),
        },
    }
}

pub fn probe_question(
    cfg: &EndpointConfig,
    endpoint: &dyn CompletionEndpoint,
    question: &QuestionRecord,
    template: &PromptTemplate,
) -> Result<ProbeResult> {
    let prompt = template.render(&question.text, None)?;
    let generation = generate(cfg, endpoint, &prompt).map_err(|e| endpoint_error(&question.id, e))?;
    if generation.tokens.is_empty() || generation.text().is_empty() {
        return Err(Error::Probe {
            question_id: question.id.clone(),
            message: "empty prediction after stop rule".into(),
        });
    }
    let prediction = generation.text();
    let token_probs = TokenProbSequence::new(generation.probs, generation.tokens)?;
    let signals = compute_all_signals(&token_probs);
    Ok(ProbeResult {
        question_id: question.id.clone(),
        question: question.text.clone(),
        prompt_text: prompt,
        prediction,
        token_probs,
        signals,
        model_id: generation.model,
        created_at: chrono::Utc::now().to_rfc3339(),
    })
}

/// Maps `f` over `items` on at most `width` threads, preserving order.
pub fn fan_out<T: Sync, R: Send>(width: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let width = width.clamp(1, items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..width {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { return };
                *slots[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFailure {
    pub question_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ProbeRun {
    /// Successful results in input order.
    pub results: Vec<ProbeResult>,
    pub failures: Vec<ProbeFailure>,
    pub cache_hits: usize,
}

/// Probes every question with bounded parallelism, serving repeats from
/// `cache`. The run fails when the failed fraction exceeds
/// `cfg.failure_limit`, or at the first capability error.
pub fn probe_dataset(
    cfg: &EndpointConfig,
    endpoint: &dyn CompletionEndpoint,
    questions: &[QuestionRecord],
    template: &PromptTemplate,
    cache: &CacheStore,
) -> Result<ProbeRun> {
    if questions.is_empty() {
        return Err(Error::invalid("no questions to probe"));
    }
    QuestionRecord::validate_all(questions)?;

    let slots: Vec<Mutex<Option<Result<ProbeResult>>>> =
        questions.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let hits = AtomicUsize::new(0);
    let fatal = AtomicBool::new(false);
    let capability: Mutex<Option<String>> = Mutex::new(None);

    let worker = || loop {
        if fatal.load(Ordering::SeqCst) {
            return;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(q) = questions.get(i) else { return };
        let outcome = probe_cached(cfg, endpoint, q, template, cache, &hits);
        if let Err(Error::Capability(m)) = &outcome {
            fatal.store(true, Ordering::SeqCst);
            capability.lock().unwrap().get_or_insert_with(|| m.clone());
        }
        *slots[i].lock().unwrap() = Some(outcome);
    };

    let width = cfg.max_parallel.clamp(1, questions.len());
    std::thread::scope(|s| {
        for _ in 0..width {
            s.spawn(worker);
        }
    });

    if let Some(m) = capability.into_inner().unwrap() {
        return Err(Error::Capability(m));
    }

    let mut results = Vec::with_capacity(questions.len());
    let mut failures = Vec::new();
    for (q, slot) in questions.iter().zip(slots) {
        match slot.into_inner().unwrap() {
            Some(Ok(r)) => results.push(r),
            Some(Err(e)) => failures.push(ProbeFailure {
                question_id: q.id.clone(),
                message: e.to_string(),
            }),
            None => failures.push(ProbeFailure {
                question_id: q.id.clone(),
                message: "not probed".into(),
            }),
        }
    }
    if failures.len() as f64 > cfg.failure_limit * questions.len() as f64 {
        return Err(Error::ProbeAggregate {
            failed_ids: failures.into_iter().map(|f| f.question_id).collect(),
            total: questions.len(),
            limit_ratio: cfg.failure_limit,
        });
    }
    Ok(ProbeRun {
        results,
        failures,
        cache_hits: hits.into_inner(),
    })
}

fn probe_cached(
    cfg: &EndpointConfig,
    endpoint: &dyn CompletionEndpoint,
    q: &QuestionRecord,
    template: &PromptTemplate,
    cache: &CacheStore,
    hits: &AtomicUsize,
) -> Result<ProbeResult> {
    let prompt = template.render(&q.text, None)?;
    let key = cfg.cache_key(endpoint, &prompt);
    if let Some(mut cached) = cache.get(&key) {
        hits.fetch_add(1, Ordering::SeqCst);
        cached.question_id = q.id.clone();
        cached.question = q.text.clone();
        return Ok(cached);
    }
    let result = probe_question(cfg, endpoint, q, template)?;
    cache.put(&key, &result)?;
    Ok(result)
}
