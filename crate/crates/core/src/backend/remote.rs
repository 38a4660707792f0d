//! OpenAI-compatible chat completion client with logprob support.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{entropy, mean_entropy, DecodeRequest, GenerationRecord, LanguageModel, TokenDistribution};
use crate::error::BackendError;
use crate::grammar;
use crate::vocab::TokenId;

/// Connection settings for a remote inference server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Sent as a bearer token when set.
    #[serde(skip)]
    pub api_key: Option<String>,
    /// Number of alternatives requested per position.
    pub top_logprobs: usize,
    pub timeout_secs: u64,
    /// Forward the tuple grammar to servers that support guided decoding.
    pub guided_grammar: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            top_logprobs: 20,
            timeout_secs: 120,
            guided_grammar: true,
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::new_with_config(
            ureq::Agent::config_builder()
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .http_status_as_error(false)
                .build(),
        );
        Self { config, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn body(&self, request: &DecodeRequest) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "logprobs": true,
            "top_logprobs": self.config.top_logprobs,
            "stop": [request.stop_sequence],
            "include_stop_str_in_output": true,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        if self.config.guided_grammar {
            if let Some(schema) = &request.schema {
                body["guided_grammar"] = json!(schema.to_gbnf());
            }
        }
        body
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

/// Maps token strings of one response onto dense ids.
#[derive(Default)]
struct Interner(HashMap<String, TokenId>);

impl Interner {
    fn id(&mut self, token: &str) -> TokenId {
        let next = self.0.len() as TokenId;
        *self.0.entry(token.to_owned()).or_insert(next)
    }
}

fn record_from_response(
    response: ChatResponse,
    request: &DecodeRequest,
) -> Result<GenerationRecord, BackendError> {
    let choice = response
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
    let mut text = choice.message.content.unwrap_or_default();
    let positions = choice
        .logprobs
        .and_then(|l| l.content)
        .ok_or_else(|| BackendError::Protocol("response has no token logprobs".into()))?;
    if positions.is_empty() {
        return Err(BackendError::EmptyGeneration);
    }

    let mut interner = Interner::default();
    let mut tokens = Vec::with_capacity(positions.len());
    let mut per_token = Vec::with_capacity(positions.len());
    let mut per_token_entropy = Vec::with_capacity(positions.len());
    let mut confidence = Vec::with_capacity(positions.len());
    for pos in positions {
        let chosen = interner.id(&pos.token);
        let mut entries: Vec<(TokenId, f64)> = pos
            .top_logprobs
            .iter()
            .map(|t| (interner.id(&t.token), t.logprob.exp()))
            .collect();
        if !entries.iter().any(|&(id, _)| id == chosen) {
            entries.push((chosen, pos.logprob.exp()));
        }
        // servers round logprobs, so the top-k mass can exceed one slightly
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if total > 1.0 {
            entries.iter_mut().for_each(|e| e.1 /= total);
        }
        let dist = TokenDistribution::new(entries)?;
        let renormalized = dist.renormalized()?;
        let p = renormalized
            .iter()
            .find(|e| e.0 == chosen)
            .map_or(0.0, |e| e.1);
        per_token_entropy.push(entropy(&dist)?);
        confidence.push(p);
        per_token.push(dist);
        tokens.push(chosen);
    }

    if request.schema.is_some() && !text.ends_with(&request.stop_sequence) {
        // some servers strip the stop string despite being asked to keep it
        text.push_str(&request.stop_sequence);
    }
    if let Some(schema) = &request.schema {
        grammar::compile(schema)?.check(&text)?;
    }
    let mean = mean_entropy(&per_token_entropy)?;
    Ok(GenerationRecord {
        tokens,
        text,
        per_token,
        per_token_entropy,
        raw_entropy: None,
        mean_entropy: mean,
        per_token_confidence: confidence,
    })
}

impl LanguageModel for RemoteBackend {
    fn decode(&self, request: &DecodeRequest) -> Result<GenerationRecord, BackendError> {
        request.validate()?;
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut call = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(self.body(request))
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status != 200 {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Transport(format!("HTTP {status}: {body}")));
        }
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        record_from_response(parsed, request)
    }

    fn name(&self) -> String {
        format!("remote:{}", self.config.model)
    }
}
