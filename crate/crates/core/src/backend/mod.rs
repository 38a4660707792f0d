//! Language-model backends.
//!
//! A backend turns a [`DecodeRequest`] into a [`GenerationRecord`] carrying
//! the per-step distributions the view ranking needs. Local backends expose
//! per-step control through [`StepModel`] and run the shared masked decode
//! loop in [`LocalDecoder`]; the remote client delegates masking to the
//! server and validates the result.

mod oracle;
mod remote;

pub use oracle::{CorruptionKind, CorruptionSpec, OracleConfig, OracleModel, ViewOverride};
pub use remote::{RemoteBackend, RemoteConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{BackendError, GrammarError};
use crate::grammar::{self, DecodeState, TupleSchema, STOP_SEQUENCE};
use crate::vocab::{TokenId, TokenizerVocabulary};

/// Context window the run reserves for prompt plus generation.
pub const DEFAULT_MAX_CONTEXT: usize = 16_384;

const SUM_TOLERANCE: f64 = 1e-9;

/// Sparse next-token distribution. `coverage` is the probability mass the
/// listed entries represent before renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    entries: Vec<(TokenId, f64)>,
    coverage: f64,
}

impl TokenDistribution {
    /// Builds a distribution; entries may be unnormalized top-k mass.
    pub fn new(mut entries: Vec<(TokenId, f64)>) -> Result<Self, BackendError> {
        if let Some(&(id, p)) = entries.iter().find(|(_, p)| !p.is_finite() || *p < 0.0) {
            return Err(BackendError::InvalidDistribution(format!(
                "token {id} has probability {p}"
            )));
        }
        entries.retain(|&(_, p)| p > 0.0);
        entries.sort_by_key(|&(id, _)| id);
        entries.dedup_by(|a, b| {
            if a.0 == b.0 {
                b.1 += a.1;
                true
            } else {
                false
            }
        });
        let coverage: f64 = entries.iter().map(|&(_, p)| p).sum();
        if coverage > 1.0 + SUM_TOLERANCE {
            return Err(BackendError::InvalidDistribution(format!(
                "probabilities sum to {coverage}"
            )));
        }
        Ok(Self { entries, coverage })
    }

    pub fn one_hot(token: TokenId) -> Self {
        Self {
            entries: vec![(token, 1.0)],
            coverage: 1.0,
        }
    }

    /// Non-zero entries, sorted by token id.
    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn probability(&self, token: TokenId) -> f64 {
        self.entries
            .binary_search_by_key(&token, |&(id, _)| id)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    /// Entries rescaled to sum to one.
    pub fn renormalized(&self) -> Result<Vec<(TokenId, f64)>, BackendError> {
        if self.coverage <= 0.0 {
            return Err(BackendError::InvalidDistribution("all-zero distribution".into()));
        }
        Ok(self
            .entries
            .iter()
            .map(|&(id, p)| (id, p / self.coverage))
            .collect())
    }

    /// Restricts to `allowed` (sorted) and renormalizes. A distribution with
    /// no mass on any allowed token becomes uniform over them.
    pub fn masked(&self, allowed: &[TokenId]) -> TokenDistribution {
        let kept: Vec<(TokenId, f64)> = self
            .entries
            .iter()
            .copied()
            .filter(|(id, _)| allowed.binary_search(id).is_ok())
            .collect();
        let mass: f64 = kept.iter().map(|&(_, p)| p).sum();
        if mass <= 0.0 {
            let u = 1.0 / allowed.len() as f64;
            return TokenDistribution {
                entries: allowed.iter().map(|&id| (id, u)).collect(),
                coverage: 1.0,
            };
        }
        TokenDistribution {
            entries: kept.into_iter().map(|(id, p)| (id, p / mass)).collect(),
            coverage: 1.0,
        }
    }
}

/// Shannon entropy in nats over the renormalized support.
pub fn entropy(dist: &TokenDistribution) -> Result<f64, BackendError> {
    let h: f64 = dist
        .renormalized()?
        .iter()
        .map(|&(_, p)| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum();
    Ok(h.max(0.0))
}

/// Arithmetic mean of per-token entropies.
pub fn mean_entropy(per_token: &[f64]) -> Result<f64, BackendError> {
    if per_token.is_empty() {
        return Err(BackendError::EmptyGeneration);
    }
    Ok(per_token.iter().sum::<f64>() / per_token.len() as f64)
}

/// Labels that let simulators and logs identify a request.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestTags {
    pub instance_id: String,
    pub permutation_id: String,
    /// Sample index for repeated decodes of one prompt.
    pub sample: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct DecodeRequest {
    pub prompt: String,
    pub schema: Option<TupleSchema>,
    pub stop_sequence: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub tags: RequestTags,
}

impl DecodeRequest {
    pub fn new(prompt: impl Into<String>, schema: Option<TupleSchema>) -> Self {
        Self {
            prompt: prompt.into(),
            schema,
            stop_sequence: STOP_SEQUENCE.to_owned(),
            max_tokens: 512,
            temperature: 0.0,
            seed: None,
            tags: RequestTags::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One finished decode.
#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Distributions the token was drawn from (after masking).
    pub per_token: Vec<TokenDistribution>,
    pub per_token_entropy: Vec<f64>,
    /// Entropies of the model's distributions before masking, when known.
    pub raw_entropy: Option<Vec<f64>>,
    pub mean_entropy: f64,
    /// Probability of each emitted token.
    pub per_token_confidence: Vec<f64>,
}

impl GenerationRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.per_token_confidence.is_empty() {
            return 0.0;
        }
        self.per_token_confidence.iter().sum::<f64>() / self.per_token_confidence.len() as f64
    }

    pub fn mean_raw_entropy(&self) -> Option<f64> {
        self.raw_entropy.as_deref().and_then(|h| mean_entropy(h).ok())
    }
}

/// Backend contract used by the multi-view engine.
pub trait LanguageModel: Send + Sync {
    fn decode(&self, request: &DecodeRequest) -> Result<GenerationRecord, BackendError>;

    /// Token count of `text`, when the backend's tokenizer is known locally.
    fn count_tokens(&self, _text: &str) -> Option<usize> {
        None
    }

    fn name(&self) -> String;
}

/// What a step model sees at each decode step.
pub struct StepContext<'a> {
    pub request: &'a DecodeRequest,
    pub generated: &'a [TokenId],
    pub text: &'a [u8],
    /// Grammar state and its token mask when the request is constrained.
    pub state: Option<&'a DecodeState>,
    pub allowed: Option<&'a [TokenId]>,
}

/// A model with per-step logit access.
pub trait StepModel: Send + Sync {
    fn vocabulary(&self) -> &TokenizerVocabulary;

    /// Full next-token distribution.
    fn next_distribution(&self, ctx: &StepContext<'_>) -> Result<TokenDistribution, BackendError>;

    fn name(&self) -> String;
}

/// Runs the masked decode loop over a [`StepModel`].
pub struct LocalDecoder<M> {
    model: M,
    max_context: usize,
}

impl<M: StepModel> LocalDecoder<M> {
    pub fn new(model: M) -> Self {
        Self {
            model,
            max_context: DEFAULT_MAX_CONTEXT,
        }
    }

    pub fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }

    pub fn model(&self) -> &M {
        &self.model
    }
}

fn choose(
    dist: &TokenDistribution,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenId, BackendError> {
    let entries = dist.entries();
    if entries.is_empty() {
        return Err(BackendError::InvalidDistribution("empty distribution".into()));
    }
    if temperature == 0.0 {
        // greedy, lowest id on ties
        let mut best = entries[0];
        for &e in &entries[1..] {
            if e.1 > best.1 {
                best = e;
            }
        }
        return Ok(best.0);
    }
    let max_p = entries.iter().map(|e| e.1).fold(0.0f64, f64::max);
    let weights: Vec<f64> = entries
        .iter()
        .map(|&(_, p)| (p / max_p).powf(1.0 / temperature))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (&(id, _), w) in entries.iter().zip(&weights) {
        if draw < *w {
            return Ok(id);
        }
        draw -= w;
    }
    Ok(entries[entries.len() - 1].0)
}

impl<M: StepModel> LanguageModel for LocalDecoder<M> {
    fn decode(&self, request: &DecodeRequest) -> Result<GenerationRecord, BackendError> {
        request.validate()?;
        let vocab = self.model.vocabulary();
        let prompt_tokens = vocab.count_tokens(&request.prompt);
        if prompt_tokens + request.max_tokens > self.max_context {
            return Err(BackendError::ContextLengthExceeded {
                prompt_tokens,
                max_tokens: request.max_tokens,
                limit: self.max_context,
            });
        }

        let mut state = match &request.schema {
            Some(schema) => Some(DecodeState::new(grammar::compile(schema)?)),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed.unwrap_or(0));
        let mut tokens = Vec::new();
        let mut text: Vec<u8> = Vec::new();
        let mut per_token = Vec::new();
        let mut per_token_entropy = Vec::new();
        let mut raw_entropy = Vec::new();
        let mut confidence = Vec::new();

        while tokens.len() < request.max_tokens {
            if state.as_ref().is_some_and(DecodeState::is_finished) {
                break;
            }
            let allowed = match &state {
                Some(s) => Some(s.token_mask(vocab)?),
                None => None,
            };
            let raw = self.model.next_distribution(&StepContext {
                request,
                generated: &tokens,
                text: &text,
                state: state.as_ref(),
                allowed: allowed.as_deref(),
            })?;
            raw_entropy.push(entropy(&raw)?);
            let dist = match &allowed {
                Some(allowed) => raw.masked(allowed),
                None => TokenDistribution {
                    entries: raw.renormalized()?,
                    coverage: raw.coverage,
                },
            };
            let token = choose(&dist, request.temperature, &mut rng)?;
            per_token_entropy.push(entropy(&dist)?);
            confidence.push(dist.probability(token));
            per_token.push(dist);
            tokens.push(token);
            let bytes = vocab.bytes(token);
            text.extend_from_slice(bytes);
            if let Some(s) = &state {
                state = Some(s.advance(bytes)?);
            } else if text.ends_with(request.stop_sequence.as_bytes()) {
                break;
            }
        }

        if let Some(s) = &state {
            if !s.is_accepting() {
                return Err(GrammarError::Incomplete {
                    offset: s.consumed(),
                }
                .into());
            }
        }
        let mean = mean_entropy(&per_token_entropy)?;
        Ok(GenerationRecord {
            tokens,
            text: String::from_utf8_lossy(&text).into_owned(),
            per_token,
            per_token_entropy,
            raw_entropy: Some(raw_entropy),
            mean_entropy: mean,
            per_token_confidence: confidence,
        })
    }

    fn count_tokens(&self, text: &str) -> Option<usize> {
        Some(self.model.vocabulary().count_tokens(text))
    }

    fn name(&self) -> String {
        self.model.name()
    }
}
