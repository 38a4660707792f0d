//! Deterministic oracle simulator.
//!
//! The oracle knows the gold tuples of every instance. For a request tagged
//! with an instance and a view it emits the gold tuple list in that view's
//! element order, optionally corrupted, with per-step distributions whose
//! entropy is set by the view's configuration. Corruption decisions are
//! seeded by (seed, instance, view), so runs are reproducible.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{StepContext, StepModel, TokenDistribution};
use crate::error::BackendError;
use crate::grammar::format_tuples;
use crate::trie::ByteTrie;
use crate::types::{Permutation, Polarity, SentimentTuple, Task, TupleSet};
use crate::vocab::{TokenId, TokenizerVocabulary};

/// Alternatives that share the noise mass at one step.
const MAX_ALTERNATIVES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    /// Flip the polarity of one tuple.
    #[default]
    Alter,
    /// Remove one tuple (alters instead when only one tuple exists).
    Drop,
    /// Choose between the two per instance.
    Mixed,
}

/// How one view is corrupted and how confident it looks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    /// Probability that the view emits a corrupted tuple list.
    pub probability: f64,
    pub kind: CorruptionKind,
    /// Per-step entropy (nats) of clean views at non-forced steps.
    pub clean_entropy: f64,
    /// Per-step entropy (nats) of corrupted views at non-forced steps.
    pub corrupt_entropy: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            probability: 0.0,
            kind: CorruptionKind::Alter,
            clean_entropy: 0.0,
            corrupt_entropy: 0.0,
        }
    }
}

/// Per-view override. Unset fields inherit the default spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewOverride {
    pub instance: String,
    pub permutation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_entropy: Option<f64>,
}

/// JSON-configurable oracle setup.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OracleConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub default: CorruptionSpec,
    /// Gold tuples by instance id, in canonical element order.
    #[serde(default)]
    pub instances: HashMap<String, TupleSet>,
    #[serde(default)]
    pub views: Vec<ViewOverride>,
}

impl OracleConfig {
    pub fn noiseless(gold: HashMap<String, TupleSet>) -> Self {
        Self {
            instances: gold,
            ..Self::default()
        }
    }

    /// Effective spec for one view after applying the latest matching override.
    pub fn spec_for(&self, instance: &str, permutation: &str, sample: Option<u32>) -> CorruptionSpec {
        let hit = self.views.iter().rev().find(|v| {
            v.instance == instance
                && v.permutation == permutation
                && (v.sample.is_none() || v.sample == sample)
        });
        apply_override(self.default, hit)
    }
}

fn apply_override(mut spec: CorruptionSpec, hit: Option<&ViewOverride>) -> CorruptionSpec {
    if let Some(v) = hit {
        if let Some(p) = v.probability {
            spec.probability = p;
        }
        if let Some(h) = v.clean_entropy {
            spec.clean_entropy = h;
        }
        if let Some(h) = v.corrupt_entropy {
            spec.corrupt_entropy = h;
        }
    }
    spec
}

/// RNG keyed by a stable digest of `parts`.
fn seeded_rng(parts: &[&str]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// What one view of one instance will emit.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub tuples: Vec<SentimentTuple>,
    pub corrupted: bool,
    pub entropy: f64,
    pub target: String,
}

/// The simulator behind [`super::LocalDecoder`].
pub struct OracleModel {
    config: OracleConfig,
    vocab: TokenizerVocabulary,
    /// Override positions by (instance, permutation), latest last.
    overrides: HashMap<(String, String), Vec<usize>>,
}

impl OracleModel {
    pub fn new(config: OracleConfig, vocab: TokenizerVocabulary) -> Self {
        let mut overrides: HashMap<(String, String), Vec<usize>> = HashMap::new();
        for (i, v) in config.views.iter().enumerate() {
            overrides
                .entry((v.instance.clone(), v.permutation.clone()))
                .or_default()
                .push(i);
        }
        Self {
            config,
            vocab,
            overrides,
        }
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    /// Resolves the output of one view. Corruption content depends only on
    /// (seed, instance), so corrupted views of one instance agree.
    pub fn view(
        &self,
        instance: &str,
        permutation: &Permutation,
        sample: Option<u32>,
    ) -> Result<OracleView, BackendError> {
        let gold = self
            .config
            .instances
            .get(instance)
            .ok_or_else(|| BackendError::OracleMiss(instance.to_owned()))?;
        let perm_id = permutation.id();
        let hit = self
            .overrides
            .get(&(instance.to_owned(), perm_id.clone()))
            .and_then(|idx| {
                idx.iter()
                    .rev()
                    .map(|&i| &self.config.views[i])
                    .find(|v| v.sample.is_none() || v.sample == sample)
            });
        let spec = apply_override(self.config.default, hit);
        let seed = self.config.seed.to_string();
        let sample_key = sample.map_or_else(|| "-".to_owned(), |s| s.to_string());
        let mut rng = seeded_rng(&[&seed, instance, &perm_id, &sample_key]);
        let corrupted = !gold.is_empty() && rng.gen::<f64>() < spec.probability;

        let mut tuples: Vec<SentimentTuple> = gold.iter().cloned().collect();
        if corrupted {
            corrupt(&mut tuples, spec.kind, &mut seeded_rng(&[&seed, instance]));
        }
        let target = format_tuples(&tuples, permutation);
        Ok(OracleView {
            tuples,
            corrupted,
            entropy: if corrupted {
                spec.corrupt_entropy
            } else {
                spec.clean_entropy
            },
            target,
        })
    }

    fn target_token(&self, remaining: &[u8], allowed: Option<&[TokenId]>) -> Option<TokenId> {
        let trie = self.vocab.trie();
        let mut node = ByteTrie::<Vec<TokenId>>::ROOT;
        let mut best = None;
        for &b in remaining {
            match trie.child(node, b) {
                Some(next) => node = next,
                None => break,
            }
            if let Some(ids) = trie.value(node) {
                if let Some(&id) = ids
                    .iter()
                    .find(|id| allowed.is_none_or(|a| a.binary_search(id).is_ok()))
                {
                    best = Some(id);
                }
            }
        }
        best
    }

    /// Token that moves a diverged decode toward the nearest completion.
    fn recovery_token(&self, ctx: &StepContext<'_>) -> Result<TokenId, BackendError> {
        match (ctx.state, ctx.allowed) {
            (Some(state), Some(allowed)) => allowed
                .iter()
                .filter_map(|&id| {
                    state
                        .advance(self.vocab.bytes(id))
                        .ok()
                        .map(|next| (next.distance_to_accept(), std::cmp::Reverse(self.vocab.bytes(id).len()), id))
                })
                .min()
                .map(|(_, _, id)| id)
                .ok_or_else(|| BackendError::InvalidDistribution("no allowed token".into())),
            _ => self
                .target_token(ctx.request.stop_sequence.as_bytes(), None)
                .ok_or_else(|| BackendError::InvalidDistribution("stop sequence has no token".into())),
        }
    }
}

fn corrupt(tuples: &mut Vec<SentimentTuple>, kind: CorruptionKind, rng: &mut ChaCha8Rng) {
    let idx = rng.gen_range(0..tuples.len());
    let kind = match kind {
        CorruptionKind::Mixed if rng.gen_bool(0.5) => CorruptionKind::Drop,
        CorruptionKind::Mixed => CorruptionKind::Alter,
        k => k,
    };
    if kind == CorruptionKind::Drop && tuples.len() > 1 {
        tuples.remove(idx);
        return;
    }
    let current = tuples[idx].polarity;
    let others: Vec<Polarity> = Polarity::ALL.into_iter().filter(|&p| p != current).collect();
    tuples[idx].polarity = *others.choose(rng).expect("two other polarities");
}

/// Probability of the target token so that the target plus `n_alt` equal
/// alternatives has entropy `h`.
fn target_probability(h: f64, n_alt: usize) -> f64 {
    if n_alt == 0 || h <= 0.0 {
        return 1.0;
    }
    let a = (n_alt + 1) as f64;
    let entropy = |q: f64| {
        let r = 1.0 - q;
        let mut e = 0.0;
        if q > 0.0 {
            e -= q * q.ln();
        }
        if r > 0.0 {
            e -= r * (r / n_alt as f64).ln();
        }
        e
    };
    // the target must stay the strict argmax
    let h = h.min(0.95 * a.ln());
    let (mut lo, mut hi) = (1.0 / a, 1.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if entropy(mid) > h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

impl StepModel for OracleModel {
    fn vocabulary(&self) -> &TokenizerVocabulary {
        &self.vocab
    }

    fn next_distribution(&self, ctx: &StepContext<'_>) -> Result<TokenDistribution, BackendError> {
        let tags = &ctx.request.tags;
        let task = match &ctx.request.schema {
            Some(schema) => schema.permutation().task(),
            None => {
                if tags.permutation_id.split('-').count() == 4 {
                    Task::Asqp
                } else {
                    Task::Tasd
                }
            }
        };
        let permutation = Permutation::parse(task, &tags.permutation_id)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let view = self.view(&tags.instance_id, &permutation, tags.sample)?;

        let target = view.target.as_bytes();
        let on_track = target.starts_with(ctx.text) && ctx.text.len() < target.len();
        let token = match on_track
            .then(|| self.target_token(&target[ctx.text.len()..], ctx.allowed))
            .flatten()
        {
            Some(t) => t,
            None => self.recovery_token(ctx)?,
        };

        let alternatives: Vec<TokenId> = match ctx.allowed {
            Some(allowed) => allowed
                .iter()
                .copied()
                .filter(|&t| t != token)
                .take(MAX_ALTERNATIVES)
                .collect(),
            None => (0..self.vocab.len() as TokenId)
                .filter(|&t| t != token)
                .take(MAX_ALTERNATIVES)
                .collect(),
        };
        let q = target_probability(view.entropy, alternatives.len());
        if q >= 1.0 {
            return Ok(TokenDistribution::one_hot(token));
        }
        let rest = (1.0 - q) / alternatives.len() as f64;
        let mut entries = vec![(token, q)];
        entries.extend(alternatives.into_iter().map(|t| (t, rest)));
        TokenDistribution::new(entries)
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}
