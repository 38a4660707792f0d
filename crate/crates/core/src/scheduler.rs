//! Prefix-grouped dispatch and prefill cost accounting.
//!
//! Requests that share a prompt prefix (same dataset, task, element order and
//! shot sample) form one group. Groups run concurrently while the members of
//! a group run back to back, so a backend with prefix caching sees each
//! prefix contiguously. The ledger counts prompt tokens with and without
//! prefix reuse.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use indexmap::map::Entry;
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{DecodeRequest, GenerationRecord, LanguageModel};
use crate::error::{BackendError, Error, SchedulerError};
use crate::types::Task;
use crate::vocab::TokenCounter;

/// Requests with equal keys must carry byte-identical prefixes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub dataset: String,
    pub task: Task,
    pub permutation_id: String,
    pub shot_sample_id: String,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.dataset, self.task, self.permutation_id, self.shot_sample_id
        )
    }
}

/// A decode request together with its prompt split.
#[derive(Debug, Clone)]
pub struct ScheduledRequest {
    pub key: GroupKey,
    pub prefix: Arc<str>,
    pub suffix: String,
    pub request: DecodeRequest,
}

impl ScheduledRequest {
    /// Sets the request prompt to `prefix + suffix`.
    pub fn new(key: GroupKey, prefix: Arc<str>, suffix: String, mut request: DecodeRequest) -> Self {
        request.prompt = format!("{prefix}{suffix}");
        Self {
            key,
            prefix,
            suffix,
            request,
        }
    }
}

/// Requests (by index into the scheduled list) sharing one prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixGroup {
    pub key: GroupKey,
    /// Hex SHA-256 of the prefix bytes.
    pub prefix_hash: String,
    pub prefix_token_count: usize,
    pub requests: Vec<usize>,
}

pub fn prefix_hash(prefix: &str) -> String {
    hex::encode(Sha256::digest(prefix.as_bytes()))
}

/// Groups requests by key, preserving first-seen group order and request
/// order within each group. Without grouping every request is its own group
/// and pays its prefix in full.
pub fn schedule(
    requests: &[ScheduledRequest],
    counter: &dyn TokenCounter,
    grouping: bool,
) -> Result<Vec<PrefixGroup>, SchedulerError> {
    let mut hashes: IndexMap<&GroupKey, (String, usize)> = IndexMap::new();
    let mut groups: IndexMap<&GroupKey, PrefixGroup> = IndexMap::new();
    let mut singles = Vec::new();
    for (i, r) in requests.iter().enumerate() {
        let (hash, tokens) = match hashes.entry(&r.key) {
            Entry::Occupied(e) => {
                let (hash, tokens) = e.get();
                if *hash != prefix_hash(&r.prefix) {
                    return Err(SchedulerError::GroupingIntegrity {
                        key: r.key.to_string(),
                    });
                }
                (hash.clone(), *tokens)
            }
            Entry::Vacant(e) => e
                .insert((prefix_hash(&r.prefix), counter.count(&r.prefix)))
                .clone(),
        };
        if grouping {
            groups
                .entry(&r.key)
                .or_insert_with(|| PrefixGroup {
                    key: r.key.clone(),
                    prefix_hash: hash,
                    prefix_token_count: tokens,
                    requests: Vec::new(),
                })
                .requests
                .push(i);
        } else {
            singles.push(PrefixGroup {
                key: r.key.clone(),
                prefix_hash: hash,
                prefix_token_count: tokens,
                requests: vec![i],
            });
        }
    }
    Ok(if grouping {
        groups.into_values().collect()
    } else {
        singles
    })
}

/// Prompt and generation token totals for one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    /// Prefill tokens when each group prefix is processed once.
    pub prefill_tokens_cached: u64,
    /// Prefill tokens when every request processes its full prompt.
    pub prefill_tokens_uncached: u64,
    pub generated_tokens: u64,
    pub requests: u64,
    pub groups: u64,
    pub prefix_grouping: bool,
}

impl CostLedger {
    /// `1 - cached / uncached`, zero for an empty ledger.
    pub fn savings_ratio(&self) -> f64 {
        if self.prefill_tokens_uncached == 0 {
            return 0.0;
        }
        1.0 - self.prefill_tokens_cached as f64 / self.prefill_tokens_uncached as f64
    }

    /// Prefill tokens actually paid under this run's grouping mode.
    pub fn prefill_tokens_paid(&self) -> u64 {
        if self.prefix_grouping {
            self.prefill_tokens_cached
        } else {
            self.prefill_tokens_uncached
        }
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.prefill_tokens_cached += other.prefill_tokens_cached;
        self.prefill_tokens_uncached += other.prefill_tokens_uncached;
        self.generated_tokens += other.generated_tokens;
        self.requests += other.requests;
        self.groups += other.groups;
        self.prefix_grouping |= other.prefix_grouping;
    }
}

/// Serialized form including the derived savings ratio.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerReport {
    #[serde(flatten)]
    pub ledger: CostLedger,
    pub savings_ratio: f64,
    pub uncached_model: String,
}

impl From<CostLedger> for LedgerReport {
    fn from(ledger: CostLedger) -> Self {
        Self {
            ledger,
            savings_ratio: ledger.savings_ratio(),
            uncached_model: "every request recomputes its full prompt".into(),
        }
    }
}

/// Exact prefill totals for scheduled groups.
pub fn account(
    groups: &[PrefixGroup],
    requests: &[ScheduledRequest],
    counter: &dyn TokenCounter,
    grouping: bool,
) -> CostLedger {
    let mut ledger = CostLedger {
        prefix_grouping: grouping,
        groups: groups.len() as u64,
        ..CostLedger::default()
    };
    for g in groups {
        let prefix = g.prefix_token_count as u64;
        ledger.prefill_tokens_cached += prefix;
        for &i in &g.requests {
            let suffix = counter.count(&requests[i].suffix) as u64;
            ledger.prefill_tokens_cached += suffix;
            ledger.prefill_tokens_uncached += prefix + suffix;
            ledger.requests += 1;
        }
    }
    ledger
}

/// Counts tokens with the backend's tokenizer, falling back to UTF-8 bytes
/// when the backend cannot count locally.
pub struct ModelTokenCounter<'a>(pub &'a dyn LanguageModel);

impl TokenCounter for ModelTokenCounter<'_> {
    fn count(&self, text: &str) -> usize {
        self.0.count_tokens(text).unwrap_or(text.len())
    }
}

/// Outcome slot per scheduled request, `None` when skipped after cancellation.
pub type DispatchResults = Vec<DispatchSlot>;

/// Outcome of one request, `None` when it was skipped.
pub type DispatchSlot = Option<Result<GenerationRecord, BackendError>>;

/// Runs every group, at most `max_in_flight` groups at a time. Results are
/// returned in request order regardless of completion order.
pub fn dispatch(
    groups: &[PrefixGroup],
    requests: &[ScheduledRequest],
    backend: &dyn LanguageModel,
    max_in_flight: usize,
    cancel: Option<&AtomicBool>,
) -> Result<DispatchResults, Error> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let per_group: Vec<Vec<(usize, DispatchSlot)>> =
        pool.install(|| {
            groups
                .par_iter()
                .map(|g| {
                    g.requests
                        .iter()
                        .map(|&i| {
                            let cancelled = cancel.is_some_and(|c| c.load(Ordering::Relaxed));
                            (i, (!cancelled).then(|| backend.decode(&requests[i].request)))
                        })
                        .collect()
                })
                .collect()
        });
    let mut out: DispatchResults = (0..requests.len()).map(|_| None).collect();
    for (i, r) in per_group.into_iter().flatten() {
        out[i] = r;
    }
    Ok(out)
}
