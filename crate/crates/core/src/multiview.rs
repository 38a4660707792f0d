//! Multi-view decoding, view selection and voting.
//!
//! Each instance is decoded under several element orders. Views are ranked
//! by mean token entropy, the `m` most confident are kept, and a tuple
//! survives if strictly more than half of the kept views produced it. The
//! single-order, self-consistency and confidence-routed strategies reuse the
//! same batch pipeline.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backend::{DecodeRequest, GenerationRecord, LanguageModel, RequestTags};
use crate::error::{BackendError, Error, Result};
use crate::grammar::{parse_tuples, DatasetTerminals, InstanceTerminals, TupleSchema};
use crate::prompt::{render_prefix, render_suffix, PromptTemplate};
use crate::scheduler::{self, CostLedger, GroupKey, ModelTokenCounter, ScheduledRequest};
use crate::types::{all_permutations, CategorySet, Instance, Permutation, SentimentTuple, Task, TupleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mvp,
    SingleOrder,
    SelfConsistency,
    MvpEff,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Mvp => "mvp",
            Strategy::SingleOrder => "single_order",
            Strategy::SelfConsistency => "self_consistency",
            Strategy::MvpEff => "mvp_eff",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvp" => Ok(Strategy::Mvp),
            "single_order" => Ok(Strategy::SingleOrder),
            "self_consistency" => Ok(Strategy::SelfConsistency),
            "mvp_eff" => Ok(Strategy::MvpEff),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// View selection and strategy settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSelectionConfig {
    /// Views that vote under mvp; the task default when unset.
    pub m: Option<usize>,
    pub strategy: Strategy,
    pub sc_samples: usize,
    pub sc_temperature: f64,
    /// Fraction of instances escalated to mvp under mvp_eff.
    pub eff_quantile: f64,
}

impl Default for ViewSelectionConfig {
    fn default() -> Self {
        Self {
            m: None,
            strategy: Strategy::Mvp,
            sc_samples: 5,
            sc_temperature: 0.8,
            eff_quantile: 0.25,
        }
    }
}

impl ViewSelectionConfig {
    pub fn m_for(&self, task: Task) -> usize {
        self.m.unwrap_or_else(|| task.default_m())
    }

    pub fn validate(&self, task: Task) -> Result<()> {
        let views = all_permutations(task).len();
        let m = self.m_for(task);
        if m == 0 || m > views {
            return Err(Error::Config(format!(
                "m = {m} must lie in 1..={views} for {task}"
            )));
        }
        if self.sc_samples == 0 {
            return Err(Error::Config("sc_samples must be positive".into()));
        }
        if self.sc_temperature.is_nan() || self.sc_temperature <= 0.0 {
            return Err(Error::Config("sc_temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eff_quantile) {
            return Err(Error::Config("eff_quantile must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One decoded view and the tuples it yields.
#[derive(Debug, Clone)]
pub struct ViewPrediction {
    pub permutation_id: String,
    pub sample: Option<u32>,
    pub record: GenerationRecord,
    pub tuples: TupleSet,
}

impl ViewPrediction {
    pub fn mean_entropy(&self) -> f64 {
        self.record.mean_entropy
    }
}

/// Ranks views by mean entropy, ties by permutation id then sample index,
/// and keeps the first `m`.
pub fn select_top_m(views: &[ViewPrediction], m: usize) -> Result<Vec<&ViewPrediction>> {
    Ok(select_indices(views, m)?.into_iter().map(|i| &views[i]).collect())
}

fn select_indices(views: &[ViewPrediction], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > views.len() {
        return Err(Error::Config(format!(
            "cannot select {m} of {} views",
            views.len()
        )));
    }
    let mut order: Vec<usize> = (0..views.len()).collect();
    order.sort_by(|&a, &b| {
        let (va, vb) = (&views[a], &views[b]);
        va.mean_entropy()
            .total_cmp(&vb.mean_entropy())
            .then_with(|| va.permutation_id.cmp(&vb.permutation_id))
            .then_with(|| va.sample.cmp(&vb.sample))
    });
    order.truncate(m);
    Ok(order)
}

/// Outcome of a vote.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vote {
    pub tuples: TupleSet,
    /// Number of views containing each tuple, in first-seen order.
    pub counts: IndexMap<SentimentTuple, usize>,
}

/// Keeps each tuple found in strictly more than half of the given sets.
pub fn vote<'a>(sets: impl IntoIterator<Item = &'a TupleSet>) -> Vote {
    let mut counts: IndexMap<SentimentTuple, usize> = IndexMap::new();
    let mut m = 0usize;
    for set in sets {
        m += 1;
        for t in set {
            *counts.entry(t.clone()).or_default() += 1;
        }
    }
    // count > m / 2, kept in integers
    let tuples = counts
        .iter()
        .filter(|(_, &c)| 2 * c > m)
        .map(|(t, _)| t.clone())
        .collect();
    Vote { tuples, counts }
}

pub fn majority_vote(selected: &[&ViewPrediction]) -> Vote {
    vote(selected.iter().map(|v| &v.tuples))
}

/// Final prediction for one instance.
#[derive(Debug, Clone)]
pub struct AggregatedPrediction {
    pub instance_id: String,
    /// Strategy that produced this prediction.
    pub strategy: Strategy,
    pub m: usize,
    pub tuples: TupleSet,
    pub views: Vec<ViewPrediction>,
    /// Indices into `views`, most confident first.
    pub selected: Vec<usize>,
    pub vote_counts: IndexMap<SentimentTuple, usize>,
}

impl AggregatedPrediction {
    fn from_views(
        instance_id: &str,
        strategy: Strategy,
        views: Vec<ViewPrediction>,
        m: usize,
    ) -> Result<Self> {
        let selected = select_indices(&views, m)?;
        let v = vote(selected.iter().map(|&i| &views[i].tuples));
        Ok(Self {
            instance_id: instance_id.to_owned(),
            strategy,
            m,
            tuples: v.tuples,
            views,
            selected,
            vote_counts: v.counts,
        })
    }

    pub fn selected_views(&self) -> impl Iterator<Item = &ViewPrediction> {
        self.selected.iter().map(|&i| &self.views[i])
    }

    /// Mean emitted-token probability of the first view.
    pub fn confidence(&self) -> f64 {
        self.views.first().map_or(0.0, |v| v.record.mean_confidence())
    }

    pub fn to_record(&self) -> PredictionRecord {
        PredictionRecord {
            id: self.instance_id.clone(),
            strategy: self.strategy,
            m: self.m,
            tuples: self.tuples.iter().cloned().collect(),
            votes: self
                .vote_counts
                .iter()
                .map(|(t, &count)| VoteRecord {
                    tuple: t.clone(),
                    count,
                })
                .collect(),
            views: self
                .views
                .iter()
                .enumerate()
                .map(|(i, v)| ViewRecord {
                    permutation: v.permutation_id.clone(),
                    sample: v.sample,
                    text: v.record.text.clone(),
                    mean_entropy: v.record.mean_entropy,
                    mean_confidence: v.record.mean_confidence(),
                    selected: self.selected.contains(&i),
                })
                .collect(),
        }
    }
}

/// One persisted prediction line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub strategy: Strategy,
    pub m: usize,
    pub tuples: Vec<SentimentTuple>,
    pub votes: Vec<VoteRecord>,
    pub views: Vec<ViewRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub tuple: SentimentTuple,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub permutation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<u32>,
    pub text: String,
    pub mean_entropy: f64,
    pub mean_confidence: f64,
    pub selected: bool,
}

/// Run-wide knobs that do not affect predictions.
#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub seed: u64,
    pub prefix_grouping: bool,
    pub max_in_flight: usize,
    pub max_tokens: usize,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            prefix_grouping: true,
            max_in_flight: 8,
            max_tokens: 512,
            cancel: None,
        }
    }
}

/// Result of running a strategy over a batch.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Completed predictions in input order.
    pub predictions: Vec<AggregatedPrediction>,
    pub ledger: CostLedger,
    /// Instances escalated to mvp under mvp_eff.
    pub escalated: Vec<String>,
    pub cancelled: bool,
}

/// One view to decode.
#[derive(Debug, Clone)]
struct ViewPlan {
    instance: usize,
    permutation: Permutation,
    sample: Option<u32>,
    temperature: f64,
    seed: u64,
}

/// Batch pipeline over one dataset, task and shot sample.
pub struct Engine<'a> {
    task: Task,
    dataset: String,
    terminals: Arc<DatasetTerminals>,
    template: PromptTemplate,
    shots: Vec<Instance>,
    shot_sample_id: String,
    backend: &'a dyn LanguageModel,
    config: ViewSelectionConfig,
    options: EngineOptions,
}

impl<'a> Engine<'a> {
    pub fn new(
        task: Task,
        dataset: impl Into<String>,
        categories: CategorySet,
        backend: &'a dyn LanguageModel,
    ) -> Self {
        Self {
            task,
            dataset: dataset.into(),
            terminals: Arc::new(DatasetTerminals::new(categories)),
            template: PromptTemplate::default(),
            shots: Vec::new(),
            shot_sample_id: "k0".into(),
            backend,
            config: ViewSelectionConfig::default(),
            options: EngineOptions::default(),
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_shots(mut self, shots: Vec<Instance>, sample_id: impl Into<String>) -> Self {
        self.shots = shots;
        self.shot_sample_id = sample_id.into();
        self
    }

    pub fn with_config(mut self, config: ViewSelectionConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_options(mut self, options: EngineOptions) -> Self {
        self.options = options;
        self
    }

    pub fn config(&self) -> &ViewSelectionConfig {
        &self.config
    }

    /// Runs the configured strategy over `instances`.
    pub fn run(&self, instances: &[Instance]) -> Result<RunOutput> {
        self.run_strategy(instances, self.config.strategy)
    }

    pub fn run_strategy(&self, instances: &[Instance], strategy: Strategy) -> Result<RunOutput> {
        self.config.validate(self.task)?;
        match strategy {
            Strategy::MvpEff => self.run_eff(instances),
            s => self.run_plain(instances, s),
        }
    }

    pub fn run_mvp(&self, instance: &Instance) -> Result<AggregatedPrediction> {
        self.run_one(instance, Strategy::Mvp)
    }

    pub fn run_single_order(&self, instance: &Instance) -> Result<AggregatedPrediction> {
        self.run_one(instance, Strategy::SingleOrder)
    }

    pub fn run_self_consistency(&self, instance: &Instance) -> Result<AggregatedPrediction> {
        self.run_one(instance, Strategy::SelfConsistency)
    }

    pub fn run_mvp_eff(&self, instances: &[Instance]) -> Result<RunOutput> {
        self.run_strategy(instances, Strategy::MvpEff)
    }

    fn run_one(&self, instance: &Instance, strategy: Strategy) -> Result<AggregatedPrediction> {
        let out = self.run_strategy(std::slice::from_ref(instance), strategy)?;
        out.predictions.into_iter().next().ok_or(Error::Cancelled)
    }

    fn sample_seed(&self, sample: u32) -> u64 {
        self.options
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u64::from(sample) + 1)
    }

    fn plan(&self, instances: &[Instance], strategy: Strategy) -> (Vec<ViewPlan>, usize) {
        let identity = Permutation::identity(self.task);
        let mut plan = Vec::new();
        let m = match strategy {
            Strategy::Mvp | Strategy::MvpEff => {
                let perms = all_permutations(self.task);
                for i in 0..instances.len() {
                    plan.extend(perms.iter().map(|p| ViewPlan {
                        instance: i,
                        permutation: p.clone(),
                        sample: None,
                        temperature: 0.0,
                        seed: self.options.seed,
                    }));
                }
                self.config.m_for(self.task)
            }
            Strategy::SingleOrder => {
                plan.extend((0..instances.len()).map(|i| ViewPlan {
                    instance: i,
                    permutation: identity.clone(),
                    sample: None,
                    temperature: 0.0,
                    seed: self.options.seed,
                }));
                1
            }
            Strategy::SelfConsistency => {
                for i in 0..instances.len() {
                    plan.extend((0..self.config.sc_samples as u32).map(|s| ViewPlan {
                        instance: i,
                        permutation: identity.clone(),
                        sample: Some(s),
                        temperature: self.config.sc_temperature,
                        seed: self.sample_seed(s),
                    }));
                }
                self.config.sc_samples
            }
        };
        (plan, m)
    }

    fn run_plain(&self, instances: &[Instance], strategy: Strategy) -> Result<RunOutput> {
        let (plan, m) = self.plan(instances, strategy);
        let (results, ledger) = self.decode(instances, &plan)?;
        let mut per_instance: Vec<Vec<ViewPrediction>> = vec![Vec::new(); instances.len()];
        let mut incomplete = vec![false; instances.len()];
        for (p, r) in plan.iter().zip(results) {
            match r {
                Some(v) => per_instance[p.instance].push(v),
                None => incomplete[p.instance] = true,
            }
        }
        let mut predictions = Vec::with_capacity(instances.len());
        for (i, views) in per_instance.into_iter().enumerate() {
            if incomplete[i] {
                continue;
            }
            predictions.push(AggregatedPrediction::from_views(
                &instances[i].id,
                strategy,
                views,
                m,
            )?);
        }
        Ok(RunOutput {
            cancelled: incomplete.iter().any(|&c| c),
            predictions,
            ledger,
            escalated: Vec::new(),
        })
    }

    fn run_eff(&self, instances: &[Instance]) -> Result<RunOutput> {
        let first = self.run_plain(instances, Strategy::SingleOrder)?;
        if first.cancelled {
            return Ok(first);
        }
        let n_escalate = (self.config.eff_quantile * instances.len() as f64 + 1e-9).floor() as usize;
        let mut ranked: Vec<&AggregatedPrediction> = first.predictions.iter().collect();
        ranked.sort_by(|a, b| {
            a.confidence()
                .total_cmp(&b.confidence())
                .then_with(|| a.instance_id.cmp(&b.instance_id))
        });
        let escalate: HashSet<String> = ranked[..n_escalate.min(ranked.len())]
            .iter()
            .map(|p| p.instance_id.clone())
            .collect();
        let subset: Vec<Instance> = instances
            .iter()
            .filter(|i| escalate.contains(&i.id))
            .cloned()
            .collect();
        let second = self.run_plain(&subset, Strategy::Mvp)?;

        let mut upgraded: HashMap<String, AggregatedPrediction> = second
            .predictions
            .into_iter()
            .map(|p| (p.instance_id.clone(), p))
            .collect();
        let mut ledger = first.ledger;
        ledger.merge(&second.ledger);
        let escalated: Vec<String> = subset.iter().map(|i| i.id.clone()).collect();
        let mut predictions = Vec::with_capacity(first.predictions.len());
        for p in first.predictions {
            if escalate.contains(&p.instance_id) {
                if let Some(up) = upgraded.remove(&p.instance_id) {
                    predictions.push(up);
                }
            } else {
                predictions.push(p);
            }
        }
        Ok(RunOutput {
            predictions,
            ledger,
            escalated,
            cancelled: second.cancelled,
        })
    }

    /// Decodes every planned view. Slots are `None` for requests skipped after
    /// cancellation.
    fn decode(
        &self,
        instances: &[Instance],
        plan: &[ViewPlan],
    ) -> Result<(Vec<Option<ViewPrediction>>, CostLedger)> {
        let mut terminals: HashMap<usize, Arc<InstanceTerminals>> = HashMap::new();
        let mut prefixes: HashMap<String, Arc<str>> = HashMap::new();
        let mut requests = Vec::with_capacity(plan.len());
        let mut schemas = Vec::with_capacity(plan.len());
        for p in plan {
            let instance = &instances[p.instance];
            let inst_terms = match terminals.get(&p.instance) {
                Some(t) => t.clone(),
                None => {
                    let t = Arc::new(InstanceTerminals::from_sentence(&instance.text)?);
                    terminals.insert(p.instance, t.clone());
                    t
                }
            };
            let perm_id = p.permutation.id();
            let prefix = match prefixes.get(&perm_id) {
                Some(prefix) => prefix.clone(),
                None => {
                    let prefix: Arc<str> = render_prefix(
                        &self.template,
                        &p.permutation,
                        self.terminals.categories(),
                        &self.shots,
                    )?
                    .into();
                    prefixes.insert(perm_id.clone(), prefix.clone());
                    prefix
                }
            };
            let schema = TupleSchema::new(p.permutation.clone(), inst_terms, self.terminals.clone());
            let mut request = DecodeRequest::new("", Some(schema.clone()));
            request.temperature = p.temperature;
            request.seed = Some(p.seed);
            request.max_tokens = self.options.max_tokens;
            request.tags = RequestTags {
                instance_id: instance.id.clone(),
                permutation_id: perm_id.clone(),
                sample: p.sample,
            };
            let key = GroupKey {
                dataset: self.dataset.clone(),
                task: self.task,
                permutation_id: perm_id,
                shot_sample_id: self.shot_sample_id.clone(),
            };
            requests.push(ScheduledRequest::new(key, prefix, render_suffix(instance), request));
            schemas.push(schema);
        }

        let counter = ModelTokenCounter(self.backend);
        let groups = scheduler::schedule(&requests, &counter, self.options.prefix_grouping)?;
        let mut ledger = scheduler::account(&groups, &requests, &counter, self.options.prefix_grouping);
        let results = scheduler::dispatch(
            &groups,
            &requests,
            self.backend,
            self.options.max_in_flight,
            self.options.cancel.as_deref(),
        )?;

        let mut views = Vec::with_capacity(plan.len());
        for ((p, result), schema) in plan.iter().zip(results).zip(&schemas) {
            let view_err = |source: BackendError| Error::View {
                instance: instances[p.instance].id.clone(),
                view: match p.sample {
                    Some(s) => format!("{}#{s}", p.permutation.id()),
                    None => p.permutation.id(),
                },
                source,
            };
            let Some(result) = result else {
                views.push(None);
                continue;
            };
            let record = result.map_err(view_err)?;
            let tuples = parse_tuples(&record.text, schema).map_err(|e| view_err(e.into()))?;
            ledger.generated_tokens += record.len() as u64;
            views.push(Some(ViewPrediction {
                permutation_id: p.permutation.id(),
                sample: p.sample,
                record,
                tuples,
            }));
        }
        Ok((views, ledger))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{LocalDecoder, OracleConfig, OracleModel, ViewOverride};
    use crate::types::Polarity;
    use crate::vocab::TokenizerVocabulary;

    fn tuple(a: &str, p: Polarity) -> SentimentTuple {
        SentimentTuple::quad(a, "food#quality", "good", p)
    }

    fn view(perm: &str, h: f64, tuples: &[SentimentTuple]) -> ViewPrediction {
        ViewPrediction {
            permutation_id: perm.into(),
            sample: None,
            record: GenerationRecord {
                tokens: vec![],
                text: String::new(),
                per_token: vec![],
                per_token_entropy: vec![],
                raw_entropy: None,
                mean_entropy: h,
                per_token_confidence: vec![],
            },
            tuples: tuples.iter().cloned().collect(),
        }
    }

    #[test]
    fn selects_lowest_entropies() {
        let views = vec![view("a", 0.2, &[]), view("b", 0.9, &[]), view("c", 0.1, &[]), view("d", 0.5, &[])];
        let ids: Vec<_> = select_top_m(&views, 2).unwrap().iter().map(|v| v.permutation_id.as_str()).collect();
        assert_eq!(ids, ["c", "a"]);
        assert_eq!(select_top_m(&views, 4).unwrap().len(), 4);
        assert!(select_top_m(&views, 5).is_err());
        assert!(select_top_m(&views, 0).is_err());
    }

    #[test]
    fn ties_follow_permutation_id_order() {
        let ids = ["ac-p-at", "ac-at-p", "p-at-ac", "at-ac-p"];
        let views: Vec<_> = ids.iter().map(|id| view(id, 0.3, &[])).collect();
        let got: Vec<_> = select_top_m(&views, 3).unwrap().iter().map(|v| v.permutation_id.clone()).collect();
        assert_eq!(got, ["ac-at-p", "ac-p-at", "at-ac-p"]);
    }

    #[test]
    fn strict_majority() {
        let a = tuple("a", Polarity::Positive);
        let with: TupleSet = [a.clone()].into_iter().collect();
        let without = TupleSet::new();
        let count = |k: usize, m: usize| {
            let sets: Vec<&TupleSet> = (0..m).map(|i| if i < k { &with } else { &without }).collect();
            vote(sets).tuples.contains(&a)
        };
        assert!(count(3, 5));
        assert!(!count(2, 5));
        assert!(count(1, 1));
        assert!(!count(2, 4));
        assert!(count(3, 4));
        let v = vote([&with, &with, &without]);
        assert_eq!(v.counts[&a], 2);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::Mvp, Strategy::SingleOrder, Strategy::SelfConsistency, Strategy::MvpEff] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("best".parse::<Strategy>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ViewSelectionConfig::default();
        assert_eq!(c.m_for(Task::Tasd), 5);
        assert_eq!(c.m_for(Task::Asqp), 17);
        c.m = Some(7);
        assert!(c.validate(Task::Tasd).is_err());
        assert!(c.validate(Task::Asqp).is_ok());
        c.eff_quantile = 1.5;
        assert!(c.validate(Task::Asqp).is_err());
    }

    const SENTENCE: &str = "The wine list is excellent, but the service was slow.";

    fn instances() -> Vec<Instance> {
        vec![
            Instance::new("a", SENTENCE).with_gold([
                SentimentTuple::quad("wine list", "drinks#style", "excellent", Polarity::Positive),
                SentimentTuple::quad("service", "service#general", "slow", Polarity::Negative),
            ]),
            Instance::new("b", "Great pizza").with_gold([SentimentTuple::quad(
                "pizza",
                "food#quality",
                "Great",
                Polarity::Positive,
            )]),
        ]
    }

    fn oracle(cfg_fn: impl FnOnce(&mut OracleConfig)) -> LocalDecoder<OracleModel> {
        let gold = instances()
            .into_iter()
            .map(|i| (i.id.clone(), i.gold.unwrap()))
            .collect();
        let mut cfg = OracleConfig::noiseless(gold);
        cfg_fn(&mut cfg);
        let texts: Vec<String> = instances().into_iter().map(|i| i.text).collect();
        LocalDecoder::new(OracleModel::new(cfg, TokenizerVocabulary::simulator(texts.iter().map(String::as_str))))
    }

    fn categories() -> CategorySet {
        CategorySet::new(["drinks#style", "service#general", "food#quality"]).unwrap()
    }

    #[test]
    fn noiseless_mvp_recovers_gold_with_canonical_tie_break() {
        let backend = oracle(|_| {});
        let engine = Engine::new(Task::Asqp, "toy", categories(), &backend);
        let pred = engine.run_mvp(&instances()[0]).unwrap();
        assert_eq!(pred.tuples, instances()[0].gold.clone().unwrap());
        assert_eq!(pred.views.len(), 24);
        assert_eq!(pred.selected.len(), 17);
        let perms = all_permutations(Task::Asqp);
        let chosen: Vec<String> = pred.selected_views().map(|v| v.permutation_id.clone()).collect();
        let expected: Vec<String> = perms[..17].iter().map(Permutation::id).collect();
        assert_eq!(chosen, expected);
        assert!(pred.views.iter().all(|v| v.mean_entropy() == 0.0));
    }

    #[test]
    fn inflated_corrupt_views_are_excluded() {
        let perms = all_permutations(Task::Asqp);
        let backend = oracle(|cfg| {
            cfg.default.clean_entropy = 0.05;
            cfg.default.corrupt_entropy = 0.8;
            for p in [&perms[0], &perms[5]] {
                cfg.views.push(ViewOverride {
                    instance: "a".into(),
                    permutation: p.id(),
                    sample: None,
                    probability: Some(1.0),
                    clean_entropy: None,
                    corrupt_entropy: None,
                });
            }
        });
        let engine = Engine::new(Task::Asqp, "toy", categories(), &backend);
        let pred = engine.run_mvp(&instances()[0]).unwrap();
        assert_eq!(pred.tuples, instances()[0].gold.clone().unwrap());
        let chosen: Vec<String> = pred.selected_views().map(|v| v.permutation_id.clone()).collect();
        assert!(!chosen.contains(&perms[0].id()));
        assert!(!chosen.contains(&perms[5].id()));
    }

    #[test]
    fn single_order_uses_the_natural_order() {
        let backend = oracle(|_| {});
        let engine = Engine::new(Task::Asqp, "toy", categories(), &backend);
        let pred = engine.run_single_order(&instances()[1]).unwrap();
        assert_eq!(pred.views.len(), 1);
        assert_eq!(pred.views[0].permutation_id, "at-ac-ot-p");
        assert_eq!(pred.tuples, instances()[1].gold.clone().unwrap());
    }

    #[test]
    fn self_consistency_outvotes_two_bad_samples() {
        let backend = oracle(|cfg| {
            for s in [1, 3] {
                cfg.views.push(ViewOverride {
                    instance: "a".into(),
                    permutation: "at-ac-ot-p".into(),
                    sample: Some(s),
                    probability: Some(1.0),
                    clean_entropy: None,
                    corrupt_entropy: None,
                });
            }
        });
        let engine = Engine::new(Task::Asqp, "toy", categories(), &backend);
        let pred = engine.run_self_consistency(&instances()[0]).unwrap();
        assert_eq!(pred.views.len(), 5);
        assert_eq!(pred.tuples, instances()[0].gold.clone().unwrap());
        let bad = pred.views.iter().filter(|v| v.tuples != pred.tuples).count();
        assert_eq!(bad, 2);
        assert!(pred.vote_counts.values().any(|&c| c == 3));
    }

    #[test]
    fn grouping_changes_cost_not_predictions() {
        let backend = oracle(|cfg| cfg.default.clean_entropy = 0.3);
        let run = |grouping: bool| {
            Engine::new(Task::Asqp, "toy", categories(), &backend)
                .with_options(EngineOptions {
                    prefix_grouping: grouping,
                    ..EngineOptions::default()
                })
                .run(&instances())
                .unwrap()
        };
        let (a, b) = (run(true), run(false));
        let recs = |o: &RunOutput| o.predictions.iter().map(|p| p.to_record()).collect::<Vec<_>>();
        assert_eq!(recs(&a), recs(&b));
        assert!(a.ledger.prefill_tokens_cached < b.ledger.prefill_tokens_cached);
        assert_eq!(a.ledger.prefill_tokens_uncached, b.ledger.prefill_tokens_uncached);
        assert_eq!(a.ledger.groups, 24);
        assert_eq!(b.ledger.groups, 48);
        assert!(a.ledger.generated_tokens > 0);
    }

    #[test]
    fn eff_escalates_lowest_confidence_first() {
        let backend = oracle(|cfg| {
            cfg.views.push(ViewOverride {
                instance: "b".into(),
                permutation: "at-ac-ot-p".into(),
                sample: None,
                probability: None,
                clean_entropy: Some(0.6),
                corrupt_entropy: None,
            });
        });
        let engine = Engine::new(Task::Asqp, "toy", categories(), &backend).with_config(ViewSelectionConfig {
            eff_quantile: 0.5,
            ..ViewSelectionConfig::default()
        });
        let out = engine.run_mvp_eff(&instances()).unwrap();
        assert_eq!(out.escalated, ["b"]);
        assert_eq!(out.predictions[0].strategy, Strategy::SingleOrder);
        assert_eq!(out.predictions[1].strategy, Strategy::Mvp);
        assert_eq!(out.predictions[1].instance_id, "b");
    }

    #[test]
    fn backend_failures_name_the_view() {
        let backend = oracle(|cfg| {
            cfg.instances.remove("b");
        });
        let engine = Engine::new(Task::Asqp, "toy", categories(), &backend);
        let err = engine.run_single_order(&instances()[1]).unwrap_err();
        assert!(matches!(err, Error::View { ref instance, ref view, .. } if instance == "b" && view == "at-ac-ot-p"));
    }

    #[test]
    fn cancelled_runs_keep_nothing_partial() {
        let backend = oracle(|_| {});
        let flag = Arc::new(AtomicBool::new(true));
        let engine = Engine::new(Task::Asqp, "toy", categories(), &backend).with_options(EngineOptions {
            cancel: Some(flag),
            ..EngineOptions::default()
        });
        let out = engine.run(&instances()).unwrap();
        assert!(out.cancelled);
        assert!(out.predictions.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pool() -> Vec<SentimentTuple> {
            ["a", "b", "c", "d"].iter().map(|a| tuple(a, Polarity::Positive)).collect()
        }

        fn sets() -> impl Strategy<Value = Vec<TupleSet>> {
            prop::collection::vec(prop::collection::vec(any::<bool>(), 4), 1..9).prop_map(|rows| {
                rows.into_iter()
                    .map(|row| pool().into_iter().zip(row).filter(|(_, b)| *b).map(|(t, _)| t).collect())
                    .collect()
            })
        }

        use proptest::strategy::Strategy;

        proptest! {
            #[test]
            fn vote_ignores_view_order(mut s in sets(), seed in any::<u64>()) {
                let before = vote(&s).tuples;
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                s.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(vote(&s).tuples, before);
            }

            #[test]
            fn adding_support_never_removes(s in sets(), extra in 0usize..4) {
                let t = pool()[extra].clone();
                let count_before = vote(&s).counts.get(&t).copied().unwrap_or(0);
                let mut more = s.clone();
                for set in more.iter_mut() {
                    if !set.contains(&t) {
                        set.insert(t.clone());
                        break;
                    }
                }
                let after = vote(&more);
                prop_assert!(after.counts.get(&t).copied().unwrap_or(0) >= count_before);
                if vote(&s).tuples.contains(&t) {
                    prop_assert!(after.tuples.contains(&t));
                }
            }

            #[test]
            fn selection_is_rank_invariant(hs in prop::collection::vec(0.0f64..3.0, 1..10), m in 1usize..10) {
                let m = m.min(hs.len());
                let views: Vec<_> = hs.iter().enumerate().map(|(i, &h)| view(&format!("v{i:02}"), h, &[])).collect();
                let scaled: Vec<_> = hs.iter().enumerate().map(|(i, &h)| view(&format!("v{i:02}"), 3.0 * h.exp() + 1.0, &[])).collect();
                let ids = |v: &[ViewPrediction]| select_top_m(v, m).unwrap().iter().map(|x| x.permutation_id.clone()).collect::<Vec<_>>();
                prop_assert_eq!(ids(&views), ids(&scaled));
            }
        }
    }
}
