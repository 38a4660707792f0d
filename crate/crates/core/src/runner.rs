//! Run configuration, dataset IO and the run directory layout.
//!
//! A run directory holds `config.toml` (the resolved configuration), one
//! `seed-<n>/` directory per seed with `predictions.jsonl`, `ledger.json`
//! and `metadata.json`, and `report.json` / `report.txt` when the test set
//! carries labels.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{
    LanguageModel, LocalDecoder, OracleConfig, OracleModel, RemoteBackend, RemoteConfig,
    DEFAULT_MAX_CONTEXT,
};
use crate::error::{DataError, Error, Result};
use crate::eval::{self, RunMetadata, RunReport, METADATA_FILE, PREDICTIONS_FILE};
use crate::multiview::{AggregatedPrediction, Engine, EngineOptions, Strategy, ViewSelectionConfig};
use crate::prompt::PromptTemplate;
use crate::scheduler::{CostLedger, LedgerReport};
use crate::grammar::{DatasetTerminals, InstanceTerminals, TupleSchema};
use crate::types::{CategorySet, Instance, Permutation, ShotConfig, Task, NULL_ASPECT};
use crate::vocab::TokenizerVocabulary;

/// Environment variable holding the remote endpoint's API key.
pub const API_KEY_ENV: &str = "ABSA_MVP_API_KEY";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const LEDGER_FILE: &str = "ledger.json";

/// Which model answers decode requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    /// Deterministic simulator. Without a config file the oracle answers
    /// with the test set's own labels.
    Oracle {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config: Option<PathBuf>,
    },
    Remote(RemoteConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Oracle { config: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Dataset name used in prefix-group keys and reports.
    #[serde(default = "default_dataset")]
    pub dataset: String,
    /// Test instances, JSONL.
    pub test: PathBuf,
    /// Demonstration pool, JSONL. Required when `k > 0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// JSON array of category names.
    pub categories: PathBuf,
    #[serde(default)]
    pub k: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, flatten)]
    pub selection: ViewSelectionConfig,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub prefix_grouping: bool,
    #[serde(default = "default_max_context")]
    pub max_context: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_dataset() -> String {
    "dataset".into()
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_true() -> bool {
    true
}

fn default_max_context() -> usize {
    DEFAULT_MAX_CONTEXT
}

fn default_max_tokens() -> usize {
    512
}

fn default_in_flight() -> usize {
    8
}

impl RunConfig {
    /// Minimal configuration; everything else takes its default.
    pub fn new(task: Task, test: PathBuf, categories: PathBuf, output_dir: PathBuf) -> Self {
        Self {
            task,
            dataset: default_dataset(),
            test,
            train: None,
            categories,
            k: 0,
            seeds: default_seeds(),
            selection: ViewSelectionConfig::default(),
            backend: BackendSpec::default(),
            template_dir: None,
            output_dir,
            prefix_grouping: true,
            max_context: DEFAULT_MAX_CONTEXT,
            max_tokens: default_max_tokens(),
            max_in_flight: default_in_flight(),
        }
    }

    /// Loads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.resolve_relative_to(base);
        }
        Ok(config)
    }

    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.test);
        fix(&mut self.categories);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.train {
            fix(p);
        }
        if let Some(p) = &mut self.template_dir {
            fix(p);
        }
        if let BackendSpec::Oracle { config: Some(p) } = &mut self.backend {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let must_exist = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} file {} does not exist", p.display())))
            }
        };
        must_exist(&self.test, "test")?;
        must_exist(&self.categories, "categories")?;
        match (&self.train, self.k) {
            (Some(p), _) => must_exist(p, "train")?,
            (None, k) if k > 0 => {
                return Err(Error::Config(format!("k = {k} needs a train file")));
            }
            _ => {}
        }
        if let Some(dir) = &self.template_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "template directory {} does not exist",
                    dir.display()
                )));
            }
        }
        if let BackendSpec::Oracle { config: Some(p) } = &self.backend {
            must_exist(p, "oracle config")?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let unique: HashSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.max_tokens == 0 || self.max_tokens >= self.max_context {
            return Err(Error::Config(format!(
                "max_tokens {} must be positive and below max_context {}",
                self.max_tokens, self.max_context
            )));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        self.selection.validate(self.task)
    }
}

/// Reads a JSONL file of instances.
pub fn load_instances(path: &Path) -> Result<Vec<Instance>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(line).map_err(|source| DataError::Json {
            path: path.to_owned(),
            line: n + 1,
            source,
        })?;
        if !ids.insert(inst.id.clone()) {
            return Err(DataError::Invalid(format!(
                "{}:{}: duplicate instance id `{}`",
                path.display(),
                n + 1,
                inst.id
            )));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_instances(path: &Path, instances: &[Instance]) -> Result<(), DataError> {
    let mut text = String::new();
    for inst in instances {
        text.push_str(&serde_json::to_string(inst).expect("instances serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads a JSON array of category names.
pub fn load_categories(path: &Path) -> Result<CategorySet, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let names: Vec<String> = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_owned(),
        line: 1,
        source,
    })?;
    CategorySet::new(names)
}

/// Serializes predictions as JSONL, one line per instance.
pub fn predictions_jsonl(predictions: &[AggregatedPrediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(&p.to_record()).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    f.write_all(contents.as_bytes())
        .map_err(|source| DataError::Io {
            path: path.to_owned(),
            source,
        })?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| {
        DataError::Io {
            path: path.to_owned(),
            source,
        }
        .into()
    })
}

/// Ids of labelled instances with a gold tuple the output grammar cannot
/// emit, such as an opinion term that is not a phrase of the sentence.
pub fn unreachable_gold(
    task: Task,
    instances: &[Instance],
    categories: &CategorySet,
) -> Result<Vec<String>> {
    let dataset = Arc::new(DatasetTerminals::new(categories.clone()));
    let mut ids = Vec::new();
    for inst in instances {
        let Some(gold) = &inst.gold else { continue };
        let schema = TupleSchema::new(
            Permutation::identity(task),
            Arc::new(InstanceTerminals::from_sentence(&inst.text)?),
            Arc::clone(&dataset),
        );
        let emittable = gold.iter().all(|t| {
            task.elements()
                .iter()
                .all(|&k| schema.admits(k, t.element(k).unwrap_or(NULL_ASPECT)))
        });
        if !emittable {
            ids.push(inst.id.clone());
        }
    }
    Ok(ids)
}

/// Builds the configured backend.
pub fn build_backend(
    config: &RunConfig,
    test: &[Instance],
    train: &[Instance],
) -> Result<Box<dyn LanguageModel>> {
    match &config.backend {
        BackendSpec::Oracle { config: path } => {
            let mut oracle = match path {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|source| DataError::Io {
                        path: p.clone(),
                        source,
                    })?;
                    serde_json::from_str::<OracleConfig>(&text).map_err(|source| DataError::Json {
                        path: p.clone(),
                        line: 1,
                        source,
                    })?
                }
                None => OracleConfig::default(),
            };
            if oracle.instances.is_empty() {
                for inst in test {
                    let gold = inst.gold.clone().ok_or_else(|| {
                        Error::Config(format!(
                            "oracle needs labels, but test instance `{}` has none",
                            inst.id
                        ))
                    })?;
                    oracle.instances.insert(inst.id.clone(), gold);
                }
            }
            let vocab = TokenizerVocabulary::simulator(
                test.iter().chain(train).map(|i| i.text.as_str()),
            );
            Ok(Box::new(
                LocalDecoder::new(OracleModel::new(oracle, vocab)).with_max_context(config.max_context),
            ))
        }
        BackendSpec::Remote(remote) => {
            let mut remote = remote.clone();
            remote.api_key = std::env::var(API_KEY_ENV).ok();
            Ok(Box::new(RemoteBackend::new(remote)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedSummary {
    pub seed: u64,
    pub directory: PathBuf,
    pub predictions: usize,
    pub ledger: CostLedger,
    pub escalated: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub seeds: Vec<SeedSummary>,
    pub report: Option<RunReport>,
    pub cancelled: bool,
}

/// Executes a run and writes its directory. Completed instances are
/// persisted even when the run is cancelled part way.
pub fn execute(config: &RunConfig, cancel: Option<Arc<AtomicBool>>) -> Result<RunSummary> {
    config.validate()?;
    let test = load_instances(&config.test)?;
    for inst in &test {
        inst.validate(config.task)?;
    }
    let categories = load_categories(&config.categories)?;
    let unreachable = unreachable_gold(config.task, &test, &categories)?;
    if !unreachable.is_empty() {
        log::warn!(
            "{} test instance(s) have gold tuples the output grammar cannot produce (first: `{}`)",
            unreachable.len(),
            unreachable[0]
        );
    }
    let train = match &config.train {
        Some(p) => load_instances(p)?,
        None => Vec::new(),
    };
    let template = match &config.template_dir {
        Some(dir) => PromptTemplate::from_dir(dir)?,
        None => PromptTemplate::default(),
    };
    let backend = build_backend(config, &test, &train)?;

    create_dir(&config.output_dir)?;
    write_file(&config.output_dir.join(CONFIG_SNAPSHOT), &config.to_toml()?)?;

    let mut seeds = Vec::new();
    let mut cancelled = false;
    for &seed in &config.seeds {
        let shot_config = ShotConfig::new(seed, train.clone());
        let shots = shot_config.sample_shots(config.k)?;
        let engine = Engine::new(config.task, config.dataset.clone(), categories.clone(), backend.as_ref())
            .with_template(template.clone())
            .with_shots(shots, shot_config.sample_id(config.k))
            .with_config(config.selection.clone())
            .with_options(EngineOptions {
                seed,
                prefix_grouping: config.prefix_grouping,
                max_in_flight: config.max_in_flight,
                max_tokens: config.max_tokens,
                cancel: cancel.clone(),
            });
        log::info!("seed {seed}: decoding {} instances", test.len());
        let out = engine.run(&test)?;

        let dir = config.output_dir.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        write_file(&dir.join(PREDICTIONS_FILE), &predictions_jsonl(&out.predictions))?;
        let ledger = LedgerReport::from(out.ledger);
        write_file(
            &dir.join(LEDGER_FILE),
            &serde_json::to_string_pretty(&ledger).expect("ledger serializes"),
        )?;
        let metadata = RunMetadata {
            task: Some(config.task),
            dataset: Some(config.dataset.clone()),
            strategy: Some(config.selection.strategy),
            m: Some(match config.selection.strategy {
                Strategy::SingleOrder => 1,
                Strategy::SelfConsistency => config.selection.sc_samples,
                Strategy::Mvp | Strategy::MvpEff => config.selection.m_for(config.task),
            }),
            k: Some(config.k),
            seed: Some(seed),
            backend: Some(backend.name()),
            escalated: out.escalated.clone(),
            cancelled: out.cancelled,
        };
        write_file(
            &dir.join(METADATA_FILE),
            &serde_json::to_string_pretty(&metadata).expect("metadata serializes"),
        )?;
        seeds.push(SeedSummary {
            seed,
            directory: dir,
            predictions: out.predictions.len(),
            ledger: out.ledger,
            escalated: out.escalated,
        });
        if out.cancelled {
            cancelled = true;
            break;
        }
    }

    let report = if !cancelled && test.iter().all(|i| i.gold.is_some()) {
        let report = eval::report(&config.output_dir, &test)?;
        write_file(
            &config.output_dir.join("report.json"),
            &serde_json::to_string_pretty(&report).expect("report serializes"),
        )?;
        write_file(&config.output_dir.join("report.txt"), &report.to_table())?;
        Some(report)
    } else {
        None
    };
    Ok(RunSummary {
        output_dir: config.output_dir.clone(),
        seeds,
        report,
        cancelled,
    })
}
