//! Domain types shared across the pipeline: tasks, sentiment elements,
//! tuples, permutations (views), instances, category sets and demonstration
//! sampling.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexSet;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Insertion-ordered tuple set; equality ignores order.
pub type TupleSet = IndexSet<SentimentTuple>;

/// Literal marker for an implicit aspect term.
pub const NULL_ASPECT: &str = "NULL";

/// Extraction task. The arity follows from the kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// (aspect term, aspect category, polarity) triples.
    Tasd,
    /// (aspect term, aspect category, opinion term, polarity) quadruples.
    Asqp,
}

impl Task {
    pub fn arity(self) -> usize {
        self.elements().len()
    }

    /// Natural element order. Doubles as the single-order baseline view.
    pub fn elements(self) -> &'static [ElementKind] {
        use ElementKind::*;
        match self {
            Task::Tasd => &[AspectTerm, AspectCategory, Polarity],
            Task::Asqp => &[AspectTerm, AspectCategory, OpinionTerm, Polarity],
        }
    }

    /// Default number of lowest-entropy views kept for voting.
    pub fn default_m(self) -> usize {
        match self {
            Task::Tasd => 5,
            Task::Asqp => 17,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Tasd => "tasd",
            Task::Asqp => "asqp",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tasd" => Ok(Task::Tasd),
            "asqp" => Ok(Task::Asqp),
            _ => Err(DataError::Invalid(format!("unknown task `{s}`"))),
        }
    }
}

/// One sentiment element slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ElementKind {
    #[serde(rename = "at")]
    AspectTerm,
    #[serde(rename = "ac")]
    AspectCategory,
    #[serde(rename = "ot")]
    OpinionTerm,
    #[serde(rename = "p")]
    Polarity,
}

impl ElementKind {
    pub const ALL: [ElementKind; 4] = [
        ElementKind::AspectTerm,
        ElementKind::AspectCategory,
        ElementKind::OpinionTerm,
        ElementKind::Polarity,
    ];

    /// Stable short identifier.
    pub fn code(self) -> &'static str {
        match self {
            ElementKind::AspectTerm => "at",
            ElementKind::AspectCategory => "ac",
            ElementKind::OpinionTerm => "ot",
            ElementKind::Polarity => "p",
        }
    }

    /// Human-readable name used in prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            ElementKind::AspectTerm => "aspect term",
            ElementKind::AspectCategory => "aspect category",
            ElementKind::OpinionTerm => "opinion term",
            ElementKind::Polarity => "sentiment polarity",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.code() == code)
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Polarity {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Polarity::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| DataError::Invalid(format!("unknown polarity `{s}`")))
    }
}

/// One extracted sentiment record. Equality is exact and case-sensitive on
/// every field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentimentTuple {
    #[serde(rename = "at")]
    pub aspect_term: String,
    #[serde(rename = "ac")]
    pub aspect_category: String,
    #[serde(rename = "ot", default, skip_serializing_if = "Option::is_none")]
    pub opinion_term: Option<String>,
    #[serde(rename = "p")]
    pub polarity: Polarity,
}

impl SentimentTuple {
    pub fn triple(aspect: &str, category: &str, polarity: Polarity) -> Self {
        Self {
            aspect_term: aspect.to_owned(),
            aspect_category: category.to_owned(),
            opinion_term: None,
            polarity,
        }
    }

    pub fn quad(aspect: &str, category: &str, opinion: &str, polarity: Polarity) -> Self {
        Self {
            aspect_term: aspect.to_owned(),
            aspect_category: category.to_owned(),
            opinion_term: Some(opinion.to_owned()),
            polarity,
        }
    }

    pub fn is_implicit_aspect(&self) -> bool {
        self.aspect_term == NULL_ASPECT
    }

    /// Surface value of one element, `None` for an opinion term on a triple.
    pub fn element(&self, kind: ElementKind) -> Option<&str> {
        match kind {
            ElementKind::AspectTerm => Some(&self.aspect_term),
            ElementKind::AspectCategory => Some(&self.aspect_category),
            ElementKind::OpinionTerm => self.opinion_term.as_deref(),
            ElementKind::Polarity => Some(self.polarity.as_str()),
        }
    }

    /// Checks field presence against the task arity.
    pub fn fits(&self, task: Task) -> bool {
        match task {
            Task::Tasd => self.opinion_term.is_none(),
            Task::Asqp => self.opinion_term.is_some(),
        }
    }
}

/// An ordering of a task's sentiment elements; identifies one view.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Permutation {
    task: Task,
    order: Vec<ElementKind>,
}

impl Permutation {
    pub fn new(task: Task, order: Vec<ElementKind>) -> Result<Self, DataError> {
        let mut expected: Vec<_> = task.elements().to_vec();
        let mut got = order.clone();
        expected.sort();
        got.sort();
        if expected != got {
            return Err(DataError::Invalid(format!(
                "order {order:?} is not a permutation of the {task} elements"
            )));
        }
        Ok(Self { task, order })
    }

    /// The task's natural order.
    pub fn identity(task: Task) -> Self {
        Self {
            task,
            order: task.elements().to_vec(),
        }
    }

    /// Parses a canonical id such as `at-ot-ac-p`.
    pub fn parse(task: Task, id: &str) -> Result<Self, DataError> {
        let order = id
            .split('-')
            .map(|c| {
                ElementKind::from_code(c)
                    .ok_or_else(|| DataError::Invalid(format!("unknown element code `{c}` in `{id}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(task, order)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn order(&self) -> &[ElementKind] {
        &self.order
    }

    /// Canonical id: element codes joined by hyphens.
    pub fn id(&self) -> String {
        self.order.iter().map(|e| e.code()).collect::<Vec<_>>().join("-")
    }

    pub fn is_identity(&self) -> bool {
        self.order == self.task.elements()
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// All `arity!` orderings, lexicographic over element codes.
pub fn all_permutations(task: Task) -> Vec<Permutation> {
    let mut codes: Vec<ElementKind> = task.elements().to_vec();
    codes.sort_by_key(|e| e.code());
    let mut out = Vec::new();
    permute(&mut codes, 0, &mut out);
    out.sort_by_key(|order| order.iter().map(|e| e.code()).collect::<Vec<_>>());
    out.into_iter()
        .map(|order| Permutation { task, order })
        .collect()
}

fn permute(items: &mut Vec<ElementKind>, start: usize, out: &mut Vec<Vec<ElementKind>>) {
    if start == items.len() {
        out.push(items.clone());
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, out);
        items.swap(start, i);
    }
}

/// One input sentence with optional gold annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    #[serde(rename = "tuples", default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<TupleSet>,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold: None,
        }
    }

    pub fn with_gold(mut self, gold: impl IntoIterator<Item = SentimentTuple>) -> Self {
        self.gold = Some(gold.into_iter().collect());
        self
    }

    pub fn validate(&self, task: Task) -> Result<(), DataError> {
        if self.text.is_empty() {
            return Err(DataError::Invalid(format!("instance `{}` has empty text", self.id)));
        }
        if let Some(gold) = &self.gold {
            if let Some(bad) = gold.iter().find(|t| !t.fits(task)) {
                return Err(DataError::Invalid(format!(
                    "instance `{}`: tuple {bad:?} does not fit task {task}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Dataset-specific aspect categories. Ordered, duplicate-free, non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    categories: IndexSet<String>,
}

impl CategorySet {
    pub fn new<I, S>(categories: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = IndexSet::new();
        for c in categories {
            let c = c.into();
            if c.is_empty() {
                return Err(DataError::Invalid("empty category name".into()));
            }
            if !set.insert(c.clone()) {
                return Err(DataError::Invalid(format!("duplicate category `{c}`")));
            }
        }
        if set.is_empty() {
            return Err(DataError::Invalid("category set is empty".into()));
        }
        Ok(Self { categories: set })
    }

    pub fn contains(&self, category: &str) -> bool {
        self.categories.contains(category)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.categories.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Labelled demonstration pool with a sampling seed.
#[derive(Debug, Clone)]
pub struct ShotConfig {
    pub seed: u64,
    pub pool: Vec<Instance>,
}

impl ShotConfig {
    pub fn new(seed: u64, pool: Vec<Instance>) -> Self {
        Self { seed, pool }
    }

    /// Draws `k` demonstrations. The pool is shuffled once under the seed and
    /// a prefix is taken, so smaller samples are prefixes of larger ones.
    pub fn sample_shots(&self, k: usize) -> Result<Vec<Instance>, DataError> {
        if k > self.pool.len() {
            return Err(DataError::InsufficientPool {
                requested: k,
                available: self.pool.len(),
            });
        }
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        order.shuffle(&mut rng);
        Ok(order[..k].iter().map(|&i| self.pool[i].clone()).collect())
    }

    /// Identifier of the sample drawn for `k`, used in prefix-group keys.
    pub fn sample_id(&self, k: usize) -> String {
        format!("seed{}-k{}", self.seed, k)
    }
}
