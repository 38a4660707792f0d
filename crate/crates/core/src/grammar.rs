//! Schema-constrained output grammar.
//!
//! The output language for one sentence and one element ordering is
//!
//! ```text
//! OUTPUT := "[" TUPLE (", " TUPLE)* "]"
//! TUPLE  := "(" e1 ", " e2 ", " ... ", " ek ")"
//! at     := phrase | "NULL"
//! ot     := phrase
//! ac     := category
//! p      := "positive" | "negative" | "neutral"
//! ```
//!
//! Every terminal class is a finite string set, so the language is regular.
//! [`compile`] lowers it to an NFA built from byte tries and determinizes it
//! with the subset construction. Phrases that contain the separator `", "`
//! (or brackets) keep both readings alive until the bytes disambiguate them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{GrammarError, LexiconError};
use crate::lexicon::PhraseLexicon;
use crate::trie::{ByteTrie, TerminalTrie};
pub use crate::types::TupleSet;
use crate::types::{CategorySet, ElementKind, Permutation, Polarity, SentimentTuple, NULL_ASPECT};
use crate::vocab::{TokenId, TokenizerVocabulary};

pub const ELEMENT_SEPARATOR: &str = ", ";
pub const STOP_SEQUENCE: &str = ")]";

/// Category and polarity terminals, compiled once per dataset.
#[derive(Debug)]
pub struct DatasetTerminals {
    categories: CategorySet,
    category_trie: TerminalTrie,
    polarity_trie: TerminalTrie,
}

impl DatasetTerminals {
    pub fn new(categories: CategorySet) -> Self {
        let category_trie = TerminalTrie::from_strings(categories.iter());
        let polarity_trie = TerminalTrie::from_strings(Polarity::ALL.iter().map(|p| p.as_str()));
        Self {
            categories,
            category_trie,
            polarity_trie,
        }
    }

    pub fn categories(&self) -> &CategorySet {
        &self.categories
    }
}

/// Phrase terminals of one sentence, shared by all of its views.
#[derive(Debug)]
pub struct InstanceTerminals {
    lexicon: PhraseLexicon,
    phrase_trie: TerminalTrie,
    aspect_trie: TerminalTrie,
}

impl InstanceTerminals {
    pub fn new(lexicon: PhraseLexicon) -> Self {
        let phrase_trie = TerminalTrie::from_strings(lexicon.spans());
        let aspect_trie = TerminalTrie::from_strings(
            lexicon.spans().iter().map(String::as_str).chain([NULL_ASPECT]),
        );
        Self {
            lexicon,
            phrase_trie,
            aspect_trie,
        }
    }

    pub fn from_sentence(sentence: &str) -> Result<Self, LexiconError> {
        PhraseLexicon::build(sentence).map(Self::new)
    }

    pub fn lexicon(&self) -> &PhraseLexicon {
        &self.lexicon
    }
}

/// Everything needed to constrain one view of one sentence.
#[derive(Debug, Clone)]
pub struct TupleSchema {
    permutation: Permutation,
    instance: Arc<InstanceTerminals>,
    dataset: Arc<DatasetTerminals>,
}

impl TupleSchema {
    pub fn new(
        permutation: Permutation,
        instance: Arc<InstanceTerminals>,
        dataset: Arc<DatasetTerminals>,
    ) -> Self {
        Self {
            permutation,
            instance,
            dataset,
        }
    }

    /// Convenience constructor that builds the terminal sets from scratch.
    pub fn for_sentence(
        permutation: Permutation,
        sentence: &str,
        categories: CategorySet,
    ) -> Result<Self, LexiconError> {
        Ok(Self::new(
            permutation,
            Arc::new(InstanceTerminals::from_sentence(sentence)?),
            Arc::new(DatasetTerminals::new(categories)),
        ))
    }

    pub fn permutation(&self) -> &Permutation {
        &self.permutation
    }

    pub fn lexicon(&self) -> &PhraseLexicon {
        &self.instance.lexicon
    }

    pub fn categories(&self) -> &CategorySet {
        &self.dataset.categories
    }

    pub fn with_permutation(&self, permutation: Permutation) -> Self {
        Self {
            permutation,
            instance: Arc::clone(&self.instance),
            dataset: Arc::clone(&self.dataset),
        }
    }

    pub(crate) fn slot_trie(&self, kind: ElementKind) -> &TerminalTrie {
        match kind {
            ElementKind::AspectTerm => &self.instance.aspect_trie,
            ElementKind::OpinionTerm => &self.instance.phrase_trie,
            ElementKind::AspectCategory => &self.dataset.category_trie,
            ElementKind::Polarity => &self.dataset.polarity_trie,
        }
    }

    /// Whether a single element value belongs to its terminal class.
    pub fn admits(&self, kind: ElementKind, value: &str) -> bool {
        self.slot_trie(kind).contains(value)
    }

    /// Renders the schema as a GBNF grammar for servers that accept one.
    pub fn to_gbnf(&self) -> String {
        fn lit(s: &str) -> String {
            let mut out = String::with_capacity(s.len() + 2);
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    '\t' => out.push_str("\\t"),
                    c => out.push(c),
                }
            }
            out.push('"');
            out
        }
        fn alternatives<'a>(items: impl Iterator<Item = &'a str>) -> String {
            items.map(lit).collect::<Vec<_>>().join(" | ")
        }

        let order: Vec<&str> = self.permutation.order().iter().map(|e| e.code()).collect();
        let mut g = String::new();
        let _ = writeln!(g, "root ::= \"[\" tuple (\", \" tuple)* \"]\"");
        let _ = writeln!(
            g,
            "tuple ::= \"(\" {} \")\"",
            order.join(" \", \" ")
        );
        let spans = || self.lexicon().spans().iter().map(String::as_str);
        for kind in self.permutation.order() {
            let rule = match kind {
                ElementKind::AspectTerm => {
                    alternatives(spans().chain(std::iter::once(NULL_ASPECT)))
                }
                ElementKind::OpinionTerm => alternatives(spans()),
                ElementKind::AspectCategory => alternatives(self.categories().iter()),
                ElementKind::Polarity => alternatives(Polarity::ALL.iter().map(|p| p.as_str())),
            };
            let _ = writeln!(g, "{} ::= {}", kind.code(), rule);
        }
        g
    }
}

/// Renders tuples in the surface form of `permutation`.
pub fn format_tuples<'a>(
    tuples: impl IntoIterator<Item = &'a SentimentTuple>,
    permutation: &Permutation,
) -> String {
    let rendered: Vec<String> = tuples
        .into_iter()
        .map(|t| {
            let elems: Vec<&str> = permutation
                .order()
                .iter()
                .map(|&k| t.element(k).unwrap_or(NULL_ASPECT))
                .collect();
            format!("({})", elems.join(ELEMENT_SEPARATOR))
        })
        .collect();
    format!("[{}]", rendered.join(ELEMENT_SEPARATOR))
}

/// Deterministic byte automaton for one schema.
#[derive(Debug)]
pub struct GrammarAutomaton {
    start: u32,
    accepting: Vec<bool>,
    offsets: Vec<u32>,
    edge_bytes: Vec<u8>,
    edge_targets: Vec<u32>,
    distance: Vec<u32>,
}

impl GrammarAutomaton {
    pub fn start(&self) -> u32 {
        self.start
    }

    pub fn state_count(&self) -> usize {
        self.accepting.len()
    }

    pub fn is_accepting(&self, state: u32) -> bool {
        self.accepting[state as usize]
    }

    #[inline]
    fn edge_range(&self, state: u32) -> std::ops::Range<usize> {
        self.offsets[state as usize] as usize..self.offsets[state as usize + 1] as usize
    }

    #[inline]
    pub fn step(&self, state: u32, byte: u8) -> Option<u32> {
        let r = self.edge_range(state);
        let bytes = &self.edge_bytes[r.clone()];
        bytes
            .binary_search(&byte)
            .ok()
            .map(|i| self.edge_targets[r.start + i])
    }

    /// Outgoing `(byte, target)` edges, sorted by byte.
    pub fn transitions(&self, state: u32) -> impl Iterator<Item = (u8, u32)> + '_ {
        let r = self.edge_range(state);
        self.edge_bytes[r.clone()]
            .iter()
            .copied()
            .zip(self.edge_targets[r].iter().copied())
    }

    fn out_degree(&self, state: u32) -> usize {
        self.edge_range(state).len()
    }

    /// Fewest bytes needed to reach acceptance.
    pub fn distance_to_accept(&self, state: u32) -> u32 {
        self.distance[state as usize]
    }

    /// Runs `bytes` from the start state.
    pub fn run(&self, bytes: &[u8]) -> Result<u32, GrammarError> {
        let mut state = self.start;
        for (offset, &byte) in bytes.iter().enumerate() {
            state = self
                .step(state, byte)
                .ok_or(GrammarError::DeadTransition { offset, byte })?;
        }
        Ok(state)
    }

    pub fn accepts(&self, bytes: &[u8]) -> bool {
        matches!(self.run(bytes), Ok(s) if self.is_accepting(s))
    }

    /// Full-string check: dead byte or incomplete output.
    pub fn check(&self, output: &str) -> Result<(), GrammarError> {
        let state = self.run(output.as_bytes())?;
        if self.is_accepting(state) {
            Ok(())
        } else {
            Err(GrammarError::Incomplete {
                offset: output.len(),
            })
        }
    }
}

/// Position of an incremental decode inside an automaton.
#[derive(Debug, Clone)]
pub struct DecodeState {
    automaton: Arc<GrammarAutomaton>,
    state: u32,
    consumed: usize,
}

impl DecodeState {
    pub fn new(automaton: Arc<GrammarAutomaton>) -> Self {
        let state = automaton.start;
        Self {
            automaton,
            state,
            consumed: 0,
        }
    }

    pub fn automaton(&self) -> &Arc<GrammarAutomaton> {
        &self.automaton
    }

    pub fn state(&self) -> u32 {
        self.state
    }

    /// Bytes consumed since the start state.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn is_accepting(&self) -> bool {
        self.automaton.is_accepting(self.state)
    }

    /// Accepting with no way to continue.
    pub fn is_finished(&self) -> bool {
        self.is_accepting() && self.automaton.out_degree(self.state) == 0
    }

    pub fn distance_to_accept(&self) -> u32 {
        self.automaton.distance_to_accept(self.state)
    }

    /// Consumes `bytes`; the error offset counts from the start of the stream.
    pub fn advance(&self, bytes: &[u8]) -> Result<DecodeState, GrammarError> {
        let mut state = self.state;
        for (i, &byte) in bytes.iter().enumerate() {
            state = self
                .automaton
                .step(state, byte)
                .ok_or(GrammarError::DeadTransition {
                    offset: self.consumed + i,
                    byte,
                })?;
        }
        Ok(DecodeState {
            automaton: Arc::clone(&self.automaton),
            state,
            consumed: self.consumed + bytes.len(),
        })
    }

    /// Token ids whose full byte expansion stays inside live states, sorted.
    ///
    /// Walks the vocabulary trie and the automaton in lockstep. An empty mask
    /// from a state that is not finished means the vocabulary cannot spell
    /// what the schema requires.
    pub fn token_mask(&self, vocab: &TokenizerVocabulary) -> Result<Vec<TokenId>, GrammarError> {
        let trie = vocab.trie();
        let mut allowed = Vec::new();
        let mut stack = vec![(ByteTrie::<Vec<TokenId>>::ROOT, self.state)];
        while let Some((vnode, dstate)) = stack.pop() {
            let children = trie.children(vnode);
            let mut visit = |vnext: u32, dnext: u32| {
                if let Some(ids) = trie.value(vnext) {
                    allowed.extend_from_slice(ids);
                }
                if !trie.children(vnext).is_empty() {
                    stack.push((vnext, dnext));
                }
            };
            if children.len() <= self.automaton.out_degree(dstate) {
                for &(b, vnext) in children {
                    if let Some(dnext) = self.automaton.step(dstate, b) {
                        visit(vnext, dnext);
                    }
                }
            } else {
                for (b, dnext) in self.automaton.transitions(dstate) {
                    if let Some(vnext) = trie.child(vnode, b) {
                        visit(vnext, dnext);
                    }
                }
            }
        }
        if allowed.is_empty() && !self.is_finished() {
            return Err(GrammarError::EmptyMask { state: self.state });
        }
        allowed.sort_unstable();
        Ok(allowed)
    }
}

#[derive(Default)]
struct Nfa {
    edges: Vec<Vec<(u8, u32)>>,
    eps: Vec<Vec<u32>>,
    accepting: Vec<bool>,
}

impl Nfa {
    fn add_state(&mut self) -> u32 {
        self.edges.push(Vec::new());
        self.eps.push(Vec::new());
        self.accepting.push(false);
        (self.edges.len() - 1) as u32
    }

    fn literal(&mut self, from: u32, lit: &[u8]) -> u32 {
        let mut cur = from;
        for &b in lit {
            let next = self.add_state();
            self.edges[cur as usize].push((b, next));
            cur = next;
        }
        cur
    }

    /// Copies a trie into the NFA; returns (root, states that end a word).
    fn embed(&mut self, trie: &TerminalTrie) -> (u32, Vec<u32>) {
        let root = self.add_state();
        let mut finals = Vec::new();
        let mut stack = vec![(TerminalTrie::ROOT, root)];
        while let Some((tnode, nstate)) = stack.pop() {
            if trie.value(tnode).is_some() {
                finals.push(nstate);
            }
            for &(b, tchild) in trie.children(tnode) {
                let nchild = self.add_state();
                self.edges[nstate as usize].push((b, nchild));
                stack.push((tchild, nchild));
            }
        }
        (root, finals)
    }

    fn closure(&self, seeds: impl IntoIterator<Item = u32>) -> Vec<u32> {
        let mut seen = vec![];
        let mut stack: Vec<u32> = seeds.into_iter().collect();
        while let Some(s) = stack.pop() {
            if seen.contains(&s) {
                continue;
            }
            seen.push(s);
            stack.extend(self.eps[s as usize].iter().copied());
        }
        seen.sort_unstable();
        seen
    }
}

fn build_nfa(schema: &TupleSchema) -> (Nfa, u32) {
    let mut nfa = Nfa::default();
    let start = nfa.add_state();
    let tuple_start = nfa.literal(start, b"[");
    let open = nfa.literal(tuple_start, b"(");

    let order = schema.permutation.order();
    let mut entry = open;
    for (i, &kind) in order.iter().enumerate() {
        let (root, finals) = nfa.embed(schema.slot_trie(kind));
        nfa.eps[entry as usize].push(root);
        let exit = nfa.add_state();
        for f in finals {
            nfa.eps[f as usize].push(exit);
        }
        entry = if i + 1 < order.len() {
            nfa.literal(exit, ELEMENT_SEPARATOR.as_bytes())
        } else {
            nfa.literal(exit, b")")
        };
    }
    let after_tuple = entry;
    let done = nfa.literal(after_tuple, b"]");
    nfa.accepting[done as usize] = true;
    let again = nfa.literal(after_tuple, ELEMENT_SEPARATOR.as_bytes());
    nfa.eps[again as usize].push(tuple_start);
    (nfa, start)
}

/// Compiles a schema into a deterministic byte automaton.
pub fn compile(schema: &TupleSchema) -> Result<Arc<GrammarAutomaton>, GrammarError> {
    for &kind in schema.permutation.order() {
        if schema.slot_trie(kind).is_empty() {
            return Err(GrammarError::Unsatisfiable(format!(
                "no terminals for element `{}`",
                kind.code()
            )));
        }
    }
    let (nfa, nfa_start) = build_nfa(schema);

    let mut ids: HashMap<Vec<u32>, u32> = HashMap::new();
    let mut sets: Vec<Vec<u32>> = Vec::new();
    let start_set = nfa.closure([nfa_start]);
    ids.insert(start_set.clone(), 0);
    sets.push(start_set);

    let mut accepting = Vec::new();
    let mut offsets = vec![0u32];
    let mut edge_bytes = Vec::new();
    let mut edge_targets = Vec::new();

    let mut next = 0usize;
    while next < sets.len() {
        let set = sets[next].clone();
        next += 1;
        accepting.push(set.iter().any(|&s| nfa.accepting[s as usize]));

        let mut moves: Vec<(u8, u32)> = set
            .iter()
            .flat_map(|&s| nfa.edges[s as usize].iter().copied())
            .collect();
        moves.sort_unstable();
        moves.dedup();
        let mut i = 0;
        while i < moves.len() {
            let byte = moves[i].0;
            let mut j = i;
            while j < moves.len() && moves[j].0 == byte {
                j += 1;
            }
            let target_set = nfa.closure(moves[i..j].iter().map(|&(_, t)| t));
            let target = match ids.get(&target_set) {
                Some(&id) => id,
                None => {
                    let id = sets.len() as u32;
                    ids.insert(target_set.clone(), id);
                    sets.push(target_set);
                    id
                }
            };
            edge_bytes.push(byte);
            edge_targets.push(target);
            i = j;
        }
        offsets.push(edge_bytes.len() as u32);
    }

    let distance = distances_to_accept(&accepting, &offsets, &edge_targets);
    if distance[0] == u32::MAX {
        return Err(GrammarError::Unsatisfiable(
            "the start state cannot reach acceptance".into(),
        ));
    }
    debug_assert!(distance.iter().all(|&d| d != u32::MAX), "dead DFA state");
    Ok(Arc::new(GrammarAutomaton {
        start: 0,
        accepting,
        offsets,
        edge_bytes,
        edge_targets,
        distance,
    }))
}

fn distances_to_accept(accepting: &[bool], offsets: &[u32], targets: &[u32]) -> Vec<u32> {
    let n = accepting.len();
    let mut reverse: Vec<Vec<u32>> = vec![Vec::new(); n];
    for s in 0..n {
        for &t in &targets[offsets[s] as usize..offsets[s + 1] as usize] {
            reverse[t as usize].push(s as u32);
        }
    }
    let mut dist = vec![u32::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for (s, &acc) in accepting.iter().enumerate() {
        if acc {
            dist[s] = 0;
            queue.push_back(s as u32);
        }
    }
    while let Some(s) = queue.pop_front() {
        for &p in &reverse[s as usize] {
            if dist[p as usize] == u32::MAX {
                dist[p as usize] = dist[s as usize] + 1;
                queue.push_back(p);
            }
        }
    }
    dist
}

/// Parses a complete output into tuples in canonical element order.
///
/// Where a phrase containing `", "` or brackets makes the split ambiguous,
/// the longest value for the earliest slot wins. Repeated tuples collapse.
pub fn parse_tuples(output: &str, schema: &TupleSchema) -> Result<TupleSet, GrammarError> {
    let bytes = output.as_bytes();
    if !bytes.starts_with(b"[(") {
        return Err(GrammarError::Parse("output must start with `[(`".into()));
    }
    let mut parser = SlotParser {
        schema,
        bytes,
        failed: std::collections::HashSet::new(),
        values: Vec::new(),
    };
    if !parser.slot(2, 0) {
        return Err(GrammarError::Parse(format!(
            "`{output}` is not a tuple list under permutation {}",
            schema.permutation
        )));
    }
    let order = schema.permutation.order();
    let mut tuples = TupleSet::new();
    for chunk in parser.values.chunks(order.len()) {
        let mut aspect = None;
        let mut category = None;
        let mut opinion = None;
        let mut polarity = None;
        for (&kind, value) in order.iter().zip(chunk) {
            let value = &output[value.clone()];
            match kind {
                ElementKind::AspectTerm => aspect = Some(value.to_owned()),
                ElementKind::AspectCategory => category = Some(value.to_owned()),
                ElementKind::OpinionTerm => opinion = Some(value.to_owned()),
                ElementKind::Polarity => {
                    polarity = Some(
                        value
                            .parse::<Polarity>()
                            .map_err(|e| GrammarError::Parse(e.to_string()))?,
                    )
                }
            }
        }
        tuples.insert(SentimentTuple {
            aspect_term: aspect.expect("aspect slot present in every permutation"),
            aspect_category: category.expect("category slot present in every permutation"),
            opinion_term: opinion,
            polarity: polarity.expect("polarity slot present in every permutation"),
        });
    }
    Ok(tuples)
}

struct SlotParser<'a> {
    schema: &'a TupleSchema,
    bytes: &'a [u8],
    failed: std::collections::HashSet<(usize, usize)>,
    values: Vec<std::ops::Range<usize>>,
}

impl SlotParser<'_> {
    /// Parses slot `slot` of a tuple starting at `pos` through end of input.
    fn slot(&mut self, pos: usize, slot: usize) -> bool {
        if self.failed.contains(&(pos, slot)) {
            return false;
        }
        let order = self.schema.permutation.order();
        let trie = self.schema.slot_trie(order[slot]);
        let ends = trie.prefix_matches(&self.bytes[pos..]);
        for &len in ends.iter().rev() {
            if len == 0 {
                continue;
            }
            let end = pos + len;
            self.values.push(pos..end);
            let rest = &self.bytes[end..];
            let ok = if slot + 1 < order.len() {
                rest.starts_with(ELEMENT_SEPARATOR.as_bytes())
                    && self.slot(end + ELEMENT_SEPARATOR.len(), slot + 1)
            } else if rest == b")]" {
                true
            } else {
                rest.starts_with(b"), (") && self.slot(end + 4, 0)
            };
            if ok {
                return true;
            }
            self.values.pop();
        }
        self.failed.insert((pos, slot));
        false
    }
}
