//! Independent reference implementations and generators for integration
//! tests. Nothing here calls into the library's tokenizer, grammar or
//! parser, so agreement with them is meaningful.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use absa_mvp::types::{ElementKind, Instance, Polarity, SentimentTuple, Task};
use rand::seq::SliceRandom;
use rand::Rng;

/// Characters the fuzzers draw from, grouped by how the splitting rules
/// treat them. Every entry of `PUNCT` is in a Unicode punctuation category
/// (or is the ASCII hyphen); `SYMBOLS` holds non-punctuation symbols that
/// must stay inside words.
pub const PUNCT: &[char] = &[
    '.', ',', ';', ':', '!', '?', '-', '\'', '"', '(', ')', '[', ']', '{', '}', '_', '@', '#', '%',
    '&', '*', '/', '\\', '…', '«', '»', '—', '¿', '¡', '、', '。',
];
pub const SYMBOLS: &[char] = &['$', '+', '=', '<', '>', '^', '`', '|', '~', '€', '°'];
pub const ASCII_LOWER: &str = "abcdefghijklmnopqrstuvwxyz";
pub const ASCII_UPPER: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";
pub const NON_ASCII_LOWER: &[char] = &['é', 'ß', 'ñ', 'ж', 'ø', 'ü'];
pub const NON_ASCII_UPPER: &[char] = &['É', 'Ñ', 'Ж', 'Ø', 'Ü'];
pub const NON_ASCII_CASELESS: &[char] = &['日', '本', '語'];
pub const DIGITS: &str = "0123456789";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Space,
    Punct,
    Lower,
    Upper,
    Other,
}

fn class(c: char) -> Class {
    if c == ' ' || c == '\t' || c == '\u{a0}' {
        Class::Space
    } else if PUNCT.contains(&c) {
        Class::Punct
    } else if ASCII_LOWER.contains(c) || NON_ASCII_LOWER.contains(&c) {
        Class::Lower
    } else if ASCII_UPPER.contains(c) || NON_ASCII_UPPER.contains(&c) {
        Class::Upper
    } else if DIGITS.contains(c) || SYMBOLS.contains(&c) || NON_ASCII_CASELESS.contains(&c) {
        Class::Other
    } else {
        panic!("character {c:?} is outside the fuzzing alphabet")
    }
}

/// Byte ranges of boundary tokens, computed word by word: split on
/// whitespace first, then cut each word wherever the rules demand.
pub fn reference_tokens(sentence: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = sentence.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        if class(chars[i].1) == Class::Space {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && class(chars[j].1) != Class::Space {
            j += 1;
        }
        // chars[i..j] is one whitespace-delimited word
        let mut cuts = vec![i];
        for k in i + 1..j {
            let (a, b) = (chars[k - 1].1, chars[k].1);
            let cut = class(a) == Class::Punct
                || class(b) == Class::Punct
                || (class(a) == Class::Lower && class(b) == Class::Upper)
                || (a.is_ascii() != b.is_ascii());
            if cut {
                cuts.push(k);
            }
        }
        cuts.push(j);
        for w in cuts.windows(2) {
            let start = chars[w[0]].0;
            let end = if w[1] < chars.len() {
                chars[w[1]].0
            } else {
                sentence.len()
            };
            out.push((start, end));
        }
        i = j;
    }
    out
}

/// Every (i, j, substring) with i <= j, by double loop.
pub fn reference_spans(sentence: &str) -> Vec<(usize, usize, String)> {
    let toks = reference_tokens(sentence);
    let mut out = Vec::new();
    for i in 0..toks.len() {
        for j in i..toks.len() {
            out.push((i, j, sentence[toks[i].0..toks[j].1].to_owned()));
        }
    }
    out
}

pub fn random_word(rng: &mut impl Rng) -> String {
    let pick = |rng: &mut dyn rand::RngCore, s: &str| -> char {
        let cs: Vec<char> = s.chars().collect();
        cs[rng.gen_range(0..cs.len())]
    };
    let len = rng.gen_range(1..=7);
    let mut w = String::new();
    for _ in 0..len {
        let c = match rng.gen_range(0..100) {
            0..=54 => pick(rng, ASCII_LOWER),
            55..=67 => pick(rng, ASCII_UPPER),
            68..=73 => *NON_ASCII_LOWER.choose(rng).unwrap(),
            74..=76 => *NON_ASCII_UPPER.choose(rng).unwrap(),
            77..=79 => *NON_ASCII_CASELESS.choose(rng).unwrap(),
            80..=84 => pick(rng, DIGITS),
            85..=88 => *SYMBOLS.choose(rng).unwrap(),
            _ => *PUNCT.choose(rng).unwrap(),
        };
        w.push(c);
    }
    w
}

/// A sentence of 1..=max_words fuzzed words joined by varied whitespace.
pub fn random_sentence(rng: &mut impl Rng, max_words: usize) -> String {
    let n = rng.gen_range(1..=max_words);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str(match rng.gen_range(0..10) {
                0 => "  ",
                1 => "\t",
                2 => " \u{a0}",
                _ => " ",
            });
        }
        s.push_str(&random_word(rng));
    }
    s
}

/// Terminal candidates per element slot.
#[derive(Debug, Clone)]
pub struct Candidates {
    pub aspect: Vec<String>,
    pub opinion: Vec<String>,
    pub category: Vec<String>,
    pub polarity: Vec<String>,
}

impl Candidates {
    pub fn new(sentence: &str, categories: &[String]) -> Self {
        let mut phrases: Vec<String> = reference_spans(sentence).into_iter().map(|s| s.2).collect();
        phrases.sort();
        phrases.dedup();
        let mut aspect = phrases.clone();
        aspect.push("NULL".into());
        Self {
            aspect,
            opinion: phrases,
            category: categories.to_vec(),
            polarity: ["positive", "negative", "neutral"].map(String::from).to_vec(),
        }
    }

    pub fn slot(&self, kind: ElementKind) -> &[String] {
        match kind {
            ElementKind::AspectTerm => &self.aspect,
            ElementKind::OpinionTerm => &self.opinion,
            ElementKind::AspectCategory => &self.category,
            ElementKind::Polarity => &self.polarity,
        }
    }
}

/// Backtracking recognizer for `[` TUPLE (`, ` TUPLE)* `]` where each tuple
/// is `(` v1 `, ` ... vk `)` with vi drawn from its slot's candidates.
pub fn recognize(output: &str, order: &[ElementKind], cands: &Candidates) -> bool {
    let s = output.as_bytes();
    let mut failed: HashSet<(usize, usize)> = HashSet::new();

    fn tuple(
        s: &[u8],
        pos: usize,
        order: &[ElementKind],
        cands: &Candidates,
        failed: &mut HashSet<(usize, usize)>,
    ) -> bool {
        s[pos..].starts_with(b"(") && slot(s, pos + 1, 0, order, cands, failed)
    }

    fn slot(
        s: &[u8],
        pos: usize,
        k: usize,
        order: &[ElementKind],
        cands: &Candidates,
        failed: &mut HashSet<(usize, usize)>,
    ) -> bool {
        if failed.contains(&(pos, k)) {
            return false;
        }
        for c in cands.slot(order[k]) {
            if !s[pos..].starts_with(c.as_bytes()) {
                continue;
            }
            let p = pos + c.len();
            let ok = if k + 1 < order.len() {
                s[p..].starts_with(b", ") && slot(s, p + 2, k + 1, order, cands, failed)
            } else {
                s[p..].starts_with(b")") && after(s, p + 1, order, cands, failed)
            };
            if ok {
                return true;
            }
        }
        failed.insert((pos, k));
        false
    }

    fn after(
        s: &[u8],
        pos: usize,
        order: &[ElementKind],
        cands: &Candidates,
        failed: &mut HashSet<(usize, usize)>,
    ) -> bool {
        &s[pos..] == b"]" || (s[pos..].starts_with(b", ") && tuple(s, pos + 2, order, cands, failed))
    }

    s.starts_with(b"[") && tuple(s, 1, order, cands, &mut failed)
}

/// Formats values in slot order without using the library formatter.
pub fn reference_format(tuples: &[Vec<String>]) -> String {
    let inner: Vec<String> = tuples.iter().map(|t| format!("({})", t.join(", "))).collect();
    format!("[{}]", inner.join(", "))
}

/// Random valid tuple list: 1..=max_tuples distinct tuples.
pub fn random_valid_output(
    rng: &mut impl Rng,
    order: &[ElementKind],
    cands: &Candidates,
    max_tuples: usize,
) -> Vec<Vec<String>> {
    let n = rng.gen_range(1..=max_tuples);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..n {
        let t: Vec<String> = order
            .iter()
            .map(|&k| cands.slot(k).choose(rng).unwrap().clone())
            .collect();
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

pub fn categories(n: usize) -> Vec<String> {
    const BASE: &[&str] = &[
        "food#quality", "food#prices", "food#style_options", "service#general",
        "ambience#general", "drinks#quality", "drinks#style_options", "drinks#prices",
        "restaurant#general", "restaurant#prices", "restaurant#miscellaneous", "location#general",
        "food#general",
    ];
    BASE.iter().take(n).map(|s| s.to_string()).collect()
}

/// Random category names, including ones that are prefixes of each other.
pub fn random_categories(rng: &mut impl Rng) -> Vec<String> {
    let mut set: Vec<String> = categories(13);
    set.shuffle(rng);
    set.truncate(rng.gen_range(1..=8));
    if rng.gen_bool(0.3) {
        set.push("food".into());
    }
    set
}

const ASPECTS: &[&str] = &[
    "wine list", "service", "pizza", "staff", "goat cheese salad", "decor", "pasta", "sushi",
    "waiter", "dessert menu", "coffee", "prices", "atmosphere", "brunch", "noodles", "patio",
    "bartender", "steak", "portions", "music",
];
const OPINIONS: &[&str] = &[
    "excellent", "slow", "overpriced", "delicious", "rude", "cozy", "bland", "friendly",
    "not worth it", "amazing", "cold", "noisy", "fresh", "perfect", "mediocre", "generous",
];

/// Synthetic ASQP-style instances whose gold terms are all sentence phrases.
pub fn synthetic_instances(rng: &mut impl Rng, n: usize, task: Task) -> Vec<Instance> {
    let cats = categories(13);
    (0..n)
        .map(|i| {
            let k = rng.gen_range(1..=3);
            let mut clauses = Vec::new();
            let mut tuples = Vec::new();
            let mut used = HashSet::new();
            for _ in 0..k {
                let aspect = *ASPECTS.choose(rng).unwrap();
                if !used.insert(aspect) {
                    continue;
                }
                let opinion = *OPINIONS.choose(rng).unwrap();
                let implicit = rng.gen_bool(0.15);
                let polarity = *Polarity::ALL.choose(rng).unwrap();
                let category = cats.choose(rng).unwrap().clone();
                if implicit {
                    clauses.push(format!("it was {opinion}"));
                } else {
                    clauses.push(format!("the {aspect} was {opinion}"));
                }
                let at = if implicit { "NULL" } else { aspect };
                tuples.push(match task {
                    Task::Asqp => SentimentTuple::quad(at, &category, opinion, polarity),
                    Task::Tasd => SentimentTuple::triple(at, &category, polarity),
                });
            }
            let text = format!("Honestly {} .", clauses.join(" and "));
            Instance::new(format!("s{i:05}"), text).with_gold(tuples)
        })
        .collect()
}

pub fn gold_map(instances: &[Instance]) -> HashMap<String, absa_mvp::types::TupleSet> {
    instances
        .iter()
        .map(|i| (i.id.clone(), i.gold.clone().expect("synthetic instances carry gold")))
        .collect()
}
