//! Phrase sets: the aspect and opinion terms a sentence can legally yield.
//!
//! A sentence is split into boundary tokens at whitespace, punctuation,
//! hyphens, camel-case humps and ASCII/non-ASCII transitions. Every
//! contiguous run of tokens, taken as the exact original substring, is a
//! phrase.

use std::collections::BTreeSet;
use std::ops::Range;

use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::LexiconError;

/// A token of the input sentence. Offsets count Unicode scalar values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
    bytes: Range<usize>,
}

impl BoundaryToken {
    /// Byte range of the token in the source sentence.
    pub fn byte_range(&self) -> Range<usize> {
        self.bytes.clone()
    }
}

fn is_punctuation(c: char) -> bool {
    c == '-'
        || matches!(
            get_general_category(c),
            GeneralCategory::ConnectorPunctuation
                | GeneralCategory::DashPunctuation
                | GeneralCategory::OpenPunctuation
                | GeneralCategory::ClosePunctuation
                | GeneralCategory::InitialPunctuation
                | GeneralCategory::FinalPunctuation
                | GeneralCategory::OtherPunctuation
        )
}

fn splits_between(prev: char, next: char) -> bool {
    (prev.is_lowercase() && next.is_uppercase()) || (prev.is_ascii() != next.is_ascii())
}

/// Splits a sentence into boundary tokens. Whitespace is dropped; each
/// punctuation character becomes its own token.
pub fn tokenize(sentence: &str) -> Result<Vec<BoundaryToken>, LexiconError> {
    if sentence.is_empty() {
        return Err(LexiconError::EmptyInput);
    }
    let mut tokens = Vec::new();
    // (char start, byte start, last char)
    let mut open: Option<(usize, usize, char)> = None;

    let mut close = |open: &mut Option<(usize, usize, char)>, end: usize, byte_end: usize| {
        if let Some((start, byte_start, _)) = open.take() {
            tokens.push(BoundaryToken {
                text: sentence[byte_start..byte_end].to_owned(),
                start,
                end,
                bytes: byte_start..byte_end,
            });
        }
    };

    for (ci, (bi, c)) in sentence.char_indices().enumerate() {
        if c.is_whitespace() {
            close(&mut open, ci, bi);
        } else if is_punctuation(c) {
            close(&mut open, ci, bi);
            open = Some((ci, bi, c));
            close(&mut open, ci + 1, bi + c.len_utf8());
        } else {
            match open {
                Some((_, _, prev)) if splits_between(prev, c) => {
                    close(&mut open, ci, bi);
                    open = Some((ci, bi, c));
                }
                Some((start, byte_start, _)) => open = Some((start, byte_start, c)),
                None => open = Some((ci, bi, c)),
            }
        }
    }
    let n_chars = sentence.chars().count();
    close(&mut open, n_chars, sentence.len());
    Ok(tokens)
}

/// The phrase set of one sentence.
#[derive(Debug, Clone)]
pub struct PhraseLexicon {
    sentence: String,
    tokens: Vec<BoundaryToken>,
    spans: BTreeSet<String>,
}

impl PhraseLexicon {
    pub fn build(sentence: &str) -> Result<Self, LexiconError> {
        let tokens = tokenize(sentence)?;
        if tokens.is_empty() {
            // whitespace-only input has nothing to enumerate
            return Err(LexiconError::EmptyInput);
        }
        let mut spans = BTreeSet::new();
        for i in 0..tokens.len() {
            for j in i..tokens.len() {
                spans.insert(sentence[tokens[i].bytes.start..tokens[j].bytes.end].to_owned());
            }
        }
        Ok(Self {
            sentence: sentence.to_owned(),
            tokens,
            spans,
        })
    }

    pub fn sentence(&self) -> &str {
        &self.sentence
    }

    pub fn tokens(&self) -> &[BoundaryToken] {
        &self.tokens
    }

    /// Distinct span strings.
    pub fn spans(&self) -> &BTreeSet<String> {
        &self.spans
    }

    /// Number of (i, j) token index pairs, `n(n+1)/2`.
    pub fn span_count(&self) -> usize {
        let n = self.tokens.len();
        n * (n + 1) / 2
    }

    /// Every `(i, j, span)` with `i <= j`, in index order.
    pub fn index_spans(&self) -> impl Iterator<Item = (usize, usize, &str)> + '_ {
        let n = self.tokens.len();
        (0..n).flat_map(move |i| {
            (i..n).map(move |j| {
                (
                    i,
                    j,
                    &self.sentence[self.tokens[i].bytes.start..self.tokens[j].bytes.end],
                )
            })
        })
    }

    /// Exact, case-sensitive membership.
    pub fn contains(&self, phrase: &str) -> bool {
        self.spans.contains(phrase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        tokenize(s).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn splits_on_whitespace() {
        assert_eq!(
            texts("The wine list is excellent"),
            ["The", "wine", "list", "is", "excellent"]
        );
    }

    #[test]
    fn splits_camel_case() {
        assert_eq!(texts("WiFi"), ["Wi", "Fi"]);
        // upper -> lower is not a boundary
        assert_eq!(texts("Wine"), ["Wine"]);
        assert_eq!(texts("HTTPServer"), ["HTTPServer"]);
    }

    #[test]
    fn hyphen_and_punctuation_are_single_tokens() {
        assert_eq!(texts("wine-list"), ["wine", "-", "list"]);
        assert_eq!(texts("slow."), ["slow", "."]);
        assert_eq!(texts("food#quality"), ["food", "#", "quality"]);
        assert_eq!(texts("!!"), ["!", "!"]);
    }

    #[test]
    fn splits_at_non_ascii_transitions() {
        assert_eq!(texts("caféau"), ["caf", "é", "au"]);
        assert_eq!(texts("日本語text"), ["日本語", "text"]);
    }

    #[test]
    fn offsets_are_in_chars() {
        let toks = tokenize("é bon").unwrap();
        assert_eq!((toks[0].start, toks[0].end), (0, 1));
        assert_eq!((toks[1].start, toks[1].end), (2, 5));
        assert_eq!(toks[1].byte_range(), 3..6);
    }

    #[test]
    fn empty_sentence_is_an_error() {
        assert_eq!(tokenize(""), Err(LexiconError::EmptyInput));
        assert!(matches!(PhraseLexicon::build("   "), Err(LexiconError::EmptyInput)));
    }

    #[test]
    fn spans_keep_interior_separators() {
        let lex = PhraseLexicon::build("The wine list is excellent").unwrap();
        assert_eq!(lex.span_count(), 15);
        assert!(lex.contains("wine list"));
        assert!(lex.contains("excellent"));
        assert!(!lex.contains("Wine list"));
        assert!(!lex.contains(""));
        assert!(!lex.contains("wine  list"));

        let hyph = PhraseLexicon::build("wine-list").unwrap();
        for s in ["wine", "list", "wine-list", "-", "wine-", "-list"] {
            assert!(hyph.contains(s), "{s}");
        }
        assert_eq!(hyph.span_count(), 6);
    }

    #[test]
    fn duplicate_spans_collapse_but_count_pairs() {
        let lex = PhraseLexicon::build("good good").unwrap();
        assert_eq!(lex.span_count(), 3);
        assert_eq!(lex.spans().len(), 2);
    }

    proptest::proptest! {
        #[test]
        fn tokens_are_ordered_and_faithful(s in "[a-zA-Z0-9 ,.!é日-]{1,40}") {
            let Ok(toks) = tokenize(&s) else { return Ok(()); };
            let chars: Vec<char> = s.chars().collect();
            let mut last = 0;
            for t in &toks {
                proptest::prop_assert!(t.start >= last && t.end > t.start);
                let slice: String = chars[t.start..t.end].iter().collect();
                proptest::prop_assert_eq!(&slice, &t.text);
                // gaps between tokens are whitespace only
                proptest::prop_assert!(chars[last..t.start].iter().all(|c| c.is_whitespace()));
                last = t.end;
            }
            proptest::prop_assert!(chars[last..].iter().all(|c| c.is_whitespace()));
        }

        #[test]
        fn index_spans_match_pair_count(s in "[a-zA-Z ,-]{1,30}") {
            if let Ok(lex) = PhraseLexicon::build(&s) {
                proptest::prop_assert_eq!(lex.index_spans().count(), lex.span_count());
                for (_, _, span) in lex.index_spans() {
                    proptest::prop_assert!(s.contains(span));
                    proptest::prop_assert!(lex.contains(span));
                }
            }
        }
    }
}
