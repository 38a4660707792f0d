//! Tokenizer vocabularies: dense token ids mapped to byte strings.

use std::collections::HashSet;

use crate::error::BackendError;
use crate::trie::ByteTrie;

pub type TokenId = u32;

/// Byte-level vocabulary. Ids are dense in `[0, len)`.
#[derive(Debug, Clone)]
pub struct TokenizerVocabulary {
    tokens: Vec<Vec<u8>>,
    trie: ByteTrie<Vec<TokenId>>,
}

/// Multi-byte pieces that show up in every tuple list.
const STRUCTURAL_PIECES: &[&str] = &[
    "[(", ")]", "), (", ", ", "(", ")", "[", "]", "NULL", "positive", "negative", "neutral",
    "pos", "neg", "itive", "ative", "tral", "#", "general",
];

impl TokenizerVocabulary {
    pub fn new(tokens: Vec<Vec<u8>>) -> Result<Self, BackendError> {
        if tokens.is_empty() {
            return Err(BackendError::InvalidRequest("empty vocabulary".into()));
        }
        let mut trie: ByteTrie<Vec<TokenId>> = ByteTrie::new();
        for (id, bytes) in tokens.iter().enumerate() {
            if bytes.is_empty() {
                return Err(BackendError::InvalidRequest(format!("token {id} is empty")));
            }
            trie.entry(bytes).get_or_insert_with(Vec::new).push(id as TokenId);
        }
        Ok(Self { tokens, trie })
    }

    /// All 256 single bytes, ids equal to the byte value.
    pub fn byte_level() -> Self {
        Self::byte_level_with(std::iter::empty::<&str>())
    }

    /// Single bytes followed by the given multi-byte pieces (deduplicated,
    /// in first-seen order).
    pub fn byte_level_with<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut seen: HashSet<Vec<u8>> = tokens.iter().cloned().collect();
        for piece in pieces {
            let bytes = piece.as_ref().as_bytes().to_vec();
            if !bytes.is_empty() && seen.insert(bytes.clone()) {
                tokens.push(bytes);
            }
        }
        Self::new(tokens).expect("byte-level vocabulary is never empty")
    }

    /// Byte-level vocabulary with tuple-list pieces and the whitespace-split
    /// words of `texts`, the vocabulary the oracle simulator runs on.
    pub fn simulator<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = STRUCTURAL_PIECES.iter().map(|s| s.to_string()).collect();
        for text in texts {
            for w in text.split_whitespace() {
                words.push(w.to_owned());
                words.push(format!(" {w}"));
            }
        }
        Self::byte_level_with(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bytes(&self, id: TokenId) -> &[u8] {
        &self.tokens[id as usize]
    }

    pub(crate) fn trie(&self) -> &ByteTrie<Vec<TokenId>> {
        &self.trie
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().flat_map(|&id| self.bytes(id).iter().copied()).collect()
    }

    /// Greedy longest-match encoding.
    pub fn encode(&self, text: &[u8]) -> Result<Vec<TokenId>, BackendError> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let (len, id) = self.longest_token_at(&text[pos..]).ok_or_else(|| {
                BackendError::InvalidRequest(format!("byte {:#04x} has no token", text[pos]))
            })?;
            out.push(id);
            pos += len;
        }
        Ok(out)
    }

    /// Longest token that is a prefix of `text`, lowest id on ties.
    pub fn longest_token_at(&self, text: &[u8]) -> Option<(usize, TokenId)> {
        let mut node = ByteTrie::<Vec<TokenId>>::ROOT;
        let mut best = None;
        for (i, &b) in text.iter().enumerate() {
            match self.trie.child(node, b) {
                Some(next) => node = next,
                None => break,
            }
            if let Some(ids) = self.trie.value(node) {
                best = Some((i + 1, ids[0]));
            }
        }
        best
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        // byte-level fallback keeps this total even for unknown bytes
        self.encode(text.as_bytes())
            .map(|ids| ids.len())
            .unwrap_or(text.len())
    }
}

/// Anything that can count prompt tokens.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

impl TokenCounter for TokenizerVocabulary {
    fn count(&self, text: &str) -> usize {
        self.count_tokens(text)
    }
}
