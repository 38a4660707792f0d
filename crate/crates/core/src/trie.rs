//! Byte tries shared by terminal sets and tokenizer vocabularies.

/// Trie over byte strings; node 0 is the root. Children are kept sorted by
/// byte for binary-search lookup.
#[derive(Debug, Clone)]
pub struct ByteTrie<V> {
    nodes: Vec<Node<V>>,
}

#[derive(Debug, Clone)]
struct Node<V> {
    children: Vec<(u8, u32)>,
    value: Option<V>,
}

impl<V> Default for ByteTrie<V> {
    fn default() -> Self {
        Self {
            nodes: vec![Node {
                children: Vec::new(),
                value: None,
            }],
        }
    }
}

impl<V> ByteTrie<V> {
    pub const ROOT: u32 = 0;

    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the value slot of `key`, creating the path.
    pub fn entry(&mut self, key: &[u8]) -> &mut Option<V> {
        let mut node = 0u32;
        for &b in key {
            node = match self.child(node, b) {
                Some(next) => next,
                None => {
                    let next = self.nodes.len() as u32;
                    self.nodes.push(Node {
                        children: Vec::new(),
                        value: None,
                    });
                    let children = &mut self.nodes[node as usize].children;
                    let at = children.partition_point(|&(c, _)| c < b);
                    children.insert(at, (b, next));
                    next
                }
            };
        }
        &mut self.nodes[node as usize].value
    }

    #[inline]
    pub fn child(&self, node: u32, byte: u8) -> Option<u32> {
        let children = &self.nodes[node as usize].children;
        children
            .binary_search_by_key(&byte, |&(c, _)| c)
            .ok()
            .map(|i| children[i].1)
    }

    #[inline]
    pub fn children(&self, node: u32) -> &[(u8, u32)] {
        &self.nodes[node as usize].children
    }

    #[inline]
    pub fn value(&self, node: u32) -> Option<&V> {
        self.nodes[node as usize].value.as_ref()
    }

    pub fn get(&self, key: &[u8]) -> Option<&V> {
        let mut node = Self::ROOT;
        for &b in key {
            node = self.child(node, b)?;
        }
        self.value(node)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// End offsets (relative to `input`) of every key that is a prefix of
    /// `input`, shortest first.
    pub fn prefix_matches(&self, input: &[u8]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut node = Self::ROOT;
        if self.value(node).is_some() {
            out.push(0);
        }
        for (i, &b) in input.iter().enumerate() {
            match self.child(node, b) {
                Some(next) => node = next,
                None => break,
            }
            if self.value(node).is_some() {
                out.push(i + 1);
            }
        }
        out
    }
}

/// A finite set of terminal strings.
pub type TerminalTrie = ByteTrie<()>;

impl TerminalTrie {
    pub fn from_strings<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut trie = Self::new();
        for s in items {
            *trie.entry(s.as_ref().as_bytes()) = Some(());
        }
        trie
    }

    pub fn contains(&self, s: &str) -> bool {
        self.get(s.as_bytes()).is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.value(Self::ROOT).is_none() && self.children(Self::ROOT).is_empty()
    }
}
