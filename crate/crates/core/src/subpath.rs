//! Sub-path replacement: whole, Verifier-configured destination sequences
//! are logged as a single one-byte symbol.
//!
//! Matching is leftmost and non-overlapping. Because no configured pattern
//! may be a prefix of another, at most one pattern can match at any start
//! position, so leftmost-first and leftmost-longest coincide.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::model::{parse_hex32, Address, ModelError, SubPathId, Token, MAX_SUBPATHS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubPathError {
    #[error("duplicate sub-path id {0}")]
    DuplicateId(SubPathId),
    #[error("{0} sub-path specs configured, at most 8 allowed")]
    TooMany(usize),
    #[error("pattern of sub-path {0} is shorter than two addresses")]
    TooShort(SubPathId),
    #[error("pattern of sub-path {shorter} is a prefix of sub-path {longer}")]
    PrefixConflict { shorter: SubPathId, longer: SubPathId },
    #[error("unknown sub-path id {0}")]
    UnknownId(u8),
    #[error("prefix marker token found where only addresses and sub-paths are allowed")]
    UnexpectedPrefixMark,
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One speculated sub-path.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubPathSpec {
    pub id: SubPathId,
    pub pattern: Vec<Address>,
}

impl SubPathSpec {
    pub fn new(id: SubPathId, pattern: Vec<Address>) -> Self {
        SubPathSpec { id, pattern }
    }
}

/// Checks the configuration rules shared by the matcher and the decoder.
pub fn validate_specs(specs: &[SubPathSpec]) -> Result<(), SubPathError> {
    if specs.len() > MAX_SUBPATHS {
        return Err(SubPathError::TooMany(specs.len()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.pattern.len() < 2 {
            return Err(SubPathError::TooShort(s.id));
        }
        for t in &specs[..i] {
            if t.id == s.id {
                return Err(SubPathError::DuplicateId(s.id));
            }
        }
    }
    for s in specs {
        for t in specs {
            if s.id != t.id
                && s.pattern.len() <= t.pattern.len()
                && t.pattern.starts_with(&s.pattern)
            {
                return Err(SubPathError::PrefixConflict {
                    shorter: s.id,
                    longer: t.id,
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: HashMap<Address, usize>,
    terminal: Option<SubPathId>,
}

/// Compiled, immutable sub-path matcher. Clones share the compiled trie;
/// each session drives its own [`SubPathEncoder`].
#[derive(Debug, Clone)]
pub struct Matcher {
    inner: Arc<MatcherInner>,
}

#[derive(Debug)]
struct MatcherInner {
    nodes: Vec<TrieNode>,
    specs: Vec<SubPathSpec>,
}

impl Matcher {
    pub fn compile(specs: &[SubPathSpec]) -> Result<Self, SubPathError> {
        validate_specs(specs)?;
        let mut nodes = vec![TrieNode::default()];
        for spec in specs {
            let mut cur = 0;
            for addr in &spec.pattern {
                let next = match nodes[cur].children.get(addr) {
                    Some(&n) => n,
                    None => {
                        nodes.push(TrieNode::default());
                        let n = nodes.len() - 1;
                        nodes[cur].children.insert(*addr, n);
                        n
                    }
                };
                cur = next;
            }
            nodes[cur].terminal = Some(spec.id);
        }
        Ok(Matcher {
            inner: Arc::new(MatcherInner {
                nodes,
                specs: specs.to_vec(),
            }),
        })
    }

    pub fn specs(&self) -> &[SubPathSpec] {
        &self.inner.specs
    }

    pub fn encoder(&self) -> SubPathEncoder {
        SubPathEncoder {
            matcher: self.clone(),
            pending: VecDeque::new(),
        }
    }

    /// Encodes a complete address sequence in one go.
    pub fn encode_all(&self, addrs: &[Address]) -> Vec<Token> {
        let mut out = Vec::with_capacity(addrs.len());
        let mut enc = self.encoder();
        for &a in addrs {
            enc.push(a, &mut out);
        }
        enc.finish(&mut out);
        out
    }

    fn walk(&self, addrs: impl Iterator<Item = Address>) -> Walk {
        let nodes = &self.inner.nodes;
        let mut cur = 0;
        for (i, a) in addrs.enumerate() {
            match nodes[cur].children.get(&a) {
                Some(&n) => cur = n,
                None => return Walk::Dead,
            }
            if let Some(id) = nodes[cur].terminal {
                return Walk::Complete { id, len: i + 1 };
            }
        }
        Walk::Partial
    }
}

enum Walk {
    /// A pattern matches at the head of the buffer.
    Complete { id: SubPathId, len: usize },
    /// The buffer is a proper prefix of some pattern.
    Partial,
    /// No pattern can start at the head of the buffer.
    Dead,
}

/// Streaming state of one sub-path encoding session.
#[derive(Debug, Clone)]
pub struct SubPathEncoder {
    matcher: Matcher,
    pending: VecDeque<Address>,
}

impl SubPathEncoder {
    /// Feeds one destination; appends every token that can no longer change.
    pub fn push(&mut self, addr: Address, out: &mut Vec<Token>) {
        self.pending.push_back(addr);
        self.drain(false, out);
    }

    /// Flushes a trailing partial match verbatim.
    pub fn finish(&mut self, out: &mut Vec<Token>) {
        self.drain(true, out);
    }

    /// Number of addresses held back waiting for a possible match.
    pub fn buffered(&self) -> usize {
        self.pending.len()
    }

    fn drain(&mut self, at_end: bool, out: &mut Vec<Token>) {
        while !self.pending.is_empty() {
            match self.matcher.walk(self.pending.iter().copied()) {
                Walk::Complete { id, len } => {
                    self.pending.drain(..len);
                    out.push(Token::SubPath(id));
                }
                Walk::Partial if !at_end => break,
                Walk::Partial | Walk::Dead => {
                    let a = self.pending.pop_front().expect("non-empty");
                    out.push(Token::Addr(a));
                }
            }
        }
    }
}

/// Expands sub-path symbols back into their address sequences.
pub fn decode(specs: &[SubPathSpec], tokens: &[Token]) -> Result<Vec<Address>, SubPathError> {
    let mut out = Vec::with_capacity(tokens.len());
    for t in tokens {
        match t {
            Token::Addr(a) => out.push(*a),
            Token::SubPath(id) => {
                let spec = specs
                    .iter()
                    .find(|s| s.id == *id)
                    .ok_or(SubPathError::UnknownId(id.get()))?;
                out.extend_from_slice(&spec.pattern);
            }
            Token::PrefixMark(_) => return Err(SubPathError::UnexpectedPrefixMark),
        }
    }
    Ok(out)
}

/// Parses `subpath <id> <hex32> <hex32> ...` lines (`#` comments allowed).
pub fn parse_specs(text: &str) -> Result<Vec<SubPathSpec>, SubPathError> {
    let mut specs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut words = content.split_whitespace();
        let Some(kw) = words.next() else { continue };
        if kw != "subpath" {
            return Err(SubPathError::Malformed {
                line,
                msg: format!("unknown directive `{kw}`"),
            });
        }
        let id_text = words.next().ok_or_else(|| SubPathError::Malformed {
            line,
            msg: "missing id".into(),
        })?;
        let id: u8 = id_text.parse().map_err(|_| SubPathError::Malformed {
            line,
            msg: format!("bad id `{id_text}`"),
        })?;
        let id = SubPathId::new(id)?;
        let pattern = words.map(parse_hex32).collect::<Result<Vec<_>, _>>()?;
        specs.push(SubPathSpec { id, pattern });
    }
    validate_specs(&specs)?;
    Ok(specs)
}

pub fn specs_to_text(specs: &[SubPathSpec]) -> String {
    let mut out = String::new();
    for s in specs {
        let _ = write!(out, "subpath {}", s.id);
        for a in &s.pattern {
            let _ = write!(out, " {a}");
        }
        out.push('\n');
    }
    out
}
