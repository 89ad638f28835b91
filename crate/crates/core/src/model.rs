//! Addresses, log tokens, control-flow graphs and traces, plus their text
//! file formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Width of a program-memory address in bytes.
pub const ADDRESS_BYTES: usize = 4;

/// Largest number of sub-path speculations active at once.
pub const MAX_SUBPATHS: usize = 8;

/// A 32-bit program-memory branch destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub u32);

impl Address {
    pub const fn new(value: u32) -> Self {
        Address(value)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    pub fn to_be_bytes(self) -> [u8; ADDRESS_BYTES] {
        self.0.to_be_bytes()
    }

    /// The most-significant `prefix_len` bytes.
    ///
    /// Panics if `prefix_len > 3`.
    pub fn prefix(self, prefix_len: usize) -> Prefix {
        assert!(prefix_len < ADDRESS_BYTES, "prefix_len must be in 0..=3");
        let mut bytes = [0u8; 3];
        bytes[..prefix_len].copy_from_slice(&self.to_be_bytes()[..prefix_len]);
        Prefix {
            len: prefix_len as u8,
            bytes,
        }
    }

    /// The remaining `4 - prefix_len` low-order bytes, big-endian.
    pub fn suffix(self, prefix_len: usize) -> Vec<u8> {
        assert!(prefix_len < ADDRESS_BYTES, "prefix_len must be in 0..=3");
        self.to_be_bytes()[prefix_len..].to_vec()
    }

    /// Inverse of [`Address::prefix`] / [`Address::suffix`].
    pub fn join(prefix: &Prefix, suffix: &[u8]) -> Option<Address> {
        if prefix.len() + suffix.len() != ADDRESS_BYTES {
            return None;
        }
        let mut bytes = [0u8; ADDRESS_BYTES];
        bytes[..prefix.len()].copy_from_slice(prefix.as_bytes());
        bytes[prefix.len()..].copy_from_slice(suffix);
        Some(Address(u32::from_be_bytes(bytes)))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:08x}", self.0)
    }
}

impl fmt::LowerHex for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

impl From<u32> for Address {
    fn from(v: u32) -> Self {
        Address(v)
    }
}

impl FromStr for Address {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_hex32(s)
    }
}

/// High-order address bytes shared by consecutive log entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Prefix {
    len: u8,
    bytes: [u8; 3],
}

impl Prefix {
    pub fn from_bytes(bytes: &[u8]) -> Option<Prefix> {
        if bytes.len() >= ADDRESS_BYTES {
            return None;
        }
        let mut buf = [0u8; 3];
        buf[..bytes.len()].copy_from_slice(bytes);
        Some(Prefix {
            len: bytes.len() as u8,
            bytes: buf,
        })
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }
}

/// Identifier of a sub-path speculation, 1 through 8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubPathId(u8);

impl SubPathId {
    pub fn new(id: u8) -> Result<Self, ModelError> {
        if (1..=MAX_SUBPATHS as u8).contains(&id) {
            Ok(SubPathId(id))
        } else {
            Err(ModelError::SubPathIdOutOfRange(id))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for SubPathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One element of a control-flow log as it moves between stages.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Addr(Address),
    /// Reserved-symbol entry announcing a new active prefix.
    PrefixMark(Prefix),
    SubPath(SubPathId),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: duplicate node {addr}")]
    DuplicateNode { line: usize, addr: Address },
    #[error("edge endpoint {0} is not a declared node")]
    MissingEndpoint(Address),
    #[error("entry {0} is not a declared node")]
    EntryNotNode(Address),
    #[error("no entry declared")]
    MissingEntry,
    #[error("line {line}: more than one entry declared")]
    DuplicateEntry { line: usize },
    #[error("address `{0}` does not fit in 32 bits")]
    AddressOverflow(String),
    #[error("`{0}` is not a hexadecimal address")]
    BadAddress(String),
    #[error("sub-path id {0} outside 1..=8")]
    SubPathIdOutOfRange(u8),
}

/// Parses `0x`-prefixed or bare hexadecimal, at most 32 bits.
pub fn parse_hex32(s: &str) -> Result<Address, ModelError> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ModelError::BadAddress(s.to_string()));
    }
    let trimmed = digits.trim_start_matches('0');
    if trimmed.len() > 8 {
        return Err(ModelError::AddressOverflow(s.to_string()));
    }
    if trimmed.is_empty() {
        return Ok(Address(0));
    }
    u32::from_str_radix(trimmed, 16)
        .map(Address)
        .map_err(|_| ModelError::AddressOverflow(s.to_string()))
}

/// Control-flow graph over basic-block entry addresses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfgModel {
    nodes: BTreeSet<Address>,
    edges: BTreeMap<Address, BTreeSet<Address>>,
    entry: Address,
}

impl CfgModel {
    pub fn new(
        nodes: impl IntoIterator<Item = Address>,
        edges: impl IntoIterator<Item = (Address, Address)>,
        entry: Address,
    ) -> Result<Self, ModelError> {
        let nodes: BTreeSet<Address> = nodes.into_iter().collect();
        if !nodes.contains(&entry) {
            return Err(ModelError::EntryNotNode(entry));
        }
        let mut adj: BTreeMap<Address, BTreeSet<Address>> = BTreeMap::new();
        for (from, to) in edges {
            for end in [from, to] {
                if !nodes.contains(&end) {
                    return Err(ModelError::MissingEndpoint(end));
                }
            }
            adj.entry(from).or_default().insert(to);
        }
        Ok(CfgModel {
            nodes,
            edges: adj,
            entry,
        })
    }

    pub fn entry(&self) -> Address {
        self.entry
    }

    pub fn nodes(&self) -> impl Iterator<Item = Address> + '_ {
        self.nodes.iter().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, addr: Address) -> bool {
        self.nodes.contains(&addr)
    }

    pub fn edges(&self) -> impl Iterator<Item = (Address, Address)> + '_ {
        self.edges
            .iter()
            .flat_map(|(from, tos)| tos.iter().map(move |to| (*from, *to)))
    }

    pub fn successors(&self, addr: Address) -> impl Iterator<Item = Address> + '_ {
        self.edges.get(&addr).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, from: Address, to: Address) -> bool {
        self.edges.get(&from).is_some_and(|s| s.contains(&to))
    }

    /// Checks an executed destination sequence against the graph.
    ///
    /// The first destination must be the entry itself or a successor of it;
    /// every following destination must be a successor of the one before.
    pub fn check_trace(&self, trace: &Trace) -> PathVerdict {
        let dests = trace.destinations();
        let Some(&first) = dests.first() else {
            return PathVerdict::Valid;
        };
        if first != self.entry && !self.has_edge(self.entry, first) {
            return PathVerdict::Violation { index: 0 };
        }
        for (i, pair) in dests.windows(2).enumerate() {
            if !self.has_edge(pair[0], pair[1]) {
                return PathVerdict::Violation { index: i + 1 };
            }
        }
        PathVerdict::Valid
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut nodes = BTreeSet::new();
        let mut edges = Vec::new();
        let mut entry = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = strip_comment(raw);
            let mut words = content.split_whitespace();
            let Some(kw) = words.next() else { continue };
            let args: Vec<&str> = words.collect();
            let malformed = |msg: &str| ModelError::Malformed {
                line,
                msg: msg.to_string(),
            };
            match (kw, args.as_slice()) {
                ("node", [a]) => {
                    let addr = parse_hex32(a)?;
                    if !nodes.insert(addr) {
                        return Err(ModelError::DuplicateNode { line, addr });
                    }
                }
                ("edge", [a, b]) => edges.push((parse_hex32(a)?, parse_hex32(b)?)),
                ("entry", [a]) => {
                    if entry.replace(parse_hex32(a)?).is_some() {
                        return Err(ModelError::DuplicateEntry { line });
                    }
                }
                ("node" | "entry", _) => return Err(malformed("expected one address")),
                ("edge", _) => return Err(malformed("expected two addresses")),
                _ => return Err(malformed(&format!("unknown directive `{kw}`"))),
            }
        }
        let entry = entry.ok_or(ModelError::MissingEntry)?;
        CfgModel::new(nodes, edges, entry)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("node {n}\n"));
        }
        for (a, b) in self.edges() {
            out.push_str(&format!("edge {a} {b}\n"));
        }
        out.push_str(&format!("entry {}\n", self.entry));
        out
    }
}

/// Outcome of checking a path against a [`CfgModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathVerdict {
    Valid,
    /// `index` is the position of the first destination that is not a legal
    /// successor of its predecessor (or of the entry, for index 0).
    Violation { index: usize },
}

impl PathVerdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, PathVerdict::Valid)
    }
}

/// Branch destinations in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    destinations: Vec<Address>,
}

impl Trace {
    pub fn new(destinations: Vec<Address>) -> Self {
        Trace { destinations }
    }

    pub fn destinations(&self) -> &[Address] {
        &self.destinations
    }

    pub fn into_destinations(self) -> Vec<Address> {
        self.destinations
    }

    pub fn len(&self) -> usize {
        self.destinations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.destinations.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut destinations = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            if content.split_whitespace().count() != 1 {
                return Err(ModelError::Malformed {
                    line: idx + 1,
                    msg: "expected one address per line".into(),
                });
            }
            destinations.push(parse_hex32(content)?);
        }
        Ok(Trace { destinations })
    }

    pub fn to_text(&self) -> String {
        self.destinations
            .iter()
            .map(|a| format!("{a}\n"))
            .collect()
    }
}

impl From<Vec<Address>> for Trace {
    fn from(v: Vec<Address>) -> Self {
        Trace::new(v)
    }
}

impl FromIterator<Address> for Trace {
    fn from_iter<T: IntoIterator<Item = Address>>(iter: T) -> Self {
        Trace::new(iter.into_iter().collect())
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}
