//! Prefix elision. Consecutive destinations usually share their high-order
//! bytes, so only the suffix is logged while the prefix stays the same. A
//! change of prefix is announced by a reserved marker followed by the new
//! prefix bytes.
//!
//! Encoded grammar, with `w = 4 - prefix_len`:
//!
//! ```text
//! entry := suffix[w] | prefix_marker[w] prefix[prefix_len] | subpath_marker[w] id[1]
//! ```
//!
//! With `prefix_len == 0` the prefix marker is never emitted and every
//! address is logged as its four bytes.

use thiserror::Error;

use crate::model::{Address, CfgModel, ModelError, Prefix, SubPathId, Token, ADDRESS_BYTES};

pub const DEFAULT_PREFIX_MARKER_BYTE: u8 = 0xA5;
pub const DEFAULT_SUBPATH_MARKER_BYTE: u8 = 0x5A;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PrefixError {
    #[error("prefix length {0} outside 0..=3")]
    BadPrefixLen(u8),
    #[error("marker is {got} bytes, suffix width is {want}")]
    BadMarkerWidth { got: usize, want: usize },
    #[error("prefix and sub-path markers are identical")]
    MarkersEqual,
    #[error("suffix of {0} collides with a reserved marker")]
    MarkerCollision(Address),
    #[error("prefix marker tokens are produced by this stage, not consumed")]
    UnexpectedPrefixMark,
    #[error("log truncated at byte {0}")]
    Truncated(usize),
    #[error("suffix at byte {0} logged before any prefix was established")]
    NoActivePrefix(usize),
    #[error("invalid sub-path id at byte {offset}")]
    BadSubPathId {
        offset: usize,
        #[source]
        source: ModelError,
    },
}

/// Prefix length plus the two reserved suffix-width symbols.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PrefixConfig {
    prefix_len: u8,
    prefix_marker: Vec<u8>,
    subpath_marker: Vec<u8>,
}

impl PrefixConfig {
    pub fn new(
        prefix_len: u8,
        prefix_marker: Vec<u8>,
        subpath_marker: Vec<u8>,
    ) -> Result<Self, PrefixError> {
        if prefix_len as usize >= ADDRESS_BYTES {
            return Err(PrefixError::BadPrefixLen(prefix_len));
        }
        let want = ADDRESS_BYTES - prefix_len as usize;
        for m in [&prefix_marker, &subpath_marker] {
            if m.len() != want {
                return Err(PrefixError::BadMarkerWidth { got: m.len(), want });
            }
        }
        if prefix_marker == subpath_marker {
            return Err(PrefixError::MarkersEqual);
        }
        Ok(PrefixConfig {
            prefix_len,
            prefix_marker,
            subpath_marker,
        })
    }

    /// Markers filled with `0xA5` (prefix) and `0x5A` (sub-path).
    pub fn with_default_markers(prefix_len: u8) -> Result<Self, PrefixError> {
        Self::with_marker_bytes(
            prefix_len,
            DEFAULT_PREFIX_MARKER_BYTE,
            DEFAULT_SUBPATH_MARKER_BYTE,
        )
    }

    /// Markers made of one repeated byte each.
    pub fn with_marker_bytes(prefix_len: u8, prefix: u8, subpath: u8) -> Result<Self, PrefixError> {
        let w = ADDRESS_BYTES.saturating_sub(prefix_len as usize);
        Self::new(prefix_len, vec![prefix; w], vec![subpath; w])
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len as usize
    }

    pub fn suffix_width(&self) -> usize {
        ADDRESS_BYTES - self.prefix_len as usize
    }

    pub fn prefix_marker(&self) -> &[u8] {
        &self.prefix_marker
    }

    pub fn subpath_marker(&self) -> &[u8] {
        &self.subpath_marker
    }

    /// Whether a logged suffix would be read back as a marker.
    pub fn collides(&self, addr: Address) -> bool {
        let suffix = &addr.to_be_bytes()[self.prefix_len()..];
        suffix == self.subpath_marker.as_slice()
            || (self.prefix_len > 0 && suffix == self.prefix_marker.as_slice())
    }

    /// Lists CFG nodes whose suffix equals a reserved marker.
    pub fn check_marker_collision(&self, cfg: &CfgModel) -> CollisionVerdict {
        let colliding: Vec<Address> = cfg.nodes().filter(|&n| self.collides(n)).collect();
        if colliding.is_empty() {
            CollisionVerdict::Safe
        } else {
            CollisionVerdict::Colliding(colliding)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CollisionVerdict {
    Safe,
    Colliding(Vec<Address>),
}

impl CollisionVerdict {
    pub fn is_safe(&self) -> bool {
        matches!(self, CollisionVerdict::Safe)
    }
}

/// Per-session active prefix. `None` until the first address is logged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrefixState {
    pub active: Option<Prefix>,
}

/// Encodes one token, appending its bytes to `out`.
pub fn encode_step(
    cfg: &PrefixConfig,
    state: &mut PrefixState,
    token: &Token,
    out: &mut Vec<u8>,
) -> Result<(), PrefixError> {
    match token {
        Token::Addr(addr) => {
            if cfg.collides(*addr) {
                return Err(PrefixError::MarkerCollision(*addr));
            }
            let p = cfg.prefix_len();
            if p > 0 {
                let prefix = addr.prefix(p);
                if state.active != Some(prefix) {
                    out.extend_from_slice(&cfg.prefix_marker);
                    out.extend_from_slice(prefix.as_bytes());
                    state.active = Some(prefix);
                }
            }
            out.extend_from_slice(&addr.to_be_bytes()[p..]);
        }
        Token::SubPath(id) => {
            out.extend_from_slice(&cfg.subpath_marker);
            out.push(id.get());
        }
        Token::PrefixMark(_) => return Err(PrefixError::UnexpectedPrefixMark),
    }
    Ok(())
}

/// Encodes a whole token sequence from a fresh state.
pub fn encode(cfg: &PrefixConfig, tokens: &[Token]) -> Result<Vec<u8>, PrefixError> {
    let mut state = PrefixState::default();
    let mut out = Vec::with_capacity(tokens.len() * cfg.suffix_width());
    for t in tokens {
        encode_step(cfg, &mut state, t, &mut out)?;
    }
    Ok(out)
}

/// Inverse of [`encode`]: yields `Addr` and `SubPath` tokens.
pub fn decode(cfg: &PrefixConfig, bytes: &[u8]) -> Result<Vec<Token>, PrefixError> {
    let w = cfg.suffix_width();
    let p = cfg.prefix_len();
    let mut out = Vec::with_capacity(bytes.len() / w);
    let mut active: Option<Prefix> = None;
    let mut pos = 0;
    let take = |pos: usize, n: usize| -> Result<&[u8], PrefixError> {
        bytes.get(pos..pos + n).ok_or(PrefixError::Truncated(pos))
    };
    while pos < bytes.len() {
        let word = take(pos, w)?;
        if word == cfg.subpath_marker.as_slice() {
            let raw = take(pos + w, 1)?[0];
            let id = SubPathId::new(raw).map_err(|source| PrefixError::BadSubPathId {
                offset: pos + w,
                source,
            })?;
            out.push(Token::SubPath(id));
            pos += w + 1;
        } else if p > 0 && word == cfg.prefix_marker.as_slice() {
            let raw = take(pos + w, p)?;
            active = Prefix::from_bytes(raw);
            pos += w + p;
        } else {
            let prefix = match (p, active) {
                (0, _) => Prefix::from_bytes(&[]).expect("empty prefix"),
                (_, Some(pfx)) => pfx,
                (_, None) => return Err(PrefixError::NoActivePrefix(pos)),
            };
            let addr = Address::join(&prefix, word).expect("widths add up to 4");
            out.push(Token::Addr(addr));
            pos += w;
        }
    }
    Ok(out)
}

/// Exact encoded size in bytes of `addrs` under `cfg`, without encoding.
pub fn encoded_len(cfg: &PrefixConfig, addrs: &[Address]) -> usize {
    let p = cfg.prefix_len();
    let w = cfg.suffix_width();
    let mut active = None;
    let mut total = 0;
    for a in addrs {
        if p > 0 {
            let pfx = a.prefix(p);
            if active != Some(pfx) {
                total += w + p;
                active = Some(pfx);
            }
        }
        total += w;
    }
    total
}
