//! Verifier side: speculation generation, report checking and path
//! validation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, SpeculationBundle};

use crate::huffman::{byte_frequencies, HuffmanTable};
use crate::model::{Address, CfgModel, PathVerdict, SubPathId, Token, Trace, MAX_SUBPATHS};
use crate::pipeline::{pre_huffman_bytes, PipelineError, SessionConfig};
use crate::prefix::{self, PrefixConfig};
use crate::protocol::{
    build_request, verify_report, AttestKey, ProtocolError, Reject, SpeculationUpdate,
    StoredSpeculation,
};
use crate::subpath::SubPathSpec;

pub const DEFAULT_MIN_SUBPATH_LEN: usize = 2;
pub const DEFAULT_MAX_SUBPATH_LEN: usize = 16;

/// Builds a table from pooled byte counts. An empty pool gives the uniform
/// 8-bit table.
pub fn gen_huffman_speculation<'a>(streams: impl IntoIterator<Item = &'a [u8]>) -> HuffmanTable {
    let freq = byte_frequencies(streams);
    if freq.iter().all(|&f| f == 0) {
        HuffmanTable::uniform()
    } else {
        HuffmanTable::build(&freq)
    }
}

/// Replays prior traces through `config` with Huffman off, giving the byte
/// streams a table for that configuration should be trained on.
pub fn training_streams(config: &SessionConfig, traces: &[Trace]) -> Result<Vec<Vec<u8>>, PipelineError> {
    traces
        .iter()
        .map(|t| pre_huffman_bytes(config, t.destinations()))
        .collect()
}

/// Prefix-stage size of `addrs` for every usable prefix length, in order of
/// `p`. A length is unusable when one of its markers equals a suffix in the
/// sequence.
pub fn prefix_sizes(addrs: &[Address], prefix_marker: u8, subpath_marker: u8) -> Vec<(u8, usize)> {
    let tokens: Vec<Token> = addrs.iter().map(|&a| Token::Addr(a)).collect();
    (0u8..=3)
        .filter_map(|p| {
            let cfg = PrefixConfig::with_marker_bytes(p, prefix_marker, subpath_marker).ok()?;
            let bytes = prefix::encode(&cfg, &tokens).ok()?;
            Some((p, bytes.len()))
        })
        .collect()
}

/// The prefix length minimizing the encoded size of `addrs`, ties going to
/// the shorter prefix. `None` if every length collides with a marker.
pub fn select_prefix_len(addrs: &[Address], prefix_marker: u8, subpath_marker: u8) -> Option<u8> {
    prefix_sizes(addrs, prefix_marker, subpath_marker)
        .into_iter()
        .min_by_key(|&(p, size)| (size, p))
        .map(|(p, _)| p)
}

/// Greedy sub-path mining.
///
/// Each round scores every n-gram of length `min_len..=max_len` in the
/// remaining trace segments as `occurrences * (len - 1) * 4`, counting
/// non-overlapping leftmost occurrences, and keeps the best one that does
/// not prefix-conflict with earlier picks. Occurrences of the pick are then
/// cut out of the segments. Candidates seen fewer than twice never score.
pub fn mine_subpaths(traces: &[Trace], k: usize, min_len: usize, max_len: usize) -> Vec<SubPathSpec> {
    let k = k.min(MAX_SUBPATHS);
    let min_len = min_len.max(2);
    let mut segments: Vec<Vec<Address>> = traces
        .iter()
        .map(|t| t.destinations().to_vec())
        .filter(|s| s.len() >= min_len)
        .collect();
    let mut chosen: Vec<Vec<Address>> = Vec::new();
    while chosen.len() < k {
        let Some(best) = best_candidate(&segments, &chosen, min_len, max_len) else {
            break;
        };
        segments = segments
            .iter()
            .flat_map(|s| cut(s, &best))
            .filter(|s| s.len() >= min_len)
            .collect();
        chosen.push(best);
    }
    chosen
        .into_iter()
        .enumerate()
        .map(|(i, pattern)| SubPathSpec::new(SubPathId::new(i as u8 + 1).expect("at most 8"), pattern))
        .collect()
}

fn conflicts(a: &[Address], b: &[Address]) -> bool {
    a.starts_with(b) || b.starts_with(a)
}

fn best_candidate(
    segments: &[Vec<Address>],
    chosen: &[Vec<Address>],
    min_len: usize,
    max_len: usize,
) -> Option<Vec<Address>> {
    let mut best: Option<(u64, &[Address])> = None;
    for len in min_len..=max_len {
        // start positions per candidate, per segment, in order
        let mut starts: HashMap<&[Address], Vec<(usize, usize)>> = HashMap::new();
        for (si, seg) in segments.iter().enumerate() {
            if seg.len() < len {
                continue;
            }
            for i in 0..=seg.len() - len {
                starts.entry(&seg[i..i + len]).or_default().push((si, i));
            }
        }
        for (pat, pos) in starts {
            if pos.len() < 2 || chosen.iter().any(|c| conflicts(c, pat)) {
                continue;
            }
            let mut count = 0u64;
            let mut next_free = (usize::MAX, 0usize);
            for (si, i) in pos {
                if si != next_free.0 || i >= next_free.1 {
                    count += 1;
                    next_free = (si, i + len);
                }
            }
            if count < 2 {
                continue;
            }
            let score = count * (len as u64 - 1) * 4;
            let better = match best {
                None => true,
                Some((bs, bp)) => (score, pat.len(), std::cmp::Reverse(pat)) > (bs, bp.len(), std::cmp::Reverse(bp)),
            };
            if better {
                best = Some((score, pat));
            }
        }
    }
    best.map(|(_, p)| p.to_vec())
}

/// Splits `seg` around the leftmost non-overlapping occurrences of `pat`.
fn cut(seg: &[Address], pat: &[Address]) -> Vec<Vec<Address>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i + pat.len() <= seg.len() {
        if &seg[i..i + pat.len()] == pat {
            out.push(seg[start..i].to_vec());
            i += pat.len();
            start = i;
        } else {
            i += 1;
        }
    }
    out.push(seg[start..].to_vec());
    out
}

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("speculation unusable for this application: {0}")]
    ConfigUnusable(String),
    #[error("no request outstanding")]
    NoPendingSession,
    #[error("authentic report failed to decode")]
    Decode(#[from] PipelineError),
}

/// Result of checking one report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub authentic: bool,
    pub reject: Option<Reject>,
    pub path: Option<Trace>,
    pub cfg_verdict: Option<PathVerdict>,
}

impl Verdict {
    /// Authentic and the path follows the CFG.
    pub fn is_benign(&self) -> bool {
        self.authentic && self.cfg_verdict.as_ref().is_some_and(PathVerdict::is_valid)
    }
}

#[derive(Debug, Clone)]
struct Pending {
    chal: u64,
    config: SessionConfig,
}

/// Per-device Verifier state.
#[derive(Debug, Clone)]
pub struct VerifierContext {
    key: AttestKey,
    chal_prev: u64,
    expected_pmem: Vec<u8>,
    cfg: CfgModel,
    speculation: StoredSpeculation,
    pending: Option<Pending>,
}

impl VerifierContext {
    pub fn new(key: AttestKey, expected_pmem: Vec<u8>, cfg: CfgModel) -> Self {
        VerifierContext {
            key,
            chal_prev: 0,
            expected_pmem,
            cfg,
            speculation: StoredSpeculation::default(),
            pending: None,
        }
    }

    /// Resumes with a known counter and the speculation the device holds.
    pub fn with_state(mut self, chal_prev: u64, speculation: StoredSpeculation) -> Self {
        self.chal_prev = chal_prev;
        self.speculation = speculation;
        self
    }

    pub fn chal_prev(&self) -> u64 {
        self.chal_prev
    }

    pub fn cfg(&self) -> &CfgModel {
        &self.cfg
    }

    pub fn speculation(&self) -> &StoredSpeculation {
        &self.speculation
    }

    /// Configuration of the outstanding request.
    pub fn pending_config(&self) -> Option<&SessionConfig> {
        self.pending.as_ref().map(|p| &p.config)
    }

    /// Builds the next request. The update is checked against the CFG the
    /// same way the device will check it.
    pub fn issue_request(&mut self, update: SpeculationUpdate) -> Result<Vec<u8>, VerifierError> {
        let mut speculation = self.speculation.clone();
        speculation.apply(update.clone());
        let config = speculation.session_config();
        config
            .validate()
            .map_err(|e| VerifierError::ConfigUnusable(e.to_string()))?;
        if let Some(f) = config.framing() {
            if let Some(bad) = self.cfg.nodes().find(|&n| f.collides(n)) {
                return Err(VerifierError::ConfigUnusable(format!(
                    "marker collides with CFG node {bad}"
                )));
            }
        }
        let (wire, chal) = build_request(&self.key, self.chal_prev, &update)?;
        self.chal_prev = chal;
        self.speculation = speculation;
        self.pending = Some(Pending { chal, config });
        Ok(wire)
    }

    /// Checks the report for the outstanding request, decodes the log and
    /// validates the path. The request is consumed either way.
    pub fn verify_and_decode(&mut self, wire: &[u8]) -> Result<Verdict, VerifierError> {
        let pending = self.pending.take().ok_or(VerifierError::NoPendingSession)?;
        let report = match verify_report(&self.key, pending.chal, &self.expected_pmem, wire) {
            Ok(r) => r,
            Err(reject) => {
                return Ok(Verdict {
                    authentic: false,
                    reject: Some(reject),
                    path: None,
                    cfg_verdict: None,
                })
            }
        };
        let path = Trace::new(crate::pipeline::decode_log(
            &pending.config,
            &report.cflog,
            report.bit_len,
        )?);
        let cfg_verdict = self.cfg.check_trace(&path);
        Ok(Verdict {
            authentic: true,
            reject: None,
            path: Some(path),
            cfg_verdict: Some(cfg_verdict),
        })
    }
}

/// Verifier state persisted between CLI runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierState {
    pub key: String,
    pub chal_prev: u64,
    pub pmem: String,
    pub cfg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<u64>,
    #[serde(default)]
    pub speculation: SpeculationBundle,
}

impl VerifierState {
    pub fn to_toml(&self) -> Result<String, BundleError> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, BundleError> {
        Ok(toml::from_str(text)?)
    }
}

impl VerifierContext {
    pub fn state(&self, pmem_path: &str, cfg_path: &str) -> VerifierState {
        VerifierState {
            key: self.key.to_hex(),
            chal_prev: self.chal_prev,
            pmem: pmem_path.to_string(),
            cfg: cfg_path.to_string(),
            pending: self.pending.as_ref().map(|p| p.chal),
            speculation: SpeculationBundle::from_speculation(&self.speculation),
        }
    }

    /// Rebuilds a context from persisted state and the files it names. An
    /// outstanding request is restored with the stored speculation.
    pub fn from_state(state: &VerifierState, expected_pmem: Vec<u8>, cfg: CfgModel) -> Result<Self, BundleError> {
        let key = AttestKey::from_hex(&state.key).ok_or(BundleError::Hex { field: "key" })?;
        let speculation = state.speculation.to_speculation()?;
        let pending = state.pending.map(|chal| Pending {
            chal,
            config: speculation.session_config(),
        });
        Ok(VerifierContext {
            key,
            chal_prev: state.chal_prev,
            expected_pmem,
            cfg,
            speculation,
            pending,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::huffman::SYMBOLS;
    use crate::prefix::encoded_len;
    use proptest::prelude::*;

    fn a(v: u32) -> Address {
        Address(v)
    }

    #[test]
    fn state_keeps_pending_request() {
        let cfg = CfgModel::parse("node 08000000\nentry 08000000\n").unwrap();
        let mut ctx = VerifierContext::new(AttestKey::new([1; 32]), b"fw".to_vec(), cfg.clone());
        let upd = SpeculationUpdate {
            prefix: crate::protocol::Field::Set(PrefixConfig::with_default_markers(2).unwrap()),
            ..Default::default()
        };
        ctx.issue_request(upd).unwrap();
        let text = ctx.state("fw.bin", "fw.cfg").to_toml().unwrap();
        let back = VerifierContext::from_state(&VerifierState::from_toml(&text).unwrap(), b"fw".to_vec(), cfg).unwrap();
        assert_eq!(back.chal_prev(), 1);
        assert_eq!(back.pending_config(), ctx.pending_config());
    }

    #[test]
    fn empty_pool_is_uniform() {
        let t = gen_huffman_speculation(std::iter::empty());
        assert!(t.lengths().iter().all(|&l| l == 8));
    }

    #[test]
    fn dominant_symbol_is_shortest() {
        let mut s = vec![0x42u8; 500];
        s.extend(0u8..=255);
        let t = gen_huffman_speculation([s.as_slice()]);
        let min = *t.lengths().iter().min().unwrap();
        assert_eq!(t.lengths()[0x42], min);
        assert!(t.lengths().iter().enumerate().all(|(i, &l)| i == 0x42 || l > min));
    }

    #[test]
    fn pooled_counts_are_additive() {
        let x = [1u8, 2, 2, 3, 3, 3];
        let y = [3u8, 9, 9];
        let joined: Vec<u8> = x.iter().chain(&y).copied().collect();
        assert_eq!(
            gen_huffman_speculation([&x[..], &y[..]]),
            gen_huffman_speculation([joined.as_slice()])
        );
        let _ = SYMBOLS;
    }

    #[test]
    fn shared_top_half_picks_two() {
        let addrs: Vec<Address> = (0..1000u32).map(|i| a(0x0800_0000 | ((i * 37) & 0xFFF))).collect();
        assert_eq!(select_prefix_len(&addrs, 0xA5, 0x5A), Some(2));
    }

    #[test]
    fn unrelated_addresses_pick_zero() {
        let addrs = [a(0x1122_3344), a(0x5566_7788), a(0x99AA_BBCC)];
        assert_eq!(select_prefix_len(&addrs, 0xA5, 0x5A), Some(0));
    }

    #[test]
    fn colliding_lengths_are_skipped() {
        // suffix 0xA5 under p = 3
        let addrs: Vec<Address> = std::iter::repeat_n(a(0x0800_00A5), 50).collect();
        assert_eq!(select_prefix_len(&addrs, 0xA5, 0x5A), Some(2));
    }

    proptest! {
        #[test]
        fn argmin_agrees_with_size_formula(raw in prop::collection::vec((0u32..4, 0u32..0x10000), 0..200)) {
            let addrs: Vec<Address> = raw.iter().map(|&(hi, lo)| a(0x0800_0000 + (hi << 20) + lo)).collect();
            let mut best: Option<(usize, u8)> = None;
            for p in 0u8..=3 {
                let cfg = PrefixConfig::with_marker_bytes(p, 0xA5, 0x5A).unwrap();
                if addrs.iter().any(|&x| cfg.collides(x)) {
                    continue;
                }
                // independent count: w bytes per address plus marker+prefix on each change when p > 0
                let w = 4 - p as usize;
                let mut size = 0;
                let mut active: Option<u32> = None;
                for x in &addrs {
                    let pre = if p == 0 { 0 } else { x.value() >> (8 * w) };
                    if p > 0 && active != Some(pre) {
                        size += w + p as usize;
                        active = Some(pre);
                    }
                    size += w;
                }
                prop_assert_eq!(size, encoded_len(&cfg, &addrs));
                if best.is_none_or(|(s, _)| size < s) {
                    best = Some((size, p));
                }
            }
            prop_assert_eq!(select_prefix_len(&addrs, 0xA5, 0x5A), best.map(|(_, p)| p));
        }
    }

    #[test]
    fn repeated_pattern_is_mined_first() {
        let p = [a(1), a(2), a(3)];
        let trace: Trace = std::iter::repeat_n(p, 100).flatten().collect();
        let specs = mine_subpaths(&[trace], 1, 2, 16);
        assert_eq!(specs.len(), 1);
        let unit = &specs[0].pattern;
        assert_eq!(unit.len() % 3, 0);
        assert!(unit.chunks(3).all(|c| c == p));
    }

    #[test]
    fn no_repeats_means_no_specs() {
        let trace: Trace = (0..50u32).map(a).collect();
        assert!(mine_subpaths(&[trace], 8, 2, 16).is_empty());
    }

    #[test]
    fn mined_specs_are_prefix_free() {
        let mut v = Vec::new();
        for i in 0..40u32 {
            v.extend([a(1), a(2), a(3)]);
            v.extend([a(1), a(2), a(4 + i % 3)]);
        }
        let specs = mine_subpaths(&[Trace::new(v)], 8, 2, 16);
        assert!(!specs.is_empty());
        crate::subpath::validate_specs(&specs).unwrap();
        for (i, x) in specs.iter().enumerate() {
            for y in &specs[i + 1..] {
                assert!(!conflicts(&x.pattern, &y.pattern));
            }
        }
    }

    /// Scores every n-gram by scanning the whole trace, for one round.
    fn brute_best(trace: &[Address], min_len: usize, max_len: usize) -> Option<(u64, Vec<Address>)> {
        let mut best: Option<(u64, Vec<Address>)> = None;
        for len in min_len..=max_len.min(trace.len()) {
            for i in 0..=trace.len() - len {
                let pat = &trace[i..i + len];
                let count = cut(trace, pat).len() as u64 - 1;
                if count < 2 {
                    continue;
                }
                let score = count * (len as u64 - 1) * 4;
                let key = (score, len, std::cmp::Reverse(pat.to_vec()));
                if best
                    .as_ref()
                    .is_none_or(|(s, b)| key > (*s, b.len(), std::cmp::Reverse(b.clone())))
                {
                    best = Some((score, pat.to_vec()));
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn first_pick_matches_exhaustive_scoring(raw in prop::collection::vec(0u32..3, 0..40)) {
            let trace: Vec<Address> = raw.iter().map(|&x| a(x)).collect();
            let got = mine_subpaths(&[Trace::new(trace.clone())], 1, 2, 6);
            let want = brute_best(&trace, 2, 6);
            prop_assert_eq!(got.first().map(|s| s.pattern.clone()), want.map(|(_, p)| p));
        }
    }
}
