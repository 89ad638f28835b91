//! Authenticated request/report messages of the attestation protocol.
//!
//! ```text
//! Verifier                                        Prover
//!   chal = chal_prev + 1
//!   sigma = HMAC_K(request bytes)
//!   ---------------- REQUEST {chal, speculation, sigma} ---------------->
//!                                      check sigma, chal > chal_prev
//!                                      store speculation, lock PMEM
//!                                      run App, build CF_Log
//!                                      h = HMAC_K(chal, PMEM, CF_Log)
//!   <--------------- REPORT {chal, CF_Log, h} ---------------------------
//!   check h against PMEM', decode CF_Log, check path
//! ```
//!
//! Wire layout, integers little-endian:
//!
//! ```text
//! header  := "RSPC" version:u8=1 type:u8 (1 = REQUEST, 2 = REPORT)
//! REQUEST := header chal:u64 flags:u8 [table] [prefix] [subpaths] sigma[32]
//! REPORT  := header chal:u64 bit_len:u32 len:u32 cflog[len] h[32]
//! ```
//!
//! Each optional REQUEST field is `len:u32 payload` and is present when its
//! flag bit is set (bit 0 table, bit 1 prefix, bit 2 sub-paths). An empty
//! payload clears the stored speculation; an absent field keeps it.

use hmac::{Hmac, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::huffman::HuffmanTable;
use crate::model::{Address, SubPathId};
use crate::pipeline::{SessionConfig, Stages};
use crate::prefix::PrefixConfig;
use crate::subpath::{validate_specs, SubPathSpec};

pub const MAGIC: [u8; 4] = *b"RSPC";
pub const VERSION: u8 = 0x01;
pub const MSG_REQUEST: u8 = 0x01;
pub const MSG_REPORT: u8 = 0x02;
pub const TAG_LEN: usize = 32;
const HEADER_LEN: usize = 6;

const FLAG_TABLE: u8 = 0x01;
const FLAG_PREFIX: u8 = 0x02;
const FLAG_SUBPATHS: u8 = 0x04;

type HmacSha256 = Hmac<Sha256>;

/// Why a message was refused.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Reject {
    #[error("authentication tag mismatch")]
    BadMac,
    #[error("challenge {chal} is not newer than {chal_prev}")]
    StaleChallenge { chal: u64, chal_prev: u64 },
    #[error("malformed message: {0}")]
    MalformedWire(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("challenge counter exhausted")]
    CounterExhausted,
}

fn malformed(msg: impl Into<String>) -> Reject {
    Reject::MalformedWire(msg.into())
}

/// Shared 32-byte attestation key.
#[derive(Clone, PartialEq, Eq)]
pub struct AttestKey([u8; 32]);

impl AttestKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        AttestKey(bytes)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let v = hex::decode(s.trim()).ok()?;
        Some(AttestKey(v.try_into().ok()?))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("HMAC accepts any key length")
    }
}

impl std::fmt::Debug for AttestKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AttestKey(..)")
    }
}

/// Change to one stored speculation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Field<T> {
    #[default]
    Keep,
    Set(T),
    Clear,
}

impl<T> Field<T> {
    fn apply(self, slot: &mut Option<T>) {
        match self {
            Field::Keep => {}
            Field::Set(v) => *slot = Some(v),
            Field::Clear => *slot = None,
        }
    }
}

/// Speculation carried by a request.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpeculationUpdate {
    pub table: Field<HuffmanTable>,
    pub prefix: Field<PrefixConfig>,
    pub subpaths: Field<Vec<SubPathSpec>>,
}

impl SpeculationUpdate {
    /// Replaces every stored speculation with `spec`.
    pub fn replace_all(spec: &StoredSpeculation) -> Self {
        fn field<T: Clone>(v: &Option<T>) -> Field<T> {
            v.as_ref().map_or(Field::Clear, |x| Field::Set(x.clone()))
        }
        SpeculationUpdate {
            table: field(&spec.table),
            prefix: field(&spec.prefix),
            subpaths: field(&spec.subpaths),
        }
    }
}

/// Speculation held between sessions. Stages are enabled exactly when their
/// speculation is present.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StoredSpeculation {
    pub table: Option<HuffmanTable>,
    pub prefix: Option<PrefixConfig>,
    pub subpaths: Option<Vec<SubPathSpec>>,
}

impl StoredSpeculation {
    pub fn apply(&mut self, update: SpeculationUpdate) {
        update.table.apply(&mut self.table);
        update.prefix.apply(&mut self.prefix);
        update.subpaths.apply(&mut self.subpaths);
        if self.subpaths.as_ref().is_some_and(|s| s.is_empty()) {
            self.subpaths = None;
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        let verbatim = SessionConfig::verbatim();
        SessionConfig {
            stages: Stages {
                subpath: self.subpaths.is_some(),
                prefix: self.prefix.is_some(),
                huffman: self.table.is_some(),
            },
            prefix: self.prefix.clone().unwrap_or(verbatim.prefix),
            table: self.table.clone().unwrap_or(verbatim.table),
            specs: self.subpaths.clone().unwrap_or_default(),
        }
    }
}

/// A decoded, authenticated request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub chal: u64,
    pub speculation: SpeculationUpdate,
}

/// A decoded, authenticated report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub chal: u64,
    pub bit_len: u32,
    pub cflog: Vec<u8>,
}

fn header(msg_type: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg_type);
    out
}

fn put_field(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
}

fn prefix_payload(p: &PrefixConfig) -> Vec<u8> {
    let mut v = vec![p.prefix_len() as u8];
    v.extend_from_slice(p.prefix_marker());
    v.extend_from_slice(p.subpath_marker());
    v
}

fn subpaths_payload(specs: &[SubPathSpec]) -> Vec<u8> {
    let mut v = vec![specs.len() as u8];
    for s in specs {
        v.push(s.id.get());
        v.extend_from_slice(&(s.pattern.len() as u16).to_le_bytes());
        for a in &s.pattern {
            v.extend_from_slice(&a.value().to_le_bytes());
        }
    }
    v
}

/// Builds and authenticates the next request. Returns the wire message and
/// the challenge it carries, which becomes the Verifier's new `chal_prev`.
pub fn build_request(
    key: &AttestKey,
    chal_prev: u64,
    speculation: &SpeculationUpdate,
) -> Result<(Vec<u8>, u64), ProtocolError> {
    let chal = chal_prev
        .checked_add(1)
        .ok_or(ProtocolError::CounterExhausted)?;
    let mut out = header(MSG_REQUEST);
    out.extend_from_slice(&chal.to_le_bytes());
    let flags_at = out.len();
    out.push(0);
    let mut flags = 0u8;
    let mut field = |flag: u8, payload: Option<Vec<u8>>, out: &mut Vec<u8>| {
        if let Some(p) = payload {
            flags |= flag;
            put_field(out, &p);
        }
    };
    fn encode<T>(f: &Field<T>, enc: impl Fn(&T) -> Vec<u8>) -> Option<Vec<u8>> {
        match f {
            Field::Keep => None,
            Field::Clear => Some(Vec::new()),
            Field::Set(v) => Some(enc(v)),
        }
    }
    field(FLAG_TABLE, encode(&speculation.table, HuffmanTable::to_bytes), &mut out);
    field(FLAG_PREFIX, encode(&speculation.prefix, prefix_payload), &mut out);
    field(
        FLAG_SUBPATHS,
        encode(&speculation.subpaths, |s| {
            if s.is_empty() {
                Vec::new()
            } else {
                subpaths_payload(s)
            }
        }),
        &mut out,
    );
    out[flags_at] = flags;
    let mut mac = key.mac();
    mac.update(&out);
    out.extend_from_slice(&mac.finalize().into_bytes());
    Ok((out, chal))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Reject> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, Reject> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, Reject> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, Reject> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, Reject> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn field(&mut self) -> Result<&'a [u8], Reject> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Splits a message into authenticated body and tag after checking the
/// header.
fn split_message(wire: &[u8], msg_type: u8) -> Result<(&[u8], &[u8]), Reject> {
    if wire.len() < HEADER_LEN + TAG_LEN {
        return Err(malformed("message too short"));
    }
    if wire[..4] != MAGIC {
        return Err(malformed("bad magic"));
    }
    if wire[4] != VERSION {
        return Err(malformed(format!("unsupported version {}", wire[4])));
    }
    if wire[5] != msg_type {
        return Err(malformed(format!("unexpected message type {}", wire[5])));
    }
    Ok(wire.split_at(wire.len() - TAG_LEN))
}

/// Returns the message type byte of a well-formed header.
pub fn message_type(wire: &[u8]) -> Option<u8> {
    (wire.len() >= HEADER_LEN && wire[..4] == MAGIC && wire[4] == VERSION).then(|| wire[5])
}

fn decode_prefix(p: &[u8]) -> Result<PrefixConfig, Reject> {
    let (&len, rest) = p.split_first().ok_or_else(|| malformed("empty prefix field"))?;
    if len > 3 || rest.len() != 2 * (4 - len as usize) {
        return Err(malformed("bad prefix field"));
    }
    let (pm, sm) = rest.split_at(rest.len() / 2);
    PrefixConfig::new(len, pm.to_vec(), sm.to_vec()).map_err(|e| malformed(e.to_string()))
}

fn decode_subpaths(p: &[u8]) -> Result<Vec<SubPathSpec>, Reject> {
    let mut c = Cursor { buf: p, pos: 0 };
    let count = c.u8()?;
    if count == 0 {
        return Err(malformed("empty sub-path list must be sent as an empty field"));
    }
    let mut specs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id = SubPathId::new(c.u8()?).map_err(|e| malformed(e.to_string()))?;
        let n = c.u16()? as usize;
        let mut pattern = Vec::with_capacity(n);
        for _ in 0..n {
            pattern.push(Address(c.u32()?));
        }
        specs.push(SubPathSpec::new(id, pattern));
    }
    if !c.done() {
        return Err(malformed("trailing bytes in sub-path field"));
    }
    validate_specs(&specs).map_err(|e| malformed(e.to_string()))?;
    Ok(specs)
}

/// Authenticates a request and checks freshness against `chal_prev`.
///
/// On success the caller persists the challenge and speculation.
pub fn verify_request(key: &AttestKey, chal_prev: u64, wire: &[u8]) -> Result<Request, Reject> {
    let (body, tag) = split_message(wire, MSG_REQUEST)?;
    let mut c = Cursor {
        buf: body,
        pos: HEADER_LEN,
    };
    let chal = c.u64()?;
    let flags = c.u8()?;
    if flags & !(FLAG_TABLE | FLAG_PREFIX | FLAG_SUBPATHS) != 0 {
        return Err(malformed(format!("unknown flags {flags:#04x}")));
    }
    let mut raw = [None, None, None];
    for (i, flag) in [FLAG_TABLE, FLAG_PREFIX, FLAG_SUBPATHS].into_iter().enumerate() {
        if flags & flag != 0 {
            raw[i] = Some(c.field()?);
        }
    }
    if !c.done() {
        return Err(malformed("trailing bytes before tag"));
    }

    let mut mac = key.mac();
    mac.update(body);
    mac.verify_slice(tag).map_err(|_| Reject::BadMac)?;
    if chal <= chal_prev {
        return Err(Reject::StaleChallenge { chal, chal_prev });
    }

    fn field<T>(
        raw: Option<&[u8]>,
        dec: impl Fn(&[u8]) -> Result<T, Reject>,
    ) -> Result<Field<T>, Reject> {
        Ok(match raw {
            None => Field::Keep,
            Some([]) => Field::Clear,
            Some(p) => Field::Set(dec(p)?),
        })
    }
    let speculation = SpeculationUpdate {
        table: field(raw[0], |p| {
            HuffmanTable::from_bytes(p).map_err(|e| malformed(e.to_string()))
        })?,
        prefix: field(raw[1], decode_prefix)?,
        subpaths: field(raw[2], decode_subpaths)?,
    };
    Ok(Request { chal, speculation })
}

/// The exact byte string authenticated by a report tag.
fn report_mac_input<'a>(chal: u64, pmem: &'a [u8], bit_len: u32, cflog: &'a [u8]) -> HmacSha256Input<'a> {
    HmacSha256Input {
        chal,
        pmem,
        bit_len,
        cflog,
    }
}

struct HmacSha256Input<'a> {
    chal: u64,
    pmem: &'a [u8],
    bit_len: u32,
    cflog: &'a [u8],
}

impl HmacSha256Input<'_> {
    fn tag(&self, key: &AttestKey) -> HmacSha256 {
        let mut mac = key.mac();
        mac.update(&self.chal.to_le_bytes());
        mac.update(&(self.pmem.len() as u32).to_le_bytes());
        mac.update(self.pmem);
        mac.update(&self.bit_len.to_le_bytes());
        mac.update(&(self.cflog.len() as u32).to_le_bytes());
        mac.update(self.cflog);
        mac
    }
}

/// Builds the report binding the challenge, program memory and log.
pub fn build_report(key: &AttestKey, chal: u64, pmem: &[u8], cflog: &[u8], bit_len: u32) -> Vec<u8> {
    let mut out = header(MSG_REPORT);
    out.extend_from_slice(&chal.to_le_bytes());
    out.extend_from_slice(&bit_len.to_le_bytes());
    put_field(&mut out, cflog);
    let tag = report_mac_input(chal, pmem, bit_len, cflog)
        .tag(key)
        .finalize()
        .into_bytes();
    out.extend_from_slice(&tag);
    out
}

/// Checks a report against the expected challenge and program memory.
pub fn verify_report(
    key: &AttestKey,
    chal: u64,
    expected_pmem: &[u8],
    wire: &[u8],
) -> Result<Report, Reject> {
    let (body, tag) = split_message(wire, MSG_REPORT)?;
    let mut c = Cursor {
        buf: body,
        pos: HEADER_LEN,
    };
    let echo = c.u64()?;
    let bit_len = c.u32()?;
    let cflog = c.field()?;
    if !c.done() {
        return Err(malformed("trailing bytes before tag"));
    }
    if (bit_len as usize).div_ceil(8) != cflog.len() {
        return Err(malformed("bit length disagrees with log size"));
    }
    report_mac_input(chal, expected_pmem, bit_len, cflog)
        .tag(key)
        .verify_slice(tag)
        .map_err(|_| Reject::BadMac)?;
    if echo != chal {
        return Err(Reject::BadMac);
    }
    Ok(Report {
        chal,
        bit_len,
        cflog: cflog.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> AttestKey {
        AttestKey::new([b; 32])
    }

    fn full_update() -> SpeculationUpdate {
        let mut f = [0u64; 256];
        f[0x10] = 50;
        f[0x24] = 20;
        SpeculationUpdate {
            table: Field::Set(HuffmanTable::build(&f)),
            prefix: Field::Set(PrefixConfig::with_default_markers(2).unwrap()),
            subpaths: Field::Set(vec![SubPathSpec::new(
                SubPathId::new(2).unwrap(),
                vec![Address(0x0800_0010), Address(0x0800_0024)],
            )]),
        }
    }

    #[test]
    fn first_challenge_is_one() {
        let (wire, chal) = build_request(&key(1), 0, &SpeculationUpdate::default()).unwrap();
        assert_eq!(chal, 1);
        assert_eq!(&wire[..6], b"RSPC\x01\x01");
        assert_eq!(&wire[6..14], &1u64.to_le_bytes());
    }

    #[test]
    fn bare_request_has_zero_flags_and_authenticated_chal() {
        let (wire, _) = build_request(&key(1), 41, &SpeculationUpdate::default()).unwrap();
        assert_eq!(wire[14], 0);
        assert_eq!(wire.len(), 6 + 8 + 1 + 32);
        let req = verify_request(&key(1), 41, &wire).unwrap();
        assert_eq!(req.chal, 42);
        assert_eq!(req.speculation, SpeculationUpdate::default());
    }

    #[test]
    fn counter_exhaustion() {
        assert_eq!(
            build_request(&key(1), u64::MAX, &SpeculationUpdate::default()).unwrap_err(),
            ProtocolError::CounterExhausted
        );
    }

    #[test]
    fn full_request_round_trip() {
        let upd = full_update();
        let (wire, chal) = build_request(&key(3), 7, &upd).unwrap();
        let req = verify_request(&key(3), 7, &wire).unwrap();
        assert_eq!(req.chal, chal);
        assert_eq!(req.speculation, upd);
    }

    #[test]
    fn clear_fields_round_trip() {
        let upd = SpeculationUpdate {
            table: Field::Clear,
            prefix: Field::Keep,
            subpaths: Field::Clear,
        };
        let (wire, _) = build_request(&key(3), 0, &upd).unwrap();
        assert_eq!(wire[14], FLAG_TABLE | FLAG_SUBPATHS);
        assert_eq!(verify_request(&key(3), 0, &wire).unwrap().speculation, upd);
    }

    #[test]
    fn replay_and_forgery() {
        let (wire, chal) = build_request(&key(3), 0, &full_update()).unwrap();
        assert_eq!(
            verify_request(&key(3), chal, &wire).unwrap_err(),
            Reject::StaleChallenge { chal, chal_prev: chal }
        );
        assert_eq!(verify_request(&key(4), 0, &wire).unwrap_err(), Reject::BadMac);
    }

    #[test]
    fn every_flipped_request_bit_is_rejected() {
        let (wire, _) = build_request(&key(9), 5, &full_update()).unwrap();
        for bit in 0..wire.len() * 8 {
            let mut w = wire.clone();
            w[bit / 8] ^= 0x80 >> (bit % 8);
            assert!(verify_request(&key(9), 5, &w).is_err(), "bit {bit} accepted");
        }
    }

    #[test]
    fn report_round_trip_and_binding() {
        let pmem = b"app image".to_vec();
        let wire = build_report(&key(5), 3, &pmem, &[0xC0], 2);
        let rep = verify_report(&key(5), 3, &pmem, &wire).unwrap();
        assert_eq!(rep, Report { chal: 3, bit_len: 2, cflog: vec![0xC0] });
        assert_eq!(verify_report(&key(5), 4, &pmem, &wire).unwrap_err(), Reject::BadMac);
        assert_eq!(verify_report(&key(5), 3, b"app imagf", &wire).unwrap_err(), Reject::BadMac);
        assert_eq!(verify_report(&key(6), 3, &pmem, &wire).unwrap_err(), Reject::BadMac);
        assert!(matches!(
            verify_request(&key(5), 0, &wire),
            Err(Reject::MalformedWire(_))
        ));
    }

    #[test]
    fn empty_log_still_binds_chal_and_pmem() {
        let a = build_report(&key(5), 1, b"A", &[], 0);
        let b = build_report(&key(5), 1, b"B", &[], 0);
        let c = build_report(&key(5), 2, b"A", &[], 0);
        assert_ne!(a[a.len() - 32..], b[b.len() - 32..]);
        assert_ne!(a[a.len() - 32..], c[c.len() - 32..]);
        assert_eq!(a, build_report(&key(5), 1, b"A", &[], 0));
    }

    #[test]
    fn stored_speculation_defaults() {
        let mut s = StoredSpeculation::default();
        assert_eq!(s.session_config(), SessionConfig::verbatim());
        s.apply(full_update());
        let cfg = s.session_config();
        assert_eq!(cfg.stages, Stages::ALL);
        let before = cfg.clone();
        s.apply(SpeculationUpdate::default());
        assert_eq!(s.session_config(), before);
        s.apply(SpeculationUpdate {
            subpaths: Field::Set(vec![]),
            ..Default::default()
        });
        assert!(!s.session_config().stages.subpath);
    }

    #[test]
    fn key_hex() {
        let k = AttestKey::from_hex(&"ab".repeat(32)).unwrap();
        assert_eq!(k.to_hex(), "ab".repeat(32));
        assert!(AttestKey::from_hex("abcd").is_none());
        assert_eq!(format!("{k:?}"), "AttestKey(..)");
    }
}
