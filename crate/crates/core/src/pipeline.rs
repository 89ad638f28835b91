//! The per-branch log path: sub-path replacement, then prefix elision, then
//! Huffman coding, and the Verifier-side inverse.
//!
//! Disabled stages are bypassed. With both the sub-path and prefix stages
//! off, addresses reach the Huffman stage (or the log) as their four
//! big-endian bytes. With only the prefix stage off, the sub-path stage
//! still needs a framing for its symbols, so a zero-length prefix with
//! default four-byte markers is used.

use thiserror::Error;

use crate::bitstream::{BitStream, BitStreamError};
use crate::huffman::{HuffmanError, HuffmanTable};
use crate::model::{Address, Token, Trace};
use crate::prefix::{self, PrefixConfig, PrefixError, PrefixState};
use crate::subpath::{self, Matcher, SubPathEncoder, SubPathError, SubPathSpec};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("sub-path stage enabled without any sub-path specs")]
    NoSubPathSpecs,
    #[error("session is sealed; no more branches can be logged")]
    Sealed,
    #[error("log bit length {bit_len} does not match {bytes} bytes of data")]
    BadBitLength { bit_len: u32, bytes: usize },
    #[error("log length {0} is not a whole number of addresses")]
    RaggedVerbatim(usize),
    #[error(transparent)]
    SubPath(#[from] SubPathError),
    #[error(transparent)]
    Prefix(#[from] PrefixError),
    #[error(transparent)]
    Huffman(#[from] HuffmanError),
}

impl From<BitStreamError> for PipelineError {
    fn from(e: BitStreamError) -> Self {
        PipelineError::Huffman(HuffmanError::BitStream(e))
    }
}

/// Which stages run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Stages {
    pub subpath: bool,
    pub prefix: bool,
    pub huffman: bool,
}

impl Stages {
    pub const NONE: Stages = Stages {
        subpath: false,
        prefix: false,
        huffman: false,
    };
    pub const ALL: Stages = Stages {
        subpath: true,
        prefix: true,
        huffman: true,
    };

    /// All eight on/off combinations.
    pub fn all_subsets() -> impl Iterator<Item = Stages> {
        (0u8..8).map(|m| Stages {
            subpath: m & 1 != 0,
            prefix: m & 2 != 0,
            huffman: m & 4 != 0,
        })
    }
}

/// Everything the Prover needs to compress a log, and the Verifier to
/// expand it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionConfig {
    pub prefix: PrefixConfig,
    pub table: HuffmanTable,
    pub specs: Vec<SubPathSpec>,
    pub stages: Stages,
}

impl SessionConfig {
    /// Every stage off: the log is the verbatim address sequence.
    pub fn verbatim() -> Self {
        SessionConfig {
            prefix: PrefixConfig::with_default_markers(0).expect("valid defaults"),
            table: HuffmanTable::uniform(),
            specs: Vec::new(),
            stages: Stages::NONE,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.subpath {
            if self.specs.is_empty() {
                return Err(PipelineError::NoSubPathSpecs);
            }
            subpath::validate_specs(&self.specs)?;
        }
        Ok(())
    }

    /// The prefix framing actually applied, or `None` for raw addresses.
    pub fn framing(&self) -> Option<PrefixConfig> {
        match (self.stages.prefix, self.stages.subpath) {
            (true, _) => Some(self.prefix.clone()),
            (false, true) => Some(PrefixConfig::with_default_markers(0).expect("valid defaults")),
            (false, false) => None,
        }
    }

    /// Whether `addr` can be logged under this configuration.
    pub fn accepts(&self, addr: Address) -> bool {
        self.framing().is_none_or(|f| !f.collides(addr))
    }
}

/// A finished control-flow log: packed bytes plus the number of valid bits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CfLog {
    pub bytes: Vec<u8>,
    pub bit_len: u32,
}

impl CfLog {
    pub fn len_bytes(&self) -> usize {
        self.bytes.len()
    }
}

/// Streaming encoder state for one attested execution.
#[derive(Debug, Clone)]
pub struct CfLogEncoder {
    subpaths: Option<SubPathEncoder>,
    framing: Option<PrefixConfig>,
    prefix_state: PrefixState,
    table: Option<HuffmanTable>,
    out: BitStream,
    entries: u64,
    sealed: bool,
    tokens: Vec<Token>,
    bytes: Vec<u8>,
}

impl CfLogEncoder {
    pub fn new(config: &SessionConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let subpaths = if config.stages.subpath {
            Some(Matcher::compile(&config.specs)?.encoder())
        } else {
            None
        };
        Ok(CfLogEncoder {
            subpaths,
            framing: config.framing(),
            prefix_state: PrefixState::default(),
            table: config.stages.huffman.then(|| config.table.clone()),
            out: BitStream::new(),
            entries: 0,
            sealed: false,
            tokens: Vec::new(),
            bytes: Vec::new(),
        })
    }

    /// Logs one branch destination.
    pub fn log_branch(&mut self, dest: Address) -> Result<(), PipelineError> {
        if self.sealed {
            return Err(PipelineError::Sealed);
        }
        self.entries += 1;
        self.tokens.clear();
        match &mut self.subpaths {
            Some(enc) => enc.push(dest, &mut self.tokens),
            None => self.tokens.push(Token::Addr(dest)),
        }
        self.emit_tokens()
    }

    /// Flushes buffered addresses and seals the session.
    pub fn finalize(&mut self) -> Result<CfLog, PipelineError> {
        if self.sealed {
            return Err(PipelineError::Sealed);
        }
        self.tokens.clear();
        if let Some(enc) = &mut self.subpaths {
            enc.finish(&mut self.tokens);
        }
        self.emit_tokens()?;
        self.sealed = true;
        let (bytes, bit_len) = std::mem::take(&mut self.out).into_parts();
        Ok(CfLog { bytes, bit_len })
    }

    /// Number of destinations logged so far.
    pub fn entries(&self) -> u64 {
        self.entries
    }

    /// Bits appended to the log so far.
    pub fn bit_len(&self) -> u32 {
        self.out.bit_len()
    }

    pub fn prefix_state(&self) -> PrefixState {
        self.prefix_state
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    fn emit_tokens(&mut self) -> Result<(), PipelineError> {
        self.bytes.clear();
        for tok in &self.tokens {
            match (&self.framing, tok) {
                (Some(f), t) => prefix::encode_step(f, &mut self.prefix_state, t, &mut self.bytes)?,
                (None, Token::Addr(a)) => self.bytes.extend_from_slice(&a.to_be_bytes()),
                (None, _) => unreachable!("symbols only exist when a framing is configured"),
            }
        }
        match &self.table {
            Some(t) => t.encode_into(&self.bytes, &mut self.out),
            None => self.out.append_bytes(&self.bytes),
        }
        Ok(())
    }
}

/// Runs a whole trace through a fresh encoder.
pub fn encode_trace(config: &SessionConfig, trace: &[Address]) -> Result<CfLog, PipelineError> {
    let mut enc = CfLogEncoder::new(config)?;
    for &a in trace {
        enc.log_branch(a)?;
    }
    enc.finalize()
}

/// The byte stream handed to the Huffman stage (or logged directly when
/// Huffman is off) for a given trace.
pub fn pre_huffman_bytes(config: &SessionConfig, trace: &[Address]) -> Result<Vec<u8>, PipelineError> {
    let plain = SessionConfig {
        stages: Stages {
            huffman: false,
            ..config.stages
        },
        ..config.clone()
    };
    Ok(encode_trace(&plain, trace)?.bytes)
}

/// Recovers the verbatim destination sequence from a log.
pub fn decode_log(config: &SessionConfig, bytes: &[u8], bit_len: u32) -> Result<Vec<Address>, PipelineError> {
    config.validate()?;
    let stream = BitStream::from_parts(bytes.to_vec(), bit_len)?;
    let raw = if config.stages.huffman {
        config.table.decode(&stream)?
    } else {
        if !bit_len.is_multiple_of(8) {
            return Err(PipelineError::BadBitLength {
                bit_len,
                bytes: bytes.len(),
            });
        }
        stream.into_parts().0
    };
    let tokens = match config.framing() {
        Some(f) => prefix::decode(&f, &raw)?,
        None => {
            if raw.len() % 4 != 0 {
                return Err(PipelineError::RaggedVerbatim(raw.len()));
            }
            raw.chunks_exact(4)
                .map(|c| Token::Addr(Address(u32::from_be_bytes(c.try_into().expect("4 bytes")))))
                .collect()
        }
    };
    let specs: &[SubPathSpec] = if config.stages.subpath { &config.specs } else { &[] };
    Ok(subpath::decode(specs, &tokens)?)
}

impl CfLog {
    /// File form: `bit_len:u32` little-endian followed by the packed bytes.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = self.bit_len.to_le_bytes().to_vec();
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn from_file_bytes(data: &[u8]) -> Result<Self, PipelineError> {
        if data.len() < 4 {
            return Err(PipelineError::BadBitLength { bit_len: 0, bytes: data.len() });
        }
        let bit_len = u32::from_le_bytes(data[..4].try_into().expect("4 bytes"));
        let bytes = data[4..].to_vec();
        if (bit_len as usize).div_ceil(8) != bytes.len() {
            return Err(PipelineError::BadBitLength { bit_len, bytes: bytes.len() });
        }
        Ok(CfLog { bytes, bit_len })
    }

    pub fn decode(&self, config: &SessionConfig) -> Result<Trace, PipelineError> {
        decode_log(config, &self.bytes, self.bit_len).map(Trace::new)
    }
}
