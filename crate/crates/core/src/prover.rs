//! Software stand-in for the attested device.
//!
//! Execution is trace replay: every destination of a trace goes through the
//! same logging path an instrumented branch would take.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundle::{BundleError, SpeculationBundle};
use crate::model::{Address, CfgModel, Trace};
use crate::pipeline::{CfLogEncoder, PipelineError, SessionConfig};
use crate::protocol::{build_report, verify_request, AttestKey, Reject, StoredSpeculation};

#[derive(Debug, Error)]
pub enum ProverError {
    #[error(transparent)]
    Rejected(#[from] Reject),
    #[error("configuration unusable: {0}")]
    ConfigUnusable(String),
    #[error("no live session")]
    NoLiveSession,
    #[error("program memory is locked during a session")]
    PmemLocked,
    #[error("write of {len} bytes at {offset} is outside program memory")]
    PmemRange { offset: usize, len: usize },
    #[error("destination {0} collides with a log marker")]
    MarkerCollision(Address),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Program memory of the attested application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmemImage {
    bytes: Vec<u8>,
    locked: bool,
}

impl PmemImage {
    pub fn new(bytes: Vec<u8>) -> Self {
        PmemImage {
            bytes,
            locked: false,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn write(&mut self, offset: usize, data: &[u8]) -> Result<(), ProverError> {
        if self.locked {
            return Err(ProverError::PmemLocked);
        }
        let end = offset
            .checked_add(data.len())
            .filter(|&e| e <= self.bytes.len())
            .ok_or(ProverError::PmemRange {
                offset,
                len: data.len(),
            })?;
        self.bytes[offset..end].copy_from_slice(data);
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Session {
    chal: u64,
    config: SessionConfig,
    encoder: CfLogEncoder,
}

#[derive(Debug, Clone)]
pub struct ProverDevice {
    key: AttestKey,
    chal_prev: u64,
    pmem: PmemImage,
    cfg: CfgModel,
    speculation: StoredSpeculation,
    session: Option<Session>,
    #[cfg(feature = "attack-sim")]
    attack: Option<attack::Armed>,
    #[cfg(feature = "attack-sim")]
    last_attack: Option<attack::AttackRecord>,
}

impl ProverDevice {
    pub fn new(key: AttestKey, pmem: Vec<u8>, cfg: CfgModel) -> Self {
        ProverDevice {
            key,
            chal_prev: 0,
            pmem: PmemImage::new(pmem),
            cfg,
            speculation: StoredSpeculation::default(),
            session: None,
            #[cfg(feature = "attack-sim")]
            attack: None,
            #[cfg(feature = "attack-sim")]
            last_attack: None,
        }
    }

    pub fn chal_prev(&self) -> u64 {
        self.chal_prev
    }

    pub fn pmem(&self) -> &PmemImage {
        &self.pmem
    }

    pub fn cfg(&self) -> &CfgModel {
        &self.cfg
    }

    pub fn speculation(&self) -> &StoredSpeculation {
        &self.speculation
    }

    pub fn has_live_session(&self) -> bool {
        self.session.is_some()
    }

    /// The configuration of the live session.
    pub fn session_config(&self) -> Option<&SessionConfig> {
        self.session.as_ref().map(|s| &s.config)
    }

    pub fn write_pmem(&mut self, offset: usize, data: &[u8]) -> Result<(), ProverError> {
        self.pmem.write(offset, data)
    }

    /// Authenticates a request, stores its speculation and opens a session.
    /// On any error the device state is unchanged.
    pub fn handle_request(&mut self, wire: &[u8]) -> Result<u64, ProverError> {
        let req = verify_request(&self.key, self.chal_prev, wire)?;
        let mut speculation = self.speculation.clone();
        speculation.apply(req.speculation);
        let config = speculation.session_config();
        config
            .validate()
            .map_err(|e| ProverError::ConfigUnusable(e.to_string()))?;
        if let Some(framing) = config.framing() {
            if let Some(bad) = self.cfg.nodes().find(|&n| framing.collides(n)) {
                return Err(ProverError::ConfigUnusable(format!(
                    "marker collides with CFG node {bad}"
                )));
            }
        }
        let encoder = CfLogEncoder::new(&config)?;
        self.chal_prev = req.chal;
        self.speculation = speculation;
        self.pmem.locked = true;
        self.session = Some(Session {
            chal: req.chal,
            config,
            encoder,
        });
        Ok(req.chal)
    }

    /// Records one executed branch destination.
    pub fn log_branch(&mut self, dest: Address) -> Result<(), ProverError> {
        let session = self.session.as_mut().ok_or(ProverError::NoLiveSession)?;
        if !session.config.accepts(dest) {
            return Err(ProverError::MarkerCollision(dest));
        }
        session.encoder.log_branch(dest)?;
        Ok(())
    }

    /// Finalizes the log, authenticates it and closes the session.
    pub fn finish_session(&mut self) -> Result<Vec<u8>, ProverError> {
        let session = self.session.as_mut().ok_or(ProverError::NoLiveSession)?;
        let log = session.encoder.finalize()?;
        let chal = session.chal;
        self.session = None;
        #[cfg(feature = "attack-sim")]
        self.tamper_code();
        let report = build_report(&self.key, chal, &self.pmem.bytes, &log.bytes, log.bit_len);
        self.pmem.locked = false;
        #[cfg(feature = "attack-sim")]
        let report = self.tamper_wire(report);
        Ok(report)
    }

    /// Replays `trace` through the live session and returns the report.
    pub fn run_trace(&mut self, trace: &Trace) -> Result<Vec<u8>, ProverError> {
        if self.session.is_none() {
            return Err(ProverError::NoLiveSession);
        }
        #[cfg(feature = "attack-sim")]
        let hijacked = self.hijack(trace);
        #[cfg(feature = "attack-sim")]
        let trace = &hijacked;
        for &dest in trace.destinations() {
            self.log_branch(dest)?;
        }
        self.finish_session()
    }

    pub fn state(&self, pmem_path: &str, cfg_path: &str) -> DeviceState {
        DeviceState {
            key: self.key.to_hex(),
            chal_prev: self.chal_prev,
            pmem: pmem_path.to_string(),
            cfg: cfg_path.to_string(),
            speculation: SpeculationBundle::from_speculation(&self.speculation),
        }
    }

    /// Rebuilds a device from persisted state and the files it names.
    pub fn from_state(state: &DeviceState, pmem: Vec<u8>, cfg: CfgModel) -> Result<Self, BundleError> {
        let key = AttestKey::from_hex(&state.key).ok_or(BundleError::Hex { field: "key" })?;
        let mut dev = ProverDevice::new(key, pmem, cfg);
        dev.chal_prev = state.chal_prev;
        dev.speculation = state.speculation.to_speculation()?;
        Ok(dev)
    }
}

/// Device state persisted between CLI runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceState {
    pub key: String,
    pub chal_prev: u64,
    pub pmem: String,
    pub cfg: String,
    #[serde(default)]
    pub speculation: SpeculationBundle,
}

impl DeviceState {
    pub fn to_toml(&self) -> Result<String, BundleError> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, BundleError> {
        Ok(toml::from_str(text)?)
    }
}

#[cfg(feature = "attack-sim")]
pub mod attack {
    //! Deterministic attack injection for negative tests.

    use std::str::FromStr;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use thiserror::Error;

    use super::ProverDevice;
    use crate::model::{Address, Trace};
    use crate::protocol::TAG_LEN;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum AttackMode {
        /// Replaces one destination with an address outside the CFG.
        HijackEdge,
        /// Flips one program-memory byte before the report is built.
        CodeTamper,
        /// Flips one log bit in the report wire bytes.
        LogTamper,
    }

    #[derive(Debug, Error, PartialEq, Eq)]
    #[error("unknown attack mode `{0}`")]
    pub struct UnknownMode(pub String);

    impl FromStr for AttackMode {
        type Err = UnknownMode;

        fn from_str(s: &str) -> Result<Self, Self::Err> {
            match s {
                "hijack-edge" => Ok(AttackMode::HijackEdge),
                "code-tamper" => Ok(AttackMode::CodeTamper),
                "log-tamper" => Ok(AttackMode::LogTamper),
                other => Err(UnknownMode(other.to_string())),
            }
        }
    }

    /// What an injected attack did.
    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct AttackRecord {
        pub mode: AttackMode,
        /// Trace index for hijacks, PMEM byte for code tampering, wire bit
        /// for log tampering.
        pub position: usize,
        pub rogue: Option<Address>,
    }

    #[derive(Debug, Clone)]
    pub(super) struct Armed {
        mode: AttackMode,
        rng: ChaCha8Rng,
    }

    impl ProverDevice {
        /// Arms `mode` for the next session.
        pub fn inject_attack(&mut self, mode: AttackMode, seed: u64) {
            self.attack = Some(Armed {
                mode,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
            self.last_attack = None;
        }

        pub fn last_attack(&self) -> Option<&AttackRecord> {
            self.last_attack.as_ref()
        }

        fn take_armed(&mut self, mode: AttackMode) -> Option<Armed> {
            match &self.attack {
                Some(a) if a.mode == mode => self.attack.take(),
                _ => None,
            }
        }

        pub(super) fn hijack(&mut self, trace: &Trace) -> Trace {
            let Some(mut armed) = self.take_armed(AttackMode::HijackEdge) else {
                return trace.clone();
            };
            let mut dests = trace.destinations().to_vec();
            let n = dests.len();
            let position = match n {
                0 => 0,
                1 | 2 => armed.rng.gen_range(0..n),
                _ => armed.rng.gen_range(1..n - 1),
            };
            let base = dests.get(position).copied().unwrap_or(self.cfg.entry());
            let config = self.session.as_ref().map(|s| s.config.clone());
            let rogue = loop {
                let near = base.value() ^ armed.rng.gen_range(1..=0xFFu32);
                let cand = Address(if armed.rng.gen_bool(0.9) { near } else { armed.rng.gen() });
                let encodable = config.as_ref().is_none_or(|c| c.accepts(cand));
                if !self.cfg.contains(cand) && encodable {
                    break cand;
                }
            };
            if position == n {
                dests.push(rogue);
            } else {
                dests[position] = rogue;
            }
            self.last_attack = Some(AttackRecord {
                mode: AttackMode::HijackEdge,
                position,
                rogue: Some(rogue),
            });
            Trace::new(dests)
        }

        pub(super) fn tamper_code(&mut self) {
            let Some(mut armed) = self.take_armed(AttackMode::CodeTamper) else {
                return;
            };
            if self.pmem.bytes.is_empty() {
                self.pmem.bytes.push(0);
            }
            let position = armed.rng.gen_range(0..self.pmem.bytes.len());
            self.pmem.bytes[position] ^= 1 << armed.rng.gen_range(0..8);
            self.last_attack = Some(AttackRecord {
                mode: AttackMode::CodeTamper,
                position,
                rogue: None,
            });
        }

        pub(super) fn tamper_wire(&mut self, mut report: Vec<u8>) -> Vec<u8> {
            let Some(mut armed) = self.take_armed(AttackMode::LogTamper) else {
                return report;
            };
            // cflog bytes sit between the 18-byte fixed part plus length and the tag
            let start = 6 + 8 + 4 + 4;
            let end = report.len() - TAG_LEN;
            let bit = if end > start {
                armed.rng.gen_range(start * 8..end * 8)
            } else {
                armed.rng.gen_range(end * 8..report.len() * 8)
            };
            report[bit / 8] ^= 0x80 >> (bit % 8);
            self.last_attack = Some(AttackRecord {
                mode: AttackMode::LogTamper,
                position: bit,
                rogue: None,
            });
            report
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::decode_log;
    use crate::prefix::PrefixConfig;
    use crate::protocol::{build_request, verify_report, Field, SpeculationUpdate};

    fn a(v: u32) -> Address {
        Address(v)
    }

    fn cfg() -> CfgModel {
        CfgModel::parse(
            "node 08000000\nnode 08000010\nnode 08000024\nentry 08000000\n\
             edge 08000000 08000010\nedge 08000010 08000024\nedge 08000024 08000010\n",
        )
        .unwrap()
    }

    fn device() -> ProverDevice {
        ProverDevice::new(AttestKey::new([7; 32]), b"firmware".to_vec(), cfg())
    }

    fn request(chal_prev: u64, upd: &SpeculationUpdate) -> Vec<u8> {
        build_request(&AttestKey::new([7; 32]), chal_prev, upd).unwrap().0
    }

    #[test]
    fn session_lifecycle() {
        let mut dev = device();
        assert!(matches!(dev.log_branch(a(1)), Err(ProverError::NoLiveSession)));
        assert_eq!(dev.handle_request(&request(0, &SpeculationUpdate::default())).unwrap(), 1);
        assert!(dev.pmem().is_locked());
        assert!(matches!(dev.write_pmem(0, b"X"), Err(ProverError::PmemLocked)));
        let trace = Trace::new(vec![a(0x0800_0010), a(0x0800_0024)]);
        let report = dev.run_trace(&trace).unwrap();
        assert!(!dev.pmem().is_locked());
        assert!(!dev.has_live_session());
        let rep = verify_report(&AttestKey::new([7; 32]), 1, b"firmware", &report).unwrap();
        let out = decode_log(&SessionConfig::verbatim(), &rep.cflog, rep.bit_len).unwrap();
        assert_eq!(out, trace.destinations());
        dev.write_pmem(0, b"F").unwrap();
        assert_eq!(dev.pmem().bytes(), b"Firmware");
    }

    #[test]
    fn replay_leaves_state_untouched() {
        let mut dev = device();
        let wire = request(0, &SpeculationUpdate::default());
        dev.handle_request(&wire).unwrap();
        dev.run_trace(&Trace::default()).unwrap();
        let before = (dev.chal_prev(), dev.speculation().clone());
        assert!(matches!(
            dev.handle_request(&wire),
            Err(ProverError::Rejected(Reject::StaleChallenge { .. }))
        ));
        assert_eq!((dev.chal_prev(), dev.speculation().clone()), before);
        assert!(!dev.has_live_session());
    }

    #[test]
    fn colliding_marker_is_unusable() {
        let mut dev = device();
        let upd = SpeculationUpdate {
            prefix: Field::Set(PrefixConfig::new(2, vec![0x00, 0x10], vec![0x5A, 0x5A]).unwrap()),
            ..Default::default()
        };
        assert!(matches!(
            dev.handle_request(&request(0, &upd)),
            Err(ProverError::ConfigUnusable(_))
        ));
        assert_eq!(dev.chal_prev(), 0);
        assert!(!dev.pmem().is_locked());
    }

    #[test]
    fn off_cfg_colliding_destination_is_refused() {
        let mut dev = device();
        let upd = SpeculationUpdate {
            prefix: Field::Set(PrefixConfig::with_default_markers(2).unwrap()),
            ..Default::default()
        };
        dev.handle_request(&request(0, &upd)).unwrap();
        assert!(matches!(
            dev.log_branch(a(0x0800_A5A5)),
            Err(ProverError::MarkerCollision(_))
        ));
    }

    #[test]
    fn state_round_trip() {
        let mut dev = device();
        let upd = SpeculationUpdate {
            prefix: Field::Set(PrefixConfig::with_default_markers(2).unwrap()),
            ..Default::default()
        };
        dev.handle_request(&request(4, &upd)).unwrap();
        let text = dev.state("app.bin", "app.cfg").to_toml().unwrap();
        let state = DeviceState::from_toml(&text).unwrap();
        assert_eq!(state.chal_prev, 5);
        assert_eq!(state.pmem, "app.bin");
        let back = ProverDevice::from_state(&state, b"firmware".to_vec(), cfg()).unwrap();
        assert_eq!(back.speculation(), dev.speculation());
        assert_eq!(back.chal_prev(), 5);
    }
}
