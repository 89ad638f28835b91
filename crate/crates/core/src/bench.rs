//! Synthetic workloads and the log-size benchmark.

use std::fmt;
use std::str::FromStr;

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Address, CfgModel, Trace};
use crate::pipeline::{encode_trace, PipelineError, SessionConfig};
use crate::prefix::{PrefixConfig, DEFAULT_PREFIX_MARKER_BYTE, DEFAULT_SUBPATH_MARKER_BYTE};
use crate::verifier::{
    gen_huffman_speculation, mine_subpaths, select_prefix_len, training_streams,
    DEFAULT_MAX_SUBPATH_LEN, DEFAULT_MIN_SUBPATH_LEN,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error("unknown config `{0}`")]
    UnknownConfig(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Workload {
    /// Sensing loop: short init, a 6-block body run 500 times, shutdown.
    LoopHeavy,
    /// Dispatcher calling functions spread over several memory regions.
    MultiFunction,
    /// Independent random addresses.
    UniformRandom,
    /// Random addresses sharing their top two bytes.
    SinglePrefix,
    /// Basic blocks visited with Zipf-distributed popularity.
    Zipf,
}

impl Workload {
    pub const ALL: [Workload; 5] = [
        Workload::LoopHeavy,
        Workload::MultiFunction,
        Workload::UniformRandom,
        Workload::SinglePrefix,
        Workload::Zipf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Workload::LoopHeavy => "loop-heavy",
            Workload::MultiFunction => "multi-function",
            Workload::UniformRandom => "uniform-random",
            Workload::SinglePrefix => "single-prefix",
            Workload::Zipf => "zipf",
        }
    }

    pub fn default_entries(self) -> usize {
        match self {
            Workload::LoopHeavy => 3020,
            Workload::MultiFunction => 3000,
            Workload::UniformRandom => 2000,
            Workload::SinglePrefix => 10_000,
            Workload::Zipf => 5000,
        }
    }

    /// Generates a trace. `entries` is ignored by the loop-heavy workload,
    /// whose length is fixed by its structure.
    pub fn generate(self, seed: u64, entries: Option<usize>) -> Trace {
        let n = entries.unwrap_or(self.default_entries());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = match self {
            Workload::LoopHeavy => loop_heavy(&mut rng),
            Workload::MultiFunction => multi_function(&mut rng, n),
            Workload::UniformRandom => (0..n).map(|_| loggable(&mut rng, 0, 0)).collect(),
            Workload::SinglePrefix => (0..n).map(|_| loggable(&mut rng, 0x0800_0000, 0xFFFF)).collect(),
            Workload::Zipf => zipf_blocks(&mut rng, n),
        };
        Trace::new(v)
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Workload {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Workload::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| BenchError::UnknownWorkload(s.to_string()))
    }
}

/// True if `a` can be logged under the default markers at every prefix
/// length.
pub fn loggable_everywhere(a: Address) -> bool {
    (0u8..=3).all(|p| {
        !PrefixConfig::with_default_markers(p)
            .expect("valid defaults")
            .collides(a)
    })
}

/// A random address `base | (r & mask)`, or fully random when `mask` is 0,
/// avoiding marker collisions.
fn loggable(rng: &mut ChaCha8Rng, base: u32, mask: u32) -> Address {
    loop {
        let r: u32 = rng.gen();
        let a = Address(if mask == 0 { r } else { base | (r & mask) });
        if loggable_everywhere(a) {
            return a;
        }
    }
}

fn loop_heavy(rng: &mut ChaCha8Rng) -> Vec<Address> {
    const BODY: [u32; 6] = [0x0800_0200, 0x0800_0214, 0x0800_0228, 0x0800_0240, 0x0800_0256, 0x0800_0270];
    let mut v: Vec<Address> = (0..12u32).map(|i| Address(0x0800_0100 + 8 * i)).collect();
    for _ in 0..500 {
        for &b in &BODY {
            // rare out-of-range reading takes the alternate branch
            if b == 0x0800_0240 && rng.gen_bool(0.03) {
                v.push(Address(0x0800_02A0));
            } else {
                v.push(Address(b));
            }
        }
    }
    v.extend((0..8u32).map(|i| Address(0x0800_0400 + 6 * i)));
    v
}

fn multi_function(rng: &mut ChaCha8Rng, n: usize) -> Vec<Address> {
    const REGIONS: [u32; 4] = [0x0800_0000, 0x0801_0000, 0x0802_0000, 0x2000_0000];
    // the dispatcher lives in the first region
    let funcs: Vec<Vec<Address>> = (0..10)
        .map(|i| {
            let region = REGIONS[1 + i % 3];
            let start = 0x100 * (i as u32 + 1);
            (0..3 + i % 6)
                .map(|j| Address(region | (start + 0x0C * j as u32)))
                .collect()
        })
        .collect();
    let mut v = Vec::with_capacity(n + 16);
    v.push(Address(0x0800_0040));
    while v.len() < n {
        let f = if rng.gen_bool(0.6) {
            rng.gen_range(0..3)
        } else {
            rng.gen_range(0..funcs.len())
        };
        v.push(Address(0x0800_0050 + 4 * f as u32));
        v.extend_from_slice(&funcs[f]);
        v.push(Address(0x0800_0080));
    }
    v.truncate(n);
    v
}

fn zipf_blocks(rng: &mut ChaCha8Rng, n: usize) -> Vec<Address> {
    // the block layout is the program and stays fixed; only the visit order is seeded
    let mut layout = ChaCha8Rng::seed_from_u64(0x5EED);
    let blocks: Vec<Address> = (0..64).map(|_| loggable(&mut layout, 0x0800_0000, 0xFFFC)).collect();
    let dist = Zipf::new(blocks.len() as u64, 1.2).expect("valid zipf");
    (0..n)
        .map(|_| blocks[dist.sample(rng) as usize - 1])
        .collect()
}

/// The CFG induced by the transitions of `traces`, entered at the first
/// destination of the first trace.
pub fn derive_cfg(traces: &[Trace]) -> Option<CfgModel> {
    let entry = *traces.iter().find(|t| !t.is_empty())?.destinations().first()?;
    let nodes: Vec<Address> = traces.iter().flat_map(|t| t.destinations().iter().copied()).collect();
    let edges: Vec<(Address, Address)> = traces
        .iter()
        .flat_map(|t| t.destinations().windows(2).map(|w| (w[0], w[1])))
        .collect();
    CfgModel::new(nodes, edges, entry).ok()
}

/// One point of the configuration matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub prefix: bool,
    pub huffman: bool,
    pub subpaths: usize,
}

impl BenchConfig {
    pub const BASELINE: BenchConfig = BenchConfig {
        prefix: false,
        huffman: false,
        subpaths: 0,
    };

    pub fn name(&self) -> String {
        let base = match (self.prefix, self.huffman) {
            (false, false) => "baseline",
            (true, false) => "prefix",
            (false, true) => "huffman",
            (true, true) => "both",
        };
        match self.subpaths {
            0 => base.to_string(),
            k if base == "baseline" => format!("subpaths{k}"),
            k => format!("{base}+subpaths{k}"),
        }
    }
}

impl FromStr for BenchConfig {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        config_matrix()
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| BenchError::UnknownConfig(s.to_string()))
    }
}

/// baseline, prefix, huffman, both, then each of those with 1..=8 mined
/// sub-paths.
pub fn config_matrix() -> Vec<BenchConfig> {
    let mut out = Vec::new();
    for subpaths in 0..=8 {
        for (prefix, huffman) in [(false, false), (true, false), (false, true), (true, true)] {
            out.push(BenchConfig {
                prefix,
                huffman,
                subpaths,
            });
        }
    }
    out
}

/// Derives a session configuration for `bc` from training traces, the way
/// a Verifier would from prior logs.
pub fn speculate(bc: &BenchConfig, training: &[Trace]) -> Result<SessionConfig, PipelineError> {
    let mut config = SessionConfig::verbatim();
    if bc.subpaths > 0 {
        config.specs = mine_subpaths(training, bc.subpaths, DEFAULT_MIN_SUBPATH_LEN, DEFAULT_MAX_SUBPATH_LEN);
        config.stages.subpath = !config.specs.is_empty();
    }
    if bc.prefix {
        let addrs: Vec<Address> = training.iter().flat_map(|t| t.destinations().iter().copied()).collect();
        let p = select_prefix_len(&addrs, DEFAULT_PREFIX_MARKER_BYTE, DEFAULT_SUBPATH_MARKER_BYTE).unwrap_or(0);
        config.prefix = PrefixConfig::with_default_markers(p).expect("valid defaults");
        config.stages.prefix = true;
    }
    if bc.huffman {
        let streams = training_streams(&config, training)?;
        config.table = gen_huffman_speculation(streams.iter().map(Vec::as_slice));
        config.stages.huffman = true;
    }
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub workload: String,
    pub config: String,
    pub entries: usize,
    pub verbatim_bytes: usize,
    pub encoded_bytes: usize,
    pub reduction_pct: f64,
    pub table_bytes: usize,
}

/// Training trace seed for a given evaluation seed.
pub fn training_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Measures every config on every workload. Speculations are trained on a
/// separate run of the same workload.
pub fn bench_run(workloads: &[Workload], configs: &[BenchConfig], seed: u64, entries: Option<usize>) -> Result<Vec<BenchRow>, BenchError> {
    let mut rows = Vec::new();
    for &w in workloads {
        let eval = w.generate(seed, entries);
        let training = [w.generate(training_seed(seed), entries)];
        for bc in configs {
            let config = speculate(bc, &training)?;
            rows.push(measure(w.name(), &bc.name(), &config, &eval)?);
        }
    }
    Ok(rows)
}

/// Encodes `trace` under `config` and reports sizes against the verbatim log.
pub fn measure(workload: &str, name: &str, config: &SessionConfig, trace: &Trace) -> Result<BenchRow, PipelineError> {
    let log = encode_trace(config, trace.destinations())?;
    let verbatim = 4 * trace.len();
    let reduction = if verbatim == 0 {
        0.0
    } else {
        100.0 * (1.0 - log.len_bytes() as f64 / verbatim as f64)
    };
    Ok(BenchRow {
        workload: workload.to_string(),
        config: name.to_string(),
        entries: trace.len(),
        verbatim_bytes: verbatim,
        encoded_bytes: log.len_bytes(),
        reduction_pct: reduction,
        table_bytes: if config.stages.huffman { config.table.blob_len() } else { 0 },
    })
}

pub fn to_csv(rows: &[BenchRow]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn to_text(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<16} {:<22} {:>8} {:>10} {:>10} {:>9} {:>6}\n",
        "workload", "config", "entries", "verbatim", "encoded", "reduction", "table"
    );
    for r in rows {
        out += &format!(
            "{:<16} {:<22} {:>8} {:>10} {:>10} {:>8.2}% {:>6}\n",
            r.workload, r.config, r.entries, r.verbatim_bytes, r.encoded_bytes, r.reduction_pct, r.table_bytes
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for w in Workload::ALL {
            assert_eq!(w.name().parse::<Workload>().unwrap(), w);
        }
        assert!("nope".parse::<Workload>().is_err());
        let m = config_matrix();
        assert_eq!(m.len(), 36);
        for c in &m {
            assert_eq!(c.name().parse::<BenchConfig>().unwrap(), *c);
        }
        assert_eq!(m[0].name(), "baseline");
        assert_eq!(m[7].name(), "both+subpaths1");
    }

    #[test]
    fn generators_are_seeded() {
        for w in Workload::ALL {
            assert_eq!(w.generate(5, Some(300)), w.generate(5, Some(300)));
            assert!(w.generate(5, Some(300)).destinations().iter().all(|&a| loggable_everywhere(a)));
        }
        assert_ne!(Workload::UniformRandom.generate(1, None), Workload::UniformRandom.generate(2, None));
    }

    #[test]
    fn loop_heavy_shape() {
        let t = Workload::LoopHeavy.generate(0, None);
        assert_eq!(t.len(), 12 + 6 * 500 + 8);
        let cfg = derive_cfg(std::slice::from_ref(&t)).unwrap();
        assert!(cfg.check_trace(&t).is_valid());
    }

    #[test]
    fn baseline_is_verbatim() {
        let rows = bench_run(&[Workload::Zipf], &[BenchConfig::BASELINE], 1, Some(100)).unwrap();
        assert_eq!(rows[0].encoded_bytes, 400);
        assert_eq!(rows[0].reduction_pct, 0.0);
        assert_eq!(rows[0].table_bytes, 0);
    }

    #[test]
    fn csv_schema() {
        let rows = bench_run(&[Workload::SinglePrefix], &[BenchConfig::BASELINE], 1, Some(10)).unwrap();
        let csv = to_csv(&rows).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "workload,config,entries,verbatim_bytes,encoded_bytes,reduction_pct,table_bytes"
        );
        assert_eq!(lines.next().unwrap(), "single-prefix,baseline,10,40,40,0.0,0");
    }

    #[test]
    fn runs_are_deterministic() {
        let configs = config_matrix();
        let a = bench_run(&[Workload::MultiFunction], &configs, 3, Some(400)).unwrap();
        let b = bench_run(&[Workload::MultiFunction], &configs, 3, Some(400)).unwrap();
        assert_eq!(a, b);
    }
}
