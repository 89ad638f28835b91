use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use respec_core::bench::{bench_run, config_matrix, derive_cfg, to_csv, to_text, BenchConfig, Workload};
use respec_core::model::{Address, CfgModel, Trace};
use respec_core::pipeline::{encode_trace, CfLog, SessionConfig};
use respec_core::prefix::PrefixConfig;
use respec_core::protocol::{AttestKey, SpeculationUpdate, StoredSpeculation};
use respec_core::prover::{DeviceState, ProverDevice};
use respec_core::subpath::specs_to_text;
use respec_core::transport::{connect_tcp, Endpoint};
use respec_core::verifier::{
    gen_huffman_speculation, mine_subpaths, prefix_sizes, select_prefix_len, training_streams,
    Verdict, VerifierContext, VerifierState,
};

mod serve;

#[derive(Parser, Debug)]
#[command(version, about = "Speculative control-flow log compression and attestation")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Create a fresh key and matching device and verifier state files
    Init {
        #[arg(long)]
        device_state: PathBuf,
        #[arg(long)]
        verifier_state: PathBuf,
        /// Program memory image of the application
        #[arg(long)]
        pmem: PathBuf,
        #[arg(long)]
        cfg: PathBuf,
        /// Derive the key from a seed instead of the OS generator
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a Huffman table on prior traces
    GenTable {
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        /// Bundle whose prefix and sub-path settings shape the training stream
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose the prefix length that minimizes prior logs
    PickPrefix {
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, value_parser = parse_byte, default_value = "a5")]
        prefix_marker_byte: u8,
        #[arg(long, value_parser = parse_byte, default_value = "5a")]
        subpath_marker_byte: u8,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine frequent sub-paths from prior traces
    MineSubpaths {
        #[arg(long = "trace", required = true)]
        traces: Vec<PathBuf>,
        #[arg(short, long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        min_len: usize,
        #[arg(long, default_value_t = 16)]
        max_len: usize,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compress a trace into a log file
    Encode {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand a log file back into a trace
    Decode {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Issue an attestation request
    Request {
        /// Verifier state file
        #[arg(long)]
        state: PathBuf,
        /// Speculation to install on the device; sent only if it changed
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a trace on the simulated device and produce a report
    Attest {
        /// Device state file
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, required_unless_present = "connect")]
        request: Option<PathBuf>,
        #[arg(long, required_unless_present = "connect")]
        out: Option<PathBuf>,
        /// Fetch the request from a verifier service instead of a file
        #[arg(long, requires = "device_id", conflicts_with_all = ["request", "out"])]
        connect: Option<String>,
        #[arg(long)]
        device_id: Option<String>,
        #[cfg(feature = "attack-sim")]
        #[arg(long)]
        attack: Option<String>,
        #[cfg(feature = "attack-sim")]
        #[arg(long, default_value_t = 0)]
        attack_seed: u64,
    },
    /// Check a report and the path it carries
    Verify {
        /// Verifier state file
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Write the decoded path here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure log sizes across workloads and stage combinations
    Bench {
        #[arg(long = "workload")]
        workloads: Vec<String>,
        #[arg(long = "config")]
        configs: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        entries: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write each workload's trace and derived CFG into this directory
        #[arg(long)]
        save_traces: Option<PathBuf>,
    },
    /// Serve attestation sessions over TCP
    ServeVerifier {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// `id=path` of a verifier state file; repeat per device
        #[arg(long = "device", required = true)]
        devices: Vec<String>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Exit after this many sessions
        #[arg(long)]
        sessions: Option<usize>,
    },
}

fn parse_byte(s: &str) -> Result<u8, String> {
    u8::from_str_radix(s.trim_start_matches("0x"), 16).map_err(|e| e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}

fn load_trace(path: &Path) -> Result<Trace> {
    Trace::parse(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_traces(paths: &[PathBuf]) -> Result<Vec<Trace>> {
    paths.iter().map(|p| load_trace(p)).collect()
}

fn load_cfg(path: &Path) -> Result<CfgModel> {
    CfgModel::parse(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub(crate) fn load_bundle(path: Option<&Path>) -> Result<StoredSpeculation> {
    match path {
        None => Ok(StoredSpeculation::default()),
        Some(p) => StoredSpeculation::from_toml(&read_text(p)?).with_context(|| format!("parsing {}", p.display())),
    }
}

fn save_bundle(path: &Path, spec: &StoredSpeculation) -> Result<()> {
    write(path, spec.to_toml()?)
}

/// Resolves a path stored in a state file relative to that file.
fn beside(state: &Path, stored: &str) -> PathBuf {
    let p = Path::new(stored);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        state.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub(crate) fn load_verifier(path: &Path) -> Result<(VerifierContext, VerifierState)> {
    let state = VerifierState::from_toml(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let pmem = read(&beside(path, &state.pmem))?;
    let cfg = load_cfg(&beside(path, &state.cfg))?;
    Ok((VerifierContext::from_state(&state, pmem, cfg)?, state))
}

pub(crate) fn save_verifier(path: &Path, ctx: &VerifierContext, old: &VerifierState) -> Result<()> {
    write(path, ctx.state(&old.pmem, &old.cfg).to_toml()?)
}

fn load_device(path: &Path) -> Result<(ProverDevice, DeviceState)> {
    let state = DeviceState::from_toml(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let pmem = read(&beside(path, &state.pmem))?;
    let cfg = load_cfg(&beside(path, &state.cfg))?;
    Ok((ProverDevice::from_state(&state, pmem, cfg)?, state))
}

/// The request payload that moves the device from `held` to `wanted`.
pub(crate) fn update_for(held: &StoredSpeculation, wanted: Option<&StoredSpeculation>) -> SpeculationUpdate {
    match wanted {
        Some(w) if w != held => SpeculationUpdate::replace_all(w),
        _ => SpeculationUpdate::default(),
    }
}

pub(crate) fn describe(v: &Verdict) -> String {
    if !v.authentic {
        let why = v.reject.as_ref().map(|r| r.to_string()).unwrap_or_default();
        return format!("authentic: no ({why})\n");
    }
    let n = v.path.as_ref().map_or(0, Trace::len);
    match &v.cfg_verdict {
        Some(p) if p.is_valid() => format!("authentic: yes\nentries: {n}\npath: valid\n"),
        Some(respec_core::model::PathVerdict::Violation { index }) => {
            let at = v.path.as_ref().and_then(|t| t.destinations().get(*index).copied());
            format!(
                "authentic: yes\nentries: {n}\npath: violation at index {index} ({})\n",
                at.map(|a| a.to_string()).unwrap_or_default()
            )
        }
        _ => format!("authentic: yes\nentries: {n}\n"),
    }
}

fn run(args: Args) -> Result<ExitCode> {
    match args.cmd {
        Cmd::Init {
            device_state,
            verifier_state,
            pmem,
            cfg,
            seed,
        } => {
            load_cfg(&cfg)?;
            read(&pmem)?;
            let mut key = [0u8; 32];
            match seed {
                Some(s) => ChaCha20Rng::seed_from_u64(s).fill_bytes(&mut key),
                None => rand::rngs::OsRng.fill_bytes(&mut key),
            }
            let key = AttestKey::new(key);
            let pmem_abs = fs::canonicalize(&pmem)?.display().to_string();
            let cfg_abs = fs::canonicalize(&cfg)?.display().to_string();
            let dev = DeviceState {
                key: key.to_hex(),
                chal_prev: 0,
                pmem: pmem_abs.clone(),
                cfg: cfg_abs.clone(),
                speculation: Default::default(),
            };
            let ver = VerifierState {
                key: key.to_hex(),
                chal_prev: 0,
                pmem: pmem_abs,
                cfg: cfg_abs,
                pending: None,
                speculation: Default::default(),
            };
            write(&device_state, dev.to_toml()?)?;
            write(&verifier_state, ver.to_toml()?)?;
        }
        Cmd::GenTable { traces, bundle, out } => {
            let traces = load_traces(&traces)?;
            let mut spec = load_bundle(bundle.as_deref())?;
            spec.table = None;
            let streams = training_streams(&spec.session_config(), &traces)?;
            let table = gen_huffman_speculation(streams.iter().map(Vec::as_slice));
            println!("table: {} bytes", table.blob_len());
            spec.table = Some(table);
            save_bundle(&out, &spec)?;
        }
        Cmd::PickPrefix {
            traces,
            prefix_marker_byte,
            subpath_marker_byte,
            bundle,
            out,
        } => {
            let addrs: Vec<Address> = load_traces(&traces)?
                .into_iter()
                .flat_map(Trace::into_destinations)
                .collect();
            for (p, size) in prefix_sizes(&addrs, prefix_marker_byte, subpath_marker_byte) {
                println!("prefix_len {p}: {size} bytes");
            }
            let Some(p) = select_prefix_len(&addrs, prefix_marker_byte, subpath_marker_byte) else {
                bail!("every prefix length collides with a marker");
            };
            println!("selected: {p}");
            if let Some(out) = out {
                let mut spec = load_bundle(bundle.as_deref())?;
                spec.prefix = Some(PrefixConfig::with_marker_bytes(p, prefix_marker_byte, subpath_marker_byte)?);
                save_bundle(&out, &spec)?;
            }
        }
        Cmd::MineSubpaths {
            traces,
            k,
            min_len,
            max_len,
            bundle,
            out,
        } => {
            if k > 8 {
                bail!("at most 8 sub-paths");
            }
            let specs = mine_subpaths(&load_traces(&traces)?, k, min_len, max_len);
            print!("{}", specs_to_text(&specs));
            if let Some(out) = out {
                let mut spec = load_bundle(bundle.as_deref())?;
                spec.subpaths = Some(specs).filter(|s| !s.is_empty());
                save_bundle(&out, &spec)?;
            }
        }
        Cmd::Encode { bundle, trace, out } => {
            let config = load_bundle(bundle.as_deref())?.session_config();
            let trace = load_trace(&trace)?;
            let log = encode_trace(&config, trace.destinations())?;
            println!(
                "entries: {}\nverbatim: {} bytes\nencoded: {} bytes ({} bits)",
                trace.len(),
                4 * trace.len(),
                log.len_bytes(),
                log.bit_len
            );
            write(&out, log.to_file_bytes())?;
        }
        Cmd::Decode { bundle, log, out } => {
            let config: SessionConfig = load_bundle(bundle.as_deref())?.session_config();
            let log = CfLog::from_file_bytes(&read(&log)?)?;
            let text = log.decode(&config)?.to_text();
            match out {
                Some(p) => write(&p, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Request { state, bundle, out } => {
            let (mut ctx, old) = load_verifier(&state)?;
            let wanted = bundle.as_deref().map(|b| load_bundle(Some(b))).transpose()?;
            let update = update_for(ctx.speculation(), wanted.as_ref());
            let wire = ctx.issue_request(update)?;
            write(&out, &wire)?;
            save_verifier(&state, &ctx, &old)?;
            println!("chal: {}\nrequest: {} bytes", ctx.chal_prev(), wire.len());
        }
        Cmd::Attest {
            state,
            trace,
            request,
            out,
            connect,
            device_id,
            #[cfg(feature = "attack-sim")]
            attack,
            #[cfg(feature = "attack-sim")]
            attack_seed,
        } => {
            let (mut dev, old) = load_device(&state)?;
            let trace = load_trace(&trace)?;
            #[cfg(feature = "attack-sim")]
            if let Some(mode) = attack {
                dev.inject_attack(mode.parse()?, attack_seed);
            }
            let mut link = match &connect {
                Some(addr) => {
                    let mut link = connect_tcp(addr.as_str())?;
                    link.send(device_id.as_deref().unwrap_or_default().as_bytes())?;
                    Some(link)
                }
                None => None,
            };
            let wire = match (&mut link, &request) {
                (Some(l), _) => l.recv()?,
                (None, Some(r)) => read(r)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let chal = dev.handle_request(&wire)?;
            let report = dev.run_trace(&trace)?;
            write(&state, dev.state(&old.pmem, &old.cfg).to_toml()?)?;
            println!("chal: {chal}\nreport: {} bytes", report.len());
            match (&mut link, &out) {
                (Some(l), _) => {
                    l.send(&report)?;
                    let verdict = String::from_utf8(l.recv()?)?;
                    print!("{verdict}");
                }
                (None, Some(o)) => write(o, &report)?,
                (None, None) => unreachable!("clap requires one sink"),
            }
        }
        Cmd::Verify { state, report, out } => {
            let (mut ctx, old) = load_verifier(&state)?;
            let verdict = ctx.verify_and_decode(&read(&report)?)?;
            save_verifier(&state, &ctx, &old)?;
            print!("{}", describe(&verdict));
            if let (Some(o), Some(path)) = (out, &verdict.path) {
                write(&o, path.to_text())?;
            }
            if !verdict.is_benign() {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Bench {
            workloads,
            configs,
            seed,
            entries,
            csv,
            save_traces,
        } => {
            let workloads: Vec<Workload> = if workloads.is_empty() {
                Workload::ALL.to_vec()
            } else {
                workloads.iter().map(|w| w.parse()).collect::<Result<_, _>>()?
            };
            let configs: Vec<BenchConfig> = if configs.is_empty() {
                config_matrix()
            } else {
                configs.iter().map(|c| c.parse()).collect::<Result<_, _>>()?
            };
            if let Some(dir) = save_traces {
                fs::create_dir_all(&dir)?;
                for w in &workloads {
                    let t = w.generate(seed, entries);
                    write(&dir.join(format!("{w}.trace")), t.to_text())?;
                    if let Some(cfg) = derive_cfg(&[t]) {
                        write(&dir.join(format!("{w}.cfg")), cfg.to_text())?;
                    }
                }
            }
            let rows = bench_run(&workloads, &configs, seed, entries)?;
            print!("{}", to_text(&rows));
            if let Some(p) = csv {
                write(&p, to_csv(&rows)?)?;
            }
        }
        Cmd::ServeVerifier {
            listen,
            devices,
            bundle,
            sessions,
        } => {
            let wanted = bundle.as_deref().map(|b| load_bundle(Some(b))).transpose()?;
            serve::serve(&listen, &devices, wanted, sessions)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
