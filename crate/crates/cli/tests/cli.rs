use std::fs;
use std::io::{BufRead, BufReader};
use std::thread;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use tempfile::TempDir;

fn respec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_respec")).args(args).output().expect("run respec")
}

fn ok(args: &[&str]) -> String {
    let out = respec(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Setup {
    dir: TempDir,
}

impl Setup {
    /// Bench traces for one workload, a pmem image and paired state files.
    fn new(workload: &str) -> Setup {
        let dir = TempDir::new().unwrap();
        let d = dir.path();
        for (seed, sub) in [("1", "run"), ("2", "prior")] {
            let out = d.join(sub);
            ok(&["bench", "--workload", workload, "--config", "baseline", "--seed", seed, "--entries", "600", "--save-traces", p(&out)]);
        }
        fs::write(d.join("app.bin"), (0..1024u32).map(|i| (i % 253) as u8).collect::<Vec<_>>()).unwrap();
        // the CFG has to cover both runs
        let mut cfg = fs::read_to_string(d.join(format!("run/{workload}.cfg"))).unwrap();
        for line in fs::read_to_string(d.join(format!("prior/{workload}.cfg"))).unwrap().lines() {
            if !line.starts_with("entry") && !cfg.lines().any(|l| l == line) {
                cfg.push_str(line);
                cfg.push('\n');
            }
        }
        fs::write(d.join("app.cfg"), cfg).unwrap();
        ok(&[
            "init", "--device-state", p(&d.join("dev.toml")), "--verifier-state", p(&d.join("ver.toml")),
            "--pmem", p(&d.join("app.bin")), "--cfg", p(&d.join("app.cfg")), "--seed", "11",
        ]);
        Setup { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    /// Runs the three speculation steps and returns the bundle path.
    fn speculate(&self, workload: &str) -> String {
        let prior = self.s(&format!("prior/{workload}.trace"));
        let b = self.s("bundle.toml");
        let picked = ok(&["pick-prefix", "--trace", &prior, "--out", &b]);
        assert!(picked.contains("selected: "));
        ok(&["mine-subpaths", "--trace", &prior, "-k", "4", "--bundle", &b, "--out", &b]);
        let gen = ok(&["gen-table", "--trace", &prior, "--bundle", &b, "--out", &b]);
        assert!(gen.starts_with("table: "));
        b
    }
}

#[test]
fn encode_decode_round_trip() {
    let s = Setup::new("multi-function");
    let b = s.speculate("multi-function");
    let trace = s.s("run/multi-function.trace");
    let stats = ok(&["encode", "--bundle", &b, "--trace", &trace, "--out", &s.s("log.bin")]);
    assert!(stats.contains("entries: 600\nverbatim: 2400 bytes\n"));
    ok(&["decode", "--bundle", &b, "--log", &s.s("log.bin"), "--out", &s.s("back.trace")]);
    assert_eq!(
        fs::read_to_string(&trace).unwrap(),
        fs::read_to_string(s.path("back.trace")).unwrap()
    );

    // decoding under the wrong speculation does not give the trace back
    let out = respec(&["decode", "--log", &s.s("log.bin")]);
    assert!(!out.status.success() || out.stdout != fs::read(&trace).unwrap());
}

#[test]
fn file_attestation_flow() {
    let s = Setup::new("loop-heavy");
    let b = s.speculate("loop-heavy");
    let (ver, dev) = (s.s("ver.toml"), s.s("dev.toml"));
    let first = ok(&["request", "--state", &ver, "--bundle", &b, "--out", &s.s("req.bin")]);
    assert!(first.starts_with("chal: 1\n"));
    ok(&["attest", "--state", &dev, "--trace", &s.s("run/loop-heavy.trace"), "--request", &s.s("req.bin"), "--out", &s.s("rep.bin")]);
    let verdict = ok(&["verify", "--state", &ver, "--report", &s.s("rep.bin"), "--out", &s.s("seen.trace")]);
    let n = fs::read_to_string(s.path("run/loop-heavy.trace")).unwrap().lines().filter(|l| !l.is_empty()).count();
    assert_eq!(verdict, format!("authentic: yes\nentries: {n}\npath: valid\n"));
    assert_eq!(
        fs::read_to_string(s.path("seen.trace")).unwrap(),
        fs::read_to_string(s.path("run/loop-heavy.trace")).unwrap()
    );

    // the same bundle again is not resent
    let second = ok(&["request", "--state", &ver, "--bundle", &b, "--out", &s.s("req2.bin")]);
    let sizes: Vec<u64> = ["req.bin", "req2.bin"].iter().map(|f| fs::metadata(s.path(f)).unwrap().len()).collect();
    assert!(second.starts_with("chal: 2\n"));
    assert!(sizes[1] < sizes[0]);

    // replaying the first request fails on the device
    let replay = respec(&["attest", "--state", &dev, "--trace", &s.s("run/loop-heavy.trace"), "--request", &s.s("req.bin"), "--out", &s.s("x.bin")]);
    assert!(!replay.status.success());
    assert!(String::from_utf8_lossy(&replay.stderr).contains("challenge 1 is not newer than 1"));

    // a flipped report bit is caught and reported with exit status 2
    ok(&["attest", "--state", &dev, "--trace", &s.s("run/loop-heavy.trace"), "--request", &s.s("req2.bin"), "--out", &s.s("rep2.bin")]);
    let mut rep = fs::read(s.path("rep2.bin")).unwrap();
    let last = rep.len() - 40;
    rep[last] ^= 1;
    fs::write(s.path("rep2.bin"), rep).unwrap();
    let out = respec(&["verify", "--state", &ver, "--report", &s.s("rep2.bin")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("authentic: no"));
}

#[test]
fn bench_writes_csv() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("rows.csv");
    let text = ok(&["bench", "--workload", "single-prefix", "--config", "baseline", "--config", "prefix", "--entries", "1000", "--csv", p(&csv)]);
    assert!(text.contains("single-prefix"));
    let rows = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("workload,config,entries,verbatim_bytes,encoded_bytes"));
    assert!(lines[1].starts_with("single-prefix,baseline,1000,4000,4000,"));
    assert!(lines[2].starts_with("single-prefix,prefix,1000,4000,2004,"));
}

#[test]
fn bad_input_is_an_error() {
    let out = respec(&["bench", "--workload", "nope"]);
    assert!(!out.status.success());
    let out = respec(&["mine-subpaths", "--trace", "/nonexistent/t", "-k", "9"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
    }
}

#[test]
fn serve_and_attest_over_tcp() {
    let s = Setup::new("zipf");
    let b = s.speculate("zipf");
    let mut server = Command::new(env!("CARGO_BIN_EXE_respec"))
        .args(["serve-verifier", "--listen", "127.0.0.1:0", "--device", &format!("d1={}", s.s("ver.toml")), "--bundle", &b, "--sessions", "2"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(server.stdout.take().unwrap()).lines();
    let line = lines.next().unwrap().unwrap();
    let addr = line.strip_prefix("listening on ").expect("listen line").to_string();
    let log = thread::spawn(move || lines.map(Result::unwrap).collect::<Vec<_>>());
    let server = KillOnDrop(server);

    let trace = s.s("run/zipf.trace");
    let first = ok(&["attest", "--state", &s.s("dev.toml"), "--trace", &trace, "--connect", &addr, "--device-id", "d1"]);
    assert!(first.contains("authentic: yes\nentries: 600\npath: valid\n"), "{first}");
    let second = ok(&["attest", "--state", &s.s("dev.toml"), "--trace", &trace, "--connect", &addr, "--device-id", "d1"]);
    assert!(second.starts_with("chal: 2\n"));
    let mut server = server;
    assert!(server.0.wait().unwrap().success());
    let log = log.join().unwrap();
    assert_eq!(log.len(), 2);
    assert!(log[0].starts_with("device d1: authentic: yes"), "{log:?}");
    let state = fs::read_to_string(s.path("ver.toml")).unwrap();
    assert!(state.contains("chal_prev = 2"));
}

#[cfg(feature = "attack-sim")]
#[test]
fn hijack_is_flagged() {
    let s = Setup::new("multi-function");
    let (ver, dev) = (s.s("ver.toml"), s.s("dev.toml"));
    ok(&["request", "--state", &ver, "--out", &s.s("req.bin")]);
    ok(&[
        "attest", "--state", &dev, "--trace", &s.s("run/multi-function.trace"), "--request", &s.s("req.bin"),
        "--out", &s.s("rep.bin"), "--attack", "hijack-edge", "--attack-seed", "4",
    ]);
    let out = respec(&["verify", "--state", &ver, "--report", &s.s("rep.bin")]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("authentic: yes\n") && text.contains("path: violation at index "), "{text}");
}
