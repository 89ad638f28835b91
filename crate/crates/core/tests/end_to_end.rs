use std::net::TcpListener;
use std::thread;

use respec_core::bench::{derive_cfg, training_seed, Workload};
use respec_core::model::{Address, PathVerdict};
use respec_core::protocol::{build_request, AttestKey, Reject, SpeculationUpdate, StoredSpeculation};
use respec_core::prover::{ProverDevice, ProverError};
use respec_core::transport::{connect_tcp, mem_pair, Endpoint, Framed, TransportError};
use respec_core::verifier::{
    gen_huffman_speculation, mine_subpaths, select_prefix_len, training_streams, VerifierContext,
};
use respec_core::prefix::PrefixConfig;
use respec_core::pipeline::SessionConfig;

fn key() -> AttestKey {
    AttestKey::new([7u8; 32])
}

fn pmem() -> Vec<u8> {
    (0..512u32).map(|i| (i * 13) as u8).collect()
}

/// Speculation built the way a verifier would from one prior run.
fn trained(w: Workload) -> StoredSpeculation {
    let prior = w.generate(training_seed(3), None);
    let p = select_prefix_len(prior.destinations(), 0xA5, 0x5A).unwrap();
    let prefix = PrefixConfig::with_default_markers(p).unwrap();
    let specs = mine_subpaths(std::slice::from_ref(&prior), 4, 2, 16);
    let mut spec = StoredSpeculation { table: None, prefix: Some(prefix), subpaths: Some(specs) };
    let shaping = SessionConfig { table: Default::default(), ..spec.session_config() };
    let streams = training_streams(&shaping, &[prior]).unwrap();
    spec.table = Some(gen_huffman_speculation(streams.iter().map(Vec::as_slice)));
    spec
}

#[test]
fn sessions_over_memory_channel() {
    let w = Workload::MultiFunction;
    let runs: Vec<_> = (0..3).map(|s| w.generate(s, None)).collect();
    let cfg = derive_cfg(&runs).unwrap();
    let mut vrf = VerifierContext::new(key(), pmem(), cfg.clone());
    let mut dev = ProverDevice::new(key(), pmem(), cfg);
    let (mut v_end, mut d_end) = mem_pair();
    let spec = trained(w);

    for (i, run) in runs.iter().enumerate() {
        let update = if i == 0 { SpeculationUpdate::replace_all(&spec) } else { SpeculationUpdate::default() };
        v_end.send(&vrf.issue_request(update).unwrap()).unwrap();
        dev.handle_request(&d_end.recv().unwrap()).unwrap();
        d_end.send(&dev.run_trace(run).unwrap()).unwrap();
        let verdict = vrf.verify_and_decode(&v_end.recv().unwrap()).unwrap();
        assert!(verdict.is_benign(), "session {i}");
        assert_eq!(verdict.path.as_ref(), Some(run));
    }
    assert_eq!(dev.speculation(), &spec);
    assert_eq!(dev.chal_prev(), 3);
}

#[test]
fn keep_and_clear_fields() {
    let w = Workload::LoopHeavy;
    let run = w.generate(1, None);
    let cfg = derive_cfg(std::slice::from_ref(&run)).unwrap();
    let mut vrf = VerifierContext::new(key(), pmem(), cfg.clone());
    let mut dev = ProverDevice::new(key(), pmem(), cfg);
    let spec = trained(w);

    let req = vrf.issue_request(SpeculationUpdate::replace_all(&spec)).unwrap();
    dev.handle_request(&req).unwrap();
    let full = dev.run_trace(&run).unwrap();
    assert!(vrf.verify_and_decode(&full).unwrap().is_benign());

    // dropping the table leaves prefix and sub-paths in place
    let update = SpeculationUpdate { table: respec_core::protocol::Field::Clear, ..Default::default() };
    let req = vrf.issue_request(update).unwrap();
    dev.handle_request(&req).unwrap();
    assert!(dev.speculation().table.is_none());
    assert!(dev.speculation().prefix.is_some());
    let without = dev.run_trace(&run).unwrap();
    assert!(without.len() > full.len());
    assert!(vrf.verify_and_decode(&without).unwrap().is_benign());
}

#[test]
fn wrong_key_and_stale_requests() {
    let run = Workload::LoopHeavy.generate(1, Some(200));
    let cfg = derive_cfg(std::slice::from_ref(&run)).unwrap();
    let mut dev = ProverDevice::new(key(), pmem(), cfg);
    let (forged, _) = build_request(&AttestKey::new([8u8; 32]), 0, &SpeculationUpdate::default()).unwrap();
    assert!(matches!(dev.handle_request(&forged), Err(ProverError::Rejected(Reject::BadMac))));

    let (req, chal) = build_request(&key(), 5, &SpeculationUpdate::default()).unwrap();
    assert_eq!(chal, 6);
    assert_eq!(dev.handle_request(&req).unwrap(), 6);
    dev.run_trace(&run).unwrap();
    let (old, _) = build_request(&key(), 2, &SpeculationUpdate::default()).unwrap();
    assert!(matches!(
        dev.handle_request(&old),
        Err(ProverError::Rejected(Reject::StaleChallenge { chal: 3, chal_prev: 6 }))
    ));
    assert!(matches!(dev.handle_request(&[0x52, 0x53]), Err(ProverError::Rejected(Reject::MalformedWire(_)))));
}

#[test]
fn pmem_locked_during_session() {
    let run = Workload::LoopHeavy.generate(1, Some(50));
    let cfg = derive_cfg(std::slice::from_ref(&run)).unwrap();
    let mut vrf = VerifierContext::new(key(), pmem(), cfg.clone());
    let mut dev = ProverDevice::new(key(), pmem(), cfg);
    dev.handle_request(&vrf.issue_request(Default::default()).unwrap()).unwrap();
    assert!(matches!(dev.write_pmem(0, &[1]), Err(ProverError::PmemLocked)));
    let report = dev.run_trace(&run).unwrap();
    assert!(vrf.verify_and_decode(&report).unwrap().is_benign());

    // an update after the session changes what the verifier measures
    dev.write_pmem(0, &[0xFF]).unwrap();
    dev.handle_request(&vrf.issue_request(Default::default()).unwrap()).unwrap();
    let report = dev.run_trace(&run).unwrap();
    let v = vrf.verify_and_decode(&report).unwrap();
    assert_eq!(v.reject, Some(Reject::BadMac));
}

#[test]
fn off_cfg_path_is_reported() {
    let run = Workload::MultiFunction.generate(4, Some(300));
    let cfg = derive_cfg(std::slice::from_ref(&run)).unwrap();
    let mut vrf = VerifierContext::new(key(), pmem(), cfg.clone());
    let mut dev = ProverDevice::new(key(), pmem(), cfg);
    dev.handle_request(&vrf.issue_request(Default::default()).unwrap()).unwrap();
    let mut bad = run.destinations().to_vec();
    bad[100] = Address(0x0900_0000);
    let report = dev.run_trace(&respec_core::model::Trace::new(bad)).unwrap();
    let v = vrf.verify_and_decode(&report).unwrap();
    assert!(v.authentic);
    assert_eq!(v.cfg_verdict, Some(PathVerdict::Violation { index: 100 }));
}

#[test]
fn session_over_tcp() {
    let run = Workload::Zipf.generate(9, Some(800));
    let cfg = derive_cfg(std::slice::from_ref(&run)).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let spec = trained(Workload::Zipf);
    let vcfg = cfg.clone();
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut end = Framed::new(stream);
        let mut vrf = VerifierContext::new(key(), pmem(), vcfg);
        end.send(&vrf.issue_request(SpeculationUpdate::replace_all(&spec)).unwrap()).unwrap();
        vrf.verify_and_decode(&end.recv().unwrap()).unwrap()
    });
    let mut end = connect_tcp(addr).unwrap();
    let mut dev = ProverDevice::new(key(), pmem(), cfg);
    dev.handle_request(&end.recv().unwrap()).unwrap();
    end.send(&dev.run_trace(&run).unwrap()).unwrap();
    let v = server.join().unwrap();
    assert!(v.is_benign());
    assert_eq!(v.path, Some(run));
    assert!(matches!(end.recv(), Err(TransportError::ConnectionLost)));
}
