use std::collections::HashMap;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use anyhow::{anyhow, Context, Result};

use respec_core::protocol::StoredSpeculation;
use respec_core::transport::{Endpoint, Framed};
use respec_core::verifier::{VerifierContext, VerifierState};

use crate::{describe, load_verifier, save_verifier, update_for};

struct Device {
    path: PathBuf,
    ctx: VerifierContext,
    state: VerifierState,
}

type Fleet = HashMap<String, Mutex<Device>>;

pub fn serve(listen: &str, devices: &[String], wanted: Option<StoredSpeculation>, sessions: Option<usize>) -> Result<()> {
    let mut fleet = Fleet::new();
    for d in devices {
        let (id, path) = d
            .split_once('=')
            .ok_or_else(|| anyhow!("expected id=path, got `{d}`"))?;
        let path = PathBuf::from(path);
        let (ctx, state) = load_verifier(&path)?;
        fleet.insert(id.to_string(), Mutex::new(Device { path, ctx, state }));
    }
    let fleet = Arc::new(fleet);
    let wanted = Arc::new(wanted);

    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;

    let mut handles = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let fleet = Arc::clone(&fleet);
        let wanted = Arc::clone(&wanted);
        handles.push(thread::spawn(move || {
            if let Err(e) = session(stream, &fleet, wanted.as_ref().as_ref()) {
                eprintln!("session failed: {e:#}");
            }
        }));
        if sessions.is_some_and(|max| n + 1 >= max) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}

/// One attestation round trip with a connected device. The device's entry
/// stays locked for the whole session.
fn session(stream: TcpStream, fleet: &Fleet, wanted: Option<&StoredSpeculation>) -> Result<()> {
    let mut link = Framed::new(stream);
    let id = String::from_utf8(link.recv()?).context("device id is not utf-8")?;
    let Some(slot) = fleet.get(&id) else {
        link.send(format!("error: unknown device `{id}`\n").as_bytes())?;
        return Err(anyhow!("unknown device `{id}`"));
    };
    let mut dev = slot.lock().map_err(|_| anyhow!("device state poisoned"))?;
    let update = update_for(dev.ctx.speculation(), wanted);
    let request = dev.ctx.issue_request(update)?;
    save_verifier(&dev.path, &dev.ctx, &dev.state)?;
    link.send(&request)?;
    let report = link.recv()?;
    let verdict = dev.ctx.verify_and_decode(&report)?;
    save_verifier(&dev.path, &dev.ctx, &dev.state)?;
    let text = describe(&verdict);
    println!("device {id}: {}", text.lines().collect::<Vec<_>>().join(", "));
    link.send(text.as_bytes())?;
    Ok(())
}
