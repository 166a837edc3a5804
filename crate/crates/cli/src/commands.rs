//! One function per subcommand. Each loads state, calls into the core
//! crate, saves state, and returns both a human and a JSON rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ratchetlab_core::crypto::Point32;
use ratchetlab_core::key_store::KeyStore;
use ratchetlab_core::metadata::{self, InferenceMode, InferenceParams};
use ratchetlab_core::server::{write_ledger, Registration, Server};
use ratchetlab_core::sim::{self, SimConfig};
use ratchetlab_core::verification::{format_safety_number, qr_payload, qr_text, safety_number};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::workspace::{append_capture, read_capture, ClockMode, CompromiseDump, Workspace};
use crate::{CompromiseArgs, ReportArgs};

pub struct Output {
    pub text: String,
    pub json: Value,
    pub exit: u8,
}

impl Output {
    fn ok(text: impl Into<String>, json: Value) -> Self {
        Self { text: text.into(), json, exit: 0 }
    }
}

/// Relative paths live under the workspace; absolute ones must too when written.
fn resolve(ws: &Path, p: &Path, for_write: bool) -> Result<PathBuf, CliError> {
    if p.is_relative() {
        return Ok(ws.join(p));
    }
    if for_write {
        let root = ws.canonicalize()?;
        let parent = p.parent().map(Path::canonicalize).transpose()?.unwrap_or_default();
        if !parent.starts_with(&root) {
            return Err(CliError::Usage(format!("{} is outside the workspace", p.display())));
        }
    }
    Ok(p.to_path_buf())
}

fn save(ws: &Workspace, server: &Server, devices: &[&ratchetlab_core::client::Device]) -> Result<(), CliError> {
    for d in devices {
        ws.save_device(d)?;
    }
    ws.save_server(server)?;
    ws.save_config()
}

pub fn init(root: &Path, clock: ClockMode, seed: Option<u64>) -> Result<Output, CliError> {
    let ws = Workspace::init(root, clock, seed)?;
    let mut text = format!("initialized workspace {}\n", ws.root().display());
    if seed.is_some() {
        text.push_str("warning: seeded entropy is deterministic; keys in this workspace are not secret\n");
    }
    Ok(Output::ok(text, json!({ "workspace": ws.root(), "clock": clock, "seed": seed })))
}

pub fn user_add(root: &Path, user: &str, one_time: usize, reinstall: bool) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    if ws.has_user(user)? && !reinstall {
        return Err(CliError::Usage(format!("user {user} already exists; pass --reinstall to replace its keys")));
    }
    let mut rng = ws.entropy();
    let store = KeyStore::generate(user, one_time, &mut rng, ws.now_ms())?;
    ws.remove_sessions(user)?;
    let device = ratchetlab_core::client::Device::new(store);
    ws.save_device(&device)?;
    ws.save_config()?;
    let identity = device.store.identity().dh_public().to_hex();
    Ok(Output::ok(
        format!("created {user} with {one_time} one-time prekeys\nidentity {identity}\n"),
        json!({ "user": user, "one_time_prekeys": one_time, "identity": identity, "reinstall": reinstall }),
    ))
}

pub fn register(root: &Path, user: &str, replace: bool) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    let server = ws.load_server()?;
    let mut device = ws.load_device(user)?;
    let reg = Registration::from_store(&mut device.store);
    let uploaded = reg.one_time_prekeys.len();
    server.register(reg, replace)?;
    save(&ws, &server, &[&device])?;
    Ok(Output::ok(
        format!("registered {user} ({uploaded} one-time prekeys uploaded)\n"),
        json!({ "user": user, "uploaded": uploaded }),
    ))
}

pub fn send(root: &Path, from: &str, to: &str, msg: &str, capture: Option<&Path>) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    let capture = capture.map(|p| resolve(root, p, true)).transpose()?;
    let server = ws.load_server()?;
    let mut device = ws.load_device(from)?;
    let new_session = !device.has_session(to);
    let mut rng = ws.entropy();
    let env = device.send(&server, to, msg.as_bytes(), &mut rng)?;
    let bytes = env.encode();
    if let Some(path) = &capture {
        append_capture(path, std::slice::from_ref(&bytes))?;
    }
    save(&ws, &server, &[&device])?;
    let note = if new_session { " (new session)" } else { "" };
    Ok(Output::ok(
        format!("sent {} bytes to {to}, counter {}{note}\n", bytes.len(), env.counter),
        json!({ "from": from, "to": to, "counter": env.counter, "bytes": bytes.len(), "new_session": new_session }),
    ))
}

pub fn recv(root: &Path, user: &str) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    let server = ws.load_server()?;
    let mut device = ws.load_device(user)?;
    let results = device.receive_all(&server)?;
    save(&ws, &server, &[&device])?;

    let mut text = String::new();
    let mut rows = Vec::new();
    let mut failures = 0;
    for (sender, r) in &results {
        match r {
            Ok(pt) => {
                let pt = String::from_utf8_lossy(pt);
                let _ = writeln!(text, "{sender}: {pt}");
                rows.push(json!({ "from": sender, "plaintext": pt }));
            }
            Err(e) => {
                failures += 1;
                let _ = writeln!(text, "{sender}: rejected: {e}");
                rows.push(json!({ "from": sender, "error": e.to_string() }));
            }
        }
    }
    if results.is_empty() {
        text.push_str("no messages\n");
    }
    Ok(Output {
        text,
        json: json!({ "user": user, "messages": rows, "rejected": failures }),
        exit: if failures > 0 { 2 } else { 0 },
    })
}

pub fn group_create(root: &Path, group: &str, members: Vec<String>) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    let server = ws.load_server()?;
    server.create_group(group, members.iter().cloned())?;
    save(&ws, &server, &[])?;
    Ok(Output::ok(
        format!("created group {group} with {} members\n", members.len()),
        json!({ "group": group, "members": members }),
    ))
}

pub fn group_send(root: &Path, from: &str, group: &str, msg: &str, capture: Option<&Path>) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    let capture = capture.map(|p| resolve(root, p, true)).transpose()?;
    let server = ws.load_server()?;
    let mut device = ws.load_device(from)?;
    let mut rng = ws.entropy();
    let envs = device.send_group(&server, group, msg.as_bytes(), &mut rng)?;
    if let Some(path) = &capture {
        append_capture(path, &envs.iter().map(|e| e.encode()).collect::<Vec<_>>())?;
    }
    save(&ws, &server, &[&device])?;
    Ok(Output::ok(
        format!("sent to {} members of {group}\n", envs.len()),
        json!({ "from": from, "group": group, "copies": envs.len() }),
    ))
}

/// The peer key as `device` knows it: from the session if there is one, else from the server.
fn peer_key(device: &ratchetlab_core::client::Device, server: &Server, peer: &str) -> Result<Point32, CliError> {
    match device.session(peer) {
        Some(s) => Ok(s.peer_identity),
        None => server.identity_of(peer).ok_or_else(|| CliError::Usage(format!("{peer} is not registered"))),
    }
}

pub fn verify(root: &Path, a: &str, b: &str) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    let server = ws.load_server()?;
    let da = ws.load_device(a)?;
    let db = ws.load_device(b)?;
    let (own_a, own_b) = (da.store.identity().dh_public(), db.store.identity().dh_public());
    let a_view = safety_number(a, &own_a, b, &peer_key(&da, &server, b)?)?;
    let b_view = safety_number(a, &peer_key(&db, &server, a)?, b, &own_b)?;
    let matched = a_view == b_view;
    let qr = qr_text(&qr_payload(a, &own_a, b, &own_b)?);
    let text = format!(
        "{a} sees: {}\n{b} sees: {}\n{}\nqr: {qr}\n",
        format_safety_number(&a_view),
        format_safety_number(&b_view),
        if matched { "match" } else { "MISMATCH: keys differ, possible man-in-the-middle" },
    );
    let json = json!({ "a": a, "b": b, "a_view": a_view, "b_view": b_view, "match": matched, "qr": qr });
    Ok(Output { text, json, exit: if matched { 0 } else { 2 } })
}

pub fn compromise(root: &Path, args: CompromiseArgs) -> Result<Output, CliError> {
    if let (Some(dump), Some(captured)) = (&args.replay, &args.captured) {
        let mut device = CompromiseDump::read(&resolve(root, dump, false)?)?.into_device()?;
        let traffic = read_capture(&resolve(root, captured, false)?)?;
        let decrypted = traffic.iter().filter(|bytes| device.receive_bytes(bytes).is_ok()).count();
        return Ok(Output::ok(
            format!("{decrypted}/{} decrypted\n", traffic.len()),
            json!({ "user": device.user_id(), "decrypted": decrypted, "total": traffic.len() }),
        ));
    }
    let (Some(user), Some(out)) = (&args.user, &args.out) else {
        return Err(CliError::Usage("compromise needs --user and --out, or --replay and --captured".into()));
    };
    let ws = Workspace::open(root)?;
    let out = resolve(root, out, true)?;
    let device = ws.load_device(user)?;
    CompromiseDump::of(&device).write(&out)?;
    Ok(Output::ok(
        format!("wrote full state of {user} ({} sessions) to {}\n", device.book.peers.len(), out.display()),
        json!({ "user": user, "out": out, "sessions": device.book.peers.len() }),
    ))
}

fn params(args: &ReportArgs) -> Result<InferenceParams, CliError> {
    let mode = if args.labeled { InferenceMode::Labeled } else { InferenceMode::Blind };
    Ok(InferenceParams::new(args.window_ms, args.min_size, mode)?)
}

pub fn metadata_report(root: &Path, args: ReportArgs) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    let ledger = match &args.ledger {
        Some(p) => resolve(root, p, false)?,
        None => ws.path("ledger.jsonl"),
    };
    let rows = metadata::load_ledger(&ledger)?;
    let report = metadata::analyze(&rows, &params(&args)?, args.tz_offset);
    metadata::write_report(&report, &ws.path("report.json"))?;
    Ok(Output::ok(report.to_text(), serde_json::to_value(&report).expect("report serializes")))
}

pub fn simulate(root: &Path, users: usize, messages: usize, groups: usize, seed: u64) -> Result<Output, CliError> {
    let ws = Workspace::open(root)?;
    let out = sim::run(&SimConfig::new(users, messages, groups, seed))?;
    write_ledger(&ws.path("sim-ledger.jsonl"), &out.ledger)?;
    let report = metadata::analyze(&out.ledger, &InferenceParams::blind(), 0);
    metadata::write_report(&report, &ws.path("sim-report.json"))?;
    let score = sim::score_groups(&out.truth, &report.groups, 3);
    let text = format!(
        "simulated {users} users, {} messages ({} delivered copies decrypted, {} failures)\n\
         ledger rows: {}\n\
         groups: {} true, {} inferred, precision {:.3}, recall {:.3}\n\
         wrote sim-ledger.jsonl, sim-report.json, sim-report.txt\n",
        out.plaintexts.len(),
        out.decrypted,
        out.decrypt_failures,
        out.ledger.len(),
        out.truth.groups.len(),
        score.inferred,
        score.precision,
        score.recall,
    );
    let json = json!({
        "users": users,
        "messages": out.plaintexts.len(),
        "decrypted": out.decrypted,
        "decrypt_failures": out.decrypt_failures,
        "ledger_rows": out.ledger.len(),
        "score": score,
    });
    Ok(Output { text, json, exit: if out.decrypt_failures > 0 { 2 } else { 0 } })
}
