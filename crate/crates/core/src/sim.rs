//! Seeded conversation workload over real sessions and a simulated server.
//!
//! Every message is end-to-end encrypted and decrypted by the recipient; the
//! output ledger is what the server saw. The ground truth (groups and
//! per-pair message counts) is kept alongside so inference can be scored.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::client::{ClientError, Device};
use crate::crypto::{CryptoError, Entropy};
use crate::key_store::{KeyStore, KeyStoreError};
use crate::metadata::InferredGroup;
use crate::server::{Clock, ManualClock, MetadataRecord, Registration, Server, ServerError};

/// 2023-11-14T22:13:20Z; fixed so seeded runs are reproducible.
pub const SIM_START_MS: u64 = 1_700_000_000_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Key(#[from] KeyStoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub users: usize,
    /// Total messages, group warm-up exchanges included.
    pub messages: usize,
    pub groups: usize,
    pub seed: u64,
    pub min_group_size: usize,
    pub max_group_size: usize,
    /// Share of logical messages that go to a group, in percent.
    pub group_percent: u64,
    /// Gap between consecutive sends; the minimum must exceed the blind-mode window.
    pub min_gap_ms: u64,
    pub max_gap_ms: u64,
    pub one_time_prekeys: usize,
}

impl SimConfig {
    pub fn new(users: usize, messages: usize, groups: usize, seed: u64) -> Self {
        Self {
            users,
            messages,
            groups,
            seed,
            min_group_size: 3,
            max_group_size: 8,
            group_percent: 15,
            min_gap_ms: 3_000,
            max_gap_ms: 180_000,
            one_time_prekeys: 100,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let err = |m: &str| Err(SimError::Config(m.to_string()));
        if self.users < 2 {
            return err("need at least two users");
        }
        if self.users > 9_999_999 {
            return err("too many users");
        }
        if self.min_group_size < 3 || self.min_group_size > self.max_group_size {
            return err("group sizes must satisfy 3 <= min <= max");
        }
        if self.groups > 0 && self.max_group_size > self.users {
            return err("max group size exceeds user count");
        }
        if self.min_gap_ms == 0 || self.min_gap_ms > self.max_gap_ms {
            return err("gaps must satisfy 0 < min <= max");
        }
        if self.group_percent > 100 {
            return err("group_percent must be <= 100");
        }
        Ok(())
    }
}

pub fn user_id(index: usize) -> String {
    format!("+1555{:07}", index + 1)
}

#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub groups: BTreeMap<String, BTreeSet<String>>,
    pub group_messages: BTreeMap<String, usize>,
    /// (sender, recipient) → relayed envelopes, including group fan-out copies.
    pub contacts: BTreeMap<(String, String), u64>,
}

#[derive(Debug)]
pub struct SimOutcome {
    pub ledger: Vec<MetadataRecord>,
    pub truth: GroundTruth,
    /// Every plaintext that was sent.
    pub plaintexts: Vec<Vec<u8>>,
    pub decrypted: usize,
    pub decrypt_failures: usize,
    pub devices: Vec<Device>,
}

impl SimOutcome {
    /// Hex strings of every key (private and public) held by any device at
    /// the end of the run, plus every session key.
    pub fn key_material_hex(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for d in &self.devices {
            for line in d.store.to_jsonl().lines() {
                collect_hex(&serde_json::from_str(line).expect("store line is JSON"), &mut out);
            }
            collect_hex(&serde_json::to_value(&d.book).expect("sessions serialize"), &mut out);
        }
        out
    }
}

/// Precision and recall of inferred member sets against the ground truth.
/// Recall only counts groups that sent at least `min_messages` messages,
/// since a group that never spoke leaves no trace to recover.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupScore {
    pub inferred: usize,
    pub eligible: usize,
    pub true_positives: usize,
    pub found: usize,
    pub precision: f64,
    pub recall: f64,
}

pub fn score_groups(truth: &GroundTruth, inferred: &[InferredGroup], min_messages: usize) -> GroupScore {
    let real: BTreeSet<&BTreeSet<String>> = truth.groups.values().collect();
    let eligible: BTreeSet<&BTreeSet<String>> = truth
        .groups
        .iter()
        .filter(|(g, _)| truth.group_messages.get(*g).copied().unwrap_or(0) >= min_messages)
        .map(|(_, m)| m)
        .collect();
    let guessed: BTreeSet<&BTreeSet<String>> = inferred.iter().map(|g| &g.members).collect();
    let true_positives = guessed.iter().filter(|g| real.contains(*g)).count();
    let found = eligible.iter().filter(|g| guessed.contains(*g)).count();
    let ratio = |n: usize, d: usize| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    GroupScore {
        inferred: guessed.len(),
        eligible: eligible.len(),
        true_positives,
        found,
        precision: ratio(true_positives, guessed.len()),
        recall: ratio(found, eligible.len()),
    }
}

fn collect_hex(v: &serde_json::Value, out: &mut BTreeSet<String>) {
    match v {
        serde_json::Value::String(s) if s.len() >= 64 && s.bytes().all(|b| b.is_ascii_hexdigit()) => {
            out.insert(s.clone());
        }
        serde_json::Value::Array(a) => a.iter().for_each(|x| collect_hex(x, out)),
        serde_json::Value::Object(m) => m.values().for_each(|x| collect_hex(x, out)),
        _ => {}
    }
}

fn between(rng: &mut Entropy, lo: u64, hi: u64) -> Result<u64, CryptoError> {
    Ok(lo + rng.below(hi - lo + 1)?)
}

fn random_text(rng: &mut Entropy, tag: usize) -> Result<Vec<u8>, CryptoError> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    let len = between(rng, 16, 160)? as usize;
    let mut out = format!("m{tag}:").into_bytes();
    for _ in 0..len {
        out.push(ALPHABET[rng.below(ALPHABET.len() as u64)? as usize]);
    }
    Ok(out)
}

/// Runs the workload. Deterministic for a given config: all randomness,
/// including key generation, comes from the insecure seeded stream.
pub fn run(config: &SimConfig) -> Result<SimOutcome, SimError> {
    config.validate()?;
    let mut rng = Entropy::insecure_seeded(config.seed);
    let clock = Arc::new(ManualClock::new(SIM_START_MS));
    let server = Server::new(clock.clone());

    let mut devices = Vec::with_capacity(config.users);
    for i in 0..config.users {
        let mut store = KeyStore::generate(&user_id(i), config.one_time_prekeys, &mut rng, clock.now_ms())?;
        server.register(Registration::from_store(&mut store), false)?;
        devices.push(Device::new(store));
        clock.advance(between(&mut rng, 100, 5_000)?);
    }

    let mut truth = GroundTruth::default();
    let mut group_members: Vec<Vec<usize>> = Vec::new();
    while group_members.len() < config.groups {
        let size = between(&mut rng, config.min_group_size as u64, config.max_group_size as u64)? as usize;
        let mut picked = BTreeSet::new();
        while picked.len() < size {
            picked.insert(rng.below(config.users as u64)? as usize);
        }
        let members: BTreeSet<String> = picked.iter().map(|&i| user_id(i)).collect();
        if truth.groups.values().any(|g| *g == members) {
            continue;
        }
        let gid = format!("g{}", group_members.len() + 1);
        server.create_group(&gid, members.iter().cloned())?;
        truth.groups.insert(gid.clone(), members);
        truth.group_messages.insert(gid, 0);
        group_members.push(picked.into_iter().collect());
    }

    // Members of a group complete a pairwise handshake first. Otherwise the
    // first fan-out copy to each member carries a handshake header and is
    // ~100 bytes larger than the rest, which is noise, not group structure.
    let mut plaintexts = Vec::with_capacity(config.messages);
    let mut decrypted = 0;
    let mut decrypt_failures = 0;
    let mut warmed = BTreeSet::new();
    'warm: for members in &group_members {
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                if !warmed.insert((a, b)) {
                    continue;
                }
                for (from, to) in [(a, b), (b, a)] {
                    if plaintexts.len() == config.messages {
                        break 'warm;
                    }
                    clock.advance(between(&mut rng, config.min_gap_ms, config.max_gap_ms)?);
                    let text = format!("hello {} from {}", user_id(to), user_id(from)).into_bytes();
                    devices[from].send(&server, &user_id(to), &text, &mut rng)?;
                    *truth.contacts.entry((user_id(from), user_id(to))).or_default() += 1;
                    clock.advance(between(&mut rng, 20, 1_500)?);
                    for (_, result) in devices[to].receive_all(&server)? {
                        match result {
                            Ok(pt) if pt == text => decrypted += 1,
                            Ok(_) | Err(_) => decrypt_failures += 1,
                        }
                    }
                    plaintexts.push(text);
                }
            }
        }
    }

    // A few favourite contacts per user make the frequency ranking non-trivial.
    let mut favourites = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let mut favs = Vec::new();
        while favs.len() < 3.min(config.users - 1) {
            let v = rng.below(config.users as u64)? as usize;
            if v != u && !favs.contains(&v) {
                favs.push(v);
            }
        }
        favourites.push(favs);
    }

    for m in plaintexts.len()..config.messages {
        clock.advance(between(&mut rng, config.min_gap_ms, config.max_gap_ms)?);
        let text = random_text(&mut rng, m)?;
        let group_turn = !group_members.is_empty() && rng.below(100)? < config.group_percent;
        let (sender, recipients): (usize, Vec<usize>) = if group_turn {
            let g = rng.below(group_members.len() as u64)? as usize;
            let members = &group_members[g];
            let sender = members[rng.below(members.len() as u64)? as usize];
            let gid = format!("g{}", g + 1);
            devices[sender].send_group(&server, &gid, &text, &mut rng)?;
            *truth.group_messages.get_mut(&gid).expect("group exists") += 1;
            (sender, members.iter().copied().filter(|&x| x != sender).collect())
        } else {
            let sender = rng.below(config.users as u64)? as usize;
            let recipient = if rng.below(100)? < 70 {
                let favs = &favourites[sender];
                // Weighted 3:2:1 across the favourites.
                let slot = match rng.below(6)? {
                    0..=2 => 0,
                    3..=4 => 1,
                    _ => 2,
                };
                favs[slot.min(favs.len() - 1)]
            } else {
                loop {
                    let v = rng.below(config.users as u64)? as usize;
                    if v != sender {
                        break v;
                    }
                }
            };
            let peer = user_id(recipient);
            devices[sender].send(&server, &peer, &text, &mut rng)?;
            (sender, vec![recipient])
        };
        for &r in &recipients {
            *truth.contacts.entry((user_id(sender), user_id(r))).or_default() += 1;
        }
        plaintexts.push(text.clone());

        clock.advance(between(&mut rng, 20, 1_500)?);
        for r in recipients {
            for (_, result) in devices[r].receive_all(&server)? {
                match result {
                    Ok(pt) if pt == text => decrypted += 1,
                    Ok(_) | Err(_) => decrypt_failures += 1,
                }
            }
        }
    }

    Ok(SimOutcome { ledger: server.ledger(), truth, plaintexts, decrypted, decrypt_failures, devices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::{build_graph, infer_groups, InferenceParams};

    #[test]
    fn small_run_is_deterministic_and_lossless() {
        let cfg = SimConfig::new(8, 120, 2, 3);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.decrypt_failures, 0);
        assert_eq!(a.decrypted as u64, a.truth.contacts.values().sum::<u64>());
        let c = run(&SimConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.ledger, c.ledger);
    }

    #[test]
    fn graph_matches_truth() {
        let out = run(&SimConfig::new(10, 200, 2, 11)).unwrap();
        let g = build_graph(&out.ledger);
        let counts: BTreeMap<_, _> = g.edges.iter().map(|(k, e)| (k.clone(), e.count)).collect();
        assert_eq!(counts, out.truth.contacts);
        let inferred = infer_groups(&out.ledger, &InferenceParams::blind());
        let members: BTreeSet<_> = inferred.iter().map(|g| g.members.clone()).collect();
        let truth: BTreeSet<_> = out.truth.groups.values().cloned().collect();
        assert_eq!(members, truth);
        let score = score_groups(&out.truth, &inferred, 3);
        assert_eq!((score.precision, score.recall), (1.0, 1.0));
    }

    #[test]
    fn scoring_counts_false_positives_and_misses() {
        let mut truth = GroundTruth::default();
        let set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        truth.groups.insert("g1".into(), set(&["+15550000001", "+15550000002", "+15550000003"]));
        truth.groups.insert("g2".into(), set(&["+15550000004", "+15550000005", "+15550000006"]));
        truth.group_messages.insert("g1".into(), 5);
        truth.group_messages.insert("g2".into(), 1);
        let guess = |m| InferredGroup { members: m, support: 1, confidence: 0.5, label: None };
        let inferred = [
            guess(set(&["+15550000001", "+15550000002", "+15550000003"])),
            guess(set(&["+15550000001", "+15550000004", "+15550000005"])),
        ];
        let s = score_groups(&truth, &inferred, 3);
        assert_eq!((s.precision, s.recall, s.eligible), (0.5, 1.0, 1));
    }

    #[test]
    fn config_validation() {
        assert!(run(&SimConfig::new(1, 1, 0, 0)).is_err());
        assert!(run(&SimConfig::new(5, 1, 1, 0)).is_err());
        assert!(run(&SimConfig { min_gap_ms: 0, ..SimConfig::new(3, 1, 0, 0) }).is_err());
        assert!(run(&SimConfig::new(3, 0, 0, 0)).unwrap().plaintexts.is_empty());
    }
}
