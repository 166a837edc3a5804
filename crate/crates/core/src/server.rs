//! In-process relay server.
//!
//! Holds registrations (public halves only), hands out prekey bundles,
//! queues envelopes per recipient, fans group messages out, and appends a
//! [`MetadataRecord`] for everything it observes. Nothing the server stores
//! can hold a private key or a plaintext.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Point32;
use crate::key_store::{validate_user_id, KeyStore, KeyStoreError, OneTimePreKeyPublic, PreKeyBundle, SignedPreKeyPublic};
use crate::ratchet::MessageEnvelope;

/// The server logs a warning when a user's one-time pool falls below this.
pub const LOW_POOL_WARNING: usize = 10;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("user {0} is already registered")]
    Conflict(String),
    #[error("unknown user {0}")]
    NotFound(String),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("{0} is not a member of group {1}")]
    Forbidden(String, String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error(transparent)]
    Key(#[from] KeyStoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// Clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

impl<C: Clock + ?Sized> Clock for Box<C> {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

/// Upload of a user's public key material.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Registration {
    pub user_id: String,
    pub identity_public: Point32,
    #[serde(with = "crate::hexser")]
    pub identity_signing_public: [u8; 32],
    pub signed_prekey: SignedPreKeyPublic,
    pub one_time_prekeys: Vec<OneTimePreKeyPublic>,
    pub registered_at_ms: u64,
}

impl Registration {
    /// Publishes every not-yet-published one-time prekey of `store`.
    pub fn from_store(store: &mut KeyStore) -> Self {
        Self {
            user_id: store.user_id().to_string(),
            identity_public: store.identity().dh_public(),
            identity_signing_public: store.identity().signing_public(),
            signed_prekey: store.signed_prekey().public_record(),
            one_time_prekeys: store.take_upload_batch(),
            registered_at_ms: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Registered,
    BundleFetched,
    MessageRelayed,
    MessageDelivered,
}

/// One ledger row: ids, a timestamp and a size. Never content.
///
/// For `registered` rows both ids are the registering user; for
/// `bundle_fetched` the sender is the requester and the recipient the target.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub event: EventKind,
    pub sender_id: String,
    pub recipient_id: String,
    pub group_id: Option<String>,
    pub timestamp_ms: u64,
    pub payload_size: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Group {
    pub group_id: String,
    pub members: BTreeSet<String>,
}

/// Everything the server persists; the CLI saves and restores this.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ServerState {
    pub registrations: BTreeMap<String, Registration>,
    pub groups: BTreeMap<String, Group>,
    pub queues: BTreeMap<String, VecDeque<QueuedEnvelope>>,
    pub ledger: Vec<MetadataRecord>,
}

/// Envelope bytes as relayed, plus the group they were fanned out for.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueuedEnvelope {
    #[serde(with = "crate::hexser")]
    pub bytes: Vec<u8>,
    pub sender_id: String,
    pub group_id: Option<String>,
}

pub struct Server {
    state: Mutex<ServerState>,
    clock: Box<dyn Clock>,
}

impl Server {
    pub fn new(clock: impl Clock + 'static) -> Self {
        Self::from_state(ServerState::default(), clock)
    }

    pub fn from_state(state: ServerState, clock: impl Clock + 'static) -> Self {
        Self { state: Mutex::new(state), clock: Box::new(clock) }
    }

    pub fn snapshot(&self) -> ServerState {
        self.lock().clone()
    }

    fn lock(&self) -> MutexGuard<'_, ServerState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Ledger timestamps never go backwards, whatever the clock does.
    fn log(state: &mut ServerState, now: u64, event: EventKind, sender: &str, recipient: &str, group: Option<&str>, size: usize) {
        let timestamp_ms = state.ledger.last().map_or(now, |last| last.timestamp_ms.max(now));
        state.ledger.push(MetadataRecord {
            event,
            sender_id: sender.to_string(),
            recipient_id: recipient.to_string(),
            group_id: group.map(str::to_string),
            timestamp_ms,
            payload_size: size as u64,
        });
    }

    /// `replace` models a reinstall: the old registration and its prekeys are dropped.
    pub fn register(&self, mut reg: Registration, replace: bool) -> Result<(), ServerError> {
        validate_user_id(&reg.user_id)?;
        crate::key_store::verify_signed_prekey(&reg.identity_public, &reg.identity_signing_public, &reg.signed_prekey)?;
        let ids: BTreeSet<u32> = reg.one_time_prekeys.iter().map(|k| k.id).collect();
        if ids.len() != reg.one_time_prekeys.len() {
            return Err(ServerError::Validation("duplicate one-time prekey ids".into()));
        }
        let now = self.clock.now_ms();
        let mut state = self.lock();
        if state.registrations.contains_key(&reg.user_id) && !replace {
            return Err(ServerError::Conflict(reg.user_id));
        }
        reg.registered_at_ms = now;
        let user = reg.user_id.clone();
        let size = 64 + 100 + 36 * reg.one_time_prekeys.len();
        state.registrations.insert(user.clone(), reg);
        Self::log(&mut state, now, EventKind::Registered, &user, &user, None, size);
        Ok(())
    }

    /// Adds more one-time prekeys to an existing registration.
    pub fn upload_one_time_prekeys(&self, user_id: &str, keys: Vec<OneTimePreKeyPublic>) -> Result<usize, ServerError> {
        let mut state = self.lock();
        let reg = state.registrations.get_mut(user_id).ok_or_else(|| ServerError::NotFound(user_id.to_string()))?;
        let known: BTreeSet<u32> = reg.one_time_prekeys.iter().map(|k| k.id).collect();
        if keys.iter().any(|k| known.contains(&k.id)) {
            return Err(ServerError::Validation("one-time prekey id already uploaded".into()));
        }
        reg.one_time_prekeys.extend(keys);
        Ok(reg.one_time_prekeys.len())
    }

    pub fn is_registered(&self, user_id: &str) -> bool {
        self.lock().registrations.contains_key(user_id)
    }

    pub fn identity_of(&self, user_id: &str) -> Option<Point32> {
        self.lock().registrations.get(user_id).map(|r| r.identity_public)
    }

    pub fn pool_size(&self, user_id: &str) -> Option<usize> {
        self.lock().registrations.get(user_id).map(|r| r.one_time_prekeys.len())
    }

    /// Removes one one-time prekey from the target's pool (oldest first).
    pub fn fetch_bundle(&self, requester_id: &str, target_id: &str) -> Result<PreKeyBundle, ServerError> {
        let now = self.clock.now_ms();
        let mut state = self.lock();
        let reg = state.registrations.get_mut(target_id).ok_or_else(|| ServerError::NotFound(target_id.to_string()))?;
        let one_time_prekey = (!reg.one_time_prekeys.is_empty()).then(|| reg.one_time_prekeys.remove(0));
        if reg.one_time_prekeys.len() < LOW_POOL_WARNING {
            log::warn!("one-time prekey pool for {target_id} is low ({} left)", reg.one_time_prekeys.len());
        }
        let bundle = PreKeyBundle {
            user_id: reg.user_id.clone(),
            identity_public: reg.identity_public,
            identity_signing_public: reg.identity_signing_public,
            signed_prekey: reg.signed_prekey,
            one_time_prekey,
        };
        Self::log(&mut state, now, EventKind::BundleFetched, requester_id, target_id, None, bundle.wire_len());
        Ok(bundle)
    }

    pub fn relay(&self, envelope: &MessageEnvelope) -> Result<(), ServerError> {
        let now = self.clock.now_ms();
        let mut state = self.lock();
        Self::enqueue(&mut state, now, envelope, None)
    }

    fn enqueue(state: &mut ServerState, now: u64, envelope: &MessageEnvelope, group: Option<&str>) -> Result<(), ServerError> {
        if !state.registrations.contains_key(&envelope.recipient_id) {
            return Err(ServerError::NotFound(envelope.recipient_id.clone()));
        }
        let bytes = envelope.encode();
        let size = bytes.len();
        state.queues.entry(envelope.recipient_id.clone()).or_default().push_back(QueuedEnvelope {
            bytes,
            sender_id: envelope.sender_id.clone(),
            group_id: group.map(str::to_string),
        });
        Self::log(state, now, EventKind::MessageRelayed, &envelope.sender_id, &envelope.recipient_id, group, size);
        Ok(())
    }

    /// Drains the user's queue in arrival order.
    pub fn deliver_raw(&self, user_id: &str) -> Result<Vec<Vec<u8>>, ServerError> {
        let now = self.clock.now_ms();
        let mut state = self.lock();
        if !state.registrations.contains_key(user_id) {
            return Err(ServerError::NotFound(user_id.to_string()));
        }
        let queued = state.queues.remove(user_id).unwrap_or_default();
        for q in &queued {
            Self::log(&mut state, now, EventKind::MessageDelivered, &q.sender_id, user_id, q.group_id.as_deref(), q.bytes.len());
        }
        Ok(queued.into_iter().map(|q| q.bytes).collect())
    }

    pub fn deliver(&self, user_id: &str) -> Result<Vec<MessageEnvelope>, ServerError> {
        Ok(self
            .deliver_raw(user_id)?
            .iter()
            .map(|b| MessageEnvelope::decode(b).expect("queued bytes were encoded by relay"))
            .collect())
    }

    pub fn create_group(&self, group_id: &str, members: impl IntoIterator<Item = String>) -> Result<(), ServerError> {
        let members: BTreeSet<String> = members.into_iter().collect();
        if members.len() < 2 {
            return Err(ServerError::Validation("a group needs at least two members".into()));
        }
        let mut state = self.lock();
        if state.groups.contains_key(group_id) {
            return Err(ServerError::Conflict(group_id.to_string()));
        }
        if let Some(m) = members.iter().find(|m| !state.registrations.contains_key(*m)) {
            return Err(ServerError::NotFound(m.clone()));
        }
        state.groups.insert(group_id.to_string(), Group { group_id: group_id.to_string(), members });
        Ok(())
    }

    pub fn group(&self, group_id: &str) -> Option<Group> {
        self.lock().groups.get(group_id).cloned()
    }

    /// Client-side fan-out: exactly one pairwise envelope per other member,
    /// all stamped with one clock reading and the group id.
    pub fn group_send(&self, sender_id: &str, group_id: &str, envelopes: &[MessageEnvelope]) -> Result<(), ServerError> {
        let now = self.clock.now_ms();
        let mut state = self.lock();
        let group = state.groups.get(group_id).ok_or_else(|| ServerError::UnknownGroup(group_id.to_string()))?;
        if !group.members.contains(sender_id) {
            return Err(ServerError::Forbidden(sender_id.to_string(), group_id.to_string()));
        }
        let expected: BTreeSet<&str> = group.members.iter().map(String::as_str).filter(|m| *m != sender_id).collect();
        let got: BTreeSet<&str> = envelopes.iter().map(|e| e.recipient_id.as_str()).collect();
        if got != expected || envelopes.len() != expected.len() {
            return Err(ServerError::Validation(format!("group {group_id} needs exactly one envelope per other member")));
        }
        if envelopes.iter().any(|e| e.sender_id != sender_id) {
            return Err(ServerError::Validation("envelope sender does not match".into()));
        }
        for env in envelopes {
            Self::enqueue(&mut state, now, env, Some(group_id))?;
        }
        Ok(())
    }

    pub fn ledger(&self) -> Vec<MetadataRecord> {
        self.lock().ledger.clone()
    }

    pub fn export_ledger(&self, path: &Path) -> Result<usize, ServerError> {
        let rows = self.ledger();
        write_ledger(path, &rows)?;
        Ok(rows.len())
    }
}

pub fn write_ledger(path: &Path, rows: &[MetadataRecord]) -> std::io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(ledger_to_jsonl(rows).as_bytes())?;
    out.flush()
}

pub fn ledger_to_jsonl(rows: &[MetadataRecord]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}
