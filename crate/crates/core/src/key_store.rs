//! Per-user key hierarchy: identity key, signed prekey (plus one grace key
//! after rotation) and the pool of one-time prekeys.
//!
//! The on-disk form is JSON lines with hex-encoded key material. The first
//! line is a header `{"version":1,"user_id":...,"next_one_time_id":...,"entries":...}`
//! and `entries` counts the lines that follow, so a truncated file is
//! detected instead of loading as a partial store.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::crypto::{CryptoError, Entropy, Point32, Scalar32};

pub const STORE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_ONE_TIME_PREKEYS: usize = 100;

const SPK_SIGNATURE_DOMAIN: &[u8] = b"ratchetlab-spk-v1";

#[derive(Debug, Error)]
pub enum KeyStoreError {
    #[error("malformed user id {0:?}: expected +[1-9][0-9]{{4,14}}")]
    InvalidUserId(String),
    #[error("signed prekey signature does not verify")]
    BadSignature,
    #[error("one-time prekey id space exhausted")]
    IdsExhausted,
    #[error("key store line {line}: {reason}")]
    Load { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

/// Checks the E.164-like shape `+[1-9][0-9]{4,14}`.
pub fn validate_user_id(user_id: &str) -> Result<(), KeyStoreError> {
    let bad = || KeyStoreError::InvalidUserId(user_id.to_string());
    let digits = user_id.strip_prefix('+').ok_or_else(bad)?;
    let ok = (5..=15).contains(&digits.len()) && digits.bytes().all(|b| b.is_ascii_digit()) && !digits.starts_with('0');
    if ok {
        Ok(())
    } else {
        Err(bad())
    }
}

/// Long-term identity: an X25519 key pair and its companion Ed25519 signing key.
#[derive(Clone)]
pub struct IdentityKeyPair {
    dh_secret: Scalar32,
    dh_public: Point32,
    signing: SigningKey,
}

impl IdentityKeyPair {
    pub fn generate(rng: &mut Entropy) -> Result<Self, CryptoError> {
        let dh_secret = Scalar32::random(rng)?;
        let seed = Zeroizing::new(rng.array::<32>()?);
        Ok(Self { dh_public: dh_secret.public(), dh_secret, signing: SigningKey::from_bytes(&seed) })
    }

    pub fn dh_public(&self) -> Point32 {
        self.dh_public
    }

    pub fn signing_public(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub(crate) fn dh_secret(&self) -> &Scalar32 {
        &self.dh_secret
    }

    fn sign_prekey(&self, id: u32, public: &Point32) -> [u8; 64] {
        let msg = spk_signature_message(&self.dh_public, &self.signing_public(), id, public);
        self.signing.sign(&msg).to_bytes()
    }
}

impl std::fmt::Debug for IdentityKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdentityKeyPair").field("dh_public", &self.dh_public).finish_non_exhaustive()
    }
}

/// Binds the identity DH key, identity signing key, prekey id and prekey point.
fn spk_signature_message(identity_dh: &Point32, identity_signing: &[u8; 32], id: u32, public: &Point32) -> Vec<u8> {
    let mut msg = Vec::with_capacity(SPK_SIGNATURE_DOMAIN.len() + 100);
    msg.extend_from_slice(SPK_SIGNATURE_DOMAIN);
    msg.extend_from_slice(identity_dh.as_bytes());
    msg.extend_from_slice(identity_signing);
    msg.extend_from_slice(&id.to_be_bytes());
    msg.extend_from_slice(public.as_bytes());
    msg
}

#[derive(Clone, Debug)]
pub struct SignedPreKey {
    pub id: u32,
    secret: Scalar32,
    pub public: Point32,
    pub signature: [u8; 64],
    pub created_at_ms: u64,
}

impl SignedPreKey {
    pub fn public_record(&self) -> SignedPreKeyPublic {
        SignedPreKeyPublic { id: self.id, public: self.public, signature: self.signature }
    }
}

#[derive(Clone, Debug)]
pub struct OneTimePreKey {
    pub id: u32,
    secret: Scalar32,
    pub public: Point32,
    /// Published (uploaded to a server or returned in a bundle). The private
    /// half stays until a handshake consumes it.
    pub handed_out: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedPreKeyPublic {
    pub id: u32,
    pub public: Point32,
    #[serde(with = "crate::hexser")]
    pub signature: [u8; 64],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneTimePreKeyPublic {
    pub id: u32,
    pub public: Point32,
}

/// Public material an initiator needs to start an asynchronous session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreKeyBundle {
    pub user_id: String,
    pub identity_public: Point32,
    #[serde(with = "crate::hexser")]
    pub identity_signing_public: [u8; 32],
    pub signed_prekey: SignedPreKeyPublic,
    pub one_time_prekey: Option<OneTimePreKeyPublic>,
}

impl PreKeyBundle {
    pub fn verify(&self) -> Result<(), KeyStoreError> {
        verify_signed_prekey(&self.identity_public, &self.identity_signing_public, &self.signed_prekey)
    }

    /// Nominal wire size, used for metadata accounting.
    pub fn wire_len(&self) -> usize {
        1 + self.user_id.len() + 32 + 32 + 4 + 32 + 64 + 1 + self.one_time_prekey.map_or(0, |_| 36)
    }
}

pub fn verify_signed_prekey(
    identity_dh: &Point32,
    identity_signing: &[u8; 32],
    spk: &SignedPreKeyPublic,
) -> Result<(), KeyStoreError> {
    let key = VerifyingKey::from_bytes(identity_signing).map_err(|_| KeyStoreError::BadSignature)?;
    let msg = spk_signature_message(identity_dh, identity_signing, spk.id, &spk.public);
    key.verify(&msg, &Signature::from_bytes(&spk.signature)).map_err(|_| KeyStoreError::BadSignature)
}

/// A user's local key material. Single owner; mutate from one place at a time.
#[derive(Clone, Debug)]
pub struct KeyStore {
    user_id: String,
    identity: IdentityKeyPair,
    signed_prekey: SignedPreKey,
    previous_signed_prekey: Option<SignedPreKey>,
    one_time: BTreeMap<u32, OneTimePreKey>,
    next_one_time_id: u32,
}

impl KeyStore {
    /// Fresh install: identity, signed prekey id 1, one-time prekeys `1..=n_one_time`.
    pub fn generate(user_id: &str, n_one_time: usize, rng: &mut Entropy, now_ms: u64) -> Result<Self, KeyStoreError> {
        validate_user_id(user_id)?;
        let identity = IdentityKeyPair::generate(rng)?;
        let signed_prekey = new_signed_prekey(&identity, 1, rng, now_ms)?;
        let mut store = Self {
            user_id: user_id.to_string(),
            identity,
            signed_prekey,
            previous_signed_prekey: None,
            one_time: BTreeMap::new(),
            next_one_time_id: 1,
        };
        store.replenish(n_one_time, rng)?;
        Ok(store)
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn identity(&self) -> &IdentityKeyPair {
        &self.identity
    }

    pub fn signed_prekey(&self) -> &SignedPreKey {
        &self.signed_prekey
    }

    pub fn previous_signed_prekey(&self) -> Option<&SignedPreKey> {
        self.previous_signed_prekey.as_ref()
    }

    /// Active or grace-window signed prekey secret.
    pub(crate) fn signed_prekey_secret(&self, id: u32) -> Option<&Scalar32> {
        std::iter::once(&self.signed_prekey).chain(self.previous_signed_prekey.as_ref()).find(|k| k.id == id).map(|k| &k.secret)
    }

    pub(crate) fn one_time_secret(&self, id: u32) -> Option<&Scalar32> {
        self.one_time.get(&id).map(|k| &k.secret)
    }

    /// Deletes a one-time private key. Returns false when it was already gone.
    pub fn consume_one_time(&mut self, id: u32) -> bool {
        self.one_time.remove(&id).is_some()
    }

    /// One-time prekeys not yet handed out.
    pub fn pool_size(&self) -> usize {
        self.one_time.values().filter(|k| !k.handed_out).count()
    }

    /// One-time private keys still held, handed out or not.
    pub fn held_one_time(&self) -> usize {
        self.one_time.len()
    }

    pub fn one_time_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.one_time.keys().copied()
    }

    pub fn replenish(&mut self, n: usize, rng: &mut Entropy) -> Result<(), KeyStoreError> {
        for _ in 0..n {
            let id = self.next_one_time_id;
            self.next_one_time_id = id.checked_add(1).ok_or(KeyStoreError::IdsExhausted)?;
            let secret = Scalar32::random(rng)?;
            let public = secret.public();
            self.one_time.insert(id, OneTimePreKey { id, secret, public, handed_out: false });
        }
        Ok(())
    }

    /// Marks every unpublished one-time prekey as handed out and returns the public halves.
    pub fn take_upload_batch(&mut self) -> Vec<OneTimePreKeyPublic> {
        self.one_time
            .values_mut()
            .filter(|k| !k.handed_out)
            .map(|k| {
                k.handed_out = true;
                OneTimePreKeyPublic { id: k.id, public: k.public }
            })
            .collect()
    }

    /// Bundle for direct exchange. With `consume_one_time` the lowest unpublished
    /// one-time prekey leaves the pool and rides along; otherwise none is included.
    pub fn public_bundle(&mut self, consume_one_time: bool) -> PreKeyBundle {
        let one_time_prekey = if consume_one_time {
            self.one_time.values_mut().find(|k| !k.handed_out).map(|k| {
                k.handed_out = true;
                OneTimePreKeyPublic { id: k.id, public: k.public }
            })
        } else {
            None
        };
        PreKeyBundle {
            user_id: self.user_id.clone(),
            identity_public: self.identity.dh_public(),
            identity_signing_public: self.identity.signing_public(),
            signed_prekey: self.signed_prekey.public_record(),
            one_time_prekey,
        }
    }

    /// New active signed prekey with id + 1; the old one stays for one grace window.
    pub fn rotate_signed_prekey(&mut self, rng: &mut Entropy, now_ms: u64) -> Result<&SignedPreKey, KeyStoreError> {
        let id = self.signed_prekey.id.checked_add(1).ok_or(KeyStoreError::IdsExhausted)?;
        let fresh = new_signed_prekey(&self.identity, id, rng, now_ms)?;
        self.previous_signed_prekey = Some(std::mem::replace(&mut self.signed_prekey, fresh));
        Ok(&self.signed_prekey)
    }

    pub fn save(&self, path: &Path) -> Result<(), KeyStoreError> {
        let text = self.to_jsonl();
        let tmp = path.with_extension("tmp");
        {
            let mut file = open_private(&tmp)?;
            file.write_all(text.as_bytes())?;
            file.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KeyStoreError> {
        let text = fs::read_to_string(path)?;
        Self::from_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut entries = vec![Entry::Identity {
            dh_secret: self.identity.dh_secret.as_bytes().to_vec(),
            dh_public: self.identity.dh_public,
            signing_secret: self.identity.signing.to_bytes().to_vec(),
            signing_public: self.identity.signing_public().to_vec(),
        }];
        entries.push(spk_entry(&self.signed_prekey, Slot::Active));
        if let Some(prev) = &self.previous_signed_prekey {
            entries.push(spk_entry(prev, Slot::Previous));
        }
        entries.extend(self.one_time.values().map(|k| Entry::OneTimePrekey {
            id: k.id,
            secret: k.secret.as_bytes().to_vec(),
            public: k.public,
            handed_out: k.handed_out,
        }));
        let header = Header {
            version: STORE_FORMAT_VERSION,
            user_id: self.user_id.clone(),
            next_one_time_id: self.next_one_time_id,
            entries: entries.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, KeyStoreError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines.next().ok_or(KeyStoreError::Load { line: 1, reason: "empty file".into() })?;
        let header: Header = parse_line(1, first, HEADER_FIELDS)?;
        if header.version != STORE_FORMAT_VERSION {
            return Err(load_err(1, format!("unsupported version {}", header.version)));
        }
        validate_user_id(&header.user_id).map_err(|e| load_err(1, e.to_string()))?;

        let mut identity = None;
        let mut active = None;
        let mut previous = None;
        let mut one_time = BTreeMap::new();
        let mut seen = 0usize;
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            seen += 1;
            match parse_entry(n, line)? {
                Entry::Identity { dh_secret, dh_public, signing_secret, signing_public } => {
                    let dh_secret = Scalar32::from_bytes(fixed(n, &dh_secret)?);
                    if dh_secret.public() != dh_public {
                        return Err(load_err(n, "identity public does not match secret"));
                    }
                    let signing = SigningKey::from_bytes(&fixed(n, &signing_secret)?);
                    if signing.verifying_key().to_bytes().as_slice() != signing_public.as_slice() {
                        return Err(load_err(n, "signing public does not match secret"));
                    }
                    identity = Some(IdentityKeyPair { dh_secret, dh_public, signing });
                }
                Entry::SignedPrekey { slot, id, secret, public, signature, created_at_ms } => {
                    let secret = Scalar32::from_bytes(fixed(n, &secret)?);
                    if secret.public() != public {
                        return Err(load_err(n, "signed prekey public does not match secret"));
                    }
                    let key = SignedPreKey { id, secret, public, signature: fixed(n, &signature)?, created_at_ms };
                    let target = match slot {
                        Slot::Active => &mut active,
                        Slot::Previous => &mut previous,
                    };
                    if target.replace(key).is_some() {
                        return Err(load_err(n, "duplicate signed prekey slot"));
                    }
                }
                Entry::OneTimePrekey { id, secret, public, handed_out } => {
                    let secret = Scalar32::from_bytes(fixed(n, &secret)?);
                    if secret.public() != public {
                        return Err(load_err(n, "one-time prekey public does not match secret"));
                    }
                    if id >= header.next_one_time_id {
                        return Err(load_err(n, format!("one-time id {id} not below next_one_time_id")));
                    }
                    if one_time.insert(id, OneTimePreKey { id, secret, public, handed_out }).is_some() {
                        return Err(load_err(n, format!("duplicate one-time id {id}")));
                    }
                }
            }
        }
        let end = text.lines().count() + 1;
        if seen != header.entries {
            return Err(load_err(end, format!("expected {} entries, found {seen} (truncated?)", header.entries)));
        }
        let identity = identity.ok_or_else(|| load_err(end, "missing identity entry"))?;
        let signed_prekey = active.ok_or_else(|| load_err(end, "missing active signed prekey"))?;
        for spk in std::iter::once(&signed_prekey).chain(previous.as_ref()) {
            verify_signed_prekey(&identity.dh_public, &identity.signing_public(), &spk.public_record())
                .map_err(|_| load_err(end, format!("signed prekey {} signature does not verify", spk.id)))?;
        }
        Ok(Self {
            user_id: header.user_id,
            identity,
            signed_prekey,
            previous_signed_prekey: previous,
            one_time,
            next_one_time_id: header.next_one_time_id,
        })
    }
}

fn new_signed_prekey(identity: &IdentityKeyPair, id: u32, rng: &mut Entropy, now_ms: u64) -> Result<SignedPreKey, CryptoError> {
    let secret = Scalar32::random(rng)?;
    let public = secret.public();
    let signature = identity.sign_prekey(id, &public);
    Ok(SignedPreKey { id, secret, public, signature, created_at_ms: now_ms })
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    user_id: String,
    next_one_time_id: u32,
    entries: usize,
}

const HEADER_FIELDS: &[&str] = &["version", "user_id", "next_one_time_id", "entries"];

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Active,
    Previous,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entry {
    Identity {
        #[serde(with = "crate::hexser")]
        dh_secret: Vec<u8>,
        dh_public: Point32,
        #[serde(with = "crate::hexser")]
        signing_secret: Vec<u8>,
        #[serde(with = "crate::hexser")]
        signing_public: Vec<u8>,
    },
    SignedPrekey {
        slot: Slot,
        id: u32,
        #[serde(with = "crate::hexser")]
        secret: Vec<u8>,
        public: Point32,
        #[serde(with = "crate::hexser")]
        signature: Vec<u8>,
        created_at_ms: u64,
    },
    OneTimePrekey {
        id: u32,
        #[serde(with = "crate::hexser")]
        secret: Vec<u8>,
        public: Point32,
        handed_out: bool,
    },
}

fn spk_entry(k: &SignedPreKey, slot: Slot) -> Entry {
    Entry::SignedPrekey {
        slot,
        id: k.id,
        secret: k.secret.as_bytes().to_vec(),
        public: k.public,
        signature: k.signature.to_vec(),
        created_at_ms: k.created_at_ms,
    }
}

fn load_err(line: usize, reason: impl Into<String>) -> KeyStoreError {
    KeyStoreError::Load { line, reason: reason.into() }
}

fn fixed<const N: usize>(line: usize, bytes: &[u8]) -> Result<[u8; N], KeyStoreError> {
    bytes.try_into().map_err(|_| load_err(line, format!("expected {N} bytes, got {}", bytes.len())))
}

fn parse_line<T: serde::de::DeserializeOwned>(line: usize, text: &str, known: &[&str]) -> Result<T, KeyStoreError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| load_err(line, e.to_string()))?;
    warn_unknown(line, &value, known);
    serde_json::from_value(value).map_err(|e| load_err(line, e.to_string()))
}

fn parse_entry(line: usize, text: &str) -> Result<Entry, KeyStoreError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| load_err(line, e.to_string()))?;
    let known: &[&str] = match value.get("kind").and_then(|k| k.as_str()) {
        Some("identity") => &["kind", "dh_secret", "dh_public", "signing_secret", "signing_public"],
        Some("signed_prekey") => &["kind", "slot", "id", "secret", "public", "signature", "created_at_ms"],
        Some("one_time_prekey") => &["kind", "id", "secret", "public", "handed_out"],
        _ => &[],
    };
    warn_unknown(line, &value, known);
    serde_json::from_value(value).map_err(|e| load_err(line, e.to_string()))
}

fn warn_unknown(line: usize, value: &serde_json::Value, known: &[&str]) {
    if let Some(map) = value.as_object() {
        for key in map.keys().filter(|k| !known.is_empty() && !known.contains(&k.as_str())) {
            log::warn!("key store line {line}: ignoring unknown field {key:?}");
        }
    }
}

#[cfg(unix)]
fn open_private(path: &Path) -> std::io::Result<fs::File> {
    use std::os::unix::fs::OpenOptionsExt;
    fs::OpenOptions::new().write(true).create(true).truncate(true).mode(0o600).open(path)
}

#[cfg(not(unix))]
fn open_private(path: &Path) -> std::io::Result<fs::File> {
    fs::File::create(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(n: usize) -> KeyStore {
        KeyStore::generate("+15551234567", n, &mut Entropy::insecure_seeded(5), 1_000).unwrap()
    }

    #[test]
    fn user_id_validation() {
        for ok in ["+15551234567", "+44123", "+123456789012345"] {
            validate_user_id(ok).unwrap();
        }
        for bad in ["12345", "+0123456", "+1234", "+1234567890123456", "+1555abc4567", ""] {
            assert!(matches!(validate_user_id(bad), Err(KeyStoreError::InvalidUserId(_))), "{bad}");
        }
        let err = KeyStore::generate("12345", 10, &mut Entropy::insecure_seeded(1), 0).unwrap_err();
        assert!(matches!(err, KeyStoreError::InvalidUserId(_)));
    }

    #[test]
    fn generate_creates_requested_pool() {
        let s = store(100);
        assert_eq!(s.pool_size(), 100);
        assert_eq!(s.one_time_ids().collect::<Vec<_>>(), (1..=100).collect::<Vec<_>>());
        assert_eq!(s.signed_prekey().id, 1);
        let empty = store(0);
        assert_eq!(empty.pool_size(), 0);
        assert!(empty.clone().public_bundle(true).one_time_prekey.is_none());
    }

    #[test]
    fn bundle_consumes_pool() {
        let mut s = store(1);
        let b = s.public_bundle(true);
        b.verify().unwrap();
        assert_eq!(b.one_time_prekey.unwrap().id, 1);
        assert_eq!(s.pool_size(), 0);
        assert!(s.public_bundle(true).one_time_prekey.is_none());

        let mut two = store(2);
        let a = two.public_bundle(true).one_time_prekey.unwrap();
        let b = two.public_bundle(true).one_time_prekey.unwrap();
        assert_ne!(a.id, b.id);
    }

    #[test]
    fn tampered_signed_prekey_fails_verification() {
        let mut b = store(1).public_bundle(false);
        b.signed_prekey.public.0[3] ^= 1;
        assert!(matches!(b.verify(), Err(KeyStoreError::BadSignature)));
        let mut b = store(1).public_bundle(false);
        b.signed_prekey.id += 1;
        assert!(b.verify().is_err());
        let mut b = store(1).public_bundle(false);
        b.identity_public.0[0] ^= 0x80;
        assert!(b.verify().is_err());
    }

    #[test]
    fn rotation_keeps_one_grace_key() {
        let mut rng = Entropy::insecure_seeded(2);
        let mut s = store(0);
        let first = s.signed_prekey().id;
        let rotated = s.rotate_signed_prekey(&mut rng, 2_000).unwrap().clone();
        assert_eq!(rotated.id, first + 1);
        s.public_bundle(false).verify().unwrap();
        assert!(s.signed_prekey_secret(first).is_some());
        s.rotate_signed_prekey(&mut rng, 3_000).unwrap();
        assert_eq!(s.signed_prekey().id, first + 2);
        assert_eq!(s.previous_signed_prekey().unwrap().id, first + 1);
        assert!(s.signed_prekey_secret(first).is_none());
    }

    #[test]
    fn one_time_ids_never_repeat() {
        let mut rng = Entropy::insecure_seeded(3);
        let mut s = store(3);
        s.consume_one_time(1);
        s.consume_one_time(3);
        s.replenish(3, &mut rng).unwrap();
        assert_eq!(s.one_time_ids().collect::<Vec<_>>(), vec![2, 4, 5, 6]);
        assert!(!s.consume_one_time(1));
    }

    #[test]
    fn save_load_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let mut s = store(5);
        s.public_bundle(true);
        s.rotate_signed_prekey(&mut Entropy::insecure_seeded(4), 5).unwrap();
        s.save(&path).unwrap();
        let first = fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("{\"version\":1,\"user_id\":\"+15551234567\""));
        let loaded = KeyStore::load(&path).unwrap();
        assert_eq!(loaded.identity.dh_secret, s.identity.dh_secret);
        assert_eq!(loaded.one_time_secret(2), s.one_time_secret(2));
        loaded.save(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), first);
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(fs::metadata(&path).unwrap().permissions().mode() & 0o777, 0o600);
        }
    }

    #[test]
    fn truncated_or_corrupt_file_is_rejected() {
        let text = store(3).to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        let truncated = lines[..lines.len() - 1].join("\n");
        assert!(matches!(KeyStore::from_jsonl(&truncated), Err(KeyStoreError::Load { .. })));

        let cut = &text[..text.len() - 20];
        match KeyStore::from_jsonl(cut) {
            Err(KeyStoreError::Load { line, .. }) => assert_eq!(line, lines.len()),
            other => panic!("expected load error, got {other:?}"),
        }

        let bad_hex = text.replacen("\"dh_secret\":\"", "\"dh_secret\":\"zz", 1);
        match KeyStore::from_jsonl(&bad_hex) {
            Err(KeyStoreError::Load { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected load error, got {other:?}"),
        }

        let missing = text.replacen(",\"handed_out\":false", "", 1);
        assert!(matches!(KeyStore::from_jsonl(&missing), Err(KeyStoreError::Load { .. })));
        assert!(KeyStore::from_jsonl("").is_err());
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let text = store(2).to_jsonl();
        let extended = text.replacen("\"entries\":", "\"color\":\"blue\",\"entries\":", 1).replacen(
            "\"handed_out\":false",
            "\"handed_out\":false,\"future\":7",
            1,
        );
        let loaded = KeyStore::from_jsonl(&extended).unwrap();
        assert_eq!(loaded.to_jsonl(), text);
    }
}
