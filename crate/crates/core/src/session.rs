//! Session establishment.
//!
//! The initiator combines its identity key and a fresh ephemeral key with the
//! recipient's bundle:
//!
//! ```text
//! master = DH(I_init, S_rec) || DH(E_init, I_rec) || DH(E_init, S_rec) [|| DH(E_init, O_rec)]
//! root || chain_a || chain_b = HKDF(master, salt = 0^32, info = "ratchetlab-session-v1", 96)
//! ```
//!
//! The initiator sends on `chain_a`, the recipient on `chain_b`. Without a
//! one-time prekey the master is 96 bytes (three terms).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::crypto::{ecdh, hkdf, CryptoError, Entropy, Key32, Point32, Scalar32};
use crate::key_store::{KeyStore, KeyStoreError, PreKeyBundle};
use crate::ratchet::SkippedKeyCache;

pub const SESSION_INFO: &[u8] = b"ratchetlab-session-v1";
pub const HANDSHAKE_VERSION: u8 = 0x01;
const FLAG_ONE_TIME: u8 = 0x01;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("bundle rejected: {0}")]
    Bundle(#[from] KeyStoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("unknown signed prekey id {0}")]
    UnknownSignedPreKey(u32),
    #[error("one-time prekey {0} already consumed (replayed handshake)")]
    Replay(u32),
    #[error("master key must be 96 or 128 bytes, got {0}")]
    MasterLength(usize),
    #[error("malformed handshake header: {0}")]
    Malformed(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Initiator,
    Recipient,
}

/// What the recipient needs to mirror the initiator's key agreement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeHeader {
    pub identity_dh: Point32,
    #[serde(with = "crate::hexser")]
    pub identity_signing: [u8; 32],
    pub ephemeral: Point32,
    pub signed_prekey_id: u32,
    pub one_time_id: Option<u32>,
}

impl HandshakeHeader {
    pub fn encoded_len(&self) -> usize {
        2 + 96 + 4 + if self.one_time_id.is_some() { 4 } else { 0 }
    }

    /// `0x01 | flags | I_dh(32) | I_sign(32) | E(32) | spk_id(4) | [otk_id(4)]`, big-endian.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(HANDSHAKE_VERSION);
        out.push(if self.one_time_id.is_some() { FLAG_ONE_TIME } else { 0 });
        out.extend_from_slice(self.identity_dh.as_bytes());
        out.extend_from_slice(&self.identity_signing);
        out.extend_from_slice(self.ephemeral.as_bytes());
        out.extend_from_slice(&self.signed_prekey_id.to_be_bytes());
        if let Some(id) = self.one_time_id {
            out.extend_from_slice(&id.to_be_bytes());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    /// Parses a header from the front of `bytes`, returning it and the bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), SessionError> {
        let [version, flags, rest @ ..] = bytes else {
            return Err(SessionError::Malformed("truncated"));
        };
        if *version != HANDSHAKE_VERSION {
            return Err(SessionError::Malformed("unsupported version"));
        }
        if flags & !FLAG_ONE_TIME != 0 {
            return Err(SessionError::Malformed("unknown flag bits"));
        }
        let has_otk = flags & FLAG_ONE_TIME != 0;
        let need = 100 + if has_otk { 4 } else { 0 };
        if rest.len() < need {
            return Err(SessionError::Malformed("truncated"));
        }
        let take32 = |at: usize| -> [u8; 32] { rest[at..at + 32].try_into().expect("length checked") };
        let u32_at = |at: usize| u32::from_be_bytes(rest[at..at + 4].try_into().expect("length checked"));
        let header = Self {
            identity_dh: Point32(take32(0)),
            identity_signing: take32(32),
            ephemeral: Point32(take32(64)),
            signed_prekey_id: u32_at(96),
            one_time_id: has_otk.then(|| u32_at(100)),
        };
        Ok((header, 2 + need))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, SessionError> {
        let (h, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(SessionError::Malformed("trailing bytes"));
        }
        Ok(h)
    }
}

/// Concatenated ECDH outputs. Zeroized on drop and never exposed.
pub struct MasterKey(Zeroizing<Vec<u8>>);

impl MasterKey {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(Zeroizing::new(bytes))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn from_terms(terms: &[[u8; 32]]) -> Self {
        let mut bytes = Zeroizing::new(Vec::with_capacity(terms.len() * 32));
        for t in terms {
            bytes.extend_from_slice(t);
        }
        Self(bytes)
    }
}

impl fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MasterKey({} bytes)", self.0.len())
    }
}

/// Root key and the two directional chain keys.
pub struct DerivedKeys {
    pub root: Key32,
    /// Initiator → recipient.
    pub chain_a: Key32,
    /// Recipient → initiator.
    pub chain_b: Key32,
}

pub fn derive_chains(master: &MasterKey) -> Result<DerivedKeys, SessionError> {
    if master.len() != 96 && master.len() != 128 {
        return Err(SessionError::MasterLength(master.len()));
    }
    let okm = Zeroizing::new(hkdf(&master.0, &[0u8; 32], SESSION_INFO, 96)?);
    let part = |i: usize| Key32::from_slice(&okm[i * 32..(i + 1) * 32]).expect("32-byte slice");
    Ok(DerivedKeys { root: part(0), chain_a: part(1), chain_b: part(2) })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainState {
    pub chain_key: Key32,
    /// Index of the next message key this chain will produce.
    pub counter: u32,
}

impl ChainState {
    pub fn new(chain_key: Key32) -> Self {
        Self { chain_key, counter: 0 }
    }
}

/// Live state of one pairwise session.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionState {
    pub local_id: String,
    pub peer_id: String,
    pub peer_identity: Point32,
    pub role: Role,
    pub(crate) root_key: Key32,
    pub(crate) send: ChainState,
    pub(crate) recv: ChainState,
    /// Ephemeral of the handshake that created this session.
    pub established_by: Point32,
    /// Initiator only: attached to every outgoing message until a reply arrives.
    pub pending_handshake: Option<HandshakeHeader>,
    pub(crate) skipped: SkippedKeyCache,
}

impl SessionState {
    fn new(
        local_id: &str,
        peer_id: &str,
        peer_identity: Point32,
        role: Role,
        keys: DerivedKeys,
        header: &HandshakeHeader,
    ) -> Self {
        let (send, recv) = match role {
            Role::Initiator => (keys.chain_a, keys.chain_b),
            Role::Recipient => (keys.chain_b, keys.chain_a),
        };
        Self {
            local_id: local_id.to_string(),
            peer_id: peer_id.to_string(),
            peer_identity,
            role,
            root_key: keys.root,
            send: ChainState::new(send),
            recv: ChainState::new(recv),
            established_by: header.ephemeral,
            pending_handshake: (role == Role::Initiator).then(|| header.clone()),
            skipped: SkippedKeyCache::default(),
        }
    }

    pub fn root_key(&self) -> &Key32 {
        &self.root_key
    }

    pub fn send_chain(&self) -> &ChainState {
        &self.send
    }

    pub fn recv_chain(&self) -> &ChainState {
        &self.recv
    }

    pub fn skipped_keys(&self) -> usize {
        self.skipped.len()
    }
}

/// Initiator side: verifies the bundle, generates the ephemeral key and derives the session.
pub fn initiate_session(
    store: &KeyStore,
    bundle: &PreKeyBundle,
    rng: &mut Entropy,
) -> Result<(SessionState, HandshakeHeader), SessionError> {
    bundle.verify()?;
    let ephemeral = Scalar32::random(rng)?;
    let spk = &bundle.signed_prekey.public;

    let mut terms =
        vec![ecdh(store.identity().dh_secret(), spk)?, ecdh(&ephemeral, &bundle.identity_public)?, ecdh(&ephemeral, spk)?];
    if let Some(otk) = &bundle.one_time_prekey {
        terms.push(ecdh(&ephemeral, &otk.public)?);
    }
    let master = MasterKey::from_terms(&terms);
    terms.iter_mut().for_each(zeroize::Zeroize::zeroize);
    let keys = derive_chains(&master)?;
    drop(master);

    let header = HandshakeHeader {
        identity_dh: store.identity().dh_public(),
        identity_signing: store.identity().signing_public(),
        ephemeral: ephemeral.public(),
        signed_prekey_id: bundle.signed_prekey.id,
        one_time_id: bundle.one_time_prekey.map(|k| k.id),
    };
    let session = SessionState::new(store.user_id(), &bundle.user_id, bundle.identity_public, Role::Initiator, keys, &header);
    Ok((session, header))
}

/// Recipient-side derivation without touching the store. Callers that want to
/// check the first message before committing use this, then
/// [`KeyStore::consume_one_time`].
pub fn prepare_accept(store: &KeyStore, initiator_id: &str, header: &HandshakeHeader) -> Result<SessionState, SessionError> {
    let spk =
        store.signed_prekey_secret(header.signed_prekey_id).ok_or(SessionError::UnknownSignedPreKey(header.signed_prekey_id))?;

    let mut terms = vec![
        ecdh(spk, &header.identity_dh)?,
        ecdh(store.identity().dh_secret(), &header.ephemeral)?,
        ecdh(spk, &header.ephemeral)?,
    ];
    if let Some(id) = header.one_time_id {
        let otk = store.one_time_secret(id).ok_or(SessionError::Replay(id))?;
        terms.push(ecdh(otk, &header.ephemeral)?);
    }
    let master = MasterKey::from_terms(&terms);
    terms.iter_mut().for_each(zeroize::Zeroize::zeroize);
    let keys = derive_chains(&master)?;
    Ok(SessionState::new(store.user_id(), initiator_id, header.identity_dh, Role::Recipient, keys, header))
}

/// Recipient side: derives the session and deletes the referenced one-time prekey.
pub fn accept_session(store: &mut KeyStore, initiator_id: &str, header: &HandshakeHeader) -> Result<SessionState, SessionError> {
    let session = prepare_accept(store, initiator_id, header)?;
    if let Some(id) = header.one_time_id {
        store.consume_one_time(id);
    }
    Ok(session)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(n_otk: usize, seed: u64) -> (KeyStore, KeyStore, Entropy) {
        let mut rng = Entropy::insecure_seeded(seed);
        let a = KeyStore::generate("+15550000001", 0, &mut rng, 0).unwrap();
        let b = KeyStore::generate("+15550000002", n_otk, &mut rng, 0).unwrap();
        (a, b, rng)
    }

    #[test]
    fn derive_chains_matches_oracle() {
        let k = derive_chains(&MasterKey::from_bytes(vec![0x42; 128])).unwrap();
        let joined = [k.root.as_bytes().as_slice(), k.chain_a.as_bytes(), k.chain_b.as_bytes()].concat();
        assert_eq!(
            hex::encode(joined),
            "ac7146fd64cad8967c9f4dea0b24883781adcae936aa0f57866f05ec5ef81750\
             b9ad50ce595741fe3a3cb8aebe234d3845ce34770088aa26143777e1e34fb449\
             bc51f0e31c20244ddeb592389ad5ae2ffc70010b3182d74653d6087250cf1de3"
        );
        let k96 = derive_chains(&MasterKey::from_bytes(vec![0x42; 96])).unwrap();
        assert_eq!(hex::encode(k96.root.as_bytes()), "2ca5b38c7e5c6a6da217455b94fd3ebfee36d40e01d46d14fae833b3f14faeec");
    }

    #[test]
    fn derive_chains_is_deterministic_and_distinct() {
        let a = derive_chains(&MasterKey::from_bytes(vec![1; 128])).unwrap();
        let a2 = derive_chains(&MasterKey::from_bytes(vec![1; 128])).unwrap();
        let b = derive_chains(&MasterKey::from_bytes(vec![2; 128])).unwrap();
        assert_eq!(a.root, a2.root);
        assert_eq!(a.chain_b, a2.chain_b);
        assert_ne!(a.root, b.root);
        assert_ne!(a.chain_a, b.chain_a);
        assert_ne!(a.chain_b, b.chain_b);
        assert_ne!(a.chain_a, a.chain_b);
    }

    #[test]
    fn derive_chains_rejects_wrong_length() {
        for len in [0, 32, 64, 95, 97, 160] {
            assert!(matches!(
                derive_chains(&MasterKey::from_bytes(vec![0; len])),
                Err(SessionError::MasterLength(l)) if l == len
            ));
        }
    }

    #[test]
    fn four_term_and_three_term_agreement() {
        for n_otk in [1, 0] {
            let (a, mut b, mut rng) = pair(n_otk, 10 + n_otk as u64);
            let bundle = b.public_bundle(true);
            assert_eq!(bundle.one_time_prekey.is_some(), n_otk == 1);
            let (sa, header) = initiate_session(&a, &bundle, &mut rng).unwrap();
            let sb = accept_session(&mut b, a.user_id(), &header).unwrap();
            assert_eq!(sa.root_key, sb.root_key);
            assert_eq!(sa.send.chain_key, sb.recv.chain_key);
            assert_eq!(sa.recv.chain_key, sb.send.chain_key);
            assert_ne!(sa.send.chain_key, sa.recv.chain_key);
            assert_eq!(sb.peer_identity, a.identity().dh_public());
            assert!(sa.pending_handshake.is_some());
            assert!(sb.pending_handshake.is_none());
        }
    }

    #[test]
    fn one_time_key_is_single_use() {
        let (a, mut b, mut rng) = pair(2, 20);
        let bundle = b.public_bundle(true);
        let (_, header) = initiate_session(&a, &bundle, &mut rng).unwrap();
        accept_session(&mut b, a.user_id(), &header).unwrap();
        assert_eq!(b.held_one_time(), 1);
        assert!(matches!(accept_session(&mut b, a.user_id(), &header), Err(SessionError::Replay(1))));
        let fresh = b.public_bundle(true);
        assert_eq!(fresh.one_time_prekey.unwrap().id, 2);
    }

    #[test]
    fn tampered_bundle_creates_no_session() {
        let (a, mut b, mut rng) = pair(1, 30);
        let mut bundle = b.public_bundle(true);
        bundle.signed_prekey.signature[0] ^= 1;
        assert!(matches!(initiate_session(&a, &bundle, &mut rng), Err(SessionError::Bundle(KeyStoreError::BadSignature))));
    }

    #[test]
    fn grace_window_signed_prekey_still_accepts() {
        let (a, mut b, mut rng) = pair(1, 40);
        let old_bundle = b.public_bundle(true);
        b.rotate_signed_prekey(&mut rng, 1).unwrap();
        let (sa, header) = initiate_session(&a, &old_bundle, &mut rng).unwrap();
        let sb = accept_session(&mut b, a.user_id(), &header).unwrap();
        assert_eq!(sa.root_key, sb.root_key);

        b.rotate_signed_prekey(&mut rng, 2).unwrap();
        let (_, header) = initiate_session(&a, &old_bundle, &mut rng).unwrap();
        assert!(matches!(accept_session(&mut b, a.user_id(), &header), Err(SessionError::UnknownSignedPreKey(1))));
    }

    #[test]
    fn header_wire_layout() {
        let (a, mut b, mut rng) = pair(1, 50);
        let (_, header) = initiate_session(&a, &b.public_bundle(true), &mut rng).unwrap();
        let bytes = header.encode();
        assert_eq!(bytes.len(), 106);
        assert_eq!(&bytes[..2], &[0x01, 0x01]);
        assert_eq!(&bytes[2..34], a.identity().dh_public().as_bytes());
        assert_eq!(&bytes[102..106], &1u32.to_be_bytes());
        assert_eq!(HandshakeHeader::decode(&bytes).unwrap(), header);

        let three = HandshakeHeader { one_time_id: None, ..header.clone() };
        let bytes = three.encode();
        assert_eq!(bytes.len(), 102);
        assert_eq!(bytes[1], 0);
        assert_eq!(HandshakeHeader::decode(&bytes).unwrap(), three);

        let mut bad = header.encode();
        bad[1] = 0x03;
        assert!(HandshakeHeader::decode(&bad).is_err());
        bad[1] = 0x01;
        bad[0] = 0x02;
        assert!(HandshakeHeader::decode(&bad).is_err());
        assert!(HandshakeHeader::decode(&header.encode()[..105]).is_err());
    }

    #[test]
    fn debug_dump_never_shows_key_bytes() {
        let (a, mut b, mut rng) = pair(1, 60);
        let (sa, _) = initiate_session(&a, &b.public_bundle(true), &mut rng).unwrap();
        let dump = format!("{sa:?}");
        assert!(!dump.contains(&hex::encode(sa.root_key.as_bytes())));
        assert!(!dump.contains(&hex::encode(sa.send.chain_key.as_bytes())));
        assert_eq!(format!("{:?}", MasterKey::from_bytes(vec![7; 128])), "MasterKey(128 bytes)");
    }
}
