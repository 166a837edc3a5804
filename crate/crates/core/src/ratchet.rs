//! Symmetric hash ratchet and the message envelope.
//!
//! Each step of a chain:
//!
//! ```text
//! seed        = HMAC-SHA256(chain_key, 0x01)
//! message_key = HKDF(seed, salt = 0^32, info = "ratchetlab-msg-v1", 80)
//! chain_key'  = HMAC-SHA256(chain_key, 0x02)
//! ```
//!
//! The 80-byte message key splits into AES-256 key, HMAC key and CBC IV.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::crypto::{aead_decrypt, aead_encrypt, hkdf, hmac_sha256, CryptoError, Key32, MessageKey, MESSAGE_KEY_LEN};
use crate::session::{ChainState, HandshakeHeader, Role, SessionError, SessionState};

pub const MESSAGE_INFO: &[u8] = b"ratchetlab-msg-v1";
pub const ENVELOPE_VERSION: u8 = 0x01;
/// Bound on both the skipped-key cache and a single forward jump.
pub const MAX_SKIP: u32 = 1_000;
const FLAG_HANDSHAKE: u8 = 0x01;

#[derive(Debug, Error)]
pub enum RatchetError {
    #[error("chain exhausted at counter {0}")]
    ChainExhausted(u32),
    #[error("message integrity check failed")]
    Integrity,
    #[error("counter {0} already used or outside the skipped-key window")]
    Replay(u32),
    #[error("counter jump of {0} exceeds the skip limit")]
    FloodGuard(u32),
    #[error("envelope addressed to {got}, session belongs to {expected}")]
    WrongRecipient { expected: String, got: String },
    #[error("envelope from {got}, session peer is {expected}")]
    WrongSender { expected: String, got: String },
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Crypto(CryptoError),
}

impl From<CryptoError> for RatchetError {
    fn from(e: CryptoError) -> Self {
        match e {
            CryptoError::BadMac | CryptoError::BadPadding => RatchetError::Integrity,
            other => RatchetError::Crypto(other),
        }
    }
}

impl From<SessionError> for RatchetError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Malformed(m) => RatchetError::Malformed(m),
            _ => RatchetError::Malformed("handshake header"),
        }
    }
}

/// One ratchet step. Pure: the input chain is left untouched.
pub fn advance_chain(chain: &ChainState) -> Result<(MessageKey, ChainState), RatchetError> {
    if chain.counter == u32::MAX {
        return Err(RatchetError::ChainExhausted(chain.counter));
    }
    let key = chain.chain_key.as_bytes();
    let seed = Zeroizing::new(hmac_sha256(key, &[0x01]));
    let okm = Zeroizing::new(hkdf(seed.as_slice(), &[0u8; 32], MESSAGE_INFO, MESSAGE_KEY_LEN)?);
    let message_key = MessageKey::from_slice(&okm).expect("80-byte expansion");
    let next = ChainState { chain_key: Key32::from_bytes(hmac_sha256(key, &[0x02])), counter: chain.counter + 1 };
    Ok((message_key, next))
}

/// Message keys derived ahead of their messages, keyed by counter. Sessions
/// have a single receiving chain, so the counter alone identifies the key.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SkippedKeyCache {
    keys: BTreeMap<u32, MessageKey>,
}

impl SkippedKeyCache {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, counter: u32) -> bool {
        self.keys.contains_key(&counter)
    }

    /// Evicts the oldest counters beyond capacity.
    fn insert(&mut self, counter: u32, key: MessageKey) {
        self.keys.insert(counter, key);
        while self.keys.len() > MAX_SKIP as usize {
            self.keys.pop_first();
        }
    }
}

/// Wire record.
///
/// ```text
/// 0x01 | flags (bit0 = handshake) | len(1) sender | len(1) recipient | counter(4)
///      | [handshake] | len(4) ciphertext | mac(32)
/// ```
///
/// The MAC covers everything before the ciphertext length followed by the ciphertext.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageEnvelope {
    pub version: u8,
    pub sender_id: String,
    pub recipient_id: String,
    pub counter: u32,
    pub handshake: Option<HandshakeHeader>,
    #[serde(with = "crate::hexser")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "crate::hexser")]
    pub mac: [u8; 32],
}

impl MessageEnvelope {
    pub fn associated_data(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.sender_id.len() + self.recipient_id.len() + 106);
        out.push(self.version);
        out.push(if self.handshake.is_some() { FLAG_HANDSHAKE } else { 0 });
        push_id(&mut out, &self.sender_id);
        push_id(&mut out, &self.recipient_id);
        out.extend_from_slice(&self.counter.to_be_bytes());
        if let Some(h) = &self.handshake {
            h.encode_into(&mut out);
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.associated_data();
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.mac);
        out
    }

    pub fn encoded_len(&self) -> usize {
        2 + 1
            + self.sender_id.len()
            + 1
            + self.recipient_id.len()
            + 4
            + self.handshake.as_ref().map_or(0, HandshakeHeader::encoded_len)
            + 4
            + self.ciphertext.len()
            + 32
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, RatchetError> {
        let mut r = Reader { bytes, pos: 0 };
        let version = r.u8()?;
        if version != ENVELOPE_VERSION {
            return Err(RatchetError::Malformed("unsupported version"));
        }
        let flags = r.u8()?;
        if flags & !FLAG_HANDSHAKE != 0 {
            return Err(RatchetError::Malformed("unknown flag bits"));
        }
        let sender_id = r.id()?;
        let recipient_id = r.id()?;
        let counter = u32::from_be_bytes(r.take(4)?.try_into().expect("4 bytes"));
        let handshake = if flags & FLAG_HANDSHAKE != 0 {
            let (h, used) = HandshakeHeader::decode_prefix(&bytes[r.pos..])?;
            r.pos += used;
            Some(h)
        } else {
            None
        };
        let ct_len = u32::from_be_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let ciphertext = r.take(ct_len)?.to_vec();
        let mac = r.take(32)?.try_into().expect("32 bytes");
        if r.pos != bytes.len() {
            return Err(RatchetError::Malformed("trailing bytes"));
        }
        Ok(Self { version, sender_id, recipient_id, counter, handshake, ciphertext, mac })
    }
}

fn push_id(out: &mut Vec<u8>, id: &str) {
    debug_assert!(id.len() <= u8::MAX as usize);
    out.push(id.len() as u8);
    out.extend_from_slice(id.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RatchetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(RatchetError::Malformed("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, RatchetError> {
        Ok(self.take(1)?[0])
    }

    fn id(&mut self) -> Result<String, RatchetError> {
        let len = self.u8()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| RatchetError::Malformed("id is not UTF-8"))
    }
}

/// Encrypts under the next send-chain key; the consumed chain key is dropped.
pub fn encrypt_message(session: &mut SessionState, plaintext: &[u8]) -> Result<MessageEnvelope, RatchetError> {
    let (key, next) = advance_chain(&session.send)?;
    let mut envelope = MessageEnvelope {
        version: ENVELOPE_VERSION,
        sender_id: session.local_id.clone(),
        recipient_id: session.peer_id.clone(),
        counter: session.send.counter,
        handshake: session.pending_handshake.clone(),
        ciphertext: Vec::new(),
        mac: [0; 32],
    };
    seal(&mut envelope, &key, plaintext);
    session.send = next;
    Ok(envelope)
}

fn seal(envelope: &mut MessageEnvelope, key: &MessageKey, plaintext: &[u8]) {
    let (ciphertext, mac) = aead_encrypt(key, plaintext, &envelope.associated_data());
    envelope.ciphertext = ciphertext;
    envelope.mac = mac;
}

/// Verifies and decrypts. On any error the session is left exactly as it was.
pub fn decrypt_message(session: &mut SessionState, envelope: &MessageEnvelope) -> Result<Vec<u8>, RatchetError> {
    if envelope.recipient_id != session.local_id {
        return Err(RatchetError::WrongRecipient { expected: session.local_id.clone(), got: envelope.recipient_id.clone() });
    }
    if envelope.sender_id != session.peer_id {
        return Err(RatchetError::WrongSender { expected: session.peer_id.clone(), got: envelope.sender_id.clone() });
    }
    let ad = envelope.associated_data();
    let counter = envelope.counter;

    let plaintext = if counter < session.recv.counter {
        let key = session.skipped.keys.get(&counter).ok_or(RatchetError::Replay(counter))?;
        let pt = aead_decrypt(key, &envelope.ciphertext, &ad, &envelope.mac)?;
        session.skipped.keys.remove(&counter);
        pt
    } else {
        let jump = counter - session.recv.counter;
        if jump > MAX_SKIP {
            return Err(RatchetError::FloodGuard(jump));
        }
        let mut chain = session.recv.clone();
        let mut skipped = Vec::with_capacity(jump as usize);
        while chain.counter < counter {
            let (k, next) = advance_chain(&chain)?;
            skipped.push((chain.counter, k));
            chain = next;
        }
        let (key, next) = advance_chain(&chain)?;
        let pt = aead_decrypt(&key, &envelope.ciphertext, &ad, &envelope.mac)?;
        session.recv = next;
        for (c, k) in skipped {
            session.skipped.insert(c, k);
        }
        pt
    };
    if session.role == Role::Initiator {
        session.pending_handshake = None;
    }
    Ok(plaintext)
}

/// Deniability demonstration.
///
/// Both ends of a session hold both chain keys, so the receiving side can
/// author a message that verifies exactly like one from its peer.
pub mod deniability {
    use super::*;

    /// Builds an envelope attributed to the session's peer at the next expected
    /// receive counter. Does not modify `session`; decrypt it on a clone.
    pub fn forge_envelope(session: &SessionState, fake_plaintext: &[u8]) -> Result<MessageEnvelope, RatchetError> {
        let (key, _) = advance_chain(&session.recv)?;
        let mut envelope = MessageEnvelope {
            version: ENVELOPE_VERSION,
            sender_id: session.peer_id.clone(),
            recipient_id: session.local_id.clone(),
            counter: session.recv.counter,
            handshake: None,
            ciphertext: Vec::new(),
            mac: [0; 32],
        };
        seal(&mut envelope, &key, fake_plaintext);
        Ok(envelope)
    }

    /// What an outsider can do: guess a chain key.
    pub fn forge_without_state(
        sender_id: &str,
        recipient_id: &str,
        counter: u32,
        guessed_chain_key: Key32,
        fake_plaintext: &[u8],
    ) -> Result<MessageEnvelope, RatchetError> {
        let (key, _) = advance_chain(&ChainState { chain_key: guessed_chain_key, counter })?;
        let mut envelope = MessageEnvelope {
            version: ENVELOPE_VERSION,
            sender_id: sender_id.to_string(),
            recipient_id: recipient_id.to_string(),
            counter,
            handshake: None,
            ciphertext: Vec::new(),
            mac: [0; 32],
        };
        seal(&mut envelope, &key, fake_plaintext);
        Ok(envelope)
    }
}
