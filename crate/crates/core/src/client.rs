//! A user's device: key store plus pairwise sessions, talking to a [`Server`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{CryptoError, Entropy, Point32};
use crate::key_store::KeyStore;
use crate::ratchet::{decrypt_message, encrypt_message, MessageEnvelope, RatchetError};
use crate::server::{Server, ServerError};
use crate::session::{initiate_session, prepare_accept, Role, SessionError, SessionState};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Ratchet(#[from] RatchetError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("no session with {0}")]
    NoSession(String),
    #[error("handshake from {0} was already processed")]
    ReplayedHandshake(String),
}

impl ClientError {
    /// True for failures caused by a bad or replayed message rather than local state.
    pub fn is_integrity(&self) -> bool {
        matches!(
            self,
            ClientError::Ratchet(_) | ClientError::ReplayedHandshake(_) | ClientError::NoSession(_) | ClientError::Session(_)
        )
    }
}

/// Sessions with one peer. `superseded` keeps the recipient side of a
/// simultaneous initiation that lost the tie-break, so messages carrying
/// that handshake still decrypt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeerSessions {
    pub active: SessionState,
    pub superseded: Option<SessionState>,
}

/// Serializable session half of a device.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SessionBook {
    pub peers: BTreeMap<String, PeerSessions>,
    /// Every handshake ephemeral ever accepted; a repeat that matches no live
    /// session is a replay.
    pub seen_handshakes: BTreeSet<Point32>,
}

/// Sender id and the outcome of decrypting one queued envelope.
pub type Delivery = (String, Result<Vec<u8>, ClientError>);

#[derive(Clone, Debug)]
pub struct Device {
    pub store: KeyStore,
    pub book: SessionBook,
}

impl Device {
    pub fn new(store: KeyStore) -> Self {
        Self { store, book: SessionBook::default() }
    }

    pub fn with_sessions(store: KeyStore, book: SessionBook) -> Self {
        Self { store, book }
    }

    pub fn user_id(&self) -> &str {
        self.store.user_id()
    }

    pub fn session(&self, peer: &str) -> Option<&SessionState> {
        self.book.peers.get(peer).map(|p| &p.active)
    }

    pub fn has_session(&self, peer: &str) -> bool {
        self.book.peers.contains_key(peer)
    }

    /// Fetches the peer's bundle and starts a session as initiator.
    pub fn start_session(&mut self, server: &Server, peer: &str, rng: &mut Entropy) -> Result<(), ClientError> {
        let bundle = server.fetch_bundle(self.user_id(), peer)?;
        let (session, _) = initiate_session(&self.store, &bundle, rng)?;
        self.book.peers.insert(peer.to_string(), PeerSessions { active: session, superseded: None });
        Ok(())
    }

    pub fn encrypt(&mut self, peer: &str, plaintext: &[u8]) -> Result<MessageEnvelope, ClientError> {
        let sessions = self.book.peers.get_mut(peer).ok_or_else(|| ClientError::NoSession(peer.to_string()))?;
        Ok(encrypt_message(&mut sessions.active, plaintext)?)
    }

    /// Encrypts for `peer`, establishing a session on first contact.
    pub fn seal_for(
        &mut self,
        server: &Server,
        peer: &str,
        plaintext: &[u8],
        rng: &mut Entropy,
    ) -> Result<MessageEnvelope, ClientError> {
        if !self.has_session(peer) {
            self.start_session(server, peer, rng)?;
        }
        self.encrypt(peer, plaintext)
    }

    pub fn send(
        &mut self,
        server: &Server,
        peer: &str,
        plaintext: &[u8],
        rng: &mut Entropy,
    ) -> Result<MessageEnvelope, ClientError> {
        let env = self.seal_for(server, peer, plaintext, rng)?;
        server.relay(&env)?;
        Ok(env)
    }

    /// Pairwise-encrypts one plaintext for every other member and hands the batch to the server.
    pub fn send_group(
        &mut self,
        server: &Server,
        group_id: &str,
        plaintext: &[u8],
        rng: &mut Entropy,
    ) -> Result<Vec<MessageEnvelope>, ClientError> {
        let group = server.group(group_id).ok_or_else(|| ServerError::UnknownGroup(group_id.to_string()))?;
        if !group.members.contains(self.user_id()) {
            return Err(ServerError::Forbidden(self.user_id().to_string(), group_id.to_string()).into());
        }
        let me = self.user_id().to_string();
        let envelopes = group
            .members
            .iter()
            .filter(|m| **m != me)
            .map(|m| self.seal_for(server, m, plaintext, rng))
            .collect::<Result<Vec<_>, _>>()?;
        server.group_send(&me, group_id, &envelopes)?;
        Ok(envelopes)
    }

    pub fn receive_bytes(&mut self, bytes: &[u8]) -> Result<Vec<u8>, ClientError> {
        let env = MessageEnvelope::decode(bytes)?;
        self.receive(&env)
    }

    /// Decrypts one envelope. State (store and sessions) only changes on success.
    pub fn receive(&mut self, env: &MessageEnvelope) -> Result<Vec<u8>, ClientError> {
        if env.recipient_id != self.user_id() {
            return Err(
                RatchetError::WrongRecipient { expected: self.user_id().to_string(), got: env.recipient_id.clone() }.into()
            );
        }
        let peer = env.sender_id.clone();
        let Some(header) = &env.handshake else {
            let sessions = self.book.peers.get_mut(&peer).ok_or_else(|| ClientError::NoSession(peer.clone()))?;
            return Ok(decrypt_message(&mut sessions.active, env)?);
        };

        if let Some(sessions) = self.book.peers.get_mut(&peer) {
            if sessions.active.established_by == header.ephemeral {
                return Ok(decrypt_message(&mut sessions.active, env)?);
            }
            if let Some(old) = sessions.superseded.as_mut().filter(|s| s.established_by == header.ephemeral) {
                return Ok(decrypt_message(old, env)?);
            }
        }
        if self.book.seen_handshakes.contains(&header.ephemeral) {
            return Err(ClientError::ReplayedHandshake(peer));
        }

        let mut fresh = prepare_accept(&self.store, &peer, header)?;
        let plaintext = decrypt_message(&mut fresh, env)?;
        if let Some(id) = header.one_time_id {
            self.store.consume_one_time(id);
        }
        self.book.seen_handshakes.insert(header.ephemeral);

        // Simultaneous initiation: the session started by the smaller user id wins on both ends.
        let keep_ours = self.book.peers.get(&peer).is_some_and(|s| {
            s.active.role == Role::Initiator && s.active.pending_handshake.is_some() && self.store.user_id() < peer.as_str()
        });
        if keep_ours {
            self.book.peers.get_mut(&peer).expect("checked").superseded = Some(fresh);
        } else {
            self.book.peers.insert(peer, PeerSessions { active: fresh, superseded: None });
        }
        Ok(plaintext)
    }

    /// Drains this device's queue and decrypts everything, in order.
    pub fn receive_all(&mut self, server: &Server) -> Result<Vec<Delivery>, ClientError> {
        let queued = server.deliver_raw(self.user_id())?;
        Ok(queued
            .iter()
            .map(|bytes| {
                let sender = MessageEnvelope::decode(bytes).map(|e| e.sender_id).unwrap_or_default();
                (sender, self.receive_bytes(bytes))
            })
            .collect())
    }
}
