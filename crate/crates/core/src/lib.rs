//! Prekey-based end-to-end encrypted messaging with a symmetric hash
//! ratchet, an in-process relay server that records delivery metadata, and
//! the traffic analysis that metadata enables.
//!
//! Layering, bottom up: [`crypto`] → [`key_store`] → [`session`] →
//! [`ratchet`] → [`server`] / [`client`] → [`metadata`], [`verification`],
//! [`sim`].

pub mod client;
pub mod crypto;
mod hexser;
pub mod key_store;
pub mod metadata;
pub mod ratchet;
pub mod server;
pub mod session;
pub mod sim;
pub mod verification;

pub use client::{ClientError, Device, SessionBook};
pub use crypto::{Entropy, Point32};
pub use key_store::{KeyStore, PreKeyBundle};
pub use ratchet::MessageEnvelope;
pub use server::{MetadataRecord, Server};
pub use session::{HandshakeHeader, SessionState};
