//! Out-of-band identity verification: a QR payload carrying both identity
//! keys, and a 60-digit safety number for reading aloud.

use data_encoding::BASE32_NOPAD;
use thiserror::Error;

use crate::crypto::{sha256, Point32};
use crate::key_store::validate_user_id;

pub const QR_VERSION: u8 = 0x01;
pub const FINGERPRINT_ITERATIONS: usize = 1_024;
pub const SAFETY_NUMBER_DIGITS: usize = 60;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerificationError {
    #[error("invalid user id {0:?}")]
    UserId(String),
    #[error("both parties have the same user id")]
    SameUser,
    #[error("malformed QR payload: {0}")]
    Payload(&'static str),
}

fn check_ids(user_a: &str, user_b: &str) -> Result<(), VerificationError> {
    for u in [user_a, user_b] {
        validate_user_id(u).map_err(|_| VerificationError::UserId(u.to_string()))?;
    }
    if user_a == user_b {
        return Err(VerificationError::SameUser);
    }
    Ok(())
}

fn ordered<'a>(a: (&'a str, &'a Point32), b: (&'a str, &'a Point32)) -> [(&'a str, &'a Point32); 2] {
    if a.0 <= b.0 {
        [a, b]
    } else {
        [b, a]
    }
}

/// `0x01 | len(1) id_lo | key_lo(32) | len(1) id_hi | key_hi(32)`, parties sorted by user id.
pub fn qr_payload(user_a: &str, key_a: &Point32, user_b: &str, key_b: &Point32) -> Result<Vec<u8>, VerificationError> {
    check_ids(user_a, user_b)?;
    let mut out = vec![QR_VERSION];
    for (id, key) in ordered((user_a, key_a), (user_b, key_b)) {
        out.push(id.len() as u8);
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(key.as_bytes());
    }
    Ok(out)
}

/// Manual-copy rendering of a QR payload.
pub fn qr_text(payload: &[u8]) -> String {
    BASE32_NOPAD.encode(payload)
}

pub fn parse_qr_payload(bytes: &[u8]) -> Result<[(String, Point32); 2], VerificationError> {
    let (&version, mut rest) = bytes.split_first().ok_or(VerificationError::Payload("empty"))?;
    if version != QR_VERSION {
        return Err(VerificationError::Payload("unsupported version"));
    }
    let mut party = || -> Result<(String, Point32), VerificationError> {
        let (&len, tail) = rest.split_first().ok_or(VerificationError::Payload("truncated"))?;
        let len = len as usize;
        if tail.len() < len + 32 {
            return Err(VerificationError::Payload("truncated"));
        }
        let id = std::str::from_utf8(&tail[..len]).map_err(|_| VerificationError::Payload("id is not UTF-8"))?;
        let key = Point32(tail[len..len + 32].try_into().expect("length checked"));
        rest = &tail[len + 32..];
        Ok((id.to_string(), key))
    };
    let lo = party()?;
    let hi = party()?;
    if !rest.is_empty() {
        return Err(VerificationError::Payload("trailing bytes"));
    }
    check_ids(&lo.0, &hi.0)?;
    if lo.0 > hi.0 {
        return Err(VerificationError::Payload("parties out of order"));
    }
    Ok([lo, hi])
}

/// 30 digits for one party: iterated SHA-256, then six 5-byte big-endian
/// chunks, each reduced mod 100000.
pub fn fingerprint_half(user_id: &str, key: &Point32) -> String {
    let mut h = [0u8; 32];
    let mut buf = Vec::with_capacity(64 + user_id.len());
    for _ in 0..FINGERPRINT_ITERATIONS {
        buf.clear();
        buf.extend_from_slice(&h);
        buf.extend_from_slice(key.as_bytes());
        buf.extend_from_slice(user_id.as_bytes());
        h = sha256(&buf);
    }
    h[..30]
        .chunks(5)
        .map(|c| {
            let v = c.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64);
            format!("{:05}", v % 100_000)
        })
        .collect()
}

/// Both halves concatenated in lexicographic order, so either party gets the same string.
pub fn safety_number(user_a: &str, key_a: &Point32, user_b: &str, key_b: &Point32) -> Result<String, VerificationError> {
    check_ids(user_a, user_b)?;
    let x = fingerprint_half(user_a, key_a);
    let y = fingerprint_half(user_b, key_b);
    Ok(if x <= y { x + &y } else { y + &x })
}

/// Groups of five for display.
pub fn format_safety_number(digits: &str) -> String {
    digits.as_bytes().chunks(5).map(|c| std::str::from_utf8(c).expect("ascii digits")).collect::<Vec<_>>().join(" ")
}
