//! Primitive layer: X25519, HMAC-SHA256, HKDF-SHA256, SHA-256 and the
//! AES-256-CBC + HMAC-SHA256 message cipher.
//!
//! Everything here is a pure function of its inputs except [`Entropy`].

use std::fmt;

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand_chacha::ChaCha20Rng;
use rand_core::{OsRng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;
use thiserror::Error;
use zeroize::{Zeroize, ZeroizeOnDrop};

type HmacSha256 = Hmac<Sha256>;
type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;

/// Largest output HKDF-SHA256 can produce (255 blocks).
pub const HKDF_MAX_OUTPUT: usize = 255 * 32;

/// Length of a per-message key: cipher key, MAC key, IV.
pub const MESSAGE_KEY_LEN: usize = 80;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("ECDH produced the all-zero output (low-order peer point)")]
    NonContributory,
    #[error("HKDF output length {0} exceeds {HKDF_MAX_OUTPUT}")]
    HkdfLength(usize),
    #[error("MAC verification failed")]
    BadMac,
    #[error("ciphertext padding is invalid")]
    BadPadding,
    #[error("platform entropy source failed: {0}")]
    Entropy(String),
}

/// Fixed-length secret key material, zeroized on drop.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct SymKey<const N: usize>([u8; N]);

pub type Key32 = SymKey<32>;
pub type MessageKey = SymKey<MESSAGE_KEY_LEN>;

impl<const N: usize> SymKey<N> {
    pub fn from_bytes(bytes: [u8; N]) -> Self {
        Self(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; N]>::try_from(bytes).ok().map(Self)
    }

    pub fn as_bytes(&self) -> &[u8; N] {
        &self.0
    }
}

impl<const N: usize> fmt::Debug for SymKey<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymKey<{N}>(..)")
    }
}

impl<const N: usize> Serialize for SymKey<N> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de, const N: usize> Deserialize<'de> for SymKey<N> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        Self::from_slice(&bytes).ok_or_else(|| serde::de::Error::custom(format!("expected {N} bytes, got {}", bytes.len())))
    }
}

impl MessageKey {
    pub fn cipher_key(&self) -> &[u8] {
        &self.0[..32]
    }

    pub fn mac_key(&self) -> &[u8] {
        &self.0[32..64]
    }

    pub fn iv(&self) -> &[u8] {
        &self.0[64..80]
    }
}

/// Apply the X25519 clamping rules.
pub fn clamp(mut bytes: [u8; 32]) -> [u8; 32] {
    bytes[0] &= 248;
    bytes[31] &= 127;
    bytes[31] |= 64;
    bytes
}

/// A clamped Curve25519 secret scalar.
#[derive(Clone, PartialEq, Eq, Zeroize, ZeroizeOnDrop)]
pub struct Scalar32([u8; 32]);

impl Scalar32 {
    /// Clamps on construction, so every `Scalar32` satisfies the clamping invariant.
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(clamp(bytes))
    }

    pub fn random(rng: &mut Entropy) -> Result<Self, CryptoError> {
        Ok(Self::from_bytes(rng.array()?))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn public(&self) -> Point32 {
        Point32(x25519_dalek::x25519(self.0, x25519_dalek::X25519_BASEPOINT_BYTES))
    }
}

impl fmt::Debug for Scalar32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Scalar32(..)")
    }
}

/// A Curve25519 u-coordinate.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point32(pub [u8; 32]);

impl Point32 {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Point32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Point32({})", self.to_hex())
    }
}

impl Serialize for Point32 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Point32 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        <[u8; 32]>::try_from(bytes.as_slice()).map(Point32).map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// X25519 with contributory-behavior check.
pub fn ecdh(secret: &Scalar32, peer_public: &Point32) -> Result<[u8; 32], CryptoError> {
    let out = x25519_dalek::x25519(secret.0, peer_public.0);
    if bool::from(out.ct_eq(&[0u8; 32])) {
        return Err(CryptoError::NonContributory);
    }
    Ok(out)
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

pub fn hkdf(ikm: &[u8], salt: &[u8], info: &[u8], out_len: usize) -> Result<Vec<u8>, CryptoError> {
    if out_len > HKDF_MAX_OUTPUT {
        return Err(CryptoError::HkdfLength(out_len));
    }
    let mut out = vec![0u8; out_len];
    Hkdf::<Sha256>::new(Some(salt), ikm).expand(info, &mut out).map_err(|_| CryptoError::HkdfLength(out_len))?;
    Ok(out)
}

/// Encrypt-then-MAC: AES-256-CBC/PKCS#7 under the first 32 key bytes and the
/// trailing 16-byte IV, then HMAC-SHA256(mac key, associated_data || ciphertext).
pub fn aead_encrypt(key: &MessageKey, plaintext: &[u8], associated_data: &[u8]) -> (Vec<u8>, [u8; 32]) {
    let ciphertext = Aes256CbcEnc::new_from_slices(key.cipher_key(), key.iv())
        .expect("fixed key and IV lengths")
        .encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let mac = etm_tag(key, associated_data, &ciphertext);
    (ciphertext, mac)
}

/// Verifies the tag before touching the ciphertext.
pub fn aead_decrypt(key: &MessageKey, ciphertext: &[u8], associated_data: &[u8], mac: &[u8; 32]) -> Result<Vec<u8>, CryptoError> {
    let expected = etm_tag(key, associated_data, ciphertext);
    if !bool::from(expected.ct_eq(mac)) {
        return Err(CryptoError::BadMac);
    }
    Aes256CbcDec::new_from_slices(key.cipher_key(), key.iv())
        .expect("fixed key and IV lengths")
        .decrypt_padded_vec_mut::<Pkcs7>(ciphertext)
        .map_err(|_| CryptoError::BadPadding)
}

fn etm_tag(key: &MessageKey, associated_data: &[u8], ciphertext: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key.mac_key()).expect("HMAC accepts any key length");
    mac.update(associated_data);
    mac.update(ciphertext);
    mac.finalize().into_bytes().into()
}

/// Random-byte source.
///
/// [`Entropy::os`] is the only source production paths should use. The
/// seeded variant is a reproducibility aid for tests and seeded simulations;
/// its output is fully predictable from the seed.
pub struct Entropy {
    source: Source,
}

enum Source {
    Os,
    InsecureSeeded(Box<ChaCha20Rng>),
}

impl Entropy {
    pub fn os() -> Self {
        Self { source: Source::Os }
    }

    /// Deterministic ChaCha20 stream. NOT SECURE: for tests and seeded simulations only.
    pub fn insecure_seeded(seed: u64) -> Self {
        Self { source: Source::InsecureSeeded(Box::new(ChaCha20Rng::seed_from_u64(seed))) }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.source, Source::InsecureSeeded(_))
    }

    pub fn fill(&mut self, buf: &mut [u8]) -> Result<(), CryptoError> {
        match &mut self.source {
            Source::Os => OsRng.try_fill_bytes(buf).map_err(|e| CryptoError::Entropy(e.to_string())),
            Source::InsecureSeeded(rng) => {
                rng.fill_bytes(buf);
                Ok(())
            }
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CryptoError> {
        let mut out = vec![0u8; n];
        self.fill(&mut out)?;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CryptoError> {
        let mut out = [0u8; N];
        self.fill(&mut out)?;
        Ok(out)
    }

    pub fn next_u64(&mut self) -> Result<u64, CryptoError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// Uniform value in `0..bound` (rejection sampling). `bound` must be non-zero.
    pub fn below(&mut self, bound: u64) -> Result<u64, CryptoError> {
        assert!(bound > 0, "bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64()?;
            if v < zone {
                return Ok(v % bound);
            }
        }
    }
}

impl fmt::Debug for Entropy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.source {
            Source::Os => f.write_str("Entropy::Os"),
            Source::InsecureSeeded(_) => f.write_str("Entropy::InsecureSeeded"),
        }
    }
}

/// Free-function form of [`Entropy::bytes`] over OS entropy.
pub fn random_bytes(n: usize) -> Result<Vec<u8>, CryptoError> {
    Entropy::os().bytes(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn h(s: &str) -> Vec<u8> {
        hex::decode(s).unwrap()
    }

    fn arr(s: &str) -> [u8; 32] {
        h(s).try_into().unwrap()
    }

    // RFC 7748 section 5.2 test vectors.
    #[test]
    fn x25519_published_vectors() {
        let k1 = arr("a546e36bf0527c9d3b16154b82465edd62144c0ac1fc5a18506a2244ba449ac4");
        let u1 = arr("e6db6867583030db3594c1a424b15f7c726624ec26b3353b10a903a6d0ab1c4c");
        let out1 = ecdh(&Scalar32::from_bytes(k1), &Point32(u1)).unwrap();
        assert_eq!(hex::encode(out1), "c3da55379de9c6908e94ea4df28d084f32eccf03491c71f754b4075577a28552");

        let k2 = arr("4b66e9d4d1b4673c5ad22691957d6af5c11b6421e0ea01d42ca4169e7918ba0d");
        let u2 = arr("e5210f12786811d3f4b7959d0538ae2c31dbe7106fc03c3efc4cd549c715a493");
        let out2 = ecdh(&Scalar32::from_bytes(k2), &Point32(u2)).unwrap();
        assert_eq!(hex::encode(out2), "95cbde9476e8907d7aade45cb4b873f88b595a68799fa152e6f8f7647aac7957");
    }

    #[test]
    fn x25519_dh_vector_alice_bob() {
        let alice = Scalar32::from_bytes(arr("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a"));
        let bob = Scalar32::from_bytes(arr("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb"));
        assert_eq!(alice.public().to_hex(), "8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a");
        assert_eq!(bob.public().to_hex(), "de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f");
        let shared = "4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742";
        assert_eq!(hex::encode(ecdh(&alice, &bob.public()).unwrap()), shared);
        assert_eq!(hex::encode(ecdh(&bob, &alice.public()).unwrap()), shared);
    }

    #[test]
    fn ecdh_rejects_low_order_point() {
        let mut rng = Entropy::insecure_seeded(1);
        let a = Scalar32::random(&mut rng).unwrap();
        assert_eq!(ecdh(&a, &Point32([0u8; 32])), Err(CryptoError::NonContributory));
        let mut one = [0u8; 32];
        one[0] = 1;
        assert_eq!(ecdh(&a, &Point32(one)), Err(CryptoError::NonContributory));
    }

    #[test]
    fn ecdh_commutes_for_1000_pairs() {
        let mut rng = Entropy::insecure_seeded(7);
        for _ in 0..1000 {
            let a = Scalar32::random(&mut rng).unwrap();
            let b = Scalar32::random(&mut rng).unwrap();
            assert_eq!(ecdh(&a, &b.public()).unwrap(), ecdh(&b, &a.public()).unwrap());
        }
    }

    #[test]
    fn hmac_matches_oracle() {
        let tag = hmac_sha256(&[0u8; 32], &[0x01]);
        assert_eq!(hex::encode(tag), "3d7afb663124ecbf2c953f863d4fc8796eeb2d372b64aad58697ec5264649cdb");
        assert_eq!(tag, hmac_sha256(&[0u8; 32], &[0x01]));
        assert_ne!(tag, hmac_sha256(&[0u8; 32], &[0x01, 0x00]));
    }

    #[test]
    fn hkdf_matches_oracle_and_rfc5869_case1() {
        let ikm: Vec<u8> = (0..22).collect();
        let salt: Vec<u8> = (0..13).collect();
        let out = hkdf(&ikm, &salt, b"ratchetlab-test", 42).unwrap();
        assert_eq!(hex::encode(out), "5d88e9908c89f264ae8fc6456a5e5490bb61c5a0172584459c513d1d6f44172f761b6a07ce588405c7aa");

        let rfc = hkdf(&[0x0b; 22], &salt, &h("f0f1f2f3f4f5f6f7f8f9"), 42).unwrap();
        assert_eq!(hex::encode(rfc), "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865");
    }

    #[test]
    fn hkdf_is_prefix_consistent_and_bounded() {
        let long = hkdf(b"ikm", b"salt", b"info", 96).unwrap();
        let short = hkdf(b"ikm", b"salt", b"info", 32).unwrap();
        assert_eq!(&long[..32], short.as_slice());
        assert!(hkdf(b"ikm", b"salt", b"info", HKDF_MAX_OUTPUT).is_ok());
        assert_eq!(hkdf(b"ikm", b"", b"", HKDF_MAX_OUTPUT + 1), Err(CryptoError::HkdfLength(8161)));
    }

    #[test]
    fn aead_matches_oracle() {
        let key = MessageKey::from_slice(&(0u8..80).collect::<Vec<_>>()).unwrap();
        let (ct, mac) = aead_encrypt(&key, b"attack at dawn", b"header");
        assert_eq!(hex::encode(&ct), "350f10938e01375dc3d4e852be6efcf2");
        assert_eq!(hex::encode(mac), "4efb2f285791dcdbc1acd83bb138b145f256f284f132148d38b171363e45a914");
        assert_eq!(aead_decrypt(&key, &ct, b"header", &mac).unwrap(), b"attack at dawn");
    }

    #[test]
    fn aead_empty_plaintext_round_trips() {
        let key = MessageKey::from_bytes([9u8; 80]);
        let (ct, mac) = aead_encrypt(&key, b"", b"");
        assert_eq!(ct.len(), 16);
        assert_eq!(aead_decrypt(&key, &ct, b"", &mac).unwrap(), b"");
    }

    #[test]
    fn aead_rejects_every_single_bit_flip() {
        let key = MessageKey::from_bytes([3u8; 80]);
        let ad = b"assoc";
        let (ct, mac) = aead_encrypt(&key, b"some plaintext bytes", ad);
        for i in 0..ct.len() * 8 {
            let mut c = ct.clone();
            c[i / 8] ^= 1 << (i % 8);
            assert_eq!(aead_decrypt(&key, &c, ad, &mac), Err(CryptoError::BadMac));
        }
        for i in 0..ad.len() * 8 {
            let mut a = ad.to_vec();
            a[i / 8] ^= 1 << (i % 8);
            assert_eq!(aead_decrypt(&key, &ct, &a, &mac), Err(CryptoError::BadMac));
        }
        for i in 0..256 {
            let mut m = mac;
            m[i / 8] ^= 1 << (i % 8);
            assert_eq!(aead_decrypt(&key, &ct, ad, &m), Err(CryptoError::BadMac));
        }
    }

    #[test]
    fn random_bytes_contract() {
        assert!(random_bytes(0).unwrap().is_empty());
        assert_ne!(random_bytes(32).unwrap(), random_bytes(32).unwrap());
        let mut a = Entropy::insecure_seeded(99);
        let mut b = Entropy::insecure_seeded(99);
        assert!(a.is_deterministic());
        assert!(!Entropy::os().is_deterministic());
        assert_eq!(a.bytes(64).unwrap(), b.bytes(64).unwrap());
        assert_ne!(a.bytes(16).unwrap(), Entropy::insecure_seeded(100).bytes(16).unwrap());
    }

    #[test]
    fn debug_output_redacts_secrets() {
        let s = Scalar32::from_bytes([0xab; 32]);
        assert!(!format!("{s:?}").contains("ab"));
        let k = Key32::from_bytes([0xcd; 32]);
        assert!(!format!("{k:?}").contains("cd"));
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(bytes in proptest::array::uniform32(any::<u8>())) {
            let once = clamp(bytes);
            prop_assert_eq!(clamp(once), once);
            prop_assert_eq!(once[0] & 7, 0);
            prop_assert_eq!(once[31] & 0x80, 0);
            prop_assert_eq!(once[31] & 0x40, 0x40);
        }

        #[test]
        fn aead_round_trips(pt in proptest::collection::vec(any::<u8>(), 0..2048),
                            ad in proptest::collection::vec(any::<u8>(), 0..64),
                            seed in any::<u64>()) {
            let key = MessageKey::from_bytes(Entropy::insecure_seeded(seed).array().unwrap());
            let (ct, mac) = aead_encrypt(&key, &pt, &ad);
            prop_assert_eq!(ct.len() % 16, 0);
            prop_assert_eq!(aead_decrypt(&key, &ct, &ad, &mac).unwrap(), pt);
        }
    }

    #[test]
    fn aead_round_trips_64k() {
        let mut rng = Entropy::insecure_seeded(64);
        let key = MessageKey::from_bytes(rng.array().unwrap());
        let pt = rng.bytes(64 * 1024).unwrap();
        let (ct, mac) = aead_encrypt(&key, &pt, b"");
        assert_eq!(aead_decrypt(&key, &ct, b"", &mac).unwrap(), pt);
    }
}
