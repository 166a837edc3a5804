#!/usr/bin/env python3
"""Independent known-answer generator for the frozen vectors in tests/known_answers.rs.

Uses only the Python standard library (hmac, hashlib) plus `cryptography`
for AES-256-CBC. Run: python3 tests/oracle/oracle.py
"""
import hashlib
import hmac

ZERO32 = bytes(32)


def hmac256(key, msg):
    return hmac.new(key, msg, hashlib.sha256).digest()


def hkdf(ikm, salt, info, length):
    prk = hmac256(salt, ikm)
    out, block, i = b"", b"", 1
    while len(out) < length:
        block = hmac256(prk, block + info + bytes([i]))
        out += block
        i += 1
    return out[:length]


def ratchet_step(chain_key):
    seed = hmac256(chain_key, b"\x01")
    return hkdf(seed, ZERO32, b"ratchetlab-msg-v1", 80), hmac256(chain_key, b"\x02")


def fingerprint_half(user_id, key):
    h = ZERO32
    for _ in range(1024):
        h = hashlib.sha256(h + key + user_id.encode()).digest()
    return "".join("%05d" % (int.from_bytes(h[i:i + 5], "big") % 100000) for i in range(0, 30, 5))


def safety_number(a, ka, b, kb):
    x, y = fingerprint_half(a, ka), fingerprint_half(b, kb)
    return min(x, y) + max(x, y)


def aes_cbc_etm(msg_key, plaintext, ad):
    from cryptography.hazmat.primitives import padding
    from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
    enc_key, mac_key, iv = msg_key[:32], msg_key[32:64], msg_key[64:80]
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(enc_key), modes.CBC(iv)).encryptor()
    ct = enc.update(padded) + enc.finalize()
    return ct, hmac256(mac_key, ad + ct)


if __name__ == "__main__":
    print("hmac_zero_key_0x01", hmac256(ZERO32, b"\x01").hex())
    print("hmac_zero_key_0x02", hmac256(ZERO32, b"\x02").hex())
    print("hkdf_fixed_42", hkdf(bytes(range(22)), bytes(range(13)), b"ratchetlab-test", 42).hex())
    mk, ck = ratchet_step(ZERO32)
    print("ratchet_zero_message_key", mk.hex())
    print("ratchet_zero_next_chain", ck.hex())
    mk2, ck2 = ratchet_step(ck)
    print("ratchet_zero_second_message_key", mk2.hex())
    for n in (96, 128):
        out = hkdf(bytes([0x42]) * n, ZERO32, b"ratchetlab-session-v1", 96)
        print("derive_chains_42x%d" % n, out.hex())
    print("safety_number_vector", safety_number("+15550001111", bytes([1]) * 32, "+15550002222", bytes([2]) * 32))
    ct, mac = aes_cbc_etm(bytes(range(80)), b"attack at dawn", b"header")
    print("aead_ct", ct.hex())
    print("aead_mac", mac.hex())
