//! Browser bindings for three demos. The `*_json` functions are plain Rust
//! and tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use ratchetlab_core::crypto::{Key32, Point32};
use ratchetlab_core::metadata::{self, InferenceParams};
use ratchetlab_core::ratchet::advance_chain;
use ratchetlab_core::session::ChainState;
use ratchetlab_core::sim::{self, SimConfig};
use ratchetlab_core::verification;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Keeps the page responsive.
pub const MAX_STEPS: u32 = 64;
pub const MAX_SIM_MESSAGES: usize = 20_000;

fn key32(hex_str: &str) -> Result<[u8; 32], String> {
    let bytes = hex::decode(hex_str.trim()).map_err(|e| format!("bad hex: {e}"))?;
    bytes.try_into().map_err(|b: Vec<u8>| format!("expected 32 bytes, got {}", b.len()))
}

/// Walks `steps` ratchet steps from `chain_key_hex`, listing each message key.
pub fn ratchet_steps_json(chain_key_hex: &str, steps: u32) -> Result<String, String> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must be 1..={MAX_STEPS}"));
    }
    let mut chain = ChainState::new(Key32::from_bytes(key32(chain_key_hex)?));
    let mut rows = Vec::new();
    for _ in 0..steps {
        let (mk, next) = advance_chain(&chain).map_err(|e| e.to_string())?;
        rows.push(json!({
            "counter": chain.counter,
            "chain_key": hex::encode(chain.chain_key.as_bytes()),
            "cipher_key": hex::encode(mk.cipher_key()),
            "mac_key": hex::encode(mk.mac_key()),
            "iv": hex::encode(mk.iv()),
        }));
        chain = next;
    }
    Ok(json!({ "steps": rows, "next_chain_key": hex::encode(chain.chain_key.as_bytes()) }).to_string())
}

pub fn safety_number_json(user_a: &str, key_a_hex: &str, user_b: &str, key_b_hex: &str) -> Result<String, String> {
    let (ka, kb) = (Point32(key32(key_a_hex)?), Point32(key32(key_b_hex)?));
    let digits = verification::safety_number(user_a, &ka, user_b, &kb).map_err(|e| e.to_string())?;
    let qr = verification::qr_payload(user_a, &ka, user_b, &kb).map_err(|e| e.to_string())?;
    Ok(json!({
        "digits": digits,
        "grouped": verification::format_safety_number(&digits),
        "qr": verification::qr_text(&qr),
    })
    .to_string())
}

/// Runs a seeded simulation and blind inference; returns the report and its score.
pub fn simulate_json(users: usize, messages: usize, groups: usize, seed: u64) -> Result<String, String> {
    if messages > MAX_SIM_MESSAGES {
        return Err(format!("at most {MAX_SIM_MESSAGES} messages"));
    }
    let mut cfg = SimConfig::new(users, messages, groups, seed);
    // Browser runs favour speed; nobody needs a deep prekey pool here.
    cfg.one_time_prekeys = 10;
    let out = sim::run(&cfg).map_err(|e| e.to_string())?;
    let report = metadata::analyze(&out.ledger, &InferenceParams::blind(), 0);
    let score = sim::score_groups(&out.truth, &report.groups, 3);
    let truth: Vec<_> = out.truth.groups.values().collect();
    Ok(json!({
        "ledger_rows": out.ledger.len(),
        "decrypted": out.decrypted,
        "decrypt_failures": out.decrypt_failures,
        "truth": truth,
        "score": score,
        "report": report,
        "text": report.to_text(),
    })
    .to_string())
}

pub fn random_key_hex() -> Result<String, String> {
    let mut k = [0u8; 32];
    getrandom::getrandom(&mut k).map_err(|e| e.to_string())?;
    Ok(hex::encode(k))
}

#[wasm_bindgen]
pub fn ratchet_steps(chain_key_hex: &str, steps: u32) -> Result<String, JsError> {
    ratchet_steps_json(chain_key_hex, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn safety_number(user_a: &str, key_a_hex: &str, user_b: &str, key_b_hex: &str) -> Result<String, JsError> {
    safety_number_json(user_a, key_a_hex, user_b, key_b_hex).map_err(|e| JsError::new(&e))
}

/// `seed` is a u32 so JavaScript can pass a plain number rather than a BigInt.
#[wasm_bindgen]
pub fn simulate(users: usize, messages: usize, groups: usize, seed: u32) -> Result<String, JsError> {
    simulate_json(users, messages, groups, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn random_key() -> Result<String, JsError> {
    random_key_hex().map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_chain_matches_known_answer() {
        let v: serde_json::Value = serde_json::from_str(&ratchet_steps_json(&"00".repeat(32), 2).unwrap()).unwrap();
        assert_eq!(v["steps"][0]["cipher_key"], "81acc7b94e8bfbefa523a04a0925c1f8bba56146261b03c86d62c0fd8fa8e7c5");
        assert_eq!(v["steps"][1]["chain_key"], "4ee7be0c7872360ca67414608081e9bd60fd580a7bbd209701d2a5a0b4316d0d");
        assert_eq!(v["steps"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn ratchet_input_checks() {
        assert!(ratchet_steps_json("zz", 1).is_err());
        assert!(ratchet_steps_json(&"00".repeat(31), 1).is_err());
        assert!(ratchet_steps_json(&"00".repeat(32), 0).is_err());
        assert!(ratchet_steps_json(&"00".repeat(32), MAX_STEPS + 1).is_err());
    }

    #[test]
    fn safety_number_vector() {
        let v: serde_json::Value = serde_json::from_str(
            &safety_number_json("+15550001111", &"01".repeat(32), "+15550002222", &"02".repeat(32)).unwrap(),
        )
        .unwrap();
        assert_eq!(v["digits"], "042717117414308458812726590713719054145415445030162038974138");
        assert!(safety_number_json("+15550001111", &"01".repeat(32), "+15550001111", &"02".repeat(32)).is_err());
    }

    #[test]
    fn small_simulation_scores_perfectly() {
        let v: serde_json::Value = serde_json::from_str(&simulate_json(12, 400, 2, 1).unwrap()).unwrap();
        assert_eq!(v["decrypt_failures"], 0);
        assert_eq!(v["score"]["precision"], 1.0);
        assert!(simulate_json(12, MAX_SIM_MESSAGES + 1, 2, 1).is_err());
    }

    #[test]
    fn random_keys_differ() {
        assert_ne!(random_key_hex().unwrap(), random_key_hex().unwrap());
        assert_eq!(random_key_hex().unwrap().len(), 64);
    }
}
