//! Multi-query associative recall: the synthetic task the training harness
//! optimizes.
//!
//! Each instance writes `num_pairs` distinct key/value pairs, then asks for
//! `num_queries` of the keys back, in random order:
//!
//! ```text
//! tokens:  k1 v1 k2 v2 ... kN vN  Q ka  Q kb ...  PAD ... PAD
//! ```
//!
//! The supervised positions are the re-presented keys: at each `k` following
//! a `Q`, the target is the value originally paired with that key, and the
//! mask is true. Everywhere else the target is `PAD` and the mask is false.
//! Instance `i` of a run is a pure function of `(seed, i)`, so datasets never
//! need to be stored to be reproducible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KernelError, Result};

/// Padding token (also the target at unsupervised positions).
pub const PAD: u16 = 0;
/// Query marker token.
pub const QUERY: u16 = 1;

/// Task shape. The vocabulary splits as: `PAD`, `QUERY`, then
/// `(vocab - 2) / 2` keys, then as many values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MqarConfig {
    pub vocab: usize,
    pub num_pairs: usize,
    pub num_queries: usize,
    pub seq_len: usize,
}

impl Default for MqarConfig {
    fn default() -> Self {
        MqarConfig {
            vocab: 64,
            num_pairs: 8,
            num_queries: 8,
            seq_len: 128,
        }
    }
}

impl MqarConfig {
    /// Number of distinct keys (= number of distinct values).
    pub fn key_space(&self) -> usize {
        (self.vocab.saturating_sub(2)) / 2
    }

    pub fn first_value(&self) -> u16 {
        2 + self.key_space() as u16
    }

    pub fn validate(&self) -> Result<()> {
        let err = |detail: String| Err(KernelError::contract("task config", detail));
        if self.vocab < 4 {
            return err(format!("vocab {} leaves no key/value tokens", self.vocab));
        }
        if self.vocab > u16::MAX as usize + 1 {
            return err(format!("vocab {} does not fit 16-bit tokens", self.vocab));
        }
        if self.num_pairs == 0 {
            return err("num_pairs must be positive".into());
        }
        if self.num_pairs > self.key_space() {
            return err(format!(
                "num_pairs {} exceeds the {} distinct keys vocab {} provides",
                self.num_pairs,
                self.key_space(),
                self.vocab
            ));
        }
        if self.num_queries == 0 || self.num_queries > self.num_pairs {
            return err(format!(
                "num_queries {} must be in 1..={}",
                self.num_queries, self.num_pairs
            ));
        }
        let needed = 2 * self.num_pairs + 2 * self.num_queries;
        if needed > self.seq_len {
            return err(format!(
                "seq_len {} cannot hold {} pair and {} query tokens ({needed})",
                self.seq_len, self.num_pairs, self.num_queries
            ));
        }
        Ok(())
    }
}

/// One instance: input tokens, per-position targets, and the supervision mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MqarInstance {
    pub tokens: Vec<u16>,
    pub targets: Vec<u16>,
    pub mask: Vec<bool>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The generator for instance `index` of the stream identified by `seed`.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

/// Generate instance `index` of stream `seed`.
pub fn generate_instance(cfg: &MqarConfig, seed: u64, index: u64) -> Result<MqarInstance> {
    cfg.validate()?;
    let mut rng = instance_rng(seed, index);
    let key_space = cfg.key_space();
    let first_value = cfg.first_value();

    // Distinct keys via partial shuffle of the key alphabet (the selected
    // elements are the returned prefix slice).
    let mut alphabet: Vec<u16> = (0..key_space as u16).map(|k| 2 + k).collect();
    let keys: Vec<u16> = alphabet.partial_shuffle(&mut rng, cfg.num_pairs).0.to_vec();
    let values: Vec<u16> = (0..cfg.num_pairs)
        .map(|_| first_value + rng.random_range(0..key_space) as u16)
        .collect();

    // Distinct queried pairs, in random order.
    let mut pair_ix: Vec<usize> = (0..cfg.num_pairs).collect();
    let query_ix: Vec<usize> = pair_ix.partial_shuffle(&mut rng, cfg.num_queries).0.to_vec();

    let mut tokens = Vec::with_capacity(cfg.seq_len);
    for (k, v) in keys.iter().zip(&values) {
        tokens.push(*k);
        tokens.push(*v);
    }
    let mut targets = vec![PAD; cfg.seq_len];
    let mut mask = vec![false; cfg.seq_len];
    for &ix in &query_ix {
        tokens.push(QUERY);
        let pos = tokens.len();
        tokens.push(keys[ix]);
        targets[pos] = values[ix];
        mask[pos] = true;
    }
    tokens.resize(cfg.seq_len, PAD);
    Ok(MqarInstance { tokens, targets, mask })
}

/// Recompute targets and mask from a token sequence alone: every key that
/// directly follows a `QUERY` marker is a supervised position whose target is
/// the value written for that key in the pair region. Errors if a queried key
/// was never written.
pub fn derive_supervision(cfg: &MqarConfig, tokens: &[u16]) -> Result<(Vec<u16>, Vec<bool>)> {
    if tokens.len() != cfg.seq_len {
        return Err(KernelError::dim(
            "task tokens",
            format!("{}", cfg.seq_len),
            format!("{}", tokens.len()),
        ));
    }
    let first_value = cfg.first_value();
    let mut pairs: Vec<(u16, u16)> = Vec::new();
    let mut i = 0;
    while i + 1 < tokens.len() && tokens[i] >= 2 && tokens[i] < first_value {
        pairs.push((tokens[i], tokens[i + 1]));
        i += 2;
    }
    let mut targets = vec![PAD; tokens.len()];
    let mut mask = vec![false; tokens.len()];
    let mut j = i;
    while j < tokens.len() {
        if tokens[j] == QUERY {
            let Some(&key) = tokens.get(j + 1) else {
                return Err(KernelError::format("task tokens", "query marker at sequence end"));
            };
            let Some((_, v)) = pairs.iter().find(|(k, _)| *k == key) else {
                return Err(KernelError::format(
                    "task tokens",
                    format!("queried key {key} was never written"),
                ));
            };
            targets[j + 1] = *v;
            mask[j + 1] = true;
            j += 2;
        } else if tokens[j] == PAD {
            j += 1;
        } else {
            return Err(KernelError::format(
                "task tokens",
                format!("unexpected token {} at position {j}", tokens[j]),
            ));
        }
    }
    Ok((targets, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn config_bounds_are_enforced() {
        assert!(MqarConfig::default().validate().is_ok());
        for cfg in [
            MqarConfig { vocab: 3, ..Default::default() },
            MqarConfig { num_pairs: 0, ..Default::default() },
            MqarConfig { num_pairs: 40, ..Default::default() }, // only 31 keys at vocab 64
            MqarConfig { num_queries: 0, ..Default::default() },
            MqarConfig { num_queries: 9, ..Default::default() }, // more than pairs
            MqarConfig { seq_len: 16, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn minimal_instance_has_expected_layout() {
        let cfg = MqarConfig { vocab: 4, num_pairs: 1, num_queries: 1, seq_len: 4 };
        let inst = generate_instance(&cfg, 1, 0).unwrap();
        // [k, v, Q, k] with the single key 2 and single value 3.
        assert_eq!(inst.tokens, vec![2, 3, QUERY, 2]);
        assert_eq!(inst.mask, vec![false, false, false, true]);
        assert_eq!(inst.targets, vec![PAD, PAD, PAD, 3]);
    }

    #[test]
    fn instances_are_deterministic_and_vary_with_index() {
        let cfg = MqarConfig::default();
        let a = generate_instance(&cfg, 9, 4).unwrap();
        let b = generate_instance(&cfg, 9, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(&cfg, 9, 5).unwrap();
        assert_ne!(a, c);
        let d = generate_instance(&cfg, 10, 4).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn generated_instances_satisfy_the_task_contract() {
        let cfg = MqarConfig::default();
        for index in 0..200 {
            let inst = generate_instance(&cfg, 42, index).unwrap();
            assert_eq!(inst.tokens.len(), cfg.seq_len);
            let first_value = cfg.first_value();

            // Pair region: distinct keys, values in range.
            let mut written = Vec::new();
            for p in 0..cfg.num_pairs {
                let k = inst.tokens[2 * p];
                let v = inst.tokens[2 * p + 1];
                assert!((2..first_value).contains(&k));
                assert!(v >= first_value && (v as usize) < cfg.vocab);
                written.push((k, v));
            }
            let distinct: HashSet<u16> = written.iter().map(|(k, _)| *k).collect();
            assert_eq!(distinct.len(), cfg.num_pairs, "keys must be distinct");

            // Query region: Q followed by a written key; masked target is its value.
            let mut queried = HashSet::new();
            for qi in 0..cfg.num_queries {
                let base = 2 * cfg.num_pairs + 2 * qi;
                assert_eq!(inst.tokens[base], QUERY);
                let key = inst.tokens[base + 1];
                let (_, v) = written.iter().find(|(k, _)| *k == key).expect("queried key written");
                assert!(inst.mask[base + 1]);
                assert_eq!(inst.targets[base + 1], *v);
                assert!(queried.insert(key), "queries must be distinct");
            }

            // Tail is padding; mask count matches the query count.
            for t in 2 * cfg.num_pairs + 2 * cfg.num_queries..cfg.seq_len {
                assert_eq!(inst.tokens[t], PAD);
            }
            assert_eq!(inst.mask.iter().filter(|&&m| m).count(), cfg.num_queries);
            assert_eq!(
                inst.targets.iter().zip(&inst.mask).filter(|(_, &m)| !m).all(|(&t, _)| t == PAD),
                true
            );
        }
    }

    #[test]
    fn derived_supervision_matches_generated() {
        let cfg = MqarConfig { vocab: 32, num_pairs: 5, num_queries: 3, seq_len: 40 };
        for index in 0..50 {
            let inst = generate_instance(&cfg, 7, index).unwrap();
            let (targets, mask) = derive_supervision(&cfg, &inst.tokens).unwrap();
            assert_eq!(targets, inst.targets);
            assert_eq!(mask, inst.mask);
        }
        // A query for an unwritten key is rejected.
        let mut bad = generate_instance(&cfg, 7, 0).unwrap().tokens;
        let unwritten = {
            let written: HashSet<u16> = (0..cfg.num_pairs).map(|p| bad[2 * p]).collect();
            (2..2 + cfg.key_space() as u16).find(|k| !written.contains(k)).unwrap()
        };
        bad[2 * cfg.num_pairs + 1] = unwritten;
        assert!(derive_supervision(&cfg, &bad).is_err());
    }

    #[test]
    fn key_and_value_draws_cover_their_alphabets() {
        // Statistical audit over many instances: every key and every value
        // token should appear somewhere, queries should not always ask for
        // the same pair index.
        let cfg = MqarConfig::default();
        let mut seen_keys = HashSet::new();
        let mut seen_values = HashSet::new();
        let mut first_masked_positions = HashSet::new();
        for index in 0..500 {
            let inst = generate_instance(&cfg, 3, index).unwrap();
            for p in 0..cfg.num_pairs {
                seen_keys.insert(inst.tokens[2 * p]);
                seen_values.insert(inst.tokens[2 * p + 1]);
            }
            if let Some(p) = inst.mask.iter().position(|&m| m) {
                first_masked_positions.insert(inst.tokens[p]);
            }
        }
        assert_eq!(seen_keys.len(), cfg.key_space());
        assert_eq!(seen_values.len(), cfg.key_space());
        assert!(first_masked_positions.len() > cfg.key_space() / 2);
    }
}
