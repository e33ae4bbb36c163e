//! Deterministic workload generation: uniform or Zipfian key popularity,
//! configurable rank-1-hot skew (theta), read fraction, and per-thread
//! seeded streams.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

/// Key-popularity law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KeyDistribution {
    Uniform,
    /// Rank-r probability proportional to 1/r^theta.
    Zipfian { theta: f64 },
}

/// A reproducible benchmark workload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub distribution: KeyDistribution,
    pub record_count: u64,
    pub key_size: usize,
    pub value_size: usize,
    /// Fraction of operations that are reads, in [0, 1].
    pub read_fraction: f64,
    pub threads: usize,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if let KeyDistribution::Zipfian { theta } = self.distribution {
            if !(theta > 0.0) {
                return Err("zipfian theta must be > 0".into());
            }
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err("read fraction must be in [0, 1]".into());
        }
        if self.record_count == 0 {
            return Err("record_count must be >= 1".into());
        }
        Ok(())
    }

    /// Independent per-thread stream; streams with the same spec and thread
    /// index are identical across runs.
    pub fn stream(&self, thread: usize) -> OpStream {
        let rng = ChaCha8Rng::seed_from_u64(self.seed ^ (0x9e37_79b9_7f4a_7c15u64 ^ thread as u64));
        let sampler = match self.distribution {
            KeyDistribution::Uniform => KeySampler::Uniform,
            KeyDistribution::Zipfian { theta } => KeySampler::Zipfian(
                Zipf::new(self.record_count, theta).expect("valid zipf parameters"),
            ),
        };
        OpStream {
            rng,
            sampler,
            record_count: self.record_count,
            read_fraction: self.read_fraction,
        }
    }
}

enum KeySampler {
    Uniform,
    Zipfian(Zipf<f64>),
}

/// One operation against a keyed store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyedOp {
    Read { key: u64 },
    Upsert { key: u64 },
}

impl KeyedOp {
    pub fn key(&self) -> u64 {
        match self {
            KeyedOp::Read { key } | KeyedOp::Upsert { key } => *key,
        }
    }
}

/// Seeded operation stream over `[0, record_count)` keys.
pub struct OpStream {
    rng: ChaCha8Rng,
    sampler: KeySampler,
    record_count: u64,
    read_fraction: f64,
}

impl OpStream {
    pub fn next_key(&mut self) -> u64 {
        match &self.sampler {
            KeySampler::Uniform => self.rng.gen_range(0..self.record_count),
            // the sampler draws ranks starting at 1; key = rank - 1, so key
            // 0 is the hottest
            KeySampler::Zipfian(z) => (z.sample(&mut self.rng) as u64 - 1).min(self.record_count - 1),
        }
    }

    pub fn next_op(&mut self) -> KeyedOp {
        let key = self.next_key();
        if self.rng.gen_bool(self.read_fraction) {
            KeyedOp::Read { key }
        } else {
            KeyedOp::Upsert { key }
        }
    }
}

/// Deterministic value bytes for a key at a version, for byte-exact
/// verification of store contents.
pub fn value_bytes(key: u64, version: u64, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    let mut x = key
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(version)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        | 1;
    for chunk in out.chunks_mut(8) {
        x ^= x >> 30;
        x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
        let bytes = x.to_le_bytes();
        let n = chunk.len();
        chunk.copy_from_slice(&bytes[..n]);
    }
    out
}

/// Fixed-width big-endian key bytes.
pub fn key_bytes(key: u64, len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    let be = key.to_be_bytes();
    let n = len.min(8);
    out[len - n..].copy_from_slice(&be[8 - n..]);
    out
}

/// Analytic Zipfian rank probabilities for small n (normalizing 1/r^theta).
pub fn zipf_probabilities(n: u64, theta: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-theta)).collect();
    let h: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / h).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dist: KeyDistribution, n: u64, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            distribution: dist,
            record_count: n,
            key_size: 8,
            value_size: 8,
            read_fraction: 1.0,
            threads: 1,
            seed,
        }
    }

    #[test]
    fn analytic_rank_probabilities_for_three_keys() {
        let p = zipf_probabilities(3, 0.99);
        assert!((p[0] - 0.543).abs() < 5e-4, "p1 {}", p[0]);
        assert!((p[1] - 0.274).abs() < 5e-4, "p2 {}", p[1]);
        assert!((p[2] - 0.183).abs() < 5e-4, "p3 {}", p[2]);
    }

    #[test]
    fn zipf_rank1_frequency_matches_analytic() {
        let mut s = spec(KeyDistribution::Zipfian { theta: 0.99 }, 100, 42).stream(0);
        let draws = 1_000_000;
        let mut count0 = 0u64;
        for _ in 0..draws {
            if s.next_key() == 0 {
                count0 += 1;
            }
        }
        let expected = zipf_probabilities(100, 0.99)[0];
        let got = count0 as f64 / draws as f64;
        assert!(
            (got - expected).abs() / expected < 0.05,
            "rank-1 frequency {got} vs analytic {expected}"
        );
    }

    #[test]
    fn uniform_frequencies_within_five_sigma() {
        let n = 100u64;
        let draws = 1_000_000u64;
        let mut s = spec(KeyDistribution::Uniform, n, 7).stream(0);
        let mut counts = vec![0u64; n as usize];
        for _ in 0..draws {
            counts[s.next_key() as usize] += 1;
        }
        let mean = draws as f64 / n as f64;
        let sigma = (draws as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
        for (k, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 5.0 * sigma,
                "key {k} count {c} outside 5 sigma of {mean}"
            );
        }
    }

    #[test]
    fn streams_are_deterministic_and_thread_independent() {
        let sp = spec(KeyDistribution::Zipfian { theta: 0.99 }, 1000, 9);
        let a: Vec<u64> = {
            let mut s = sp.stream(0);
            (0..100).map(|_| s.next_key()).collect()
        };
        let b: Vec<u64> = {
            let mut s = sp.stream(0);
            (0..100).map(|_| s.next_key()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut s = sp.stream(1);
            (0..100).map(|_| s.next_key()).collect()
        };
        assert_ne!(a, c);
    }

    #[test]
    fn value_bytes_are_stable_and_version_sensitive() {
        assert_eq!(value_bytes(5, 1, 16), value_bytes(5, 1, 16));
        assert_ne!(value_bytes(5, 1, 16), value_bytes(5, 2, 16));
        assert_eq!(key_bytes(0x0102, 8), vec![0, 0, 0, 0, 0, 0, 1, 2]);
    }
}
