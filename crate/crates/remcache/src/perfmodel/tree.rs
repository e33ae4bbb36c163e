//! The five-level configuration tree: structure, counting, and pre-order
//! leaf enumeration.
//!
//! Constraints enforced by construction:
//! - server threads range over 0..=C, and under s = 0 the batch size has the
//!   single child b = 1 (batching needs server threads);
//! - under s = S' >= 1 the client threads range over S'..=C (s <= c), and
//!   under s = 0 over 1..=C;
//! - queue depth ranges over q_min..=q_max;
//! - child edges are in increasing parameter order, so the pre-order leaf
//!   sequence is non-decreasing in s, then in c within each s: cheaper
//!   configurations come first.

use crate::types::{RdmaConfig, SearchSpaceBounds};

/// Total number of configurations under the tree constraints:
/// sum over c of (c+1)*B*Qv minus C*(B-1)*Qv, with Qv the number of
/// admissible queue-depth values.
pub fn count_configs(bounds: &SearchSpaceBounds) -> u64 {
    let c = bounds.c_max as u64;
    let b = bounds.b_max as u64;
    let qv = bounds.q_values() as u64;
    let sum: u64 = (1..=c).map(|ci| (ci + 1) * b * qv).sum();
    sum - c * (b - 1) * qv
}

/// Index structure over the configuration tree. Leaves are addressed by a
/// dense pre-order index so models can store them in a flat array.
#[derive(Debug, Clone)]
pub struct ConfigTree {
    pub bounds: SearchSpaceBounds,
    /// First leaf index of each s block, indexed by s; last entry is the
    /// total leaf count.
    s_base: Vec<u64>,
}

impl ConfigTree {
    /// Builds the tree structure for the given bounds (leaves empty).
    pub fn new(bounds: SearchSpaceBounds) -> Self {
        let c_max = bounds.c_max as u64;
        let b_max = bounds.b_max as u64;
        let qv = bounds.q_values() as u64;
        let mut s_base = Vec::with_capacity(bounds.c_max as usize + 2);
        let mut acc = 0u64;
        for s in 0..=c_max {
            s_base.push(acc);
            acc += if s == 0 {
                c_max * qv
            } else {
                (c_max - s + 1) * b_max * qv
            };
        }
        s_base.push(acc);
        ConfigTree { bounds, s_base }
    }

    pub fn leaf_count(&self) -> u64 {
        *self.s_base.last().unwrap()
    }

    /// Admissible client-thread values under a given s.
    pub fn c_range(&self, s: u32) -> std::ops::RangeInclusive<u32> {
        s.max(1)..=self.bounds.c_max
    }

    /// Admissible batch sizes under a given s.
    pub fn b_range(&self, s: u32) -> std::ops::RangeInclusive<u32> {
        if s == 0 {
            1..=1
        } else {
            1..=self.bounds.b_max
        }
    }

    pub fn q_range(&self) -> std::ops::RangeInclusive<u32> {
        self.bounds.q_min..=self.bounds.q_max
    }

    /// Dense pre-order index of a configuration's leaf.
    pub fn leaf_index(&self, cfg: &RdmaConfig) -> u64 {
        let s = cfg.server_threads as u64;
        let c = cfg.client_threads as u64;
        let b = cfg.batch_size as u64;
        let q = cfg.queue_depth as u64;
        let qv = self.bounds.q_values() as u64;
        let b_max = self.bounds.b_max as u64;
        let base = self.s_base[s as usize];
        let q_off = q - self.bounds.q_min as u64;
        if s == 0 {
            base + (c - 1) * qv + q_off
        } else {
            base + (((c - s) * b_max) + (b - 1)) * qv + q_off
        }
    }

    /// Configuration of a leaf by dense index; inverse of `leaf_index`.
    pub fn config_at(&self, index: u64) -> RdmaConfig {
        debug_assert!(index < self.leaf_count());
        // binary search the s block
        let s = match self.s_base.binary_search(&index) {
            Ok(mut i) => {
                // land on the first block that starts at this index and is
                // non-empty (blocks are never empty here)
                while i + 1 < self.s_base.len() && self.s_base[i + 1] == index {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        } as u32;
        let qv = self.bounds.q_values() as u64;
        let b_max = self.bounds.b_max as u64;
        let off = index - self.s_base[s as usize];
        let (c, b, q_off) = if s == 0 {
            ((off / qv) + 1, 1, off % qv)
        } else {
            let per_c = b_max * qv;
            let c = s as u64 + off / per_c;
            let rem = off % per_c;
            (c, rem / qv + 1, rem % qv)
        };
        RdmaConfig {
            client_threads: c as u32,
            server_threads: s,
            batch_size: b as u32,
            queue_depth: self.bounds.q_min + q_off as u32,
        }
    }

    /// Pre-order iteration over all leaf configurations.
    pub fn preorder(&self) -> impl Iterator<Item = RdmaConfig> + '_ {
        let bounds = self.bounds;
        (0..=bounds.c_max).flat_map(move |s| {
            self.c_range(s).flat_map(move |c| {
                self.b_range(s).flat_map(move |b| {
                    self.q_range().map(move |q| RdmaConfig {
                        client_threads: c,
                        server_threads: s,
                        batch_size: b,
                        queue_depth: q,
                    })
                })
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(c: u32, b: u32, q_min: u32, q_max: u32) -> SearchSpaceBounds {
        SearchSpaceBounds::with_b_max(c, b, q_min, q_max).unwrap()
    }

    /// Enumerates every tuple admitted by the structural constraints.
    fn brute_force(bounds: &SearchSpaceBounds) -> Vec<RdmaConfig> {
        let mut out = Vec::new();
        for s in 0..=bounds.c_max {
            for c in s.max(1)..=bounds.c_max {
                let b_hi = if s == 0 { 1 } else { bounds.b_max };
                for b in 1..=b_hi {
                    for q in bounds.q_min..=bounds.q_max {
                        out.push(RdmaConfig {
                            client_threads: c,
                            server_threads: s,
                            batch_size: b,
                            queue_depth: q,
                        });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn count_matches_enumerated_examples() {
        assert_eq!(count_configs(&bounds(1, 1, 1, 1)), 2);
        assert_eq!(count_configs(&bounds(2, 2, 1, 2)), 16);
        assert_eq!(count_configs(&bounds(1, 2, 1, 1)), 3);
    }

    #[test]
    fn count_matches_brute_force_small_sweep() {
        for c in 1..=4 {
            for b in 1..=4 {
                for q_min in 1..=2 {
                    for qv in 1..=3 {
                        let bd = bounds(c, b, q_min, q_min + qv - 1);
                        assert_eq!(
                            count_configs(&bd),
                            brute_force(&bd).len() as u64,
                            "bounds {bd:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn preorder_matches_brute_force_order_and_indexing() {
        let bd = bounds(3, 4, 2, 4);
        let tree = ConfigTree::new(bd);
        let leaves: Vec<RdmaConfig> = tree.preorder().collect();
        assert_eq!(leaves, brute_force(&bd));
        assert_eq!(leaves.len() as u64, tree.leaf_count());
        assert_eq!(tree.leaf_count(), count_configs(&bd));
        for (i, cfg) in leaves.iter().enumerate() {
            assert_eq!(tree.leaf_index(cfg), i as u64, "cfg {cfg}");
            assert_eq!(&tree.config_at(i as u64), cfg);
        }
    }

    #[test]
    fn first_and_last_leaves_are_the_cost_corners() {
        let bd = bounds(4, 8, 2, 6);
        let tree = ConfigTree::new(bd);
        let first = tree.config_at(0);
        assert_eq!((first.client_threads, first.server_threads), (1, 0));
        assert_eq!((first.batch_size, first.queue_depth), (1, 2));
        let last = tree.config_at(tree.leaf_count() - 1);
        assert_eq!((last.client_threads, last.server_threads), (4, 4));
        assert_eq!((last.batch_size, last.queue_depth), (8, 6));
    }

    #[test]
    fn preorder_is_sorted_by_s_then_c() {
        let bd = bounds(4, 3, 1, 2);
        let tree = ConfigTree::new(bd);
        let mut prev: Option<RdmaConfig> = None;
        for cfg in tree.preorder() {
            if let Some(p) = prev {
                assert!(
                    cfg.server_threads > p.server_threads
                        || (cfg.server_threads == p.server_threads
                            && cfg.client_threads >= p.client_threads)
                );
            }
            prev = Some(cfg);
        }
    }
}
