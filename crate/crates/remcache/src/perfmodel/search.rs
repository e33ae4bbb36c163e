//! Online SLO search: pre-order traversal of the configuration tree with
//! pruning. A leaf that violates a latency ceiling is invalid, and because
//! latency is non-decreasing along every edge direction, an invalid child
//! prunes its remaining siblings. The first success wins, which is the
//! configuration with the fewest server threads (and, among those, fewest
//! client threads) that satisfies the objective.

use crate::perfmodel::model::PerfModel;
use crate::perfmodel::oracle::PerfOracle;
use crate::perfmodel::PerfPoint;
use crate::types::{NetworkDistance, RdmaConfig, Slo};

/// Result of one search: the configuration (when some leaf satisfies the
/// objective) and how many leaves the traversal evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOutcome {
    pub config: Option<RdmaConfig>,
    pub leaves_visited: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Invalid,
    Continue,
    Success,
}

struct Searcher<'a> {
    model: &'a PerfModel,
    slo: &'a Slo,
    visited: u64,
    found: Option<RdmaConfig>,
}

impl<'a> Searcher<'a> {
    fn leaf(&mut self, cfg: &RdmaConfig) -> Verdict {
        self.visited += 1;
        let point = self.model.interpolate(cfg);
        if !PerfModel::meets_latency(point, self.slo) {
            return Verdict::Invalid;
        }
        if PerfModel::meets_throughput(point, self.slo) {
            self.found = Some(*cfg);
            return Verdict::Success;
        }
        Verdict::Continue
    }

    /// Visits one internal level: children left to right, returning on the
    /// first success, pruning the rest on the first invalid child.
    fn level(
        &mut self,
        values: impl Iterator<Item = u32>,
        mut visit: impl FnMut(&mut Self, u32) -> Verdict,
    ) -> Verdict {
        let mut node_result = Verdict::Invalid;
        for value in values {
            match visit(self, value) {
                Verdict::Success => return Verdict::Success,
                Verdict::Invalid => return node_result,
                Verdict::Continue => node_result = Verdict::Continue,
            }
        }
        node_result
    }

    fn run(&mut self) -> Verdict {
        let tree = &self.model.tree;
        self.level(0..=tree.bounds.c_max, |me, s| {
            me.level(tree.c_range(s), |me, c| {
                me.level(tree.b_range(s), |me, b| {
                    me.level(tree.q_range(), |me, q| {
                        me.leaf(&RdmaConfig {
                            client_threads: c,
                            server_threads: s,
                            batch_size: b,
                            queue_depth: q,
                        })
                    })
                })
            })
        })
    }
}

/// Searches the model for the cheapest configuration satisfying the SLO.
pub fn search(model: &PerfModel, slo: &Slo) -> SearchOutcome {
    let mut searcher = Searcher {
        model,
        slo,
        visited: 0,
        found: None,
    };
    let verdict = searcher.run();
    debug_assert_eq!(verdict == Verdict::Success, searcher.found.is_some());
    SearchOutcome {
        config: searcher.found,
        leaves_visited: searcher.visited,
    }
}

/// Reference scan: walks the pre-order leaf sequence linearly and returns
/// the first leaf whose profile fully satisfies the SLO. Used as the
/// equivalence oracle for the pruned search.
pub fn preorder_scan(model: &PerfModel, slo: &Slo) -> SearchOutcome {
    let mut visited = 0u64;
    for cfg in model.tree.preorder() {
        visited += 1;
        if PerfModel::satisfies(model.interpolate(&cfg), slo) {
            return SearchOutcome {
                config: Some(cfg),
                leaves_visited: visited,
            };
        }
    }
    SearchOutcome {
        config: None,
        leaves_visited: visited,
    }
}

/// Probes queue depths at (c=1, s=0, b=1) starting from one and returns the
/// largest depth where each step so far improved both latency and
/// throughput; at minimum 1.
pub fn determine_q_min(
    oracle: &mut dyn PerfOracle,
    record_size: u64,
    distance: NetworkDistance,
    q_cap: u32,
) -> u32 {
    let at = |oracle: &mut dyn PerfOracle, q: u32| -> Option<PerfPoint> {
        let cfg = RdmaConfig {
            client_threads: 1,
            server_threads: 0,
            batch_size: 1,
            queue_depth: q,
        };
        oracle.evaluate(&cfg, record_size, distance).ok()
    };
    let mut best = 1u32;
    let mut prev = match at(oracle, 1) {
        Some(p) => p,
        None => return 1,
    };
    for q in 2..=q_cap {
        let cur = match at(oracle, q) {
            Some(p) => p,
            None => break,
        };
        let improves = cur.read_latency_us < prev.read_latency_us && cur.read_mops > prev.read_mops;
        if !improves {
            break;
        }
        best = q;
        prev = cur;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::model::{BuildOptions, PerfModel};
    use crate::perfmodel::oracle::{QueueProfileOracle, RandomMonotoneOracle, SyntheticOracle};
    use crate::types::SearchSpaceBounds;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model_with(oracle: &mut dyn PerfOracle, bounds: SearchSpaceBounds) -> PerfModel {
        PerfModel::build(
            bounds,
            oracle,
            8,
            NetworkDistance::IntraRack,
            BuildOptions::default(),
        )
    }

    #[test]
    fn unsatisfiable_latency_returns_null() {
        let bounds = SearchSpaceBounds::with_b_max(4, 4, 1, 4).unwrap();
        let m = model_with(&mut SyntheticOracle::default(), bounds);
        let slo = Slo::latency_only(8, 0.001).unwrap();
        let out = search(&m, &slo);
        assert_eq!(out.config, None);
        // the very first leaf is invalid, so pruning collapses the walk
        assert!(out.leaves_visited <= 4);
    }

    #[test]
    fn loose_slo_returns_first_leaf() {
        let bounds = SearchSpaceBounds::with_b_max(4, 4, 2, 4).unwrap();
        let m = model_with(&mut SyntheticOracle::default(), bounds);
        let slo = Slo::new(8, 1e9, 1e9, 0.0, 0.0).unwrap();
        let out = search(&m, &slo);
        let cfg = out.config.unwrap();
        assert_eq!(
            (cfg.client_threads, cfg.server_threads, cfg.batch_size, cfg.queue_depth),
            (1, 0, 1, 2)
        );
        assert_eq!(out.leaves_visited, 1);
    }

    #[test]
    fn search_result_always_satisfies_slo_under_model() {
        let bounds = SearchSpaceBounds::with_b_max(6, 8, 1, 8).unwrap();
        let m = model_with(&mut SyntheticOracle::default(), bounds);
        let ((lat_lo, lat_hi), (thr_lo, thr_hi)) = m.profile_ranges();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let slo = Slo::new(
                8,
                rng.gen_range(lat_lo..=lat_hi),
                rng.gen_range(lat_lo..=lat_hi),
                rng.gen_range(thr_lo..=thr_hi),
                rng.gen_range(thr_lo..=thr_hi),
            )
            .unwrap();
            if let Some(cfg) = search(&m, &slo).config {
                assert!(PerfModel::satisfies(m.interpolate(&cfg), &slo));
            }
        }
    }

    #[test]
    fn equivalent_to_scan_on_random_monotone_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let bounds = SearchSpaceBounds::with_b_max(5, 6, 1, 4).unwrap();
            let mut oracle = RandomMonotoneOracle::new(seed, 5, 6, 4);
            let m = model_with(&mut oracle, bounds);
            let ((lat_lo, lat_hi), (thr_lo, thr_hi)) = m.profile_ranges();
            for _ in 0..50 {
                let slo = Slo::new(
                    8,
                    rng.gen_range(lat_lo..=lat_hi * 1.1),
                    rng.gen_range(lat_lo..=lat_hi * 1.1),
                    rng.gen_range(thr_lo * 0.9..=thr_hi * 1.05),
                    rng.gen_range(thr_lo * 0.9..=thr_hi * 1.05),
                )
                .unwrap();
                let pruned = search(&m, &slo);
                let scan = preorder_scan(&m, &slo);
                assert_eq!(pruned.config, scan.config, "seed {seed} slo {slo:?}");
                assert!(pruned.leaves_visited <= scan.leaves_visited);
            }
        }
    }

    // The winner has the fewest server threads, then fewest client threads,
    // among all satisfying configurations.
    #[test]
    fn minimal_cost_property() {
        let bounds = SearchSpaceBounds::with_b_max(5, 4, 1, 4).unwrap();
        let m = model_with(&mut SyntheticOracle::default(), bounds);
        let ((lat_lo, lat_hi), (thr_lo, thr_hi)) = m.profile_ranges();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let slo = Slo::new(
                8,
                rng.gen_range(lat_lo..=lat_hi),
                rng.gen_range(lat_lo..=lat_hi),
                rng.gen_range(thr_lo..=thr_hi),
                rng.gen_range(thr_lo..=thr_hi),
            )
            .unwrap();
            if let Some(cfg) = search(&m, &slo).config {
                let all_satisfying: Vec<RdmaConfig> = m
                    .tree
                    .preorder()
                    .filter(|c| PerfModel::satisfies(m.interpolate(c), &slo))
                    .collect();
                let min_s = all_satisfying.iter().map(|c| c.server_threads).min().unwrap();
                assert_eq!(cfg.server_threads, min_s);
                let min_c = all_satisfying
                    .iter()
                    .filter(|c| c.server_threads == min_s)
                    .map(|c| c.client_threads)
                    .min()
                    .unwrap();
                assert_eq!(cfg.client_threads, min_c);
            }
        }
    }

    #[test]
    fn q_min_matches_testbed_profile() {
        let mut oracle = QueueProfileOracle::testbed();
        let q = determine_q_min(&mut oracle, 8, NetworkDistance::IntraRack, 16);
        assert_eq!(q, 4);
        let p = oracle
            .evaluate(
                &RdmaConfig::new(1, 0, 1, 4).unwrap(),
                8,
                NetworkDistance::IntraRack,
            )
            .unwrap();
        assert!((p.read_latency_us - 7.1).abs() < 1e-12);
        assert!((p.read_mops - 0.74).abs() < 1e-12);
    }

    #[test]
    fn q_min_degenerate_profiles() {
        let mut worse = QueueProfileOracle::immediately_worse();
        assert_eq!(determine_q_min(&mut worse, 8, NetworkDistance::IntraRack, 16), 1);
        let mut improving = QueueProfileOracle::always_improving();
        assert_eq!(
            determine_q_min(&mut improving, 8, NetworkDistance::IntraRack, 16),
            16
        );
    }
}
