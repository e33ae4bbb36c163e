//! The measurement grid behind offline modeling: parameter values are
//! measured only at powers of two (plus the bounds' extremes), throughput
//! plateaus terminate further measurement along the plateauing parameter,
//! and everything between grid points is filled by multilinear
//! interpolation in raw parameter coordinates.

use crate::perfmodel::oracle::PerfOracle;
use crate::perfmodel::PerfPoint;
use crate::types::{NetworkDistance, RdmaConfig, SearchSpaceBounds};

/// Powers of two within `[lo, hi]`, with both endpoints included.
fn pow2_axis(lo: u32, hi: u32) -> Vec<u32> {
    debug_assert!(lo <= hi);
    let mut vals = vec![lo];
    let mut p = 1u32;
    while p <= hi {
        if p > lo {
            vals.push(p);
        }
        match p.checked_mul(2) {
            Some(next) => p = next,
            None => break,
        }
    }
    if *vals.last().unwrap() != hi {
        vals.push(hi);
    }
    vals
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellState {
    Measured,
    /// Copied flat from the last measured value after early termination.
    FlatFilled,
    /// Oracle failed twice; filled from neighbors afterwards.
    Empty,
}

/// Measured (and flat-filled) profiles over the power-of-two lattice.
#[derive(Debug, Clone)]
pub struct MeasurementGrid {
    /// Axis values for s, c, b, q in that order.
    axes: [Vec<u32>; 4],
    points: Vec<PerfPoint>,
    states: Vec<CellState>,
    /// Successful oracle measurements.
    pub measured_count: u64,
    /// Total oracle invocations including retries.
    pub oracle_calls: u64,
}

const EMPTY_POINT: PerfPoint = PerfPoint {
    read_latency_us: f64::NAN,
    write_latency_us: f64::NAN,
    read_mops: f64::NAN,
    write_mops: f64::NAN,
};

impl MeasurementGrid {
    /// Measures the lattice for `bounds` through `oracle`, applying early
    /// termination: when throughput stops improving as one parameter grows
    /// (all others fixed), larger values of that parameter are filled with
    /// the last measured profile instead of being measured.
    ///
    /// The lattice is the full cross product of the four axes; corners that
    /// are not valid tree configurations (s > c, or b > 1 with s = 0) are
    /// still evaluated so that every leaf lies inside a complete cell. The
    /// oracle is total over these points: analytic oracles evaluate them
    /// directly and measurement-backed oracles clamp to the nearest
    /// equivalent runnable configuration.
    pub fn measure(
        bounds: &SearchSpaceBounds,
        oracle: &mut dyn PerfOracle,
        record_size: u64,
        distance: NetworkDistance,
        early_termination: bool,
    ) -> Self {
        let axes = [
            {
                let mut s_axis = vec![0];
                s_axis.extend(pow2_axis(1, bounds.c_max));
                s_axis.dedup();
                s_axis
            },
            pow2_axis(1, bounds.c_max),
            pow2_axis(1, bounds.b_max),
            pow2_axis(bounds.q_min, bounds.q_max),
        ];
        let dims: [usize; 4] = [axes[0].len(), axes[1].len(), axes[2].len(), axes[3].len()];
        let total = dims.iter().product::<usize>();
        let mut grid = MeasurementGrid {
            axes,
            points: vec![EMPTY_POINT; total],
            states: vec![CellState::Empty; total],
            measured_count: 0,
            oracle_calls: 0,
        };
        let mut term = vec![0u8; total];

        let mut idx = [0usize; 4];
        for flat in 0..total {
            // unflatten in row-major order (s outermost, q innermost)
            let mut rem = flat;
            for a in (0..4).rev() {
                idx[a] = rem % dims[a];
                rem /= dims[a];
            }
            // propagate early termination flat fills
            let mut filled = false;
            if early_termination {
                for a in 0..4 {
                    if idx[a] == 0 {
                        continue;
                    }
                    let pred = flat - grid.stride(a);
                    if term[pred] & (1 << a) != 0 {
                        grid.points[flat] = grid.points[pred];
                        grid.states[flat] = CellState::FlatFilled;
                        term[flat] |= 1 << a;
                        filled = true;
                        break;
                    }
                }
            }
            if !filled {
                let cfg = grid.lattice_config(&idx);
                match Self::measure_once(oracle, &cfg, record_size, distance, &mut grid.oracle_calls)
                {
                    Some(p) => {
                        grid.points[flat] = p;
                        grid.states[flat] = CellState::Measured;
                        grid.measured_count += 1;
                    }
                    None => {
                        grid.states[flat] = CellState::Empty;
                    }
                }
            }
            // declare termination along any axis whose growth stopped
            // improving throughput
            if early_termination && grid.states[flat] == CellState::Measured {
                for a in 0..4 {
                    if idx[a] == 0 {
                        continue;
                    }
                    let pred = flat - grid.stride(a);
                    if grid.states[pred] == CellState::Empty {
                        continue;
                    }
                    let cur = &grid.points[flat];
                    let before = &grid.points[pred];
                    let improved =
                        cur.read_mops > before.read_mops || cur.write_mops > before.write_mops;
                    if !improved {
                        term[flat] |= 1 << a;
                    }
                }
            }
        }
        grid.fill_empty_cells();
        grid
    }

    fn measure_once(
        oracle: &mut dyn PerfOracle,
        cfg: &RdmaConfig,
        record_size: u64,
        distance: NetworkDistance,
        calls: &mut u64,
    ) -> Option<PerfPoint> {
        for _ in 0..2 {
            *calls += 1;
            if let Ok(p) = oracle.evaluate(cfg, record_size, distance) {
                if p.is_finite() {
                    return Some(p);
                }
            }
        }
        None
    }

    fn stride(&self, axis: usize) -> usize {
        self.axes[axis + 1..].iter().map(Vec::len).product::<usize>().max(1)
    }

    fn flat(&self, idx: &[usize; 4]) -> usize {
        let mut f = 0;
        for a in 0..4 {
            f = f * self.axes[a].len() + idx[a];
        }
        f
    }

    /// The (possibly constraint-violating) lattice configuration at an
    /// index vector.
    fn lattice_config(&self, idx: &[usize; 4]) -> RdmaConfig {
        RdmaConfig {
            server_threads: self.axes[0][idx[0]],
            client_threads: self.axes[1][idx[1]],
            batch_size: self.axes[2][idx[2]],
            queue_depth: self.axes[3][idx[3]],
        }
    }

    /// Replaces empty cells with the linear interpolation of their nearest
    /// non-empty neighbors along the innermost axis that has any, so later
    /// interpolation never sees NaNs.
    fn fill_empty_cells(&mut self) {
        let dims: [usize; 4] = [
            self.axes[0].len(),
            self.axes[1].len(),
            self.axes[2].len(),
            self.axes[3].len(),
        ];
        let empties: Vec<usize> = (0..self.points.len())
            .filter(|&f| self.states[f] == CellState::Empty)
            .collect();
        for flat in empties {
            let mut idx = [0usize; 4];
            let mut rem = flat;
            for a in (0..4).rev() {
                idx[a] = rem % dims[a];
                rem /= dims[a];
            }
            'axes: for a in (0..4).rev() {
                let stride = self.stride(a);
                let mut below = None;
                let mut above = None;
                for i in (0..idx[a]).rev() {
                    let f = flat - (idx[a] - i) * stride;
                    if self.states[f] != CellState::Empty {
                        below = Some((self.axes[a][i] as f64, self.points[f]));
                        break;
                    }
                }
                for i in idx[a] + 1..dims[a] {
                    let f = flat + (i - idx[a]) * stride;
                    if self.states[f] != CellState::Empty {
                        above = Some((self.axes[a][i] as f64, self.points[f]));
                        break;
                    }
                }
                let x = self.axes[a][idx[a]] as f64;
                let filled = match (below, above) {
                    (Some((x0, p0)), Some((x1, p1))) => {
                        let w = (x - x0) / (x1 - x0);
                        Some(lerp_point(&p0, &p1, w))
                    }
                    (Some((_, p)), None) | (None, Some((_, p))) => Some(p),
                    (None, None) => None,
                };
                if let Some(p) = filled {
                    self.points[flat] = p;
                    self.states[flat] = CellState::FlatFilled;
                    break 'axes;
                }
            }
        }
    }

    /// True when the cell for an exactly-on-grid configuration was actually
    /// measured (not flat-filled or recovered from a failure).
    pub fn is_measured_at(&self, cfg: &RdmaConfig) -> bool {
        let coords = [
            cfg.server_threads,
            cfg.client_threads,
            cfg.batch_size,
            cfg.queue_depth,
        ];
        let mut idx = [0usize; 4];
        for a in 0..4 {
            match self.axes[a].binary_search(&coords[a]) {
                Ok(i) => idx[a] = i,
                Err(_) => return false,
            }
        }
        self.states[self.flat(&idx)] == CellState::Measured
    }

    /// Multilinear interpolation of the profile at an arbitrary in-bounds
    /// configuration; exact at measured grid points.
    pub fn interpolate(&self, cfg: &RdmaConfig) -> PerfPoint {
        let coords = [
            cfg.server_threads,
            cfg.client_threads,
            cfg.batch_size,
            cfg.queue_depth,
        ];
        let mut lo = [0usize; 4];
        let mut hi = [0usize; 4];
        let mut w = [0f64; 4];
        for a in 0..4 {
            let (l, h, weight) = bracket(&self.axes[a], coords[a]);
            lo[a] = l;
            hi[a] = h;
            w[a] = weight;
        }
        let mut out = PerfPoint {
            read_latency_us: 0.0,
            write_latency_us: 0.0,
            read_mops: 0.0,
            write_mops: 0.0,
        };
        for mask in 0..16u32 {
            let mut weight = 1.0;
            let mut idx = [0usize; 4];
            for a in 0..4 {
                if mask & (1 << a) != 0 {
                    weight *= w[a];
                    idx[a] = hi[a];
                } else {
                    weight *= 1.0 - w[a];
                    idx[a] = lo[a];
                }
            }
            if weight == 0.0 {
                continue;
            }
            let p = &self.points[self.flat(&idx)];
            out.read_latency_us += weight * p.read_latency_us;
            out.write_latency_us += weight * p.write_latency_us;
            out.read_mops += weight * p.read_mops;
            out.write_mops += weight * p.write_mops;
        }
        out
    }

    /// Per-axis bracket tables for fast repeated interpolation over a
    /// known value range (used when filling every tree leaf).
    pub fn bracket_table(&self, axis: usize, max_value: u32) -> Vec<(usize, usize, f64)> {
        (0..=max_value as usize)
            .map(|v| bracket(&self.axes[axis], v as u32))
            .collect()
    }

    pub fn corner_value(&self, idx: &[usize; 4]) -> &PerfPoint {
        &self.points[self.flat(idx)]
    }
}

fn lerp_point(p0: &PerfPoint, p1: &PerfPoint, w: f64) -> PerfPoint {
    PerfPoint {
        read_latency_us: p0.read_latency_us + (p1.read_latency_us - p0.read_latency_us) * w,
        write_latency_us: p0.write_latency_us + (p1.write_latency_us - p0.write_latency_us) * w,
        read_mops: p0.read_mops + (p1.read_mops - p0.read_mops) * w,
        write_mops: p0.write_mops + (p1.write_mops - p0.write_mops) * w,
    }
}

/// Bracketing grid indices and interpolation weight for a raw value.
fn bracket(axis: &[u32], value: u32) -> (usize, usize, f64) {
    match axis.binary_search(&value) {
        Ok(i) => (i, i, 0.0),
        Err(i) => {
            // clamp outside the axis (only reachable for lattice-invalid
            // coordinates like s > c slices; leaves are always in range)
            if i == 0 {
                (0, 0, 0.0)
            } else if i >= axis.len() {
                (axis.len() - 1, axis.len() - 1, 0.0)
            } else {
                let x0 = axis[i - 1] as f64;
                let x1 = axis[i] as f64;
                (i - 1, i, (value as f64 - x0) / (x1 - x0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::oracle::{AffineOracle, OracleError, SyntheticOracle};

    #[test]
    fn pow2_axis_includes_extremes() {
        assert_eq!(pow2_axis(1, 30), vec![1, 2, 4, 8, 16, 30]);
        assert_eq!(pow2_axis(4, 16), vec![4, 8, 16]);
        assert_eq!(pow2_axis(3, 3), vec![3]);
        assert_eq!(pow2_axis(1, 1), vec![1]);
        assert_eq!(pow2_axis(5, 6), vec![5, 6]);
    }

    #[test]
    fn measured_count_is_polylog() {
        let bounds = SearchSpaceBounds::with_b_max(30, 512, 4, 16).unwrap();
        let mut oracle = SyntheticOracle::default();
        let grid = MeasurementGrid::measure(&bounds, &mut oracle, 8, NetworkDistance::IntraRack, true);
        // s axis: {0,1,2,4,8,16,30} = 7; c: {1,2,4,8,16,30} = 6;
        // b: {1..512 pow2} = 10; q: {4,8,16} = 3  => 1260 measurements
        assert_eq!(grid.measured_count, 7 * 6 * 10 * 3);
        assert!(grid.measured_count < 2000);
    }

    #[test]
    fn interpolation_exact_on_affine() {
        let bounds = SearchSpaceBounds::with_b_max(8, 8, 1, 8).unwrap();
        let mut oracle = AffineOracle::new([3.0, 0.5, 0.25, 0.1, 0.8], [1.0, 1.5, 0.75, 0.3, 0.2]);
        let grid =
            MeasurementGrid::measure(&bounds, &mut oracle, 8, NetworkDistance::IntraRack, false);
        let tree = crate::perfmodel::ConfigTree::new(bounds);
        for cfg in tree.preorder() {
            let got = grid.interpolate(&cfg);
            let want = oracle.evaluate(&cfg, 8, NetworkDistance::IntraRack).unwrap();
            assert!(
                (got.read_latency_us - want.read_latency_us).abs()
                    <= 1e-9 * want.read_latency_us.abs(),
                "latency mismatch at {cfg}: {got:?} vs {want:?}"
            );
            assert!(
                (got.read_mops - want.read_mops).abs() <= 1e-9 * want.read_mops.abs(),
                "throughput mismatch at {cfg}"
            );
        }
    }

    #[test]
    fn midpoint_is_two_neighbor_mean() {
        let bounds = SearchSpaceBounds::with_b_max(1, 1, 1, 8).unwrap();
        let mut oracle = SyntheticOracle::default();
        let grid =
            MeasurementGrid::measure(&bounds, &mut oracle, 8, NetworkDistance::IntraRack, false);
        let at = |q| grid.interpolate(&RdmaConfig::new(1, 1, 1, q).unwrap());
        let mid = at(3);
        let lo = at(2);
        let hi = at(4);
        assert!((mid.read_latency_us - 0.5 * (lo.read_latency_us + hi.read_latency_us)).abs() < 1e-12);
        assert!((mid.read_mops - 0.5 * (lo.read_mops + hi.read_mops)).abs() < 1e-12);
    }

    /// A plateau in throughput along c stops further measurement along c.
    struct PlateauOracle {
        plateau_at: u32,
        calls: Vec<RdmaConfig>,
    }

    impl PerfOracle for PlateauOracle {
        fn evaluate(
            &mut self,
            cfg: &RdmaConfig,
            _record_size: u64,
            _distance: NetworkDistance,
        ) -> Result<PerfPoint, OracleError> {
            self.calls.push(*cfg);
            let c_eff = cfg.client_threads.min(self.plateau_at) as f64;
            Ok(PerfPoint::splat(
                1.0 + cfg.client_threads as f64
                    + cfg.server_threads as f64
                    + cfg.batch_size as f64
                    + cfg.queue_depth as f64,
                c_eff
                    * (1.0 + cfg.server_threads as f64)
                    * (cfg.batch_size as f64)
                    * (cfg.queue_depth as f64),
            ))
        }
    }

    #[test]
    fn early_termination_skips_past_plateau() {
        let bounds = SearchSpaceBounds::with_b_max(16, 2, 2, 2).unwrap();
        let mut oracle = PlateauOracle {
            plateau_at: 4,
            calls: Vec::new(),
        };
        let grid = MeasurementGrid::measure(&bounds, &mut oracle, 8, NetworkDistance::IntraRack, true);
        // throughput flattens from c=4 to c=8 (both 4*...), so c=16 must
        // never be measured with the other parameters fixed
        let measured_c16 = oracle
            .calls
            .iter()
            .filter(|cfg| cfg.client_threads == 16)
            .count();
        assert_eq!(measured_c16, 0, "c=16 should be flat-filled, not measured");
        // flat fill: value at c=16 equals the last measured value at c=8
        let at8 = grid.interpolate(&RdmaConfig::new(8, 2, 2, 2).unwrap());
        let at16 = grid.interpolate(&RdmaConfig::new(16, 2, 2, 2).unwrap());
        assert_eq!(at8.read_mops, at16.read_mops);
        assert_eq!(at8.read_latency_us, at16.read_latency_us);
    }

    #[test]
    fn flaky_point_is_recovered_from_neighbors() {
        use crate::perfmodel::oracle::FlakyOracle;
        let bounds = SearchSpaceBounds::with_b_max(1, 1, 1, 8).unwrap();
        let mut oracle = FlakyOracle {
            inner: AffineOracle::new([1.0, 0.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0, 1.0]),
            fail_at: RdmaConfig::new(1, 0, 1, 4).unwrap(),
            failures_left: 2,
        };
        let grid =
            MeasurementGrid::measure(&bounds, &mut oracle, 8, NetworkDistance::IntraRack, false);
        // q=4 at s=0 failed twice; the fill interpolates the q neighbors 2
        // and 8 linearly, which recovers the affine profile exactly, and the
        // cell is no longer counted as measured
        let p = grid.interpolate(&RdmaConfig::new(1, 0, 1, 4).unwrap());
        assert!(p.is_finite());
        assert!(!grid.is_measured_at(&RdmaConfig::new(1, 0, 1, 4).unwrap()));
        assert!(grid.is_measured_at(&RdmaConfig::new(1, 0, 1, 2).unwrap()));
    }
}
