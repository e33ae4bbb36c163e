//! The built performance model: one profile per tree leaf, with measured
//! grid points exact and everything else interpolated, plus the text file
//! format used to ship models between the modeling tool and the manager.

use std::io::{BufRead, Write};

use crate::perfmodel::grid::MeasurementGrid;
use crate::perfmodel::oracle::PerfOracle;
use crate::perfmodel::tree::ConfigTree;
use crate::perfmodel::PerfPoint;
use crate::types::{CoreError, NetworkDistance, RdmaConfig, SearchSpaceBounds, Slo};

/// Provenance of one leaf value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointSource {
    Measured,
    Interpolated,
}

impl PointSource {
    fn as_str(self) -> &'static str {
        match self {
            PointSource::Measured => "measured",
            PointSource::Interpolated => "interpolated",
        }
    }
}

/// Which lattice the offline build measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// Powers of two plus extremes; the remaining leaves interpolate.
    PowersOfTwo,
    /// Measure every leaf. Only sensible for small bounds; used where a
    /// model must agree with its oracle exactly at every configuration.
    Exhaustive,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub grid: GridMode,
    pub early_termination: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            grid: GridMode::PowersOfTwo,
            early_termination: true,
        }
    }
}

/// Counters from one offline build.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModelBuildStats {
    pub measured: u64,
    pub oracle_calls: u64,
    pub interpolated_leaves: u64,
}

/// A complete model for one (record size, distance) pair.
pub struct PerfModel {
    pub tree: ConfigTree,
    pub record_size: u64,
    pub distance: NetworkDistance,
    points: Vec<PerfPoint>,
    sources: Vec<PointSource>,
    pub stats: ModelBuildStats,
}

impl PerfModel {
    /// Offline modeling: measures the grid through the oracle and fills
    /// every leaf of the configuration tree.
    pub fn build(
        bounds: SearchSpaceBounds,
        oracle: &mut dyn PerfOracle,
        record_size: u64,
        distance: NetworkDistance,
        options: BuildOptions,
    ) -> Self {
        let tree = ConfigTree::new(bounds);
        match options.grid {
            GridMode::PowersOfTwo => {
                let grid = MeasurementGrid::measure(
                    &bounds,
                    oracle,
                    record_size,
                    distance,
                    options.early_termination,
                );
                let n = tree.leaf_count() as usize;
                let mut points = Vec::with_capacity(n);
                let mut sources = Vec::with_capacity(n);
                for cfg in tree.preorder() {
                    points.push(grid.interpolate(&cfg));
                    sources.push(if grid.is_measured_at(&cfg) {
                        PointSource::Measured
                    } else {
                        PointSource::Interpolated
                    });
                }
                let interpolated_leaves =
                    sources.iter().filter(|s| **s == PointSource::Interpolated).count() as u64;
                PerfModel {
                    tree,
                    record_size,
                    distance,
                    points,
                    sources,
                    stats: ModelBuildStats {
                        measured: grid.measured_count,
                        oracle_calls: grid.oracle_calls,
                        interpolated_leaves,
                    },
                }
            }
            GridMode::Exhaustive => {
                let n = tree.leaf_count() as usize;
                let mut points = Vec::with_capacity(n);
                let mut sources = Vec::with_capacity(n);
                let mut calls = 0u64;
                let mut measured = 0u64;
                for cfg in tree.preorder() {
                    calls += 1;
                    let p = oracle
                        .evaluate(&cfg, record_size, distance)
                        .ok()
                        .filter(PerfPoint::is_finite)
                        .or_else(|| {
                            calls += 1;
                            oracle.evaluate(&cfg, record_size, distance).ok()
                        })
                        .expect("exhaustive build requires a total oracle");
                    measured += 1;
                    points.push(p);
                    sources.push(PointSource::Measured);
                }
                PerfModel {
                    tree,
                    record_size,
                    distance,
                    points,
                    sources,
                    stats: ModelBuildStats {
                        measured,
                        oracle_calls: calls,
                        interpolated_leaves: 0,
                    },
                }
            }
        }
    }

    pub fn bounds(&self) -> &SearchSpaceBounds {
        &self.tree.bounds
    }

    pub fn leaf_count(&self) -> u64 {
        self.tree.leaf_count()
    }

    /// The modeled profile of a configuration (leaf lookup; measured points
    /// return their measured value exactly).
    pub fn interpolate(&self, cfg: &RdmaConfig) -> &PerfPoint {
        &self.points[self.tree.leaf_index(cfg) as usize]
    }

    pub fn point_at(&self, leaf_index: u64) -> &PerfPoint {
        &self.points[leaf_index as usize]
    }

    pub fn source(&self, cfg: &RdmaConfig) -> PointSource {
        self.sources[self.tree.leaf_index(cfg) as usize]
    }

    /// Whether a leaf profile satisfies both latency ceilings.
    pub fn meets_latency(point: &PerfPoint, slo: &Slo) -> bool {
        point.read_latency_us <= slo.read_latency_max_us
            && point.write_latency_us <= slo.write_latency_max_us
    }

    /// Whether a leaf profile satisfies both throughput floors.
    pub fn meets_throughput(point: &PerfPoint, slo: &Slo) -> bool {
        point.read_mops >= slo.read_mops_min && point.write_mops >= slo.write_mops_min
    }

    pub fn satisfies(point: &PerfPoint, slo: &Slo) -> bool {
        Self::meets_latency(point, slo) && Self::meets_throughput(point, slo)
    }

    /// Observed extremes across all leaves, handy for drawing feasible
    /// objectives: ((min,max) read latency, (min,max) read mops).
    pub fn profile_ranges(&self) -> ((f64, f64), (f64, f64)) {
        let mut lat = (f64::INFINITY, f64::NEG_INFINITY);
        let mut thr = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &self.points {
            lat.0 = lat.0.min(p.read_latency_us);
            lat.1 = lat.1.max(p.read_latency_us);
            thr.0 = thr.0.min(p.read_mops);
            thr.1 = thr.1.max(p.read_mops);
        }
        (lat, thr)
    }

    /// Writes the model as text: a header line then one row per leaf in
    /// pre-order.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "c,s,b,q,read_lat_us,write_lat_us,read_mops,write_mops,source"
        )?;
        for (i, cfg) in self.tree.preorder().enumerate() {
            let p = &self.points[i];
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                cfg.client_threads,
                cfg.server_threads,
                cfg.batch_size,
                cfg.queue_depth,
                p.read_latency_us,
                p.write_latency_us,
                p.read_mops,
                p.write_mops,
                self.sources[i].as_str()
            )?;
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)
    }

    /// Reads a model back from its text form. The record size and distance
    /// are not part of the format; callers that need them keep them beside
    /// the file (the manager keys models by file name).
    pub fn read_from(r: impl BufRead) -> Result<Self, CoreError> {
        let bad = |why: &str| CoreError::InvalidValue {
            what: "model_file",
            why: why.to_string(),
        };
        let mut rows: Vec<(RdmaConfig, PerfPoint, PointSource)> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| bad(&format!("read error: {e}")))?;
            if lineno == 0 {
                if !line.starts_with("c,s,b,q,") {
                    return Err(bad("missing header"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 9 {
                return Err(bad(&format!("line {lineno}: expected 9 columns")));
            }
            let num =
                |s: &str| -> Result<f64, CoreError> { s.parse().map_err(|_| bad("bad number")) };
            let cfg = RdmaConfig {
                client_threads: num(parts[0])? as u32,
                server_threads: num(parts[1])? as u32,
                batch_size: num(parts[2])? as u32,
                queue_depth: num(parts[3])? as u32,
            };
            let point = PerfPoint {
                read_latency_us: num(parts[4])?,
                write_latency_us: num(parts[5])?,
                read_mops: num(parts[6])?,
                write_mops: num(parts[7])?,
            };
            let source = match parts[8] {
                "measured" => PointSource::Measured,
                "interpolated" => PointSource::Interpolated,
                other => return Err(bad(&format!("unknown source {other}"))),
            };
            rows.push((cfg, point, source));
        }
        if rows.is_empty() {
            return Err(bad("no rows"));
        }
        let c_max = rows.iter().map(|(c, ..)| c.client_threads).max().unwrap();
        let b_max = rows.iter().map(|(c, ..)| c.batch_size).max().unwrap();
        let q_min = rows.iter().map(|(c, ..)| c.queue_depth).min().unwrap();
        let q_max = rows.iter().map(|(c, ..)| c.queue_depth).max().unwrap();
        let bounds = SearchSpaceBounds::with_b_max(c_max, b_max, q_min, q_max)
            .map_err(|e| bad(&e.to_string()))?;
        let tree = ConfigTree::new(bounds);
        if rows.len() as u64 != tree.leaf_count() {
            return Err(bad(&format!(
                "row count {} does not cover the {}-leaf tree",
                rows.len(),
                tree.leaf_count()
            )));
        }
        let n = tree.leaf_count() as usize;
        let mut points = vec![
            PerfPoint {
                read_latency_us: f64::NAN,
                write_latency_us: f64::NAN,
                read_mops: f64::NAN,
                write_mops: f64::NAN
            };
            n
        ];
        let mut sources = vec![PointSource::Interpolated; n];
        for (cfg, point, source) in rows {
            cfg.validate().map_err(|e| bad(&e.to_string()))?;
            let idx = tree.leaf_index(&cfg) as usize;
            points[idx] = point;
            sources[idx] = source;
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(bad("duplicate or missing leaves"));
        }
        let measured = sources.iter().filter(|s| **s == PointSource::Measured).count() as u64;
        Ok(PerfModel {
            tree,
            record_size: 0,
            distance: NetworkDistance::IntraRack,
            points,
            sources,
            stats: ModelBuildStats {
                measured,
                oracle_calls: 0,
                interpolated_leaves: n as u64 - measured,
            },
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CoreError> {
        let f = std::fs::File::open(path).map_err(|e| CoreError::InvalidValue {
            what: "model_file",
            why: format!("open {}: {e}", path.display()),
        })?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
