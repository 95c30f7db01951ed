//! Wall-clock scaling measurements.
//!
//! Times flat-batch message passing over grid and k-NN graphs, k-NN
//! construction, a per-image loop of the same layer, and a dense
//! softmax-attention baseline, then fits log-log slopes. All kernels run in
//! `f32` on the detached (tape-free) path with a fixed seed.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{format_list, parse_list, parse_value, unknown_key, ConfigSection};
use crate::error::{Error, Result};
use crate::gnn::sage_forward_detached;
use crate::graph::{broadcast_batch, build_grid, build_knn_for_map, BatchedGraph, GraphTopology, KnnParams};
use crate::tensor::kernels::dense_self_attention;

/// Reference latency increase of adaptive k-NN graphs over grids, in percent.
pub const REFERENCE_KNN_OVERHEAD_PCT: (f64, f64) = (15.0, 20.0);

/// A repeat shorter than this is considered timer-limited and widened.
const MIN_REPEAT_TIME: Duration = Duration::from_millis(2);

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Square map sides for grid message passing.
    pub grid_sides: Vec<usize>,
    /// Sides for the dense-attention baseline.
    pub attention_sides: Vec<usize>,
    /// Sides for k-NN construction and message passing.
    pub knn_sides: Vec<usize>,
    pub channels: usize,
    pub repeats: usize,
    pub threads: usize,
    pub knn_k: usize,
    /// Batch size of the flat-batch versus per-image comparison.
    pub loop_batch: usize,
    pub loop_side: usize,
    /// Attention points above this node count are skipped.
    pub attention_max_nodes: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            grid_sides: vec![32, 64, 128, 256],
            attention_sides: vec![8, 16, 32, 64],
            knn_sides: vec![16, 32, 64],
            channels: 32,
            repeats: 5,
            threads: 1,
            knn_k: 16,
            loop_batch: 8,
            loop_side: 32,
            attention_max_nodes: 64 * 64,
            seed: 0,
        }
    }
}

impl ConfigSection for BenchConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "grid_sides" => self.grid_sides = parse_list(key, value)?,
            "attention_sides" => self.attention_sides = parse_list(key, value)?,
            "knn_sides" => self.knn_sides = parse_list(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "repeats" => self.repeats = parse_value(key, value)?,
            "threads" => self.threads = parse_value(key, value)?,
            "knn_k" => self.knn_k = parse_value(key, value)?,
            "loop_batch" => self.loop_batch = parse_value(key, value)?,
            "loop_side" => self.loop_side = parse_value(key, value)?,
            "attention_max_nodes" => self.attention_max_nodes = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(unknown_key("bench", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("grid_sides", format_list(&self.grid_sides)),
            ("attention_sides", format_list(&self.attention_sides)),
            ("knn_sides", format_list(&self.knn_sides)),
            ("channels", self.channels.to_string()),
            ("repeats", self.repeats.to_string()),
            ("threads", self.threads.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("loop_batch", self.loop_batch.to_string()),
            ("loop_side", self.loop_side.to_string()),
            ("attention_max_nodes", self.attention_max_nodes.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.repeats < 5 {
            return Err(Error::config(format!("bench.repeats must be at least 5, got {}", self.repeats)));
        }
        if self.channels == 0 || self.threads == 0 || self.knn_k == 0 || self.loop_batch == 0 || self.loop_side == 0 {
            return Err(Error::config("bench sizes and thread count must be positive"));
        }
        for (name, sides) in [
            ("grid_sides", &self.grid_sides),
            ("attention_sides", &self.attention_sides),
            ("knn_sides", &self.knn_sides),
        ] {
            if sides.windows(2).any(|w| w[0] >= w[1]) || sides.first() == Some(&0) {
                return Err(Error::config(format!("bench.{name} must be positive and strictly increasing")));
            }
        }
        if self.grid_sides.len() < 4 {
            return Err(Error::config("bench.grid_sides needs at least 4 resolutions"));
        }
        let (lo, hi) = (self.grid_sides[0], *self.grid_sides.last().expect("non-empty"));
        if (hi * hi) < 64 * (lo * lo) {
            return Err(Error::config("bench.grid_sides must span at least 64x in node count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingPoint {
    pub nodes: usize,
    pub channels: usize,
    /// Median seconds per call.
    pub median_s: f64,
    pub repeats: usize,
    /// Calls per timed repeat.
    pub inner: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
    pub points_used: usize,
}

/// Least squares of `ln t` on `ln N`; non-positive times are dropped.
pub fn fit_scaling(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(n, t)| *n > 0.0 && *t > 0.0 && t.is_finite())
        .map(|(n, t)| (n.ln(), t.ln()))
        .collect();
    if logs.len() < 3 {
        return Err(Error::usage(format!(
            "scaling fit needs at least 3 positive points, got {}",
            logs.len()
        )));
    }
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::usage("scaling fit needs distinct node counts"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / k).sqrt();
    Ok(ScalingFit {
        slope,
        intercept,
        residual,
        points_used: logs.len(),
    })
}

/// Median seconds per call of `f` after one warmup call. Repeats that finish
/// faster than the timer floor are widened to several calls each; the second
/// return value is the call count per repeat.
pub fn time_median(repeats: usize, mut f: impl FnMut()) -> (f64, usize) {
    f();
    let start = Instant::now();
    f();
    let once = start.elapsed();
    let inner = if once >= MIN_REPEAT_TIME {
        1
    } else {
        (MIN_REPEAT_TIME.as_nanos() / once.as_nanos().max(1) + 1) as usize
    };
    let mut samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                f();
            }
            t.elapsed().as_secs_f64() / inner as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    (samples[samples.len() / 2], inner)
}

#[derive(Clone, Debug, Default)]
pub struct ScalingReport {
    /// `(kind, points)` in measurement order.
    pub series: Vec<(String, Vec<TimingPoint>)>,
    pub fits: Vec<(String, ScalingFit)>,
    /// `(knn_build + knn_mp) / grid_mp − 1` in percent, with the node count used.
    pub knn_overhead: Option<(usize, f64)>,
    /// Per-image loop time over flat-batch time.
    pub batch_speedup: Option<f64>,
    pub threads: usize,
    pub notes: Vec<String>,
}

impl ScalingReport {
    pub fn series(&self, kind: &str) -> Option<&[TimingPoint]> {
        self.series.iter().find(|(k, _)| k == kind).map(|(_, p)| p.as_slice())
    }

    pub fn fit(&self, kind: &str) -> Option<&ScalingFit> {
        self.fits.iter().find(|(k, _)| k == kind).map(|(_, f)| f)
    }

    pub const CSV_HEADER: &'static str = "kind,N,C,median_s,repeats";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for (kind, points) in &self.series {
            for p in points {
                let _ = writeln!(out, "{kind},{},{},{},{}", p.nodes, p.channels, p.median_s, p.repeats);
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threads: {}", self.threads);
        let _ = writeln!(s, "numeric mode: f32 detached kernels");
        for (kind, fit) in &self.fits {
            let _ = writeln!(
                s,
                "slope[{kind}] = {:.4} (intercept {:.4}, rms residual {:.4}, {} points)",
                fit.slope, fit.intercept, fit.residual, fit.points_used
            );
        }
        if let Some((n, pct)) = self.knn_overhead {
            let (lo, hi) = REFERENCE_KNN_OVERHEAD_PCT;
            let _ = writeln!(s, "knn overhead at N={n}: {pct:.1}% (reference figure {lo}-{hi}%)");
        }
        if let Some(r) = self.batch_speedup {
            let _ = writeln!(s, "per-image loop / flat batch time: {r:.3}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Random features and weights for one measurement.
struct Workload {
    x: Vec<f32>,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Workload {
    fn new(rng: &mut ChaCha8Rng, nodes: usize, c: usize) -> Self {
        Workload {
            x: (0..nodes * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            weight: (0..c * 2 * c).map(|_| rng.random_range(-0.1..0.1)).collect(),
            bias: vec![0.0; c],
        }
    }
}

fn grid_graph(side: usize, batch: usize) -> Result<BatchedGraph> {
    broadcast_batch(&[Arc::new(build_grid(side, side, 8)?)], batch)
}

fn run_sage(w: &Workload, dims: [usize; 4], g: &BatchedGraph, parallel: bool) -> Vec<f32> {
    sage_forward_detached(&w.x, dims, &g.global, &w.weight, &w.bias, dims[1], parallel)
}

struct Runner<'a> {
    cfg: &'a BenchConfig,
    rng: ChaCha8Rng,
    report: ScalingReport,
    parallel: bool,
}

impl Runner<'_> {
    fn point(&mut self, kind: &str, nodes: usize, f: impl FnMut()) {
        let (median_s, inner) = time_median(self.cfg.repeats, f);
        if inner > 1 {
            self.report
                .notes
                .push(format!("{kind} N={nodes}: timer floor reached, {inner} calls per repeat"));
        }
        let p = TimingPoint {
            nodes,
            channels: self.cfg.channels,
            median_s,
            repeats: self.cfg.repeats,
            inner,
        };
        match self.report.series.iter_mut().find(|(k, _)| k == kind) {
            Some((_, pts)) => pts.push(p),
            None => self.report.series.push((kind.to_string(), vec![p])),
        }
    }

    fn grid(&mut self) -> Result<()> {
        let c = self.cfg.channels;
        for &side in &self.cfg.grid_sides.clone() {
            let g = grid_graph(side, 1)?;
            let w = Workload::new(&mut self.rng, side * side, c);
            let par = self.parallel;
            self.point("grid_mp", side * side, || {
                std::hint::black_box(run_sage(&w, [1, c, side, side], &g, par));
            });
        }
        Ok(())
    }

    fn knn(&mut self) -> Result<()> {
        let c = self.cfg.channels;
        let params = KnnParams {
            k: self.cfg.knn_k,
            ..KnnParams::default()
        };
        for &side in &self.cfg.knn_sides.clone() {
            let n = side * side;
            if n <= params.k {
                self.report.notes.push(format!("knn N={n}: skipped, needs more than k={} nodes", params.k));
                continue;
            }
            let w = Workload::new(&mut self.rng, n, c);
            let map = &w.x;
            let topo: GraphTopology = build_knn_for_map(map, c, side, side, &params)?;
            self.point("knn_build", n, || {
                std::hint::black_box(build_knn_for_map(map, c, side, side, &params).expect("validated knn"));
            });
            let g = broadcast_batch(&[Arc::new(topo)], 1)?;
            let par = self.parallel;
            self.point("knn_mp", n, || {
                std::hint::black_box(run_sage(&w, [1, c, side, side], &g, par));
            });
            if !self.cfg.grid_sides.contains(&side) {
                let gg = grid_graph(side, 1)?;
                self.point("grid_mp_at_knn", n, || {
                    std::hint::black_box(run_sage(&w, [1, c, side, side], &gg, par));
                });
            }
        }
        Ok(())
    }

    fn attention(&mut self) {
        let c = self.cfg.channels;
        for &side in &self.cfg.attention_sides.clone() {
            let n = side * side;
            if n > self.cfg.attention_max_nodes {
                self.report
                    .notes
                    .push(format!("attention N={n}: skipped, above the {}-node memory cap", self.cfg.attention_max_nodes));
                continue;
            }
            let x: Vec<f32> = (0..n * c).map(|_| self.rng.random_range(-1.0..1.0)).collect();
            self.point("attention", n, || {
                std::hint::black_box(dense_self_attention(&x, n, c));
            });
        }
    }

    fn batch_loop(&mut self) -> Result<()> {
        let (b, side, c) = (self.cfg.loop_batch, self.cfg.loop_side, self.cfg.channels);
        let n = side * side;
        let g = grid_graph(side, b)?;
        let single = grid_graph(side, 1)?;
        let w = Workload::new(&mut self.rng, b * n, c);
        let par = self.parallel;
        self.point("flat_batch", b * n, || {
            std::hint::black_box(run_sage(&w, [b, c, side, side], &g, par));
        });
        self.point("per_image_loop", b * n, || {
            let mut out = Vec::with_capacity(b * n * c);
            for m in 0..b {
                let x = &w.x[m * n * c..(m + 1) * n * c];
                out.extend(sage_forward_detached(x, [1, c, side, side], &single.global, &w.weight, &w.bias, c, par));
            }
            std::hint::black_box(out);
        });
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        for kind in ["grid_mp", "knn_mp", "knn_build", "attention"] {
            if let Some(pts) = self.report.series(kind) {
                let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.nodes as f64, p.median_s)).collect();
                if xy.len() >= 3 {
                    let fit = fit_scaling(&xy)?;
                    self.report.fits.push((kind.to_string(), fit));
                }
            }
        }
        let report = self.report.clone();
        let median = |kind: &str, n: usize| {
            report
                .series(kind)
                .and_then(|p| p.iter().find(|p| p.nodes == n))
                .map(|p| p.median_s)
        };
        let common = self.cfg.knn_sides.iter().rev().map(|s| s * s).find(|&n| {
            median("knn_build", n).is_some() && (median("grid_mp", n).is_some() || median("grid_mp_at_knn", n).is_some())
        });
        if let Some(n) = common {
            let grid = median("grid_mp", n).or(median("grid_mp_at_knn", n)).expect("checked above");
            let knn = median("knn_build", n).expect("checked above") + median("knn_mp", n).expect("measured together");
            self.report.knn_overhead = Some((n, (knn / grid - 1.0) * 100.0));
        }
        let n = self.cfg.loop_batch * self.cfg.loop_side * self.cfg.loop_side;
        if let (Some(flat), Some(lp)) = (median("flat_batch", n), median("per_image_loop", n)) {
            self.report.batch_speedup = Some(lp / flat);
        }
        Ok(())
    }
}

/// Runs every measurement on a dedicated pool of `cfg.threads` workers.
pub fn run_benchmarks(cfg: &BenchConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config(format!("cannot build a {}-thread pool: {e}", cfg.threads)))?;
    pool.install(|| {
        let mut r = Runner {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            report: ScalingReport {
                threads: cfg.threads,
                ..ScalingReport::default()
            },
            parallel: cfg.threads > 1,
        };
        r.grid()?;
        r.attention();
        r.knn()?;
        r.batch_loop()?;
        r.finish()?;
        Ok(r.report)
    })
}
