//! Multistart solving, noise sweeps and scaling benchmarks.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use slamcert::certificate::{certify, CertificateReport, CertifyConfig};
use slamcert::datamatrix::{build_qbt_operator, DataMatrixOperator, ProblemVariant};
use slamcert::graph::{canonical_ordering, MeasurementGraph};
use slamcert::sim::{generate, SimConfig};
use slamcert::solver::{
    full_cost, gauss_newton, odometry_init, random_init, riemannian_refine, state_from_rotations, RefineConfig, SlamState,
    SolveResult, SolverConfig,
};
use slamcert::Result;

/// Thread pool honoring `SLAMCERT_THREADS` (all cores when unset or invalid).
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var("SLAMCERT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
}

/// Variant whose data matrix matches the full cost of `g`.
pub fn detect_variant(g: &MeasurementGraph) -> ProblemVariant {
    match (g.landmark_edges().is_empty(), g.pose_edges().is_empty()) {
        (true, _) => ProblemVariant::Pgo,
        (false, true) => ProblemVariant::Mpcr,
        (false, false) => ProblemVariant::LandmarkSlam,
    }
}

/// Seed of start `s` given a base seed. Start 0 is always odometry.
fn start_seed(base: u64, s: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(s as u64)
}

/// Odometry start followed by `starts − 1` random starts, each solved by GN.
pub fn multistart(g: &MeasurementGraph, starts: usize, seed: u64, cfg: &SolverConfig) -> Result<Vec<SolveResult>> {
    (0..starts)
        .map(|s| {
            let init = if s == 0 {
                odometry_init(g)
            } else {
                random_init(g, &mut ChaCha8Rng::seed_from_u64(start_seed(seed, s)))?
            };
            gauss_newton(g, &init, cfg)
        })
        .collect()
}

/// Refines the rotations of `s` on the marginalized cost and recomputes the
/// translations, returning the refined state if it is not worse.
pub fn polish(g: &MeasurementGraph, op: &DataMatrixOperator, s: &SlamState) -> Result<SlamState> {
    let cfg = RefineConfig {
        max_iters: 2000,
        ..RefineConfig::default()
    };
    let r = riemannian_refine(op, &s.rotation_block(), &cfg)?;
    let rotations = r
        .rotations
        .blocks
        .iter()
        .map(slamcert::so3::project_rotation)
        .collect();
    let refined = state_from_rotations(g, rotations)?;
    if full_cost(g, &refined) <= full_cost(g, s) {
        Ok(refined)
    } else {
        Ok(s.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub poses: usize,
    pub landmarks: Vec<usize>,
    pub alphas: Vec<f64>,
    pub loop_closures: Vec<usize>,
    pub noise_scales: Vec<f64>,
    pub trials: usize,
    pub starts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub pass: bool,
    pub corank: usize,
    pub best_cost: f64,
    pub min_eig_normalized: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub n_poses: usize,
    pub n_landmarks: usize,
    pub alpha: f64,
    pub loop_closures: usize,
    pub noise_scale: f64,
    pub trials: Vec<TrialOutcome>,
}

impl SweepCell {
    pub fn pass_rate(&self) -> f64 {
        self.trials.iter().filter(|t| t.pass).count() as f64 / self.trials.len().max(1) as f64
    }

    pub fn corank_mean(&self) -> f64 {
        self.trials.iter().map(|t| t.corank as f64).sum::<f64>() / self.trials.len().max(1) as f64
    }

    pub fn corank_min(&self) -> usize {
        self.trials.iter().map(|t| t.corank).min().unwrap_or(0)
    }

    pub fn corank_max(&self) -> usize {
        self.trials.iter().map(|t| t.corank).max().unwrap_or(0)
    }

    pub fn best_cost_mean(&self) -> f64 {
        self.trials.iter().map(|t| t.best_cost).sum::<f64>() / self.trials.len().max(1) as f64
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "n_poses,n_landmarks,alpha,loop_closures,noise_scale,trials,pass_rate,corank_mean,corank_min,corank_max,best_cost_mean";

impl SweepCell {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.n_poses,
            self.n_landmarks,
            self.alpha,
            self.loop_closures,
            self.noise_scale,
            self.trials.len(),
            self.pass_rate(),
            self.corank_mean(),
            self.corank_min(),
            self.corank_max(),
            self.best_cost_mean()
        )
    }
}

/// One sweep trial: generate, multistart, polish the best solution, certify.
/// The instance seed depends on the trial only, so every noise scale perturbs the
/// same geometry along the same noise directions.
pub fn sweep_trial(
    poses: usize,
    n_landmarks: usize,
    alpha: f64,
    loop_closures: usize,
    noise_scale: f64,
    starts: usize,
    seed: u64,
) -> Result<TrialOutcome> {
    let mut cfg = SimConfig::box_preset(poses, n_landmarks, noise_scale, seed);
    cfg.landmark_fraction = alpha;
    cfg.n_loop_closures = loop_closures;
    let (g, _) = generate(&cfg)?;
    let op = build_qbt_operator(&g, &canonical_ordering(&g), ProblemVariant::LandmarkSlam)?;
    let runs = multistart(&g, starts.max(1), seed, &SolverConfig::default())?;
    let best = runs
        .iter()
        .min_by(|a, b| a.final_cost.total_cmp(&b.final_cost))
        .expect("at least one start");
    let state = polish(&g, &op, &best.state)?;
    let cert = certify(&op, &state.rotation_block(), &CertifyConfig::default())?;
    Ok(TrialOutcome {
        pass: cert.pass,
        corank: cert.corank_estimate,
        best_cost: cert.primal_cost,
        min_eig_normalized: cert.min_eig_normalized,
    })
}

/// Runs every (landmarks, α, loop closures, noise scale) cell. Trials run on the
/// pool; results are gathered in cell order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &nm in &cfg.landmarks {
        for &alpha in &cfg.alphas {
            for &lc in &cfg.loop_closures {
                for &scale in &cfg.noise_scales {
                    cells.push((nm, alpha, lc, scale));
                }
            }
        }
    }
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.trials).map(move |t| (c, t)))
        .collect();
    let pool = thread_pool();
    let outcomes: Vec<Result<TrialOutcome>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, t)| {
                let (nm, alpha, lc, scale) = cells[c];
                let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
                sweep_trial(cfg.poses, nm, alpha, lc, scale, cfg.starts, seed)
            })
            .collect()
    });
    let mut out: Vec<SweepCell> = cells
        .iter()
        .map(|&(nm, alpha, lc, scale)| SweepCell {
            n_poses: cfg.poses,
            n_landmarks: nm,
            alpha,
            loop_closures: lc,
            noise_scale: scale,
            trials: Vec::with_capacity(cfg.trials),
        })
        .collect();
    for (&(c, _), o) in tasks.iter().zip(outcomes) {
        out[c].trials.push(o?);
    }
    Ok(out)
}

/// Moving average over three points (two at the ends).
pub fn smooth3(xs: &[f64]) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(xs.len());
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Smallest scale whose pass rate is below 1, or `∞` if none.
pub fn failure_onset(scales: &[f64], pass_rates: &[f64]) -> f64 {
    scales
        .iter()
        .zip(pass_rates)
        .find(|(_, &p)| p < 1.0)
        .map(|(&s, _)| s)
        .unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchSweep {
    /// Vary landmarks at a fixed pose count.
    Landmarks { poses: usize },
    /// Vary poses at a fixed landmark count.
    Poses { landmarks: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub sweep: BenchSweep,
    pub min: usize,
    pub max: usize,
    pub steps: usize,
    pub seed: u64,
    /// Each timing is the minimum over this many runs.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub assembly_s: f64,
    pub solve_s: f64,
    pub certify_s: f64,
    pub pass: bool,
}

pub const BENCH_CSV_HEADER: &str = "size,assembly_s,solve_s,certify_s,pass";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{}",
            self.size, self.assembly_s, self.solve_s, self.certify_s, self.pass
        )
    }
}

/// `steps` sizes spaced geometrically from `min` to `max` (inclusive, deduplicated).
pub fn geometric_sizes(min: usize, max: usize, steps: usize) -> Vec<usize> {
    if steps <= 1 || min >= max {
        return vec![min];
    }
    let ratio = (max as f64 / min as f64).powf(1.0 / (steps - 1) as f64);
    let mut v: Vec<usize> = (0..steps)
        .map(|k| (min as f64 * ratio.powi(k as i32)).round() as usize)
        .collect();
    v.dedup();
    v
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let v = f()?;
        best = best.min(t0.elapsed().as_secs_f64());
        out = Some(v);
    }
    Ok((out.expect("ran at least once"), best))
}

/// Benchmark of one instance: operator assembly, refinement from ground-truth
/// rotations, certification.
pub fn bench_instance(n_poses: usize, n_landmarks: usize, seed: u64, repeats: usize) -> Result<BenchRow> {
    let (g, gt) = generate(&SimConfig {
        n_poses,
        n_landmarks,
        seed,
        ..SimConfig::default()
    })?;
    let ord = canonical_ordering(&g);
    let (op, assembly_s) = timed(repeats, || build_qbt_operator(&g, &ord, ProblemVariant::LandmarkSlam))?;
    let (refined, solve_s) = timed(repeats, || {
        riemannian_refine(&op, &gt.state.rotation_block(), &RefineConfig::default())
    })?;
    let (cert, certify_s): (CertificateReport, f64) =
        timed(repeats, || certify(&op, &refined.rotations, &CertifyConfig::default()))?;
    Ok(BenchRow {
        size: 0,
        assembly_s,
        solve_s,
        certify_s,
        pass: cert.pass,
    })
}

/// Runs the benchmark sequentially so timings do not compete for cores.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    geometric_sizes(cfg.min, cfg.max, cfg.steps)
        .into_iter()
        .map(|size| {
            let (np, nm) = match cfg.sweep {
                BenchSweep::Landmarks { poses } => (poses, size),
                BenchSweep::Poses { landmarks } => (size, landmarks),
            };
            let mut row = bench_instance(np, nm, cfg.seed, cfg.repeats)?;
            row.size = size;
            Ok(row)
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_are_geometric() {
        assert_eq!(geometric_sizes(250, 4000, 5), vec![250, 500, 1000, 2000, 4000]);
        assert_eq!(geometric_sizes(50, 400, 4), vec![50, 100, 200, 400]);
        assert_eq!(geometric_sizes(7, 7, 3), vec![7]);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn smoothing_and_onset() {
        let s = smooth3(&[1.0, 1.0, 0.4]);
        for (a, b) in s.iter().zip([1.0, 0.8, 0.7]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(failure_onset(&[1.0, 2.0, 4.0], &[1.0, 0.9, 0.0]), 2.0);
        assert_eq!(failure_onset(&[1.0, 2.0], &[1.0, 1.0]), f64::INFINITY);
    }
}
