//! Argument parsing and command handlers.
//!
//! Exit codes: 0 on success or certificate PASS, 2 on certificate FAIL, 1 on any
//! operational error.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slamcert::certificate::{certify, CertifyConfig};
use slamcert::datamatrix::{build_qbt_operator, DataMatrixOperator};
use slamcert::graph::{canonical_ordering, MeasurementGraph};
use slamcert::sim::{generate, SimConfig, Trajectory};
use slamcert::solver::{
    full_cost, gauss_newton, odometry_init, random_init, riemannian_refine, state_from_rotations, RefineConfig,
    SlamState, SolverConfig,
};

use crate::experiments::{
    detect_variant, run_bench, run_sweep, BenchConfig, BenchSweep, SweepConfig, BENCH_CSV_HEADER, SWEEP_CSV_HEADER,
};
use crate::io::{IoError, ProblemFile};
use crate::report::{CertificateSection, Report};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_FAIL: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Core(#[from] slamcert::Error),
    #[error("{path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "slamcert", version, about = "Landmark SLAM solver with global optimality certificates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrajectoryKind {
    Ellipse,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitKind {
    /// Vertex values stored in the problem file (or `--init-file`).
    File,
    /// Compose pose-pose measurements along the pose chain.
    Odometry,
    /// Uniform random rotations, optimal translations and landmarks.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Landmarks,
    Poses,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic problem and its ground truth.
    Simulate {
        #[arg(long, default_value_t = 30)]
        poses: usize,
        #[arg(long, default_value_t = 200)]
        landmarks: usize,
        /// Fraction of visible pose-landmark pairs kept as measurements.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long = "loop-closures", default_value_t = 1)]
        loop_closures: usize,
        /// Translation noise std (meters, per axis).
        #[arg(long = "trans-noise", default_value_t = 0.05)]
        trans_noise: f64,
        /// Landmark measurement noise std; defaults to `--trans-noise`.
        #[arg(long = "landmark-noise")]
        landmark_noise: Option<f64>,
        #[arg(long = "rot-noise-deg", default_value_t = 10.0)]
        rot_noise_deg: f64,
        #[arg(long, value_enum, default_value_t = TrajectoryKind::Ellipse)]
        trajectory: TrajectoryKind,
        #[arg(long = "sensing-range", default_value_t = 4.5)]
        sensing_range: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Solve a problem with Gauss-Newton.
    Solve {
        problem: PathBuf,
        #[arg(long, value_enum, default_value_t = InitKind::Odometry)]
        init: InitKind,
        /// Solution file used with `--init file` instead of the problem's vertices.
        #[arg(long = "init-file")]
        init_file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Refine rotations on the marginalized cost before Gauss-Newton.
        #[arg(long)]
        marginalized: bool,
        /// Certify the solution and add the certificate to the report.
        #[arg(long)]
        certify: bool,
        #[arg(long, default_value_t = -1e-8, allow_hyphen_values = true)]
        threshold: f64,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Certify a candidate solution.
    Certify {
        problem: PathBuf,
        solution: PathBuf,
        #[arg(long, default_value_t = -1e-8, allow_hyphen_values = true)]
        threshold: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Time assembly, refinement and certification over problem sizes.
    Bench {
        #[arg(long, value_enum, default_value_t = SweepAxis::Landmarks)]
        sweep: SweepAxis,
        #[arg(long, default_value_t = 100)]
        poses: usize,
        #[arg(long, default_value_t = 100)]
        landmarks: usize,
        #[arg(long, default_value_t = 100)]
        min: usize,
        #[arg(long, default_value_t = 5000)]
        max: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        /// Each timing is the minimum over this many runs.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
    /// Certificate pass rate and corank over noise scales and graph densities.
    Sweep {
        #[arg(long, default_value_t = 20)]
        poses: usize,
        #[arg(long, value_delimiter = ',', default_value = "30")]
        landmarks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        alpha: Vec<f64>,
        #[arg(long = "loop-closures", value_delimiter = ',', default_value = "1")]
        loop_closures: Vec<usize>,
        #[arg(long = "noise-scales", value_delimiter = ',', default_value = "0.25,0.5,1,2,4,8,16,32")]
        noise_scales: Vec<f64>,
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

pub fn execute(cmd: Command) -> CliResult<u8> {
    match cmd {
        Command::Simulate {
            poses,
            landmarks,
            alpha,
            loop_closures,
            trans_noise,
            landmark_noise,
            rot_noise_deg,
            trajectory,
            sensing_range,
            seed,
            output,
            gt,
        } => {
            let trajectory = match trajectory {
                TrajectoryKind::Ellipse => SimConfig::default().trajectory,
                TrajectoryKind::Box => Trajectory::BoxRandom { extent: 50.0 },
            };
            let cfg = SimConfig {
                n_poses: poses,
                n_landmarks: landmarks,
                trajectory,
                sensing_range,
                trans_noise_std: trans_noise,
                landmark_noise_std: landmark_noise.unwrap_or(trans_noise),
                rot_noise_std: rot_noise_deg.to_radians(),
                landmark_fraction: alpha,
                n_loop_closures: loop_closures,
                inverse_variance_weights: false,
                seed,
            };
            simulate(&cfg, &output, gt.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::Solve {
            problem,
            init,
            init_file,
            seed,
            marginalized,
            certify,
            threshold,
            output,
            report,
        } => {
            let opts = SolveOptions { init, init_file, seed, marginalized, certify, threshold };
            let (sol, rep) = solve(&ProblemFile::read(&problem)?, &opts)?;
            sol.write(&output)?;
            if let Some(p) = report {
                write_output(&p, &rep.to_json())?;
            }
            print_summary(&rep);
            Ok(exit_for(&rep))
        }
        Command::Certify { problem, solution, threshold, report } => {
            let rep = certify_files(
                &ProblemFile::read(&problem)?,
                &ProblemFile::read(&solution)?,
                threshold,
            )?;
            if let Some(p) = report {
                write_output(&p, &rep.to_json())?;
            }
            print_summary(&rep);
            Ok(exit_for(&rep))
        }
        Command::Bench { sweep, poses, landmarks, min, max, steps, repeats, seed, output } => {
            if min == 0 || max < min {
                return Err(CliError::Usage(format!("invalid size range {min}..{max}")));
            }
            let sweep = match sweep {
                SweepAxis::Landmarks => BenchSweep::Landmarks { poses },
                SweepAxis::Poses => BenchSweep::Poses { landmarks },
            };
            let rows = run_bench(&BenchConfig { sweep, min, max, steps, seed, repeats })?;
            let mut csv = String::from(BENCH_CSV_HEADER);
            csv.push('\n');
            for r in &rows {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            emit(output.as_deref(), &csv)?;
            Ok(EXIT_OK)
        }
        Command::Sweep {
            poses,
            landmarks,
            alpha,
            loop_closures,
            noise_scales,
            trials,
            starts,
            seed,
            output,
        } => {
            if trials == 0 || starts == 0 {
                return Err(CliError::Usage("trials and starts must be positive".into()));
            }
            if let Some(s) = noise_scales.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
                return Err(CliError::Usage(format!("invalid noise scale {s}")));
            }
            let cells = run_sweep(&SweepConfig {
                poses,
                landmarks,
                alphas: alpha,
                loop_closures,
                noise_scales,
                trials,
                starts,
                seed,
            })?;
            let mut csv = String::from(SWEEP_CSV_HEADER);
            csv.push('\n');
            for c in &cells {
                csv.push_str(&c.csv_row());
                csv.push('\n');
            }
            emit(output.as_deref(), &csv)?;
            Ok(EXIT_OK)
        }
    }
}

/// Writes the simulated problem (odometry initial guess) and optionally the ground truth.
pub fn simulate(cfg: &SimConfig, output: &Path, gt: Option<&Path>) -> CliResult<()> {
    let (g, truth) = generate(cfg)?;
    let ids = crate::io::IdMap::sequential(g.n_poses(), g.n_landmarks());
    ProblemFile::from_problem(&g, &odometry_init(&g), &ids).write(output)?;
    if let Some(p) = gt {
        ProblemFile::solution(&truth.state, &ids).write(p)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub init: InitKind,
    pub init_file: Option<PathBuf>,
    pub seed: u64,
    pub marginalized: bool,
    pub certify: bool,
    pub threshold: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            init: InitKind::Odometry,
            init_file: None,
            seed: 0,
            marginalized: false,
            certify: false,
            threshold: -1e-8,
        }
    }
}

fn build_operator(g: &MeasurementGraph) -> CliResult<(DataMatrixOperator, f64)> {
    let t0 = Instant::now();
    let op = build_qbt_operator(g, &canonical_ordering(g), detect_variant(g))?;
    Ok((op, t0.elapsed().as_secs_f64()))
}

pub fn solve(problem: &ProblemFile, opts: &SolveOptions) -> CliResult<(ProblemFile, Report)> {
    let (g, file_init, ids) = problem.to_problem()?;
    let init = match opts.init {
        InitKind::File => match &opts.init_file {
            Some(p) => ProblemFile::read(p)?.to_solution(&ids)?,
            None => file_init,
        },
        InitKind::Odometry => odometry_init(&g),
        InitKind::Random => random_init(&g, &mut ChaCha8Rng::seed_from_u64(opts.seed))?,
    };
    let mut op = None;
    let mut assembly_s = 0.0;
    if opts.marginalized || opts.certify {
        let (o, t) = build_operator(&g)?;
        op = Some(o);
        assembly_s = t;
    }
    let t0 = Instant::now();
    let start: SlamState = match (&op, opts.marginalized) {
        (Some(o), true) => {
            let r = riemannian_refine(o, &init.rotation_block(), &RefineConfig::default())?;
            let rotations = r.rotations.blocks.iter().map(slamcert::so3::project_rotation).collect();
            state_from_rotations(&g, rotations)?
        }
        _ => init,
    };
    let res = gauss_newton(&g, &start, &SolverConfig::default())?;
    let solve_s = t0.elapsed().as_secs_f64();

    let variant = detect_variant(&g);
    let mut rep = Report::new("solve", variant.name(), g.n_poses(), g.n_landmarks(), res.final_cost);
    rep.iterations = Some(res.iterations);
    rep.converged = Some(res.converged);
    if opts.init == InitKind::Random {
        rep.seed = Some(opts.seed);
    }
    rep.timings.assembly_s = assembly_s;
    rep.timings.solve_s = solve_s;
    if let Some(o) = &op {
        if opts.certify {
            let t1 = Instant::now();
            let cfg = CertifyConfig { threshold: opts.threshold, ..CertifyConfig::default() };
            let c = certify(o, &res.state.rotation_block(), &cfg)?;
            rep.timings.certify_s = t1.elapsed().as_secs_f64();
            rep.certificate = Some(CertificateSection::new(&c, opts.threshold));
        }
    }
    Ok((ProblemFile::solution(&res.state, &ids), rep))
}

pub fn certify_files(problem: &ProblemFile, solution: &ProblemFile, threshold: f64) -> CliResult<Report> {
    if !(threshold.is_finite() && threshold <= 0.0) {
        return Err(CliError::Usage(format!("threshold {threshold} must be finite and non-positive")));
    }
    let (g, _, ids) = problem.to_problem()?;
    let state = solution.to_solution(&ids)?;
    let (op, assembly_s) = build_operator(&g)?;
    let t0 = Instant::now();
    let cfg = CertifyConfig { threshold, ..CertifyConfig::default() };
    let c = certify(&op, &state.rotation_block(), &cfg)?;
    let certify_s = t0.elapsed().as_secs_f64();
    let mut rep = Report::new("certify", op.variant().name(), g.n_poses(), g.n_landmarks(), full_cost(&g, &state));
    rep.timings.assembly_s = assembly_s;
    rep.timings.certify_s = certify_s;
    rep.certificate = Some(CertificateSection::new(&c, threshold));
    Ok(rep)
}

fn exit_for(rep: &Report) -> u8 {
    match &rep.certificate {
        Some(c) if !c.pass => EXIT_FAIL,
        _ => EXIT_OK,
    }
}

fn print_summary(rep: &Report) {
    match &rep.certificate {
        Some(c) => println!(
            "{} cost={:.6e} min_eig={:.3e} corank={}",
            if c.pass { "PASS" } else { "FAIL" },
            rep.final_cost,
            c.min_eig,
            c.corank_estimate
        ),
        None => println!(
            "cost={:.6e} iterations={} converged={}",
            rep.final_cost,
            rep.iterations.unwrap_or(0),
            rep.converged.unwrap_or(false)
        ),
    }
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::Output { path: path.display().to_string(), source })
}

fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_output(p, text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| CliError::Output { path: "<stdout>".into(), source }),
    }
}
