//! Synthetic landmark-SLAM instances with seeded noise.
//!
//! Randomness comes from `ChaCha8Rng` seeded with `seed_from_u64`, so streams are
//! identical across platforms.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LandmarkId, MeasurementGraph, PoseId, PoseLandmarkEdge, PosePoseEdge};
use crate::so3;
use crate::solver::SlamState;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    /// Planar ellipse with the given axis lengths (diameters, meters).
    Ellipse { major: f64, minor: f64 },
    /// Poses, orientations and landmarks uniform in `[0, extent]³`; every landmark
    /// is visible from every pose before subsampling.
    BoxRandom { extent: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_poses: usize,
    pub n_landmarks: usize,
    pub trajectory: Trajectory,
    pub sensing_range: f64,
    /// Pose-pose translation noise (per axis, meters).
    pub trans_noise_std: f64,
    /// Pose-landmark measurement noise (per axis, meters).
    pub landmark_noise_std: f64,
    /// Rotation noise in radians (per axis of the rotation vector).
    pub rot_noise_std: f64,
    /// Fraction of candidate pose-landmark edges kept.
    pub landmark_fraction: f64,
    /// Loop closures; the first is the edge closing the ring, further ones join
    /// random non-consecutive pose pairs.
    pub n_loop_closures: usize,
    /// Weights `1/std²` instead of 1.
    pub inverse_variance_weights: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_poses: 30,
            n_landmarks: 200,
            trajectory: Trajectory::Ellipse { major: 15.0, minor: 10.0 },
            sensing_range: 4.5,
            trans_noise_std: 0.05,
            landmark_noise_std: 0.05,
            rot_noise_std: 10f64.to_radians(),
            landmark_fraction: 1.0,
            n_loop_closures: 1,
            inverse_variance_weights: false,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Box-world preset with the given noise multiplier on the 0.866 m / 0.573°
    /// baseline.
    pub fn box_preset(n_poses: usize, n_landmarks: usize, noise_scale: f64, seed: u64) -> Self {
        let t = 0.866 * noise_scale;
        Self {
            n_poses,
            n_landmarks,
            trajectory: Trajectory::BoxRandom { extent: 50.0 },
            sensing_range: f64::INFINITY,
            trans_noise_std: t,
            landmark_noise_std: t,
            rot_noise_std: 0.573f64.to_radians() * noise_scale,
            landmark_fraction: 1.0,
            n_loop_closures: 1,
            inverse_variance_weights: false,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_poses < 2 {
            return Err(Error::Simulation("need at least two poses".into()));
        }
        if !(self.landmark_fraction > 0.0 && self.landmark_fraction <= 1.0) {
            return Err(Error::Simulation(format!(
                "landmark fraction {} outside (0, 1]",
                self.landmark_fraction
            )));
        }
        for (name, v) in [
            ("trans_noise_std", self.trans_noise_std),
            ("landmark_noise_std", self.landmark_noise_std),
            ("rot_noise_std", self.rot_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Simulation(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.sensing_range > 0.0) {
            return Err(Error::Simulation("sensing range must be positive".into()));
        }
        match self.trajectory {
            Trajectory::Ellipse { major, minor } if !(major > 0.0 && minor > 0.0) => {
                Err(Error::Simulation("ellipse axes must be positive".into()))
            }
            Trajectory::BoxRandom { extent } if !(extent > 0.0) => {
                Err(Error::Simulation("box extent must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub state: SlamState,
}

/// `exp(φ^) R` with `φ ~ N(0, std² I)`.
pub fn corrupt_rotation<R: Rng + ?Sized>(r: &Matrix3<f64>, std: f64, rng: &mut R) -> Matrix3<f64> {
    if std == 0.0 {
        return *r;
    }
    so3::exp(&so3::gaussian_vector(rng, std)) * r
}

/// `t + ε` with `ε ~ N(0, std² I)`.
pub fn corrupt_translation<R: Rng + ?Sized>(t: &Vector3<f64>, std: f64, rng: &mut R) -> Vector3<f64> {
    if std == 0.0 {
        return *t;
    }
    t + so3::gaussian_vector(rng, std)
}

fn weight(std: f64, inverse_variance: bool) -> f64 {
    if inverse_variance && std > 0.0 {
        1.0 / (std * std)
    } else {
        1.0
    }
}

fn ellipse_poses(n: usize, a: f64, b: f64) -> (Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
    (0..n)
        .map(|i| {
            let th = std::f64::consts::TAU * i as f64 / n as f64;
            let p = Vector3::new(a * th.cos(), b * th.sin(), 0.0);
            let x = Vector3::new(-a * th.sin(), b * th.cos(), 0.0).normalize();
            let z = Vector3::z();
            let y = z.cross(&x);
            (Matrix3::from_columns(&[x, y, z]), p)
        })
        .unzip()
}

/// Pose-pose index pairs: the odometry chain, the ring closure, then random
/// distinct non-consecutive pairs.
fn pose_pairs<R: Rng + ?Sized>(n: usize, n_closures: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let mut pairs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    if n_closures == 0 {
        return Ok(pairs);
    }
    if n > 2 {
        pairs.push((n - 1, 0));
    }
    let extra = n_closures - 1;
    let available = (n * (n - 1) / 2).saturating_sub(pairs.len());
    if extra > available {
        return Err(Error::Simulation(format!(
            "{n_closures} loop closures requested but only {} pose pairs are free",
            available + 1
        )));
    }
    let mut added = 0;
    while added < extra {
        let i = rng.random_range(0..n);
        let k = rng.random_range(0..n);
        let (lo, hi) = (i.min(k), i.max(k));
        if lo == hi || pairs.iter().any(|&(a, b)| a.min(b) == lo && a.max(b) == hi) {
            continue;
        }
        pairs.push((i, k));
        added += 1;
    }
    Ok(pairs)
}

/// Generates a graph and its ground truth. Deterministic given `cfg`.
pub fn generate(cfg: &SimConfig) -> Result<(MeasurementGraph, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let np = cfg.n_poses;
    let (rotations, translations, lo, hi) = match cfg.trajectory {
        Trajectory::Ellipse { major, minor } => {
            let (a, b) = (major / 2.0, minor / 2.0);
            let (r, t) = ellipse_poses(np, a, b);
            let s = cfg.sensing_range;
            (r, t, Vector3::new(-a - s, -b - s, -s), Vector3::new(a + s, b + s, s))
        }
        Trajectory::BoxRandom { extent } => {
            let r = (0..np).map(|_| so3::random_rotation(&mut rng)).collect();
            let t = (0..np)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(0.0..extent),
                        rng.random_range(0.0..extent),
                        rng.random_range(0.0..extent),
                    )
                })
                .collect();
            (r, t, Vector3::zeros(), Vector3::repeat(extent))
        }
    };

    let pairs = pose_pairs(np, cfg.n_loop_closures, &mut rng)?;
    let wr = weight(cfg.rot_noise_std, cfg.inverse_variance_weights);
    let wt = weight(cfg.trans_noise_std, cfg.inverse_variance_weights);
    let wb = weight(cfg.landmark_noise_std, cfg.inverse_variance_weights);

    const MAX_ATTEMPTS: usize = 10;
    const MAX_DRAWS_PER_LANDMARK: usize = 100_000;
    let mut last_err = None;
    for _ in 0..MAX_ATTEMPTS {
        // Landmarks uniform in the region, kept only if some pose senses them.
        let mut landmarks = Vec::with_capacity(cfg.n_landmarks);
        let mut draws = 0usize;
        while landmarks.len() < cfg.n_landmarks {
            draws += 1;
            if draws > MAX_DRAWS_PER_LANDMARK * cfg.n_landmarks.max(1) {
                return Err(Error::Simulation("no landmark position within sensing range".into()));
            }
            let m = Vector3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            );
            if translations.iter().any(|t: &Vector3<f64>| (m - t).norm() <= cfg.sensing_range) {
                landmarks.push(m);
            }
        }

        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for (j, m) in landmarks.iter().enumerate() {
            for (i, t) in translations.iter().enumerate() {
                if (m - t).norm() <= cfg.sensing_range {
                    candidates.push((i, j));
                }
            }
        }
        let kept = subsample(&candidates, cfg.landmark_fraction, cfg.n_landmarks, &mut rng);

        let landmark_edges: Vec<PoseLandmarkEdge> = kept
            .iter()
            .map(|&(i, j)| {
                let y = rotations[i].transpose() * (landmarks[j] - translations[i]);
                PoseLandmarkEdge {
                    pose: PoseId(i),
                    landmark: LandmarkId(j),
                    meas: corrupt_translation(&y, cfg.landmark_noise_std, &mut rng),
                    w_b: wb,
                }
            })
            .collect();
        let pose_edges: Vec<PosePoseEdge> = pairs
            .iter()
            .map(|&(i, k)| {
                let rt = rotations[i].transpose();
                let r_rel = rt * rotations[k];
                let t_rel = rt * (translations[k] - translations[i]);
                PosePoseEdge {
                    from: PoseId(i),
                    to: PoseId(k),
                    rel_rotation: corrupt_rotation(&r_rel, cfg.rot_noise_std, &mut rng),
                    rel_translation: corrupt_translation(&t_rel, cfg.trans_noise_std, &mut rng),
                    w_r: wr,
                    w_t: wt,
                }
            })
            .collect();
        match MeasurementGraph::new(np, cfg.n_landmarks, landmark_edges, pose_edges) {
            Ok(g) => {
                let state = SlamState {
                    rotations,
                    translations,
                    landmarks,
                };
                return Ok((g, GroundTruth { state }));
            }
            Err(e @ Error::Disconnected(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::Simulation(format!(
        "could not generate a connected graph in {MAX_ATTEMPTS} attempts: {}",
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Keeps `round(α |E|)` candidate edges uniformly without replacement, then
/// restores one random edge to every landmark left unobserved. Output is sorted.
fn subsample<R: Rng + ?Sized>(
    candidates: &[(usize, usize)],
    alpha: f64,
    n_landmarks: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if alpha >= 1.0 {
        return candidates.to_vec();
    }
    let k = ((alpha * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut idx: Vec<usize> = sample(rng, candidates.len(), k).into_vec();
    idx.sort_unstable();
    let mut seen = vec![false; n_landmarks];
    for &c in &idx {
        seen[candidates[c].1] = true;
    }
    for j in 0..n_landmarks {
        if !seen[j] {
            let options: Vec<usize> = (0..candidates.len()).filter(|&c| candidates[c].1 == j).collect();
            idx.push(options[rng.random_range(0..options.len())]);
        }
    }
    idx.sort_unstable();
    idx.into_iter().map(|c| candidates[c]).collect()
}

/// Small random instance for property tests: random poses and landmarks, a pose
/// chain plus a few random pose edges (duplicates allowed), and landmark
/// observations that keep both the bipartite and the pose-only subgraphs connected.
/// Needs `n_landmarks + 1 >= n_poses`. Weights are drawn from `[0.5, 2]`.
pub fn random_instance(n_poses: usize, n_landmarks: usize, noise: f64, seed: u64) -> Result<(MeasurementGraph, SlamState)> {
    if n_poses == 0 || n_landmarks + 1 < n_poses {
        return Err(Error::Simulation("random_instance needs n_landmarks + 1 >= n_poses >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot: Vec<Matrix3<f64>> = (0..n_poses).map(|_| so3::random_rotation(&mut rng)).collect();
    let tr: Vec<Vector3<f64>> = (0..n_poses).map(|_| so3::gaussian_vector(&mut rng, 3.0)).collect();
    let lm: Vec<Vector3<f64>> = (0..n_landmarks).map(|_| so3::gaussian_vector(&mut rng, 3.0)).collect();

    let mut obs: Vec<(usize, usize)> = Vec::new();
    for j in 0..n_landmarks {
        obs.push((j % n_poses, j));
        if j + 1 < n_poses {
            obs.push((j + 1, j));
        }
        let extra = rng.random_range(0..3usize);
        for _ in 0..extra {
            obs.push((rng.random_range(0..n_poses), j));
        }
    }
    let mut pairs: Vec<(usize, usize)> = (0..n_poses.saturating_sub(1)).map(|i| (i, i + 1)).collect();
    if n_poses > 1 {
        for _ in 0..rng.random_range(0..n_poses) {
            let i = rng.random_range(0..n_poses);
            let k = rng.random_range(0..n_poses);
            if i != k {
                pairs.push((i, k));
            }
        }
    }
    let landmark_edges = obs
        .into_iter()
        .map(|(i, j)| PoseLandmarkEdge {
            pose: PoseId(i),
            landmark: LandmarkId(j),
            meas: corrupt_translation(&(rot[i].transpose() * (lm[j] - tr[i])), noise, &mut rng),
            w_b: rng.random_range(0.5..2.0),
        })
        .collect();
    let pose_edges = pairs
        .into_iter()
        .map(|(i, k)| PosePoseEdge {
            from: PoseId(i),
            to: PoseId(k),
            rel_rotation: corrupt_rotation(&(rot[i].transpose() * rot[k]), noise, &mut rng),
            rel_translation: corrupt_translation(&(rot[i].transpose() * (tr[k] - tr[i])), noise, &mut rng),
            w_r: rng.random_range(0.5..2.0),
            w_t: rng.random_range(0.5..2.0),
        })
        .collect();
    let g = MeasurementGraph::new(n_poses, n_landmarks, landmark_edges, pose_edges)?;
    Ok((
        g,
        SlamState {
            rotations: rot,
            translations: tr,
            landmarks: lm,
        },
    ))
}
