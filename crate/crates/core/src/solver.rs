//! Local solvers: damped Gauss-Newton over the full state, translation/landmark
//! recovery for fixed rotations (variable projection), and projected-gradient
//! refinement of the rotation-only cost.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, Matrix6x3, Vector3, Vector6};
use rand::Rng;

use crate::cholesky::SparseCholesky;
use crate::datamatrix::{reduced_schur_laplacian, DataMatrixOperator, RotationBlock};
use crate::error::{Error, Result};
use crate::graph::{EdgeOrdering, EdgeRef, MeasurementGraph};
use crate::so3;

/// Poses `(R_i, t_i)` in the world frame and landmark positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamState {
    pub rotations: Vec<Matrix3<f64>>,
    pub translations: Vec<Vector3<f64>>,
    pub landmarks: Vec<Vector3<f64>>,
}

impl SlamState {
    pub fn identity(n_poses: usize, n_landmarks: usize) -> Self {
        Self {
            rotations: vec![Matrix3::identity(); n_poses],
            translations: vec![Vector3::zeros(); n_poses],
            landmarks: vec![Vector3::zeros(); n_landmarks],
        }
    }

    pub fn n_poses(&self) -> usize {
        self.rotations.len()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn rotation_block(&self) -> RotationBlock {
        RotationBlock::new(self.rotations.clone())
    }

    /// Applies `x ↦ G x + h` to every pose and landmark.
    pub fn transformed(&self, g: &Matrix3<f64>, h: &Vector3<f64>) -> Self {
        Self {
            rotations: self.rotations.iter().map(|r| g * r).collect(),
            translations: self.translations.iter().map(|t| g * t + h).collect(),
            landmarks: self.landmarks.iter().map(|m| g * m + h).collect(),
        }
    }

    /// Rigid transform mapping pose 0 of `self` onto pose 0 of `reference`.
    pub fn aligned_to(&self, reference: &SlamState) -> Self {
        let g = reference.rotations[0] * self.rotations[0].transpose();
        let h = reference.translations[0] - g * self.translations[0];
        self.transformed(&g, &h)
    }

    fn check_dims(&self, g: &MeasurementGraph) -> Result<()> {
        if self.rotations.len() != g.n_poses()
            || self.translations.len() != g.n_poses()
            || self.landmarks.len() != g.n_landmarks()
        {
            return Err(Error::DimensionMismatch {
                expected: format!("{} poses, {} landmarks", g.n_poses(), g.n_landmarks()),
                actual: format!(
                    "{} rotations, {} translations, {} landmarks",
                    self.rotations.len(),
                    self.translations.len(),
                    self.landmarks.len()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step_sq_tol: f64,
    /// Pose held fixed (rotation and translation).
    pub gauge_lock: usize,
    /// Initial Levenberg-Marquardt damping, relative to the mean diagonal of `JᵀJ`.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            step_sq_tol: 1e-10,
            gauge_lock: 0,
            damping: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub state: SlamState,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `J_r + J_t + J_b`: weighted squared residuals of all measurements.
pub fn full_cost(g: &MeasurementGraph, s: &SlamState) -> f64 {
    let mut c = 0.0;
    for e in g.pose_edges() {
        let (ri, rk) = (&s.rotations[e.from.0], &s.rotations[e.to.0]);
        c += e.w_r * (ri * e.rel_rotation - rk).norm_squared();
        let rt = s.translations[e.from.0] + ri * e.rel_translation - s.translations[e.to.0];
        c += e.w_t * rt.norm_squared();
    }
    for e in g.landmark_edges() {
        let i = e.pose.0;
        let r = s.translations[i] + s.rotations[i] * e.meas - s.landmarks[e.landmark.0];
        c += e.w_b * r.norm_squared();
    }
    c
}

/// Residual and Jacobian blocks of one edge. Pose blocks are ordered `[δθ, δt]`
/// under the retraction `R ← R exp(δθ^)`, `t ← t + δt`.
enum EdgeLinearization {
    /// Three rotation-column residuals plus one translation residual.
    Pose {
        i: usize,
        k: usize,
        res: [Vector3<f64>; 4],
        ji: [Matrix3x6<f64>; 4],
        jk: [Matrix3x6<f64>; 4],
    },
    Landmark {
        i: usize,
        j: usize,
        res: Vector3<f64>,
        ji: Matrix3x6<f64>,
        jl: Matrix3<f64>,
    },
}

fn linearize_pose_edge(g: &MeasurementGraph, s: &SlamState, n: usize) -> EdgeLinearization {
    let e = &g.pose_edges()[n];
    let (i, k) = (e.from.0, e.to.0);
    let (ri, rk) = (s.rotations[i], s.rotations[k]);
    let (sr, st) = (e.w_r.sqrt(), e.w_t.sqrt());
    let mut res = [Vector3::zeros(); 4];
    let mut ji = [Matrix3x6::zeros(); 4];
    let mut jk = [Matrix3x6::zeros(); 4];
    for c in 0..3 {
        let rc: Vector3<f64> = e.rel_rotation.column(c).into();
        let ec = Vector3::ith(c, 1.0);
        res[c] = sr * (ri * rc - rk * ec);
        ji[c].fixed_view_mut::<3, 3>(0, 0).copy_from(&(-sr * ri * so3::hat(&rc)));
        jk[c].fixed_view_mut::<3, 3>(0, 0).copy_from(&(sr * rk * so3::hat(&ec)));
    }
    res[3] = st * (s.translations[i] + ri * e.rel_translation - s.translations[k]);
    ji[3].fixed_view_mut::<3, 3>(0, 0).copy_from(&(-st * ri * so3::hat(&e.rel_translation)));
    ji[3].fixed_view_mut::<3, 3>(0, 3).copy_from(&(st * Matrix3::identity()));
    jk[3].fixed_view_mut::<3, 3>(0, 3).copy_from(&(-st * Matrix3::identity()));
    EdgeLinearization::Pose { i, k, res, ji, jk }
}

fn linearize_landmark_edge(g: &MeasurementGraph, s: &SlamState, n: usize) -> EdgeLinearization {
    let e = &g.landmark_edges()[n];
    let (i, j) = (e.pose.0, e.landmark.0);
    let sw = e.w_b.sqrt();
    let ri = s.rotations[i];
    let res = sw * (s.translations[i] + ri * e.meas - s.landmarks[j]);
    let mut ji = Matrix3x6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-sw * ri * so3::hat(&e.meas)));
    ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(sw * Matrix3::identity()));
    EdgeLinearization::Landmark {
        i,
        j,
        res,
        ji,
        jl: -sw * Matrix3::identity(),
    }
}

/// Stacked residual vector: pose edges (12 rows each) then landmark edges (3 rows).
pub fn residual_vector(g: &MeasurementGraph, s: &SlamState) -> DVector<f64> {
    let n = 12 * g.pose_edges().len() + 3 * g.landmark_edges().len();
    let mut r = DVector::zeros(n);
    let mut row = 0;
    for k in 0..g.pose_edges().len() {
        if let EdgeLinearization::Pose { res, .. } = linearize_pose_edge(g, s, k) {
            for v in res {
                r.fixed_rows_mut::<3>(row).copy_from(&v);
                row += 3;
            }
        }
    }
    for k in 0..g.landmark_edges().len() {
        if let EdgeLinearization::Landmark { res, .. } = linearize_landmark_edge(g, s, k) {
            r.fixed_rows_mut::<3>(row).copy_from(&res);
            row += 3;
        }
    }
    r
}

/// Dense Jacobian of [`residual_vector`] with respect to the tangent vector laid
/// out as `[δθ_0, δt_0, …, δθ_{N−1}, δt_{N−1}, δm_0, …]` (no gauge lock).
pub fn dense_jacobian(g: &MeasurementGraph, s: &SlamState) -> DMatrix<f64> {
    let n_rows = 12 * g.pose_edges().len() + 3 * g.landmark_edges().len();
    let n_cols = 6 * g.n_poses() + 3 * g.n_landmarks();
    let lm0 = 6 * g.n_poses();
    let mut jac = DMatrix::zeros(n_rows, n_cols);
    let mut row = 0;
    for k in 0..g.pose_edges().len() {
        if let EdgeLinearization::Pose { i, k, ji, jk, .. } = linearize_pose_edge(g, s, k) {
            for b in 0..4 {
                jac.fixed_view_mut::<3, 6>(row, 6 * i).add_assign(&ji[b]);
                jac.fixed_view_mut::<3, 6>(row, 6 * k).add_assign(&jk[b]);
                row += 3;
            }
        }
    }
    for k in 0..g.landmark_edges().len() {
        if let EdgeLinearization::Landmark { i, j, ji, jl, .. } = linearize_landmark_edge(g, s, k) {
            jac.fixed_view_mut::<3, 6>(row, 6 * i).copy_from(&ji);
            jac.fixed_view_mut::<3, 3>(row, lm0 + 3 * j).copy_from(&jl);
            row += 3;
        }
    }
    jac
}

/// Applies a tangent vector laid out as in [`dense_jacobian`].
pub fn retract(s: &SlamState, delta: &DVector<f64>) -> SlamState {
    let np = s.n_poses();
    let mut out = s.clone();
    for i in 0..np {
        let d = delta.fixed_rows::<6>(6 * i);
        out.rotations[i] = s.rotations[i] * so3::exp(&Vector3::new(d[0], d[1], d[2]));
        out.translations[i] += Vector3::new(d[3], d[4], d[5]);
    }
    for j in 0..s.n_landmarks() {
        out.landmarks[j] += delta.fixed_rows::<3>(6 * np + 3 * j).into_owned();
    }
    out
}

/// Schur-complemented normal equations of one linearization.
struct NormalSystem {
    /// Reduced pose block over unlocked poses (6 per pose).
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    /// Per landmark: `[(pose, H_pl)]`, `H_ll` and `g_l`.
    landmarks: Vec<(Vec<(usize, Matrix6x3<f64>)>, Matrix3<f64>, Vector3<f64>)>,
    mean_diag: f64,
}

fn build_normal_system(g: &MeasurementGraph, ord: &EdgeOrdering, s: &SlamState, lock: usize) -> NormalSystem {
    let np = g.n_poses();
    // Map pose index to its slot among unlocked poses.
    let slot = |i: usize| -> Option<usize> {
        match i.cmp(&lock) {
            std::cmp::Ordering::Less => Some(i),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(i - 1),
        }
    };
    let dim = 6 * (np - 1);
    let mut hpp = DMatrix::zeros(dim, dim);
    let mut gp = DVector::zeros(dim);
    let mut diag_sum = 0.0;
    let mut diag_n = 0usize;

    for k in 0..g.pose_edges().len() {
        if let EdgeLinearization::Pose { i, k, res, ji, jk } = linearize_pose_edge(g, s, k) {
            for b in 0..4 {
                let blocks = [(slot(i), &ji[b]), (slot(k), &jk[b])];
                for (sa, ja) in blocks {
                    let Some(a) = sa else { continue };
                    let ga: Vector6<f64> = ja.transpose() * res[b];
                    gp.fixed_rows_mut::<6>(6 * a).add_assign(&ga);
                    for (sb, jb) in blocks {
                        let Some(bb) = sb else { continue };
                        let h: Matrix6<f64> = ja.transpose() * jb;
                        let mut v = hpp.fixed_view_mut::<6, 6>(6 * a, 6 * bb);
                        v += h;
                    }
                }
            }
        }
    }

    let mut landmarks = Vec::with_capacity(g.n_landmarks());
    for j in 0..g.n_landmarks() {
        let mut hll = Matrix3::zeros();
        let mut gl = Vector3::zeros();
        let mut hpl: Vec<(usize, Matrix6x3<f64>)> = Vec::new();
        for &e in &ord.edges()[ord.landmark_block(j)] {
            let EdgeRef::Landmark(n) = e else { unreachable!() };
            if let EdgeLinearization::Landmark { i, res, ji, jl, .. } = linearize_landmark_edge(g, s, n) {
                hll += jl.transpose() * jl;
                gl += jl.transpose() * res;
                if let Some(a) = slot(i) {
                    let h: Matrix6<f64> = ji.transpose() * ji;
                    let mut v = hpp.fixed_view_mut::<6, 6>(6 * a, 6 * a);
                    v += h;
                    let ga: Vector6<f64> = ji.transpose() * res;
                    gp.fixed_rows_mut::<6>(6 * a).add_assign(&ga);
                    let c: Matrix6x3<f64> = ji.transpose() * jl;
                    match hpl.iter_mut().find(|(p, _)| *p == a) {
                        Some((_, m)) => *m += c,
                        None => hpl.push((a, c)),
                    }
                }
            }
        }
        diag_sum += hll.trace();
        diag_n += 3;
        landmarks.push((hpl, hll, gl));
    }
    diag_sum += hpp.diagonal().sum();
    diag_n += dim;
    NormalSystem {
        hpp,
        gp,
        landmarks,
        mean_diag: if diag_n > 0 { diag_sum / diag_n as f64 } else { 1.0 },
    }
}

/// Solves `(H + μI) δ = −g` through the landmark Schur complement. Returns pose
/// increments (unlocked slots) and landmark increments.
fn solve_damped(sys: &NormalSystem, mu: f64) -> Result<(DVector<f64>, Vec<Vector3<f64>>)> {
    let dim = sys.hpp.nrows();
    let mut s = sys.hpp.clone();
    for d in 0..dim {
        s[(d, d)] += mu;
    }
    let mut rhs = -&sys.gp;
    let mut inv_ll = Vec::with_capacity(sys.landmarks.len());
    for (hpl, hll, gl) in &sys.landmarks {
        let inv = (hll + Matrix3::identity() * mu)
            .try_inverse()
            .ok_or(Error::SingularNormalEquations)?;
        for (a, ca) in hpl {
            let w: Matrix6x3<f64> = ca * inv;
            rhs.fixed_rows_mut::<6>(6 * a).add_assign(&(w * gl));
            for (b, cb) in hpl {
                let m: Matrix6<f64> = w * cb.transpose();
                let mut v = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                v -= m;
            }
        }
        inv_ll.push(inv);
    }
    let dp = if dim > 0 {
        let chol = s.cholesky().ok_or(Error::SingularNormalEquations)?;
        chol.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let dl = sys
        .landmarks
        .iter()
        .zip(&inv_ll)
        .map(|((hpl, _, gl), inv)| {
            let mut r = -gl;
            for (a, ca) in hpl {
                r -= ca.transpose() * dp.fixed_rows::<6>(6 * a);
            }
            inv * r
        })
        .collect();
    Ok((dp, dl))
}

fn apply_step(s: &SlamState, lock: usize, dp: &DVector<f64>, dl: &[Vector3<f64>]) -> SlamState {
    let mut out = s.clone();
    for i in 0..s.n_poses() {
        if i == lock {
            continue;
        }
        let a = if i < lock { i } else { i - 1 };
        let d = dp.fixed_rows::<6>(6 * a);
        out.rotations[i] = s.rotations[i] * so3::exp(&Vector3::new(d[0], d[1], d[2]));
        out.translations[i] += Vector3::new(d[3], d[4], d[5]);
    }
    for (m, d) in out.landmarks.iter_mut().zip(dl) {
        *m += d;
    }
    out
}

/// Levenberg-Marquardt damped Gauss-Newton on `SO(3)^N × R^{3N} × R^{3M}`.
pub fn gauss_newton(g: &MeasurementGraph, init: &SlamState, cfg: &SolverConfig) -> Result<SolveResult> {
    init.check_dims(g)?;
    if cfg.gauge_lock >= g.n_poses() {
        return Err(Error::InvalidArgument(format!("gauge pose {} does not exist", cfg.gauge_lock)));
    }
    if !(cfg.step_sq_tol > 0.0) {
        return Err(Error::InvalidArgument("step_sq_tol must be positive".into()));
    }
    let ord = crate::graph::canonical_ordering(g);
    let mut state = init.clone();
    let mut cost = full_cost(g, &state);
    let mut lambda = cfg.damping;
    let mut converged = false;
    let mut iterations = 0;
    let mut sys = build_normal_system(g, &ord, &state, cfg.gauge_lock);
    while iterations < cfg.max_iters {
        iterations += 1;
        let mu = lambda * sys.mean_diag.max(f64::MIN_POSITIVE);
        let (dp, dl) = solve_damped(&sys, mu)?;
        let step_sq = dp.norm_squared() + dl.iter().map(|d| d.norm_squared()).sum::<f64>();
        let candidate = apply_step(&state, cfg.gauge_lock, &dp, &dl);
        let new_cost = full_cost(g, &candidate);
        let accepted = new_cost <= cost;
        if accepted {
            state = candidate;
            cost = new_cost;
            lambda = (lambda * 0.5).max(1e-12);
        } else {
            lambda *= 4.0;
        }
        if step_sq < cfg.step_sq_tol {
            converged = true;
            break;
        }
        if lambda > 1e16 {
            break;
        }
        if accepted {
            sys = build_normal_system(g, &ord, &state, cfg.gauge_lock);
        }
    }
    Ok(SolveResult {
        state,
        final_cost: cost,
        iterations,
        converged,
    })
}

/// Optimal translations and landmarks for fixed rotations, with pose 0's
/// translation pinned at the origin. Caches the factorization of the reduced
/// Laplacian so several rotation sets can be processed.
pub struct TranslationRecovery<'g> {
    g: &'g MeasurementGraph,
    ord: EdgeOrdering,
    chol: SparseCholesky,
    degrees: Vec<f64>,
}

impl<'g> TranslationRecovery<'g> {
    pub fn new(g: &'g MeasurementGraph) -> Result<Self> {
        let ord = crate::graph::canonical_ordering(g);
        let k = reduced_schur_laplacian(g, &ord);
        let chol = SparseCholesky::factor(&k).map_err(|e| match e {
            Error::SingularReducedSystem { .. } => Error::Disconnected("reduced Laplacian is singular".into()),
            other => other,
        })?;
        let mut degrees = vec![0.0; g.n_landmarks()];
        for e in g.landmark_edges() {
            degrees[e.landmark.0] += e.w_b;
        }
        Ok(Self { g, ord, chol, degrees })
    }

    pub fn recover(&self, rotations: &[Matrix3<f64>]) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
        let g = self.g;
        let np = g.n_poses();
        if rotations.len() != np {
            return Err(Error::DimensionMismatch {
                expected: format!("{np} rotations"),
                actual: format!("{}", rotations.len()),
            });
        }
        // b = V (R T)ᵀ row by row: head += w R_tail y, tail −= w R_tail y.
        let mut b_pose = vec![Vector3::zeros(); np];
        let mut b_lm = vec![Vector3::zeros(); g.n_landmarks()];
        for e in g.pose_edges() {
            let v = e.w_t * (rotations[e.from.0] * e.rel_translation);
            b_pose[e.to.0] += v;
            b_pose[e.from.0] -= v;
        }
        for e in g.landmark_edges() {
            let v = e.w_b * (rotations[e.pose.0] * e.meas);
            b_lm[e.landmark.0] += v;
            b_pose[e.pose.0] -= v;
        }
        // Eliminate landmarks: rhs_p = b_p + Σ w_e b_j / D_j.
        let mut rhs = DMatrix::zeros(np - 1, 3);
        for i in 1..np {
            rhs.row_mut(i - 1).copy_from(&b_pose[i].transpose());
        }
        for &e in &self.ord.edges()[..self.ord.n_landmark_edges()] {
            let EdgeRef::Landmark(n) = e else { unreachable!() };
            let le = &g.landmark_edges()[n];
            let p = le.pose.0;
            if p > 0 {
                let v = b_lm[le.landmark.0] * (le.w_b / self.degrees[le.landmark.0]);
                let mut row = rhs.row_mut(p - 1);
                row += v.transpose();
            }
        }
        let x = if np > 1 { self.chol.solve(&rhs) } else { rhs };
        let mut t = vec![Vector3::zeros(); np];
        for i in 1..np {
            t[i] = Vector3::new(x[(i - 1, 0)], x[(i - 1, 1)], x[(i - 1, 2)]);
        }
        let mut m: Vec<Vector3<f64>> = b_lm.clone();
        for e in g.landmark_edges() {
            m[e.landmark.0] += e.w_b * t[e.pose.0];
        }
        for (mj, d) in m.iter_mut().zip(&self.degrees) {
            *mj /= *d;
        }
        Ok((t, m))
    }

    pub fn ordering(&self) -> &EdgeOrdering {
        &self.ord
    }
}

/// One-shot form of [`TranslationRecovery::recover`].
pub fn recover_translations(
    g: &MeasurementGraph,
    r: &RotationBlock,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    TranslationRecovery::new(g)?.recover(&r.blocks)
}

/// Full state from rotations via variable projection.
pub fn state_from_rotations(g: &MeasurementGraph, rotations: Vec<Matrix3<f64>>) -> Result<SlamState> {
    let (translations, landmarks) = TranslationRecovery::new(g)?.recover(&rotations)?;
    Ok(SlamState {
        rotations,
        translations,
        landmarks,
    })
}

/// Composes pose-pose measurements along the pose index chain; landmarks are
/// back-projected from their first observation.
pub fn odometry_init(g: &MeasurementGraph) -> SlamState {
    let np = g.n_poses();
    let mut s = SlamState::identity(np, g.n_landmarks());
    for i in 1..np {
        let (rp, tp) = (s.rotations[i - 1], s.translations[i - 1]);
        let fwd = g.pose_edges().iter().find(|e| e.from.0 == i - 1 && e.to.0 == i);
        let bwd = g.pose_edges().iter().find(|e| e.from.0 == i && e.to.0 == i - 1);
        let (dr, dt) = match (fwd, bwd) {
            (Some(e), _) => (e.rel_rotation, e.rel_translation),
            (None, Some(e)) => {
                let rt = e.rel_rotation.transpose();
                (rt, -(rt * e.rel_translation))
            }
            (None, None) => (Matrix3::identity(), Vector3::zeros()),
        };
        s.rotations[i] = so3::project_rotation(&(rp * dr));
        s.translations[i] = tp + rp * dt;
    }
    let mut seen = vec![false; g.n_landmarks()];
    for e in g.landmark_edges() {
        let j = e.landmark.0;
        if !seen[j] {
            seen[j] = true;
            s.landmarks[j] = s.translations[e.pose.0] + s.rotations[e.pose.0] * e.meas;
        }
    }
    s
}

/// Uniformly random rotations with translations and landmarks from variable
/// projection.
pub fn random_init<R: Rng + ?Sized>(g: &MeasurementGraph, rng: &mut R) -> Result<SlamState> {
    let rotations = (0..g.n_poses()).map(|_| so3::random_rotation(rng)).collect();
    state_from_rotations(g, rotations)
}

#[derive(Debug, Clone, Copy)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Stop when the Riemannian gradient norm falls below this value.
    pub grad_tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            grad_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub rotations: RotationBlock,
    pub cost: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Accepted costs, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Riemannian gradient of `p(R)` on `O(3)^N`: `R_i skew(R_iᵀ ∇_i)` with
/// `∇_i = 2 G_iᵀ`, `G = Q Rᵀ`.
fn riemannian_gradient(op: &DataMatrixOperator, r: &RotationBlock) -> Result<(f64, Vec<Matrix3<f64>>)> {
    let rt = r.transpose_stacked();
    let qrt = op.apply(&rt)?;
    let cost = rt.dot(&qrt);
    let grad = r
        .blocks
        .iter()
        .enumerate()
        .map(|(i, ri)| {
            let egrad = 2.0 * qrt.fixed_view::<3, 3>(3 * i, 0).transpose();
            let a = ri.transpose() * egrad;
            ri * (a - a.transpose()) * 0.5
        })
        .collect();
    Ok((cost, grad))
}

fn block_dot(a: &[Matrix3<f64>], b: &[Matrix3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Projected-gradient descent on `p(R)` with Barzilai-Borwein initial steps,
/// Armijo backtracking and polar retraction.
pub fn riemannian_refine(op: &DataMatrixOperator, r0: &RotationBlock, cfg: &RefineConfig) -> Result<RefineResult> {
    let mut r = r0.clone();
    let (mut cost, mut grad) = riemannian_gradient(op, &r)?;
    let mut gnorm = block_dot(&grad, &grad).sqrt();
    let mut history = vec![cost];
    let mut step = if gnorm > 0.0 { 1.0 / gnorm } else { 0.0 };
    let mut iterations = 0;
    while iterations < cfg.max_iters && gnorm >= cfg.grad_tol {
        iterations += 1;
        let g2 = gnorm * gnorm;
        let mut t = step;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = RotationBlock::new(
                r.blocks
                    .iter()
                    .zip(&grad)
                    .map(|(ri, gi)| so3::project_orthogonal(&(ri - gi * t)))
                    .collect(),
            );
            let c = op.evaluate_marginal_cost(&cand)?;
            if c <= cost - 1e-4 * t * g2 {
                accepted = Some((cand, c));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, c)) = accepted else { break };
        let (_, new_grad) = riemannian_gradient(op, &cand)?;
        // Barzilai-Borwein step from the (ambient) differences.
        let s: Vec<Matrix3<f64>> = cand.blocks.iter().zip(&r.blocks).map(|(a, b)| a - b).collect();
        let y: Vec<Matrix3<f64>> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = block_dot(&s, &y).abs();
        step = if sy > 0.0 { block_dot(&s, &s) / sy } else { 2.0 * t };
        r = cand;
        cost = c;
        grad = new_grad;
        gnorm = block_dot(&grad, &grad).sqrt();
        history.push(cost);
    }
    Ok(RefineResult {
        rotations: r,
        cost,
        iterations,
        grad_norm: gnorm,
        cost_history: history,
    })
}
