//! Data matrices of the rotation-only problem `min tr(Q RᵀR)` over `R ∈ O(3)^N`.
//!
//! `Q` is the sum of the rotation-averaging block `Q_r` and the marginalized
//! translation block `Q_bt`. The latter is available both as a dense brute-force
//! matrix (pseudoinverse of the weighted incidence matrix) and as
//! [`DataMatrixOperator`], which never forms `Q_bt` and is assembled in time linear
//! in the number of landmarks:
//!
//! ```text
//! Q_bt = S1 − S2 K⁻¹ S2ᵀ,   K = C Cᵀ
//! ```
//!
//! where `S1` (3N×3N), `S2` (3N×(N−1)) and `K` ((N−1)×(N−1)) are sums of
//! per-landmark and per-pose-edge contributions after eliminating each landmark
//! through its (diagonal) degree.

use std::collections::HashMap;

use nalgebra::{DMatrix, Matrix1, Matrix3, SMatrix, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::cholesky::SparseCholesky;
use crate::error::{Error, Result};
use crate::graph::{EdgeOrdering, EdgeRef, MeasurementGraph};
use crate::sparse::{CscMatrix, TripletBuilder};

/// Singular values below this fraction of the largest are treated as zero in the
/// dense pseudoinverse.
pub const PINV_RTOL: f64 = 1e-10;

/// Stacked rotations `R = [R_1 ⋯ R_N]` (3 × 3N).
#[derive(Debug, Clone, PartialEq)]
pub struct RotationBlock {
    pub blocks: Vec<Matrix3<f64>>,
}

impl RotationBlock {
    pub fn new(blocks: Vec<Matrix3<f64>>) -> Self {
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// `Rᵀ` as a dense `3N × 3` matrix.
    pub fn transpose_stacked(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(3 * self.blocks.len(), 3);
        for (i, r) in self.blocks.iter().enumerate() {
            m.fixed_view_mut::<3, 3>(3 * i, 0).copy_from(&r.transpose());
        }
        m
    }

    /// Inverse of [`Self::transpose_stacked`].
    pub fn from_transpose_stacked(m: &DMatrix<f64>) -> Self {
        assert_eq!(m.ncols(), 3);
        let n = m.nrows() / 3;
        Self {
            blocks: (0..n)
                .map(|i| m.fixed_view::<3, 3>(3 * i, 0).transpose())
                .collect(),
        }
    }

    /// Largest `‖R_i R_iᵀ − I‖_F` over the blocks.
    pub fn orthogonality_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(crate::so3::orthogonality_residual)
            .fold(0.0, f64::max)
    }

    /// Applies `G` on the left of every block.
    pub fn rotate_left(&self, g: &Matrix3<f64>) -> Self {
        Self {
            blocks: self.blocks.iter().map(|r| g * r).collect(),
        }
    }
}

/// Which subproblem the data matrix describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProblemVariant {
    /// Rotation averaging: `Q_r`.
    Ra,
    /// Pose-graph optimization: `Q_r + Q_t`.
    Pgo,
    /// Multiple point-cloud registration: `Q_b`.
    Mpcr,
    /// MPCR with relative translations: `Q_bt`.
    MpcrRt,
    /// MPCR with relative rotations: `Q_b + Q_r`.
    MpcrRr,
    /// Full landmark-based SLAM: `Q_bt + Q_r`.
    LandmarkSlam,
}

impl ProblemVariant {
    pub const ALL: [ProblemVariant; 6] = [
        ProblemVariant::Ra,
        ProblemVariant::Pgo,
        ProblemVariant::Mpcr,
        ProblemVariant::MpcrRt,
        ProblemVariant::MpcrRr,
        ProblemVariant::LandmarkSlam,
    ];

    pub fn uses_rotation_edges(self) -> bool {
        matches!(self, Self::Ra | Self::Pgo | Self::MpcrRr | Self::LandmarkSlam)
    }

    pub fn uses_landmark_edges(self) -> bool {
        matches!(self, Self::Mpcr | Self::MpcrRt | Self::MpcrRr | Self::LandmarkSlam)
    }

    pub fn uses_pose_translations(self) -> bool {
        matches!(self, Self::Pgo | Self::MpcrRt | Self::LandmarkSlam)
    }

    pub fn has_translation_part(self) -> bool {
        self.uses_landmark_edges() || self.uses_pose_translations()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ra => "RA",
            Self::Pgo => "PGO",
            Self::Mpcr => "MPCR",
            Self::MpcrRt => "MPCR_RT",
            Self::MpcrRr => "MPCR_RR",
            Self::LandmarkSlam => "SLAM",
        }
    }
}

impl std::str::FromStr for ProblemVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s}")))
    }
}

impl std::fmt::Display for ProblemVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Rotation-averaging data matrix `Q_r` (3N × 3N). Each pose edge `(i, k)` puts
/// `w I` on both diagonal blocks, `−w R̃` at `(i, k)` and `−w R̃ᵀ` at `(k, i)`, so
/// `tr(Q_r RᵀR)` equals the chordal rotation cost.
pub fn build_qr(g: &MeasurementGraph) -> CscMatrix {
    let n = 3 * g.n_poses();
    let mut t = TripletBuilder::with_capacity(n, n, 24 * g.pose_edges().len());
    for e in g.pose_edges() {
        let (i, k, w) = (e.from.0, e.to.0, e.w_r);
        for a in 0..3 {
            t.push(3 * i + a, 3 * i + a, w);
            t.push(3 * k + a, 3 * k + a, w);
            for b in 0..3 {
                let v = -w * e.rel_rotation[(a, b)];
                t.push(3 * i + a, 3 * k + b, v);
                t.push(3 * k + b, 3 * i + a, v);
            }
        }
    }
    t.build()
}

/// Ordering positions of the translation edges a variant uses, and whether landmark
/// vertices take part.
fn variant_edges(ord: &EdgeOrdering, variant: ProblemVariant) -> Vec<usize> {
    ord.edges()
        .iter()
        .enumerate()
        .filter(|(_, e)| match e {
            EdgeRef::Landmark(_) => variant.uses_landmark_edges(),
            EdgeRef::Pose(_) => variant.uses_pose_translations(),
        })
        .map(|(c, _)| c)
        .collect()
}

fn check_variant_connected(g: &MeasurementGraph, variant: ProblemVariant) -> Result<()> {
    if variant.has_translation_part()
        && !g.is_connected(variant.uses_landmark_edges(), variant.uses_pose_translations())
    {
        return Err(Error::VariantSubgraphDisconnected(variant.name().into()));
    }
    Ok(())
}

/// Dense pieces of the translation cost restricted to a variant:
/// `T = V̄ᵖ Y` (3N × E) and the weighted incidence `V` (|V| × E).
pub struct DenseTranslationParts {
    pub t: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

pub fn dense_translation_parts(
    g: &MeasurementGraph,
    ord: &EdgeOrdering,
    variant: ProblemVariant,
) -> DenseTranslationParts {
    let cols = variant_edges(ord, variant);
    let nv = if variant.uses_landmark_edges() { g.n_vertices() } else { g.n_poses() };
    let mut t = DMatrix::zeros(3 * g.n_poses(), cols.len());
    let mut v = DMatrix::zeros(nv, cols.len());
    for (c, &pos) in cols.iter().enumerate() {
        let e = ord.edges()[pos];
        let (tail, head) = g.endpoints(e);
        let sw = g.translation_weight(e).sqrt();
        let y = g.measurement(e);
        for a in 0..3 {
            t[(3 * tail + a, c)] = sw * y[a];
        }
        v[(tail, c)] = -sw;
        v[(head, c)] = sw;
    }
    DenseTranslationParts { t, v }
}

/// Moore–Penrose pseudoinverse `M⁺ = Mᵀ (M Mᵀ)⁺` (or `(Mᵀ M)⁺ Mᵀ` for tall `M`),
/// with the Gram pseudoinverse from a symmetric eigendecomposition truncated below
/// `PINV_RTOL · λ_max`. nalgebra's SVD loses accuracy on some rank-deficient
/// incidence matrices (reconstruction errors near 1e-4), so it is not used here.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let wide = m.nrows() <= m.ncols();
    let gram = if wide { m * m.transpose() } else { m.transpose() * m };
    let eig = SymmetricEigen::new(gram);
    let cutoff = PINV_RTOL * eig.eigenvalues.amax();
    let mut gp = DMatrix::zeros(eig.eigenvalues.len(), eig.eigenvalues.len());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > cutoff {
            let u = eig.eigenvectors.column(k);
            gp += (u * u.transpose()) / l;
        }
    }
    if wide {
        m.transpose() * gp
    } else {
        gp * m.transpose()
    }
}

/// Orthogonal projector onto `ker(V)`: `A = I − V⁺ V`.
pub fn projection_dense(v: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::identity(v.ncols(), v.ncols()) - pseudo_inverse(v) * v
}

/// Reduced projector `A' = I − V'ᵀ (V' V'ᵀ)⁻¹ V'` with the first row of `V` removed.
pub fn reduced_projection_dense(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let vr = v.rows(1, v.nrows() - 1).into_owned();
    let lr = &vr * vr.transpose();
    let chol = lr.cholesky().ok_or(Error::SingularReducedSystem { column: 0, pivot: 0.0 })?;
    let x = chol.solve(&vr);
    Ok(DMatrix::identity(v.ncols(), v.ncols()) - vr.transpose() * x)
}

/// Brute-force translation data matrix `T A Tᵀ` for the variant's edge subset
/// (`Q_b`, `Q_t` or `Q_bt`; zero for rotation averaging).
pub fn build_qbt_dense(g: &MeasurementGraph, ord: &EdgeOrdering, variant: ProblemVariant) -> Result<DMatrix<f64>> {
    let n = 3 * g.n_poses();
    if !variant.has_translation_part() {
        return Ok(DMatrix::zeros(n, n));
    }
    check_variant_connected(g, variant)?;
    let parts = dense_translation_parts(g, ord, variant);
    let a = projection_dense(&parts.v);
    let q = &parts.t * a * parts.t.transpose();
    Ok((&q + q.transpose()) * 0.5)
}

/// Full dense data matrix `Q` of a variant (oracle path).
pub fn build_q_dense(g: &MeasurementGraph, ord: &EdgeOrdering, variant: ProblemVariant) -> Result<DMatrix<f64>> {
    let mut q = build_qbt_dense(g, ord, variant)?;
    if variant.uses_rotation_edges() {
        q += build_qr(g).to_dense();
    }
    Ok(q)
}

/// Options for operator assembly.
#[derive(Debug, Clone, Copy, Default)]
pub struct AssemblyOptions {
    /// Accumulate per-landmark sums on the rayon pool. Results are then reproducible
    /// only to rounding (~1e-13 relative), not bit for bit.
    pub parallel: bool,
}

/// Implicit `Q = Q_r + S1 − S2 (C Cᵀ)⁻¹ S2ᵀ`.
#[derive(Debug, Clone)]
pub struct DataMatrixOperator {
    n_poses: usize,
    variant: ProblemVariant,
    qr: Option<CscMatrix>,
    translation: Option<TranslationBlocks>,
}

#[derive(Debug, Clone)]
pub struct TranslationBlocks {
    pub s1: CscMatrix,
    pub s2: CscMatrix,
    pub chol: SparseCholesky,
}

/// Everything one unordered pose pair `(a, b)`, `a <= b`, contributes: the `S1`
/// block at `(a, b)`, the `S2` entries at `(a, b − 1)` and `(b, a − 1)`, and the
/// `K` entry at `(a − 1, b − 1)`. Keeping them together costs one lookup per pair.
#[derive(Clone, Copy)]
struct PairBlock {
    s1: Matrix3<f64>,
    s2_ab: Vector3<f64>,
    s2_ba: Vector3<f64>,
    k: f64,
}

impl Default for PairBlock {
    fn default() -> Self {
        Self {
            s1: Matrix3::zeros(),
            s2_ab: Vector3::zeros(),
            s2_ba: Vector3::zeros(),
            k: 0.0,
        }
    }
}

/// Pair blocks in first-touch order, indexed by a hash map. The mirror of the
/// symmetric blocks is written when converting to CSC.
#[derive(Default)]
struct Accumulator {
    index: HashMap<(usize, usize), usize>,
    pairs: Vec<((usize, usize), PairBlock)>,
}

impl Accumulator {
    fn with_capacity(n: usize) -> Self {
        Self {
            index: HashMap::with_capacity(n),
            pairs: Vec::with_capacity(n),
        }
    }

    fn pair(&mut self, a: usize, b: usize) -> &mut PairBlock {
        debug_assert!(a <= b);
        let next = self.pairs.len();
        let i = *self.index.entry((a, b)).or_insert(next);
        if i == next {
            self.pairs.push(((a, b), PairBlock::default()));
        }
        &mut self.pairs[i].1
    }

    fn merge(&mut self, other: Accumulator) {
        for ((a, b), blk) in other.pairs {
            let p = self.pair(a, b);
            p.s1 += blk.s1;
            p.s2_ab += blk.s2_ab;
            p.s2_ba += blk.s2_ba;
            p.k += blk.k;
        }
    }

    /// Adds `S1[p, q] += m`, `S2[p, q − 1] += u`, `S2[q, p − 1] += v` and
    /// `K[p − 1, q − 1] += k` (and the symmetric counterparts).
    fn add(&mut self, p: usize, q: usize, m: Matrix3<f64>, u: Vector3<f64>, v: Vector3<f64>, k: f64) {
        if p <= q {
            let blk = self.pair(p, q);
            blk.s1 += m;
            blk.s2_ab += u;
            blk.s2_ba += v;
            blk.k += k;
        } else {
            let blk = self.pair(q, p);
            blk.s1 += m.transpose();
            blk.s2_ab += v;
            blk.s2_ba += u;
            blk.k += k;
        }
    }

    /// Contribution of one landmark observed through `obs = [(pose, w, y)]`.
    /// Poses observing the landmark several times are aggregated first.
    fn add_landmark(&mut self, obs: &[(usize, f64, Vector3<f64>)], want_s: bool) {
        let degree: f64 = obs.iter().map(|o| o.1).sum();
        // Aggregate per distinct pose, preserving first-seen order.
        let mut agg: Vec<(usize, f64, Vector3<f64>, Matrix3<f64>)> = Vec::with_capacity(obs.len());
        for &(p, w, y) in obs {
            let wy = w * y;
            let yy = wy * y.transpose();
            match agg.iter_mut().find(|a| a.0 == p) {
                Some(a) => {
                    a.1 += w;
                    a.2 += wy;
                    a.3 += yy;
                }
                None => agg.push((p, w, wy, yy)),
            }
        }
        let inv_d = 1.0 / degree;
        let zero = Vector3::zeros();
        for (ia, &(p, wp, ap, yyp)) in agg.iter().enumerate() {
            if want_s {
                self.add(p, p, yyp, -ap, zero, wp);
            } else {
                self.add(p, p, Matrix3::zeros(), zero, zero, wp);
            }
            for &(q, wq, aq, _) in &agg[ia..] {
                let k = -wp * wq * inv_d;
                if want_s {
                    let m = -(ap * aq.transpose()) * inv_d;
                    let v = if q != p { aq * (wp * inv_d) } else { zero };
                    self.add(p, q, m, ap * (wq * inv_d), v, k);
                } else {
                    self.add(p, q, Matrix3::zeros(), zero, zero, k);
                }
            }
        }
    }

    fn add_pose_edge(&mut self, i: usize, k: usize, w: f64, t: Vector3<f64>, want_s: bool) {
        let zero = Vector3::zeros();
        let (m, d) = if want_s { ((w * t) * t.transpose(), w * t) } else { (Matrix3::zeros(), zero) };
        self.add(i, i, m, -d, zero, w);
        self.add(k, k, Matrix3::zeros(), zero, zero, w);
        self.add(i, k, Matrix3::zeros(), d, zero, -w);
    }

    fn into_matrices(self, n_poses: usize) -> (CscMatrix, CscMatrix, CscMatrix) {
        let n3 = 3 * n_poses;
        let nk = n_poses.saturating_sub(1);
        let mut s1 = Vec::with_capacity(2 * self.pairs.len());
        let mut s2 = Vec::with_capacity(2 * self.pairs.len());
        let mut k = Vec::with_capacity(2 * self.pairs.len());
        for ((a, b), blk) in self.pairs {
            if a == b {
                // Averaged with its transpose so S1 is exactly symmetric.
                s1.push(((a, a), (blk.s1 + blk.s1.transpose()) * 0.5));
                if a > 0 {
                    s2.push(((a, a - 1), blk.s2_ab + blk.s2_ba));
                    k.push(((a - 1, a - 1), Matrix1::new(blk.k)));
                }
            } else {
                s1.push(((a, b), blk.s1));
                s1.push(((b, a), blk.s1.transpose()));
                s2.push(((a, b - 1), blk.s2_ab));
                if a > 0 {
                    s2.push(((b, a - 1), blk.s2_ba));
                    k.push(((a - 1, b - 1), Matrix1::new(blk.k)));
                    k.push(((b - 1, a - 1), Matrix1::new(blk.k)));
                }
            }
        }
        (
            csc_from_blocks(n3, n3, s1),
            csc_from_blocks(n3, nk, s2),
            csc_from_blocks(nk, nk, k),
        )
    }
}

/// CSC matrix from dense `R × C` blocks at distinct block positions `(row, col)`.
/// Block indices are bucketed by block column and sorted by block row, so the cost
/// is proportional to the number of blocks.
fn csc_from_blocks<const R: usize, const C: usize>(
    nrows: usize,
    ncols: usize,
    blocks: Vec<((usize, usize), SMatrix<f64, R, C>)>,
) -> CscMatrix {
    let nbc = ncols / C;
    let mut start = vec![0usize; nbc + 1];
    for ((_, cb), _) in &blocks {
        start[cb + 1] += 1;
    }
    for c in 0..nbc {
        start[c + 1] += start[c];
    }
    // Sort keys pack the block row above the block index.
    let mut next = start.clone();
    let mut order = vec![0u64; blocks.len()];
    for (i, ((rb, cb), _)) in blocks.iter().enumerate() {
        order[next[*cb]] = ((*rb as u64) << 32) | i as u64;
        next[*cb] += 1;
    }
    let mut col_ptr = vec![0usize; ncols + 1];
    let mut row_idx = Vec::with_capacity(R * C * blocks.len());
    let mut values = Vec::with_capacity(R * C * blocks.len());
    for cb in 0..nbc {
        let col = &mut order[start[cb]..start[cb + 1]];
        col.sort_unstable();
        for b in 0..C {
            for &key in col.iter() {
                let ((rb, _), m) = &blocks[(key & 0xffff_ffff) as usize];
                row_idx.extend(R * rb..R * rb + R);
                // Columns of a fixed-size matrix are contiguous.
                values.extend_from_slice(&m.as_slice()[R * b..R * b + R]);
            }
            col_ptr[C * cb + b + 1] = row_idx.len();
        }
    }
    CscMatrix::from_parts(nrows, ncols, col_ptr, row_idx, values).expect("blocks are distinct and in range")
}

fn landmark_observations(g: &MeasurementGraph, ord: &EdgeOrdering, j: usize) -> Vec<(usize, f64, Vector3<f64>)> {
    ord.edges()[ord.landmark_block(j)]
        .iter()
        .map(|&e| match e {
            EdgeRef::Landmark(k) => {
                let le = &g.landmark_edges()[k];
                (le.pose.0, le.w_b, le.meas)
            }
            EdgeRef::Pose(_) => unreachable!("pose edge inside a landmark block"),
        })
        .collect()
}

/// Upper bound on the number of distinct pose pairs, used to size the accumulator
/// up front. Capped so very large pose counts do not over-allocate.
fn pair_count_bound(g: &MeasurementGraph, ord: &EdgeOrdering, with_landmarks: bool, with_poses: bool) -> usize {
    const CAP: usize = 1 << 20;
    let np = g.n_poses();
    let mut n = 0usize;
    if with_landmarks {
        for j in 0..g.n_landmarks() {
            let k = ord.landmark_block(j).len();
            n = n.saturating_add(k * (k + 1) / 2);
        }
    }
    if with_poses {
        n = n.saturating_add(3 * g.pose_edges().len());
    }
    n.min(np * (np + 1) / 2).min(CAP)
}

fn accumulate(
    g: &MeasurementGraph,
    ord: &EdgeOrdering,
    with_landmarks: bool,
    with_poses: bool,
    want_s: bool,
    opts: AssemblyOptions,
) -> Accumulator {
    let mut acc = Accumulator::with_capacity(pair_count_bound(g, ord, with_landmarks, with_poses));
    if with_landmarks {
        if opts.parallel && g.n_landmarks() > 64 {
            let n_chunks = rayon::current_num_threads().max(1) * 4;
            let chunk = g.n_landmarks().div_ceil(n_chunks);
            let parts: Vec<Accumulator> = (0..g.n_landmarks())
                .collect::<Vec<_>>()
                .par_chunks(chunk)
                .map(|js| {
                    let mut a = Accumulator::default();
                    for &j in js {
                        a.add_landmark(&landmark_observations(g, ord, j), want_s);
                    }
                    a
                })
                .collect();
            for p in parts {
                acc.merge(p);
            }
        } else {
            for j in 0..g.n_landmarks() {
                acc.add_landmark(&landmark_observations(g, ord, j), want_s);
            }
        }
    }
    if with_poses {
        for e in g.pose_edges() {
            acc.add_pose_edge(e.from.0, e.to.0, e.w_t, e.rel_translation, want_s);
        }
    }
    acc
}

/// Reduced Schur complement `K = V'_p E V'_pᵀ` of the full translation graph with
/// pose 0 removed; equals the reduced Laplacian with landmarks eliminated.
pub fn reduced_schur_laplacian(g: &MeasurementGraph, ord: &EdgeOrdering) -> CscMatrix {
    let acc = accumulate(g, ord, true, true, false, AssemblyOptions::default());
    acc.into_matrices(g.n_poses()).2
}

/// Assembles the implicit operator for a variant.
pub fn build_qbt_operator(
    g: &MeasurementGraph,
    ord: &EdgeOrdering,
    variant: ProblemVariant,
) -> Result<DataMatrixOperator> {
    build_qbt_operator_with(g, ord, variant, AssemblyOptions::default())
}

pub fn build_qbt_operator_with(
    g: &MeasurementGraph,
    ord: &EdgeOrdering,
    variant: ProblemVariant,
    opts: AssemblyOptions,
) -> Result<DataMatrixOperator> {
    let qr = variant.uses_rotation_edges().then(|| build_qr(g));
    let translation = if variant.has_translation_part() {
        let acc = accumulate(
            g,
            ord,
            variant.uses_landmark_edges(),
            variant.uses_pose_translations(),
            true,
            opts,
        );
        let (s1, s2, k) = acc.into_matrices(g.n_poses());
        let chol = SparseCholesky::factor(&k)?;
        Some(TranslationBlocks { s1, s2, chol })
    } else {
        None
    };
    Ok(DataMatrixOperator {
        n_poses: g.n_poses(),
        variant,
        qr,
        translation,
    })
}

impl DataMatrixOperator {
    pub fn n_poses(&self) -> usize {
        self.n_poses
    }

    pub fn dim(&self) -> usize {
        3 * self.n_poses
    }

    pub fn variant(&self) -> ProblemVariant {
        self.variant
    }

    pub fn qr_part(&self) -> Option<&CscMatrix> {
        self.qr.as_ref()
    }

    pub fn translation_blocks(&self) -> Option<&TranslationBlocks> {
        self.translation.as_ref()
    }

    /// `Q X` for a `3N × m` matrix.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} rows", self.dim()),
                actual: format!("{} rows", x.nrows()),
            });
        }
        let mut y = DMatrix::zeros(x.nrows(), x.ncols());
        if let Some(qr) = &self.qr {
            qr.mul_dense_acc(x, 1.0, &mut y);
        }
        if let Some(tb) = &self.translation {
            tb.s1.mul_dense_acc(x, 1.0, &mut y);
            if tb.chol.dim() > 0 {
                let z = tb.chol.solve(&tb.s2.tr_mul_dense(x));
                tb.s2.mul_dense_acc(&z, -1.0, &mut y);
            }
        }
        Ok(y)
    }

    /// Dense `Q` (small problems only), symmetrized to remove solve round-off.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let q = self
            .apply(&DMatrix::identity(self.dim(), self.dim()))
            .expect("dimension matches");
        (&q + q.transpose()) * 0.5
    }

    /// Diagonal of `Q`.
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim()];
        if let Some(qr) = &self.qr {
            for (i, v) in qr.diagonal().into_iter().enumerate() {
                d[i] += v;
            }
        }
        if let Some(tb) = &self.translation {
            for (i, v) in tb.s1.diagonal().into_iter().enumerate() {
                d[i] += v;
            }
            if tb.chol.dim() > 0 {
                let s2t = tb.s2.transpose().to_dense();
                for (i, v) in tb.chol.inverse_quadratic_forms(&s2t).into_iter().enumerate() {
                    d[i] -= v;
                }
            }
        }
        d
    }

    /// Mean diagonal entry of `Q`; the natural scale of its spectrum.
    pub fn mean_diagonal(&self) -> f64 {
        let d = self.diagonal();
        if d.is_empty() {
            0.0
        } else {
            d.iter().sum::<f64>() / d.len() as f64
        }
    }

    /// `p(R) = tr(Q RᵀR) = ⟨Rᵀ, Q Rᵀ⟩`.
    pub fn evaluate_marginal_cost(&self, r: &RotationBlock) -> Result<f64> {
        let rt = r.transpose_stacked();
        let qrt = self.apply(&rt)?;
        Ok(rt.dot(&qrt))
    }
}

/// Free-function form of [`DataMatrixOperator::apply`].
pub fn apply(op: &DataMatrixOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    op.apply(x)
}

/// Free-function form of [`DataMatrixOperator::evaluate_marginal_cost`].
pub fn evaluate_marginal_cost(op: &DataMatrixOperator, r: &RotationBlock) -> Result<f64> {
    op.evaluate_marginal_cost(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{canonical_ordering, LandmarkId, PoseId, PoseLandmarkEdge, PosePoseEdge};
    use crate::so3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pose_edge(from: usize, to: usize, r: Matrix3<f64>, w: f64) -> PosePoseEdge {
        PosePoseEdge {
            from: PoseId(from),
            to: PoseId(to),
            rel_rotation: r,
            rel_translation: Vector3::new(1.0, 0.5, -0.2),
            w_r: w,
            w_t: 1.0,
        }
    }

    /// Direct chordal cost `Σ w ‖R_i R̃ − R_k‖²`.
    fn chordal_cost(g: &MeasurementGraph, r: &RotationBlock) -> f64 {
        g.pose_edges()
            .iter()
            .map(|e| e.w_r * (r.blocks[e.from.0] * e.rel_rotation - r.blocks[e.to.0]).norm_squared())
            .sum()
    }

    #[test]
    fn qr_two_poses_identity() {
        let g = MeasurementGraph::new(2, 0, vec![], vec![pose_edge(0, 1, Matrix3::identity(), 1.0)]).unwrap();
        let q = build_qr(&g).to_dense();
        let i3 = Matrix3::<f64>::identity();
        let mut want = DMatrix::zeros(6, 6);
        want.fixed_view_mut::<3, 3>(0, 0).copy_from(&i3);
        want.fixed_view_mut::<3, 3>(3, 3).copy_from(&i3);
        want.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-i3));
        want.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-i3));
        assert_eq!(q, want);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut a = so3::random_rotation(&mut rng);
            if rand::Rng::random_bool(&mut rng, 0.5) {
                a = -a; // O(3) member with det −1
            }
            let rb = RotationBlock::new(vec![a, so3::random_rotation(&mut rng)]);
            let rt = rb.transpose_stacked();
            let trace = (&q * &rt).dot(&rt);
            assert!((trace - chordal_cost(&g, &rb)).abs() < 1e-12);
        }
    }

    #[test]
    fn qr_without_pose_edges_is_zero() {
        let g = MeasurementGraph::new(
            1,
            1,
            vec![PoseLandmarkEdge {
                pose: PoseId(0),
                landmark: LandmarkId(0),
                meas: Vector3::zeros(),
                w_b: 1.0,
            }],
            vec![],
        )
        .unwrap();
        assert_eq!(build_qr(&g).nnz(), 0);
    }

    #[test]
    fn qr_matches_chordal_cost_on_random_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let edges = vec![
            pose_edge(0, 1, so3::random_rotation(&mut rng), 0.7),
            pose_edge(1, 2, so3::random_rotation(&mut rng), 1.3),
            pose_edge(2, 0, so3::random_rotation(&mut rng), 2.0),
            pose_edge(0, 2, so3::random_rotation(&mut rng), 0.4),
        ];
        let g = MeasurementGraph::new(3, 0, vec![], edges).unwrap();
        let q = build_qr(&g).to_dense();
        assert!((&q - q.transpose()).amax() == 0.0);
        assert!(q.clone().symmetric_eigenvalues().min() > -1e-12);
        for _ in 0..50 {
            let rb = RotationBlock::new((0..3).map(|_| so3::random_rotation(&mut rng)).collect());
            let rt = rb.transpose_stacked();
            assert!(((&q * &rt).dot(&rt) - chordal_cost(&g, &rb)).abs() < 1e-11);
        }
    }

    #[test]
    fn single_measurement_gives_zero_matrix() {
        let g = MeasurementGraph::new(
            1,
            1,
            vec![PoseLandmarkEdge {
                pose: PoseId(0),
                landmark: LandmarkId(0),
                meas: Vector3::new(1.0, 2.0, 3.0),
                w_b: 2.0,
            }],
            vec![],
        )
        .unwrap();
        let ord = canonical_ordering(&g);
        let dense = build_qbt_dense(&g, &ord, ProblemVariant::Mpcr).unwrap();
        assert!(dense.amax() < 1e-14);
        let op = build_qbt_operator(&g, &ord, ProblemVariant::LandmarkSlam).unwrap();
        assert!(op.to_dense().amax() < 1e-14);
    }

    #[test]
    fn apply_rejects_wrong_dimension() {
        let g = MeasurementGraph::new(2, 0, vec![], vec![pose_edge(0, 1, Matrix3::identity(), 1.0)]).unwrap();
        let op = build_qbt_operator(&g, &canonical_ordering(&g), ProblemVariant::Pgo).unwrap();
        assert!(matches!(op.apply(&DMatrix::zeros(5, 1)), Err(Error::DimensionMismatch { .. })));
        assert_eq!(op.apply(&DMatrix::zeros(6, 2)).unwrap(), DMatrix::zeros(6, 2));
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in ProblemVariant::ALL {
            assert_eq!(v.name().parse::<ProblemVariant>().unwrap(), v);
        }
        assert!("nope".parse::<ProblemVariant>().is_err());
    }
}
