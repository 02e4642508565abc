//! Global-optimality certificate for a candidate rotation set.
//!
//! At a first-order critical point `R*` of `min tr(Q RᵀR)` over `O(3)^N` the
//! multipliers `Λ_i = Σ_j Q_ij R_jᵀ R_i` are determined in closed form. If
//! `H = Q − Λ` is positive semidefinite, `R*` is a global minimizer and the dual
//! value `tr(Λ)` equals the primal cost.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::datamatrix::{DataMatrixOperator, RotationBlock};
use crate::error::{Error, Result};
use crate::lanczos::{dense_eigenvalues, smallest_eigenvalues, LanczosConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierBlocks {
    /// Symmetrized blocks `Λ_i`.
    pub blocks: Vec<Matrix3<f64>>,
    /// Largest `‖Λ_i − Λ_iᵀ‖_max` before symmetrization.
    pub asymmetry: f64,
}

impl MultiplierBlocks {
    pub fn trace_sum(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace()).sum()
    }

    /// `Λ X` for a `3N × m` matrix.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(x.nrows(), x.ncols());
        for (i, b) in self.blocks.iter().enumerate() {
            let xi = x.rows(3 * i, 3);
            y.rows_mut(3 * i, 3).copy_from(&(b * xi));
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = 3 * self.blocks.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, b) in self.blocks.iter().enumerate() {
            m.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(b);
        }
        m
    }
}

/// `Λ_i = (Q Rᵀ)_i R_i`, symmetrized.
pub fn compute_lambda(op: &DataMatrixOperator, r: &RotationBlock) -> Result<MultiplierBlocks> {
    let g = op.apply(&r.transpose_stacked())?;
    let mut asymmetry: f64 = 0.0;
    let blocks = r
        .blocks
        .iter()
        .enumerate()
        .map(|(i, ri)| {
            let l = g.fixed_view::<3, 3>(3 * i, 0) * ri;
            asymmetry = asymmetry.max((l - l.transpose()).amax());
            (l + l.transpose()) * 0.5
        })
        .collect();
    Ok(MultiplierBlocks { blocks, asymmetry })
}

#[derive(Debug, Clone, Copy)]
pub struct CertifyConfig {
    /// Pass iff `λ_min(H) / scale > threshold`, with `scale` the mean diagonal of `Q`.
    pub threshold: f64,
    /// Eigenvalues at most `corank_tol · scale` count toward the corank.
    pub corank_tol: f64,
    /// Upper limit on the number of near-null eigenvalues extracted.
    pub max_corank: usize,
    /// Dense eigensolver fallback when Lanczos stalls and `3N` is at most this.
    pub dense_fallback_dim: usize,
    pub lanczos: LanczosConfig,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            threshold: -1e-8,
            corank_tol: 1e-8,
            max_corank: 12,
            dense_fallback_dim: 600,
            lanczos: LanczosConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub min_eig: f64,
    /// `min_eig / scale`, the quantity compared against the threshold.
    pub min_eig_normalized: f64,
    /// Mean diagonal entry of `Q`.
    pub scale: f64,
    pub pass: bool,
    pub primal_cost: f64,
    pub dual_value: f64,
    pub asymmetry: f64,
    /// `‖H R*ᵀ‖_F`.
    pub stationarity_residual: f64,
    pub lanczos_iters: usize,
    pub corank_estimate: usize,
    pub dense_fallback: bool,
}

/// `H X = Q X − Λ X`.
pub fn apply_h(op: &DataMatrixOperator, lambda: &MultiplierBlocks, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(op.apply(x)? - lambda.apply(x))
}

/// Dense `H` (small problems only).
pub fn dense_h(op: &DataMatrixOperator, lambda: &MultiplierBlocks) -> DMatrix<f64> {
    let h = op.to_dense() - lambda.to_dense();
    (&h + h.transpose()) * 0.5
}

/// Tests `H = Q − Λ(R) ⪰ 0`.
pub fn certify(op: &DataMatrixOperator, r: &RotationBlock, cfg: &CertifyConfig) -> Result<CertificateReport> {
    if r.len() != op.n_poses() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} rotations", op.n_poses()),
            actual: format!("{}", r.len()),
        });
    }
    let lambda = compute_lambda(op, r)?;
    let rt = r.transpose_stacked();
    let qrt = op.apply(&rt)?;
    let primal_cost = rt.dot(&qrt);
    let stationarity_residual = (&qrt - lambda.apply(&rt)).norm();
    let dual_value = lambda.trace_sum();
    let mean_diag = op.mean_diagonal();
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let n = op.dim();

    let h_apply = |x: &DVector<f64>| -> DVector<f64> {
        let xm = DMatrix::from_column_slice(n, 1, x.as_slice());
        let y = op.apply(&xm).expect("dimension checked") - lambda.apply(&xm);
        DVector::from_column_slice(y.as_slice())
    };
    let count_above = cfg.corank_tol * scale;
    let (eigs, iters, dense_fallback) =
        match smallest_eigenvalues(&h_apply, n, count_above, cfg.max_corank, &cfg.lanczos) {
            Ok(res) => (res.eigenvalues, res.iterations, false),
            Err(Error::EigenStalled { .. }) if n <= cfg.dense_fallback_dim => {
                let ev = dense_eigenvalues(&dense_h(op, &lambda));
                (ev, 0, true)
            }
            Err(e) => return Err(e),
        };
    let min_eig = eigs[0];
    let corank_estimate = eigs.iter().take(cfg.max_corank).filter(|&&l| l <= count_above).count();
    let min_eig_normalized = min_eig / scale;
    Ok(CertificateReport {
        min_eig,
        min_eig_normalized,
        scale,
        pass: min_eig_normalized > cfg.threshold,
        primal_cost,
        dual_value,
        asymmetry: lambda.asymmetry,
        stationarity_residual,
        lanczos_iters: iters,
        corank_estimate,
        dense_fallback,
    })
}

/// `(primal − dual_reference) / dual_reference`.
pub fn optimality_gap(primal: f64, dual_reference: f64) -> Result<f64> {
    if !(dual_reference > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dual reference must be positive, got {dual_reference}"
        )));
    }
    Ok((primal - dual_reference) / dual_reference)
}
