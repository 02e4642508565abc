//! Extreme eigenvalues of implicit symmetric operators.
//!
//! Thick-restart Lanczos with full reorthogonalization finds the largest eigenpair
//! of `A = σI − H`; converged eigenvectors are locked and the search repeats in
//! their orthogonal complement, so repeated eigenvalues (e.g. a multi-dimensional
//! null space) are resolved one copy at a time.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LanczosConfig {
    /// Maximum Krylov basis size before a restart.
    pub max_krylov: usize,
    /// Ritz vectors kept on restart.
    pub keep: usize,
    /// Residual tolerance relative to the spectral scale estimate.
    pub rel_tol: f64,
    /// Restarts allowed per eigenpair.
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for LanczosConfig {
    fn default() -> Self {
        Self {
            max_krylov: 200,
            keep: 10,
            rel_tol: 1e-12,
            max_restarts: 100,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Smallest eigenvalues found, ascending.
    pub eigenvalues: Vec<f64>,
    /// Operator applications.
    pub iterations: usize,
    /// Largest final residual norm among the returned pairs.
    pub residual: f64,
    /// Shift used.
    pub sigma: f64,
}

impl EigenResult {
    pub fn min_eig(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// Number of found eigenvalues not above `threshold`.
    pub fn count_below(&self, threshold: f64) -> usize {
        self.eigenvalues.iter().filter(|&&l| l <= threshold).count()
    }
}

struct Shifted<'a, F> {
    apply: &'a F,
    sigma: f64,
    count: usize,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> Shifted<'_, F> {
    fn apply(&mut self, x: &DVector<f64>) -> DVector<f64> {
        self.count += 1;
        x * self.sigma - (self.apply)(x)
    }
}

/// Removes the components along `basis` (twice, for stability).
fn orthogonalize(x: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(x);
            x.axpy(-c, b, 1.0);
        }
    }
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng, against: &[&[DVector<f64>]]) -> Option<DVector<f64>> {
    for _ in 0..10 {
        let mut x = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        for b in against {
            orthogonalize(&mut x, b);
        }
        let nx = x.norm();
        if nx > 1e-8 {
            return Some(x / nx);
        }
    }
    None
}

/// Estimate of `max |λ(H)|` from a few power iterations, inflated for safety.
fn spectral_scale<F: Fn(&DVector<f64>) -> DVector<f64>>(apply: &F, n: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
    let mut x = random_unit(n, rng, &[]).expect("nonzero dimension");
    let mut est: f64 = 0.0;
    let iters = 12;
    for _ in 0..iters {
        let y = apply(&x);
        let ny = y.norm();
        est = est.max(ny);
        if ny == 0.0 {
            break;
        }
        x = y / ny;
    }
    (1.1 * est, iters)
}

/// Largest eigenpair of `A` restricted to the complement of `locked`.
fn largest_pair<F: Fn(&DVector<f64>) -> DVector<f64>>(
    a: &mut Shifted<'_, F>,
    n: usize,
    locked: &[DVector<f64>],
    tol: f64,
    cfg: &LanczosConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, DVector<f64>, f64)> {
    let free = n - locked.len();
    let cap = cfg.max_krylov.min(free).max(1);
    let keep = cfg.keep.min(cap.saturating_sub(1)).max(1);
    let mut v: Vec<DVector<f64>> = Vec::with_capacity(cap);
    let mut w: Vec<DVector<f64>> = Vec::with_capacity(cap);
    let mut next = random_unit(n, rng, &[locked]);
    let mut restarts = 0;
    loop {
        // Expand until the cap, a breakdown or a periodic convergence check.
        while v.len() < cap {
            let q = match next.take() {
                Some(q) => q,
                None => break,
            };
            let mut aq = a.apply(&q);
            orthogonalize(&mut aq, locked);
            v.push(q);
            let mut cand = aq.clone();
            w.push(aq);
            orthogonalize(&mut cand, &v);
            orthogonalize(&mut cand, locked);
            let nc = cand.norm();
            let scale = w.last().map(|x| x.norm()).unwrap_or(0.0).max(tol);
            next = if nc > 1e-10 * scale { Some(cand / nc) } else { None };
            if v.len().is_multiple_of(20) {
                break;
            }
        }

        // Rayleigh-Ritz on the current basis.
        let m = v.len();
        let mut t = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let x = 0.5 * (v[i].dot(&w[j]) + v[j].dot(&w[i]));
                t[(i, j)] = x;
                t[(j, i)] = x;
            }
        }
        let eig = SymmetricEigen::new(t);
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
        let top = idx[0];
        let theta = eig.eigenvalues[top];
        let s = eig.eigenvectors.column(top);
        let mut y = DVector::zeros(n);
        let mut r = DVector::zeros(n);
        for k in 0..m {
            y.axpy(s[k], &v[k], 1.0);
            r.axpy(s[k], &w[k], 1.0);
        }
        r.axpy(-theta, &y, 1.0);
        let res = r.norm();
        if res <= tol || m == free {
            let ny = y.norm();
            return Ok((theta, y / ny, res));
        }

        if next.is_none() || m >= cap {
            if m >= cap {
                restarts += 1;
                if restarts > cfg.max_restarts {
                    return Err(Error::EigenStalled {
                        iterations: a.count,
                        residual: res,
                    });
                }
                let kept: Vec<usize> = idx.iter().copied().take(keep).collect();
                let mut nv = Vec::with_capacity(cap);
                let mut nw = Vec::with_capacity(cap);
                for &c in &kept {
                    let sc = eig.eigenvectors.column(c);
                    let mut vy = DVector::zeros(n);
                    let mut wy = DVector::zeros(n);
                    for k in 0..m {
                        vy.axpy(sc[k], &v[k], 1.0);
                        wy.axpy(sc[k], &w[k], 1.0);
                    }
                    nv.push(vy);
                    nw.push(wy);
                }
                v = nv;
                w = nw;
                // Continue from the residual direction of the leading Ritz pair.
                let mut c = r;
                orthogonalize(&mut c, &v);
                orthogonalize(&mut c, locked);
                let nc = c.norm();
                next = if nc > 1e-300 { Some(c / nc) } else { None };
            }
            if next.is_none() {
                // Invariant subspace reached without convergence of the wanted
                // pair; extend with a fresh random direction.
                next = random_unit(n, rng, &[locked, &v]);
                if next.is_none() {
                    let ny = y.norm();
                    return Ok((theta, y / ny, res));
                }
            }
        }
    }
}

/// Smallest eigenvalues of the symmetric operator `apply` (dimension `n`).
///
/// Eigenvalues are extracted in ascending order until one exceeds `count_above`
/// or `max_count` have been found. The first entry is `λ_min`. Applications of
/// `apply` are counted in `iterations`.
pub fn smallest_eigenvalues<F: Fn(&DVector<f64>) -> DVector<f64>>(
    apply: &F,
    n: usize,
    count_above: f64,
    max_count: usize,
    cfg: &LanczosConfig,
) -> Result<EigenResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty operator".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (sigma, power_iters) = spectral_scale(apply, n, &mut rng);
    let sigma = if sigma > 0.0 { sigma } else { 1.0 };
    let tol = cfg.rel_tol * sigma;
    let mut a = Shifted {
        apply,
        sigma,
        count: power_iters,
    };
    let mut locked: Vec<DVector<f64>> = Vec::new();
    let mut eigenvalues = Vec::new();
    let mut residual: f64 = 0.0;
    while locked.len() < n && eigenvalues.len() < max_count.max(1) {
        let (theta, y, res) = largest_pair(&mut a, n, &locked, tol, cfg, &mut rng)?;
        let lambda = sigma - theta;
        eigenvalues.push(lambda);
        residual = residual.max(res);
        locked.push(y);
        if lambda > count_above {
            break;
        }
    }
    // Locking order can be off by rounding when values coincide.
    eigenvalues.sort_by(f64::total_cmp);
    Ok(EigenResult {
        eigenvalues,
        iterations: a.count,
        residual,
        sigma,
    })
}

/// Convenience wrapper returning `(λ_min, applications)`.
pub fn min_eigenvalue<F: Fn(&DVector<f64>) -> DVector<f64>>(apply: &F, n: usize, cfg: &LanczosConfig) -> Result<(f64, usize)> {
    let r = smallest_eigenvalues(apply, n, f64::NEG_INFINITY, 1, cfg)?;
    Ok((r.min_eig(), r.iterations))
}

/// All eigenvalues of a dense symmetric matrix, ascending.
pub fn dense_eigenvalues(h: &DMatrix<f64>) -> Vec<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}
