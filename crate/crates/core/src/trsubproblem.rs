//! Trust-region subproblem solvers.
//!
//! * [`solve_first_order`]: linear model over the ∞-ball, step along the
//!   ∞-normalized negative gradient.
//! * [`solve_obs`]: exact minimizer of gᵀs + ½ sᵀBs over the 2-ball for a
//!   compact LSR1 matrix B, computed in the eigenbasis of the low-rank part
//!   (orthonormal-basis SR1).
//! * [`solve_trs_dense`]: exact solver for an explicit small matrix, used as
//!   the reference for the compact solver.

use thiserror::Error;

use crate::linalg::{
    axpy, cholesky, dot, newton_root, norm2, norm_inf, sym_eigen, DenseMatrix, LinalgError,
};
use crate::lsr1::Lsr1Memory;

/// Gradient components in the leftmost eigenspace below this fraction of
/// ‖g‖ are treated as zero (hard case).
const HARD_CASE_TOL: f64 = 1e-10;
/// Condition bound on ΨᵀΨ for the Cholesky route.
const GRAM_COND_MAX: f64 = 1e8;
/// Relative cutoff for the numerical rank of Ψ on the eigen route.
const RANK_TOL: f64 = 1e-13;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrsError {
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("trust-region radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolutionKind {
    /// Gradient is zero and the model has no negative curvature.
    Converged,
    FirstOrder,
    Interior,
    Boundary,
    HardCase,
    /// The compact solver broke down; this is the first-order step.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub step: Vec<f64>,
    /// m(0) − m(step), never negative.
    pub predicted_reduction: f64,
    pub boundary_hit: bool,
    /// Multiplier of the norm constraint (second-order solvers only).
    pub sigma: f64,
    pub kind: SolutionKind,
}

impl SubproblemSolution {
    pub fn converged(&self) -> bool {
        self.kind == SolutionKind::Converged
    }

    fn zero(n: usize) -> Self {
        Self {
            step: vec![0.0; n],
            predicted_reduction: 0.0,
            boundary_hit: false,
            sigma: 0.0,
            kind: SolutionKind::Converged,
        }
    }
}

fn validate(grad: &[f64], delta: f64) -> Result<(), TrsError> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(TrsError::InvalidRadius(delta));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrsError::NonFiniteGradient);
    }
    Ok(())
}

/// s = −Δ g / ‖g‖_∞, so ‖s‖_∞ = Δ.
pub fn solve_first_order(grad: &[f64], delta: f64) -> Result<SubproblemSolution, TrsError> {
    validate(grad, delta)?;
    let gmax = norm_inf(grad);
    if gmax == 0.0 {
        return Ok(SubproblemSolution::zero(grad.len()));
    }
    let scale = delta / gmax;
    let step: Vec<f64> = grad.iter().map(|g| -scale * g).collect();
    let predicted_reduction = -dot(grad, &step);
    Ok(SubproblemSolution {
        step,
        predicted_reduction,
        boundary_hit: true,
        sigma: 0.0,
        kind: SolutionKind::FirstOrder,
    })
}

/// Value of gᵀs + ½ sᵀBs for a compact memory.
pub fn model_value(mem: &Lsr1Memory, grad: &[f64], step: &[f64]) -> Result<f64, TrsError> {
    let bs = mem
        .matvec(step)
        .map_err(|_| TrsError::DimensionMismatch {
            expected: mem.dim().unwrap_or(step.len()),
            got: step.len(),
        })?;
    Ok(dot(grad, step) + 0.5 * dot(step, &bs))
}

/// One eigen-direction of B with the gradient's coordinate along it.
#[derive(Debug, Clone, Copy)]
struct Mode {
    lambda: f64,
    coeff: f64,
}

/// ‖v(σ)‖ with v_i = c_i / (λ_i + σ); infinite when a nonzero coefficient
/// meets a nonpositive shifted eigenvalue.
fn shifted_norm(modes: &[Mode], sigma: f64) -> f64 {
    let mut sum = 0.0;
    for m in modes {
        if m.coeff == 0.0 {
            continue;
        }
        let d = m.lambda + sigma;
        if d <= 0.0 {
            return f64::INFINITY;
        }
        sum += (m.coeff / d).powi(2);
    }
    sum.sqrt()
}

/// φ(σ) = 1/‖v(σ)‖ − 1/Δ and its derivative.
fn secular(modes: &[Mode], sigma: f64, delta: f64) -> (f64, f64) {
    let norm = shifted_norm(modes, sigma);
    if !norm.is_finite() {
        return (-1.0 / delta, f64::NAN);
    }
    if norm == 0.0 {
        return (f64::INFINITY, f64::NAN);
    }
    let cubic: f64 = modes
        .iter()
        .filter(|m| m.coeff != 0.0)
        .map(|m| m.coeff * m.coeff / (m.lambda + sigma).powi(3))
        .sum();
    (1.0 / norm - 1.0 / delta, cubic / norm.powi(3))
}

/// Orthonormal basis for range(Ψ) together with the eigenvalues of B on it.
struct ParallelSpace {
    basis: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
}

fn gram(cols: &[Vec<f64>]) -> DenseMatrix {
    let k = cols.len();
    let mut g = DenseMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let v = dot(&cols[i], &cols[j]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// One Cholesky-QR pass: cols = Q R with R upper triangular.
fn cholesky_qr(cols: &[Vec<f64>]) -> Option<(Vec<Vec<f64>>, DenseMatrix)> {
    let g = gram(cols);
    let l = cholesky(&g).ok()?;
    let k = cols.len();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..k {
        lo = lo.min(l[(i, i)]);
        hi = hi.max(l[(i, i)]);
    }
    if (hi / lo).powi(2) > GRAM_COND_MAX {
        return None;
    }
    let r = l.transpose();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut col = cols[j].clone();
        for (i, qi) in q.iter().enumerate() {
            axpy(-r[(i, j)], qi, &mut col);
        }
        let inv = 1.0 / r[(j, j)];
        col.iter_mut().for_each(|x| *x *= inv);
        q.push(col);
    }
    Some((q, r))
}

/// Ψ = Q R with orthonormal Q (n×r) and R (r×k), r = numerical rank.
fn thin_factor(psi: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, DenseMatrix), TrsError> {
    // Cholesky-QR twice restores orthogonality lost to conditioning.
    if let Some((q1, r1)) = cholesky_qr(psi) {
        if let Some((q2, r2)) = cholesky_qr(&q1) {
            return Ok((q2, r2.matmul(&r1)));
        }
    }

    // Rank-deficient or badly conditioned: go through ΨᵀΨ = V diag(μ) Vᵀ.
    let k = psi.len();
    let g = gram(psi);
    let eig = sym_eigen(&g)?;
    let mu_max = eig.eigenvalues.last().copied().unwrap_or(0.0);
    let kept: Vec<usize> = (0..k)
        .rev()
        .filter(|&j| eig.eigenvalues[j] > RANK_TOL * mu_max)
        .collect();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(kept.len());
    let mut r = DenseMatrix::zeros(kept.len(), k);
    for (row, &j) in kept.iter().enumerate() {
        let sqrt_mu = eig.eigenvalues[j].sqrt();
        let mut col = vec![0.0; psi[0].len()];
        for (i, p) in psi.iter().enumerate() {
            axpy(eig.eigenvectors[(i, j)] / sqrt_mu, p, &mut col);
        }
        q.push(col);
        for i in 0..k {
            r[(row, i)] = sqrt_mu * eig.eigenvectors[(i, j)];
        }
    }
    if q.is_empty() {
        return Ok((q, r));
    }
    // re-orthogonalize; Q is now well conditioned
    match cholesky_qr(&q) {
        Some((q2, r2)) => Ok((q2, r2.matmul(&r))),
        None => Ok((q, r)),
    }
}

fn parallel_space(mem: &Lsr1Memory) -> Result<ParallelSpace, TrsError> {
    let psi = mem.psi();
    if psi.is_empty() {
        return Ok(ParallelSpace {
            basis: Vec::new(),
            eigenvalues: Vec::new(),
        });
    }
    let (q, r) = thin_factor(psi)?;
    if q.is_empty() {
        return Ok(ParallelSpace {
            basis: Vec::new(),
            eigenvalues: Vec::new(),
        });
    }
    let inner = r.matmul(mem.m_inverse()).matmul(&r.transpose());
    let rank = inner.rows();
    let mut sym = DenseMatrix::zeros(rank, rank);
    for i in 0..rank {
        for j in 0..rank {
            sym[(i, j)] = 0.5 * (inner[(i, j)] + inner[(j, i)]);
        }
    }
    let eig = sym_eigen(&sym)?;
    let n = q[0].len();
    let basis = (0..rank)
        .map(|j| {
            let mut p = vec![0.0; n];
            for (i, qi) in q.iter().enumerate() {
                axpy(eig.eigenvectors[(i, j)], qi, &mut p);
            }
            p
        })
        .collect();
    let gamma = mem.gamma();
    Ok(ParallelSpace {
        basis,
        eigenvalues: eig.eigenvalues.iter().map(|l| l + gamma).collect(),
    })
}

/// Flip `z` so that its first non-negligible entry is negative.
fn orient(z: &mut [f64]) {
    let scale = norm_inf(z);
    if let Some(first) = z.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *first > 0.0 {
            z.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Outcome of the 1-D analysis shared by both solvers.
enum Plan {
    Converged,
    Interior,
    Boundary(f64),
    /// σ = −λ_min, plus the index of the mode supplying the eigenvector.
    Hard { sigma: f64, mode: usize },
}

fn plan(modes: &[Mode], delta: f64, grad_norm: f64) -> Result<Plan, TrsError> {
    let lambda_min = modes.iter().map(|m| m.lambda).fold(f64::INFINITY, f64::min);
    let lambda_scale = modes.iter().fold(1.0f64, |a, m| a.max(m.lambda.abs()));
    let eig_tol = 1e-12 * lambda_scale;
    if modes.is_empty() {
        return Ok(Plan::Converged);
    }

    let in_min = |m: &Mode| m.lambda <= lambda_min + eig_tol;
    let min_coeff = modes
        .iter()
        .filter(|m| in_min(m))
        .map(|m| m.coeff * m.coeff)
        .sum::<f64>()
        .sqrt();

    if lambda_min > eig_tol {
        if shifted_norm(modes, 0.0) <= delta {
            return Ok(if grad_norm == 0.0 {
                Plan::Converged
            } else {
                Plan::Interior
            });
        }
    } else if grad_norm == 0.0 && lambda_min >= -eig_tol {
        return Ok(Plan::Converged);
    }

    let sigma_lo = (-lambda_min).max(0.0);
    let hard_candidate = lambda_min <= eig_tol && min_coeff <= HARD_CASE_TOL * grad_norm;
    let search_modes: Vec<Mode> = if hard_candidate {
        modes
            .iter()
            .map(|m| {
                if in_min(m) {
                    Mode { coeff: 0.0, ..*m }
                } else {
                    *m
                }
            })
            .collect()
    } else {
        modes.to_vec()
    };

    if hard_candidate {
        let p_norm = shifted_norm(&search_modes, sigma_lo);
        if p_norm <= delta {
            let mode = modes
                .iter()
                .position(|m| in_min(m))
                .expect("leftmost mode exists");
            return Ok(Plan::Hard {
                sigma: sigma_lo,
                mode,
            });
        }
    }

    let sigma_hi = (grad_norm / delta - lambda_min).max(sigma_lo) * (1.0 + 1e-12) + 1e-300;
    let tol = 1e-12 / delta;
    let sigma = newton_root(
        |s| secular(&search_modes, s, delta),
        sigma_lo,
        tol,
        Some((sigma_lo, sigma_hi)),
    )?;
    Ok(Plan::Boundary(sigma))
}

/// Exact 2-norm trust-region step for a compact LSR1 model.
///
/// Falls back to the first-order step (kind [`SolutionKind::Fallback`]) if
/// the factorization or the root finder breaks down.
pub fn solve_obs(
    mem: &Lsr1Memory,
    grad: &[f64],
    delta: f64,
) -> Result<SubproblemSolution, TrsError> {
    validate(grad, delta)?;
    if let Some(d) = mem.dim() {
        if d != grad.len() {
            return Err(TrsError::DimensionMismatch {
                expected: d,
                got: grad.len(),
            });
        }
    }
    match obs_inner(mem, grad, delta) {
        Ok(sol) => Ok(sol),
        Err(err) => {
            log::warn!("OBS subproblem solve failed ({err}); using first-order step");
            let mut sol = solve_first_order(grad, delta)?;
            if sol.kind == SolutionKind::FirstOrder {
                sol.kind = SolutionKind::Fallback;
                let m = model_value(mem, grad, &sol.step)?;
                sol.predicted_reduction = (-m).max(0.0);
            }
            Ok(sol)
        }
    }
}

fn obs_inner(mem: &Lsr1Memory, grad: &[f64], delta: f64) -> Result<SubproblemSolution, TrsError> {
    let n = grad.len();
    let gamma = mem.gamma();
    let space = parallel_space(mem)?;
    let rank = space.basis.len();

    let mut modes: Vec<Mode> = space
        .basis
        .iter()
        .zip(&space.eigenvalues)
        .map(|(p, &lambda)| Mode {
            lambda,
            coeff: dot(p, grad),
        })
        .collect();
    let mut g_perp = grad.to_vec();
    for (p, m) in space.basis.iter().zip(&modes) {
        axpy(-m.coeff, p, &mut g_perp);
    }
    let has_perp = n > rank;
    let perp_norm = if has_perp { norm2(&g_perp) } else { 0.0 };
    if has_perp {
        modes.push(Mode {
            lambda: gamma,
            coeff: perp_norm,
        });
    }
    let grad_norm = norm2(grad);

    // step(σ) = −Σ c_i/(λ_i+σ) p_i − g_⊥/(γ+σ), skipping zeroed modes
    let assemble = |sigma: f64, skip_min: Option<f64>| -> Vec<f64> {
        let mut s = vec![0.0; n];
        for (p, m) in space.basis.iter().zip(&modes) {
            if skip_min.is_some_and(|t| m.lambda <= t) || m.coeff == 0.0 {
                continue;
            }
            axpy(-m.coeff / (m.lambda + sigma), p, &mut s);
        }
        if has_perp && perp_norm > 0.0 && !skip_min.is_some_and(|t| gamma <= t) {
            axpy(-1.0 / (gamma + sigma), &g_perp, &mut s);
        }
        s
    };

    let lambda_scale = modes.iter().fold(1.0f64, |a, m| a.max(m.lambda.abs()));
    let (step, sigma, kind) = match plan(&modes, delta, grad_norm)? {
        Plan::Converged => return Ok(SubproblemSolution::zero(n)),
        Plan::Interior => (assemble(0.0, None), 0.0, SolutionKind::Interior),
        Plan::Boundary(sigma) => {
            let mut s = assemble(sigma, None);
            scale_to(&mut s, delta);
            (s, sigma, SolutionKind::Boundary)
        }
        Plan::Hard { sigma, mode } => {
            let lambda_min = -sigma;
            let cutoff = lambda_min + 1e-12 * lambda_scale;
            let mut p = assemble(sigma, Some(cutoff));
            let mut z = if mode < rank {
                space.basis[mode].clone()
            } else {
                perp_unit_vector(&space.basis, n)
            };
            orient(&mut z);
            let pz = dot(&p, &z);
            let pp = dot(&p, &p);
            let disc = (pz * pz + delta * delta - pp).max(0.0);
            let tau = -pz + disc.sqrt();
            axpy(tau, &z, &mut p);
            scale_to(&mut p, delta);
            (p, sigma, SolutionKind::HardCase)
        }
    };
    let m = model_value(mem, grad, &step)?;
    Ok(SubproblemSolution {
        boundary_hit: kind != SolutionKind::Interior,
        step,
        predicted_reduction: (-m).max(0.0),
        sigma,
        kind,
    })
}

/// Unit vector orthogonal to every column of `basis`.
fn perp_unit_vector(basis: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut best = 0;
    let mut best_norm = -1.0;
    for j in 0..n {
        let captured: f64 = basis.iter().map(|p| p[j] * p[j]).sum();
        let residual = 1.0 - captured;
        if residual > best_norm + 1e-12 {
            best_norm = residual;
            best = j;
        }
    }
    let mut z = vec![0.0; n];
    z[best] = 1.0;
    // two Gram-Schmidt passes
    for _ in 0..2 {
        for p in basis {
            let c = dot(p, &z);
            axpy(-c, p, &mut z);
        }
    }
    let nz = norm2(&z);
    z.iter_mut().for_each(|x| *x /= nz);
    z
}

fn scale_to(s: &mut [f64], delta: f64) {
    let ns = norm2(s);
    if ns > 0.0 {
        let f = delta / ns;
        s.iter_mut().for_each(|x| *x *= f);
    }
}

/// Exact trust-region solution for an explicit symmetric matrix
/// (full eigendecomposition; σ located by bisection on ‖s(σ)‖ = Δ).
pub fn solve_trs_dense(
    b: &DenseMatrix,
    grad: &[f64],
    delta: f64,
) -> Result<SubproblemSolution, TrsError> {
    validate(grad, delta)?;
    if b.rows() != grad.len() {
        return Err(TrsError::DimensionMismatch {
            expected: b.rows(),
            got: grad.len(),
        });
    }
    let n = grad.len();
    let eig = sym_eigen(b)?;
    let q = &eig.eigenvectors;
    let lambda = &eig.eigenvalues;
    let coeff: Vec<f64> = (0..n).map(|j| dot(&q.column(j), grad)).collect();
    let grad_norm = norm2(grad);
    let lambda_min = lambda[0];
    let scale = lambda.iter().fold(1.0f64, |a, l| a.max(l.abs()));
    let tol = 1e-12 * scale;

    let step_at = |sigma: f64, skip_min: bool| -> Vec<f64> {
        let mut s = vec![0.0; n];
        for j in 0..n {
            if (skip_min && lambda[j] <= lambda_min + tol) || coeff[j] == 0.0 {
                continue;
            }
            let c = -coeff[j] / (lambda[j] + sigma);
            for i in 0..n {
                s[i] += c * q[(i, j)];
            }
        }
        s
    };
    let finish = |step: Vec<f64>, sigma: f64, kind: SolutionKind| {
        let bs = b.matvec(&step);
        let m = dot(grad, &step) + 0.5 * dot(&step, &bs);
        SubproblemSolution {
            boundary_hit: kind != SolutionKind::Interior && kind != SolutionKind::Converged,
            step,
            predicted_reduction: (-m).max(0.0),
            sigma,
            kind,
        }
    };

    if lambda_min > tol {
        let s = step_at(0.0, false);
        if norm2(&s) <= delta {
            let kind = if grad_norm == 0.0 {
                SolutionKind::Converged
            } else {
                SolutionKind::Interior
            };
            return Ok(finish(s, 0.0, kind));
        }
    } else if grad_norm == 0.0 && lambda_min >= -tol {
        return Ok(finish(vec![0.0; n], 0.0, SolutionKind::Converged));
    }

    let sigma_lo = (-lambda_min).max(0.0);
    let min_coeff = (0..n)
        .filter(|&j| lambda[j] <= lambda_min + tol)
        .map(|j| coeff[j] * coeff[j])
        .sum::<f64>()
        .sqrt();
    let hard = lambda_min <= tol && min_coeff <= HARD_CASE_TOL * grad_norm;
    if hard {
        let mut p = step_at(sigma_lo, true);
        if norm2(&p) <= delta {
            let mut z = q.column(0);
            orient(&mut z);
            let pz = dot(&p, &z);
            let disc = (pz * pz + delta * delta - dot(&p, &p)).max(0.0);
            let tau = -pz + disc.sqrt();
            axpy(tau, &z, &mut p);
            scale_to(&mut p, delta);
            return Ok(finish(p, sigma_lo, SolutionKind::HardCase));
        }
    }

    // ‖s(σ)‖ decreases monotonically on (σ_lo, ∞)
    let norm_at = |sigma: f64| norm2(&step_at(sigma, hard));
    let mut lo = sigma_lo;
    let mut hi = sigma_lo.max(grad_norm / delta - lambda_min) + 1.0;
    while norm_at(hi) > delta {
        hi = 2.0 * hi + 1.0;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_at(mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut s = step_at(hi, hard);
    scale_to(&mut s, delta);
    Ok(finish(s, hi, SolutionKind::Boundary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_model(b: &DenseMatrix, g: &[f64], s: &[f64]) -> f64 {
        dot(g, s) + 0.5 * dot(s, &b.matvec(s))
    }

    fn random_memory(rng: &mut ChaCha8Rng, n: usize, pairs: usize) -> Lsr1Memory {
        let mut mem = Lsr1Memory::new(pairs.max(1)).unwrap();
        let mut tries = 0;
        while mem.len() < pairs && tries < 50 {
            let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            mem.update(&s, &y).unwrap();
            tries += 1;
        }
        mem
    }

    #[test]
    fn first_order_examples() {
        let sol = solve_first_order(&[3.0, -4.0], 0.01).unwrap();
        assert_eq!(sol.step, vec![-0.0075, 0.01]);
        assert!((sol.predicted_reduction - 0.0625).abs() < 1e-15);
        assert_eq!(norm_inf(&sol.step), 0.01);

        let zero = solve_first_order(&[0.0, 0.0], 0.5).unwrap();
        assert!(zero.converged());
        assert_eq!(zero.step, vec![0.0, 0.0]);

        assert!(solve_first_order(&[f64::NAN], 1.0).is_err());
        assert!(matches!(
            solve_first_order(&[1.0], 0.0),
            Err(TrsError::InvalidRadius(_))
        ));
    }

    #[test]
    fn obs_identity_interior_and_boundary() {
        let mem = Lsr1Memory::new(3).unwrap();
        let g = [0.3, -0.4];
        let sol = solve_obs(&mem, &g, 1.0).unwrap();
        assert_eq!(sol.kind, SolutionKind::Interior);
        assert_eq!(sol.step, vec![-0.3, 0.4]);

        let sol = solve_obs(&mem, &g, 0.1).unwrap();
        assert_eq!(sol.kind, SolutionKind::Boundary);
        assert!((sol.step[0] + 0.06).abs() < 1e-14);
        assert!((sol.step[1] - 0.08).abs() < 1e-14);
    }

    #[test]
    fn dense_examples() {
        let b = DenseMatrix::from_diagonal(&[2.0, 4.0]);
        let sol = solve_trs_dense(&b, &[2.0, 0.0], 10.0).unwrap();
        assert_eq!(sol.step, vec![-1.0, 0.0]);
        assert_eq!(sol.sigma, 0.0);

        let zero = DenseMatrix::zeros(2, 2);
        let sol = solve_trs_dense(&zero, &[1.0, 0.0], 2.0).unwrap();
        assert!((sol.step[0] + 2.0).abs() < 1e-12 && sol.step[1].abs() < 1e-12);
    }

    #[test]
    fn dense_indefinite_matches_circle_grid() {
        let b = DenseMatrix::from_diagonal(&[-1.0, 1.0]);
        let g = [0.0, 1.0];
        let sol = solve_trs_dense(&b, &g, 1.0).unwrap();
        assert!(sol.sigma >= 1.0);
        assert!((norm2(&sol.step) - 1.0).abs() < 1e-12);
        // fine grid over the unit circle (and the disk interior is worse
        // because the model is concave along e₁)
        let best = (0..200_000)
            .map(|k| {
                let t = k as f64 / 200_000.0 * std::f64::consts::TAU;
                dense_model(&b, &g, &[t.cos(), t.sin()])
            })
            .fold(f64::INFINITY, f64::min);
        let ours = dense_model(&b, &g, &sol.step);
        assert!(ours <= best + 1e-9, "{ours} vs grid {best}");
    }

    #[test]
    fn obs_hard_case_along_stored_direction() {
        // γ > 0 always, so negative curvature can only come from the pairs
        let mut mem = Lsr1Memory::with_fixed_gamma(2, 1.0).unwrap();
        mem.update(&[1.0, 0.0, 0.0], &[-2.0, 0.0, 0.0]).unwrap(); // λ = −2 on e₁
        // g ⟂ e₁, small: hard case
        let g = [0.0, 0.1, 0.0];
        let sol = solve_obs(&mem, &g, 1.0).unwrap();
        assert_eq!(sol.kind, SolutionKind::HardCase);
        assert!((sol.sigma - 2.0).abs() < 1e-12);
        assert!((norm2(&sol.step) - 1.0).abs() < 1e-12);
        let dense = solve_trs_dense(&mem.to_dense(3).unwrap(), &g, 1.0).unwrap();
        assert_eq!(dense.kind, SolutionKind::HardCase);
        let b = mem.to_dense(3).unwrap();
        assert!((dense_model(&b, &g, &sol.step) - dense_model(&b, &g, &dense.step)).abs() < 1e-12);
        // sign rule: first nonzero entry of the added eigen-component is negative
        assert!(sol.step[0] < 0.0);
    }

    #[test]
    fn obs_zero_gradient_with_negative_curvature_moves() {
        let mut mem = Lsr1Memory::with_fixed_gamma(2, 1.0).unwrap();
        mem.update(&[0.0, 1.0], &[0.0, -1.0]).unwrap();
        let sol = solve_obs(&mem, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(sol.kind, SolutionKind::HardCase);
        assert!((sol.step[1] + 0.5).abs() < 1e-12);
        assert!(sol.predicted_reduction > 0.0);
    }

    #[test]
    fn obs_matches_dense_on_random_5d() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let mem = random_memory(&mut rng, 5, 3);
            let b = mem.to_dense(5).unwrap();
            let g: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let delta = rng.gen_range(0.05..3.0);
            let obs = solve_obs(&mem, &g, delta).unwrap();
            let dense = solve_trs_dense(&b, &g, delta).unwrap();
            let (a, c) = (dense_model(&b, &g, &obs.step), dense_model(&b, &g, &dense.step));
            assert!((a - c).abs() <= 1e-8, "obs {a} dense {c} ({:?})", obs.kind);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut mem = Lsr1Memory::new(2).unwrap();
        mem.update(&[1.0, 0.0], &[2.0, 0.0]).unwrap();
        assert!(matches!(
            solve_obs(&mem, &[1.0, 2.0, 3.0], 1.0),
            Err(TrsError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_predicted_reduction_monotone_in_radius(seed in any::<u64>(), n in 2usize..8, k in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mem = random_memory(&mut rng, n, k);
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut last = 0.0;
            for i in 1..=25 {
                let delta = 0.02 * i as f64 * i as f64 / 5.0;
                let sol = solve_obs(&mem, &g, delta).unwrap();
                prop_assert!(norm2(&sol.step) <= delta * (1.0 + 1e-10));
                prop_assert!(sol.predicted_reduction >= last - 1e-10 * (1.0 + last));
                last = sol.predicted_reduction;
            }
        }
    }
}
