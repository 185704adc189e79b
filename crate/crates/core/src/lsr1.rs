//! Limited-memory SR1 Hessian approximation in compact form
//!
//! B = γI + Ψ M⁻¹ Ψᵀ,  Ψ = Y − γS,  M = D + L + Lᵀ − γ SᵀS
//!
//! where S, Y hold the stored pairs column-wise (oldest first), D is the
//! diagonal of SᵀY and L its strictly lower triangle.

use std::collections::VecDeque;

use thiserror::Error;

use crate::linalg::{dot, norm2, sym_eigen, DenseMatrix};

/// Pairs with |sᵀ(y − Bs)| < SKIP_THRESHOLD · ‖s‖ ‖y − Bs‖ are rejected.
pub const SKIP_THRESHOLD: f64 = 1e-8;

const GAMMA_MIN: f64 = 1e-6;
const GAMMA_MAX: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Lsr1Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite curvature pair")]
    NonFinite,
    #[error("step vector is zero")]
    ZeroStep,
    #[error("restriction needs at least one coordinate")]
    EmptyCoords,
    #[error("coordinate {index} out of range for dimension {dim}")]
    CoordOutOfRange { index: usize, dim: usize },
    #[error("history capacity must be at least 1")]
    ZeroCapacity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaPolicy {
    /// γ = yᵀy / sᵀy of the newest accepted pair (when sᵀy > 0), clamped.
    Adaptive,
    /// γ never changes.
    Fixed,
}

#[derive(Debug, Clone)]
pub struct Lsr1Memory {
    capacity: usize,
    dim: Option<usize>,
    pairs: VecDeque<CurvaturePair>,
    gamma: f64,
    policy: GammaPolicy,
    psi: Vec<Vec<f64>>,
    m_inv: DenseMatrix,
}

impl Lsr1Memory {
    /// Empty memory with γ = 1 and adaptive scaling.
    pub fn new(capacity: usize) -> Result<Self, Lsr1Error> {
        Self::with_policy(capacity, 1.0, GammaPolicy::Adaptive)
    }

    /// Empty memory whose base matrix stays γI.
    pub fn with_fixed_gamma(capacity: usize, gamma: f64) -> Result<Self, Lsr1Error> {
        Self::with_policy(capacity, gamma, GammaPolicy::Fixed)
    }

    fn with_policy(capacity: usize, gamma: f64, policy: GammaPolicy) -> Result<Self, Lsr1Error> {
        if capacity == 0 {
            return Err(Lsr1Error::ZeroCapacity);
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Lsr1Error::NonFinite);
        }
        Ok(Self {
            capacity,
            dim: None,
            pairs: VecDeque::with_capacity(capacity),
            gamma,
            policy,
            psi: Vec::new(),
            m_inv: DenseMatrix::zeros(0, 0),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn policy(&self) -> GammaPolicy {
        self.policy
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.pairs.iter()
    }

    /// Columns of Ψ (oldest pair first).
    pub fn psi(&self) -> &[Vec<f64>] {
        &self.psi
    }

    pub fn m_inverse(&self) -> &DenseMatrix {
        &self.m_inv
    }

    fn check_dim(&self, len: usize) -> Result<(), Lsr1Error> {
        match self.dim {
            Some(d) if d != len => Err(Lsr1Error::DimensionMismatch {
                expected: d,
                got: len,
            }),
            _ => Ok(()),
        }
    }

    /// B v without forming B.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, Lsr1Error> {
        self.check_dim(v.len())?;
        let mut out: Vec<f64> = v.iter().map(|x| self.gamma * x).collect();
        if self.psi.is_empty() {
            return Ok(out);
        }
        let proj: Vec<f64> = self.psi.iter().map(|col| dot(col, v)).collect();
        let coef = self.m_inv.matvec(&proj);
        for (col, c) in self.psi.iter().zip(coef) {
            for (o, p) in out.iter_mut().zip(col) {
                *o += c * p;
            }
        }
        Ok(out)
    }

    /// Offers a curvature pair. Returns whether it was stored.
    pub fn update(&mut self, s: &[f64], y: &[f64]) -> Result<bool, Lsr1Error> {
        if s.len() != y.len() {
            return Err(Lsr1Error::DimensionMismatch {
                expected: s.len(),
                got: y.len(),
            });
        }
        self.check_dim(s.len())?;
        if s.iter().chain(y).any(|x| !x.is_finite()) {
            return Err(Lsr1Error::NonFinite);
        }
        if s.iter().all(|&x| x == 0.0) {
            return Err(Lsr1Error::ZeroStep);
        }
        let bs = self.matvec(s)?;
        let u: Vec<f64> = y.iter().zip(&bs).map(|(a, b)| a - b).collect();
        if !passes_skip_rule(s, &u) {
            return Ok(false);
        }

        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(CurvaturePair {
            s: s.to_vec(),
            y: y.to_vec(),
        });
        self.dim = Some(s.len());
        if self.policy == GammaPolicy::Adaptive {
            let sy = dot(s, y);
            if sy > 0.0 {
                self.gamma = (dot(y, y) / sy).clamp(GAMMA_MIN, GAMMA_MAX);
            }
        }
        self.rebuild();
        Ok(true)
    }

    /// Restricts every stored pair to `coords`; pairs that no longer pass the
    /// skip rule are dropped. γ and the policy carry over.
    pub fn restrict(&self, coords: &[usize]) -> Result<Lsr1Memory, Lsr1Error> {
        if coords.is_empty() {
            return Err(Lsr1Error::EmptyCoords);
        }
        if let Some(d) = self.dim {
            if let Some(&bad) = coords.iter().find(|&&i| i >= d) {
                return Err(Lsr1Error::CoordOutOfRange { index: bad, dim: d });
            }
        }
        let gather = |v: &[f64]| coords.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let mut out = Self::with_policy(self.capacity, self.gamma, self.policy)?;
        out.pairs = self
            .pairs
            .iter()
            .map(|p| CurvaturePair {
                s: gather(&p.s),
                y: gather(&p.y),
            })
            .collect();
        out.dim = self.dim.map(|_| coords.len());
        out.rebuild();
        Ok(out)
    }

    /// Dense B; only for small dimensions (tests and oracles).
    pub fn to_dense(&self, n: usize) -> Result<DenseMatrix, Lsr1Error> {
        self.check_dim(n)?;
        let mut b = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.matvec(&e)?;
            e[j] = 0.0;
            for i in 0..n {
                b[(i, j)] = col[i];
            }
        }
        // symmetrize roundoff
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (b[(i, j)] + b[(j, i)]);
                b[(i, j)] = avg;
                b[(j, i)] = avg;
            }
        }
        Ok(b)
    }

    /// Re-validates the stored pairs under the current γ and recomputes
    /// the compact factors.
    ///
    /// Pairs are replayed oldest first through the SR1 recursion; a pair whose
    /// denominator fails the skip rule is discarded. The leading Schur
    /// complements of M are exactly those denominators, so M is nonsingular
    /// afterwards. If roundoff still leaves M numerically singular, the pair
    /// with the smallest relative denominator is dropped and the process
    /// repeats.
    fn rebuild(&mut self) {
        loop {
            let mut us: Vec<Vec<f64>> = Vec::new();
            let mut ds: Vec<f64> = Vec::new();
            let mut keep = Vec::with_capacity(self.pairs.len());
            let mut ratios = Vec::with_capacity(self.pairs.len());
            for pair in &self.pairs {
                let mut u: Vec<f64> = pair
                    .y
                    .iter()
                    .zip(&pair.s)
                    .map(|(y, s)| y - self.gamma * s)
                    .collect();
                for (uk, dk) in us.iter().zip(&ds) {
                    let c = dot(uk, &pair.s) / dk;
                    for (a, b) in u.iter_mut().zip(uk) {
                        *a -= c * b;
                    }
                }
                let ok = passes_skip_rule(&pair.s, &u);
                keep.push(ok);
                if ok {
                    let d = dot(&pair.s, &u);
                    ratios.push(d.abs() / (norm2(&pair.s) * norm2(&u)));
                    us.push(u);
                    ds.push(d);
                }
            }
            let mut idx = 0;
            self.pairs.retain(|_| {
                idx += 1;
                keep[idx - 1]
            });

            match self.compact_factors() {
                Some((psi, m_inv)) => {
                    self.psi = psi;
                    self.m_inv = m_inv;
                    return;
                }
                None => {
                    let worst = ratios
                        .iter()
                        .enumerate()
                        .min_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    log::debug!("LSR1: compact middle matrix singular, dropping pair {worst}");
                    self.pairs.remove(worst);
                }
            }
        }
    }

    fn compact_factors(&self) -> Option<(Vec<Vec<f64>>, DenseMatrix)> {
        let k = self.pairs.len();
        if k == 0 {
            return Some((Vec::new(), DenseMatrix::zeros(0, 0)));
        }
        let psi: Vec<Vec<f64>> = self
            .pairs
            .iter()
            .map(|p| {
                p.y.iter()
                    .zip(&p.s)
                    .map(|(y, s)| y - self.gamma * s)
                    .collect()
            })
            .collect();
        let mut m = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let (si, sj) = (&self.pairs[i].s, &self.pairs[j].s);
                // (SᵀY)_{ij} for the lower triangle (i ≥ j), minus γ SᵀS
                let v = dot(si, &self.pairs[j].y) - self.gamma * dot(si, sj);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let eig = sym_eigen(&m).ok()?;
        let scale = eig
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, l| a.max(l.abs()));
        if eig
            .eigenvalues
            .iter()
            .any(|l| l.abs() <= 1e-13 * scale.max(f64::MIN_POSITIVE))
        {
            return None;
        }
        let mut m_inv = DenseMatrix::zeros(k, k);
        for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
            for i in 0..k {
                let qi = eig.eigenvectors[(i, c)] / lambda;
                for j in 0..k {
                    m_inv[(i, j)] += qi * eig.eigenvectors[(j, c)];
                }
            }
        }
        Some((psi, m_inv))
    }
}

fn passes_skip_rule(s: &[f64], u: &[f64]) -> bool {
    let ns = norm2(s);
    let nu = norm2(u);
    ns > 0.0 && nu > 0.0 && dot(s, u).abs() >= SKIP_THRESHOLD * ns * nu
}
