//! The Lenstra-Lenstra-Lovász reduction algorithm with Siegel-reduction
//! certification.
//!
//! The reducer follows the textbook loop: size-reduce column k against all
//! earlier columns (rounding the Gram-Schmidt coefficient), then either
//! advance k when the Lovász condition holds or swap columns k and k-1 and
//! step back. Gram-Schmidt is recomputed from scratch at each of the three
//! call sites rather than updated incrementally, trading speed for fidelity
//! to the printed loop. The unimodular transform is accumulated exactly over
//! the integers alongside the floating-point column updates, and the reduced
//! basis is recomputed as B*Q at the end to wash out drift.

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intmat::IntMat;
use crate::lattice::{Basis, UnimodularMatrix, TOL_DET};
use crate::mat::Mat;

/// Slack absorbed by the certification checks (not by the algorithm itself).
pub const COND_EPS: f64 = 1e-9;

/// Gram-Schmidt orthogonalization of a basis: orthogonal columns b*_i and the
/// projection coefficients mu[i][j] = (b_i . b*_j) / ||b*_j||^2 for j < i.
#[derive(Debug, Clone)]
pub struct GramSchmidtState {
    pub bstar: Mat,
    pub mu: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LLLParams {
    /// Lovász constant, in (1/4, 1].
    pub lovasz_delta: f64,
    /// Safety cap on main-loop iterations; `None` derives a generous cap from
    /// the dimension and the longest input vector.
    pub max_iterations: Option<usize>,
}

impl Default for LLLParams {
    fn default() -> Self {
        LLLParams { lovasz_delta: 0.75, max_iterations: None }
    }
}

impl LLLParams {
    pub fn with_delta(lovasz_delta: f64) -> Result<Self> {
        if !(lovasz_delta > 0.25 && lovasz_delta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "lovasz_delta must lie in (1/4, 1], got {lovasz_delta}"
            )));
        }
        Ok(LLLParams { lovasz_delta, max_iterations: None })
    }

    fn iteration_cap(&self, n: usize, beta: f64) -> usize {
        self.max_iterations
            .unwrap_or_else(|| 10 * n * n * (2 + ((1.0 + beta).log2().ceil() as usize) * 3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Size,
    Lovasz,
}

/// One violated certification condition. For `Size`, `value` is mu[i][j];
/// for `Lovasz`, `value` is the shortfall lhs - rhs (negative when violated)
/// with j = i - 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub condition: Condition,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct SiegelReport {
    pub reduced: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone)]
pub struct LLLOutcome {
    pub basis: Basis,
    pub transform: UnimodularMatrix,
    /// Main-loop iterations performed.
    pub sweeps: usize,
    pub swaps: usize,
    pub size_reductions: usize,
}

/// Nearest integer, ties away from zero. Satisfies |x - round(x)| <= 1/2.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn gram_schmidt(basis: &Basis) -> Result<GramSchmidtState> {
    gram_schmidt_mat(basis.mat())
}

fn gram_schmidt_mat(m: &Mat) -> Result<GramSchmidtState> {
    let n = m.rows();
    let mut bstar = m.clone();
    let mut mu = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let denom = bstar.col_norm_sq(j);
            if denom.sqrt() <= TOL_DET {
                return Err(Error::SingularBasis { det: denom.sqrt(), tol: TOL_DET });
            }
            let mu_ij = bstar.dot_cols(i, j) / denom;
            mu[(i, j)] = mu_ij;
            bstar.col_axpy(i, -mu_ij, j);
        }
        if bstar.col_norm(i) <= TOL_DET {
            return Err(Error::SingularBasis { det: bstar.col_norm(i), tol: TOL_DET });
        }
    }
    Ok(GramSchmidtState { bstar, mu })
}

/// Checks the size condition |mu[i][j]| <= 1/2 and the Lovász condition
/// ||b*_i||^2 / ||b*_{i-1}||^2 >= delta - mu[i][i-1]^2, both with slack
/// [`COND_EPS`].
pub fn is_siegel_reduced(basis: &Basis, params: &LLLParams) -> Result<SiegelReport> {
    let gs = gram_schmidt(basis)?;
    let n = basis.n();
    let mut violations = Vec::new();
    for i in 0..n {
        for j in 0..i {
            let mu = gs.mu[(i, j)];
            if mu.abs() > 0.5 + COND_EPS {
                violations.push(Violation { condition: Condition::Size, i, j, value: mu });
            }
        }
    }
    for i in 1..n {
        let lhs = gs.bstar.col_norm_sq(i) / gs.bstar.col_norm_sq(i - 1);
        let rhs = params.lovasz_delta - gs.mu[(i, i - 1)].powi(2);
        if lhs < rhs - COND_EPS {
            violations.push(Violation {
                condition: Condition::Lovasz,
                i,
                j: i - 1,
                value: lhs - rhs,
            });
        }
    }
    Ok(SiegelReport { reduced: violations.is_empty(), violations })
}

pub fn lll_reduce(basis: &Basis, params: &LLLParams) -> Result<LLLOutcome> {
    let n = basis.n();
    let cap = params.iteration_cap(n, basis.max_col_norm());
    let mut work = basis.mat().clone();
    let mut q = IntMat::identity(n);
    let mut gs = gram_schmidt_mat(&work)?;
    let mut sweeps = 0usize;
    let mut swaps = 0usize;
    let mut size_reductions = 0usize;

    let mut k = 1;
    while k < n {
        sweeps += 1;
        if sweeps > cap {
            return Err(Error::IterationCapExceeded { cap });
        }
        for j in (0..k).rev() {
            if gs.mu[(k, j)].abs() > 0.5 {
                let r = round_half_away(gs.mu[(k, j)]);
                if !r.is_finite() || r.abs() >= 9e15 {
                    return Err(Error::Internal(format!(
                        "non-representable size-reduction coefficient {r}"
                    )));
                }
                work.col_axpy(k, -r, j);
                q.col_axpy(k, &BigInt::from(-(r as i64)), j);
                size_reductions += 1;
                gs = gram_schmidt_mat(&work)?;
            }
        }
        let lhs = gs.bstar.col_norm_sq(k) / gs.bstar.col_norm_sq(k - 1);
        if lhs >= params.lovasz_delta - gs.mu[(k, k - 1)].powi(2) {
            k += 1;
        } else {
            work.swap_cols(k, k - 1);
            q.swap_cols(k, k - 1);
            swaps += 1;
            k = if k > 1 { k - 1 } else { 1 };
            gs = gram_schmidt_mat(&work)?;
        }
    }

    let transform = UnimodularMatrix::new(q)?;
    let reduced = Basis::new(basis.mat().matmul(&transform.mat().to_f64()))?;
    Ok(LLLOutcome { basis: reduced, transform, sweeps, swaps, size_reductions })
}

/// Defect bound 2^(n(n-1)/4) guaranteed for Siegel-reduced bases.
pub fn defect_bound(n: usize) -> f64 {
    let e4 = n * (n - 1);
    if e4 % 4 == 0 {
        2f64.powi((e4 / 4) as i32)
    } else {
        2f64.powf(e4 as f64 / 4.0)
    }
}
