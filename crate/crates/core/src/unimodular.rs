//! Extended Gauss moves and the constructive factorization of special linear
//! integer matrices into them.
//!
//! An extended Gauss move is the identity plus one nontrivial row i and one
//! nontrivial column j (i != j); its determinant is exactly 1 by the rank-two
//! update identity. Every Q in SL_n(Z) factors into such moves: the last row
//! is made coprime with at most one plain shear, a Bezout column move turns
//! the corner entry into 1, a row move clears the rest of the last row, one
//! more column move (applied from the left, inverted into the one-sided
//! product) clears the last column, and induction continues on the leading
//! block until a 3x3 matrix remains for the shear-only base case.
//!
//! All arithmetic here is arbitrary-precision integer; Bezout coefficients
//! and intermediate products can grow far beyond 64 bits.

use num_bigint::BigInt;
use num_integer::Integer;
use num_traits::{One, Signed, Zero};

use crate::error::{Error, Result};
use crate::intmat::IntMat;
use crate::lattice::UnimodularMatrix;

/// Identity plus a single off-diagonal integer entry `value` at (i, j).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GaussMove {
    pub n: usize,
    pub i: usize,
    pub j: usize,
    pub value: BigInt,
}

impl GaussMove {
    pub fn new(n: usize, i: usize, j: usize, value: BigInt) -> Result<Self> {
        if i == j || i >= n || j >= n {
            return Err(Error::InvalidMove(format!(
                "shear indices ({i}, {j}) invalid for dimension {n}"
            )));
        }
        Ok(GaussMove { n, i, j, value })
    }

    pub fn materialize(&self) -> UnimodularMatrix {
        let mut m = IntMat::identity(self.n);
        m[(self.i, self.j)] = self.value.clone();
        UnimodularMatrix::trusted(m, 1)
    }
}

/// Identity with nontrivial row i and column j (i != j): the rank-two update
/// E = I + e_i a^T + b e_j^T.
///
/// `row_values` is a with a[i] = 0; the intersection entry E[i][j] lives in
/// a[j]. `col_values` is b with b[j] = 0 and b[i] = 0 (the intersection is
/// stored once, in the row).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtendedGaussMove {
    pub n: usize,
    pub i: usize,
    pub j: usize,
    pub row_values: Vec<BigInt>,
    pub col_values: Vec<BigInt>,
}

impl ExtendedGaussMove {
    pub fn new(
        n: usize,
        i: usize,
        j: usize,
        row_values: Vec<BigInt>,
        col_values: Vec<BigInt>,
    ) -> Result<Self> {
        if i == j || i >= n || j >= n {
            return Err(Error::InvalidMove(format!(
                "move indices ({i}, {j}) invalid for dimension {n}"
            )));
        }
        if row_values.len() != n || col_values.len() != n {
            return Err(Error::InvalidMove("row/col value vectors must have length n".into()));
        }
        if !row_values[i].is_zero() {
            return Err(Error::InvalidMove("row_values[i] must be zero".into()));
        }
        if !col_values[j].is_zero() || !col_values[i].is_zero() {
            return Err(Error::InvalidMove("col_values[j] and col_values[i] must be zero".into()));
        }
        Ok(ExtendedGaussMove { n, i, j, row_values, col_values })
    }

    /// Move with nontrivial row i only (multi-shear along a row).
    pub fn row_move(n: usize, i: usize, j: usize, row_values: Vec<BigInt>) -> Result<Self> {
        ExtendedGaussMove::new(n, i, j, row_values, vec![BigInt::zero(); n])
    }

    /// Move with nontrivial column j only; the row-i entry of the column goes
    /// through `row_values[j]` (`intersection`).
    pub fn col_move(
        n: usize,
        i: usize,
        j: usize,
        intersection: BigInt,
        col_values: Vec<BigInt>,
    ) -> Result<Self> {
        let mut row_values = vec![BigInt::zero(); n];
        row_values[j] = intersection;
        ExtendedGaussMove::new(n, i, j, row_values, col_values)
    }

    pub fn from_gauss(g: &GaussMove) -> Self {
        let mut row_values = vec![BigInt::zero(); g.n];
        row_values[g.j] = g.value.clone();
        ExtendedGaussMove {
            n: g.n,
            i: g.i,
            j: g.j,
            row_values,
            col_values: vec![BigInt::zero(); g.n],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.row_values.iter().all(Zero::is_zero) && self.col_values.iter().all(Zero::is_zero)
    }

    /// Every off-diagonal entry lies in row i (b = 0).
    fn is_row_only(&self) -> bool {
        self.col_values.iter().all(Zero::is_zero)
    }

    /// Every off-diagonal entry lies in column j (a = 0 away from the
    /// intersection slot a[j]).
    fn is_col_only(&self) -> bool {
        self.row_values.iter().enumerate().all(|(c, v)| c == self.j || v.is_zero())
    }

    fn negated(&self) -> Self {
        ExtendedGaussMove {
            n: self.n,
            i: self.i,
            j: self.j,
            row_values: self.row_values.iter().map(|v| -v).collect(),
            col_values: self.col_values.iter().map(|v| -v).collect(),
        }
    }
}

/// Materializes E = I + e_i a^T + b e_j^T. The determinant is 1 by
/// construction: with a[i] = 0, b[j] = 0, b[i] = 0 and i != j, the rank-two
/// determinant identity collapses to det [[1, a.b], [0, 1]] = 1.
pub fn materialize(mv: &ExtendedGaussMove) -> UnimodularMatrix {
    let n = mv.n;
    let mut m = IntMat::identity(n);
    for c in 0..n {
        if c != mv.i {
            m[(mv.i, c)] = mv.row_values[c].clone();
        }
    }
    for r in 0..n {
        if r != mv.j && r != mv.i {
            let v = &mv.col_values[r];
            if !v.is_zero() {
                m[(r, mv.j)] = v.clone();
            }
        }
    }
    UnimodularMatrix::trusted(m, 1)
}

/// Inverse of a move as a product of at most two moves.
///
/// Row-only and column-only moves square to zero in their update part, so a
/// single negated move suffices. A genuinely mixed move factors as
/// E = (I + b e_j^T)(I + e_i a^T), giving E^-1 = (I - e_i a^T)(I - b e_j^T).
pub fn invert_move(mv: &ExtendedGaussMove) -> Vec<ExtendedGaussMove> {
    if mv.is_identity() {
        return Vec::new();
    }
    if mv.is_row_only() || mv.is_col_only() {
        return vec![mv.negated()];
    }
    let n = mv.n;
    let row_part = ExtendedGaussMove {
        n,
        i: mv.i,
        j: mv.j,
        row_values: mv.row_values.iter().map(|v| -v).collect(),
        col_values: vec![BigInt::zero(); n],
    };
    let col_part = ExtendedGaussMove {
        n,
        i: mv.i,
        j: mv.j,
        row_values: vec![BigInt::zero(); n],
        col_values: mv.col_values.iter().map(|v| -v).collect(),
    };
    vec![row_part, col_part]
}

/// Coefficients c with sum_i c_i * values_i = target, via iterated extended
/// gcd. Zero values receive zero coefficients.
pub fn multi_bezout(values: &[BigInt], target: &BigInt) -> Result<Vec<BigInt>> {
    let mut coeffs = vec![BigInt::zero(); values.len()];
    let mut g = BigInt::zero();
    for (idx, v) in values.iter().enumerate() {
        if v.is_zero() {
            continue;
        }
        if g.is_zero() {
            g = v.abs();
            coeffs[idx] = if v.is_negative() { -BigInt::one() } else { BigInt::one() };
            continue;
        }
        let eg = g.extended_gcd(v);
        for c in coeffs.iter_mut() {
            *c *= &eg.x;
        }
        coeffs[idx] = eg.y;
        g = eg.gcd;
    }
    if g.is_zero() {
        if target.is_zero() {
            return Ok(coeffs);
        }
        return Err(Error::BezoutInfeasible { gcd: "0".into(), target: target.to_string() });
    }
    let (q, r) = target.div_rem(&g);
    if !r.is_zero() {
        return Err(Error::BezoutInfeasible { gcd: g.to_string(), target: target.to_string() });
    }
    for c in coeffs.iter_mut() {
        *c *= &q;
    }
    debug_assert_eq!(coeffs.iter().zip(values).map(|(c, v)| c * v).sum::<BigInt>(), *target);
    Ok(coeffs)
}

const COPRIMIFY_T_MAX: i64 = 1_000_000;

/// Makes the nonzero entries among the first n-1 slots of the last row
/// coprime using at most one plain Gauss move (right multiplication).
pub fn coprimify_last_row(
    q: &UnimodularMatrix,
) -> Result<(Option<GaussMove>, UnimodularMatrix)> {
    if q.det() != 1 {
        return Err(Error::NotSpecialLinear { det: q.det().to_string() });
    }
    if q.n() < 2 {
        return Err(Error::InvalidParameter("coprimify_last_row requires n >= 2".into()));
    }
    let mut w = q.mat().clone();
    let mv = coprimify_active(&mut w, q.n())?;
    Ok((mv, UnimodularMatrix::trusted(w, 1)))
}

fn gcd_of_nonzero(values: &[BigInt]) -> BigInt {
    let mut g = BigInt::zero();
    for v in values {
        if !v.is_zero() {
            g = g.gcd(v);
        }
    }
    g
}

/// In-place coprimification of the last row of the leading m x m block.
///
/// For m = 2 with a single non-unit leading entry no single move can work
/// (the entry only moves within one residue class); that case errors out and
/// never arises from [`factor`], which calls this with m >= 4.
fn coprimify_active(w: &mut IntMat, m: usize) -> Result<Option<GaussMove>> {
    let n = w.n();
    let last = m - 1;
    let leading: Vec<BigInt> = (0..last).map(|c| w[(last, c)].clone()).collect();
    if gcd_of_nonzero(&leading) == BigInt::one() {
        return Ok(None);
    }
    let corner = w[(last, last)].clone();
    if corner.is_zero() {
        // with a zero corner, the nonzero leading entries of a unimodular row
        // are already coprime, so the gcd check above must have passed
        return Err(Error::Internal("zero corner with non-coprime leading row".into()));
    }
    let nonzero: Vec<usize> = (0..last).filter(|&c| !w[(last, c)].is_zero()).collect();
    if nonzero.len() < 2 {
        // copy the corner into a vanishing slot
        let c = (0..last)
            .find(|&c| w[(last, c)].is_zero())
            .ok_or(Error::CoprimifyExhausted { t_max: COPRIMIFY_T_MAX })?;
        w.col_axpy(c, &BigInt::one(), last);
        let now: Vec<BigInt> = (0..last).map(|c| w[(last, c)].clone()).collect();
        if gcd_of_nonzero(&now) != BigInt::one() {
            return Err(Error::Internal("corner copy did not make the row coprime".into()));
        }
        return Ok(Some(GaussMove { n, i: last, j: c, value: BigInt::one() }));
    }
    // general case: add t * corner to the first nonzero slot and test the gcd
    // directly, fanning t outward from zero
    let r = nonzero[0];
    for mag in 1..=COPRIMIFY_T_MAX {
        for t in [mag, -mag] {
            let tb = BigInt::from(t);
            let mut candidate = leading.clone();
            candidate[r] = &leading[r] + &tb * &corner;
            if gcd_of_nonzero(&candidate) == BigInt::one() {
                w.col_axpy(r, &tb, last);
                return Ok(Some(GaussMove { n, i: last, j: r, value: tb }));
            }
        }
    }
    Err(Error::CoprimifyExhausted { t_max: COPRIMIFY_T_MAX })
}

/// An ordered move list whose exact product equals `target`, plus the move
/// counts contributed by the induction stages and the base case.
#[derive(Debug, Clone)]
pub struct MoveFactorization {
    pub moves: Vec<ExtendedGaussMove>,
    pub target: UnimodularMatrix,
    pub induction_moves: usize,
    pub base_moves: usize,
}

/// Factors Q in SL_n(Z) into extended Gauss moves.
///
/// Each induction stage (active size m from n down to 4) emits at most four
/// moves: optional coprimify shear, Bezout column move, row-clearing move and
/// column-clearing move. The 3x3 (or smaller) remainder is handled by
/// [`base_case_factor`] with plain shears.
pub fn factor(q: &UnimodularMatrix) -> Result<MoveFactorization> {
    if q.det() != 1 {
        return Err(Error::NotSpecialLinear { det: q.det().to_string() });
    }
    let n = q.n();
    let mut w = q.mat().clone();

    // L_m^-1 factors in stage order (they stand leftmost in the product) and
    // per-stage inverted right-move blocks, to be emitted in reverse stage
    // order after the base block.
    let mut left_inv: Vec<ExtendedGaussMove> = Vec::new();
    let mut right_blocks: Vec<Vec<ExtendedGaussMove>> = Vec::new();

    for m in (4..=n).rev() {
        let last = m - 1;
        let mut stage_rights: Vec<ExtendedGaussMove> = Vec::new();

        if w[(last, last)] != BigInt::one() {
            if let Some(g) = coprimify_active(&mut w, m)? {
                stage_rights.push(ExtendedGaussMove::from_gauss(&g));
            }
            let row: Vec<BigInt> = (0..last).map(|c| w[(last, c)].clone()).collect();
            let target = BigInt::one() - &w[(last, last)];
            let coeffs = multi_bezout(&row, &target)?;
            if coeffs.iter().any(|c| !c.is_zero()) {
                let mut col_values = vec![BigInt::zero(); n];
                for (c, v) in coeffs.iter().enumerate().skip(1) {
                    col_values[c] = v.clone();
                }
                let mv = ExtendedGaussMove::col_move(n, 0, last, coeffs[0].clone(), col_values)?;
                w = w.mul(materialize(&mv).mat());
                stage_rights.push(mv);
            }
            if w[(last, last)] != BigInt::one() {
                return Err(Error::Internal("Bezout move failed to set the corner to 1".into()));
            }
        }
        if (0..last).any(|c| !w[(last, c)].is_zero()) {
            let mut row_values = vec![BigInt::zero(); n];
            for c in 0..last {
                row_values[c] = -&w[(last, c)];
            }
            let mv = ExtendedGaussMove::row_move(n, last, 0, row_values)?;
            w = w.mul(materialize(&mv).mat());
            stage_rights.push(mv);
        }
        if (0..last).any(|c| !w[(last, c)].is_zero()) || w[(last, last)] != BigInt::one() {
            return Err(Error::Internal("last active row is not e_m after clearing".into()));
        }

        if (0..last).any(|r| !w[(r, last)].is_zero()) {
            let intersection = -&w[(0, last)];
            let mut col_values = vec![BigInt::zero(); n];
            for r in 1..last {
                col_values[r] = -&w[(r, last)];
            }
            let lmove = ExtendedGaussMove::col_move(n, 0, last, intersection, col_values)?;
            w = materialize(&lmove).mat().mul(&w);
            let inv = invert_move(&lmove);
            debug_assert_eq!(inv.len(), 1, "column-only move inverts to a single move");
            left_inv.extend(inv);
        }
        if (0..last).any(|r| !w[(r, last)].is_zero()) {
            return Err(Error::Internal("last active column is not e_m after clearing".into()));
        }

        // Q_m = L^-1 * Q_{m-1} * R3^-1 R2^-1 R1^-1
        let mut block = Vec::new();
        for mv in stage_rights.iter().rev() {
            let inv = invert_move(mv);
            debug_assert!(inv.len() <= 1, "stage right moves are row- or column-only");
            block.extend(inv);
        }
        right_blocks.push(block);
    }

    // remaining block must be (<= 3x3) plus identity padding
    let base_dim = n.min(3);
    let id = IntMat::identity(n);
    for r in 0..n {
        for c in 0..n {
            if (r >= base_dim || c >= base_dim) && w[(r, c)] != id[(r, c)] {
                return Err(Error::Internal("trailing block is not the identity".into()));
            }
        }
    }
    let mut sub = IntMat::zeros(base_dim);
    for r in 0..base_dim {
        for c in 0..base_dim {
            sub[(r, c)] = w[(r, c)].clone();
        }
    }
    let base = base_case_factor(&UnimodularMatrix::new(sub)?)?;
    let base_embedded: Vec<ExtendedGaussMove> = base
        .iter()
        .map(|g| {
            ExtendedGaussMove::from_gauss(&GaussMove { n, i: g.i, j: g.j, value: g.value.clone() })
        })
        .collect();

    let induction_moves = left_inv.len() + right_blocks.iter().map(Vec::len).sum::<usize>();
    let base_moves = base_embedded.len();
    let mut moves = left_inv;
    moves.extend(base_embedded);
    for block in right_blocks.into_iter().rev() {
        moves.extend(block);
    }

    let fact = MoveFactorization { moves, target: q.clone(), induction_moves, base_moves };
    if !verify_factorization(&fact) {
        return Err(Error::Internal("factorization product does not reproduce the input".into()));
    }
    Ok(fact)
}

/// Factors matrices of either determinant sign: a det -1 input has its last
/// column negated first, and the flag reports that the factorization targets
/// Q * diag(1, ..., 1, -1) rather than Q itself.
pub fn factor_with_sign(q: &UnimodularMatrix) -> Result<(MoveFactorization, bool)> {
    if q.det() == 1 {
        return Ok((factor(q)?, false));
    }
    let mut m = q.mat().clone();
    m.negate_col(q.n() - 1);
    Ok((factor(&UnimodularMatrix::trusted(m, 1))?, true))
}

/// Shear-only factorization for n <= 3 via exact integer row reduction.
///
/// The matrix is reduced to the identity by left shears (row operations);
/// a swap-with-sign is realized as three shears and a paired sign flip as
/// six. No fixed move-count bound is certified.
pub fn base_case_factor(q: &UnimodularMatrix) -> Result<Vec<GaussMove>> {
    if q.det() != 1 {
        return Err(Error::NotSpecialLinear { det: q.det().to_string() });
    }
    if q.n() > 3 {
        return Err(Error::InvalidParameter(format!(
            "base_case_factor handles n <= 3, got {}",
            q.n()
        )));
    }
    shear_reduce(q.mat())
}

fn shear(w: &mut IntMat, applied: &mut Vec<(usize, usize, BigInt)>, r: usize, s: usize, t: BigInt) {
    if t.is_zero() {
        return;
    }
    w.row_axpy(r, &t, s);
    applied.push((r, s, t));
}

fn signed_swap(w: &mut IntMat, applied: &mut Vec<(usize, usize, BigInt)>, a: usize, b: usize) {
    // (row_a, row_b) <- (row_b, -row_a)
    shear(w, applied, a, b, BigInt::one());
    shear(w, applied, b, a, -BigInt::one());
    shear(w, applied, a, b, BigInt::one());
}

fn shear_reduce(m0: &IntMat) -> Result<Vec<GaussMove>> {
    let n = m0.n();
    let mut w = m0.clone();
    // (r, s, t) records the applied left shear row_r += t * row_s
    let mut applied: Vec<(usize, usize, BigInt)> = Vec::new();

    for c in 0..n {
        loop {
            let nz: Vec<usize> = (c..n).filter(|&r| !w[(r, c)].is_zero()).collect();
            if nz.is_empty() {
                return Err(Error::Internal("singular column in shear reduction".into()));
            }
            if nz.len() == 1 {
                break;
            }
            let pivot_row =
                *nz.iter().min_by_key(|&&r| w[(r, c)].magnitude().clone()).expect("nonempty");
            for &r in &nz {
                if r == pivot_row {
                    continue;
                }
                let quot = &w[(r, c)] / &w[(pivot_row, c)];
                shear(&mut w, &mut applied, r, pivot_row, -quot);
            }
        }
        let r = (c..n).find(|&r| !w[(r, c)].is_zero()).expect("one nonzero remains");
        if r != c {
            signed_swap(&mut w, &mut applied, c, r);
        }
        let pivot = w[(c, c)].clone();
        if !(pivot == BigInt::one() || pivot == -BigInt::one()) {
            return Err(Error::Internal(format!(
                "pivot {pivot} is not a unit; the column gcd argument failed"
            )));
        }
        for r2 in 0..n {
            if r2 == c || w[(r2, c)].is_zero() {
                continue;
            }
            let quot = &w[(r2, c)] / &pivot;
            shear(&mut w, &mut applied, r2, c, -quot);
        }
    }

    // diagonal is now +/-1 with an even number of -1 entries (det +1);
    // a double signed swap negates a pair of rows
    let negs: Vec<usize> = (0..n).filter(|&i| w[(i, i)] == -BigInt::one()).collect();
    if negs.len() % 2 != 0 {
        return Err(Error::Internal("odd number of negative pivots for det +1".into()));
    }
    for pair in negs.chunks(2) {
        signed_swap(&mut w, &mut applied, pair[0], pair[1]);
        signed_swap(&mut w, &mut applied, pair[0], pair[1]);
    }
    if !w.is_identity() {
        return Err(Error::Internal("shear reduction did not reach the identity".into()));
    }
    // S_k ... S_1 Q = I implies Q = S_1^-1 ... S_k^-1
    Ok(applied.into_iter().map(|(r, s, t)| GaussMove { n, i: r, j: s, value: -t }).collect())
}

/// True iff the exact ordered product of the materialized moves equals the
/// target.
pub fn verify_factorization(f: &MoveFactorization) -> bool {
    let n = f.target.n();
    let mut product = IntMat::identity(n);
    for mv in &f.moves {
        if mv.n != n {
            return false;
        }
        product = product.mul(materialize(mv).mat());
    }
    product == *f.target.mat()
}
