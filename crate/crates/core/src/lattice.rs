//! Core lattice domain types and the orthogonality-defect objective.
//!
//! A lattice is represented by an invertible matrix whose columns are the
//! basis vectors. The orthogonality defect d(B) = prod_i ||b_i|| / |det B|
//! measures how far the basis is from orthogonal (1 exactly when orthogonal,
//! >= 1 always by Hadamard's inequality).

use num_bigint::BigInt;
use num_traits::One;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::intmat::IntMat;
use crate::mat::Mat;
use crate::rng::stream_rng;

/// Singularity tolerance on |det|.
pub const TOL_DET: f64 = 1e-12;

/// An invertible real matrix whose columns are lattice basis vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    mat: Mat,
}

impl Basis {
    pub fn new(mat: Mat) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::DimensionMismatch { left: mat.rows(), right: mat.cols() });
        }
        let det = mat.det();
        if det.abs() <= TOL_DET {
            return Err(Error::SingularBasis { det: det.abs(), tol: TOL_DET });
        }
        Ok(Basis { mat })
    }

    pub fn identity(n: usize) -> Self {
        Basis { mat: Mat::identity(n) }
    }

    pub fn from_cols(cols: &[Vec<f64>]) -> Result<Self> {
        Basis::new(Mat::from_cols(cols)?)
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn into_mat(self) -> Mat {
        self.mat
    }

    /// Norm of the longest basis vector.
    pub fn max_col_norm(&self) -> f64 {
        (0..self.n()).map(|j| self.mat.col_norm(j)).fold(0.0, f64::max)
    }
}

/// Symmetric positive-definite Gram matrix G = B^T B.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    mat: Mat,
}

impl GramMatrix {
    /// Validates symmetry (exact) and positive definiteness (leading principal
    /// minors above the singularity tolerance).
    pub fn new(mat: Mat) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::DimensionMismatch { left: mat.rows(), right: mat.cols() });
        }
        let n = mat.rows();
        for i in 0..n {
            for j in i + 1..n {
                let diff = (mat[(i, j)] - mat[(j, i)]).abs();
                if diff != 0.0 {
                    return Err(Error::NonSymmetric { i, j, diff });
                }
            }
        }
        for k in 1..=n {
            let minor = leading_minor(&mat, k);
            if minor <= TOL_DET {
                return Err(Error::NotPositiveDefinite { k, minor });
            }
        }
        Ok(GramMatrix { mat })
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }
}

fn leading_minor(m: &Mat, k: usize) -> f64 {
    let mut sub = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            sub[(i, j)] = m[(i, j)];
        }
    }
    sub.det()
}

/// Exact integer matrix with determinant +1 or -1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnimodularMatrix {
    mat: IntMat,
    det: i8,
}

impl UnimodularMatrix {
    pub fn new(mat: IntMat) -> Result<Self> {
        let det = mat.det();
        if det == BigInt::one() {
            Ok(UnimodularMatrix { mat, det: 1 })
        } else if det == -BigInt::one() {
            Ok(UnimodularMatrix { mat, det: -1 })
        } else {
            Err(Error::NotUnimodular { det: det.to_string() })
        }
    }

    pub fn identity(n: usize) -> Self {
        UnimodularMatrix { mat: IntMat::identity(n), det: 1 }
    }

    /// Wraps a matrix whose determinant is known by construction (e.g. a
    /// materialized Gauss move). Debug builds re-verify exactly.
    pub(crate) fn trusted(mat: IntMat, det: i8) -> Self {
        debug_assert_eq!(mat.det(), BigInt::from(det));
        UnimodularMatrix { mat, det }
    }

    pub fn n(&self) -> usize {
        self.mat.n()
    }

    pub fn det(&self) -> i8 {
        self.det
    }

    pub fn mat(&self) -> &IntMat {
        &self.mat
    }

    pub fn into_mat(self) -> IntMat {
        self.mat
    }

    pub fn mul(&self, other: &UnimodularMatrix) -> UnimodularMatrix {
        UnimodularMatrix { mat: self.mat.mul(&other.mat), det: self.det * other.det }
    }
}

/// d(B) = prod_i ||b_i|| / |det B|
pub fn orthogonality_defect(basis: &Basis) -> f64 {
    let m = basis.mat();
    let norms: f64 = (0..basis.n()).map(|j| m.col_norm(j)).product();
    norms / m.det().abs()
}

/// log d(B) = sum_i log ||b_i|| - log |det B|
pub fn log_defect(basis: &Basis) -> f64 {
    let m = basis.mat();
    let logs: f64 = (0..basis.n()).map(|j| m.col_norm(j).ln()).sum();
    logs - m.det().abs().ln()
}

/// G = B^T B, explicitly symmetrized so G[i][j] == G[j][i] holds exactly.
pub fn gram(basis: &Basis) -> GramMatrix {
    let m = basis.mat();
    let bt = m.transpose();
    let g = bt.matmul(m);
    let mut sym = Mat::zeros(basis.n(), basis.n());
    for i in 0..basis.n() {
        for j in 0..basis.n() {
            sym[(i, j)] = 0.5 * (g[(i, j)] + g[(j, i)]);
        }
    }
    GramMatrix { mat: sym }
}

/// B * Q: change of basis that leaves the lattice (and |det|) unchanged.
pub fn apply_unimodular(basis: &Basis, q: &UnimodularMatrix) -> Result<Basis> {
    if basis.n() != q.n() {
        return Err(Error::DimensionMismatch { left: basis.n(), right: q.n() });
    }
    Basis::new(basis.mat().matmul(&q.mat().to_f64()))
}

/// A uniformly random signed permutation matrix (an element of the
/// hyperoctahedral group): exactly one entry per row and column, each +1/-1.
pub fn random_signed_permutation(n: usize, seed: u64) -> UnimodularMatrix {
    let mut rng = stream_rng(seed, crate::rng::NS_SIGNED_PERM, 0);
    signed_permutation_from_rng(n, &mut rng)
}

pub fn signed_permutation_from_rng<R: Rng>(n: usize, rng: &mut R) -> UnimodularMatrix {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut m = IntMat::zeros(n);
    let mut det_sign = permutation_sign(&perm);
    for (col, &row) in perm.iter().enumerate() {
        let s: i64 = if rng.gen::<bool>() { 1 } else { -1 };
        if s < 0 {
            det_sign = -det_sign;
        }
        m[(row, col)] = BigInt::from(s);
    }
    UnimodularMatrix { mat: m, det: det_sign }
}

fn permutation_sign(perm: &[usize]) -> i8 {
    let mut seen = vec![false; perm.len()];
    let mut sign = 1i8;
    for start in 0..perm.len() {
        if seen[start] {
            continue;
        }
        let mut len = 0;
        let mut i = start;
        while !seen[i] {
            seen[i] = true;
            i = perm[i];
            len += 1;
        }
        if len % 2 == 0 {
            sign = -sign;
        }
    }
    sign
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_basis, random_orthogonal};
    use rand::Rng;

    fn basis(cols: &[Vec<f64>]) -> Basis {
        Basis::from_cols(cols).unwrap()
    }

    #[test]
    fn defect_identity_is_one() {
        for n in 1..=6 {
            assert!((orthogonality_defect(&Basis::identity(n)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn defect_orthogonal_columns() {
        let b = basis(&[vec![3.0, 0.0], vec![0.0, 4.0]]);
        assert!((orthogonality_defect(&b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn defect_sheared_square() {
        let b = basis(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert!((orthogonality_defect(&b) - 2.0_f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn log_defect_identity_zero() {
        assert!(log_defect(&Basis::identity(3)).abs() < 1e-12);
    }

    #[test]
    fn log_defect_sheared_square() {
        let b = basis(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert!((log_defect(&b) - 0.5 * 2.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn log_defect_matches_direct_evaluation() {
        // oracle: evaluate the defect directly, then take the log
        let mut rng = stream_rng(11, crate::rng::NS_DATASET, 0);
        for _ in 0..50 {
            let b = random_basis(4, &mut rng);
            let direct = orthogonality_defect(&b).ln();
            assert!((log_defect(&b) - direct).abs() < 1e-9 * (1.0 + direct.abs()));
            assert!(log_defect(&b) >= -1e-9);
        }
    }

    #[test]
    fn exp_log_defect_roundtrip() {
        let mut rng = stream_rng(12, crate::rng::NS_DATASET, 0);
        for _ in 0..50 {
            let b = random_basis(5, &mut rng);
            let d = orthogonality_defect(&b);
            assert!((log_defect(&b).exp() - d).abs() <= 1e-9 * d);
        }
    }

    #[test]
    fn defect_scale_invariant() {
        let mut rng = stream_rng(13, crate::rng::NS_DATASET, 0);
        for _ in 0..50 {
            let b = random_basis(4, &mut rng);
            let c = 0.1 + rng.gen::<f64>() * 10.0;
            let scaled = Basis::new(b.mat().scale(c)).unwrap();
            let (d1, d2) = (orthogonality_defect(&b), orthogonality_defect(&scaled));
            assert!((d1 - d2).abs() <= 1e-9 * d1.max(d2));
        }
    }

    #[test]
    fn singular_basis_rejected() {
        let err = Basis::from_cols(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap_err();
        assert!(matches!(err, Error::SingularBasis { .. }));
    }

    #[test]
    fn gram_identity() {
        let g = gram(&Basis::identity(3));
        assert_eq!(g.mat(), &Mat::identity(3));
    }

    #[test]
    fn gram_hand_product() {
        let b = basis(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        let g = gram(&b);
        assert_eq!(g.mat().to_row_vecs(), vec![vec![1.0, 1.0], vec![1.0, 2.0]]);
    }

    #[test]
    fn gram_left_orthogonal_invariant() {
        let mut rng = stream_rng(14, crate::rng::NS_DATASET, 0);
        for _ in 0..20 {
            let b = random_basis(4, &mut rng);
            let u = random_orthogonal(4, &mut rng);
            let ub = Basis::new(u.matmul(b.mat())).unwrap();
            assert!(gram(&ub).mat().max_abs_diff(gram(&b).mat()) < 1e-9);
        }
    }

    #[test]
    fn gram_symmetry_exact() {
        let mut rng = stream_rng(15, crate::rng::NS_DATASET, 0);
        for _ in 0..20 {
            let b = random_basis(5, &mut rng);
            let g = gram(&b);
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(g.mat()[(i, j)], g.mat()[(j, i)]);
                }
            }
            // positive definite per the validating constructor
            assert!(GramMatrix::new(g.mat().clone()).is_ok());
        }
    }

    #[test]
    fn apply_unimodular_identity() {
        let b = basis(&[vec![1.0, 2.0], vec![3.0, 1.0]]);
        let out = apply_unimodular(&b, &UnimodularMatrix::identity(2)).unwrap();
        assert_eq!(out.mat(), b.mat());
    }

    #[test]
    fn apply_unimodular_hand_product() {
        let b = Basis::identity(2);
        let q =
            UnimodularMatrix::new(IntMat::from_i64_rows(&[vec![1, 2], vec![0, 1]]).unwrap())
                .unwrap();
        let out = apply_unimodular(&b, &q).unwrap();
        assert_eq!(out.mat().col(0), vec![1.0, 0.0]);
        assert_eq!(out.mat().col(1), vec![2.0, 1.0]);
    }

    #[test]
    fn apply_unimodular_preserves_det_and_hadamard() {
        let mut rng = stream_rng(16, crate::rng::NS_DATASET, 0);
        for trial in 0..30 {
            let b = random_basis(4, &mut rng);
            let h = signed_permutation_from_rng(4, &mut rng);
            let out = apply_unimodular(&b, &h).unwrap();
            let (d0, d1) = (b.mat().det().abs(), out.mat().det().abs());
            assert!(
                (d0 - d1).abs() <= 1e-9 * d0,
                "trial {trial}: |det| changed {d0} -> {d1}"
            );
            assert!(log_defect(&out) >= -1e-9);
        }
    }

    #[test]
    fn apply_unimodular_dimension_mismatch() {
        let b = Basis::identity(3);
        let q = UnimodularMatrix::identity(2);
        assert!(matches!(
            apply_unimodular(&b, &q),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn signed_permutation_shape() {
        for seed in 0..20 {
            let h = random_signed_permutation(5, seed);
            assert!(h.det() == 1 || h.det() == -1);
            // exactly one +/-1 per row and column, H^T H = I exactly
            let m = h.mat();
            for i in 0..5 {
                let row_nonzero: Vec<_> =
                    (0..5).filter(|&j| !num_traits::Zero::is_zero(&m[(i, j)])).collect();
                let col_nonzero: Vec<_> =
                    (0..5).filter(|&j| !num_traits::Zero::is_zero(&m[(j, i)])).collect();
                assert_eq!(row_nonzero.len(), 1);
                assert_eq!(col_nonzero.len(), 1);
                assert_eq!(m[(i, row_nonzero[0])].magnitude(), BigInt::one().magnitude());
            }
            let prod = transpose_int(m).mul(m);
            assert!(prod.is_identity());
        }
    }

    fn transpose_int(m: &IntMat) -> IntMat {
        let n = m.n();
        let mut t = IntMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                t[(j, i)] = m[(i, j)].clone();
            }
        }
        t
    }

    #[test]
    fn signed_permutation_n1() {
        let h = random_signed_permutation(1, 3);
        let v = &h.mat()[(0, 0)];
        assert!(*v == BigInt::one() || *v == -BigInt::one());
    }

    #[test]
    fn defect_invariant_under_signed_permutation() {
        let mut rng = stream_rng(17, crate::rng::NS_DATASET, 0);
        for _ in 0..50 {
            let b = random_basis(4, &mut rng);
            let h = signed_permutation_from_rng(4, &mut rng);
            let bh = apply_unimodular(&b, &h).unwrap();
            let (d0, d1) = (orthogonality_defect(&b), orthogonality_defect(&bh));
            assert!((d0 - d1).abs() < 1e-9 * d0.max(1.0));
        }
    }

    #[test]
    fn gram_rejects_asymmetric() {
        let m = Mat::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).unwrap();
        assert!(matches!(GramMatrix::new(m), Err(Error::NonSymmetric { .. })));
    }

    #[test]
    fn gram_rejects_indefinite() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(GramMatrix::new(m), Err(Error::NotPositiveDefinite { .. })));
    }
}
