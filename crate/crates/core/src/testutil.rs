//! Shared helpers for unit tests.

use rand::Rng;

use crate::lattice::Basis;
use crate::mat::Mat;

/// Random well-conditioned basis with entries in [-1, 1].
pub fn random_basis<R: Rng>(n: usize, rng: &mut R) -> Basis {
    loop {
        let cols: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).collect();
        if let Ok(b) = Basis::from_cols(&cols) {
            if b.mat().det().abs() > 1e-3 {
                return b;
            }
        }
    }
}

/// Random orthogonal matrix via Gram-Schmidt on a random square matrix.
pub fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> Mat {
    loop {
        let cols: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let mut q: Vec<Vec<f64>> = Vec::new();
        let mut ok = true;
        for col in cols {
            let mut v = col;
            for u in &q {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= proj * y;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for x in v.iter_mut() {
                *x /= norm;
            }
            q.push(v);
        }
        if ok {
            return Mat::from_cols(&q).unwrap();
        }
    }
}
