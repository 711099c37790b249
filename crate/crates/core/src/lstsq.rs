//! Ridge / minimum-norm least squares through the SVD.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative singular-value cutoff below which a direction counts as null.
pub const RANK_TOL: f64 = 1e-10;

/// Ridge used when `ridge = 0` meets a rank-deficient system.
pub const RIDGE_BUMP: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Solve {
    /// `[cols(a), cols(b)]`
    pub x: Tensor,
    /// Ridge actually applied.
    pub ridge: f64,
    pub rank: usize,
    /// `‖A x − B‖_F`
    pub residual: f64,
    /// Set when a zero ridge was raised because the system is rank deficient.
    pub bumped: bool,
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let data = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
    Tensor::from_parts(vec![r, c], data)
}

/// Minimizes `‖A x − B‖² + ridge·‖x‖²`; `x = V diag(s/(s²+ridge)) Uᵀ B`, which
/// is the minimum-norm solution when `ridge = 0`.
pub fn ridge_solve(a: &Tensor, b: &Tensor, ridge: f64) -> Result<Solve> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.rows() {
        return Err(Error::shape(
            "ridge_solve",
            format!("A {:?} and B {:?}", a.shape(), b.shape()),
        ));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("ridge must be >= 0, got {ridge}")));
    }
    let am = to_matrix(a);
    let bm = to_matrix(b);
    let svd = am.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let rank = s.iter().filter(|&&v| v > RANK_TOL * smax.max(f64::MIN_POSITIVE)).count();
    let full_rank = rank == a.rows().min(a.cols());
    let (ridge, bumped) = if ridge == 0.0 && !full_rank {
        log::warn!("rank-deficient system (rank {rank}), ridge raised to {RIDGE_BUMP}");
        (RIDGE_BUMP, true)
    } else {
        (ridge, false)
    };
    let cutoff = RANK_TOL * smax;
    let mut ut_b = u.transpose() * &bm;
    for (i, &si) in s.iter().enumerate() {
        let f = if si > cutoff { si / (si * si + ridge) } else { 0.0 };
        ut_b.row_mut(i).scale_mut(f);
    }
    let x = v_t.transpose() * ut_b;
    let residual = (&am * &x - &bm).norm();
    let x = from_matrix(&x);
    x.check_finite("ridge_solve")?;
    Ok(Solve {
        x,
        ridge,
        rank,
        residual,
        bumped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_invertible_system_is_solved_exactly() {
        let a = random(6, 6, 1);
        let x_true = random(6, 3, 2);
        let b = a.matmul(&x_true).unwrap();
        let s = ridge_solve(&a, &b, 0.0).unwrap();
        assert!(!s.bumped);
        assert!(s.residual <= 1e-8);
        for (u, v) in s.x.data().iter().zip(x_true.data()) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn underdetermined_gives_minimum_norm() {
        // one equation x1 + x2 = 2: the minimum-norm solution is (1, 1)
        let a = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let s = ridge_solve(&a, &b, 0.0).unwrap();
        assert!((s.x.data()[0] - 1.0).abs() < 1e-12 && (s.x.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_bumps_zero_ridge() {
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let s = ridge_solve(&a, &b, 0.0).unwrap();
        assert!(s.bumped);
        assert_eq!(s.rank, 1);
    }

    #[test]
    fn residual_shrinks_with_ridge() {
        let a = random(40, 8, 3);
        let b = random(40, 2, 4);
        let mut prev = f64::INFINITY;
        for k in (0..8).rev() {
            let r = ridge_solve(&a, &b, 10f64.powi(k - 6)).unwrap().residual;
            assert!(r <= prev + 1e-12);
            prev = r;
        }
        let exact = ridge_solve(&a, &b, 0.0).unwrap().residual;
        assert!((prev - exact).abs() < 1e-6);
    }
}
