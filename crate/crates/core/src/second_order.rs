//! Curvature utilities: Hessian-vector products, power iteration for the top
//! eigenvalue, and a central-difference gradient checker.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Step of the central difference of gradients used by [`hvp`].
pub const HVP_STEP: f64 = 1e-4;

/// `∇²ℓ(ω)·v` as the central difference of gradients
/// `(∇ℓ(ω+εv) − ∇ℓ(ω−εv)) / 2ε`. Exact (up to rounding) for quadratic losses.
pub fn hvp<F>(mut grad: F, params: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != params.len() {
        return Err(Error::shape(
            "hvp",
            format!("direction has {} entries, parameters {}", v.len(), params.len()),
        ));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; v.len()]);
    }
    let plus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p + HVP_STEP * d).collect();
    let minus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p - HVP_STEP * d).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    if gp.len() != params.len() || gm.len() != params.len() {
        return Err(Error::shape("hvp", "gradient length differs from parameter count"));
    }
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * HVP_STEP))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerIterConfig {
    pub iters: usize,
    pub tol: f64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        PowerIterConfig {
            iters: 200,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Power iteration for the largest-magnitude eigenvalue of a symmetric operator.
///
/// Non-convergence is reported through [`EigenEstimate::converged`]; the last
/// Rayleigh quotient is returned either way.
pub fn max_eigenvalue<F, R>(
    mut apply: F,
    dim: usize,
    cfg: PowerIterConfig,
    rng: &mut R,
) -> Result<EigenEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    if cfg.iters == 0 {
        return Err(Error::Config("power iteration needs iters >= 1".into()));
    }
    if dim == 0 {
        return Err(Error::shape("max_eigenvalue", "zero dimension"));
    }
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalize(&mut v);
    let mut prev: Option<f64> = None;
    let mut rq = 0.0;
    for it in 1..=cfg.iters {
        let w = apply(&v)?;
        if w.len() != dim {
            return Err(Error::shape("max_eigenvalue", "operator changed dimension"));
        }
        rq = dot(&v, &w) / dot(&v, &v);
        if !rq.is_finite() {
            return Err(Error::NonFinite("power iteration"));
        }
        let wn = dot(&w, &w).sqrt();
        if wn == 0.0 {
            return Ok(EigenEstimate {
                value: 0.0,
                converged: true,
                iterations: it,
            });
        }
        if let Some(p) = prev {
            if (rq - p).abs() < cfg.tol {
                return Ok(EigenEstimate {
                    value: rq,
                    converged: true,
                    iterations: it,
                });
            }
        }
        prev = Some(rq);
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Ok(EigenEstimate {
        value: rq,
        converged: false,
        iterations: cfg.iters,
    })
}

/// Max over coordinates of `|g_analytic − g_numeric| / max(1, |g_analytic|)`
/// with central differences of step `h`. `f` returns `(value, gradient)`.
pub fn finite_diff_check<F>(f: F, point: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(point);
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let fp = f(&x).0;
        x[i] = point[i] - h;
        let fm = f(&x).0;
        x[i] = point[i];
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat_apply(a: &[Vec<f64>]) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
        move |v: &[f64]| Ok(a.iter().map(|row| dot(row, v)).collect())
    }

    /// Cyclic Jacobi eigenvalue oracle for small symmetric matrices.
    #[allow(clippy::needless_range_loop)]
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i][i]).collect()
    }

    #[test]
    fn hvp_of_quadratic_is_a_times_v() {
        // l = 0.5 wᵀ diag(1,2) w
        let grad = |w: &[f64]| Ok(vec![w[0], 2.0 * w[1]]);
        let hv = hvp(grad, &[0.3, -0.7], &[1.0, 1.0]).unwrap();
        assert!((hv[0] - 1.0).abs() < 1e-10 && (hv[1] - 2.0).abs() < 1e-10);
        let zero = hvp(grad, &[0.3, -0.7], &[0.0, 0.0]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(hvp(grad, &[0.3, -0.7], &[1.0]).is_err());
    }

    #[test]
    fn hvp_of_cubic_matches_symbolic_hessian() {
        // l = w1² w2, ∇ = (2 w1 w2, w1²), H = [[2 w2, 2 w1], [2 w1, 0]]
        let grad = |w: &[f64]| Ok(vec![2.0 * w[0] * w[1], w[0] * w[0]]);
        let hv = hvp(grad, &[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-8, "{hv:?}");
        assert!((hv[1] - 2.0).abs() < 1e-8, "{hv:?}");
    }

    #[test]
    fn power_iteration_on_diagonal_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 5.0]];
        let cfg = PowerIterConfig { iters: 100, tol: 1e-14 };
        let e = max_eigenvalue(mat_apply(&d), 3, cfg, &mut rng).unwrap();
        assert!((e.value - 5.0).abs() < 1e-6, "{e:?}");

        let eye = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let e = max_eigenvalue(mat_apply(&eye), 3, cfg, &mut rng).unwrap();
        assert_eq!(e.value, 1.0);
        assert!(e.converged);
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = vec![vec![1.0, 0.0], vec![0.0, 1.01]];
        let e = max_eigenvalue(mat_apply(&d), 2, PowerIterConfig { iters: 2, tol: 1e-15 }, &mut rng)
            .unwrap();
        assert!(!e.converged);
        assert!(max_eigenvalue(mat_apply(&d), 2, PowerIterConfig { iters: 0, tol: 1e-3 }, &mut rng).is_err());
    }

    #[test]
    fn power_iteration_matches_jacobi_on_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..5 {
            let n = 10;
            // PSD shift keeps the top eigenvalue the one of largest magnitude
            let b: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let a: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| (0..n).map(|k| b[i][k] * b[j][k]).sum()).collect())
                .collect();
            let oracle = jacobi_eigenvalues(a.clone())
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            let e = max_eigenvalue(
                mat_apply(&a),
                n,
                PowerIterConfig { iters: 5000, tol: 1e-13 },
                &mut rng,
            )
            .unwrap();
            assert!(
                (e.value - oracle).abs() <= 1e-4 * oracle.abs(),
                "trial {trial}: {} vs {oracle}",
                e.value
            );
        }
    }

    #[test]
    fn finite_diff_examples() {
        let sq = |p: &[f64]| (p[0] * p[0], vec![2.0 * p[0]]);
        assert!(finite_diff_check(sq, &[3.0], 1e-5) <= 1e-6);
        let constant = |_: &[f64]| (4.0, vec![0.0, 0.0]);
        assert_eq!(finite_diff_check(constant, &[1.0, 2.0], 1e-5), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn quadratic_hvp_is_exact(
            entries in proptest::collection::vec(-2.0f64..2.0, 9),
            w in proptest::collection::vec(-1.0f64..1.0, 3),
            v in proptest::collection::vec(-1.0f64..1.0, 3),
        ) {
            let a: Vec<Vec<f64>> = (0..3)
                .map(|i| (0..3).map(|j| 0.5 * (entries[i * 3 + j] + entries[j * 3 + i])).collect())
                .collect();
            let grad = |p: &[f64]| Ok(a.iter().map(|row| dot(row, p)).collect::<Vec<_>>());
            let hv = hvp(grad, &w, &v).unwrap();
            for i in 0..3 {
                prop_assert!((hv[i] - dot(&a[i], &v)).abs() <= 1e-10);
            }
        }

        #[test]
        fn power_iteration_dominates_rayleigh_quotients(
            entries in proptest::collection::vec(-1.0f64..1.0, 16),
            probe in proptest::collection::vec(-1.0f64..1.0, 4),
            seed in 0u64..1000,
        ) {
            let b: Vec<Vec<f64>> = (0..4).map(|i| entries[i * 4..i * 4 + 4].to_vec()).collect();
            let a: Vec<Vec<f64>> = (0..4)
                .map(|i| (0..4).map(|j| (0..4).map(|k| b[i][k] * b[j][k]).sum()).collect())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = max_eigenvalue(mat_apply(&a), 4, PowerIterConfig { iters: 20000, tol: 1e-15 }, &mut rng).unwrap();
            let pn = dot(&probe, &probe);
            prop_assume!(pn > 1e-6);
            let av: Vec<f64> = a.iter().map(|row| dot(row, &probe)).collect();
            let rq = dot(&probe, &av) / pn;
            prop_assert!(e.value >= rq - 1e-8, "{} < {}", e.value, rq);
        }
    }
}
