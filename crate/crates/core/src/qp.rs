//! Dense strictly convex QP solver.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 d' H d + g' d
//!     subject to  A d <= b
//! ```
//!
//! with the dual active-set scheme of Goldfarb and Idnani: start from the
//! unconstrained minimizer and repeatedly add the most violated constraint,
//! dropping working-set rows whose multipliers would turn negative. Every
//! iterate is dual feasible, so termination yields the exact minimizer and an
//! infeasible QP is detected when a violated row is linearly dependent on the
//! working set with no multiplier left to release.
//!
//! Problems here are a handful of variables, so the equality-constrained
//! subproblems are solved through an explicit `H^-1` and a Schur complement
//! rather than updated factorizations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QpError {
    #[error("quadratic program is infeasible")]
    Infeasible,
    #[error("Hessian is not positive definite")]
    NotConvex,
    #[error("active-set iteration limit reached")]
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// One entry per row of `A`, zero off the working set.
    pub multipliers: DVector<f64>,
    /// Final working set, in the order rows were added.
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Feasibility tolerance relative to the row scale.
const FEAS_TOL: f64 = 1e-12;

pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    warm_active: Option<&[usize]>,
) -> Result<QpSolution, QpError> {
    let n = h.nrows();
    let rows = a.nrows();
    debug_assert_eq!(g.len(), n);
    debug_assert_eq!(b.len(), rows);
    debug_assert!(rows == 0 || a.ncols() == n);

    let h_inv = h.clone().cholesky().ok_or(QpError::NotConvex)?.inverse();
    // Columns of `at` are the rows of `A`; dots against them do not allocate.
    let at = a.transpose();
    let mut x = -(&h_inv * g);
    let mut working: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let row_norm: Vec<f64> = (0..rows).map(|i| at.column(i).norm()).collect();
    let warm: Vec<usize> = warm_active
        .unwrap_or(&[])
        .iter()
        .copied()
        .filter(|&i| i < rows)
        .collect();

    let max_iter = 50 * (n + rows) + 100;
    let mut iterations = 0;
    loop {
        let violation = |x: &DVector<f64>, i: usize| at.column(i).dot(x) - b[i];
        let x_scale = x.amax();
        let tolerance = |i: usize| FEAS_TOL * (1.0 + b[i].abs() + row_norm[i] * x_scale);

        // Warm-start rows take precedence while they are violated; after that
        // the most violated row by normalized distance.
        let mut pick = warm
            .iter()
            .copied()
            .find(|&i| !working.contains(&i) && violation(&x, i) > tolerance(i));
        if pick.is_none() {
            let mut worst = 0.0;
            for i in 0..rows {
                if working.contains(&i) {
                    continue;
                }
                let s = violation(&x, i);
                if s > tolerance(i) {
                    let scaled = s / row_norm[i].max(f64::MIN_POSITIVE);
                    if scaled > worst {
                        worst = scaled;
                        pick = Some(i);
                    }
                }
            }
        }
        let Some(p) = pick else {
            let mut multipliers = DVector::zeros(rows);
            for (&i, &u) in working.iter().zip(&mult) {
                multipliers[i] = u;
            }
            return Ok(QpSolution {
                x,
                multipliers,
                active: working,
                iterations,
            });
        };

        let a_p = at.column(p).into_owned();
        let hinv_ap = &h_inv * &a_p;
        let reference = a_p.dot(&hinv_ap);
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::MaxIterations);
            }

            // Primal direction z and multiplier rates r for a unit increase of u_p.
            let (z, r) = if working.is_empty() {
                (-&hinv_ap, DVector::zeros(0))
            } else {
                let a_wt = at.select_columns(working.iter());
                let hinv_awt = &h_inv * &a_wt;
                let schur = a_wt.tr_mul(&hinv_awt);
                let rhs = -a_wt.tr_mul(&hinv_ap);
                let r = match schur.clone().cholesky() {
                    Some(c) => c.solve(&rhs),
                    None => schur.lu().solve(&rhs).ok_or(QpError::MaxIterations)?,
                };
                let z = -(&hinv_ap + hinv_awt * &r);
                (z, r)
            };

            // Largest step before a working-set multiplier hits zero.
            let mut partial: Option<(f64, usize)> = None;
            for (k, (&rk, &uk)) in r.iter().zip(&mult).enumerate() {
                if rk < 0.0 {
                    let t = uk / -rk;
                    if partial.is_none_or(|(best, _)| t < best) {
                        partial = Some((t, k));
                    }
                }
            }

            let curvature = -a_p.dot(&z);
            if curvature <= 1e-13 * reference {
                // a_p is dependent on the working set.
                let Some((t, k)) = partial else {
                    return Err(QpError::Infeasible);
                };
                for (uk, rk) in mult.iter_mut().zip(r.iter()) {
                    *uk += t * rk;
                }
                u_p += t;
                working.remove(k);
                mult.remove(k);
                continue;
            }

            let full = violation(&x, p).max(0.0) / curvature;
            let (t, drop) = match partial {
                Some((t2, k)) if t2 < full => (t2, Some(k)),
                _ => (full, None),
            };
            x.axpy(t, &z, 1.0);
            for (uk, rk) in mult.iter_mut().zip(r.iter()) {
                *uk += t * rk;
            }
            u_p += t;
            match drop {
                Some(k) => {
                    working.remove(k);
                    mult.remove(k);
                }
                None => {
                    working.push(p);
                    mult.push(u_p);
                    break;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn unconstrained() {
        let h = DMatrix::identity(2, 2);
        let sol = solve_qp(&h, &v(&[1.0, 1.0]), &DMatrix::zeros(0, 2), &v(&[]), None).unwrap();
        assert_eq!(sol.x, v(&[-1.0, -1.0]));
        assert!(sol.active.is_empty());
    }

    #[test]
    fn single_active_bound() {
        let h = DMatrix::identity(1, 1);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let sol = solve_qp(&h, &v(&[-2.0]), &a, &v(&[1.0]), None).unwrap();
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(sol.multipliers[0], 1.0, epsilon = 1e-15);
        assert_eq!(sol.active, vec![0]);
    }

    #[test]
    fn detects_infeasibility() {
        // x <= -1 and -x <= -1
        let h = DMatrix::identity(1, 1);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let err = solve_qp(&h, &v(&[0.0]), &a, &v(&[-1.0, -1.0]), None).unwrap_err();
        assert_eq!(err, QpError::Infeasible);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = solve_qp(&h, &v(&[0.0, 0.0]), &DMatrix::zeros(0, 2), &v(&[]), None).unwrap_err();
        assert_eq!(err, QpError::NotConvex);
    }

    #[test]
    fn duplicated_rows_are_harmless() {
        let h = DMatrix::identity(2, 2);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let sol = solve_qp(&h, &v(&[-3.0, -3.0]), &a, &v(&[1.0, 1.0, 2.0]), None).unwrap();
        assert_relative_eq!(sol.x, v(&[1.0, 2.0]), epsilon = 1e-14);
        let total: f64 = sol.multipliers.rows(0, 2).sum();
        assert_relative_eq!(total, 2.0, epsilon = 1e-14);
    }

    /// Brute force over all working sets of size <= n: the unique point that
    /// is primal feasible with nonnegative multipliers is the minimizer.
    fn enumeration_oracle(
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let n = h.nrows();
        let rows = a.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << rows) {
            let set: Vec<usize> = (0..rows).filter(|i| mask & (1 << i) != 0).collect();
            if set.len() > n {
                continue;
            }
            let k = set.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(h);
            let mut rhs = DVector::zeros(n + k);
            rhs.rows_mut(0, n).copy_from(&(-g));
            for (j, &i) in set.iter().enumerate() {
                for c in 0..n {
                    kkt[(n + j, c)] = a[(i, c)];
                    kkt[(c, n + j)] = a[(i, c)];
                }
                rhs[n + j] = b[i];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).into_owned();
            let lambda = sol.rows(n, k);
            if lambda.iter().any(|&l| l < -1e-10) {
                continue;
            }
            if (a * &x - b).iter().any(|&s| s > 1e-10) {
                continue;
            }
            let obj = 0.5 * x.dot(&(h * &x)) + g.dot(&x);
            if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, x));
            }
        }
        best.map(|(_, x)| x)
    }

    #[test]
    fn matches_enumeration_oracle_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 5;
        let rows = 8;
        let mut checked = 0;
        while checked < 200 {
            let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
            let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let a = DMatrix::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
            let feasible = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
            let b = &a * &feasible + DVector::from_fn(rows, |_, _| rng.random_range(0.0..0.5));
            let Some(oracle) = enumeration_oracle(&h, &g, &a, &b) else { continue };
            let sol = solve_qp(&h, &g, &a, &b, None).unwrap();
            assert!((&sol.x - &oracle).amax() <= 1e-9, "{} vs {}", sol.x, oracle);

            // KKT at 1e-12 scale: stationarity, feasibility, complementarity
            let stat = &h * &sol.x + &g + a.transpose() * &sol.multipliers;
            assert!(stat.amax() <= 1e-10);
            let slack = &a * &sol.x - &b;
            for i in 0..rows {
                assert!(sol.multipliers[i] >= 0.0);
                assert!(slack[i] <= 1e-12 * (1.0 + b[i].abs() + sol.x.amax() * 2.0));
                assert!((sol.multipliers[i] * slack[i]).abs() <= 1e-12 * (1.0 + sol.multipliers[i]));
            }

            // A warm start from the optimal working set reaches the same point.
            let warm = solve_qp(&h, &g, &a, &b, Some(&sol.active)).unwrap();
            assert!((&warm.x - &sol.x).amax() <= 1e-10);
            checked += 1;
        }
    }
}
