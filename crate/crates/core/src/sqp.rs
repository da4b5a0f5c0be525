//! Sequential quadratic programming for the condensed OCP.
//!
//! Each local solve iterates dense QP subproblems with the exact Lagrangian
//! Hessian (negative and tiny eigenvalues clamped), globalized by an l1 merit
//! line search with a second-order correction. Once the working set settles,
//! a Newton polish on the active-set KKT equations removes the slow tail that
//! the clamping can cause. When the linearized subproblem is infeasible, or
//! its multipliers outgrow the penalty, the state and terminal rows close to
//! activity get elastic slacks; a run that stalls with violation left at the
//! largest penalty is declared infeasible.
//!
//! The benchmark dynamics are cubic in the input, so the condensed NLP has
//! several local minima. [`SqpSolver::solve_ocp`] therefore runs the local
//! method from a deterministic set of starts and keeps the cheapest KKT point.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::ocp::{HessianMode, OcpInstance, RowTag};
use crate::qp::solve_qp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    Infeasible,
    MaxIter,
    RegularityFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartStrategy {
    /// Warm start (if any), the zero input sequence, then every combination
    /// of per-step candidates `{0} + {axis extremes of the input set}`.
    #[default]
    MultiStart,
    /// Only the warm start, or the zero input sequence when none is given.
    Single,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kkt_tol: f64,
    pub max_iter: usize,
    pub hessian: HessianMode,
    pub armijo: f64,
    pub backtrack: f64,
    /// Smallest eigenvalue kept in the QP Hessian, relative to its largest.
    pub hessian_floor: f64,
    /// Residual violation above which a stalled run is declared infeasible.
    pub infeasibility_slack: f64,
    /// Initial and largest l1 penalty weight on softened rows.
    pub initial_penalty: f64,
    pub max_penalty: f64,
    pub strategy: StartStrategy,
    pub max_starts: usize,
    /// Grid values per input axis for the feasibility screening rollouts.
    pub screen_levels: usize,
    /// Screening is skipped when the grid would exceed this many points.
    pub max_screen: usize,
    /// Local runs tried when screening finds no feasible input sequence.
    pub infeasible_starts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: 100,
            hessian: HessianMode::Exact,
            armijo: 1e-4,
            backtrack: 0.5,
            hessian_floor: 1e-8,
            infeasibility_slack: 1e-6,
            initial_penalty: 1e2,
            max_penalty: 1e6,
            strategy: StartStrategy::MultiStart,
            max_starts: 243,
            screen_levels: 7,
            max_screen: 4096,
            infeasible_starts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
    pub cost: f64,
    pub status: SolveStatus,
    /// SQP iterations of the run that produced this solution.
    pub iterations: usize,
    /// SQP iterations summed over every start.
    pub total_iterations: usize,
    pub starts: usize,
    pub kkt_residual: f64,
}

impl NlpSolution {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// The optimal feedback law, `u(0)` of the optimal input sequence.
    pub fn first_input(&self, input_dim: usize) -> DVector<f64> {
        self.u.rows(0, input_dim).into_owned()
    }

    fn failed(status: SolveStatus, u: DVector<f64>, rows: usize) -> Self {
        Self {
            u,
            lambda: DVector::zeros(rows),
            cost: f64::INFINITY,
            status,
            iterations: 0,
            total_iterations: 0,
            starts: 1,
            kkt_residual: f64::INFINITY,
        }
    }
}

/// Index sets of an optimal point. Indices are 0-based constraint rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSetInfo {
    pub active: Vec<usize>,
    pub inactive: Vec<usize>,
    pub weakly_active: Vec<usize>,
    pub strongly_active: Vec<usize>,
    pub eps_act: f64,
    pub eps_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RunStatus {
    Converged,
    MaxIter,
    Infeasible,
    Regularity,
}

struct SqpRun {
    u: DVector<f64>,
    lambda: DVector<f64>,
    status: RunStatus,
    iterations: usize,
    kkt: f64,
}

fn residual_from_parts(
    grad: &DVector<f64>,
    c: &DVector<f64>,
    jac: &DMatrix<f64>,
    lambda: &DVector<f64>,
) -> f64 {
    let stationarity = (grad + jac.transpose() * lambda).amax();
    let mut worst = stationarity;
    for (ci, li) in c.iter().zip(lambda.iter()) {
        worst = worst.max((ci * li).abs()).max(ci.max(0.0)).max((-li).max(0.0));
    }
    worst
}

/// Makes `h` positive definite by replacing each eigenvalue `e` with
/// `max(|e|, delta)`, `delta = rel * max(1, max |e|)`. Unlike adding a
/// multiple of the identity, curvature along well-conditioned directions is
/// left alone.
fn regularize(h: DMatrix<f64>, rel: f64) -> Option<DMatrix<f64>> {
    if !h.iter().all(|v| v.is_finite()) {
        return None;
    }
    if h.clone().cholesky().is_some() {
        return Some(h);
    }
    let eig = h.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let delta = rel * scale;
    let clamped = eig.eigenvalues.map(|e| e.abs().max(delta));
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    out = (&out + out.transpose()) * 0.5;
    out.clone().cholesky().map(|_| out)
}

/// Newton iteration on `grad L = 0, G_A = 0` for a fixed active set.
fn polish(
    inst: &OcpInstance<'_>,
    u0: &DVector<f64>,
    lambda0: &DVector<f64>,
    active: &[usize],
    tol: f64,
) -> Option<(DVector<f64>, DVector<f64>, f64)> {
    let n = u0.len();
    let k = active.len();
    if k > n {
        return None;
    }
    let mut u = u0.clone();
    let mut lambda = DVector::zeros(lambda0.len());
    for &i in active {
        lambda[i] = lambda0[i];
    }
    for _ in 0..12 {
        let e = inst.evaluate(&u);
        let residual = residual_from_parts(&e.cost_grad, &e.g, &e.g_jac, &lambda);
        if residual <= tol {
            return Some((u, lambda, residual));
        }
        let h = inst.lagrangian_hessian(&u, &e, &lambda, HessianMode::Exact);
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n)
            .copy_from(&-(&e.cost_grad + e.g_jac.transpose() * &lambda));
        for (j, &i) in active.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = e.g_jac[(i, c)];
                kkt[(c, n + j)] = e.g_jac[(i, c)];
            }
            rhs[n + j] = -e.g[i];
        }
        let step = kkt.lu().solve(&rhs)?;
        if !step.iter().all(|v| v.is_finite()) {
            return None;
        }
        u += step.rows(0, n);
        for (j, &i) in active.iter().enumerate() {
            lambda[i] += step[n + j];
        }
    }
    let e = inst.evaluate(&u);
    let residual = residual_from_parts(&e.cost_grad, &e.g, &e.g_jac, &lambda);
    (residual <= tol).then_some((u, lambda, residual))
}

/// Elastic (l1-penalty) SQP.
///
/// Input rows are linear and kept hard; every other row `i` gets a slack
/// `s_i >= 0` in the QP subproblem, penalized by `rho s_i + eps/2 s_i^2`, so
/// the subproblem is always feasible. The merit function is the matching
/// penalty `V + sum(rho v_i + eps/2 v_i^2)`, `v_i = max(G_i, 0)`. When the
/// iteration stalls with violation left, `rho` grows tenfold; stalling at
/// the largest `rho` certifies (local) infeasibility.
fn run_sqp(inst: &OcpInstance<'_>, u0: DVector<f64>, config: &SolverConfig) -> SqpRun {
    let nu = inst.decision_dim();
    let rows = inst.constraint_count();
    let (soft, hard): (Vec<usize>, Vec<usize>) =
        (0..rows).partition(|&i| !matches!(inst.row_tags()[i], RowTag::Input { .. }));
    let (nh, ns) = (hard.len(), soft.len());

    let mut rho = config.initial_penalty;
    let merit = |rho: f64, cost: f64, g: &DVector<f64>| {
        cost + soft
            .iter()
            .map(|&i| {
                let v = g[i].max(0.0);
                rho * v + 0.5 * SLACK_CURVATURE * v * v
            })
            .sum::<f64>()
    };
    let violation = |g: &DVector<f64>| soft.iter().map(|&i| g[i].max(0.0)).sum::<f64>();

    let mut u = u0;
    let mut e = inst.evaluate(&u);
    let mut lambda = DVector::zeros(rows);
    let mut working: Option<Vec<usize>> = None;
    let mut kkt = f64::INFINITY;
    let mut polish_failed: Option<Vec<usize>> = None;

    // Linearized rows, hard ones first.
    let mut a = DMatrix::zeros(rows, nu);
    let mut b = DVector::zeros(rows);

    for iter in 0..config.max_iter {
        kkt = residual_from_parts(&e.cost_grad, &e.g, &e.g_jac, &lambda);
        if kkt <= config.kkt_tol {
            return SqpRun {
                u,
                lambda,
                status: RunStatus::Converged,
                iterations: iter,
                kkt,
            };
        }

        let Some(h) = regularize(
            inst.lagrangian_hessian(&u, &e, &lambda, config.hessian),
            config.hessian_floor,
        ) else {
            return SqpRun {
                u,
                lambda,
                status: RunStatus::Regularity,
                iterations: iter,
                kkt,
            };
        };

        for (k, &i) in hard.iter().chain(&soft).enumerate() {
            a.view_mut((k, 0), (1, nu)).copy_from(&e.g_jac.row(i));
            b[k] = -e.g[i];
        }

        // The plain subproblem already solves the elastic one (with zero
        // slack) when it is feasible and rho exceeds every soft multiplier.
        let mut elastic = true;
        let mut plain = None;
        if let Ok(qp) = solve_subproblem(&h, &e.cost_grad, &a, &b, &[], rho, working.as_deref()) {
            let top = qp.multipliers.rows(nh, ns).max();
            if top < config.max_penalty {
                while rho <= top {
                    rho = (rho * 10.0).min(config.max_penalty);
                }
                elastic = false;
                plain = Some(qp);
            }
        }
        let qp = match plain {
            Some(qp) => qp,
            None => {
                rho = rho.max(config.initial_penalty);
                // Steering: raise the penalty while the subproblem keeps
                // slack, so the step reduces linearized violation as far as
                // it can.
                loop {
                    let near: Vec<usize> = (nh..nh + ns).filter(|&k| b[k] < 1e-1).collect();
                    let qp = solve_subproblem(&h, &e.cost_grad, &a, &b, &near, rho, working.as_deref())
                        .or_else(|_| {
                            let all: Vec<usize> = (nh..nh + ns).collect();
                            solve_subproblem(&h, &e.cost_grad, &a, &b, &all, rho, None)
                        });
                    let Ok(qp) = qp else {
                        return SqpRun {
                            u,
                            lambda,
                            status: RunStatus::Regularity,
                            iterations: iter,
                            kkt,
                        };
                    };
                    if qp.x.rows_range(nu..).sum() <= 1e-9 || rho >= config.max_penalty {
                        break qp;
                    }
                    rho *= 10.0;
                }
            }
        };
        let slack = if elastic { qp.x.rows_range(nu..).sum() } else { 0.0 };
        let d = qp.x.rows(0, nu).into_owned();
        let mut lambda_next = DVector::zeros(rows);
        for (k, &i) in hard.iter().chain(&soft).enumerate() {
            lambda_next[i] = qp.multipliers[k];
        }

        // Predicted reduction of the penalty merit by the QP model.
        let merit0 = merit(rho, e.cost, &e.g);
        let linearized = &e.g + &e.g_jac * &d;
        let model = e.cost + e.cost_grad.dot(&d) + 0.5 * d.dot(&(&h * &d))
            + soft
                .iter()
                .map(|&i| {
                    let v = linearized[i].max(0.0);
                    rho * v + 0.5 * SLACK_CURVATURE * v * v
                })
                .sum::<f64>();
        let predicted = merit0 - model;
        let viol = violation(&e.g);

        if predicted <= 1e-14 * (1.0 + merit0.abs()) || d.amax() <= 1e-14 {
            if viol > config.infeasibility_slack {
                if rho < config.max_penalty {
                    rho *= 10.0;
                    continue;
                }
                return SqpRun {
                    u,
                    lambda: lambda_next,
                    status: RunStatus::Infeasible,
                    iterations: iter + 1,
                    kkt,
                };
            }
            if let Some((up, lp, res)) = polish(inst, &u, &lambda_next, &qp_rows(&qp.active, &hard, &soft), config.kkt_tol) {
                return SqpRun {
                    u: up,
                    lambda: lp,
                    status: RunStatus::Converged,
                    iterations: iter + 1,
                    kkt: res,
                };
            }
        }

        let active_rows = qp_rows(&qp.active, &hard, &soft);
        if d.amax() < 1e-4
            && slack <= 1e-9
            && viol <= config.infeasibility_slack
            && working.as_deref() == Some(&qp.active[..])
            && polish_failed.as_deref() != Some(&active_rows[..])
        {
            match polish(inst, &u, &lambda_next, &active_rows, config.kkt_tol) {
                Some((up, lp, res)) => {
                    return SqpRun {
                        u: up,
                        lambda: lp,
                        status: RunStatus::Converged,
                        iterations: iter + 1,
                        kkt: res,
                    }
                }
                None => polish_failed = Some(active_rows.clone()),
            }
        }

        let merit_at = |w: &DVector<f64>| merit(rho, inst.cost_only(w), &inst.constraints_only(w));
        let sufficient = |value: f64, alpha: f64| value <= merit0 - config.armijo * alpha * predicted;

        let full = &u + &d;
        let mut alpha = 1.0;
        let mut accepted = sufficient(merit_at(&full), 1.0).then(|| full.clone());
        if accepted.is_none() {
            // Second-order correction against the Maratos effect.
            let g_full = inst.constraints_only(&full);
            let mut b_soc = b.clone();
            for (k, &i) in hard.iter().chain(&soft).enumerate() {
                b_soc[k] = -(g_full[i] - e.g_jac.row(i).dot(&d.transpose()));
            }
            let softened: Vec<usize> = if elastic { (nh..nh + ns).collect() } else { Vec::new() };
            if let Ok(soc) = solve_subproblem(&h, &e.cost_grad, &a, &b_soc, &softened, rho, None) {
                let corrected = &u + soc.x.rows(0, nu);
                if sufficient(merit_at(&corrected), 1.0) {
                    accepted = Some(corrected);
                }
            }
        }
        while accepted.is_none() && alpha > 1e-10 {
            alpha *= config.backtrack;
            let trial = &u + alpha * &d;
            if sufficient(merit_at(&trial), alpha) {
                accepted = Some(trial);
            }
        }
        log::trace!(
            "sqp iter {iter}: kkt {kkt:.3e} V {:.6} viol {viol:.3e} |d| {:.3e} alpha {alpha} rho {rho:.1e} active {:?}",
            e.cost,
            d.amax(),
            active_rows
        );
        u = accepted.unwrap_or_else(|| &u + alpha * &d);
        e = inst.evaluate(&u);
        lambda = lambda_next;
        working = Some(qp.active);
    }

    if violation(&e.g) > config.infeasibility_slack {
        return SqpRun {
            u,
            lambda,
            status: RunStatus::Infeasible,
            iterations: config.max_iter,
            kkt,
        };
    }
    if let Some(active) = &working {
        let active_rows = qp_rows(active, &hard, &soft);
        if let Some((up, lp, res)) = polish(inst, &u, &lambda, &active_rows, config.kkt_tol) {
            return SqpRun {
                u: up,
                lambda: lp,
                status: RunStatus::Converged,
                iterations: config.max_iter,
                kkt: res,
            };
        }
    }
    SqpRun {
        u,
        lambda,
        status: RunStatus::MaxIter,
        iterations: config.max_iter,
        kkt,
    }
}

/// Weight of the quadratic slack penalty; keeps the elastic QP strictly convex.
const SLACK_CURVATURE: f64 = 1.0;

/// Solves the SQP subproblem over `(d, s)`: rows `a_i d <= b_i`, except the
/// rows listed in `softened`, which become `a_i d - s_k <= b_i`, `s_k >= 0`
/// with `rho s_k + SLACK_CURVATURE s_k^2 / 2` added to the objective. An
/// empty list gives the plain QP. Working-set indices refer to the rows of
/// `a`, with slack bounds numbered after them.
fn solve_subproblem(
    h: &DMatrix<f64>,
    grad: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    softened: &[usize],
    rho: f64,
    warm: Option<&[usize]>,
) -> Result<crate::qp::QpSolution, crate::qp::QpError> {
    let (m, nu) = a.shape();
    let warm: Option<Vec<usize>> = warm.map(|w| w.iter().copied().filter(|&r| r < m).collect());
    if softened.is_empty() {
        return solve_qp(h, grad, a, b, warm.as_deref());
    }
    let ne = softened.len();
    let n = nu + ne;
    let mut hq = DMatrix::zeros(n, n);
    hq.view_mut((0, 0), (nu, nu)).copy_from(h);
    let mut gq = DVector::zeros(n);
    gq.rows_mut(0, nu).copy_from(grad);
    let mut aq = DMatrix::zeros(m + ne, n);
    aq.view_mut((0, 0), (m, nu)).copy_from(a);
    let mut bq = DVector::zeros(m + ne);
    bq.rows_mut(0, m).copy_from(b);
    for (k, &row) in softened.iter().enumerate() {
        hq[(nu + k, nu + k)] = SLACK_CURVATURE;
        gq[nu + k] = rho;
        aq[(row, nu + k)] = -1.0;
        aq[(m + k, nu + k)] = -1.0;
    }
    let mut sol = solve_qp(&hq, &gq, &aq, &bq, warm.as_deref())?;
    // Slack-bound rows vary with `softened`; keep only constraint rows in the
    // reported working set so it stays meaningful across iterations.
    sol.active.retain(|&r| r < m);
    Ok(sol)
}

/// Maps elastic-QP working-set rows back to OCP constraint rows, dropping
/// slack bounds.
fn qp_rows(active: &[usize], hard: &[usize], soft: &[usize]) -> Vec<usize> {
    let nh = hard.len();
    let mut rows: Vec<usize> = active
        .iter()
        .filter_map(|&r| {
            if r < nh {
                Some(hard[r])
            } else if r < nh + soft.len() {
                Some(soft[r - nh])
            } else {
                None
            }
        })
        .collect();
    rows.sort_unstable();
    rows
}

/// Euclidean projection of each `u(k)` onto the input polytope.
fn project_inputs(inst: &OcpInstance<'_>, start: &DVector<f64>) -> DVector<f64> {
    let model = inst.model();
    let m = model.input_dim();
    let eye = DMatrix::identity(m, m);
    let mut u = start.clone();
    for k in 0..model.horizon {
        let uk = inst.input_at(start, k);
        if model.input_set.contains(&uk, 0.0) {
            continue;
        }
        if let Ok(sol) = solve_qp(&eye, &-uk, &model.input_set.a, &model.input_set.b, None) {
            u.rows_mut(k * m, m).copy_from(&sol.x);
        }
    }
    u
}

/// Per-step start candidates: the origin and, for each input axis, the
/// farthest point of the input set along `+e_j` and `-e_j`.
fn start_candidates(inst: &OcpInstance<'_>) -> Vec<DVector<f64>> {
    let model = inst.model();
    let m = model.input_dim();
    let mut out = vec![DVector::zeros(m)];
    for j in 0..m {
        for sign in [-1.0, 1.0] {
            let mut reach = f64::INFINITY;
            for r in 0..model.input_rows() {
                let slope = sign * model.input_set.a[(r, j)];
                if slope > 0.0 {
                    reach = reach.min(model.input_set.b[r] / slope);
                }
            }
            if reach.is_finite() {
                let mut e = DVector::zeros(m);
                e[j] = sign * reach;
                out.push(e);
            }
        }
    }
    out
}

/// Every combination of per-step [`start_candidates`], at most `limit`.
fn grid_starts(inst: &OcpInstance<'_>, limit: usize) -> Vec<DVector<f64>> {
    let cands = start_candidates(inst);
    let horizon = inst.model().horizon;
    let m = inst.model().input_dim();
    let total = cands.len().saturating_pow(horizon as u32);
    (0..total.min(limit))
        .map(|idx| {
            let mut u = DVector::zeros(horizon * m);
            let mut rest = idx;
            for k in 0..horizon {
                u.rows_mut(k * m, m).copy_from(&cands[rest % cands.len()]);
                rest /= cands.len();
            }
            u
        })
        .collect()
}

struct Screening {
    /// Lowest-cost grid point satisfying every constraint.
    best_feasible: Option<DVector<f64>>,
    /// Grid points by increasing total violation.
    least_violating: Vec<DVector<f64>>,
}

/// Rolls out every input sequence on a grid with `levels` values per input
/// axis (spanning the input set's axis extent) and `levels^(m N)` points in
/// total. Returns `None` when that exceeds `max_points`.
fn screen_inputs(inst: &OcpInstance<'_>, levels: usize, max_points: usize) -> Option<Screening> {
    let model = inst.model();
    let (m, horizon) = (model.input_dim(), model.horizon);
    let nu = m * horizon;
    if levels < 2 {
        return None;
    }
    let total = levels.checked_pow(nu as u32).filter(|&t| t <= max_points)?;
    let cands = start_candidates(inst);
    let mut lo = DVector::zeros(m);
    let mut hi = DVector::zeros(m);
    for c in &cands {
        for j in 0..m {
            lo[j] = f64::min(lo[j], c[j]);
            hi[j] = f64::max(hi[j], c[j]);
        }
    }
    let soft: Vec<usize> = (0..inst.constraint_count())
        .filter(|&i| !matches!(inst.row_tags()[i], RowTag::Input { .. }))
        .collect();

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut scored: Vec<(f64, DVector<f64>)> = Vec::new();
    let mut u = DVector::zeros(nu);
    for idx in 0..total {
        let mut rest = idx;
        for i in 0..nu {
            let j = i % m;
            let t = (rest % levels) as f64 / (levels - 1) as f64;
            u[i] = lo[j] + t * (hi[j] - lo[j]);
            rest /= levels;
        }
        let inside = (0..horizon).all(|k| model.input_set.contains(&u.rows(k * m, m).into_owned(), 1e-12));
        if !inside {
            continue;
        }
        let g = inst.constraints_only(&u);
        let violation: f64 = soft.iter().map(|&i| g[i].max(0.0)).sum();
        if violation == 0.0 {
            let cost = inst.cost_only(&u);
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, u.clone()));
            }
        } else if best.is_none() {
            scored.push((violation, u.clone()));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Some(Screening {
        best_feasible: best.map(|(_, u)| u),
        least_violating: scored.into_iter().map(|(_, u)| u).collect(),
    })
}

/// Global counters for instrumentation: local SQP runs and iterations.
#[derive(Debug, Default)]
pub struct SolverCounters {
    pub local_runs: AtomicU64,
    pub iterations: AtomicU64,
}

impl SolverCounters {
    pub fn snapshot(&self) -> (u64, u64) {
        (
            self.local_runs.load(Ordering::Relaxed),
            self.iterations.load(Ordering::Relaxed),
        )
    }
}

#[derive(Debug, Default)]
pub struct SqpSolver {
    pub config: SolverConfig,
    pub counters: SolverCounters,
}

impl SqpSolver {
    pub fn new(config: SolverConfig) -> Self {
        Self {
            config,
            counters: SolverCounters::default(),
        }
    }

    /// Solves the OCP at `inst.x0()` according to the configured start strategy.
    pub fn solve_ocp(
        &self,
        inst: &OcpInstance<'_>,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<NlpSolution> {
        let nu = inst.decision_dim();
        if let Some(w) = warm_start {
            check_dim("warm start", nu, w.len())?;
        }
        let rows = inst.constraint_count();
        if !inst.x0_admissible() {
            return Ok(NlpSolution::failed(SolveStatus::Infeasible, DVector::zeros(nu), rows));
        }

        let mut starts: Vec<DVector<f64>> = Vec::new();
        if let Some(w) = warm_start {
            starts.push(w.clone());
        }
        if self.config.strategy == StartStrategy::Single {
            if starts.is_empty() {
                starts.push(DVector::zeros(nu));
            }
            let sol = self.solve_local(inst, &starts[0]);
            return Ok(self.finish(inst, vec![sol]));
        }

        // Screening: cheap rollouts on a coarse input grid. A feasible grid
        // point proves feasibility and seeds the full multistart; otherwise
        // only the least violating grid points are tried before giving up.
        let screened = screen_inputs(inst, self.config.screen_levels, self.config.max_screen);
        let mut runs = Vec::new();
        match &screened {
            Some(screen) if screen.best_feasible.is_none() => {
                starts.extend(screen.least_violating.iter().take(self.config.infeasible_starts).cloned());
                for start in &starts {
                    runs.push(self.solve_local(inst, start));
                }
                if !runs.iter().any(NlpSolution::is_converged) {
                    return Ok(self.finish(inst, runs));
                }
                starts.clear();
            }
            Some(screen) => starts.extend(screen.best_feasible.clone()),
            None => {}
        }
        starts.extend(grid_starts(inst, self.config.max_starts));
        for start in &starts {
            runs.push(self.solve_local(inst, start));
        }
        Ok(self.finish(inst, runs))
    }

    /// Whether [`solve_ocp`](Self::solve_ocp) from a cold start would find a
    /// feasible optimum, without running the full multistart. A feasible
    /// screening point is taken as proof.
    pub fn is_feasible(&self, inst: &OcpInstance<'_>) -> bool {
        if !inst.x0_admissible() {
            return false;
        }
        if self.config.strategy == StartStrategy::Single {
            return self.solve_local(inst, &DVector::zeros(inst.decision_dim())).is_converged();
        }
        match screen_inputs(inst, self.config.screen_levels, self.config.max_screen) {
            Some(screen) if screen.best_feasible.is_some() => true,
            Some(screen) => screen
                .least_violating
                .iter()
                .take(self.config.infeasible_starts)
                .any(|start| self.solve_local(inst, start).is_converged()),
            None => self.solve_ocp(inst, None).is_ok_and(|s| s.is_converged()),
        }
    }

    /// Cheapest converged run (earliest on ties within 1e-10), else the
    /// non-converged run with the smallest KKT residual, else infeasible.
    fn finish(&self, inst: &OcpInstance<'_>, runs: Vec<NlpSolution>) -> NlpSolution {
        let total_iterations = runs.iter().map(|r| r.iterations).sum();
        let n_starts = runs.len();
        let mut best: Option<NlpSolution> = None;
        let mut fallback: Option<NlpSolution> = None;
        for sol in runs {
            if sol.is_converged() {
                if best.as_ref().is_none_or(|b| sol.cost < b.cost - 1e-10) {
                    best = Some(sol);
                }
            } else if sol.status != SolveStatus::Infeasible
                && fallback.as_ref().is_none_or(|f| sol.kkt_residual < f.kkt_residual)
            {
                fallback = Some(sol);
            }
        }
        let mut sol = best.or(fallback).unwrap_or_else(|| {
            NlpSolution::failed(
                SolveStatus::Infeasible,
                DVector::zeros(inst.decision_dim()),
                inst.constraint_count(),
            )
        });
        sol.total_iterations = total_iterations;
        sol.starts = n_starts;
        sol
    }

    /// One SQP run from `start` (projected onto the input set first).
    pub fn solve_local(&self, inst: &OcpInstance<'_>, start: &DVector<f64>) -> NlpSolution {
        let rows = inst.constraint_count();
        self.counters.local_runs.fetch_add(1, Ordering::Relaxed);
        let run = run_sqp(inst, project_inputs(inst, start), &self.config);
        self.counters
            .iterations
            .fetch_add(run.iterations as u64, Ordering::Relaxed);
        let status = match run.status {
            RunStatus::Converged => SolveStatus::Converged,
            RunStatus::MaxIter => SolveStatus::MaxIter,
            RunStatus::Infeasible => SolveStatus::Infeasible,
            RunStatus::Regularity => SolveStatus::RegularityFailure,
        };
        if status == SolveStatus::Converged {
            NlpSolution {
                cost: inst.cost_only(&run.u),
                u: run.u,
                lambda: run.lambda,
                status,
                iterations: run.iterations,
                total_iterations: run.iterations,
                starts: 1,
                kkt_residual: run.kkt,
            }
        } else {
            let mut sol = NlpSolution::failed(status, run.u, rows);
            sol.iterations = run.iterations;
            sol.total_iterations = run.iterations;
            sol.kkt_residual = run.kkt;
            sol
        }
    }
}

/// Max of stationarity, complementarity, primal and dual violation.
pub fn kkt_residual(inst: &OcpInstance<'_>, u: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
    check_dim("decision vector", inst.decision_dim(), u.len())?;
    check_dim("multipliers", inst.constraint_count(), lambda.len())?;
    let e = inst.evaluate(u);
    Ok(residual_from_parts(&e.cost_grad, &e.g, &e.g_jac, lambda))
}

/// Splits constraint rows into active/inactive and weakly/strongly active.
///
/// Row `i` is active when `G_i >= -eps_act * max(1, |grad G_i|)`, weakly
/// active when additionally `lambda_i <= eps_lambda`.
pub fn classify_active_sets(
    inst: &OcpInstance<'_>,
    solution: &NlpSolution,
    eps_act: f64,
    eps_lambda: f64,
) -> Result<ActiveSetInfo> {
    if !solution.is_converged() {
        return Err(Error::Contract(format!(
            "active sets need a converged solution, got {:?}",
            solution.status
        )));
    }
    let e = inst.evaluate(&solution.u);
    Ok(classify_rows(&e.g, &e.g_jac, &solution.lambda, eps_act, eps_lambda))
}

pub(crate) fn classify_rows(
    g: &DVector<f64>,
    jac: &DMatrix<f64>,
    lambda: &DVector<f64>,
    eps_act: f64,
    eps_lambda: f64,
) -> ActiveSetInfo {
    let mut info = ActiveSetInfo {
        active: Vec::new(),
        inactive: Vec::new(),
        weakly_active: Vec::new(),
        strongly_active: Vec::new(),
        eps_act,
        eps_lambda,
    };
    for i in 0..g.len() {
        let scale = jac.row(i).norm().max(1.0);
        if g[i] >= -eps_act * scale {
            info.active.push(i);
            if lambda[i] <= eps_lambda {
                info.weakly_active.push(i);
            } else {
                info.strongly_active.push(i);
            }
        } else {
            info.inactive.push(i);
        }
    }
    info
}

/// Whether the Jacobian of the active-set KKT equations with respect to
/// `(U, lambda_A)` has full rank at the solution (`sigma_min > 1e-8 sigma_max`).
pub fn check_region_regularity(
    inst: &OcpInstance<'_>,
    solution: &NlpSolution,
    info: &ActiveSetInfo,
) -> Result<bool> {
    if !solution.is_converged() {
        return Err(Error::Contract("regularity check needs a converged solution".into()));
    }
    let e = inst.evaluate(&solution.u);
    let h = inst.lagrangian_hessian(&solution.u, &e, &solution.lambda, HessianMode::Exact);
    let n = inst.decision_dim();
    let k = info.active.len();
    let mut jac = DMatrix::zeros(n + k, n + k);
    jac.view_mut((0, 0), (n, n)).copy_from(&h);
    for (j, &i) in info.active.iter().enumerate() {
        for c in 0..n {
            jac[(n + j, c)] = e.g_jac[(i, c)];
            jac[(c, n + j)] = e.g_jac[(i, c)];
        }
    }
    let sv = jac.singular_values();
    let max = sv.max();
    let min = sv.min();
    Ok(max > 0.0 && min > 1e-8 * max)
}
