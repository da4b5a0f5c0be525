//! Online regional controller: stored feedback law on an ellipsoid hit, full
//! OCP otherwise. Also the closed-loop simulator and the Monte Carlo
//! coverage estimate.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::Window;
use crate::error::{check_dim, Error, Result};
use crate::model::SystemModel;
use crate::ocp::OcpInstance;
use crate::sqp::{NlpSolution, SolveStatus, SolverConfig, SqpSolver};
use crate::store::RegionStore;

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub u: DVector<f64>,
    pub ocp_solved: bool,
    /// Store entry that supplied `u`.
    pub ellipsoid: Option<usize>,
    /// The fallback solution, when the OCP was solved.
    pub solution: Option<NlpSolution>,
}

/// One control decision at `x`. The first store entry containing `x` wins
/// and no solver work is done; otherwise the OCP is solved, warm-started from
/// `warm` if given. A fallback solve that does not converge is an error.
pub fn control_step(
    x: &DVector<f64>,
    store: &RegionStore,
    model: &SystemModel,
    solver: &SqpSolver,
    warm: Option<&DVector<f64>>,
) -> Result<StepOutcome> {
    check_dim("state", model.state_dim(), x.len())?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Contract("state has non-finite entries".into()));
    }
    if let Some(k) = store.lookup(x.as_slice()) {
        return Ok(StepOutcome {
            u: store.entries[k].u_star.clone(),
            ocp_solved: false,
            ellipsoid: Some(k),
            solution: None,
        });
    }
    let inst = OcpInstance::new(model, x.clone())?;
    let sol = solver.solve_ocp(&inst, warm)?;
    if !sol.is_converged() {
        return Err(Error::Solve(sol.status));
    }
    Ok(StepOutcome {
        u: sol.first_input(model.input_dim()),
        ocp_solved: true,
        ellipsoid: None,
        solution: Some(sol),
    })
}

/// A controller instance: the store is shared, the solver workspace and the
/// warm start are owned.
pub struct RegionalController<'a> {
    model: &'a SystemModel,
    store: &'a RegionStore,
    solver: SqpSolver,
    previous: Option<DVector<f64>>,
}

impl<'a> RegionalController<'a> {
    pub fn new(model: &'a SystemModel, store: &'a RegionStore, config: SolverConfig) -> Result<Self> {
        if store.model_hash != model.hash() {
            return Err(Error::ModelHashMismatch {
                stored: store.model_hash.clone(),
                actual: model.hash().to_string(),
            });
        }
        Ok(Self {
            model,
            store,
            solver: SqpSolver::new(config),
            previous: None,
        })
    }

    pub fn solver(&self) -> &SqpSolver {
        &self.solver
    }

    /// Forgets the warm start.
    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn step(&mut self, x: &DVector<f64>) -> Result<StepOutcome> {
        let warm = self.previous.take().map(|u| self.shift(&u));
        let out = control_step(x, self.store, self.model, &self.solver, warm.as_ref());
        if let Ok(StepOutcome { solution: Some(sol), .. }) = &out {
            self.previous = Some(sol.u.clone());
        }
        out
    }

    /// Drops `u(0)` and appends zeros; the solver projects starts onto the
    /// input set, which clips the tail if 0 is not admissible.
    fn shift(&self, u: &DVector<f64>) -> DVector<f64> {
        let m = self.model.input_dim();
        let mut out = DVector::zeros(u.len());
        out.rows_mut(0, u.len() - m).copy_from(&u.rows(m, u.len() - m));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub ocp_solved: bool,
    pub ellipsoid: Option<usize>,
    pub solve_time_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    /// State after the last applied input.
    pub final_state: DVector<f64>,
    /// Set when the run stopped early because a fallback solve failed.
    pub failure: Option<SolveStatus>,
}

impl Trajectory {
    /// Fraction of steps resolved by an ellipsoid.
    pub fn ocp_avoided(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let skipped = self.records.iter().filter(|r| !r.ocp_solved).count();
        skipped as f64 / self.records.len() as f64
    }

    /// Stage cost `x'Qx + u'Ru` summed over the applied steps.
    pub fn stage_cost(&self, model: &SystemModel) -> f64 {
        self.records
            .iter()
            .map(|r| {
                let x = DVector::from_column_slice(&r.x);
                let u = DVector::from_column_slice(&r.u);
                x.dot(&(&model.q * &x)) + u.dot(&(&model.r * &u))
            })
            .sum()
    }

    /// CSV with one row per step plus a final row holding the last state
    /// (empty input columns, `ocp_solved` 0). `ellipsoid_index` is -1 when
    /// the OCP was solved; `header` lines are written first as `# ` comments.
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        let io = |e: std::io::Error| Error::Io {
            path: "<trajectory csv>".into(),
            source: e,
        };
        for line in header {
            writeln!(out, "# {line}").map_err(io)?;
        }
        let n = self.final_state.len();
        let m = self.records.first().map_or(0, |r| r.u.len());
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["step".to_string()];
        head.extend((1..=n).map(|i| format!("x{i}")));
        head.extend((1..=m).map(|i| format!("u{i}")));
        head.extend(["ocp_solved", "ellipsoid_index", "solve_time_us"].map(String::from));
        w.write_record(&head)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string()];
            row.extend(r.x.iter().map(f64::to_string));
            row.extend(r.u.iter().map(f64::to_string));
            row.push(u8::from(r.ocp_solved).to_string());
            row.push(r.ellipsoid.map_or("-1".to_string(), |k| k.to_string()));
            row.push(r.solve_time_us.to_string());
            w.write_record(&row)?;
        }
        let mut row = vec![self.records.len().to_string()];
        row.extend(self.final_state.iter().map(f64::to_string));
        row.extend(std::iter::repeat_n(String::new(), m));
        row.extend(["0", "-1", "0"].map(String::from));
        w.write_record(&row)?;
        w.flush().map_err(io)?;
        Ok(())
    }
}

/// `steps` iterations of control step then plant update. A failed fallback
/// solve ends the run early with `failure` set; other errors propagate.
pub fn run_closed_loop(
    x0: &DVector<f64>,
    steps: usize,
    store: &RegionStore,
    model: &SystemModel,
    config: &SolverConfig,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Contract("closed loop needs at least one step".into()));
    }
    let mut ctrl = RegionalController::new(model, store, config.clone())?;
    let mut x = x0.clone();
    let mut records = Vec::with_capacity(steps);
    let mut failure = None;
    for step in 0..steps {
        let start = Instant::now();
        let out = match ctrl.step(&x) {
            Ok(out) => out,
            Err(Error::Solve(status)) => {
                failure = Some(status);
                break;
            }
            Err(e) => return Err(e),
        };
        let elapsed = start.elapsed();
        let next = model.eval_dynamics(&x, &out.u)?;
        records.push(StepRecord {
            step,
            x: x.as_slice().to_vec(),
            u: out.u.as_slice().to_vec(),
            ocp_solved: out.ocp_solved,
            ellipsoid: out.ellipsoid,
            solve_time_us: micros(elapsed),
        });
        x = next;
    }
    Ok(Trajectory {
        records,
        final_state: x,
        failure,
    })
}

fn micros(d: Duration) -> u64 {
    u64::try_from(d.as_micros()).unwrap_or(u64::MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageEstimate {
    pub fraction: f64,
    /// 95% normal-approximation binomial half-width.
    pub half_width: f64,
    pub feasible: usize,
    pub covered: usize,
    /// Uniform draws needed to collect `feasible` feasible states.
    pub draws: usize,
    pub seed: u64,
}

const COVERAGE_BATCH: usize = 4096;

/// Fraction of the feasible part of `window` that lies in stored ellipsoids.
///
/// Uniform states are drawn from `window` until `n_samples` of them are
/// feasible (rejection sampling on the feasible set). A state inside a
/// stored ellipsoid counts as feasible and covered without a solve; every
/// other state gets a feasibility check. Fails with
/// [`Error::NoFeasibleSamples`] when none of the first `n_samples` draws is
/// feasible.
pub fn coverage_estimate(
    store: &RegionStore,
    model: &SystemModel,
    window: &Window,
    n_samples: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<CoverageEstimate> {
    if n_samples < 1000 {
        return Err(Error::Contract("coverage needs at least 1000 samples".into()));
    }
    check_dim("coverage window", model.state_dim(), window.dim())?;
    if store.model_hash != model.hash() {
        return Err(Error::ModelHashMismatch {
            stored: store.model_hash.clone(),
            actual: model.hash().to_string(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut feasible, mut covered, mut draws) = (0usize, 0usize, 0usize);
    while feasible < n_samples {
        if draws >= n_samples && feasible == 0 {
            return Err(Error::NoFeasibleSamples);
        }
        let batch: Vec<DVector<f64>> = (0..COVERAGE_BATCH)
            .map(|_| uniform_in(window, &mut rng))
            .collect();
        let verdicts: Vec<(bool, bool)> = batch
            .par_iter()
            .map_init(
                || SqpSolver::new(config.clone()),
                |solver, x| classify_state(x, store, model, solver),
            )
            .collect();
        for (is_feasible, is_covered) in verdicts {
            if feasible == n_samples || (draws >= n_samples && feasible == 0) {
                break;
            }
            draws += 1;
            if is_feasible {
                feasible += 1;
                covered += usize::from(is_covered);
            }
        }
    }
    let p = covered as f64 / feasible as f64;
    Ok(CoverageEstimate {
        fraction: p,
        half_width: 1.96 * (p * (1.0 - p) / feasible as f64).sqrt(),
        feasible,
        covered,
        draws,
        seed,
    })
}

/// `(feasible, covered)` for one state.
fn classify_state(x: &DVector<f64>, store: &RegionStore, model: &SystemModel, solver: &SqpSolver) -> (bool, bool) {
    if store.lookup(x.as_slice()).is_some() {
        return (true, true);
    }
    let feasible = OcpInstance::new(model, x.clone()).is_ok_and(|inst| solver.is_feasible(&inst));
    (feasible, false)
}

fn uniform_in(window: &Window, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(
        window.dim(),
        window
            .lower
            .iter()
            .zip(&window.upper)
            .map(|(&l, &u)| if l < u { rng.random_range(l..u) } else { l }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub episodes: usize,
    pub steps: usize,
    pub skipped: usize,
}

impl RestartSummary {
    pub fn ocp_avoided(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.skipped as f64 / self.steps as f64
        }
    }
}

/// Closed-loop episodes of `episode_len` steps, each restarted from a fresh
/// uniformly drawn feasible state in `window`.
pub fn random_restart_run(
    store: &RegionStore,
    model: &SystemModel,
    window: &Window,
    episodes: usize,
    episode_len: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<RestartSummary> {
    check_dim("restart window", model.state_dim(), window.dim())?;
    let probe = SqpSolver::new(config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = RestartSummary {
        episodes: 0,
        steps: 0,
        skipped: 0,
    };
    let mut misses = 0usize;
    while summary.episodes < episodes {
        let x0 = uniform_in(window, &mut rng);
        let (feasible, _) = classify_state(&x0, store, model, &probe);
        if !feasible {
            misses += 1;
            if summary.episodes == 0 && misses >= 1000 {
                return Err(Error::NoFeasibleSamples);
            }
            continue;
        }
        let traj = run_closed_loop(&x0, episode_len, store, model, config)?;
        summary.episodes += 1;
        summary.steps += traj.records.len();
        summary.skipped += traj.records.iter().filter(|r| !r.ocp_solved).count();
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ellipsoid::Ellipsoid;
    use crate::model::builtin_example_model;
    use crate::store::{StoreEntry, StoreTolerances, Verification};
    use std::collections::BTreeMap;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    /// A small ball around (3, 4), where the optimal law is u = -1.
    fn tiny_store(model: &SystemModel) -> RegionStore {
        let entry = StoreEntry {
            ellipsoid: Ellipsoid::ball(v(&[3.0, 4.0]), 0.01).unwrap(),
            u_star: v(&[-1.0]),
            a_tilde: vec![0],
            verification: Verification {
                seed: 1,
                n_samples: 10,
                violations: 0,
            },
        };
        RegionStore::build(model, vec![entry], StoreTolerances::default(), BTreeMap::new()).unwrap()
    }

    #[test]
    fn hit_returns_the_stored_law_without_solving() {
        let model = builtin_example_model();
        let store = tiny_store(&model);
        let solver = SqpSolver::default();
        let out = control_step(&v(&[3.0, 4.0]), &store, &model, &solver, None).unwrap();
        assert_eq!(out.u, v(&[-1.0]));
        assert!(!out.ocp_solved);
        assert_eq!(out.ellipsoid, Some(0));
        assert_eq!(solver.counters.snapshot(), (0, 0));
    }

    #[test]
    fn origin_falls_back_to_the_solver() {
        let model = builtin_example_model();
        let store = tiny_store(&model);
        let solver = SqpSolver::default();
        let out = control_step(&v(&[0.0, 0.0]), &store, &model, &solver, None).unwrap();
        assert!(out.ocp_solved);
        assert_eq!(out.ellipsoid, None);
        assert!(out.u[0].abs() <= 1e-12);
        assert!(solver.counters.snapshot().0 > 0);
    }

    #[test]
    fn infeasible_state_surfaces_the_solver_status() {
        let model = builtin_example_model();
        let store = RegionStore::empty(&model);
        let err = control_step(&v(&[100.0, 100.0]), &store, &model, &SqpSolver::default(), None);
        assert!(matches!(err, Err(Error::Solve(SolveStatus::Infeasible))));
        let nan = control_step(&v(&[f64::NAN, 0.0]), &store, &model, &SqpSolver::default(), None);
        assert!(matches!(nan, Err(Error::Contract(_))));
    }

    #[test]
    fn origin_stays_put() {
        let model = builtin_example_model();
        let store = RegionStore::empty(&model);
        let traj = run_closed_loop(&v(&[0.0, 0.0]), 5, &store, &model, &SolverConfig::default()).unwrap();
        assert_eq!(traj.records.len(), 5);
        assert!(traj.records.iter().all(|r| r.u[0].abs() <= 1e-12 && r.ocp_solved));
        assert!(traj.final_state.amax() <= 1e-12);
        assert_eq!(traj.ocp_avoided(), 0.0);
    }

    #[test]
    fn infeasible_start_aborts_with_partial_trajectory() {
        let model = builtin_example_model();
        let store = RegionStore::empty(&model);
        let traj = run_closed_loop(&v(&[100.0, 100.0]), 5, &store, &model, &SolverConfig::default()).unwrap();
        assert!(traj.records.is_empty());
        assert_eq!(traj.failure, Some(SolveStatus::Infeasible));
    }

    #[test]
    fn shifted_warm_start_drops_the_first_input() {
        let model = builtin_example_model();
        let store = RegionStore::empty(&model);
        let ctrl = RegionalController::new(&model, &store, SolverConfig::default()).unwrap();
        assert_eq!(ctrl.shift(&v(&[0.1, 0.2, 0.3])), v(&[0.2, 0.3, 0.0]));
    }

    #[test]
    fn csv_layout() {
        let model = builtin_example_model();
        let store = tiny_store(&model);
        let traj = run_closed_loop(&v(&[3.0, 4.0]), 2, &store, &model, &SolverConfig::default()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, &["model_hash=abc".to_string()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# model_hash=abc");
        assert_eq!(lines[1], "step,x1,x2,u1,ocp_solved,ellipsoid_index,solve_time_us");
        assert!(lines[2].starts_with("0,3,4,-1,0,0,"));
        assert!(lines[3].starts_with("1,2,"));
        assert!(lines[3].contains(",1,-1,"));
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn empty_store_has_zero_coverage() {
        let model = builtin_example_model();
        let store = RegionStore::empty(&model);
        let window = Window::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let est = coverage_estimate(&store, &model, &window, 1000, 3, &SolverConfig::default()).unwrap();
        assert_eq!(est.fraction, 0.0);
        assert_eq!(est.feasible, 1000);
    }

    #[test]
    fn window_outside_the_feasible_set_is_an_error() {
        let model = builtin_example_model();
        let store = RegionStore::empty(&model);
        let window = Window::new(vec![50.0, 50.0], vec![60.0, 60.0]).unwrap();
        let err = coverage_estimate(&store, &model, &window, 1000, 3, &SolverConfig::default());
        assert!(matches!(err, Err(Error::NoFeasibleSamples)));
        let few = coverage_estimate(&store, &model, &window, 10, 3, &SolverConfig::default());
        assert!(matches!(few, Err(Error::Contract(_))));
    }
}
