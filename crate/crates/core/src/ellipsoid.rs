//! Inner ellipsoidal approximations of feedback classes.
//!
//! An ellipsoid `{x : (x - x_c)' E (x - x_c) <= 1}` is only kept after
//! sampling verification: full OCP solves at uniformly drawn interior states
//! must all return the class law as first input.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{FeedbackClass, SampleAtlas};
use crate::error::{check_dim, Error, Result};
use crate::model::SystemModel;
use crate::ocp::OcpInstance;
use crate::sqp::{SolverConfig, SqpSolver};

/// Largest first-input deviation still counted as the same law.
pub const LAW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub e: DMatrix<f64>,
    pub center: DVector<f64>,
}

impl Ellipsoid {
    pub fn new(e: DMatrix<f64>, center: DVector<f64>) -> Result<Self> {
        check_dim("ellipsoid matrix rows", center.len(), e.nrows())?;
        check_dim("ellipsoid matrix columns", center.len(), e.ncols())?;
        if !e.iter().all(|v| v.is_finite()) || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("ellipsoid has non-finite entries".into()));
        }
        let scale = e.amax().max(1.0);
        if (&e - e.transpose()).amax() > 1e-12 * scale {
            return Err(Error::Contract("ellipsoid matrix is not symmetric".into()));
        }
        if e.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("E"));
        }
        Ok(Self { e, center })
    }

    /// Ball of radius `r` around `center`.
    pub fn ball(center: DVector<f64>, r: f64) -> Result<Self> {
        let n = center.len();
        Self::new(DMatrix::identity(n, n) / (r * r), center)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(x - x_c)' E (x - x_c)`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.dim();
        let mut total = 0.0;
        for i in 0..n {
            let di = x[i] - self.center[i];
            for j in 0..n {
                total += di * self.e[(i, j)] * (x[j] - self.center[j]);
            }
        }
        total
    }

    /// Closed membership: the boundary counts as inside.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.value(x) <= 1.0
    }

    /// Same center, every semi-axis multiplied by `gamma`.
    pub fn scaled(&self, gamma: f64) -> Self {
        Self {
            e: &self.e / (gamma * gamma),
            center: self.center.clone(),
        }
    }

    /// Axis-aligned bounding box `(lower, upper)`.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let inv = self
            .e
            .clone()
            .cholesky()
            .expect("validated at construction")
            .inverse();
        (0..self.dim())
            .map(|d| {
                let half = inv[(d, d)].sqrt();
                (self.center[d] - half, self.center[d] + half)
            })
            .unzip()
    }

    /// `n` states uniform in the ellipsoid: uniform points of the unit ball
    /// mapped through `L` with `L L' = E^-1`. Deterministic given `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let l = self
            .e
            .clone()
            .cholesky()
            .expect("validated at construction")
            .inverse()
            .cholesky()
            .expect("inverse of an SPD matrix is SPD")
            .l();
        unit_ball_points(self.dim(), n, seed)
            .into_iter()
            .map(|z| &self.center + &l * z)
            .collect()
    }

    /// Smallest semi-axis length.
    pub fn min_semi_axis(&self) -> f64 {
        let largest = self.e.symmetric_eigenvalues().max();
        1.0 / largest.sqrt()
    }
}

fn unit_ball_points(dim: usize, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let g = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let radius = rng.random::<f64>().powf(1.0 / dim as f64);
            g.normalize() * radius
        })
        .collect()
}

impl Serialize for Ellipsoid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let rows: Vec<Vec<f64>> = self.e.row_iter().map(|r| r.iter().copied().collect()).collect();
        let mut st = s.serialize_struct("Ellipsoid", 2)?;
        st.serialize_field("E", &rows)?;
        st.serialize_field("x_c", self.center.as_slice())?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Ellipsoid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(rename = "E")]
            e: Vec<Vec<f64>>,
            x_c: Vec<f64>,
        }
        let raw = Raw::deserialize(d)?;
        let n = raw.x_c.len();
        if raw.e.len() != n || raw.e.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("E must be square and match x_c"));
        }
        let e = DMatrix::from_fn(n, n, |i, j| raw.e[i][j]);
        Ellipsoid::new(e, DVector::from_vec(raw.x_c)).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub samples_tested: usize,
    pub violations: usize,
    /// Solves that did not converge; each also counts as a violation.
    pub solver_failures: usize,
    /// Largest `|u* - u_expected|` (infinity norm) over converged samples.
    pub worst_margin: f64,
    pub verified: bool,
}

/// Solves the OCP at `n_samples` uniform states inside `e` and checks that
/// each first input equals `u_expected` within [`LAW_TOLERANCE`].
pub fn verify_ellipsoid(
    e: &Ellipsoid,
    u_expected: &DVector<f64>,
    model: &SystemModel,
    n_samples: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<VerificationReport> {
    Ok(verify_detailed(e, u_expected, model, n_samples, seed, solver)?.0)
}

/// Verification plus the violating sample states.
fn verify_detailed(
    e: &Ellipsoid,
    u_expected: &DVector<f64>,
    model: &SystemModel,
    n_samples: usize,
    seed: u64,
    solver: &SolverConfig,
) -> Result<(VerificationReport, Vec<DVector<f64>>)> {
    if n_samples == 0 {
        return Err(Error::Contract("verification needs at least one sample".into()));
    }
    check_dim("ellipsoid", model.state_dim(), e.dim())?;
    check_dim("expected input", model.input_dim(), u_expected.len())?;
    let m = model.input_dim();
    let outcomes: Vec<(DVector<f64>, Option<f64>)> = e
        .sample(n_samples, seed)
        .into_par_iter()
        .map_init(
            || SqpSolver::new(solver.clone()),
            |sqp, x| {
                let margin = OcpInstance::new(model, x.clone())
                    .and_then(|inst| sqp.solve_ocp(&inst, None))
                    .ok()
                    .filter(|sol| sol.is_converged())
                    .map(|sol| (sol.first_input(m) - u_expected).amax());
                (x, margin)
            },
        )
        .collect();

    let mut report = VerificationReport {
        seed,
        samples_tested: n_samples,
        violations: 0,
        solver_failures: 0,
        worst_margin: 0.0,
        verified: false,
    };
    let mut bad = Vec::new();
    for (x, margin) in outcomes {
        match margin {
            Some(g) => {
                report.worst_margin = report.worst_margin.max(g);
                if g > LAW_TOLERANCE {
                    report.violations += 1;
                    bad.push(x);
                }
            }
            None => {
                report.solver_failures += 1;
                report.violations += 1;
                bad.push(x);
            }
        }
    }
    report.verified = report.violations == 0;
    if report.solver_failures > 0 {
        log::warn!("verification: {} samples without a converged solve", report.solver_failures);
    }
    Ok((report, bad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub max_ellipsoids: usize,
    pub verify_samples: usize,
    pub seed: u64,
    /// A new ellipsoid must newly cover this fraction of the class samples.
    pub min_gain: f64,
    /// Smallest admissible semi-axis, in state units.
    pub r_min: f64,
    /// Final safety shrink of every semi-axis.
    pub gamma: f64,
    /// Verification rounds per ellipsoid before giving up.
    pub max_shrinks: usize,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            max_ellipsoids: 2,
            verify_samples: 2000,
            seed: 2011,
            min_gain: 0.02,
            r_min: 1e-3,
            gamma: 0.98,
            max_shrinks: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedEllipsoid {
    pub ellipsoid: Ellipsoid,
    /// Report of the stored (shrunk) ellipsoid.
    pub report: VerificationReport,
    /// Class samples inside the stored ellipsoid.
    pub covered: usize,
}

/// Greedy inner approximation of one class by verified ellipsoids.
///
/// Each round seeds the center at the uncovered class sample farthest from
/// every non-class sample and from the window edge, takes the shape from the
/// second moments of the seed's grid-connected uncovered piece, and scales
/// it up to the nearest non-class sample less half a grid cell. Verification
/// failures shrink the ellipsoid just inside the closest violating state.
/// After the final `gamma` shrink the stored ellipsoid is verified again with
/// its own seed.
pub fn fit_inner_ellipsoids(
    class: &FeedbackClass,
    atlas: &SampleAtlas,
    model: &SystemModel,
    params: &FitParams,
    solver: &SolverConfig,
) -> Result<Vec<FittedEllipsoid>> {
    if class.samples.is_empty() {
        return Err(Error::Contract("feedback class has no samples".into()));
    }
    if params.verify_samples == 0 || !(0.0 < params.gamma && params.gamma <= 1.0) {
        return Err(Error::Contract("invalid fit parameters".into()));
    }
    let n = atlas.grid.window.dim();
    check_dim("atlas window", model.state_dim(), n)?;
    let u_law = DVector::from_column_slice(&class.u_star);

    let members: BTreeSet<usize> = class.samples.iter().copied().collect();
    let outside: Vec<&[f64]> = atlas
        .samples
        .iter()
        .enumerate()
        .filter(|(i, _)| !members.contains(i))
        .map(|(_, s)| s.x0.as_slice())
        .collect();
    let window = &atlas.grid.window;
    let step: Vec<f64> = (0..n)
        .map(|d| (window.upper[d] - window.lower[d]) / (atlas.grid.resolution[d] - 1) as f64)
        .collect();

    // Non-class samples touching the class (diagonals included). They fence
    // the class in, so the cheap searches only look at them.
    let ring: Vec<&[f64]> = ring_samples(atlas, &members)
        .into_iter()
        .map(|i| atlas.samples[i].x0.as_slice())
        .collect();

    // Depth of every class sample: distance to the fence or window edge.
    let depth: Vec<(usize, f64)> = class
        .samples
        .iter()
        .map(|&i| {
            let x = &atlas.samples[i].x0;
            let mut best = (0..n)
                .map(|d| (x[d] - window.lower[d]).min(window.upper[d] - x[d]))
                .fold(f64::INFINITY, f64::min);
            for y in &ring {
                let d2: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d2.sqrt());
            }
            (i, best)
        })
        .collect();

    let mut uncovered: BTreeSet<usize> = members.clone();
    let mut fitted = Vec::new();
    let min_new = (params.min_gain * class.samples.len() as f64).ceil().max(1.0) as usize;

    for round in 0..params.max_ellipsoids {
        let Some(&(seed_idx, _)) = depth
            .iter()
            .filter(|(i, _)| uncovered.contains(i))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        else {
            break;
        };
        let seed_center = DVector::from_column_slice(&atlas.samples[seed_idx].x0);
        let piece = connected_piece(atlas, &uncovered, seed_idx);
        let seed_shape = second_moment_shape(atlas, &piece, &seed_center, &step, params.r_min);
        let points = |set: &BTreeSet<usize>| -> Vec<&[f64]> {
            set.iter().map(|&i| atlas.samples[i].x0.as_slice()).collect()
        };
        let covered_before: BTreeSet<usize> = members.difference(&uncovered).copied().collect();
        let search = CoverSearch {
            ring: &ring,
            window,
            step: &step,
            uncovered: points(&uncovered),
            covered: points(&covered_before),
        };
        let (center, shape) = search.refine(&seed_center, &seed_shape);

        // The refined fit only saw the fence; rescale against every
        // non-class sample.
        let Some(mut scale) = grid_scale(&shape, &center, &outside, window, &step) else {
            break;
        };
        let seed = params.seed.wrapping_add(1000 * round as u64);
        let mut accepted = None;
        for _ in 0..params.max_shrinks {
            let candidate = Ellipsoid::new(&shape / (scale * scale), center.clone())?;
            if candidate.min_semi_axis() < params.r_min {
                break;
            }
            let (report, bad) = verify_detailed(&candidate, &u_law, model, params.verify_samples, seed, solver)?;
            if report.verified {
                accepted = Some(candidate);
                break;
            }
            // Shrink to just inside the closest offending state.
            let closest = bad
                .iter()
                .map(|x| candidate.value(x.as_slice()).sqrt())
                .fold(f64::INFINITY, f64::min);
            scale *= (0.99 * closest).min(0.9);
        }
        let Some(verified) = accepted else {
            break;
        };
        let stored = verified.scaled(params.gamma);
        let report = verify_ellipsoid(&stored, &u_law, model, params.verify_samples, seed + 1, solver)?;
        if !report.verified {
            break;
        }
        let newly: Vec<usize> = uncovered
            .iter()
            .copied()
            .filter(|&i| stored.contains(&atlas.samples[i].x0))
            .collect();
        if newly.len() < min_new {
            break;
        }
        for i in &newly {
            uncovered.remove(i);
        }
        let covered = class
            .samples
            .iter()
            .filter(|&&i| stored.contains(&atlas.samples[i].x0))
            .count();
        fitted.push(FittedEllipsoid {
            ellipsoid: stored,
            report,
            covered,
        });
        if uncovered.is_empty() {
            break;
        }
    }
    Ok(fitted)
}

/// Fits every class in turn. Class `k` uses seeds offset by `10^6 k` so
/// that no two classes share verification samples.
pub fn fit_classes(
    classes: &[FeedbackClass],
    atlas: &SampleAtlas,
    model: &SystemModel,
    params: &FitParams,
    solver: &SolverConfig,
) -> Result<Vec<(FeedbackClass, Vec<FittedEllipsoid>)>> {
    classes
        .iter()
        .enumerate()
        .map(|(k, class)| {
            let p = FitParams {
                seed: params.seed.wrapping_add(1_000_000 * k as u64),
                ..params.clone()
            };
            Ok((class.clone(), fit_inner_ellipsoids(class, atlas, model, &p, solver)?))
        })
        .collect()
}

/// Grid neighbors of `i` in the full `3^n - 1` stencil.
fn stencil(res: &[usize], i: usize) -> Vec<usize> {
    let mut out = vec![i];
    let mut stride = 1;
    for &r in res {
        let coord = (i / stride) % r;
        let mut next = Vec::with_capacity(out.len() * 3);
        for &j in &out {
            next.push(j);
            if coord > 0 {
                next.push(j - stride);
            }
            if coord + 1 < r {
                next.push(j + stride);
            }
        }
        out = next;
        stride *= r;
    }
    out.retain(|&j| j != i);
    out
}

fn ring_samples(atlas: &SampleAtlas, members: &BTreeSet<usize>) -> BTreeSet<usize> {
    let res = &atlas.grid.resolution;
    members
        .iter()
        .flat_map(|&i| stencil(res, i))
        .filter(|j| !members.contains(j))
        .collect()
}

/// Nelder-Mead search over center and shape. Every candidate is blown up to
/// the fence by [`grid_scale`], so only the cover count is left to optimize.
struct CoverSearch<'a> {
    ring: &'a [&'a [f64]],
    window: &'a crate::atlas::Window,
    step: &'a [f64],
    uncovered: Vec<&'a [f64]>,
    covered: Vec<&'a [f64]>,
}

/// Width of the soft membership edge, in units of the ellipsoid value.
const SOFT_EDGE: f64 = 0.05;
/// Weight of samples that an earlier ellipsoid already covers.
const OVERLAP_WEIGHT: f64 = 0.05;

impl CoverSearch<'_> {
    /// Parameters: center, then the lower Cholesky factor row by row with
    /// the diagonal stored as a logarithm.
    fn decode(&self, p: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.step.len();
        let center = DVector::from_column_slice(&p[..n]);
        let mut l = DMatrix::zeros(n, n);
        let mut k = n;
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = if i == j { p[k].exp() } else { p[k] };
                k += 1;
            }
        }
        (center, &l * l.transpose())
    }

    fn encode(center: &DVector<f64>, shape: &DMatrix<f64>) -> Vec<f64> {
        let n = center.len();
        let l = shape.clone().cholesky().expect("seed shape is SPD").l();
        let mut p = center.as_slice().to_vec();
        for i in 0..n {
            for j in 0..=i {
                p.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
            }
        }
        p
    }

    fn score(&self, center: &DVector<f64>, shape: &DMatrix<f64>) -> Option<f64> {
        let scale = grid_scale(shape, center, self.ring, self.window, self.step)?;
        let e = Ellipsoid {
            e: shape / (scale * scale),
            center: center.clone(),
        };
        let soft = |pts: &[&[f64]]| -> f64 {
            pts.iter()
                .map(|x| 1.0 / (1.0 + ((e.value(x) - 1.0) / SOFT_EDGE).exp()))
                .sum()
        };
        Some(soft(&self.uncovered) + OVERLAP_WEIGHT * soft(&self.covered))
    }

    fn refine(&self, center: &DVector<f64>, shape: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        use argmin::core::{Executor, State};
        use argmin::solver::neldermead::NelderMead;

        let Some(start_score) = self.score(center, shape) else {
            return (center.clone(), shape.clone());
        };
        let p0 = Self::encode(center, shape);
        let cell = self.step.iter().fold(0.0f64, |a, &b| a.max(b));
        let mut simplex = vec![p0.clone()];
        for k in 0..p0.len() {
            let mut p = p0.clone();
            p[k] += if k < center.len() { 5.0 * cell } else { 0.3 };
            simplex.push(p);
        }
        let solver = NelderMead::new(simplex).with_sd_tolerance(1e-8);
        let Ok(solver) = solver else {
            return (center.clone(), shape.clone());
        };
        let result = Executor::new(self, solver)
            .configure(|st| st.max_iters(600))
            .run();
        let best = result.ok().and_then(|r| r.state.get_best_param().cloned());
        match best {
            Some(p) => {
                let (c, s) = self.decode(&p);
                let symmetric = (&s + s.transpose()) / 2.0;
                match self.score(&c, &symmetric) {
                    Some(v) if v > start_score && symmetric.clone().cholesky().is_some() => {
                        let norm = symmetric.amax();
                        (c, symmetric / norm)
                    }
                    _ => (center.clone(), shape.clone()),
                }
            }
            None => (center.clone(), shape.clone()),
        }
    }
}

impl argmin::core::CostFunction for &CoverSearch<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        if p.iter().any(|v| !v.is_finite() || v.abs() > 50.0) {
            return Ok(1e9);
        }
        let (c, s) = self.decode(p);
        Ok(self.score(&c, &s).map_or(1e9, |v| -v))
    }
}

/// Uncovered class samples reachable from `start` through grid neighbors.
fn connected_piece(atlas: &SampleAtlas, uncovered: &BTreeSet<usize>, start: usize) -> Vec<usize> {
    let res = &atlas.grid.resolution;
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    let mut out = Vec::new();
    while let Some(i) = queue.pop_front() {
        out.push(i);
        let mut stride = 1;
        for &r in res {
            let coord = (i / stride) % r;
            let mut nbrs = Vec::with_capacity(2);
            if coord > 0 {
                nbrs.push(i - stride);
            }
            if coord + 1 < r {
                nbrs.push(i + stride);
            }
            for j in nbrs {
                if uncovered.contains(&j) && seen.insert(j) {
                    queue.push_back(j);
                }
            }
            stride *= r;
        }
    }
    out
}

/// `Sigma^-1` of the samples' second moments about `center`, each sample
/// standing for a grid cell (adds `h^2 / 12` per axis). Normalized so that
/// only the shape matters.
fn second_moment_shape(
    atlas: &SampleAtlas,
    piece: &[usize],
    center: &DVector<f64>,
    step: &[f64],
    r_min: f64,
) -> DMatrix<f64> {
    let n = center.len();
    let mut sigma = DMatrix::zeros(n, n);
    for &i in piece {
        let d = DVector::from_column_slice(&atlas.samples[i].x0) - center;
        sigma += &d * d.transpose();
    }
    sigma /= piece.len() as f64;
    for d in 0..n {
        sigma[(d, d)] += step[d] * step[d] / 12.0 + r_min * r_min;
    }
    let shape = sigma
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| DMatrix::identity(n, n));
    let norm = shape.amax();
    (&shape + shape.transpose()) / (2.0 * norm)
}

/// Largest Mahalanobis radius (metric `shape`) that stays half a grid cell
/// short of every non-class sample and inside the window.
fn grid_scale(
    shape: &DMatrix<f64>,
    center: &DVector<f64>,
    outside: &[&[f64]],
    window: &crate::atlas::Window,
    step: &[f64],
) -> Option<f64> {
    let n = center.len();
    let radius = |v: &DVector<f64>| v.dot(&(shape * v)).max(0.0).sqrt();
    let mut nearest = f64::INFINITY;
    for y in outside {
        let d = DVector::from_column_slice(y) - center;
        nearest = nearest.min(radius(&d));
    }
    // Half a cell diagonal, worst case over sign patterns.
    let mut slack: f64 = 0.0;
    for mask in 0..(1usize << n) {
        let v = DVector::from_iterator(
            n,
            (0..n).map(|d| if mask & (1 << d) != 0 { step[d] / 2.0 } else { -step[d] / 2.0 }),
        );
        slack = slack.max(radius(&v));
    }
    let inv = shape.clone().cholesky()?.inverse();
    let mut scale = nearest - slack;
    for d in 0..n {
        let room = (center[d] - window.lower[d]).min(window.upper[d] - center[d]);
        scale = scale.min(room / inv[(d, d)].sqrt());
    }
    (scale.is_finite() && scale > 0.0).then_some(scale)
}
