//! Offline exploration of the feasible set on a state grid.
//!
//! Every grid point gets a full OCP solve. Converged samples record their
//! optimal active set; the input rows of `u(0)` inside it (the saturated
//! subset) decide whether the first input is a fixed vector shared by every
//! state with that subset. Samples are grouped by saturated subset into
//! [`FeedbackClass`]es, the raw material for the ellipsoid fit.
//!
//! Constraint indices are 0-based in memory and 1-based in files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::SystemModel;
use crate::ocp::OcpInstance;
use crate::sqp::{
    check_region_regularity, classify_active_sets, SolveStatus, SolverConfig, SqpSolver,
};

/// Serde helpers writing index lists 1-based.
pub(crate) mod one_based {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[usize], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|i| i + 1).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
        let raw = Vec::<usize>::deserialize(d)?;
        raw.into_iter()
            .map(|i| {
                i.checked_sub(1)
                    .ok_or_else(|| serde::de::Error::custom("indices are 1-based"))
            })
            .collect()
    }

    pub mod nested {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[Vec<usize>], s: S) -> Result<S::Ok, S::Error> {
            v.iter()
                .map(|set| set.iter().map(|i| i + 1).collect::<Vec<_>>())
                .collect::<Vec<_>>()
                .serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<usize>>, D::Error> {
            let raw = Vec::<Vec<usize>>::deserialize(d)?;
            raw.into_iter()
                .map(|set| {
                    set.into_iter()
                        .map(|i| {
                            i.checked_sub(1)
                                .ok_or_else(|| serde::de::Error::custom("indices are 1-based"))
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Axis-aligned box `lower <= x <= upper` in state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Window {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("window bounds", lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::Contract("window needs at least one axis".into()));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(Error::Contract(format!("bad window interval [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Default exploration window of the benchmark model.
    pub fn example_default() -> Self {
        Self {
            lower: vec![-6.0, -7.0],
            upper: vec![6.0, 7.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub window: Window,
    /// Grid points per axis, each at least 2.
    pub resolution: Vec<usize>,
}

impl GridSpec {
    pub fn new(window: Window, resolution: Vec<usize>) -> Result<Self> {
        check_dim("grid resolution", window.dim(), resolution.len())?;
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::Contract("grid resolution must be at least 2 per axis".into()));
        }
        Ok(Self { window, resolution })
    }

    /// `[-6,6] x [-7,7]` at 241 x 241.
    pub fn example_default() -> Self {
        Self {
            window: Window::example_default(),
            resolution: vec![241, 241],
        }
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid point of linear index `idx`; axis 0 varies fastest.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut rest = idx;
        (0..self.window.dim())
            .map(|d| {
                let r = self.resolution[d];
                let i = rest % r;
                rest /= r;
                let (l, u) = (self.window.lower[d], self.window.upper[d]);
                l + (u - l) * i as f64 / (r - 1) as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveSetTolerances {
    pub eps_act: f64,
    pub eps_lambda: f64,
}

impl Default for ActiveSetTolerances {
    fn default() -> Self {
        Self {
            eps_act: 1e-6,
            eps_lambda: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub x0: Vec<f64>,
    pub feasible: bool,
    pub status: SolveStatus,
    /// Optimal active set (0-based rows; 1-based in files).
    #[serde(with = "one_based")]
    pub active: Vec<usize>,
    #[serde(with = "one_based")]
    pub weakly_active: Vec<usize>,
    /// First input of the optimal sequence; empty when not converged.
    pub u_star: Vec<f64>,
    pub cost: Option<f64>,
    pub kkt_residual: Option<f64>,
    /// Active-set KKT Jacobian has full rank.
    pub regular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAtlas {
    pub model_hash: String,
    pub grid: GridSpec,
    pub tolerances: ActiveSetTolerances,
    /// Free-form run record (configuration, seeds) echoed into the file.
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub samples: Vec<SampleRecord>,
}

/// `A` restricted to the input rows of `u(0)`, order-preserving.
pub fn saturated_subset(active: &[usize], q_u: usize) -> Vec<usize> {
    active.iter().copied().filter(|&i| i < q_u).collect()
}

/// `|subset| = m` and `G~_subset` is invertible with condition number below 1e12.
pub fn check_feedback_condition(subset: &[usize], g_tilde: &DMatrix<f64>, m: usize) -> bool {
    if subset.len() != m || subset.iter().any(|&i| i >= g_tilde.nrows()) {
        return false;
    }
    let sub = g_tilde.select_rows(subset.iter());
    let sv = sub.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    lo > 0.0 && hi / lo < 1e12
}

/// The shared first input `G~_subset^-1 w~_subset`.
pub fn feedback_from_subset(
    subset: &[usize],
    g_tilde: &DMatrix<f64>,
    w_tilde: &DVector<f64>,
) -> Result<DVector<f64>> {
    let m = g_tilde.ncols();
    if !check_feedback_condition(subset, g_tilde, m) {
        return Err(Error::Contract(format!(
            "saturated subset {:?} does not determine the input",
            subset.iter().map(|i| i + 1).collect::<Vec<_>>()
        )));
    }
    let sub = g_tilde.select_rows(subset.iter());
    let rhs = DVector::from_iterator(m, subset.iter().map(|&i| w_tilde[i]));
    sub.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Contract("singular saturated subset".into()))
}

/// Solves the OCP at every grid point, sweeping rows in parallel.
///
/// Within a row samples are solved left to right, each warm-started from the
/// last converged neighbor, so the result does not depend on scheduling.
pub fn explore_grid(
    model: &SystemModel,
    grid: &GridSpec,
    tolerances: ActiveSetTolerances,
    solver: &SolverConfig,
) -> Result<SampleAtlas> {
    check_dim("grid window", model.state_dim(), grid.window.dim())?;
    let row_len = grid.resolution[0];
    let n_rows = grid.len() / row_len;
    let rows: Vec<Vec<SampleRecord>> = (0..n_rows)
        .into_par_iter()
        .map(|r| {
            let sqp = SqpSolver::new(solver.clone());
            let mut warm: Option<DVector<f64>> = None;
            (0..row_len)
                .map(|c| {
                    let x0 = grid.point(r * row_len + c);
                    let (record, u) = solve_sample(model, &sqp, x0, warm.as_ref(), tolerances);
                    if u.is_some() {
                        warm = u;
                    }
                    record
                })
                .collect()
        })
        .collect();
    Ok(SampleAtlas {
        model_hash: model.hash().to_string(),
        grid: grid.clone(),
        tolerances,
        metadata: BTreeMap::new(),
        samples: rows.into_iter().flatten().collect(),
    })
}

fn solve_sample(
    model: &SystemModel,
    sqp: &SqpSolver,
    x0: Vec<f64>,
    warm: Option<&DVector<f64>>,
    tol: ActiveSetTolerances,
) -> (SampleRecord, Option<DVector<f64>>) {
    let mut record = SampleRecord {
        x0: x0.clone(),
        feasible: false,
        status: SolveStatus::Infeasible,
        active: Vec::new(),
        weakly_active: Vec::new(),
        u_star: Vec::new(),
        cost: None,
        kkt_residual: None,
        regular: false,
    };
    let inst = match OcpInstance::new(model, DVector::from_vec(x0)) {
        Ok(inst) => inst,
        Err(_) => return (record, None),
    };
    let sol = match sqp.solve_ocp(&inst, warm) {
        Ok(sol) => sol,
        Err(_) => return (record, None),
    };
    record.status = sol.status;
    if !sol.is_converged() {
        return (record, None);
    }
    let Ok(info) = classify_active_sets(&inst, &sol, tol.eps_act, tol.eps_lambda) else {
        return (record, None);
    };
    record.feasible = true;
    record.regular = check_region_regularity(&inst, &sol, &info).unwrap_or(false);
    record.u_star = sol.first_input(model.input_dim()).iter().copied().collect();
    record.cost = Some(sol.cost);
    record.kkt_residual = Some(sol.kkt_residual);
    record.active = info.active;
    record.weakly_active = info.weakly_active;
    (record, Some(sol.u))
}

impl SampleAtlas {
    pub fn feasible_count(&self) -> usize {
        self.samples.iter().filter(|s| s.feasible).count()
    }

    /// Distinct optimal active sets, sorted.
    pub fn distinct_active_sets(&self) -> Vec<Vec<usize>> {
        let set: BTreeSet<&Vec<usize>> = self
            .samples
            .iter()
            .filter(|s| s.feasible)
            .map(|s| &s.active)
            .collect();
        set.into_iter().cloned().collect()
    }

    /// Smallest box holding every feasible sample, or `None` if there is none.
    pub fn feasible_bounding_box(&self) -> Option<Window> {
        let mut it = self.samples.iter().filter(|s| s.feasible);
        let first = it.next()?;
        let mut lower = first.x0.clone();
        let mut upper = first.x0.clone();
        for s in it {
            for d in 0..lower.len() {
                lower[d] = lower[d].min(s.x0[d]);
                upper[d] = upper[d].max(s.x0[d]);
            }
        }
        Some(Window { lower, upper })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One row per sample: coordinates, feasibility, the 1-based position of
    /// the sample's active set in [`Self::distinct_active_sets`] (empty when
    /// infeasible) and the first optimal input.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let ids: BTreeMap<Vec<usize>, usize> = self
            .distinct_active_sets()
            .into_iter()
            .enumerate()
            .map(|(i, a)| (a, i + 1))
            .collect();
        let n = self.grid.window.dim();
        let m = self
            .samples
            .iter()
            .find(|s| s.feasible)
            .map_or(1, |s| s.u_star.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=n).map(|d| format!("x{d}")).collect();
        header.push("feasible".into());
        header.push("active_set_id".into());
        if m == 1 {
            header.push("u_star".into());
        } else {
            header.extend((1..=m).map(|j| format!("u_star{j}")));
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.x0.iter().map(|v| v.to_string()).collect();
            row.push(u8::from(s.feasible).to_string());
            if s.feasible {
                row.push(ids[&s.active].to_string());
                row.extend(s.u_star.iter().map(|v| v.to_string()));
            } else {
                row.push(String::new());
                row.extend(std::iter::repeat_n(String::new(), m));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Samples sharing a saturated subset that fixes the first input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackClass {
    #[serde(with = "one_based")]
    pub a_tilde: Vec<usize>,
    pub u_star: Vec<f64>,
    /// Distinct full active sets whose saturated subset is `a_tilde`.
    #[serde(with = "one_based::nested")]
    pub member_active_sets: Vec<Vec<usize>>,
    /// Atlas indices of the member samples.
    pub samples: Vec<usize>,
    /// Members whose solver input disagreed with `u_star` by more than 1e-6;
    /// they are left out of `samples`.
    pub inconsistent: usize,
}

/// Groups feasible samples by saturated subset, keeping the subsets that
/// determine the first input.
pub fn group_by_subset(atlas: &SampleAtlas, model: &SystemModel) -> Result<Vec<FeedbackClass>> {
    if atlas.model_hash != model.hash() {
        return Err(Error::ModelHashMismatch {
            stored: atlas.model_hash.clone(),
            actual: model.hash().to_string(),
        });
    }
    let q_u = model.input_rows();
    let m = model.input_dim();
    let g_tilde = &model.input_set.a;
    let w_tilde = &model.input_set.b;

    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (idx, s) in atlas.samples.iter().enumerate() {
        if s.feasible {
            let mut subset = saturated_subset(&s.active, q_u);
            subset.sort_unstable();
            groups.entry(subset).or_default().push(idx);
        }
    }

    let mut classes = Vec::new();
    for (subset, members) in groups {
        if !check_feedback_condition(&subset, g_tilde, m) {
            continue;
        }
        let law = feedback_from_subset(&subset, g_tilde, w_tilde)?;
        let mut samples = Vec::new();
        let mut inconsistent = 0;
        let mut member_sets = BTreeSet::new();
        for idx in members {
            let s = &atlas.samples[idx];
            let gap = s
                .u_star
                .iter()
                .zip(law.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap <= 1e-6 {
                samples.push(idx);
                member_sets.insert(s.active.clone());
            } else {
                inconsistent += 1;
            }
        }
        if inconsistent > 0 {
            log::warn!(
                "{inconsistent} samples with saturated subset {:?} disagree with the shared law",
                subset.iter().map(|i| i + 1).collect::<Vec<_>>()
            );
        }
        classes.push(FeedbackClass {
            a_tilde: subset,
            u_star: law.iter().copied().collect(),
            member_active_sets: member_sets.into_iter().collect(),
            samples,
            inconsistent,
        });
    }
    Ok(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_example_model;

    #[test]
    fn saturated_subset_intersects_in_order() {
        assert_eq!(saturated_subset(&[0, 4, 6], 2), vec![0]);
        assert_eq!(saturated_subset(&[2, 3], 2), Vec::<usize>::new());
        assert_eq!(saturated_subset(&[], 2), Vec::<usize>::new());
    }

    #[test]
    fn feedback_condition_cardinality() {
        let model = builtin_example_model();
        let g = &model.input_set.a;
        assert!(check_feedback_condition(&[0], g, 1));
        assert!(check_feedback_condition(&[1], g, 1));
        assert!(!check_feedback_condition(&[], g, 1));
        assert!(!check_feedback_condition(&[0, 1], g, 1));
    }

    #[test]
    fn feedback_laws_of_the_example_are_exact() {
        let model = builtin_example_model();
        let (g, w) = (&model.input_set.a, &model.input_set.b);
        let low = feedback_from_subset(&[0], g, w).unwrap();
        let high = feedback_from_subset(&[1], g, w).unwrap();
        assert!((low[0] + 1.0).abs() <= 1e-12);
        assert!((high[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn identity_feedback_law() {
        let g = DMatrix::identity(2, 2);
        let w = DVector::from_vec(vec![0.3, -0.4]);
        let u = feedback_from_subset(&[0, 1], &g, &w).unwrap();
        assert_eq!(u.as_slice(), &[0.3, -0.4]);
    }

    #[test]
    fn singular_subset_is_a_contract_violation() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let w = DVector::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            feedback_from_subset(&[0, 1], &g, &w),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn grid_points_cover_window_corners() {
        let grid = GridSpec::new(Window::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap(), vec![3, 2]).unwrap();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid.point(0), vec![-1.0, 0.0]);
        assert_eq!(grid.point(2), vec![1.0, 0.0]);
        assert_eq!(grid.point(5), vec![1.0, 2.0]);
        assert!(GridSpec::new(Window::example_default(), vec![1, 5]).is_err());
    }

    #[test]
    fn window_outside_feasible_set_has_no_classes() {
        let model = builtin_example_model();
        let grid = GridSpec::new(Window::new(vec![20.0, 20.0], vec![25.0, 25.0]).unwrap(), vec![4, 4]).unwrap();
        let atlas = explore_grid(&model, &grid, ActiveSetTolerances::default(), &SolverConfig::default()).unwrap();
        assert_eq!(atlas.feasible_count(), 0);
        assert!(group_by_subset(&atlas, &model).unwrap().is_empty());
    }

    #[test]
    fn interior_samples_give_no_classes() {
        let model = builtin_example_model();
        let grid = GridSpec::new(Window::new(vec![-0.05, -0.05], vec![0.05, 0.05]).unwrap(), vec![3, 3]).unwrap();
        let atlas = explore_grid(&model, &grid, ActiveSetTolerances::default(), &SolverConfig::default()).unwrap();
        assert_eq!(atlas.feasible_count(), 9);
        assert!(atlas.samples.iter().all(|s| s.active.is_empty()));
        assert!(group_by_subset(&atlas, &model).unwrap().is_empty());
    }

    #[test]
    fn indices_are_one_based_in_json() {
        let record = SampleRecord {
            x0: vec![0.0, 0.0],
            feasible: true,
            status: SolveStatus::Converged,
            active: vec![0, 14],
            weakly_active: vec![],
            u_star: vec![-1.0],
            cost: Some(1.0),
            kkt_residual: Some(0.0),
            regular: true,
        };
        let text = serde_json::to_string(&record).unwrap();
        assert!(text.contains("\"active\":[1,15]"));
        let back: SampleRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, record);
        assert!(serde_json::from_str::<SampleRecord>(&text.replace("[1,15]", "[0,15]")).is_err());
    }
}
