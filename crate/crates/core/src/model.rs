//! Discrete-time nonlinear system models, constraint polytopes and cost weights.
//!
//! A [`SystemModel`] is built from a serializable [`ModelSpec`] that names a
//! registered dynamics family. The spec is also what the model hash is
//! computed from, so region stores and atlases can be tied to the exact model
//! they were produced for.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};

/// Relative step used by the finite-difference derivative fallbacks.
const FD_STEP: f64 = 1e-6;

/// State-update map `x(k+1) = f(x(k), u(k))` with first and second derivatives.
///
/// Only [`Dynamics::eval`] is mandatory. The derivative methods default to
/// central finite differences so that models without closed-form derivatives
/// still work; built-in families override them analytically.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Returns `(df/dx, df/du)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        finite_difference_jacobians(self, x, u)
    }

    /// Second derivative of `w' f(x, u)` with respect to the stacked argument
    /// `(x, u)`, an `(n + m) x (n + m)` symmetric matrix.
    fn weighted_hessian(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        weights: &DVector<f64>,
    ) -> DMatrix<f64> {
        finite_difference_weighted_hessian(self, x, u, weights)
    }
}

/// Central-difference Jacobians of any [`Dynamics`].
pub fn finite_difference_jacobians<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = dynamics.state_dim();
    let m = dynamics.input_dim();
    let mut jx = DMatrix::zeros(n, n);
    let mut ju = DMatrix::zeros(n, m);
    for j in 0..n {
        let h = FD_STEP * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (dynamics.eval(&xp, u) - dynamics.eval(&xm, u)) / (2.0 * h);
        jx.set_column(j, &col);
    }
    for j in 0..m {
        let h = FD_STEP * u[j].abs().max(1.0);
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += h;
        um[j] -= h;
        let col = (dynamics.eval(x, &up) - dynamics.eval(x, &um)) / (2.0 * h);
        ju.set_column(j, &col);
    }
    (jx, ju)
}

/// Central differences of the (possibly analytic) Jacobians, contracted with `weights`.
pub fn finite_difference_weighted_hessian<D: Dynamics + ?Sized>(
    dynamics: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
    weights: &DVector<f64>,
) -> DMatrix<f64> {
    let n = dynamics.state_dim();
    let m = dynamics.input_dim();
    let grad = |x: &DVector<f64>, u: &DVector<f64>| {
        let (jx, ju) = dynamics.jacobians(x, u);
        let mut g = DVector::zeros(n + m);
        g.rows_mut(0, n).copy_from(&(jx.transpose() * weights));
        g.rows_mut(n, m).copy_from(&(ju.transpose() * weights));
        g
    };
    let mut hess = DMatrix::zeros(n + m, n + m);
    for j in 0..n + m {
        let (mut xp, mut xm, mut up, mut um) = (x.clone(), x.clone(), u.clone(), u.clone());
        let h;
        if j < n {
            h = 1e-5 * x[j].abs().max(1.0);
            xp[j] += h;
            xm[j] -= h;
        } else {
            h = 1e-5 * u[j - n].abs().max(1.0);
            up[j - n] += h;
            um[j - n] -= h;
        }
        let col = (grad(&xp, &up) - grad(&xm, &um)) / (2.0 * h);
        hess.set_column(j, &col);
    }
    (&hess + hess.transpose()) * 0.5
}

/// The two-state benchmark `x1+ = x1 + u`, `x2+ = b x2 + u^3` with scalar input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pannocchia2011 {
    pub b: f64,
}

impl Dynamics for Pannocchia2011 {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let v = u[0];
        DVector::from_vec(vec![x[0] + v, self.b * x[1] + v * v * v])
    }

    fn jacobians(&self, _x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let v = u[0];
        let jx = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, self.b]);
        let ju = DMatrix::from_column_slice(2, 1, &[1.0, 3.0 * v * v]);
        (jx, ju)
    }

    fn weighted_hessian(
        &self,
        _x: &DVector<f64>,
        u: &DVector<f64>,
        weights: &DVector<f64>,
    ) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(3, 3);
        h[(2, 2)] = 6.0 * u[0] * weights[1];
        h
    }
}

/// Halfspace description `{ z | a z <= b }`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        check_dim("polytope rows", a.nrows(), b.len())?;
        Ok(Self { a, b })
    }

    /// Axis-aligned box `lo <= z <= hi` as `2 * dim` rows, ordered
    /// `-z_1 <= -lo_1, z_1 <= hi_1, -z_2 <= ...`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        check_dim("box bounds", lo.len(), hi.len())?;
        let dim = lo.len();
        let mut a = DMatrix::zeros(2 * dim, dim);
        let mut b = DVector::zeros(2 * dim);
        for i in 0..dim {
            a[(2 * i, i)] = -1.0;
            b[2 * i] = -lo[i];
            a[(2 * i + 1, i)] = 1.0;
            b[2 * i + 1] = hi[i];
        }
        Ok(Self { a, b })
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        if self.rows() == 0 {
            return true;
        }
        (&self.a * z - &self.b).iter().all(|&v| v <= tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolytopeSpec {
    /// Row-major halfspace normals.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum DynamicsSpec {
    Pannocchia2011 { b: f64 },
}

impl DynamicsSpec {
    fn build(&self) -> Arc<dyn Dynamics> {
        match *self {
            DynamicsSpec::Pannocchia2011 { b } => Arc::new(Pannocchia2011 { b }),
        }
    }
}

/// Serializable model description (the JSON model file format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dynamics: DynamicsSpec,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Terminal weight, also the shape of the terminal ellipsoid `x' P x <= alpha`.
    pub p: Vec<Vec<f64>>,
    pub alpha: f64,
    pub horizon: usize,
    pub input_polytope: PolytopeSpec,
    pub state_polytope: PolytopeSpec,
}

impl ModelSpec {
    /// The two-state cubic-input benchmark with `|u| <= 1`, `N = 3`.
    ///
    /// The input rows are ordered `-u <= 1` then `u <= 1`. The state set is
    /// not part of the benchmark; a box `[-10, 10]^2` stands in for it.
    pub fn pannocchia2011() -> Self {
        Self {
            dynamics: DynamicsSpec::Pannocchia2011 { b: 0.9 },
            q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            r: vec![vec![1.0]],
            p: vec![vec![4.0, 0.0], vec![0.0, 10.53]],
            alpha: 1.1,
            horizon: 3,
            input_polytope: PolytopeSpec {
                a: vec![vec![-1.0], vec![1.0]],
                b: vec![1.0, 1.0],
            },
            state_polytope: PolytopeSpec {
                a: vec![
                    vec![-1.0, 0.0],
                    vec![1.0, 0.0],
                    vec![0.0, -1.0],
                    vec![0.0, 1.0],
                ],
                b: vec![10.0; 4],
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("model spec serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn matrix_from_rows(name: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidModel(format!("matrix `{name}` has ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn check_spd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidModel(format!("matrix `{name}` is not square")));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::NotPositiveDefinite(name));
    }
    if m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite(name));
    }
    Ok(())
}

/// Validated system, constraint and cost data for the finite-horizon OCP.
#[derive(Clone)]
pub struct SystemModel {
    dynamics: Arc<dyn Dynamics>,
    spec: ModelSpec,
    hash: String,
    pub input_set: Polytope,
    pub state_set: Polytope,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub alpha: f64,
    pub horizon: usize,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("dynamics", &self.dynamics)
            .field("horizon", &self.horizon)
            .field("hash", &self.hash)
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        let dynamics = spec.dynamics.build();
        Self::with_dynamics(spec, dynamics)
    }

    /// Builds a model whose dynamics come from `dynamics` instead of the
    /// registry entry named in `spec`. The hash still derives from `spec`.
    pub fn with_dynamics(spec: ModelSpec, dynamics: Arc<dyn Dynamics>) -> Result<Self> {
        let n = dynamics.state_dim();
        let m = dynamics.input_dim();
        if n == 0 || m == 0 {
            return Err(Error::InvalidModel("state and input dimensions must be positive".into()));
        }
        if spec.horizon == 0 {
            return Err(Error::InvalidModel("horizon must be positive".into()));
        }
        if !(spec.alpha > 0.0) {
            return Err(Error::InvalidModel("terminal level alpha must be positive".into()));
        }

        let q = matrix_from_rows("Q", &spec.q)?;
        let r = matrix_from_rows("R", &spec.r)?;
        let p = matrix_from_rows("P", &spec.p)?;
        check_dim("Q rows", n, q.nrows())?;
        check_dim("R rows", m, r.nrows())?;
        check_dim("P rows", n, p.nrows())?;
        check_spd("Q", &q)?;
        check_spd("R", &r)?;
        check_spd("P", &p)?;

        let input_set = Polytope::new(
            matrix_from_rows("input polytope", &spec.input_polytope.a)?,
            DVector::from_vec(spec.input_polytope.b.clone()),
        )?;
        let state_set = Polytope::new(
            matrix_from_rows("state polytope", &spec.state_polytope.a)?,
            DVector::from_vec(spec.state_polytope.b.clone()),
        )?;
        if input_set.rows() == 0 {
            return Err(Error::InvalidModel("input polytope has no rows".into()));
        }
        check_dim("input polytope columns", m, input_set.dim())?;
        if state_set.rows() > 0 {
            check_dim("state polytope columns", n, state_set.dim())?;
        }
        if input_set.b.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidModel(
                "input polytope must contain the origin in its interior".into(),
            ));
        }
        if state_set.b.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidModel(
                "state polytope must contain the origin in its interior".into(),
            ));
        }

        let origin = dynamics.eval(&DVector::zeros(n), &DVector::zeros(m));
        check_dim("dynamics output", n, origin.len())?;
        if origin.amax() > 1e-14 {
            return Err(Error::InvalidModel("f(0, 0) must vanish".into()));
        }

        let hash = spec.hash();
        Ok(Self {
            dynamics,
            hash,
            input_set,
            state_set,
            q,
            r,
            p,
            alpha: spec.alpha,
            horizon: spec.horizon,
            spec,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    /// Number of halfspaces bounding the input set.
    pub fn input_rows(&self) -> usize {
        self.input_set.rows()
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn eval_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        Ok(self.dynamics.eval(x, u))
    }

    pub fn eval_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        Ok(self.dynamics.jacobians(x, u))
    }

    /// `x' P x`, the quantity bounded by `alpha` in the terminal set.
    pub fn terminal_value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x))
    }

    pub fn in_terminal_set(&self, x: &DVector<f64>) -> bool {
        self.terminal_value(x) <= self.alpha
    }
}

/// The built-in benchmark model (see [`ModelSpec::pannocchia2011`]).
pub fn builtin_example_model() -> SystemModel {
    SystemModel::from_spec(ModelSpec::pannocchia2011()).expect("built-in model is valid")
}

/// Resolves `builtin:<name>` or a path to a JSON model file.
pub fn load_model(source: &str) -> Result<SystemModel> {
    if let Some(name) = source.strip_prefix("builtin:") {
        return match name {
            "pannocchia2011" => Ok(builtin_example_model()),
            other => Err(Error::InvalidModel(format!("unknown built-in model `{other}`"))),
        };
    }
    let text = std::fs::read_to_string(source).map_err(|source_err| Error::Io {
        path: source.into(),
        source: source_err,
    })?;
    SystemModel::from_spec(ModelSpec::from_json(&text)?)
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
    fn dynamics_examples() {
        let model = builtin_example_model();
        assert_eq!(model.eval_dynamics(&v(&[0.0, 0.0]), &v(&[0.0])).unwrap(), v(&[0.0, 0.0]));
        let x = model.eval_dynamics(&v(&[1.0, 2.0]), &v(&[0.5])).unwrap();
        assert_relative_eq!(x, v(&[1.5, 1.925]), epsilon = 1e-15);
        let x = model.eval_dynamics(&v(&[3.0, 4.0]), &v(&[-1.0])).unwrap();
        assert_relative_eq!(x, v(&[2.0, 2.6]), epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = builtin_example_model();
        assert!(matches!(
            model.eval_dynamics(&v(&[1.0]), &v(&[0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(model.eval_jacobians(&v(&[1.0, 2.0]), &v(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn analytic_jacobians() {
        let model = builtin_example_model();
        let (jx, ju) = model.eval_jacobians(&v(&[5.0, -2.0]), &v(&[0.0])).unwrap();
        assert_eq!(ju, DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
        assert_eq!(jx, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.9]));
        let (jx2, _) = model.eval_jacobians(&v(&[-1.0, 7.0]), &v(&[0.8])).unwrap();
        assert_eq!(jx, jx2);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let model = builtin_example_model();
        let dynamics = model.dynamics();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut points = vec![(v(&[0.3, -0.7]), v(&[0.2]))];
        for _ in 0..100 {
            points.push((
                v(&[rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)]),
                v(&[rng.random_range(-1.0..1.0)]),
            ));
        }
        for (x, u) in points {
            let (jx, ju) = dynamics.jacobians(&x, &u);
            let (fx, fu) = finite_difference_jacobians(dynamics, &x, &u);
            let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm().max(1.0);
            assert!(rel(&jx, &fx) <= 1e-5);
            assert!(rel(&ju, &fu) <= 1e-5);
        }
    }

    #[test]
    fn analytic_hessian_matches_fallback() {
        let dynamics = Pannocchia2011 { b: 0.9 };
        let x = v(&[0.4, -1.3]);
        let u = v(&[0.7]);
        let w = v(&[2.0, -3.0]);
        let exact = dynamics.weighted_hessian(&x, &u, &w);
        let approx = finite_difference_weighted_hessian(&dynamics, &x, &u, &w);
        assert!((exact - approx).amax() < 1e-6);
    }

    /// Only `eval` supplied; derivatives come from the trait defaults.
    #[derive(Debug)]
    struct BareCubic;

    impl Dynamics for BareCubic {
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            Pannocchia2011 { b: 0.9 }.eval(x, u)
        }
    }

    #[test]
    fn finite_difference_fallback_provider() {
        let model =
            SystemModel::with_dynamics(ModelSpec::pannocchia2011(), Arc::new(BareCubic)).unwrap();
        let x = v(&[0.3, -0.7]);
        let u = v(&[0.2]);
        let (jx, ju) = model.eval_jacobians(&x, &u).unwrap();
        let (ex, eu) = Pannocchia2011 { b: 0.9 }.jacobians(&x, &u);
        assert!((jx - ex).amax() < 1e-8);
        assert!((ju - eu).amax() < 1e-8);
    }

    #[test]
    fn builtin_example_properties() {
        let model = builtin_example_model();
        assert_eq!((model.state_dim(), model.input_dim(), model.input_rows()), (2, 1, 2));
        assert_eq!(model.horizon, 3);
        assert!(model.in_terminal_set(&v(&[0.0, 0.0])));
        assert_eq!(model.terminal_value(&v(&[1.0, 0.0])), 4.0);
        assert!(!model.in_terminal_set(&v(&[1.0, 0.0])));
        // row 1 is -u <= 1, row 2 is u <= 1
        assert_eq!(model.input_set.a, DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]));
        assert!(model.input_set.b.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn invalid_models_are_rejected() {
        let mut spec = ModelSpec::pannocchia2011();
        spec.q = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        assert!(matches!(SystemModel::from_spec(spec), Err(Error::NotPositiveDefinite("Q"))));

        let mut spec = ModelSpec::pannocchia2011();
        spec.input_polytope.b = vec![1.0, 0.0];
        assert!(matches!(SystemModel::from_spec(spec), Err(Error::InvalidModel(_))));

        let mut spec = ModelSpec::pannocchia2011();
        spec.r = vec![vec![1.0, 0.0]];
        assert!(SystemModel::from_spec(spec).is_err());
    }

    #[test]
    fn spec_json_round_trip_and_hash() {
        let spec = ModelSpec::pannocchia2011();
        let text = spec.to_json().unwrap();
        assert!(text.contains("\"family\": \"pannocchia2011\""));
        let back = ModelSpec::from_json(&text).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());

        let mut other = spec.clone();
        other.alpha = 1.2;
        assert_ne!(other.hash(), spec.hash());
    }

    #[test]
    fn load_model_sources() {
        assert!(load_model("builtin:pannocchia2011").is_ok());
        assert!(load_model("builtin:nope").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(&path, ModelSpec::pannocchia2011().to_json().unwrap()).unwrap();
        let model = load_model(path.to_str().unwrap()).unwrap();
        assert_eq!(model.hash(), builtin_example_model().hash());
    }
}
