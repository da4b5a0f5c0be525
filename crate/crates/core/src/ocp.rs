//! Single-shooting condensed OCP: states eliminated by forward simulation,
//! inputs `U = (u(0), ..., u(N-1))` as the only decision variables.
//!
//! Constraint rows are laid out as
//!
//! ```text
//! [ input rows on u(0) | input rows on u(1..N-1) | state rows on x(1..N-1) | terminal ]
//! ```
//!
//! so the first `q_U` rows are `G~ u(0) - w~` and depend on nothing else.
//! `x(0)` is data; its own state constraint is a feasibility precheck rather
//! than a constant row.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};
use crate::model::SystemModel;

/// What a constraint row constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowTag {
    /// Halfspace `row` of the input set applied to `u(step)`.
    Input { step: usize, row: usize },
    /// Halfspace `row` of the state set applied to `x(step)`, `1 <= step < N`.
    State { step: usize, row: usize },
    /// `x(N)' P x(N) - alpha`.
    Terminal,
}

/// Curvature model used for the Lagrangian Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    /// Exact second derivatives through the rollout (second-order adjoint).
    #[default]
    Exact,
    /// Gauss-Newton cost curvature plus the multiplier-weighted `2 S' P S`
    /// term of the terminal row; dynamics curvature dropped.
    GaussNewton,
}

/// Everything the SQP iteration needs at one point `U`.
#[derive(Debug, Clone)]
pub struct OcpEval {
    pub cost: f64,
    pub cost_grad: DVector<f64>,
    pub g: DVector<f64>,
    pub g_jac: DMatrix<f64>,
    /// `x(0), ..., x(N)`.
    pub states: Vec<DVector<f64>>,
    /// `d x(k) / d U` for `k = 0..=N`.
    pub sens: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct OcpInstance<'a> {
    model: &'a SystemModel,
    x0: DVector<f64>,
    rows: Vec<RowTag>,
}

impl<'a> OcpInstance<'a> {
    pub fn new(model: &'a SystemModel, x0: DVector<f64>) -> Result<Self> {
        check_dim("initial state", model.state_dim(), x0.len())?;
        let horizon = model.horizon;
        let q_u = model.input_rows();
        let q_x = model.state_set.rows();
        let mut rows = Vec::with_capacity(horizon * q_u + (horizon - 1) * q_x + 1);
        for step in 0..horizon {
            rows.extend((0..q_u).map(|row| RowTag::Input { step, row }));
        }
        for step in 1..horizon {
            rows.extend((0..q_x).map(|row| RowTag::State { step, row }));
        }
        rows.push(RowTag::Terminal);
        Ok(Self { model, x0, rows })
    }

    pub fn model(&self) -> &'a SystemModel {
        self.model
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn decision_dim(&self) -> usize {
        self.model.horizon * self.model.input_dim()
    }

    pub fn constraint_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row_tags(&self) -> &[RowTag] {
        &self.rows
    }

    /// Whether `x(0)` itself lies in the state set.
    pub fn x0_admissible(&self) -> bool {
        self.model.state_set.contains(&self.x0, 0.0)
    }

    /// `u(k)` as a copied vector.
    pub fn input_at(&self, u: &DVector<f64>, step: usize) -> DVector<f64> {
        let m = self.model.input_dim();
        u.rows(step * m, m).into_owned()
    }

    /// Stacked `x(1), ..., x(N)`.
    pub fn rollout(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("decision vector", self.decision_dim(), u.len())?;
        let n = self.model.state_dim();
        let mut stacked = DVector::zeros(self.model.horizon * n);
        let mut x = self.x0.clone();
        for k in 0..self.model.horizon {
            x = self.model.dynamics().eval(&x, &self.input_at(u, k));
            stacked.rows_mut(k * n, n).copy_from(&x);
        }
        Ok(stacked)
    }

    pub fn eval_cost(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        check_dim("decision vector", self.decision_dim(), u.len())?;
        let e = self.evaluate(u);
        Ok((e.cost, e.cost_grad))
    }

    pub fn eval_constraints(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        check_dim("decision vector", self.decision_dim(), u.len())?;
        let e = self.evaluate(u);
        Ok((e.g, e.g_jac))
    }

    /// Cost alone, without sensitivities.
    pub(crate) fn cost_only(&self, u: &DVector<f64>) -> f64 {
        let model = self.model;
        let mut x = self.x0.clone();
        let mut cost = 0.0;
        for k in 0..model.horizon {
            let uk = self.input_at(u, k);
            cost += x.dot(&(&model.q * &x)) + uk.dot(&(&model.r * &uk));
            x = model.dynamics().eval(&x, &uk);
        }
        cost + model.terminal_value(&x)
    }

    /// Constraint values alone, without sensitivities.
    pub(crate) fn constraints_only(&self, u: &DVector<f64>) -> DVector<f64> {
        let model = self.model;
        let mut states = Vec::with_capacity(model.horizon + 1);
        states.push(self.x0.clone());
        for k in 0..model.horizon {
            let next = model.dynamics().eval(&states[k], &self.input_at(u, k));
            states.push(next);
        }
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|tag| self.row_value(*tag, u, &states)),
        )
    }

    fn row_value(&self, tag: RowTag, u: &DVector<f64>, states: &[DVector<f64>]) -> f64 {
        let model = self.model;
        let m = model.input_dim();
        match tag {
            RowTag::Input { step, row } => {
                let a = model.input_set.a.row(row);
                (a * u.rows(step * m, m))[0] - model.input_set.b[row]
            }
            RowTag::State { step, row } => {
                let a = model.state_set.a.row(row);
                (a * &states[step])[0] - model.state_set.b[row]
            }
            RowTag::Terminal => model.terminal_value(&states[model.horizon]) - model.alpha,
        }
    }

    /// Forward rollout with first-order sensitivities, cost, constraints and
    /// their Jacobians. Assumes `u` has the right length.
    pub(crate) fn evaluate(&self, u: &DVector<f64>) -> OcpEval {
        let model = self.model;
        let (n, m, horizon) = (model.state_dim(), model.input_dim(), model.horizon);
        let nu = horizon * m;

        let mut states = Vec::with_capacity(horizon + 1);
        let mut sens = Vec::with_capacity(horizon + 1);
        states.push(self.x0.clone());
        sens.push(DMatrix::zeros(n, nu));
        let mut cost = 0.0;
        let mut cost_grad = DVector::zeros(nu);
        for k in 0..horizon {
            let uk = self.input_at(u, k);
            let xk = &states[k];
            let qx = &model.q * xk;
            let ru = &model.r * &uk;
            cost += xk.dot(&qx) + uk.dot(&ru);
            cost_grad += sens[k].transpose() * (2.0 * qx);
            let mut block = cost_grad.rows_mut(k * m, m);
            block += 2.0 * ru;

            let (jx, ju) = model.dynamics().jacobians(xk, &uk);
            let mut next_sens = &jx * &sens[k];
            let mut cols = next_sens.columns_mut(k * m, m);
            cols += ju;
            states.push(model.dynamics().eval(xk, &uk));
            sens.push(next_sens);
        }
        let px = &model.p * &states[horizon];
        cost += states[horizon].dot(&px);
        cost_grad += sens[horizon].transpose() * (2.0 * &px);

        let q = self.rows.len();
        let mut g = DVector::zeros(q);
        let mut g_jac = DMatrix::zeros(q, nu);
        for (i, tag) in self.rows.iter().enumerate() {
            g[i] = self.row_value(*tag, u, &states);
            match *tag {
                RowTag::Input { step, row } => {
                    g_jac
                        .view_mut((i, step * m), (1, m))
                        .copy_from(&model.input_set.a.row(row));
                }
                RowTag::State { step, row } => {
                    let grad = model.state_set.a.row(row) * &sens[step];
                    g_jac.row_mut(i).copy_from(&grad);
                }
                RowTag::Terminal => {
                    let grad = (sens[horizon].transpose() * (2.0 * &px)).transpose();
                    g_jac.row_mut(i).copy_from(&grad);
                }
            }
        }

        OcpEval {
            cost,
            cost_grad,
            g,
            g_jac,
            states,
            sens,
        }
    }

    /// Hessian in `U` of `V + lambda' G` at an evaluated point.
    pub(crate) fn lagrangian_hessian(
        &self,
        u: &DVector<f64>,
        eval: &OcpEval,
        lambda: &DVector<f64>,
        mode: HessianMode,
    ) -> DMatrix<f64> {
        let model = self.model;
        let (n, m, horizon) = (model.state_dim(), model.input_dim(), model.horizon);
        let nu = horizon * m;
        let terminal_weight = 1.0 + lambda[self.rows.len() - 1].max(0.0);

        let s_n = &eval.sens[horizon];
        let mut hess = s_n.transpose() * (2.0 * terminal_weight * &model.p) * s_n;
        for k in 0..horizon {
            // 2 S_k' Q S_k + 2 R on the u(k) block
            hess += eval.sens[k].transpose() * (2.0 * &model.q) * &eval.sens[k];
            let mut block = hess.view_mut((k * m, k * m), (m, m));
            block += 2.0 * &model.r;
        }
        if mode == HessianMode::GaussNewton {
            return hess;
        }

        // Costate of the Lagrangian, d L / d x(k), for k = N down to 1.
        let mut state_row_weights: Vec<DVector<f64>> = vec![DVector::zeros(n); horizon + 1];
        for (i, tag) in self.rows.iter().enumerate() {
            if let RowTag::State { step, row } = *tag {
                state_row_weights[step] += model.state_set.a.row(row).transpose() * lambda[i];
            }
        }
        let mut costate = 2.0 * terminal_weight * (&model.p * &eval.states[horizon]);
        for k in (0..horizon).rev() {
            let uk = self.input_at(u, k);
            let xk = &eval.states[k];
            let curvature = model.dynamics().weighted_hessian(xk, &uk, &costate);
            let mut z = DMatrix::zeros(n + m, nu);
            z.rows_mut(0, n).copy_from(&eval.sens[k]);
            z.view_mut((n, k * m), (m, m)).fill_with_identity();
            hess += z.transpose() * curvature * z;
            if k > 0 {
                let (jx, _) = model.dynamics().jacobians(xk, &uk);
                costate = 2.0 * (&model.q * xk) + &state_row_weights[k] + jx.transpose() * costate;
            }
        }
        (&hess + hess.transpose()) * 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_example_model, ModelSpec};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    /// Hand-written rollout and cost for the benchmark, independent of the
    /// sensitivity code.
    fn scalar_cost_oracle(x0: (f64, f64), u: [f64; 3]) -> f64 {
        let (mut a, mut b) = x0;
        let mut cost = 0.0;
        for &uk in &u {
            cost += a * a + b * b + uk * uk;
            a += uk;
            b = 0.9 * b + uk * uk * uk;
        }
        cost + 4.0 * a * a + 10.53 * b * b
    }

    fn random_point(rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
        (
            v(&[rng.random_range(-4.0..4.0), rng.random_range(-5.0..5.0)]),
            v(&[
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
            ]),
        )
    }

    #[test]
    fn layout_of_builtin_rows() {
        let model = builtin_example_model();
        let inst = OcpInstance::new(&model, v(&[0.0, 0.0])).unwrap();
        // 3 * 2 input rows, 2 * 4 state rows, 1 terminal
        assert_eq!(inst.constraint_count(), 15);
        assert_eq!(inst.row_tags()[0], RowTag::Input { step: 0, row: 0 });
        assert_eq!(inst.row_tags()[1], RowTag::Input { step: 0, row: 1 });
        assert_eq!(inst.row_tags()[2], RowTag::Input { step: 1, row: 0 });
        assert_eq!(inst.row_tags()[6], RowTag::State { step: 1, row: 0 });
        assert_eq!(inst.row_tags()[14], RowTag::Terminal);
        assert_eq!(inst.decision_dim(), 3);
    }

    #[test]
    fn rollout_examples() {
        let model = builtin_example_model();
        let inst = OcpInstance::new(&model, v(&[0.0, 0.0])).unwrap();
        assert_eq!(inst.rollout(&v(&[0.0, 0.0, 0.0])).unwrap(), DVector::zeros(6));

        let inst = OcpInstance::new(&model, v(&[1.0, 2.0])).unwrap();
        let xs = inst.rollout(&v(&[0.5, 0.0, 0.0])).unwrap();
        assert_relative_eq!(
            xs,
            v(&[1.5, 1.925, 1.5, 1.7325, 1.5, 1.55925]),
            epsilon = 1e-14
        );
        assert!(inst.rollout(&v(&[0.5, 0.0])).is_err());
        assert!(OcpInstance::new(&model, v(&[1.0])).is_err());
    }

    #[test]
    fn cost_examples() {
        let model = builtin_example_model();
        let inst = OcpInstance::new(&model, v(&[0.0, 0.0])).unwrap();
        let (cost, grad) = inst.eval_cost(&v(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(grad, DVector::zeros(3));

        let inst = OcpInstance::new(&model, v(&[1.0, 2.0])).unwrap();
        let (cost, _) = inst.eval_cost(&v(&[0.0, 0.0, 0.0])).unwrap();
        let oracle = scalar_cost_oracle((1.0, 2.0), [0.0; 3]);
        // 5 + (1 + 3.24) + (1 + 2.6244) + 4 + 10.53 * 0.9^6 * 4
        assert_relative_eq!(oracle, 39.248_694_92, epsilon = 1e-9);
        assert_relative_eq!(cost, oracle, epsilon = 1e-12);
    }

    #[test]
    fn cost_matches_scalar_oracle() {
        let model = builtin_example_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (x0, u) = random_point(&mut rng);
            let inst = OcpInstance::new(&model, x0.clone()).unwrap();
            let (cost, _) = inst.eval_cost(&u).unwrap();
            let oracle = scalar_cost_oracle((x0[0], x0[1]), [u[0], u[1], u[2]]);
            assert_relative_eq!(cost, oracle, max_relative = 1e-13);
            assert_relative_eq!(inst.cost_only(&u), oracle, max_relative = 1e-13);
        }
    }

    fn central_gradient(f: impl Fn(&DVector<f64>) -> f64, u: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_fn(u.len(), |j, _| {
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            (f(&up) - f(&um)) / (2.0 * h)
        })
    }

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1.0)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = builtin_example_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (x0, u) = random_point(&mut rng);
            let inst = OcpInstance::new(&model, x0).unwrap();
            let (_, grad) = inst.eval_cost(&u).unwrap();
            let fd = central_gradient(|w| inst.cost_only(w), &u);
            assert!(rel_err(&grad, &fd) <= 1e-5, "cost gradient {grad} vs {fd}");

            let (_, jac) = inst.eval_constraints(&u).unwrap();
            for i in 0..inst.constraint_count() {
                let fd = central_gradient(|w| inst.constraints_only(w)[i], &u);
                let row = jac.row(i).transpose();
                assert!(rel_err(&row, &fd) <= 1e-5, "row {i}: {row} vs {fd}");
            }
        }
    }

    #[test]
    fn exact_hessian_matches_differenced_gradient() {
        let model = builtin_example_model();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let (x0, u) = random_point(&mut rng);
            let inst = OcpInstance::new(&model, x0).unwrap();
            let lambda = DVector::from_fn(inst.constraint_count(), |_, _| rng.random_range(0.0..2.0));
            let lag_grad = |w: &DVector<f64>| {
                let e = inst.evaluate(w);
                e.cost_grad + e.g_jac.transpose() * &lambda
            };
            let h = 1e-5;
            let fd = DMatrix::from_fn(3, 3, |i, j| {
                let mut up = u.clone();
                let mut um = u.clone();
                up[j] += h;
                um[j] -= h;
                (lag_grad(&up)[i] - lag_grad(&um)[i]) / (2.0 * h)
            });
            let exact = inst.lagrangian_hessian(&u, &inst.evaluate(&u), &lambda, HessianMode::Exact);
            assert!((&exact - &fd).amax() <= 1e-5 * fd.amax().max(1.0), "{exact} vs {fd}");
        }
    }

    #[test]
    fn input_rows_follow_first_input_only() {
        let model = builtin_example_model();
        let inst = OcpInstance::new(&model, v(&[0.2, -0.1])).unwrap();
        let (g, _) = inst.eval_constraints(&v(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!((g[0], g[1]), (-2.0, 0.0));
        let (g, _) = inst.eval_constraints(&v(&[-1.0, 0.3, 0.0])).unwrap();
        assert_eq!((g[0], g[1]), (0.0, -2.0));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let (x0, u) = random_point(&mut rng);
            let (x0b, u_other) = random_point(&mut rng);
            let mut u2 = u_other.clone();
            u2[0] = u[0];
            let a = OcpInstance::new(&model, x0).unwrap().eval_constraints(&u).unwrap();
            let b = OcpInstance::new(&model, x0b).unwrap().eval_constraints(&u2).unwrap();
            for i in 0..model.input_rows() {
                assert_eq!(a.0[i].to_bits(), b.0[i].to_bits());
                assert_eq!(a.1.row(i), b.1.row(i));
                for j in 1..3 {
                    assert_eq!(a.1[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn terminal_row_value() {
        let model = builtin_example_model();
        let inst = OcpInstance::new(&model, v(&[1.0, 0.0])).unwrap();
        let (g, _) = inst.eval_constraints(&v(&[0.0, 0.0, 0.0])).unwrap();
        assert_relative_eq!(g[14], 4.0 - 1.1, epsilon = 1e-15);
    }

    #[test]
    fn cost_is_positive_definite() {
        let model = builtin_example_model();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let (x0, u) = random_point(&mut rng);
            let inst = OcpInstance::new(&model, x0).unwrap();
            assert!(inst.cost_only(&u) > 0.0);
        }
    }

    #[test]
    fn x0_precheck() {
        let model = builtin_example_model();
        assert!(OcpInstance::new(&model, v(&[9.0, -9.0])).unwrap().x0_admissible());
        assert!(!OcpInstance::new(&model, v(&[11.0, 0.0])).unwrap().x0_admissible());
        let mut spec = ModelSpec::pannocchia2011();
        spec.state_polytope.a.clear();
        spec.state_polytope.b.clear();
        let unbounded = SystemModel::from_spec(spec).unwrap();
        let inst = OcpInstance::new(&unbounded, v(&[100.0, 0.0])).unwrap();
        assert!(inst.x0_admissible());
        assert_eq!(inst.constraint_count(), 7);
    }
}
