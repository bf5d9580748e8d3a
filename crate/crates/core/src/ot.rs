//! Entropy-regularized optimal transport between teacher and student local
//! structures (rows of reduced similarity matrices).
//!
//! The solver keeps dual potentials `f, g` in log space and the plan is
//! `π_ij = exp(f_i + g_j − C_ij/ε)`. Between absorptions it iterates on
//! multiplicative corrections `u, v` against the stabilized kernel
//! `K_ij = exp(f_i + g_j − C_ij/ε)`; once a correction drifts far from 1, or
//! a kernel row/column underflows, it is folded back into `f, g` with an exact
//! log-sum-exp update. The iterates are those of log-domain Sinkhorn; the
//! exponentials are paid only on absorption. An optional damped Newton phase
//! on the dual finishes the solve when Sinkhorn stalls.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;
use crate::tensor::{dot, sq_dist, Matrix, Tape, Var};

/// Correction factors beyond `[1/BOUND, BOUND]` trigger an absorption.
const ABSORB_BOUND: f64 = 1e100;
/// Kernel entries below this are dropped. With scalings kept inside
/// `ABSORB_BOUND`, no product in an iteration can then go subnormal, which
/// would otherwise slow the arithmetic by orders of magnitude. The dropped
/// mass is negligible next to a row's total of `1/n`.
const KERNEL_FLOOR: f64 = 1e-200;
/// Largest change to any potential in one Newton step, in units of `ε`.
const MAX_NEWTON_STEP: f64 = 2.0;
/// Levenberg-Marquardt damping levels, relative to the largest row mass.
const NEWTON_DAMPING: [f64; 6] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once every row and column sum is within `tol` of its marginal.
    pub tol: f64,
    /// Newton steps on the dual run when Sinkhorn ends short of `tol`.
    /// Sinkhorn stalls on nearly block-diagonal kernels (small `ε` relative
    /// to the cost spread); Newton converges quadratically there. Each step
    /// solves an `(n + m − 1)`-dimensional linear system, so this is off by
    /// default for training.
    #[serde(default)]
    pub newton_steps: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 200,
            tol: 1e-6,
            newton_steps: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub epsilon: f64,
    pub iterations_used: usize,
    /// Max absolute deviation of row/column sums from the uniform marginals.
    pub marginal_violation: f64,
    /// False when `max_iters` ran out before `tol` was met.
    pub converged: bool,
}

impl TransportPlan {
    /// `⟨π, C⟩`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.plan
            .as_slice()
            .iter()
            .zip(cost.values().as_slice())
            .map(|(p, c)| p * c)
            .sum()
    }
}

/// Pairwise nonnegative transport costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Matrix,
}

impl CostMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::contract(format!(
                "cost entry {v} is not a finite nonnegative number"
            )));
        }
        if values.is_empty() {
            return Err(Error::contract("empty cost matrix"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn transpose(&self) -> Self {
        Self {
            values: self.values.transpose(),
        }
    }
}

fn check_pair(teacher: &SimilarityMatrix, student: &SimilarityMatrix) -> Result<()> {
    if teacher.values().shape() != student.values().shape() {
        return Err(Error::Dimension {
            op: "cost_matrix",
            left: teacher.values().shape(),
            right: student.values().shape(),
        });
    }
    if teacher.anchor_indices() != student.anchor_indices() {
        return Err(Error::contract("teacher and student use different anchors"));
    }
    Ok(())
}

/// Squared Euclidean distance between every teacher row and every student row.
pub fn cost_matrix(teacher: &SimilarityMatrix, student: &SimilarityMatrix) -> Result<CostMatrix> {
    check_pair(teacher, student)?;
    CostMatrix::new(sq_dist(teacher.values(), student.values()))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct Solver<'a> {
    scaled: &'a Matrix,
    n: usize,
    m: usize,
    log_mu: f64,
    log_nu: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    kernel: Vec<f64>,
}

impl Solver<'_> {
    fn exact_rows(&mut self) {
        for i in 0..self.n {
            let row = self.scaled.row(i);
            self.f[i] = self.log_mu - log_sum_exp(self.g.iter().zip(row).map(|(g, c)| g - c));
        }
    }

    fn exact_cols(&mut self) {
        for j in 0..self.m {
            let f = &self.f;
            let lse = log_sum_exp((0..self.n).map(|i| f[i] - self.scaled.get(i, j)));
            self.g[j] = self.log_nu - lse;
        }
    }

    fn rebuild_kernel(&mut self) {
        for i in 0..self.n {
            let row = self.scaled.row(i);
            let dst = &mut self.kernel[i * self.m..(i + 1) * self.m];
            for ((k, g), c) in dst.iter_mut().zip(&self.g).zip(row) {
                let e = (self.f[i] + g - c).exp();
                *k = if e < KERNEL_FLOOR { 0.0 } else { e };
            }
        }
    }

    fn absorb(&mut self, u: &mut [f64], v: &mut [f64]) {
        for (f, x) in self.f.iter_mut().zip(u.iter_mut()) {
            *f += x.ln();
            *x = 1.0;
        }
        for (g, y) in self.g.iter_mut().zip(v.iter_mut()) {
            *g += y.ln();
            *y = 1.0;
        }
    }

    /// Plan, its row and column sums, and the marginal residual at `f, g`.
    fn residual(&self, f: &[f64], g: &[f64]) -> (Matrix, Vec<f64>, Vec<f64>, Vec<f64>) {
        let plan = Matrix::from_fn(self.n, self.m, |i, j| (f[i] + g[j] - self.scaled.get(i, j)).exp());
        let rows: Vec<f64> = (0..self.n).map(|i| plan.row(i).iter().sum()).collect();
        let cols: Vec<f64> = (0..self.m).map(|j| (0..self.n).map(|i| plan.get(i, j)).sum()).collect();
        let mut res: Vec<f64> = rows.iter().map(|r| r - self.log_mu.exp()).collect();
        res.extend(cols.iter().map(|c| c - self.log_nu.exp()));
        (plan, rows, cols, res)
    }

    /// Damped Newton on the marginal equations (the dual gradient) with the
    /// last column potential pinned. Steps are halved until the residual
    /// norm drops.
    fn newton(&mut self, steps: usize, tol: f64) {
        let (n, m) = (self.n, self.m);
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (mut plan, mut rows, mut cols, mut res) = self.residual(&self.f, &self.g);
        for _ in 0..steps {
            if res.iter().all(|d| d.abs() < tol) {
                return;
            }
            let dim = n + m - 1;
            let rhs = nalgebra::DVector::from_iterator(dim, res[..dim].iter().map(|d| -d));
            let current = norm(&res);
            let mut accepted = false;
            // Plain Newton first; on failure, Levenberg-Marquardt damping
            // bends the step toward steepest descent on the residual.
            for damping in NEWTON_DAMPING {
                let lambda = damping * rows.iter().cloned().fold(0.0, f64::max);
                let hessian = nalgebra::DMatrix::from_fn(dim, dim, |a, b| match (a < n, b < n) {
                    (true, true) if a == b => rows[a] + lambda,
                    (false, false) if a == b => cols[a - n] + lambda,
                    (true, false) => plan.get(a, b - n),
                    (false, true) => plan.get(b, a - n),
                    _ => 0.0,
                });
                let Some(step) = hessian.lu().solve(&rhs) else {
                    continue;
                };
                // Weakly coupled blocks give near-singular directions; cap
                // the step in log space so the exponentials stay meaningful.
                let largest = step.iter().fold(0.0f64, |a, s| a.max(s.abs()));
                let mut t = (MAX_NEWTON_STEP / largest).min(1.0);
                for _ in 0..30 {
                    let f: Vec<f64> = (0..n).map(|i| self.f[i] + t * step[i]).collect();
                    let mut g = self.g.clone();
                    for j in 0..m - 1 {
                        g[j] += t * step[n + j];
                    }
                    let next = self.residual(&f, &g);
                    let value = norm(&next.3);
                    if value.is_finite() && value <= (1.0 - 1e-4 * t) * current {
                        (self.f, self.g) = (f, g);
                        (plan, rows, cols, res) = next;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if accepted {
                    break;
                }
            }
            if !accepted {
                break;
            }
        }
    }

    fn plan(&self) -> Matrix {
        Matrix::from_fn(self.n, self.m, |i, j| {
            (self.f[i] + self.g[j] - self.scaled.get(i, j)).exp()
        })
    }
}

fn out_of_bounds(x: &[f64]) -> bool {
    x.iter().any(|&v| !(v < ABSORB_BOUND && v > 1.0 / ABSORB_BOUND))
}

/// Entropic OT with uniform marginals on both sides.
pub fn sinkhorn(cost: &CostMatrix, config: &SinkhornConfig) -> Result<TransportPlan> {
    let eps = config.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::contract(format!("epsilon must be positive, got {eps}")));
    }
    let (n, m) = cost.values().shape();
    let scaled = cost.values().scale(1.0 / eps);
    let mut s = Solver {
        scaled: &scaled,
        n,
        m,
        log_mu: -(n as f64).ln(),
        log_nu: -(m as f64).ln(),
        f: vec![0.0; n],
        g: vec![0.0; m],
        kernel: vec![0.0; n * m],
    };
    let (mu, nu) = (1.0 / n as f64, 1.0 / m as f64);

    s.exact_rows();
    s.exact_cols();
    s.rebuild_kernel();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut iterations = 1;
    let mut converged = false;

    while iterations < config.max_iters.max(1) {
        // Row step. Columns are exact here, so the row residual is the full
        // marginal violation of the current plan.
        for i in 0..n {
            let krow = &s.kernel[i * m..(i + 1) * m];
            kv[i] = dot(krow, &v);
        }
        let residual = u.iter().zip(&kv).map(|(x, k)| (x * k - mu).abs()).fold(0.0, f64::max);
        if residual.is_nan() {
            return Err(Error::Numerical("NaN in Sinkhorn scaling".into()));
        }
        if residual < config.tol {
            converged = true;
            break;
        }
        iterations += 1;
        if kv.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            s.absorb(&mut u, &mut v);
            s.exact_rows();
            s.rebuild_kernel();
        } else {
            u.iter_mut().zip(&kv).for_each(|(x, k)| *x = mu / k);
        }

        // Column step.
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let krow = &s.kernel[i * m..(i + 1) * m];
            for (acc, k) in ktu.iter_mut().zip(krow) {
                *acc += k * u[i];
            }
        }
        if ktu.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
            s.absorb(&mut u, &mut v);
            s.exact_cols();
            s.rebuild_kernel();
        } else {
            v.iter_mut().zip(&ktu).for_each(|(y, k)| *y = nu / k);
        }

        if out_of_bounds(&u) || out_of_bounds(&v) {
            s.absorb(&mut u, &mut v);
            s.rebuild_kernel();
        }
    }

    s.absorb(&mut u, &mut v);
    if !converged && config.newton_steps > 0 {
        s.newton(config.newton_steps, config.tol);
        // Exact columns make the total mass 1 to rounding.
        s.exact_cols();
    }
    let plan = s.plan();
    if !plan.is_finite() {
        return Err(Error::Numerical("non-finite transport plan".into()));
    }
    let marginal_violation = marginal_violation(&plan);
    if !converged {
        converged = marginal_violation < config.tol;
    }
    if !converged {
        log::debug!("sinkhorn stopped after {iterations} iterations, violation {marginal_violation:.3e}");
    }
    Ok(TransportPlan {
        plan,
        epsilon: eps,
        iterations_used: iterations,
        marginal_violation,
        converged,
    })
}

/// Max deviation of row and column sums from uniform marginals.
pub fn marginal_violation(plan: &Matrix) -> f64 {
    let (n, m) = plan.shape();
    let row_dev = (0..n)
        .map(|i| (plan.row(i).iter().sum::<f64>() - 1.0 / n as f64).abs())
        .fold(0.0, f64::max);
    let col_dev = plan
        .column_means()
        .as_slice()
        .iter()
        .map(|c| (c * n as f64 - 1.0 / m as f64).abs())
        .fold(0.0, f64::max);
    row_dev.max(col_dev)
}

/// Transport cost `⟨π*, C⟩` between teacher rows (constant) and student rows
/// on `tape`.
///
/// The plan is solved on the current cost values and then held fixed, so the
/// gradient is `Σ π*_ij ∂C_ij/∂student`. The entropic term shapes `π*` but is
/// not part of the returned value.
pub fn ot_loss(
    tape: &mut Tape,
    teacher: &SimilarityMatrix,
    student: Var,
    student_anchors: Option<&[usize]>,
    config: &SinkhornConfig,
) -> Result<(Var, TransportPlan)> {
    let sv = tape.value(student);
    if sv.shape() != teacher.values().shape() {
        return Err(Error::Dimension {
            op: "ot_loss",
            left: teacher.values().shape(),
            right: sv.shape(),
        });
    }
    if teacher.anchor_indices() != student_anchors {
        return Err(Error::contract("teacher and student use different anchors"));
    }
    let t = tape.constant(teacher.values().clone());
    let cost = tape.sq_dist(t, student)?;
    let plan = sinkhorn(&CostMatrix::new(tape.value(cost).clone())?, config)?;
    let p = tape.constant(plan.plan.clone());
    let weighted = tape.mul(p, cost)?;
    Ok((tape.sum(weighted), plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::SimilaritySource;

    fn cost(rows: &[Vec<f64>]) -> CostMatrix {
        CostMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn cfg(epsilon: f64) -> SinkhornConfig {
        SinkhornConfig {
            epsilon,
            max_iters: 10_000,
            tol: 1e-9,
            newton_steps: 0,
        }
    }

    #[test]
    fn zero_cost_gives_independent_coupling() {
        let p = sinkhorn(&cost(&[vec![0.0, 0.0], vec![0.0, 0.0]]), &cfg(0.3)).unwrap();
        assert!(p.plan.max_abs_diff(&Matrix::filled(2, 2, 0.25)) < 1e-12);
        assert!(p.converged);
    }

    #[test]
    fn two_point_assignment() {
        let c = cost(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let p = sinkhorn(&c, &cfg(0.01)).unwrap();
        let target = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        assert!(p.plan.max_abs_diff(&target) < 1e-3);
        assert!(p.transport_cost(&c) < 1e-3);
    }

    #[test]
    fn invalid_epsilon() {
        let c = cost(&[vec![0.0]]);
        assert!(matches!(sinkhorn(&c, &cfg(0.0)), Err(Error::Contract(_))));
        assert!(matches!(sinkhorn(&c, &cfg(-1.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn negative_cost_rejected() {
        assert!(CostMatrix::new(Matrix::from_rows(&[vec![-1.0]]).unwrap()).is_err());
    }

    #[test]
    fn single_cell_plan() {
        let t = crate::similarity::reduced_from_values(
            Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            vec![0, 1],
            SimilaritySource::Teacher,
        );
        // one sample cannot carry two anchor columns
        assert!(t.is_err());
        let t = crate::similarity::reduced_from_values(
            Matrix::from_rows(&[vec![0.0]]).unwrap(),
            vec![0],
            SimilaritySource::Teacher,
        )
        .unwrap();
        let mut tape = Tape::new();
        let s = tape.param(Matrix::from_rows(&[vec![3.0]]).unwrap());
        let (loss, plan) = ot_loss(&mut tape, &t, s, Some(&[0]), &SinkhornConfig::default()).unwrap();
        assert_eq!(plan.plan, Matrix::scalar(1.0));
        assert_eq!(tape.scalar(loss).unwrap(), 9.0);
    }

    #[test]
    fn stops_at_max_iters_without_failing() {
        let c = cost(&[vec![0.0, 0.5, 0.9], vec![0.4, 0.0, 0.1], vec![0.7, 0.2, 0.05]]);
        let p = sinkhorn(
            &c,
            &SinkhornConfig {
                epsilon: 0.3,
                max_iters: 2,
                tol: 1e-15,
                newton_steps: 0,
            },
        )
        .unwrap();
        assert!(!p.converged);
        assert!(p.iterations_used <= 2);
        assert!((p.plan.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn newton_finishes_a_stalled_solve() {
        // Nearly block-diagonal kernel: Sinkhorn crawls, Newton does not.
        let c = cost(&[
            vec![0.0, 1.2178899430985843],
            vec![1.3480864685813574, 0.780709631236827],
        ]);
        let slow = sinkhorn(&c, &cfg(0.05)).unwrap();
        assert!(!slow.converged);
        let fast = sinkhorn(
            &c,
            &SinkhornConfig {
                newton_steps: 100,
                ..cfg(0.05)
            },
        )
        .unwrap();
        assert!(fast.converged, "violation {}", fast.marginal_violation);
        assert!(fast.marginal_violation < 1e-9);
        assert!((fast.plan.sum() - 1.0).abs() < 1e-12);
        assert!(fast.transport_cost(&c) <= slow.transport_cost(&c) + 1e-6);
    }
}
