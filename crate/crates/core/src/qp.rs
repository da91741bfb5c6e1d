//! Small dense convex QP with box bounds and two-sided linear constraints:
//!
//! ```text
//!   min  1/2 x'Hx + g'x
//!   s.t. lo <= x <= hi,   cl <= Ax <= cu
//! ```
//!
//! The box is handled by projection inside an accelerated (FISTA, with
//! adaptive restart) projected-gradient loop under a Jacobi metric. The linear
//! rows are moved into the objective by an augmented Lagrangian whose
//! multipliers are updated in an outer loop. Every few inner iterations a
//! Newton step on the currently identified face tries to finish the job
//! exactly; the objective is piecewise quadratic, so once the face is right
//! one step lands on the minimizer.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BoxQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Constraint matrix; may have zero rows.
    pub rows: DMatrix<f64>,
    pub row_lower: DVector<f64>,
    pub row_upper: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    /// Bound on the projected-gradient residual of the Lagrangian.
    pub kkt_tol: f64,
    /// Bound on the largest row violation.
    pub feas_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            kkt_tol: 1e-10,
            feas_tol: 1e-10,
            max_outer: 60,
            max_inner: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Row multipliers; positive on an active upper bound, negative on an
    /// active lower bound.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    /// No box-feasible point satisfies the rows; `row` is the worst offender at
    /// the least-violation point.
    Infeasible { row: usize, violation: f64 },
    NotConverged { kkt_residual: f64, max_violation: f64 },
}

impl BoxQp {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Largest amount by which `Ax` leaves `[cl, cu]`, and the row.
    pub fn violation(&self, x: &DVector<f64>) -> (usize, f64) {
        let ax = &self.rows * x;
        let mut worst = (0, 0.0);
        for j in 0..ax.len() {
            let v = (self.row_lower[j] - ax[j]).max(ax[j] - self.row_upper[j]).max(0.0);
            if v > worst.1 {
                worst = (j, v);
            }
        }
        worst
    }

    /// `|x - proj(x - grad L(x, y))|_inf` for the Lagrangian gradient
    /// `Hx + g + A'y`.
    pub fn kkt_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let grad = &self.hessian * x + &self.linear + self.rows.tr_mul(y);
        projected_residual(x, &grad, &self.lower, &self.upper)
    }

    pub fn solve(&self, opts: &QpOptions) -> Result<QpSolution, QpError> {
        let m = self.dim();
        let k = self.rows.nrows();
        let mut x = DVector::zeros(m);
        self.project(&mut x);
        let mut y = DVector::zeros(k);
        let mut rho = 1.0;
        let mut prev_violation = f64::INFINITY;
        let mut iterations = 0;
        let mut last = (f64::INFINITY, f64::INFINITY);

        for _ in 0..opts.max_outer.max(1) {
            let al = AugLagrangian {
                qp: self,
                hessian: &self.hessian,
                linear: &self.linear,
                shift: &y,
                rho,
            };
            let (xn, its) = al.minimize(x, opts.kkt_tol * 0.1, opts.max_inner);
            x = xn;
            iterations += its;
            y = al.row_multipliers(&x);
            let (_, violation) = self.violation(&x);
            let kkt = self.kkt_residual(&x, &y);
            last = (kkt, violation);
            if violation <= opts.feas_tol && kkt <= opts.kkt_tol {
                return Ok(QpSolution {
                    objective: self.objective(&x),
                    x,
                    multipliers: y,
                    kkt_residual: kkt,
                    max_violation: violation,
                    iterations,
                });
            }
            if k == 0 {
                break;
            }
            if violation > 0.25 * prev_violation {
                rho *= 10.0;
            }
            prev_violation = violation;
            if rho > 1e14 {
                break;
            }
        }

        if k > 0 && last.1 > opts.feas_tol {
            if let Some((row, violation)) = self.infeasibility(opts) {
                return Err(QpError::Infeasible { row, violation });
            }
        }
        Err(QpError::NotConverged {
            kkt_residual: last.0,
            max_violation: last.1,
        })
    }

    /// Minimizes the squared row violation over the box. Returns the worst row
    /// if even the best point violates the rows by more than `feas_tol`.
    pub fn infeasibility(&self, opts: &QpOptions) -> Option<(usize, f64)> {
        let m = self.dim();
        let zero_h = DMatrix::zeros(m, m);
        let zero_g = DVector::zeros(m);
        let shift = DVector::zeros(self.rows.nrows());
        let phase1 = AugLagrangian {
            qp: self,
            hessian: &zero_h,
            linear: &zero_g,
            shift: &shift,
            rho: 1.0,
        };
        let mut x0 = DVector::zeros(m);
        self.project(&mut x0);
        let (x, _) = phase1.minimize(x0, 1e-14, opts.max_inner);
        let (row, violation) = self.violation(&x);
        (violation > opts.feas_tol.max(1e-9)).then_some((row, violation))
    }
}

fn projected_residual(x: &DVector<f64>, grad: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    let mut r: f64 = 0.0;
    for i in 0..x.len() {
        let step = (x[i] - grad[i]).clamp(lo[i], hi[i]);
        r = r.max((x[i] - step).abs());
    }
    r
}

/// `1/2 x'Hx + g'x + rho/2 sum_j dist(a_j x + y_j/rho, [cl_j, cu_j])^2`
struct AugLagrangian<'a> {
    qp: &'a BoxQp,
    hessian: &'a DMatrix<f64>,
    linear: &'a DVector<f64>,
    shift: &'a DVector<f64>,
    rho: f64,
}

impl AugLagrangian<'_> {
    fn shifted_rows(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.qp.rows * x + self.shift / self.rho
    }

    fn row_multipliers(&self, x: &DVector<f64>) -> DVector<f64> {
        let w = self.shifted_rows(x);
        DVector::from_fn(w.len(), |j, _| {
            let p = w[j].clamp(self.qp.row_lower[j], self.qp.row_upper[j]);
            self.rho * (w[j] - p)
        })
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let w = self.shifted_rows(x);
        let mut pen = 0.0;
        for j in 0..w.len() {
            let d = w[j] - w[j].clamp(self.qp.row_lower[j], self.qp.row_upper[j]);
            pen += d * d;
        }
        0.5 * x.dot(&(self.hessian * x)) + self.linear.dot(x) + 0.5 * self.rho * pen
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.hessian * x + self.linear + self.qp.rows.tr_mul(&self.row_multipliers(x))
    }

    fn residual(&self, x: &DVector<f64>) -> f64 {
        projected_residual(x, &self.gradient(x), &self.qp.lower, &self.qp.upper)
    }

    /// Generalized Hessian with every row counted; an upper bound on the
    /// curvature of the piecewise quadratic.
    fn majorant(&self) -> DMatrix<f64> {
        self.hessian + self.qp.rows.tr_mul(&self.qp.rows) * self.rho
    }

    fn minimize(&self, mut x: DVector<f64>, tol: f64, max_iter: usize) -> (DVector<f64>, usize) {
        let m = x.len();
        if m == 0 {
            return (x, 0);
        }
        let big = self.majorant();
        let scale = DVector::from_fn(m, |i, _| {
            let d = big[(i, i)];
            if d > 0.0 {
                1.0 / d
            } else {
                1.0
            }
        });
        let lipschitz = scaled_spectral_bound(&big, &scale).max(f64::MIN_POSITIVE);
        let step = scale / lipschitz;

        let mut momentum_point = x.clone();
        let mut theta = 1.0f64;
        let mut iter = 0;
        while iter < max_iter {
            if iter % 20 == 0 {
                if self.residual(&x) <= tol {
                    return (x, iter);
                }
                if let Some(xn) = self.newton_polish(&x) {
                    x = xn;
                    momentum_point = x.clone();
                    theta = 1.0;
                    if self.residual(&x) <= tol {
                        return (x, iter);
                    }
                }
            }
            let grad = self.gradient(&momentum_point);
            let mut next = &momentum_point - grad.component_mul(&step);
            self.qp.project(&mut next);

            let theta_next = 0.5 * (1.0 + libm::sqrt(1.0 + 4.0 * theta * theta));
            // Restart when the momentum direction stops being a descent one.
            let restart = (&momentum_point - &next).dot(&(&next - &x)) > 0.0;
            if restart {
                momentum_point = next.clone();
                theta = 1.0;
            } else {
                momentum_point = &next + (&next - &x) * ((theta - 1.0) / theta_next);
                theta = theta_next;
            }
            x = next;
            iter += 1;
        }
        (x, iter)
    }

    /// Newton step on the face defined by the free variables and the rows
    /// currently outside their interval, with projected backtracking.
    fn newton_polish(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let m = x.len();
        let mut current = x.clone();
        let mut improved = false;
        for _ in 0..8 {
            let grad = self.gradient(&current);
            let free: Vec<usize> = (0..m)
                .filter(|&i| {
                    let (lo, hi) = (self.qp.lower[i], self.qp.upper[i]);
                    if lo == hi {
                        return false;
                    }
                    (current[i] > lo || grad[i] < 0.0) && (current[i] < hi || grad[i] > 0.0)
                })
                .collect();
            if free.is_empty() {
                break;
            }
            let w = self.shifted_rows(&current);
            let active: Vec<usize> = (0..w.len())
                .filter(|&j| w[j] < self.qp.row_lower[j] || w[j] > self.qp.row_upper[j])
                .collect();
            let f = free.len();
            let mut h = DMatrix::from_fn(f, f, |a, b| self.hessian[(free[a], free[b])]);
            for &j in &active {
                for a in 0..f {
                    for b in 0..f {
                        h[(a, b)] += self.rho * self.qp.rows[(j, free[a])] * self.qp.rows[(j, free[b])];
                    }
                }
            }
            let rhs = DVector::from_fn(f, |a, _| -grad[free[a]]);
            let dir = match h.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    let reg = 1e-12 * (0..f).map(|a| h[(a, a)]).fold(0.0, f64::max).max(1e-300);
                    for a in 0..f {
                        h[(a, a)] += reg;
                    }
                    h.cholesky()?.solve(&rhs)
                }
            };
            let base = self.value(&current);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let mut trial = current.clone();
                for a in 0..f {
                    trial[free[a]] += alpha * dir[a];
                }
                self.qp.project(&mut trial);
                if self.value(&trial) <= base + 1e-15 * base.abs().max(1.0) {
                    accepted = Some(trial);
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some(t) => {
                    let moved = (&t - &current).amax();
                    current = t;
                    improved = true;
                    if moved == 0.0 {
                        break;
                    }
                }
                None => break,
            }
        }
        improved.then_some(current)
    }
}

/// Largest eigenvalue of `S^1/2 M S^1/2` for diagonal `S`, by power iteration,
/// padded slightly so it is safe as a step-size bound.
fn scaled_spectral_bound(mat: &DMatrix<f64>, scale: &DVector<f64>) -> f64 {
    let m = scale.len();
    let root = scale.map(libm::sqrt);
    let scaled = DMatrix::from_fn(m, m, |i, j| root[i] * mat[(i, j)] * root[j]);
    let mut v = DVector::from_element(m, 1.0 / libm::sqrt(m as f64));
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = &scaled * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-6 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // Power iteration approaches from below; the row-sum bound caps it.
    let gershgorin = (0..m)
        .map(|i| (0..m).map(|j| scaled[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    (1.1 * lambda).min(gershgorin).max(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn unconstrained(h: DMatrix<f64>, g: DVector<f64>, lo: f64, hi: f64) -> BoxQp {
        let m = g.len();
        BoxQp {
            hessian: h,
            linear: g,
            lower: DVector::from_element(m, lo),
            upper: DVector::from_element(m, hi),
            rows: DMatrix::zeros(0, m),
            row_lower: DVector::zeros(0),
            row_upper: DVector::zeros(0),
        }
    }

    #[test]
    fn interior_minimum_solves_linear_system() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let g = DVector::from_vec(vec![-1.0, -2.0]);
        let qp = unconstrained(h.clone(), g.clone(), -10.0, 10.0);
        let sol = qp.solve(&QpOptions::default()).unwrap();
        let exact = h.cholesky().unwrap().solve(&(-g));
        assert!((sol.x - exact).amax() < 1e-10);
    }

    #[test]
    fn box_clips_one_coordinate() {
        // min (x-2)^2 + (y+1)^2 on [0,1]^2 -> (1, 0)
        let h = DMatrix::from_diagonal_element(2, 2, 2.0);
        let g = DVector::from_vec(vec![-4.0, 2.0]);
        let qp = unconstrained(h, g, 0.0, 1.0);
        let sol = qp.solve(&QpOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-12);
        assert!(sol.x[1].abs() < 1e-12);
    }

    #[test]
    fn linear_row_binds_with_signed_multiplier() {
        // min x^2 + y^2 s.t. x + y >= 2 -> (1,1), multiplier -2 on the lower side
        let h = DMatrix::from_diagonal_element(2, 2, 2.0);
        let qp = BoxQp {
            hessian: h,
            linear: DVector::zeros(2),
            lower: DVector::from_element(2, -5.0),
            upper: DVector::from_element(2, 5.0),
            rows: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            row_lower: DVector::from_element(1, 2.0),
            row_upper: DVector::from_element(1, f64::INFINITY),
        };
        let sol = qp.solve(&QpOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-9 && (sol.x[1] - 1.0).abs() < 1e-9);
        assert!((sol.multipliers[0] + 2.0).abs() < 1e-7);
        assert!(sol.max_violation <= 1e-10);
    }

    #[test]
    fn infeasible_rows_are_reported() {
        let qp = BoxQp {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::zeros(2),
            lower: DVector::zeros(2),
            upper: DVector::from_element(2, 1.0),
            rows: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]),
            row_lower: DVector::from_vec(vec![0.0, 3.0]),
            row_upper: DVector::from_vec(vec![1.0, f64::INFINITY]),
        };
        match qp.solve(&QpOptions::default()) {
            Err(QpError::Infeasible { row, violation }) => {
                assert_eq!(row, 1);
                assert!((violation - 1.0).abs() < 1e-6);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn ill_conditioned_diagonal() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![1e-4, 1.0, 1e3]));
        let g = DVector::from_vec(vec![-1e-4, -1.0, -1e3]);
        let qp = unconstrained(h, g, -2.0, 2.0);
        let sol = qp.solve(&QpOptions::default()).unwrap();
        for i in 0..3 {
            assert!((sol.x[i] - 1.0).abs() < 1e-8, "{}", sol.x);
        }
    }

    #[test]
    fn singular_hessian_still_converges() {
        // Two variables acting only through their sum.
        let h = DMatrix::from_element(2, 2, 2.0);
        let g = DVector::from_vec(vec![-2.0, -2.0]);
        let qp = unconstrained(h, g, -1.0, 3.0);
        let sol = qp.solve(&QpOptions::default()).unwrap();
        assert!((sol.x[0] + sol.x[1] - 1.0).abs() < 1e-9);
    }
}
