//! Two-variable inequality-constrained QP solved by an active-set method.
//!
//! Problem: minimize `½ dᵀH d + gᵀd` subject to `c_i + a_iᵀd ≤ 0`. Every
//! right-hand side carries four extra columns (sensitivity to the state
//! deviation) so the same equality-constrained solve yields the affine
//! feedback law once the active set is known.

use nalgebra::{Matrix2, SMatrix, Vector2};

pub type Cols = SMatrix<f64, 2, 5>;
pub type RowCols = SMatrix<f64, 1, 5>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpConstraint {
    /// Gradient with respect to the decision variable.
    pub a: Vector2<f64>,
    /// `[c, dc/dx_1, ..., dc/dx_4]`; column 0 is the constraint value.
    pub c: RowCols,
}

impl QpConstraint {
    pub fn value(&self) -> f64 {
        self.c[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    /// Column 0 is the optimal step; columns 1..5 its sensitivity to `δx`.
    pub d: Cols,
    pub active: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub pivots: usize,
    pub enumerated: bool,
}

impl QpSolution {
    pub fn step(&self) -> Vector2<f64> {
        self.d.column(0).into_owned()
    }
}

const RANK_TOL: f64 = 1e-10;

/// Equality-constrained solve with `active` treated as equalities.
/// Returns `None` when the active rows are linearly dependent.
fn solve_eq(
    h_inv: &Matrix2<f64>,
    h: &Matrix2<f64>,
    g: &Cols,
    cons: &[QpConstraint],
    active: &[usize],
) -> Option<(Cols, Vec<f64>)> {
    match active {
        [] => Some((-(h_inv * g), Vec::new())),
        [i] => {
            let a = cons[*i].a;
            let h_inv_a = h_inv * a;
            let s = a.dot(&h_inv_a);
            if s <= RANK_TOL * a.norm_squared().max(1e-300) {
                return None;
            }
            // μ = (c - aᵀH⁻¹g) / (aᵀH⁻¹a), d = -H⁻¹(g + a μ)
            let mu: RowCols = (cons[*i].c - h_inv_a.transpose() * g) / s;
            let d = -(h_inv * (g + a * mu));
            Some((d, vec![mu[0]]))
        }
        [i, j] => {
            let (a1, a2) = (cons[*i].a, cons[*j].a);
            let m = Matrix2::new(a1[0], a1[1], a2[0], a2[1]);
            let det = m.determinant();
            if det.abs() <= RANK_TOL * a1.norm() * a2.norm() {
                return None;
            }
            let m_inv = m.try_inverse()?;
            let mut rhs = Cols::zeros();
            rhs.set_row(0, &cons[*i].c);
            rhs.set_row(1, &cons[*j].c);
            let d = -(m_inv * rhs);
            // Stationarity: H d + g + Aᵀμ = 0, only the constant column matters.
            let r = h * d.column(0) + g.column(0);
            let mu = -(m_inv.transpose() * r);
            Some((d, vec![mu[0], mu[1]]))
        }
        _ => None,
    }
}

fn violation(c: &QpConstraint, d: &Vector2<f64>) -> f64 {
    c.value() + c.a.dot(d)
}

fn objective(h: &Matrix2<f64>, g: &Vector2<f64>, d: &Vector2<f64>) -> f64 {
    0.5 * d.dot(&(h * d)) + g.dot(d)
}

/// Solves the stage QP. `h` must be positive definite. `warm` is the active set
/// from the previous iteration at this stage. Returns `None` if the linearized
/// constraints are mutually infeasible.
pub fn solve(
    h: &Matrix2<f64>,
    g: &Cols,
    cons: &[QpConstraint],
    warm: &[usize],
    max_pivots: usize,
    tol: f64,
) -> Option<QpSolution> {
    let h_inv = h.try_inverse()?;
    let mut active: Vec<usize> = Vec::with_capacity(2);
    for &i in warm {
        if i < cons.len() && active.len() < 2 && !active.contains(&i) {
            active.push(i);
            if solve_eq(&h_inv, h, g, cons, &active).is_none() {
                active.pop();
            }
        }
    }

    for pivot in 0..max_pivots {
        let Some((d, mu)) = solve_eq(&h_inv, h, g, cons, &active) else {
            break;
        };
        if let Some((pos, &m)) = mu.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
            if m < -tol {
                active.remove(pos);
                continue;
            }
        }
        let step = d.column(0).into_owned();
        let worst = (0..cons.len())
            .filter(|i| !active.contains(i))
            .map(|i| (i, violation(&cons[i], &step)))
            .filter(|&(_, v)| v > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            None => {
                return Some(QpSolution {
                    d,
                    active,
                    multipliers: mu,
                    pivots: pivot,
                    enumerated: false,
                })
            }
            Some((i, _)) if active.len() < 2 => active.push(i),
            Some(_) => break,
        }
    }
    enumerate(&h_inv, h, g, cons, tol, max_pivots)
}

/// Tries every active set of size at most two and keeps the best point that
/// satisfies the KKT conditions.
fn enumerate(
    h_inv: &Matrix2<f64>,
    h: &Matrix2<f64>,
    g: &Cols,
    cons: &[QpConstraint],
    tol: f64,
    pivots: usize,
) -> Option<QpSolution> {
    let n = cons.len();
    let mut sets: Vec<Vec<usize>> = vec![Vec::new()];
    sets.extend((0..n).map(|i| vec![i]));
    for i in 0..n {
        for j in i + 1..n {
            sets.push(vec![i, j]);
        }
    }
    let g0 = g.column(0).into_owned();
    let mut best: Option<(f64, QpSolution)> = None;
    for set in sets {
        let Some((d, mu)) = solve_eq(h_inv, h, g, cons, &set) else {
            continue;
        };
        let step = d.column(0).into_owned();
        let primal = cons.iter().all(|c| violation(c, &step) <= tol * (1.0 + c.value().abs()));
        if !primal || mu.iter().any(|&m| m < -tol) {
            continue;
        }
        let f = objective(h, &g0, &step);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((
                f,
                QpSolution {
                    d,
                    active: set,
                    multipliers: mu,
                    pivots,
                    enumerated: true,
                },
            ));
        }
    }
    best.map(|(_, s)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cons(a: (f64, f64), c: f64) -> QpConstraint {
        let mut row = RowCols::zeros();
        row[0] = c;
        QpConstraint {
            a: Vector2::new(a.0, a.1),
            c: row,
        }
    }

    fn g(v: (f64, f64)) -> Cols {
        let mut m = Cols::zeros();
        m[(0, 0)] = v.0;
        m[(1, 0)] = v.1;
        m
    }

    #[test]
    fn unconstrained() {
        let h = Matrix2::new(2.0, 0.0, 0.0, 4.0);
        let s = solve(&h, &g((-2.0, 4.0)), &[], &[], 10, 1e-12).unwrap();
        assert_abs_diff_eq!(s.step()[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.step()[1], -1.0, epsilon = 1e-14);
    }

    #[test]
    fn single_active_upper_bound() {
        // d0 ≤ 0.5 while the unconstrained optimum is d0 = 1.
        let h = Matrix2::new(2.0, 0.0, 0.0, 1.0);
        let gv = (-2.0, 0.0);
        let s = solve(&h, &g(gv), &[cons((1.0, 0.0), -0.5)], &[], 10, 1e-12).unwrap();
        assert_abs_diff_eq!(s.step()[0], 0.5, epsilon = 1e-14);
        assert_eq!(s.active, vec![0]);
        // Hand KKT: 2·0.5 - 2 + μ = 0.
        assert_abs_diff_eq!(s.multipliers[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn vertex_and_warm_start_drop() {
        let h = Matrix2::identity();
        let c = [cons((1.0, 0.0), -1.0), cons((0.0, 1.0), -1.0), cons((-1.0, 0.0), -5.0)];
        let s = solve(&h, &g((-3.0, -3.0)), &c, &[], 10, 1e-12).unwrap();
        assert_abs_diff_eq!(s.step()[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(s.step()[1], 1.0, epsilon = 1e-14);
        assert!(s.multipliers.iter().all(|&m| m > 0.0));
        // A stale warm set containing the inactive lower bound is dropped.
        let s = solve(&h, &g((-0.5, -0.5)), &c, &[2, 0], 10, 1e-12).unwrap();
        assert!(s.active.is_empty());
        assert_abs_diff_eq!(s.step()[0], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn infeasible_returns_none() {
        let h = Matrix2::identity();
        let c = [cons((1.0, 0.0), 1.0), cons((-1.0, 0.0), 1.0)];
        assert!(solve(&h, &g((0.0, 0.0)), &c, &[], 10, 1e-12).is_none());
    }

    #[test]
    fn feedback_columns_match_perturbed_solve() {
        let h = Matrix2::new(3.0, 0.5, 0.5, 2.0);
        let mut gm = g((-1.0, 2.0));
        gm[(0, 1)] = 0.7;
        gm[(1, 3)] = -0.4;
        let mut c0 = cons((1.0, 1.0), 1.0);
        c0.c[2] = 0.3;
        let base = solve(&h, &gm, &[c0], &[], 10, 1e-12).unwrap();
        assert_eq!(base.active, vec![0]);
        // Shift δx along axis 1 and re-solve the constant problem.
        let dx = 1e-3;
        let mut gp = g((gm[(0, 0)] + gm[(0, 2)] * dx, gm[(1, 0)] + gm[(1, 2)] * dx));
        gp[(0, 0)] = gm[(0, 0)] + gm[(0, 2)] * dx;
        let mut cp = c0;
        cp.c = RowCols::zeros();
        cp.c[0] = c0.c[0] + c0.c[2] * dx;
        let moved = solve(&h, &gp, &[cp], &[], 10, 1e-12).unwrap();
        let predicted = base.step() + base.d.column(2) * dx;
        assert_abs_diff_eq!((moved.step() - predicted).norm(), 0.0, epsilon = 1e-12);
    }
}
