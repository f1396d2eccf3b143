//! Dense strictly convex quadratic programming by the Goldfarb-Idnani dual
//! active-set method:
//!
//! ```text
//!     minimize     1/2 x' G x + a' x
//!     subject to   C x >= b
//! ```
//!
//! `G` must be positive definite. The solver starts at the unconstrained
//! minimum and adds violated constraints one at a time, updating the
//! factorizations with Givens rotations, so each iteration costs O(n^2 + mn).

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    /// The constraint set is inconsistent (dual became unbounded).
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Lagrange multiplier per constraint row (zero for inactive rows).
    pub duals: DVector<f64>,
    pub active: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
}

const DEPENDENT_TOL: f64 = 1e-11;
const DUAL_TOL: f64 = 1e-12;

/// Solve the QP. `c` holds one constraint normal per row.
pub fn solve(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<QpSolution> {
    let n = g.nrows();
    let m = c.nrows();
    if g.ncols() != n || a.len() != n || (m > 0 && c.ncols() != n) || b.len() != m {
        return Err(Error::InvalidInput(format!(
            "inconsistent QP dimensions (n={n}, m={m})"
        )));
    }

    // Cholesky of G with escalating jitter for near-semidefinite inputs.
    let mut jitter = 0.0;
    let chol = loop {
        let mut gj = g.clone();
        if jitter > 0.0 {
            for i in 0..n {
                gj[(i, i)] += jitter;
            }
        }
        match nalgebra::Cholesky::new(gj) {
            Some(c) => break c,
            None if jitter < 1e-6 => {
                jitter = if jitter == 0.0 { 1e-12 } else { jitter * 100.0 };
            }
            None => {
                return Err(Error::InvalidInput(
                    "QP Hessian is not positive definite".to_string(),
                ))
            }
        }
    };

    // Unconstrained minimum and the inverse transpose factor J = L^-T.
    let mut x = -chol.solve(a);
    let mut j_mat = DMatrix::<f64>::identity(n, n);
    chol.l_dirty().solve_lower_triangular_unchecked_mut(&mut j_mat);
    let mut j_mat = j_mat.transpose(); // rows of L^-1 become columns of J

    let mut r_mat = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut active_mask = vec![false; m];
    let mut u: Vec<f64> = Vec::new();

    let max_iter = (10 * (m + n) + 10).min(150);
    let mut iterations = 0;

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            let duals = pack_duals(&active, &u, m);
            return Ok(QpSolution {
                x,
                duals,
                active,
                status: QpStatus::IterationLimit,
                iterations,
            });
        }

        // Most violated inactive constraint.
        let cx = c * &x;
        let mut worst = 0.0;
        let mut p = usize::MAX;
        for i in 0..m {
            if active_mask[i] {
                continue;
            }
            let s = cx[i] - b[i];
            if s < worst - 1e-14 {
                worst = s;
                p = i;
            }
        }
        if p == usize::MAX || worst >= -1e-10 {
            // All constraints satisfied: optimal.
            let duals = pack_duals(&active, &u, m);
            return Ok(QpSolution {
                x,
                duals,
                active,
                status: QpStatus::Optimal,
                iterations,
            });
        }

        let n_p: DVector<f64> = c.row(p).transpose();
        let mut s_p = worst;
        let mut u_p = 0.0;

        // Step-determination loop for constraint p.
        loop {
            let q = active.len();
            let d = j_mat.tr_mul(&n_p);
            // Primal step direction from the null-space part of d.
            let mut z = DVector::zeros(n);
            for k in q..n {
                z.axpy(d[k], &j_mat.column(k).into_owned(), 1.0);
            }
            // Dual step direction r = R^-1 d1 (back substitution).
            let mut r_dir = vec![0.0; q];
            for i in (0..q).rev() {
                let mut v = d[i];
                for k in i + 1..q {
                    v -= r_mat[(i, k)] * r_dir[k];
                }
                r_dir[i] = v / r_mat[(i, i)];
            }

            // Partial step: smallest dual ratio among active constraints.
            let mut t1 = f64::INFINITY;
            let mut drop_idx = usize::MAX;
            for (idx, &rv) in r_dir.iter().enumerate() {
                if rv > DUAL_TOL {
                    let ratio = u[idx] / rv;
                    if ratio < t1 {
                        t1 = ratio;
                        drop_idx = idx;
                    }
                }
            }

            let z_norm2 = z.norm_squared();
            let full_possible = z_norm2 > DEPENDENT_TOL * DEPENDENT_TOL;
            let t2 = if full_possible {
                -s_p / z.dot(&n_p)
            } else {
                f64::INFINITY
            };

            let t = t1.min(t2);
            if !t.is_finite() {
                // No step restores feasibility: the QP is infeasible.
                let duals = pack_duals(&active, &u, m);
                return Ok(QpSolution {
                    x,
                    duals,
                    active,
                    status: QpStatus::Infeasible,
                    iterations,
                });
            }

            // Dual update.
            for (idx, rv) in r_dir.iter().enumerate() {
                u[idx] -= t * rv;
            }
            u_p += t;

            if full_possible && t == t2 {
                // Full step: x reaches the constraint surface; add p.
                x.axpy(t, &z, 1.0);
                add_constraint(&mut j_mat, &mut r_mat, &d, q);
                active.push(p);
                active_mask[p] = true;
                u.push(u_p);
                continue 'outer;
            }

            // Partial (or pure dual) step: drop the blocking constraint.
            if full_possible {
                x.axpy(t, &z, 1.0);
                s_p = n_p.dot(&x) - b[p];
            }
            active_mask[active[drop_idx]] = false;
            remove_constraint(&mut j_mat, &mut r_mat, &mut active, &mut u, drop_idx);
            iterations += 1;
            if iterations > max_iter {
                let duals = pack_duals(&active, &u, m);
                return Ok(QpSolution {
                    x,
                    duals,
                    active,
                    status: QpStatus::IterationLimit,
                    iterations,
                });
            }
        }
    }
}

fn pack_duals(active: &[usize], u: &[f64], m: usize) -> DVector<f64> {
    let mut out = DVector::zeros(m);
    for (idx, &ci) in active.iter().enumerate() {
        out[ci] = u[idx];
    }
    out
}

/// Append the constraint whose transformed normal is `d` as active column
/// `q`: Givens rotations zero `d[q+1..]`, applied to J's columns as well.
fn add_constraint(j_mat: &mut DMatrix<f64>, r_mat: &mut DMatrix<f64>, d: &DVector<f64>, q: usize) {
    let n = j_mat.nrows();
    let mut d = d.clone();
    for k in (q + 1..n).rev() {
        let (a, b) = (d[k - 1], d[k]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (cs, sn) = (a / h, b / h);
        d[k - 1] = h;
        d[k] = 0.0;
        // Rotate columns k-1 and k of J.
        for row in 0..n {
            let (x1, x2) = (j_mat[(row, k - 1)], j_mat[(row, k)]);
            j_mat[(row, k - 1)] = cs * x1 + sn * x2;
            j_mat[(row, k)] = -sn * x1 + cs * x2;
        }
    }
    for i in 0..=q {
        r_mat[(i, q)] = d[i];
    }
}

/// Remove active constraint `drop_idx`, restoring R to triangular form.
fn remove_constraint(
    j_mat: &mut DMatrix<f64>,
    r_mat: &mut DMatrix<f64>,
    active: &mut Vec<usize>,
    u: &mut Vec<f64>,
    drop_idx: usize,
) {
    let n = j_mat.nrows();
    let q = active.len();
    active.remove(drop_idx);
    u.remove(drop_idx);

    // Shift columns of R left over the removed one.
    for col in drop_idx..q - 1 {
        for row in 0..q {
            r_mat[(row, col)] = r_mat[(row, col + 1)];
        }
    }
    for row in 0..q {
        r_mat[(row, q - 1)] = 0.0;
    }

    // R is now upper Hessenberg on columns drop_idx..q-1; rotate the
    // subdiagonal away, mirroring each rotation on J's columns.
    for k in drop_idx..q - 1 {
        let (a, b) = (r_mat[(k, k)], r_mat[(k + 1, k)]);
        if b == 0.0 {
            continue;
        }
        let h = a.hypot(b);
        let (cs, sn) = (a / h, b / h);
        for col in k..q - 1 {
            let (x1, x2) = (r_mat[(k, col)], r_mat[(k + 1, col)]);
            r_mat[(k, col)] = cs * x1 + sn * x2;
            r_mat[(k + 1, col)] = -sn * x1 + cs * x2;
        }
        for row in 0..n {
            let (x1, x2) = (j_mat[(row, k)], j_mat[(row, k + 1)]);
            j_mat[(row, k)] = cs * x1 + sn * x2;
            j_mat[(row, k + 1)] = -sn * x1 + cs * x2;
        }
    }
}
