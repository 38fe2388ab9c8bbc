//! Shared fixtures for integration tests: a brute-force QP oracle and
//! random problem generators.

use adnplan::qpsolver::sparse::CscMatrix;
use adnplan::qpsolver::QuadProgram;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;

/// Solves a strictly convex QP by enumerating every candidate active set
/// (each constraint inactive, at its lower, or at its upper bound) and
/// checking the KKT conditions of the equality-constrained subproblem.
/// Exponential in m; callers keep n ≤ 10 and size m to match.
/// Returns `None` when no candidate set yields a KKT point, i.e. the
/// problem is infeasible.
pub fn enumeration_solve(qp: &QuadProgram) -> Option<(Vec<f64>, f64)> {
    let n = qp.n();
    let m = qp.m();
    let p = qp.p.to_dense();
    let a = qp.a.to_dense();
    let q = DVector::from_column_slice(&qp.q);

    // Sides available per row: equalities pin to l, one-sided rows only
    // offer their finite bound.
    #[derive(Clone, Copy, PartialEq)]
    enum Side {
        Inactive,
        Low,
        Up,
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut assignment = vec![Side::Inactive; m];

    fn recurse(
        row: usize,
        active_count: usize,
        n: usize,
        m: usize,
        qp: &QuadProgram,
        p: &DMatrix<f64>,
        a: &DMatrix<f64>,
        q: &DVector<f64>,
        assignment: &mut Vec<Side>,
        best: &mut Option<(Vec<f64>, f64)>,
    ) {
        if row == m {
            let active: Vec<(usize, bool)> = assignment
                .iter()
                .enumerate()
                .filter_map(|(i, s)| match s {
                    Side::Inactive => None,
                    Side::Low => Some((i, false)),
                    Side::Up => Some((i, true)),
                })
                .collect();
            let k = active.len();
            let dim = n + k;
            let mut kkt = DMatrix::zeros(dim, dim);
            let mut rhs = DVector::zeros(dim);
            kkt.view_mut((0, 0), (n, n)).copy_from(p);
            for (t, &(i, upper)) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[(j, n + t)] = a[(i, j)];
                    kkt[(n + t, j)] = a[(i, j)];
                }
                rhs[n + t] = if upper { qp.u[i] } else { qp.l[i] };
            }
            for j in 0..n {
                rhs[j] = -q[j];
            }
            let lu = kkt.clone().lu();
            let sol = match lu.solve(&rhs) {
                Some(s) => s,
                None => return,
            };
            // Reject solutions of singular systems.
            let resid = &kkt * &sol - &rhs;
            let scale = 1.0 + rhs.amax();
            if resid.amax() > 1e-8 * scale {
                return;
            }
            let x = sol.rows(0, n).into_owned();
            // Dual feasibility: upper-active rows push down (nu >= 0),
            // lower-active rows push up (nu <= 0), equalities are free.
            for (t, &(i, upper)) in active.iter().enumerate() {
                if qp.l[i] == qp.u[i] {
                    continue;
                }
                let nu = sol[n + t];
                if upper && nu < -1e-9 {
                    return;
                }
                if !upper && nu > 1e-9 {
                    return;
                }
            }
            // Primal feasibility on every row.
            let ax = a * &x;
            for i in 0..m {
                let tol = 1e-7 * (1.0 + qp.l[i].abs().min(qp.u[i].abs()));
                if ax[i] < qp.l[i] - tol || ax[i] > qp.u[i] + tol {
                    return;
                }
            }
            let obj = 0.5 * (x.transpose() * p * &x)[(0, 0)] + q.dot(&x);
            match best {
                Some((_, b)) if *b <= obj => {}
                _ => *best = Some((x.as_slice().to_vec(), obj)),
            }
            return;
        }
        // Cap active-set size at n; larger sets are rank deficient anyway.
        assignment[row] = Side::Inactive;
        recurse(row + 1, active_count, n, m, qp, p, a, q, assignment, best);
        if active_count < n {
            if qp.l[row].is_finite() {
                assignment[row] = Side::Low;
                recurse(row + 1, active_count + 1, n, m, qp, p, a, q, assignment, best);
            }
            if qp.u[row].is_finite() && qp.l[row] != qp.u[row] {
                assignment[row] = Side::Up;
                recurse(row + 1, active_count + 1, n, m, qp, p, a, q, assignment, best);
            }
        }
        assignment[row] = Side::Inactive;
    }

    recurse(0, 0, n, m, qp, &p, &a, &q, &mut assignment, &mut best);
    best
}

/// Largest row count per variable count that keeps the enumeration oracle
/// below roughly 2·10⁵ candidate active sets.
pub fn oracle_max_rows(n: usize) -> usize {
    match n {
        0..=4 => 20,
        5 => 15,
        6 => 12,
        7 => 11,
        _ => 10,
    }
}

/// Random strictly convex QP, feasible by construction (bounds are placed
/// around A x₀ for a random interior point x₀). Roughly a fifth of the rows
/// become equalities and a fifth keep only one side.
pub fn random_feasible_qp(n: usize, m: usize, rng: &mut impl Rng) -> QuadProgram {
    let mut lt = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            lt[(i, j)] = rng.gen::<f64>() - 0.5;
        }
        lt[(i, i)] += 1.0;
    }
    let pd = &lt * lt.transpose();
    let mut p_trips = Vec::new();
    for i in 0..n {
        for j in 0..n {
            p_trips.push((i, j, pd[(i, j)]));
        }
    }
    let p = CscMatrix::from_triplets(n, n, &p_trips);
    let q: Vec<f64> = (0..n).map(|_| 2.0 * (rng.gen::<f64>() - 0.5)).collect();

    let mut a_trips = Vec::new();
    for i in 0..m {
        let mut any = false;
        for j in 0..n {
            if rng.gen::<f64>() < 0.6 {
                a_trips.push((i, j, 2.0 * (rng.gen::<f64>() - 0.5)));
                any = true;
            }
        }
        if !any {
            a_trips.push((i, rng.gen_range(0..n), 1.0 + rng.gen::<f64>()));
        }
    }
    let a = CscMatrix::from_triplets(m, n, &a_trips);

    let x0: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let ax0 = a.mul(&x0);
    let mut l = vec![0.0; m];
    let mut u = vec![0.0; m];
    for i in 0..m {
        let kind = rng.gen::<f64>();
        if kind < 0.2 {
            l[i] = ax0[i];
            u[i] = ax0[i];
        } else if kind < 0.3 {
            l[i] = ax0[i] - rng.gen::<f64>();
            u[i] = f64::INFINITY;
        } else if kind < 0.4 {
            l[i] = f64::NEG_INFINITY;
            u[i] = ax0[i] + rng.gen::<f64>();
        } else {
            l[i] = ax0[i] - 0.05 - rng.gen::<f64>();
            u[i] = ax0[i] + 0.05 + rng.gen::<f64>();
        }
    }
    QuadProgram::new(p, q, a, l, u)
}
