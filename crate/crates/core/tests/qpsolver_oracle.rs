//! Cross-checks the ADMM solver against an exhaustive active-set oracle on
//! random dense problems small enough to enumerate.

mod support;

use adnplan::qpsolver::{kkt_residuals, solve, Settings};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use support::{enumeration_solve, oracle_max_rows, random_feasible_qp};

#[test]
fn solver_matches_enumeration_on_random_qps() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for trial in 0..10 {
        let n = 2 + trial % 9;
        let m = rng.gen_range(2..=oracle_max_rows(n));
        let qp = random_feasible_qp(n, m, &mut rng);
        let oracle = enumeration_solve(&qp).expect("feasible by construction");
        let sol = solve(&qp, &Settings::default()).unwrap();
        assert!(
            sol.status.is_optimal(),
            "trial {trial} (n={n}, m={m}): status {:?}",
            sol.status
        );
        let scale = 1.0 + oracle.1.abs();
        assert!(
            (sol.objective - oracle.1).abs() <= 1e-6 * scale,
            "trial {trial}: objective {} vs oracle {}",
            sol.objective,
            oracle.1
        );
        for j in 0..n {
            assert!(
                (sol.x[j] - oracle.0[j]).abs() <= 1e-5 * (1.0 + oracle.0[j].abs()),
                "trial {trial}: x[{j}] = {} vs oracle {}",
                sol.x[j],
                oracle.0[j]
            );
        }
    }
}

#[test]
fn reported_residuals_match_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..5 {
        let qp = random_feasible_qp(5, 8, &mut rng);
        let sol = solve(&qp, &Settings::default()).unwrap();
        assert!(sol.status.is_optimal());
        let (rp, rd) = kkt_residuals(&qp, &sol.x, &sol.y);
        assert!(rp <= 1e-6, "prim {rp}");
        assert!(rd <= 1e-6, "dual {rd}");
        // The solution's own report may not exceed what we recompute.
        assert!(rp <= sol.prim_res + 1e-12);
    }
}

#[test]
fn row_scaling_leaves_solution_unchanged() {
    // Scaling constraint rows and their bounds by positive factors is a
    // reparameterization; the primal solution must not move.
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let qp = random_feasible_qp(6, 9, &mut rng);
    let base = solve(&qp, &Settings::default()).unwrap();
    let mut scaled = qp.clone();
    let factors: Vec<f64> = (0..qp.m()).map(|i| 0.05 + 3.0 * ((i % 4) as f64)).collect();
    let mut trips = Vec::new();
    for j in 0..qp.a.ncols {
        for (i, v) in qp.a.col(j) {
            trips.push((i, j, v * factors[i].max(0.05)));
        }
    }
    scaled.a = adnplan::qpsolver::sparse::CscMatrix::from_triplets(qp.m(), qp.n(), &trips);
    for i in 0..qp.m() {
        let f = factors[i].max(0.05);
        scaled.l[i] = qp.l[i] * f;
        scaled.u[i] = qp.u[i] * f;
    }
    let re = solve(&scaled, &Settings::default()).unwrap();
    assert!(re.status.is_optimal());
    for j in 0..qp.n() {
        assert!(
            (re.x[j] - base.x[j]).abs() < 1e-5 * (1.0 + base.x[j].abs()),
            "x[{j}]: {} vs {}",
            re.x[j],
            base.x[j]
        );
    }
}
