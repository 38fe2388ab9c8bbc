//! Temporary probe, not part of the suite.

use std::path::Path;

use adnplan::netmodel::{load_case, CapacityScheme};
use adnplan::opsim::build_qp;
use adnplan::qpsolver::{Prepared, Settings, WarmStart};
use adnplan::scenario::{synth_generate, SynthParams};

fn data(file: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(file)
}

#[test]
#[ignore]
fn probe_warm_hi_corner() {
    let net = load_case(&data("case33.json"), &data("profiles.csv")).unwrap();
    let set = synth_generate(8, 7, &SynthParams::default()).unwrap();
    let scheme = CapacityScheme::new(vec![5.0, 4.0, 3.0]);
    let typical = set.typical().unwrap();
    let qp_ty = build_qp(&net, &scheme, &typical).unwrap();

    for eps_dual in [1e-6, 1e-3] {
        let s = Settings {
            eps_dual,
            ..Settings::default()
        };
        let prep = Prepared::new(&qp_ty, s).unwrap();
        let sol_ty = prep.solve_bounds(&qp_ty.l, &qp_ty.u, None).unwrap();
        eprintln!(
            "eps_dual={eps_dual:.0e} typical: status={} it={} rp={:.2e} rd={:.2e} polished={}",
            sol_ty.status, sol_ty.iterations, sol_ty.prim_res, sol_ty.dual_res, sol_ty.polished
        );
        let warm = sol_ty.status.is_optimal().then(|| WarmStart {
            x: sol_ty.x.clone(),
            y: sol_ty.y.clone(),
        });
        for k in 0..8 {
            let qp = build_qp(&net, &scheme, &set.scenarios[k]).unwrap();
            let sol = prep.solve_bounds(&qp.l, &qp.u, warm.as_ref()).unwrap();
            eprintln!(
                "eps_dual={eps_dual:.0e} draw{k}-hi warm: status={} it={} rp={:.2e} rd={:.2e} obj={:.6e} polished={}",
                sol.status, sol.iterations, sol.prim_res, sol.dual_res, sol.objective, sol.polished
            );
        }
    }
}
