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
fn probe_one_warm() {
    let net = load_case(&data("case33.json"), &data("profiles.csv")).unwrap();
    let set = synth_generate(8, 7, &SynthParams::default()).unwrap();
    let scheme = CapacityScheme::new(vec![5.0, 4.0, 3.0]);
    let typical = set.typical().unwrap();
    let qp_ty = build_qp(&net, &scheme, &typical).unwrap();
    let prep = Prepared::new(&qp_ty, Settings::default()).unwrap();
    let sol_ty = prep.solve_bounds(&qp_ty.l, &qp_ty.u, None).unwrap();
    let warm = WarmStart {
        x: sol_ty.x.clone(),
        y: sol_ty.y.clone(),
    };
    let k: usize = std::env::var("PROBE_DRAW").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let qp = build_qp(&net, &scheme, &set.scenarios[k]).unwrap();
    let sol = prep.solve_bounds(&qp.l, &qp.u, Some(&warm)).unwrap();
    eprintln!(
        "draw{k}-hi warm: status={} it={} rp={:.2e} rd={:.2e} obj={:.6e} polished={}",
        sol.status, sol.iterations, sol.prim_res, sol.dual_res, sol.objective, sol.polished
    );
}
