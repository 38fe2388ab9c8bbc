//! Regression checks on the bundled 33-bus case: structure, feasibility
//! envelope, and the dispatch behaviors the planning experiments rely on.

use std::path::Path;
use std::time::Instant;

use adnplan::netmodel::{load_case, AssetKind, CapacityScheme, Network};
use adnplan::opsim::Simulator;
use adnplan::scenario::{synth_generate, ResScenario, SynthParams};

fn data(file: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(file)
}

fn case33() -> Network {
    load_case(&data("case33.json"), &data("profiles.csv")).expect("bundled case loads")
}

fn flat(pv: f64, wind: f64) -> ResScenario {
    ResScenario {
        id: 0,
        pv_pu: vec![pv; 24],
        wind_pu: vec![wind; 24],
    }
}

/// Box-minimum scheme: slot order is ess, wind, pv after network build.
fn scheme_min(net: &Network) -> CapacityScheme {
    CapacityScheme::new(net.asset_slots.iter().map(|s| s.cap_min).collect())
}

#[test]
fn structure_and_validation() {
    let net = case33();
    assert_eq!(net.buses.len(), 33);
    assert_eq!(net.branches.len(), 32);
    assert_eq!(net.generators.len(), 2);
    assert_eq!(net.dr_resources.len(), 32);
    assert_eq!(net.asset_slots.len(), 3);
    assert_eq!(net.asset_slots[0].kind, AssetKind::Ess);
    assert_eq!(net.asset_slots[1].kind, AssetKind::Wind);
    assert_eq!(net.asset_slots[2].kind, AssetKind::Pv);
    assert!(net.validate().is_empty());
    let peak: f64 = net.buses.iter().map(|b| b.load_p[19]).sum();
    assert!((peak - 3.715).abs() < 1e-9, "peak load {peak}");
}

#[test]
fn calm_peak_feasible_on_smallest_scheme() {
    // No wind, no sun, smallest capacities: storage alone must bridge the
    // evening peak, and voltages must hold without renewable support.
    let net = case33();
    let sim = Simulator::new(&net).unwrap();
    let start = Instant::now();
    let (res, rep) = sim.evaluate(&scheme_min(&net), &flat(0.0, 0.0)).unwrap();
    eprintln!("calm-peak solve took {:?}", start.elapsed());
    assert!(res.feasible, "reason: {:?}", res.infeasible_reason);
    let v_min = res
        .voltages
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let v_max = res
        .voltages
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(v_min >= 0.95 - 1e-6, "min voltage {v_min}");
    assert!(v_max <= 1.05 + 1e-6, "max voltage {v_max}");
    // Storage must discharge into the peak hour.
    let ess = res.dispatch.iter().find(|d| d.device == "slot0").unwrap();
    assert!(ess.p[19] > 1e-4, "peak discharge {}", ess.p[19]);
    assert!(rep.c_total_observed.is_finite());
    assert!(res.simultaneous_charge.is_empty());
}

#[test]
fn pv_without_storage_cannot_cover_the_evening_peak() {
    let mut net = case33();
    net.asset_slots.retain(|s| s.kind == AssetKind::Pv);
    let sim = Simulator::new(&net).unwrap();
    // Even the largest PV build is dark at the peak hour.
    let (res, rep) = sim
        .evaluate(&CapacityScheme::new(vec![3.0]), &flat(0.8, 0.0))
        .unwrap();
    assert!(!res.feasible);
    assert!(rep.c_total_observed.is_infinite());
}

#[test]
fn wind_export_reverses_and_congests_its_feeder() {
    let net = case33();
    let sim = Simulator::new(&net).unwrap();
    let scheme = CapacityScheme::new(vec![1.0, 4.0, 2.0]);
    let (res, _) = sim.evaluate(&scheme, &flat(0.0, 0.9)).unwrap();
    assert!(res.feasible, "reason: {:?}", res.infeasible_reason);
    // Branch 17→18 feeds the wind bus; steady 3.6 MW of wind against a
    // 0.09 MW local load must push flow against the branch orientation,
    // up to the 2.5 MW export limit.
    let idx = net
        .branches
        .iter()
        .position(|b| b.from_bus == 17 && b.to_bus == 18)
        .unwrap();
    let most_negative = res.flows_p[idx].iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(most_negative < -1.0, "flow {most_negative}");
    assert!(most_negative >= -2.5 - 1e-5, "limit violated: {most_negative}");
    for t in 0..24 {
        let v = res.voltages.iter().map(|col| col[t]).fold(f64::NEG_INFINITY, f64::max);
        assert!(v <= 1.05 + 1e-6, "hour {t} overvoltage {v}");
    }
}

#[test]
fn random_scenarios_feasible_across_the_box() {
    let net = case33();
    let sim = Simulator::new(&net).unwrap();
    let set = synth_generate(64, 7, &SynthParams::default()).unwrap();
    let (lo, hi) = net.decision_box().unwrap();
    // Corners plus the centre: feasibility must hold across the whole box.
    let schemes = [
        lo.clone(),
        hi.clone(),
        vec![lo[0], hi[1], lo[2]],
        vec![hi[0], lo[1], hi[2]],
        lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect(),
    ];
    let start = Instant::now();
    for values in schemes {
        let scheme = CapacityScheme::new(values.clone());
        let eval = sim.evaluate_mean(&scheme, &set, 12, 11).unwrap();
        assert!(eval.mean.is_finite(), "scheme {values:?}");
    }
    eprintln!("60 scenario dispatches took {:?}", start.elapsed());
}
