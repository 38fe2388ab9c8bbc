//! Capacity planning of distributed energy resources in an active
//! distribution network (ADN).
//!
//! The crate couples a QP-based daily operation simulator with a
//! Gaussian-process surrogate and a noise-aware Expected-Improvement
//! acquisition to find the annual-cost-minimizing allocation of energy
//! storage, wind, and PV capacities. Observation noise arises from the
//! renewable availability scenario drawn for each simulation.
//!
//! Modules mirror the pipeline:
//!
//! * [`netmodel`] — typed network data (buses, branches, devices, slots).
//! * [`scenario`] — renewable availability profiles and the noise-std blend.
//! * [`qpsolver`] — sparse ADMM solver for the dispatch QPs.
//! * [`opsim`] — builds and solves the daily operation QP, returns costs.
//! * [`gp`] — Gaussian-process regression with Matérn kernels.
//! * [`acquisition`] — EI / noisy EI and its box-constrained maximization.
//! * [`nbo`] — the full optimize-observe-update driver.
//! * [`bench`] — experiment harness (PSO baseline, sweeps, reports).

pub mod acquisition;
pub mod bench;
pub mod gp;
pub mod netmodel;
pub mod nbo;
pub mod opsim;
pub mod par;
pub mod qpsolver;
pub mod sampling;
pub mod scenario;
