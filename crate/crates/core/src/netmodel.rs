//! Typed network data: topology, devices, limits, cost parameters, and the
//! capacity-allocation decision vector. Everything is immutable after
//! loading and safe to share across evaluation workers.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    /// Per-unit voltage bounds.
    pub v_min: f64,
    pub v_max: f64,
    /// Hourly demand, MW / MVAr, length T.
    pub load_p: Vec<f64>,
    pub load_q: Vec<f64>,
    #[serde(default)]
    pub attached_device_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    /// Per-unit impedance on the network MVA base.
    pub r: f64,
    pub x: f64,
    /// Flow limits, MW / MVAr, applied in both directions.
    pub p_max: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DieselGenerator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// MVA rating of the capability circle.
    pub s_rating: f64,
    /// Quadratic fuel cost a·P² + b·P + c, in $/MW²h, $/MWh, $/h.
    pub cost_a: f64,
    pub cost_b: f64,
    pub cost_c: f64,
    /// Half-planes p_k·P + q_k·Q ≤ r_k·S approximating the circle.
    #[serde(default = "default_pw_factors")]
    pub pw_factors: Vec<(f64, f64, f64)>,
}

/// Eight tangent half-planes at 45° increments; (p_k, q_k) unit-norm, r_k=1.
pub fn default_pw_factors() -> Vec<(f64, f64, f64)> {
    (0..8)
        .map(|k| {
            let th = std::f64::consts::FRAC_PI_4 * k as f64;
            // Snap near-zero components so axis-aligned cuts are exact.
            let c = if th.cos().abs() < 1e-12 { 0.0 } else { th.cos() };
            let s = if th.sin().abs() < 1e-12 { 0.0 } else { th.sin() };
            (c, s, 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandResponse {
    pub bus: usize,
    /// Dispatchable load reduction cap per hour, MW, length T.
    pub p_max_dr: Vec<f64>,
    /// Price paid per curtailed MWh, length T.
    pub price: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssParams {
    /// Self-discharge fraction per step.
    pub eta: f64,
    /// Charge/discharge efficiency.
    pub lambda_eff: f64,
    pub soc_min_frac: f64,
    pub soc_max_frac: f64,
    /// Rated power = capacity / c_rate_hours.
    pub c_rate_hours: f64,
    /// Throughput maintenance cost, $/MWh.
    pub maint_cost: f64,
}

impl Default for EssParams {
    fn default() -> Self {
        Self {
            eta: 0.001,
            lambda_eff: 0.95,
            soc_min_frac: 0.1,
            soc_max_frac: 0.9,
            c_rate_hours: 4.0,
            maint_cost: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetKind {
    Ess,
    Wind,
    Pv,
}

impl std::fmt::Display for AssetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AssetKind::Ess => "ess",
            AssetKind::Wind => "wind",
            AssetKind::Pv => "pv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSlot {
    pub bus: usize,
    pub kind: AssetKind,
    /// Decision box bounds: MWh for ESS, MW for wind/PV.
    pub cap_min: f64,
    pub cap_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// $/MWh for ESS, $/MW for wind and PV.
    pub unit_cost_ess: f64,
    pub unit_cost_w: f64,
    pub unit_cost_pv: f64,
    /// Years.
    pub lifetime_ess: f64,
    pub lifetime_w: f64,
    pub lifetime_pv: f64,
    pub discount_rate: f64,
    /// Curtailment penalty, $/MWh.
    pub curtail_penalty: f64,
    /// Dispatch cycles per year (T_d).
    pub dispatch_cycles: f64,
    /// Steps per cycle (T).
    pub steps_per_cycle: usize,
    /// Hours per step.
    pub step_hours: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            unit_cost_ess: 1.25e5,
            unit_cost_w: 1.5e6,
            unit_cost_pv: 5.0e5,
            lifetime_ess: 25.0,
            lifetime_w: 25.0,
            lifetime_pv: 25.0,
            discount_rate: 0.05,
            curtail_penalty: 50.0,
            dispatch_cycles: 365.0,
            steps_per_cycle: 24,
            step_hours: 1.0,
        }
    }
}

/// Optional import/export device at the reference bus. Absent by default:
/// an islanded network is what makes undersized schemes infeasible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridExchange {
    /// $/MWh paid for imported energy.
    pub price: f64,
    pub p_max: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<DieselGenerator>,
    pub dr_resources: Vec<DemandResponse>,
    pub asset_slots: Vec<AssetSlot>,
    pub ess_params: EssParams,
    pub cost_params: CostParams,
    /// Bus with fixed angle 0 and voltage 1 p.u.
    pub reference_bus: usize,
    /// MVA base the per-unit impedances refer to.
    pub s_base_mva: f64,
    #[serde(default)]
    pub allow_meshed: bool,
    #[serde(default)]
    pub grid_exchange: Option<GridExchange>,
}

/// Decision vector, one value per asset slot in network slot order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityScheme {
    pub values: Vec<f64>,
}

impl CapacityScheme {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("profile column `{0}` missing")]
    MissingProfile(String),
    #[error("network failed validation:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Violation>),
    #[error("no asset slots: nothing to plan")]
    NoSlots,
}

impl Network {
    pub fn t(&self) -> usize {
        self.cost_params.steps_per_cycle
    }

    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// All invariant violations, empty iff the network is well-formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |entity: String, rule: String| out.push(Violation { entity, rule });
        let t = self.t();

        let mut seen = HashSet::new();
        for b in &self.buses {
            let name = format!("Bus {}", b.id);
            if !seen.insert(b.id) {
                push(name.clone(), "duplicate id".into());
            }
            if !(b.v_min > 0.0 && b.v_min < b.v_max) {
                push(name.clone(), "voltage bounds must satisfy 0 < v_min < v_max".into());
            }
            if b.load_p.len() != t || b.load_q.len() != t {
                push(name.clone(), format!("load arrays must have length T={t}"));
            }
            if b.load_p.iter().any(|&v| v < 0.0) {
                push(name.clone(), "active load must be non-negative".into());
            }
        }
        let ids: HashSet<usize> = self.buses.iter().map(|b| b.id).collect();

        for br in &self.branches {
            let name = format!("Branch {}-{}", br.from_bus, br.to_bus);
            if br.r < 0.0 {
                push(name.clone(), "resistance must be >= 0".into());
            }
            if br.x <= 0.0 {
                push(name.clone(), "reactance must be > 0".into());
            }
            if br.p_max <= 0.0 || br.q_max <= 0.0 {
                push(name.clone(), "flow limits must be > 0".into());
            }
            if !ids.contains(&br.from_bus) || !ids.contains(&br.to_bus) {
                push(name.clone(), "endpoints must reference existing buses".into());
            }
        }

        if !self.allow_meshed && !self.buses.is_empty() {
            // Connected tree: exactly n-1 branches and every bus reachable.
            if self.branches.len() + 1 != self.buses.len() {
                push(
                    "Network".into(),
                    format!(
                        "graph must be radial: {} buses need {} branches, found {}",
                        self.buses.len(),
                        self.buses.len() - 1,
                        self.branches.len()
                    ),
                );
            } else {
                let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for br in &self.branches {
                    adj.entry(br.from_bus).or_default().push(br.to_bus);
                    adj.entry(br.to_bus).or_default().push(br.from_bus);
                }
                let mut visited = HashSet::new();
                let mut stack = vec![self.buses[0].id];
                visited.insert(self.buses[0].id);
                while let Some(v) = stack.pop() {
                    for &u in adj.get(&v).into_iter().flatten() {
                        if visited.insert(u) {
                            stack.push(u);
                        }
                    }
                }
                if visited.len() != self.buses.len() {
                    push(
                        "Network".into(),
                        format!(
                            "graph must be connected: reached {} of {} buses",
                            visited.len(),
                            self.buses.len()
                        ),
                    );
                }
            }
        }

        for (i, g) in self.generators.iter().enumerate() {
            let name = format!("Generator {i} (bus {})", g.bus);
            if g.p_min > g.p_max {
                push(name.clone(), "p_min must not exceed p_max".into());
            }
            if g.s_rating <= 0.0 {
                push(name.clone(), "s_rating must be > 0".into());
            }
            if !ids.contains(&g.bus) {
                push(name.clone(), "bus must exist".into());
            }
            for (k, &(p, q, _)) in g.pw_factors.iter().enumerate() {
                let norm = (p * p + q * q).sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    push(
                        name.clone(),
                        format!("pw factor {k} must be unit-norm, got {norm:.6}"),
                    );
                }
            }
        }

        for (i, d) in self.dr_resources.iter().enumerate() {
            let name = format!("DR {i} (bus {})", d.bus);
            if d.p_max_dr.len() != t || d.price.len() != t {
                push(name.clone(), format!("arrays must have length T={t}"));
            }
            if d.p_max_dr.iter().any(|&v| v < 0.0) {
                push(name.clone(), "reduction cap must be non-negative".into());
            }
            if d.price.iter().any(|&v| v < 0.0) {
                push(name.clone(), "price must be non-negative".into());
            }
            if !ids.contains(&d.bus) {
                push(name.clone(), "bus must exist".into());
            }
        }

        let e = &self.ess_params;
        if !(0.0..1.0).contains(&e.eta) {
            push("EssParams".into(), "eta must be in [0, 1)".into());
        }
        if !(e.lambda_eff > 0.0 && e.lambda_eff <= 1.0) {
            push("EssParams".into(), "lambda_eff must be in (0, 1]".into());
        }
        if !(e.soc_min_frac >= 0.0 && e.soc_min_frac < e.soc_max_frac && e.soc_max_frac <= 1.0) {
            push("EssParams".into(), "soc fractions must satisfy 0 <= min < max <= 1".into());
        }
        if e.c_rate_hours <= 0.0 {
            push("EssParams".into(), "c_rate_hours must be > 0".into());
        }

        for (i, s) in self.asset_slots.iter().enumerate() {
            let name = format!("Slot {i} ({} at bus {})", s.kind, s.bus);
            if !(s.cap_min >= 0.0 && s.cap_min < s.cap_max) {
                push(name.clone(), "capacity box must satisfy 0 <= cap_min < cap_max".into());
            }
            if !ids.contains(&s.bus) {
                push(name.clone(), "bus must exist".into());
            }
        }

        let c = &self.cost_params;
        if [
            c.unit_cost_ess,
            c.unit_cost_w,
            c.unit_cost_pv,
            c.curtail_penalty,
        ]
        .iter()
        .any(|&v| v < 0.0)
        {
            push("CostParams".into(), "costs must be non-negative".into());
        }
        if !(c.discount_rate > 0.0 && c.discount_rate < 1.0) {
            push("CostParams".into(), "discount_rate must be in (0, 1)".into());
        }
        if c.lifetime_ess < 1.0 || c.lifetime_w < 1.0 || c.lifetime_pv < 1.0 {
            push("CostParams".into(), "lifetimes must be >= 1 year".into());
        }
        if c.dispatch_cycles < 1.0 || c.steps_per_cycle < 1 {
            push("CostParams".into(), "dispatch cycles and steps must be >= 1".into());
        }
        if c.step_hours <= 0.0 {
            push("CostParams".into(), "step_hours must be > 0".into());
        }

        if self.generators.is_empty() && self.asset_slots.is_empty() {
            push("Network".into(), "needs at least one generator or asset slot".into());
        }
        if !ids.contains(&self.reference_bus) {
            push("Network".into(), format!("reference bus {} must exist", self.reference_bus));
        }
        if self.s_base_mva <= 0.0 {
            push("Network".into(), "s_base_mva must be > 0".into());
        }

        out
    }

    /// Lower/upper capacity bounds of the decision vector, slot-ordered.
    pub fn decision_box(&self) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        if self.asset_slots.is_empty() {
            return Err(NetError::NoSlots);
        }
        Ok((
            self.asset_slots.iter().map(|s| s.cap_min).collect(),
            self.asset_slots.iter().map(|s| s.cap_max).collect(),
        ))
    }

    pub fn scheme_in_box(&self, scheme: &CapacityScheme) -> bool {
        scheme.values.len() == self.asset_slots.len()
            && self
                .asset_slots
                .iter()
                .zip(&scheme.values)
                .all(|(s, &v)| v >= s.cap_min - 1e-12 && v <= s.cap_max + 1e-12)
    }
}

// ---------------------------------------------------------------------------
// Case file: the compact, human-edited description that load_case expands
// into a Network by attaching hourly profiles.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseBus {
    pub id: usize,
    /// Static peak demand, scaled by the hourly load profile.
    pub pd_mw: f64,
    pub qd_mvar: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseDr {
    pub bus: usize,
    /// Cap as a fraction of the bus's hourly load.
    #[serde(default = "default_dr_fraction")]
    pub fraction: f64,
    #[serde(default = "default_dr_price")]
    pub price: f64,
}

fn default_dr_fraction() -> f64 {
    0.15
}
fn default_dr_price() -> f64 {
    60.0
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CaseParams {
    #[serde(default)]
    pub ess: EssParams,
    #[serde(default)]
    pub cost: CostParams,
    #[serde(default)]
    pub reference_bus: Option<usize>,
    #[serde(default = "default_s_base")]
    pub s_base_mva: f64,
    #[serde(default)]
    pub allow_meshed: bool,
    #[serde(default)]
    pub grid_exchange: Option<GridExchange>,
}

fn default_s_base() -> f64 {
    10.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFile {
    pub buses: Vec<CaseBus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub generators: Vec<DieselGenerator>,
    #[serde(default)]
    pub dr: Vec<CaseDr>,
    #[serde(default)]
    pub slots: Vec<AssetSlot>,
    #[serde(default)]
    pub params: CaseParams,
}

/// Hourly shape profiles keyed by column name.
#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    pub columns: BTreeMap<String, Vec<f64>>,
    pub rows: usize,
}

impl Profiles {
    pub fn get(&self, name: &str) -> Result<&[f64], NetError> {
        self.columns
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| NetError::MissingProfile(name.to_string()))
    }
}

fn read_to_string(path: &Path) -> Result<String, NetError> {
    std::fs::read_to_string(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a profiles CSV: header row with column names, T data rows.
pub fn load_profiles(path: &Path) -> Result<Profiles, NetError> {
    let text = read_to_string(path)?;
    let perr = |msg: String| NetError::Parse {
        path: path.display().to_string(),
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr("empty profiles file".into()))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(|n| n.is_empty()) {
        return Err(perr("header row has an empty column name".into()));
    }
    let mut columns: BTreeMap<String, Vec<f64>> =
        names.iter().map(|n| (n.clone(), Vec::new())).collect();
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(perr(format!(
                "line {}: expected {} fields, found {}",
                lineno + 1,
                names.len(),
                fields.len()
            )));
        }
        for (name, field) in names.iter().zip(fields) {
            let v: f64 = field.trim().parse().map_err(|_| {
                perr(format!("line {}: bad number `{}`", lineno + 1, field.trim()))
            })?;
            columns.get_mut(name).unwrap().push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(perr("no data rows".into()));
    }
    Ok(Profiles { columns, rows })
}

/// Loads a case file and attaches hourly profiles, producing a validated
/// Network. The profile column `load` shapes every bus demand; slots are
/// reordered ess, wind, pv so decision vectors have a stable layout.
pub fn load_case(case_path: &Path, profiles_path: &Path) -> Result<Network, NetError> {
    let text = read_to_string(case_path)?;
    if text.trim().is_empty() {
        return Err(NetError::Parse {
            path: case_path.display().to_string(),
            msg: "empty case file".into(),
        });
    }
    let case: CaseFile = serde_json::from_str(&text).map_err(|e| NetError::Parse {
        path: case_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let profiles = load_profiles(profiles_path)?;
    build_network(case, &profiles)
}

/// Expands a parsed case against profiles; see [`load_case`].
pub fn build_network(case: CaseFile, profiles: &Profiles) -> Result<Network, NetError> {
    let t = case.params.cost.steps_per_cycle;
    let load = profiles.get("load")?;
    if load.len() != t {
        return Err(NetError::Parse {
            path: "profiles".into(),
            msg: format!("load profile has {} rows, case expects T={t}", load.len()),
        });
    }

    let mut buses: Vec<Bus> = case
        .buses
        .iter()
        .map(|cb| Bus {
            id: cb.id,
            v_min: cb.v_min,
            v_max: cb.v_max,
            load_p: load.iter().map(|&s| cb.pd_mw * s).collect(),
            load_q: load.iter().map(|&s| cb.qd_mvar * s).collect(),
            attached_device_ids: Vec::new(),
        })
        .collect();

    let mut slots = case.slots.clone();
    slots.sort_by_key(|s| s.kind);

    let dr_resources: Vec<DemandResponse> = case
        .dr
        .iter()
        .map(|d| {
            let bus_load: Vec<f64> = buses
                .iter()
                .find(|b| b.id == d.bus)
                .map(|b| b.load_p.clone())
                .unwrap_or_else(|| vec![0.0; t]);
            DemandResponse {
                bus: d.bus,
                p_max_dr: bus_load.iter().map(|&p| d.fraction * p).collect(),
                price: vec![d.price; t],
            }
        })
        .collect();

    for (i, g) in case.generators.iter().enumerate() {
        if let Some(b) = buses.iter_mut().find(|b| b.id == g.bus) {
            b.attached_device_ids.push(format!("gen{i}"));
        }
    }
    for (i, d) in dr_resources.iter().enumerate() {
        if let Some(b) = buses.iter_mut().find(|b| b.id == d.bus) {
            b.attached_device_ids.push(format!("dr{i}"));
        }
    }
    for (i, s) in slots.iter().enumerate() {
        if let Some(b) = buses.iter_mut().find(|b| b.id == s.bus) {
            b.attached_device_ids.push(format!("slot{i}"));
        }
    }

    let reference_bus = case
        .params
        .reference_bus
        .or_else(|| case.buses.first().map(|b| b.id))
        .unwrap_or(0);

    let network = Network {
        buses,
        branches: case.branches,
        generators: case.generators,
        dr_resources,
        asset_slots: slots,
        ess_params: case.params.ess,
        cost_params: case.params.cost,
        reference_bus,
        s_base_mva: case.params.s_base_mva,
        allow_meshed: case.params.allow_meshed,
        grid_exchange: case.params.grid_exchange,
    };
    let violations = network.validate();
    if violations.is_empty() {
        Ok(network)
    } else {
        Err(NetError::Validation(violations))
    }
}

/// Serializes a fully expanded Network (not the compact case file).
pub fn save_network(network: &Network, path: &Path) -> Result<(), NetError> {
    let json = serde_json::to_string_pretty(network).expect("network serializes");
    std::fs::write(path, json).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_network(path: &Path) -> Result<Network, NetError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| NetError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Imports the bus/branch tables of a MATPOWER-style `.m` file into a case
/// skeleton (no devices, default parameters). Columns read: bus id, Pd, Qd,
/// Vmax, Vmin; branch fbus, tbus, r, x, rateA.
pub fn import_matpower(path: &Path) -> Result<CaseFile, NetError> {
    let text = read_to_string(path)?;
    let perr = |msg: String| NetError::Parse {
        path: path.display().to_string(),
        msg,
    };

    fn matrix_block(text: &str, name: &str) -> Option<Vec<Vec<f64>>> {
        let start = text.find(&format!("mpc.{name}"))?;
        let open = text[start..].find('[')? + start;
        let close = text[open..].find(']')? + open;
        let body = &text[open + 1..close];
        let mut rows = Vec::new();
        for line in body.split(';') {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .filter_map(|tok| tok.parse().ok())
                .collect();
            if !vals.is_empty() {
                rows.push(vals);
            }
        }
        Some(rows)
    }

    let bus_rows = matrix_block(&text, "bus").ok_or_else(|| perr("missing mpc.bus block".into()))?;
    let branch_rows =
        matrix_block(&text, "branch").ok_or_else(|| perr("missing mpc.branch block".into()))?;

    let mut buses = Vec::with_capacity(bus_rows.len());
    for (i, row) in bus_rows.iter().enumerate() {
        if row.len() < 13 {
            return Err(perr(format!("bus row {} has {} columns, need 13", i + 1, row.len())));
        }
        buses.push(CaseBus {
            id: row[0] as usize,
            pd_mw: row[2],
            qd_mvar: row[3],
            v_max: row[11],
            v_min: row[12],
        });
    }
    let mut branches = Vec::with_capacity(branch_rows.len());
    for (i, row) in branch_rows.iter().enumerate() {
        if row.len() < 6 {
            return Err(perr(format!(
                "branch row {} has {} columns, need 6",
                i + 1,
                row.len()
            )));
        }
        let rate = if row[5] > 0.0 { row[5] } else { 999.0 };
        branches.push(Branch {
            from_bus: row[0] as usize,
            to_bus: row[1] as usize,
            r: row[2],
            x: row[3],
            p_max: rate,
            q_max: rate,
        });
    }
    Ok(CaseFile {
        buses,
        branches,
        generators: Vec::new(),
        dr: Vec::new(),
        slots: Vec::new(),
        params: CaseParams {
            s_base_mva: default_s_base(),
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus_network() -> Network {
        let t = 2;
        Network {
            buses: vec![
                Bus {
                    id: 1,
                    v_min: 0.95,
                    v_max: 1.05,
                    load_p: vec![0.0; t],
                    load_q: vec![0.0; t],
                    attached_device_ids: vec![],
                },
                Bus {
                    id: 2,
                    v_min: 0.95,
                    v_max: 1.05,
                    load_p: vec![1.0, 2.0],
                    load_q: vec![0.5, 0.8],
                    attached_device_ids: vec![],
                },
            ],
            branches: vec![Branch {
                from_bus: 1,
                to_bus: 2,
                r: 0.01,
                x: 0.02,
                p_max: 5.0,
                q_max: 5.0,
            }],
            generators: vec![DieselGenerator {
                bus: 1,
                p_min: 0.0,
                p_max: 3.0,
                q_min: -2.0,
                q_max: 2.0,
                s_rating: 3.5,
                cost_a: 0.005,
                cost_b: 80.0,
                cost_c: 10.0,
                pw_factors: default_pw_factors(),
            }],
            dr_resources: vec![],
            asset_slots: vec![AssetSlot {
                bus: 2,
                kind: AssetKind::Pv,
                cap_min: 0.0,
                cap_max: 5.0,
            }],
            ess_params: EssParams::default(),
            cost_params: CostParams {
                steps_per_cycle: t,
                ..Default::default()
            },
            reference_bus: 1,
            s_base_mva: 10.0,
            allow_meshed: false,
            grid_exchange: None,
        }
    }

    #[test]
    fn valid_network_passes() {
        assert!(two_bus_network().validate().is_empty());
    }

    #[test]
    fn zero_reactance_is_flagged() {
        let mut n = two_bus_network();
        n.branches[0].x = 0.0;
        let v = n.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].to_string(), "Branch 1-2: reactance must be > 0");
    }

    #[test]
    fn empty_capacity_box_is_flagged() {
        let mut n = two_bus_network();
        n.asset_slots[0].cap_max = n.asset_slots[0].cap_min;
        let v = n.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("cap_min < cap_max"));
    }

    #[test]
    fn meshed_graph_needs_flag() {
        let mut n = two_bus_network();
        n.branches.push(Branch {
            from_bus: 2,
            to_bus: 1,
            r: 0.01,
            x: 0.02,
            p_max: 5.0,
            q_max: 5.0,
        });
        assert!(!n.validate().is_empty());
        n.allow_meshed = true;
        assert!(n.validate().is_empty());
    }

    #[test]
    fn validate_is_pure() {
        let n = two_bus_network();
        assert_eq!(n.validate(), n.validate());
    }

    #[test]
    fn decision_box_matches_slots() {
        let n = two_bus_network();
        let (lo, hi) = n.decision_box().unwrap();
        assert_eq!(lo, vec![0.0]);
        assert_eq!(hi, vec![5.0]);
        let mut empty = n.clone();
        empty.asset_slots.clear();
        assert!(matches!(empty.decision_box(), Err(NetError::NoSlots)));
    }

    #[test]
    fn pw_factors_are_unit_norm() {
        for (p, q, r) in default_pw_factors() {
            assert!(((p * p + q * q).sqrt() - 1.0).abs() < 1e-12);
            assert_eq!(r, 1.0);
        }
    }

    #[test]
    fn network_round_trips_through_json() {
        let n = two_bus_network();
        let json = serde_json::to_string(&n).unwrap();
        let back: Network = serde_json::from_str(&json).unwrap();
        assert_eq!(n, back);
    }

    #[test]
    fn matpower_subset_import() {
        let m = r#"
function mpc = case2
mpc.version = '2';
mpc.baseMVA = 10;
mpc.bus = [
    1  3  0.0  0.0  0 0 1 1 0 12.66 1 1.05 0.95;
    2  1  0.1  0.06 0 0 1 1 0 12.66 1 1.05 0.95;
];
mpc.branch = [
    1 2 0.0058 0.0029 0 5.0 0 0 0 0 1 -360 360;
];
"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case2.m");
        std::fs::write(&path, m).unwrap();
        let case = import_matpower(&path).unwrap();
        assert_eq!(case.buses.len(), 2);
        assert_eq!(case.buses[1].pd_mw, 0.1);
        assert_eq!(case.buses[1].v_min, 0.95);
        assert_eq!(case.branches.len(), 1);
        assert_eq!(case.branches[0].p_max, 5.0);
    }

    #[test]
    fn profiles_parse_and_reject_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "load,pv\n0.5,0.0\n1.0,0.3\n").unwrap();
        let p = load_profiles(&path).unwrap();
        assert_eq!(p.rows, 2);
        assert_eq!(p.get("load").unwrap(), &[0.5, 1.0]);
        assert!(matches!(p.get("wind"), Err(NetError::MissingProfile(_))));

        std::fs::write(&path, "load\nbad\n").unwrap();
        assert!(load_profiles(&path).is_err());
    }

    #[test]
    fn empty_case_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let case = dir.path().join("case.json");
        let prof = dir.path().join("p.csv");
        std::fs::write(&case, "").unwrap();
        std::fs::write(&prof, "load\n1.0\n").unwrap();
        match load_case(&case, &prof) {
            Err(NetError::Parse { msg, .. }) => assert!(msg.contains("empty")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
