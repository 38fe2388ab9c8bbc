//! Operator-splitting QP engine: alternating direction method of multipliers
//! over a quasi-definite KKT system, with Ruiz equilibration, per-row step
//! sizes, step-size adaptation on a geometric ladder of cached
//! factorizations, infeasibility certificates, and an active-set polish.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::ldl::{min_degree_order, LdlFactor};
use super::sparse::{inf_norm, CscMatrix};
use super::{QpError, QpSolution, QuadProgram};

/// Step sizes move on this geometric ladder so factorizations can be cached
/// and reused across re-solves.
const RHO_LADDER: f64 = 5.0;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
/// Cached factorizations kept per prepared problem.
const FACTOR_CACHE_CAP: usize = 8;
/// Add/drop rounds the active-set polish may take before settling.
const POLISH_ROUNDS: usize = 192;
/// Cadence of unconditional fallback-polish attempts and of the stall check
/// that restarts the iterate from its running mean.
const STALL_INTERVAL: usize = 2500;
/// Violated-row count above which a pin release is judged to have jumped to
/// a distant vertex and is undone.
const CASCADE_CAP: usize = 16;

#[derive(Debug, Clone)]
pub struct Settings {
    pub max_iter: usize,
    /// Absolute primal feasibility target.
    pub eps_prim: f64,
    /// Absolute dual feasibility target.
    pub eps_dual: f64,
    /// Relative slack added to both targets, scaled by iterate magnitudes.
    pub eps_rel: f64,
    /// Infeasibility certificate tolerance.
    pub eps_infeas: f64,
    /// Initial step size, adapted during the run.
    pub rho: f64,
    /// Equality rows take rho times this factor.
    pub eq_rho_scale: f64,
    /// Proximal regularization on the x block.
    pub sigma: f64,
    /// Over-relaxation in (0, 2).
    pub alpha: f64,
    /// Step-size adaptation period, in iterations.
    pub adapt_interval: usize,
    /// Convergence/certificate check period, in iterations.
    pub check_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    /// Regularization used by the polish KKT solve.
    pub polish_delta: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            eps_prim: 1e-6,
            eps_dual: 1e-6,
            eps_rel: 0.0,
            eps_infeas: 1e-5,
            rho: 0.1,
            eq_rho_scale: 1e3,
            sigma: 1e-6,
            alpha: 1.6,
            adapt_interval: 50,
            check_interval: 25,
            scaling_iters: 10,
            polish: true,
            polish_delta: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

impl Status {
    pub fn is_optimal(self) -> bool {
        matches!(self, Status::Optimal)
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Status::Optimal => "optimal",
            Status::MaxIterations => "max_iter",
            Status::PrimalInfeasible => "primal_infeasible",
            Status::DualInfeasible => "dual_infeasible",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Problem prepared for repeated solves: scaling, KKT pattern, ordering and
/// factorizations depend only on (P, q, A), so fresh bounds re-use them all.
pub struct Prepared {
    settings: Settings,
    n: usize,
    m: usize,
    // Unscaled data, for residuals, objectives and polishing.
    p_upper_u: CscMatrix,
    q_u: Vec<f64>,
    a_u: CscMatrix,
    // Equilibrated data the iteration runs on; scaled P lives in the KKT.
    q: Vec<f64>,
    a: CscMatrix,
    d: Vec<f64>,
    e: Vec<f64>,
    cost_scale: f64,
    // KKT with placeholder step-size diagonal plus the slots to patch.
    kkt_template: CscMatrix,
    rho_slots: Vec<usize>,
    ordering: Vec<usize>,
    /// Factorizations keyed by (step-size rung, equality-pattern hash):
    /// fresh bounds can turn box rows into point intervals, and those rows
    /// need equality-grade step-size weighting to converge at equality
    /// speed, so each observed pattern gets its own numeric factor (the
    /// symbolic ordering is shared).
    factors: Mutex<HashMap<(i32, u64), Arc<LdlFactor>>>,
}

/// Rows with equal finite bounds, plus a hash identifying the pattern.
fn eq_pattern(l: &[f64], u: &[f64]) -> (Vec<bool>, u64) {
    use std::hash::{Hash, Hasher};
    let mask: Vec<bool> = l
        .iter()
        .zip(u)
        .map(|(&a, &b)| a.is_finite() && a == b)
        .collect();
    let mut h = std::collections::hash_map::DefaultHasher::new();
    mask.hash(&mut h);
    (mask, h.finish())
}

impl Prepared {
    pub fn new(qp: &QuadProgram, settings: Settings) -> Result<Self, QpError> {
        let n = qp.n();
        let m = qp.m();
        assert!(settings.alpha > 0.0 && settings.alpha < 2.0, "alpha in (0,2)");
        assert!(settings.rho > 0.0 && settings.sigma > 0.0);

        let p_upper_u = qp.p.upper_triangle();
        let mut p = p_upper_u.clone();
        let mut a = qp.a.clone();
        let mut q = qp.q.clone();
        let mut d = vec![1.0f64; n];
        let mut e = vec![1.0f64; m];
        let mut cost_scale = 1.0f64;

        for _ in 0..settings.scaling_iters {
            // Column norms of the full symmetric P from its upper triangle.
            let mut cn = vec![0.0f64; n];
            for j in 0..n {
                for (i, v) in p.col(j) {
                    cn[j] = cn[j].max(v.abs());
                    if i != j {
                        cn[i] = cn[i].max(v.abs());
                    }
                }
            }
            for (j, &an) in a.col_inf_norms().iter().enumerate() {
                cn[j] = cn[j].max(an);
            }
            let delta: Vec<f64> = cn
                .iter()
                .map(|&v| {
                    if v > 1e-12 {
                        (1.0 / v.sqrt()).clamp(1e-4, 1e4)
                    } else {
                        1.0
                    }
                })
                .collect();
            let eps: Vec<f64> = a
                .row_inf_norms()
                .iter()
                .map(|&v| {
                    if v > 1e-12 {
                        (1.0 / v.sqrt()).clamp(1e-4, 1e4)
                    } else {
                        1.0
                    }
                })
                .collect();
            p.scale(&delta, &delta);
            a.scale(&eps, &delta);
            for j in 0..n {
                q[j] *= delta[j];
                d[j] *= delta[j];
            }
            for i in 0..m {
                e[i] *= eps[i];
            }
            // Normalize the cost so primal and dual residuals are comparable.
            let mut cn2 = vec![0.0f64; n];
            for j in 0..n {
                for (i, v) in p.col(j) {
                    cn2[j] = cn2[j].max(v.abs());
                    if i != j {
                        cn2[i] = cn2[i].max(v.abs());
                    }
                }
            }
            let mean_p = if n > 0 {
                cn2.iter().sum::<f64>() / n as f64
            } else {
                0.0
            };
            let denom = mean_p.max(inf_norm(&q));
            if denom > 1e-12 {
                let g = (1.0 / denom).clamp(1e-6, 1e6);
                for v in p.values.iter_mut() {
                    *v *= g;
                }
                for v in q.iter_mut() {
                    *v *= g;
                }
                cost_scale *= g;
            }
        }

        // KKT upper triangle: [[P + sigma I, Aᵀ], [A, -1/rho I]].
        let total = n + m;
        let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(p.nnz() + a.nnz() + total);
        for j in 0..n {
            for (i, v) in p.col(j) {
                trips.push((i, j, v));
            }
        }
        for j in 0..n {
            trips.push((j, j, settings.sigma));
        }
        for j in 0..n {
            for (i, v) in a.col(j) {
                trips.push((j, n + i, v));
            }
        }
        for i in 0..m {
            trips.push((n + i, n + i, -1.0));
        }
        let kkt_template = CscMatrix::from_triplets(total, total, &trips);
        // Slots of the -1/rho diagonal in the assembled value array.
        let mut rho_slots = Vec::with_capacity(m);
        for i in 0..m {
            let col = n + i;
            let mut found = None;
            for p_idx in kkt_template.col_ptr[col]..kkt_template.col_ptr[col + 1] {
                if kkt_template.row_idx[p_idx] == col {
                    found = Some(p_idx);
                }
            }
            rho_slots.push(found.expect("rho diagonal present"));
        }
        let ordering = min_degree_order(&kkt_template);

        let prepared = Self {
            settings,
            n,
            m,
            p_upper_u,
            q_u: qp.q.clone(),
            a_u: qp.a.clone(),
            q,
            a,
            d,
            e,
            cost_scale,
            kkt_template,
            rho_slots,
            ordering,
            factors: Mutex::new(HashMap::new()),
        };
        // Fail early if the reference KKT system cannot be factored.
        let (eq0, pat0) = eq_pattern(&qp.l, &qp.u);
        prepared.factor_for(0, &eq0, pat0)?;
        Ok(prepared)
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    fn rho_base(&self, rung: i32) -> f64 {
        (self.settings.rho * RHO_LADDER.powi(rung)).clamp(RHO_MIN, RHO_MAX)
    }

    fn rho_vec(&self, rung: i32, eq: &[bool]) -> Vec<f64> {
        let base = self.rho_base(rung);
        eq.iter()
            .map(|&is_eq| {
                if is_eq {
                    (base * self.settings.eq_rho_scale).min(RHO_MAX)
                } else {
                    base
                }
            })
            .collect()
    }

    fn factor_for(&self, rung: i32, eq: &[bool], pat: u64) -> Result<Arc<LdlFactor>, QpError> {
        {
            let cache = self.factors.lock().unwrap();
            if let Some(f) = cache.get(&(rung, pat)) {
                return Ok(Arc::clone(f));
            }
        }
        let rho = self.rho_vec(rung, eq);
        let mut kkt = self.kkt_template.clone();
        for (i, &slot) in self.rho_slots.iter().enumerate() {
            kkt.values[slot] = -1.0 / rho[i];
        }
        let factor = Arc::new(LdlFactor::new(&kkt, self.ordering.clone())?);
        let mut cache = self.factors.lock().unwrap();
        if cache.len() >= FACTOR_CACHE_CAP {
            // Drop the entry on the rung farthest from the one now needed.
            if let Some((&far, _)) = cache
                .iter()
                .max_by_key(|(&k, _)| ((k.0 - rung).abs(), k))
            {
                cache.remove(&far);
            }
        }
        cache.insert((rung, pat), Arc::clone(&factor));
        Ok(factor)
    }

    /// Solves with fresh bounds against the prepared matrices. `warm` seeds
    /// the iteration with an unscaled primal-dual guess.
    pub fn solve_bounds(
        &self,
        l: &[f64],
        u: &[f64],
        warm: Option<&WarmStart>,
    ) -> Result<QpSolution, QpError> {
        let (n, m) = (self.n, self.m);
        assert_eq!(l.len(), m, "bounds length");
        assert_eq!(u.len(), m, "bounds length");
        for i in 0..m {
            if l[i].is_nan() || u[i].is_nan() {
                return Err(QpError::NonFinite(format!("bound row {i}")));
            }
            if l[i] > u[i] {
                return Err(QpError::BoundsInverted {
                    row: i,
                    l: l[i],
                    u: u[i],
                });
            }
        }
        let st = &self.settings;
        let ls: Vec<f64> = (0..m).map(|i| self.e[i] * l[i]).collect();
        let us: Vec<f64> = (0..m).map(|i| self.e[i] * u[i]).collect();
        let (eq_now, pat) = eq_pattern(l, u);

        let mut rung = 0i32;
        let mut factor = self.factor_for(rung, &eq_now, pat)?;
        let mut rho = self.rho_vec(rung, &eq_now);

        let mut x = vec![0.0f64; n];
        let mut y = vec![0.0f64; m];
        if let Some(w) = warm {
            assert_eq!(w.x.len(), n);
            assert_eq!(w.y.len(), m);
            for j in 0..n {
                x[j] = w.x[j] / self.d[j];
            }
            for i in 0..m {
                y[i] = self.cost_scale * w.y[i] / self.e[i];
            }
        }
        let mut z = self.a.mul(&x);
        for i in 0..m {
            z[i] = z[i].clamp(ls[i], us[i]);
        }
        // Running mean of the iterates since the last step-size switch. On a
        // slowly rotating orbit the mean converges to the orbit's centre —
        // the fixed point — long before the iterates do, so it is both the
        // fallback source for active-set guesses and the restart point when
        // progress stalls. An arithmetic mean (not an exponential one) is
        // essential: its window must outgrow the orbit period.
        let mut x_avg = x.clone();
        let mut y_avg = y.clone();
        let mut z_avg = z.clone();
        let mut avg_count = 1usize;
        // Each step-size switch injects a transient the ratio controller then
        // reacts to, so back-to-back switches can feed a permanent limit
        // cycle. Doubling the wait after every switch cools the controller:
        // late in the run the penalty is effectively frozen and the plain
        // iteration (which converges at any fixed step size) takes over.
        let mut adapt_gap = st.adapt_interval.max(1);
        let mut next_adapt = adapt_gap;

        let mut rhs = vec![0.0f64; n + m];
        let mut delta_x = vec![0.0f64; n];
        let mut delta_y = vec![0.0f64; m];
        // Residual floor below which a failed polish is not retried.
        let mut polish_barrier = f64::INFINITY;

        let mut iterations = 0usize;
        let mut outcome: Option<(Status, bool)> = None;
        let mut final_unscaled: Option<Unscaled> = None;

        for iter in 1..=st.max_iter {
            iterations = iter;
            for j in 0..n {
                rhs[j] = st.sigma * x[j] - self.q[j];
            }
            for i in 0..m {
                rhs[n + i] = z[i] - y[i] / rho[i];
            }
            let sol = factor.solve(&rhs);
            // x update with over-relaxation; z from the slack equation.
            for j in 0..n {
                let xt = sol[j];
                let xn = st.alpha * xt + (1.0 - st.alpha) * x[j];
                delta_x[j] = xn - x[j];
                x[j] = xn;
            }
            for i in 0..m {
                let zt = z[i] + (sol[n + i] - y[i]) / rho[i];
                let zbar = st.alpha * zt + (1.0 - st.alpha) * z[i];
                let znew = (zbar + y[i] / rho[i]).clamp(ls[i], us[i]);
                let ynew = y[i] + rho[i] * (zbar - znew);
                delta_y[i] = ynew - y[i];
                z[i] = znew;
                y[i] = ynew;
            }
            avg_count += 1;
            let w = 1.0 / avg_count as f64;
            for j in 0..n {
                x_avg[j] += w * (x[j] - x_avg[j]);
            }
            for i in 0..m {
                y_avg[i] += w * (y[i] - y_avg[i]);
                z_avg[i] += w * (z[i] - z_avg[i]);
            }

            let checking = iter % st.check_interval == 0 || iter == st.max_iter;
            if !checking {
                continue;
            }
            if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
                return Err(QpError::Diverged(iter));
            }

            let un = self.unscale(&x, &y, &z);
            let thresh_p = st.eps_prim + st.eps_rel * un.norm_scale_prim();
            let thresh_d = st.eps_dual + st.eps_rel * un.norm_scale_dual();

            if un.rp <= thresh_p && un.rd <= thresh_d {
                let mut polished = false;
                let mut best = un;
                if st.polish {
                    if let Some(pol) = self.polish(&best, l, u) {
                        if pol.rp.max(pol.rd) < best.rp.max(best.rd) {
                            best = pol;
                            polished = true;
                        }
                    }
                }
                outcome = Some((Status::Optimal, polished));
                final_unscaled = Some(best);
                break;
            }

            // Polish can land the solution well before the first-order loop
            // grinds the residuals down (the dual residual tail is slow on
            // nearly-linear objectives); try once per order of magnitude, and
            // on a fixed cadence once progress stalls. Each attempt falls
            // back to the time-averaged iterate, whose active-set guess stays
            // stable even when the instantaneous one oscillates.
            if st.polish {
                let trig_p = thresh_p.max(1e-2 * un.norm_scale_prim().max(1.0));
                let trig_d = thresh_d.max(1e-2 * un.norm_scale_dual().max(1.0));
                let level = un.rp.max(un.rd);
                let near = un.rp <= trig_p && un.rd <= trig_d && level < 0.1 * polish_barrier;
                if near || iter % STALL_INTERVAL == 0 {
                    let pol = self
                        .polish_checked(&un, l, u, thresh_p, thresh_d)
                        .or_else(|| {
                            let avg = self.unscale(&x_avg, &y_avg, &z_avg);
                            self.polish_checked(&avg, l, u, thresh_p, thresh_d)
                        });
                    if let Some(pol) = pol {
                        outcome = Some((Status::Optimal, true));
                        final_unscaled = Some(pol);
                        break;
                    }
                    polish_barrier = polish_barrier.min(level);
                }
            }

            if let Some(status) = self.certificates(&delta_x, &delta_y, l, u) {
                let cert = match status {
                    Status::PrimalInfeasible => {
                        let mut dy: Vec<f64> =
                            (0..m).map(|i| self.e[i] * delta_y[i] / self.cost_scale).collect();
                        let nrm = inf_norm(&dy);
                        for v in dy.iter_mut() {
                            *v /= nrm;
                        }
                        dy
                    }
                    _ => {
                        let mut dx: Vec<f64> = (0..n).map(|j| self.d[j] * delta_x[j]).collect();
                        let nrm = inf_norm(&dx);
                        for v in dx.iter_mut() {
                            *v /= nrm;
                        }
                        dx
                    }
                };
                return Ok(QpSolution {
                    x: un.x,
                    y: un.y,
                    status,
                    objective: if status == Status::PrimalInfeasible {
                        f64::INFINITY
                    } else {
                        f64::NEG_INFINITY
                    },
                    prim_res: un.rp,
                    dual_res: un.rd,
                    iterations: iter,
                    polished: false,
                    certificate: Some(cert),
                });
            }

            if std::env::var_os("QP_TRACE").is_some() && iter % 500 == 0 {
                let mut dx: Vec<(usize, f64)> = delta_x
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| (j, (self.d[j] * v).abs()))
                    .collect();
                dx.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
                let tops: Vec<String> = dx
                    .iter()
                    .take(5)
                    .map(|(j, v)| format!("x{j}:{v:.1e}"))
                    .collect();
                eprintln!(
                    "it={iter} rung={rung} rp={:.3e} rd={:.3e} dx[{}]",
                    un.rp,
                    un.rd,
                    tops.join(" ")
                );
            }
            if iter >= next_adapt && iter < st.max_iter {
                next_adapt = iter + st.adapt_interval.max(1);
                let rp_n = un.rp / un.norm_scale_prim().max(1e-12);
                let rd_n = un.rd / un.norm_scale_dual().max(1e-12);
                let target = self.rho_base(rung) * (rp_n / rd_n.max(1e-16)).sqrt();
                let target = target.clamp(RHO_MIN, RHO_MAX);
                let new_rung = (target / self.settings.rho).log(RHO_LADDER).round() as i32;
                let new_rung = new_rung.clamp(
                    (RHO_MIN / self.settings.rho).log(RHO_LADDER).ceil() as i32,
                    (RHO_MAX / self.settings.rho).log(RHO_LADDER).floor() as i32,
                );
                if new_rung != rung {
                    if std::env::var_os("QP_TRACE").is_some() {
                        eprintln!("it={iter} rung {rung} -> {new_rung} rp={:.3e} rd={:.3e}", un.rp, un.rd);
                    }
                    rung = new_rung;
                    factor = self.factor_for(rung, &eq_now, pat)?;
                    rho = self.rho_vec(rung, &eq_now);
                    // New penalty regime: restart the averages so stale
                    // history does not pollute the fallback guess.
                    x_avg.copy_from_slice(&x);
                    y_avg.copy_from_slice(&y);
                    z_avg.copy_from_slice(&z);
                    avg_count = 1;
                    adapt_gap = (adapt_gap * 2).min(st.max_iter);
                    next_adapt = iter + adapt_gap;
                }
            }
        }

        let (mut status, mut polished) = outcome.unwrap_or((Status::MaxIterations, false));
        let mut un = match final_unscaled {
            Some(u) => u,
            None => self.unscale(&x, &y, &z),
        };
        // Last chance before reporting failure: a correct active-set guess
        // still yields a verifiable solution even when the first-order
        // residuals never met the thresholds.
        if status == Status::MaxIterations && st.polish {
            let thresh_p = st.eps_prim + st.eps_rel * un.norm_scale_prim();
            let thresh_d = st.eps_dual + st.eps_rel * un.norm_scale_dual();
            let pol = self
                .polish_checked(&un, l, u, thresh_p, thresh_d)
                .or_else(|| {
                    let avg = self.unscale(&x_avg, &y_avg, &z_avg);
                    self.polish_checked(&avg, l, u, thresh_p, thresh_d)
                });
            if let Some(pol) = pol {
                status = Status::Optimal;
                polished = true;
                un = pol;
            }
        }
        let objective = self.objective_unscaled(&un.x);
        Ok(QpSolution {
            x: un.x,
            y: un.y,
            status,
            objective,
            prim_res: un.rp,
            dual_res: un.rd,
            iterations,
            polished,
            certificate: None,
        })
    }

    fn objective_unscaled(&self, x: &[f64]) -> f64 {
        let px = self.p_upper_u.sym_mul(x);
        let mut v = 0.0;
        for j in 0..self.n {
            v += 0.5 * x[j] * px[j] + self.q_u[j] * x[j];
        }
        v
    }

    /// Maps scaled iterates back to problem units and evaluates residuals
    /// there; termination decisions are made on these numbers.
    fn unscale(&self, x: &[f64], y: &[f64], z: &[f64]) -> Unscaled {
        let n = self.n;
        let m = self.m;
        let xu: Vec<f64> = (0..n).map(|j| self.d[j] * x[j]).collect();
        let yu: Vec<f64> = (0..m).map(|i| self.e[i] * y[i] / self.cost_scale).collect();
        let zu: Vec<f64> = (0..m).map(|i| z[i] / self.e[i]).collect();
        let ax = self.a_u.mul(&xu);
        let px = self.p_upper_u.sym_mul(&xu);
        let aty = self.a_u.mul_t(&yu);
        let mut rp = 0.0f64;
        for i in 0..m {
            rp = rp.max((ax[i] - zu[i]).abs());
        }
        let mut rd = 0.0f64;
        let mut grad = vec![0.0f64; n];
        for j in 0..n {
            grad[j] = px[j] + self.q_u[j] + aty[j];
            rd = rd.max(grad[j].abs());
        }
        Unscaled {
            x: xu,
            y: yu,
            ax_norm: inf_norm(&ax),
            z_norm: inf_norm(&zu),
            px_norm: inf_norm(&px),
            aty_norm: inf_norm(&aty),
            q_norm: inf_norm(&self.q_u),
            rp,
            rd,
        }
    }

    /// OSQP-style divergence certificates from one-step iterate differences.
    fn certificates(
        &self,
        delta_x: &[f64],
        delta_y: &[f64],
        l: &[f64],
        u: &[f64],
    ) -> Option<Status> {
        let st = &self.settings;
        let n = self.n;
        let m = self.m;
        // Primal infeasibility: a dual ray with Aᵀdy = 0 and negative support.
        let dy: Vec<f64> = (0..m)
            .map(|i| self.e[i] * delta_y[i] / self.cost_scale)
            .collect();
        let ndy = inf_norm(&dy);
        if ndy > 1e-12 {
            let aty = self.a_u.mul_t(&dy);
            if inf_norm(&aty) <= st.eps_infeas * ndy {
                let mut support = 0.0;
                let mut ok = true;
                for i in 0..m {
                    let pos = dy[i].max(0.0);
                    let neg = dy[i].min(0.0);
                    if u[i].is_finite() {
                        support += u[i] * pos;
                    } else if pos > st.eps_infeas * ndy {
                        ok = false;
                        break;
                    }
                    if l[i].is_finite() {
                        support += l[i] * neg;
                    } else if neg < -st.eps_infeas * ndy {
                        ok = false;
                        break;
                    }
                }
                if ok && support <= -st.eps_infeas * ndy {
                    return Some(Status::PrimalInfeasible);
                }
            }
        }
        // Dual infeasibility: a primal ray of strict descent kept feasible.
        let dx: Vec<f64> = (0..n).map(|j| self.d[j] * delta_x[j]).collect();
        let ndx = inf_norm(&dx);
        if ndx > 1e-12 {
            let pdx = self.p_upper_u.sym_mul(&dx);
            let qdx: f64 = (0..n).map(|j| self.q_u[j] * dx[j]).sum();
            if inf_norm(&pdx) <= st.eps_infeas * ndx && qdx <= -st.eps_infeas * ndx {
                let adx = self.a_u.mul(&dx);
                let mut ok = true;
                for i in 0..m {
                    if u[i].is_finite() && adx[i] > st.eps_infeas * ndx {
                        ok = false;
                        break;
                    }
                    if l[i].is_finite() && adx[i] < -st.eps_infeas * ndx {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    return Some(Status::DualInfeasible);
                }
            }
        }
        None
    }

    /// Polish attempt that only counts when the polished residuals meet the
    /// supplied thresholds.
    fn polish_checked(
        &self,
        un: &Unscaled,
        l: &[f64],
        u: &[f64],
        thresh_p: f64,
        thresh_d: f64,
    ) -> Option<Unscaled> {
        self.polish(un, l, u)
            .filter(|p| p.rp <= thresh_p && p.rd <= thresh_d)
    }

    /// Active-set polish: guess pins from the iterate, solve the pinned
    /// proximal QP exactly, then iterate the set — a pin whose multiplier
    /// comes back wrong-signed is dropped (redundant pins, common when
    /// storage rows duplicate the dynamics, vanish harmlessly), and a
    /// released row that lands outside its bounds is re-pinned on the
    /// violated side. Stops on a sign-consistent feasible solve, an
    /// active-set cycle, or the round cap; returns the best candidate.
    fn polish(&self, un: &Unscaled, l: &[f64], u: &[f64]) -> Option<Unscaled> {
        let m = self.m;
        let st = &self.settings;
        let ax_now = self.a_u.mul(&un.x);
        let sign_guess_tol = 1e-7 * inf_norm(&un.y).max(1.0);
        let mut pins: Vec<PinState> = vec![PinState::Free; m];
        for i in 0..m {
            // Solve-time test, not the prepared mask: fresh bounds may turn
            // a box row into a point interval.
            if l[i].is_finite() && l[i] == u[i] {
                pins[i] = PinState::Point;
                continue;
            }
            // Cap the tolerance by the box width so a loose iterate cannot
            // blanket-pin narrow boxes to one side. Under-pinning beats
            // over-pinning: a missed pin is restored by one add round, while
            // a wrong pin costs a release walk.
            let mut tol_lo = 2.0 * un.rp + 1e-7 * l[i].abs().max(1.0);
            let mut tol_hi = 2.0 * un.rp + 1e-7 * u[i].abs().max(1.0);
            if l[i].is_finite() && u[i].is_finite() {
                let cap = 0.25 * (u[i] - l[i]);
                tol_lo = tol_lo.min(cap);
                tol_hi = tol_hi.min(cap);
            }
            let near_lo = l[i].is_finite() && ax_now[i] - l[i] <= tol_lo;
            let near_hi = u[i].is_finite() && u[i] - ax_now[i] <= tol_hi;
            // The iterate's multiplier signs are trustworthy (the dual update
            // only pushes y positive while the upper clamp binds and negative
            // while the lower one does), so a near-bound row whose multiplier
            // presses the other way is left free rather than pinned wrong.
            // Rows near both bounds sit in boxes narrower than the proximity
            // tolerance; they stay free too — the proximal term keeps them
            // put, and an actual violation gets re-pinned by the add rule.
            pins[i] = match (near_lo, near_hi) {
                (true, false) if un.y[i] <= sign_guess_tol => PinState::Lower,
                (false, true) if un.y[i] >= -sign_guess_tol => PinState::Upper,
                _ => PinState::Free,
            };
        }

        if std::env::var_os("QP_POLISH_DEBUG").is_some() {
            let npin = pins.iter().filter(|p| **p != PinState::Free).count();
            eprintln!("polish guess: rp={:.2e} rd={:.2e} pins={npin}", un.rp, un.rd);
        }
        let feas_tol = 0.25 * st.eps_prim.max(1e-12);
        let debug = std::env::var_os("QP_POLISH_DEBUG").is_some();
        let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        // Each row may be released at most once per polish: wrong-signed
        // multipliers on dependent active rows reappear forever if released
        // pins can be revisited, and the one-shot rule makes the walk finite.
        let mut no_drop = vec![false; m];
        let mut last_dropped: Option<(usize, PinState)> = None;
        for round in 0..POLISH_ROUNDS {
            {
                use std::hash::{Hash, Hasher};
                let mut h = std::collections::hash_map::DefaultHasher::new();
                pins.hash(&mut h);
                no_drop.hash(&mut h);
                if !seen.insert(h.finish()) {
                    if debug {
                        eprintln!("polish exit: pin cycle at round {round}");
                    }
                    break;
                }
            }
            let (res, ax) = match self.solve_pinned(un, l, u, &pins) {
                Some(r) => r,
                None => {
                    if debug {
                        eprintln!("polish exit: pinned solve failed at round {round}");
                    }
                    break;
                }
            };
            // A release that knocks a crowd of other rows out of bounds has
            // jumped to a distant vertex; put the pin back instead of chasing
            // the new active set.
            if let Some((i, side)) = last_dropped {
                let mut violated = 0usize;
                for r in 0..m {
                    if pins[r] != PinState::Free {
                        continue;
                    }
                    let lo = l[r].is_finite() && ax[r] < l[r] - feas_tol;
                    let hi = u[r].is_finite() && ax[r] > u[r] + feas_tol;
                    if lo || hi {
                        violated += 1;
                    }
                }
                if violated > CASCADE_CAP {
                    pins[i] = side;
                    last_dropped = None;
                    if debug {
                        eprintln!("polish round: restore pin {i} after {violated} violations");
                    }
                    continue;
                }
            }
            // Pin every violated row, and release at most one pin per round —
            // wrong-signed multipliers usually mark linearly dependent pins
            // whose values redistribute once the worst is gone, and a mass
            // release lets the flat directions of the nearly linear objective
            // fly off to a distant vertex.
            let mut adds = 0usize;
            for i in 0..m {
                if pins[i] != PinState::Free {
                    continue;
                }
                if l[i].is_finite() && ax[i] < l[i] - feas_tol {
                    pins[i] = PinState::Lower;
                    adds += 1;
                } else if u[i].is_finite() && ax[i] > u[i] + feas_tol {
                    pins[i] = PinState::Upper;
                    adds += 1;
                }
            }
            let mut drops = 0usize;
            let sign_tol = 1e-7 * inf_norm(&res.y).max(1.0);
            // Feasibility plus stationarity certify any vertex, not the
            // optimum: only sign-valid multipliers on every pinned row —
            // released-once rows included — complete the certificate, so a
            // candidate that cannot be cleaned is a failure, not a result.
            let mut dirty = 0.0f64;
            for i in 0..m {
                let wrong = match pins[i] {
                    PinState::Lower => res.y[i],
                    PinState::Upper => -res.y[i],
                    _ => continue,
                };
                dirty = dirty.max(wrong);
            }
            if adds == 0 && res.rp <= 10.0 * feas_tol && dirty <= sign_tol {
                return Some(res);
            }
            let mut worst: Option<(usize, f64, PinState)> = None;
            if adds == 0 && res.rp > 10.0 * feas_tol {
                // The pin set is primally inconsistent: some pinned rows
                // cannot reach their bounds at once. Release the one that
                // misses its bound worst — sign information is meaningless
                // on an infeasible system.
                for i in 0..m {
                    if no_drop[i] {
                        continue;
                    }
                    let b = match pins[i] {
                        PinState::Lower => l[i],
                        PinState::Upper => u[i],
                        _ => continue,
                    };
                    let miss = (ax[i] - b).abs();
                    if worst.as_ref().map_or(true, |&(_, w, _)| miss > w) {
                        worst = Some((i, miss, pins[i]));
                    }
                }
            } else {
                for i in 0..m {
                    if no_drop[i] {
                        continue;
                    }
                    let wrong = match pins[i] {
                        PinState::Lower => res.y[i],
                        PinState::Upper => -res.y[i],
                        _ => continue,
                    };
                    if wrong > sign_tol && worst.as_ref().map_or(true, |&(_, w, _)| wrong > w) {
                        worst = Some((i, wrong, pins[i]));
                    }
                }
            }
            last_dropped = None;
            if let Some((i, _, side)) = worst {
                pins[i] = PinState::Free;
                no_drop[i] = true;
                drops = 1;
                last_dropped = Some((i, side));
            }
            if std::env::var_os("QP_POLISH_DEBUG").is_some() {
                eprintln!(
                    "polish round: rp={:.2e} rd={:.2e} drops={drops} adds={adds} ynorm={:.2e}",
                    res.rp,
                    res.rd,
                    inf_norm(&res.y),
                );
            }
            if drops + adds == 0 {
                // Wrong signs remain but every carrier is released-once:
                // the walk is stuck at a vertex it cannot certify.
                if debug {
                    eprintln!("polish exit: stuck dirty at round {round} dirty={dirty:.2e}");
                }
                break;
            }
        }
        None
    }

    /// Solves the proximal QP with the pinned rows as equalities, with
    /// static regularization and iterative refinement. Returns the
    /// candidate and its constraint values.
    fn solve_pinned(
        &self,
        un: &Unscaled,
        l: &[f64],
        u: &[f64],
        pins: &[PinState],
    ) -> Option<(Unscaled, Vec<f64>)> {
        let n = self.n;
        let m = self.m;
        let st = &self.settings;
        let mut active: Vec<(usize, f64)> = Vec::new();
        for i in 0..m {
            match pins[i] {
                PinState::Free => {}
                PinState::Lower | PinState::Point => active.push((i, l[i])),
                PinState::Upper => active.push((i, u[i])),
            }
        }
        let ma = active.len();
        let total = n + ma;

        // Reduced KKT, unscaled, regularized to quasi-definiteness.
        let mut row_of = vec![usize::MAX; m];
        for (k, &(i, _)) in active.iter().enumerate() {
            row_of[i] = k;
        }
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..n {
            for (i, v) in self.p_upper_u.col(j) {
                trips.push((i, j, v));
            }
        }
        for j in 0..n {
            trips.push((j, j, st.polish_delta));
        }
        let mut act_trips: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..n {
            for (i, v) in self.a_u.col(j) {
                if row_of[i] != usize::MAX {
                    trips.push((j, n + row_of[i], v));
                    act_trips.push((row_of[i], j, v));
                }
            }
        }
        for k in 0..ma {
            trips.push((n + k, n + k, -st.polish_delta));
        }
        let kkt = CscMatrix::from_triplets(total, total, &trips);
        let a_act = CscMatrix::from_triplets(ma, n, &act_trips);
        let ordering = min_degree_order(&kkt);
        let factor = LdlFactor::new(&kkt, ordering).ok()?;

        // Proximal objective: regularize toward the incoming iterate, so
        // zero-cost flat directions (which the pins leave free) stay at
        // the iterate's feasible level instead of drifting to min-norm.
        let mut rhs = vec![0.0f64; total];
        for j in 0..n {
            rhs[j] = -self.q_u[j] + st.polish_delta * un.x[j];
        }
        for (k, &(_, b)) in active.iter().enumerate() {
            rhs[n + k] = b;
        }
        let mut sol = factor.solve(&rhs);
        // Refine against the proximal KKT operator (primal regularization
        // kept, dual regularization refined away). Near-dependent active
        // rows make the plain solve inexact at the delta scale times the
        // multiplier size, so iterate until the correction stops helping.
        let mut prev_resid = f64::INFINITY;
        for _ in 0..24 {
            let mut resid = rhs.clone();
            let xs = &sol[..n];
            let nus = &sol[n..];
            let mut px = vec![0.0f64; n];
            self.p_upper_u.sym_mul_add(xs, &mut px);
            let mut atnu = vec![0.0f64; n];
            a_act.mul_t_add(nus, &mut atnu);
            for j in 0..n {
                resid[j] -= px[j] + st.polish_delta * xs[j] + atnu[j];
            }
            let ax = a_act.mul(xs);
            for k in 0..ma {
                resid[n + k] -= ax[k];
            }
            let rnorm = inf_norm(&resid);
            if rnorm < 1e-14 * (1.0 + inf_norm(&rhs)) || rnorm > 0.9 * prev_resid {
                break;
            }
            prev_resid = rnorm;
            let corr = factor.solve(&resid);
            for t in 0..total {
                sol[t] += corr[t];
            }
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }

        let x: Vec<f64> = sol[..n].to_vec();
        let mut y = vec![0.0f64; m];
        for (k, &(i, _)) in active.iter().enumerate() {
            y[i] = sol[n + k];
        }
        let ax = self.a_u.mul(&x);
        let px = self.p_upper_u.sym_mul(&x);
        let aty = self.a_u.mul_t(&y);
        let mut rp = 0.0f64;
        let mut z_norm = 0.0f64;
        for i in 0..m {
            let z = ax[i].clamp(l[i], u[i]);
            z_norm = z_norm.max(z.abs());
            rp = rp.max((ax[i] - z).abs());
        }
        let mut rd = 0.0f64;
        for j in 0..n {
            rd = rd.max((px[j] + self.q_u[j] + aty[j]).abs());
        }
        let res = Unscaled {
            x,
            y,
            ax_norm: inf_norm(&ax),
            z_norm,
            px_norm: inf_norm(&px),
            aty_norm: inf_norm(&aty),
            q_norm: inf_norm(&self.q_u),
            rp,
            rd,
        };
        Some((res, ax))
    }
}

/// How the polish holds a constraint row during one pinned solve.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum PinState {
    Free,
    Lower,
    Upper,
    /// Point interval (`l == u`): always pinned, multiplier sign-free.
    Point,
}

/// Iterates mapped back to problem units plus the norms the termination
/// thresholds are built from.
struct Unscaled {
    x: Vec<f64>,
    y: Vec<f64>,
    ax_norm: f64,
    z_norm: f64,
    px_norm: f64,
    aty_norm: f64,
    q_norm: f64,
    rp: f64,
    rd: f64,
}

impl Unscaled {
    fn norm_scale_prim(&self) -> f64 {
        self.ax_norm.max(self.z_norm)
    }
    fn norm_scale_dual(&self) -> f64 {
        self.px_norm.max(self.aty_norm).max(self.q_norm)
    }
}
