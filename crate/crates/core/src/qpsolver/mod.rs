//! Convex quadratic programming: minimize ½xᵀPx + qᵀx subject to l ≤ Ax ≤ u.
//!
//! The solver is an operator-splitting (ADMM) method with a direct sparse
//! LDLᵀ linear-system core, Ruiz equilibration, per-row step sizes, and an
//! active-set polish step for high-accuracy solutions. Problems whose data
//! matrices stay fixed while bounds vary can be prepared once and re-solved
//! cheaply against the cached factorization.

pub mod ldl;
pub mod sparse;

mod admm;

pub use admm::{Prepared, Settings, Status, WarmStart};

use sparse::{inf_norm, CscMatrix};

/// A convex QP instance. `p` is the full symmetric quadratic term.
#[derive(Debug, Clone)]
pub struct QuadProgram {
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub a: CscMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
    /// Optional variable names for diagnostics, empty or length n.
    pub var_names: Vec<String>,
    /// Optional constraint row names for diagnostics, empty or length m.
    pub con_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub status: Status,
    pub objective: f64,
    pub prim_res: f64,
    pub dual_res: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Unbounded-ray or infeasibility certificate when status says so.
    pub certificate: Option<Vec<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bounds inverted at row {row}: l={l} > u={u}")]
    BoundsInverted { row: usize, l: f64, u: f64 },
    #[error("quadratic term is not symmetric")]
    NotSymmetric,
    #[error("quadratic term has a negative eigenvalue {0:.3e}")]
    NotPsd(f64),
    #[error("non-finite entry in problem data: {0}")]
    NonFinite(String),
    #[error("linear system factorization failed: {0}")]
    Factorization(#[from] ldl::LdlError),
    #[error("iterates diverged (non-finite values at iteration {0})")]
    Diverged(usize),
    #[error("dump parse error at line {line}: {msg}")]
    DumpParse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl QuadProgram {
    pub fn new(p: CscMatrix, q: Vec<f64>, a: CscMatrix, l: Vec<f64>, u: Vec<f64>) -> Self {
        Self {
            p,
            q,
            a,
            l,
            u,
            var_names: Vec::new(),
            con_names: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    /// Structural checks. The PSD check runs a dense eigendecomposition and
    /// is skipped above 400 variables; convexity of large instances is the
    /// caller's contract.
    pub fn validate(&self) -> Result<(), QpError> {
        let (n, m) = (self.n(), self.m());
        if self.p.nrows != n || self.p.ncols != n {
            return Err(QpError::Dimension(format!(
                "P is {}x{}, expected {n}x{n}",
                self.p.nrows, self.p.ncols
            )));
        }
        if self.a.nrows != m || self.a.ncols != n {
            return Err(QpError::Dimension(format!(
                "A is {}x{}, expected {m}x{n}",
                self.a.nrows, self.a.ncols
            )));
        }
        if self.u.len() != m {
            return Err(QpError::Dimension(format!(
                "u has length {}, expected {m}",
                self.u.len()
            )));
        }
        if !self.var_names.is_empty() && self.var_names.len() != n {
            return Err(QpError::Dimension("var_names length".into()));
        }
        if !self.con_names.is_empty() && self.con_names.len() != m {
            return Err(QpError::Dimension("con_names length".into()));
        }
        if self.p.has_nan() || self.a.has_nan() {
            return Err(QpError::NonFinite("matrix entry".into()));
        }
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("q entry".into()));
        }
        for i in 0..m {
            if self.l[i].is_nan() || self.u[i].is_nan() {
                return Err(QpError::NonFinite(format!("bound row {i}")));
            }
            if self.l[i] > self.u[i] {
                return Err(QpError::BoundsInverted {
                    row: i,
                    l: self.l[i],
                    u: self.u[i],
                });
            }
        }
        if !self.p.is_symmetric(1e-10) {
            return Err(QpError::NotSymmetric);
        }
        if n <= 400 {
            let dense = self.p.to_dense();
            let eig = dense.symmetric_eigenvalues();
            let min = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let scale = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
            if min < -1e-9 * scale {
                return Err(QpError::NotPsd(min));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.mul(x);
        let mut v = 0.0;
        for i in 0..x.len() {
            v += 0.5 * x[i] * px[i] + self.q[i] * x[i];
        }
        v
    }
}

/// Unscaled KKT residuals of a candidate primal-dual pair:
/// primal = max distance of (Ax)ᵢ from [lᵢ, uᵢ], dual = ‖Px + q + Aᵀy‖∞.
pub fn kkt_residuals(qp: &QuadProgram, x: &[f64], y: &[f64]) -> (f64, f64) {
    let ax = qp.a.mul(x);
    let mut prim = 0.0f64;
    for i in 0..qp.m() {
        let lo = qp.l[i] - ax[i];
        let hi = ax[i] - qp.u[i];
        prim = prim.max(lo.max(hi).max(0.0));
    }
    let mut grad = qp.p.mul(x);
    for i in 0..qp.n() {
        grad[i] += qp.q[i];
    }
    qp.a.mul_t_add(y, &mut grad);
    (prim, inf_norm(&grad))
}

/// One-shot solve with fresh internal state.
pub fn solve(qp: &QuadProgram, settings: &Settings) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let prepared = Prepared::new(qp, settings.clone())?;
    prepared.solve_bounds(&qp.l, &qp.u, None)
}

fn fmt_bound(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.17e}")
    }
}

/// Writes a problem as a plain-text triplet dump, suitable for bug reports
/// and for replaying solves from the command line.
pub fn write_dump<W: std::io::Write>(qp: &QuadProgram, mut w: W) -> Result<(), QpError> {
    writeln!(w, "# qp dump v1")?;
    writeln!(w, "n {}", qp.n())?;
    writeln!(w, "m {}", qp.m())?;
    writeln!(w, "P {}", qp.p.nnz())?;
    for j in 0..qp.p.ncols {
        for (i, v) in qp.p.col(j) {
            writeln!(w, "{i} {j} {v:.17e}")?;
        }
    }
    writeln!(w, "q")?;
    for v in &qp.q {
        writeln!(w, "{v:.17e}")?;
    }
    writeln!(w, "A {}", qp.a.nnz())?;
    for j in 0..qp.a.ncols {
        for (i, v) in qp.a.col(j) {
            writeln!(w, "{i} {j} {v:.17e}")?;
        }
    }
    writeln!(w, "l")?;
    for &v in &qp.l {
        writeln!(w, "{}", fmt_bound(v))?;
    }
    writeln!(w, "u")?;
    for &v in &qp.u {
        writeln!(w, "{}", fmt_bound(v))?;
    }
    Ok(())
}

struct DumpReader {
    lines: Vec<String>,
    idx: usize,
}

impl DumpReader {
    fn err(&self, msg: impl Into<String>) -> QpError {
        QpError::DumpParse {
            line: self.idx,
            msg: msg.into(),
        }
    }

    fn next(&mut self, expect: &str) -> Result<String, QpError> {
        loop {
            if self.idx >= self.lines.len() {
                self.idx = self.lines.len();
                return Err(self.err(format!("unexpected end of file, wanted {expect}")));
            }
            let line = self.lines[self.idx].trim().to_string();
            self.idx += 1;
            if !line.is_empty() && !line.starts_with('#') {
                return Ok(line);
            }
        }
    }

    fn header(&mut self, tag: &str) -> Result<usize, QpError> {
        let line = self.next(tag)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(self.err(format!("expected `{tag} <count>`, got `{line}`")));
        }
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("bad count in `{line}`")))
    }

    fn keyword(&mut self, tag: &str) -> Result<(), QpError> {
        if self.next(tag)? != tag {
            return Err(self.err(format!("expected `{tag}`")));
        }
        Ok(())
    }

    fn triplets(&mut self, count: usize) -> Result<Vec<(usize, usize, f64)>, QpError> {
        let mut trips = Vec::with_capacity(count);
        for _ in 0..count {
            let line = self.next("matrix entry")?;
            let mut parts = line.split_whitespace();
            let parsed = (|| {
                Some((
                    parts.next()?.parse().ok()?,
                    parts.next()?.parse().ok()?,
                    parts.next()?.parse().ok()?,
                ))
            })();
            match parsed {
                Some(t) => trips.push(t),
                None => return Err(self.err(format!("bad triplet `{line}`"))),
            }
        }
        Ok(trips)
    }

    fn bounds(&mut self, count: usize) -> Result<Vec<f64>, QpError> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let line = self.next("bound value")?;
            let v = match line.as_str() {
                "inf" | "+inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                s => s
                    .parse()
                    .map_err(|_| self.err(format!("bad value `{s}`")))?,
            };
            out.push(v);
        }
        Ok(out)
    }
}

/// Reads the dump format produced by [`write_dump`].
pub fn read_dump<R: std::io::BufRead>(r: R) -> Result<QuadProgram, QpError> {
    let mut lines = Vec::new();
    for line in r.lines() {
        lines.push(line?);
    }
    let mut rd = DumpReader { lines, idx: 0 };
    let n = rd.header("n")?;
    let m = rd.header("m")?;
    let pn = rd.header("P")?;
    let p = CscMatrix::from_triplets(n, n, &rd.triplets(pn)?);
    rd.keyword("q")?;
    let q = rd.bounds(n)?;
    let an = rd.header("A")?;
    let a = CscMatrix::from_triplets(m, n, &rd.triplets(an)?);
    rd.keyword("l")?;
    let l = rd.bounds(m)?;
    rd.keyword("u")?;
    let u = rd.bounds(m)?;
    Ok(QuadProgram::new(p, q, a, l, u))
}
