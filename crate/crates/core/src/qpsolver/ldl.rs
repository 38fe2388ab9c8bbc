//! LDLᵀ factorization of symmetric quasi-definite matrices with fill-reducing
//! ordering. Up-looking factorization over the elimination tree; no pivoting,
//! which quasi-definiteness makes safe.

use super::sparse::CscMatrix;

/// Greedy minimum-degree ordering on the symmetric sparsity pattern of `a`
/// (upper triangle given). Ties break on the lower node index so the
/// permutation is deterministic.
pub fn min_degree_order(a: &CscMatrix) -> Vec<usize> {
    let n = a.ncols;
    // Adjacency sets of the undirected graph, diagonal ignored.
    let mut adj: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n];
    for j in 0..n {
        for (i, _) in a.col(j) {
            if i != j {
                adj[i].insert(j);
                adj[j].insert(i);
            }
        }
    }
    let mut perm = Vec::with_capacity(n);
    let mut degree: Vec<usize> = adj.iter().map(|s| s.len()).collect();
    // Ordered (degree, node) pairs; smallest degree first, index breaks ties.
    let mut queue: std::collections::BTreeSet<(usize, usize)> =
        (0..n).map(|v| (degree[v], v)).collect();
    while let Some(&(deg, v)) = queue.iter().next() {
        queue.remove(&(deg, v));
        perm.push(v);
        // Eliminated nodes are removed from every adjacency set, so `adj[v]`
        // holds only live neighbours. Connect them into a clique.
        let neigh: Vec<usize> = adj[v].iter().copied().collect();
        for &u in &neigh {
            adj[u].remove(&v);
        }
        for (k, &u) in neigh.iter().enumerate() {
            for &w in &neigh[k + 1..] {
                if adj[u].insert(w) {
                    adj[w].insert(u);
                }
            }
        }
        for &u in &neigh {
            let new_deg = adj[u].len();
            if new_deg != degree[u] {
                queue.remove(&(degree[u], u));
                degree[u] = new_deg;
                queue.insert((new_deg, u));
            }
        }
    }
    perm
}

/// Reverse Cuthill-McKee ordering, kept as a fallback profile-reducing
/// permutation for patterns where minimum degree behaves poorly.
pub fn rcm_order(a: &CscMatrix) -> Vec<usize> {
    let n = a.ncols;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..n {
        for (i, _) in a.col(j) {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    for start in 0..n {
        if visited[start] {
            continue;
        }
        // Start each component from its minimum-degree node.
        let mut comp_start = start;
        {
            let mut stack = vec![start];
            let mut seen = vec![start];
            let mut mark = std::collections::HashSet::new();
            mark.insert(start);
            while let Some(v) = stack.pop() {
                for &u in &adj[v] {
                    if mark.insert(u) {
                        stack.push(u);
                        seen.push(u);
                    }
                }
            }
            for &v in &seen {
                if adj[v].len() < adj[comp_start].len() {
                    comp_start = v;
                }
            }
        }
        visited[comp_start] = true;
        queue.push_back(comp_start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (adj[u].len(), u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Applies a symmetric permutation to an upper-triangular matrix:
/// returns upper triangle of P A Pᵀ where row `perm[k]` of A becomes row `k`.
pub fn permute_upper(a: &CscMatrix, perm: &[usize]) -> CscMatrix {
    let n = a.ncols;
    let mut inv = vec![0usize; n];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    let mut trips = Vec::with_capacity(a.nnz());
    for j in 0..n {
        for (i, v) in a.col(j) {
            let (mut r, mut c) = (inv[i], inv[j]);
            if r > c {
                std::mem::swap(&mut r, &mut c);
            }
            trips.push((r, c, v));
        }
    }
    CscMatrix::from_triplets(n, n, &trips)
}

/// Numeric LDLᵀ factor of a permuted matrix, with the permutation attached.
pub struct LdlFactor {
    pub n: usize,
    pub perm: Vec<usize>,
    /// Unit lower-triangular L in CSC, diagonal implicit.
    l_colptr: Vec<usize>,
    l_rowidx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    d_inv: Vec<f64>,
    /// Symbolic state kept for refactorization with identical pattern.
    etree: Vec<usize>,
    a_perm_pattern: CscMatrix,
    /// Positions in `a_perm_pattern.values` of each original entry, so a new
    /// set of values can be scattered without rebuilding the pattern.
    scatter: Vec<usize>,
}

const NONE: usize = usize::MAX;

#[derive(Debug, thiserror::Error)]
pub enum LdlError {
    #[error("matrix is structurally deficient: zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("matrix must be square upper-triangular with a full diagonal")]
    BadShape,
}

impl LdlFactor {
    /// Factors `a` (upper triangle, full diagonal required) as L D Lᵀ after
    /// applying `perm`.
    pub fn new(a: &CscMatrix, perm: Vec<usize>) -> Result<Self, LdlError> {
        let n = a.ncols;
        if a.nrows != n || perm.len() != n {
            return Err(LdlError::BadShape);
        }
        let mut inv_perm = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            inv_perm[p] = k;
        }
        // Permuted pattern plus the scatter map from original entry order.
        let mut trips: Vec<(usize, usize, usize)> = Vec::with_capacity(a.nnz());
        let mut entry = 0usize;
        for j in 0..n {
            for (i, _) in a.col(j) {
                let (mut r, mut c) = (inv_perm[i], inv_perm[j]);
                if r > c {
                    std::mem::swap(&mut r, &mut c);
                }
                trips.push((r, c, entry));
                entry += 1;
            }
        }
        // Build pattern CSC; duplicates are impossible since `a` held each
        // (i,j) once.
        let mut by_col: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for &(r, c, e) in &trips {
            by_col[c].push((r, e));
        }
        let mut col_ptr = vec![0usize];
        let mut row_idx = Vec::with_capacity(a.nnz());
        let mut scatter = vec![0usize; a.nnz()];
        for col in by_col.iter_mut() {
            col.sort_unstable();
            for &(r, e) in col.iter() {
                scatter[e] = row_idx.len();
                row_idx.push(r);
            }
            col_ptr.push(row_idx.len());
        }
        let a_perm_pattern = CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr,
            row_idx,
            values: vec![0.0; a.nnz()],
        };

        // Elimination tree and column counts of L.
        let mut etree = vec![NONE; n];
        let mut work = vec![NONE; n];
        let mut l_nz = vec![0usize; n];
        for j in 0..n {
            work[j] = j;
            for p in a_perm_pattern.col_ptr[j]..a_perm_pattern.col_ptr[j + 1] {
                let mut i = a_perm_pattern.row_idx[p];
                if i == j {
                    continue;
                }
                debug_assert!(i < j);
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    work[i] = j;
                    l_nz[i] += 1;
                    i = etree[i];
                }
            }
        }
        let mut l_colptr = vec![0usize; n + 1];
        for i in 0..n {
            l_colptr[i + 1] = l_colptr[i] + l_nz[i];
        }
        let total = l_colptr[n];
        let mut f = Self {
            n,
            perm,
            l_colptr,
            l_rowidx: vec![0; total],
            l_values: vec![0.0; total],
            d: vec![0.0; n],
            d_inv: vec![0.0; n],
            etree,
            a_perm_pattern,
            scatter,
        };
        f.refactor(a)?;
        Ok(f)
    }

    /// Recomputes the numeric factor for a matrix with *identical* sparsity
    /// pattern (same entry order as the matrix given to `new`).
    pub fn refactor(&mut self, a: &CscMatrix) -> Result<(), LdlError> {
        assert_eq!(a.nnz(), self.scatter.len(), "pattern mismatch");
        for (e, &pos) in self.scatter.iter().enumerate() {
            self.a_perm_pattern.values[pos] = a.values[e];
        }
        let n = self.n;
        let ap = &self.a_perm_pattern;
        let mut y = vec![0.0f64; n];
        let mut marked = vec![false; n];
        let mut pattern: Vec<usize> = Vec::with_capacity(n);
        let mut chain: Vec<usize> = Vec::with_capacity(n);
        // Next write slot per column of L.
        let mut next = self.l_colptr[..n].to_vec();

        for k in 0..n {
            // Gather sparse column k of the permuted upper triangle.
            pattern.clear();
            let mut diag = 0.0;
            let mut have_diag = false;
            for p in ap.col_ptr[k]..ap.col_ptr[k + 1] {
                let i = ap.row_idx[p];
                let v = ap.values[p];
                if i == k {
                    diag = v;
                    have_diag = true;
                    continue;
                }
                y[i] = v;
                // Walk toward the root collecting unvisited pattern nodes.
                let mut node = i;
                chain.clear();
                while node != NONE && node < k && !marked[node] {
                    marked[node] = true;
                    chain.push(node);
                    node = self.etree[node];
                }
                // Reversing each chain yields a topological order overall.
                for &c in chain.iter().rev() {
                    pattern.push(c);
                }
            }
            if !have_diag {
                return Err(LdlError::ZeroPivot(k));
            }
            let mut dk = diag;
            // Sparse triangular solve, consuming pattern nodes from the last
            // pushed chain backwards keeps dependencies resolved.
            for idx in (0..pattern.len()).rev() {
                let c = pattern[idx];
                let yc = y[c];
                for p in self.l_colptr[c]..next[c] {
                    y[self.l_rowidx[p]] -= self.l_values[p] * yc;
                }
                let lkc = yc * self.d_inv[c];
                dk -= yc * lkc;
                self.l_rowidx[next[c]] = k;
                self.l_values[next[c]] = lkc;
                next[c] += 1;
                y[c] = 0.0;
                marked[c] = false;
            }
            if dk == 0.0 || !dk.is_finite() {
                return Err(LdlError::ZeroPivot(k));
            }
            self.d[k] = dk;
            self.d_inv[k] = 1.0 / dk;
        }
        Ok(())
    }

    /// Solves A x = b using the stored factor. `b` is in the original
    /// (unpermuted) ordering.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|k| b[self.perm[k]]).collect();
        // (I + L) z = b
        for c in 0..n {
            let xc = x[c];
            if xc != 0.0 {
                for p in self.l_colptr[c]..self.l_colptr[c + 1] {
                    x[self.l_rowidx[p]] -= self.l_values[p] * xc;
                }
            }
        }
        for k in 0..n {
            x[k] *= self.d_inv[k];
        }
        // (I + Lᵀ) w = z
        for c in (0..n).rev() {
            let mut acc = x[c];
            for p in self.l_colptr[c]..self.l_colptr[c + 1] {
                acc -= self.l_values[p] * x[self.l_rowidx[p]];
            }
            x[c] = acc;
        }
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[self.perm[k]] = x[k];
        }
        out
    }

    /// Number of stored off-diagonal entries of L.
    pub fn l_nnz(&self) -> usize {
        self.l_rowidx.len()
    }

    /// Signs of D, as (positives, negatives). Quasi-definite KKT systems must
    /// match their block dimensions.
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d.iter().filter(|&&d| d > 0.0).count();
        (pos, self.n - pos)
    }
}
