//! Dense linear algebra and deterministic randomness for the fitting code.
//!
//! Everything here is plain row-major `f64` with sequential accumulation, so
//! results are bit-identical across runs and platforms given the same inputs
//! and seeds. Sizes in this crate stay desk-scale (inner dimensions up to a
//! few hundred), so the solvers favour simplicity over BLAS-grade throughput.

use crate::error::{Error, Result};

/// Dense 2-D matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "from_vec: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// New matrix holding the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    /// New matrix holding the given columns, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (c, &j) in idx.iter().enumerate() {
                dst[c] = src[j];
            }
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Exact dense product `a * b` with 64-bit accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "matmul: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order: the inner loop runs over contiguous rows of b and out.
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Ridge-regularized least squares with an offset center:
/// solves `(G'G + lambda I) P = G'Y + lambda P0`.
///
/// With `lambda = 0` this is the plain normal-equation solve and fails if
/// `G'G` is singular.
pub fn ridge_solve(g: &Matrix, y: &Matrix, lambda: f64, p0: &Matrix) -> Result<Matrix> {
    if g.rows != y.rows {
        return Err(Error::ShapeMismatch(format!(
            "ridge_solve: G has {} rows, Y has {}",
            g.rows, y.rows
        )));
    }
    if p0.rows != g.cols || p0.cols != y.cols {
        return Err(Error::ShapeMismatch(format!(
            "ridge_solve: P0 is {}x{}, expected {}x{}",
            p0.rows, p0.cols, g.cols, y.cols
        )));
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidParam(format!(
            "ridge_solve: lambda must be a finite non-negative real, got {lambda}"
        )));
    }
    let p = g.cols;
    // Gram matrix G'G, accumulated row by row (symmetric, fill both halves).
    let mut gram = Matrix::zeros(p, p);
    for r in 0..g.rows {
        let row = g.row(r);
        for i in 0..p {
            let gi = row[i];
            if gi == 0.0 {
                continue;
            }
            let dst = &mut gram.data[i * p..i * p + p];
            for (d, &gj) in dst.iter_mut().zip(row) {
                *d += gi * gj;
            }
        }
    }
    for i in 0..p {
        gram.data[i * p + i] += lambda;
    }
    // Right-hand side G'Y + lambda P0.
    let mut rhs = matmul(&g.transpose(), y)?;
    if lambda > 0.0 {
        for (r, &c) in rhs.data.iter_mut().zip(&p0.data) {
            *r += lambda * c;
        }
    }
    cholesky_solve(&gram, &rhs)
}

/// Solve `A X = B` for symmetric positive definite `A` via Cholesky.
fn cholesky_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    let mut l = a.clone();
    let scale = (0..n)
        .map(|i| l.data[i * n + i].abs())
        .fold(0.0, f64::max)
        .max(1.0);
    for j in 0..n {
        for k in 0..j {
            let ljk = l.data[j * n + k];
            if ljk == 0.0 {
                continue;
            }
            for i in j..n {
                l.data[i * n + j] -= l.data[i * n + k] * ljk;
            }
        }
        let d = l.data[j * n + j];
        if !(d > 1e-12 * scale) {
            return Err(Error::SingularSystem(format!(
                "pivot {d:.3e} at column {j}; refit with lambda > 0"
            )));
        }
        let inv = 1.0 / d.sqrt();
        for i in j..n {
            l.data[i * n + j] *= inv;
        }
    }
    // Forward and back substitution per right-hand-side column.
    let mut x = b.clone();
    let m = b.cols;
    for c in 0..m {
        for i in 0..n {
            let mut s = x.data[i * m + c];
            for k in 0..i {
                s -= l.data[i * n + k] * x.data[k * m + c];
            }
            x.data[i * m + c] = s / l.data[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x.data[i * m + c];
            for k in i + 1..n {
                s -= l.data[k * n + i] * x.data[k * m + c];
            }
            x.data[i * m + c] = s / l.data[i * n + i];
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Deterministic random number generation
// ---------------------------------------------------------------------------

/// Portable deterministic generator (xoshiro256**, seeded via splitmix64).
///
/// The same seed yields the same stream on every platform; all stochastic
/// fitting in this crate draws from it.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

pub const RNG_ALGORITHM: &str = "xoshiro256**";

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        let state = [
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
            splitmix64(&mut s),
        ];
        Rng { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a tagged sub-task, derived from the original
    /// seed only. Lets sub-fits (one per codebook, per layer, per experiment
    /// cell) run in any order, or in parallel, with identical results.
    pub fn derive(&self, tag: u64) -> Rng {
        let mut s = self.seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
        let _ = splitmix64(&mut s);
        Rng::new(splitmix64(&mut s))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i + 1);
            slice.swap(i, j);
        }
    }

    /// `k` distinct indices sampled from [0, n), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Empty clusters are re-seeded to the point farthest from its assigned
/// centroid, so exactly `k` centroids always come back. The within-cluster
/// sum of squares is non-increasing across iterations.
pub fn kmeans(x: &Matrix, k: usize, rng: &mut Rng, iters: usize) -> Result<(Matrix, Vec<usize>)> {
    let n = x.rows();
    let d = x.cols();
    if n == 0 {
        return Err(Error::InvalidParam("kmeans: empty input".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidParam(format!(
            "kmeans: k={k} not in [1, {n}]"
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidParam("kmeans: iters must be >= 1".into()));
    }

    // k-means++ seeding.
    let mut centroids = Matrix::zeros(k, d);
    let mut chosen = vec![false; n];
    let first = rng.next_below(n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    chosen[first] = true;
    let mut best_d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = best_d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut sel = None;
            for (i, &w) in best_d2.iter().enumerate() {
                acc += w;
                if acc > r {
                    sel = Some(i);
                    break;
                }
            }
            sel.unwrap_or_else(|| {
                // Fell off the end from rounding; take the last positive weight.
                best_d2.iter().rposition(|&w| w > 0.0).unwrap_or(n - 1)
            })
        } else {
            // All remaining points coincide with chosen centroids.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for i in 0..n {
            let d2 = sq_dist(x.row(i), centroids.row(c));
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
    }

    let assign = lloyd_iterate(x, &mut centroids, iters);
    Ok((centroids, assign))
}

/// Lloyd iterations from existing centroids (mutated in place); returns the
/// final assignments. Empty clusters are re-seeded to the point farthest from
/// its assigned centroid, which keeps the objective non-increasing.
pub(crate) fn lloyd_iterate(x: &Matrix, centroids: &mut Matrix, iters: usize) -> Vec<usize> {
    let n = x.rows();
    let d = x.cols();
    let k = centroids.rows();
    let mut assign = vec![0usize; n];
    let assign_all = |cents: &Matrix, assign: &mut Vec<usize>| {
        // Ties go to the lower centroid index.
        for i in 0..n {
            let row = x.row(i);
            let mut best = 0usize;
            let mut bd = sq_dist(row, cents.row(0));
            for c in 1..k {
                let d2 = sq_dist(row, cents.row(c));
                if d2 < bd {
                    bd = d2;
                    best = c;
                }
            }
            assign[i] = best;
        }
    };
    for _ in 0..iters {
        assign_all(centroids, &mut assign);
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_i = 0usize;
            let mut far_d = -1.0;
            for i in 0..n {
                if counts[assign[i]] <= 1 {
                    continue; // don't empty a singleton
                }
                let d2 = sq_dist(x.row(i), centroids.row(assign[i]));
                if d2 > far_d {
                    far_d = d2;
                    far_i = i;
                }
            }
            counts[assign[far_i]] -= 1;
            assign[far_i] = c;
            counts[c] = 1;
            let point = x.row(far_i).to_vec();
            centroids.row_mut(c).copy_from_slice(&point);
        }
        // Update step.
        let mut sums = Matrix::zeros(k, d);
        for i in 0..n {
            let dst = sums.row_mut(assign[i]);
            for (s, &v) in dst.iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                let dst = centroids.row_mut(c);
                for (d2, &s) in dst.iter_mut().zip(sums.row(c)) {
                    *d2 = s * inv;
                }
            }
        }
    }
    assign_all(centroids, &mut assign);
    assign
}

/// Within-cluster sum of squared distances for a clustering.
pub fn kmeans_objective(x: &Matrix, centroids: &Matrix, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(x.row(i), centroids.row(c)))
        .sum()
}

// ---------------------------------------------------------------------------
// SVD (one-sided Jacobi)
// ---------------------------------------------------------------------------

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Full SVD of a square matrix via one-sided Jacobi rotations.
///
/// Returns `(u, s, vt)` with `m = u * diag(s) * vt`, singular values
/// non-negative in descending order.
pub fn svd_square(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if m.rows != m.cols {
        return Err(Error::NonSquare {
            rows: m.rows,
            cols: m.cols,
        });
    }
    if !m.is_finite() {
        return Err(Error::InvalidParam("svd_square: non-finite input".into()));
    }
    let n = m.rows;
    // Work on columns: w starts as m, v accumulates the right rotations, so
    // m * v = w at all times and m = w * v'.
    let mut w = m.transpose(); // row r of `w` is column r of m
    let mut v = Matrix::identity(n); // row r is column r of V
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                {
                    let wp = w.row(p);
                    let wq = w.row(q);
                    for (a, b) in wp.iter().zip(wq) {
                        alpha += a * a;
                        beta += b * b;
                        gamma += a * b;
                    }
                }
                let denom = (alpha * beta).sqrt();
                if denom == 0.0 || gamma.abs() <= JACOBI_TOL * denom {
                    continue;
                }
                off = off.max(gamma.abs() / denom);
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if off <= JACOBI_TOL {
            break;
        }
    }
    // Column norms are the singular values.
    let mut order: Vec<usize> = (0..n).collect();
    let sigmas: Vec<f64> = (0..n)
        .map(|r| w.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| sigmas[b].partial_cmp(&sigmas[a]).unwrap().then(a.cmp(&b)));

    let mut u = Matrix::zeros(n, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    let scale = sigmas.iter().fold(0.0f64, |a, &b| a.max(b)).max(1.0);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &r in &order {
        let sig = sigmas[r];
        s_out.push(sig);
        let col = if sig > 1e-14 * scale {
            w.row(r).iter().map(|x| x / sig).collect::<Vec<f64>>()
        } else {
            orthonormal_complement(&u_cols, n)
        };
        u_cols.push(col);
    }
    for (k, &r) in order.iter().enumerate() {
        for i in 0..n {
            u.set(i, k, u_cols[k][i]);
            vt.set(k, i, v.at(r, i));
        }
    }
    Ok((u, s_out, vt))
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    debug_assert!(p < q);
    let cols = m.cols;
    let (head, tail) = m.data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..p * cols + cols];
    let rq = &mut tail[..cols];
    for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Unit vector orthogonal to all the given columns (Gram-Schmidt over the
/// standard basis). Used to complete U for zero singular values.
fn orthonormal_complement(cols: &[Vec<f64>], n: usize) -> Vec<f64> {
    for basis in 0..n {
        let mut cand = vec![0.0; n];
        cand[basis] = 1.0;
        for col in cols {
            let dot: f64 = cand.iter().zip(col).map(|(a, b)| a * b).sum();
            for (c, &u) in cand.iter_mut().zip(col) {
                *c -= dot * u;
            }
        }
        let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for c in &mut cand {
                *c /= norm;
            }
            return cand;
        }
    }
    // Unreachable for consistent inputs; keep a deterministic fallback.
    let mut e = vec![0.0; n];
    e[0] = 1.0;
    e
}

// ---------------------------------------------------------------------------
// Maximum-weight bipartite matching (Hungarian algorithm)
// ---------------------------------------------------------------------------

/// Permutation maximizing `sum_i w[i, pi(i)]` for square `w`.
///
/// Among assignments of equal value the lexicographically smallest `pi` is
/// returned (resolved on the tight-edge graph of the optimal dual solution).
pub fn hungarian_max(w: &Matrix) -> Result<Vec<usize>> {
    if w.rows != w.cols {
        return Err(Error::NonSquare {
            rows: w.rows,
            cols: w.cols,
        });
    }
    if !w.is_finite() {
        return Err(Error::InvalidParam("hungarian_max: non-finite input".into()));
    }
    let n = w.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    // Minimize cost = -w via shortest augmenting paths with dual potentials.
    let cost = |i: usize, j: usize| -w.at(i, j);
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![n; n + 1]; // owner[j] = row matched to column j; column n is virtual
    for i in 0..n {
        owner[n] = i;
        let mut j0 = n;
        let mut minv = vec![inf; n + 1];
        let mut way = vec![n; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == n {
                break;
            }
        }
        // Unwind the augmenting path.
        while j0 != n {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        }
    }
    let mut matching = vec![0usize; n];
    for j in 0..n {
        matching[owner[j]] = j;
    }

    // Every optimal assignment lives on the tight edges of the dual solution;
    // pick the lexicographically smallest matching among them.
    let scale = w.data.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let eps = 1e-9 * scale;
    let mut adj: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut tight: Vec<usize> = (0..n)
            .filter(|&j| (cost(i, j) - u[i] - v[j]).abs() <= eps)
            .collect();
        if !tight.contains(&matching[i]) {
            tight.push(matching[i]);
            tight.sort_unstable();
        }
        adj.push(tight);
    }
    Ok(lex_smallest_matching(n, &adj, matching))
}

/// Lexicographically smallest perfect matching of a bipartite graph that is
/// already known to have one (`initial` is a witness).
fn lex_smallest_matching(n: usize, adj: &[Vec<usize>], initial: Vec<usize>) -> Vec<usize> {
    let mut mate = initial; // row -> col, stays a perfect matching throughout
    let mut col_owner = vec![0usize; n];
    for (r, &c) in mate.iter().enumerate() {
        col_owner[c] = r;
    }
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        for &j in &adj[i] {
            if fixed_col[j] {
                continue;
            }
            if mate[i] == j {
                break; // already the smallest feasible column
            }
            if j > mate[i] {
                break; // adj is ascending; no smaller option left
            }
            // Try to steal column j: rematch its current owner among the
            // unfixed columns, with row i's old column freed up.
            let displaced = col_owner[j];
            let old = mate[i];
            mate[i] = j;
            col_owner[j] = i;
            let mut col_free = vec![false; n];
            col_free[old] = true;
            let mut visited = vec![false; n];
            if rematch(displaced, adj, &fixed_col, &mut col_free, &mut visited, &mut mate, &mut col_owner, i) {
                break; // success: matching updated, j is i's column
            }
            // Roll back.
            mate[i] = old;
            col_owner[old] = i;
            col_owner[j] = displaced;
        }
        fixed_col[mate[i]] = true;
    }
    mate
}

#[allow(clippy::too_many_arguments)]
fn rematch(
    row: usize,
    adj: &[Vec<usize>],
    fixed_col: &[bool],
    col_free: &mut Vec<bool>,
    visited: &mut Vec<bool>,
    mate: &mut Vec<usize>,
    col_owner: &mut Vec<usize>,
    barrier_row: usize,
) -> bool {
    for &c in &adj[row] {
        if fixed_col[c] || visited[c] {
            continue;
        }
        visited[c] = true;
        let free = col_free[c];
        if free {
            col_free[c] = false;
            mate[row] = c;
            col_owner[c] = row;
            return true;
        }
        let owner = col_owner[c];
        if owner == barrier_row || owner == row {
            continue;
        }
        if rematch(owner, adj, fixed_col, col_free, visited, mate, col_owner, barrier_row) {
            mate[row] = c;
            col_owner[c] = row;
            return true;
        }
    }
    false
}
