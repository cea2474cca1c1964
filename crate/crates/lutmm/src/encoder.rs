//! Encoding functions: subvector -> bucket index, one per codebook.
//!
//! Two encoders are provided. The hash tree is a 4-level balanced binary
//! regression tree that maps a subvector to one of 16 buckets with exactly
//! 4 scalar comparisons; each level splits on a single dimension shared by
//! every node of that level, with one threshold per node. The PQ encoder is
//! the exact nearest-prototype baseline (a k-means codebook scan).

use crate::error::{Error, Result};
use crate::linalg::{kmeans, Matrix, Rng};
use crate::partition::PartitionSpec;

/// Buckets per codebook; the tree depth is `log2` of this.
pub const NUM_BUCKETS: usize = 16;
pub const TREE_LEVELS: usize = 4;

/// Rows actually used to learn tree split dims and thresholds; training sets
/// larger than this are subsampled (bucket means still use every row).
const MAX_TREE_FIT_ROWS: usize = 4096;

/// Lloyd iterations for the PQ codebook fit.
const PQ_KMEANS_ITERS: usize = 25;

/// 4-level hash tree: `split_dims[t]` is the dimension each level compares,
/// `thresholds[t]` holds one threshold per node (2^t nodes at level t).
#[derive(Debug, Clone, PartialEq)]
pub struct HashTree {
    pub split_dims: [usize; TREE_LEVELS],
    pub thresholds: [Vec<f64>; TREE_LEVELS],
}

impl HashTree {
    /// Bucket index for one subvector: exactly 4 comparisons, greater-than
    /// goes right.
    #[inline]
    pub fn encode(&self, sub: &[f64]) -> usize {
        self.encode_counted(sub).0
    }

    /// As [`encode`](Self::encode), also reporting the number of scalar
    /// comparisons performed (always 4; used by instrumentation tests).
    #[inline]
    pub fn encode_counted(&self, sub: &[f64]) -> (usize, u32) {
        let mut node = 0usize;
        let mut comparisons = 0u32;
        for t in 0..TREE_LEVELS {
            let bit = usize::from(sub[self.split_dims[t]] > self.thresholds[t][node]);
            comparisons += 1;
            node = node * 2 + bit;
        }
        (node, comparisons)
    }
}

/// Exact PQ encoder: 16 prototypes, nearest one wins.
#[derive(Debug, Clone, PartialEq)]
pub struct PqEncoder {
    pub prototypes: Matrix,
}

impl PqEncoder {
    /// Index of the nearest prototype (squared Euclidean, ties to the lower
    /// index).
    pub fn encode(&self, sub: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for k in 0..self.prototypes.rows() {
            let mut d = 0.0;
            for (a, b) in sub.iter().zip(self.prototypes.row(k)) {
                let t = a - b;
                d += t * t;
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Either encoder behind one dispatch point.
#[derive(Debug, Clone, PartialEq)]
pub enum CodebookEncoder {
    Tree(HashTree),
    Pq(PqEncoder),
}

impl CodebookEncoder {
    #[inline]
    pub fn encode(&self, sub: &[f64]) -> usize {
        match self {
            CodebookEncoder::Tree(t) => t.encode(sub),
            CodebookEncoder::Pq(p) => p.encode(sub),
        }
    }
}

/// Codes for N rows across C codebooks; every entry is in [0, 16).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    n: usize,
    c: usize,
    codes: Vec<u8>,
}

impl Encoding {
    pub fn new(n: usize, c: usize, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != n * c {
            return Err(Error::ShapeMismatch(format!(
                "encoding: {n} rows x {c} codebooks needs {} codes, got {}",
                n * c,
                codes.len()
            )));
        }
        if codes.iter().any(|&v| v as usize >= NUM_BUCKETS) {
            return Err(Error::InvalidParam("encoding: code out of range".into()));
        }
        Ok(Encoding { n, c, codes })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn codebooks(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn at(&self, row: usize, codebook: usize) -> usize {
        self.codes[row * self.c + codebook] as usize
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[u8] {
        &self.codes[row * self.c..(row + 1) * self.c]
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// Dense one-hot expansion, `n x (16 C)`.
    pub fn to_onehot(&self) -> Matrix {
        let mut g = Matrix::zeros(self.n, NUM_BUCKETS * self.c);
        for i in 0..self.n {
            for cb in 0..self.c {
                g.set(i, cb * NUM_BUCKETS + self.at(i, cb), 1.0);
            }
        }
        g
    }
}

/// Learn a hash tree on one subspace's training rows.
///
/// Greedy per level: every candidate dimension is scored by the total
/// two-sided reconstruction SSE after optimally thresholding each current
/// bucket on it; the best dimension is shared by the whole level. Returns the
/// tree plus the 16 x d_c bucket means over all rows (buckets no row reached
/// inherit the mean of their nearest populated ancestor).
pub fn learn_hash_tree(x_sub: &Matrix, rng: &mut Rng) -> Result<(HashTree, Matrix)> {
    let n = x_sub.rows();
    let d = x_sub.cols();
    if n < NUM_BUCKETS {
        return Err(Error::InvalidParam(format!(
            "learn_hash_tree: need at least {NUM_BUCKETS} rows, got {n}"
        )));
    }
    let fit_rows: Vec<usize> = if n > MAX_TREE_FIT_ROWS {
        let mut idx = rng.sample_indices(n, MAX_TREE_FIT_ROWS);
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let nf = fit_rows.len();
    let row_norm_sq: Vec<f64> = fit_rows
        .iter()
        .map(|&i| x_sub.row(i).iter().map(|v| v * v).sum())
        .collect();

    let mut split_dims = [0usize; TREE_LEVELS];
    let mut thresholds: [Vec<f64>; TREE_LEVELS] = Default::default();
    // bucket[i] = node index of fit row i at the current level.
    let mut bucket = vec![0usize; nf];
    for level in 0..TREE_LEVELS {
        let n_nodes = 1 << level;
        // Group fit rows by bucket.
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
        for (i, &b) in bucket.iter().enumerate() {
            members[b].push(i);
        }
        let mut best_dim = 0usize;
        let mut best_total = f64::INFINITY;
        let mut best_thresholds = vec![0.0f64; n_nodes];
        for dim in 0..d {
            let mut total = 0.0f64;
            let mut thr = vec![0.0f64; n_nodes];
            for (node, rows_here) in members.iter().enumerate() {
                let (sse, t) = best_split(x_sub, &fit_rows, &row_norm_sq, rows_here, dim);
                total += sse;
                thr[node] = t;
            }
            if total < best_total {
                best_total = total;
                best_dim = dim;
                best_thresholds = thr;
            }
        }
        // Empty buckets inherit the parent's threshold.
        if level > 0 {
            for node in 0..n_nodes {
                if members[node].is_empty() {
                    best_thresholds[node] = thresholds[level - 1][node / 2];
                }
            }
        }
        split_dims[level] = best_dim;
        thresholds[level] = best_thresholds;
        for (i, b) in bucket.iter_mut().enumerate() {
            let v = x_sub.at(fit_rows[i], best_dim);
            *b = *b * 2 + usize::from(v > thresholds[level][*b]);
        }
    }
    let tree = HashTree {
        split_dims,
        thresholds,
    };

    // Bucket means over the full training set.
    let mut sums = Matrix::zeros(NUM_BUCKETS, d);
    let mut counts = [0usize; NUM_BUCKETS];
    for i in 0..n {
        let row = x_sub.row(i);
        let k = tree.encode(row);
        counts[k] += 1;
        for (s, &v) in sums.row_mut(k).iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut means = Matrix::zeros(NUM_BUCKETS, d);
    for k in 0..NUM_BUCKETS {
        if counts[k] > 0 {
            let inv = 1.0 / counts[k] as f64;
            for (m, &s) in means.row_mut(k).iter_mut().zip(sums.row(k)) {
                *m = s * inv;
            }
        }
    }
    // Fill empty buckets from the nearest populated ancestor (aggregate leaf
    // statistics up the tree; the root always has data).
    for k in 0..NUM_BUCKETS {
        if counts[k] > 0 {
            continue;
        }
        let mut width = 2usize;
        loop {
            let lo = k / width * width;
            let hi = lo + width;
            let total: usize = counts[lo..hi].iter().sum();
            if total > 0 {
                let mut mean = vec![0.0f64; d];
                for kk in lo..hi {
                    for (m, &s) in mean.iter_mut().zip(sums.row(kk)) {
                        *m += s;
                    }
                }
                let inv = 1.0 / total as f64;
                for (dst, m) in means.row_mut(k).iter_mut().zip(mean) {
                    *dst = m * inv;
                }
                break;
            }
            width *= 2;
        }
    }
    Ok((tree, means))
}

/// Optimal single threshold for one bucket on one dimension: minimize the
/// summed SSE of the two sides (full subvectors), scanning split positions in
/// sorted order with running first/second moments.
///
/// Returns `(sse, threshold)`. A bucket constant on the dimension cannot be
/// split; its unsplit SSE and the constant itself come back.
fn best_split(
    x: &Matrix,
    fit_rows: &[usize],
    row_norm_sq: &[f64],
    members: &[usize],
    dim: usize,
) -> (f64, f64) {
    let nb = members.len();
    let d = x.cols();
    if nb == 0 {
        return (0.0, 0.0);
    }
    let mut order: Vec<usize> = members.to_vec();
    order.sort_by(|&a, &b| {
        x.at(fit_rows[a], dim)
            .partial_cmp(&x.at(fit_rows[b], dim))
            .unwrap()
            .then(a.cmp(&b))
    });
    // Totals over the bucket.
    let mut s1_tot = vec![0.0f64; d];
    let mut s2_tot = 0.0f64;
    for &i in &order {
        s2_tot += row_norm_sq[i];
        for (s, &v) in s1_tot.iter_mut().zip(x.row(fit_rows[i])) {
            *s += v;
        }
    }
    let sumsq_s1_tot: f64 = s1_tot.iter().map(|v| v * v).sum();
    let unsplit_sse = s2_tot - sumsq_s1_tot / nb as f64;
    if nb < 2 {
        return (unsplit_sse.max(0.0), x.at(fit_rows[order[0]], dim));
    }

    // Prefix pass: after adding row r the left side is ranks 0..=r.
    let mut s1 = vec![0.0f64; d];
    let mut sumsq_s1 = 0.0f64; // sum_q S1_q^2
    let mut dot_tot = 0.0f64; // sum_q S1_q * S1tot_q
    let mut s2 = 0.0f64;
    let mut best = (f64::INFINITY, 0.0f64);
    for (rank, &i) in order.iter().enumerate().take(nb - 1) {
        let row = x.row(fit_rows[i]);
        let mut dot_s1_x = 0.0f64;
        let mut dot_tot_x = 0.0f64;
        for ((s, &v), &t) in s1.iter_mut().zip(row).zip(&s1_tot) {
            dot_s1_x += *s * v;
            dot_tot_x += t * v;
            *s += v;
        }
        sumsq_s1 += 2.0 * dot_s1_x + row_norm_sq[i];
        dot_tot += dot_tot_x;
        s2 += row_norm_sq[i];

        let v_here = x.at(fit_rows[i], dim);
        let v_next = x.at(fit_rows[order[rank + 1]], dim);
        if v_here == v_next {
            continue; // equal values cannot be separated by a threshold
        }
        let n_l = (rank + 1) as f64;
        let n_r = (nb - rank - 1) as f64;
        let sse_l = s2 - sumsq_s1 / n_l;
        let sumsq_r = sumsq_s1_tot - 2.0 * dot_tot + sumsq_s1;
        let sse_r = (s2_tot - s2) - sumsq_r / n_r;
        let sse = sse_l.max(0.0) + sse_r.max(0.0);
        if sse < best.0 {
            best = (sse, 0.5 * (v_here + v_next));
        }
    }
    if best.0.is_finite() {
        best
    } else {
        // Constant on this dimension.
        (unsplit_sse.max(0.0), x.at(fit_rows[order[0]], dim))
    }
}

/// Fit the exact PQ encoder: 16 k-means prototypes.
pub fn learn_pq(x_sub: &Matrix, rng: &mut Rng) -> Result<PqEncoder> {
    if x_sub.rows() < NUM_BUCKETS {
        return Err(Error::InvalidParam(format!(
            "learn_pq: need at least {NUM_BUCKETS} rows, got {}",
            x_sub.rows()
        )));
    }
    let (prototypes, _) = kmeans(x_sub, NUM_BUCKETS, rng, PQ_KMEANS_ITERS)?;
    Ok(PqEncoder { prototypes })
}

/// Encode every row of `a` under the partition: one code per codebook.
pub fn encode_all(
    encoders: &[CodebookEncoder],
    a: &Matrix,
    spec: &PartitionSpec,
) -> Result<Encoding> {
    if a.cols() != spec.dims() {
        return Err(Error::ShapeMismatch(format!(
            "encode_all: data has {} cols, partition covers {}",
            a.cols(),
            spec.dims()
        )));
    }
    if encoders.len() != spec.num_chunks() {
        return Err(Error::ShapeMismatch(format!(
            "encode_all: {} encoders for {} chunks",
            encoders.len(),
            spec.num_chunks()
        )));
    }
    let n = a.rows();
    let c = spec.num_chunks();
    let mut codes = vec![0u8; n * c];
    let mut sub = Vec::new();
    for i in 0..n {
        let row = a.row(i);
        for (cb, enc) in encoders.iter().enumerate() {
            spec.gather(row, cb, &mut sub);
            codes[i * c + cb] = enc.encode(&sub) as u8;
        }
    }
    Encoding::new(n, c, codes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::naive_partition;

    #[test]
    fn tree_recovers_sixteen_point_clusters() {
        // 1-D subspace, 16 tight clusters at 0..15.
        let mut rng = Rng::new(1);
        let per = 8;
        let mut vals = Vec::new();
        for k in 0..16 {
            for _ in 0..per {
                vals.push(k as f64 + 0.02 * (rng.next_f64() - 0.5));
            }
        }
        let x = Matrix::from_vec(16 * per, 1, vals).unwrap();
        let (tree, means) = learn_hash_tree(&x, &mut Rng::new(2)).unwrap();
        for k in 0..16 {
            assert!(
                (means.at(k, 0) - k as f64).abs() < 1e-6 + 0.01,
                "bucket {k} mean {}",
                means.at(k, 0)
            );
        }
        // Leaf buckets coincide with the clusters.
        for k in 0..16 {
            for i in 0..per {
                assert_eq!(tree.encode(x.row(k * per + i)), k);
            }
        }
    }

    #[test]
    fn tree_constant_data_is_deterministic() {
        let x = Matrix::from_fn(32, 3, |_, _| 4.25);
        let (tree, means) = learn_hash_tree(&x, &mut Rng::new(3)).unwrap();
        for t in 0..TREE_LEVELS {
            for &thr in &tree.thresholds[t] {
                assert_eq!(thr, 4.25);
            }
        }
        // Everything lands in leaf 0 (ties are not greater-than).
        for i in 0..32 {
            assert_eq!(tree.encode(x.row(i)), 0);
        }
        for j in 0..3 {
            assert_eq!(means.at(0, j), 4.25);
        }
    }

    #[test]
    fn tree_level0_threshold_separates_two_blobs() {
        let mut rng = Rng::new(4);
        let mut vals = Vec::new();
        for _ in 0..64 {
            vals.push(0.0 + 0.3 * (rng.next_f64() - 0.5));
        }
        for _ in 0..64 {
            vals.push(10.0 + 0.3 * (rng.next_f64() - 0.5));
        }
        let x = Matrix::from_vec(128, 1, vals.clone()).unwrap();
        let (tree, _) = learn_hash_tree(&x, &mut Rng::new(5)).unwrap();
        let thr = tree.thresholds[0][0];
        assert!(thr > 1.0 && thr < 9.0, "threshold {thr}");

        // Oracle: brute-force scan over all split positions on the sorted
        // values, minimizing two-sided SSE.
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sse = |s: &[f64]| {
            let m = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, 0.0);
        for cut in 1..sorted.len() {
            if sorted[cut - 1] == sorted[cut] {
                continue;
            }
            let v = sse(&sorted[..cut]) + sse(&sorted[cut..]);
            if v < best.0 {
                best = (v, 0.5 * (sorted[cut - 1] + sorted[cut]));
            }
        }
        assert!((thr - best.1).abs() < 1e-9, "{thr} vs oracle {}", best.1);
    }

    #[test]
    fn encode_extreme_thresholds() {
        let inf = f64::INFINITY;
        let all = |v: f64| HashTree {
            split_dims: [0; 4],
            thresholds: [vec![v; 1], vec![v; 2], vec![v; 4], vec![v; 8]],
        };
        assert_eq!(all(inf).encode(&[3.0]), 0);
        assert_eq!(all(-inf).encode(&[3.0]), 15);
    }

    #[test]
    fn encode_hand_traced_tree() {
        let tree = HashTree {
            split_dims: [0; 4],
            thresholds: [
                vec![8.0],
                vec![4.0, 12.0],
                vec![2.0, 6.0, 10.0, 14.0],
                vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0],
            ],
        };
        assert_eq!(tree.encode(&[5.5]), 5);
        assert_eq!(tree.encode(&[0.5]), 0);
        assert_eq!(tree.encode(&[15.5]), 15);
    }

    #[test]
    fn encode_performs_exactly_four_comparisons() {
        let mut rng = Rng::new(6);
        let x = Matrix::from_fn(64, 5, |_, _| rng.next_f64());
        let (tree, _) = learn_hash_tree(&x, &mut Rng::new(7)).unwrap();
        for i in 0..64 {
            let (_, count) = tree.encode_counted(x.row(i));
            assert_eq!(count, 4);
        }
    }

    #[test]
    fn tree_buckets_partition_training_rows() {
        let mut rng = Rng::new(8);
        let x = Matrix::from_fn(500, 4, |_, _| rng.next_f64() * 3.0);
        let (tree, _) = learn_hash_tree(&x, &mut Rng::new(9)).unwrap();
        let mut counts = [0usize; 16];
        for i in 0..500 {
            counts[tree.encode(x.row(i))] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 500);
    }

    #[test]
    fn tree_level_sse_non_increasing() {
        let mut rng = Rng::new(10);
        let x = Matrix::from_fn(300, 3, |_, _| rng.next_f64() * 2.0 - 1.0);
        let (tree, _) = learn_hash_tree(&x, &mut Rng::new(11)).unwrap();
        // Walk the prefix of the comparisons to group rows per level.
        let bucket_at_level = |row: &[f64], levels: usize| {
            let mut node = 0usize;
            for t in 0..levels {
                let bit = usize::from(row[tree.split_dims[t]] > tree.thresholds[t][node]);
                node = node * 2 + bit;
            }
            node
        };
        let sse_at_level = |levels: usize| {
            let groups = 1usize << levels;
            let mut sums = vec![vec![0.0f64; 3]; groups];
            let mut counts = vec![0usize; groups];
            for i in 0..300 {
                let g = bucket_at_level(x.row(i), levels);
                counts[g] += 1;
                for (s, &v) in sums[g].iter_mut().zip(x.row(i)) {
                    *s += v;
                }
            }
            let mut sse = 0.0;
            for i in 0..300 {
                let g = bucket_at_level(x.row(i), levels);
                for (s, &v) in sums[g].iter().zip(x.row(i)) {
                    let diff = v - s / counts[g] as f64;
                    sse += diff * diff;
                }
            }
            sse
        };
        let mut prev = f64::INFINITY;
        for levels in 0..=4 {
            let sse = sse_at_level(levels);
            assert!(sse <= prev + 1e-9, "level {levels}: {sse} > {prev}");
            prev = sse;
        }
    }

    #[test]
    fn tree_rejects_tiny_input() {
        let x = Matrix::zeros(10, 2);
        assert!(learn_hash_tree(&x, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn pq_encode_matches_linear_scan_oracle() {
        let mut rng = Rng::new(12);
        let x = Matrix::from_fn(200, 3, |_, _| rng.next_f64() * 4.0);
        let enc = learn_pq(&x, &mut Rng::new(13)).unwrap();
        for i in 0..200 {
            let row = x.row(i);
            // Oracle: independent scan.
            let mut best = (f64::INFINITY, 0usize);
            for k in 0..16 {
                let d: f64 = row
                    .iter()
                    .zip(enc.prototypes.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            assert_eq!(enc.encode(row), best.1);
        }
    }

    #[test]
    fn pq_centroid_row_encodes_to_itself() {
        let mut rng = Rng::new(14);
        let x = Matrix::from_fn(100, 2, |_, _| rng.next_f64() * 8.0);
        let enc = learn_pq(&x, &mut Rng::new(15)).unwrap();
        for k in 0..16 {
            assert_eq!(enc.encode(enc.prototypes.row(k)), k);
        }
    }

    #[test]
    fn pq_sixteen_distinct_rows_quantize_exactly() {
        let mut rng = Rng::new(16);
        let x = Matrix::from_fn(16, 3, |i, j| (i * 3 + j) as f64 + rng.next_f64() * 0.1);
        let enc = learn_pq(&x, &mut Rng::new(17)).unwrap();
        // Zero quantization error: each row sits exactly on its prototype.
        for i in 0..16 {
            let k = enc.encode(x.row(i));
            let d: f64 = x
                .row(i)
                .iter()
                .zip(enc.prototypes.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(d < 1e-18, "row {i}: distance {d}");
        }
    }

    #[test]
    fn encode_all_empty_input() {
        let mut rng = Rng::new(18);
        let x = Matrix::from_fn(50, 4, |_, _| rng.next_f64());
        let spec = naive_partition(4, 2).unwrap();
        let encs: Vec<CodebookEncoder> = (0..2)
            .map(|c| {
                let sub = spec.chunk_matrix(&x, c);
                CodebookEncoder::Pq(learn_pq(&sub, &mut Rng::new(c as u64)).unwrap())
            })
            .collect();
        let empty = Matrix::zeros(0, 4);
        let enc = encode_all(&encs, &empty, &spec).unwrap();
        assert_eq!(enc.rows(), 0);
        assert_eq!(enc.codebooks(), 2);
    }

    #[test]
    fn encode_all_duplicated_row_gives_identical_codes() {
        let mut rng = Rng::new(19);
        let x = Matrix::from_fn(60, 6, |_, _| rng.next_f64());
        let spec = naive_partition(6, 3).unwrap();
        let encs: Vec<CodebookEncoder> = (0..3)
            .map(|c| {
                let sub = spec.chunk_matrix(&x, c);
                CodebookEncoder::Tree(learn_hash_tree(&sub, &mut Rng::new(c as u64)).unwrap().0)
            })
            .collect();
        let row = x.row(7).to_vec();
        let dup = Matrix::from_fn(10, 6, |_, j| row[j]);
        let enc = encode_all(&encs, &dup, &spec).unwrap();
        for i in 1..10 {
            assert_eq!(enc.row(i), enc.row(0));
        }
    }

    #[test]
    fn encode_all_rejects_shape_mismatch() {
        let spec = naive_partition(4, 2).unwrap();
        let encs: Vec<CodebookEncoder> = vec![];
        let x = Matrix::zeros(3, 4);
        assert!(encode_all(&encs, &x, &spec).is_err());
        let bad = Matrix::zeros(3, 5);
        let encs2 = vec![
            CodebookEncoder::Pq(PqEncoder {
                prototypes: Matrix::zeros(16, 2),
            }),
            CodebookEncoder::Pq(PqEncoder {
                prototypes: Matrix::zeros(16, 2),
            }),
        ];
        assert!(encode_all(&encs2, &bad, &spec).is_err());
    }

    #[test]
    fn pq_reconstruction_exact_with_few_distinct_subvectors() {
        // At most 16 distinct subvectors per chunk: prototypes can sit on
        // them exactly, so reconstruction from codes is exact.
        let mut rng = Rng::new(20);
        let patterns: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| (rng.next_below(5)) as f64).collect())
            .collect();
        let x = Matrix::from_fn(200, 4, |i, j| patterns[i % 10][j]);
        let spec = naive_partition(4, 2).unwrap();
        let mut max_err = 0.0f64;
        for c in 0..2 {
            let sub = spec.chunk_matrix(&x, c);
            let enc = learn_pq(&sub, &mut Rng::new(21 + c as u64)).unwrap();
            for i in 0..sub.rows() {
                let k = enc.encode(sub.row(i));
                for (a, b) in sub.row(i).iter().zip(enc.prototypes.row(k)) {
                    max_err = max_err.max((a - b).abs());
                }
            }
        }
        assert!(max_err < 1e-9, "max reconstruction error {max_err}");
    }
}
