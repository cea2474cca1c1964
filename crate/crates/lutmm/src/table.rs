//! Lookup tables: construction, output-aware optimization, quantization and
//! the deployed lookup-accumulate operator.
//!
//! The baseline pipeline optimizes prototypes to reconstruct the layer input
//! and then materializes `T = P B`. The output-aware pipeline instead
//! optimizes `T` directly against the layer's true output `sigma(A B + bias)`
//! with a squared-error or KL-divergence objective, regularized toward
//! `P0 B`.

use crate::encoder::{encode_all, CodebookEncoder, Encoding, NUM_BUCKETS};
use crate::error::{Error, Result};
use crate::linalg::{matmul, ridge_solve, Matrix};
use crate::partition::PartitionSpec;

/// Elementwise or row-wise nonlinearity applied after the product and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Softmax,
}

impl Activation {
    /// Apply in place, row by row.
    pub fn apply(&self, z: &mut Matrix) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::Softmax => {
                for i in 0..z.rows() {
                    softmax_row(z.row_mut(i));
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// KL divergence between two discrete distributions, `sum p ln(p/q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

/// Fitting objective for a replaced layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Reconstruct the layer input with the prototypes, then `T = P B`.
    Baseline,
    /// Optimize `T` against the layer output under squared error.
    Mse,
    /// Optimize `T` against the layer output under KL divergence
    /// (softmax layers only).
    Kld,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Baseline => "baseline",
            Objective::Mse => "mse",
            Objective::Kld => "kld",
        }
    }
}

/// Which encoding function to fit per codebook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Tree,
    Pq,
}

impl EncoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderKind::Tree => "tree",
            EncoderKind::Pq => "pq",
        }
    }
}

/// Configuration for fitting one lookup operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    /// Regularizer weight pulling toward the initial prototypes / table.
    pub lambda: f64,
    pub objective: Objective,
    /// Nonlinearity of the layer being approximated (overridden by the
    /// layer's own activation when replacing a network layer).
    pub nonlinearity: Activation,
    /// Gradient steps for the nonlinear objectives.
    pub opt_steps: usize,
    pub learn_rate: f64,
    pub encoder: EncoderKind,
    /// Cap on training rows used for fitting; 0 means use all rows.
    pub fit_samples: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda: 1.0,
            objective: Objective::Mse,
            nonlinearity: Activation::Identity,
            opt_steps: 300,
            learn_rate: 0.05,
            encoder: EncoderKind::Tree,
            fit_samples: 10_000,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.learn_rate > 0.0 && self.learn_rate.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "learn_rate must be positive, got {}",
                self.learn_rate
            )));
        }
        if self.objective == Objective::Kld && self.nonlinearity != Activation::Softmax {
            return Err(Error::InvalidParam(
                "KLD objective requires the softmax nonlinearity".into(),
            ));
        }
        Ok(())
    }
}

/// Per-codebook prototype blocks in permuted coordinates.
///
/// Block `c` is `16 x d_c`; viewed as a `16C x D` matrix it is block-diagonal
/// by subspace, with `init` holding the starting point (bucket means or
/// k-means centroids).
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub current: Vec<Matrix>,
    pub init: Vec<Matrix>,
}

impl PrototypeSet {
    pub fn from_bucket_means(means: Vec<Matrix>) -> Self {
        PrototypeSet {
            init: means.clone(),
            current: means,
        }
    }

    pub fn num_codebooks(&self) -> usize {
        self.current.len()
    }

    /// Dense `16C x D` view (permuted column order); entries outside each
    /// block are zero.
    pub fn to_dense(&self, spec: &PartitionSpec) -> Matrix {
        let c = self.current.len();
        let d = spec.dims();
        let mut out = Matrix::zeros(NUM_BUCKETS * c, d);
        for (cb, block) in self.current.iter().enumerate() {
            let lo = spec.boundaries[cb];
            for k in 0..NUM_BUCKETS {
                for (j, &v) in block.row(k).iter().enumerate() {
                    out.set(cb * NUM_BUCKETS + k, lo + j, v);
                }
            }
        }
        out
    }
}

/// Optimize prototypes to reconstruct the layer input (ridge toward the
/// initial prototypes). The solve decomposes per chunk, which keeps the
/// block-diagonal zero pattern automatically.
pub fn optimize_prototypes(
    a: &Matrix,
    g: &Encoding,
    spec: &PartitionSpec,
    p0: &PrototypeSet,
    lambda: f64,
) -> Result<PrototypeSet> {
    let c = spec.num_chunks();
    if g.codebooks() != c || p0.init.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "optimize_prototypes: {c} chunks vs {} code columns, {} blocks",
            g.codebooks(),
            p0.init.len()
        )));
    }
    if g.rows() != a.rows() {
        return Err(Error::ShapeMismatch(format!(
            "optimize_prototypes: {} data rows vs {} encoded rows",
            a.rows(),
            g.rows()
        )));
    }
    let mut blocks = Vec::with_capacity(c);
    for cb in 0..c {
        let y = spec.chunk_matrix(a, cb);
        let mut onehot = Matrix::zeros(a.rows(), NUM_BUCKETS);
        for i in 0..a.rows() {
            onehot.set(i, g.at(i, cb), 1.0);
        }
        blocks.push(ridge_solve(&onehot, &y, lambda, &p0.init[cb])?);
    }
    Ok(PrototypeSet {
        current: blocks,
        init: p0.init.clone(),
    })
}

/// `C x 16 x M` table of partial inner products, optionally with an 8-bit
/// quantized copy (per-output-column scale and offset).
#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    codebooks: usize,
    outputs: usize,
    t: Vec<f64>,
    pub quantized: Option<QuantizedTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTable {
    pub q: Vec<u8>,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LookupTable {
    pub fn new(codebooks: usize, outputs: usize, t: Vec<f64>) -> Result<Self> {
        if t.len() != codebooks * NUM_BUCKETS * outputs {
            return Err(Error::ShapeMismatch(format!(
                "lookup table: {codebooks} x {NUM_BUCKETS} x {outputs} needs {} values, got {}",
                codebooks * NUM_BUCKETS * outputs,
                t.len()
            )));
        }
        Ok(LookupTable {
            codebooks,
            outputs,
            t,
            quantized: None,
        })
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    #[inline]
    pub fn at(&self, codebook: usize, bucket: usize, output: usize) -> f64 {
        self.t[(codebook * NUM_BUCKETS + bucket) * self.outputs + output]
    }

    /// The M table values for one (codebook, bucket) pair.
    #[inline]
    pub fn entry(&self, codebook: usize, bucket: usize) -> &[f64] {
        let start = (codebook * NUM_BUCKETS + bucket) * self.outputs;
        &self.t[start..start + self.outputs]
    }

    pub fn values(&self) -> &[f64] {
        &self.t
    }

    /// View as a dense `16C x M` matrix (stacked codebook blocks).
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.codebooks * NUM_BUCKETS, self.outputs, self.t.clone())
            .expect("table length invariant")
    }

    pub fn from_matrix(codebooks: usize, m: &Matrix) -> Result<Self> {
        if m.rows() != codebooks * NUM_BUCKETS {
            return Err(Error::ShapeMismatch(format!(
                "table matrix: expected {} rows, got {}",
                codebooks * NUM_BUCKETS,
                m.rows()
            )));
        }
        LookupTable::new(codebooks, m.cols(), m.data().to_vec())
    }
}

/// Materialize the table entries as chunk-restricted inner products between
/// prototypes and the columns of `b`.
pub fn build_lut(p: &PrototypeSet, b: &Matrix, spec: &PartitionSpec) -> Result<LookupTable> {
    if b.rows() != spec.dims() {
        return Err(Error::ShapeMismatch(format!(
            "build_lut: B has {} rows, partition covers {}",
            b.rows(),
            spec.dims()
        )));
    }
    let c = spec.num_chunks();
    if p.current.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "build_lut: {} prototype blocks for {c} chunks",
            p.current.len()
        )));
    }
    let m = b.cols();
    let mut t = Vec::with_capacity(c * NUM_BUCKETS * m);
    for cb in 0..c {
        let b_chunk = b.select_rows(spec.chunk_dims(cb));
        let t_chunk = matmul(&p.current[cb], &b_chunk)?;
        t.extend_from_slice(t_chunk.data());
    }
    LookupTable::new(c, m, t)
}

/// The output-aware table objective: data term against the true layer output
/// plus a ridge pull toward the initial table. Both terms are averaged over
/// rows so that fixed-step gradient descent is scale-stable; the minimizer is
/// unchanged.
pub struct LutProblem<'a> {
    pub g: &'a Encoding,
    /// True layer output, `sigma(A B + bias)`.
    pub target: &'a Matrix,
    /// Regularization center `P0 B` as a `16C x M` matrix.
    pub t0: &'a Matrix,
    pub bias: &'a [f64],
    pub lambda: f64,
    pub objective: Objective,
    pub nonlinearity: Activation,
}

impl<'a> LutProblem<'a> {
    fn gt_plus_bias(&self, t: &Matrix) -> Matrix {
        let n = self.g.rows();
        let m = t.cols();
        let mut z = Matrix::zeros(n, m);
        for i in 0..n {
            let codes = self.g.row(i);
            let zrow = z.row_mut(i);
            zrow.copy_from_slice(self.bias);
            for (cb, &code) in codes.iter().enumerate() {
                let trow = t.row(cb * NUM_BUCKETS + code as usize);
                for (o, &v) in zrow.iter_mut().zip(trow) {
                    *o += v;
                }
            }
        }
        z
    }

    pub fn objective(&self, t: &Matrix) -> f64 {
        self.objective_impl(t, false).0
    }

    pub fn objective_grad(&self, t: &Matrix) -> (f64, Matrix) {
        let (j, g) = self.objective_impl(t, true);
        (j, g.expect("gradient requested"))
    }

    fn objective_impl(&self, t: &Matrix, want_grad: bool) -> (f64, Option<Matrix>) {
        let n = self.g.rows();
        let inv_n = 1.0 / n as f64;
        let mut z = self.gt_plus_bias(t);
        let mut act = z.clone();
        self.nonlinearity.apply(&mut act);
        let mut data_loss = 0.0f64;
        // dJ/dz, reusing z's storage.
        for i in 0..n {
            let target = self.target.row(i);
            let a_row = act.row(i);
            let z_row = z.row_mut(i);
            match self.objective {
                Objective::Mse => match self.nonlinearity {
                    Activation::Identity => {
                        for ((dz, &a), &y) in z_row.iter_mut().zip(a_row).zip(target) {
                            let e = a - y;
                            data_loss += e * e;
                            *dz = 2.0 * e * inv_n;
                        }
                    }
                    Activation::Relu => {
                        for ((dz, &a), &y) in z_row.iter_mut().zip(a_row).zip(target) {
                            let e = a - y;
                            data_loss += e * e;
                            // a > 0 exactly when the pre-activation was > 0
                            *dz = if a > 0.0 { 2.0 * e * inv_n } else { 0.0 };
                        }
                    }
                    Activation::Softmax => {
                        // dL/dz = s .* (e - (e . s)) with e = 2 (s - y).
                        let mut e_dot_s = 0.0;
                        for (&a, &y) in a_row.iter().zip(target) {
                            let e = a - y;
                            data_loss += e * e;
                            e_dot_s += 2.0 * e * a;
                        }
                        for ((dz, &a), &y) in z_row.iter_mut().zip(a_row).zip(target) {
                            *dz = a * (2.0 * (a - y) - e_dot_s) * inv_n;
                        }
                    }
                },
                Objective::Kld => {
                    // Target and act are both softmax rows; KL(p || q) has
                    // gradient q - p in the logits.
                    data_loss += kl_divergence(target, a_row);
                    for ((dz, &q), &p) in z_row.iter_mut().zip(a_row).zip(target) {
                        *dz = (q - p) * inv_n;
                    }
                }
                Objective::Baseline => unreachable!("baseline has no table objective"),
            }
        }
        let mut j = data_loss * inv_n;
        let mut reg = 0.0f64;
        for (a, b) in t.data().iter().zip(self.t0.data()) {
            let d = a - b;
            reg += d * d;
        }
        j += self.lambda * reg * inv_n;
        if !want_grad {
            return (j, None);
        }
        // grad = G' dZ + 2 lambda (T - T0) / N.
        let mut grad = Matrix::zeros(t.rows(), t.cols());
        for i in 0..n {
            let codes = self.g.row(i);
            let dz = z.row(i);
            for (cb, &code) in codes.iter().enumerate() {
                let grow = grad.row_mut(cb * NUM_BUCKETS + code as usize);
                for (gv, &d) in grow.iter_mut().zip(dz) {
                    *gv += d;
                }
            }
        }
        let two_lam = 2.0 * self.lambda * inv_n;
        for ((gv, &tv), &t0v) in grad
            .data_mut()
            .iter_mut()
            .zip(t.data())
            .zip(self.t0.data())
        {
            *gv += two_lam * (tv - t0v);
        }
        (j, Some(grad))
    }
}

/// Optimize the lookup table directly against the layer output.
///
/// With the identity nonlinearity the problem is linear and solved in closed
/// form; otherwise full-batch gradient descent runs from `T0 = P0 B` and the
/// best iterate seen is returned, so the objective never ends up above its
/// value at `T0`.
pub fn optimize_lut(
    a: &Matrix,
    b: &Matrix,
    g: &Encoding,
    p0: &PrototypeSet,
    bias: &[f64],
    spec: &PartitionSpec,
    cfg: &FitConfig,
) -> Result<LookupTable> {
    cfg.validate()?;
    if cfg.objective == Objective::Baseline {
        return Err(Error::InvalidParam(
            "optimize_lut: baseline objective is fit via optimize_prototypes + build_lut".into(),
        ));
    }
    if bias.len() != b.cols() {
        return Err(Error::ShapeMismatch(format!(
            "optimize_lut: bias has {} entries, B has {} columns",
            bias.len(),
            b.cols()
        )));
    }
    if a.rows() != g.rows() {
        return Err(Error::ShapeMismatch(format!(
            "optimize_lut: {} data rows vs {} encoded rows",
            a.rows(),
            g.rows()
        )));
    }
    // Regularization center: the initial prototypes pushed through B.
    let t0 = build_lut(
        &PrototypeSet {
            current: p0.init.clone(),
            init: p0.init.clone(),
        },
        b,
        spec,
    )?
    .to_matrix();
    // True layer output.
    let mut target = matmul(a, b)?;
    for i in 0..target.rows() {
        for (v, &bi) in target.row_mut(i).iter_mut().zip(bias) {
            *v += bi;
        }
    }
    cfg.nonlinearity.apply(&mut target);

    if cfg.nonlinearity == Activation::Identity {
        // Closed form: bias cancels inside the squared error, leaving a ridge
        // solve of G T ~ A B centered at T0.
        let onehot = g.to_onehot();
        let ab = matmul(a, b)?;
        let t = ridge_solve(&onehot, &ab, cfg.lambda, &t0)?;
        return LookupTable::from_matrix(spec.num_chunks(), &t);
    }

    let problem = LutProblem {
        g,
        target: &target,
        t0: &t0,
        bias,
        lambda: cfg.lambda,
        objective: cfg.objective,
        nonlinearity: cfg.nonlinearity,
    };
    let mut t = t0.clone();
    let mut best_j = problem.objective(&t);
    if !best_j.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "optimize_lut".into(),
            step: 0,
        });
    }
    let mut best_t = t.clone();
    for step in 0..cfg.opt_steps {
        let (j, grad) = problem.objective_grad(&t);
        if !j.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "optimize_lut".into(),
                step,
            });
        }
        if j < best_j {
            best_j = j;
            best_t.data_mut().copy_from_slice(t.data());
        }
        for (tv, &gv) in t.data_mut().iter_mut().zip(grad.data()) {
            *tv -= cfg.learn_rate * gv;
        }
    }
    let j = problem.objective(&t);
    if j.is_finite() && j < best_j {
        best_t = t;
    }
    LookupTable::from_matrix(spec.num_chunks(), &best_t)
}

/// Populate the 8-bit quantized copy: per output column, offset at the
/// minimum and a (max - min)/255 scale, so every dequantized entry is within
/// half a step of the original.
pub fn quantize_lut(table: &LookupTable) -> LookupTable {
    let c = table.codebooks();
    let m = table.outputs();
    let mut offset = vec![0.0f64; m];
    let mut scale = vec![1.0f64; m];
    for col in 0..m {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for cb in 0..c {
            for k in 0..NUM_BUCKETS {
                let v = table.at(cb, k, col);
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        offset[col] = lo;
        scale[col] = if hi > lo { (hi - lo) / 255.0 } else { 1.0 };
    }
    let mut q = vec![0u8; c * NUM_BUCKETS * m];
    for cb in 0..c {
        for k in 0..NUM_BUCKETS {
            for col in 0..m {
                let v = table.at(cb, k, col);
                let code = ((v - offset[col]) / scale[col]).round();
                q[(cb * NUM_BUCKETS + k) * m + col] = code.clamp(0.0, 255.0) as u8;
            }
        }
    }
    let mut out = table.clone();
    out.quantized = Some(QuantizedTable { q, scale, offset });
    out
}

/// A fitted lookup-accumulate replacement for one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AmmOperator {
    pub spec: PartitionSpec,
    pub encoders: Vec<CodebookEncoder>,
    pub table: LookupTable,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl AmmOperator {
    pub fn input_dims(&self) -> usize {
        self.spec.dims()
    }

    pub fn output_dims(&self) -> usize {
        self.table.outputs()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.encoders.len() != self.spec.num_chunks()
            || self.table.codebooks() != self.spec.num_chunks()
        {
            return Err(Error::ShapeMismatch(
                "operator: encoder/table codebook counts disagree with the partition".into(),
            ));
        }
        if self.bias.len() != self.table.outputs() {
            return Err(Error::ShapeMismatch(
                "operator: bias length disagrees with table outputs".into(),
            ));
        }
        for (cb, enc) in self.encoders.iter().enumerate() {
            let d_c = self.spec.chunk_len(cb);
            match enc {
                CodebookEncoder::Tree(t) => {
                    if t.split_dims.iter().any(|&s| s >= d_c) {
                        return Err(Error::ShapeMismatch(format!(
                            "operator: codebook {cb} splits outside its {d_c}-dim chunk"
                        )));
                    }
                }
                CodebookEncoder::Pq(p) => {
                    if p.prototypes.rows() != NUM_BUCKETS || p.prototypes.cols() != d_c {
                        return Err(Error::ShapeMismatch(format!(
                            "operator: codebook {cb} prototypes are {}x{}, expected {NUM_BUCKETS}x{d_c}",
                            p.prototypes.rows(),
                            p.prototypes.cols()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Pre-activation accumulation (table rows summed, plus bias).
    ///
    /// The quantized path accumulates the 8-bit entries in 32-bit integers
    /// and applies the per-column scale and summed offsets once per output.
    pub fn apply_preactivation(&self, a: &Matrix, use_quantized: bool) -> Result<Matrix> {
        if a.cols() != self.spec.dims() {
            return Err(Error::ShapeMismatch(format!(
                "lookup apply: input has {} cols, operator expects {}",
                a.cols(),
                self.spec.dims()
            )));
        }
        let n = a.rows();
        let c = self.spec.num_chunks();
        let m = self.table.outputs();
        let mut out = Matrix::zeros(n, m);
        let quant = if use_quantized {
            Some(self.table.quantized.as_ref().ok_or_else(|| {
                Error::InvalidParam("lookup apply: table has no quantized copy".into())
            })?)
        } else {
            None
        };
        let mut sub = Vec::new();
        let mut acc_int = vec![0u32; m];
        for i in 0..n {
            let row = a.row(i);
            let orow = out.row_mut(i);
            match quant {
                None => {
                    orow.copy_from_slice(&self.bias);
                    for (cb, enc) in self.encoders.iter().enumerate() {
                        self.spec.gather(row, cb, &mut sub);
                        let code = enc.encode(&sub);
                        for (o, &v) in orow.iter_mut().zip(self.table.entry(cb, code)) {
                            *o += v;
                        }
                    }
                }
                Some(qt) => {
                    acc_int.iter_mut().for_each(|v| *v = 0);
                    for (cb, enc) in self.encoders.iter().enumerate() {
                        self.spec.gather(row, cb, &mut sub);
                        let code = enc.encode(&sub);
                        let start = (cb * NUM_BUCKETS + code) * m;
                        for (acc, &qv) in acc_int.iter_mut().zip(&qt.q[start..start + m]) {
                            *acc += qv as u32;
                        }
                    }
                    for (((o, &acc), (&sc, &off)), &bi) in orow
                        .iter_mut()
                        .zip(&acc_int)
                        .zip(qt.scale.iter().zip(&qt.offset))
                        .zip(&self.bias)
                    {
                        *o = sc * acc as f64 + c as f64 * off + bi;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Full approximate layer: lookup-accumulate, bias, nonlinearity.
    pub fn apply(&self, a: &Matrix, use_quantized: bool) -> Result<Matrix> {
        let mut z = self.apply_preactivation(a, use_quantized)?;
        self.activation.apply(&mut z);
        Ok(z)
    }
}

/// Convenience free function mirroring [`AmmOperator::apply`].
pub fn amm_apply(op: &AmmOperator, a: &Matrix, use_quantized: bool) -> Result<Matrix> {
    op.apply(a, use_quantized)
}

/// Operation-count cost model for one layer.
///
/// A multiply-accumulate costs `ratio` lookup-accumulates; exact matmul needs
/// `d * m` MACs per row while the lookup path needs `4 c` comparisons plus
/// `c * m` accumulates. The breakeven codebook count solves
/// `(4 c + c m) / ratio = d m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub amm_cost: f64,
    pub exact_cost: f64,
    pub breakeven_c: f64,
}

pub fn lac_cost_model(d: usize, m: usize, c: usize, ratio: f64) -> Result<CostModel> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidParam(format!(
            "cost model: ratio must be positive, got {ratio}"
        )));
    }
    let exact_cost = (d * m) as f64;
    let amm_cost = (4.0 * c as f64 + (c * m) as f64) / ratio;
    let breakeven_c = exact_cost * ratio / (4.0 + m as f64);
    Ok(CostModel {
        amm_cost,
        exact_cost,
        breakeven_c,
    })
}

/// Fit a complete lookup operator for one layer: partition given, encoders
/// learned per chunk, prototypes initialized from the encoder buckets, table
/// built per the configured objective.
pub fn fit_amm_operator(
    a: &Matrix,
    weights: &Matrix,
    bias: &[f64],
    activation: Activation,
    spec: &PartitionSpec,
    cfg: &FitConfig,
    rng: &mut crate::linalg::Rng,
) -> Result<AmmOperator> {
    // The layer's activation replaces whatever the config carried, and KLD
    // falls back to MSE off the softmax layer, so validate the effective
    // configuration.
    let mut effective_cfg = *cfg;
    effective_cfg.nonlinearity = activation;
    effective_cfg.objective = effective_objective(cfg.objective, activation);
    effective_cfg.validate()?;
    spec.validate()?;
    if a.cols() != spec.dims() || weights.rows() != spec.dims() {
        return Err(Error::ShapeMismatch(format!(
            "fit: data {}x{}, weights {}x{}, partition over {} dims",
            a.rows(),
            a.cols(),
            weights.rows(),
            weights.cols(),
            spec.dims()
        )));
    }
    let c = spec.num_chunks();
    let mut encoders = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    for cb in 0..c {
        let sub = spec.chunk_matrix(a, cb);
        let mut cb_rng = rng.derive(cb as u64);
        match cfg.encoder {
            EncoderKind::Tree => {
                let (tree, bucket_means) = crate::encoder::learn_hash_tree(&sub, &mut cb_rng)?;
                encoders.push(CodebookEncoder::Tree(tree));
                means.push(bucket_means);
            }
            EncoderKind::Pq => {
                let pq = crate::encoder::learn_pq(&sub, &mut cb_rng)?;
                means.push(pq.prototypes.clone());
                encoders.push(CodebookEncoder::Pq(pq));
            }
        }
    }
    let p0 = PrototypeSet::from_bucket_means(means);
    let g = encode_all(&encoders, a, spec)?;
    let table = match effective_cfg.objective {
        Objective::Baseline => {
            let p = optimize_prototypes(a, &g, spec, &p0, cfg.lambda)?;
            build_lut(&p, weights, spec)?
        }
        _ => optimize_lut(a, weights, &g, &p0, bias, spec, &effective_cfg)?,
    };
    let op = AmmOperator {
        spec: spec.clone(),
        encoders,
        table,
        bias: bias.to_vec(),
        activation,
    };
    op.validate()?;
    Ok(op)
}

/// KLD only applies to softmax layers; hidden layers fall back to the
/// squared-error objective.
pub fn effective_objective(requested: Objective, activation: Activation) -> Objective {
    match (requested, activation) {
        (Objective::Kld, Activation::Softmax) => Objective::Kld,
        (Objective::Kld, _) => Objective::Mse,
        (other, _) => other,
    }
}
