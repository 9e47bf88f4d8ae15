//! Forward and backward execution of sparse layers.
//!
//! Convolutions run as gather/GEMM/scatter passes over a rule book: for each
//! filter offset i with parameter matrix W^i, the input rows named by the
//! pair list are gathered, multiplied by W^i, and scatter-added into the
//! output rows. Backward passes are the transposed data flow.

use crate::matrix::Matrix;
use crate::rulebook::{RuleBook, RuleKind};
use crate::scalar::Scalar;
use crate::tensor::SparseTensor;
use crate::{Error, Result};

/// Convolution parameters: one m x n matrix per filter offset, plus an
/// optional output bias. Biases are off by default for convolutions so the
/// zero ground state stays exact; the final linear head carries one.
#[derive(Debug, Clone)]
pub struct ConvWeights<T> {
    pub per_offset: Vec<Matrix<T>>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn zeros(offset_count: usize, m: usize, n: usize) -> Self {
        ConvWeights {
            per_offset: (0..offset_count).map(|_| Matrix::zeros(m, n)).collect(),
            bias: None,
        }
    }

    /// All offsets set to the identity (requires m == n). Useful in tests
    /// and for the shape-context gather.
    pub fn identity(offset_count: usize, n: usize) -> Self {
        ConvWeights {
            per_offset: (0..offset_count).map(|_| Matrix::identity(n)).collect(),
            bias: None,
        }
    }

    pub fn m(&self) -> usize {
        self.per_offset[0].rows()
    }

    pub fn n(&self) -> usize {
        self.per_offset[0].cols()
    }

    fn check(&self, rb: &RuleBook, in_features: &Matrix<T>) -> Result<()> {
        if self.per_offset.len() != rb.geometry.offset_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight matrices for {} filter offsets",
                self.per_offset.len(),
                rb.geometry.offset_count()
            )));
        }
        if in_features.cols() != self.m() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} planes, weights expect {}",
                in_features.cols(),
                self.m()
            )));
        }
        if in_features.rows() != rb.a_in() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} rows, rule book expects {}",
                in_features.rows(),
                rb.a_in()
            )));
        }
        Ok(())
    }
}

/// Wraps an output feature matrix into a tensor carrying the rule book's
/// output active set.
pub fn output_tensor<T: Scalar>(
    rb: &RuleBook,
    input: &SparseTensor<T>,
    features: Matrix<T>,
) -> Result<SparseTensor<T>> {
    if features.rows() != rb.a_out() {
        return Err(Error::ShapeMismatch(format!(
            "feature matrix has {} rows for {} output sites",
            features.rows(),
            rb.a_out()
        )));
    }
    Ok(SparseTensor::from_parts(
        input.dims(),
        &rb.out_spatial_size,
        rb.batch_size,
        rb.out_index.clone(),
        rb.out_coords.clone(),
        features,
        rb.out_generation,
    ))
}

/// Propagates only the active set of a rule book, with zero features of the
/// input's plane count. Used where the activity pattern matters but feature
/// content does not (tests, cost probes).
pub fn apply_identity_like<T: Scalar>(
    rb: &RuleBook,
    input: &SparseTensor<T>,
) -> Result<SparseTensor<T>> {
    output_tensor(rb, input, Matrix::zeros(rb.a_out(), input.planes()))
}

/// Sparse convolution forward: out[k] += in[j] * W^i for every pair (j, k)
/// in rule list R_i. Works unchanged for SC, SSC, and DC rule books.
pub fn conv_forward<T: Scalar>(
    rb: &RuleBook,
    in_features: &Matrix<T>,
    w: &ConvWeights<T>,
) -> Result<Matrix<T>> {
    w.check(rb, in_features)?;
    let n = w.n();
    let mut out = Matrix::zeros(rb.a_out(), n);
    if let Some(bias) = &w.bias {
        if bias.len() != n {
            return Err(Error::ShapeMismatch("bias length != n".into()));
        }
        for k in 0..rb.a_out() {
            out.row_mut(k).copy_from_slice(bias);
        }
    }
    for (wi, pairs) in w.per_offset.iter().zip(&rb.rules) {
        for &(j, k) in pairs {
            let in_row = in_features.row(j as usize);
            let out_base = k as usize;
            for (c, &x) in in_row.iter().enumerate() {
                if x == T::zero() {
                    continue;
                }
                let w_row = wi.row(c);
                let out_row = out.row_mut(out_base);
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += x * wv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients produced by a convolution backward pass.
pub struct ConvGrads<T> {
    pub grad_in: Matrix<T>,
    pub grad_w: Vec<Matrix<T>>,
    pub grad_bias: Option<Vec<T>>,
}

/// Transpose of `conv_forward`: routes output gradients back through each
/// pair list and accumulates per-offset weight gradients.
pub fn conv_backward<T: Scalar>(
    rb: &RuleBook,
    in_features: &Matrix<T>,
    w: &ConvWeights<T>,
    grad_out: &Matrix<T>,
) -> Result<ConvGrads<T>> {
    w.check(rb, in_features)?;
    let (m, n) = (w.m(), w.n());
    if grad_out.rows() != rb.a_out() || grad_out.cols() != n {
        return Err(Error::ShapeMismatch("grad_out shape".into()));
    }
    let mut grad_in = Matrix::zeros(rb.a_in(), m);
    let mut grad_w: Vec<Matrix<T>> = (0..w.per_offset.len())
        .map(|_| Matrix::zeros(m, n))
        .collect();
    for ((wi, gwi), pairs) in w.per_offset.iter().zip(&mut grad_w).zip(&rb.rules) {
        for &(j, k) in pairs {
            let g_row = grad_out.row(k as usize);
            let in_row = in_features.row(j as usize);
            // grad_in[j] += grad_out[k] . (W^i)^T
            let gi_row = grad_in.row_mut(j as usize);
            for c in 0..m {
                let w_row = wi.row(c);
                let mut acc = T::zero();
                for (&g, &wv) in g_row.iter().zip(w_row) {
                    acc += g * wv;
                }
                gi_row[c] += acc;
            }
            // grad_W^i += in[j]^T . grad_out[k]
            for (c, &x) in in_row.iter().enumerate() {
                if x == T::zero() {
                    continue;
                }
                let gw_row = gwi.row_mut(c);
                for (gw, &g) in gw_row.iter_mut().zip(g_row) {
                    *gw += x * g;
                }
            }
        }
    }
    let grad_bias = w.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); n];
        for k in 0..grad_out.rows() {
            for (g, &v) in gb.iter_mut().zip(grad_out.row(k)) {
                *g += v;
            }
        }
        gb
    });
    Ok(ConvGrads {
        grad_in,
        grad_w,
        grad_bias,
    })
}

/// Per-(output row, channel) winner of a max pool: the input row whose value
/// won, or `None` when the zero clamp won.
pub type ArgmaxRecord = Vec<Option<u32>>;

/// Max pooling: out[k][c] = max(0, max over gathered in[j][c]). Ties between
/// equal inputs go to the lowest input row; ties with zero go to the clamp
/// (gradient dropped).
pub fn maxpool_forward<T: Scalar>(
    rb: &RuleBook,
    in_features: &Matrix<T>,
) -> Result<(Matrix<T>, ArgmaxRecord)> {
    if rb.kind != RuleKind::MaxPool {
        return Err(Error::InvalidGeometry("rule book kind must be MP".into()));
    }
    let n = in_features.cols();
    let mut out = Matrix::zeros(rb.a_out(), n);
    let mut record: ArgmaxRecord = vec![None; rb.a_out() * n];
    for pairs in &rb.rules {
        for &(j, k) in pairs {
            let in_row = in_features.row(j as usize);
            let out_row = out.row_mut(k as usize);
            for c in 0..n {
                let v = in_row[c];
                let slot = &mut record[k as usize * n + c];
                let better = v > out_row[c]
                    || (v == out_row[c] && matches!(slot, Some(j2) if j < *j2));
                if better {
                    out_row[c] = v;
                    *slot = Some(j);
                }
            }
        }
    }
    Ok((out, record))
}

/// Routes each output gradient to its recorded winner; clamp wins drop it.
pub fn maxpool_backward<T: Scalar>(
    record: &ArgmaxRecord,
    grad_out: &Matrix<T>,
    a_in: usize,
) -> Matrix<T> {
    let n = grad_out.cols();
    let mut grad_in = Matrix::zeros(a_in, n);
    for k in 0..grad_out.rows() {
        for c in 0..n {
            if let Some(j) = record[k * n + c] {
                *grad_in.row_mut(j as usize).get_mut(c).unwrap() += grad_out.get(k, c);
            }
        }
    }
    grad_in
}

/// Average pooling: out[k] = f^{-d} * sum of gathered inputs. The divisor is
/// the full window volume f^d, not the active count.
pub fn avgpool_forward<T: Scalar>(rb: &RuleBook, in_features: &Matrix<T>) -> Result<Matrix<T>> {
    if rb.kind != RuleKind::AvgPool {
        return Err(Error::InvalidGeometry("rule book kind must be AP".into()));
    }
    let scale = T::one() / T::from_f64(rb.geometry.offset_count() as f64);
    let n = in_features.cols();
    let mut out = Matrix::zeros(rb.a_out(), n);
    for pairs in &rb.rules {
        for &(j, k) in pairs {
            let in_row = in_features.row(j as usize);
            let out_row = out.row_mut(k as usize);
            for (o, &x) in out_row.iter_mut().zip(in_row) {
                *o += x * scale;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward<T: Scalar>(
    rb: &RuleBook,
    grad_out: &Matrix<T>,
    a_in: usize,
) -> Matrix<T> {
    let scale = T::one() / T::from_f64(rb.geometry.offset_count() as f64);
    let n = grad_out.cols();
    let mut grad_in = Matrix::zeros(a_in, n);
    for pairs in &rb.rules {
        for &(j, k) in pairs {
            let g_row = grad_out.row(k as usize);
            let gi_row = grad_in.row_mut(j as usize);
            for (gi, &g) in gi_row.iter_mut().zip(g_row) {
                *gi += g * scale;
            }
        }
    }
    grad_in
}

/// Batch normalization over the set of active sites.
#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(n: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); n],
            beta: vec![T::zero(); n],
            running_mean: vec![T::zero(); n],
            running_var: vec![T::one(); n],
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Cache needed by the batch-norm backward pass.
pub struct BnCache<T> {
    pub xhat: Matrix<T>,
    pub invstd: Vec<T>,
    /// Set when the layer ran as identity (no active sites in train mode).
    pub skipped: bool,
}

/// Normalizes each column over the active rows (train) or with running
/// statistics (eval). An empty train-mode input runs as identity and is
/// flagged in the cache.
pub fn batchnorm_forward<T: Scalar>(
    bn: &mut BatchNormState<T>,
    in_features: &Matrix<T>,
    mode: BnMode,
) -> (Matrix<T>, BnCache<T>) {
    let (a, n) = (in_features.rows(), in_features.cols());
    let eps = T::from_f64(bn.epsilon);
    if mode == BnMode::Train && a == 0 {
        return (
            in_features.clone(),
            BnCache {
                xhat: Matrix::zeros(0, n),
                invstd: vec![T::one(); n],
                skipped: true,
            },
        );
    }
    let (mean, var) = match mode {
        BnMode::Train => {
            let inv_a = T::one() / T::from_f64(a as f64);
            let mut mean = vec![T::zero(); n];
            for r in 0..a {
                for (m, &x) in mean.iter_mut().zip(in_features.row(r)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_a);
            let mut var = vec![T::zero(); n];
            for r in 0..a {
                for c in 0..n {
                    let d = in_features.get(r, c) - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_a);
            let mom = T::from_f64(bn.momentum);
            let one_minus = T::one() - mom;
            for c in 0..n {
                bn.running_mean[c] = bn.running_mean[c] * mom + mean[c] * one_minus;
                bn.running_var[c] = bn.running_var[c] * mom + var[c] * one_minus;
            }
            (mean, var)
        }
        BnMode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(a, n);
    let mut out = Matrix::zeros(a, n);
    for r in 0..a {
        for c in 0..n {
            let h = (in_features.get(r, c) - mean[c]) * invstd[c];
            xhat.set(r, c, h);
            out.set(r, c, bn.gamma[c] * h + bn.beta[c]);
        }
    }
    (
        out,
        BnCache {
            xhat,
            invstd,
            skipped: false,
        },
    )
}

pub struct BnGrads<T> {
    pub grad_in: Matrix<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
}

/// Train-mode batch-norm backward (batch statistics participate in the
/// gradient).
pub fn batchnorm_backward<T: Scalar>(
    bn: &BatchNormState<T>,
    cache: &BnCache<T>,
    grad_out: &Matrix<T>,
) -> BnGrads<T> {
    let (a, n) = (grad_out.rows(), grad_out.cols());
    if cache.skipped {
        return BnGrads {
            grad_in: grad_out.clone(),
            grad_gamma: vec![T::zero(); n],
            grad_beta: vec![T::zero(); n],
        };
    }
    let mut grad_gamma = vec![T::zero(); n];
    let mut grad_beta = vec![T::zero(); n];
    for r in 0..a {
        for c in 0..n {
            let g = grad_out.get(r, c);
            grad_gamma[c] += g * cache.xhat.get(r, c);
            grad_beta[c] += g;
        }
    }
    let inv_a = T::one() / T::from_f64(a as f64);
    let mut grad_in = Matrix::zeros(a, n);
    for r in 0..a {
        for c in 0..n {
            let g = grad_out.get(r, c);
            let term = T::from_f64(a as f64) * g - grad_beta[c] - cache.xhat.get(r, c) * grad_gamma[c];
            grad_in.set(r, c, bn.gamma[c] * cache.invstd[c] * inv_a * term);
        }
    }
    BnGrads {
        grad_in,
        grad_gamma,
        grad_beta,
    }
}

/// Elementwise max(0, x) over active rows; the active set is untouched.
pub fn relu_forward<T: Scalar>(in_features: &Matrix<T>) -> Matrix<T> {
    in_features.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(in_features: &Matrix<T>, grad_out: &Matrix<T>) -> Matrix<T> {
    let mut grad_in = grad_out.clone();
    for (g, &x) in grad_in.data_mut().iter_mut().zip(in_features.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    grad_in
}

/// Per-voxel affine head: logits = X W + b.
pub fn linear_forward<T: Scalar>(
    in_features: &Matrix<T>,
    w: &Matrix<T>,
    b: &[T],
) -> Result<Matrix<T>> {
    if in_features.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::ShapeMismatch("linear head shapes".into()));
    }
    let mut out = in_features.matmul(w);
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

pub struct LinearGrads<T> {
    pub grad_in: Matrix<T>,
    pub grad_w: Matrix<T>,
    pub grad_b: Vec<T>,
}

pub fn linear_backward<T: Scalar>(
    in_features: &Matrix<T>,
    w: &Matrix<T>,
    grad_out: &Matrix<T>,
) -> LinearGrads<T> {
    let grad_in = grad_out.matmul(&w.transpose());
    let grad_w = in_features.transpose().matmul(grad_out);
    let mut grad_b = vec![T::zero(); w.cols()];
    for r in 0..grad_out.rows() {
        for (g, &v) in grad_b.iter_mut().zip(grad_out.row(r)) {
            *g += v;
        }
    }
    LinearGrads {
        grad_in,
        grad_w,
        grad_b,
    }
}

/// Softmax probabilities per row, optionally restricted to a class mask
/// (excluded classes get probability zero and the rest renormalize).
pub fn softmax_probs<T: Scalar>(logits: &Matrix<T>, mask: Option<&[bool]>) -> Matrix<T> {
    let (a, c) = (logits.rows(), logits.cols());
    let mut probs = Matrix::zeros(a, c);
    for r in 0..a {
        let row = logits.row(r);
        let mut maxv = T::neg_infinity();
        for (i, &x) in row.iter().enumerate() {
            if mask.map_or(true, |m| m[i]) && x > maxv {
                maxv = x;
            }
        }
        let mut sum = T::zero();
        let out = probs.row_mut(r);
        for (i, &x) in row.iter().enumerate() {
            if mask.map_or(true, |m| m[i]) {
                let e = (x - maxv).exp();
                out[i] = e;
                sum += e;
            }
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Mean negative log-likelihood over active sites, with optional test-time
/// class masking. Returns the loss and the logit gradient (of the mean).
pub fn masked_softmax_nll<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    mask: Option<&[bool]>,
) -> Result<(T, Matrix<T>)> {
    let (a, c) = (logits.rows(), logits.cols());
    if labels.len() != a {
        return Err(Error::ShapeMismatch("labels length != rows".into()));
    }
    for &l in labels {
        if l >= c {
            return Err(Error::ShapeMismatch(format!("label {l} out of range {c}")));
        }
        if let Some(m) = mask {
            if !m[l] {
                return Err(Error::ShapeMismatch(format!("label {l} not in mask")));
            }
        }
    }
    if a == 0 {
        return Ok((T::zero(), Matrix::zeros(0, c)));
    }
    let probs = softmax_probs(logits, mask);
    let inv_a = T::one() / T::from_f64(a as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (r, &l) in labels.iter().enumerate() {
        loss -= probs.get(r, l).ln();
        let row = grad.row_mut(r);
        row[l] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_a;
        }
    }
    Ok((loss * inv_a, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rulebook::{build_sc_kind, build_ssc, RuleKind};
    use crate::tensor::Coordinate;

    #[test]
    fn ssc_identity_weights_single_site() {
        let mut t: SparseTensor<f64> = SparseTensor::new(3, &[9, 9, 9], 1, 2).unwrap();
        t.set_site(Coordinate::new(0, &[4, 4, 4]), &[3.0, -1.0]).unwrap();
        let rb = build_ssc(&t, 3).unwrap();
        let w = ConvWeights::identity(27, 2);
        let out = conv_forward(&rb, t.features(), &w).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(out.row(0), &[3.0, -1.0]);
    }

    #[test]
    fn ssc_uniform_weights_average_neighbors() {
        // 2D curve: active sites along a diagonal-ish path; 1/9 weights sum
        // the active neighbors, and the active set never grows.
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[8, 8], 1, 1).unwrap();
        let curve = [[1, 1], [2, 2], [3, 2], [4, 3]];
        for c in curve {
            t.set_site(Coordinate::new(0, &c), &[1.0]).unwrap();
        }
        let rb = build_ssc(&t, 3).unwrap();
        let mut w = ConvWeights::zeros(9, 1, 1);
        for wi in &mut w.per_offset {
            wi.set(0, 0, 1.0 / 9.0);
        }
        let out = conv_forward(&rb, t.features(), &w).unwrap();
        assert_eq!(out.rows(), 4);
        // site (2,2) sees (1,1), itself and (3,2): 3/9
        let row = t.row_of(&Coordinate::new(0, &[2, 2])).unwrap();
        assert!((out.get(row, 0) - 3.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_zero_grad() {
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[8, 8], 1, 2).unwrap();
        t.set_site(Coordinate::new(0, &[3, 3]), &[1.0, 2.0]).unwrap();
        let rb = build_ssc(&t, 3).unwrap();
        let w = ConvWeights::identity(9, 2);
        let g = Matrix::zeros(1, 2);
        let grads = conv_backward(&rb, t.features(), &w, &g).unwrap();
        assert!(grads.grad_in.data().iter().all(|&x| x == 0.0));
        assert!(grads.grad_w.iter().all(|m| m.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn conv_backward_scalar_case() {
        // single rule pair with scalar features: grad_in = g*w, grad_w = x*g
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[3, 3], 1, 1).unwrap();
        t.set_site(Coordinate::new(0, &[1, 1]), &[2.0]).unwrap();
        let rb = build_ssc(&t, 1).unwrap();
        let mut w = ConvWeights::zeros(1, 1, 1);
        w.per_offset[0].set(0, 0, 0.5);
        let g = Matrix::from_rows(1, 1, vec![3.0]).unwrap();
        let grads = conv_backward(&rb, t.features(), &w, &g).unwrap();
        assert_eq!(grads.grad_in.get(0, 0), 3.0 * 0.5);
        assert_eq!(grads.grad_w[0].get(0, 0), 2.0 * 3.0);
    }

    #[test]
    fn maxpool_clamps_at_zero() {
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[4, 4], 1, 2).unwrap();
        t.set_site(Coordinate::new(0, &[0, 0]), &[-1.0, -2.0]).unwrap();
        t.set_site(Coordinate::new(0, &[1, 1]), &[-0.5, -3.0]).unwrap();
        let rb = build_sc_kind(&t, 2, 2, RuleKind::MaxPool).unwrap();
        let (out, record) = maxpool_forward(&rb, t.features()).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert!(record.iter().all(|r| r.is_none()));
        // gradient is fully dropped at the clamp
        let g = Matrix::from_rows(out.rows(), 2, vec![1.0; out.rows() * 2]).unwrap();
        let gi = maxpool_backward(&record, &g, rb.a_in());
        assert!(gi.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn maxpool_single_site() {
        let mut t: SparseTensor<f64> = SparseTensor::new(2, &[4, 4], 1, 2).unwrap();
        t.set_site(Coordinate::new(0, &[2, 3]), &[1.5, -0.5]).unwrap();
        let rb = build_sc_kind(&t, 2, 2, RuleKind::MaxPool).unwrap();
        let (out, record) = maxpool_forward(&rb, t.features()).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(out.row(0), &[1.5, 0.0]);
        assert_eq!(record[0], Some(0));
        assert_eq!(record[1], None);
    }

    #[test]
    fn avgpool_divides_by_window_volume() {
        // one active site of value v in an f=2, d=3 window: out = v/8
        let mut t: SparseTensor<f64> = SparseTensor::new(3, &[4, 4, 4], 1, 1).unwrap();
        t.set_site(Coordinate::new(0, &[1, 0, 1]), &[4.0]).unwrap();
        let rb = build_sc_kind(&t, 2, 2, RuleKind::AvgPool).unwrap();
        let out = avgpool_forward(&rb, t.features()).unwrap();
        assert_eq!(out.rows(), 1);
        assert_eq!(out.get(0, 0), 0.5);
    }

    #[test]
    fn avgpool_full_window() {
        let mut t: SparseTensor<f64> = SparseTensor::new(3, &[2, 2, 2], 1, 1).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    t.set_site(Coordinate::new(0, &[x, y, z]), &[1.0]).unwrap();
                }
            }
        }
        let rb = build_sc_kind(&t, 2, 2, RuleKind::AvgPool).unwrap();
        let out = avgpool_forward(&rb, t.features()).unwrap();
        assert_eq!(out.get(0, 0), 1.0);
    }

    #[test]
    fn batchnorm_normalizes_columns() {
        let mut bn = BatchNormState::<f64>::new(2);
        let a = 64;
        let mut data = Vec::with_capacity(a * 2);
        for i in 0..a {
            data.push(i as f64 * 0.3 + 1.0);
            data.push((i as f64).sin());
        }
        let x = Matrix::from_rows(a, 2, data).unwrap();
        let (y, _) = batchnorm_forward(&mut bn, &x, BnMode::Train);
        for c in 0..2 {
            let mean: f64 = (0..a).map(|r| y.get(r, c)).sum::<f64>() / a as f64;
            let var: f64 = (0..a).map(|r| (y.get(r, c) - mean).powi(2)).sum::<f64>() / a as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_constant_column_is_beta() {
        let mut bn = BatchNormState::<f64>::new(1);
        bn.beta[0] = 0.7;
        let x = Matrix::from_rows(4, 1, vec![2.0; 4]).unwrap();
        let (y, _) = batchnorm_forward(&mut bn, &x, BnMode::Train);
        for r in 0..4 {
            assert!((y.get(r, 0) - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNormState::<f64>::new(1);
        bn.running_mean[0] = 1.0;
        bn.running_var[0] = 4.0;
        bn.gamma[0] = 2.0;
        bn.beta[0] = -1.0;
        let x = Matrix::from_rows(1, 1, vec![3.0]).unwrap();
        let (y, _) = batchnorm_forward(&mut bn, &x, BnMode::Eval);
        let expect = 2.0 * (3.0 - 1.0) / (4.0f64 + 1e-5).sqrt() - 1.0;
        assert!((y.get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_empty_train_is_identity() {
        let mut bn = BatchNormState::<f64>::new(3);
        let x = Matrix::zeros(0, 3);
        let (y, cache) = batchnorm_forward(&mut bn, &x, BnMode::Train);
        assert_eq!(y.rows(), 0);
        assert!(cache.skipped);
    }

    #[test]
    fn relu_rows() {
        let x = Matrix::from_rows(2, 2, vec![-1.0f64, -2.0, 1.0, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.row(0), &[0.0, 0.0]);
        assert_eq!(y.row(1), &[1.0, 2.0]);
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = Matrix::from_rows(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Matrix::identity(2);
        let y = linear_forward(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y, x);
        let wz = Matrix::zeros(2, 3);
        let y = linear_forward(&x, &wz, &[5.0, 6.0, 7.0]).unwrap();
        assert_eq!(y.row(0), &[5.0, 6.0, 7.0]);
        assert_eq!(y.row(1), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn nll_uniform_logits() {
        for c in [2usize, 5, 50] {
            let logits = Matrix::<f64>::zeros(3, c);
            let labels = vec![0usize; 3];
            let (loss, _) = masked_softmax_nll(&logits, &labels, None).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_confident_logits() {
        let logits = Matrix::from_rows(1, 2, vec![10.0f64, -10.0]).unwrap();
        let (loss, _) = masked_softmax_nll(&logits, &[0], None).unwrap();
        // closed form: ln(1 + e^{-20})
        assert!((loss - (1.0f64 + (-20.0f64).exp()).ln()).abs() < 1e-15);
        assert!(loss < 3e-9);
    }

    #[test]
    fn nll_singleton_mask_forces_correct() {
        let logits = Matrix::from_rows(2, 3, vec![0.0f64, 5.0, -2.0, 1.0, 1.0, 1.0]).unwrap();
        let mask = [false, false, true];
        let (loss, _) = masked_softmax_nll(&logits, &[2, 2], Some(&mask)).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_bad_labels() {
        let logits = Matrix::zeros(1, 3);
        assert!(masked_softmax_nll::<f64>(&logits, &[3], None).is_err());
        let mask = [true, false, true];
        assert!(masked_softmax_nll::<f64>(&logits, &[1], Some(&mask)).is_err());
    }
}
