//! Dense row-major tensors and the differentiable primitives the model is
//! built from.
//!
//! Every primitive with learnable inputs has an explicit backward companion
//! (`matmul` / `matmul_backward`, ...). There is no autodiff tape: the model
//! graph is fixed, so the backward passes are written out by hand and checked
//! against [`finite_diff_grad`] in the test suite. All stochastic ops take an
//! explicit seeded RNG; the same seed gives bit-identical results.

use crate::error::{Error, Result};
use rand::Rng;

/// Element type for tensor math.
///
/// Training and serving run on `f32`; the gradient-check suites instantiate
/// everything with `f64`, where central finite differences are reliable.
pub trait Scalar:
    num_traits::Float + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// The Gauss error function, used by the exact-erf GELU.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dense tensor with row-major storage.
///
/// Invariants (enforced at construction): the shape is non-empty, every
/// dimension is >= 1, and `data.len()` equals the product of the dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidArgument("tensor shape must be non-empty".into()));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be >= 1, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        assert!(!shape.is_empty() && len > 0, "invalid shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // shapes have no zero dimensions
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Number of rows when the tensor is viewed as 2-D `[rows, last_dim]`.
    pub fn rows_2d(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is non-empty")
    }

    /// Fills the tensor with zeros in place.
    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    fn dims_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// A learnable tensor with its gradient accumulator and a stable name.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }
}

/// C = A x B for 2-D tensors `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims_2d("matmul")?;
    let (kb, n) = b.dims_2d("matmul")?;
    if k != kb {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    let av = a.data();
    let bv = b.data();
    let cv = out.data_mut();
    // i-k-j order keeps the inner loop contiguous in both B and C.
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        let crow = &mut cv[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &bv[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Transpose of a 2-D tensor.
pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims_2d("transpose")?;
    let mut out = Tensor::zeros(&[n, m]);
    let av = a.data();
    let ov = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            ov[j * m + i] = av[i * n + j];
        }
    }
    Ok(out)
}

/// Gradients of `matmul`: dA = dC x B^T, dB = A^T x dC.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let da = matmul(d_out, &transpose(b)?)?;
    let db = matmul(&transpose(a)?, d_out)?;
    Ok((da, db))
}

/// Softmax over the last axis, computed with max-subtraction for stability.
///
/// Entries of `-inf` are legal (they get weight exactly 0) as long as each
/// slice keeps at least one finite entry.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Gradient of `softmax_rows` given its output `y`: dx = y * (dy - sum(dy * y)).
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != d_out.shape() {
        return Err(Error::Shape {
            op: "softmax_rows_backward",
            lhs: y.shape().to_vec(),
            rhs: d_out.shape().to_vec(),
        });
    }
    let n = y.last_dim();
    let mut dx = y.clone();
    let yv = y.data();
    let gv = d_out.data();
    for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
        let yr = &yv[r * n..(r + 1) * n];
        let gr = &gv[r * n..(r + 1) * n];
        let mut dot = T::zero();
        for j in 0..n {
            dot = dot + yr[j] * gr[j];
        }
        for j in 0..n {
            row[j] = yr[j] * (gr[j] - dot);
        }
    }
    Ok(dx)
}

/// Layer normalization over the last axis: per-slice standardization scaled
/// by `gamma` and shifted by `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let dn = T::from_f64(d as f64);
    let gv = gamma.data();
    let bv = beta.data();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mut mean = T::zero();
        for &v in row.iter() {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row.iter() {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let rstd = T::one() / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = gv[j] * ((*v - mean) * rstd) + bv[j];
        }
    }
    Ok(out)
}

/// Gradients of `layer_norm` with respect to input, gamma, and beta.
///
/// Stateless: recomputes the per-slice statistics from `x` instead of keeping
/// a forward cache.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = x.last_dim();
    if gamma.shape() != [d] {
        return Err(Error::Shape {
            op: "layer_norm_backward",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if x.shape() != d_out.shape() {
        return Err(Error::Shape {
            op: "layer_norm_backward",
            lhs: x.shape().to_vec(),
            rhs: d_out.shape().to_vec(),
        });
    }
    let dn = T::from_f64(d as f64);
    let gv = gamma.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let xv = x.data();
    let ov = d_out.data();
    for r in 0..x.rows_2d() {
        let xr = &xv[r * d..(r + 1) * d];
        let or = &ov[r * d..(r + 1) * d];

        let mut mean = T::zero();
        for &v in xr.iter() {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in xr.iter() {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let rstd = T::one() / (var + eps).sqrt();

        // xhat_j = (x_j - mean) * rstd; dxhat_j = d_out_j * gamma_j
        // dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = or[j] * gv[j];
            mean_dxhat = mean_dxhat + dxhat;
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat * xhat;
        }
        mean_dxhat = mean_dxhat / dn;
        mean_dxhat_xhat = mean_dxhat_xhat / dn;

        let dgv = dgamma.data_mut();
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            dgv[j] = dgv[j] + or[j] * xhat;
        }
        let dbv = dbeta.data_mut();
        for j in 0..d {
            dbv[j] = dbv[j] + or[j];
        }
        let dxv = dx.data_mut();
        for j in 0..d {
            let xhat = (xr[j] - mean) * rstd;
            let dxhat = or[j] * gv[j];
            dxv[r * d + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    Ok((dx, dgamma, dbeta))
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(FRAC_1_SQRT_2);
    for v in out.data_mut().iter_mut() {
        let phi = half * (T::one() + (*v * inv_sqrt2).erf());
        *v = *v * phi;
    }
    out
}

/// Gradient of `gelu`: dy/dx = Phi(x) + x * phi(x).
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != d_out.shape() {
        return Err(Error::Shape {
            op: "gelu_backward",
            lhs: x.shape().to_vec(),
            rhs: d_out.shape().to_vec(),
        });
    }
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(FRAC_1_SQRT_2);
    let inv_sqrt2pi = T::from_f64(FRAC_1_SQRT_2PI);
    let mut dx = x.clone();
    let gv = d_out.data();
    for (i, v) in dx.data_mut().iter_mut().enumerate() {
        let xi = *v;
        let cdf = half * (T::one() + (xi * inv_sqrt2).erf());
        let pdf = inv_sqrt2pi * (-(xi * xi) * half).exp();
        *v = gv[i] * (cdf + xi * pdf);
    }
    Ok(dx)
}

/// Inverted dropout. In train mode each element is zeroed independently with
/// probability `p` and survivors are scaled by `1/(1-p)`; in eval mode the
/// input passes through untouched (bit-exact identity).
///
/// Returns the output together with the multiplier mask (entries are 0 or
/// `1/(1-p)`); the mask is also the exact backward multiplier.
pub fn dropout_cached<T: Scalar, R: Rng>(
    x: &Tensor<T>,
    p: f64,
    train_mode: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !train_mode || p == 0.0 {
        return Ok((x.clone(), Tensor::full(x.shape(), T::one())));
    }
    let scale = T::from_f64(1.0 / (1.0 - p));
    let mut out = x.clone();
    let mut mask = Tensor::zeros(x.shape());
    let mv = mask.data_mut();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        // Draw in f64 so f32 and f64 runs see identical masks from one seed.
        if rng.gen::<f64>() < p {
            *v = T::zero();
        } else {
            *v = *v * scale;
            mv[i] = scale;
        }
    }
    Ok((out, mask))
}

/// Dropout without the mask, for callers that do not backpropagate.
pub fn dropout<T: Scalar, R: Rng>(
    x: &Tensor<T>,
    p: f64,
    train_mode: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    Ok(dropout_cached(x, p, train_mode, rng)?.0)
}

/// Backward of dropout: the saved mask is the elementwise multiplier.
pub fn dropout_backward<T: Scalar>(d_out: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    hadamard(d_out, mask)
}

/// Mean cross-entropy over a `[B, C]` batch of logits, with the paired
/// gradient `(softmax - one_hot) / B`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    cross_entropy_weighted(logits, labels, None)
}

/// Cross-entropy with optional per-class weights.
///
/// With weights the loss is the weighted mean `sum(w_y * nll) / sum(w_y)` and
/// the gradient scales accordingly; `None` reduces to the plain mean.
pub fn cross_entropy_weighted<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[T]>,
) -> Result<(T, Tensor<T>)> {
    let (b, c) = logits.dims_2d("cross_entropy")?;
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy got {} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(w) = class_weights {
        if w.len() != c {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy got {} class weights for {c} classes",
                w.len()
            )));
        }
        if w.iter().any(|&v| v <= T::zero()) {
            return Err(Error::InvalidArgument("class weights must be > 0".into()));
        }
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range [0, {c}) at row {row}"
            )));
        }
    }

    let probs = softmax_rows(logits);
    let lv = logits.data();
    let mut dlogits = probs.clone();
    let mut loss = T::zero();
    let mut weight_sum = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        let w = class_weights.map_or(T::one(), |ws| ws[label]);
        weight_sum = weight_sum + w;
        let r = &lv[row * c..(row + 1) * c];
        // log-softmax evaluated directly for numerical stability
        let mut max = r[0];
        for &v in r.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in r.iter() {
            sum = sum + (v - max).exp();
        }
        let log_prob = r[label] - max - sum.ln();
        loss = loss - w * log_prob;

        let dr = &mut dlogits.data_mut()[row * c..(row + 1) * c];
        dr[label] = dr[label] - T::one();
        for v in dr.iter_mut() {
            *v = *v * w;
        }
    }
    loss = loss / weight_sum;
    for v in dlogits.data_mut().iter_mut() {
        *v = *v / weight_sum;
    }
    Ok((loss, dlogits))
}

/// Central-difference gradient estimate of a scalar function, element by
/// element. The test oracle every hand-written backward pass is checked
/// against; keep it independent of the implementation paths it verifies.
pub fn finite_diff_grad<T: Scalar, F>(mut f: F, x: &Tensor<T>, h: T) -> Tensor<T>
where
    F: FnMut(&Tensor<T>) -> T,
{
    assert!(h > T::zero(), "finite_diff_grad requires h > 0");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    let two = T::from_f64(2.0);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (two * h);
    }
    grad
}

/// Elementwise sum.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    for (v, &w) in out.data_mut().iter_mut().zip(b.data()) {
        *v = *v + w;
    }
    Ok(out)
}

/// In-place elementwise accumulation `a += b`.
pub fn add_assign<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "add_assign",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    for (v, &w) in a.data_mut().iter_mut().zip(b.data()) {
        *v = *v + w;
    }
    Ok(())
}

/// Elementwise product.
pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "hadamard",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    for (v, &w) in out.data_mut().iter_mut().zip(b.data()) {
        *v = *v * w;
    }
    Ok(out)
}

/// Adds a `[n]` bias to every row of a `[m, n]` tensor.
pub fn add_row_broadcast<T: Scalar>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.last_dim();
    if bias.shape() != [n] {
        return Err(Error::Shape {
            op: "add_row_broadcast",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let bv = bias.data();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bv) {
            *v = *v + b;
        }
    }
    Ok(out)
}

/// Sums a `[m, n]` tensor over rows into `[n]` (bias gradients).
pub fn col_sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.last_dim();
    let mut out = Tensor::zeros(&[n]);
    let ov = out.data_mut();
    for row in a.data().chunks(n) {
        for (j, &v) in row.iter().enumerate() {
            ov[j] = ov[j] + v;
        }
    }
    out
}
