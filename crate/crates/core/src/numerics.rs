//! Dense row-major `f64` tensors and the differentiable primitives the model
//! is built from.
//!
//! Every forward primitive has a matching `*_backward` function that maps an
//! upstream gradient to gradients of its inputs. Composite modules chain these
//! by hand; [`finite_diff_check`] verifies any such chain against central
//! differences.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Central-difference step used by [`finite_diff_check`].
pub const FD_STEP: f64 = 1e-5;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("{numel} elements for shape {shape:?}"),
                data.len(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("from_rows", cols, format!("{} in row {i}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent of a matrix.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Trailing extent of a matrix (product of all non-leading extents).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", self.data.len(), numel));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += other`, elementwise. Shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `acc += scale * x`
pub fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

fn expect_matrix(op: &'static str, what: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, format!("rank-2 {what}"), format!("shape {:?}", t.shape())));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `out[i, j] = sum_k x[i, k] * w[k, j] + b[j]`
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d_in) = expect_matrix("affine", "input", x)?;
    let (w_in, d_out) = expect_matrix("affine", "weight", w)?;
    if w_in != d_in {
        return Err(Error::dim("affine", format!("weight rows {d_in}"), w_in));
    }
    if b.shape() != [d_out] {
        return Err(Error::dim("affine", format!("bias [{d_out}]"), format!("{:?}", b.shape())));
    }
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        orow.copy_from_slice(b.data());
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv != 0.0 {
                axpy(orow, xv, w.row(k));
            }
        }
    }
    Tensor::matrix(n, d_out, out)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Gradients of [`affine`] given the upstream gradient `d_out` of shape `[n, d_out]`.
pub fn affine_backward(x: &Tensor, w: &Tensor, d_out: &Tensor) -> AffineGrads {
    let n = x.rows();
    let d_in = x.cols();
    let d_o = w.cols();
    let mut dx = Tensor::zeros(&[n, d_in]);
    let mut dw = Tensor::zeros(&[d_in, d_o]);
    let mut db = Tensor::zeros(&[d_o]);
    for i in 0..n {
        let g = d_out.row(i);
        axpy(db.data_mut(), 1.0, g);
        let xr = x.row(i);
        for k in 0..d_in {
            dx.data[i * d_in + k] = dot(w.row(k), g);
            if xr[k] != 0.0 {
                axpy(dw.row_mut(k), xr[k], g);
            }
        }
    }
    AffineGrads { dx, dw, db }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax of a single slice. Panics on empty input.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    assert!(!x.is_empty(), "softmax of empty slice");
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

pub fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|&v| v - lse).collect()
}

/// Vector-Jacobian product of softmax: `dx = y * (dy - <dy, y>)`.
pub fn softmax_backward_slice(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let s = dot(y, dy);
    y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - s)).collect()
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::dim(op, format!("axis < {}", x.rank()), axis));
    }
    if x.shape[axis] == 0 {
        return Err(Error::Empty { op, what: "softmax axis" });
    }
    Ok(())
}

/// Softmax along `axis` with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let (outer, m, inner) = axis_layout(&x.shape, axis);
    let mut out = x.clone();
    let mut buf = vec![0.0; m];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * m + k) * inner + i;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x.data[idx(k)];
            }
            for (k, v) in softmax_slice(&buf).into_iter().enumerate() {
                out.data[idx(k)] = v;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax`] along `axis`, given its output `y`.
pub fn softmax_backward(y: &Tensor, dy: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax_backward", y, axis)?;
    let (outer, m, inner) = axis_layout(&y.shape, axis);
    let mut dx = Tensor::zeros_like(y);
    let mut ys = vec![0.0; m];
    let mut gs = vec![0.0; m];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * m + k) * inner + i;
            for k in 0..m {
                ys[k] = y.data[idx(k)];
                gs[k] = dy.data[idx(k)];
            }
            for (k, v) in softmax_backward_slice(&ys, &gs).into_iter().enumerate() {
                dx.data[idx(k)] = v;
            }
        }
    }
    Ok(dx)
}

/// Saved quantities from a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_forward(x, gain, bias, eps).map(|(y, _)| y)
}

/// Per-row standardization with population variance, then `gain * xhat + bias`.
pub fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let (n, d) = expect_matrix("layer_norm", "input", x)?;
    if d == 0 {
        return Err(Error::Empty {
            op: "layer_norm",
            what: "feature dimension",
        });
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::dim(
            "layer_norm",
            format!("gain/bias [{d}]"),
            format!("{:?}/{:?}", gain.shape(), bias.shape()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::config("layer_norm.eps", "must be positive"));
    }
    let mut normalized = Tensor::zeros(&[n, d]);
    let mut out = Tensor::zeros(&[n, d]);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for k in 0..d {
            let xh = (r[k] - mean) * is;
            normalized.data[i * d + k] = xh;
            out.data[i * d + k] = gain.data[k] * xh + bias.data[k];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = cache.normalized.rows();
    let d = cache.normalized.cols();
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = cache.normalized.row(i);
        let g = d_out.row(i);
        for k in 0..d {
            dgain.data[k] += g[k] * xh[k];
            dbias.data[k] += g[k];
            dxhat[k] = g[k] * gain.data[k];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xh = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[i];
        for k in 0..d {
            dx.data[i * d + k] = is * (dxhat[k] - mean_dxhat - xh[k] * mean_dxhat_xh);
        }
    }
    (dx, dgain, dbias)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&x.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Backward of tanh in terms of its output `y`.
pub fn tanh_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&y.data) {
        *g *= 1.0 - v * v;
    }
    dx
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of sigmoid in terms of its output `y`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&y.data) {
        *g *= v * (1.0 - v);
    }
    dx
}

pub fn exp(x: &Tensor) -> Tensor {
    x.map(f64::exp)
}

/// Backward of exp in terms of its output `y`.
pub fn exp_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&y.data) {
        *g *= v;
    }
    dx
}

/// Natural log; defined for strictly positive inputs.
pub fn ln(x: &Tensor) -> Tensor {
    x.map(f64::ln)
}

pub fn ln_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&x.data) {
        *g /= v;
    }
    dx
}

/// Concatenates 1-D tensors.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != 1 {
            return Err(Error::dim("concat", "rank-1 parts", format!("{:?}", p.shape())));
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::vector(data))
}

/// Splits a gradient of [`concat`] back into per-part gradients.
pub fn concat_backward(lengths: &[usize], dy: &Tensor) -> Vec<Tensor> {
    let mut off = 0;
    lengths
        .iter()
        .map(|&n| {
            let t = Tensor::vector(dy.data[off..off + n].to_vec());
            off += n;
            t
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max rel err {:>10.3e}  (tol {:.0e})  {}",
            self.op,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares `analytic`, the claimed gradient of `f` at `point`, against
/// central differences with step [`FD_STEP`].
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    op: &str,
    point: &[f64],
    analytic: &[f64],
    tolerance: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::dim("finite_diff_check", point.len(), analytic.len()));
    }
    let f0 = f(point);
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            context: format!("finite_diff_check({op}) forward value"),
        });
    }
    let mut x = point.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let fp = f(&x);
        x[i] = orig - FD_STEP;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if !rel.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_diff_check({op}) coordinate {i}"),
            });
        }
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn affine_examples() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let eye = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        let out = affine(&x, &eye, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
        let out = affine(&x, &zero, &Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
        let w = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let out = affine(&x, &w, &Tensor::vector(vec![1.0, 1.0])).unwrap();
        // [1*1 + 2*3 + 1, 1*2 + 2*4 + 1]
        assert_eq!(out.data(), &[8.0, 11.0]);
        assert_eq!(out.shape(), &[1, 2]);
    }

    #[test]
    fn affine_shape_errors() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(affine(&x, &w, &b), Err(Error::Dimension { .. })));
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(
            affine(&x, &w, &Tensor::zeros(&[3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        close(&softmax_slice(&[0.0, 0.0]), &[0.5, 0.5], 0.0);
        let big = softmax_slice(&[1000.0, 0.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300);
        // exp(0.3), exp(-0.2), exp(0.9) normalised by hand
        let e = [0.3f64.exp(), (-0.2f64).exp(), 0.9f64.exp()];
        let z: f64 = e.iter().sum();
        let oracle: Vec<f64> = e.iter().map(|v| v / z).collect();
        let got = softmax_slice(&[0.3, -0.2, 0.9]);
        close(&got, &oracle, 1e-15);
        close(&got, &[0.2917, 0.1769, 0.5314], 1e-4);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::from_rows(&[[0.0, 1.0], [0.0, 3.0]]).unwrap();
        let y = softmax(&x, 0).unwrap();
        close(&[y.data()[0], y.data()[2]], &[0.5, 0.5], 1e-15);
        let s = y.data()[1] + y.data()[3];
        assert!((s - 1.0).abs() < 1e-15);
        assert!(matches!(
            softmax(&Tensor::zeros(&[2, 0]), 1),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::vector(vec![1.0, 1.0]);
        let zero = Tensor::vector(vec![0.0, 0.0]);
        let x = Tensor::from_rows(&[[2.0, 2.0]]).unwrap();
        assert_eq!(layer_norm(&x, &one, &zero, LAYER_NORM_EPS).unwrap().data(), &[0.0, 0.0]);
        let x = Tensor::from_rows(&[[1.0, 3.0]]).unwrap();
        close(layer_norm(&x, &one, &zero, 1e-12).unwrap().data(), &[-1.0, 1.0], 1e-6);
        let five = Tensor::vector(vec![5.0, 5.0]);
        let x = Tensor::from_rows(&[[-3.0, 17.5]]).unwrap();
        assert_eq!(layer_norm(&x, &zero, &five, LAYER_NORM_EPS).unwrap().data(), &[5.0, 5.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::vector(vec![1.0, 1.0, 1.0]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn affine_is_exact_under_finite_differences() {
        let x = Tensor::from_rows(&[[0.3, -0.7, 1.1]]).unwrap();
        let w = Tensor::matrix(3, 2, vec![0.5, -0.2, 0.1, 0.9, -1.3, 0.4]).unwrap();
        let b = Tensor::vector(vec![0.05, -0.4]);
        let r = [0.7, -1.9];
        let g = affine_backward(&x, &w, &Tensor::from_rows(&[r]).unwrap());
        let report = finite_diff_check("affine/w", w.data(), g.dw.data(), 1e-9, |p| {
            let w = Tensor::matrix(3, 2, p.to_vec()).unwrap();
            dot(affine(&x, &w, &b).unwrap().data(), &r)
        })
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn grad_check_rejects_non_finite_forward() {
        let r = finite_diff_check("ln", &[-1.0], &[0.0], 1e-4, |p| p[0].ln());
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn report_passed_iff_within_tolerance() {
        let r = finite_diff_check("sq", &[2.0], &[4.0], 1e-6, |p| p[0] * p[0]).unwrap();
        assert!(r.passed);
        let r = finite_diff_check("sq", &[2.0], &[4.1], 1e-6, |p| p[0] * p[0]).unwrap();
        assert!(!r.passed);
        assert_eq!(r.passed, r.max_rel_error <= r.tolerance);
    }

    #[test]
    fn concat_round_trip_gradients() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0]);
        let c = concat(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
        let parts = concat_backward(&[2, 1], &c);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
