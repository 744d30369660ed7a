//! Dense row-major tensors and the fixed kernel set used by the denoiser
//! and the trainer.
//!
//! Everything is value-in/value-out with no shared mutable state, and every
//! reduction runs in a fixed serial order, so results are bit-identical
//! across runs. Kernels are generic over [`Scalar`] — `f32` is the working
//! precision, `f64` the verification mode.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar types the engine computes in.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense multidimensional array, row-major, contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating that the extents match the data length.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} scalars, got {}",
                shape,
                want,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    /// Standard-normal tensor drawn from the given stream, filled in index order.
    pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.next_normal())).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar accessor for 2-D tensors.
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Reinterprets the data under a new shape of equal volume.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    /// Errors when any scalar is NaN/Inf; `op` names the producing operation.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise kernels
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    let out = Tensor { shape: a.shape.clone(), data };
    out.ensure_finite("add")?;
    Ok(out)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x - y).collect();
    let out = Tensor { shape: a.shape.clone(), data };
    out.ensure_finite("sub")?;
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b, "mul")?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x * y).collect();
    let out = Tensor { shape: a.shape.clone(), data };
    out.ensure_finite("mul")?;
    Ok(out)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Result<Tensor<T>> {
    let data = a.data.iter().map(|&x| x * c).collect();
    let out = Tensor { shape: a.shape.clone(), data };
    out.ensure_finite("scale")?;
    Ok(out)
}

/// Adds a `[d]` row vector to every row of an `[n, d]` tensor.
pub fn add_row<T: Scalar>(x: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape.last().ok_or_else(|| Error::Dimension("add_row: scalar input".into()))?;
    if row.len() != d {
        return Err(Error::Dimension(format!(
            "add_row: row length {} vs last extent {}",
            row.len(),
            d
        )));
    }
    let mut data = x.data.clone();
    for chunk in data.chunks_mut(d) {
        for (v, r) in chunk.iter_mut().zip(&row.data) {
            *v = *v + *r;
        }
    }
    let out = Tensor { shape: x.shape.clone(), data };
    out.ensure_finite("add_row")?;
    Ok(out)
}

/// SiLU activation x * sigmoid(x), applied elementwise.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let data = x.data.iter().map(|&v| v * sigmoid(v)).collect();
    let out = Tensor { shape: x.shape.clone(), data };
    out.ensure_finite("silu")?;
    Ok(out)
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Mean of squared entries, as a `[1]` tensor.
pub fn mean_sq<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(Error::Dimension("mean_sq: empty tensor".into()));
    }
    let mut acc = T::zero();
    for &v in &x.data {
        acc = acc + v * v;
    }
    let out = Tensor { shape: vec![1], data: vec![acc / T::from_f64(x.len() as f64)] };
    out.ensure_finite("mean_sq")?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Linear algebra kernels
// ---------------------------------------------------------------------------

/// Matrix product of `[m, k]` by `[k, n]`, accumulated in serial k-order.
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, kx) = dims2(x, "matmul lhs")?;
    let (kw, n) = dims2(w, "matmul rhs")?;
    if kx != kw {
        return Err(Error::Dimension(format!("matmul: inner dims {kx} vs {kw}")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let xrow = &x.data[i * kx..(i + 1) * kx];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &xv) in xrow.iter().enumerate() {
            let wrow = &w.data[k * n..(k + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o = *o + xv * wv;
            }
        }
    }
    let out = Tensor { shape: vec![m, n], data: out };
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `x · wᵀ` for `[m, k]` by `[n, k]`, row-dot-row in serial order.
pub fn matmul_nt<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, kx) = dims2(x, "matmul_nt lhs")?;
    let (n, kw) = dims2(w, "matmul_nt rhs")?;
    if kx != kw {
        return Err(Error::Dimension(format!("matmul_nt: inner dims {kx} vs {kw}")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let xrow = &x.data[i * kx..(i + 1) * kx];
        for j in 0..n {
            let wrow = &w.data[j * kw..(j + 1) * kw];
            let mut acc = T::zero();
            for (&a, &b) in xrow.iter().zip(wrow) {
                acc = acc + a * b;
            }
            out[i * n + j] = acc;
        }
    }
    let out = Tensor { shape: vec![m, n], data: out };
    out.ensure_finite("matmul_nt")?;
    Ok(out)
}

/// `xᵀ · w` for `[k, m]` by `[k, n]`.
pub fn matmul_tn<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(x, "matmul_tn lhs")?;
    let (kw, n) = dims2(w, "matmul_tn rhs")?;
    if k != kw {
        return Err(Error::Dimension(format!("matmul_tn: inner dims {k} vs {kw}")));
    }
    let mut out = vec![T::zero(); m * n];
    for kk in 0..k {
        let xrow = &x.data[kk * m..(kk + 1) * m];
        let wrow = &w.data[kk * n..(kk + 1) * n];
        for i in 0..m {
            let xv = xrow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o = *o + xv * wv;
            }
        }
    }
    let out = Tensor { shape: vec![m, n], data: out };
    out.ensure_finite("matmul_tn")?;
    Ok(out)
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = dims2(x, "transpose")?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Affine map `x·w + b` over `[n, d_in]` by `[d_in, d_out]` plus `[d_out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d_out) = dims2(w, "linear weight")?;
    if b.len() != d_out {
        return Err(Error::Dimension(format!(
            "linear: bias length {} vs output width {}",
            b.len(),
            d_out
        )));
    }
    let mut out = matmul(x, w)?;
    for chunk in out.data.chunks_mut(d_out) {
        for (v, &bv) in chunk.iter_mut().zip(&b.data) {
            *v = *v + bv;
        }
    }
    out.ensure_finite("linear")?;
    Ok(out)
}

/// Row-wise softmax with max subtraction, rows summing to one.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = dims2(x, "softmax")?;
    if n == 0 {
        return Err(Error::Dimension("softmax: zero-width rows".into()));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &x.data[i * n..(i + 1) * n];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut denom = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            denom = denom + e;
        }
        for o in orow.iter_mut() {
            *o = *o / denom;
        }
    }
    let out = Tensor { shape: vec![m, n], data: out };
    out.ensure_finite("softmax")?;
    Ok(out)
}

/// Scaled dot-product attention over `[n, d]` queries/keys/values.
///
/// Returns the attended output and the `[n, n]` attention matrix.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    q.same_shape(k, "attention q/k")?;
    q.same_shape(v, "attention q/v")?;
    let (_, d) = dims2(q, "attention")?;
    if d == 0 {
        return Err(Error::Dimension("attention: zero feature width".into()));
    }
    let logits = scale(&matmul_nt(q, k)?, T::from_f64(1.0 / (d as f64).sqrt()))?;
    let attn = softmax_rows(&logits)?;
    let out = matmul(&attn, v)?;
    Ok((out, attn))
}

/// Per-row normalization over the channel axis with learned scale and shift.
///
/// For each row: y = gamma * (x - mean) / sqrt(var + 1e-5) + beta, with the
/// biased variance over the row's channels.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, d) = dims2(x, "layer_norm")?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm: scale/shift length {}/{} vs width {}",
            gamma.len(),
            beta.len(),
            d
        )));
    }
    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut out = vec![T::zero(); m * d];
    for i in 0..m {
        let row = &x.data[i * d..(i + 1) * d];
        let orow = &mut out[i * d..(i + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        for (j, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
            *o = gamma.data[j] * ((v - mean) * inv_std) + beta.data[j];
        }
    }
    let out = Tensor { shape: vec![m, d], data: out };
    out.ensure_finite("layer_norm")?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Patch layout
// ---------------------------------------------------------------------------

/// Splits a `[c, h, w]` image into non-overlapping `patch x patch` tokens.
///
/// Token order is row-major over the patch grid; within a token the layout is
/// channel-major then row-major, giving `[n_tokens, c*patch*patch]`.
pub fn patchify<T: Scalar>(img: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let [c, h, w] = dims3(img, "patchify")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension(format!(
            "patchify: image {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let tok_dim = c * patch * patch;
    let mut out = vec![T::zero(); gh * gw * tok_dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            let base = tok * tok_dim;
            let mut idx = 0;
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        out[base + idx] = img.data[ch * h * w + y * w + x];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, tok_dim], out)
}

/// Inverse of [`patchify`] back to `[c, h, w]`.
pub fn unpatchify<T: Scalar>(
    tokens: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> Result<Tensor<T>> {
    let (n_tok, tok_dim) = dims2(tokens, "unpatchify")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Dimension("unpatchify: grid mismatch".into()));
    }
    let (gh, gw) = (h / patch, w / patch);
    if n_tok != gh * gw || tok_dim != c * patch * patch {
        return Err(Error::Dimension(format!(
            "unpatchify: tokens {n_tok}x{tok_dim} vs grid {}x{}",
            gh * gw,
            c * patch * patch
        )));
    }
    let mut out = vec![T::zero(); c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = gy * gw + gx;
            let base = tok * tok_dim;
            let mut idx = 0;
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        out[ch * h * w + y * w + x] = tokens.data[base + idx];
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub(crate) fn dims2<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match x.shape[..] {
        [m, n] => Ok((m, n)),
        _ => Err(Error::Dimension(format!("{what}: expected 2-D, got {:?}", x.shape))),
    }
}

pub(crate) fn dims3<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<[usize; 3]> {
    match x.shape[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Dimension(format!("{what}: expected 3-D, got {:?}", x.shape))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), rows[0].len()], data).unwrap()
    }

    #[test]
    fn linear_identity_input() {
        let x = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_identity_weight_with_bias() {
        let x = t2(&[&[1.0, 1.0]]);
        let w = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::new(vec![2], vec![5.0, 5.0]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[6.0, 6.0]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut rng = Rng::new(11);
        let x = Tensor::<f64>::randn(vec![3, 4], &mut rng);
        let w = Tensor::<f64>::randn(vec![4, 2], &mut rng);
        let b = Tensor::<f64>::randn(vec![2], &mut rng);
        let y = linear(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for k in 0..4 {
                    acc += x.at2(i, k) * w.at2(k, j);
                }
                assert!((y.at2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let x = t2(&[&[1.0, 2.0]]);
        let w = t2(&[&[1.0], &[2.0], &[3.0]]);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(matches!(linear(&x, &w, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_single_token_is_value() {
        let q = t2(&[&[0.3, -0.7]]);
        let k = t2(&[&[5.0, 1.0]]);
        let v = t2(&[&[2.0, 9.0]]);
        let (out, attn) = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(attn.data(), &[1.0]);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_saturates_to_one_hot() {
        // one dominant key: logit gap >= 20 after scaling
        let d = 2usize;
        let gap = 20.0 * (d as f64).sqrt();
        let q = t2(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let k = t2(&[&[gap + 1.0, 0.0], &[1.0, 0.0]]);
        let v = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (_, attn) = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((attn.at2(0, 0) - 1.0).abs() < 1e-8);
        assert!(attn.at2(0, 1) < 1e-8);
    }

    #[test]
    fn attention_matches_exp_normalize_oracle() {
        let mut rng = Rng::new(23);
        let q = Tensor::<f64>::randn(vec![4, 3], &mut rng);
        let k = Tensor::<f64>::randn(vec![4, 3], &mut rng);
        let v = Tensor::<f64>::randn(vec![4, 3], &mut rng);
        let (out, attn) = scaled_dot_attention(&q, &k, &v).unwrap();
        // brute-force oracle: raw exp / normalize, no max subtraction
        let scale = 1.0 / 3f64.sqrt();
        for i in 0..4 {
            let mut weights = [0.0; 4];
            let mut denom = 0.0;
            for j in 0..4 {
                let mut dot = 0.0;
                for c in 0..3 {
                    dot += q.at2(i, c) * k.at2(j, c);
                }
                weights[j] = (dot * scale).exp();
                denom += weights[j];
            }
            for j in 0..4 {
                assert!((attn.at2(i, j) - weights[j] / denom).abs() < 1e-6);
            }
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += weights[j] / denom * v.at2(j, c);
                }
                assert!((out.at2(i, c) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rejects_zero_width() {
        let q = Tensor::<f64>::zeros(vec![2, 0]);
        let err = scaled_dot_attention(&q, &q, &q);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let a = Tensor::new(vec![1], vec![f64::MAX]).unwrap();
        assert!(matches!(mul(&a, &a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn patchify_round_trips() {
        let mut rng = Rng::new(5);
        let img = Tensor::<f32>::randn(vec![3, 8, 8], &mut rng);
        let tokens = patchify(&img, 4).unwrap();
        assert_eq!(tokens.shape(), &[4, 48]);
        let back = unpatchify(&tokens, 3, 8, 8, 4).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::randn(vec![5, 16], &mut rng);
        let gamma = Tensor::full(vec![16], 1.0);
        let beta = Tensor::zeros(vec![16]);
        let y = layer_norm(&x, &gamma, &beta).unwrap();
        for i in 0..5 {
            let row = &y.data()[i * 16..(i + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn determinism_bitwise_across_runs() {
        let run = || {
            let mut rng = Rng::new(77);
            let x = Tensor::<f32>::randn(vec![6, 6], &mut rng);
            let w = Tensor::<f32>::randn(vec![6, 6], &mut rng);
            let b = Tensor::<f32>::randn(vec![6], &mut rng);
            let y = linear(&x, &w, &b).unwrap();
            let (a, _) = scaled_dot_attention(&y, &y, &y).unwrap();
            silu(&a).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let x = Tensor::new(vec![3, 4], vals).unwrap();
            let s = softmax_rows(&x).unwrap();
            for i in 0..3 {
                let sum: f64 = s.data()[i * 4..(i + 1) * 4].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn attention_output_is_convex_combination(
            seed in 0u64..1000,
        ) {
            let mut rng = Rng::new(seed);
            let q = Tensor::<f64>::randn(vec![4, 3], &mut rng);
            let k = Tensor::<f64>::randn(vec![4, 3], &mut rng);
            let v = Tensor::<f64>::randn(vec![4, 3], &mut rng);
            let (out, attn) = scaled_dot_attention(&q, &k, &v).unwrap();
            for w in attn.data() {
                prop_assert!(*w >= 0.0 && *w <= 1.0 + 1e-12);
            }
            // each output coordinate must lie within the column range of v
            for c in 0..3 {
                let col: Vec<f64> = (0..4).map(|j| v.at2(j, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-9;
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-9;
                for i in 0..4 {
                    prop_assert!(out.at2(i, c) >= lo && out.at2(i, c) <= hi);
                }
            }
        }
    }
}
