//! Reverse-mode differentiation over the fixed kernel set.
//!
//! Operations are recorded onto a linear tape as they execute; the forward
//! values come from the same kernels in [`crate::tensor`], so a tape forward
//! is bit-identical to the plain one. Replaying the tape backward accumulates
//! gradients for every leaf marked trainable, in a fixed order.
//!
//! The op set is deliberately closed: exactly what the denoiser stack and its
//! training loss need, nothing else.

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Silu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    /// Saves the attention matrix from the forward pass for the backward rule.
    Attention { q: Var, k: Var, v: Var, attn: Tensor<T> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddRow { x: Var, row: Var },
    RowSelect { table: Var, row: usize },
    Reshape { x: Var },
    Patchify { x: Var, patch: usize },
    Unpatchify { x: Var, patch: usize },
    MeanSq { x: Var },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    trainable: bool,
}

/// Wengert-list tape recording forward ops for later gradient replay.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op, trainable: false });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input; `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].trainable = trainable;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = tensor::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = tensor::silu(self.value(x))?;
        Ok(self.push(value, Op::Silu { x }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let value = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (out, attn) =
            tensor::scaled_dot_attention(self.value(q), self.value(k), self.value(v))?;
        Ok(self.push(out, Op::Attention { q, k, v, attn }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = tensor::scale(self.value(x), c)?;
        Ok(self.push(value, Op::Scale { x, c }))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = tensor::add_row(self.value(x), self.value(row))?;
        Ok(self.push(value, Op::AddRow { x, row }))
    }

    /// Selects row `row` of a `[rows, d]` table as a `[d]` tensor.
    pub fn row_select(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = tensor::dims2(t, "row_select")?;
        if row >= rows {
            return Err(Error::Range(format!("row_select: row {row} of {rows}")));
        }
        let value = Tensor::new(vec![d], t.data()[row * d..(row + 1) * d].to_vec())?;
        Ok(self.push(value, Op::RowSelect { table, row }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var> {
        let value = tensor::patchify(self.value(x), patch)?;
        Ok(self.push(value, Op::Patchify { x, patch }))
    }

    pub fn unpatchify(&mut self, x: Var, c: usize, h: usize, w: usize, patch: usize) -> Result<Var> {
        let value = tensor::unpatchify(self.value(x), c, h, w, patch)?;
        Ok(self.push(value, Op::Unpatchify { x, patch }))
    }

    pub fn mean_sq(&mut self, x: Var) -> Result<Var> {
        let value = tensor::mean_sq(self.value(x))?;
        Ok(self.push(value, Op::MeanSq { x }))
    }

    /// Replays the tape backward from a scalar loss.
    ///
    /// Gradient accumulation visits nodes in strict reverse recording order,
    /// so results are bit-identical across runs.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward: loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(vec![1], T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let accumulate = |grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>| -> Result<()> {
            grads[v.0] = Some(match grads[v.0].take() {
                Some(existing) => tensor::add(&existing, &delta)?,
                None => delta,
            });
            Ok(())
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                accumulate(grads, *x, tensor::matmul_nt(g, wv)?)?;
                accumulate(grads, *w, tensor::matmul_tn(xv, g)?)?;
                accumulate(grads, *b, column_sum(g)?)?;
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    let s = tensor::sigmoid(v);
                    *dv = *dv * (s * (T::one() + v * (T::one() - s)));
                }
                accumulate(grads, *x, d)?;
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (dx, dgamma, dbeta) =
                    layer_norm_backward(self.value(*x), self.value(*gamma), g)?;
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gamma, dgamma)?;
                accumulate(grads, *beta, dbeta)?;
            }
            Op::Attention { q, k, v, attn } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let d = qv.shape()[1];
                let inv_sqrt_d = T::from_f64(1.0 / (d as f64).sqrt());
                // dv = attnᵀ·g
                accumulate(grads, *v, tensor::matmul_tn(attn, g)?)?;
                // d_attn = g·vᵀ, then softmax backward to logits
                let d_attn = tensor::matmul_nt(g, vv)?;
                let d_logits = softmax_rows_backward(attn, &d_attn)?;
                accumulate(grads, *q, tensor::scale(&tensor::matmul(&d_logits, kv)?, inv_sqrt_d)?)?;
                accumulate(
                    grads,
                    *k,
                    tensor::scale(&tensor::matmul_tn(&d_logits, qv)?, inv_sqrt_d)?,
                )?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, tensor::scale(g, -T::one())?)?;
            }
            Op::Mul { a, b } => {
                accumulate(grads, *a, tensor::mul(g, self.value(*b))?)?;
                accumulate(grads, *b, tensor::mul(g, self.value(*a))?)?;
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, tensor::scale(g, *c)?)?;
            }
            Op::AddRow { x, row } => {
                accumulate(grads, *x, g.clone())?;
                accumulate(grads, *row, column_sum(g)?)?;
            }
            Op::RowSelect { table, row } => {
                let t = self.value(*table);
                let mut dt = Tensor::zeros(t.shape().to_vec());
                let d = g.len();
                dt.data_mut()[row * d..(row + 1) * d].copy_from_slice(g.data());
                accumulate(grads, *table, dt)?;
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, g.reshape(self.value(*x).shape().to_vec())?)?;
            }
            Op::Patchify { x, patch } => {
                let [c, h, w] = {
                    let s = self.value(*x).shape();
                    [s[0], s[1], s[2]]
                };
                accumulate(grads, *x, tensor::unpatchify(g, c, h, w, *patch)?)?;
            }
            Op::Unpatchify { x, patch, .. } => {
                accumulate(grads, *x, tensor::patchify(g, *patch)?)?;
            }
            Op::MeanSq { x } => {
                let xv = self.value(*x);
                let c = g.data()[0] * T::from_f64(2.0 / xv.len() as f64);
                accumulate(grads, *x, tensor::scale(xv, c)?)?;
            }
        }
        Ok(())
    }
}

/// Gradient slots aligned with tape nodes, one per leaf that received flow.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn column_sum<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, d) = tensor::dims2(g, "column_sum")?;
    let mut out = vec![T::zero(); d];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
            *o = *o + v;
        }
    }
    Tensor::new(vec![d], out)
}

fn softmax_rows_backward<T: Scalar>(attn: &Tensor<T>, d_attn: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = tensor::dims2(attn, "softmax backward")?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a = &attn.data()[i * n..(i + 1) * n];
        let da = &d_attn.data()[i * n..(i + 1) * n];
        let mut dot = T::zero();
        for (&av, &dv) in a.iter().zip(da) {
            dot = dot + av * dv;
        }
        for j in 0..n {
            out[i * n + j] = a[j] * (da[j] - dot);
        }
    }
    Tensor::new(vec![m, n], out)
}

fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, d) = tensor::dims2(x, "layer_norm backward")?;
    let eps = T::from_f64(tensor::LAYER_NORM_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = vec![T::zero(); m * d];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for i in 0..m {
        let row = &x.data()[i * d..(i + 1) * d];
        let grow = &g.data()[i * d..(i + 1) * d];
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

        // xhat_j = (x_j - mean) * inv_std
        // dxhat_j = g_j * gamma_j
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (row[j] - mean) * inv_std;
            let dxhat = grow[j] * gamma.data()[j];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            dgamma[j] = dgamma[j] + grow[j] * xhat;
            dbeta[j] = dbeta[j] + grow[j];
        }
        for j in 0..d {
            let xhat = (row[j] - mean) * inv_std;
            let dxhat = grow[j] * gamma.data()[j];
            dx[i * d + j] =
                inv_std * (dxhat - inv_d * sum_dxhat - xhat * (inv_d * sum_dxhat_xhat));
        }
    }
    Ok((
        Tensor::new(vec![m, d], dx)?,
        Tensor::new(vec![d], dgamma)?,
        Tensor::new(vec![d], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central finite differences of a rebuilt scalar function, compared to
    /// the tape gradient at every coordinate of one chosen leaf.
    fn finite_diff_check(
        build: &dyn Fn(&[Tensor<f64>]) -> (Tape<f64>, Vec<Var>, Var),
        inputs: &[Tensor<f64>],
        check_leaf: usize,
        tol: f64,
    ) {
        let (tape, leaves, loss) = build(inputs);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(leaves[check_leaf]).cloned();
        let analytic = analytic.unwrap_or_else(|| Tensor::zeros(inputs[check_leaf].shape().to_vec()));
        let h = 1e-4;
        for idx in 0..inputs[check_leaf].len() {
            let mut plus = inputs.to_vec();
            plus[check_leaf].data_mut()[idx] += h;
            let (tp, _, lp) = build(&plus);
            let mut minus = inputs.to_vec();
            minus[check_leaf].data_mut()[idx] -= h;
            let (tm, _, lm) = build(&minus);
            let fd = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
            let an = analytic.data()[idx];
            let scale = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                (an - fd).abs() / scale <= tol,
                "leaf {check_leaf} idx {idx}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn quadratic_gradient_is_analytic() {
        // loss = sum x^2 = mean_sq(x) * n at x = [1, 2] has gradient [2, 4]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let ms = tape.mean_sq(x).unwrap();
        let loss = tape.scale(ms, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap(), true);
        let zero = tape.leaf(Tensor::zeros(vec![2]), false);
        let prod = tape.mul(x, zero).unwrap();
        let loss = tape.mean_sq(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn loss_off_tape_is_usage_error() {
        let mut other = Tape::<f64>::new();
        let x = other.leaf(Tensor::zeros(vec![1]), false);
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn linear_silu_chain_matches_finite_differences() {
        let mut rng = Rng::new(902);
        let inputs = vec![
            Tensor::<f64>::randn(vec![3, 4], &mut rng),
            Tensor::<f64>::randn(vec![4, 3], &mut rng),
            Tensor::<f64>::randn(vec![3], &mut rng),
        ];
        let build = |ins: &[Tensor<f64>]| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(ins[0].clone(), true);
            let w = tape.leaf(ins[1].clone(), true);
            let b = tape.leaf(ins[2].clone(), true);
            let lin = tape.linear(x, w, b).unwrap();
            let act = tape.silu(lin).unwrap();
            let loss = tape.mean_sq(act).unwrap();
            (tape, vec![x, w, b], loss)
        };
        for leaf in 0..3 {
            finite_diff_check(&build, &inputs, leaf, 1e-4);
        }
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = Rng::new(903);
        let inputs = vec![
            Tensor::<f64>::randn(vec![4, 3], &mut rng),
            Tensor::<f64>::randn(vec![4, 3], &mut rng),
            Tensor::<f64>::randn(vec![4, 3], &mut rng),
        ];
        let build = |ins: &[Tensor<f64>]| {
            let mut tape = Tape::<f64>::new();
            let q = tape.leaf(ins[0].clone(), true);
            let k = tape.leaf(ins[1].clone(), true);
            let v = tape.leaf(ins[2].clone(), true);
            let out = tape.attention(q, k, v).unwrap();
            let loss = tape.mean_sq(out).unwrap();
            (tape, vec![q, k, v], loss)
        };
        for leaf in 0..3 {
            finite_diff_check(&build, &inputs, leaf, 1e-4);
        }
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = Rng::new(904);
        let inputs = vec![
            Tensor::<f64>::randn(vec![3, 5], &mut rng),
            Tensor::<f64>::randn(vec![5], &mut rng),
            Tensor::<f64>::randn(vec![5], &mut rng),
        ];
        let build = |ins: &[Tensor<f64>]| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(ins[0].clone(), true);
            let g = tape.leaf(ins[1].clone(), true);
            let b = tape.leaf(ins[2].clone(), true);
            let y = tape.layer_norm(x, g, b).unwrap();
            let loss = tape.mean_sq(y).unwrap();
            (tape, vec![x, g, b], loss)
        };
        for leaf in 0..3 {
            finite_diff_check(&build, &inputs, leaf, 1e-4);
        }
    }

    #[test]
    fn elementwise_and_structural_ops_match_finite_differences() {
        let mut rng = Rng::new(905);
        let inputs = vec![
            Tensor::<f64>::randn(vec![3, 8, 8], &mut rng),
            Tensor::<f64>::randn(vec![4, 48], &mut rng),
            Tensor::<f64>::randn(vec![48], &mut rng),
        ];
        let build = |ins: &[Tensor<f64>]| {
            let mut tape = Tape::<f64>::new();
            let img = tape.leaf(ins[0].clone(), true);
            let other = tape.leaf(ins[1].clone(), true);
            let row = tape.leaf(ins[2].clone(), true);
            let tok = tape.patchify(img, 4).unwrap();
            let mixed = tape.mul(tok, other).unwrap();
            let shifted = tape.add_row(mixed, row).unwrap();
            let summed = tape.add(shifted, tok).unwrap();
            let back = tape.unpatchify(summed, 3, 8, 8, 4).unwrap();
            let diff = tape.sub(back, img).unwrap();
            let loss = tape.mean_sq(diff).unwrap();
            (tape, vec![img, other, row], loss)
        };
        for leaf in 0..3 {
            finite_diff_check(&build, &inputs, leaf, 1e-4);
        }
    }

    #[test]
    fn row_select_routes_gradient_to_one_row() {
        let mut rng = Rng::new(906);
        let table = Tensor::<f64>::randn(vec![5, 4], &mut rng);
        let mut tape = Tape::<f64>::new();
        let t = tape.leaf(table.clone(), true);
        let r = tape.row_select(t, 2).unwrap();
        let loss = tape.mean_sq(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gt = grads.get(t).unwrap();
        for row in 0..5 {
            for col in 0..4 {
                let g = gt.at2(row, col);
                if row == 2 {
                    let expect = table.at2(2, col) * 2.0 / 4.0;
                    assert!((g - expect).abs() < 1e-12);
                } else {
                    assert_eq!(g, 0.0);
                }
            }
        }
    }
}
