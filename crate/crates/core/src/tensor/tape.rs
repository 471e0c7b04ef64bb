//! Operation tape with analytic backward passes.
//!
//! Values are computed eagerly as operations are recorded; `backward`
//! replays the graph in reverse topological order (which is simply the
//! recording order, reversed) exactly once per node.

use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    /// Y = A' B' where A' = ta ? Aᵀ : A (same for B).
    Matmul { ta: bool, tb: bool },
    Add,
    Mul,
    Scale(S),
    AddConst(S),
    /// x[t,d] + v[d] broadcast over rows.
    AddRow,
    /// x[t,d] ⊙ v[d] broadcast over rows.
    MulRow,
    LayerNorm,
    /// Softmax over the last axis.
    Softmax,
    /// tanh-approximation GELU.
    Gelu,
    /// out[i] = in[index[i]]; arbitrary gather (reshape, transpose, slice).
    Reorder { index: Rc<Vec<usize>> },
    /// Column-wise concatenation of k row-count-matched 2-D tensors.
    ConcatCols,
}

struct Node<S> {
    op: Op<S>,
    inputs: Vec<TensorId>,
    value: Tensor<S>,
    /// Saved per-row statistics (layer norm: mean, rstd interleaved).
    aux: Vec<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, id: TensorId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, zeros if the output does not depend on it.
    pub fn take(&mut self, id: TensorId) -> Tensor<S> {
        self.grads[id.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::one() + inner.tanh())
}

fn gelu_grad<S: Real>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let three = S::of(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<TensorId>, value: Tensor<S>, aux: Vec<S>) -> TensorId {
        self.nodes.push(Node { op, inputs, value, aux });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> TensorId {
        self.push(Op::Leaf, vec![], value, vec![])
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: TensorId, b: TensorId, ta: bool, tb: bool) -> Result<TensorId> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::contract(format!(
                "matmul inner dims disagree: [{m},{k}] x [{kb},{n}] (ta={ta}, tb={tb})"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.value(a).data(),
            rsa,
            csa,
            self.value(b).data(),
            rsb,
            csb,
            S::zero(),
            &mut out,
        );
        Ok(self.push(Op::Matmul { ta, tb }, vec![a, b], Tensor::new(&[m, n], out), vec![]))
    }

    /// y = x Wᵀ + b with x:[t,in], w:[out,in], b:[out].
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let y = self.matmul_t(x, w, false, true)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip(a, b, Op::Add, |x, y| x + y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip(a, b, Op::Mul, |x, y| x * y)
    }

    fn zip(&mut self, a: TensorId, b: TensorId, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op, vec![a, b], Tensor::new(&shape, data), vec![]))
    }

    pub fn scale(&mut self, x: TensorId, c: S) -> TensorId {
        let v = self.value(x).map(|e| e * c);
        self.push(Op::Scale(c), vec![x], v, vec![])
    }

    pub fn add_const(&mut self, x: TensorId, c: S) -> TensorId {
        let v = self.value(x).map(|e| e + c);
        self.push(Op::AddConst(c), vec![x], v, vec![])
    }

    fn row_op(&mut self, x: TensorId, v: TensorId, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<TensorId> {
        let (t, d) = self.value(x).dims2()?;
        if self.value(v).numel() != d {
            return Err(Error::contract(format!(
                "row broadcast: vector length {} vs row width {d}",
                self.value(v).numel()
            )));
        }
        let mut out = vec![S::zero(); t * d];
        let xs = self.value(x).data();
        let vs = self.value(v).data();
        for r in 0..t {
            for c in 0..d {
                out[r * d + c] = f(xs[r * d + c], vs[c]);
            }
        }
        Ok(self.push(op, vec![x, v], Tensor::new(&[t, d], out), vec![]))
    }

    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.row_op(x, v, Op::AddRow, |a, b| a + b)
    }

    pub fn mul_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.row_op(x, v, Op::MulRow, |a, b| a * b)
    }

    /// Layer normalization over the last axis with learnable gain/bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: S) -> Result<TensorId> {
        let (t, d) = self.value(x).dims2()?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::contract(format!(
                "layer_norm: gain/bias length must be {d}, got {}/{}",
                self.value(gain).numel(),
                self.value(bias).numel()
            )));
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data().to_vec();
        let bs = self.value(bias).data().to_vec();
        let nd = S::of(d as f64);
        let mut out = vec![S::zero(); t * d];
        let mut aux = vec![S::zero(); 2 * t];
        for r in 0..t {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().fold(S::zero(), |a, &v| a + v) / nd;
            let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / nd;
            let rstd = S::one() / (var + eps).sqrt();
            aux[2 * r] = mean;
            aux[2 * r + 1] = rstd;
            for c in 0..d {
                out[r * d + c] = (row[c] - mean) * rstd * gs[c] + bs[c];
            }
        }
        Ok(self.push(Op::LayerNorm, vec![x, gain, bias], Tensor::new(&[t, d], out), aux))
    }

    /// Softmax over the last axis (rows sum to 1).
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let (t, d) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); t * d];
        for r in 0..t {
            let row = &xs[r * d..(r + 1) * d];
            let max = row.iter().fold(row[0], |a, &v| if v > a { v } else { a });
            let mut sum = S::zero();
            for c in 0..d {
                let e = (row[c] - max).exp();
                out[r * d + c] = e;
                sum += e;
            }
            for c in 0..d {
                out[r * d + c] /= sum;
            }
        }
        Ok(self.push(Op::Softmax, vec![x], Tensor::new(&[t, d], out), vec![]))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let v = self.value(x).map(gelu_val);
        self.push(Op::Gelu, vec![x], v, vec![])
    }

    /// Gather: out[i] = in[index[i]], with an arbitrary output shape.
    /// Covers reshapes, transposes, slices, patchify/unpatchify shuffles.
    pub fn reorder(&mut self, x: TensorId, index: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<TensorId> {
        let n: usize = out_shape.iter().product();
        if index.len() != n {
            return Err(Error::contract(format!(
                "reorder: index length {} vs output numel {n}",
                index.len()
            )));
        }
        let xs = self.value(x).data();
        let in_len = xs.len();
        let mut out = Vec::with_capacity(n);
        for &i in index.iter() {
            if i >= in_len {
                return Err(Error::contract(format!("reorder: index {i} out of range {in_len}")));
            }
            out.push(xs[i]);
        }
        Ok(self.push(Op::Reorder { index }, vec![x], Tensor::new(out_shape, out), vec![]))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let (t, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != t {
                return Err(Error::contract(format!("concat_cols row mismatch: {r} vs {t}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::zero(); t * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..t {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), Tensor::new(&[t, total], out), vec![]))
    }

    /// Reverse sweep from `output`, seeded with d(loss)/d(output).
    pub fn backward(&self, output: TensorId, seed: &Tensor<S>) -> Result<Gradients<S>> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::contract(format!(
                "backward seed shape {:?} vs output shape {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn add_into(&self, grads: &mut Vec<Option<Tensor<S>>>, id: TensorId, delta: Tensor<S>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, dy: &Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { ta, tb } => {
                let (m, n) = node.value.dims2().expect("matmul value is 2-D");
                let a_val = self.value(ins[0]);
                let b_val = self.value(ins[1]);
                let (ar, ac) = a_val.dims2().unwrap();
                let (br, bc) = b_val.dims2().unwrap();
                let k = if *ta { ar } else { ac };
                // A' strides as [m,k]; B' strides as [k,n]
                let sa = if *ta { (1isize, ac as isize) } else { (ac as isize, 1) };
                let sb = if *tb { (1isize, bc as isize) } else { (bc as isize, 1) };
                let sdy = (n as isize, 1isize);
                // dA
                let mut da = vec![S::zero(); ar * ac];
                if *ta {
                    // dAstored [k,m] = B'[k,n] x dYᵀ[n,m]
                    S::gemm(k, n, m, S::one(), b_val.data(), sb.0, sb.1, dy.data(), sdy.1, sdy.0, S::zero(), &mut da);
                } else {
                    // dA [m,k] = dY[m,n] x B'ᵀ[n,k]
                    S::gemm(m, n, k, S::one(), dy.data(), sdy.0, sdy.1, b_val.data(), sb.1, sb.0, S::zero(), &mut da);
                }
                self.add_into(grads, ins[0], Tensor::new(&[ar, ac], da));
                // dB
                let mut db = vec![S::zero(); br * bc];
                if *tb {
                    // dBstored [n,k] = dYᵀ[n,m] x A'[m,k]
                    S::gemm(n, m, k, S::one(), dy.data(), sdy.1, sdy.0, a_val.data(), sa.0, sa.1, S::zero(), &mut db);
                } else {
                    // dB [k,n] = A'ᵀ[k,m] x dY[m,n]
                    S::gemm(k, m, n, S::one(), a_val.data(), sa.1, sa.0, dy.data(), sdy.0, sdy.1, S::zero(), &mut db);
                }
                self.add_into(grads, ins[1], Tensor::new(&[br, bc], db));
            }
            Op::Add => {
                self.add_into(grads, ins[0], dy.clone());
                self.add_into(grads, ins[1], dy.clone());
            }
            Op::Mul => {
                let a = self.value(ins[0]);
                let b = self.value(ins[1]);
                let da = Tensor::new(
                    dy.shape(),
                    dy.data().iter().zip(b.data()).map(|(&g, &v)| g * v).collect(),
                );
                let db = Tensor::new(
                    dy.shape(),
                    dy.data().iter().zip(a.data()).map(|(&g, &v)| g * v).collect(),
                );
                self.add_into(grads, ins[0], da);
                self.add_into(grads, ins[1], db);
            }
            Op::Scale(c) => {
                let c = *c;
                self.add_into(grads, ins[0], dy.map(|g| g * c));
            }
            Op::AddConst(_) => {
                self.add_into(grads, ins[0], dy.clone());
            }
            Op::AddRow => {
                let (t, d) = node.value.dims2().unwrap();
                self.add_into(grads, ins[0], dy.clone());
                let mut dv = vec![S::zero(); d];
                for r in 0..t {
                    for c in 0..d {
                        dv[c] += dy.data()[r * d + c];
                    }
                }
                self.add_into(grads, ins[1], Tensor::new(self.value(ins[1]).shape(), dv));
            }
            Op::MulRow => {
                let (t, d) = node.value.dims2().unwrap();
                let xs = self.value(ins[0]).data();
                let vs = self.value(ins[1]).data();
                let mut dx = vec![S::zero(); t * d];
                let mut dv = vec![S::zero(); d];
                for r in 0..t {
                    for c in 0..d {
                        let g = dy.data()[r * d + c];
                        dx[r * d + c] = g * vs[c];
                        dv[c] += g * xs[r * d + c];
                    }
                }
                self.add_into(grads, ins[0], Tensor::new(&[t, d], dx));
                self.add_into(grads, ins[1], Tensor::new(self.value(ins[1]).shape(), dv));
            }
            Op::LayerNorm => {
                let (t, d) = node.value.dims2().unwrap();
                let xs = self.value(ins[0]).data();
                let gs = self.value(ins[1]).data();
                let nd = S::of(d as f64);
                let mut dx = vec![S::zero(); t * d];
                let mut dg = vec![S::zero(); d];
                let mut db = vec![S::zero(); d];
                for r in 0..t {
                    let mean = node.aux[2 * r];
                    let rstd = node.aux[2 * r + 1];
                    let mut sum_dyg = S::zero();
                    let mut sum_dygh = S::zero();
                    for c in 0..d {
                        let h = (xs[r * d + c] - mean) * rstd;
                        let g = dy.data()[r * d + c];
                        let dyg = g * gs[c];
                        sum_dyg += dyg;
                        sum_dygh += dyg * h;
                        dg[c] += g * h;
                        db[c] += g;
                    }
                    let m1 = sum_dyg / nd;
                    let m2 = sum_dygh / nd;
                    for c in 0..d {
                        let h = (xs[r * d + c] - mean) * rstd;
                        let dyg = dy.data()[r * d + c] * gs[c];
                        dx[r * d + c] = (dyg - m1 - h * m2) * rstd;
                    }
                }
                self.add_into(grads, ins[0], Tensor::new(&[t, d], dx));
                self.add_into(grads, ins[1], Tensor::new(self.value(ins[1]).shape(), dg));
                self.add_into(grads, ins[2], Tensor::new(self.value(ins[2]).shape(), db));
            }
            Op::Softmax => {
                let (t, d) = node.value.dims2().unwrap();
                let ys = node.value.data();
                let mut dx = vec![S::zero(); t * d];
                for r in 0..t {
                    let mut dot = S::zero();
                    for c in 0..d {
                        dot += dy.data()[r * d + c] * ys[r * d + c];
                    }
                    for c in 0..d {
                        dx[r * d + c] = ys[r * d + c] * (dy.data()[r * d + c] - dot);
                    }
                }
                self.add_into(grads, ins[0], Tensor::new(&[t, d], dx));
            }
            Op::Gelu => {
                let xs = self.value(ins[0]);
                let dx = Tensor::new(
                    dy.shape(),
                    dy.data().iter().zip(xs.data()).map(|(&g, &x)| g * gelu_grad(x)).collect(),
                );
                self.add_into(grads, ins[0], dx);
            }
            Op::Reorder { index } => {
                let in_shape = self.value(ins[0]).shape().to_vec();
                let mut dx = vec![S::zero(); self.value(ins[0]).numel()];
                for (o, &i) in index.iter().enumerate() {
                    dx[i] += dy.data()[o];
                }
                self.add_into(grads, ins[0], Tensor::new(&in_shape, dx));
            }
            Op::ConcatCols => {
                let (t, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in ins {
                    let (_, w) = self.value(p).dims2().unwrap();
                    let mut dp = vec![S::zero(); t * w];
                    for r in 0..t {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&dy.data()[r * total + off..r * total + off + w]);
                    }
                    self.add_into(grads, p, Tensor::new(&[t, w], dp));
                    off += w;
                }
            }
        }
    }
}
