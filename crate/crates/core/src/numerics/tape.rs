//! Reverse-mode autodiff over a linear tape.
//!
//! Every op appends a node whose inputs already exist, so the node order is a
//! topological order and the backward sweep is a single reverse pass that
//! visits each node once.

use std::cell::RefCell;

use super::element::gemm;
use super::{Element, Tensor};
use crate::{par, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Tensor<T>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    L2Normalize {
        a: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    ConcatTokens {
        a: Var,
        b: Var,
    },
    Concat0 {
        a: Var,
        b: Var,
    },
    ExpandBatch {
        a: Var,
    },
    GatherTokens {
        a: Var,
        idx: Vec<Vec<usize>>,
    },
    ScatterTokens {
        vis: Var,
        fill: Var,
        positions: Vec<Vec<usize>>,
    },
    SliceTokens {
        a: Var,
        start: usize,
    },
    MeanTokens {
        a: Var,
    },
    Reshape {
        a: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Result of a backward sweep: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// Number of nodes whose backward rule was applied.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let d = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (n.checked_div(d).unwrap_or(0), d)
}

fn token_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [b, t, d] => Ok((*b, *t, *d)),
        _ => Err(Error::shape(op, shape, &[0, 0, 0])),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Element>(x: T) -> T {
    let x = x.f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    T::of(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_grad<T: Element>(x: T) -> T {
    let x = x.f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    T::of(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn add_into<T: Element>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a = *a + b),
        None => *dst = Some(src),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
        debug_assert!(
            value.is_finite() || inputs.iter().any(|v| !nodes[v.0].value.is_finite()),
            "non-finite output from finite inputs in {op:?}"
        );
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf; gradients flow into it.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t.clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// Constant leaf; no gradient is computed for it.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Attention probabilities `[B, heads, T, T]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<T>> {
        match &self.nodes.borrow()[v.0].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }

    /// Copy of `a` cut off from the graph.
    pub fn detach(&self, a: Var) -> Var {
        let v = self.value(a);
        self.constant(v)
    }

    // ---- linear algebra ------------------------------------------------

    /// `x[..., din] · w[din, dout] + b[dout]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, din) = rows_of(xv.shape());
        if wv.rank() != 2 || wv.shape()[0] != din || xv.rank() == 0 {
            return Err(Error::shape("linear", xv.shape(), wv.shape()));
        }
        let dout = wv.shape()[1];
        let mut y = vec![T::zero(); rows * dout];
        gemm(
            rows,
            din,
            dout,
            xv.data(),
            false,
            wv.data(),
            false,
            &mut y,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::shape("linear bias", bv.shape(), &[dout]));
            }
            for row in y.chunks_mut(dout) {
                row.iter_mut()
                    .zip(bv.data())
                    .for_each(|(y, b)| *y = *y + *b);
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::Linear { x, w, b },
            &inputs,
        ))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut c, false);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul { a, b },
            &[a, b],
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[0, 0]));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let d = av.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose { a },
            &[a],
        ))
    }

    // ---- elementwise ---------------------------------------------------

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let d = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), d))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh || bv.numel() == 0 {
            return Err(Error::shape("add_broadcast", ash, bsh));
        }
        let inner = bv.numel();
        let mut out = av.to_vec();
        for chunk in out.chunks_mut(inner) {
            chunk
                .iter_mut()
                .zip(bv.data())
                .for_each(|(x, y)| *x = *x + *y);
        }
        Ok(self.push(
            Tensor::from_parts(ash.to_vec(), out),
            Op::AddBroadcast { a, b },
            &[a, b],
        ))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale { a, c }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let v = self.value(a).map(gelu_fwd);
        self.push(v, Op::Gelu { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, d) = rows_of(av.shape());
        if av.rank() == 0 || d == 0 {
            return Err(Error::EmptyAxis("softmax"));
        }
        let mut out = av.to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), out),
            Op::Softmax { a },
            &[a],
        ))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, d) = rows_of(xv.shape());
        if xv.rank() == 0 || d == 0 {
            return Err(Error::EmptyAxis("layer_norm"));
        }
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        if !(eps > 0.0) {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); rows * d];
        let inv_d = 1.0 / d as f64;
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() * inv_d;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() * inv_d;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::of(rs);
            for j in 0..d {
                let h = T::of((row[j].f64() - mean) * rs);
                xhat[r * d + j] = h;
                y[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), y),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scaled dot-product attention over `[B, T, D]` inputs split into
    /// `heads` contiguous column groups.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, t, d) = token_dims("attention", qv.shape())?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per: Vec<(Vec<T>, Vec<T>)> = par::map_indexed(b, |bi| {
            let off = bi * t * d;
            let (qb, kb, vb) = (
                &qv.data()[off..off + t * d],
                &kv.data()[off..off + t * d],
                &vv.data()[off..off + t * d],
            );
            let mut out = vec![T::zero(); t * d];
            let mut probs = vec![T::zero(); heads * t * t];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..t {
                    let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                    for j in 0..t {
                        let mut s = 0.0;
                        for c in c0..c0 + dh {
                            s += qb[i * d + c].f64() * kb[j * d + c].f64();
                        }
                        p[j] = T::of(s * scale);
                    }
                    softmax_in_place(p);
                    for j in 0..t {
                        let pj = p[j];
                        for c in c0..c0 + dh {
                            out[i * d + c] = out[i * d + c] + pj * vb[j * d + c];
                        }
                    }
                }
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(b * t * d);
        let mut probs = Vec::with_capacity(b * heads * t * t);
        for (o, p) in per {
            out.extend(o);
            probs.extend(p);
        }
        let probs = Tensor::from_parts(vec![b, heads, t, t], probs);
        Ok(self.push(
            Tensor::from_parts(vec![b, t, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        self.push(Tensor::scalar(T::of(s)), Op::Sum { a }, &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(Error::EmptyAxis("mean"));
        }
        let s: f64 = av.data().iter().map(|x| x.f64()).sum();
        Ok(self.push(
            Tensor::scalar(T::of(s / av.numel() as f64)),
            Op::Mean { a },
            &[a],
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        if av.numel() == 0 {
            return Err(Error::EmptyAxis("mse"));
        }
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x.f64() - y.f64()).powi(2))
            .sum();
        Ok(self.push(
            Tensor::scalar(T::of(s / av.numel() as f64)),
            Op::Mse { a, b },
            &[a, b],
        ))
    }

    /// Scale every last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, d) = rows_of(av.shape());
        if av.rank() == 0 || d == 0 {
            return Err(Error::EmptyAxis("l2_normalize"));
        }
        let mut out = av.to_vec();
        let mut norms = Vec::with_capacity(rows);
        for (r, row) in out.chunks_mut(d).enumerate() {
            let n = row.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            row.iter_mut().for_each(|x| *x = T::of(x.f64() / n));
            norms.push(T::of(n));
        }
        Ok(self.push(
            Tensor::from_parts(av.shape().to_vec(), out),
            Op::L2Normalize { a, norms },
            &[a],
        ))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, where the
    /// softmax of row `r` only ranges over entries with `allowed[r*C + c]`.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let (r, c) = (lv.shape()[0], lv.shape()[1]);
        if let Some(m) = allowed {
            if m.len() != r * c {
                return Err(Error::shape("cross_entropy mask", lv.shape(), &[m.len()]));
            }
        }
        let ok = |i: usize, j: usize| allowed.is_none_or(|m| m[i * c + j]);
        let mut probs = vec![T::zero(); r * c];
        let mut total = 0.0;
        for i in 0..r {
            let ti = targets[i];
            if ti >= c || !ok(i, ti) {
                return Err(Error::config(format!(
                    "target {ti} of row {i} is out of range or excluded"
                )));
            }
            let row = &lv.data()[i * c..(i + 1) * c];
            let mx = (0..c)
                .filter(|&j| ok(i, j))
                .map(|j| row[j].f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..c).filter(|&j| ok(i, j)) {
                z += (row[j].f64() - mx).exp();
            }
            for j in (0..c).filter(|&j| ok(i, j)) {
                probs[i * c + j] = T::of((row[j].f64() - mx).exp() / z);
            }
            total += mx + z.ln() - row[ti].f64();
        }
        Ok(self.push(
            Tensor::scalar(T::of(total / r as f64)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ---- token plumbing ------------------------------------------------

    /// Concatenate `[B,T1,D]` and `[B,T2,D]` along the token axis.
    pub fn concat_tokens(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (b0, t1, d) = token_dims("concat_tokens", av.shape())?;
        let (b1, t2, d1) = token_dims("concat_tokens", bv.shape())?;
        if b0 != b1 || d != d1 {
            return Err(Error::shape("concat_tokens", av.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(b0 * (t1 + t2) * d);
        for i in 0..b0 {
            out.extend_from_slice(&av.data()[i * t1 * d..(i + 1) * t1 * d]);
            out.extend_from_slice(&bv.data()[i * t2 * d..(i + 1) * t2 * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![b0, t1 + t2, d], out),
            Op::ConcatTokens { a, b },
            &[a, b],
        ))
    }

    /// Concatenate along the leading axis.
    pub fn concat0(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() == 0 || av.rank() != bv.rank() || av.shape()[1..] != bv.shape()[1..] {
            return Err(Error::shape("concat0", av.shape(), bv.shape()));
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut out = av.to_vec();
        out.extend_from_slice(bv.data());
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat0 { a, b },
            &[a, b],
        ))
    }

    /// Repeat `a` along a new leading axis of length `batch`.
    pub fn expand_batch(&self, a: Var, batch: usize) -> Var {
        let av = self.value(a);
        let mut shape = vec![batch];
        shape.extend_from_slice(av.shape());
        let mut out = Vec::with_capacity(batch * av.numel());
        for _ in 0..batch {
            out.extend_from_slice(av.data());
        }
        self.push(Tensor::from_parts(shape, out), Op::ExpandBatch { a }, &[a])
    }

    /// Select tokens `idx[b]` from each batch item of `[B,T,D]`.
    pub fn gather_tokens(&self, a: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let av = self.value(a);
        let (b, t, d) = token_dims("gather_tokens", av.shape())?;
        let k = idx.first().map_or(0, Vec::len);
        if idx.len() != b
            || idx
                .iter()
                .any(|r| r.len() != k || r.iter().any(|&i| i >= t))
        {
            return Err(Error::Consistency(format!(
                "gather indices do not fit token tensor {:?}",
                av.shape()
            )));
        }
        let mut out = Vec::with_capacity(b * k * d);
        for (bi, row) in idx.iter().enumerate() {
            for &i in row {
                let s = (bi * t + i) * d;
                out.extend_from_slice(&av.data()[s..s + d]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, k, d], out),
            Op::GatherTokens {
                a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Place the `k` tokens of `vis[B,k,D]` at `positions[b]` in a sequence
    /// of length `len`; every other slot receives `fill[D]`.
    pub fn scatter_tokens(
        &self,
        vis: Var,
        fill: Var,
        positions: &[Vec<usize>],
        len: usize,
    ) -> Result<Var> {
        let (vv, fv) = (self.value(vis), self.value(fill));
        let (b, k, d) = token_dims("scatter_tokens", vv.shape())?;
        if fv.shape() != [d] {
            return Err(Error::shape("scatter_tokens", vv.shape(), fv.shape()));
        }
        if positions.len() != b
            || positions.iter().any(|p| {
                p.len() != k || p.iter().any(|&i| i >= len) || {
                    let mut s = p.clone();
                    s.sort_unstable();
                    s.dedup();
                    s.len() != k
                }
            })
        {
            return Err(Error::Consistency(
                "scatter positions must be distinct and inside the sequence".into(),
            ));
        }
        let mut out = Vec::with_capacity(b * len * d);
        for _ in 0..b * len {
            out.extend_from_slice(fv.data());
        }
        for (bi, pos) in positions.iter().enumerate() {
            for (j, &p) in pos.iter().enumerate() {
                let src = (bi * k + j) * d;
                let dst = (bi * len + p) * d;
                out[dst..dst + d].copy_from_slice(&vv.data()[src..src + d]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, len, d], out),
            Op::ScatterTokens {
                vis,
                fill,
                positions: positions.to_vec(),
            },
            &[vis, fill],
        ))
    }

    /// Tokens `start..start+len` of `[B,T,D]`.
    pub fn slice_tokens(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (b, t, d) = token_dims("slice_tokens", av.shape())?;
        if start + len > t {
            return Err(Error::shape("slice_tokens", av.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let s = (bi * t + start) * d;
            out.extend_from_slice(&av.data()[s..s + len * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, len, d], out),
            Op::SliceTokens { a, start },
            &[a],
        ))
    }

    /// Mean over the token axis: `[B,T,D] -> [B,D]`.
    pub fn mean_tokens(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (b, t, d) = token_dims("mean_tokens", av.shape())?;
        if t == 0 {
            return Err(Error::EmptyAxis("mean_tokens"));
        }
        let mut out = vec![0.0f64; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let s = (bi * t + ti) * d;
                for j in 0..d {
                    out[bi * d + j] += av.data()[s + j].f64();
                }
            }
        }
        let out = out.into_iter().map(|x| T::of(x / t as f64)).collect();
        Ok(self.push(
            Tensor::from_parts(vec![b, d], out),
            Op::MeanTokens { a },
            &[a],
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape { a }, &[a]))
    }

    // ---- backward ------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node feeding it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape("backward", nodes[loss.0].value.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            let val = |v: Var| &nodes[v.0].value;
            let need = |v: Var| nodes[v.0].needs_grad;
            let mut contrib: Vec<(Var, Vec<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (rows, din) = rows_of(xv.shape());
                    let dout = wv.shape()[1];
                    if need(*x) {
                        let mut dx = vec![T::zero(); rows * din];
                        gemm(rows, dout, din, &g, false, wv.data(), true, &mut dx, false);
                        contrib.push((*x, dx));
                    }
                    if need(*w) {
                        let mut dw = vec![T::zero(); din * dout];
                        gemm(din, rows, dout, xv.data(), true, &g, false, &mut dw, false);
                        contrib.push((*w, dw));
                    }
                    if let Some(b) = b {
                        if need(*b) {
                            let mut db = vec![T::zero(); dout];
                            for row in g.chunks(dout) {
                                db.iter_mut().zip(row).for_each(|(a, r)| *a = *a + *r);
                            }
                            contrib.push((*b, db));
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if need(*a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm(m, n, k, &g, false, bv.data(), true, &mut da, false);
                        contrib.push((*a, da));
                    }
                    if need(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm(k, m, n, av.data(), true, &g, false, &mut db, false);
                        contrib.push((*b, db));
                    }
                }
                Op::Transpose { a } => {
                    let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let mut da = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[j * r + i];
                        }
                    }
                    contrib.push((*a, da));
                }
                Op::Add { a, b } => {
                    if need(*a) {
                        contrib.push((*a, g.clone()));
                    }
                    if need(*b) {
                        contrib.push((*b, g.clone()));
                    }
                }
                Op::Sub { a, b } => {
                    if need(*a) {
                        contrib.push((*a, g.clone()));
                    }
                    if need(*b) {
                        contrib.push((*b, g.iter().map(|&x| -x).collect()));
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    if need(*a) {
                        contrib.push((*a, g.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect()));
                    }
                    if need(*b) {
                        contrib.push((*b, g.iter().zip(av.data()).map(|(&g, &x)| g * x).collect()));
                    }
                }
                Op::AddBroadcast { a, b } => {
                    if need(*a) {
                        contrib.push((*a, g.clone()));
                    }
                    if need(*b) {
                        let inner = val(*b).numel();
                        let mut db = vec![T::zero(); inner];
                        for chunk in g.chunks(inner) {
                            db.iter_mut().zip(chunk).for_each(|(a, r)| *a = *a + *r);
                        }
                        contrib.push((*b, db));
                    }
                }
                Op::Scale { a, c } => {
                    contrib.push((*a, g.iter().map(|&x| x * *c).collect()));
                }
                Op::Gelu { a } => {
                    let av = val(*a);
                    contrib.push((
                        *a,
                        g.iter()
                            .zip(av.data())
                            .map(|(&g, &x)| g * gelu_grad(x))
                            .collect(),
                    ));
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let mut da = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in da.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y.f64() * g.f64()).sum();
                        for j in 0..d {
                            dr[j] = T::of(yr[j].f64() * (gr[j].f64() - dot));
                        }
                    }
                    contrib.push((*a, da));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = val(*gamma);
                    let d = gv.numel();
                    let rows = rstd.len();
                    if need(*gamma) {
                        let mut dg = vec![T::zero(); d];
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                            }
                        }
                        contrib.push((*gamma, dg));
                    }
                    if need(*beta) {
                        let mut db = vec![T::zero(); d];
                        for row in g.chunks(d) {
                            db.iter_mut().zip(row).for_each(|(a, r)| *a = *a + *r);
                        }
                        contrib.push((*beta, db));
                    }
                    if need(*x) {
                        let mut dx = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dh = gr[j].f64() * gv.data()[j].f64();
                                m1 += dh;
                                m2 += dh * hr[j].f64();
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            let rs = rstd[r].f64();
                            for j in 0..d {
                                let dh = gr[j].f64() * gv.data()[j].f64();
                                dx[r * d + j] = T::of(rs * (dh - m1 - hr[j].f64() * m2));
                            }
                        }
                        contrib.push((*x, dx));
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    let (b, t, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                    let heads = *heads;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let per: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_indexed(b, |bi| {
                        let off = bi * t * d;
                        let qb = &qv.data()[off..off + t * d];
                        let kb = &kv.data()[off..off + t * d];
                        let vb = &vv.data()[off..off + t * d];
                        let gb = &g[off..off + t * d];
                        let pb = &probs.data()[bi * heads * t * t..(bi + 1) * heads * t * t];
                        let mut dq = vec![T::zero(); t * d];
                        let mut dk = vec![T::zero(); t * d];
                        let mut dv = vec![T::zero(); t * d];
                        let mut dp = vec![0.0f64; t];
                        for h in 0..heads {
                            let c0 = h * dh;
                            for i in 0..t {
                                let p = &pb[(h * t + i) * t..(h * t + i + 1) * t];
                                let mut dot = 0.0;
                                for j in 0..t {
                                    let mut s = 0.0;
                                    for c in c0..c0 + dh {
                                        s += gb[i * d + c].f64() * vb[j * d + c].f64();
                                    }
                                    dp[j] = s;
                                    dot += s * p[j].f64();
                                }
                                for j in 0..t {
                                    let pj = p[j];
                                    for c in c0..c0 + dh {
                                        dv[j * d + c] = dv[j * d + c] + pj * gb[i * d + c];
                                    }
                                    let ds = T::of(p[j].f64() * (dp[j] - dot) * scale);
                                    for c in c0..c0 + dh {
                                        dq[i * d + c] = dq[i * d + c] + ds * kb[j * d + c];
                                        dk[j * d + c] = dk[j * d + c] + ds * qb[i * d + c];
                                    }
                                }
                            }
                        }
                        (dq, dk, dv)
                    });
                    let mut dq = Vec::with_capacity(b * t * d);
                    let mut dk = Vec::with_capacity(b * t * d);
                    let mut dv = Vec::with_capacity(b * t * d);
                    for (a, bb, c) in per {
                        dq.extend(a);
                        dk.extend(bb);
                        dv.extend(c);
                    }
                    if need(*q) {
                        contrib.push((*q, dq));
                    }
                    if need(*k) {
                        contrib.push((*k, dk));
                    }
                    if need(*v) {
                        contrib.push((*v, dv));
                    }
                }
                Op::Sum { a } => {
                    contrib.push((*a, vec![g[0]; val(*a).numel()]));
                }
                Op::Mean { a } => {
                    let n = val(*a).numel();
                    contrib.push((*a, vec![T::of(g[0].f64() / n as f64); n]));
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (val(*a), val(*b));
                    let c = 2.0 * g[0].f64() / av.numel() as f64;
                    let da: Vec<T> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| T::of(c * (x.f64() - y.f64())))
                        .collect();
                    if need(*b) {
                        contrib.push((*b, da.iter().map(|&x| -x).collect()));
                    }
                    if need(*a) {
                        contrib.push((*a, da));
                    }
                }
                Op::L2Normalize { a, norms } => {
                    let y = node.value.data();
                    let d = node.value.last_dim();
                    let mut da = vec![T::zero(); y.len()];
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y.f64() * g.f64()).sum();
                        for j in 0..d {
                            da[r * d + j] = T::of((gr[j].f64() - yr[j].f64() * dot) / n.f64());
                        }
                    }
                    contrib.push((*a, da));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = val(*logits).shape()[1];
                    let r = targets.len();
                    let s = g[0].f64() / r as f64;
                    let mut dl: Vec<T> = probs.iter().map(|p| T::of(p.f64() * s)).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * c + t] = dl[i * c + t] - T::of(s);
                    }
                    contrib.push((*logits, dl));
                }
                Op::ConcatTokens { a, b } => {
                    let (b0, t1, d) = (val(*a).shape()[0], val(*a).shape()[1], val(*a).shape()[2]);
                    let t2 = val(*b).shape()[1];
                    let mut da = Vec::with_capacity(b0 * t1 * d);
                    let mut db = Vec::with_capacity(b0 * t2 * d);
                    for i in 0..b0 {
                        let s = i * (t1 + t2) * d;
                        da.extend_from_slice(&g[s..s + t1 * d]);
                        db.extend_from_slice(&g[s + t1 * d..s + (t1 + t2) * d]);
                    }
                    if need(*a) {
                        contrib.push((*a, da));
                    }
                    if need(*b) {
                        contrib.push((*b, db));
                    }
                }
                Op::Concat0 { a, b } => {
                    let na = val(*a).numel();
                    if need(*a) {
                        contrib.push((*a, g[..na].to_vec()));
                    }
                    if need(*b) {
                        contrib.push((*b, g[na..].to_vec()));
                    }
                }
                Op::ExpandBatch { a } => {
                    let inner = val(*a).numel();
                    let mut da = vec![T::zero(); inner];
                    for chunk in g.chunks(inner) {
                        da.iter_mut().zip(chunk).for_each(|(a, r)| *a = *a + *r);
                    }
                    contrib.push((*a, da));
                }
                Op::GatherTokens { a, idx } => {
                    let sh = val(*a).shape();
                    let (t, d) = (sh[1], sh[2]);
                    let k = idx[0].len();
                    let mut da = vec![T::zero(); val(*a).numel()];
                    for (bi, row) in idx.iter().enumerate() {
                        for (j, &i) in row.iter().enumerate() {
                            let src = (bi * k + j) * d;
                            let dst = (bi * t + i) * d;
                            for c in 0..d {
                                da[dst + c] = da[dst + c] + g[src + c];
                            }
                        }
                    }
                    contrib.push((*a, da));
                }
                Op::ScatterTokens {
                    vis,
                    fill,
                    positions,
                } => {
                    let sh = node.value.shape();
                    let (b, len, d) = (sh[0], sh[1], sh[2]);
                    let k = positions[0].len();
                    let mut covered = vec![false; b * len];
                    let mut dvis = vec![T::zero(); b * k * d];
                    for (bi, pos) in positions.iter().enumerate() {
                        for (j, &p) in pos.iter().enumerate() {
                            covered[bi * len + p] = true;
                            let src = (bi * len + p) * d;
                            dvis[(bi * k + j) * d..(bi * k + j + 1) * d]
                                .copy_from_slice(&g[src..src + d]);
                        }
                    }
                    if need(*fill) {
                        let mut df = vec![T::zero(); d];
                        for (slot, _) in covered.iter().enumerate().filter(|(_, c)| !**c) {
                            for c in 0..d {
                                df[c] = df[c] + g[slot * d + c];
                            }
                        }
                        contrib.push((*fill, df));
                    }
                    if need(*vis) {
                        contrib.push((*vis, dvis));
                    }
                }
                Op::SliceTokens { a, start } => {
                    let sh = val(*a).shape();
                    let (b, t, d) = (sh[0], sh[1], sh[2]);
                    let len = node.value.shape()[1];
                    let mut da = vec![T::zero(); b * t * d];
                    for bi in 0..b {
                        let dst = (bi * t + start) * d;
                        da[dst..dst + len * d]
                            .copy_from_slice(&g[bi * len * d..(bi + 1) * len * d]);
                    }
                    contrib.push((*a, da));
                }
                Op::MeanTokens { a } => {
                    let sh = val(*a).shape();
                    let (b, t, d) = (sh[0], sh[1], sh[2]);
                    let inv = T::of(1.0 / t as f64);
                    let mut da = vec![T::zero(); b * t * d];
                    for bi in 0..b {
                        for ti in 0..t {
                            for c in 0..d {
                                da[(bi * t + ti) * d + c] = g[bi * d + c] * inv;
                            }
                        }
                    }
                    contrib.push((*a, da));
                }
                Op::Reshape { a } => {
                    contrib.push((*a, g.clone()));
                }
            }
            for (v, c) in contrib {
                if nodes[v.0].needs_grad {
                    add_into(&mut grads[v.0], c);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            visited,
        })
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let mx = row
        .iter()
        .map(|x| x.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let e: Vec<f64> = row
        .iter()
        .map(|x| {
            let e = (x.f64() - mx).exp();
            z += e;
            e
        })
        .collect();
    for (r, e) in row.iter_mut().zip(e) {
        *r = T::of(e / z);
    }
}
