//! A small tape-based reverse-mode differentiation engine.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the adjoint pass. [`Graph::backward`] walks the tape in reverse
//! and returns exact gradients for every node that depends on a trainable
//! leaf. The operation set is fixed to what the backbone uses: linear maps,
//! convolution, layer norm, softmax attention, GELU, residual adds,
//! concatenation and a few rearrangements.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{
    self, col2im, gelu, gelu_grad, im2col, matmul, matmul_a_bt_acc, matmul_at_b_acc, Tensor,
};

/// Variance epsilon for every layer norm.
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Modulate {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        src: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Patchify {
        x: Var,
        p: usize,
    },
    Unpatchify {
        x: Var,
        p: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        cols: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    grad: bool,
}

/// Records a computation over tensors. Parameters are borrowed, not copied.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An owned trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A borrowed trainable leaf, typically a model parameter.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A borrowed leaf excluded from differentiation.
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let g = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s, tiled over the rest.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let n = bv.len();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, v) in chunk.iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        let g = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let g = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), g)
    }

    /// `x @ w + b` over the trailing dimension; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[fan_in, fan_out] = wv.shape() else {
            return shape_err(format!("linear weight must be 2-D, got {:?}", wv.shape()));
        };
        if xv.last_dim() != fan_in {
            return shape_err(format!(
                "linear expects trailing dim {fan_in}, got {:?}",
                xv.shape()
            ));
        }
        let rows = xv.len() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        matmul(rows, fan_in, fan_out, xv.data(), wv.data(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [fan_out] {
                return shape_err(format!("linear bias must be [{fan_out}], got {:?}", bv.shape()));
            }
            for row in out.chunks_mut(fan_out) {
                for (o, v) in row.iter_mut().zip(bv.data()) {
                    *o += v;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let out = Tensor::from_vec(&shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.needs(&deps);
        Ok(self.push(out, Op::Linear { x, w, b }, g))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let g = self.needs(&[x]);
        self.push(out, Op::Gelu(x), g)
    }

    /// Layer norm over the trailing dimension with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        for p in gain.iter().chain(bias.iter()) {
            if self.value(*p).shape() != [d] {
                return shape_err(format!(
                    "layer norm parameter must be [{d}], got {:?}",
                    self.value(*p).shape()
                ));
            }
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for (r, (src, dst)) in xv.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gv) = gain {
            let gv = self.value(gv).data();
            for row in out.chunks_mut(d) {
                for (o, s) in row.iter_mut().zip(gv) {
                    *o *= s;
                }
            }
        }
        if let Some(bv) = bias {
            let bv = self.value(bv).data();
            for row in out.chunks_mut(d) {
                for (o, s) in row.iter_mut().zip(bv) {
                    *o += s;
                }
            }
        }
        let out = Tensor::from_vec(xv.shape(), out)?;
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let g = self.needs(&deps);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            g,
        ))
    }

    /// `x * scale + shift` with `x: [B, N, D]` and `scale, shift: [B, D]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[b, n, d] = xv.shape() else {
            return shape_err(format!("modulate expects [B, N, D], got {:?}", xv.shape()));
        };
        for p in [scale, shift] {
            if self.value(p).shape() != [b, d] {
                return shape_err(format!(
                    "modulation must be [{b}, {d}], got {:?}",
                    self.value(p).shape()
                ));
            }
        }
        let (sv, hv) = (self.value(scale).data(), self.value(shift).data());
        let mut out = xv.clone();
        for bi in 0..b {
            for tok in 0..n {
                let row = &mut out.data_mut()[(bi * n + tok) * d..(bi * n + tok + 1) * d];
                for j in 0..d {
                    row[j] = row[j] * sv[bi * d + j] + hv[bi * d + j];
                }
            }
        }
        let g = self.needs(&[x, scale, shift]);
        Ok(self.push(out, Op::Modulate { x, scale, shift }, g))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[B, N, 3D]` laid out as `[q | k | v]` per token; head `h`
    /// reads columns `h*D/heads..(h+1)*D/heads` of each block. `key_mask`
    /// (`[B * N]`, `true` = attendable) hides padded tokens as keys.
    pub fn attention(&mut self, qkv: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var> {
        let qv = self.value(qkv);
        let &[b, n, d3] = qv.shape() else {
            return shape_err(format!("attention expects [B, N, 3D], got {:?}", qv.shape()));
        };
        if d3 % 3 != 0 || (d3 / 3) % heads != 0 {
            return shape_err(format!("width {d3} does not split into q/k/v over {heads} heads"));
        }
        if let Some(m) = key_mask {
            if m.len() != b * n {
                return shape_err(format!("key mask needs {} entries, got {}", b * n, m.len()));
            }
        }
        let d = d3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = qv.data();
        let per_head: Vec<(Vec<f64>, Vec<f64>)> = (0..b * heads)
            .into_par_iter()
            .map(|bh| {
                let (bi, h) = (bh / heads, bh % heads);
                let base = bi * n * d3;
                let q = &data[base + h * dh..];
                let k = &data[base + d + h * dh..];
                let v = &data[base + 2 * d + h * dh..];
                let mut p = vec![0.0; n * n];
                tensor::gemm(
                    n, dh, n, scale, q, d3 as isize, 1, k, 1, d3 as isize, 0.0, &mut p,
                    n as isize, 1,
                );
                for i in 0..n {
                    let row = &mut p[i * n..(i + 1) * n];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in row.iter().enumerate() {
                        if key_mask.is_none_or(|m| m[bi * n + j]) {
                            mx = mx.max(*s);
                        }
                    }
                    let mut sum = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        if key_mask.is_none_or(|m| m[bi * n + j]) {
                            *s = (*s - mx).exp();
                            sum += *s;
                        } else {
                            *s = 0.0;
                        }
                    }
                    for s in row.iter_mut() {
                        *s /= sum;
                    }
                }
                let mut o = vec![0.0; n * dh];
                tensor::gemm(
                    n, n, dh, 1.0, &p, n as isize, 1, v, d3 as isize, 1, 0.0, &mut o,
                    dh as isize, 1,
                );
                (p, o)
            })
            .collect();
        let mut out = vec![0.0; b * n * d];
        let mut probs = Vec::with_capacity(b * heads * n * n);
        for (bh, (p, o)) in per_head.into_iter().enumerate() {
            let (bi, h) = (bh / heads, bh % heads);
            for i in 0..n {
                let dst = (bi * n + i) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&o[i * dh..(i + 1) * dh]);
            }
            probs.extend_from_slice(&p);
        }
        let out = Tensor::from_vec(&[b, n, d], out)?;
        let g = self.needs(&[qkv]);
        Ok(self.push(out, Op::Attention { qkv, heads, probs }, g))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let outer: usize = first[..axis].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return shape_err(format!("cannot concat {s:?} with {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let inner = t.len() / outer;
                out.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        let g = self.needs(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            g,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err(format!("slice {start}..{} of axis {axis} on {s:?}", start + len));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Tensor::from_vec(&shape, out)?;
        let g = self.needs(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, g))
    }

    /// Row lookup: `table: [K, D]` -> `[idx.len(), D]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let &[k, d] = tv.shape() else {
            return shape_err(format!("gather table must be 2-D, got {:?}", tv.shape()));
        };
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= k {
                return Err(Error::Index(format!("row {i} of a {k}-row table")));
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[idx.len(), d], out)?;
        let g = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            g,
        ))
    }

    /// Overwrites the listed rows (over the trailing dimension) of `x` with `src`.
    pub fn replace_rows(&mut self, x: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(src));
        let d = xv.last_dim();
        if sv.shape() != [d] {
            return shape_err(format!("replacement row must be [{d}], got {:?}", sv.shape()));
        }
        let mut out = xv.clone();
        let nrows = xv.len() / d;
        for &r in rows {
            if r >= nrows {
                return Err(Error::Index(format!("row {r} of {nrows}")));
            }
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(sv.data());
        }
        let g = self.needs(&[x, src]);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                x,
                src,
                rows: rows.to_vec(),
            },
            g,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let g = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let out = tensor::patchify(self.value(x), p)?;
        let g = self.needs(&[x]);
        Ok(self.push(out, Op::Patchify { x, p }, g))
    }

    pub fn unpatchify(&mut self, x: Var, p: usize, h: usize, w: usize, c: usize) -> Result<Var> {
        let out = tensor::unpatchify(self.value(x), p, h, w, c)?;
        let g = self.needs(&[x]);
        Ok(self.push(out, Op::Unpatchify { x, p }, g))
    }

    /// Stride-1 same-padded convolution on NHWC input; `w` is `[k, k, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let &[bsz, h, wd, cin] = xv.shape() else {
            return shape_err(format!("conv2d expects [B, H, W, C], got {:?}", xv.shape()));
        };
        let &[k, k2, wcin, cout] = wv.shape() else {
            return shape_err(format!("conv2d weight must be 4-D, got {:?}", wv.shape()));
        };
        if k != k2 || k % 2 == 0 || wcin != cin {
            return shape_err(format!(
                "conv2d weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            ));
        }
        let cols = im2col(xv.data(), bsz, h, wd, cin, k);
        let rows = bsz * h * wd;
        let mut out = vec![0.0; rows * cout];
        matmul(rows, k * k * cin, cout, &cols, wv.data(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return shape_err(format!("conv bias must be [{cout}], got {:?}", bv.shape()));
            }
            for row in out.chunks_mut(cout) {
                for (o, v) in row.iter_mut().zip(bv.data()) {
                    *o += v;
                }
            }
        }
        let out = Tensor::from_vec(&[bsz, h, wd, cout], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let g = self.needs(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, k, cols }, g))
    }

    /// Mean squared error over all elements, as a scalar node.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        pv.expect_same_shape(tv)?;
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let g = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, g))
    }

    /// Reverse pass seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node<'_>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[b.0].grad {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let n = gb.len();
                    for chunk in gd.chunks(n) {
                        for (o, v) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (fan_in, fan_out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / fan_in;
                if self.nodes[x.0].grad {
                    let mut gx = vec![0.0; xv.len()];
                    matmul_a_bt_acc(rows, fan_out, fan_in, gd, wv.data(), &mut gx);
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
                }
                if self.nodes[w.0].grad {
                    let mut gw = vec![0.0; wv.len()];
                    matmul_at_b_acc(fan_in, rows, fan_out, xv.data(), gd, &mut gw);
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), gw).unwrap());
                }
                if let Some(b) = b {
                    if self.nodes[b.0].grad {
                        let mut gb = vec![0.0; fan_out];
                        for row in gd.chunks(fan_out) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[fan_out], gb).unwrap());
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = xv.zip_map(g, |a, gg| gelu_grad(a) * gg).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).last_dim();
                if let Some(b) = bias {
                    let mut gb = vec![0.0; d];
                    for row in gd.chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[d], gb).unwrap());
                }
                if let Some(gn) = gain {
                    let mut gg = vec![0.0; d];
                    for (row, xh) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * xh[j];
                        }
                    }
                    self.accumulate(grads, *gn, Tensor::from_vec(&[d], gg).unwrap());
                }
                if self.nodes[x.0].grad {
                    let gain_v = gain.map(|gn| self.value(gn).data());
                    let mut gx = vec![0.0; gd.len()];
                    for (r, ((row, xh), dst)) in gd
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dxh: Vec<f64> = match gain_v {
                            Some(gv) => row.iter().zip(gv).map(|(a, b)| a * b).collect(),
                            None => row.to_vec(),
                        };
                        let m1 = dxh.iter().sum::<f64>() / d as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dst[j] = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(g.shape(), gx).unwrap());
                }
            }
            Op::Modulate { x, scale, shift } => {
                let xv = self.value(*x);
                let &[b, n, d] = xv.shape() else { unreachable!() };
                let sv = self.value(*scale).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gs = vec![0.0; b * d];
                let mut gh = vec![0.0; b * d];
                for bi in 0..b {
                    for tok in 0..n {
                        let off = (bi * n + tok) * d;
                        for j in 0..d {
                            let go = gd[off + j];
                            gx[off + j] = go * sv[bi * d + j];
                            gs[bi * d + j] += go * xv.data()[off + j];
                            gh[bi * d + j] += go;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
                self.accumulate(grads, *scale, Tensor::from_vec(&[b, d], gs).unwrap());
                self.accumulate(grads, *shift, Tensor::from_vec(&[b, d], gh).unwrap());
            }
            Op::Attention { qkv, heads, probs } => {
                let qv = self.value(*qkv);
                let &[b, n, d3] = qv.shape() else { unreachable!() };
                let heads = *heads;
                let d = d3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let data = qv.data();
                let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..b * heads)
                    .into_par_iter()
                    .map(|bh| {
                        let (bi, h) = (bh / heads, bh % heads);
                        let base = bi * n * d3;
                        let q = &data[base + h * dh..];
                        let k = &data[base + d + h * dh..];
                        let v = &data[base + 2 * d + h * dh..];
                        let go = &gd[bi * n * d + h * dh..];
                        let p = &probs[bh * n * n..(bh + 1) * n * n];
                        // dP = dO V^T
                        let mut dp = vec![0.0; n * n];
                        tensor::gemm(
                            n, dh, n, 1.0, go, d as isize, 1, v, 1, d3 as isize, 0.0, &mut dp,
                            n as isize, 1,
                        );
                        // dV = P^T dO
                        let mut dv = vec![0.0; n * dh];
                        tensor::gemm(
                            n, n, dh, 1.0, p, 1, n as isize, go, d as isize, 1, 0.0, &mut dv,
                            dh as isize, 1,
                        );
                        // dS = P * (dP - rowsum(dP * P))
                        for i in 0..n {
                            let prow = &p[i * n..(i + 1) * n];
                            let drow = &mut dp[i * n..(i + 1) * n];
                            let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (dd, pp) in drow.iter_mut().zip(prow) {
                                *dd = pp * (*dd - dot);
                            }
                        }
                        let mut dq = vec![0.0; n * dh];
                        tensor::gemm(
                            n, n, dh, scale, &dp, n as isize, 1, k, d3 as isize, 1, 0.0,
                            &mut dq, dh as isize, 1,
                        );
                        let mut dk = vec![0.0; n * dh];
                        tensor::gemm(
                            n, n, dh, scale, &dp, 1, n as isize, q, d3 as isize, 1, 0.0,
                            &mut dk, dh as isize, 1,
                        );
                        (dq, dk, dv)
                    })
                    .collect();
                let mut gq = vec![0.0; qv.len()];
                for (bh, (dq, dk, dv)) in parts.into_iter().enumerate() {
                    let (bi, h) = (bh / heads, bh % heads);
                    for i in 0..n {
                        let row = (bi * n + i) * d3;
                        let src = i * dh..(i + 1) * dh;
                        gq[row + h * dh..row + (h + 1) * dh].copy_from_slice(&dq[src.clone()]);
                        gq[row + d + h * dh..row + d + (h + 1) * dh]
                            .copy_from_slice(&dk[src.clone()]);
                        gq[row + 2 * d + h * dh..row + 2 * d + (h + 1) * dh]
                            .copy_from_slice(&dv[src]);
                    }
                }
                self.accumulate(grads, *qkv, Tensor::from_vec(qv.shape(), gq).unwrap());
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let total_inner = g.len() / outer;
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let inner = pv.len() / outer;
                    if self.nodes[p.0].grad {
                        let mut gp = Vec::with_capacity(pv.len());
                        for o in 0..outer {
                            let s = o * total_inner + offset;
                            gp.extend_from_slice(&gd[s..s + inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(pv.shape(), gp).unwrap());
                    }
                    offset += inner;
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; xv.len()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, gx).unwrap());
            }
            Op::Gather { table, idx } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut gt = vec![0.0; tv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += gd[r * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_vec(tv.shape(), gt).unwrap());
            }
            Op::ReplaceRows { x, src, rows } => {
                let d = g.last_dim();
                let mut gx = g.clone();
                let mut gs = vec![0.0; d];
                for &r in rows {
                    for j in 0..d {
                        gs[j] += gd[r * d + j];
                    }
                    gx.data_mut()[r * d..(r + 1) * d].fill(0.0);
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *src, Tensor::from_vec(&[d], gs).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::Patchify { x, p } => {
                let s = self.shape(*x);
                let gx = tensor::unpatchify(g, *p, s[1], s[2], s[3]).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Unpatchify { x, p } => {
                self.accumulate(grads, *x, tensor::patchify(g, *p).unwrap());
            }
            Op::Conv2d { x, w, b, k, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let &[bsz, h, wd, cin] = xv.shape() else { unreachable!() };
                let cout = wv.shape()[3];
                let rows = bsz * h * wd;
                let kk = k * k * cin;
                if self.nodes[w.0].grad {
                    let mut gw = vec![0.0; wv.len()];
                    matmul_at_b_acc(kk, rows, cout, cols, gd, &mut gw);
                    self.accumulate(grads, *w, Tensor::from_vec(wv.shape(), gw).unwrap());
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; cout];
                    for row in gd.chunks(cout) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[cout], gb).unwrap());
                }
                if self.nodes[x.0].grad {
                    let mut gcols = vec![0.0; rows * kk];
                    matmul_a_bt_acc(rows, cout, kk, gd, wv.data(), &mut gcols);
                    let gx = col2im(&gcols, bsz, h, wd, cin, *k);
                    self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), gx).unwrap());
                }
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let c = 2.0 * gd[0] / pv.len() as f64;
                let gp = pv.zip_map(tv, |a, b| c * (a - b)).unwrap();
                if self.nodes[target.0].grad {
                    self.accumulate(grads, *target, gp.scale(-1.0));
                }
                self.accumulate(grads, *pred, gp);
            }
        }
    }
}
