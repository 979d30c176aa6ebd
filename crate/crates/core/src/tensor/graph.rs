//! Define-by-run reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse recording order, so each op is visited exactly once after
//! all of its consumers. Nodes whose inputs carry no gradient are stored as
//! plain constants and cost nothing on the way back.

use super::kernels::{col2im3, gemm, im2col3};
use super::Tensor;
use crate::error::{dim_err, Result, SeldError};
use rayon::prelude::*;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
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
        factor: f64,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics observed by a training-mode batch norm, for the caller's
/// running-average update.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance per channel.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; its gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated at `v`; zeros if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape();
        Some(match &node.grad {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape tracks value"),
            None => Tensor::zeros(shape),
        })
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------------
    // linear algebra

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product `[B×m×k] · [B×k×n]`, or `[B×m×k] · [B×n×k]ᵀ` with
    /// `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return dim_err(
                "batch_matmul",
                format!("cannot multiply {sa:?} by {sb:?} (trans_b={trans_b})"),
            );
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                c,
                false,
            )
        });
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    // ----------------------------------------------------------------------
    // elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`'s shape
    /// (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err("add_broadcast", format!("{sb:?} is not a suffix of {sa:?}"));
        }
        let inner = self.value(b).numel();
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % inner])
            .collect();
        let v = Tensor::new(self.shape(a), data)?;
        Ok(self.push(v, Op::AddBroadcast { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.map(a, |x| x * factor);
        self.push(v, Op::Scale { a, factor }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push(v, Op::Tanh { a }, &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim_err("softmax", format!("axis {axis} invalid for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.data(a);
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| x[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    y[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= total;
                }
            }
        }
        let v = Tensor::new(&shape, y)?;
        Ok(self.push(v, Op::Softmax { a, axis }, &[a]))
    }

    // ----------------------------------------------------------------------
    // convolutional blocks

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    ///
    /// `x` is `[B×C_in×H×W]` or `[C_in×H×W]`, `w` is `[C_out×C_in×3×3]`,
    /// `b` is `[C_out]`. The output keeps the spatial size of the input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        let batched = sx.len() == 4;
        if !(sx.len() == 3 || batched) {
            return dim_err("conv2d", format!("input must be rank 3 or 4, got {sx:?}"));
        }
        let (batch, cin, h, wd) = if batched {
            (sx[0], sx[1], sx[2], sx[3])
        } else {
            (1, sx[0], sx[1], sx[2])
        };
        if sw.len() != 4 || sw[2] != 3 || sw[3] != 3 {
            return dim_err(
                "conv2d",
                format!("kernel must be C_out×C_in×3×3, got {sw:?}"),
            );
        }
        if sw[1] != cin {
            return dim_err(
                "conv2d",
                format!(
                    "input has {cin} channels but kernel {sw:?} expects {}",
                    sw[1]
                ),
            );
        }
        let cout = sw[0];
        if sb != [cout] {
            return dim_err(
                "conv2d",
                format!("bias {sb:?} does not match {cout} outputs"),
            );
        }
        let hw = h * wd;
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; batch * cout * hw];
        out.par_chunks_mut(cout * hw)
            .enumerate()
            .for_each(|(i, o)| {
                let mut col = vec![0.0; cin * 9 * hw];
                im2col3(&xd[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut col);
                for (co, row) in o.chunks_mut(hw).enumerate() {
                    row.fill(bd[co]);
                }
                gemm(cout, cin * 9, hw, wdat, false, &col, false, o, true);
            });
        let shape = if batched {
            vec![batch, cout, h, wd]
        } else {
            vec![cout, h, wd]
        };
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// Training-mode batch norm over `[B×C×H×W]`: normalizes each channel by
    /// its statistics over `(B, H, W)`, then applies `gamma`, `beta`.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (batch, c, hw) = self.bn_dims(x, gamma, beta)?;
        let xd = self.data(x);
        let count = batch * hw;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..batch {
                s += xd[(bi * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            let mu = s / count as f64;
            let mut ss = 0.0;
            for bi in 0..batch {
                ss += xd[(bi * c + ch) * hw..][..hw]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = ss / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, batch, c, hw);
        let stats = BatchStats {
            mean: mean.clone(),
            var,
            count,
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
            batch_stats: true,
        };
        Ok((self.push(out, op, &[x, gamma, beta]), stats))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (batch, c, hw) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return dim_err(
                "batch_norm",
                "running statistics length differs from channel count",
            );
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, running_mean, &inv_std, batch, c, hw);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            mean: running_mean.to_vec(),
            inv_std,
            batch_stats: false,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return dim_err("batch_norm", format!("input must be B×C×H×W, got {s:?}"));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(
                "batch_norm",
                format!(
                    "affine shapes {:?}/{:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        Ok((s[0], c, s[2] * s[3]))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch: usize,
        c: usize,
        hw: usize,
    ) -> Tensor {
        let (xd, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        for bi in 0..batch {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                let (mu, is, ga, be) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for (o, &v) in out[off..off + hw].iter_mut().zip(&xd[off..off + hw]) {
                    *o = ga * (v - mu) * is + be;
                }
            }
        }
        Tensor::new(self.shape(x), out).expect("shape preserved")
    }

    /// Non-overlapping max pooling over the last two axes with window
    /// `(pool_h, pool_w)`. Both axes must divide exactly.
    pub fn max_pool2d(&mut self, x: Var, pool: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (ph, pw) = pool;
        if s.len() < 2 || ph == 0 || pw == 0 {
            return dim_err("max_pool2d", format!("invalid pool {pool:?} for {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % ph != 0 || w % pw != 0 {
            return dim_err(
                "max_pool2d",
                format!("spatial dims ({h}, {w}) not divisible by pool {pool:?}"),
            );
        }
        let planes: usize = s[..s.len() - 2].iter().product();
        let (oh, ow) = (h / ph, w / pw);
        let xd = self.data(x);
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + oy * ph * w + ox * pw;
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let i = base + (oy * ph + dy) * w + ox * pw + dx;
                            // strict comparison keeps the first maximum
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("tensor has rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(
                "layer_norm",
                format!(
                    "affine shapes {:?}/{:?} do not match width {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            );
        }
        let (xd, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = g[j] * (row[j] - mu) * is + bt[j];
            }
            mean[r] = mu;
            inv_std[r] = is;
        }
        let v = Tensor::new(&s, out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        };
        Ok(self.push(v, op, &[x, gamma, beta]))
    }

    // ----------------------------------------------------------------------
    // shape manipulation

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape { a }, &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return dim_err("permute", format!("{perm:?} is not a permutation of {s:?}"));
        }
        let (data, shape) = permute_data(self.data(a), &s, perm);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(
            v,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return dim_err(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            );
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let xd = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Narrow { a, axis, start }, &[a]))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return dim_err("concat", format!("axis {axis} invalid for {s0:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return dim_err(
                    "concat",
                    format!("{s:?} incompatible with {s0:?} on axis {axis}"),
                );
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    // ----------------------------------------------------------------------
    // reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.data(a).iter().sum());
        self.push(v, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.data(a).iter().sum::<f64>() / n);
        self.push(v, Op::Mean { a }, &[a])
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    // ----------------------------------------------------------------------
    // reverse pass

    /// Seeds `d(loss)/d(loss) = 1` and propagates gradients to every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(SeldError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let contributions = self.local_grads(i, g);
        for (v, c) in contributions {
            self.accumulate(v, c);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut da, false);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut db, false);
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b {
                    self.shape(*b)[1]
                } else {
                    self.shape(*b)[2]
                };
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    da.par_chunks_mut(m * k).enumerate().for_each(|(bi, d)| {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, gb, false, bb, !*trans_b, d, false);
                    });
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    db.par_chunks_mut(k * n).enumerate().for_each(|(bi, d)| {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // B stored n×k: dB = dCᵀ · A
                            gemm(n, m, k, gb, true, ab, false, d, false);
                        } else {
                            gemm(k, m, n, ab, true, gb, false, d, false);
                        }
                    });
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bd).map(|(g, b)| g * b).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(ad).map(|(g, a)| g * a).collect()));
                }
            }
            Op::AddBroadcast { a, b } => {
                out.push((*a, g.to_vec()));
                if self.wants(*b) {
                    let inner = self.value(*b).numel();
                    let mut db = vec![0.0; inner];
                    for chunk in g.chunks(inner) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Scale { a, factor } => out.push((*a, g.iter().map(|v| v * factor).collect())),
            Op::Relu { a } => {
                out.push((
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sigmoid { a } => {
                out.push((
                    *a,
                    g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                ));
            }
            Op::Tanh { a } => {
                out.push((
                    *a,
                    g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                ));
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                out.push((*a, dx));
            }
            Op::Conv2d { x, w, b } => out.extend(self.conv2d_grads(*x, *w, *b, g)),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*x);
                let (batch, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (xd, gm) = (self.data(*x), self.data(*gamma));
                let n = (batch * hw) as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xd.len()];
                for ch in 0..c {
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for bi in 0..batch {
                        let off = (bi * c + ch) * hw;
                        for j in off..off + hw {
                            let xh = (xd[j] - mu) * is;
                            sg += g[j];
                            sgx += g[j] * xh;
                        }
                    }
                    dgamma[ch] = sgx;
                    dbeta[ch] = sg;
                    let ga = gm[ch];
                    for bi in 0..batch {
                        let off = (bi * c + ch) * hw;
                        for j in off..off + hw {
                            dx[j] = if *batch_stats {
                                let xh = (xd[j] - mu) * is;
                                ga * is * (g[j] - sg / n - xh * sgx / n)
                            } else {
                                ga * is * g[j]
                            };
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let (xd, gm) = (self.data(*x), self.data(*gamma));
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xd.len()];
                let mut dxhat = vec![0.0; d];
                for r in 0..xd.len() / d {
                    let (mu, is) = (mean[r], inv_std[r]);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let idx = r * d + j;
                        let xh = (xd[idx] - mu) * is;
                        dgamma[j] += g[idx] * xh;
                        dbeta[j] += g[idx];
                        dxhat[j] = g[idx] * gm[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xh;
                    }
                    for j in 0..d {
                        let idx = r * d + j;
                        let xh = (xd[idx] - mu) * is;
                        dx[idx] = is * (dxhat[j] - s1 / d as f64 - xh * s2 / d as f64);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (dx, _) = permute_data(g, node.value.shape(), &inverse);
                out.push((*a, dx));
            }
            Op::Narrow { a, axis, start } => {
                let s = self.shape(*a);
                let (outer, n, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*a).numel()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, dx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + n * inner]);
                        }
                        out.push((p, dp));
                    }
                    offset += n;
                }
            }
            Op::Sum { a } => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
        }
        out
    }

    fn conv2d_grads(&self, x: Var, w: Var, b: Var, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let sx = self.shape(x);
        let (batch, cin, h, wd) = if sx.len() == 4 {
            (sx[0], sx[1], sx[2], sx[3])
        } else {
            (1, sx[0], sx[1], sx[2])
        };
        let cout = self.shape(w)[0];
        let hw = h * wd;
        let k = cin * 9;
        let (xd, wdat) = (self.data(x), self.data(w));
        let want_x = self.wants(x);
        let want_w = self.wants(w) || self.wants(b);
        // per-item partials, reduced below in batch order for determinism
        let partials: Vec<(Option<Vec<f64>>, Vec<f64>)> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                let dx = want_x.then(|| {
                    let mut dcol = vec![0.0; k * hw];
                    gemm(k, cout, hw, wdat, true, gb, false, &mut dcol, false);
                    let mut dx = vec![0.0; cin * hw];
                    col2im3(&dcol, cin, h, wd, &mut dx);
                    dx
                });
                let mut dw = Vec::new();
                if want_w {
                    let mut col = vec![0.0; k * hw];
                    im2col3(
                        &xd[bi * cin * hw..(bi + 1) * cin * hw],
                        cin,
                        h,
                        wd,
                        &mut col,
                    );
                    dw = vec![0.0; cout * k];
                    gemm(cout, hw, k, gb, false, &col, true, &mut dw, false);
                }
                (dx, dw)
            })
            .collect();
        let mut out = Vec::new();
        if want_w {
            let mut dw = vec![0.0; cout * k];
            let mut db = vec![0.0; cout];
            for (bi, (_, p)) in partials.iter().enumerate() {
                for (a, v) in dw.iter_mut().zip(p) {
                    *a += v;
                }
                let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                for (co, row) in gb.chunks(hw).enumerate() {
                    db[co] += row.iter().sum::<f64>();
                }
            }
            out.push((w, dw));
            out.push((b, db));
        }
        if want_x {
            let mut dx = Vec::with_capacity(batch * cin * hw);
            for (d, _) in partials {
                dx.extend(d.expect("computed when wanted"));
            }
            out.push((x, dx));
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, len, inner)` element counts around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}
