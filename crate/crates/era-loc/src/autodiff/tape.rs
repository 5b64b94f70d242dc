//! Reverse-mode gradient tape over dense float64 tensors.
//!
//! Every forward operation appends one node; `backward` walks the node list
//! in reverse and accumulates gradients additively. Non-finite outputs abort
//! immediately.

use super::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to one tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Parent plus a constant tensor (the constant needs no gradient).
    AddConst(usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    AddRow(usize, usize),
    BroadcastRows(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxLast(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    SumAll(usize),
    Reshape(usize),
    ConcatLast(usize, usize),
    SliceLast {
        p: usize,
        start: usize,
        len: usize,
    },
    NormalizeLast {
        p: usize,
        target: f64,
    },
    StackRows(Vec<usize>),
    SplitHeads {
        p: usize,
        heads: usize,
    },
    MergeHeads {
        p: usize,
        heads: usize,
    },
    /// out[b,n,m] = sum_p gains[b,p,n] * s[b,p,n,m]; `s` is a captured constant.
    PathMix {
        gains: usize,
        s: Tensor,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        value
            .check_finite()
            .unwrap_or_else(|_| panic!("non-finite tensor produced at tape node {}", self.nodes.len()));
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (constant or parameter value).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = va.shape().to_vec();
        self.push(Op::Add(a.0, b.0), Tensor::new(shape, data))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = va.shape().to_vec();
        self.push(Op::Sub(a.0, b.0), Tensor::new(shape, data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = va.shape().to_vec();
        self.push(Op::Mul(a.0, b.0), Tensor::new(shape, data))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape(), c.shape(), "add_const shape mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        self.push(Op::AddConst(a.0), Tensor::new(shape, data))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * s).collect();
        let shape = va.shape().to_vec();
        self.push(Op::Scale(a.0, s), Tensor::new(shape, data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_raw(va.data(), vb.data(), m, k, n, &mut out);
        self.push(Op::MatMul(a.0, b.0), Tensor::new(vec![m, n], out))
    }

    /// Batched matmul on 3-D tensors; with `trans_b` the rhs batch slices are
    /// transposed ([B,n,k] instead of [B,k,n]).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 3, "bmm lhs must be 3-D");
        assert_eq!(vb.shape().len(), 3, "bmm rhs must be 3-D");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(bs, vb.shape()[0], "bmm batch mismatch");
        let n = if trans_b {
            assert_eq!(vb.shape()[2], k, "bmm inner dim mismatch");
            vb.shape()[1]
        } else {
            assert_eq!(vb.shape()[1], k, "bmm inner dim mismatch");
            vb.shape()[2]
        };
        let mut out = vec![0.0; bs * m * n];
        for bi in 0..bs {
            let ai = &va.data()[bi * m * k..(bi + 1) * m * k];
            let oi = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                let bi_s = &vb.data()[bi * n * k..(bi + 1) * n * k];
                matmul_nt_raw(ai, bi_s, m, k, n, oi);
            } else {
                let bi_s = &vb.data()[bi * k * n..(bi + 1) * k * n];
                matmul_raw(ai, bi_s, m, k, n, oi);
            }
        }
        self.push(
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
            Tensor::new(vec![bs, m, n], out),
        )
    }

    /// Broadcasts a [d] vector over the leading dimensions of `x` (last dim d).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let d = *vx.shape().last().expect("add_row on empty shape");
        assert_eq!(vb.shape(), [d], "add_row bias shape mismatch");
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, b) in chunk.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let shape = vx.shape().to_vec();
        self.push(Op::AddRow(x.0, bias.0), Tensor::new(shape, data))
    }

    /// Repeats a [d] vector into [rows, d].
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.shape().len(), 1, "broadcast_rows input must be 1-D");
        let d = vx.shape()[0];
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(vx.data());
        }
        self.push(Op::BroadcastRows(x.0, rows), Tensor::new(vec![rows, d], data))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let shape = va.shape().to_vec();
        self.push(Op::Tanh(a.0), Tensor::new(shape, data))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va
            .data()
            .iter()
            .map(|x| {
                if *x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = va.shape().to_vec();
        self.push(Op::Sigmoid(a.0), Tensor::new(shape, data))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let d = *va.shape().last().expect("softmax on empty shape");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = va.shape().to_vec();
        self.push(Op::SoftmaxLast(a.0), Tensor::new(shape, data))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let d = *vx.shape().last().expect("layer_norm on empty shape");
        assert_eq!(self.nodes[gain.0].value.shape(), [d]);
        assert_eq!(self.nodes[bias.0].value.shape(), [d]);
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * (*v - mean) * inv + b[j];
            }
        }
        let shape = vx.shape().to_vec();
        self.push(
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            Tensor::new(shape, data),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::SumAll(a.0), Tensor::scalar(s))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let va = &self.nodes[a.0].value;
        let value = va.clone().reshaped(shape);
        self.push(Op::Reshape(a.0), value)
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let da = *va.shape().last().unwrap();
        let db = *vb.shape().last().unwrap();
        assert_eq!(
            &va.shape()[..va.shape().len() - 1],
            &vb.shape()[..vb.shape().len() - 1],
            "concat_last leading dims mismatch"
        );
        let rows = va.len() / da;
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&vb.data()[r * db..(r + 1) * db]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        self.push(Op::ConcatLast(a.0, b.0), Tensor::new(shape, data))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let d = *va.shape().last().unwrap();
        assert!(start + len <= d, "slice_last out of bounds");
        let rows = va.len() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(
            Op::SliceLast {
                p: a.0,
                start,
                len,
            },
            Tensor::new(shape, data),
        )
    }

    /// Rescales every last-axis slice to Euclidean norm `target`.
    /// Panics on rows with norm <= 1e-9 (degenerate inputs must be caught upstream).
    pub fn normalize_last(&mut self, a: Var, target: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let d = *va.shape().last().unwrap();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(d) {
            let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(r > 1e-9, "normalize_last: degenerate row norm {r:e}");
            let s = target / r;
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let shape = va.shape().to_vec();
        self.push(
            Op::NormalizeLast { p: a.0, target },
            Tensor::new(shape, data),
        )
    }

    /// Stacks n tensors of shape [b, d] into [b, n, d].
    pub fn stack_rows(&mut self, parents: &[Var]) -> Var {
        assert!(!parents.is_empty(), "stack_rows needs at least one input");
        let first = self.nodes[parents[0].0].value.shape().to_vec();
        assert_eq!(first.len(), 2, "stack_rows inputs must be 2-D");
        let (b, d) = (first[0], first[1]);
        for p in parents {
            assert_eq!(self.nodes[p.0].value.shape(), [b, d]);
        }
        let n = parents.len();
        let mut data = vec![0.0; b * n * d];
        for (i, p) in parents.iter().enumerate() {
            let src = self.nodes[p.0].value.data();
            for bi in 0..b {
                data[(bi * n + i) * d..(bi * n + i + 1) * d]
                    .copy_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        let ids = parents.iter().map(|p| p.0).collect();
        self.push(Op::StackRows(ids), Tensor::new(vec![b, n, d], data))
    }

    /// [b, L, H*dh] -> [b*H, L, dh]
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape().len(), 3);
        let (b, l, dm) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(dm % heads, 0, "model dim {dm} not divisible by {heads} heads");
        let dh = dm / heads;
        let mut data = vec![0.0; b * l * dm];
        let src = va.data();
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let dst = ((bi * heads + h) * l + li) * dh;
                    let s = (bi * l + li) * dm + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(
            Op::SplitHeads { p: a.0, heads },
            Tensor::new(vec![b * heads, l, dh], data),
        )
    }

    /// [b*H, L, dh] -> [b, L, H*dh]
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape().len(), 3);
        let (bh, l, dh) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        assert_eq!(bh % heads, 0);
        let b = bh / heads;
        let dm = heads * dh;
        let mut data = vec![0.0; b * l * dm];
        let src = va.data();
        for bi in 0..b {
            for h in 0..heads {
                for li in 0..l {
                    let s = ((bi * heads + h) * l + li) * dh;
                    let dst = (bi * l + li) * dm + h * dh;
                    data[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(
            Op::MergeHeads { p: a.0, heads },
            Tensor::new(vec![b, l, dm], data),
        )
    }

    /// Contracts per-path gains with a constant path tensor:
    /// out[b,n,m] = sum_p gains[b,p,n] * s[b,p,n,m].
    pub fn path_mix(&mut self, gains: Var, s: Tensor) -> Var {
        let vg = &self.nodes[gains.0].value;
        assert_eq!(vg.shape().len(), 3);
        assert_eq!(s.shape().len(), 4);
        let (b, p, n) = (vg.shape()[0], vg.shape()[1], vg.shape()[2]);
        assert_eq!(&s.shape()[..3], &[b, p, n], "path_mix shape mismatch");
        let m = s.shape()[3];
        let mut data = vec![0.0; b * n * m];
        let g = vg.data();
        let sd = s.data();
        for bi in 0..b {
            for pi in 0..p {
                for ni in 0..n {
                    let gv = g[(bi * p + pi) * n + ni];
                    if gv == 0.0 {
                        continue;
                    }
                    let srow = &sd[((bi * p + pi) * n + ni) * m..((bi * p + pi) * n + ni + 1) * m];
                    let orow = &mut data[(bi * n + ni) * m..(bi * n + ni + 1) * m];
                    for mi in 0..m {
                        orow[mi] += gv * srow[mi];
                    }
                }
            }
        }
        self.push(
            Op::PathMix { gains: gains.0, s },
            Tensor::new(vec![b, n, m], data),
        )
    }

    /// Reverse pass from a scalar root; returns one gradient tensor per node.
    pub fn backward(&self, root: Var) -> Vec<Tensor> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;
        for idx in (0..=root.0).rev() {
            let g = grads[idx].clone();
            if g.data().iter().all(|v| *v == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.data());
                    accumulate(&mut grads[*b], g.data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.data());
                    for (dst, src) in grads[*b].data_mut().iter_mut().zip(g.data()) {
                        *dst -= src;
                    }
                }
                Op::Mul(a, b) => {
                    let vb = self.nodes[*b].value.data().to_vec();
                    let va = self.nodes[*a].value.data().to_vec();
                    for ((dst, gv), bv) in grads[*a].data_mut().iter_mut().zip(g.data()).zip(&vb) {
                        *dst += gv * bv;
                    }
                    for ((dst, gv), av) in grads[*b].data_mut().iter_mut().zip(g.data()).zip(&va) {
                        *dst += gv * av;
                    }
                }
                Op::AddConst(a) => accumulate(&mut grads[*a], g.data()),
                Op::Scale(a, s) => {
                    for (dst, gv) in grads[*a].data_mut().iter_mut().zip(g.data()) {
                        *dst += gv * s;
                    }
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    matmul_nt_raw(g.data(), vb.data(), m, n, k, grads[*a].data_mut());
                    matmul_tn_raw(va.data(), g.data(), m, k, n, grads[*b].data_mut());
                }
                Op::Bmm { a, b, trans_b } => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                    let n = g.shape()[2];
                    let mut ga = Tensor::zeros(va.shape().to_vec());
                    let mut gb = Tensor::zeros(vb.shape().to_vec());
                    for bi in 0..bs {
                        let gi = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let ai = &va.data()[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            let bi_s = &vb.data()[bi * n * k..(bi + 1) * n * k];
                            // dA += g @ B; dB += g^T @ A
                            matmul_raw(gi, bi_s, m, n, k, &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k]);
                            matmul_tn_raw(gi, ai, m, n, k, &mut gb.data_mut()[bi * n * k..(bi + 1) * n * k]);
                        } else {
                            let bi_s = &vb.data()[bi * k * n..(bi + 1) * k * n];
                            matmul_nt_raw(gi, bi_s, m, n, k, &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k]);
                            matmul_tn_raw(ai, gi, m, k, n, &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n]);
                        }
                    }
                    accumulate(&mut grads[*a], ga.data());
                    accumulate(&mut grads[*b], gb.data());
                }
                Op::AddRow(x, bias) => {
                    accumulate(&mut grads[*x], g.data());
                    let d = grads[*bias].len();
                    let gb = grads[*bias].data_mut();
                    for chunk in g.data().chunks(d) {
                        for (dst, src) in gb.iter_mut().zip(chunk) {
                            *dst += src;
                        }
                    }
                }
                Op::BroadcastRows(x, _rows) => {
                    let d = grads[*x].len();
                    let gx = grads[*x].data_mut();
                    for chunk in g.data().chunks(d) {
                        for (dst, src) in gx.iter_mut().zip(chunk) {
                            *dst += src;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = self.nodes[idx].value.data();
                    for ((dst, gv), yv) in
                        grads[*a].data_mut().iter_mut().zip(g.data()).zip(y)
                    {
                        *dst += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[idx].value.data();
                    for ((dst, gv), yv) in
                        grads[*a].data_mut().iter_mut().zip(g.data()).zip(y)
                    {
                        *dst += gv * yv * (1.0 - yv);
                    }
                }
                Op::SoftmaxLast(a) => {
                    let y = self.nodes[idx].value.data();
                    let d = *self.nodes[idx].value.shape().last().unwrap();
                    let ga = grads[*a].data_mut();
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let vx = self.nodes[*x].value.data();
                    let gv = self.nodes[*gain].value.data().to_vec();
                    let d = *self.nodes[*x].value.shape().last().unwrap();
                    let rows = vx.len() / d;
                    let mut gx_acc = vec![0.0; vx.len()];
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    for r in 0..rows {
                        let xr = &vx[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            gr.iter().zip(&gv).map(|(g, w)| g * w).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx_acc[r * d + j] +=
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            ggain[j] += gr[j] * xhat[j];
                            gbias[j] += gr[j];
                        }
                    }
                    accumulate(&mut grads[*x], &gx_acc);
                    accumulate(&mut grads[*gain], &ggain);
                    accumulate(&mut grads[*bias], &gbias);
                }
                Op::SumAll(a) => {
                    let gv = g.item();
                    for dst in grads[*a].data_mut() {
                        *dst += gv;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads[*a], g.data()),
                Op::ConcatLast(a, b) => {
                    let da = *self.nodes[*a].value.shape().last().unwrap();
                    let db = *self.nodes[*b].value.shape().last().unwrap();
                    let rows = g.len() / (da + db);
                    {
                        let ga = grads[*a].data_mut();
                        for r in 0..rows {
                            for j in 0..da {
                                ga[r * da + j] += g.data()[r * (da + db) + j];
                            }
                        }
                    }
                    let gb = grads[*b].data_mut();
                    for r in 0..rows {
                        for j in 0..db {
                            gb[r * db + j] += g.data()[r * (da + db) + da + j];
                        }
                    }
                }
                Op::SliceLast { p, start, len } => {
                    let d = *self.nodes[*p].value.shape().last().unwrap();
                    let rows = g.len() / len;
                    let gp = grads[*p].data_mut();
                    for r in 0..rows {
                        for j in 0..*len {
                            gp[r * d + start + j] += g.data()[r * len + j];
                        }
                    }
                }
                Op::NormalizeLast { p, target } => {
                    let vx = self.nodes[*p].value.data();
                    let d = *self.nodes[*p].value.shape().last().unwrap();
                    let gp = grads[*p].data_mut();
                    for r in 0..vx.len() / d {
                        let xr = &vx[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let rn = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gp[r * d + j] +=
                                target / rn * gr[j] - target * dot / (rn * rn * rn) * xr[j];
                        }
                    }
                }
                Op::StackRows(parents) => {
                    let n = parents.len();
                    let d = *self.nodes[idx].value.shape().last().unwrap();
                    let b = self.nodes[idx].value.shape()[0];
                    for (i, p) in parents.iter().enumerate() {
                        let gp = grads[*p].data_mut();
                        for bi in 0..b {
                            for j in 0..d {
                                gp[bi * d + j] += g.data()[(bi * n + i) * d + j];
                            }
                        }
                    }
                }
                Op::SplitHeads { p, heads } => {
                    let sh = self.nodes[*p].value.shape();
                    let (b, l, dm) = (sh[0], sh[1], sh[2]);
                    let dh = dm / heads;
                    let gp = grads[*p].data_mut();
                    for bi in 0..b {
                        for h in 0..*heads {
                            for li in 0..l {
                                let s = ((bi * heads + h) * l + li) * dh;
                                let dst = (bi * l + li) * dm + h * dh;
                                for j in 0..dh {
                                    gp[dst + j] += g.data()[s + j];
                                }
                            }
                        }
                    }
                }
                Op::MergeHeads { p, heads } => {
                    let sh = self.nodes[*p].value.shape();
                    let (bh, l, dh) = (sh[0], sh[1], sh[2]);
                    let b = bh / heads;
                    let dm = heads * dh;
                    let gp = grads[*p].data_mut();
                    for bi in 0..b {
                        for h in 0..*heads {
                            for li in 0..l {
                                let dst = ((bi * heads + h) * l + li) * dh;
                                let s = (bi * l + li) * dm + h * dh;
                                for j in 0..dh {
                                    gp[dst + j] += g.data()[s + j];
                                }
                            }
                        }
                    }
                }
                Op::PathMix { gains, s } => {
                    let shg = self.nodes[*gains].value.shape();
                    let (b, p, n) = (shg[0], shg[1], shg[2]);
                    let m = s.shape()[3];
                    let gp = grads[*gains].data_mut();
                    let sd = s.data();
                    for bi in 0..b {
                        for pi in 0..p {
                            for ni in 0..n {
                                let srow = &sd[((bi * p + pi) * n + ni) * m
                                    ..((bi * p + pi) * n + ni + 1) * m];
                                let grow =
                                    &g.data()[(bi * n + ni) * m..(bi * n + ni + 1) * m];
                                let mut acc = 0.0;
                                for mi in 0..m {
                                    acc += grow[mi] * srow[mi];
                                }
                                gp[(bi * p + pi) * n + ni] += acc;
                            }
                        }
                    }
                }
            }
        }
        grads
    }
}

fn accumulate(dst: &mut Tensor, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}
