//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] is a per-forward-pass arena of nodes. Ops only reference
//! earlier nodes, so creation order is a topological order and backward is a
//! single reverse sweep. Gradients are accumulated in fixed iteration order,
//! which keeps every run bit-reproducible on the same build.
//!
//! Frozen parameters enter the graph as constants (`requires_grad = false`);
//! they receive no gradient by construction, which is what the training
//! stages rely on for their frozenness contracts.

use crate::scalar::{s, Scalar};
use crate::tensor::{dims4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId, F),
    MulScalar(NodeId, F),
    Silu(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, F, F),
    /// Softmax over the last axis.
    Softmax(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// `(N, ...) -> (N)`: mean over all trailing axes.
    MeanPerSample(NodeId),
    /// `(N, C, H, W) -> (N, C)`: mean over the spatial axes.
    MeanHw(NodeId),
    Dot(NodeId, NodeId),
    /// Per-sample constant scaling of `(N, ...)` by `coefs[n]`.
    ScalePerSample(NodeId, Vec<F>),
    /// `(N, C, ...) + (C)` or `(N, M) + (M)`.
    AddBias(NodeId, NodeId),
    /// `(N, C, H, W) + (N, C)` broadcast over space.
    AddBiasNc(NodeId, NodeId),
    /// Fused affine map: `x (N, in) @ w (out, in)^T [+ b (out)]`.
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    /// Batched matmul `(B, m, k) @ (B, k, n)` with optional transposes of the
    /// trailing two axes of either operand.
    Bmm { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize },
    /// Row lookup `w (V, D)` at `indices (N)`.
    Embedding { w: NodeId, indices: Vec<usize> },
    /// Concatenation along axis 1.
    ConcatC(Vec<NodeId>),
    NearestUp2(NodeId),
    AvgPool2(NodeId),
    /// Bilinear upsampling by an integer factor (align_corners = false).
    BilinearUp(NodeId, usize),
    ReplicatePad2d(NodeId, usize),
    /// Gather along axis 0.
    SelectBatch(NodeId, Vec<usize>),
    Reshape(NodeId),
    /// Mean cross-entropy of `logits (N, K)` against class targets.
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    /// One element of a vector as a scalar node.
    Gather1(NodeId, usize),
    /// Whole tensor scaled by a 1-element node.
    ScaleByNode { x: NodeId, scale: NodeId },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    needs: bool,
    /// Saved statistics for ops whose backward needs them (e.g. group norm
    /// mean/rstd, cross-entropy probabilities).
    saved: Vec<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by node, produced by [`Graph::backward`].
pub struct Grads<F: Scalar> {
    by_node: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, densified to zeros when absent from the tape walk.
    pub fn dense(&self, id: NodeId, shape: &[usize]) -> Tensor<F> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, needs: bool, saved: Vec<F>) -> NodeId {
        self.nodes.push(Node { op, value, needs, saved });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn zero_scalar(&mut self) -> NodeId {
        self.constant(Tensor::scalar(F::zero()))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v, self.needs(a) || self.needs(b), Vec::new())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v, self.needs(a) || self.needs(b), Vec::new())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v, self.needs(a) || self.needs(b), Vec::new())
    }

    pub fn add_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a, c), v, self.needs(a), Vec::new())
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: F) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::MulScalar(a, c), v, self.needs(a), Vec::new())
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), v, self.needs(a), Vec::new())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v, self.needs(a), Vec::new())
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(Op::Sqrt(a), v, self.needs(a), Vec::new())
    }

    pub fn clamp(&mut self, a: NodeId, lo: F, hi: F) -> NodeId {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), v, self.needs(a), Vec::new())
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let k = *shape.last().expect("softmax needs rank >= 1");
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(k) {
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(a);
        self.push(Op::Softmax(a), Tensor::new(shape, data), needs, Vec::new())
    }

    // ---- reductions --------------------------------------------------------

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::MeanAll(a), v, self.needs(a), Vec::new())
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().copied().sum());
        self.push(Op::SumAll(a), v, self.needs(a), Vec::new())
    }

    pub fn mean_per_sample(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let n = t.shape()[0];
        let m = t.numel() / n.max(1);
        let inv = s::<F>(1.0 / m as f64);
        let mut out = vec![F::zero(); n];
        for (i, chunk) in t.data().chunks_exact(m).enumerate() {
            out[i] = chunk.iter().copied().sum::<F>() * inv;
        }
        let needs = self.needs(a);
        self.push(Op::MeanPerSample(a), Tensor::new([n], out), needs, Vec::new())
    }

    pub fn mean_hw(&mut self, a: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(self.value(a).shape());
        let m = h * w;
        let inv = s::<F>(1.0 / m as f64);
        let mut out = vec![F::zero(); n * c];
        for (i, chunk) in self.value(a).data().chunks_exact(m).enumerate() {
            out[i] = chunk.iter().copied().sum::<F>() * inv;
        }
        let needs = self.needs(a);
        self.push(Op::MeanHw(a), Tensor::new([n, c], out), needs, Vec::new())
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "dot shape mismatch");
        let v: F = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        self.push(Op::Dot(a, b), Tensor::scalar(v), self.needs(a) || self.needs(b), Vec::new())
    }

    // ---- broadcasts --------------------------------------------------------

    pub fn scale_per_sample(&mut self, a: NodeId, coefs: Vec<F>) -> NodeId {
        let t = self.value(a);
        let n = t.shape()[0];
        assert_eq!(coefs.len(), n, "scale_per_sample coef count");
        let m = t.numel() / n;
        let mut data = t.data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(m).enumerate() {
            let c = coefs[i];
            for v in chunk.iter_mut() {
                *v *= c;
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(a);
        self.push(Op::ScalePerSample(a, coefs), Tensor::new(shape, data), needs, Vec::new())
    }

    /// `(N, C, ...) + bias (C)`; also covers `(N, M) + (M)`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let t = self.value(a);
        let c = self.value(bias).numel();
        let shape = t.shape().to_vec();
        assert!(shape.len() >= 2 && shape[1] == c, "add_bias: {shape:?} + ({c})");
        let inner: usize = shape[2..].iter().product();
        let mut data = t.data().to_vec();
        let bv = self.value(bias).data().to_vec();
        for sample in data.chunks_exact_mut(c * inner) {
            for (ci, chunk) in sample.chunks_exact_mut(inner).enumerate() {
                let b = bv[ci];
                for v in chunk.iter_mut() {
                    *v += b;
                }
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(Op::AddBias(a, bias), Tensor::new(shape, data), needs, Vec::new())
    }

    /// `(N, C, H, W) + bias (N, C)` broadcast over space.
    pub fn add_bias_nc(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(self.value(a).shape());
        assert_eq!(self.value(bias).shape(), &[n, c], "add_bias_nc bias shape");
        let mut data = self.value(a).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let hw = h * w;
        for (nc, chunk) in data.chunks_exact_mut(hw).enumerate() {
            let b = bv[nc];
            for v in chunk.iter_mut() {
                *v += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(Op::AddBiasNc(a, bias), Tensor::new([n, c, h, w], data), needs, Vec::new())
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be (N, in)");
        assert_eq!(ws.len(), 2, "linear weight must be (out, in)");
        assert_eq!(xs[1], ws[1], "linear in-features mismatch");
        let (n, k_in, k_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![F::zero(); n * k_out];
        unsafe {
            // x (n, in) @ w^T (in, out)
            F::gemm(
                n,
                k_in,
                k_out,
                F::one(),
                self.value(x).data().as_ptr(),
                k_in as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                k_in as isize,
                F::zero(),
                out.as_mut_ptr(),
                k_out as isize,
                1,
            );
        }
        if let Some(bias) = b {
            let bv = self.value(bias).data();
            assert_eq!(bv.len(), k_out, "linear bias shape");
            for row in out.chunks_exact_mut(k_out) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(Op::Linear { x, w, b }, Tensor::new([n, k_out], out), needs, Vec::new())
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let asx = self.shape(a).to_vec();
        let bsx = self.shape(b).to_vec();
        assert_eq!(asx.len(), 3, "bmm lhs must be rank 3");
        assert_eq!(bsx.len(), 3, "bmm rhs must be rank 3");
        assert_eq!(asx[0], bsx[0], "bmm batch mismatch");
        let (m, ka) = if ta { (asx[2], asx[1]) } else { (asx[1], asx[2]) };
        let (kb, n) = if tb { (bsx[2], bsx[1]) } else { (bsx[1], bsx[2]) };
        assert_eq!(ka, kb, "bmm inner dim mismatch");
        let batch = asx[0];
        let mut out = vec![F::zero(); batch * m * n];
        let (a_rows, a_cols) = (asx[1], asx[2]);
        let (b_rows, b_cols) = (bsx[1], bsx[2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..batch {
            let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
            let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
            unsafe {
                F::gemm(
                    m,
                    ka,
                    n,
                    F::one(),
                    av.as_ptr().add(i * a_rows * a_cols),
                    rsa,
                    csa,
                    bv.as_ptr().add(i * b_rows * b_cols),
                    rsb,
                    csb,
                    F::zero(),
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Bmm { a, b, ta, tb }, Tensor::new([batch, m, n], out), needs, Vec::new())
    }

    // ---- structured ops ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let (n, c, h, wd) = dims4(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be (OC, C, KH, KW)");
        assert_eq!(ws[1], c, "conv in-channel mismatch: input {c}, weight {}", ws[1]);
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let k = c * kh * kw;
        let rows = n * oh * ow;

        let cols = im2col(self.value(x).data(), n, c, h, wd, kh, kw, stride, pad, oh, ow);
        // cols (rows, k) @ w^T (k, oc) -> (rows, oc)
        let mut prod = vec![F::zero(); rows * oc];
        unsafe {
            F::gemm(
                rows,
                k,
                oc,
                F::one(),
                cols.as_ptr(),
                k as isize,
                1,
                self.value(w).data().as_ptr(),
                1,
                k as isize,
                F::zero(),
                prod.as_mut_ptr(),
                oc as isize,
                1,
            );
        }
        // (n*oh*ow, oc) -> (n, oc, oh, ow)
        let mut out = vec![F::zero(); n * oc * oh * ow];
        let hw = oh * ow;
        for ni in 0..n {
            for p in 0..hw {
                let src = (ni * hw + p) * oc;
                for co in 0..oc {
                    out[((ni * oc) + co) * hw + p] = prod[src + co];
                }
            }
        }
        if let Some(bias) = b {
            let bv = self.value(bias).data().to_vec();
            assert_eq!(bv.len(), oc, "conv bias shape");
            for (i, chunk) in out.chunks_exact_mut(hw).enumerate() {
                let bb = bv[i % oc];
                for v in chunk.iter_mut() {
                    *v += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map(|bb| self.needs(bb)).unwrap_or(false);
        self.push(
            Op::Conv2d { x, w, b, stride, pad },
            Tensor::new([n, oc, oh, ow], out),
            needs,
            Vec::new(),
        )
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: F,
    ) -> NodeId {
        let (n, c, h, w) = dims4(self.shape(x));
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(self.value(gamma).numel(), c, "group_norm gamma shape");
        assert_eq!(self.value(beta).numel(), c, "group_norm beta shape");
        let cg = c / groups;
        let m = cg * h * w;
        let inv_m = s::<F>(1.0 / m as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = vec![F::zero(); xv.len()];
        // saved layout: [mean, rstd] per (n, g)
        let mut saved = Vec::with_capacity(2 * n * groups);
        for ni in 0..n {
            for g in 0..groups {
                let base = (ni * c + g * cg) * h * w;
                let slice = &xv[base..base + m];
                let mean = slice.iter().copied().sum::<F>() * inv_m;
                let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_m;
                let rstd = F::one() / (var + eps).sqrt();
                saved.push(mean);
                saved.push(rstd);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let off = base + ci * h * w;
                    for i in 0..h * w {
                        out[off + i] = (xv[off + i] - mean) * rstd * ga + be;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::GroupNorm { x, gamma, beta, groups },
            Tensor::new([n, c, h, w], out),
            needs,
            saved,
        )
    }

    pub fn embedding(&mut self, w: NodeId, indices: Vec<usize>) -> NodeId {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "embedding weight must be (V, D)");
        let (v, d) = (ws[0], ws[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        let wv = self.value(w).data();
        for &i in &indices {
            assert!(i < v, "embedding index {i} out of range {v}");
            out.extend_from_slice(&wv[i * d..(i + 1) * d]);
        }
        let n = indices.len();
        let needs = self.needs(w);
        self.push(Op::Embedding { w, indices }, Tensor::new([n, d], out), needs, Vec::new())
    }

    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        assert!(first.len() >= 2, "concat_c needs rank >= 2");
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut c_total = 0;
        for &p in parts {
            let sh = self.shape(p);
            assert_eq!(sh[0], n, "concat_c batch mismatch");
            assert_eq!(sh[2..].iter().product::<usize>(), inner, "concat_c inner mismatch");
            c_total += sh[1];
        }
        let mut out = Vec::with_capacity(n * c_total * inner);
        for ni in 0..n {
            for &p in parts {
                let sh = self.shape(p);
                let c = sh[1];
                let pv = self.value(p).data();
                out.extend_from_slice(&pv[ni * c * inner..(ni + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = c_total;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatC(parts.to_vec()), Tensor::new(shape, out), needs, Vec::new())
    }

    pub fn nearest_up2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(self.shape(x));
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for nc in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    out[nc * oh * ow + i * ow + j] = xv[nc * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::NearestUp2(x), Tensor::new([n, c, oh, ow], out), needs, Vec::new())
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = dims4(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = s::<F>(0.25);
        let mut out = vec![F::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let b = nc * h * w + 2 * i * w + 2 * j;
                    out[nc * oh * ow + i * ow + j] =
                        (xv[b] + xv[b + 1] + xv[b + w] + xv[b + w + 1]) * quarter;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::AvgPool2(x), Tensor::new([n, c, oh, ow], out), needs, Vec::new())
    }

    pub fn bilinear_up(&mut self, x: NodeId, factor: usize) -> NodeId {
        assert!(factor >= 1);
        let (n, c, h, w) = dims4(self.shape(x));
        let (oh, ow) = (h * factor, w * factor);
        let taps_h = bilinear_taps(h, factor);
        let taps_w = bilinear_taps(w, factor);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for (i, &(i0, i1, wi)) in taps_h.iter().enumerate() {
                let wi = s::<F>(wi);
                for (j, &(j0, j1, wj)) in taps_w.iter().enumerate() {
                    let wj = s::<F>(wj);
                    let a = src[i0 * w + j0];
                    let b = src[i0 * w + j1];
                    let cc = src[i1 * w + j0];
                    let d = src[i1 * w + j1];
                    let top = a + (b - a) * wj;
                    let bot = cc + (d - cc) * wj;
                    dst[i * ow + j] = top + (bot - top) * wi;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::BilinearUp(x, factor), Tensor::new([n, c, oh, ow], out), needs, Vec::new())
    }

    pub fn replicate_pad2d(&mut self, x: NodeId, pad: usize) -> NodeId {
        let (n, c, h, w) = dims4(self.shape(x));
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            for i in 0..oh {
                let si = i.saturating_sub(pad).min(h - 1);
                for j in 0..ow {
                    let sj = j.saturating_sub(pad).min(w - 1);
                    out[nc * oh * ow + i * ow + j] = xv[nc * h * w + si * w + sj];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Op::ReplicatePad2d(x, pad), Tensor::new([n, c, oh, ow], out), needs, Vec::new())
    }

    pub fn select_batch(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        let sh = self.shape(x).to_vec();
        let n = sh[0];
        let m: usize = sh[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * m);
        for &i in &indices {
            assert!(i < n, "select_batch index {i} out of range {n}");
            out.extend_from_slice(&xv[i * m..(i + 1) * m]);
        }
        let mut shape = sh;
        shape[0] = indices.len();
        let needs = self.needs(x);
        self.push(Op::SelectBatch(x, indices), Tensor::new(shape, out), needs, Vec::new())
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> NodeId {
        let shape = shape.into();
        let v = self.value(x).clone().reshaped(shape);
        let needs = self.needs(x);
        self.push(Op::Reshape(x), v, needs, Vec::new())
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let sh = self.shape(logits).to_vec();
        assert_eq!(sh.len(), 2, "cross_entropy logits must be (N, K)");
        let (n, k) = (sh[0], sh[1]);
        assert_eq!(targets.len(), n, "cross_entropy target count");
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = F::zero();
        for (row, &t) in probs.chunks_exact_mut(k).zip(&targets) {
            assert!(t < k, "target {t} out of range {k}");
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            loss -= row[t].max(s(1e-300)).ln();
        }
        loss /= s(n as f64);
        let needs = self.needs(logits);
        self.push(Op::CrossEntropy { logits, targets }, Tensor::scalar(loss), needs, probs)
    }

    pub fn gather1(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = self.value(x).data()[index];
        let needs = self.needs(x);
        self.push(Op::Gather1(x, index), Tensor::scalar(v), needs, Vec::new())
    }

    pub fn scale_by_node(&mut self, x: NodeId, scale: NodeId) -> NodeId {
        assert_eq!(self.value(scale).numel(), 1, "scale_by_node needs a scalar node");
        let c = self.value(scale).item();
        let v = self.value(x).map(|e| e * c);
        let needs = self.needs(x) || self.needs(scale);
        self.push(Op::ScaleByNode { x, scale }, v, needs, Vec::new())
    }

    // ---- composite helpers -------------------------------------------------

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Per-sample mean squared error: `(N, ...) -> (N)`.
    pub fn mse_per_sample(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_per_sample(sq)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns per-node gradients for every
    /// node on a path from `loss` to a `requires_grad` leaf.
    pub fn backward(&self, loss: NodeId) -> Grads<F> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![F::one()]));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs {
                grads[id] = None;
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Grads { by_node: grads }
    }

    fn accumulate(grads: &mut [Option<Tensor<F>>], id: NodeId, contrib: Tensor<F>) {
        match &mut grads[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contrib.shape());
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += *c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, gy: &Tensor<F>, grads: &mut Vec<Option<Tensor<F>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.zip_map(self.value(*b), |g, v| g * v));
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, gy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.clone());
                }
            }
            Op::MulScalar(a, c) => {
                if self.needs(*a) {
                    let c = *c;
                    Self::accumulate(grads, *a, gy.map(|g| g * c));
                }
            }
            Op::Silu(a) => {
                if self.needs(*a) {
                    let gx = gy.zip_map(self.value(*a), |g, x| {
                        let sg = sigmoid(x);
                        g * sg * (F::one() + x * (F::one() - sg))
                    });
                    Self::accumulate(grads, *a, gx);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let gx = gy.zip_map(&node.value, |g, y| g * y * (F::one() - y));
                    Self::accumulate(grads, *a, gx);
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let half = s::<F>(0.5);
                    let gx = gy.zip_map(&node.value, |g, y| g * half / y);
                    Self::accumulate(grads, *a, gx);
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.needs(*a) {
                    let (lo, hi) = (*lo, *hi);
                    let gx = gy.zip_map(self.value(*a), |g, x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            F::zero()
                        }
                    });
                    Self::accumulate(grads, *a, gx);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let k = *y.shape().last().unwrap();
                    let mut gx = vec![F::zero(); y.numel()];
                    for ((gx_row, y_row), gy_row) in gx
                        .chunks_exact_mut(k)
                        .zip(y.data().chunks_exact(k))
                        .zip(gy.data().chunks_exact(k))
                    {
                        let dot: F = y_row.iter().zip(gy_row).map(|(&yv, &gv)| yv * gv).sum();
                        for ((o, &yv), &gv) in gx_row.iter_mut().zip(y_row).zip(gy_row) {
                            *o = yv * (gv - dot);
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::new(y.shape().to_vec(), gx));
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let g = gy.item() * s::<F>(1.0 / src.numel() as f64);
                    Self::accumulate(grads, *a, Tensor::full(src.shape().to_vec(), g));
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    Self::accumulate(grads, *a, Tensor::full(src.shape().to_vec(), gy.item()));
                }
            }
            Op::MeanPerSample(a) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let n = src.shape()[0];
                    let m = src.numel() / n;
                    let inv = s::<F>(1.0 / m as f64);
                    let mut gx = vec![F::zero(); src.numel()];
                    for (i, chunk) in gx.chunks_exact_mut(m).enumerate() {
                        let g = gy.data()[i] * inv;
                        for v in chunk.iter_mut() {
                            *v = g;
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::new(src.shape().to_vec(), gx));
                }
            }
            Op::MeanHw(a) => {
                if self.needs(*a) {
                    let (n, c, h, w) = dims4(self.value(*a).shape());
                    let inv = s::<F>(1.0 / (h * w) as f64);
                    let mut gx = vec![F::zero(); n * c * h * w];
                    for (i, chunk) in gx.chunks_exact_mut(h * w).enumerate() {
                        let g = gy.data()[i] * inv;
                        for v in chunk.iter_mut() {
                            *v = g;
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::new([n, c, h, w], gx));
                }
            }
            Op::Dot(a, b) => {
                let g = gy.item();
                if self.needs(*a) {
                    Self::accumulate(grads, *a, self.value(*b).map(|v| v * g));
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, self.value(*a).map(|v| v * g));
                }
            }
            Op::ScalePerSample(a, coefs) => {
                if self.needs(*a) {
                    let src = self.value(*a);
                    let n = src.shape()[0];
                    let m = src.numel() / n;
                    let mut gx = gy.data().to_vec();
                    for (i, chunk) in gx.chunks_exact_mut(m).enumerate() {
                        let c = coefs[i];
                        for v in chunk.iter_mut() {
                            *v *= c;
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::new(src.shape().to_vec(), gx));
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.clone());
                }
                if self.needs(*bias) {
                    let sh = self.value(*a).shape();
                    let c = sh[1];
                    let inner: usize = sh[2..].iter().product();
                    let mut gb = vec![F::zero(); c];
                    for sample in gy.data().chunks_exact(c * inner) {
                        for (ci, chunk) in sample.chunks_exact(inner).enumerate() {
                            gb[ci] += chunk.iter().copied().sum::<F>();
                        }
                    }
                    let bshape = self.value(*bias).shape().to_vec();
                    Self::accumulate(grads, *bias, Tensor::new(bshape, gb));
                }
            }
            Op::AddBiasNc(a, bias) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, gy.clone());
                }
                if self.needs(*bias) {
                    let (n, c, h, w) = dims4(self.value(*a).shape());
                    let mut gb = vec![F::zero(); n * c];
                    for (nc, chunk) in gy.data().chunks_exact(h * w).enumerate() {
                        gb[nc] = chunk.iter().copied().sum::<F>();
                    }
                    Self::accumulate(grads, *bias, Tensor::new([n, c], gb));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let (n, k_in, k_out) = (xs[0], xs[1], ws[0]);
                if self.needs(*x) {
                    // dx (n, in) = gy (n, out) @ w (out, in)
                    let mut gx = vec![F::zero(); n * k_in];
                    unsafe {
                        F::gemm(
                            n,
                            k_out,
                            k_in,
                            F::one(),
                            gy.data().as_ptr(),
                            k_out as isize,
                            1,
                            self.value(*w).data().as_ptr(),
                            k_in as isize,
                            1,
                            F::zero(),
                            gx.as_mut_ptr(),
                            k_in as isize,
                            1,
                        );
                    }
                    Self::accumulate(grads, *x, Tensor::new([n, k_in], gx));
                }
                if self.needs(*w) {
                    // dw (out, in) = gy^T (out, n) @ x (n, in)
                    let mut gw = vec![F::zero(); k_out * k_in];
                    unsafe {
                        F::gemm(
                            k_out,
                            n,
                            k_in,
                            F::one(),
                            gy.data().as_ptr(),
                            1,
                            k_out as isize,
                            self.value(*x).data().as_ptr(),
                            k_in as isize,
                            1,
                            F::zero(),
                            gw.as_mut_ptr(),
                            k_in as isize,
                            1,
                        );
                    }
                    Self::accumulate(grads, *w, Tensor::new([k_out, k_in], gw));
                }
                if let Some(bias) = b {
                    if self.needs(*bias) {
                        let mut gb = vec![F::zero(); k_out];
                        for row in gy.data().chunks_exact(k_out) {
                            for (g, &v) in gb.iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                        Self::accumulate(grads, *bias, Tensor::new([k_out], gb));
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                self.backprop_bmm(*a, *b, *ta, *tb, gy, grads);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backprop_conv2d(*x, *w, *b, *stride, *pad, gy, grads);
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                self.backprop_group_norm(*x, *gamma, *beta, *groups, &node.saved, gy, grads);
            }
            Op::Embedding { w, indices } => {
                if self.needs(*w) {
                    let ws = self.value(*w).shape().to_vec();
                    let d = ws[1];
                    let mut gw = vec![F::zero(); ws[0] * d];
                    for (row, &i) in gy.data().chunks_exact(d).zip(indices) {
                        for (g, &v) in gw[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    Self::accumulate(grads, *w, Tensor::new(ws, gw));
                }
            }
            Op::ConcatC(parts) => {
                let out_shape = node.value.shape();
                let n = out_shape[0];
                let inner: usize = out_shape[2..].iter().product();
                let mut offset_c = 0;
                let c_total = out_shape[1];
                for &p in parts {
                    let psh = self.value(p).shape().to_vec();
                    let c = psh[1];
                    if self.needs(p) {
                        let mut gp = vec![F::zero(); n * c * inner];
                        for ni in 0..n {
                            let src = (ni * c_total + offset_c) * inner;
                            let dst = ni * c * inner;
                            gp[dst..dst + c * inner]
                                .copy_from_slice(&gy.data()[src..src + c * inner]);
                        }
                        Self::accumulate(grads, p, Tensor::new(psh, gp));
                    }
                    offset_c += c;
                }
            }
            Op::NearestUp2(x) => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.value(*x).shape());
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut gx = vec![F::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                gx[nc * h * w + (i / 2) * w + j / 2] +=
                                    gy.data()[nc * oh * ow + i * ow + j];
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::new([n, c, h, w], gx));
                }
            }
            Op::AvgPool2(x) => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.value(*x).shape());
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = s::<F>(0.25);
                    let mut gx = vec![F::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let g = gy.data()[nc * oh * ow + i * ow + j] * quarter;
                                let b = nc * h * w + 2 * i * w + 2 * j;
                                gx[b] += g;
                                gx[b + 1] += g;
                                gx[b + w] += g;
                                gx[b + w + 1] += g;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::new([n, c, h, w], gx));
                }
            }
            Op::BilinearUp(x, factor) => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.value(*x).shape());
                    let (oh, ow) = (h * factor, w * factor);
                    let taps_h = bilinear_taps(h, *factor);
                    let taps_w = bilinear_taps(w, *factor);
                    let mut gx = vec![F::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        let src = &gy.data()[nc * oh * ow..(nc + 1) * oh * ow];
                        for (i, &(i0, i1, wi)) in taps_h.iter().enumerate() {
                            let wi = s::<F>(wi);
                            for (j, &(j0, j1, wj)) in taps_w.iter().enumerate() {
                                let wj = s::<F>(wj);
                                let g = src[i * ow + j];
                                let one = F::one();
                                dst[i0 * w + j0] += g * (one - wi) * (one - wj);
                                dst[i0 * w + j1] += g * (one - wi) * wj;
                                dst[i1 * w + j0] += g * wi * (one - wj);
                                dst[i1 * w + j1] += g * wi * wj;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::new([n, c, h, w], gx));
                }
            }
            Op::ReplicatePad2d(x, pad) => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.value(*x).shape());
                    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
                    let mut gx = vec![F::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        for i in 0..oh {
                            let si = i.saturating_sub(*pad).min(h - 1);
                            for j in 0..ow {
                                let sj = j.saturating_sub(*pad).min(w - 1);
                                gx[nc * h * w + si * w + sj] += gy.data()[nc * oh * ow + i * ow + j];
                            }
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::new([n, c, h, w], gx));
                }
            }
            Op::SelectBatch(x, indices) => {
                if self.needs(*x) {
                    let sh = self.value(*x).shape().to_vec();
                    let m: usize = sh[1..].iter().product();
                    let mut gx = vec![F::zero(); sh.iter().product()];
                    for (row, &i) in gy.data().chunks_exact(m).zip(indices) {
                        for (g, &v) in gx[i * m..(i + 1) * m].iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    Self::accumulate(grads, *x, Tensor::new(sh, gx));
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let sh = self.value(*x).shape().to_vec();
                    Self::accumulate(grads, *x, gy.clone().reshaped(sh));
                }
            }
            Op::Gather1(x, index) => {
                if self.needs(*x) {
                    let sh = self.value(*x).shape().to_vec();
                    let mut gx = Tensor::zeros(sh);
                    gx.data_mut()[*index] = gy.item();
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::ScaleByNode { x, scale } => {
                let c = self.value(*scale).item();
                if self.needs(*x) {
                    Self::accumulate(grads, *x, gy.map(|g| g * c));
                }
                if self.needs(*scale) {
                    let dot: F = gy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| g * v)
                        .sum();
                    Self::accumulate(grads, *scale, Tensor::scalar(dot));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let sh = self.value(*logits).shape().to_vec();
                    let (n, k) = (sh[0], sh[1]);
                    let g = gy.item() * s::<F>(1.0 / n as f64);
                    let mut gx = node.saved.clone();
                    for (row, &t) in gx.chunks_exact_mut(k).zip(targets) {
                        row[t] -= F::one();
                        for v in row.iter_mut() {
                            *v *= g;
                        }
                    }
                    Self::accumulate(grads, *logits, Tensor::new(sh, gx));
                }
            }
        }
    }

    fn backprop_bmm(
        &self,
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let asx = self.value(a).shape().to_vec();
        let bsx = self.value(b).shape().to_vec();
        let batch = asx[0];
        let (m, k) = if ta { (asx[2], asx[1]) } else { (asx[1], asx[2]) };
        let n = if tb { bsx[1] } else { bsx[2] };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (a_sz, b_sz, y_sz) = (asx[1] * asx[2], bsx[1] * bsx[2], m * n);

        if self.needs(a) {
            // dA' = gy @ B'^T, with A' = op_a(A); write through the transpose when ta.
            let mut ga = vec![F::zero(); batch * a_sz];
            for i in 0..batch {
                let (rsb, csb) = if tb {
                    // B' = B^T, so B'^T = B
                    ((bsx[2]) as isize, 1)
                } else {
                    (1, (bsx[2]) as isize)
                };
                // output strides: dA' is (m, k); if ta, dA = dA'^T stored (k=asx[1] rows? )
                let (rsc, csc) = if ta { (1, asx[2] as isize) } else { (asx[2] as isize, 1) };
                unsafe {
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        gy.data().as_ptr().add(i * y_sz),
                        n as isize,
                        1,
                        bv.as_ptr().add(i * b_sz),
                        rsb,
                        csb,
                        F::zero(),
                        ga.as_mut_ptr().add(i * a_sz),
                        rsc,
                        csc,
                    );
                }
            }
            Self::accumulate(grads, a, Tensor::new(asx.clone(), ga));
        }
        if self.needs(b) {
            // dB' = A'^T @ gy
            let mut gb = vec![F::zero(); batch * b_sz];
            for i in 0..batch {
                // A'^T is (k, m): A' = op_a(A)
                let (rsa, csa) = if ta {
                    // A' = A^T (m=asx[2], k=asx[1]); A'^T = A with row stride asx[2]
                    (asx[2] as isize, 1)
                } else {
                    (1, asx[2] as isize)
                };
                let (rsc, csc) = if tb { (1, bsx[2] as isize) } else { (bsx[2] as isize, 1) };
                unsafe {
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        av.as_ptr().add(i * a_sz),
                        rsa,
                        csa,
                        gy.data().as_ptr().add(i * y_sz),
                        n as isize,
                        1,
                        F::zero(),
                        gb.as_mut_ptr().add(i * b_sz),
                        rsc,
                        csc,
                    );
                }
            }
            Self::accumulate(grads, b, Tensor::new(bsx, gb));
        }
    }

    fn backprop_conv2d(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (n, c, h, wd) = dims4(self.value(x).shape());
        let ws = self.value(w).shape().to_vec();
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        let (_, _, oh, ow) = dims4(gy.shape());
        let k = c * kh * kw;
        let rows = n * oh * ow;
        let hw = oh * ow;

        // gy (n, oc, oh, ow) -> (rows, oc)
        let mut gy_perm = vec![F::zero(); rows * oc];
        for ni in 0..n {
            for co in 0..oc {
                for p in 0..hw {
                    gy_perm[(ni * hw + p) * oc + co] = gy.data()[(ni * oc + co) * hw + p];
                }
            }
        }

        if let Some(bias) = b {
            if self.needs(bias) {
                let mut gb = vec![F::zero(); oc];
                for (i, chunk) in gy.data().chunks_exact(hw).enumerate() {
                    gb[i % oc] += chunk.iter().copied().sum::<F>();
                }
                Self::accumulate(grads, bias, Tensor::new([oc], gb));
            }
        }

        if self.needs(w) {
            let cols = im2col(self.value(x).data(), n, c, h, wd, kh, kw, stride, pad, oh, ow);
            // dW (oc, k) = gy_perm^T (oc, rows) @ cols (rows, k)
            let mut gw = vec![F::zero(); oc * k];
            unsafe {
                F::gemm(
                    oc,
                    rows,
                    k,
                    F::one(),
                    gy_perm.as_ptr(),
                    1,
                    oc as isize,
                    cols.as_ptr(),
                    k as isize,
                    1,
                    F::zero(),
                    gw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            Self::accumulate(grads, w, Tensor::new(ws.clone(), gw));
        }

        if self.needs(x) {
            // dCols (rows, k) = gy_perm (rows, oc) @ w (oc, k)
            let mut dcols = vec![F::zero(); rows * k];
            unsafe {
                F::gemm(
                    rows,
                    oc,
                    k,
                    F::one(),
                    gy_perm.as_ptr(),
                    oc as isize,
                    1,
                    self.value(w).data().as_ptr(),
                    k as isize,
                    1,
                    F::zero(),
                    dcols.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            let gx = col2im(&dcols, n, c, h, wd, kh, kw, stride, pad, oh, ow);
            Self::accumulate(grads, x, Tensor::new([n, c, h, wd], gx));
        }
    }

    fn backprop_group_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        saved: &[F],
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (n, c, h, w) = dims4(self.value(x).shape());
        let cg = c / groups;
        let m = cg * h * w;
        let inv_m = s::<F>(1.0 / m as f64);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();

        let mut gx = if self.needs(x) { vec![F::zero(); xv.len()] } else { Vec::new() };
        let mut ggamma = vec![F::zero(); c];
        let mut gbeta = vec![F::zero(); c];

        for ni in 0..n {
            for g in 0..groups {
                let base = (ni * c + g * cg) * h * w;
                let mean = saved[2 * (ni * groups + g)];
                let rstd = saved[2 * (ni * groups + g) + 1];

                // accumulate per-channel param grads and group-level sums
                let mut sum_dyh = F::zero();
                let mut sum_dyh_xh = F::zero();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let off = base + ci * h * w;
                    let ga = gv[ch];
                    for i in 0..h * w {
                        let xh = (xv[off + i] - mean) * rstd;
                        let dy = gy.data()[off + i];
                        gbeta[ch] += dy;
                        ggamma[ch] += dy * xh;
                        let dyh = dy * ga;
                        sum_dyh += dyh;
                        sum_dyh_xh += dyh * xh;
                    }
                }
                if self.needs(x) {
                    let mean_dyh = sum_dyh * inv_m;
                    let mean_dyh_xh = sum_dyh_xh * inv_m;
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        let off = base + ci * h * w;
                        let ga = gv[ch];
                        for i in 0..h * w {
                            let xh = (xv[off + i] - mean) * rstd;
                            let dyh = gy.data()[off + i] * ga;
                            gx[off + i] = rstd * (dyh - mean_dyh - xh * mean_dyh_xh);
                        }
                    }
                }
            }
        }

        if self.needs(x) {
            Self::accumulate(grads, x, Tensor::new([n, c, h, w], gx));
        }
        if self.needs(gamma) {
            let sh = self.value(gamma).shape().to_vec();
            Self::accumulate(grads, gamma, Tensor::new(sh, ggamma));
        }
        if self.needs(beta) {
            let sh = self.value(beta).shape().to_vec();
            Self::accumulate(grads, beta, Tensor::new(sh, gbeta));
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `(i0, i1, weight-of-i1)` source taps for bilinear upsampling along one axis
/// (align_corners = false, edges clamped).
fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let dst = src * factor;
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = (i as f64 + 0.5) * scale - 0.5;
            let floor = pos.floor();
            let w = pos - floor;
            let i0 = floor.max(0.0) as usize;
            let i1 = (floor as i64 + 1).clamp(0, src as i64 - 1) as usize;
            let i0 = i0.min(src - 1);
            (i0, i1, w)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let k = c * kh * kw;
    let mut cols = vec![F::zero(); n * oh * ow * k];
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = ((ni * oh + oi) * ow + oj) * k;
                let i0 = (oi * stride) as isize - pad as isize;
                let j0 = (oj * stride) as isize - pad as isize;
                for ci in 0..c {
                    let src_c = (ni * c + ci) * h * w;
                    let dst_c = row + ci * kh * kw;
                    for ki in 0..kh {
                        let si = i0 + ki as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src_r = src_c + si as usize * w;
                        let dst_r = dst_c + ki * kw;
                        for kj in 0..kw {
                            let sj = j0 + kj as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            cols[dst_r + kj] = x[src_r + sj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    cols: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let k = c * kh * kw;
    let mut x = vec![F::zero(); n * c * h * w];
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let row = ((ni * oh + oi) * ow + oj) * k;
                let i0 = (oi * stride) as isize - pad as isize;
                let j0 = (oj * stride) as isize - pad as isize;
                for ci in 0..c {
                    let dst_c = (ni * c + ci) * h * w;
                    let src_c = row + ci * kh * kw;
                    for ki in 0..kh {
                        let si = i0 + ki as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let dst_r = dst_c + si as usize * w;
                        let src_r = src_c + ki * kw;
                        for kj in 0..kw {
                            let sj = j0 + kj as isize;
                            if sj < 0 || sj >= w as isize {
                                continue;
                            }
                            x[dst_r + sj as usize] += cols[src_r + kj];
                        }
                    }
                }
            }
        }
    }
    x
}
