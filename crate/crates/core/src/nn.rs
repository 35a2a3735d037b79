//! Layer toolkit on top of the autodiff graph.
//!
//! Layers own plain weight tensors. A forward pass binds them into a fresh
//! [`Graph`] through a [`Ctx`], which records the `(name, node)` pairs of
//! trainable parameters so the optimizer can fetch gradients afterwards.
//! Entering a frozen scope binds parameters as constants instead.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Forward-pass context: graph plus trainable-parameter bindings.
pub struct Ctx<F: Scalar> {
    pub g: Graph<F>,
    bindings: Vec<(String, NodeId)>,
    trainable: bool,
}

impl<F: Scalar> Default for Ctx<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Ctx<F> {
    pub fn new() -> Self {
        Ctx { g: Graph::new(), bindings: Vec::new(), trainable: true }
    }

    /// Binds a parameter tensor under `name`; trainable unless inside a
    /// frozen scope.
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor<F>) -> NodeId {
        let id = self.g.leaf(t.clone(), self.trainable);
        if self.trainable {
            self.bindings.push((name.into(), id));
        }
        id
    }

    /// Runs `f` with parameter binding forced frozen.
    pub fn frozen<R>(&mut self, f: impl FnOnce(&mut Self) -> R) -> R {
        self.with_trainable(false, f)
    }

    /// Runs `f` with parameter trainability set to `trainable` (restored on exit).
    pub fn with_trainable<R>(&mut self, trainable: bool, f: impl FnOnce(&mut Self) -> R) -> R {
        let prev = self.trainable;
        self.trainable = prev && trainable;
        let r = f(self);
        self.trainable = prev;
        r
    }

    pub fn bindings(&self) -> &[(String, NodeId)] {
        &self.bindings
    }
}

/// Visits `(name, tensor)` pairs of a module, immutably.
pub type Visit<'a, F> = &'a mut dyn FnMut(String, &Tensor<F>);
/// Visits `(name, tensor)` pairs of a module, mutably.
pub type VisitMut<'a, F> = &'a mut dyn FnMut(String, &mut Tensor<F>);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv2d<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn init(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::randn([c_out, c_in, k, k], rng).map(|v| v * s(std));
        Conv2d { w, b: Tensor::zeros([c_out]), stride, pad }
    }

    /// All-zero weights and biases (fusion layers, output heads).
    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d { w: Tensor::zeros([c_out, c_in, k, k]), b: Tensor::zeros([c_out]), stride, pad }
    }

    pub fn fwd(&self, cx: &mut Ctx<F>, name: &str, x: NodeId) -> NodeId {
        let w = cx.param(format!("{name}.w"), &self.w);
        let b = cx.param(format!("{name}.b"), &self.b);
        cx.g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn visit(&self, name: &str, f: Visit<F>) {
        f(format!("{name}.w"), &self.w);
        f(format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMut<F>) {
        f(format!("{name}.w"), &mut self.w);
        f(format!("{name}.b"), &mut self.b);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<F: Scalar> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let w = Tensor::randn([d_out, d_in], rng).map(|v| v * s(std));
        Linear { w, b: Tensor::zeros([d_out]) }
    }

    pub fn fwd(&self, cx: &mut Ctx<F>, name: &str, x: NodeId) -> NodeId {
        let w = cx.param(format!("{name}.w"), &self.w);
        let b = cx.param(format!("{name}.b"), &self.b);
        cx.g.linear(x, w, Some(b))
    }

    pub fn visit(&self, name: &str, f: Visit<F>) {
        f(format!("{name}.w"), &self.w);
        f(format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMut<F>) {
        f(format!("{name}.w"), &mut self.w);
        f(format!("{name}.b"), &mut self.b);
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub groups: usize,
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels {channels} vs groups {groups}");
        GroupNorm { gamma: Tensor::full([channels], F::one()), beta: Tensor::zeros([channels]), groups }
    }

    pub fn fwd(&self, cx: &mut Ctx<F>, name: &str, x: NodeId) -> NodeId {
        let gamma = cx.param(format!("{name}.gamma"), &self.gamma);
        let beta = cx.param(format!("{name}.beta"), &self.beta);
        cx.g.group_norm(x, gamma, beta, self.groups, s(1e-5))
    }

    pub fn visit(&self, name: &str, f: Visit<F>) {
        f(format!("{name}.gamma"), &self.gamma);
        f(format!("{name}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMut<F>) {
        f(format!("{name}.gamma"), &mut self.gamma);
        f(format!("{name}.beta"), &mut self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct Embedding<F: Scalar> {
    pub w: Tensor<F>,
}

impl<F: Scalar> Embedding<F> {
    pub fn init(rng: &mut impl Rng, vocab: usize, dim: usize) -> Self {
        Embedding { w: Tensor::randn([vocab, dim], rng).map(|v| v * s(0.1)) }
    }

    pub fn fwd(&self, cx: &mut Ctx<F>, name: &str, indices: &[usize]) -> NodeId {
        let w = cx.param(format!("{name}.w"), &self.w);
        cx.g.embedding(w, indices.to_vec())
    }

    pub fn visit(&self, name: &str, f: Visit<F>) {
        f(format!("{name}.w"), &self.w);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMut<F>) {
        f(format!("{name}.w"), &mut self.w);
    }
}

/// Residual block with per-sample conditioning injected as channel biases.
#[derive(Clone, Debug)]
pub struct ResBlock<F: Scalar> {
    pub norm1: GroupNorm<F>,
    pub conv1: Conv2d<F>,
    pub cond: Linear<F>,
    pub norm2: GroupNorm<F>,
    pub conv2: Conv2d<F>,
    pub skip: Option<Conv2d<F>>,
}

impl<F: Scalar> ResBlock<F> {
    pub fn init(rng: &mut impl Rng, c_in: usize, c_out: usize, cond_dim: usize, groups: usize) -> Self {
        ResBlock {
            norm1: GroupNorm::new(c_in, groups),
            conv1: Conv2d::init(rng, c_in, c_out, 3, 1, 1),
            cond: Linear::init(rng, cond_dim, c_out),
            norm2: GroupNorm::new(c_out, groups),
            conv2: Conv2d::init(rng, c_out, c_out, 3, 1, 1),
            skip: (c_in != c_out).then(|| Conv2d::init(rng, c_in, c_out, 1, 1, 0)),
        }
    }

    pub fn fwd(&self, cx: &mut Ctx<F>, name: &str, x: NodeId, cond: NodeId) -> NodeId {
        let h = self.norm1.fwd(cx, &format!("{name}.norm1"), x);
        let h = cx.g.silu(h);
        let h = self.conv1.fwd(cx, &format!("{name}.conv1"), h);
        let c = cx.g.silu(cond);
        let c = self.cond.fwd(cx, &format!("{name}.cond"), c);
        let h = cx.g.add_bias_nc(h, c);
        let h = self.norm2.fwd(cx, &format!("{name}.norm2"), h);
        let h = cx.g.silu(h);
        let h = self.conv2.fwd(cx, &format!("{name}.conv2"), h);
        let sk = match &self.skip {
            Some(conv) => conv.fwd(cx, &format!("{name}.skip"), x),
            None => x,
        };
        cx.g.add(h, sk)
    }

    pub fn visit(&self, name: &str, f: Visit<F>) {
        self.norm1.visit(&format!("{name}.norm1"), f);
        self.conv1.visit(&format!("{name}.conv1"), f);
        self.cond.visit(&format!("{name}.cond"), f);
        self.norm2.visit(&format!("{name}.norm2"), f);
        self.conv2.visit(&format!("{name}.conv2"), f);
        if let Some(sk) = &self.skip {
            sk.visit(&format!("{name}.skip"), f);
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMut<F>) {
        self.norm1.visit_mut(&format!("{name}.norm1"), f);
        self.conv1.visit_mut(&format!("{name}.conv1"), f);
        self.cond.visit_mut(&format!("{name}.cond"), f);
        self.norm2.visit_mut(&format!("{name}.norm2"), f);
        self.conv2.visit_mut(&format!("{name}.conv2"), f);
        if let Some(sk) = &mut self.skip {
            sk.visit_mut(&format!("{name}.skip"), f);
        }
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention<F: Scalar> {
    pub norm: GroupNorm<F>,
    pub q: Conv2d<F>,
    pub k: Conv2d<F>,
    pub v: Conv2d<F>,
    pub proj: Conv2d<F>,
    channels: usize,
}

impl<F: Scalar> SelfAttention<F> {
    pub fn init(rng: &mut impl Rng, channels: usize, groups: usize) -> Self {
        SelfAttention {
            norm: GroupNorm::new(channels, groups),
            q: Conv2d::init(rng, channels, channels, 1, 1, 0),
            k: Conv2d::init(rng, channels, channels, 1, 1, 0),
            v: Conv2d::init(rng, channels, channels, 1, 1, 0),
            proj: Conv2d::init(rng, channels, channels, 1, 1, 0),
            channels,
        }
    }

    pub fn fwd(&self, cx: &mut Ctx<F>, name: &str, x: NodeId) -> NodeId {
        let sh = cx.g.shape(x).to_vec();
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        debug_assert_eq!(c, self.channels);
        let hn = self.norm.fwd(cx, &format!("{name}.norm"), x);
        let q = self.q.fwd(cx, &format!("{name}.q"), hn);
        let k = self.k.fwd(cx, &format!("{name}.k"), hn);
        let v = self.v.fwd(cx, &format!("{name}.v"), hn);
        let qr = cx.g.reshape(q, [n, c, h * w]);
        let kr = cx.g.reshape(k, [n, c, h * w]);
        let vr = cx.g.reshape(v, [n, c, h * w]);
        // scores (n, hw, hw) = q^T k / sqrt(c)
        let scores = cx.g.bmm(qr, kr, true, false);
        let scaled = cx.g.mul_scalar(scores, s(1.0 / (c as f64).sqrt()));
        let attn = cx.g.softmax(scaled);
        // out (n, c, hw) = v attn^T
        let out = cx.g.bmm(vr, attn, false, true);
        let out = cx.g.reshape(out, [n, c, h, w]);
        let out = self.proj.fwd(cx, &format!("{name}.proj"), out);
        cx.g.add(out, x)
    }

    pub fn visit(&self, name: &str, f: Visit<F>) {
        self.norm.visit(&format!("{name}.norm"), f);
        self.q.visit(&format!("{name}.q"), f);
        self.k.visit(&format!("{name}.k"), f);
        self.v.visit(&format!("{name}.v"), f);
        self.proj.visit(&format!("{name}.proj"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMut<F>) {
        self.norm.visit_mut(&format!("{name}.norm"), f);
        self.q.visit_mut(&format!("{name}.q"), f);
        self.k.visit_mut(&format!("{name}.k"), f);
        self.v.visit_mut(&format!("{name}.v"), f);
        self.proj.visit_mut(&format!("{name}.proj"), f);
    }
}

/// Sinusoidal timestep features (parameter-free, shared by model and probes).
pub fn time_features<F: Scalar>(ts: &[usize], dim: usize) -> Tensor<F> {
    assert!(dim >= 2 && dim % 2 == 0, "time feature dim must be even and >= 2");
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            out.push(s((t * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000.0f64.ln()) * i as f64 / half as f64).exp();
            out.push(s((t * freq).cos()));
        }
    }
    Tensor::new([ts.len(), dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn frozen_scope_binds_constants() {
        let mut rng = stream(1, "nn", 0);
        let lin = Linear::<f64>::init(&mut rng, 3, 2);
        let mut cx = Ctx::new();
        let x = cx.g.constant(Tensor::randn([1, 3], &mut rng));
        let _ = lin.fwd(&mut cx, "a", x);
        cx.frozen(|cx| {
            let _ = lin.fwd(cx, "b", x);
        });
        let names: Vec<&str> = cx.bindings().iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["a.w", "a.b"]);
    }

    #[test]
    fn resblock_shapes() {
        let mut rng = stream(2, "nn", 0);
        let rb = ResBlock::<f64>::init(&mut rng, 4, 8, 16, 2);
        let mut cx = Ctx::new();
        let x = cx.g.constant(Tensor::randn([2, 4, 6, 6], &mut rng));
        let cond = cx.g.constant(Tensor::randn([2, 16], &mut rng));
        let y = rb.fwd(&mut cx, "rb", x, cond);
        assert_eq!(cx.g.shape(y), &[2, 8, 6, 6]);
    }

    #[test]
    fn attention_preserves_shape() {
        let mut rng = stream(3, "nn", 0);
        let at = SelfAttention::<f64>::init(&mut rng, 8, 4);
        let mut cx = Ctx::new();
        let x = cx.g.constant(Tensor::randn([2, 8, 4, 4], &mut rng));
        let y = at.fwd(&mut cx, "at", x);
        assert_eq!(cx.g.shape(y), &[2, 8, 4, 4]);
    }

    #[test]
    fn time_features_are_bounded_and_distinct() {
        let tf = time_features::<f64>(&[1, 500, 999], 16);
        assert_eq!(tf.shape(), &[3, 16]);
        assert!(tf.data().iter().all(|v| v.abs() <= 1.0));
        let row = |i: usize| &tf.data()[i * 16..(i + 1) * 16];
        assert_ne!(row(0), row(1));
        assert_ne!(row(1), row(2));
    }
}
