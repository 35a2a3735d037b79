//! The miniature class-conditional UNet noise predictor with decoder feature
//! taps, and the zero-convolution control branch.
//!
//! The control branch duplicates the base encoder + middle block, embeds the
//! control map into the stem activation, and injects its per-level outputs
//! into the base decoder's skip connections (and middle output) through
//! 1x1 fusion convolutions that start at exactly zero. At initialization the
//! controlled forward therefore equals the base forward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::nn::{
    time_features, Conv2d, Ctx, Embedding, GroupNorm, Linear, ResBlock, SelfAttention, Visit,
    VisitMut,
};
use crate::scalar::Scalar;
use crate::schedule::NoisePredictor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapKind {
    SelfAttnOut,
    ConvOut,
}

impl std::fmt::Display for TapKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TapKind::SelfAttnOut => write!(f, "self_attn_out"),
            TapKind::ConvOut => write!(f, "conv_out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    /// Levels carrying self-attention (0 = full resolution).
    pub attention_levels: Vec<usize>,
    /// Real class count; the null-condition index is `num_classes`.
    pub num_classes: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
    pub resolution: usize,
    /// Which decoder features the bundle exposes.
    pub tap_kind: TapKind,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            base_width: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            num_classes: crate::data::NUM_CLASSES,
            time_dim: 64,
            norm_groups: 8,
            resolution: 32,
            tap_kind: TapKind::SelfAttnOut,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_multipliers[level]
    }

    pub fn null_label(&self) -> usize {
        self.num_classes
    }

    /// Spatial resolution at a pyramid level.
    pub fn level_resolution(&self, level: usize) -> usize {
        self.resolution >> level
    }

    /// Decoder levels exposed as taps, deepest first.
    pub fn tap_levels(&self) -> Vec<usize> {
        let mut levels: Vec<usize> = match self.tap_kind {
            TapKind::SelfAttnOut => self.attention_levels.clone(),
            TapKind::ConvOut => (0..self.levels()).collect(),
        };
        levels.sort_unstable_by(|a, b| b.cmp(a));
        levels.dedup();
        levels
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels < 2 {
            return Err(Error::Config("model.channel_multipliers needs >= 2 levels".into()));
        }
        if self.resolution % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "model.resolution {} not divisible by 2^{}",
                self.resolution,
                levels - 1
            )));
        }
        if self.attention_levels.is_empty() {
            return Err(Error::Config(
                "model.attention_levels must name at least one level (attention taps need one)"
                    .into(),
            ));
        }
        if self.attention_levels.iter().any(|&l| l >= levels) {
            return Err(Error::Config("model.attention_levels out of range".into()));
        }
        for l in 0..levels {
            if self.width(l) % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "model.norm_groups {} does not divide width {}",
                    self.norm_groups,
                    self.width(l)
                )));
            }
        }
        if self.time_dim < 4 || self.time_dim % 2 != 0 {
            return Err(Error::Config("model.time_dim must be even and >= 4".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("model.num_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Small configuration used by fast tests.
    pub fn tiny() -> Self {
        UNetConfig {
            in_channels: 3,
            base_width: 8,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![1],
            num_classes: crate::data::NUM_CLASSES,
            time_dim: 16,
            norm_groups: 4,
            resolution: 8,
            tap_kind: TapKind::SelfAttnOut,
        }
    }
}

/// One tapped decoder feature map.
#[derive(Debug)]
pub struct Tap {
    pub layer_id: String,
    pub kind: TapKind,
    pub level: usize,
    pub node: NodeId,
}

/// Decoder features from one forward pass, with per-sample timesteps.
#[derive(Debug)]
pub struct FeatureBundle {
    pub ts: Vec<usize>,
    pub taps: Vec<Tap>,
}

struct LevelBlock<F: Scalar> {
    res: ResBlock<F>,
    attn: Option<SelfAttention<F>>,
}

impl<F: Scalar> LevelBlock<F> {
    fn init(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        cond_dim: usize,
        groups: usize,
        attn: bool,
    ) -> Self {
        LevelBlock {
            res: ResBlock::init(rng, c_in, c_out, cond_dim, groups),
            attn: attn.then(|| SelfAttention::init(rng, c_out, groups)),
        }
    }

    fn fwd(&self, cx: &mut Ctx<F>, name: &str, x: NodeId, cond: NodeId) -> (NodeId, NodeId) {
        let conv_out = self.res.fwd(cx, &format!("{name}.res"), x, cond);
        let out = match &self.attn {
            Some(at) => at.fwd(cx, &format!("{name}.attn"), conv_out),
            None => conv_out,
        };
        (out, conv_out)
    }

    fn visit(&self, name: &str, f: Visit<F>) {
        self.res.visit(&format!("{name}.res"), f);
        if let Some(at) = &self.attn {
            at.visit(&format!("{name}.attn"), f);
        }
    }

    fn visit_mut(&mut self, name: &str, f: VisitMut<F>) {
        self.res.visit_mut(&format!("{name}.res"), f);
        if let Some(at) = &mut self.attn {
            at.visit_mut(&format!("{name}.attn"), f);
        }
    }
}

pub struct UNet<F: Scalar> {
    pub cfg: UNetConfig,
    stem: Conv2d<F>,
    time1: Linear<F>,
    time2: Linear<F>,
    class_emb: Embedding<F>,
    enc: Vec<LevelBlock<F>>,
    downs: Vec<Conv2d<F>>,
    mid1: ResBlock<F>,
    mid_attn: SelfAttention<F>,
    mid2: ResBlock<F>,
    dec: Vec<LevelBlock<F>>,
    ups: Vec<Conv2d<F>>,
    out_norm: GroupNorm<F>,
    out_conv: Conv2d<F>,
}

impl<F: Scalar> UNet<F> {
    pub fn init(cfg: UNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        let cond = cfg.time_dim;
        let g = cfg.norm_groups;

        let stem = Conv2d::init(rng, cfg.in_channels, cfg.width(0), 3, 1, 1);
        let time1 = Linear::init(rng, cfg.time_dim, cond);
        let time2 = Linear::init(rng, cond, cond);
        let class_emb = Embedding::init(rng, cfg.num_classes + 1, cond);

        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for l in 0..levels {
            let w = cfg.width(l);
            enc.push(LevelBlock::init(rng, w, w, cond, g, cfg.attention_levels.contains(&l)));
            if l + 1 < levels {
                downs.push(Conv2d::init(rng, w, cfg.width(l + 1), 3, 2, 1));
            }
        }
        let wl = cfg.width(levels - 1);
        let mid1 = ResBlock::init(rng, wl, wl, cond, g);
        let mid_attn = SelfAttention::init(rng, wl, g);
        let mid2 = ResBlock::init(rng, wl, wl, cond, g);

        let mut dec = Vec::new();
        let mut ups = Vec::new();
        for l in (0..levels).rev() {
            let w = cfg.width(l);
            dec.push(LevelBlock::init(rng, 2 * w, w, cond, g, cfg.attention_levels.contains(&l)));
            if l > 0 {
                ups.push(Conv2d::init(rng, w, cfg.width(l - 1), 3, 1, 1));
            }
        }
        let out_norm = GroupNorm::new(cfg.width(0), g);
        let out_conv = Conv2d::init(rng, cfg.width(0), cfg.in_channels, 3, 1, 1);

        Ok(UNet {
            cfg,
            stem,
            time1,
            time2,
            class_emb,
            enc,
            downs,
            mid1,
            mid_attn,
            mid2,
            dec,
            ups,
            out_norm,
            out_conv,
        })
    }

    fn check_inputs(&self, x_shape: &[usize], ts: &[usize], labels: &[usize]) -> Result<()> {
        let r = self.cfg.resolution;
        if x_shape.len() != 4 || x_shape[1] != self.cfg.in_channels || x_shape[2] != r || x_shape[3] != r
        {
            return Err(Error::Shape(format!(
                "input {:?} incompatible with model ({} x {r} x {r})",
                x_shape, self.cfg.in_channels
            )));
        }
        if x_shape[0] != ts.len() || ts.len() != labels.len() {
            return Err(Error::Shape(format!(
                "batch mismatch: x {} / t {} / labels {}",
                x_shape[0],
                ts.len(),
                labels.len()
            )));
        }
        for &l in labels {
            if l > self.cfg.num_classes {
                return Err(Error::UnknownLabel { label: l, num_classes: self.cfg.num_classes });
            }
        }
        Ok(())
    }

    /// Conditioning vector `(N, time_dim)`: embedded timestep plus class embedding.
    fn cond_vec(&self, cx: &mut Ctx<F>, ts: &[usize], labels: &[usize]) -> NodeId {
        let tf = cx.g.constant(time_features(ts, self.cfg.time_dim));
        let h = self.time1.fwd(cx, "unet.time1", tf);
        let h = cx.g.silu(h);
        let h = self.time2.fwd(cx, "unet.time2", h);
        let ce = self.class_emb.fwd(cx, "unet.class_emb", labels);
        cx.g.add(h, ce)
    }

    /// Encoder: per-level outputs (the decoder's skip inputs) plus the
    /// bottom-level activation.
    fn encode(&self, cx: &mut Ctx<F>, x: NodeId, cond: NodeId) -> (Vec<NodeId>, NodeId) {
        let mut h = self.stem.fwd(cx, "unet.stem", x);
        let mut skips = Vec::with_capacity(self.enc.len());
        for (l, block) in self.enc.iter().enumerate() {
            let (out, _) = block.fwd(cx, &format!("unet.enc{l}"), h, cond);
            skips.push(out);
            h = if l < self.downs.len() {
                self.downs[l].fwd(cx, &format!("unet.down{l}"), out)
            } else {
                out
            };
        }
        (skips, h)
    }

    fn middle(&self, cx: &mut Ctx<F>, h: NodeId, cond: NodeId) -> NodeId {
        let h = self.mid1.fwd(cx, "unet.mid1", h, cond);
        let h = self.mid_attn.fwd(cx, "unet.mid_attn", h);
        self.mid2.fwd(cx, "unet.mid2", h, cond)
    }

    /// Decoder over (possibly fused) skips; returns noise prediction and taps.
    fn decode(
        &self,
        cx: &mut Ctx<F>,
        mut h: NodeId,
        skips: &[NodeId],
        cond: NodeId,
        ts: &[usize],
        collect_taps: bool,
    ) -> (NodeId, FeatureBundle) {
        let levels = self.cfg.levels();
        let tap_levels = self.cfg.tap_levels();
        let mut taps = Vec::new();
        for (di, l) in (0..levels).rev().enumerate() {
            let cat = cx.g.concat_c(&[h, skips[l]]);
            let (out, conv_out) = self.dec[di].fwd(cx, &format!("unet.dec{l}"), cat, cond);
            if collect_taps && tap_levels.contains(&l) {
                let (kind, node) = match self.cfg.tap_kind {
                    TapKind::SelfAttnOut => (TapKind::SelfAttnOut, out),
                    TapKind::ConvOut => (TapKind::ConvOut, conv_out),
                };
                taps.push(Tap { layer_id: format!("dec{l}.{kind}"), kind, level: l, node });
            }
            h = if l > 0 {
                let up = cx.g.nearest_up2(out);
                self.ups[di].fwd(cx, &format!("unet.up{l}"), up)
            } else {
                out
            };
        }
        let h = self.out_norm.fwd(cx, "unet.out_norm", h);
        let h = cx.g.silu(h);
        let eps = self.out_conv.fwd(cx, "unet.out_conv", h);
        (eps, FeatureBundle { ts: ts.to_vec(), taps })
    }

    /// Base forward pass: noise prediction plus decoder feature taps.
    pub fn forward_eps(
        &self,
        cx: &mut Ctx<F>,
        x_t: NodeId,
        ts: &[usize],
        labels: &[usize],
        collect_taps: bool,
    ) -> Result<(NodeId, FeatureBundle)> {
        self.check_inputs(cx.g.shape(x_t), ts, labels)?;
        let cond = self.cond_vec(cx, ts, labels);
        let (skips, h) = self.encode(cx, x_t, cond);
        let h = self.middle(cx, h, cond);
        Ok(self.decode(cx, h, &skips, cond, ts, collect_taps))
    }

    pub fn visit_params(&self, f: Visit<F>) {
        self.stem.visit("unet.stem", f);
        self.time1.visit("unet.time1", f);
        self.time2.visit("unet.time2", f);
        self.class_emb.visit("unet.class_emb", f);
        for (l, b) in self.enc.iter().enumerate() {
            b.visit(&format!("unet.enc{l}"), f);
        }
        for (l, d) in self.downs.iter().enumerate() {
            d.visit(&format!("unet.down{l}"), f);
        }
        self.mid1.visit("unet.mid1", f);
        self.mid_attn.visit("unet.mid_attn", f);
        self.mid2.visit("unet.mid2", f);
        let levels = self.cfg.levels();
        for (di, b) in self.dec.iter().enumerate() {
            b.visit(&format!("unet.dec{}", levels - 1 - di), f);
        }
        for (di, u) in self.ups.iter().enumerate() {
            u.visit(&format!("unet.up{}", levels - 1 - di), f);
        }
        self.out_norm.visit("unet.out_norm", f);
        self.out_conv.visit("unet.out_conv", f);
    }

    pub fn visit_params_mut(&mut self, f: VisitMut<F>) {
        self.stem.visit_mut("unet.stem", f);
        self.time1.visit_mut("unet.time1", f);
        self.time2.visit_mut("unet.time2", f);
        self.class_emb.visit_mut("unet.class_emb", f);
        for (l, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&format!("unet.enc{l}"), f);
        }
        for (l, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&format!("unet.down{l}"), f);
        }
        self.mid1.visit_mut("unet.mid1", f);
        self.mid_attn.visit_mut("unet.mid_attn", f);
        self.mid2.visit_mut("unet.mid2", f);
        let levels = self.cfg.levels();
        for (di, b) in self.dec.iter_mut().enumerate() {
            b.visit_mut(&format!("unet.dec{}", levels - 1 - di), f);
        }
        for (di, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&format!("unet.up{}", levels - 1 - di), f);
        }
        self.out_norm.visit_mut("unet.out_norm", f);
        self.out_conv.visit_mut("unet.out_conv", f);
    }
}

/// Duplicated-encoder control branch with zero-initialized fusion layers.
pub struct ControlBranch<F: Scalar> {
    embed1: Conv2d<F>,
    embed2: Conv2d<F>,
    stem: Conv2d<F>,
    enc: Vec<LevelBlock<F>>,
    downs: Vec<Conv2d<F>>,
    mid1: ResBlock<F>,
    mid_attn: SelfAttention<F>,
    mid2: ResBlock<F>,
    /// 1x1 fusion conv per encoder level, zero-initialized.
    zero_skips: Vec<Conv2d<F>>,
    /// 1x1 fusion conv on the middle output, zero-initialized.
    zero_mid: Conv2d<F>,
}

impl<F: Scalar> ControlBranch<F> {
    /// Duplicates the base encoder/middle weights; fusion layers start at zero.
    pub fn from_base(base: &UNet<F>, rng: &mut impl Rng) -> Self {
        let cfg = &base.cfg;
        let w0 = cfg.width(0);
        let half = (w0 / 2).max(1);
        let levels = cfg.levels();
        ControlBranch {
            embed1: Conv2d::init(rng, 1, half, 3, 1, 1),
            embed2: Conv2d::init(rng, half, w0, 3, 1, 1),
            stem: base.stem.clone(),
            enc: base
                .enc
                .iter()
                .map(|b| LevelBlock { res: b.res.clone(), attn: b.attn.clone() })
                .collect(),
            downs: base.downs.clone(),
            mid1: base.mid1.clone(),
            mid_attn: base.mid_attn.clone(),
            mid2: base.mid2.clone(),
            zero_skips: (0..levels).map(|l| Conv2d::zeros(cfg.width(l), cfg.width(l), 1, 1, 0)).collect(),
            zero_mid: Conv2d::zeros(cfg.width(levels - 1), cfg.width(levels - 1), 1, 1, 0),
        }
    }

    /// True while every fusion layer is exactly zero.
    pub fn fusion_is_zero(&self) -> bool {
        let mut all = true;
        let mut check = |_: String, t: &Tensor<F>| {
            if t.data().iter().any(|&v| v != F::zero()) {
                all = false;
            }
        };
        for (l, z) in self.zero_skips.iter().enumerate() {
            z.visit(&format!("ctrl.zero{l}"), &mut check);
        }
        self.zero_mid.visit("ctrl.zero_mid", &mut check);
        all
    }

    /// Residuals to add to the base decoder skips and middle output.
    fn residuals(
        &self,
        cx: &mut Ctx<F>,
        x_t: NodeId,
        control: NodeId,
        cond: NodeId,
    ) -> (Vec<NodeId>, NodeId) {
        let e = self.embed1.fwd(cx, "ctrl.embed1", control);
        let e = cx.g.silu(e);
        let e = self.embed2.fwd(cx, "ctrl.embed2", e);
        let st = self.stem.fwd(cx, "ctrl.stem", x_t);
        let mut h = cx.g.add(st, e);

        let mut raw = Vec::with_capacity(self.enc.len());
        for (l, block) in self.enc.iter().enumerate() {
            let (out, _) = block.fwd(cx, &format!("ctrl.enc{l}"), h, cond);
            raw.push(out);
            h = if l < self.downs.len() {
                self.downs[l].fwd(cx, &format!("ctrl.down{l}"), out)
            } else {
                out
            };
        }
        let h = self.mid1.fwd(cx, "ctrl.mid1", h, cond);
        let h = self.mid_attn.fwd(cx, "ctrl.mid_attn", h);
        let h = self.mid2.fwd(cx, "ctrl.mid2", h, cond);

        let skips = raw
            .iter()
            .enumerate()
            .map(|(l, &r)| self.zero_skips[l].fwd(cx, &format!("ctrl.zero{l}"), r))
            .collect();
        let mid = self.zero_mid.fwd(cx, "ctrl.zero_mid", h);
        (skips, mid)
    }

    pub fn visit_params(&self, f: Visit<F>) {
        self.embed1.visit("ctrl.embed1", f);
        self.embed2.visit("ctrl.embed2", f);
        self.stem.visit("ctrl.stem", f);
        for (l, b) in self.enc.iter().enumerate() {
            b.visit(&format!("ctrl.enc{l}"), f);
        }
        for (l, d) in self.downs.iter().enumerate() {
            d.visit(&format!("ctrl.down{l}"), f);
        }
        self.mid1.visit("ctrl.mid1", f);
        self.mid_attn.visit("ctrl.mid_attn", f);
        self.mid2.visit("ctrl.mid2", f);
        for (l, z) in self.zero_skips.iter().enumerate() {
            z.visit(&format!("ctrl.zero{l}"), f);
        }
        self.zero_mid.visit("ctrl.zero_mid", f);
    }

    pub fn visit_params_mut(&mut self, f: VisitMut<F>) {
        self.embed1.visit_mut("ctrl.embed1", f);
        self.embed2.visit_mut("ctrl.embed2", f);
        self.stem.visit_mut("ctrl.stem", f);
        for (l, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&format!("ctrl.enc{l}"), f);
        }
        for (l, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&format!("ctrl.down{l}"), f);
        }
        self.mid1.visit_mut("ctrl.mid1", f);
        self.mid_attn.visit_mut("ctrl.mid_attn", f);
        self.mid2.visit_mut("ctrl.mid2", f);
        for (l, z) in self.zero_skips.iter_mut().enumerate() {
            z.visit_mut(&format!("ctrl.zero{l}"), f);
        }
        self.zero_mid.visit_mut("ctrl.zero_mid", f);
    }
}

/// Per-part trainability of a controlled forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Trainability {
    pub base: bool,
    pub branch: bool,
}

impl Trainability {
    pub const FROZEN: Trainability = Trainability { base: false, branch: false };
    pub const BRANCH_ONLY: Trainability = Trainability { base: false, branch: true };
    pub const BASE_ONLY: Trainability = Trainability { base: true, branch: false };
}

/// Controlled forward pass: base UNet plus control-branch residuals injected
/// into the decoder skips and middle output. Taps come from the base decoder.
pub fn forward_with_control<F: Scalar>(
    cx: &mut Ctx<F>,
    unet: &UNet<F>,
    branch: &ControlBranch<F>,
    x_t: NodeId,
    ts: &[usize],
    labels: &[usize],
    control: NodeId,
    collect_taps: bool,
    train: Trainability,
) -> Result<(NodeId, FeatureBundle)> {
    unet.check_inputs(cx.g.shape(x_t), ts, labels)?;
    let csh = cx.g.shape(control).to_vec();
    let r = unet.cfg.resolution;
    if csh.len() != 4 || csh[0] != ts.len() || csh[1] != 1 || csh[2] != r || csh[3] != r {
        return Err(Error::Shape(format!(
            "control map {csh:?} incompatible with model (N x 1 x {r} x {r})"
        )));
    }

    let cond = cx.with_trainable(train.base, |cx| unet.cond_vec(cx, ts, labels));
    let (skips, h) = cx.with_trainable(train.base, |cx| unet.encode(cx, x_t, cond));
    let mid = cx.with_trainable(train.base, |cx| unet.middle(cx, h, cond));

    let (ctl_skips, ctl_mid) =
        cx.with_trainable(train.branch, |cx| branch.residuals(cx, x_t, control, cond));

    let fused_skips: Vec<NodeId> = skips
        .iter()
        .zip(&ctl_skips)
        .map(|(&sk, &res)| cx.g.add(sk, res))
        .collect();
    let fused_mid = cx.g.add(mid, ctl_mid);

    Ok(cx.with_trainable(train.base, |cx| {
        unet.decode(cx, fused_mid, &fused_skips, cond, ts, collect_taps)
    }))
}

/// Plain (no-grad) base forward; returns the noise prediction tensor.
pub fn predict_eps_base<F: Scalar>(
    unet: &UNet<F>,
    x_t: &Tensor<F>,
    ts: &[usize],
    labels: &[usize],
) -> Result<Tensor<F>> {
    let mut cx = Ctx::new();
    let x = cx.g.constant(x_t.clone());
    let (eps, _) = cx.frozen(|cx| unet.forward_eps(cx, x, ts, labels, false))?;
    Ok(cx.g.value(eps).clone())
}

/// Plain (no-grad) controlled forward.
pub fn predict_eps_controlled<F: Scalar>(
    unet: &UNet<F>,
    branch: &ControlBranch<F>,
    x_t: &Tensor<F>,
    ts: &[usize],
    labels: &[usize],
    control: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut cx = Ctx::new();
    let x = cx.g.constant(x_t.clone());
    let c = cx.g.constant(control.clone());
    let (eps, _) = forward_with_control(
        &mut cx,
        unet,
        branch,
        x,
        ts,
        labels,
        c,
        false,
        Trainability::FROZEN,
    )?;
    Ok(cx.g.value(eps).clone())
}

/// Sampler adapter for the bare UNet (no spatial control).
pub struct BaseSampler<'a, F: Scalar> {
    pub unet: &'a UNet<F>,
}

impl<F: Scalar> NoisePredictor<F> for BaseSampler<'_, F> {
    fn predict_eps(
        &self,
        x_t: &Tensor<F>,
        ts: &[usize],
        labels: &[usize],
        control: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        if control.is_some() {
            return Err(Error::Config("base model takes no control map".into()));
        }
        predict_eps_base(self.unet, x_t, ts, labels)
    }

    fn null_label(&self) -> usize {
        self.unet.cfg.null_label()
    }
}

/// Sampler adapter for the controlled model.
pub struct ControlledSampler<'a, F: Scalar> {
    pub unet: &'a UNet<F>,
    pub branch: &'a ControlBranch<F>,
}

impl<F: Scalar> NoisePredictor<F> for ControlledSampler<'_, F> {
    fn predict_eps(
        &self,
        x_t: &Tensor<F>,
        ts: &[usize],
        labels: &[usize],
        control: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>> {
        let control = control
            .ok_or_else(|| Error::Config("controlled model requires a control map".into()))?;
        predict_eps_controlled(self.unet, self.branch, x_t, ts, labels, control)
    }

    fn null_label(&self) -> usize {
        self.unet.cfg.null_label()
    }
}

/// Concatenated little-endian bytes of all parameters, in visit order.
/// Equality of these buffers is the frozenness check used by the tests.
pub fn param_bytes<F: Scalar>(visit: impl FnOnce(Visit<F>)) -> Vec<u8> {
    let mut out = Vec::new();
    let mut f = |_: String, t: &Tensor<F>| {
        out.extend_from_slice(&t.to_le_bytes());
    };
    visit(&mut f);
    out
}
