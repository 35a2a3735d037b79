//! Timestep-conditioned readout probes: lightweight convolutional heads that
//! reconstruct a control map from tapped decoder features.
//!
//! Per tap, a bottleneck standardizes the channel count; a projection of the
//! sinusoidal timestep features conditions the bottleneck activations; the
//! per-tap maps are upsampled to the control resolution and combined with a
//! learned softmax-weighted sum before a small decoding head with a bounded
//! output.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controls::ControlKind;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::networks::{
    forward_with_control, ControlBranch, FeatureBundle, TapKind, Trainability, UNet, UNetConfig,
};
use crate::nn::{time_features, Conv2d, Ctx, GroupNorm, Linear, Visit, VisitMut};
use crate::opt::{clip_global_norm, Adam, AdamConfig};
use crate::rng::stream;
use crate::scalar::{s, Scalar};
use crate::schedule::{forward_diffuse_batch, NoiseSchedule};
use crate::tensor::Tensor;

/// Static description of one expected tap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapDesc {
    pub layer_id: String,
    pub kind: TapKind,
    pub channels: usize,
    pub resolution: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub taps: Vec<TapDesc>,
    pub bottleneck: usize,
    pub out_resolution: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
    pub control_kind: ControlKind,
}

impl ProbeConfig {
    /// Derives the tap layout from a model configuration.
    pub fn for_model(model: &UNetConfig, control_kind: ControlKind, bottleneck: usize) -> Self {
        let taps = model
            .tap_levels()
            .into_iter()
            .map(|l| TapDesc {
                layer_id: format!("dec{l}.{}", model.tap_kind),
                kind: model.tap_kind,
                channels: model.width(l),
                resolution: model.level_resolution(l),
            })
            .collect();
        ProbeConfig {
            taps,
            bottleneck,
            out_resolution: model.resolution,
            time_dim: model.time_dim,
            norm_groups: 4.min(bottleneck),
            control_kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("probe needs at least one tap".into()));
        }
        for tap in &self.taps {
            if self.out_resolution % tap.resolution != 0 {
                return Err(Error::Config(format!(
                    "tap {} resolution {} does not divide output resolution {}",
                    tap.layer_id, tap.resolution, self.out_resolution
                )));
            }
        }
        if self.bottleneck % self.norm_groups != 0 {
            return Err(Error::Config("probe.bottleneck must be divisible by norm groups".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct TapBlock<F: Scalar> {
    reduce: Conv2d<F>,
    tproj: Linear<F>,
    norm: GroupNorm<F>,
    conv: Conv2d<F>,
}

#[derive(Debug)]
pub struct ProbeModel<F: Scalar> {
    pub cfg: ProbeConfig,
    blocks: Vec<TapBlock<F>>,
    /// One logit per tap; softmax-normalized aggregation weights.
    agg_logits: Tensor<F>,
    head1: Conv2d<F>,
    head2: Conv2d<F>,
}

impl<F: Scalar> ProbeModel<F> {
    pub fn init(cfg: ProbeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.bottleneck;
        let blocks = cfg
            .taps
            .iter()
            .map(|tap| TapBlock {
                reduce: Conv2d::init(rng, tap.channels, b, 1, 1, 0),
                tproj: Linear::init(rng, cfg.time_dim, b),
                norm: GroupNorm::new(b, cfg.norm_groups),
                conv: Conv2d::init(rng, b, b, 3, 1, 1),
            })
            .collect();
        let n_taps = cfg.taps.len();
        Ok(ProbeModel {
            cfg,
            blocks,
            agg_logits: Tensor::zeros([n_taps]),
            head1: Conv2d::init(rng, b, b, 3, 1, 1),
            head2: Conv2d::init(rng, b, 1, 3, 1, 1),
        })
    }

    /// Softmax-normalized aggregation weights (sum to 1).
    pub fn aggregation_weights(&self) -> Vec<F> {
        let mx = self.agg_logits.data().iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<F> = self.agg_logits.data().iter().map(|&v| (v - mx).exp()).collect();
        let sum: F = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    fn check_bundle(&self, cx: &Ctx<F>, features: &FeatureBundle) -> Result<()> {
        if features.taps.len() != self.cfg.taps.len() {
            return Err(Error::TapMismatch(format!(
                "probe expects {} taps, bundle has {}",
                self.cfg.taps.len(),
                features.taps.len()
            )));
        }
        for (expect, got) in self.cfg.taps.iter().zip(&features.taps) {
            if expect.layer_id != got.layer_id {
                return Err(Error::TapMismatch(format!(
                    "expected tap {}, bundle has {}",
                    expect.layer_id, got.layer_id
                )));
            }
            let sh = cx.g.shape(got.node);
            if sh[1] != expect.channels {
                return Err(Error::TapMismatch(format!(
                    "tap {}: expected {} channels, bundle has {}",
                    expect.layer_id, expect.channels, sh[1]
                )));
            }
            if sh[2] != expect.resolution || sh[3] != expect.resolution {
                return Err(Error::TapMismatch(format!(
                    "tap {}: expected {0}x{0} resolution, bundle has {1}x{2}",
                    expect.resolution, sh[2], sh[3]
                )));
            }
        }
        Ok(())
    }

    /// Predicted control map `(N, 1, R, R)` in [0, 1]. Differentiable with
    /// respect to probe parameters and the tapped feature maps alike.
    pub fn forward(&self, cx: &mut Ctx<F>, features: &FeatureBundle) -> Result<NodeId> {
        self.check_bundle(cx, features)?;
        let tf = cx.g.constant(time_features(&features.ts, self.cfg.time_dim));

        let logits = cx.param("probe.agg", &self.agg_logits);
        let weights = cx.g.softmax(logits);

        let mut acc: Option<NodeId> = None;
        for (i, (block, tap)) in self.blocks.iter().zip(&features.taps).enumerate() {
            let name = format!("probe.tap{i}");
            let h = block.reduce.fwd(cx, &format!("{name}.reduce"), tap.node);
            let tb = block.tproj.fwd(cx, &format!("{name}.tproj"), tf);
            let h = cx.g.add_bias_nc(h, tb);
            let h = block.norm.fwd(cx, &format!("{name}.norm"), h);
            let h = cx.g.silu(h);
            let h = block.conv.fwd(cx, &format!("{name}.conv"), h);
            let factor = self.cfg.out_resolution / cx.g.shape(h)[2];
            let h = if factor > 1 { cx.g.bilinear_up(h, factor) } else { h };
            let w_i = cx.g.gather1(weights, i);
            let h = cx.g.scale_by_node(h, w_i);
            acc = Some(match acc {
                Some(a) => cx.g.add(a, h),
                None => h,
            });
        }
        let h = acc.expect("validated non-empty taps");
        let h = cx.g.silu(h);
        let h = self.head1.fwd(cx, "probe.head1", h);
        let h = cx.g.silu(h);
        let h = self.head2.fwd(cx, "probe.head2", h);
        Ok(cx.g.sigmoid(h))
    }

    pub fn visit_params(&self, f: Visit<F>) {
        for (i, b) in self.blocks.iter().enumerate() {
            let name = format!("probe.tap{i}");
            b.reduce.visit(&format!("{name}.reduce"), f);
            b.tproj.visit(&format!("{name}.tproj"), f);
            b.norm.visit(&format!("{name}.norm"), f);
            b.conv.visit(&format!("{name}.conv"), f);
        }
        f("probe.agg".into(), &self.agg_logits);
        self.head1.visit("probe.head1", f);
        self.head2.visit("probe.head2", f);
    }

    pub fn visit_params_mut(&mut self, f: VisitMut<F>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let name = format!("probe.tap{i}");
            b.reduce.visit_mut(&format!("{name}.reduce"), f);
            b.tproj.visit_mut(&format!("{name}.tproj"), f);
            b.norm.visit_mut(&format!("{name}.norm"), f);
            b.conv.visit_mut(&format!("{name}.conv"), f);
        }
        f("probe.agg".into(), &mut self.agg_logits);
        self.head1.visit_mut("probe.head1", f);
        self.head2.visit_mut("probe.head2", f);
    }
}

/// The frozen model whose features the probe reads.
pub enum FeatureSource<'a, F: Scalar> {
    Base(&'a UNet<F>),
    Controlled(&'a UNet<F>, &'a ControlBranch<F>),
}

impl<F: Scalar> FeatureSource<'_, F> {
    pub fn unet_cfg(&self) -> &UNetConfig {
        match self {
            FeatureSource::Base(u) => &u.cfg,
            FeatureSource::Controlled(u, _) => &u.cfg,
        }
    }

    /// Frozen forward collecting taps; `control` is required for the
    /// controlled source and ignored by the base source.
    pub fn features(
        &self,
        cx: &mut Ctx<F>,
        x_t: NodeId,
        ts: &[usize],
        labels: &[usize],
        control: Option<NodeId>,
    ) -> Result<(NodeId, FeatureBundle)> {
        match self {
            FeatureSource::Base(unet) => {
                cx.frozen(|cx| unet.forward_eps(cx, x_t, ts, labels, true))
            }
            FeatureSource::Controlled(unet, branch) => {
                let control = control.ok_or_else(|| {
                    Error::Config("controlled feature source requires a control map".into())
                })?;
                forward_with_control(
                    cx,
                    unet,
                    branch,
                    x_t,
                    ts,
                    labels,
                    control,
                    true,
                    Trainability::FROZEN,
                )
            }
        }
    }
}

/// Probe prediction from detached feature tensors (no model in the loop).
pub fn probe_forward_plain<F: Scalar>(
    probe: &ProbeModel<F>,
    taps: &[Tensor<F>],
    ts: &[usize],
) -> Result<Tensor<F>> {
    let mut cx = Ctx::new();
    let bundle = FeatureBundle {
        ts: ts.to_vec(),
        taps: taps
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let (layer_id, kind) = match probe.cfg.taps.get(i) {
                    Some(desc) => (desc.layer_id.clone(), desc.kind),
                    None => (format!("surplus{i}"), TapKind::ConvOut),
                };
                crate::networks::Tap { layer_id, kind, level: 0, node: cx.g.constant(t.clone()) }
            })
            .collect(),
    };
    let out = cx.frozen(|cx| probe.forward(cx, &bundle))?;
    Ok(cx.g.value(out).clone())
}

/// End-to-end probe prediction for clean images: noise to `t`, run the frozen
/// source, read the probe. Deterministic given `eps`.
pub fn probe_predict<F: Scalar>(
    source: &FeatureSource<F>,
    probe: &ProbeModel<F>,
    images_net: &Tensor<F>,
    ts: &[usize],
    labels: &[usize],
    control: Option<&Tensor<F>>,
    eps: &Tensor<F>,
    sched: &NoiseSchedule<F>,
) -> Result<Tensor<F>> {
    let x_t = forward_diffuse_batch(images_net, ts, eps, sched);
    let mut cx = Ctx::new();
    let x = cx.g.constant(x_t);
    let c = control.map(|c| cx.g.constant(c.clone()));
    let (_, bundle) = source.features(&mut cx, x, ts, labels, c)?;
    let out = cx.frozen(|cx| probe.forward(cx, &bundle))?;
    Ok(cx.g.value(out).clone())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProbeTrainOpts {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for ProbeTrainOpts {
    fn default() -> Self {
        ProbeTrainOpts { iterations: 2000, batch_size: 8, lr: 1e-3, seed: 0, grad_clip: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeLogRow {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct BucketRmse {
    pub t_lo: usize,
    pub t_hi: usize,
    pub rmse: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ProbeTrainLog {
    pub rows: Vec<ProbeLogRow>,
    pub buckets: Vec<BucketRmse>,
}

pub const TIMESTEP_BUCKETS: usize = 5;

/// Trains a probe against a frozen feature source.
///
/// Per iteration: sample a batch and per-sample `t` uniform in `[1, T]`,
/// noise the images, collect frozen features, minimize MSE between the probe
/// output and the ground-truth control map. The source model receives no
/// gradient. Returns the trained probe plus the loss curve and held-out
/// per-timestep-bucket RMSE.
pub fn train_probe<F: Scalar>(
    source: &FeatureSource<F>,
    train: &Dataset<F>,
    holdout: &Dataset<F>,
    kind: ControlKind,
    mut probe: ProbeModel<F>,
    sched: &NoiseSchedule<F>,
    opts: &ProbeTrainOpts,
) -> Result<(ProbeModel<F>, ProbeTrainLog)> {
    if !train.has_kind(kind) || !holdout.has_kind(kind) {
        return Err(Error::Config(format!("dataset lacks control kind {kind}")));
    }
    if train.is_empty() {
        return Err(Error::Config("probe training needs a non-empty dataset".into()));
    }
    let mut log = ProbeTrainLog::default();
    let mut adam = Adam::new(AdamConfig { lr: opts.lr, ..Default::default() });
    let t_max = sched.t_max();
    let needs_control = matches!(source, FeatureSource::Controlled(..));

    for it in 0..opts.iterations {
        let step = it as u64;
        let mut brng = stream(opts.seed, "probe-batch", step);
        let indices: Vec<usize> =
            (0..opts.batch_size).map(|_| brng.gen_range(0..train.len())).collect();
        let mut trng = stream(opts.seed, "probe-t", step);
        let ts: Vec<usize> = (0..opts.batch_size).map(|_| trng.gen_range(1..=t_max)).collect();

        let (images, controls, labels) = gather_batch(train, &indices, kind);
        let eps = crate::schedule::noise_like(images.shape(), opts.seed, "probe-eps", step);
        let x_t = forward_diffuse_batch(&images, &ts, &eps, sched);

        let mut cx = Ctx::new();
        let x = cx.g.constant(x_t);
        let c_in = needs_control.then(|| cx.g.constant(controls.clone()));
        let (_, bundle) = source.features(&mut cx, x, &ts, &labels, c_in)?;
        let pred = probe.forward(&mut cx, &bundle)?;
        let target = cx.g.constant(controls);
        let loss = cx.g.mse(pred, target);
        let grads = cx.g.backward(loss);

        let mut by_name: HashMap<String, Tensor<F>> = HashMap::new();
        for (name, id) in cx.bindings() {
            by_name.insert(name.clone(), grads.dense(*id, cx.g.shape(*id)));
        }
        clip_global_norm(&mut by_name, opts.grad_clip);
        adam.update(&by_name, |f| probe.visit_params_mut(f));

        log.rows.push(ProbeLogRow { iteration: it, loss: cx.g.value(loss).item().to_f64() });
    }

    log.buckets = validate_probe_buckets(source, &probe, holdout, kind, sched, opts.seed)?;
    Ok((probe, log))
}

/// Held-out RMSE per timestep bucket (uniform bins of `[1, T]`).
pub fn validate_probe_buckets<F: Scalar>(
    source: &FeatureSource<F>,
    probe: &ProbeModel<F>,
    holdout: &Dataset<F>,
    kind: ControlKind,
    sched: &NoiseSchedule<F>,
    seed: u64,
) -> Result<Vec<BucketRmse>> {
    let t_max = sched.t_max();
    let needs_control = matches!(source, FeatureSource::Controlled(..));
    let mut out = Vec::with_capacity(TIMESTEP_BUCKETS);
    let chunk = 8usize;
    for b in 0..TIMESTEP_BUCKETS {
        let t_lo = b * t_max / TIMESTEP_BUCKETS + 1;
        let t_hi = (b + 1) * t_max / TIMESTEP_BUCKETS;
        let mut sq_sum = 0.0f64;
        let mut count = 0usize;
        for (ci, idx_chunk) in (0..holdout.len()).collect::<Vec<_>>().chunks(chunk).enumerate() {
            let (images, controls, labels) = gather_batch(holdout, idx_chunk, kind);
            let mut trng = stream(seed, "probe-val-t", (b * 100_000 + ci) as u64);
            let ts: Vec<usize> =
                idx_chunk.iter().map(|_| trng.gen_range(t_lo..=t_hi)).collect();
            let eps = crate::schedule::noise_like(
                images.shape(),
                seed,
                "probe-val-eps",
                (b * 100_000 + ci) as u64,
            );
            let pred = probe_predict(
                source,
                probe,
                &images,
                &ts,
                &labels,
                needs_control.then_some(&controls),
                &eps,
                sched,
            )?;
            for (&p, &t) in pred.data().iter().zip(controls.data()) {
                let d = p.to_f64() - t.to_f64();
                sq_sum += d * d;
                count += 1;
            }
        }
        out.push(BucketRmse { t_lo, t_hi, rmse: (sq_sum / count.max(1) as f64).sqrt() });
    }
    Ok(out)
}

/// RMSE of the constant predictor that always outputs the dataset-mean
/// control map (the baseline a trained probe must beat).
pub fn constant_predictor_rmse<F: Scalar>(train: &Dataset<F>, holdout: &Dataset<F>, kind: ControlKind) -> f64 {
    let r = train.resolution();
    let mut mean = vec![0.0f64; r * r];
    for smp in &train.samples {
        for (m, &v) in mean.iter_mut().zip(smp.control(kind).values.data()) {
            *m += v.to_f64();
        }
    }
    for m in &mut mean {
        *m /= train.len() as f64;
    }
    let mut sq_sum = 0.0f64;
    let mut count = 0usize;
    for smp in &holdout.samples {
        for (m, &v) in mean.iter().zip(smp.control(kind).values.data()) {
            let d = m - v.to_f64();
            sq_sum += d * d;
            count += 1;
        }
    }
    (sq_sum / count.max(1) as f64).sqrt()
}

/// Batch assembly: images mapped to the network domain `[-1, 1]`, controls as
/// `(N, 1, R, R)` in `[0, 1]`, plus labels.
pub fn gather_batch<F: Scalar>(
    ds: &Dataset<F>,
    indices: &[usize],
    kind: ControlKind,
) -> (Tensor<F>, Tensor<F>, Vec<usize>) {
    let r = ds.resolution();
    let n = indices.len();
    let two = s::<F>(2.0);
    let mut images = Vec::with_capacity(n * 3 * r * r);
    let mut controls = Vec::with_capacity(n * r * r);
    let mut labels = Vec::with_capacity(n);
    for &i in indices {
        let smp = &ds.samples[i];
        images.extend(smp.image.data().iter().map(|&v| two * v - F::one()));
        controls.extend_from_slice(smp.control(kind).values.data());
        labels.push(smp.label);
    }
    (
        Tensor::new([n, 3, r, r], images),
        Tensor::new([n, 1, r, r], controls),
        labels,
    )
}
