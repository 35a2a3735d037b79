//! Training objectives: diffusion loss, cycle-consistency reward loss through
//! the one-step clean-sample estimate, feature-alignment loss through a frozen
//! probe, and their weighted combination.
//!
//! Gated losses use the convention "active while `t <= tau`". Batched calls
//! return `(1/N) * sum_i 1[t_i <= tau] * loss_i`, the Monte-Carlo estimate of
//! the expectation over uniformly sampled timesteps; when no sample is active
//! the term is a constant zero contributing no gradient to anything.

use serde::{Deserialize, Serialize};

use crate::controls::{extract_edges_graph, ControlKind};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::networks::FeatureBundle;
use crate::nn::Ctx;
use crate::probe::ProbeModel;
use crate::scalar::{s, Scalar};
use crate::schedule::{predict_x0_graph, NoiseSchedule};

/// Loss weights and timestep thresholds of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau_reward: usize,
    pub tau_align: usize,
}

impl LossWeights {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.tau_reward > t_max || self.tau_align > t_max {
            return Err(Error::Config(format!(
                "thresholds (tau_reward {}, tau_align {}) must be <= T = {t_max}",
                self.tau_reward, self.tau_align
            )));
        }
        Ok(())
    }
}

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss<F: Scalar>(cx: &mut Ctx<F>, eps: NodeId, eps_hat: NodeId) -> Result<NodeId> {
    if cx.g.shape(eps) != cx.g.shape(eps_hat) {
        return Err(Error::Shape(format!(
            "diffusion_loss: eps {:?} vs eps_hat {:?}",
            cx.g.shape(eps),
            cx.g.shape(eps_hat)
        )));
    }
    Ok(cx.g.mse(eps, eps_hat))
}

/// Differentiable image-to-control operator used by the reward loss.
pub trait ControlExtractor<F: Scalar> {
    fn kind(&self) -> ControlKind;
    /// `(N, 3, H, W)` image in [0, 1] -> `(N, 1, H, W)` control in [0, 1].
    fn extract(&self, cx: &mut Ctx<F>, image01: NodeId) -> Result<NodeId>;
}

/// Gradient-magnitude edge extractor (the edge-task reward model).
pub struct EdgeExtractor;

impl<F: Scalar> ControlExtractor<F> for EdgeExtractor {
    fn kind(&self) -> ControlKind {
        ControlKind::Edge
    }

    fn extract(&self, cx: &mut Ctx<F>, image01: NodeId) -> Result<NodeId> {
        Ok(extract_edges_graph(&mut cx.g, image01))
    }
}

/// Depth reward model: a frozen readout probe over the frozen base model's
/// features at a near-clean timestep. The image is deterministically mapped
/// into the diffusion domain (no noise draw), so the operator is pure and
/// stays differentiable with respect to the image.
pub struct ProbeDepthExtractor<'a, F: Scalar> {
    pub unet: &'a crate::networks::UNet<F>,
    pub probe: &'a ProbeModel<F>,
    pub sched: &'a NoiseSchedule<F>,
    pub t_extract: usize,
}

impl<'a, F: Scalar> ProbeDepthExtractor<'a, F> {
    pub fn new(
        unet: &'a crate::networks::UNet<F>,
        probe: &'a ProbeModel<F>,
        sched: &'a NoiseSchedule<F>,
    ) -> Self {
        ProbeDepthExtractor { unet, probe, sched, t_extract: 1 }
    }
}

impl<F: Scalar> ControlExtractor<F> for ProbeDepthExtractor<'_, F> {
    fn kind(&self) -> ControlKind {
        ControlKind::Depth
    }

    fn extract(&self, cx: &mut Ctx<F>, image01: NodeId) -> Result<NodeId> {
        let n = cx.g.shape(image01)[0];
        let two = s::<F>(2.0);
        let net = cx.g.mul_scalar(image01, two);
        let net = cx.g.add_scalar(net, -F::one());
        // x_t = sqrt(alpha_bar_t) * x0 with eps fixed to zero
        let c0 = self.sched.alpha_bar(self.t_extract).sqrt();
        let x_t = cx.g.mul_scalar(net, c0);
        let ts = vec![self.t_extract; n];
        let null = vec![self.unet.cfg.null_label(); n];
        let (_, bundle) = cx.frozen(|cx| self.unet.forward_eps(cx, x_t, &ts, &null, true))?;
        cx.frozen(|cx| self.probe.forward(cx, &bundle))
    }
}

/// Active batch indices under the "loss active when `t <= tau`" convention.
pub fn active_indices(ts: &[usize], tau: usize) -> Vec<usize> {
    ts.iter().enumerate().filter(|(_, &t)| t <= tau).map(|(i, _)| i).collect()
}

/// Cycle-consistency reward: one-step clean-sample estimate, mapped to image
/// range, passed through the extractor, compared to the input control.
///
/// Gradients flow through `eps_hat`; inactive samples (t > tau) contribute an
/// exact zero.
#[allow(clippy::too_many_arguments)]
pub fn reward_loss<F: Scalar>(
    cx: &mut Ctx<F>,
    x_t: NodeId,
    ts: &[usize],
    eps_hat: NodeId,
    c_spatial: NodeId,
    kind: ControlKind,
    sched: &NoiseSchedule<F>,
    extractor: &dyn ControlExtractor<F>,
    tau_reward: usize,
) -> Result<NodeId> {
    if extractor.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.to_string(),
            got: extractor.kind().to_string(),
        });
    }
    for &t in ts {
        if t < 1 {
            return Err(Error::Config("reward_loss: t must be >= 1".into()));
        }
    }
    let n = ts.len();
    let active = active_indices(ts, tau_reward);
    if active.is_empty() {
        return Ok(cx.g.zero_scalar());
    }

    let x_sel = cx.g.select_batch(x_t, active.clone());
    let e_sel = cx.g.select_batch(eps_hat, active.clone());
    let c_sel = cx.g.select_batch(c_spatial, active.clone());
    let ts_sel: Vec<usize> = active.iter().map(|&i| ts[i]).collect();

    let x0_hat = predict_x0_graph(&mut cx.g, x_sel, &ts_sel, e_sel, sched);
    // map to image range and clamp before extraction
    let half = s::<F>(0.5);
    let img = cx.g.add_scalar(x0_hat, F::one());
    let img = cx.g.mul_scalar(img, half);
    let img01 = cx.g.clamp(img, F::zero(), F::one());
    let extracted = extractor.extract(cx, img01)?;

    let per_sample = cx.g.mse_per_sample(extracted, c_sel);
    let summed = cx.g.sum_all(per_sample);
    Ok(cx.g.mul_scalar(summed, s(1.0 / n as f64)))
}

/// Feature-alignment loss: frozen probe prediction from live decoder features
/// against the input control. Probe parameters receive no gradient; the
/// feature maps do. Inactive samples contribute an exact zero.
pub fn alignment_loss<F: Scalar>(
    cx: &mut Ctx<F>,
    features: &FeatureBundle,
    c_spatial: NodeId,
    kind: ControlKind,
    probe: &ProbeModel<F>,
    tau_align: usize,
) -> Result<NodeId> {
    if probe.cfg.control_kind != kind {
        return Err(Error::KindMismatch {
            expected: kind.to_string(),
            got: probe.cfg.control_kind.to_string(),
        });
    }
    let n = features.ts.len();
    let active = active_indices(&features.ts, tau_align);
    if active.is_empty() {
        return Ok(cx.g.zero_scalar());
    }

    let selected = FeatureBundle {
        ts: active.iter().map(|&i| features.ts[i]).collect(),
        taps: features
            .taps
            .iter()
            .map(|tap| crate::networks::Tap {
                layer_id: tap.layer_id.clone(),
                kind: tap.kind,
                level: tap.level,
                node: cx.g.select_batch(tap.node, active.clone()),
            })
            .collect(),
    };
    let pred = cx.frozen(|cx| probe.forward(cx, &selected))?;
    let c_sel = cx.g.select_batch(c_spatial, active);
    let per_sample = cx.g.mse_per_sample(pred, c_sel);
    let summed = cx.g.sum_all(per_sample);
    Ok(cx.g.mul_scalar(summed, s(1.0 / n as f64)))
}

/// Scalar loss parts of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub diffusion: NodeId,
    pub reward: NodeId,
    pub align: NodeId,
}

/// `L = L_diffusion + alpha * L_reward + beta * L_alignment` (gating already
/// applied inside the parts).
pub fn total_loss<F: Scalar>(cx: &mut Ctx<F>, parts: LossParts, weights: &LossWeights) -> NodeId {
    let r = cx.g.mul_scalar(parts.reward, s(weights.alpha));
    let a = cx.g.mul_scalar(parts.align, s(weights.beta));
    let ra = cx.g.add(r, a);
    cx.g.add(parts.diffusion, ra)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    #[test]
    fn diffusion_loss_cases() {
        let mut cx = Ctx::<f64>::new();
        let mut rng = stream(1, "dl", 0);
        let eps = Tensor::randn([2, 3, 4, 4], &mut rng);
        let a = cx.g.constant(eps.clone());
        let b = cx.g.constant(eps.clone());
        let same = diffusion_loss(&mut cx, a, b).unwrap();
        assert_eq!(cx.g.value(same).item(), 0.0);

        // eps = 0, eps_hat = ones -> 1.0
        let z = cx.g.constant(Tensor::zeros([1, 1, 2, 2]));
        let o = cx.g.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let unit = diffusion_loss(&mut cx, z, o).unwrap();
        assert_eq!(cx.g.value(unit).item(), 1.0);

        // brute-force oracle
        let other = Tensor::randn([2, 3, 4, 4], &mut rng);
        let ia = cx.g.constant(eps.clone());
        let ib = cx.g.constant(other.clone());
        let l = diffusion_loss(&mut cx, ia, ib).unwrap();
        let mut acc = 0.0;
        for i in 0..eps.numel() {
            let d = eps.data()[i] - other.data()[i];
            acc += d * d;
        }
        assert!((cx.g.value(l).item() - acc / eps.numel() as f64).abs() < 1e-12);

        // shape mismatch
        let bad = cx.g.constant(Tensor::<f64>::zeros([1, 1, 2, 3]));
        assert!(diffusion_loss(&mut cx, z, bad).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let mut cx = Ctx::<f64>::new();
        let d = cx.g.constant(Tensor::scalar(0.2));
        let r = cx.g.constant(Tensor::scalar(0.1));
        let a = cx.g.constant(Tensor::scalar(0.3));
        let w = LossWeights { alpha: 0.5, beta: 1.0, tau_reward: 10, tau_align: 10 };
        let t = total_loss(&mut cx, LossParts { diffusion: d, reward: r, align: a }, &w);
        assert!((cx.g.value(t).item() - 0.55).abs() < 1e-15);

        let w0 = LossWeights { alpha: 0.0, beta: 0.0, tau_reward: 10, tau_align: 10 };
        let t0 = total_loss(&mut cx, LossParts { diffusion: d, reward: r, align: a }, &w0);
        assert!((cx.g.value(t0).item() - 0.2).abs() < 1e-15);

        let z = cx.g.zero_scalar();
        let w1 = LossWeights { alpha: 1.0, beta: 1.0, tau_reward: 10, tau_align: 10 };
        let tz = total_loss(&mut cx, LossParts { diffusion: z, reward: z, align: z }, &w1);
        assert_eq!(cx.g.value(tz).item(), 0.0);
    }

    #[test]
    fn weights_validate_thresholds() {
        let w = LossWeights { alpha: 0.5, beta: 1.0, tau_reward: 1001, tau_align: 920 };
        assert!(w.validate(1000).is_err());
        let w = LossWeights { alpha: -0.1, beta: 1.0, tau_reward: 400, tau_align: 920 };
        assert!(w.validate(1000).is_err());
        let w = LossWeights { alpha: 0.5, beta: 1.0, tau_reward: 400, tau_align: 920 };
        assert!(w.validate(1000).is_ok());
    }

    #[test]
    fn active_index_convention() {
        assert_eq!(active_indices(&[100, 400, 401, 1000], 400), vec![0, 1]);
        assert!(active_indices(&[500, 700], 400).is_empty());
        assert_eq!(active_indices(&[1], 0), Vec::<usize>::new());
    }
}
