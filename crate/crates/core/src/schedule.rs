//! Noise schedules, the forward (noising) process, one-step inversion back to
//! a clean-sample estimate, and the sampling loops.
//!
//! Timestep indexing is 1-based: schedule arrays hold entries for `t = 1..=T`
//! and `t = 0` is reserved for clean data (`alpha_bar[0] = 1`).

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::stream;
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step and cumulative noise coefficients over `T` steps.
#[derive(Clone, Debug)]
pub struct NoiseSchedule<F: Scalar> {
    t_max: usize,
    /// `beta[t]` for `t in 1..=T`; index 0 is a sentinel 0.
    beta: Vec<F>,
    /// `alpha[t] = 1 - beta[t]`; index 0 is 1.
    alpha: Vec<F>,
    /// `alpha_bar[t] = prod_{u<=t} alpha[u]`; index 0 is 1.
    alpha_bar: Vec<F>,
}

/// One point on a diffusion trajectory.
#[derive(Clone, Debug)]
pub struct LatentState<F: Scalar> {
    pub x: Tensor<F>,
    pub t: usize,
    /// Noise realization used to produce `x`, when created by [`forward_diffuse`].
    pub eps: Option<Tensor<F>>,
}

pub fn build_schedule<F: Scalar>(
    t_max: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule<F>> {
    if t_max < 2 {
        return Err(Error::Config(format!("schedule.T must be >= 2, got {t_max}")));
    }
    if !(beta_min > 0.0) {
        return Err(Error::Config(format!("schedule.beta_min must be > 0, got {beta_min}")));
    }
    if beta_max < beta_min {
        return Err(Error::Config(format!(
            "schedule.beta_max ({beta_max}) must be >= beta_min ({beta_min})"
        )));
    }
    if !(beta_max < 1.0) {
        return Err(Error::Config(format!("schedule.beta_max must be < 1, got {beta_max}")));
    }

    let mut beta = vec![F::zero(); t_max + 1];
    match kind {
        ScheduleKind::Linear => {
            for t in 1..=t_max {
                let frac = (t - 1) as f64 / (t_max - 1) as f64;
                beta[t] = s(beta_min + frac * (beta_max - beta_min));
            }
        }
        ScheduleKind::Cosine => {
            // squared-cosine alpha_bar profile with the usual small offset,
            // expressed through per-step betas clipped into (0, 0.999]
            let offset = 0.008;
            let f = |u: f64| ((u / t_max as f64 + offset) / (1.0 + offset)
                * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            let f0 = f(0.0);
            let mut prev = 1.0;
            for t in 1..=t_max {
                let ab = f(t as f64) / f0;
                let b = (1.0 - ab / prev).clamp(1e-8, 0.999);
                beta[t] = s(b);
                prev *= 1.0 - b;
            }
        }
    }

    let mut alpha = vec![F::one(); t_max + 1];
    let mut alpha_bar = vec![F::one(); t_max + 1];
    for t in 1..=t_max {
        alpha[t] = F::one() - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    Ok(NoiseSchedule { t_max, beta, alpha, alpha_bar })
}

impl<F: Scalar> NoiseSchedule<F> {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> F {
        self.check_t(t);
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> F {
        self.check_t(t);
        self.alpha[t]
    }

    /// Cumulative retention `alpha_bar[t]`; `alpha_bar[0] = 1`.
    pub fn alpha_bar(&self, t: usize) -> F {
        assert!(t <= self.t_max, "t = {t} out of range 0..={}", self.t_max);
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) {
        assert!(t >= 1 && t <= self.t_max, "t = {t} out of range 1..={}", self.t_max);
    }

    /// Resolves a threshold given either as an absolute step count or as a
    /// fraction of `T` (values <= 1.0), rounding down.
    pub fn resolve_threshold(&self, tau: f64) -> usize {
        if tau <= 1.0 {
            (tau * self.t_max as f64).floor() as usize
        } else {
            (tau.floor() as usize).min(self.t_max)
        }
    }
}

/// Closed-form marginal of the forward process:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_diffuse<F: Scalar>(
    x0: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    sched: &NoiseSchedule<F>,
) -> Result<LatentState<F>> {
    if t < 1 || t > sched.t_max() {
        return Err(Error::Config(format!("forward_diffuse: t = {t} outside 1..={}", sched.t_max())));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "forward_diffuse: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    let c0 = ab.sqrt();
    let c1 = (F::one() - ab).sqrt();
    let x = x0.zip_map(eps, |a, e| c0 * a + c1 * e);
    Ok(LatentState { x, t, eps: Some(eps.clone()) })
}

/// Single-step inversion: `x0' = (x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
pub fn predict_x0_one_step<F: Scalar>(
    x_t: &LatentState<F>,
    eps_hat: &Tensor<F>,
    sched: &NoiseSchedule<F>,
) -> Result<Tensor<F>> {
    if x_t.t == 0 {
        return Err(Error::Config("predict_x0_one_step: t = 0 holds clean data".into()));
    }
    if x_t.t > sched.t_max() {
        return Err(Error::Config(format!(
            "predict_x0_one_step: t = {} outside 1..={}",
            x_t.t,
            sched.t_max()
        )));
    }
    if x_t.x.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!(
            "predict_x0_one_step: x_t {:?} vs eps_hat {:?}",
            x_t.x.shape(),
            eps_hat.shape()
        )));
    }
    let ab = sched.alpha_bar(x_t.t);
    let c1 = (F::one() - ab).sqrt();
    let inv = F::one() / ab.sqrt();
    Ok(x_t.x.zip_map(eps_hat, |x, e| (x - c1 * e) * inv))
}

/// Graph version of [`predict_x0_one_step`] over a batch with per-sample
/// timesteps; differentiable with respect to `eps_hat` (and `x_t` if live).
pub fn predict_x0_graph<F: Scalar>(
    g: &mut Graph<F>,
    x_t: NodeId,
    ts: &[usize],
    eps_hat: NodeId,
    sched: &NoiseSchedule<F>,
) -> NodeId {
    assert_eq!(g.shape(x_t)[0], ts.len(), "predict_x0_graph batch mismatch");
    for &t in ts {
        assert!(t >= 1 && t <= sched.t_max(), "predict_x0_graph: t = {t}");
    }
    let c1: Vec<F> = ts.iter().map(|&t| (F::one() - sched.alpha_bar(t)).sqrt()).collect();
    let inv: Vec<F> = ts.iter().map(|&t| F::one() / sched.alpha_bar(t).sqrt()).collect();
    let scaled_eps = g.scale_per_sample(eps_hat, c1);
    let num = g.sub(x_t, scaled_eps);
    g.scale_per_sample(num, inv)
}

/// Batched forward noising used by the training loops (per-sample `t`).
pub fn forward_diffuse_batch<F: Scalar>(
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    sched: &NoiseSchedule<F>,
) -> Tensor<F> {
    assert_eq!(x0.shape(), eps.shape());
    assert_eq!(x0.shape()[0], ts.len());
    let n = ts.len();
    let m = x0.numel() / n;
    let mut out = vec![F::zero(); x0.numel()];
    for (i, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let c0 = ab.sqrt();
        let c1 = (F::one() - ab).sqrt();
        for j in i * m..(i + 1) * m {
            out[j] = c0 * x0.data()[j] + c1 * eps.data()[j];
        }
    }
    Tensor::new(x0.shape().to_vec(), out)
}

/// Batched denoiser interface used by the samplers.
pub trait NoisePredictor<F: Scalar> {
    /// Predicts noise for a batch `x_t (N, C, H, W)` at per-sample timesteps,
    /// conditioned on class labels and an optional control map batch.
    fn predict_eps(
        &self,
        x_t: &Tensor<F>,
        ts: &[usize],
        labels: &[usize],
        control: Option<&Tensor<F>>,
    ) -> Result<Tensor<F>>;

    /// Class index encoding "no condition" for classifier-free guidance.
    fn null_label(&self) -> usize;
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOpts {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Ancestral (stochastic) updates instead of deterministic DDIM-style.
    pub ancestral: bool,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts { steps: 50, guidance_scale: 1.0, seed: 0, ancestral: false }
    }
}

/// Generates a batch by iterative denoising from pure noise.
///
/// Deterministic given `opts.seed`. Classifier-free guidance combines
/// conditional and null-condition predictions as
/// `eps = eps_null + s * (eps_cond - eps_null)`; `s = 1` reduces to the purely
/// conditional update (the null pass is skipped).
pub fn sample<F: Scalar, M: NoisePredictor<F>>(
    model: &M,
    labels: &[usize],
    control: Option<&Tensor<F>>,
    shape: &[usize],
    sched: &NoiseSchedule<F>,
    opts: &SampleOpts,
) -> Result<Tensor<F>> {
    let t_max = sched.t_max();
    if opts.steps == 0 || opts.steps > t_max {
        return Err(Error::Config(format!(
            "sample: steps = {} outside 1..={t_max}",
            opts.steps
        )));
    }
    if shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "sample: batch {} vs {} labels",
            shape[0],
            labels.len()
        )));
    }
    let n = labels.len();
    let mut x = Tensor::<F>::randn(shape.to_vec(), &mut stream(opts.seed, "sample-init", 0));

    // Evenly spaced decreasing subsequence T = t_1 > t_2 > ... > t_steps, with
    // the final update landing on t = 0.
    let taus: Vec<usize> = (0..opts.steps).map(|i| t_max * (opts.steps - i) / opts.steps).collect();

    for (k, &t) in taus.iter().enumerate() {
        let t_prev = if k + 1 < taus.len() { taus[k + 1] } else { 0 };
        let ts = vec![t; n];
        let eps_cond = model.predict_eps(&x, &ts, labels, control)?;
        let eps_hat = if (opts.guidance_scale - 1.0).abs() < 1e-12 {
            eps_cond
        } else {
            // null pass drops the class label; spatial control stays attached
            let null_labels = vec![model.null_label(); n];
            let eps_null = model.predict_eps(&x, &ts, &null_labels, control)?;
            let sc = s::<F>(opts.guidance_scale);
            eps_null.zip_map(&eps_cond, |en, ec| en + sc * (ec - en))
        };

        let ab_t = sched.alpha_bar(t);
        let c1 = (F::one() - ab_t).sqrt();
        let inv = F::one() / ab_t.sqrt();
        let x0_hat = x.zip_map(&eps_hat, |xv, e| (xv - c1 * e) * inv);
        if t_prev == 0 {
            return Ok(x0_hat);
        }

        // keep intermediate clean-sample estimates in the network domain
        let x0_c = x0_hat.map(|v| v.max(-F::one()).min(F::one()));
        let ab_p = sched.alpha_bar(t_prev);
        if opts.ancestral {
            let var =
                (F::one() - ab_p) / (F::one() - ab_t) * (F::one() - ab_t / ab_p);
            let sigma = var.max(F::zero()).sqrt();
            let dir = (F::one() - ab_p - sigma * sigma).max(F::zero()).sqrt();
            let mut rng = stream(opts.seed, "sample-ancestral", k as u64 + 1);
            let z = Tensor::<F>::randn(shape.to_vec(), &mut rng);
            let sq_p = ab_p.sqrt();
            let mut out = vec![F::zero(); x.numel()];
            for i in 0..out.len() {
                out[i] =
                    sq_p * x0_c.data()[i] + dir * eps_hat.data()[i] + sigma * z.data()[i];
            }
            x = Tensor::new(shape.to_vec(), out);
        } else {
            let sq_p = ab_p.sqrt();
            let dir = (F::one() - ab_p).sqrt();
            x = x0_c.zip_map(&eps_hat, |x0v, e| sq_p * x0v + dir * e);
        }
    }
    unreachable!("loop always returns at t_prev = 0");
}

/// Standard-normal draw shaped like `reference`, from a named stream.
pub fn noise_like<F: Scalar>(reference: &[usize], seed: u64, name: &str, step: u64) -> Tensor<F> {
    let mut rng = stream(seed, name, step);
    let numel: usize = reference.iter().product();
    let data = (0..numel).map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(reference.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn constant_schedule_by_hand() {
        let sch = build_schedule::<f64>(2, ScheduleKind::Linear, 0.5, 0.5).unwrap();
        assert_eq!(sch.beta(1), 0.5);
        assert_eq!(sch.beta(2), 0.5);
        assert_eq!(sch.alpha_bar(1), 0.5);
        assert_eq!(sch.alpha_bar(2), 0.25);
    }

    #[test]
    fn cumulative_product_matches_independent_loop() {
        // brute-force oracle: sequential multiplication of (1 - beta[t])
        let sch = build_schedule::<f64>(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - sch.beta(t);
        }
        assert!((sch.alpha_bar(1000) - prod).abs() < 1e-10);
    }

    #[test]
    fn t1_is_an_error() {
        assert!(build_schedule::<f64>(1, ScheduleKind::Linear, 1e-4, 0.02).is_err());
    }

    #[test]
    fn invalid_beta_ranges_name_the_field() {
        let e = build_schedule::<f64>(10, ScheduleKind::Linear, 0.0, 0.02).unwrap_err();
        assert!(e.to_string().contains("beta_min"), "{e}");
        let e = build_schedule::<f64>(10, ScheduleKind::Linear, 0.1, 0.05).unwrap_err();
        assert!(e.to_string().contains("beta_max"), "{e}");
        let e = build_schedule::<f64>(10, ScheduleKind::Linear, 0.1, 1.0).unwrap_err();
        assert!(e.to_string().contains("beta_max"), "{e}");
    }

    #[test]
    fn schedule_invariants_hold() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t_max in [10usize, 100, 1000] {
                let sch = build_schedule::<f64>(t_max, kind, 1e-4, 0.02).unwrap();
                for t in 1..=t_max {
                    let b = sch.beta(t);
                    assert!(b > 0.0 && b < 1.0, "beta out of range at {t}");
                    assert!(sch.alpha_bar(t) < sch.alpha_bar(t - 1), "not decreasing at {t}");
                    assert!(sch.alpha_bar(t) > 0.0 && sch.alpha_bar(t) <= 1.0);
                    let recon = sch.alpha_bar(t - 1) * sch.alpha(t);
                    assert!((sch.alpha_bar(t) - recon).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_diffuse_elementwise_oracle() {
        let sch = build_schedule::<f64>(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let mut rng = stream(11, "fd", 0);
        let x0 = Tensor::<f64>::randn([1, 3, 4, 4], &mut rng);
        let eps = Tensor::<f64>::randn([1, 3, 4, 4], &mut rng);
        let st = forward_diffuse(&x0, 500, &eps, &sch).unwrap();
        // independent scalar loop over pixels
        let ab = sch.alpha_bar(500);
        for i in 0..x0.numel() {
            let expect = ab.sqrt() * x0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            assert!((st.x.data()[i] - expect).abs() < 1e-10);
        }
        assert_eq!(st.t, 500);
        assert_eq!(st.eps.as_ref().unwrap(), &eps);
    }

    #[test]
    fn forward_diffuse_zero_signal() {
        let sch = build_schedule::<f64>(100, ScheduleKind::Linear, 1e-3, 0.02).unwrap();
        let x0 = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let eps = Tensor::<f64>::full([1, 1, 2, 2], 2.0);
        let st = forward_diffuse(&x0, 30, &eps, &sch).unwrap();
        let c = (1.0 - sch.alpha_bar(30)).sqrt() * 2.0;
        for &v in st.x.data() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_diffuse_shape_mismatch() {
        let sch = build_schedule::<f64>(10, ScheduleKind::Linear, 1e-3, 0.02).unwrap();
        let x0 = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let eps = Tensor::<f64>::zeros([1, 1, 2, 3]);
        assert!(matches!(forward_diffuse(&x0, 3, &eps, &sch), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_x0_inverts_forward() {
        let sch = build_schedule::<f64>(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let mut rng = stream(12, "inv", 0);
        for &t in &[1usize, 250, 750, 1000] {
            let x0 = Tensor::<f64>::randn([1, 3, 4, 4], &mut rng);
            let eps = Tensor::<f64>::randn([1, 3, 4, 4], &mut rng);
            let st = forward_diffuse(&x0, t, &eps, &sch).unwrap();
            let back = predict_x0_one_step(&st, &eps, &sch).unwrap();
            assert!(back.max_abs_diff(&x0) < 1e-6, "t = {t}");
        }
    }

    #[test]
    fn predict_x0_degenerate_and_oracle() {
        let sch = build_schedule::<f64>(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let mut rng = stream(13, "deg", 0);
        let x = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let st = LatentState { x: x.clone(), t: 750, eps: None };
        // eps_hat = 0 -> x / sqrt(alpha_bar)
        let zero = Tensor::<f64>::zeros([1, 1, 3, 3]);
        let out = predict_x0_one_step(&st, &zero, &sch).unwrap();
        let inv = 1.0 / sch.alpha_bar(750).sqrt();
        for i in 0..x.numel() {
            assert!((out.data()[i] - x.data()[i] * inv).abs() < 1e-12);
        }
        // random eps_hat vs independent scalar evaluation
        let eps_hat = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let out = predict_x0_one_step(&st, &eps_hat, &sch).unwrap();
        let ab = sch.alpha_bar(750);
        for i in 0..x.numel() {
            let expect = (x.data()[i] - (1.0 - ab).sqrt() * eps_hat.data()[i]) / ab.sqrt();
            assert!((out.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn predict_x0_rejects_t0() {
        let sch = build_schedule::<f64>(10, ScheduleKind::Linear, 1e-3, 0.02).unwrap();
        let st = LatentState { x: Tensor::zeros([1, 1, 2, 2]), t: 0, eps: None };
        assert!(predict_x0_one_step(&st, &Tensor::zeros([1, 1, 2, 2]), &sch).is_err());
    }

    #[test]
    fn forward_diffuse_is_linear() {
        let sch = build_schedule::<f64>(100, ScheduleKind::Cosine, 1e-3, 0.02).unwrap();
        let mut rng = stream(14, "lin", 0);
        let x0a = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let x0b = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let eps_a = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let eps_b = Tensor::<f64>::randn([1, 1, 3, 3], &mut rng);
        let t = 40;
        let sum_in_x0 = x0a.zip_map(&x0b, |a, b| a + b);
        let sum_in_eps = eps_a.zip_map(&eps_b, |a, b| a + b);
        let lhs = forward_diffuse(&sum_in_x0, t, &sum_in_eps, &sch).unwrap();
        let ra = forward_diffuse(&x0a, t, &eps_a, &sch).unwrap();
        let rb = forward_diffuse(&x0b, t, &eps_b, &sch).unwrap();
        let rhs = ra.x.zip_map(&rb.x, |a, b| a + b);
        assert!(lhs.x.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn threshold_resolution() {
        let sch = build_schedule::<f64>(500, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        assert_eq!(sch.resolve_threshold(0.92), 460);
        assert_eq!(sch.resolve_threshold(200.0), 200);
        assert_eq!(sch.resolve_threshold(1.0), 500);
        assert_eq!(sch.resolve_threshold(9999.0), 500);
        assert_eq!(sch.resolve_threshold(0.0), 0);
    }

    #[test]
    fn graph_predict_x0_matches_plain() {
        let sch = build_schedule::<f64>(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let mut rng = stream(15, "gp", 0);
        let x = Tensor::<f64>::randn([2, 1, 2, 2], &mut rng);
        let eps_hat = Tensor::<f64>::randn([2, 1, 2, 2], &mut rng);
        let mut g = Graph::new();
        let ix = g.constant(x.clone());
        let ie = g.leaf(eps_hat.clone(), true);
        let out = predict_x0_graph(&mut g, ix, &[100, 900], ie, &sch);
        for (i, &t) in [100usize, 900].iter().enumerate() {
            let st = LatentState {
                x: Tensor::new([1, 1, 2, 2], x.data()[i * 4..(i + 1) * 4].to_vec()),
                t,
                eps: None,
            };
            let eh = Tensor::new([1, 1, 2, 2], eps_hat.data()[i * 4..(i + 1) * 4].to_vec());
            let plain = predict_x0_one_step(&st, &eh, &sch).unwrap();
            for j in 0..4 {
                assert!((g.value(out).data()[i * 4 + j] - plain.data()[j]).abs() < 1e-12);
            }
        }
    }
}
