//! Reward and alignment loss contracts with real model fixtures: composition
//! oracles, gating exactness at the threshold boundary, gradient isolation,
//! and finite-difference checks of loss gradients w.r.t. control-branch
//! parameter slices.

use std::collections::HashMap;

use ctrldiff::controls::ControlKind;
use ctrldiff::data::generate_scene;
use ctrldiff::gradcheck::{central_difference, rel_err};
use ctrldiff::losses::{
    alignment_loss, diffusion_loss, reward_loss, total_loss, ControlExtractor, EdgeExtractor,
    LossParts, LossWeights, ProbeDepthExtractor,
};
use ctrldiff::networks::{forward_with_control, ControlBranch, Trainability, UNet, UNetConfig};
use ctrldiff::nn::Ctx;
use ctrldiff::probe::{probe_forward_plain, ProbeConfig, ProbeModel};
use ctrldiff::rng::stream;
use ctrldiff::schedule::{build_schedule, forward_diffuse_batch, noise_like, NoiseSchedule, ScheduleKind};
use ctrldiff::scalar::Scalar;
use ctrldiff::tensor::Tensor;

const T_MAX: usize = 50;

struct Fixture {
    unet: UNet<f64>,
    branch: ControlBranch<f64>,
    probe: ProbeModel<f64>,
    sched: NoiseSchedule<f64>,
}

fn fixture(seed: u64) -> Fixture {
    let cfg = UNetConfig::tiny();
    let mut rng = stream(seed, "fixture", 0);
    let unet = UNet::init(cfg.clone(), &mut rng).unwrap();
    let branch = ControlBranch::from_base(&unet, &mut rng);
    let probe =
        ProbeModel::init(ProbeConfig::for_model(&cfg, ControlKind::Depth, 8), &mut rng).unwrap();
    let sched = build_schedule(T_MAX, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
    Fixture { unet, branch, probe, sched }
}

/// Images (net domain), edge controls, depth controls, labels for a batch of
/// synthetic scenes at the tiny fixture resolution.
fn scene_batch(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<usize>) {
    let mut images = Vec::new();
    let mut edges = Vec::new();
    let mut depths = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let smp = generate_scene::<f64>(seed + i as u64, 8, false);
        let extracted = ctrldiff::controls::extract_edges(&smp.image).unwrap();
        images.extend(smp.image.data().iter().map(|&v| 2.0 * v - 1.0));
        edges.extend_from_slice(extracted.values.data());
        depths.extend_from_slice(smp.depth.values.data());
        labels.push(smp.label);
    }
    (
        Tensor::new([n, 3, 8, 8], images),
        Tensor::new([n, 1, 8, 8], edges),
        Tensor::new([n, 1, 8, 8], depths),
        labels,
    )
}

#[test]
fn reward_roundtrip_with_exact_control_vanishes() {
    // x0 whose extractor output equals c_spatial exactly, eps_hat = true eps
    let fx = fixture(1);
    let (images, edges, _, _) = scene_batch(2, 100);
    let ts = vec![10usize, 37];
    let eps = noise_like::<f64>(images.shape(), 5, "eps", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);

    let mut cx = Ctx::new();
    let ix = cx.g.constant(x_t);
    let ie = cx.g.constant(eps);
    let ic = cx.g.constant(edges);
    let loss = reward_loss(
        &mut cx,
        ix,
        &ts,
        ie,
        ic,
        ControlKind::Edge,
        &fx.sched,
        &EdgeExtractor,
        T_MAX,
    )
    .unwrap();
    let v = cx.g.value(loss).item();
    assert!(v < 1e-8, "round-trip reward loss {v}");
}

#[test]
fn reward_is_exactly_zero_and_gradient_free_beyond_tau() {
    let fx = fixture(2);
    let (images, edges, _, _) = scene_batch(2, 200);
    let tau = 20usize;
    let ts = vec![tau + 1, tau + 5];
    let eps = noise_like::<f64>(images.shape(), 6, "eps", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);

    let mut cx = Ctx::new();
    let ix = cx.g.constant(x_t);
    let ie = cx.g.leaf(noise_like::<f64>(images.shape(), 7, "eh", 0), true);
    let ic = cx.g.constant(edges);
    let loss =
        reward_loss(&mut cx, ix, &ts, ie, ic, ControlKind::Edge, &fx.sched, &EdgeExtractor, tau)
            .unwrap();
    assert_eq!(cx.g.value(loss).item(), 0.0);
    let grads = cx.g.backward(loss);
    assert!(grads.get(ie).is_none(), "gated loss leaked gradient into eps_hat");
}

#[test]
fn reward_boundary_t_equal_tau_is_active() {
    let fx = fixture(3);
    let (images, edges, _, _) = scene_batch(1, 300);
    let tau = 20usize;
    let ts = vec![tau];
    let eps = noise_like::<f64>(images.shape(), 8, "eps", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);
    let mut cx = Ctx::new();
    let ix = cx.g.constant(x_t);
    let ie = cx.g.leaf(noise_like::<f64>(images.shape(), 9, "eh", 0), true);
    let ic = cx.g.constant(edges);
    let loss =
        reward_loss(&mut cx, ix, &ts, ie, ic, ControlKind::Edge, &fx.sched, &EdgeExtractor, tau)
            .unwrap();
    assert!(cx.g.value(loss).item() > 0.0);
    let grads = cx.g.backward(loss);
    let g = grads.get(ie).expect("active reward must reach eps_hat");
    assert!(g.data().iter().any(|&v| v != 0.0));
}

#[test]
fn reward_matches_manual_composition() {
    // independent chain: predict_x0_one_step -> clamp to image range ->
    // extract_edges -> per-sample MSE, averaged with the gating convention
    let fx = fixture(4);
    let (images, edges, _, _) = scene_batch(3, 400);
    let tau = 30usize;
    let ts = vec![5usize, 25, 45]; // third sample gated out
    let eps = noise_like::<f64>(images.shape(), 10, "eps", 0);
    let eps_hat = noise_like::<f64>(images.shape(), 11, "eh", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);

    let mut cx = Ctx::new();
    let ix = cx.g.constant(x_t.clone());
    let ie = cx.g.constant(eps_hat.clone());
    let ic = cx.g.constant(edges.clone());
    let loss =
        reward_loss(&mut cx, ix, &ts, ie, ic, ControlKind::Edge, &fx.sched, &EdgeExtractor, tau)
            .unwrap();

    let mut manual = 0.0;
    for i in 0..3 {
        if ts[i] > tau {
            continue;
        }
        let m = 3 * 64;
        let xs = Tensor::new([1, 3, 8, 8], x_t.data()[i * m..(i + 1) * m].to_vec());
        let es = Tensor::new([1, 3, 8, 8], eps_hat.data()[i * m..(i + 1) * m].to_vec());
        let st = ctrldiff::schedule::LatentState { x: xs, t: ts[i], eps: None };
        let x0 = ctrldiff::schedule::predict_x0_one_step(&st, &es, &fx.sched).unwrap();
        let img01 = x0.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).reshaped([3, 8, 8]);
        let ext = ctrldiff::controls::extract_edges(&img01).unwrap();
        let mut acc = 0.0;
        for (p, t) in ext.values.data().iter().zip(&edges.data()[i * 64..(i + 1) * 64]) {
            let d = p - t;
            acc += d * d;
        }
        manual += acc / 64.0;
    }
    manual /= 3.0;
    let got = cx.g.value(loss).item();
    assert!((got - manual).abs() < 1e-10, "{got} vs {manual}");
}

#[test]
fn alignment_zero_for_perfect_probe_and_beyond_tau() {
    let fx = fixture(5);
    let (images, _, depths, labels) = scene_batch(2, 500);
    let ts = vec![10usize, 30];
    let eps = noise_like::<f64>(images.shape(), 12, "eps", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);

    // collect features once, read the probe's own output as the target
    let mut cx = Ctx::new();
    let ix = cx.g.constant(x_t.clone());
    let icontrol = cx.g.constant(depths.clone());
    let (_, bundle) = forward_with_control(
        &mut cx,
        &fx.unet,
        &fx.branch,
        ix,
        &ts,
        &labels,
        icontrol,
        true,
        Trainability::FROZEN,
    )
    .unwrap();
    let probe_out = cx.frozen(|cx| fx.probe.forward(cx, &bundle)).unwrap();
    let target = cx.g.value(probe_out).clone();

    let it = cx.g.constant(target);
    let perfect =
        alignment_loss(&mut cx, &bundle, it, ControlKind::Depth, &fx.probe, T_MAX).unwrap();
    assert!(cx.g.value(perfect).item() < 1e-20);

    // gating boundary: tau = min(ts) - 1 deactivates everything
    let tau = ts.iter().min().unwrap() - 1;
    let ic2 = cx.g.constant(depths);
    let gated = alignment_loss(&mut cx, &bundle, ic2, ControlKind::Depth, &fx.probe, tau).unwrap();
    assert_eq!(cx.g.value(gated).item(), 0.0);
}

#[test]
fn alignment_matches_independent_probe_then_mse() {
    let fx = fixture(6);
    let (images, _, depths, labels) = scene_batch(2, 600);
    let ts = vec![8usize, 44];
    let eps = noise_like::<f64>(images.shape(), 13, "eps", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);

    let mut cx = Ctx::new();
    let ix = cx.g.constant(x_t.clone());
    let icontrol = cx.g.constant(depths.clone());
    let (_, bundle) = forward_with_control(
        &mut cx,
        &fx.unet,
        &fx.branch,
        ix,
        &ts,
        &labels,
        icontrol,
        true,
        Trainability::FROZEN,
    )
    .unwrap();
    let tap_values: Vec<Tensor<f64>> =
        bundle.taps.iter().map(|t| cx.g.value(t.node).clone()).collect();
    let ic = cx.g.constant(depths.clone());
    let loss =
        alignment_loss(&mut cx, &bundle, ic, ControlKind::Depth, &fx.probe, T_MAX).unwrap();

    // independent route: plain probe forward on detached features, then MSE
    let pred = probe_forward_plain(&fx.probe, &tap_values, &ts).unwrap();
    let mut manual = 0.0;
    for i in 0..2 {
        let mut acc = 0.0;
        for (p, t) in pred.data()[i * 64..(i + 1) * 64]
            .iter()
            .zip(&depths.data()[i * 64..(i + 1) * 64])
        {
            let d = p - t;
            acc += d * d;
        }
        manual += acc / 64.0;
    }
    manual /= 2.0;
    let got = cx.g.value(loss).item();
    assert!((got - manual).abs() < 1e-10, "{got} vs {manual}");
}

#[test]
fn alignment_gradients_hit_branch_not_probe() {
    let fx = fixture(7);
    let (images, _, depths, labels) = scene_batch(2, 700);
    let ts = vec![10usize, 20];
    let eps = noise_like::<f64>(images.shape(), 14, "eps", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);

    let mut cx = Ctx::new();
    let ix = cx.g.constant(x_t);
    let icontrol = cx.g.constant(depths.clone());
    let (_, bundle) = forward_with_control(
        &mut cx,
        &fx.unet,
        &fx.branch,
        ix,
        &ts,
        &labels,
        icontrol,
        true,
        Trainability::BRANCH_ONLY,
    )
    .unwrap();
    let ic = cx.g.constant(depths);
    let loss =
        alignment_loss(&mut cx, &bundle, ic, ControlKind::Depth, &fx.probe, T_MAX).unwrap();
    let grads = cx.g.backward(loss);

    let mut branch_norm = 0.0f64;
    for (name, id) in cx.bindings() {
        assert!(
            name.starts_with("ctrl."),
            "trainable binding {name} outside the control branch"
        );
        if let Some(g) = grads.get(*id) {
            for &v in g.data() {
                branch_norm += v * v;
            }
        }
    }
    assert!(branch_norm > 0.0, "alignment produced no gradient on the control branch");
}

#[test]
fn probe_depth_extractor_is_differentiable() {
    let fx = fixture(8);
    let (images, _, _, _) = scene_batch(1, 800);
    let img01 = images.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
    let extractor = ProbeDepthExtractor::new(&fx.unet, &fx.probe, &fx.sched);
    let proj = Tensor::randn([1, 1, 8, 8], &mut stream(15, "proj", 0));

    let run = |img: &Tensor<f64>| -> (f64, Vec<f64>) {
        let mut cx = Ctx::new();
        let ii = cx.g.leaf(img.clone(), true);
        let out = extractor.extract(&mut cx, ii).unwrap();
        let p = cx.g.constant(proj.clone());
        let prod = cx.g.mul(out, p);
        let obj = cx.g.sum_all(prod);
        let grads = cx.g.backward(obj);
        (cx.g.value(obj).item(), grads.dense(ii, img.shape()).into_data())
    };
    let (_, analytic) = run(&img01);
    assert!(analytic.iter().any(|&v| v.abs() > 1e-10));
    let mut rng = stream(16, "pick", 0);
    for _ in 0..8 {
        let i = rand::Rng::gen_range(&mut rng, 0..img01.numel());
        let numeric = central_difference(
            |d| {
                let mut p = img01.clone();
                p.data_mut()[i] += d;
                run(&p).0
            },
            1e-5,
        );
        assert!(rel_err(analytic[i], numeric) < 1e-3, "coord {i}");
    }
}

/// Finite-difference check of the full combined objective w.r.t. a slice of
/// control-branch parameters (shared with the acceptance suite).
#[test]
fn total_loss_gradcheck_on_branch_slice() {
    let fx = fixture(9);
    let mut branch = fx.branch;
    let (images, edges, _, labels) = scene_batch(2, 900);
    let ts = vec![10usize, 30];
    let eps = noise_like::<f64>(images.shape(), 17, "eps", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);
    let weights = LossWeights { alpha: 0.5, beta: 1.0, tau_reward: 40, tau_align: 46 };
    let probe_edge = ProbeModel::init(
        ProbeConfig::for_model(&fx.unet.cfg, ControlKind::Edge, 8),
        &mut stream(18, "pe", 0),
    )
    .unwrap();

    let run = |branch: &ControlBranch<f64>| -> (f64, HashMap<String, Tensor<f64>>) {
        let mut cx = Ctx::new();
        let ix = cx.g.constant(x_t.clone());
        let ic = cx.g.constant(edges.clone());
        let ieps = cx.g.constant(eps.clone());
        let (eps_hat, bundle) = forward_with_control(
            &mut cx,
            &fx.unet,
            branch,
            ix,
            &ts,
            &labels,
            ic,
            true,
            Trainability::BRANCH_ONLY,
        )
        .unwrap();
        let ld = diffusion_loss(&mut cx, ieps, eps_hat).unwrap();
        let lr = reward_loss(
            &mut cx,
            ix,
            &ts,
            eps_hat,
            ic,
            ControlKind::Edge,
            &fx.sched,
            &EdgeExtractor,
            weights.tau_reward,
        )
        .unwrap();
        let la = alignment_loss(
            &mut cx,
            &bundle,
            ic,
            ControlKind::Edge,
            &probe_edge,
            weights.tau_align,
        )
        .unwrap();
        let lt = total_loss(&mut cx, LossParts { diffusion: ld, reward: lr, align: la }, &weights);
        let grads = cx.g.backward(lt);
        let named = cx
            .bindings()
            .iter()
            .map(|(n, id)| (n.clone(), grads.dense(*id, cx.g.shape(*id))))
            .collect();
        (cx.g.value(lt).item(), named)
    };

    let (_, analytic) = run(&branch);
    // slice: a handful of coordinates across distinct branch parameters
    let targets = ["ctrl.zero0.w", "ctrl.embed2.w", "ctrl.mid1.conv1.w"];
    for name in targets {
        let a = analytic.get(name).unwrap_or_else(|| panic!("missing grad for {name}"));
        for coord in [0usize, 3] {
            let av = a.data()[coord];
            let numeric = central_difference(
                |d| {
                    let mut f = |n: String, t: &mut Tensor<f64>| {
                        if n == name {
                            t.data_mut()[coord] += d;
                        }
                    };
                    branch.visit_params_mut(&mut f);
                    let v = run(&branch).0;
                    let mut undo = |n: String, t: &mut Tensor<f64>| {
                        if n == name {
                            t.data_mut()[coord] -= d;
                        }
                    };
                    branch.visit_params_mut(&mut undo);
                    v
                },
                1e-5,
            );
            assert!(
                rel_err(av, numeric) < 1e-3,
                "{name}[{coord}]: analytic {av} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn extractor_kind_mismatch_is_an_error() {
    let fx = fixture(10);
    let (images, edges, _, _) = scene_batch(1, 1000);
    let ts = vec![5usize];
    let eps = noise_like::<f64>(images.shape(), 19, "eps", 0);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, &fx.sched);
    let mut cx = Ctx::new();
    let ix = cx.g.constant(x_t);
    let ie = cx.g.constant(eps);
    let ic = cx.g.constant(edges);
    // depth kind with an edge extractor
    let err = reward_loss(
        &mut cx,
        ix,
        &ts,
        ie,
        ic,
        ControlKind::Depth,
        &fx.sched,
        &EdgeExtractor,
        T_MAX,
    )
    .unwrap_err();
    assert!(matches!(err, ctrldiff::Error::KindMismatch { .. }));
}
