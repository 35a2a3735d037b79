//! Stage contracts at smoke scale: zero-iteration identity, loss descent,
//! frozenness across stages, degenerate-weight equivalence between the
//! controlnet stage and fine-tuning, and bit-exact resumability.

use std::path::{Path, PathBuf};

use ctrldiff::ckpt::load_model;
use ctrldiff::config::{Config, ProbeSource, StageName};
use ctrldiff::controls::ControlKind;
use ctrldiff::data::{generate_dataset, write_dataset};
use ctrldiff::networks::{param_bytes, UNet, UNetConfig};
use ctrldiff::rng::stream;
use ctrldiff::training::{run_finetune, run_train_base, run_train_controlnet, run_train_probe};

/// Small-but-real configuration over generated datasets in a temp dir.
fn smoke_config(root: &Path, seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.run.seed = seed;
    cfg.run.out_dir = root.join("runs");
    cfg.data.path = root.join("train");
    cfg.data.eval_path = root.join("eval");
    cfg.data.resolution = 8;
    cfg.model = UNetConfig::tiny();
    cfg.schedule.steps = 50;
    cfg.train.batch_size = 4;
    cfg.train.iterations = 30;
    cfg.train.ckpt_every = 10;
    cfg.train.lr = 1e-3;
    cfg.probe.bottleneck = 8;
    cfg.probe.iterations = 20;
    cfg.probe.batch_size = 4;
    cfg.loss.tau_reward = 0.4;
    cfg.loss.tau_align = 0.92;
    cfg
}

fn gen_data(cfg: &Config) {
    let train = generate_dataset::<f32>(11, 48, cfg.data.resolution, false);
    write_dataset(&train, &cfg.data.path).unwrap();
    let eval = generate_dataset::<f32>(12, 16, cfg.data.resolution, false);
    write_dataset(&eval, &cfg.data.eval_path).unwrap();
}

fn unet_bytes(path: &Path) -> Vec<u8> {
    let ckpt = load_model::<f32>(path).unwrap();
    param_bytes::<f32>(|f| ckpt.unet.visit_params(f))
}

fn branch_bytes(path: &Path) -> Vec<u8> {
    let ckpt = load_model::<f32>(path).unwrap();
    param_bytes::<f32>(|f| ckpt.branch.as_ref().unwrap().visit_params(f))
}

/// Pipelines shared by several tests: base -> controlnet -> probes.
struct Pipeline {
    cfg: Config,
    base_ckpt: PathBuf,
    control_ckpt: PathBuf,
    align_probe: PathBuf,
    reward_probe: PathBuf,
}

fn run_pipeline(root: &Path, seed: u64, kind: ControlKind) -> Pipeline {
    let mut cfg = smoke_config(root, seed);
    cfg.train.control_kind = kind;
    gen_data(&cfg);

    let base = run_train_base::<f32>(&cfg).unwrap();
    cfg.train.base_ckpt = base.final_ckpt.clone();
    let ctl = run_train_controlnet::<f32>(&cfg).unwrap();

    cfg.probe.model_ckpt = ctl.final_ckpt.clone();
    cfg.probe.source = ProbeSource::Controlled;
    let align = run_train_probe::<f32>(&cfg).unwrap();

    cfg.probe.model_ckpt = base.final_ckpt.clone();
    cfg.probe.source = ProbeSource::Base;
    let reward = run_train_probe::<f32>(&cfg).unwrap();

    Pipeline {
        cfg,
        base_ckpt: base.final_ckpt,
        control_ckpt: ctl.final_ckpt,
        align_probe: align.ckpt_dir,
        reward_probe: reward.ckpt_dir,
    }
}

#[test]
fn zero_iterations_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), 5);
    cfg.train.iterations = 0;
    gen_data(&cfg);
    let out = run_train_base::<f32>(&cfg).unwrap();
    let stored = unet_bytes(&out.final_ckpt);
    let init = UNet::<f32>::init(cfg.model.clone(), &mut stream(cfg.run.seed, "init-unet", 0)).unwrap();
    assert_eq!(stored, param_bytes::<f32>(|f| init.visit_params(f)));
    assert!(out.log.is_empty());
}

#[test]
fn base_pretraining_reduces_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), 6);
    cfg.train.iterations = 120;
    gen_data(&cfg);
    let out = run_train_base::<f32>(&cfg).unwrap();
    let head: f64 = out.log[..20].iter().map(|r| r.loss_diffusion).sum::<f64>() / 20.0;
    let tail: f64 =
        out.log[out.log.len() - 20..].iter().map(|r| r.loss_diffusion).sum::<f64>() / 20.0;
    assert!(tail < head, "smoothed diffusion loss should drop: {head} -> {tail}");
    assert!(out.csv_path.exists());
}

#[test]
fn controlnet_stage_freezes_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), 7);
    gen_data(&cfg);
    let base = run_train_base::<f32>(&cfg).unwrap();
    cfg.train.base_ckpt = base.final_ckpt.clone();
    let ctl = run_train_controlnet::<f32>(&cfg).unwrap();
    assert_eq!(
        unet_bytes(&base.final_ckpt),
        unet_bytes(&ctl.final_ckpt),
        "base weights changed during controlnet training"
    );
    // the branch itself must have moved
    let fresh = load_model::<f32>(&base.final_ckpt).unwrap();
    let fresh_branch = ctrldiff::networks::ControlBranch::from_base(
        &fresh.unet,
        &mut stream(cfg.run.seed, "init-branch", 0),
    );
    assert_ne!(
        branch_bytes(&ctl.final_ckpt),
        param_bytes::<f32>(|f| fresh_branch.visit_params(f))
    );
}

#[test]
fn controlnet_stage_requires_base_ckpt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path(), 8);
    gen_data(&cfg);
    let err = run_train_controlnet::<f32>(&cfg).unwrap_err();
    assert!(err.to_string().contains("base_ckpt"), "{err}");
}

#[test]
fn finetune_with_degenerate_weights_matches_controlnet_continuation() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_pipeline(dir.path(), 9, ControlKind::Depth);

    // (a) continue the controlnet stage for 15 more steps
    let mut cont = p.cfg.clone();
    cont.run.out_dir = dir.path().join("runs_cont");
    cont.train.base_ckpt = p.control_ckpt.clone();
    cont.train.iterations = 45; // 30 done + 15 more
    let cont_out = run_train_controlnet::<f32>(&cont).unwrap();

    // (b) finetune with alpha = beta = 0 for 15 steps from the same checkpoint
    let mut ft = p.cfg.clone();
    ft.run.out_dir = dir.path().join("runs_ft");
    ft.train.stage = StageName::Finetune;
    ft.train.control_ckpt = p.control_ckpt.clone();
    ft.train.probe_ckpt = p.align_probe.clone();
    ft.train.reward_probe_ckpt = p.reward_probe.clone();
    ft.train.iterations = 15;
    ft.loss.alpha = 0.0;
    ft.loss.beta = 0.0;
    let ft_out = run_finetune::<f32>(&ft).unwrap();

    let cont_tail: Vec<f64> =
        cont_out.log[cont_out.log.len() - 15..].iter().map(|r| r.loss_total).collect();
    let ft_losses: Vec<f64> = ft_out.log.iter().map(|r| r.loss_total).collect();
    for (i, (a, b)) in cont_tail.iter().zip(&ft_losses).enumerate() {
        assert!(
            (a - b).abs() < 1e-6,
            "step {i}: continuation loss {a} vs degenerate finetune loss {b}"
        );
    }
    assert_eq!(branch_bytes(&cont_out.final_ckpt), branch_bytes(&ft_out.final_ckpt));
}

#[test]
fn finetune_freezes_probe_and_base() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_pipeline(dir.path(), 10, ControlKind::Edge);

    let mut ft = p.cfg.clone();
    ft.train.stage = StageName::Finetune;
    ft.train.control_ckpt = p.control_ckpt.clone();
    ft.train.probe_ckpt = p.align_probe.clone();
    ft.train.iterations = 10;
    ft.loss.alpha = 1.0;
    ft.loss.beta = 1.0;
    ft.loss.tau_reward = 0.2;

    let probe_before = std::fs::read(p.align_probe.join("weights.bin")).unwrap();
    let base_before = unet_bytes(&p.control_ckpt);
    let branch_before = branch_bytes(&p.control_ckpt);

    let out = run_finetune::<f32>(&ft).unwrap();

    let probe_after = std::fs::read(p.align_probe.join("weights.bin")).unwrap();
    assert_eq!(probe_before, probe_after, "probe files must not change");
    assert_eq!(unet_bytes(&out.final_ckpt), base_before, "base UNet must stay frozen");
    assert_ne!(branch_bytes(&out.final_ckpt), branch_before, "branch must be trained");

    // logged total must equal the logged weighted sum of parts
    for r in &out.log {
        let recon = r.loss_diffusion + ft.loss.alpha * r.loss_reward + ft.loss.beta * r.loss_align;
        assert!((recon - r.loss_total).abs() < 1e-6, "step {}: {recon} vs {}", r.step, r.loss_total);
    }
    // alignment is active on most steps (tau = 0.92T); reward only on low-t steps
    assert!(out.log.iter().any(|r| r.loss_align > 0.0));
}

#[test]
fn finetune_requires_probe_and_control_ckpts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config(dir.path(), 11);
    gen_data(&cfg);
    cfg.train.stage = StageName::Finetune;
    let err = run_finetune::<f32>(&cfg).unwrap_err();
    assert!(err.to_string().contains("control_ckpt"), "{err}");
}

#[test]
fn depth_finetune_requires_reward_probe() {
    let dir = tempfile::tempdir().unwrap();
    let p = run_pipeline(dir.path(), 12, ControlKind::Depth);
    let mut ft = p.cfg.clone();
    ft.train.stage = StageName::Finetune;
    ft.train.control_ckpt = p.control_ckpt.clone();
    ft.train.probe_ckpt = p.align_probe.clone();
    ft.train.reward_probe_ckpt = PathBuf::new();
    ft.loss.alpha = 0.5;
    let err = run_finetune::<f32>(&ft).unwrap_err();
    assert!(err.to_string().contains("reward_probe_ckpt"), "{err}");
}

#[test]
fn training_resumes_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    // unbroken: 20 steps
    let mut a = smoke_config(dir.path().join("a").as_path(), 13);
    a.train.iterations = 20;
    a.train.ckpt_every = 20;
    gen_data(&a);
    let full = run_train_base::<f32>(&a).unwrap();

    // split: 10 steps, then resume to 20
    let mut b = smoke_config(dir.path().join("b").as_path(), 13);
    b.train.iterations = 10;
    b.train.ckpt_every = 10;
    gen_data(&b);
    let half = run_train_base::<f32>(&b).unwrap();
    let mut b2 = b.clone();
    b2.train.base_ckpt = half.final_ckpt.clone();
    b2.train.iterations = 20;
    b2.train.ckpt_every = 10;
    let resumed = run_train_base::<f32>(&b2).unwrap();

    assert_eq!(
        unet_bytes(&full.final_ckpt),
        unet_bytes(&resumed.final_ckpt),
        "resumed run diverged from the unbroken run"
    );
    let full_tail: Vec<f64> = full.log[10..].iter().map(|r| r.loss_total).collect();
    let resumed_losses: Vec<f64> = resumed.log.iter().map(|r| r.loss_total).collect();
    assert_eq!(full_tail, resumed_losses);
}
