use ctrldiff::config::{Config, ProbeSource, StageName};
use ctrldiff::data::{generate_dataset, write_dataset};
use ctrldiff::networks::UNetConfig;
use ctrldiff::training::{run_finetune, run_train_base, run_train_controlnet, run_train_probe};
use std::time::Instant;

fn main() {
    let root = std::path::PathBuf::from("/tmp/bench_fixture");
    let _ = std::fs::remove_dir_all(&root);
    let mut cfg = Config::default();
    cfg.run.out_dir = root.join("runs");
    cfg.data.path = root.join("train");
    cfg.data.eval_path = root.join("eval");
    cfg.data.resolution = 32;
    cfg.model = UNetConfig {
        base_width: 16,
        time_dim: 64,
        norm_groups: 8,
        resolution: 32,
        ..UNetConfig::default()
    };
    cfg.schedule.steps = 1000;
    cfg.train.batch_size = 8;
    cfg.train.lr = 2e-3;
    cfg.probe.bottleneck = 32;

    let t0 = Instant::now();
    let train = generate_dataset::<f32>(7, 512, 32, false);
    write_dataset(&train, &cfg.data.path).unwrap();
    let eval = generate_dataset::<f32>(8, 256, 32, false);
    write_dataset(&eval, &cfg.data.eval_path).unwrap();
    println!("gen-data: {:.1}s", t0.elapsed().as_secs_f64());

    cfg.train.iterations = 20;
    cfg.train.ckpt_every = 20;
    let t0 = Instant::now();
    let base = run_train_base::<f32>(&cfg).unwrap();
    println!("base: {:.3}s/step", t0.elapsed().as_secs_f64() / 20.0);

    cfg.train.base_ckpt = base.final_ckpt.clone();
    let t0 = Instant::now();
    let ctl = run_train_controlnet::<f32>(&cfg).unwrap();
    println!("controlnet: {:.3}s/step", t0.elapsed().as_secs_f64() / 20.0);

    cfg.probe.model_ckpt = ctl.final_ckpt.clone();
    cfg.probe.iterations = 20;
    cfg.probe.source = ProbeSource::Controlled;
    let t0 = Instant::now();
    let align = run_train_probe::<f32>(&cfg).unwrap();
    println!("probe (incl bucket val): {:.3}s/step", t0.elapsed().as_secs_f64() / 20.0);

    cfg.probe.model_ckpt = base.final_ckpt.clone();
    cfg.probe.source = ProbeSource::Base;
    let reward = run_train_probe::<f32>(&cfg).unwrap();

    cfg.train.stage = StageName::Finetune;
    cfg.train.control_ckpt = ctl.final_ckpt.clone();
    cfg.train.probe_ckpt = align.ckpt_dir.clone();
    cfg.train.reward_probe_ckpt = reward.ckpt_dir.clone();
    cfg.train.iterations = 40; // 20 on top of 20 controlnet steps
    let t0 = Instant::now();
    let _ft = run_finetune::<f32>(&cfg).unwrap();
    println!("finetune depth (a=0.5 b=1): {:.3}s/step", t0.elapsed().as_secs_f64() / 20.0);
}
