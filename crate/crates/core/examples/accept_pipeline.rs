// Calibration playground for the acceptance fixtures: builds the full
// pipeline under a cache dir (skipping stages whose outputs exist) and prints
// the quantities the directional criteria assert on.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ctrldiff::ckpt::load_probe;
use ctrldiff::config::{Config, ProbeSource, StageName};
use ctrldiff::controls::ControlKind;
use ctrldiff::data::{generate_dataset, read_dataset, write_dataset};
use ctrldiff::eval::{run_evaluate, timestep_extraction_study, StudyInputs};
use ctrldiff::networks::{TapKind, UNetConfig};
use ctrldiff::probe::constant_predictor_rmse;
use ctrldiff::schedule::build_schedule;
use ctrldiff::training::{run_finetune, run_train_base, run_train_controlnet, run_train_probe};

const ROOT: &str = "/root/accept_fixtures";

fn base_config(root: &Path) -> Config {
    let mut cfg = Config::default();
    cfg.run.seed = 17;
    cfg.run.out_dir = root.join("runs");
    cfg.data.path = root.join("train");
    cfg.data.eval_path = root.join("eval");
    cfg.data.resolution = 32;
    cfg.data.master_seed = 7;
    cfg.model = UNetConfig {
        in_channels: 3,
        base_width: 16,
        channel_multipliers: vec![1, 2, 4],
        attention_levels: vec![1, 2],
        num_classes: 4,
        time_dim: 64,
        norm_groups: 8,
        resolution: 32,
        tap_kind: TapKind::SelfAttnOut,
    };
    cfg.schedule.steps = 1000;
    cfg.train.control_kind = ControlKind::Depth;
    cfg.train.batch_size = 8;
    cfg.train.lr = 1e-3;
    cfg.train.ckpt_every = 1000;
    cfg.probe.bottleneck = 32;
    cfg.probe.batch_size = 8;
    cfg.probe.lr = 2e-3;
    cfg.eval.samples = 64;
    cfg.eval.sample_steps = 12;
    cfg.eval.guidance_scale = 3.0;
    cfg.eval.seeds = vec![0, 1, 2, 3];
    cfg.eval.batch_size = 16;
    cfg
}

fn timed<R>(label: &str, f: impl FnOnce() -> R) -> R {
    let t0 = Instant::now();
    let r = f();
    println!("[{label}] {:.1}s", t0.elapsed().as_secs_f64());
    r
}

fn main() {
    let root = PathBuf::from(ROOT);
    std::fs::create_dir_all(&root).unwrap();
    let cfg0 = base_config(&root);

    // datasets: 512 train / 256 eval
    if !cfg0.data.path.join("manifest.json").exists() {
        timed("gen-data", || {
            let train = generate_dataset::<f32>(cfg0.data.master_seed, 512, 32, false);
            write_dataset(&train, &cfg0.data.path).unwrap();
            let eval = generate_dataset::<f32>(917, 256, 32, false);
            write_dataset(&eval, &cfg0.data.eval_path).unwrap();
        });
    }

    // base pretrain: 2000 iters
    let base_ckpt = root.join("runs/pretrain_base/2000");
    if !base_ckpt.exists() {
        let mut cfg = cfg0.clone();
        cfg.train.iterations = 2000;
        let out = timed("train-base", || run_train_base::<f32>(&cfg).unwrap());
        let tail: f64 =
            out.log[out.log.len() - 100..].iter().map(|r| r.loss_diffusion).sum::<f64>() / 100.0;
        println!("base tail loss: {tail:.4}");
    }

    // controlnet pretrain: 2000 iters
    let ctl_ckpt = root.join("runs/pretrain_controlnet/2000");
    if !ctl_ckpt.exists() {
        let mut cfg = cfg0.clone();
        cfg.train.iterations = 2000;
        cfg.train.base_ckpt = base_ckpt.clone();
        let out = timed("train-controlnet", || run_train_controlnet::<f32>(&cfg).unwrap());
        let tail: f64 =
            out.log[out.log.len() - 100..].iter().map(|r| r.loss_diffusion).sum::<f64>() / 100.0;
        println!("controlnet tail loss: {tail:.4}");
    }

    // probes: alignment (controlled, 2000@seed 17), RM (base, 1500@seed 1000), EM (base, 2500@seed 1001)
    let align_probe = root.join("runs/probe_controlled_depth");
    if !align_probe.exists() {
        let mut cfg = cfg0.clone();
        cfg.probe.iterations = 2000;
        cfg.probe.source = ProbeSource::Controlled;
        cfg.probe.model_ckpt = ctl_ckpt.clone();
        let out = timed("train-probe align", || run_train_probe::<f32>(&cfg).unwrap());
        for b in &out.log.buckets {
            println!("align probe bucket [{} {}]: {:.4}", b.t_lo, b.t_hi, b.rmse);
        }
    }
    let rm_probe = root.join("probe_rm");
    if !rm_probe.exists() {
        let mut cfg = cfg0.clone();
        cfg.run.seed = 1000;
        cfg.run.out_dir = root.join("rmtmp");
        cfg.probe.iterations = 1500;
        cfg.probe.source = ProbeSource::Base;
        cfg.probe.model_ckpt = base_ckpt.clone();
        let out = timed("train-probe rm", || run_train_probe::<f32>(&cfg).unwrap());
        std::fs::rename(&out.ckpt_dir, &rm_probe).unwrap();
        for b in &out.log.buckets {
            println!("rm probe bucket [{} {}]: {:.4}", b.t_lo, b.t_hi, b.rmse);
        }
    }
    let em_probe = root.join("probe_em");
    if !em_probe.exists() {
        let mut cfg = cfg0.clone();
        cfg.run.seed = 1001;
        cfg.run.out_dir = root.join("emtmp");
        cfg.probe.iterations = 2500;
        cfg.probe.source = ProbeSource::Base;
        cfg.probe.model_ckpt = base_ckpt.clone();
        let out = timed("train-probe em", || run_train_probe::<f32>(&cfg).unwrap());
        std::fs::rename(&out.ckpt_dir, &em_probe).unwrap();
        for b in &out.log.buckets {
            println!("em probe bucket [{} {}]: {:.4}", b.t_lo, b.t_hi, b.rmse);
        }
    }

    // constant-predictor baseline
    {
        let train = read_dataset::<f32>(&cfg0.data.path).unwrap();
        let eval = read_dataset::<f32>(&cfg0.data.eval_path).unwrap();
        let c = constant_predictor_rmse(&train, &eval, ControlKind::Depth);
        println!("constant-predictor holdout rmse: {c:.4}");
    }

    // study at high noise
    {
        let base = ctrldiff::ckpt::load_model::<f32>(&base_ckpt).unwrap();
        let ctl = ctrldiff::ckpt::load_model::<f32>(&ctl_ckpt).unwrap();
        let branch = ctl.branch.unwrap();
        let bp = load_probe::<f32>(&em_probe).unwrap().probe; // base probe line: use EM probe
        let cp = load_probe::<f32>(&align_probe).unwrap().probe;
        let rp = load_probe::<f32>(&rm_probe).unwrap().probe;
        let ds = read_dataset::<f32>(&cfg0.data.eval_path).unwrap();
        let sched = build_schedule::<f32>(1000, cfg0.schedule.kind, 1e-4, 0.02).unwrap();
        let inputs = StudyInputs {
            base_unet: &base.unet,
            control_unet: &ctl.unet,
            branch: &branch,
            base_probe: &bp,
            control_probe: &cp,
            reward_probe: Some(&rp),
            kind: ControlKind::Depth,
        };
        let rows = timed("study", || {
            timestep_extraction_study(&inputs, &ds, &sched, &[10, 400, 800, 900], 256, &[0, 1, 2, 3], 16)
                .unwrap()
        });
        for r in &rows {
            println!(
                "study t={} {}: onestep {:.4} probe {:.4}",
                r.t, r.model, r.rmse_onestep, r.rmse_probe
            );
        }
    }

    // finetune runs
    let runs: [(&str, f64, f64, f64, f64); 5] = [
        ("a_baseline", 0.0, 0.0, 0.0, 0.0),
        ("b_reward400", 0.5, 0.0, 400.0, 0.0),
        ("c_full", 0.5, 1.0, 400.0, 920.0),
        ("d_reward200", 0.5, 0.0, 200.0, 0.0),
        ("e_reward920", 0.5, 0.0, 920.0, 0.0),
    ];
    for (name, alpha, beta, tau_r, tau_a) in runs {
        let dir = root.join(format!("ft_{name}"));
        if dir.join("finetune").exists() {
            continue;
        }
        let mut cfg = cfg0.clone();
        cfg.run.out_dir = dir.clone();
        cfg.train.stage = StageName::Finetune;
        cfg.train.iterations = 1000;
        cfg.train.lr = 1e-4;
        cfg.train.control_ckpt = ctl_ckpt.clone();
        cfg.train.probe_ckpt = align_probe.clone();
        cfg.train.reward_probe_ckpt = rm_probe.clone();
        cfg.loss.alpha = alpha;
        cfg.loss.beta = beta;
        cfg.loss.tau_reward = tau_r;
        cfg.loss.tau_align = tau_a;
        let out = timed(&format!("finetune {name}"), || run_finetune::<f32>(&cfg).unwrap());
        println!("{name}: final ckpt {}", out.final_ckpt.display());
    }

    // evaluations
    for (name, _, _, _, _) in runs {
        let dir = root.join(format!("ft_{name}"));
        let ckpt = dir.join("finetune/3000");
        let marker = dir.join("eval_done.txt");
        if marker.exists() {
            println!("{}", std::fs::read_to_string(&marker).unwrap().trim_end());
            continue;
        }
        let mut cfg = cfg0.clone();
        cfg.run.out_dir = dir.clone();
        cfg.eval.checkpoint = ckpt;
        cfg.eval.probe_ckpt = em_probe.clone();
        let (report, _) = timed(&format!("evaluate {name}"), || run_evaluate::<f32>(&cfg).unwrap());
        let line = format!(
            "{name}: rmse {:.5} ssim {:.4} fid {:.5}",
            report.mean_rmse, report.mean_ssim, report.toy_fidelity
        );
        println!("{line}");
        std::fs::write(&marker, format!("{line}\n")).unwrap();
    }
}
