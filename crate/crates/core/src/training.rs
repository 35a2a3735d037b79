//! Training stages: base pretraining, control-branch pretraining, probe
//! training, and the combined fine-tuning stage with reward and alignment
//! losses.
//!
//! Every random draw comes from a stream addressed by `(seed, name, step)`,
//! so a run resumed from a checkpoint at step `k` consumes exactly the
//! generators an unbroken run would have used and reproduces it bit for bit.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::ckpt::{load_model, load_probe, save_model, save_probe, CkptManifest, Stage};
use crate::config::{Config, ProbeSource};
use crate::controls::ControlKind;
use crate::data::{read_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    alignment_loss, diffusion_loss, reward_loss, total_loss, EdgeExtractor, LossParts,
    LossWeights, ProbeDepthExtractor,
};
use crate::networks::{
    forward_with_control, ControlBranch, Trainability, UNet,
};
use crate::nn::Ctx;
use crate::opt::{clip_global_norm, Adam, AdamConfig};
use crate::probe::{gather_batch, train_probe, FeatureSource, ProbeConfig, ProbeModel, ProbeTrainOpts};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::schedule::{build_schedule, forward_diffuse_batch, noise_like, NoiseSchedule};
use crate::tensor::Tensor;

/// One row of the training CSV.
#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub t_mean: f64,
    pub loss_diffusion: f64,
    pub loss_reward: f64,
    pub loss_align: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
}

pub const TRAIN_CSV_HEADER: &str =
    "step,t_mean,loss_diffusion,loss_reward,loss_align,loss_total,grad_norm";

pub fn write_train_csv(path: &Path, rows: &[StepLog]) -> Result<()> {
    let mut out = String::from(TRAIN_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.t_mean, r.loss_diffusion, r.loss_reward, r.loss_align, r.loss_total,
            r.grad_norm
        ));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_ckpt: PathBuf,
    pub log: Vec<StepLog>,
    pub csv_path: PathBuf,
}

fn load_train_dataset<F: Scalar>(cfg: &Config) -> Result<Dataset<F>> {
    let ds = read_dataset::<F>(&cfg.data.path)?;
    if ds.is_empty() {
        return Err(Error::Config(format!(
            "training dataset at {} is empty",
            cfg.data.path.display()
        )));
    }
    if ds.resolution() != cfg.model.resolution {
        return Err(Error::Shape(format!(
            "dataset resolution {} vs model resolution {}",
            ds.resolution(),
            cfg.model.resolution
        )));
    }
    Ok(ds)
}

fn sched_from_cfg<F: Scalar>(cfg: &Config) -> Result<NoiseSchedule<F>> {
    build_schedule(cfg.schedule.steps, cfg.schedule.kind, cfg.schedule.beta_min, cfg.schedule.beta_max)
}

/// Per-step batch draw shared by all stages: indices, timesteps, labels with
/// classifier-free guidance dropping applied.
struct StepBatch<F: Scalar> {
    images: Tensor<F>,
    controls: Tensor<F>,
    labels: Vec<usize>,
    ts: Vec<usize>,
    eps: Tensor<F>,
    x_t: Tensor<F>,
}

#[allow(clippy::too_many_arguments)]
fn draw_step_batch<F: Scalar>(
    ds: &Dataset<F>,
    kind: ControlKind,
    sched: &NoiseSchedule<F>,
    seed: u64,
    step: u64,
    batch_size: usize,
    drop_prob: f64,
    null_label: usize,
    t_cap: Option<usize>,
) -> StepBatch<F> {
    let mut brng = stream(seed, "batch", step);
    let indices: Vec<usize> = (0..batch_size).map(|_| brng.gen_range(0..ds.len())).collect();
    let (images, controls, mut labels) = gather_batch(ds, &indices, kind);

    let mut drng = stream(seed, "drop", step);
    for l in labels.iter_mut() {
        if drng.gen_range(0.0..1.0) < drop_prob {
            *l = null_label;
        }
    }

    let t_hi = t_cap.unwrap_or(sched.t_max()).max(1);
    let mut trng = stream(seed, "t", step);
    let ts: Vec<usize> = (0..batch_size).map(|_| trng.gen_range(1..=t_hi)).collect();

    let eps = noise_like::<F>(images.shape(), seed, "eps", step);
    let x_t = forward_diffuse_batch(&images, &ts, &eps, sched);
    StepBatch { images, controls, labels, ts, eps, x_t }
}

fn stage_dir(cfg: &Config, stage: Stage) -> PathBuf {
    cfg.run.out_dir.join(stage.to_string())
}

fn save_stage_ckpt<F: Scalar>(
    cfg: &Config,
    stage: Stage,
    step: usize,
    unet: &UNet<F>,
    branch: Option<&ControlBranch<F>>,
    adam: &Adam<F>,
    parent: Option<String>,
    note: &str,
) -> Result<PathBuf> {
    let dir = stage_dir(cfg, stage).join(step.to_string());
    let manifest = CkptManifest {
        dtype: F::DTYPE.into(),
        stage: Some(stage),
        step,
        model: Some(unet.cfg.clone()),
        probe: None,
        control_kind: Some(cfg.train.control_kind),
        parent,
        note: note.into(),
    };
    save_model(&dir, &manifest, unet, branch, Some(adam))?;
    Ok(dir)
}

/// Resolved fine-tuning dependencies.
struct FinetuneSetup<F: Scalar> {
    unet: UNet<F>,
    branch: ControlBranch<F>,
    align_probe: ProbeModel<F>,
    reward_probe: Option<ProbeModel<F>>,
    adam: Adam<F>,
    start_step: usize,
    parent: String,
}

fn check_probe_matches_model<F: Scalar>(probe: &ProbeModel<F>, unet: &UNet<F>) -> Result<()> {
    let expect = ProbeConfig::for_model(&unet.cfg, probe.cfg.control_kind, probe.cfg.bottleneck);
    if expect.taps != probe.cfg.taps {
        return Err(Error::TapMismatch(format!(
            "probe taps {:?} do not match the model's tap layout {:?}",
            probe.cfg.taps, expect.taps
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage: pretrain base
// ---------------------------------------------------------------------------

/// Trains the bare UNet on the diffusion objective.
pub fn run_train_base<F: Scalar>(cfg: &Config) -> Result<TrainOutcome> {
    let ds = load_train_dataset::<F>(cfg)?;
    let sched = sched_from_cfg::<F>(cfg)?;
    let seed = cfg.run.seed;

    let (mut unet, mut adam, start_step) = if cfg.train.base_ckpt.as_os_str().is_empty() {
        let unet = UNet::init(cfg.model.clone(), &mut stream(seed, "init-unet", 0))?;
        (unet, Adam::new(AdamConfig { lr: cfg.train.lr, ..Default::default() }), 0usize)
    } else {
        let loaded = load_model::<F>(&cfg.train.base_ckpt)?;
        let adam = loaded
            .adam
            .unwrap_or_else(|| Adam::new(AdamConfig { lr: cfg.train.lr, ..Default::default() }));
        (loaded.unet, adam, loaded.manifest.step)
    };

    let mut log = Vec::new();
    let mut last_dir = PathBuf::new();
    for step in start_step + 1..=cfg.train.iterations {
        let b = draw_step_batch(
            &ds,
            cfg.train.control_kind,
            &sched,
            seed,
            step as u64,
            cfg.train.batch_size,
            cfg.train.guidance_drop_prob,
            cfg.model.null_label(),
            None,
        );
        let mut cx = Ctx::new();
        let x = cx.g.constant(b.x_t);
        let ieps = cx.g.constant(b.eps);
        let (eps_hat, _) = unet.forward_eps(&mut cx, x, &b.ts, &b.labels, false)?;
        let loss = diffusion_loss(&mut cx, ieps, eps_hat)?;
        let grads = cx.g.backward(loss);

        let mut by_name: HashMap<String, Tensor<F>> = HashMap::new();
        for (name, id) in cx.bindings() {
            by_name.insert(name.clone(), grads.dense(*id, cx.g.shape(*id)));
        }
        let grad_norm = clip_global_norm(&mut by_name, cfg.train.grad_clip);
        adam.update(&by_name, |f| unet.visit_params_mut(f));

        let lv = cx.g.value(loss).item().to_f64();
        log.push(StepLog {
            step,
            t_mean: mean_t(&b.ts),
            loss_diffusion: lv,
            loss_reward: 0.0,
            loss_align: 0.0,
            loss_total: lv,
            grad_norm,
        });
        if step % cfg.train.ckpt_every == 0 || step == cfg.train.iterations {
            last_dir =
                save_stage_ckpt(cfg, Stage::PretrainBase, step, &unet, None, &adam, None, "base")?;
        }
    }
    if last_dir.as_os_str().is_empty() {
        last_dir =
            save_stage_ckpt(cfg, Stage::PretrainBase, start_step, &unet, None, &adam, None, "base")?;
    }
    let csv_path = stage_dir(cfg, Stage::PretrainBase).join("train_log.csv");
    write_train_csv(&csv_path, &log)?;
    Ok(TrainOutcome { final_ckpt: last_dir, log, csv_path })
}

// ---------------------------------------------------------------------------
// Stage: pretrain controlnet
// ---------------------------------------------------------------------------

/// Duplicates the pretrained base encoder into a control branch and trains the
/// branch on the diffusion objective (base frozen unless `joint_base`).
pub fn run_train_controlnet<F: Scalar>(cfg: &Config) -> Result<TrainOutcome> {
    if cfg.train.base_ckpt.as_os_str().is_empty() {
        return Err(Error::Config(
            "train.base_ckpt is required for the controlnet stage (pretrained base weights)".into(),
        ));
    }
    let ds = load_train_dataset::<F>(cfg)?;
    let sched = sched_from_cfg::<F>(cfg)?;
    let seed = cfg.run.seed;

    let loaded = load_model::<F>(&cfg.train.base_ckpt)?;
    let mut unet = loaded.unet;
    let (mut branch, mut adam, start_step) = match (loaded.branch, loaded.manifest.stage) {
        // resuming a controlnet run
        (Some(branch), Some(Stage::PretrainControlnet)) => {
            let adam = loaded
                .adam
                .unwrap_or_else(|| Adam::new(AdamConfig { lr: cfg.train.lr, ..Default::default() }));
            (branch, adam, loaded.manifest.step)
        }
        _ => {
            let branch = ControlBranch::from_base(&unet, &mut stream(seed, "init-branch", 0));
            (branch, Adam::new(AdamConfig { lr: cfg.train.lr, ..Default::default() }), 0usize)
        }
    };

    let train = if cfg.train.joint_base { Trainability { base: true, branch: true } } else { Trainability::BRANCH_ONLY };
    let parent = cfg.train.base_ckpt.display().to_string();

    let mut log = Vec::new();
    let mut last_dir = PathBuf::new();
    for step in start_step + 1..=cfg.train.iterations {
        let b = draw_step_batch(
            &ds,
            cfg.train.control_kind,
            &sched,
            seed,
            step as u64,
            cfg.train.batch_size,
            cfg.train.guidance_drop_prob,
            cfg.model.null_label(),
            None,
        );
        let mut cx = Ctx::new();
        let x = cx.g.constant(b.x_t);
        let ieps = cx.g.constant(b.eps);
        let ic = cx.g.constant(b.controls);
        let (eps_hat, _) = forward_with_control(
            &mut cx, &unet, &branch, x, &b.ts, &b.labels, ic, false, train,
        )?;
        let loss = diffusion_loss(&mut cx, ieps, eps_hat)?;
        let grads = cx.g.backward(loss);

        let mut by_name: HashMap<String, Tensor<F>> = HashMap::new();
        for (name, id) in cx.bindings() {
            by_name.insert(name.clone(), grads.dense(*id, cx.g.shape(*id)));
        }
        let grad_norm = clip_global_norm(&mut by_name, cfg.train.grad_clip);
        adam.update(&by_name, |f| branch.visit_params_mut(f));
        if cfg.train.joint_base {
            adam.update(&by_name, |f| unet.visit_params_mut(f));
        }

        let lv = cx.g.value(loss).item().to_f64();
        log.push(StepLog {
            step,
            t_mean: mean_t(&b.ts),
            loss_diffusion: lv,
            loss_reward: 0.0,
            loss_align: 0.0,
            loss_total: lv,
            grad_norm,
        });
        if step % cfg.train.ckpt_every == 0 || step == cfg.train.iterations {
            last_dir = save_stage_ckpt(
                cfg,
                Stage::PretrainControlnet,
                step,
                &unet,
                Some(&branch),
                &adam,
                Some(parent.clone()),
                "controlnet",
            )?;
        }
    }
    if last_dir.as_os_str().is_empty() {
        last_dir = save_stage_ckpt(
            cfg,
            Stage::PretrainControlnet,
            start_step,
            &unet,
            Some(&branch),
            &adam,
            Some(parent.clone()),
            "controlnet",
        )?;
    }
    let csv_path = stage_dir(cfg, Stage::PretrainControlnet).join("train_log.csv");
    write_train_csv(&csv_path, &log)?;
    Ok(TrainOutcome { final_ckpt: last_dir, log, csv_path })
}

// ---------------------------------------------------------------------------
// Stage: finetune (diffusion + reward + alignment)
// ---------------------------------------------------------------------------

fn finetune_setup<F: Scalar>(cfg: &Config) -> Result<FinetuneSetup<F>> {
    if cfg.train.control_ckpt.as_os_str().is_empty() {
        return Err(Error::Config("train.control_ckpt is required for finetuning".into()));
    }
    if cfg.train.probe_ckpt.as_os_str().is_empty() {
        return Err(Error::Config(
            "train.probe_ckpt (alignment probe) is required for finetuning".into(),
        ));
    }
    let loaded = load_model::<F>(&cfg.train.control_ckpt)?;
    let unet = loaded.unet;
    let branch = loaded
        .branch
        .ok_or_else(|| Error::Checkpoint("finetune needs a checkpoint with a control branch".into()))?;

    let align = load_probe::<F>(&cfg.train.probe_ckpt)?;
    if align.probe.cfg.control_kind != cfg.train.control_kind {
        return Err(Error::KindMismatch {
            expected: cfg.train.control_kind.to_string(),
            got: align.probe.cfg.control_kind.to_string(),
        });
    }
    check_probe_matches_model(&align.probe, &unet)?;

    let reward_probe = if cfg.train.control_kind == ControlKind::Depth && cfg.loss.alpha > 0.0 {
        if cfg.train.reward_probe_ckpt.as_os_str().is_empty() {
            return Err(Error::Config(
                "train.reward_probe_ckpt is required for depth reward fine-tuning".into(),
            ));
        }
        let rp = load_probe::<F>(&cfg.train.reward_probe_ckpt)?;
        check_probe_matches_model(&rp.probe, &unet)?;
        Some(rp.probe)
    } else {
        None
    };

    let adam = loaded
        .adam
        .unwrap_or_else(|| Adam::new(AdamConfig { lr: cfg.train.lr, ..Default::default() }));
    let start_step = loaded.manifest.step;
    Ok(FinetuneSetup {
        unet,
        branch,
        align_probe: align.probe,
        reward_probe,
        adam,
        start_step,
        parent: cfg.train.control_ckpt.display().to_string(),
    })
}

/// Fine-tunes the control branch with the combined objective. The base UNet
/// and both probes stay frozen; gating follows the resolved thresholds.
pub fn run_finetune<F: Scalar>(cfg: &Config) -> Result<TrainOutcome> {
    let ds = load_train_dataset::<F>(cfg)?;
    let sched = sched_from_cfg::<F>(cfg)?;
    let seed = cfg.run.seed;
    let kind = cfg.train.control_kind;

    let setup = finetune_setup::<F>(cfg)?;
    let FinetuneSetup { mut unet, mut branch, align_probe, reward_probe, mut adam, start_step, parent } =
        setup;
    adam.cfg.lr = cfg.train.lr;

    let weights = LossWeights {
        alpha: cfg.loss.alpha,
        beta: cfg.loss.beta,
        tau_reward: sched.resolve_threshold(cfg.loss.tau_reward),
        tau_align: sched.resolve_threshold(cfg.loss.tau_align),
    };
    weights.validate(sched.t_max())?;

    let train = if cfg.train.joint_base {
        Trainability { base: true, branch: true }
    } else {
        Trainability::BRANCH_ONLY
    };
    let reward_active = weights.alpha > 0.0 && weights.tau_reward > 0;
    let align_active = weights.beta > 0.0 && weights.tau_align > 0;

    let mut log = Vec::new();
    let mut last_dir = PathBuf::new();
    let end_step = start_step + cfg.train.iterations;
    for step in start_step + 1..=end_step {
        // optional restricted-t mode: odd steps draw t inside the reward window
        let t_cap = if cfg.train.restrict_t_sampling && reward_active && step % 2 == 1 {
            Some(weights.tau_reward)
        } else {
            None
        };
        let b = draw_step_batch(
            &ds,
            kind,
            &sched,
            seed,
            step as u64,
            cfg.train.batch_size,
            cfg.train.guidance_drop_prob,
            cfg.model.null_label(),
            t_cap,
        );
        let mut cx = Ctx::new();
        let x = cx.g.constant(b.x_t);
        let ieps = cx.g.constant(b.eps);
        let ic = cx.g.constant(b.controls);
        let (eps_hat, bundle) = forward_with_control(
            &mut cx,
            &unet,
            &branch,
            x,
            &b.ts,
            &b.labels,
            ic,
            align_active,
            train,
        )?;
        let ld = diffusion_loss(&mut cx, ieps, eps_hat)?;
        let lr_node = if reward_active {
            match (&reward_probe, kind) {
                (_, ControlKind::Edge) => reward_loss(
                    &mut cx,
                    x,
                    &b.ts,
                    eps_hat,
                    ic,
                    kind,
                    &sched,
                    &EdgeExtractor,
                    weights.tau_reward,
                )?,
                (Some(rp), ControlKind::Depth) => {
                    let extractor = ProbeDepthExtractor::new(&unet, rp, &sched);
                    reward_loss(
                        &mut cx,
                        x,
                        &b.ts,
                        eps_hat,
                        ic,
                        kind,
                        &sched,
                        &extractor,
                        weights.tau_reward,
                    )?
                }
                (None, ControlKind::Depth) => unreachable!("checked in finetune_setup"),
            }
        } else {
            cx.g.zero_scalar()
        };
        let la_node = if align_active {
            alignment_loss(&mut cx, &bundle, ic, kind, &align_probe, weights.tau_align)?
        } else {
            cx.g.zero_scalar()
        };
        let lt = total_loss(
            &mut cx,
            LossParts { diffusion: ld, reward: lr_node, align: la_node },
            &weights,
        );
        let grads = cx.g.backward(lt);

        let mut by_name: HashMap<String, Tensor<F>> = HashMap::new();
        for (name, id) in cx.bindings() {
            by_name.insert(name.clone(), grads.dense(*id, cx.g.shape(*id)));
        }
        let grad_norm = clip_global_norm(&mut by_name, cfg.train.grad_clip);
        adam.update(&by_name, |f| branch.visit_params_mut(f));
        if cfg.train.joint_base {
            adam.update(&by_name, |f| unet.visit_params_mut(f));
        }

        log.push(StepLog {
            step,
            t_mean: mean_t(&b.ts),
            loss_diffusion: cx.g.value(ld).item().to_f64(),
            loss_reward: cx.g.value(lr_node).item().to_f64(),
            loss_align: cx.g.value(la_node).item().to_f64(),
            loss_total: cx.g.value(lt).item().to_f64(),
            grad_norm,
        });
        if (step - start_step) % cfg.train.ckpt_every == 0 || step == end_step {
            last_dir = save_stage_ckpt(
                cfg,
                Stage::Finetune,
                step,
                &unet,
                Some(&branch),
                &adam,
                Some(parent.clone()),
                &format!(
                    "alpha={} beta={} tau_reward={} tau_align={}",
                    weights.alpha, weights.beta, weights.tau_reward, weights.tau_align
                ),
            )?;
        }
        let _ = &b.images;
    }
    if last_dir.as_os_str().is_empty() {
        last_dir = save_stage_ckpt(
            cfg,
            Stage::Finetune,
            start_step,
            &unet,
            Some(&branch),
            &adam,
            Some(parent.clone()),
            "finetune",
        )?;
    }
    let csv_path = stage_dir(cfg, Stage::Finetune).join("train_log.csv");
    write_train_csv(&csv_path, &log)?;
    Ok(TrainOutcome { final_ckpt: last_dir, log, csv_path })
}

// ---------------------------------------------------------------------------
// Stage: probe training
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ProbeOutcome {
    pub ckpt_dir: PathBuf,
    pub csv_path: PathBuf,
    pub bucket_csv_path: PathBuf,
    pub log: crate::probe::ProbeTrainLog,
}

/// Trains a readout probe on a frozen checkpoint's features and writes the
/// probe checkpoint plus CSV logs (loss per iteration, held-out bucket RMSE).
pub fn run_train_probe<F: Scalar>(cfg: &Config) -> Result<ProbeOutcome> {
    if cfg.probe.model_ckpt.as_os_str().is_empty() {
        return Err(Error::Config("probe.model_ckpt is required for probe training".into()));
    }
    let train_ds = load_train_dataset::<F>(cfg)?;
    let holdout = read_dataset::<F>(&cfg.data.eval_path)?;
    let sched = sched_from_cfg::<F>(cfg)?;
    let kind = cfg.train.control_kind;

    let loaded = load_model::<F>(&cfg.probe.model_ckpt)?;
    let unet = loaded.unet;
    let branch = loaded.branch;
    let source = match cfg.probe.source {
        ProbeSource::Base => FeatureSource::Base(&unet),
        ProbeSource::Controlled => {
            let b = branch.as_ref().ok_or_else(|| {
                Error::Config(
                    "probe.source = controlled requires a checkpoint with a control branch".into(),
                )
            })?;
            FeatureSource::Controlled(&unet, b)
        }
    };

    let pcfg = ProbeConfig::for_model(&unet.cfg, kind, cfg.probe.bottleneck);
    let probe = ProbeModel::init(pcfg, &mut stream(cfg.run.seed, "init-probe", 0))?;
    let opts = ProbeTrainOpts {
        iterations: cfg.probe.iterations,
        batch_size: cfg.probe.batch_size,
        lr: cfg.probe.lr,
        seed: cfg.run.seed,
        grad_clip: cfg.train.grad_clip,
    };
    let (probe, log) = train_probe(&source, &train_ds, &holdout, kind, probe, &sched, &opts)?;

    let source_name = match cfg.probe.source {
        ProbeSource::Base => "base",
        ProbeSource::Controlled => "controlled",
    };
    let dir = cfg.run.out_dir.join(format!("probe_{source_name}_{kind}"));
    let manifest = CkptManifest {
        dtype: F::DTYPE.into(),
        stage: None,
        step: cfg.probe.iterations,
        model: Some(unet.cfg.clone()),
        probe: Some(probe.cfg.clone()),
        control_kind: Some(kind),
        parent: Some(cfg.probe.model_ckpt.display().to_string()),
        note: format!("probe on {source_name} features, seed {}", cfg.run.seed),
    };
    save_probe(&dir, &manifest, &probe)?;

    let csv_path = dir.join("probe_log.csv");
    let mut out = String::from("iteration,loss\n");
    for r in &log.rows {
        out.push_str(&format!("{},{}\n", r.iteration, r.loss));
    }
    fs::write(&csv_path, out).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let bucket_csv_path = dir.join("probe_buckets.csv");
    let mut out = String::from("t_lo,t_hi,rmse\n");
    for b in &log.buckets {
        out.push_str(&format!("{},{},{}\n", b.t_lo, b.t_hi, b.rmse));
    }
    fs::write(&bucket_csv_path, out)
        .map_err(|e| Error::io(bucket_csv_path.display().to_string(), e))?;

    Ok(ProbeOutcome { ckpt_dir: dir, csv_path, bucket_csv_path, log })
}

fn mean_t(ts: &[usize]) -> f64 {
    ts.iter().sum::<usize>() as f64 / ts.len().max(1) as f64
}
