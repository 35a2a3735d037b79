//! Evaluation: control-alignment metrics over generated samples, the
//! probe-vs-one-step timestep study, and the threshold ablation grid.
//!
//! Control adherence compares the extraction operator's output on a generated
//! image against the same operator's output on the reference image, with the
//! dataset's analytic map as the conditioning input. Depth extraction uses an
//! evaluation probe over the frozen base model at a near-clean timestep;
//! edges use the closed-form edge extractor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ckpt::{load_model, load_probe};
use crate::config::Config;
use crate::controls::{extract_edges, ssim_raw, ControlKind};
use crate::data::{read_dataset, Dataset, SceneSample};
use crate::error::{Error, Result};
use crate::fidelity::{ensure_classifier, toy_fidelity, Classifier};
use crate::losses::{ControlExtractor, EdgeExtractor, ProbeDepthExtractor};
use crate::networks::{ControlBranch, ControlledSampler, UNet};
use crate::nn::Ctx;
use crate::probe::{FeatureSource, ProbeModel};
use crate::rng::stream_key;
use crate::scalar::{s, Scalar};
use crate::schedule::{
    build_schedule, forward_diffuse_batch, noise_like, sample, NoiseSchedule, SampleOpts,
};
use crate::tensor::Tensor;
use crate::training::run_finetune;

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// Source of generated images for evaluation.
pub trait EvalSampler<F: Scalar> {
    /// Generates `[0, 1]` images `(N, 3, R, R)` for the given records.
    fn generate(
        &self,
        records: &[&SceneSample<F>],
        kind: ControlKind,
        sched: &NoiseSchedule<F>,
        opts: &SampleOpts,
    ) -> Result<Tensor<F>>;
}

/// Real sampler: DDIM-style loop over the controlled model.
pub struct ModelEvalSampler<'a, F: Scalar> {
    pub unet: &'a UNet<F>,
    pub branch: &'a ControlBranch<F>,
}

impl<F: Scalar> EvalSampler<F> for ModelEvalSampler<'_, F> {
    fn generate(
        &self,
        records: &[&SceneSample<F>],
        kind: ControlKind,
        sched: &NoiseSchedule<F>,
        opts: &SampleOpts,
    ) -> Result<Tensor<F>> {
        let r = self.unet.cfg.resolution;
        let n = records.len();
        let labels: Vec<usize> = records.iter().map(|s| s.label).collect();
        let mut controls = Vec::with_capacity(n * r * r);
        for rec in records {
            controls.extend_from_slice(rec.control(kind).values.data());
        }
        let control = Tensor::new([n, 1, r, r], controls);
        let sampler = ControlledSampler { unet: self.unet, branch: self.branch };
        let x0 = sample(&sampler, &labels, Some(&control), &[n, 3, r, r], sched, opts)?;
        Ok(x0.map(|v| ((v + F::one()) * s::<F>(0.5)).max(F::zero()).min(F::one())))
    }
}

/// Oracle sampler that returns the dataset images themselves (pipeline
/// identity checks).
pub struct CheatingSampler;

impl<F: Scalar> EvalSampler<F> for CheatingSampler {
    fn generate(
        &self,
        records: &[&SceneSample<F>],
        _kind: ControlKind,
        _sched: &NoiseSchedule<F>,
        _opts: &SampleOpts,
    ) -> Result<Tensor<F>> {
        let r = records[0].image.shape()[1];
        let mut data = Vec::with_capacity(records.len() * 3 * r * r);
        for rec in records {
            data.extend_from_slice(rec.image.data());
        }
        Ok(Tensor::new([records.len(), 3, r, r], data))
    }
}

// ---------------------------------------------------------------------------
// Extraction operators
// ---------------------------------------------------------------------------

/// Evaluation-time control extraction from final images.
pub enum EvalExtractor<'a, F: Scalar> {
    Edge,
    /// Probe over frozen base features at a near-clean timestep.
    DepthProbe { unet: &'a UNet<F>, probe: &'a ProbeModel<F>, sched: &'a NoiseSchedule<F> },
}

impl<F: Scalar> EvalExtractor<'_, F> {
    /// Extracts `(N, R, R)` control values from `[0, 1]` images.
    pub fn extract(&self, images01: &Tensor<F>) -> Result<Tensor<F>> {
        let (n, _, h, w) = crate::tensor::dims4(images01.shape());
        match self {
            EvalExtractor::Edge => {
                let mut out = Vec::with_capacity(n * h * w);
                for i in 0..n {
                    let img = Tensor::new(
                        [3, h, w],
                        images01.data()[i * 3 * h * w..(i + 1) * 3 * h * w].to_vec(),
                    );
                    out.extend_from_slice(extract_edges(&img)?.values.data());
                }
                Ok(Tensor::new([n, h, w], out))
            }
            EvalExtractor::DepthProbe { unet, probe, sched } => {
                let ex = ProbeDepthExtractor::new(unet, probe, sched);
                let mut cx = Ctx::new();
                let x = cx.g.constant(images01.clone());
                let out = ex.extract(&mut cx, x)?;
                Ok(cx.g.value(out).clone().reshaped([n, h, w]))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub seed: u64,
    pub index: usize,
    pub label: usize,
    pub rmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub kind: ControlKind,
    pub guidance_scale: f64,
    pub seeds: Vec<u64>,
    /// Primary metric: RMSE for depth (lower better), SSIM for edges (higher
    /// better), averaged over seeds.
    pub metric_name: String,
    pub metric: f64,
    pub mean_rmse: f64,
    pub mean_ssim: f64,
    pub toy_fidelity: f64,
    pub per_seed: Vec<(u64, f64, f64, f64)>,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("seed,rmse,ssim,toy_fidelity\n");
        for (seed, rmse, ssim, fid) in &self.per_seed {
            out.push_str(&format!("{seed},{rmse},{ssim},{fid}\n"));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            self.mean_rmse, self.mean_ssim, self.toy_fidelity
        ));
        out
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("seed,index,label,rmse,ssim\n");
        for r in &self.samples {
            out.push_str(&format!("{},{},{},{},{}\n", r.seed, r.index, r.label, r.rmse, r.ssim));
        }
        out
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Mean of per-seed values in seed order (invariant to input permutation).
fn seed_ordered_mean(values: &BTreeMap<u64, f64>) -> f64 {
    let n = values.len().max(1) as f64;
    values.values().sum::<f64>() / n
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Core evaluation loop over an injected sampler.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_sampler<F: Scalar>(
    sampler: &dyn EvalSampler<F>,
    extractor: &EvalExtractor<F>,
    classifier: &Classifier<F>,
    ds: &Dataset<F>,
    kind: ControlKind,
    sched: &NoiseSchedule<F>,
    n_samples: usize,
    seeds: &[u64],
    guidance_scale: f64,
    sample_steps: usize,
    ancestral: bool,
    batch_size: usize,
) -> Result<EvalReport> {
    if seeds.len() < 4 {
        return Err(Error::Eval(format!(
            "evaluation needs >= 4 sampling seeds, got {}",
            seeds.len()
        )));
    }
    if !ds.has_kind(kind) {
        return Err(Error::Eval(format!("dataset lacks control kind {kind}")));
    }
    let n = n_samples.min(ds.len());
    if n == 0 {
        return Err(Error::Eval("empty evaluation set".into()));
    }
    let records: Vec<&SceneSample<F>> = ds.samples[..n].iter().collect();
    let r = ds.resolution();

    // reference extraction and reference image batch, computed once
    let mut ref_images = Vec::with_capacity(n * 3 * r * r);
    for rec in &records {
        ref_images.extend_from_slice(rec.image.data());
    }
    let ref_images = Tensor::new([n, 3, r, r], ref_images);
    let ref_extract = extractor.extract(&ref_images)?;

    let mut per_seed_rmse = BTreeMap::new();
    let mut per_seed_ssim = BTreeMap::new();
    let mut per_seed_fid = BTreeMap::new();
    let mut sample_rows = Vec::new();

    for &seed in seeds {
        let mut gen_images = Vec::with_capacity(n * 3 * r * r);
        for (bi, chunk) in records.chunks(batch_size).enumerate() {
            let opts = SampleOpts {
                steps: sample_steps,
                guidance_scale,
                seed: stream_key(seed, "eval-batch", bi as u64),
                ancestral,
            };
            let imgs = sampler.generate(chunk, kind, sched, &opts)?;
            gen_images.extend_from_slice(imgs.data());
        }
        let gen_images = Tensor::new([n, 3, r, r], gen_images);
        let gen_extract = extractor.extract(&gen_images)?;

        let mut rmse_sum = 0.0;
        let mut ssim_sum = 0.0;
        for i in 0..n {
            let a = &gen_extract.data()[i * r * r..(i + 1) * r * r];
            let b = &ref_extract.data()[i * r * r..(i + 1) * r * r];
            let rm = crate::controls::rmse_raw(a, b).to_f64();
            let ss = ssim_raw(a, b, r, r)?.to_f64();
            rmse_sum += rm;
            ssim_sum += ss;
            sample_rows.push(SampleRecord {
                seed,
                index: i,
                label: records[i].label,
                rmse: rm,
                ssim: ss,
            });
        }
        per_seed_rmse.insert(seed, rmse_sum / n as f64);
        per_seed_ssim.insert(seed, ssim_sum / n as f64);
        per_seed_fid.insert(seed, toy_fidelity(classifier, &gen_images, &ref_images)?);
    }

    let mean_rmse = seed_ordered_mean(&per_seed_rmse);
    let mean_ssim = seed_ordered_mean(&per_seed_ssim);
    let mean_fid = seed_ordered_mean(&per_seed_fid);
    let (metric_name, metric) = match kind {
        ControlKind::Depth => ("rmse".to_string(), mean_rmse),
        ControlKind::Edge => ("ssim".to_string(), mean_ssim),
    };
    let mut sorted_seeds = seeds.to_vec();
    sorted_seeds.sort_unstable();
    let per_seed = sorted_seeds
        .iter()
        .map(|&sd| (sd, per_seed_rmse[&sd], per_seed_ssim[&sd], per_seed_fid[&sd]))
        .collect();
    Ok(EvalReport {
        kind,
        guidance_scale,
        seeds: sorted_seeds,
        metric_name,
        metric,
        mean_rmse,
        mean_ssim,
        toy_fidelity: mean_fid,
        per_seed,
        samples: sample_rows,
    })
}

/// CLI entry: evaluates `eval.checkpoint` on the eval dataset and writes the
/// report CSVs. Depth runs require `eval.probe_ckpt` (the evaluation probe).
pub fn run_evaluate<F: Scalar>(cfg: &Config) -> Result<(EvalReport, PathBuf)> {
    let eval_ds = read_dataset::<F>(&cfg.data.eval_path)?;
    let train_ds = read_dataset::<F>(&cfg.data.path)?;
    let sched = build_schedule::<F>(
        cfg.schedule.steps,
        cfg.schedule.kind,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
    )?;
    if cfg.eval.checkpoint.as_os_str().is_empty() {
        return Err(Error::Config("eval.checkpoint is required".into()));
    }
    let loaded = load_model::<F>(&cfg.eval.checkpoint)?;
    let branch = loaded.branch.ok_or_else(|| {
        Error::Config("evaluation requires a checkpoint with a control branch".into())
    })?;
    let unet = loaded.unet;
    let kind = cfg.train.control_kind;

    let em_probe = match kind {
        ControlKind::Depth => {
            if cfg.eval.probe_ckpt.as_os_str().is_empty() {
                return Err(Error::Config(
                    "eval.probe_ckpt (evaluation probe) is required for depth evaluation".into(),
                ));
            }
            Some(load_probe::<F>(&cfg.eval.probe_ckpt)?.probe)
        }
        ControlKind::Edge => None,
    };
    let classifier = ensure_classifier(&cfg.run.out_dir, &train_ds, cfg.data.master_seed)?;

    let sampler = ModelEvalSampler { unet: &unet, branch: &branch };
    let extractor = match &em_probe {
        Some(p) => EvalExtractor::DepthProbe { unet: &unet, probe: p, sched: &sched },
        None => EvalExtractor::Edge,
    };
    let report = evaluate_with_sampler(
        &sampler,
        &extractor,
        &classifier,
        &eval_ds,
        kind,
        &sched,
        cfg.eval.samples,
        &cfg.eval.seeds,
        cfg.eval.guidance_scale,
        cfg.eval.sample_steps,
        cfg.eval.ancestral,
        cfg.eval.batch_size,
    )?;

    let label = match (&loaded.manifest.stage, loaded.manifest.step) {
        (Some(stage), step) => format!("{stage}_{step}"),
        (None, step) => format!("ckpt_{step}"),
    };
    let out_dir = cfg.run.out_dir.join("eval").join(label);
    write_text(&out_dir.join("eval_summary.csv"), &report.summary_csv())?;
    write_text(&out_dir.join("eval_samples.csv"), &report.samples_csv())?;
    if cfg.eval.dump_images {
        dump_sample_grid(&sampler, &eval_ds, kind, &sched, cfg, &out_dir)?;
    }
    Ok((report, out_dir))
}

fn dump_sample_grid<F: Scalar>(
    sampler: &ModelEvalSampler<F>,
    ds: &Dataset<F>,
    kind: ControlKind,
    sched: &NoiseSchedule<F>,
    cfg: &Config,
    out_dir: &Path,
) -> Result<()> {
    let n = 8.min(ds.len());
    let records: Vec<&SceneSample<F>> = ds.samples[..n].iter().collect();
    let opts = SampleOpts {
        steps: cfg.eval.sample_steps,
        guidance_scale: cfg.eval.guidance_scale,
        seed: cfg.eval.seeds.first().copied().unwrap_or(0),
        ancestral: cfg.eval.ancestral,
    };
    let imgs = sampler.generate(&records, kind, sched, &opts)?;
    let r = ds.resolution();
    for i in 0..n {
        let path = out_dir.join(format!("sample_{i}.ppm"));
        let img = &imgs.data()[i * 3 * r * r..(i + 1) * 3 * r * r];
        let mut ppm = format!("P6\n{r} {r}\n255\n").into_bytes();
        for p in 0..r * r {
            for c in 0..3 {
                let v = (img[c * r * r + p].to_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
                ppm.push(v);
            }
        }
        fs::write(&path, ppm).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// timestep extraction study
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StudyRow {
    pub t: usize,
    pub model: &'static str,
    pub rmse_onestep: f64,
    pub rmse_probe: f64,
}

pub const STUDY_CSV_HEADER: &str = "t,model,rmse_onestep,rmse_probe";

pub fn study_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from(STUDY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.t, r.model, r.rmse_onestep, r.rmse_probe));
    }
    out
}

/// Per-timestep comparison of control recovery from one-step predictions
/// versus readout probes, for the base and controlled models.
#[allow(clippy::too_many_arguments)]
pub struct StudyInputs<'a, F: Scalar> {
    pub base_unet: &'a UNet<F>,
    pub control_unet: &'a UNet<F>,
    pub branch: &'a ControlBranch<F>,
    pub base_probe: &'a ProbeModel<F>,
    pub control_probe: &'a ProbeModel<F>,
    /// Depth extraction from one-step predictions (base features + probe).
    pub reward_probe: Option<&'a ProbeModel<F>>,
    pub kind: ControlKind,
}

pub fn timestep_extraction_study<F: Scalar>(
    inputs: &StudyInputs<F>,
    ds: &Dataset<F>,
    sched: &NoiseSchedule<F>,
    t_grid: &[usize],
    n_samples: usize,
    seeds: &[u64],
    batch_size: usize,
) -> Result<Vec<StudyRow>> {
    for &t in t_grid {
        if t < 1 || t > sched.t_max() {
            return Err(Error::Eval(format!("study t = {t} outside [1, {}]", sched.t_max())));
        }
    }
    let n = n_samples.min(ds.len());
    let records: Vec<&SceneSample<F>> = ds.samples[..n].iter().collect();
    let r = ds.resolution();

    let onestep_extractor: Box<dyn ControlExtractor<F>> = match (inputs.kind, inputs.reward_probe) {
        (ControlKind::Edge, _) => Box::new(EdgeExtractor),
        (ControlKind::Depth, Some(p)) => {
            Box::new(ProbeDepthExtractor::new(inputs.base_unet, p, sched))
        }
        (ControlKind::Depth, None) => {
            return Err(Error::Config(
                "depth study requires a reward probe for one-step extraction".into(),
            ))
        }
    };

    let mut rows = Vec::new();
    for &t in t_grid {
        // (model, onestep_sq_sum, probe_sq_sum, count) accumulators
        let mut acc: BTreeMap<&'static str, (f64, f64, usize)> = BTreeMap::new();
        acc.insert("base", (0.0, 0.0, 0));
        acc.insert("controlled", (0.0, 0.0, 0));
        let mut sorted_seeds = seeds.to_vec();
        sorted_seeds.sort_unstable();
        for &seed in &sorted_seeds {
            for (bi, chunk) in records.chunks(batch_size).enumerate() {
                let nb = chunk.len();
                let mut images = Vec::with_capacity(nb * 3 * r * r);
                let mut controls = Vec::with_capacity(nb * r * r);
                let mut labels = Vec::with_capacity(nb);
                for rec in chunk {
                    images.extend(rec.image.data().iter().map(|&v| s::<F>(2.0) * v - F::one()));
                    controls.extend_from_slice(rec.control(inputs.kind).values.data());
                    labels.push(rec.label);
                }
                let images = Tensor::new([nb, 3, r, r], images);
                let controls_t = Tensor::new([nb, 1, r, r], controls.clone());
                let ts = vec![t; nb];
                let eps = noise_like::<F>(
                    images.shape(),
                    stream_key(seed, "study-eps", (t * 131_071 + bi) as u64),
                    "study",
                    0,
                );
                let x_t = forward_diffuse_batch(&images, &ts, &eps, sched);

                for (model_name, source) in [
                    ("base", FeatureSource::Base(inputs.base_unet)),
                    (
                        "controlled",
                        FeatureSource::Controlled(inputs.control_unet, inputs.branch),
                    ),
                ] {
                    let mut cx = Ctx::new();
                    let x = cx.g.constant(x_t.clone());
                    let c_in = matches!(source, FeatureSource::Controlled(..))
                        .then(|| cx.g.constant(controls_t.clone()));
                    let (eps_hat, bundle) = source.features(&mut cx, x, &ts, &labels, c_in)?;

                    // one-step estimate -> image range -> extractor
                    let x0 = crate::schedule::predict_x0_graph(&mut cx.g, x, &ts, eps_hat, sched);
                    let half = s::<F>(0.5);
                    let img = cx.g.add_scalar(x0, F::one());
                    let img = cx.g.mul_scalar(img, half);
                    let img01 = cx.g.clamp(img, F::zero(), F::one());
                    let extracted = onestep_extractor.extract(&mut cx, img01)?;
                    let one_vals = cx.g.value(extracted).clone();

                    let probe = match model_name {
                        "base" => inputs.base_probe,
                        _ => inputs.control_probe,
                    };
                    let probe_out = cx.frozen(|cx| probe.forward(cx, &bundle))?;
                    let probe_vals = cx.g.value(probe_out).clone();

                    let entry = acc.get_mut(model_name).unwrap();
                    for i in 0..nb {
                        let gt = &controls[i * r * r..(i + 1) * r * r];
                        let ov = &one_vals.data()[i * r * r..(i + 1) * r * r];
                        let pv = &probe_vals.data()[i * r * r..(i + 1) * r * r];
                        entry.0 += crate::controls::rmse_raw(ov, gt).to_f64();
                        entry.1 += crate::controls::rmse_raw(pv, gt).to_f64();
                        entry.2 += 1;
                    }
                }
            }
        }
        for (model, (one_sum, probe_sum, count)) in acc {
            rows.push(StudyRow {
                t,
                model,
                rmse_onestep: one_sum / count.max(1) as f64,
                rmse_probe: probe_sum / count.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// CLI entry: resolves checkpoints and grid from config, writes CSV + SVG.
pub fn run_study<F: Scalar>(cfg: &Config) -> Result<(Vec<StudyRow>, PathBuf)> {
    let ds = read_dataset::<F>(&cfg.data.eval_path)?;
    let sched = build_schedule::<F>(
        cfg.schedule.steps,
        cfg.schedule.kind,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
    )?;
    let base = load_model::<F>(&cfg.study.base_ckpt)?;
    let ctl = load_model::<F>(&cfg.study.control_ckpt)?;
    let branch = ctl
        .branch
        .ok_or_else(|| Error::Config("study.control_ckpt must contain a control branch".into()))?;
    let base_probe = load_probe::<F>(&cfg.study.base_probe_ckpt)?.probe;
    let control_probe = load_probe::<F>(&cfg.study.control_probe_ckpt)?.probe;
    let reward_probe = if cfg.study.reward_probe_ckpt.as_os_str().is_empty() {
        None
    } else {
        Some(load_probe::<F>(&cfg.study.reward_probe_ckpt)?.probe)
    };

    let t_grid: Vec<usize> = cfg
        .study
        .t_grid
        .iter()
        .map(|&t| sched.resolve_threshold(t).max(1))
        .collect();
    let inputs = StudyInputs {
        base_unet: &base.unet,
        control_unet: &ctl.unet,
        branch: &branch,
        base_probe: &base_probe,
        control_probe: &control_probe,
        reward_probe: reward_probe.as_ref(),
        kind: cfg.study.control_kind,
    };
    let rows = timestep_extraction_study(
        &inputs,
        &ds,
        &sched,
        &t_grid,
        cfg.study.samples,
        &cfg.study.seeds,
        cfg.eval.batch_size,
    )?;

    let out_dir = cfg.run.out_dir.join("study");
    write_text(&out_dir.join("timestep_study.csv"), &study_csv(&rows))?;
    let svg = crate::plot::study_svg(&rows, sched.t_max());
    write_text(&out_dir.join("timestep_study.svg"), &svg)?;
    Ok((rows, out_dir))
}

// ---------------------------------------------------------------------------
// ablation grid
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub steps_align: usize,
    pub steps_reward: usize,
    pub metric_name: String,
    pub metric: f64,
    pub toy_fidelity: f64,
    pub ckpt: PathBuf,
}

pub const ABLATE_CSV_HEADER: &str = "method,steps_align,steps_reward,metric_name,metric,toy_fidelity";

pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut out = String::from(ABLATE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "finetune,{},{},{},{},{}\n",
            r.steps_align, r.steps_reward, r.metric_name, r.metric, r.toy_fidelity
        ));
    }
    out
}

/// Trains one fine-tune run per `(tau_align, tau_reward)` pair (cartesian
/// product of the config lists) under identical seeds and optimizer settings,
/// then evaluates each. Rows are independent: each grid point runs in its own
/// output directory from the same starting checkpoint.
pub fn run_ablate<F: Scalar>(cfg: &Config) -> Result<(Vec<AblateRow>, PathBuf)> {
    let sched = build_schedule::<F>(
        cfg.schedule.steps,
        cfg.schedule.kind,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
    )?;
    let out_root = cfg.run.out_dir.join("ablate");
    let mut rows = Vec::new();
    for &ta in &cfg.ablate.tau_align_list {
        for &tr in &cfg.ablate.tau_reward_list {
            let steps_align = sched.resolve_threshold(ta);
            let steps_reward = sched.resolve_threshold(tr);
            let mut sub = cfg.clone();
            sub.run.out_dir = out_root.join(format!("align{steps_align}_reward{steps_reward}"));
            sub.train.iterations = cfg.ablate.iterations;
            sub.loss.tau_align = steps_align as f64;
            sub.loss.tau_reward = steps_reward as f64;
            if steps_align == 0 {
                sub.loss.beta = 0.0;
            }
            if steps_reward == 0 {
                sub.loss.alpha = 0.0;
            }
            let outcome = run_finetune::<F>(&sub)?;

            let (metric_name, metric, fid) = if cfg.ablate.evaluate {
                let mut ev = sub.clone();
                ev.eval.checkpoint = outcome.final_ckpt.clone();
                let (report, _) = run_evaluate::<F>(&ev)?;
                (report.metric_name, report.metric, report.toy_fidelity)
            } else {
                ("none".to_string(), f64::NAN, f64::NAN)
            };
            rows.push(AblateRow {
                steps_align,
                steps_reward,
                metric_name,
                metric,
                toy_fidelity: fid,
                ckpt: outcome.final_ckpt,
            });
        }
    }
    write_text(&out_root.join("ablation.csv"), &ablate_csv(&rows))?;
    Ok((rows, out_root))
}
