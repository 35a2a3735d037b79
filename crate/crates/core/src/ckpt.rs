//! Checkpoint serialization: binary weight blobs plus a JSON manifest, written
//! atomically (temp name, then rename) under `{out_dir}/{stage}/{step}/`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controls::ControlKind;
use crate::error::{Error, Result};
use crate::networks::{ControlBranch, UNet, UNetConfig};
use crate::nn::{Visit, VisitMut};
use crate::opt::{Adam, AdamConfig, Moments};
use crate::probe::{ProbeConfig, ProbeModel};
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const WEIGHTS_MAGIC: &[u8; 8] = b"CTRLDIF1";

/// Training stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainBase,
    PretrainControlnet,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::PretrainBase => write!(f, "pretrain_base"),
            Stage::PretrainControlnet => write!(f, "pretrain_controlnet"),
            Stage::Finetune => write!(f, "finetune"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CkptManifest {
    pub dtype: String,
    pub stage: Option<Stage>,
    pub step: usize,
    pub model: Option<UNetConfig>,
    pub probe: Option<ProbeConfig>,
    pub control_kind: Option<ControlKind>,
    /// Checkpoint this one was initialized or fine-tuned from.
    pub parent: Option<String>,
    /// Free-form provenance note (stage recipe, seeds).
    pub note: String,
}

// ---- weight blob ----------------------------------------------------------

pub(crate) fn encode_weights<F: Scalar>(entries: &[(String, Tensor<F>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(F::DTYPE.as_bytes());
    while out.len() % 8 != 0 {
        out.push(0);
    }
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

pub(crate) fn decode_weights<F: Scalar>(bytes: &[u8]) -> Result<HashMap<String, Tensor<F>>> {
    let bad = |m: &str| Error::Checkpoint(format!("weight blob: {m}"));
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(bad("bad magic"));
    }
    let dtype_end = 8 + F::DTYPE.len();
    if &bytes[8..dtype_end] != F::DTYPE.as_bytes() {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: reader expects {}, file differs",
            F::DTYPE
        )));
    }
    let mut pos = (dtype_end + 7) / 8 * 8;
    let read_u64 = |pos: &mut usize| -> Result<u64> {
        let v = u64::from_le_bytes(
            bytes.get(*pos..*pos + 8).ok_or_else(|| bad("truncated"))?.try_into().unwrap(),
        );
        *pos += 8;
        Ok(v)
    };
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let v = u32::from_le_bytes(
            bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?.try_into().unwrap(),
        );
        *pos += 4;
        Ok(v)
    };
    let count = read_u64(&mut pos)?;
    let mut map = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(
            bytes.get(pos..pos + name_len).ok_or_else(|| bad("truncated name"))?.to_vec(),
        )
        .map_err(|_| bad("bad name"))?;
        pos += name_len;
        let rank = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let nbytes = numel * F::BYTES;
        let data = bytes.get(pos..pos + nbytes).ok_or_else(|| bad("truncated data"))?;
        pos += nbytes;
        map.insert(name, Tensor::from_le_bytes(shape, data));
    }
    Ok(map)
}

fn collect<F: Scalar>(visit: impl FnOnce(Visit<F>)) -> Vec<(String, Tensor<F>)> {
    let mut out = Vec::new();
    let mut f = |name: String, t: &Tensor<F>| out.push((name, t.clone()));
    visit(&mut f);
    out
}

fn restore<F: Scalar>(
    map: &HashMap<String, Tensor<F>>,
    visit: impl FnOnce(VisitMut<F>),
) -> Result<()> {
    let mut missing = Vec::new();
    let mut f = |name: String, t: &mut Tensor<F>| match map.get(&name) {
        Some(stored) if stored.shape() == t.shape() => *t = stored.clone(),
        Some(stored) => missing.push(format!(
            "{name}: shape {:?} vs stored {:?}",
            t.shape(),
            stored.shape()
        )),
        None => missing.push(format!("{name}: missing")),
    };
    visit(&mut f);
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!("parameter restore failed: {}", missing.join("; "))))
    }
}

// ---- atomic directory write ----------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes checkpoint files into `dir` atomically: content goes to a unique
/// temp directory first, which is then renamed into place.
pub fn write_ckpt_dir(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    let tmp: PathBuf = parent.join(format!(
        ".tmp-{}-{}",
        dir.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default(),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    for (name, bytes) in files {
        write_file(&tmp.join(name), bytes)?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn read_manifest(dir: &Path) -> Result<CkptManifest> {
    let path = dir.join("manifest.json");
    let json = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&json).map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))
}

fn manifest_bytes(manifest: &CkptManifest) -> Vec<u8> {
    serde_json::to_string_pretty(manifest).expect("manifest encode").into_bytes()
}

// ---- model checkpoints -----------------------------------------------------

/// In-memory model checkpoint: base UNet plus optional control branch and
/// optimizer state.
pub struct ModelCkpt<F: Scalar> {
    pub manifest: CkptManifest,
    pub unet: UNet<F>,
    pub branch: Option<ControlBranch<F>>,
    pub adam: Option<Adam<F>>,
}

fn adam_entries<F: Scalar>(adam: &Adam<F>) -> Vec<(String, Tensor<F>)> {
    let mut names: Vec<&String> = adam.state.keys().collect();
    names.sort();
    let mut out = Vec::with_capacity(2 * names.len());
    for name in names {
        let m = &adam.state[name];
        out.push((format!("m::{name}"), m.m.clone()));
        out.push((format!("v::{name}"), m.v.clone()));
    }
    out
}

fn adam_from_entries<F: Scalar>(
    cfg: AdamConfig,
    step: u64,
    map: HashMap<String, Tensor<F>>,
) -> Adam<F> {
    let mut adam = Adam::new(cfg);
    adam.step = step;
    for (key, tensor) in map {
        if let Some(name) = key.strip_prefix("m::") {
            adam.state
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: tensor.clone(), v: tensor.clone() })
                .m = tensor.clone();
        } else if let Some(name) = key.strip_prefix("v::") {
            adam.state
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: tensor.clone(), v: tensor.clone() })
                .v = tensor.clone();
        }
    }
    adam
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    cfg: AdamConfig,
    step: u64,
}

pub fn save_model<F: Scalar>(
    dir: &Path,
    manifest: &CkptManifest,
    unet: &UNet<F>,
    branch: Option<&ControlBranch<F>>,
    adam: Option<&Adam<F>>,
) -> Result<()> {
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    files.push(("manifest.json", manifest_bytes(manifest)));
    let mut entries = collect::<F>(|f| unet.visit_params(f));
    if let Some(branch) = branch {
        entries.extend(collect::<F>(|f| branch.visit_params(f)));
    }
    files.push(("weights.bin", encode_weights(&entries)));
    if let Some(adam) = adam {
        files.push(("optimizer.bin", encode_weights(&adam_entries(adam))));
        let meta = OptMeta { cfg: adam.cfg, step: adam.step };
        files.push(("optimizer.json", serde_json::to_vec_pretty(&meta).unwrap()));
    }
    write_ckpt_dir(dir, &files)
}

pub fn load_model<F: Scalar>(dir: &Path) -> Result<ModelCkpt<F>> {
    let manifest = read_manifest(dir)?;
    let model_cfg = manifest
        .model
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a model checkpoint", dir.display())))?;
    let path = dir.join("weights.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let map = decode_weights::<F>(&bytes)?;

    // deterministic construction; weights are overwritten from the blob
    let mut init_rng = stream(0, "ckpt-load", 0);
    let mut unet = UNet::init(model_cfg, &mut init_rng)?;
    restore(&map, |f| unet.visit_params_mut(f))?;
    let has_branch = map.keys().any(|k| k.starts_with("ctrl."));
    let branch = if has_branch {
        let mut branch = ControlBranch::from_base(&unet, &mut init_rng);
        restore(&map, |f| branch.visit_params_mut(f))?;
        Some(branch)
    } else {
        None
    };

    let opt_meta_path = dir.join("optimizer.json");
    let adam = if opt_meta_path.exists() {
        let meta: OptMeta = serde_json::from_slice(
            &fs::read(&opt_meta_path).map_err(|e| Error::io(opt_meta_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::Checkpoint(format!("optimizer meta decode: {e}")))?;
        let opath = dir.join("optimizer.bin");
        let obytes = fs::read(&opath).map_err(|e| Error::io(opath.display().to_string(), e))?;
        Some(adam_from_entries(meta.cfg, meta.step, decode_weights::<F>(&obytes)?))
    } else {
        None
    };

    Ok(ModelCkpt { manifest, unet, branch, adam })
}

// ---- probe checkpoints -----------------------------------------------------

pub struct ProbeCkpt<F: Scalar> {
    pub manifest: CkptManifest,
    pub probe: ProbeModel<F>,
}

pub fn save_probe<F: Scalar>(dir: &Path, manifest: &CkptManifest, probe: &ProbeModel<F>) -> Result<()> {
    let entries = collect::<F>(|f| probe.visit_params(f));
    write_ckpt_dir(
        dir,
        &[
            ("manifest.json", manifest_bytes(manifest)),
            ("weights.bin", encode_weights(&entries)),
        ],
    )
}

pub fn load_probe<F: Scalar>(dir: &Path) -> Result<ProbeCkpt<F>> {
    let manifest = read_manifest(dir)?;
    let probe_cfg = manifest
        .probe
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a probe checkpoint", dir.display())))?;
    let path = dir.join("weights.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let map = decode_weights::<F>(&bytes)?;
    let mut probe = ProbeModel::init(probe_cfg, &mut stream(0, "ckpt-load", 1))?;
    restore(&map, |f| probe.visit_params_mut(f))?;
    Ok(ProbeCkpt { manifest, probe })
}
