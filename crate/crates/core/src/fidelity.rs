//! Toy fidelity score: Fréchet distance between Gaussians fitted to the
//! penultimate features of a small fixed classifier, trained once per dataset
//! and cached on disk.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::ckpt::{write_ckpt_dir, CkptManifest};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, Visit, VisitMut};
use crate::opt::{clip_global_norm, Adam, AdamConfig};
use crate::probe::gather_batch;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Penultimate feature width of the fixture classifier.
pub const FEATURE_DIM: usize = 32;
/// Diagonal shrinkage applied to both covariance estimates.
pub const COV_SHRINKAGE: f64 = 1e-4;

/// Small CNN label classifier; global-average-pooled features feed the score.
pub struct Classifier<F: Scalar> {
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
    conv3: Conv2d<F>,
    head: Linear<F>,
}

impl<F: Scalar> Classifier<F> {
    pub fn init(num_classes: usize, rng: &mut impl Rng) -> Self {
        Classifier {
            conv1: Conv2d::init(rng, 3, 16, 3, 1, 1),
            conv2: Conv2d::init(rng, 16, 32, 3, 1, 1),
            conv3: Conv2d::init(rng, 32, FEATURE_DIM, 3, 1, 1),
            head: Linear::init(rng, FEATURE_DIM, num_classes),
        }
    }

    /// Features `(N, FEATURE_DIM)` and logits `(N, classes)`.
    fn forward(&self, cx: &mut Ctx<F>, images01: crate::graph::NodeId) -> (crate::graph::NodeId, crate::graph::NodeId) {
        let h = self.conv1.fwd(cx, "clf.conv1", images01);
        let h = cx.g.silu(h);
        let h = cx.g.avg_pool2(h);
        let h = self.conv2.fwd(cx, "clf.conv2", h);
        let h = cx.g.silu(h);
        let h = cx.g.avg_pool2(h);
        let h = self.conv3.fwd(cx, "clf.conv3", h);
        let h = cx.g.silu(h);
        let feats = cx.g.mean_hw(h);
        let logits = self.head.fwd(cx, "clf.head", feats);
        (feats, logits)
    }

    /// Penultimate features for a batch of `[0, 1]` images, in f64.
    pub fn features(&self, images01: &Tensor<F>) -> Vec<Vec<f64>> {
        let mut cx = Ctx::new();
        let x = cx.g.constant(images01.clone());
        let (feats, _) = cx.frozen(|cx| self.forward(cx, x));
        let val = cx.g.value(feats);
        let n = val.shape()[0];
        (0..n)
            .map(|i| {
                val.data()[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
                    .iter()
                    .map(|&v| v.to_f64())
                    .collect()
            })
            .collect()
    }

    pub fn visit_params(&self, f: Visit<F>) {
        self.conv1.visit("clf.conv1", f);
        self.conv2.visit("clf.conv2", f);
        self.conv3.visit("clf.conv3", f);
        self.head.visit("clf.head", f);
    }

    pub fn visit_params_mut(&mut self, f: VisitMut<F>) {
        self.conv1.visit_mut("clf.conv1", f);
        self.conv2.visit_mut("clf.conv2", f);
        self.conv3.visit_mut("clf.conv3", f);
        self.head.visit_mut("clf.head", f);
    }
}

/// Fixed training recipe for the fixture classifier.
pub const CLASSIFIER_ITERS: usize = 400;
pub const CLASSIFIER_BATCH: usize = 32;
pub const CLASSIFIER_LR: f64 = 1e-3;

pub fn train_classifier<F: Scalar>(ds: &Dataset<F>, seed: u64) -> Result<Classifier<F>> {
    if ds.is_empty() {
        return Err(Error::Config("classifier training needs a non-empty dataset".into()));
    }
    let mut clf = Classifier::init(
        crate::data::NUM_CLASSES,
        &mut stream(seed, "clf-init", 0),
    );
    let mut adam = Adam::new(AdamConfig { lr: CLASSIFIER_LR, ..Default::default() });
    for step in 0..CLASSIFIER_ITERS {
        let mut brng = stream(seed, "clf-batch", step as u64);
        let indices: Vec<usize> =
            (0..CLASSIFIER_BATCH.min(ds.len())).map(|_| brng.gen_range(0..ds.len())).collect();
        let (images_net, _, labels) = gather_batch(ds, &indices, crate::controls::ControlKind::Depth);
        // classifier consumes [0, 1] images
        let images01 = images_net.map(|v| (v + F::one()) * crate::scalar::s(0.5));
        let mut cx = Ctx::new();
        let x = cx.g.constant(images01);
        let (_, logits) = clf.forward(&mut cx, x);
        let loss = cx.g.cross_entropy(logits, labels);
        let grads = cx.g.backward(loss);
        let mut by_name: HashMap<String, Tensor<F>> = HashMap::new();
        for (name, id) in cx.bindings() {
            by_name.insert(name.clone(), grads.dense(*id, cx.g.shape(*id)));
        }
        clip_global_norm(&mut by_name, 1.0);
        adam.update(&by_name, |f| clf.visit_params_mut(f));
    }
    Ok(clf)
}

/// Loads the cached fixture classifier or trains and caches it.
pub fn ensure_classifier<F: Scalar>(
    cache_dir: &Path,
    ds: &Dataset<F>,
    seed: u64,
) -> Result<Classifier<F>> {
    let dir: PathBuf = cache_dir.join("fidelity_classifier");
    let weights = dir.join("weights.bin");
    if weights.exists() {
        let bytes = std::fs::read(&weights)
            .map_err(|e| Error::io(weights.display().to_string(), e))?;
        let map = crate::ckpt::decode_weights::<F>(&bytes)?;
        let mut clf = Classifier::init(crate::data::NUM_CLASSES, &mut stream(seed, "clf-init", 0));
        let mut missing = false;
        let mut put = |n: String, t: &mut Tensor<F>| match map.get(&n) {
            Some(v) if v.shape() == t.shape() => *t = v.clone(),
            _ => missing = true,
        };
        clf.visit_params_mut(&mut put);
        if !missing {
            return Ok(clf);
        }
    }
    let clf = train_classifier(ds, seed)?;
    let mut entries = Vec::new();
    let mut grab = |n: String, t: &Tensor<F>| entries.push((n, t.clone()));
    clf.visit_params(&mut grab);
    let manifest = CkptManifest {
        dtype: F::DTYPE.into(),
        stage: None,
        step: CLASSIFIER_ITERS,
        model: None,
        probe: None,
        control_kind: None,
        parent: None,
        note: format!("fixture fidelity classifier, seed {seed}"),
    };
    write_ckpt_dir(
        &dir,
        &[
            ("manifest.json", serde_json::to_vec_pretty(&manifest).unwrap()),
            ("weights.bin", crate::ckpt::encode_weights(&entries)),
        ],
    )?;
    Ok(clf)
}

fn gaussian_stats(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mean = DVector::zeros(d);
    for f in feats {
        for (i, &v) in f.iter().enumerate() {
            mean[i] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let x = DVector::from_iterator(d, f.iter().copied()) - &mean;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += COV_SHRINKAGE;
    }
    (mean, cov)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature batches.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Eval("fidelity batches must be non-empty".into()));
    }
    let d = a[0].len();
    if a.len() < d + 1 || b.len() < d + 1 {
        return Err(Error::Eval(format!(
            "fidelity batch smaller than feature dimension + 1 ({} needed, got {} and {})",
            d + 1,
            a.len(),
            b.len()
        )));
    }
    let (mu1, s1) = gaussian_stats(a);
    let (mu2, s2) = gaussian_stats(b);
    let diff = &mu1 - &mu2;
    let s1_sqrt = sqrtm_psd(&s1);
    let inner = &s1_sqrt * &s2 * &s1_sqrt;
    let cov_sqrt = sqrtm_psd(&inner);
    let dist2 = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cov_sqrt.trace();
    Ok(dist2.max(0.0))
}

/// Fréchet distance between classifier-feature Gaussians of two image batches.
pub fn toy_fidelity<F: Scalar>(
    clf: &Classifier<F>,
    generated01: &Tensor<F>,
    reference01: &Tensor<F>,
) -> Result<f64> {
    let fa = clf.features(generated01);
    let fb = clf.features(reference01);
    frechet_distance(&fa, &fb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn images_of(ds: &Dataset<f64>, lo: usize, hi: usize) -> Tensor<f64> {
        let r = ds.resolution();
        let mut data = Vec::new();
        for smp in &ds.samples[lo..hi] {
            data.extend_from_slice(smp.image.data());
        }
        Tensor::new([hi - lo, 3, r, r], data)
    }

    #[test]
    fn identical_batches_score_zero() {
        let ds = generate_dataset::<f64>(1, 40, 16, false);
        let clf = Classifier::init(4, &mut stream(2, "c", 0));
        let imgs = images_of(&ds, 0, 40);
        let d = toy_fidelity(&clf, &imgs, &imgs).unwrap();
        assert!(d < 1e-6, "self-distance {d}");
    }

    #[test]
    fn symmetric_within_tolerance() {
        let a = generate_dataset::<f64>(3, 40, 16, false);
        let b = generate_dataset::<f64>(4, 40, 16, false);
        let clf = Classifier::init(4, &mut stream(5, "c", 0));
        let ia = images_of(&a, 0, 40);
        let ib = images_of(&b, 0, 40);
        let d1 = toy_fidelity(&clf, &ia, &ib).unwrap();
        let d2 = toy_fidelity(&clf, &ib, &ia).unwrap();
        assert!((d1 - d2).abs() < 1e-6, "{d1} vs {d2}");
    }

    #[test]
    fn small_batches_are_rejected() {
        let ds = generate_dataset::<f64>(6, 10, 16, false);
        let clf = Classifier::init(4, &mut stream(7, "c", 0));
        let imgs = images_of(&ds, 0, 10);
        assert!(toy_fidelity(&clf, &imgs, &imgs).is_err());
    }

    #[test]
    fn noise_scores_worse_than_resampling() {
        let ds = generate_dataset::<f64>(8, 80, 16, false);
        let clf = train_classifier(&ds, 9).unwrap();
        let ref_a = images_of(&ds, 0, 40);
        let ref_b = images_of(&ds, 40, 80);
        let noise = Tensor::<f64>::randn([40, 3, 16, 16], &mut stream(10, "n", 0))
            .map(|v| (v * 0.25 + 0.5).clamp(0.0, 1.0));
        let split = toy_fidelity(&clf, &ref_a, &ref_b).unwrap();
        let vs_noise = toy_fidelity(&clf, &noise, &ref_b).unwrap();
        assert!(split >= 0.0);
        assert!(
            vs_noise > split,
            "noise batch ({vs_noise}) should score worse than a resampled half ({split})"
        );
    }
}
