//! Control signals: differentiable edge extraction, analytic scene depth, and
//! the alignment metrics (RMSE, SSIM).
//!
//! The edge extractor is the stand-in reward model for edge control: fixed
//! 3x3 difference kernels over the luminance channel, gradient magnitude
//! normalized by `sqrt(2)` so unit-range inputs land in [0, 1]. It is pure and
//! differentiable end to end.

use serde::{Deserialize, Serialize};

use crate::data::{depth_map_from_grid, owner_grid, SceneSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Depth,
    Edge,
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlKind::Depth => write!(f, "depth"),
            ControlKind::Edge => write!(f, "edge"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Extracted,
    ProbePredicted,
}

/// A single-channel control map with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ControlMap<F: Scalar> {
    pub kind: ControlKind,
    /// `(H, W)` values.
    pub values: Tensor<F>,
    pub provenance: Provenance,
}

impl<F: Scalar> ControlMap<F> {
    pub fn new(kind: ControlKind, values: Tensor<F>, provenance: Provenance) -> Self {
        assert_eq!(values.shape().len(), 2, "control map must be (H, W)");
        ControlMap { kind, values, provenance }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn validate_range(&self) -> Result<()> {
        for &v in self.values.data() {
            if v < F::zero() || v > F::one() {
                return Err(Error::Shape(format!(
                    "control map value {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ControlMap<G> {
        ControlMap { kind: self.kind, values: self.values.cast(), provenance: self.provenance }
    }
}

/// Fixed luminance weights used before edge extraction.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
/// Max gradient magnitude of the unit-range difference kernels.
pub const EDGE_NORM: f64 = std::f64::consts::SQRT_2;
/// Numerical floor inside the magnitude square root.
pub const EDGE_EPS: f64 = 1e-8;

pub fn luminance(rgb: [f64; 3]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

/// Differentiable edge extraction on a batch `(N, 3, H, W)` of [0, 1] images;
/// returns `(N, 1, H, W)` edge magnitudes in [0, 1].
///
/// Pipeline: luminance (1x1 conv) -> replicate pad -> horizontal/vertical
/// central-difference kernels -> `sqrt(gx^2 + gy^2 + eps) / sqrt(2)` -> clamp.
pub fn extract_edges_graph<F: Scalar>(g: &mut Graph<F>, image: NodeId) -> NodeId {
    let sh = g.shape(image).to_vec();
    assert_eq!(sh.len(), 4, "extract_edges expects (N, 3, H, W)");
    assert_eq!(sh[1], 3, "extract_edges expects 3 channels");

    let luma_w = g.constant(Tensor::new([1, 3, 1, 1], LUMA.iter().map(|&v| s(v)).collect()));
    let gray = g.conv2d(image, luma_w, None, 1, 0);
    let padded = g.replicate_pad2d(gray, 1);

    let kx = {
        let mut w = vec![F::zero(); 9];
        w[3] = -F::one();
        w[5] = F::one();
        g.constant(Tensor::new([1, 1, 3, 3], w))
    };
    let ky = {
        let mut w = vec![F::zero(); 9];
        w[1] = -F::one();
        w[7] = F::one();
        g.constant(Tensor::new([1, 1, 3, 3], w))
    };
    let gx = g.conv2d(padded, kx, None, 1, 0);
    let gy = g.conv2d(padded, ky, None, 1, 0);
    let gx2 = g.square(gx);
    let gy2 = g.square(gy);
    let sum = g.add(gx2, gy2);
    let with_eps = g.add_scalar(sum, s(EDGE_EPS));
    let mag = g.sqrt(with_eps);
    let normed = g.mul_scalar(mag, s(1.0 / EDGE_NORM));
    g.clamp(normed, F::zero(), F::one())
}

/// Edge extraction on one `(3, H, W)` image. Errors on out-of-range inputs.
pub fn extract_edges<F: Scalar>(image: &Tensor<F>) -> Result<ControlMap<F>> {
    let sh = image.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::Shape(format!("extract_edges expects (3, H, W), got {sh:?}")));
    }
    for &v in image.data() {
        if v < F::zero() || v > F::one() {
            return Err(Error::Shape(format!(
                "extract_edges: image value {v} outside [0, 1]"
            )));
        }
    }
    let (h, w) = (sh[1], sh[2]);
    let mut g = Graph::new();
    let inp = g.constant(image.clone().reshaped([1, 3, h, w]));
    let out = extract_edges_graph(&mut g, inp);
    let values = g.value(out).clone().reshaped([h, w]);
    Ok(ControlMap::new(ControlKind::Edge, values, Provenance::Extracted))
}

/// Analytic depth map from a scene description: per-pixel nearest-surface
/// depth in [0, 1] (0 = nearest, background = 1). An empty scene yields an
/// all-background map.
pub fn depth_from_scene<F: Scalar>(spec: &SceneSpec, resolution: usize) -> ControlMap<F> {
    let grid = owner_grid(spec, resolution);
    depth_map_from_grid(spec, &grid, resolution)
}

fn check_pair<F: Scalar>(a: &ControlMap<F>, b: &ControlMap<F>, require_kind: bool) -> Result<()> {
    if require_kind && a.kind != b.kind {
        return Err(Error::KindMismatch { expected: a.kind.to_string(), got: b.kind.to_string() });
    }
    if a.values.shape() != b.values.shape() {
        return Err(Error::Shape(format!(
            "control map shapes differ: {:?} vs {:?}",
            a.values.shape(),
            b.values.shape()
        )));
    }
    Ok(())
}

/// Root mean squared error between two maps of the same kind and shape.
pub fn rmse<F: Scalar>(a: &ControlMap<F>, b: &ControlMap<F>) -> Result<F> {
    check_pair(a, b, true)?;
    Ok(rmse_raw(a.values.data(), b.values.data()))
}

pub fn rmse_raw<F: Scalar>(a: &[F], b: &[F]) -> F {
    assert_eq!(a.len(), b.len());
    let sum: F = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    (sum / s(a.len() as f64)).sqrt()
}

/// Structural similarity with a 7x7 uniform window on unit dynamic range;
/// mean over valid windows. Errors when the maps are smaller than the window.
pub fn ssim<F: Scalar>(a: &ControlMap<F>, b: &ControlMap<F>) -> Result<F> {
    check_pair(a, b, false)?;
    let (h, w) = a.resolution();
    ssim_raw(a.values.data(), b.values.data(), h, w)
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// SSIM over flat `(h, w)` buffers, implemented with row prefix sums.
pub fn ssim_raw<F: Scalar>(a: &[F], b: &[F], h: usize, w: usize) -> Result<F> {
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(Error::Shape(format!(
            "ssim: image {h}x{w} smaller than {win}x{win} window"
        )));
    }
    // prefix sums over rows for each needed product
    let fields: [&dyn Fn(usize) -> F; 5] = [
        &|i| a[i],
        &|i| b[i],
        &|i| a[i] * a[i],
        &|i| b[i] * b[i],
        &|i| a[i] * b[i],
    ];
    let mut prefix = vec![vec![F::zero(); (w + 1) * h]; 5];
    for (fi, f) in fields.iter().enumerate() {
        for row in 0..h {
            let base = row * (w + 1);
            for col in 0..w {
                prefix[fi][base + col + 1] = prefix[fi][base + col] + f(row * w + col);
            }
        }
    }
    let window_sum = |fi: usize, row0: usize, col0: usize| -> F {
        let mut acc = F::zero();
        for row in row0..row0 + win {
            let base = row * (w + 1);
            acc += prefix[fi][base + col0 + win] - prefix[fi][base + col0];
        }
        acc
    };

    let c1 = s::<F>(SSIM_C1);
    let c2 = s::<F>(SSIM_C2);
    let inv_n = s::<F>(1.0 / (win * win) as f64);
    let two = s::<F>(2.0);
    let mut total = F::zero();
    let mut count = 0usize;
    for row0 in 0..=(h - win) {
        for col0 in 0..=(w - win) {
            let mu_a = window_sum(0, row0, col0) * inv_n;
            let mu_b = window_sum(1, row0, col0) * inv_n;
            let var_a = window_sum(2, row0, col0) * inv_n - mu_a * mu_a;
            let var_b = window_sum(3, row0, col0) * inv_n - mu_b * mu_b;
            let cov = window_sum(4, row0, col0) * inv_n - mu_a * mu_b;
            let num = (two * mu_a * mu_b + c1) * (two * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / s(count as f64))
}
