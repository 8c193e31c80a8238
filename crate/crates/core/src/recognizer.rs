//! Analytic face-embedding models with exact gradients.
//!
//! A model is a fixed bank of oriented difference-of-Gaussian kernels
//! correlated with the centered grayscale image (zero padding), a tanh
//! nonlinearity with a per-model gain, average pooling over a fixed cell
//! grid, a seeded dense projection, and L2 normalization. The oriented
//! kernel at scale `sigma` and orientation `phi` is
//! `G_sigma(p - o) - G_sigma(p + o)` with offset `o = sigma (cos phi, sin
//! phi)`; it is evaluated in factored form (separable blur, then a
//! bilinear offset difference), which is exactly a correlation with the
//! equivalent dense kernel scaled to unit L2 norm. Three committed
//! configurations (`modelA`, `modelB`, `modelC`) differ in filter scales,
//! orientations, pooling, projection seed, and output dimension, and play
//! the roles of distinct recognition models for white-box/black-box
//! transfer experiments.
//!
//! Feature distance is the squared Euclidean distance between unit-norm
//! embeddings, `2 - 2 * cos`, with range `[0, 4]`. Verification declares
//! "same" strictly below the threshold.

use ndarray::{Array2, Array3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::{build_shape, build_texture, synth_identity, DEFAULT_TEXTURE_RES};
use crate::io::Rgb;
use crate::renderer::{render_at, Lighting, Viewpoint};
use crate::rng::stream;

/// Grayscale projection weights (Rec. 601).
const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Serializable description of one embedding model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub id: String,
    /// Expected input resolution `(H, W)`.
    pub input: (usize, usize),
    /// Gaussian scales of the filter bank.
    pub scales: Vec<f64>,
    /// Number of evenly spaced filter orientations per scale.
    pub orientations: usize,
    /// Average-pooling cell grid `(gh, gw)`.
    pub pool_grid: (usize, usize),
    /// Seed of the dense projection matrix.
    pub seed: u64,
    /// Output dimension.
    pub d: usize,
    /// Gain applied before the tanh nonlinearity.
    pub gain: f64,
}

impl ModelConfig {
    /// The three committed stand-in models.
    pub fn preset(id: &str) -> Result<ModelConfig> {
        let cfg = match id {
            "modelA" => ModelConfig {
                id: "modelA".into(),
                input: (112, 112),
                scales: vec![3.0, 5.0],
                orientations: 6,
                pool_grid: (3, 3),
                seed: 101,
                d: 128,
                gain: 20.0,
            },
            "modelB" => ModelConfig {
                id: "modelB".into(),
                input: (112, 112),
                scales: vec![2.0, 4.0],
                orientations: 6,
                pool_grid: (3, 3),
                seed: 205,
                d: 64,
                gain: 24.0,
            },
            "modelC" => ModelConfig {
                id: "modelC".into(),
                input: (112, 112),
                scales: vec![4.0, 6.0],
                orientations: 5,
                pool_grid: (3, 3),
                seed: 303,
                d: 128,
                gain: 16.0,
            },
            other => {
                return Err(SimError::invalid(format!("unknown model id {other:?}")));
            }
        };
        Ok(cfg)
    }
}

/// One Gaussian scale of the filter bank: a sum-normalized separable 1D
/// blur kernel shared by all orientations at this scale.
#[derive(Debug, Clone)]
struct ScaleBank {
    radius: isize,
    /// `2r+1` taps, sum 1.
    blur: Vec<f64>,
}

impl ScaleBank {
    fn new(sigma: f64) -> ScaleBank {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut blur: Vec<f64> = (-radius..=radius)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = blur.iter().sum();
        blur.iter_mut().for_each(|b| *b /= sum);
        ScaleBank { radius, blur }
    }

    fn gaussian_at(&self, tx: isize, ty: isize) -> f64 {
        if tx.abs() > self.radius || ty.abs() > self.radius {
            return 0.0;
        }
        self.blur[(tx + self.radius) as usize] * self.blur[(ty + self.radius) as usize]
    }
}

/// Oriented difference-of-Gaussian filter, evaluated as
/// `(B(p + o) - B(p - o)) / norm` where `B` is the blurred input and the
/// offset `o = sigma * (cos phi, sin phi)` is sampled bilinearly. The norm
/// is the L2 norm of the equivalent dense kernel, so responses match a
/// unit-norm kernel correlation.
#[derive(Debug, Clone)]
struct OrientedFilter {
    scale_idx: usize,
    ox: f64,
    oy: f64,
    inv_norm: f64,
}

/// The four integer taps and weights of a bilinear lookup at offset
/// `(ox, oy)` relative to a pixel.
fn offset_taps(ox: f64, oy: f64) -> [(isize, isize, f64); 4] {
    let x0 = ox.floor();
    let y0 = oy.floor();
    let fx = ox - x0;
    let fy = oy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ]
}

impl OrientedFilter {
    fn new(scale_idx: usize, bank: &ScaleBank, sigma: f64, phi: f64) -> OrientedFilter {
        let ox = sigma * phi.cos();
        let oy = sigma * phi.sin();
        // L2 norm of the equivalent dense kernel
        // sum_i w_i (G(q - t_i) - G(q + t_i))
        let taps = offset_taps(ox, oy);
        let reach = bank.radius + 2;
        let mut sq = 0.0;
        for qy in -reach..=reach {
            for qx in -reach..=reach {
                let mut val = 0.0;
                for &(tx, ty, w) in &taps {
                    val += w * bank.gaussian_at(qx - tx, qy - ty);
                    val -= w * bank.gaussian_at(qx + tx, qy + ty);
                }
                sq += val * val;
            }
        }
        let norm = sq.sqrt();
        OrientedFilter {
            scale_idx,
            ox,
            oy,
            inv_norm: if norm > 0.0 { 1.0 / norm } else { 0.0 },
        }
    }
}

/// A constructed embedding model. Immutable and safe to share.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    config: ModelConfig,
    scale_banks: Vec<ScaleBank>,
    /// Scale-major, orientation-minor filter order.
    filters: Vec<OrientedFilter>,
    /// `d x n_feat` projection for RGB inputs.
    proj: Array2<f64>,
    /// `d x 2*n_feat` projection for RGBD inputs.
    proj_rgbd: Array2<f64>,
}

/// Unit-norm feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Verification threshold on the squared feature distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub delta: f64,
}

impl Threshold {
    pub fn new(delta: f64) -> Result<Threshold> {
        if !(0.0..=4.0).contains(&delta) {
            return Err(SimError::invalid(format!(
                "threshold {delta} outside [0, 4]"
            )));
        }
        Ok(Threshold { delta })
    }
}

/// Verification decision of Eq.-style thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Same,
    Different,
}

#[derive(Debug, Clone)]
struct Forward {
    gray: Array2<f64>,
    activations: Vec<Array2<f64>>,
    pooled: Vec<f64>,
    norm: f64,
    feature: Vec<f64>,
}

/// Opaque forward activations kept for a backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fwd: Forward,
}

impl EmbeddingModel {
    pub fn new(config: ModelConfig) -> Result<EmbeddingModel> {
        if config.scales.is_empty() || config.orientations == 0 {
            return Err(SimError::invalid("model needs at least one filter"));
        }
        if config.d == 0 || config.pool_grid.0 == 0 || config.pool_grid.1 == 0 {
            return Err(SimError::invalid("model dimensions must be positive"));
        }
        let (h, w) = config.input;
        if h < config.pool_grid.0 || w < config.pool_grid.1 {
            return Err(SimError::invalid("pool grid finer than the input"));
        }
        let scale_banks: Vec<ScaleBank> =
            config.scales.iter().map(|&s| ScaleBank::new(s)).collect();
        let mut filters = Vec::new();
        for (si, &sigma) in config.scales.iter().enumerate() {
            for o in 0..config.orientations {
                let phi = std::f64::consts::PI * o as f64 / config.orientations as f64;
                filters.push(OrientedFilter::new(si, &scale_banks[si], sigma, phi));
            }
        }
        let n_feat = filters.len() * config.pool_grid.0 * config.pool_grid.1;
        let proj = seeded_projection(config.seed, "projection", config.d, n_feat);
        let proj_rgbd = seeded_projection(config.seed, "projection-rgbd", config.d, 2 * n_feat);
        Ok(EmbeddingModel {
            config,
            scale_banks,
            filters,
            proj,
            proj_rgbd,
        })
    }

    pub fn preset(id: &str) -> Result<EmbeddingModel> {
        EmbeddingModel::new(ModelConfig::preset(id)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn input_res(&self) -> (usize, usize) {
        self.config.input
    }

    fn check_input(&self, image: &Rgb) -> Result<()> {
        let (h, w, c) = image.dim();
        if (h, w) != self.config.input || c != 3 {
            return Err(SimError::invalid(format!(
                "image {h}x{w}x{c} does not match model input {:?}",
                self.config.input
            )));
        }
        Ok(())
    }

    /// Centered grayscale: `0.299 R + 0.587 G + 0.114 B - 0.5`, so the
    /// background gray maps to exactly zero.
    fn to_gray(&self, image: &Rgb) -> Array2<f64> {
        let (h, w, _) = image.dim();
        let mut gray = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                gray[[r, c]] = GRAY_WEIGHTS[0] * image[[r, c, 0]]
                    + GRAY_WEIGHTS[1] * image[[r, c, 1]]
                    + GRAY_WEIGHTS[2] * image[[r, c, 2]]
                    - 0.5;
            }
        }
        gray
    }

    fn forward_channels(&self, channels: &[Array2<f64>], proj: &Array2<f64>) -> Result<Forward> {
        let (h, w) = channels[0].dim();
        let mut activations = Vec::with_capacity(self.filters.len() * channels.len());
        for chan in channels {
            let blurred: Vec<Array2<f64>> = self
                .scale_banks
                .iter()
                .map(|bank| blur_2d(chan, bank))
                .collect();
            for filter in &self.filters {
                let resp = shifted_difference(&blurred[filter.scale_idx], filter);
                let mut act = resp;
                act.iter_mut()
                    .for_each(|v| *v = (self.config.gain * *v).tanh());
                activations.push(act);
            }
        }
        let (gh, gw) = self.config.pool_grid;
        let mut pooled = Vec::with_capacity(activations.len() * gh * gw);
        for act in &activations {
            for i in 0..gh {
                let (r0, r1) = (i * h / gh, (i + 1) * h / gh);
                for j in 0..gw {
                    let (c0, c1) = (j * w / gw, (j + 1) * w / gw);
                    let mut sum = 0.0;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            sum += act[[r, c]];
                        }
                    }
                    pooled.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let d = self.config.d;
        let mut raw = vec![0.0; d];
        for (i, r) in raw.iter_mut().enumerate() {
            let row = proj.row(i);
            *r = row
                .iter()
                .zip(pooled.iter())
                .map(|(p, f)| p * f)
                .sum::<f64>();
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(SimError::NonFinite(format!(
                "embedding norm {norm} before normalization"
            )));
        }
        let feature = raw.iter().map(|v| v / norm).collect();
        Ok(Forward {
            gray: channels[0].clone(),
            activations,
            pooled,
            norm,
            feature,
        })
    }

    /// Embeds an RGB image into a unit-norm feature vector.
    pub fn embed(&self, image: &Rgb) -> Result<FeatureVector> {
        self.check_input(image)?;
        let fwd = self.forward_channels(&[self.to_gray(image)], &self.proj)?;
        Ok(FeatureVector(fwd.feature))
    }

    /// Embeds and keeps the forward activations for a later
    /// [`EmbeddingModel::grad_cached`] call on the same image.
    pub fn embed_cached(&self, image: &Rgb) -> Result<(FeatureVector, ForwardCache)> {
        self.check_input(image)?;
        let fwd = self.forward_channels(&[self.to_gray(image)], &self.proj)?;
        let feature = FeatureVector(fwd.feature.clone());
        Ok((feature, ForwardCache { fwd }))
    }

    /// Backward pass from a cached forward: the image-shaped gradient of
    /// `upstream . f(image)`.
    pub fn grad_cached(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Rgb> {
        if upstream.len() != self.config.d {
            return Err(SimError::invalid(format!(
                "upstream length {} does not match d = {}",
                upstream.len(),
                self.config.d
            )));
        }
        let g_gray = self.backward_channel(&cache.fwd, upstream, &self.proj, 0);
        let (h, w) = cache.fwd.gray.dim();
        let mut grad = Array3::zeros((h, w, 3));
        for r in 0..h {
            for c in 0..w {
                let g = g_gray[[r, c]];
                for ch in 0..3 {
                    grad[[r, c, ch]] = g * GRAY_WEIGHTS[ch];
                }
            }
        }
        Ok(grad)
    }

    /// Exact adjoint of [`EmbeddingModel::embed`], including the
    /// normalization Jacobian: returns the image-shaped gradient of
    /// `upstream . f(image)`.
    pub fn embed_grad(&self, image: &Rgb, upstream: &[f64]) -> Result<Rgb> {
        let (_, cache) = self.embed_cached(image)?;
        self.grad_cached(&cache, upstream)
    }

    /// RGBD variant: the filter bank runs over both the centered grayscale
    /// and the centered depth channel, doubling the pooled features before
    /// a (separately seeded) projection. Depth must be normalized to
    /// `[0, 1]` with background 1 (see [`normalize_depth`]).
    pub fn embed_rgbd(&self, image: &Rgb, depth: &Array2<f64>) -> Result<FeatureVector> {
        self.check_input(image)?;
        if depth.dim() != self.config.input {
            return Err(SimError::invalid(format!(
                "depth {:?} does not match model input {:?}",
                depth.dim(),
                self.config.input
            )));
        }
        if depth.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SimError::invalid(
                "depth channel must be normalized to [0, 1]",
            ));
        }
        let mut centered_depth = depth.clone();
        centered_depth.iter_mut().for_each(|v| *v -= 0.5);
        let fwd =
            self.forward_channels(&[self.to_gray(image), centered_depth], &self.proj_rgbd)?;
        Ok(FeatureVector(fwd.feature))
    }

    fn backward_channel(
        &self,
        fwd: &Forward,
        upstream: &[f64],
        proj: &Array2<f64>,
        channel: usize,
    ) -> Array2<f64> {
        let (h, w) = fwd.gray.dim();
        let d = self.config.d;
        // normalization Jacobian: g_raw = (u - (u.f) f) / norm
        let udotf: f64 = upstream
            .iter()
            .zip(fwd.feature.iter())
            .map(|(a, b)| a * b)
            .sum();
        let g_raw: Vec<f64> = (0..d)
            .map(|i| (upstream[i] - udotf * fwd.feature[i]) / fwd.norm)
            .collect();
        // dense projection adjoint
        let n_feat = fwd.pooled.len();
        let mut g_pooled = vec![0.0; n_feat];
        for i in 0..d {
            let gi = g_raw[i];
            if gi == 0.0 {
                continue;
            }
            for (gp, p) in g_pooled.iter_mut().zip(proj.row(i).iter()) {
                *gp += gi * p;
            }
        }
        // pooling and tanh adjoint, then per-scale blurred-plane
        // accumulation and the blur adjoint, for the requested input
        // channel only
        let (gh, gw) = self.config.pool_grid;
        let per_channel = self.filters.len();
        let mut g_blurred: Vec<Array2<f64>> = self
            .scale_banks
            .iter()
            .map(|_| Array2::zeros((h, w)))
            .collect();
        for (fi, filter) in self.filters.iter().enumerate() {
            let act_idx = channel * per_channel + fi;
            let act = &fwd.activations[act_idx];
            let mut g_resp = Array2::zeros((h, w));
            let mut any = false;
            for i in 0..gh {
                let (r0, r1) = (i * h / gh, (i + 1) * h / gh);
                for j in 0..gw {
                    let (c0, c1) = (j * w / gw, (j + 1) * w / gw);
                    let cell = act_idx * gh * gw + i * gw + j;
                    let g_cell = g_pooled[cell] / ((r1 - r0) * (c1 - c0)) as f64;
                    if g_cell == 0.0 {
                        continue;
                    }
                    any = true;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            let a = act[[r, c]];
                            g_resp[[r, c]] = g_cell * self.config.gain * (1.0 - a * a);
                        }
                    }
                }
            }
            if any {
                shifted_difference_adjoint(&g_resp, filter, &mut g_blurred[filter.scale_idx]);
            }
        }
        let mut g_input = Array2::zeros((h, w));
        for (bank, g_blur) in self.scale_banks.iter().zip(g_blurred.iter()) {
            let g = blur_2d(g_blur, bank); // symmetric blur is self-adjoint
            g_input.zip_mut_with(&g, |a, b| *a += b);
        }
        g_input
    }
}

fn seeded_projection(seed: u64, label: &str, d: usize, n: usize) -> Array2<f64> {
    let mut rng = stream(seed, label);
    let scale = 1.0 / (n as f64).sqrt();
    let normal = Normal::new(0.0, scale).expect("valid scale");
    let mut proj = Array2::zeros((d, n));
    for v in proj.iter_mut() {
        *v = normal.sample(&mut rng);
    }
    proj
}

/// Zero-padded separable Gaussian blur (rows, then columns). The kernel is
/// symmetric, so the operation is its own adjoint.
fn blur_2d(input: &Array2<f64>, bank: &ScaleBank) -> Array2<f64> {
    let (h, w) = input.dim();
    let r = bank.radius;
    let taps = &bank.blur;
    // rows
    let mut tmp = Array2::zeros((h, w));
    {
        let src = input.as_slice().expect("contiguous");
        let dst = tmp.as_slice_mut().expect("contiguous");
        for row in 0..h {
            let in_row = &src[row * w..(row + 1) * w];
            let out_row = &mut dst[row * w..(row + 1) * w];
            for col in 0..w {
                let lo = (-r).max(-(col as isize));
                let hi = r.min(w as isize - 1 - col as isize);
                let mut acc = 0.0;
                for d in lo..=hi {
                    acc += taps[(d + r) as usize] * in_row[(col as isize + d) as usize];
                }
                out_row[col] = acc;
            }
        }
    }
    // columns
    let mut out = Array2::zeros((h, w));
    {
        let src = tmp.as_slice().expect("contiguous");
        let dst = out.as_slice_mut().expect("contiguous");
        for row in 0..h {
            let lo = (-r).max(-(row as isize));
            let hi = r.min(h as isize - 1 - row as isize);
            let out_row = &mut dst[row * w..(row + 1) * w];
            for d in lo..=hi {
                let tap = taps[(d + r) as usize];
                let src_row = &src[((row as isize + d) as usize) * w..][..w];
                for col in 0..w {
                    out_row[col] += tap * src_row[col];
                }
            }
        }
    }
    out
}

/// Filter response from the blurred plane:
/// `(B(p + o) - B(p - o)) * inv_norm` with bilinear taps, zero outside.
fn shifted_difference(blurred: &Array2<f64>, filter: &OrientedFilter) -> Array2<f64> {
    let (h, w) = blurred.dim();
    let mut out = Array2::zeros((h, w));
    let src = blurred.as_slice().expect("contiguous");
    let dst = out.as_slice_mut().expect("contiguous");
    for (sign, ox, oy) in [(1.0, filter.ox, filter.oy), (-1.0, -filter.ox, -filter.oy)] {
        for (tx, ty, wgt) in offset_taps(ox, oy) {
            if wgt == 0.0 {
                continue;
            }
            let coeff = sign * wgt * filter.inv_norm;
            let r0 = 0.max(-ty);
            let r1 = (h as isize).min(h as isize - ty);
            for row in r0..r1 {
                let src_row = ((row + ty) as usize) * w;
                let dst_row = (row as usize) * w;
                let c0 = 0.max(-tx) as usize;
                let c1 = (w as isize).min(w as isize - tx) as usize;
                for col in c0..c1 {
                    dst[dst_row + col] += coeff * src[src_row + (col as isize + tx) as usize];
                }
            }
        }
    }
    out
}

/// Adjoint of [`shifted_difference`], accumulating into the blurred-plane
/// gradient.
fn shifted_difference_adjoint(
    g_resp: &Array2<f64>,
    filter: &OrientedFilter,
    g_blurred: &mut Array2<f64>,
) {
    let (h, w) = g_resp.dim();
    let src = g_resp.as_slice().expect("contiguous");
    let dst = g_blurred.as_slice_mut().expect("contiguous");
    for (sign, ox, oy) in [(1.0, filter.ox, filter.oy), (-1.0, -filter.ox, -filter.oy)] {
        for (tx, ty, wgt) in offset_taps(ox, oy) {
            if wgt == 0.0 {
                continue;
            }
            let coeff = sign * wgt * filter.inv_norm;
            let r0 = 0.max(-ty);
            let r1 = (h as isize).min(h as isize - ty);
            for row in r0..r1 {
                let blur_row = ((row + ty) as usize) * w;
                let resp_row = (row as usize) * w;
                let c0 = 0.max(-tx) as usize;
                let c1 = (w as isize).min(w as isize - tx) as usize;
                for col in c0..c1 {
                    dst[blur_row + (col as isize + tx) as usize] += coeff * src[resp_row + col];
                }
            }
        }
    }
}

/// Squared Euclidean distance between unit-norm features; range `[0, 4]`.
pub fn feature_distance(a: &FeatureVector, b: &FeatureVector) -> f64 {
    a.0.iter()
        .zip(b.0.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Verification: "same" iff the feature distance is strictly below the
/// threshold.
pub fn verify(model: &EmbeddingModel, xa: &Rgb, xb: &Rgb, delta: Threshold) -> Result<Decision> {
    let fa = model.embed(xa)?;
    let fb = model.embed(xb)?;
    Ok(decide(feature_distance(&fa, &fb), delta))
}

pub fn decide(distance: f64, delta: Threshold) -> Decision {
    if distance < delta.delta {
        Decision::Same
    } else {
        Decision::Different
    }
}

/// Accuracy-maximizing threshold over candidate cut points at all midpoints
/// between consecutive sorted distances; ties break toward the smaller
/// threshold.
pub fn calibrate_threshold(
    model: &EmbeddingModel,
    genuine_pairs: &[(Rgb, Rgb)],
    impostor_pairs: &[(Rgb, Rgb)],
) -> Result<Threshold> {
    let dist = |pairs: &[(Rgb, Rgb)]| -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|(a, b)| {
                Ok(feature_distance(&model.embed(a)?, &model.embed(b)?))
            })
            .collect()
    };
    calibrate_threshold_from_distances(&dist(genuine_pairs)?, &dist(impostor_pairs)?)
}

/// Threshold scan on precomputed distances (the calibration core).
pub fn calibrate_threshold_from_distances(
    genuine: &[f64],
    impostor: &[f64],
) -> Result<Threshold> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(SimError::invalid(
            "calibration requires non-empty genuine and impostor sets",
        ));
    }
    let mut all: Vec<f64> = genuine.iter().chain(impostor.iter()).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let total = (genuine.len() + impostor.len()) as f64;
    let accuracy = |delta: f64| -> f64 {
        let ok_g = genuine.iter().filter(|&&d| d < delta).count();
        let ok_i = impostor.iter().filter(|&&d| d >= delta).count();
        (ok_g + ok_i) as f64 / total
    };
    let mut best_delta = f64::NAN;
    let mut best_acc = f64::NEG_INFINITY;
    for pair in all.windows(2) {
        let mid = 0.5 * (pair[0] + pair[1]);
        let acc = accuracy(mid);
        if acc > best_acc {
            best_acc = acc;
            best_delta = mid;
        }
    }
    if !best_delta.is_finite() {
        // single distinct distance: no midpoints; fall back to it
        best_delta = all[0];
    }
    Threshold::new(best_delta.clamp(0.0, 4.0))
}

/// Normalizes a depth map to `[0, 1]` over the covered pixels (nearest 0,
/// farthest 1); background pixels become exactly 1.
pub fn normalize_depth(depth: &Array2<f64>, coverage: &Array2<bool>) -> Array2<f64> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (d, &cov) in depth.iter().zip(coverage.iter()) {
        if cov {
            min = min.min(*d);
            max = max.max(*d);
        }
    }
    let mut out = Array2::ones(depth.dim());
    if !min.is_finite() || !max.is_finite() {
        return out;
    }
    let span = max - min;
    for ((o, d), &cov) in out.iter_mut().zip(depth.iter()).zip(coverage.iter()) {
        if cov {
            *o = if span > 0.0 { (*d - min) / span } else { 0.0 };
        }
    }
    out
}

/// Desk-scale separation gate: calibrated verification accuracy over
/// synthetic identities. Genuine pairs render one identity at yaw -5 and
/// +5 degrees; impostor pairs render distinct identities at the neutral
/// pose. Model configurations failing the documented 90% bar are rejected
/// by the test suite.
pub fn separation_accuracy(
    model: &EmbeddingModel,
    n_identities: usize,
    base_seed: u64,
) -> Result<(Threshold, f64)> {
    if n_identities < 2 {
        return Err(SimError::invalid("need at least two identities"));
    }
    let res = model.input_res();
    let mut neutral = Vec::new();
    let mut genuine = Vec::new();
    for i in 0..n_identities {
        let params = synth_identity(base_seed + i as u64);
        let shape = build_shape(&params, crate::geometry::DEFAULT_SHAPE_RES)?;
        let texture = build_texture(&params, DEFAULT_TEXTURE_RES)?;
        let left = render_at(
            &shape,
            &texture,
            &Viewpoint::new(-5.0, 0.0)?,
            &Lighting::NEUTRAL,
            res,
        )?;
        let right = render_at(
            &shape,
            &texture,
            &Viewpoint::new(5.0, 0.0)?,
            &Lighting::NEUTRAL,
            res,
        )?;
        let front = render_at(&shape, &texture, &Viewpoint::NEUTRAL, &Lighting::NEUTRAL, res)?;
        genuine.push((left.image, right.image));
        neutral.push(front.image);
    }
    let mut genuine_d = Vec::new();
    for (a, b) in &genuine {
        genuine_d.push(feature_distance(&model.embed(a)?, &model.embed(b)?));
    }
    let mut impostor_d = Vec::new();
    for i in 0..n_identities {
        let j = (i + 1) % n_identities;
        impostor_d.push(feature_distance(
            &model.embed(&neutral[i])?,
            &model.embed(&neutral[j])?,
        ));
    }
    let threshold = calibrate_threshold_from_distances(&genuine_d, &impostor_d)?;
    let ok_g = genuine_d.iter().filter(|&&d| d < threshold.delta).count();
    let ok_i = impostor_d.iter().filter(|&&d| d >= threshold.delta).count();
    let accuracy = (ok_g + ok_i) as f64 / (genuine_d.len() + impostor_d.len()) as f64;
    Ok((threshold, accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_model() -> EmbeddingModel {
        EmbeddingModel::new(ModelConfig {
            id: "tiny".into(),
            input: (8, 8),
            scales: vec![1.0],
            orientations: 1,
            pool_grid: (1, 1),
            seed: 7,
            d: 2,
            gain: 2.0,
        })
        .unwrap()
    }

    fn random_image(res: (usize, usize), seed: u64) -> Rgb {
        let mut rng = stream(seed, "recognizer-test-image");
        let mut img = Array3::zeros((res.0, res.1, 3));
        img.iter_mut().for_each(|v| *v = rng.gen());
        img
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let model = tiny_model();
        let img = random_image((8, 8), 1);
        let f1 = model.embed(&img).unwrap();
        let f2 = model.embed(&img).unwrap();
        assert_eq!(f1, f2);
        let norm: f64 = f1.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn toy_forward_matches_hand_unrolled_computation() {
        // independently re-implement blur -> offset difference -> tanh ->
        // mean -> project -> normalize for the 1-filter, 1-cell, d=2
        // configuration (sigma 1, orientation 0, so the offset is the
        // integer (1, 0))
        let model = tiny_model();
        let img = random_image((8, 8), 2);
        let got = model.embed(&img).unwrap();

        // grayscale, centered
        let mut gray = [[0.0f64; 8]; 8];
        for r in 0..8 {
            for c in 0..8 {
                gray[r][c] = 0.299 * img[[r, c, 0]] + 0.587 * img[[r, c, 1]]
                    + 0.114 * img[[r, c, 2]]
                    - 0.5;
            }
        }
        // sum-normalized 1D Gaussian, radius ceil(3*sigma) = 3
        let sigma = 1.0f64;
        let radius = 3i32;
        let mut g1: Vec<f64> = (-radius..=radius)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = g1.iter().sum();
        g1.iter_mut().for_each(|v| *v /= s);
        let g2 = |tx: i32, ty: i32| -> f64 {
            if tx.abs() > radius || ty.abs() > radius {
                0.0
            } else {
                g1[(tx + radius) as usize] * g1[(ty + radius) as usize]
            }
        };
        // zero-padded 2D blur
        let mut blur = [[0.0f64; 8]; 8];
        for r in 0..8i32 {
            for c in 0..8i32 {
                let mut acc = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let (rr, cc) = (r + dy, c + dx);
                        if (0..8).contains(&rr) && (0..8).contains(&cc) {
                            acc += gray[rr as usize][cc as usize] * g2(dx, dy);
                        }
                    }
                }
                blur[r as usize][c as usize] = acc;
            }
        }
        // effective dense kernel norm: G(q - o) - G(q + o) with o = (1, 0)
        let mut sq = 0.0;
        for qy in -(radius + 2)..=(radius + 2) {
            for qx in -(radius + 2)..=(radius + 2) {
                let v = g2(qx - 1, qy) - g2(qx + 1, qy);
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        // response (B(p + o) - B(p - o)) / norm, tanh, global mean
        let at = |r: i32, c: i32| -> f64 {
            if (0..8).contains(&r) && (0..8).contains(&c) {
                blur[r as usize][c as usize]
            } else {
                0.0
            }
        };
        let mut mean = 0.0;
        for r in 0..8i32 {
            for c in 0..8i32 {
                let resp = (at(r, c + 1) - at(r, c - 1)) / norm;
                mean += (2.0 * resp).tanh();
            }
        }
        mean /= 64.0;
        // seeded projection (1 feature -> 2 dims), then normalize
        let proj = seeded_projection(7, "projection", 2, 1);
        let raw = [proj[[0, 0]] * mean, proj[[1, 0]] * mean];
        let n = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
        let expected = [raw[0] / n, raw[1] / n];
        for i in 0..2 {
            assert!(
                (got.0[i] - expected[i]).abs() < 1e-9,
                "dim {i}: {} vs {}",
                got.0[i],
                expected[i]
            );
        }
    }

    #[test]
    fn embed_grad_matches_finite_differences() {
        let model = tiny_model();
        let img = random_image((8, 8), 3);
        let mut rng = stream(4, "fd");
        // loss = f(x) . c for a fixed random c
        let c: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() - 0.5).collect();
        let analytic = model.embed_grad(&img, &c).unwrap();
        let loss = |im: &Rgb| -> f64 {
            model
                .embed(im)
                .unwrap()
                .0
                .iter()
                .zip(c.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-4;
        for _ in 0..100 {
            let r = rng.gen_range(0..8);
            let cc = rng.gen_range(0..8);
            let ch = rng.gen_range(0..3);
            let mut plus = img.clone();
            plus[[r, cc, ch]] += h;
            let mut minus = img.clone();
            minus[[r, cc, ch]] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = analytic[[r, cc, ch]];
            if an.abs() < 1e-8 {
                assert!((an - fd).abs() < 1e-7, "({r},{cc},{ch}): {an} vs {fd}");
            } else {
                assert!(((an - fd) / an).abs() < 1e-4, "({r},{cc},{ch}): {an} vs {fd}");
            }
        }
    }

    #[test]
    fn gradient_of_norm_is_zero() {
        // upstream = f(x): the loss is ||f(x)||, constant 1
        let model = tiny_model();
        let img = random_image((8, 8), 5);
        let f = model.embed(&img).unwrap();
        let grad = model.embed_grad(&img, &f.0).unwrap();
        for g in grad.iter() {
            assert!(g.abs() < 1e-10, "norm gradient leak {g}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let model = tiny_model();
        let img = random_image((8, 8), 6);
        let grad = model.embed_grad(&img, &[0.0, 0.0]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn distance_identities() {
        let a = FeatureVector(vec![1.0, 0.0]);
        let b = FeatureVector(vec![0.0, 1.0]);
        let na = FeatureVector(vec![-1.0, 0.0]);
        assert_eq!(feature_distance(&a, &a), 0.0);
        assert!((feature_distance(&a, &b) - 2.0).abs() < 1e-12);
        assert!((feature_distance(&a, &na) - 4.0).abs() < 1e-12);
        assert_eq!(feature_distance(&a, &b), feature_distance(&b, &a));
    }

    #[test]
    fn verify_uses_strict_inequality() {
        let t = Threshold::new(0.0).unwrap();
        assert_eq!(decide(0.0, t), Decision::Different);
        let model = tiny_model();
        let img = random_image((8, 8), 7);
        assert_eq!(
            verify(&model, &img, &img, Threshold::new(0.1).unwrap()).unwrap(),
            Decision::Same
        );
        assert_eq!(
            verify(&model, &img, &img, Threshold::new(0.0).unwrap()).unwrap(),
            Decision::Different
        );
    }

    #[test]
    fn threshold_scan_examples() {
        let t = calibrate_threshold_from_distances(&[0.1, 0.2], &[1.0, 1.2]).unwrap();
        assert!((t.delta - 0.6).abs() < 1e-12);
        let t = calibrate_threshold_from_distances(&[0.3], &[0.9]).unwrap();
        assert!((t.delta - 0.6).abs() < 1e-12);
        // interleaved: best accuracy 0.5, smallest optimal midpoint
        let t = calibrate_threshold_from_distances(&[0.3, 0.7], &[0.1, 0.5]).unwrap();
        assert!((t.delta - 0.4).abs() < 1e-12);
        assert!(calibrate_threshold_from_distances(&[], &[0.5]).is_err());
    }

    #[test]
    fn rgbd_embedding_is_unit_norm_and_depth_sensitive() {
        let model = tiny_model();
        let img = random_image((8, 8), 8);
        let flat = Array2::from_elem((8, 8), 1.0);
        let mut ramp = Array2::from_elem((8, 8), 1.0);
        for r in 0..8 {
            for c in 0..8 {
                ramp[[r, c]] = c as f64 / 7.0;
            }
        }
        let fa = model.embed_rgbd(&img, &flat).unwrap();
        let fb = model.embed_rgbd(&img, &ramp).unwrap();
        let norm: f64 = fa.0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(feature_distance(&fa, &fb) > 1e-6);
        // resolution mismatch
        assert!(model
            .embed_rgbd(&img, &Array2::from_elem((4, 4), 1.0))
            .is_err());
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let model = tiny_model();
        let img = random_image((9, 8), 9);
        assert!(model.embed(&img).is_err());
    }

    #[test]
    fn model_config_round_trips_as_json() {
        let cfg = ModelConfig::preset("modelB").unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert!(ModelConfig::preset("modelZ").is_err());
    }
}
