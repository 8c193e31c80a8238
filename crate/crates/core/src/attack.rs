//! Masked adversarial patch attacks on the rendered face.
//!
//! All methods optimize the texture map inside a binary mask, keep every
//! iterate inside the L-infinity ball of radius `epsilon` around the clean
//! texture, and leave texels outside the mask bit-identical to the clean
//! texture:
//!
//! * `MIM`: momentum sign steps against the single neutral condition, no
//!   transformation sampling (the no-transformation baseline).
//! * `EOT`: sign steps against the mean loss of `sample_count` fresh 2D
//!   transformations (rotation then projective) of the neutral render.
//! * `Face3DAdv(x)`: sign steps against the mean loss over 3D rendering
//!   conditions drawn from the candidate set, either uniformly or by the
//!   loss-weighted importance distribution, each sampled render optionally
//!   passed through a fresh 2D transformation.
//! * `Face3DAdv(w)`: the same sampling loop, but the patch is decoded
//!   from a low-frequency cosine basis code updated with Adam, which keeps
//!   the perturbation smooth and feasible by construction.
//!
//! Per iteration the work order is fixed: draw all random choices
//! sequentially, evaluate samples (parallelizable), then reduce gradients
//! in sample-index order. Runs are bit-reproducible for a given seed
//! regardless of thread count.

use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::{
    build_shape, build_texture, IdentityParams, PatchMask, TextureMap, DEFAULT_SHAPE_RES,
};
use crate::io::Rgb;
use crate::optim::Adam;
use crate::recognizer::{decide, Decision, EmbeddingModel, Threshold};
use crate::renderer::{
    apply_transforms, rasterize, resample_image_to_texture, sample_transform2d, transforms_grad,
    FragmentBuffer, Lighting, Transform2D, TransformKind, Viewpoint,
};
use crate::rng::stream;

/// Attack goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    /// Evade being matched to the victim (same identity).
    Dodging,
    /// Get matched to the victim (different identity).
    Impersonation,
}

/// Attack algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMethod {
    #[serde(rename = "mim")]
    Mim,
    #[serde(rename = "eot")]
    Eot,
    #[serde(rename = "face3dadv_x")]
    Face3dAdvX,
    #[serde(rename = "face3dadv_w")]
    Face3dAdvW,
}

impl std::str::FromStr for AttackMethod {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mim" => Ok(AttackMethod::Mim),
            "eot" => Ok(AttackMethod::Eot),
            "face3dadv_x" => Ok(AttackMethod::Face3dAdvX),
            "face3dadv_w" => Ok(AttackMethod::Face3dAdvW),
            other => Err(SimError::invalid(format!("unknown attack method {other:?}"))),
        }
    }
}

impl std::fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AttackMethod::Mim => "mim",
            AttackMethod::Eot => "eot",
            AttackMethod::Face3dAdvX => "face3dadv_x",
            AttackMethod::Face3dAdvW => "face3dadv_w",
        };
        f.write_str(s)
    }
}

/// Full attack configuration. `epsilon`, `alpha` are in `[0, 1]` pixel
/// units (the conventional 8-bit values 40, 255, and 1.5 divide by 255).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub method: AttackMethod,
    /// L-infinity budget inside the mask. `epsilon = 0` is a degenerate
    /// setting accepted for tests only; it pins the texture to the clean
    /// one.
    pub epsilon: f64,
    /// Sign-step size.
    pub alpha: f64,
    /// Iteration budget (N for MIM/EOT, N2 for the 3D-aware methods).
    pub iters: usize,
    /// Momentum decay of MIM.
    pub momentum_mu: f64,
    /// Renders per iteration (M).
    pub sample_count: usize,
    /// Candidate conditions evaluated for importance weighting (M_L).
    pub candidate_count: usize,
    pub use_importance_sampling: bool,
    /// Draw conditions with replacement instead of the default subset
    /// sampling (ablation switch).
    pub with_replacement: bool,
    /// Scale of the fresh per-sample 2D transformations; 0 disables them.
    pub transform2d_sigma: f64,
    pub rng_seed: u64,
    /// Cosine code side length K for `face3dadv_w`.
    pub basis_dim: usize,
    /// Initialize the patch from the victim image resampled into texture
    /// space; fall back to the clean texture when disabled.
    pub init_from_victim: bool,
}

impl AttackConfig {
    /// Committed defaults per method and mode: `epsilon` 40/255 for
    /// impersonation and 255/255 for dodging, `alpha` 1.5/255, 400
    /// iterations for MIM/EOT and 100 for the 3D-aware methods,
    /// `momentum_mu` 1, 10 samples from 20 candidates.
    pub fn new(mode: AttackMode, method: AttackMethod) -> AttackConfig {
        let epsilon = match mode {
            AttackMode::Impersonation => 40.0 / 255.0,
            AttackMode::Dodging => 1.0,
        };
        let iters = match method {
            AttackMethod::Mim | AttackMethod::Eot => 400,
            AttackMethod::Face3dAdvX | AttackMethod::Face3dAdvW => 100,
        };
        AttackConfig {
            mode,
            method,
            epsilon,
            alpha: 1.5 / 255.0,
            iters,
            momentum_mu: 1.0,
            sample_count: 10,
            candidate_count: 20,
            use_importance_sampling: true,
            with_replacement: false,
            transform2d_sigma: 0.03,
            rng_seed: 0,
            basis_dim: 8,
            init_from_victim: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(SimError::invalid("alpha must be positive"));
        }
        if self.epsilon > 1.0 || self.epsilon < 0.0 {
            return Err(SimError::invalid("epsilon must lie in [0, 1]"));
        }
        if self.epsilon != 0.0 && self.epsilon < self.alpha {
            return Err(SimError::invalid("epsilon must be at least alpha"));
        }
        if self.iters == 0 {
            return Err(SimError::invalid("iters must be positive"));
        }
        if self.sample_count == 0 || self.sample_count > self.candidate_count {
            return Err(SimError::invalid(
                "sample_count must be in 1..=candidate_count",
            ));
        }
        if self.transform2d_sigma < 0.0 {
            return Err(SimError::invalid("transform2d_sigma must be non-negative"));
        }
        if self.method == AttackMethod::Face3dAdvW && self.basis_dim < 4 {
            return Err(SimError::invalid("basis_dim must be at least 4"));
        }
        Ok(())
    }
}

/// The candidate rendering conditions of the 3D-aware attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub conditions: Vec<(Viewpoint, Lighting)>,
}

impl CandidateSet {
    /// Committed default: a stratified cover of the testing ranges.
    /// Fourteen pose conditions (the yaw {-15,-5,5,15} x pitch {-15,0,15}
    /// grid plus yaw +/-10 at level pitch) under neutral lighting, and six
    /// lighting azimuths {-60,-36,-12,12,36,60} at the neutral pose.
    pub fn stratified_default() -> CandidateSet {
        let mut conditions = Vec::with_capacity(20);
        for yaw in [-15.0, -5.0, 5.0, 15.0] {
            for pitch in [-15.0, 0.0, 15.0] {
                conditions.push((
                    Viewpoint {
                        yaw_deg: yaw,
                        pitch_deg: pitch,
                    },
                    Lighting::NEUTRAL,
                ));
            }
        }
        for yaw in [-10.0, 10.0] {
            conditions.push((
                Viewpoint {
                    yaw_deg: yaw,
                    pitch_deg: 0.0,
                },
                Lighting::NEUTRAL,
            ));
        }
        for az in [-60.0, -36.0, -12.0, 12.0, 36.0, 60.0] {
            conditions.push((Viewpoint::NEUTRAL, Lighting::with_azimuth(az)));
        }
        CandidateSet { conditions }
    }

    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (v, l) in &self.conditions {
            v.validate()?;
            l.validate()?;
        }
        for i in 0..self.conditions.len() {
            for j in i + 1..self.conditions.len() {
                if self.conditions[i] == self.conditions[j] {
                    return Err(SimError::invalid(format!(
                        "candidate conditions {i} and {j} are duplicates"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sampling distribution over candidates; strictly positive, sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceDistribution {
    pub probs: Vec<f64>,
}

/// Outcome of an attack run.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adv_texture: TextureMap,
    /// Mean per-sample loss at each iteration.
    pub loss_trace: Vec<f64>,
    pub iterations_run: usize,
    /// Verification outcome at the neutral condition against the victim,
    /// interpreted per the attack mode.
    pub success_at_neutral: bool,
}

/// Attack loss: the optimizer minimizes this. Dodging negates the feature
/// distance (pushing it up); impersonation minimizes it directly.
pub fn attack_loss(mode: AttackMode, distance: f64) -> f64 {
    match mode {
        AttackMode::Dodging => -distance,
        AttackMode::Impersonation => distance,
    }
}

/// Projects a texture onto the feasible set: inside the mask each channel
/// is clamped to `[t_a - eps, t_a + eps]` intersected with `[0, 1]`; outside the mask the
/// output equals the clean texture exactly.
pub fn project_patch(
    texture: &TextureMap,
    clean: &TextureMap,
    mask: &PatchMask,
    epsilon: f64,
) -> TextureMap {
    let (h, w) = clean.resolution();
    let mut values = clean.values.clone();
    for r in 0..h {
        for c in 0..w {
            if mask.values[[r, c]] == 0 {
                continue;
            }
            for ch in 0..3 {
                let base = clean.values[[r, c, ch]];
                let lo = (base - epsilon).max(0.0);
                let hi = (base + epsilon).min(1.0);
                values[[r, c, ch]] = texture.values[[r, c, ch]].clamp(lo, hi);
            }
        }
    }
    TextureMap { values }
}

/// Softmax of the candidate losses with max subtraction for stability.
/// Larger losses (harder conditions) get larger probabilities.
pub fn importance_probs(losses: &[f64]) -> Result<ImportanceDistribution> {
    if losses.is_empty() {
        return Err(SimError::invalid("importance_probs needs losses"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(SimError::invalid("importance_probs requires finite losses"));
    }
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = losses.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(ImportanceDistribution {
        probs: exps.iter().map(|e| e / z).collect(),
    })
}

/// Draws `m` distinct candidate indices, sequentially proportional to the
/// remaining probability mass (without replacement).
pub fn sample_conditions<R: Rng>(
    dist: &ImportanceDistribution,
    m: usize,
    rng: &mut R,
) -> Vec<usize> {
    sample_indices(dist, m, false, rng)
}

/// Sampling core; `with_replacement = true` is the ablation variant.
pub fn sample_indices<R: Rng>(
    dist: &ImportanceDistribution,
    m: usize,
    with_replacement: bool,
    rng: &mut R,
) -> Vec<usize> {
    assert!(
        with_replacement || m <= dist.probs.len(),
        "cannot draw {m} distinct indices from {}",
        dist.probs.len()
    );
    let mut weights = dist.probs.clone();
    let mut picks = Vec::with_capacity(m);
    for _ in 0..m {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if u < w {
                chosen = Some(i);
                break;
            }
            u -= w;
        }
        let idx = chosen.unwrap_or_else(|| {
            // numerical leftover: take the last index with mass
            weights
                .iter()
                .rposition(|&w| w > 0.0)
                .expect("positive mass remains")
        });
        picks.push(idx);
        if !with_replacement {
            weights[idx] = 0.0;
        }
    }
    picks
}

/// One evaluated sample: which fragment buffer to shade and which 2D
/// transformations to apply to the render.
struct SampleSpec {
    frag_idx: usize,
    transforms: Vec<Transform2D>,
}

struct SampleEval {
    loss: f64,
    grad_texture: Array3<f64>,
}

/// Forward and backward pass of one sample; the gradient is with respect
/// to the texture.
fn eval_sample(
    frag: &FragmentBuffer,
    texture: &TextureMap,
    spec: &SampleSpec,
    model: &EmbeddingModel,
    f_victim: &[f64],
    mode: AttackMode,
) -> Result<SampleEval> {
    let rendered = frag.shade(texture);
    let input = if spec.transforms.is_empty() {
        rendered.clone()
    } else {
        apply_transforms(&rendered, &spec.transforms)?
    };
    let (feature, cache) = model.embed_cached(&input)?;
    let dist: f64 = feature
        .0
        .iter()
        .zip(f_victim.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let loss = attack_loss(mode, dist);
    let sign = match mode {
        AttackMode::Impersonation => 1.0,
        AttackMode::Dodging => -1.0,
    };
    let upstream: Vec<f64> = feature
        .0
        .iter()
        .zip(f_victim.iter())
        .map(|(a, b)| sign * 2.0 * (a - b))
        .collect();
    let g_input = model.grad_cached(&cache, &upstream)?;
    let g_render = if spec.transforms.is_empty() {
        g_input
    } else {
        transforms_grad(&rendered, &spec.transforms, &g_input)?
    };
    let grad_texture = frag.shade_grad(texture.resolution(), &g_render);
    Ok(SampleEval { loss, grad_texture })
}

/// Candidate losses without 2D transformations (the importance weights).
fn candidate_losses(
    frags: &[FragmentBuffer],
    texture: &TextureMap,
    model: &EmbeddingModel,
    f_victim: &[f64],
    mode: AttackMode,
) -> Result<Vec<f64>> {
    frags
        .par_iter()
        .map(|frag| {
            let image = frag.shade(texture);
            let feature = model.embed(&image)?;
            let dist: f64 = feature
                .0
                .iter()
                .zip(f_victim.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(attack_loss(mode, dist))
        })
        .collect()
}

struct AttackContext<'a> {
    shape: crate::geometry::ShapeMap,
    clean: TextureMap,
    mask: &'a PatchMask,
    model: &'a EmbeddingModel,
    f_victim: Vec<f64>,
    frags: Vec<FragmentBuffer>,
    neutral_frag: FragmentBuffer,
    config: &'a AttackConfig,
}

impl<'a> AttackContext<'a> {
    fn prepare(
        attacker: &IdentityParams,
        victim_image: &Rgb,
        mask: &'a PatchMask,
        model: &'a EmbeddingModel,
        candidates: &CandidateSet,
        config: &'a AttackConfig,
    ) -> Result<AttackContext<'a>> {
        config.validate()?;
        if mask.is_empty() {
            return Err(SimError::invalid("patch mask is empty"));
        }
        let (h, w, _) = victim_image.dim();
        if (h, w) != model.input_res() {
            return Err(SimError::invalid(format!(
                "victim image {h}x{w} does not match model input {:?}",
                model.input_res()
            )));
        }
        let shape = build_shape(attacker, DEFAULT_SHAPE_RES)?;
        let clean = build_texture(attacker, mask.resolution())?;
        let f_victim = model.embed(victim_image)?.0;
        let image_res = model.input_res();
        let neutral_frag = rasterize(&shape, &Viewpoint::NEUTRAL, &Lighting::NEUTRAL, image_res);
        let frags = match config.method {
            AttackMethod::Mim | AttackMethod::Eot => vec![],
            AttackMethod::Face3dAdvX | AttackMethod::Face3dAdvW => {
                candidates.validate()?;
                if candidates.len() != config.candidate_count {
                    return Err(SimError::invalid(format!(
                        "candidate set has {} conditions, config expects {}",
                        candidates.len(),
                        config.candidate_count
                    )));
                }
                candidates
                    .conditions
                    .par_iter()
                    .map(|(v, l)| rasterize(&shape, v, l, image_res))
                    .collect()
            }
        };
        Ok(AttackContext {
            shape,
            clean,
            mask,
            model,
            f_victim,
            frags,
            neutral_frag,
            config,
        })
    }

    fn initial_texture(&self, victim_image: &Rgb) -> TextureMap {
        let init = if self.config.init_from_victim {
            resample_image_to_texture(&self.shape, victim_image, self.clean.resolution())
        } else {
            self.clean.clone()
        };
        project_patch(&init, &self.clean, self.mask, self.config.epsilon)
    }

    /// Draws the per-iteration samples. All randomness is consumed here,
    /// sequentially, before any parallel work.
    fn draw_samples(
        &self,
        texture: &TextureMap,
        rng_cond: &mut impl Rng,
        rng_t2d: &mut impl Rng,
    ) -> Result<(Vec<SampleSpec>, Option<Vec<f64>>)> {
        let cfg = self.config;
        match cfg.method {
            AttackMethod::Mim => Ok((
                vec![SampleSpec {
                    frag_idx: 0,
                    transforms: vec![],
                }],
                None,
            )),
            AttackMethod::Eot => {
                let specs = (0..cfg.sample_count)
                    .map(|_| {
                        let transforms = if cfg.transform2d_sigma > 0.0 {
                            vec![
                                sample_transform2d(
                                    TransformKind::Rotation,
                                    cfg.transform2d_sigma,
                                    rng_t2d,
                                ),
                                sample_transform2d(
                                    TransformKind::Projective,
                                    cfg.transform2d_sigma,
                                    rng_t2d,
                                ),
                            ]
                        } else {
                            vec![]
                        };
                        SampleSpec {
                            frag_idx: 0,
                            transforms,
                        }
                    })
                    .collect();
                Ok((specs, None))
            }
            AttackMethod::Face3dAdvX | AttackMethod::Face3dAdvW => {
                let dist = if cfg.use_importance_sampling {
                    let losses = candidate_losses(
                        &self.frags,
                        texture,
                        self.model,
                        &self.f_victim,
                        cfg.mode,
                    )?;
                    importance_probs(&losses)?
                } else {
                    ImportanceDistribution {
                        probs: vec![1.0 / self.frags.len() as f64; self.frags.len()],
                    }
                };
                let picks = sample_indices(&dist, cfg.sample_count, cfg.with_replacement, rng_cond);
                let specs = picks
                    .into_iter()
                    .map(|frag_idx| {
                        let transforms = if cfg.transform2d_sigma > 0.0 {
                            vec![
                                sample_transform2d(
                                    TransformKind::Rotation,
                                    cfg.transform2d_sigma,
                                    rng_t2d,
                                ),
                                sample_transform2d(
                                    TransformKind::Projective,
                                    cfg.transform2d_sigma,
                                    rng_t2d,
                                ),
                            ]
                        } else {
                            vec![]
                        };
                        SampleSpec {
                            frag_idx,
                            transforms,
                        }
                    })
                    .collect();
                Ok((specs, Some(dist.probs)))
            }
        }
    }

    /// Evaluates the drawn samples (parallel) and reduces loss and texture
    /// gradient in sample-index order.
    fn mean_loss_and_grad(
        &self,
        texture: &TextureMap,
        specs: &[SampleSpec],
    ) -> Result<(f64, Array3<f64>)> {
        let evals: Vec<SampleEval> = specs
            .par_iter()
            .map(|spec| {
                let frag = if self.frags.is_empty() {
                    &self.neutral_frag
                } else {
                    &self.frags[spec.frag_idx]
                };
                eval_sample(frag, texture, spec, self.model, &self.f_victim, self.config.mode)
            })
            .collect::<Result<_>>()?;
        let m = evals.len() as f64;
        let (th, tw) = texture.resolution();
        let mut grad = Array3::zeros((th, tw, 3));
        let mut loss = 0.0;
        for eval in &evals {
            loss += eval.loss;
            grad.zip_mut_with(&eval.grad_texture, |g, s| *g += s);
        }
        loss /= m;
        grad.mapv_inplace(|g: f64| g / m);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(SimError::NonFinite(
                "attack loss or gradient became non-finite".into(),
            ));
        }
        Ok((loss, grad))
    }

    fn success_at_neutral(&self, texture: &TextureMap, delta: Threshold) -> Result<bool> {
        let image = self.neutral_frag.shade(texture);
        let feature = self.model.embed(&image)?;
        let dist: f64 = feature
            .0
            .iter()
            .zip(self.f_victim.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let decision = decide(dist, delta);
        Ok(match self.config.mode {
            AttackMode::Impersonation => decision == Decision::Same,
            AttackMode::Dodging => decision == Decision::Different,
        })
    }
}

/// Runs the configured attack. `delta` is the calibrated verification
/// threshold used only for the `success_at_neutral` outcome flag.
///
/// The observer variant invokes the callback with every projected iterate
/// (including the initialization), which the verification suite uses to
/// assert feasibility at every step.
pub fn run_attack(
    attacker: &IdentityParams,
    victim_image: &Rgb,
    mask: &PatchMask,
    model: &EmbeddingModel,
    candidates: &CandidateSet,
    config: &AttackConfig,
    delta: Threshold,
) -> Result<AttackResult> {
    run_attack_observed(
        attacker,
        victim_image,
        mask,
        model,
        candidates,
        config,
        delta,
        |_, _| {},
    )
}

#[allow(clippy::too_many_arguments)]
pub fn run_attack_observed(
    attacker: &IdentityParams,
    victim_image: &Rgb,
    mask: &PatchMask,
    model: &EmbeddingModel,
    candidates: &CandidateSet,
    config: &AttackConfig,
    delta: Threshold,
    observer: impl FnMut(usize, &TextureMap),
) -> Result<AttackResult> {
    match config.method {
        AttackMethod::Face3dAdvW => face3dadv_w_observed(
            attacker,
            victim_image,
            mask,
            model,
            candidates,
            config,
            config.basis_dim,
            delta,
            observer,
        ),
        _ => run_sign_attack(
            attacker,
            victim_image,
            mask,
            model,
            candidates,
            config,
            delta,
            observer,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_sign_attack(
    attacker: &IdentityParams,
    victim_image: &Rgb,
    mask: &PatchMask,
    model: &EmbeddingModel,
    candidates: &CandidateSet,
    config: &AttackConfig,
    delta: Threshold,
    mut observer: impl FnMut(usize, &TextureMap),
) -> Result<AttackResult> {
    let ctx = AttackContext::prepare(attacker, victim_image, mask, model, candidates, config)?;
    let mut rng_cond = stream(config.rng_seed, "attack/conditions");
    let mut rng_t2d = stream(config.rng_seed, "attack/transforms");

    let mut texture = ctx.initial_texture(victim_image);
    observer(0, &texture);
    let (th, tw) = texture.resolution();
    let mut momentum: Option<Array3<f64>> = None;
    let mut trace = Vec::with_capacity(config.iters);

    for iter in 0..config.iters {
        let (specs, _probs) = ctx.draw_samples(&texture, &mut rng_cond, &mut rng_t2d)?;
        let (loss, grad) = ctx.mean_loss_and_grad(&texture, &specs)?;
        trace.push(loss);

        let step_dir = if config.method == AttackMethod::Mim {
            let buf = momentum.get_or_insert_with(|| Array3::zeros((th, tw, 3)));
            let l1: f64 = grad.iter().map(|g| g.abs()).sum();
            if l1 > 0.0 {
                buf.zip_mut_with(&grad, |m, g| *m = config.momentum_mu * *m + g / l1);
            } else {
                buf.mapv_inplace(|m| config.momentum_mu * m);
            }
            buf.clone()
        } else {
            grad
        };

        for r in 0..th {
            for c in 0..tw {
                if ctx.mask.values[[r, c]] == 0 {
                    continue;
                }
                for ch in 0..3 {
                    let g = step_dir[[r, c, ch]];
                    let s = if g > 0.0 {
                        1.0
                    } else if g < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    texture.values[[r, c, ch]] -= config.alpha * s;
                }
            }
        }
        texture = project_patch(&texture, &ctx.clean, ctx.mask, config.epsilon);
        observer(iter + 1, &texture);
    }

    let success_at_neutral = ctx.success_at_neutral(&texture, delta)?;
    Ok(AttackResult {
        adv_texture: texture,
        loss_trace: trace,
        iterations_run: config.iters,
        success_at_neutral,
    })
}

/// Decodes a cosine code into a masked perturbation field. The code holds
/// `3 * K * K` coefficients in channel-major order; texel `(r, c)` of
/// channel `ch` receives `epsilon * tanh(sum_ij w[ch,i,j] * cos(pi i u) *
/// cos(pi j v))` inside the mask and zero outside.
pub fn decode_cosine_patch(
    code: &[f64],
    basis_dim: usize,
    mask: &PatchMask,
    epsilon: f64,
    texture_res: (usize, usize),
) -> Array3<f64> {
    let (h, w) = texture_res;
    let cu = cosine_table(basis_dim, w);
    let cv = cosine_table(basis_dim, h);
    let mut delta = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            if mask.values[[r, c]] == 0 {
                continue;
            }
            for ch in 0..3 {
                let mut pre = 0.0;
                for i in 0..basis_dim {
                    for j in 0..basis_dim {
                        pre += code[(ch * basis_dim + i) * basis_dim + j] * cu[i][c] * cv[j][r];
                    }
                }
                delta[[r, c, ch]] = epsilon * pre.tanh();
            }
        }
    }
    delta
}

/// `cos(pi * i * t/(n-1))` lookup per frequency `i` and grid index.
fn cosine_table(basis_dim: usize, n: usize) -> Vec<Vec<f64>> {
    (0..basis_dim)
        .map(|i| {
            (0..n)
                .map(|t| (std::f64::consts::PI * i as f64 * t as f64 / (n - 1) as f64).cos())
                .collect()
        })
        .collect()
}

/// The latent-space variant: the patch is `clamp01(t_a + M * decode(w))`
/// and `w` is updated with Adam on the same sampled-condition mean loss.
/// Feasibility holds by construction: the decoder output lies in
/// `[-epsilon, epsilon]` and the clamp only pulls values toward the clean
/// texture.
#[allow(clippy::too_many_arguments)]
pub fn face3dadv_w(
    attacker: &IdentityParams,
    victim_image: &Rgb,
    mask: &PatchMask,
    model: &EmbeddingModel,
    candidates: &CandidateSet,
    config: &AttackConfig,
    basis_dim: usize,
    delta: Threshold,
) -> Result<AttackResult> {
    face3dadv_w_observed(
        attacker,
        victim_image,
        mask,
        model,
        candidates,
        config,
        basis_dim,
        delta,
        |_, _| {},
    )
}

#[allow(clippy::too_many_arguments)]
fn face3dadv_w_observed(
    attacker: &IdentityParams,
    victim_image: &Rgb,
    mask: &PatchMask,
    model: &EmbeddingModel,
    candidates: &CandidateSet,
    config: &AttackConfig,
    basis_dim: usize,
    delta: Threshold,
    mut observer: impl FnMut(usize, &TextureMap),
) -> Result<AttackResult> {
    if basis_dim < 4 {
        return Err(SimError::invalid("basis_dim must be at least 4"));
    }
    let mut cfg = config.clone();
    cfg.method = AttackMethod::Face3dAdvW;
    cfg.basis_dim = basis_dim;
    let ctx = AttackContext::prepare(attacker, victim_image, mask, model, candidates, &cfg)?;
    let mut rng_cond = stream(cfg.rng_seed, "attack/conditions");
    let mut rng_t2d = stream(cfg.rng_seed, "attack/transforms");

    let (th, tw) = ctx.clean.resolution();
    let cu = cosine_table(basis_dim, tw);
    let cv = cosine_table(basis_dim, th);
    let masked: Vec<(usize, usize)> = (0..th)
        .flat_map(|r| (0..tw).map(move |c| (r, c)))
        .filter(|&(r, c)| mask.values[[r, c]] == 1)
        .collect();

    let mut code = vec![0.0; 3 * basis_dim * basis_dim];
    let mut adam = Adam::new(0.01, code.len());
    let mut trace = Vec::with_capacity(cfg.iters);

    // rebuild the texture (and the pre-tanh field) from the current code
    let compose = |code: &[f64]| -> (TextureMap, Array3<f64>) {
        let mut pre = Array3::zeros((th, tw, 3));
        let mut values = ctx.clean.values.clone();
        for &(r, c) in &masked {
            for ch in 0..3 {
                let mut acc = 0.0;
                for i in 0..basis_dim {
                    let wrow = &code[(ch * basis_dim + i) * basis_dim..];
                    let cui = cu[i][c];
                    for j in 0..basis_dim {
                        acc += wrow[j] * cui * cv[j][r];
                    }
                }
                pre[[r, c, ch]] = acc;
                let v = ctx.clean.values[[r, c, ch]] + cfg.epsilon * acc.tanh();
                values[[r, c, ch]] = v.clamp(0.0, 1.0);
            }
        }
        (TextureMap { values }, pre)
    };

    let (mut texture, mut pre) = compose(&code);
    observer(0, &texture);

    for iter in 0..cfg.iters {
        let (specs, _probs) = ctx.draw_samples(&texture, &mut rng_cond, &mut rng_t2d)?;
        let (loss, grad_tex) = ctx.mean_loss_and_grad(&texture, &specs)?;
        trace.push(loss);

        // chain: texture -> clamp -> epsilon*tanh(pre) -> code
        let mut g_code = vec![0.0; code.len()];
        for &(r, c) in &masked {
            for ch in 0..3 {
                let unclamped = ctx.clean.values[[r, c, ch]] + cfg.epsilon * pre[[r, c, ch]].tanh();
                if !(0.0..=1.0).contains(&unclamped) {
                    continue;
                }
                let g = grad_tex[[r, c, ch]];
                if g == 0.0 {
                    continue;
                }
                let t = pre[[r, c, ch]].tanh();
                let g_pre = g * cfg.epsilon * (1.0 - t * t);
                for i in 0..basis_dim {
                    let cui = cu[i][c];
                    let base = (ch * basis_dim + i) * basis_dim;
                    for j in 0..basis_dim {
                        g_code[base + j] += g_pre * cui * cv[j][r];
                    }
                }
            }
        }
        adam.step(&mut code, &g_code);
        let rebuilt = compose(&code);
        texture = rebuilt.0;
        pre = rebuilt.1;
        observer(iter + 1, &texture);
    }

    let success_at_neutral = ctx.success_at_neutral(&texture, delta)?;
    Ok(AttackResult {
        adv_texture: texture,
        loss_trace: trace,
        iterations_run: cfg.iters,
        success_at_neutral,
    })
}
