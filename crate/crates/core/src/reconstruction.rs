//! Inverse rendering: recover face parameters from a single rendered image.
//!
//! The objective is the feature distance between the current neutral-pose
//! render and the target plus `lambda` times the L1 image error. The L1
//! term uses a sign gradient with `sign(0) = 0`. Optimization runs Adam on
//! the texture coefficients with the shape frozen at its initialization
//! (the attack stage fixes the shape anyway, so the renderer's
//! texture-only adjoint is sufficient). Coefficients are clamped to
//! `[-1, 1]` after every step and the best-loss iterate is returned.

use crate::error::{Result, SimError};
use crate::geometry::{
    build_shape, build_texture_from_coeffs, synth_identity, texture_basis_backward,
    IdentityParams, ShapeMap, DEFAULT_SHAPE_RES, DEFAULT_TEXTURE_RES,
};
use crate::io::Rgb;
use crate::optim::Adam;
use crate::recognizer::{feature_distance, EmbeddingModel};
use crate::renderer::{rasterize, Lighting, RenderOutput, Viewpoint};

/// Fitting hyperparameters.
#[derive(Debug, Clone)]
pub struct FitConfig<'a> {
    /// Balancing weight of the L1 image term.
    pub lambda: f64,
    /// Iteration budget.
    pub max_iters: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Embedding model whose feature distance drives the fit.
    pub model: &'a EmbeddingModel,
}

impl<'a> FitConfig<'a> {
    /// Committed defaults: `lambda = 0.01`, 300 iterations, learning rate
    /// 0.01.
    pub fn new(model: &'a EmbeddingModel) -> FitConfig<'a> {
        FitConfig {
            lambda: 0.01,
            max_iters: 300,
            learning_rate: 0.01,
            model,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(SimError::invalid("max_iters must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SimError::invalid("learning rate must be positive"));
        }
        if self.lambda < 0.0 {
            return Err(SimError::invalid("lambda must be non-negative"));
        }
        Ok(())
    }
}

/// Outcome of a fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Best-loss parameters (seed records the initialization).
    pub params: IdentityParams,
    /// Loss at each evaluated iterate, in order.
    pub loss_trace: Vec<f64>,
    /// Neutral-pose render of the best iterate.
    pub final_render: RenderOutput,
}

/// Inner engine: optimizes a raw texture-coefficient vector against a
/// target image over a fixed shape. Exposed for toy-scale studies with
/// reduced coefficient counts.
pub fn fit_texture_coeffs(
    target: &Rgb,
    shape: &ShapeMap,
    init_coeffs: &[f64],
    config: &FitConfig,
    texture_res: (usize, usize),
) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    let dims = target.dim();
    if (dims.0, dims.1) != config.model.input_res() {
        return Err(SimError::invalid(format!(
            "target {}x{} does not match the model input {:?}",
            dims.0,
            dims.1,
            config.model.input_res()
        )));
    }
    let frag = rasterize(shape, &Viewpoint::NEUTRAL, &Lighting::NEUTRAL, (dims.0, dims.1));
    let f_target = config.model.embed(target)?;

    let mut coeffs = init_coeffs.to_vec();
    let mut adam = Adam::new(config.learning_rate, coeffs.len());
    let mut best_coeffs = coeffs.clone();
    let mut best_loss = f64::INFINITY;
    let mut trace = Vec::with_capacity(config.max_iters);

    for iter in 0..config.max_iters {
        let texture = build_texture_from_coeffs(&coeffs, texture_res)?;
        let image = frag.shade(&texture);
        let (feature, cache) = config.model.embed_cached(&image)?;
        let dist = feature_distance(&feature, &f_target);
        let l1: f64 = image
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        let loss = dist + config.lambda * l1;
        if !loss.is_finite() {
            return Err(SimError::NonFinite(format!(
                "fit loss {loss} at iteration {iter} (distance {dist}, l1 {l1})"
            )));
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_coeffs.copy_from_slice(&coeffs);
        }

        // d(dist)/df = 2 (f - f_target); the embedding adjoint handles the
        // normalization Jacobian
        let upstream: Vec<f64> = feature
            .0
            .iter()
            .zip(f_target.0.iter())
            .map(|(a, b)| 2.0 * (a - b))
            .collect();
        let mut g_image = config.model.grad_cached(&cache, &upstream)?;
        for (g, (x, t)) in g_image.iter_mut().zip(image.iter().zip(target.iter())) {
            let diff = x - t;
            if diff > 0.0 {
                *g += config.lambda;
            } else if diff < 0.0 {
                *g -= config.lambda;
            }
        }
        let g_texture = frag.shade_grad(texture_res, &g_image);
        let g_coeffs = texture_basis_backward(&coeffs, &g_texture);
        adam.step(&mut coeffs, &g_coeffs);
        coeffs.iter_mut().for_each(|c| *c = c.clamp(-1.0, 1.0));
    }
    Ok((best_coeffs, trace))
}

/// Recovers identity parameters whose neutral render matches `target`.
/// Texture coefficients are optimized; the shape stays frozen at the
/// `init_seed` initialization.
pub fn fit_face(target: &Rgb, config: &FitConfig, init_seed: u64) -> Result<FitResult> {
    let init = synth_identity(init_seed);
    let shape = build_shape(&init, DEFAULT_SHAPE_RES)?;
    let (best_coeffs, trace) = fit_texture_coeffs(
        target,
        &shape,
        &init.texture_coeffs,
        config,
        DEFAULT_TEXTURE_RES,
    )?;
    let params = IdentityParams {
        seed: init_seed,
        shape_coeffs: init.shape_coeffs,
        texture_coeffs: best_coeffs,
    };
    let texture = build_texture_from_coeffs(&params.texture_coeffs, DEFAULT_TEXTURE_RES)?;
    let dims = target.dim();
    let frag = rasterize(&shape, &Viewpoint::NEUTRAL, &Lighting::NEUTRAL, (dims.0, dims.1));
    let final_render = RenderOutput {
        image: frag.shade(&texture),
        coverage: frag.coverage(),
        depth: frag.depth,
    };
    Ok(FitResult {
        params,
        loss_trace: trace,
        final_render,
    })
}
