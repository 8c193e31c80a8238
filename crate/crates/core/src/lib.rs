//! Desk-scale simulation framework for physical-style adversarial patches
//! on face verification.
//!
//! The pipeline mirrors a physical patch study end to end, with every
//! pretrained component replaced by a seeded analytic stand-in:
//!
//! * [`geometry`] synthesizes parametric face meshes/textures and the
//!   eyeglass/respirator/hat patch masks.
//! * [`renderer`] is a deterministic differentiable rasterizer (RGB +
//!   depth) with controllable viewpoint, lighting, and 2D warps, providing
//!   exact texture gradients.
//! * [`recognizer`] hosts small analytic embedding models with exact
//!   gradients, feature distance, verification, and threshold calibration.
//! * [`reconstruction`] recovers face parameters from a rendered image by
//!   first-order optimization (inverse rendering).
//! * [`attack`] implements the masked patch attacks: MIM, EOT, and the
//!   3D-aware texture attack in pixel and latent-basis space, with
//!   loss-weighted importance sampling of rendering conditions.
//! * [`protocol`] enumerates the pitch/yaw/lighting/mixture test sweeps,
//!   scores attacks, and assembles benchmark matrices.

pub mod attack;
pub mod error;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod protocol;
pub mod recognizer;
pub mod reconstruction;
pub mod renderer;
pub mod rng;

pub use error::{Result, SimError};
pub use geometry::{
    build_shape, build_texture, region_mask, synth_identity, IdentityParams, PatchMask,
    PatchRegion, ShapeMap, TextureMap,
};
pub use recognizer::{
    calibrate_threshold, feature_distance, verify, Decision, EmbeddingModel, FeatureVector,
    ModelConfig, Threshold,
};
pub use renderer::{
    apply_transform2d, render, render_at, render_grad_texture, sample_transform2d,
    transform2d_grad, Lighting, RenderOutput, Transform2D, TransformKind, Viewpoint,
};
