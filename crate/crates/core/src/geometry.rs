//! Parametric face synthesis and patch masks.
//!
//! A synthetic identity is a seeded coefficient vector expanded through a
//! fixed analytic basis into a front-facing height-field mesh (the shape)
//! and a UV-space color map (the texture). The basis is committed here so
//! that every value is reproducible from the seed alone:
//!
//! * Grid vertex `(r, c)` has UV coordinates `u = c/(cols-1)`,
//!   `v = r/(rows-1)`; model position `x = (2c-(cols-1)) * W/(2(cols-1))`,
//!   `y = ((rows-1)-2r) * H/(2(rows-1))` with face width `W = 1.8` and
//!   height `H = 2.4` (row 0 is the top of the face).
//! * Base depth `z0 = 0.9 * sqrt(max(0, 1 - (x/1.0)^2 - (y/1.3)^2))`.
//! * Shape displacement `dz = sum_k 0.01 * s_k * cos(pi*fx_k*u + 0.7k)
//!   * cos(pi*fy_k*v + 1.3k)` over the frequency table [`SHAPE_FREQS`].
//! * Texture value `t(r,c,ch) = BASE_TONE[ch] + A(u,v) * sum_k t_k
//!   * cos(0.9k + 2.1ch) * cos(pi*gx_k*u) * cos(pi*gy_k*v)`, clamped to
//!   `[0, 1]`, over [`TEXTURE_FREQS`], with the amplitude envelope
//!   `A(u,v) = 0.12 * (1 + 2 exp(-((u-0.5)/0.35)^2 - ((v-0.43)/0.18)^2))`
//!   concentrating identity variation around the eye band.
//!
//! Patch masks are analytic UV regions (axis-aligned bands and one
//! ellipse), mutually disjoint by construction:
//!
//! * eyeglass:   `u in [0.15, 0.85], v in [0.33, 0.53]`
//! * respirator: `((u-0.5)/0.24)^2 + ((v-0.72)/0.14)^2 <= 1`
//! * hat:        `u in [0.15, 0.85], v in [0.08, 0.22]`

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng::stream;

pub const SHAPE_COEFF_COUNT: usize = 8;
pub const TEXTURE_COEFF_COUNT: usize = 12;

/// Face extents in model units.
pub const FACE_WIDTH: f64 = 1.8;
pub const FACE_HEIGHT: f64 = 2.4;

const BASE_DEPTH: f64 = 0.9;
const RIM_X: f64 = 1.0;
const RIM_Y: f64 = 1.3;

/// Per-coefficient shape displacement amplitude. Two identities can differ
/// by at most `2 * SHAPE_COEFF_COUNT * SHAPE_AMP = 0.16` model units at any
/// vertex, below the documented 10%-of-face-width bound (0.18).
pub const SHAPE_AMP: f64 = 0.01;
const SHAPE_FREQS: [(f64, f64); SHAPE_COEFF_COUNT] = [
    (1.0, 1.0),
    (2.0, 1.0),
    (1.0, 2.0),
    (2.0, 2.0),
    (3.0, 1.0),
    (1.0, 3.0),
    (3.0, 2.0),
    (2.0, 3.0),
];

/// Skin-tone base color (R, G, B) of the texture basis.
pub const BASE_TONE: [f64; 3] = [0.78, 0.62, 0.50];
const TEXTURE_AMP: f64 = 0.12;
const TEXTURE_FREQS: [(f64, f64); TEXTURE_COEFF_COUNT] = [
    (1.0, 1.0),
    (2.0, 1.0),
    (3.0, 1.0),
    (4.0, 1.0),
    (1.0, 2.0),
    (2.0, 2.0),
    (3.0, 2.0),
    (4.0, 2.0),
    (1.0, 3.0),
    (2.0, 3.0),
    (3.0, 3.0),
    (4.0, 3.0),
];

/// Default grid/texture resolutions used by the pipeline stages.
pub const DEFAULT_SHAPE_RES: (usize, usize) = (64, 64);
pub const DEFAULT_TEXTURE_RES: (usize, usize) = (256, 256);

/// Seeded parameter vector standing in for one person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    /// Seed the coefficients were drawn from. After fitting, coefficients
    /// may no longer equal the seed's draw; the seed then records
    /// provenance only.
    pub seed: u64,
    pub shape_coeffs: Vec<f64>,
    pub texture_coeffs: Vec<f64>,
}

/// Height-field face mesh on a regular UV grid. Each grid quad is split
/// into two triangles along the same diagonal: `(r,c)-(r,c+1)-(r+1,c)` and
/// `(r,c+1)-(r+1,c+1)-(r+1,c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMap {
    /// `(rows, cols, 3)` vertex positions in model units.
    pub positions: Array3<f64>,
}

impl ShapeMap {
    pub fn resolution(&self) -> (usize, usize) {
        let d = self.positions.dim();
        (d.0, d.1)
    }

    pub fn position(&self, r: usize, c: usize) -> [f64; 3] {
        [
            self.positions[[r, c, 0]],
            self.positions[[r, c, 1]],
            self.positions[[r, c, 2]],
        ]
    }
}

/// UV-space color map, `(H, W, 3)` with every channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureMap {
    pub values: Array3<f64>,
}

impl TextureMap {
    pub fn resolution(&self) -> (usize, usize) {
        let d = self.values.dim();
        (d.0, d.1)
    }
}

/// The three physically realizable patch regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchRegion {
    Eyeglass,
    Respirator,
    Hat,
}

impl fmt::Display for PatchRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PatchRegion::Eyeglass => "eyeglass",
            PatchRegion::Respirator => "respirator",
            PatchRegion::Hat => "hat",
        };
        f.write_str(name)
    }
}

impl FromStr for PatchRegion {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eyeglass" => Ok(PatchRegion::Eyeglass),
            "respirator" => Ok(PatchRegion::Respirator),
            "hat" => Ok(PatchRegion::Hat),
            other => Err(SimError::invalid(format!("unknown patch region {other:?}"))),
        }
    }
}

/// Binary texture-space mask selecting where a patch may perturb.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub region: PatchRegion,
    /// `(H, W)` grid of 0/1 values.
    pub values: Array2<u8>,
}

impl PatchMask {
    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Fraction of texels inside the mask.
    pub fn area_fraction(&self) -> f64 {
        let (h, w) = self.values.dim();
        let ones: usize = self.values.iter().map(|&v| v as usize).sum();
        ones as f64 / (h * w) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }
}

/// Draws the coefficient vectors for `seed`. Identical seeds always yield
/// identical vectors; every coefficient lies in `[-1, 1]`.
pub fn synth_identity(seed: u64) -> IdentityParams {
    let mut rng = stream(seed, "identity");
    let shape_coeffs = (0..SHAPE_COEFF_COUNT)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    let texture_coeffs = (0..TEXTURE_COEFF_COUNT)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    IdentityParams {
        seed,
        shape_coeffs,
        texture_coeffs,
    }
}

/// Expands identity parameters into the height-field mesh documented in the
/// module header. Requires `rows, cols >= 16`.
pub fn build_shape(params: &IdentityParams, resolution: (usize, usize)) -> Result<ShapeMap> {
    let (rows, cols) = resolution;
    if rows < 16 || cols < 16 {
        return Err(SimError::invalid(format!(
            "shape resolution {rows}x{cols} below 16x16 minimum"
        )));
    }
    let mut positions = Array3::zeros((rows, cols, 3));
    let x_scale = FACE_WIDTH / (2.0 * (cols - 1) as f64);
    let y_scale = FACE_HEIGHT / (2.0 * (rows - 1) as f64);
    for r in 0..rows {
        let v = r as f64 / (rows - 1) as f64;
        let y = ((rows - 1) as f64 - 2.0 * r as f64) * y_scale;
        for c in 0..cols {
            let u = c as f64 / (cols - 1) as f64;
            let x = (2.0 * c as f64 - (cols - 1) as f64) * x_scale;
            let bulge = 1.0 - (x / RIM_X) * (x / RIM_X) - (y / RIM_Y) * (y / RIM_Y);
            let mut z = BASE_DEPTH * bulge.max(0.0).sqrt();
            for (k, (&coeff, &(fx, fy))) in params
                .shape_coeffs
                .iter()
                .zip(SHAPE_FREQS.iter())
                .enumerate()
            {
                let kf = k as f64;
                z += SHAPE_AMP
                    * coeff
                    * (std::f64::consts::PI * fx * u + 0.7 * kf).cos()
                    * (std::f64::consts::PI * fy * v + 1.3 * kf).cos();
            }
            positions[[r, c, 0]] = x;
            positions[[r, c, 1]] = y;
            positions[[r, c, 2]] = z;
        }
    }
    Ok(ShapeMap { positions })
}

/// Amplitude envelope of the identity color fields: strongest around the
/// eye band (the most identity-bearing face region), tapering toward the
/// face boundary.
fn texture_envelope(u: f64, v: f64) -> f64 {
    let du = (u - 0.5) / 0.35;
    let dv = (v - 0.43) / 0.18;
    TEXTURE_AMP * (1.0 + 2.0 * (-(du * du) - dv * dv).exp())
}

/// Evaluates the unclamped texture basis at one texel.
fn texture_basis(coeffs: &[f64], u: f64, v: f64, ch: usize) -> f64 {
    let mut acc = BASE_TONE[ch];
    let gain = texture_envelope(u, v);
    for (k, (&coeff, &(gx, gy))) in coeffs.iter().zip(TEXTURE_FREQS.iter()).enumerate() {
        acc += gain
            * coeff
            * (0.9 * k as f64 + 2.1 * ch as f64).cos()
            * (std::f64::consts::PI * gx * u).cos()
            * (std::f64::consts::PI * gy * v).cos();
    }
    acc
}

/// Expands identity parameters into the texture map documented in the
/// module header. Requires `H, W >= 32`.
pub fn build_texture(params: &IdentityParams, resolution: (usize, usize)) -> Result<TextureMap> {
    build_texture_from_coeffs(&params.texture_coeffs, resolution)
}

/// Texture expansion from a raw coefficient slice (the fitting and latent
/// attack paths update coefficients without an `IdentityParams` wrapper).
pub fn build_texture_from_coeffs(
    coeffs: &[f64],
    resolution: (usize, usize),
) -> Result<TextureMap> {
    let (h, w) = resolution;
    if h < 32 || w < 32 {
        return Err(SimError::invalid(format!(
            "texture resolution {h}x{w} below 32x32 minimum"
        )));
    }
    let mut values = Array3::zeros((h, w, 3));
    for r in 0..h {
        let v = r as f64 / (h - 1) as f64;
        for c in 0..w {
            let u = c as f64 / (w - 1) as f64;
            for ch in 0..3 {
                values[[r, c, ch]] = texture_basis(coeffs, u, v, ch).clamp(0.0, 1.0);
            }
        }
    }
    Ok(TextureMap { values })
}

/// Adjoint of [`build_texture_from_coeffs`]: accumulates a texture-shaped
/// gradient into coefficient space. Texels that were clamped in the forward
/// pass contribute zero (the clamp is flat there).
pub fn texture_basis_backward(coeffs: &[f64], grad_texture: &Array3<f64>) -> Vec<f64> {
    let (h, w, _) = grad_texture.dim();
    let mut grad = vec![0.0; coeffs.len()];
    for r in 0..h {
        let v = r as f64 / (h - 1) as f64;
        for c in 0..w {
            let u = c as f64 / (w - 1) as f64;
            for ch in 0..3 {
                let raw = texture_basis(coeffs, u, v, ch);
                if !(0.0..=1.0).contains(&raw) {
                    continue;
                }
                let g = grad_texture[[r, c, ch]];
                if g == 0.0 {
                    continue;
                }
                let gain = texture_envelope(u, v);
                for (k, (gk, &(gx, gy))) in grad.iter_mut().zip(TEXTURE_FREQS.iter()).enumerate()
                {
                    *gk += g
                        * gain
                        * (0.9 * k as f64 + 2.1 * ch as f64).cos()
                        * (std::f64::consts::PI * gx * u).cos()
                        * (std::f64::consts::PI * gy * v).cos();
                }
            }
        }
    }
    grad
}

/// Builds the committed binary mask for `region`. Requires `H, W >= 16`
/// so the analytic regions discretize with a meaningful area.
pub fn region_mask(region: PatchRegion, resolution: (usize, usize)) -> Result<PatchMask> {
    let (h, w) = resolution;
    if h < 16 || w < 16 {
        return Err(SimError::invalid(format!(
            "mask resolution {h}x{w} below 16x16 minimum"
        )));
    }
    let mut values = Array2::zeros((h, w));
    for r in 0..h {
        let v = r as f64 / (h - 1) as f64;
        for c in 0..w {
            let u = c as f64 / (w - 1) as f64;
            let inside = match region {
                PatchRegion::Eyeglass => (0.15..=0.85).contains(&u) && (0.33..=0.53).contains(&v),
                PatchRegion::Respirator => {
                    let du = (u - 0.5) / 0.24;
                    let dv = (v - 0.72) / 0.14;
                    du * du + dv * dv <= 1.0
                }
                PatchRegion::Hat => (0.15..=0.85).contains(&u) && (0.08..=0.22).contains(&v),
            };
            values[[r, c]] = inside as u8;
        }
    }
    let mask = PatchMask { region, values };
    debug_assert!(
        (0.02..=0.25).contains(&mask.area_fraction()),
        "mask area fraction {} outside sanity bound",
        mask.area_fraction()
    );
    Ok(mask)
}
