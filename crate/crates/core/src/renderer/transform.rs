//! 2D image transformations: rotation about the image center and an
//! eight-parameter projective warp.
//!
//! Both are inverse-mapped bilinear warps: the output pixel at centered
//! coordinates `p` samples the input at `T(p)`. Rotation uses
//! `T = R(-angle)` so that positive angles rotate image content
//! counterclockwise in (x right, y down) pixel coordinates. The projective
//! map works in normalized coordinates `x = (col - cx)/cx`,
//! `y = (row - cy)/cy` with `cx = (W-1)/2`, `cy = (H-1)/2`:
//!
//! ```text
//! k  = c0*x + c1*y + 1
//! x' = (a0*x + a1*y + a2) / k
//! y' = (b0*x + b1*y + b2) / k
//! ```
//!
//! Samples falling outside the input domain take the background gray.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::io::Rgb;

use super::BACKGROUND_GRAY;

/// A sampled 2D transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Transform2D {
    Rotation {
        angle_deg: f64,
    },
    /// Parameters `[a0, a1, a2, b0, b1, b2, c0, c1]`.
    Projective {
        params: [f64; 8],
    },
}

/// Which transformation family to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rotation,
    Projective,
}

impl Transform2D {
    pub const IDENTITY_PROJECTIVE: Transform2D = Transform2D::Projective {
        params: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    };

    /// Checks the projective denominator stays above 0.1 over the image
    /// domain (it is affine, so corners suffice).
    pub fn validate(&self) -> Result<()> {
        if let Transform2D::Projective { params } = self {
            let (c0, c1) = (params[6], params[7]);
            for x in [-1.0, 1.0] {
                for y in [-1.0, 1.0] {
                    let k = c0 * x + c1 * y + 1.0;
                    if k <= 0.1 {
                        return Err(SimError::invalid(format!(
                            "projective denominator {k} <= 0.1 at corner ({x}, {y})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Source position (centered pixel coordinates) sampled by the output
    /// pixel at centered `(xp, yp)`. `cx`, `cy` are the half-extents.
    fn source(&self, xp: f64, yp: f64, cx: f64, cy: f64) -> (f64, f64) {
        match self {
            Transform2D::Rotation { angle_deg } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                (c * xp + s * yp, -s * xp + c * yp)
            }
            Transform2D::Projective { params } => {
                let [a0, a1, a2, b0, b1, b2, c0, c1] = *params;
                let k = c0 * (xp / cx) + c1 * (yp / cy) + 1.0;
                let sx = (a0 * xp + a1 * (yp * cx / cy) + a2 * cx) / k;
                let sy = (b0 * (xp * cy / cx) + b1 * yp + b2 * cy) / k;
                (sx, sy)
            }
        }
    }
}

struct Taps {
    // (row, col, weight) of up to four bilinear taps; empty = background
    taps: [(usize, usize, f64); 4],
    valid: bool,
}

fn source_taps(t: &Transform2D, h: usize, w: usize, pr: usize, pc: usize) -> Taps {
    let cx = (w - 1) as f64 / 2.0;
    let cy = (h - 1) as f64 / 2.0;
    let xp = pc as f64 - cx;
    let yp = pr as f64 - cy;
    let (sx, sy) = t.source(xp, yp, cx, cy);
    let col = sx + cx;
    let row = sy + cy;
    if !(0.0..=(w - 1) as f64).contains(&col) || !(0.0..=(h - 1) as f64).contains(&row) {
        return Taps {
            taps: [(0, 0, 0.0); 4],
            valid: false,
        };
    }
    let x0 = (col.floor() as usize).min(w - 2);
    let y0 = (row.floor() as usize).min(h - 2);
    let fx = col - x0 as f64;
    let fy = row - y0 as f64;
    Taps {
        taps: [
            (y0, x0, (1.0 - fx) * (1.0 - fy)),
            (y0, x0 + 1, fx * (1.0 - fy)),
            (y0 + 1, x0, (1.0 - fx) * fy),
            (y0 + 1, x0 + 1, fx * fy),
        ],
        valid: true,
    }
}

/// Warps `image` by `t`. Out-of-domain samples take the background gray.
pub fn apply_transform2d(image: &Rgb, t: &Transform2D) -> Result<Rgb> {
    t.validate()?;
    let (h, w, _) = image.dim();
    let mut out = Array3::from_elem((h, w, 3), BACKGROUND_GRAY);
    for pr in 0..h {
        for pc in 0..w {
            let taps = source_taps(t, h, w, pr, pc);
            if !taps.valid {
                continue;
            }
            for ch in 0..3 {
                let mut acc = 0.0;
                for &(ty, tx, wgt) in &taps.taps {
                    acc += wgt * image[[ty, tx, ch]];
                }
                out[[pr, pc, ch]] = acc;
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`apply_transform2d`] with respect to the input image.
/// The warp is linear in the image, so only dimensions of `image` matter.
pub fn transform2d_grad(image: &Rgb, t: &Transform2D, upstream: &Rgb) -> Result<Rgb> {
    t.validate()?;
    let (h, w, _) = image.dim();
    let mut grad = Array3::zeros((h, w, 3));
    for pr in 0..h {
        for pc in 0..w {
            let taps = source_taps(t, h, w, pr, pc);
            if !taps.valid {
                continue;
            }
            for ch in 0..3 {
                let g = upstream[[pr, pc, ch]];
                if g == 0.0 {
                    continue;
                }
                for &(ty, tx, wgt) in &taps.taps {
                    grad[[ty, tx, ch]] += g * wgt;
                }
            }
        }
    }
    Ok(grad)
}

/// Applies a sequence of transformations in order.
pub fn apply_transforms(image: &Rgb, ts: &[Transform2D]) -> Result<Rgb> {
    let mut out = image.clone();
    for t in ts {
        out = apply_transform2d(&out, t)?;
    }
    Ok(out)
}

/// Adjoint of [`apply_transforms`]: chains single-warp adjoints in reverse.
pub fn transforms_grad(image: &Rgb, ts: &[Transform2D], upstream: &Rgb) -> Result<Rgb> {
    let mut grad = upstream.clone();
    for t in ts.iter().rev() {
        grad = transform2d_grad(image, t, &grad)?;
    }
    Ok(grad)
}

/// Draws a transformation: rotation angle `~ N(0, sigma)` radians (stored
/// in degrees), or projective parameters with `a0, b0 ~ N(1, sigma)` and
/// the remaining six `~ N(0, sigma)`. `sigma = 0` yields the exact
/// identity.
pub fn sample_transform2d<R: Rng>(kind: TransformKind, sigma: f64, rng: &mut R) -> Transform2D {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    match kind {
        TransformKind::Rotation => {
            let angle_rad: f64 = noise.sample(rng);
            Transform2D::Rotation {
                angle_deg: angle_rad.to_degrees(),
            }
        }
        TransformKind::Projective => {
            let unit = Normal::new(1.0, sigma).expect("valid sigma");
            // unit-mean draws go to the two diagonal terms (indices 0 and
            // 4), so sigma = 0 degenerates to the identity warp; draws
            // violating the denominator invariant are redrawn
            loop {
                let mut params = [0.0; 8];
                for (i, p) in params.iter_mut().enumerate() {
                    *p = if i == 0 || i == 4 {
                        unit.sample(rng)
                    } else {
                        noise.sample(rng)
                    };
                }
                let t = Transform2D::Projective { params };
                if t.validate().is_ok() {
                    return t;
                }
            }
        }
    }
}
