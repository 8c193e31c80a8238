//! Deterministic differentiable rasterizer.
//!
//! [`render`] produces RGB, depth, and coverage for a textured
//! [`ShapeMap`](crate::geometry::ShapeMap) under a viewpoint and lighting
//! condition: orthographic camera after a rigid yaw-then-pitch rotation,
//! z-buffered barycentric rasterization, bilinear texture sampling, and
//! per-pixel Lambert shading with interpolated vertex normals. Gradients
//! flow to the texture only; geometry, visibility, and shading weights are
//! constants of the forward pass, which makes the pixel values linear in
//! the texels and the adjoint exact.
//!
//! Condition sweeps may be evaluated in parallel, but any reduction into a
//! shared texture accumulator must walk results in condition-index order;
//! the attack and protocol layers follow that contract.

mod raster;
mod transform;

pub use raster::{bilinear_taps, rasterize, sample_bilinear, Fragment, FragmentBuffer};
pub use transform::{
    apply_transform2d, apply_transforms, sample_transform2d, transform2d_grad, transforms_grad,
    Transform2D, TransformKind,
};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::{ShapeMap, TextureMap};
use crate::io::Rgb;

/// Half-width of the orthographic viewport in model units.
pub const VIEW_EXTENT: f64 = 1.5;
/// Camera reference plane; depth = plane z minus surface z.
pub const CAMERA_PLANE_Z: f64 = 4.0;
/// Value of pixels not covered by the face, and of out-of-domain warp
/// samples.
pub const BACKGROUND_GRAY: f64 = 0.5;
/// Default ambient term of the Lambert model.
pub const DEFAULT_AMBIENT: f64 = 0.3;
/// Default rendered image resolution.
pub const DEFAULT_IMAGE_RES: (usize, usize) = (112, 112);

/// Camera pose. Positive yaw turns the face toward its own left; positive
/// pitch looks up. Valid range: `|deg| <= 60` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

impl Viewpoint {
    pub const NEUTRAL: Viewpoint = Viewpoint {
        yaw_deg: 0.0,
        pitch_deg: 0.0,
    };

    pub fn new(yaw_deg: f64, pitch_deg: f64) -> Result<Self> {
        let v = Viewpoint { yaw_deg, pitch_deg };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.yaw_deg.abs() > 60.0 || self.pitch_deg.abs() > 60.0 {
            return Err(SimError::invalid(format!(
                "viewpoint ({}, {}) outside +/-60 degree validity range",
                self.yaw_deg, self.pitch_deg
            )));
        }
        Ok(())
    }
}

/// Directional light swung left-to-right plus an ambient floor. The light
/// direction in camera space is `(sin az, 0, cos az)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub azimuth_deg: f64,
    pub ambient: f64,
}

impl Lighting {
    pub const NEUTRAL: Lighting = Lighting {
        azimuth_deg: 0.0,
        ambient: DEFAULT_AMBIENT,
    };

    pub fn with_azimuth(azimuth_deg: f64) -> Self {
        Lighting {
            azimuth_deg,
            ambient: DEFAULT_AMBIENT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuth_deg.abs() > 60.0 {
            return Err(SimError::invalid(format!(
                "light azimuth {} outside +/-60 degree range",
                self.azimuth_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.ambient) {
            return Err(SimError::invalid(format!(
                "ambient {} outside [0, 1]",
                self.ambient
            )));
        }
        Ok(())
    }
}

/// Output of one render: RGB in `[0, 1]`, camera-space depth with `+inf`
/// background, and the binary coverage map.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Rgb,
    pub depth: Array2<f64>,
    pub coverage: Array2<bool>,
}

/// Renders at an explicit image resolution.
pub fn render_at(
    shape: &ShapeMap,
    texture: &TextureMap,
    viewpoint: &Viewpoint,
    lighting: &Lighting,
    image_res: (usize, usize),
) -> Result<RenderOutput> {
    viewpoint.validate()?;
    lighting.validate()?;
    let buf = rasterize(shape, viewpoint, lighting, image_res);
    Ok(RenderOutput {
        image: buf.shade(texture),
        coverage: buf.coverage(),
        depth: buf.depth,
    })
}

/// Renders at the default 112x112 resolution.
pub fn render(
    shape: &ShapeMap,
    texture: &TextureMap,
    viewpoint: &Viewpoint,
    lighting: &Lighting,
) -> Result<RenderOutput> {
    render_at(shape, texture, viewpoint, lighting, DEFAULT_IMAGE_RES)
}

/// Exact adjoint of [`render_at`] with respect to the texture: routes the
/// upstream image gradient back through the Lambert scalar and the bilinear
/// sampling weights of the forward pass.
pub fn render_grad_texture(
    shape: &ShapeMap,
    texture: &TextureMap,
    viewpoint: &Viewpoint,
    lighting: &Lighting,
    upstream: &Rgb,
) -> Result<Array3<f64>> {
    viewpoint.validate()?;
    lighting.validate()?;
    if upstream.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite(
            "render_grad_texture upstream contains non-finite values".into(),
        ));
    }
    let (h, w, _) = upstream.dim();
    let buf = rasterize(shape, viewpoint, lighting, (h, w));
    Ok(buf.shade_grad(texture.resolution(), upstream))
}

/// Pulls an image back into texture space through the neutral-pose
/// projection: each texel looks up its mesh position, projects it with the
/// neutral camera, and bilinearly samples the image there. Used to
/// initialize attacks from the victim's image.
pub fn resample_image_to_texture(
    shape: &ShapeMap,
    image: &Rgb,
    texture_res: (usize, usize),
) -> TextureMap {
    let (th, tw) = texture_res;
    let (rows, cols) = shape.resolution();
    let (h, w, _) = image.dim();
    let mut values = Array3::zeros((th, tw, 3));
    for r in 0..th {
        let v = r as f64 / (th - 1) as f64;
        for c in 0..tw {
            let u = c as f64 / (tw - 1) as f64;
            // mesh position at this UV (bilinear over the grid)
            let taps = bilinear_taps(rows, cols, u, v);
            let mut x = 0.0;
            let mut y = 0.0;
            for &(gr, gc, wgt) in &taps {
                x += wgt * shape.positions[[gr, gc, 0]];
                y += wgt * shape.positions[[gr, gc, 1]];
            }
            let col = (x * (w as f64 / (2.0 * VIEW_EXTENT)) + (w - 1) as f64 / 2.0)
                .clamp(0.0, (w - 1) as f64);
            let row = ((h - 1) as f64 / 2.0 - y * (h as f64 / (2.0 * VIEW_EXTENT)))
                .clamp(0.0, (h - 1) as f64);
            let px = sample_bilinear(image, col / (w - 1) as f64, row / (h - 1) as f64);
            for ch in 0..3 {
                values[[r, c, ch]] = px[ch];
            }
        }
    }
    TextureMap { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        build_shape, build_texture, synth_identity, IdentityParams, SHAPE_COEFF_COUNT,
        TEXTURE_COEFF_COUNT,
    };
    use crate::rng::stream;
    use ndarray::Array3;
    use rand::Rng;

    fn zero_identity() -> IdentityParams {
        IdentityParams {
            seed: 0,
            shape_coeffs: vec![0.0; SHAPE_COEFF_COUNT],
            texture_coeffs: vec![0.0; TEXTURE_COEFF_COUNT],
        }
    }

    fn uniform_texture(level: f64, res: (usize, usize)) -> TextureMap {
        TextureMap {
            values: Array3::from_elem((res.0, res.1, 3), level),
        }
    }

    #[test]
    fn neutral_render_has_symmetric_coverage() {
        let shape = build_shape(&zero_identity(), (32, 32)).unwrap();
        let texture = uniform_texture(0.6, (64, 64));
        let out = render_at(
            &shape,
            &texture,
            &Viewpoint::NEUTRAL,
            &Lighting::NEUTRAL,
            (64, 64),
        )
        .unwrap();
        let (h, w) = out.coverage.dim();
        assert!(out.coverage.iter().any(|&c| c), "face must cover pixels");
        for r in 0..h {
            for c in 0..w {
                assert_eq!(
                    out.coverage[[r, c]],
                    out.coverage[[r, w - 1 - c]],
                    "coverage asymmetry at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn flat_facing_surface_shades_to_hand_computed_value() {
        // flat z=0 grid: all normals (0,0,1), light azimuth 0 is parallel,
        // so pixel value = texel * (ambient + (1-ambient))
        let mut shape = build_shape(&zero_identity(), (16, 16)).unwrap();
        shape.positions.index_axis_mut(ndarray::Axis(2), 2).fill(0.0);
        let texture = uniform_texture(0.8, (32, 32));
        let lighting = Lighting {
            azimuth_deg: 0.0,
            ambient: 0.2,
        };
        let out = render_at(&shape, &texture, &Viewpoint::NEUTRAL, &lighting, (24, 24)).unwrap();
        let center = out.image[[12, 12, 0]];
        assert!(
            (center - 0.8f64 * (0.2 + 0.8 * 1.0)).abs() < 1e-12,
            "center pixel {center}"
        );
    }

    #[test]
    fn depth_and_coverage_ignore_texture() {
        let shape = build_shape(&synth_identity(4), (24, 24)).unwrap();
        let a = render_at(
            &shape,
            &uniform_texture(0.1, (32, 32)),
            &Viewpoint::new(10.0, -5.0).unwrap(),
            &Lighting::with_azimuth(20.0),
            (48, 48),
        )
        .unwrap();
        let b = render_at(
            &shape,
            &build_texture(&synth_identity(9), (64, 64)).unwrap(),
            &Viewpoint::new(10.0, -5.0).unwrap(),
            &Lighting::with_azimuth(20.0),
            (48, 48),
        )
        .unwrap();
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.coverage, b.coverage);
    }

    #[test]
    fn render_is_bit_deterministic() {
        let shape = build_shape(&synth_identity(5), (24, 24)).unwrap();
        let texture = build_texture(&synth_identity(5), (64, 64)).unwrap();
        let v = Viewpoint::new(-12.0, 7.0).unwrap();
        let l = Lighting::with_azimuth(-30.0);
        let a = render_at(&shape, &texture, &v, &l, (40, 40)).unwrap();
        let b = render_at(&shape, &texture, &v, &l, (40, 40)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn texture_gradient_matches_finite_differences() {
        let shape = build_shape(&synth_identity(8), (16, 16)).unwrap();
        let mut rng = stream(42, "renderer-fd-test");
        let tex_res = (16, 16);
        let mut texture = uniform_texture(0.0, tex_res);
        texture.values.iter_mut().for_each(|t| *t = rng.gen());
        let v = Viewpoint::new(9.0, -4.0).unwrap();
        let l = Lighting::with_azimuth(15.0);
        let img_res = (20, 20);
        // loss = sum of image; upstream all ones
        let upstream = Array3::ones((img_res.0, img_res.1, 3));
        let analytic = render_grad_texture(&shape, &texture, &v, &l, &upstream).unwrap();
        let h = 1e-4;
        for _ in 0..50 {
            let ty = rng.gen_range(0..tex_res.0);
            let tx = rng.gen_range(0..tex_res.1);
            let ch = rng.gen_range(0..3);
            let mut plus = texture.clone();
            plus.values[[ty, tx, ch]] += h;
            let mut minus = texture.clone();
            minus.values[[ty, tx, ch]] -= h;
            let fp: f64 = render_at(&shape, &plus, &v, &l, img_res)
                .unwrap()
                .image
                .sum();
            let fm: f64 = render_at(&shape, &minus, &v, &l, img_res)
                .unwrap()
                .image
                .sum();
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[[ty, tx, ch]];
            if an.abs() < 1e-8 {
                assert!((an - fd).abs() < 1e-7, "texel ({ty},{tx},{ch}): {an} vs {fd}");
            } else {
                assert!(
                    ((an - fd) / an).abs() < 1e-4,
                    "texel ({ty},{tx},{ch}): {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let shape = build_shape(&synth_identity(1), (16, 16)).unwrap();
        let texture = uniform_texture(0.5, (32, 32));
        let upstream = Array3::zeros((24, 24, 3));
        let grad = render_grad_texture(
            &shape,
            &texture,
            &Viewpoint::NEUTRAL,
            &Lighting::NEUTRAL,
            &upstream,
        )
        .unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unsampled_texels_get_exactly_zero_gradient() {
        // small image vs oversampled texture: most texels are never tapped
        let shape = build_shape(&synth_identity(2), (16, 16)).unwrap();
        let texture = uniform_texture(0.5, (64, 64));
        let v = Viewpoint::NEUTRAL;
        let l = Lighting::NEUTRAL;
        let buf = rasterize(&shape, &v, &l, (8, 8));
        // independent tap bookkeeping from the fragment UVs
        let mut touched = ndarray::Array2::<bool>::from_elem((64, 64), false);
        for (_, _, frag) in buf.fragments() {
            for (ty, tx, _) in bilinear_taps(64, 64, frag.u, frag.v) {
                touched[[ty, tx]] = true;
            }
        }
        assert!(
            touched.iter().any(|&t| !t),
            "test needs at least one unsampled texel"
        );
        let mut upstream = Array3::zeros((8, 8, 3));
        upstream.iter_mut().enumerate().for_each(|(i, g)| *g = i as f64 * 0.3 + 1.0);
        let grad = render_grad_texture(&shape, &texture, &v, &l, &upstream).unwrap();
        for ty in 0..64 {
            for tx in 0..64 {
                if !touched[[ty, tx]] {
                    for ch in 0..3 {
                        assert_eq!(grad[[ty, tx, ch]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_projective_is_bit_exact() {
        let shape = build_shape(&synth_identity(3), (16, 16)).unwrap();
        let texture = build_texture(&synth_identity(3), (64, 64)).unwrap();
        let out = render_at(
            &shape,
            &texture,
            &Viewpoint::NEUTRAL,
            &Lighting::NEUTRAL,
            (33, 48),
        )
        .unwrap();
        let warped = apply_transform2d(&out.image, &Transform2D::IDENTITY_PROJECTIVE).unwrap();
        assert_eq!(out.image, warped);
    }

    #[test]
    fn full_turn_rotation_is_identity_within_tolerance() {
        let shape = build_shape(&synth_identity(3), (16, 16)).unwrap();
        let texture = build_texture(&synth_identity(3), (64, 64)).unwrap();
        let out = render_at(
            &shape,
            &texture,
            &Viewpoint::NEUTRAL,
            &Lighting::NEUTRAL,
            (32, 32),
        )
        .unwrap();
        let warped =
            apply_transform2d(&out.image, &Transform2D::Rotation { angle_deg: 360.0 }).unwrap();
        for (a, b) in out.image.iter().zip(warped.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn quarter_turn_matches_pixel_remap_oracle() {
        // asymmetric 4x4 image; output(r, c) = input(n-1-c, r) for a +90
        // degree rotation under the inverse-mapping convention
        let n = 4;
        let mut img = Array3::zeros((n, n, 3));
        for (i, v) in img.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin().abs();
        }
        let rot = apply_transform2d(&img, &Transform2D::Rotation { angle_deg: 90.0 }).unwrap();
        for r in 0..n {
            for c in 0..n {
                for ch in 0..3 {
                    let expected = img[[n - 1 - c, r, ch]];
                    assert!(
                        (rot[[r, c, ch]] - expected).abs() < 1e-9,
                        "pixel ({r},{c},{ch})"
                    );
                }
            }
        }
    }

    #[test]
    fn transform_grad_matches_finite_differences() {
        let mut rng = stream(7, "transform-fd");
        let mut img = Array3::zeros((8, 8, 3));
        img.iter_mut().for_each(|v| *v = rng.gen());
        let t = Transform2D::Projective {
            params: [1.05, 0.02, -0.03, 0.01, 0.97, 0.04, 0.02, -0.01],
        };
        let mut upstream = Array3::zeros((8, 8, 3));
        upstream.iter_mut().for_each(|v| *v = rng.gen::<f64>() - 0.5);
        let analytic = transform2d_grad(&img, &t, &upstream).unwrap();
        let h = 1e-4;
        let loss = |im: &Rgb| -> f64 {
            apply_transform2d(im, &t)
                .unwrap()
                .iter()
                .zip(upstream.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        for _ in 0..40 {
            let r = rng.gen_range(0..8);
            let c = rng.gen_range(0..8);
            let ch = rng.gen_range(0..3);
            let mut plus = img.clone();
            plus[[r, c, ch]] += h;
            let mut minus = img.clone();
            minus[[r, c, ch]] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = analytic[[r, c, ch]];
            if an.abs() < 1e-8 {
                assert!((an - fd).abs() < 1e-7);
            } else {
                assert!(((an - fd) / an).abs() < 1e-4, "({r},{c},{ch}): {an} vs {fd}");
            }
        }
    }

    #[test]
    fn identity_transform_grad_is_passthrough() {
        let img = Array3::from_elem((6, 6, 3), 0.3);
        let mut upstream = Array3::zeros((6, 6, 3));
        upstream.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64);
        let g = transform2d_grad(&img, &Transform2D::IDENTITY_PROJECTIVE, &upstream).unwrap();
        assert_eq!(g, upstream);
        let z = transform2d_grad(
            &img,
            &Transform2D::IDENTITY_PROJECTIVE,
            &Array3::zeros((6, 6, 3)),
        )
        .unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_projective_denominator_is_rejected() {
        let t = Transform2D::Projective {
            params: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.2, 0.0],
        };
        let img = Array3::from_elem((8, 8, 3), 0.5);
        assert!(apply_transform2d(&img, &t).is_err());
    }

    #[test]
    fn sigma_zero_samples_exact_identities() {
        let mut rng = stream(0, "t2d");
        let r = sample_transform2d(TransformKind::Rotation, 0.0, &mut rng);
        assert_eq!(r, Transform2D::Rotation { angle_deg: 0.0 });
        let p = sample_transform2d(TransformKind::Projective, 0.0, &mut rng);
        assert_eq!(p, Transform2D::IDENTITY_PROJECTIVE);
    }

    #[test]
    fn sampling_is_seeded_and_unbiased() {
        let a = sample_transform2d(TransformKind::Projective, 0.1, &mut stream(3, "t"));
        let b = sample_transform2d(TransformKind::Projective, 0.1, &mut stream(3, "t"));
        assert_eq!(a, b);
        // law of large numbers on the rotation angle (radians)
        let mut rng = stream(17, "lln");
        let mut sum = 0.0;
        for _ in 0..10_000 {
            match sample_transform2d(TransformKind::Rotation, 0.1, &mut rng) {
                Transform2D::Rotation { angle_deg } => sum += angle_deg.to_radians(),
                _ => unreachable!(),
            }
        }
        assert!((sum / 10_000.0).abs() < 0.01);
    }

    #[test]
    fn resample_round_trip_recovers_texture_inside_coverage() {
        // render a texture, pull the image back to texture space; texels
        // that map to covered, well-shaded pixels approximate the original
        let params = zero_identity();
        let shape = build_shape(&params, (32, 32)).unwrap();
        let texture = uniform_texture(0.6, (64, 64));
        let lighting = Lighting {
            azimuth_deg: 0.0,
            ambient: 1.0, // ambient-only: shade = 1 everywhere
        };
        let out = render_at(&shape, &texture, &Viewpoint::NEUTRAL, &lighting, (64, 64)).unwrap();
        let back = resample_image_to_texture(&shape, &out.image, (64, 64));
        // center texel maps to the face center which is covered
        let center = back.values[[32, 32, 0]];
        assert!((center - 0.6).abs() < 1e-6, "center {center}");
    }
}
