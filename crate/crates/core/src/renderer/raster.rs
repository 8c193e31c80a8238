//! Z-buffered barycentric rasterization of the height-field mesh.
//!
//! The geometry pass ([`rasterize`]) is independent of the texture: it
//! records, per covered pixel, the interpolated UV coordinates and the
//! Lambert shading scalar. Shading a texture through the resulting
//! [`FragmentBuffer`] is then a linear map from texel values to pixel
//! values, and its exact adjoint ([`FragmentBuffer::shade_grad`])
//! accumulates in fixed row-major pixel order.

use ndarray::{Array2, Array3};

use crate::geometry::{ShapeMap, TextureMap};
use crate::io::Rgb;

use super::{Lighting, Viewpoint, BACKGROUND_GRAY, CAMERA_PLANE_Z, VIEW_EXTENT};

/// Per-pixel record of the geometry pass.
#[derive(Debug, Clone, Copy)]
pub struct Fragment {
    /// Interpolated UV coordinates into the texture.
    pub u: f64,
    pub v: f64,
    /// Lambert scalar `ambient + (1-ambient) * max(0, n.l)`.
    pub shade: f64,
}

/// Result of the geometry pass for one (shape, viewpoint, lighting) tuple.
/// Reusable across any number of textures.
#[derive(Debug, Clone)]
pub struct FragmentBuffer {
    pub height: usize,
    pub width: usize,
    frags: Vec<Option<Fragment>>,
    /// Camera-space depth; `+inf` where no triangle covers the pixel.
    pub depth: Array2<f64>,
}

impl FragmentBuffer {
    pub fn coverage(&self) -> Array2<bool> {
        let mut cov = Array2::from_elem((self.height, self.width), false);
        for (i, f) in self.frags.iter().enumerate() {
            if f.is_some() {
                cov[[i / self.width, i % self.width]] = true;
            }
        }
        cov
    }

    /// Iterates `(row, col, fragment)` over covered pixels in row-major order.
    pub fn fragments(&self) -> impl Iterator<Item = (usize, usize, &Fragment)> {
        let w = self.width;
        self.frags
            .iter()
            .enumerate()
            .filter_map(move |(i, f)| f.as_ref().map(|f| (i / w, i % w, f)))
    }

    /// Texture pass: bilinear texture lookup times the shading scalar,
    /// background gray elsewhere.
    pub fn shade(&self, texture: &TextureMap) -> Rgb {
        let mut image = Array3::from_elem((self.height, self.width, 3), BACKGROUND_GRAY);
        for (r, c, frag) in self.fragments() {
            let rgb = sample_bilinear(&texture.values, frag.u, frag.v);
            for ch in 0..3 {
                image[[r, c, ch]] = rgb[ch] * frag.shade;
            }
        }
        image
    }

    /// Exact adjoint of [`FragmentBuffer::shade`] with respect to the
    /// texture. Accumulation order: pixels row-major, then the four
    /// bilinear taps of each pixel.
    pub fn shade_grad(&self, texture_res: (usize, usize), upstream: &Rgb) -> Array3<f64> {
        let (th, tw) = texture_res;
        let mut grad = Array3::zeros((th, tw, 3));
        for (r, c, frag) in self.fragments() {
            let taps = bilinear_taps(th, tw, frag.u, frag.v);
            for ch in 0..3 {
                let g = upstream[[r, c, ch]] * frag.shade;
                if g == 0.0 {
                    continue;
                }
                for &(ty, tx, w) in &taps {
                    grad[[ty, tx, ch]] += g * w;
                }
            }
        }
        grad
    }
}

/// Clamped bilinear sample of an `(H, W, 3)` grid at UV in `[0, 1]^2`.
pub fn sample_bilinear(values: &Array3<f64>, u: f64, v: f64) -> [f64; 3] {
    let (h, w, _) = values.dim();
    let taps = bilinear_taps(h, w, u, v);
    let mut out = [0.0; 3];
    for &(ty, tx, wgt) in &taps {
        for ch in 0..3 {
            out[ch] += wgt * values[[ty, tx, ch]];
        }
    }
    out
}

/// The four `(row, col, weight)` taps of a bilinear lookup at UV `(u, v)`
/// on an `h x w` grid with align-corners mapping `tx = u*(w-1)`.
pub fn bilinear_taps(h: usize, w: usize, u: f64, v: f64) -> [(usize, usize, f64); 4] {
    let tx = (u.clamp(0.0, 1.0)) * (w - 1) as f64;
    let ty = (v.clamp(0.0, 1.0)) * (h - 1) as f64;
    let x0 = (tx.floor() as usize).min(w - 2);
    let y0 = (ty.floor() as usize).min(h - 2);
    let fx = tx - x0 as f64;
    let fy = ty - y0 as f64;
    [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x0 + 1, fx * (1.0 - fy)),
        (y0 + 1, x0, (1.0 - fx) * fy),
        (y0 + 1, x0 + 1, fx * fy),
    ]
}

/// Rigid rotation: yaw about the vertical axis (positive turns the face to
/// its left, i.e. the nose toward +x), then pitch (positive looks up).
fn rotate(yaw_rad: f64, pitch_rad: f64, p: [f64; 3]) -> [f64; 3] {
    let (sy, cy) = yaw_rad.sin_cos();
    let x1 = p[0] * cy + p[2] * sy;
    let y1 = p[1];
    let z1 = -p[0] * sy + p[2] * cy;
    let (sp, cp) = pitch_rad.sin_cos();
    [x1, y1 * cp + z1 * sp, -y1 * sp + z1 * cp]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Area-weighted vertex normals of the unrotated mesh (sum of adjacent
/// triangle cross products, normalized at the end).
fn vertex_normals(shape: &ShapeMap) -> Array3<f64> {
    let (rows, cols) = shape.resolution();
    let mut normals = Array3::zeros((rows, cols, 3));
    let mut add = |r: usize, c: usize, n: [f64; 3]| {
        for (i, v) in n.iter().enumerate() {
            normals[[r, c, i]] += v;
        }
    };
    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            // camera-facing winding, shared "/" diagonal
            let tris = [
                [(r, c), (r + 1, c), (r, c + 1)],
                [(r, c + 1), (r + 1, c), (r + 1, c + 1)],
            ];
            for tri in tris {
                let p0 = shape.position(tri[0].0, tri[0].1);
                let p1 = shape.position(tri[1].0, tri[1].1);
                let p2 = shape.position(tri[2].0, tri[2].1);
                let n = cross(sub(p1, p0), sub(p2, p0));
                for &(vr, vc) in &tri {
                    add(vr, vc, n);
                }
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let n: [f64; 3] = [
                normals[[r, c, 0]],
                normals[[r, c, 1]],
                normals[[r, c, 2]],
            ];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if len > 0.0 {
                for i in 0..3 {
                    normals[[r, c, i]] = n[i] / len;
                }
            } else {
                normals[[r, c, 2]] = 1.0;
            }
        }
    }
    normals
}

fn edge(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Geometry pass: projects the rotated mesh orthographically and records
/// per-pixel fragments under a strict-less z-test. Triangles are visited in
/// fixed row-major quad order, so the result is bit-deterministic.
pub fn rasterize(
    shape: &ShapeMap,
    viewpoint: &Viewpoint,
    lighting: &Lighting,
    image_res: (usize, usize),
) -> FragmentBuffer {
    let (h, w) = image_res;
    let (rows, cols) = shape.resolution();
    let yaw = viewpoint.yaw_deg.to_radians();
    let pitch = viewpoint.pitch_deg.to_radians();
    let az = lighting.azimuth_deg.to_radians();
    let light = [az.sin(), 0.0, az.cos()];
    let ambient = lighting.ambient;

    let model_normals = vertex_normals(shape);
    // rotated positions and normals, plus per-vertex UV
    let mut pos = vec![[0.0f64; 3]; rows * cols];
    let mut nrm = vec![[0.0f64; 3]; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            pos[i] = rotate(yaw, pitch, shape.position(r, c));
            nrm[i] = rotate(
                yaw,
                pitch,
                [
                    model_normals[[r, c, 0]],
                    model_normals[[r, c, 1]],
                    model_normals[[r, c, 2]],
                ],
            );
        }
    }

    // pixel center camera coordinates, in exactly mirror-symmetric form
    let x_of = |pc: usize| (pc as f64 - (w - 1) as f64 / 2.0) * (2.0 * VIEW_EXTENT / w as f64);
    let y_of = |pr: usize| ((h - 1) as f64 / 2.0 - pr as f64) * (2.0 * VIEW_EXTENT / h as f64);
    // inverse maps used only for conservative bounding boxes
    let col_of = |x: f64| x * (w as f64 / (2.0 * VIEW_EXTENT)) + (w - 1) as f64 / 2.0;
    let row_of = |y: f64| (h - 1) as f64 / 2.0 - y * (h as f64 / (2.0 * VIEW_EXTENT));

    let mut buf = FragmentBuffer {
        height: h,
        width: w,
        frags: vec![None; h * w],
        depth: Array2::from_elem((h, w), f64::INFINITY),
    };

    for r in 0..rows - 1 {
        for c in 0..cols - 1 {
            let quads = [
                [(r, c), (r + 1, c), (r, c + 1)],
                [(r, c + 1), (r + 1, c), (r + 1, c + 1)],
            ];
            for tri in quads {
                let idx: Vec<usize> = tri.iter().map(|&(vr, vc)| vr * cols + vc).collect();
                let p: Vec<[f64; 3]> = idx.iter().map(|&i| pos[i]).collect();
                let uv: Vec<[f64; 2]> = tri
                    .iter()
                    .map(|&(vr, vc)| {
                        [
                            vc as f64 / (cols - 1) as f64,
                            vr as f64 / (rows - 1) as f64,
                        ]
                    })
                    .collect();
                let area = edge(p[0][0], p[0][1], p[1][0], p[1][1], p[2][0], p[2][1]);
                if area.abs() < 1e-12 {
                    continue;
                }
                let sgn = if area > 0.0 { 1.0 } else { -1.0 };
                let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
                let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
                let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
                let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
                // pad by one pixel; the edge test decides inclusion
                let c0 = (col_of(min_x).floor() as isize - 1).max(0) as usize;
                let c1 = (col_of(max_x).ceil() as isize + 1).min(w as isize - 1);
                let r0 = (row_of(max_y).floor() as isize - 1).max(0) as usize;
                let r1 = (row_of(min_y).ceil() as isize + 1).min(h as isize - 1);
                if c1 < 0 || r1 < 0 {
                    continue;
                }
                for pr in r0..=(r1 as usize) {
                    let py = y_of(pr);
                    for pc in c0..=(c1 as usize) {
                        let px = x_of(pc);
                        let e0 = edge(p[1][0], p[1][1], p[2][0], p[2][1], px, py);
                        let e1 = edge(p[2][0], p[2][1], p[0][0], p[0][1], px, py);
                        let e2 = edge(p[0][0], p[0][1], p[1][0], p[1][1], px, py);
                        if sgn * e0 < 0.0 || sgn * e1 < 0.0 || sgn * e2 < 0.0 {
                            continue;
                        }
                        let l0 = e0 / area;
                        let l1 = e1 / area;
                        let l2 = e2 / area;
                        let z = l0 * p[0][2] + l1 * p[1][2] + l2 * p[2][2];
                        let depth = CAMERA_PLANE_Z - z;
                        if depth >= buf.depth[[pr, pc]] {
                            continue;
                        }
                        let u = l0 * uv[0][0] + l1 * uv[1][0] + l2 * uv[2][0];
                        let v = l0 * uv[0][1] + l1 * uv[1][1] + l2 * uv[2][1];
                        let mut n = [0.0; 3];
                        for i in 0..3 {
                            n[i] = l0 * nrm[idx[0]][i] + l1 * nrm[idx[1]][i] + l2 * nrm[idx[2]][i];
                        }
                        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                        let ndotl = if len > 0.0 {
                            ((n[0] * light[0] + n[1] * light[1] + n[2] * light[2]) / len).max(0.0)
                        } else {
                            0.0
                        };
                        let shade = ambient + (1.0 - ambient) * ndotl;
                        buf.depth[[pr, pc]] = depth;
                        buf.frags[pr * w + pc] = Some(Fragment { u, v, shade });
                    }
                }
            }
        }
    }
    buf
}
