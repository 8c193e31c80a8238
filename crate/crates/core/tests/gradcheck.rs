//! End-to-end gradient verification: render -> embed -> feature distance,
//! differentiated analytically with respect to the texture and compared
//! against central finite differences.

use facesim_core::geometry::{build_shape, synth_identity, TextureMap};
use facesim_core::recognizer::{EmbeddingModel, ModelConfig};
use facesim_core::renderer::{render_at, render_grad_texture, Lighting, Viewpoint};
use facesim_core::rng::stream;
use ndarray::Array3;
use rand::Rng;

fn test_model(res: usize) -> EmbeddingModel {
    EmbeddingModel::new(ModelConfig {
        id: "gradcheck".into(),
        input: (res, res),
        scales: vec![1.5],
        orientations: 2,
        pool_grid: (3, 3),
        seed: 33,
        d: 16,
        gain: 8.0,
    })
    .unwrap()
}

/// Loss and its analytic texture gradient for one rendered case.
fn loss_and_grad(
    shape: &facesim_core::geometry::ShapeMap,
    texture: &TextureMap,
    v: &Viewpoint,
    l: &Lighting,
    model: &EmbeddingModel,
    target: &[f64],
    img_res: (usize, usize),
) -> (f64, Array3<f64>) {
    let out = render_at(shape, texture, v, l, img_res).unwrap();
    let (feature, cache) = model.embed_cached(&out.image).unwrap();
    let dist: f64 = feature
        .0
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let upstream: Vec<f64> = feature
        .0
        .iter()
        .zip(target.iter())
        .map(|(a, b)| 2.0 * (a - b))
        .collect();
    let g_image = model.grad_cached(&cache, &upstream).unwrap();
    let g_texture = render_grad_texture(shape, texture, v, l, &g_image).unwrap();
    (dist, g_texture)
}

#[test]
fn end_to_end_texture_gradient_matches_finite_differences() {
    let started = std::time::Instant::now();
    let img_res = (24usize, 24usize);
    let model = test_model(img_res.0);
    let mut rng = stream(2024, "gradcheck");
    let h = 1e-4;
    for case in 0..20 {
        let shape = build_shape(&synth_identity(100 + case), (16, 16)).unwrap();
        let mut texture = TextureMap {
            values: Array3::zeros((16, 16, 3)),
        };
        texture.values.iter_mut().for_each(|t| *t = rng.gen());
        let v = Viewpoint::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)).unwrap();
        let l = Lighting {
            azimuth_deg: rng.gen_range(-60.0..60.0),
            ambient: rng.gen_range(0.2..0.8),
        };
        // fixed target feature: embedding of a different identity's render
        let other = build_shape(&synth_identity(500 + case), (16, 16)).unwrap();
        let mut other_tex = TextureMap {
            values: Array3::zeros((16, 16, 3)),
        };
        other_tex.values.iter_mut().for_each(|t| *t = rng.gen());
        let target = model
            .embed(
                &render_at(&other, &other_tex, &Viewpoint::NEUTRAL, &Lighting::NEUTRAL, img_res)
                    .unwrap()
                    .image,
            )
            .unwrap()
            .0;

        let (_, analytic) = loss_and_grad(&shape, &texture, &v, &l, &model, &target, img_res);
        for _ in 0..50 {
            let ty = rng.gen_range(0..16);
            let tx = rng.gen_range(0..16);
            let ch = rng.gen_range(0..3);
            let mut plus = texture.clone();
            plus.values[[ty, tx, ch]] += h;
            let mut minus = texture.clone();
            minus.values[[ty, tx, ch]] -= h;
            let (lp, _) = loss_and_grad(&shape, &plus, &v, &l, &model, &target, img_res);
            let (lm, _) = loss_and_grad(&shape, &minus, &v, &l, &model, &target, img_res);
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[[ty, tx, ch]];
            if an.abs() < 1e-8 {
                assert!(
                    (an - fd).abs() < 1e-7,
                    "case {case} texel ({ty},{tx},{ch}): analytic {an} vs fd {fd}"
                );
            } else {
                assert!(
                    ((an - fd) / an).abs() < 1e-4,
                    "case {case} texel ({ty},{tx},{ch}): analytic {an} vs fd {fd}"
                );
            }
        }
    }
    let elapsed = started.elapsed();
    println!("gradcheck: 20 cases x 50 texels in {elapsed:.2?}");
    assert!(elapsed.as_secs() < 60, "gradient check exceeded 1 minute");
}

#[test]
fn parallel_condition_reduction_matches_serial() {
    // accumulating texture gradients across conditions in index order must
    // give bit-identical results whether the per-condition work ran in
    // parallel or serially
    use rayon::prelude::*;
    let shape = build_shape(&synth_identity(7), (16, 16)).unwrap();
    let mut rng = stream(7, "par-check");
    let mut texture = TextureMap {
        values: Array3::zeros((32, 32, 3)),
    };
    texture.values.iter_mut().for_each(|t| *t = rng.gen());
    let conditions: Vec<Viewpoint> = (0..8)
        .map(|i| Viewpoint::new(-14.0 + 4.0 * i as f64, 3.0).unwrap())
        .collect();
    let upstream = Array3::ones((20, 20, 3));
    let serial: Vec<Array3<f64>> = conditions
        .iter()
        .map(|v| {
            render_grad_texture(&shape, &texture, v, &Lighting::NEUTRAL, &upstream).unwrap()
        })
        .collect();
    let parallel: Vec<Array3<f64>> = conditions
        .par_iter()
        .map(|v| {
            render_grad_texture(&shape, &texture, v, &Lighting::NEUTRAL, &upstream).unwrap()
        })
        .collect();
    let mut acc_serial = Array3::<f64>::zeros((32, 32, 3));
    let mut acc_parallel = Array3::<f64>::zeros((32, 32, 3));
    for (s, p) in serial.iter().zip(parallel.iter()) {
        acc_serial.zip_mut_with(s, |a, b| *a += b);
        acc_parallel.zip_mut_with(p, |a, b| *a += b);
    }
    assert_eq!(acc_serial, acc_parallel);
}
