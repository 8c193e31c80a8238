//! Whole-attack invariants on small committed runs: feasibility at every
//! iterate, mask locality, seed determinism, the degenerate epsilon
//! setting, and the latent variant's smoothness advantage.

use facesim_core::attack::{
    face3dadv_w, run_attack, run_attack_observed, AttackConfig, AttackMethod, AttackMode,
    CandidateSet,
};
use facesim_core::geometry::{
    build_shape, build_texture, region_mask, synth_identity, PatchRegion, TextureMap,
    DEFAULT_SHAPE_RES,
};
use facesim_core::recognizer::{verify, Decision, EmbeddingModel, ModelConfig, Threshold};
use facesim_core::renderer::{render_at, Lighting, Viewpoint};

fn small_model() -> EmbeddingModel {
    EmbeddingModel::new(ModelConfig {
        id: "attack-int".into(),
        input: (48, 48),
        scales: vec![1.5, 2.5],
        orientations: 3,
        pool_grid: (3, 3),
        seed: 77,
        d: 32,
        gain: 12.0,
    })
    .unwrap()
}

struct Setup {
    attacker: facesim_core::geometry::IdentityParams,
    victim_image: ndarray::Array3<f64>,
    mask: facesim_core::geometry::PatchMask,
    clean: TextureMap,
    model: EmbeddingModel,
    candidates: CandidateSet,
    delta: Threshold,
}

fn setup() -> Setup {
    let model = small_model();
    let attacker = synth_identity(21);
    let victim = synth_identity(22);
    let vshape = build_shape(&victim, DEFAULT_SHAPE_RES).unwrap();
    let vtex = build_texture(&victim, (64, 64)).unwrap();
    let victim_image = render_at(
        &vshape,
        &vtex,
        &Viewpoint::NEUTRAL,
        &Lighting::NEUTRAL,
        model.input_res(),
    )
    .unwrap()
    .image;
    let mask = region_mask(PatchRegion::Eyeglass, (64, 64)).unwrap();
    let clean = build_texture(&attacker, (64, 64)).unwrap();
    Setup {
        attacker,
        victim_image,
        mask,
        clean,
        model,
        candidates: CandidateSet::stratified_default(),
        delta: Threshold::new(0.5).unwrap(),
    }
}

fn quick_config(method: AttackMethod) -> AttackConfig {
    let mut cfg = AttackConfig::new(AttackMode::Impersonation, method);
    cfg.iters = 8;
    cfg.sample_count = 4;
    cfg.candidate_count = 20;
    cfg.rng_seed = 5;
    cfg
}

#[test]
fn every_iterate_is_feasible_and_mask_local() {
    let s = setup();
    for method in [
        AttackMethod::Mim,
        AttackMethod::Eot,
        AttackMethod::Face3dAdvX,
        AttackMethod::Face3dAdvW,
    ] {
        let cfg = quick_config(method);
        let mut iterates = 0usize;
        run_attack_observed(
            &s.attacker,
            &s.victim_image,
            &s.mask,
            &s.model,
            &s.candidates,
            &cfg,
            s.delta,
            |_, texture| {
                iterates += 1;
                for r in 0..64 {
                    for c in 0..64 {
                        for ch in 0..3 {
                            let t = texture.values[[r, c, ch]];
                            let base = s.clean.values[[r, c, ch]];
                            if s.mask.values[[r, c]] == 1 {
                                assert!(
                                    (t - base).abs() <= cfg.epsilon + 1e-12,
                                    "{method}: epsilon violation at ({r},{c},{ch})"
                                );
                                assert!((0.0..=1.0).contains(&t));
                            } else {
                                assert!(
                                    t == base,
                                    "{method}: outside-mask texel changed at ({r},{c},{ch})"
                                );
                            }
                        }
                    }
                }
            },
        )
        .unwrap();
        assert_eq!(iterates, cfg.iters + 1, "{method}: observer call count");
    }
}

#[test]
fn identical_seeds_give_bit_identical_results() {
    let s = setup();
    let cfg = quick_config(AttackMethod::Face3dAdvX);
    let run = || {
        run_attack(
            &s.attacker,
            &s.victim_image,
            &s.mask,
            &s.model,
            &s.candidates,
            &cfg,
            s.delta,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.adv_texture.values, b.adv_texture.values);
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.success_at_neutral, b.success_at_neutral);
}

#[test]
fn zero_epsilon_pins_the_clean_texture() {
    let s = setup();
    let mut cfg = quick_config(AttackMethod::Eot);
    cfg.epsilon = 0.0;
    cfg.iters = 3;
    let res = run_attack(
        &s.attacker,
        &s.victim_image,
        &s.mask,
        &s.model,
        &s.candidates,
        &cfg,
        s.delta,
    )
    .unwrap();
    assert_eq!(res.adv_texture.values, s.clean.values);
    // success equals the clean verification outcome
    let ashape = build_shape(&s.attacker, DEFAULT_SHAPE_RES).unwrap();
    let clean_render = render_at(
        &ashape,
        &s.clean,
        &Viewpoint::NEUTRAL,
        &Lighting::NEUTRAL,
        s.model.input_res(),
    )
    .unwrap()
    .image;
    let clean_same =
        verify(&s.model, &clean_render, &s.victim_image, s.delta).unwrap() == Decision::Same;
    assert_eq!(res.success_at_neutral, clean_same);
}

#[test]
fn empty_mask_is_rejected() {
    let s = setup();
    let empty = facesim_core::geometry::PatchMask {
        region: PatchRegion::Eyeglass,
        values: ndarray::Array2::zeros((64, 64)),
    };
    let cfg = quick_config(AttackMethod::Mim);
    assert!(run_attack(
        &s.attacker,
        &s.victim_image,
        &empty,
        &s.model,
        &s.candidates,
        &cfg,
        s.delta,
    )
    .is_err());
}

#[test]
fn latent_variant_is_smoother_than_pixel_variant() {
    // total variation of the masked perturbation on committed seeds
    let s = setup();
    let mut cfg = quick_config(AttackMethod::Face3dAdvX);
    cfg.iters = 20;
    let x = run_attack(
        &s.attacker,
        &s.victim_image,
        &s.mask,
        &s.model,
        &s.candidates,
        &cfg,
        s.delta,
    )
    .unwrap();
    let mut cfg_w = cfg.clone();
    cfg_w.method = AttackMethod::Face3dAdvW;
    let w = face3dadv_w(
        &s.attacker,
        &s.victim_image,
        &s.mask,
        &s.model,
        &s.candidates,
        &cfg_w,
        8,
        s.delta,
    )
    .unwrap();
    let tv = |t: &TextureMap| -> f64 {
        let d = &t.values;
        let (h, wd, _) = d.dim();
        let mut acc = 0.0;
        for r in 0..h {
            for c in 0..wd {
                for ch in 0..3 {
                    let p = d[[r, c, ch]] - s.clean.values[[r, c, ch]];
                    if r + 1 < h {
                        let q = d[[r + 1, c, ch]] - s.clean.values[[r + 1, c, ch]];
                        acc += (p - q).abs();
                    }
                    if c + 1 < wd {
                        let q = d[[r, c + 1, ch]] - s.clean.values[[r, c + 1, ch]];
                        acc += (p - q).abs();
                    }
                }
            }
        }
        acc
    };
    let tv_x = tv(&x.adv_texture);
    let tv_w = tv(&w.adv_texture);
    println!("total variation: pixel {tv_x:.3}, latent {tv_w:.3}");
    assert!(
        tv_w <= tv_x,
        "latent perturbation must be smoother (tv {tv_w:.3} vs {tv_x:.3})"
    );
}

#[test]
fn loss_decreases_on_committed_run() {
    let s = setup();
    let mut cfg = quick_config(AttackMethod::Face3dAdvX);
    cfg.iters = 30;
    let res = run_attack(
        &s.attacker,
        &s.victim_image,
        &s.mask,
        &s.model,
        &s.candidates,
        &cfg,
        s.delta,
    )
    .unwrap();
    let first = res.loss_trace[0];
    let last = *res.loss_trace.last().unwrap();
    assert!(
        last < first,
        "final mean loss {last} must drop below initial {first}"
    );
}
