//! The controllable environmental testing protocol.
//!
//! Committed condition table:
//!
//! | kind         | conditions | definition                                             |
//! |--------------|-----------:|--------------------------------------------------------|
//! | pitch        |         30 | integer degrees -15..=15 excluding 0, neutral otherwise |
//! | yaw          |         30 | integer degrees -15..=15 excluding 0, neutral otherwise |
//! | lighting     |         20 | azimuths -60, -54, ..., 54 (step 6), neutral pose       |
//! | mixture      |        108 | yaw x pitch in {-15,-9,-3,3,9,15}^2, light {-40,0,40}   |
//! | rotation2d   |         30 | seeded rotation draws at the neutral condition          |
//! | projective2d |         30 | seeded projective draws at the neutral condition        |
//! | mixture2d    |         30 | seeded rotation-then-projective pairs, neutral          |
//!
//! Each 2D draw first samples `sigma ~ U(0, sigma_range)` and then the
//! transformation parameters at that sigma. Evaluation renders the
//! adversarial face per condition, applies any 2D transformations, and
//! compares the embedding against the victim image's feature: an
//! impersonation succeeds when the verification decision is "same", a
//! dodging attack when it is "different".

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    run_attack, AttackConfig, AttackMethod, AttackMode, AttackResult, CandidateSet,
};
use crate::error::{Result, SimError};
use crate::geometry::{
    build_shape, build_texture, region_mask, synth_identity, PatchRegion, ShapeMap, TextureMap,
    DEFAULT_SHAPE_RES, DEFAULT_TEXTURE_RES,
};
use crate::io::Rgb;
use crate::recognizer::{
    decide, feature_distance, separation_accuracy, Decision, EmbeddingModel, Threshold,
};
use crate::renderer::{
    apply_transforms, rasterize, sample_transform2d, Lighting, Transform2D, TransformKind,
    Viewpoint,
};
use crate::rng::{derive_seed, stream};

/// Protocol sweep families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Pitch,
    Yaw,
    Lighting,
    Mixture,
    Rotation2d,
    Projective2d,
    Mixture2d,
}

impl std::str::FromStr for ProtocolKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pitch" => Ok(ProtocolKind::Pitch),
            "yaw" => Ok(ProtocolKind::Yaw),
            "lighting" => Ok(ProtocolKind::Lighting),
            "mixture" => Ok(ProtocolKind::Mixture),
            "rotation2d" => Ok(ProtocolKind::Rotation2d),
            "projective2d" => Ok(ProtocolKind::Projective2d),
            "mixture2d" => Ok(ProtocolKind::Mixture2d),
            other => Err(SimError::invalid(format!("unknown protocol kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ProtocolKind::Pitch => "pitch",
            ProtocolKind::Yaw => "yaw",
            ProtocolKind::Lighting => "lighting",
            ProtocolKind::Mixture => "mixture",
            ProtocolKind::Rotation2d => "rotation2d",
            ProtocolKind::Projective2d => "projective2d",
            ProtocolKind::Mixture2d => "mixture2d",
        };
        f.write_str(s)
    }
}

/// A protocol sweep specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    /// Upper end of the `U(0, x)` sigma draw for the 2D kinds.
    pub sigma_range: f64,
    /// Seed of the 2D draws (unused by the 3D kinds).
    pub rng_seed: u64,
}

impl ProtocolSpec {
    pub fn new(kind: ProtocolKind) -> ProtocolSpec {
        ProtocolSpec {
            kind,
            sigma_range: 0.1,
            rng_seed: 0,
        }
    }

    /// Committed number of conditions for this kind.
    pub fn expected_count(&self) -> usize {
        match self.kind {
            ProtocolKind::Pitch | ProtocolKind::Yaw => 30,
            ProtocolKind::Lighting => 20,
            ProtocolKind::Mixture => 108,
            ProtocolKind::Rotation2d | ProtocolKind::Projective2d | ProtocolKind::Mixture2d => 30,
        }
    }
}

/// One evaluation condition: a 3D pose/lighting plus optional 2D warps
/// applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub viewpoint: Viewpoint,
    pub lighting: Lighting,
    pub transforms: Vec<Transform2D>,
}

/// Ordered list of conditions for one sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionList {
    pub kind: ProtocolKind,
    pub conditions: Vec<Condition>,
}

impl ConditionList {
    pub fn len(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty()
    }
}

/// Enumerates the committed conditions of a sweep.
pub fn enumerate_conditions(spec: &ProtocolSpec) -> Result<ConditionList> {
    let neutral = |v: Viewpoint, l: Lighting| Condition {
        viewpoint: v,
        lighting: l,
        transforms: vec![],
    };
    let conditions = match spec.kind {
        ProtocolKind::Pitch => (-15..=15)
            .filter(|&d| d != 0)
            .map(|d| {
                neutral(
                    Viewpoint {
                        yaw_deg: 0.0,
                        pitch_deg: d as f64,
                    },
                    Lighting::NEUTRAL,
                )
            })
            .collect(),
        ProtocolKind::Yaw => (-15..=15)
            .filter(|&d| d != 0)
            .map(|d| {
                neutral(
                    Viewpoint {
                        yaw_deg: d as f64,
                        pitch_deg: 0.0,
                    },
                    Lighting::NEUTRAL,
                )
            })
            .collect(),
        ProtocolKind::Lighting => (0..20)
            .map(|i| {
                neutral(
                    Viewpoint::NEUTRAL,
                    Lighting::with_azimuth(-60.0 + 6.0 * i as f64),
                )
            })
            .collect(),
        ProtocolKind::Mixture => {
            let degs = [-15.0, -9.0, -3.0, 3.0, 9.0, 15.0];
            let lights = [-40.0, 0.0, 40.0];
            let mut out = Vec::with_capacity(108);
            for &pitch in &degs {
                for &yaw in &degs {
                    for &az in &lights {
                        out.push(neutral(
                            Viewpoint {
                                yaw_deg: yaw,
                                pitch_deg: pitch,
                            },
                            Lighting::with_azimuth(az),
                        ));
                    }
                }
            }
            out
        }
        ProtocolKind::Rotation2d | ProtocolKind::Projective2d | ProtocolKind::Mixture2d => {
            if spec.sigma_range < 0.0 {
                return Err(SimError::invalid("sigma_range must be non-negative"));
            }
            let mut rng = stream(spec.rng_seed, "protocol/2d");
            (0..spec.expected_count())
                .map(|_| {
                    let sigma: f64 = rng.gen::<f64>() * spec.sigma_range;
                    let transforms = match spec.kind {
                        ProtocolKind::Rotation2d => {
                            vec![sample_transform2d(TransformKind::Rotation, sigma, &mut rng)]
                        }
                        ProtocolKind::Projective2d => {
                            vec![sample_transform2d(
                                TransformKind::Projective,
                                sigma,
                                &mut rng,
                            )]
                        }
                        _ => vec![
                            sample_transform2d(TransformKind::Rotation, sigma, &mut rng),
                            sample_transform2d(TransformKind::Projective, sigma, &mut rng),
                        ],
                    };
                    Condition {
                        viewpoint: Viewpoint::NEUTRAL,
                        lighting: Lighting::NEUTRAL,
                        transforms,
                    }
                })
                .collect()
        }
    };
    let list = ConditionList {
        kind: spec.kind,
        conditions,
    };
    debug_assert_eq!(list.len(), spec.expected_count());
    Ok(list)
}

/// Per-condition evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub index: usize,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub light_azimuth_deg: f64,
    pub distance: f64,
    pub decision: Decision,
    pub success: bool,
}

/// Result of evaluating one adversarial texture under one sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ProtocolKind,
    pub mode: AttackMode,
    pub model_id: String,
    pub method: String,
    pub records: Vec<ConditionRecord>,
    /// Attack success rate in percent.
    pub asr: f64,
}

impl ExperimentReport {
    /// Recomputes the ASR from the records (consistency check).
    pub fn recompute_asr(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        100.0 * self.records.iter().filter(|r| r.success).count() as f64
            / self.records.len() as f64
    }
}

/// Evaluates an adversarial texture over explicit conditions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_on_conditions(
    adv_texture: &TextureMap,
    shape: &ShapeMap,
    victim_image: &Rgb,
    model: &EmbeddingModel,
    delta: Threshold,
    conditions: &ConditionList,
    mode: AttackMode,
    method: &str,
) -> Result<ExperimentReport> {
    let f_victim = model.embed(victim_image)?;
    let image_res = model.input_res();
    let records: Vec<ConditionRecord> = conditions
        .conditions
        .par_iter()
        .enumerate()
        .map(|(index, cond)| {
            cond.viewpoint.validate()?;
            cond.lighting.validate()?;
            let frag = rasterize(shape, &cond.viewpoint, &cond.lighting, image_res);
            let mut image = frag.shade(adv_texture);
            if !cond.transforms.is_empty() {
                image = apply_transforms(&image, &cond.transforms)?;
            }
            let feature = model.embed(&image)?;
            let distance = feature_distance(&feature, &f_victim);
            let decision = decide(distance, delta);
            let success = match mode {
                AttackMode::Impersonation => decision == Decision::Same,
                AttackMode::Dodging => decision == Decision::Different,
            };
            Ok(ConditionRecord {
                index,
                yaw_deg: cond.viewpoint.yaw_deg,
                pitch_deg: cond.viewpoint.pitch_deg,
                light_azimuth_deg: cond.lighting.azimuth_deg,
                distance,
                decision,
                success,
            })
        })
        .collect::<Result<_>>()?;
    let asr = 100.0 * records.iter().filter(|r| r.success).count() as f64
        / records.len().max(1) as f64;
    Ok(ExperimentReport {
        kind: conditions.kind,
        mode,
        model_id: model.id().to_string(),
        method: method.to_string(),
        records,
        asr,
    })
}

/// Evaluates an adversarial texture over a protocol sweep.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_attack(
    adv_texture: &TextureMap,
    shape: &ShapeMap,
    victim_image: &Rgb,
    model: &EmbeddingModel,
    delta: Threshold,
    spec: &ProtocolSpec,
    mode: AttackMode,
    method: &str,
) -> Result<ExperimentReport> {
    let conditions = enumerate_conditions(spec)?;
    evaluate_on_conditions(
        adv_texture,
        shape,
        victim_image,
        model,
        delta,
        &conditions,
        mode,
        method,
    )
}

/// Success heat map over the sweep's natural grid: the mixture kind maps
/// onto its 6x6 pitch-by-yaw grid (success fraction across the three
/// lighting levels); every other kind is a 1xN strip in condition order.
pub fn success_heatmap(report: &ExperimentReport) -> Array2<f64> {
    if report.kind == ProtocolKind::Mixture {
        let mut grid = Array2::zeros((6, 6));
        for (i, rec) in report.records.iter().enumerate() {
            let cell = i / 3; // three lighting levels per (pitch, yaw) cell
            let (pr, yc) = (cell / 6, cell % 6);
            if rec.success {
                grid[[pr, yc]] += 1.0 / 3.0;
            }
        }
        grid
    } else {
        let mut strip = Array2::zeros((1, report.records.len()));
        for (i, rec) in report.records.iter().enumerate() {
            strip[[0, i]] = rec.success as usize as f64;
        }
        strip
    }
}

/// One cell of the benchmark matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub attacker_seed: u64,
    pub victim_seed: u64,
    pub craft_model: String,
    pub eval_model: String,
    pub method: String,
    pub kind: ProtocolKind,
    pub white_box: bool,
    pub asr: f64,
}

/// Full benchmark output: per-cell rates plus the calibrated thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkBundle {
    pub mode: AttackMode,
    pub region: PatchRegion,
    pub cells: Vec<BenchmarkCell>,
    pub thresholds: Vec<(String, f64)>,
    /// Clean-texture baseline ASR per (eval model, spec kind).
    pub baselines: Vec<(String, ProtocolKind, f64)>,
}

/// Benchmark orchestration knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub mode: AttackMode,
    pub region: PatchRegion,
    /// Template attack configuration; per-cell seeds are derived from
    /// `global_seed` and the cell labels.
    pub attack: AttackConfig,
    /// Identities used for threshold calibration.
    pub calibration_identities: usize,
    pub calibration_base_seed: u64,
    pub global_seed: u64,
}

impl BenchmarkConfig {
    pub fn new(mode: AttackMode, method: AttackMethod) -> BenchmarkConfig {
        let mut attack = AttackConfig::new(mode, method);
        attack.iters = 100;
        BenchmarkConfig {
            mode,
            region: PatchRegion::Eyeglass,
            attack,
            calibration_identities: 20,
            calibration_base_seed: 1000,
            global_seed: 0,
        }
    }
}

/// Crafts and scores patches over the full cross matrix: every attacker
/// identity and method is crafted once per white-box model, then evaluated
/// on every model and sweep. The victim of attacker `i` is the next
/// identity in the list for impersonation, or the attacker itself for
/// dodging.
pub fn run_benchmark(
    identities: &[u64],
    methods: &[AttackMethod],
    models: &[EmbeddingModel],
    specs: &[ProtocolSpec],
    config: &BenchmarkConfig,
) -> Result<BenchmarkBundle> {
    if models.len() < 2 {
        return Err(SimError::invalid(
            "benchmark transfer cells need at least two models",
        ));
    }
    if identities.is_empty() || methods.is_empty() || specs.is_empty() {
        return Err(SimError::invalid("benchmark inputs must be non-empty"));
    }
    let mask = region_mask(config.region, DEFAULT_TEXTURE_RES)?;
    let candidates = CandidateSet::stratified_default();

    let mut thresholds = Vec::new();
    let mut deltas = Vec::new();
    for model in models {
        let (delta, _) = separation_accuracy(
            model,
            config.calibration_identities,
            config.calibration_base_seed,
        )?;
        thresholds.push((model.id().to_string(), delta.delta));
        deltas.push(delta);
    }

    let mut cells = Vec::new();
    let mut baselines = Vec::new();
    for (ai, &attacker_seed) in identities.iter().enumerate() {
        let victim_seed = match config.mode {
            AttackMode::Impersonation => identities[(ai + 1) % identities.len()],
            AttackMode::Dodging => attacker_seed,
        };
        let attacker = synth_identity(attacker_seed);
        let victim = synth_identity(victim_seed);
        let victim_shape = build_shape(&victim, DEFAULT_SHAPE_RES)?;
        let victim_texture = build_texture(&victim, DEFAULT_TEXTURE_RES)?;
        let attacker_shape = build_shape(&attacker, DEFAULT_SHAPE_RES)?;
        let clean_texture = build_texture(&attacker, DEFAULT_TEXTURE_RES)?;

        for (mi, craft_model) in models.iter().enumerate() {
            let victim_image = crate::renderer::render_at(
                &victim_shape,
                &victim_texture,
                &Viewpoint::NEUTRAL,
                &Lighting::NEUTRAL,
                craft_model.input_res(),
            )?
            .image;
            // clean baseline per eval model x spec (once per attacker on
            // the first craft model)
            if ai == 0 && mi == 0 {
                for (ei, eval_model) in models.iter().enumerate() {
                    for spec in specs {
                        let report = evaluate_attack(
                            &clean_texture,
                            &attacker_shape,
                            &victim_image,
                            eval_model,
                            deltas[ei],
                            spec,
                            config.mode,
                            "clean",
                        )?;
                        baselines.push((eval_model.id().to_string(), spec.kind, report.asr));
                    }
                }
            }
            for &method in methods {
                let mut attack_cfg = config.attack.clone();
                attack_cfg.method = method;
                attack_cfg.rng_seed = derive_seed(
                    config.global_seed,
                    &format!("attack/{attacker_seed}/{}/{method}", craft_model.id()),
                );
                let result: AttackResult = run_attack(
                    &attacker,
                    &victim_image,
                    &mask,
                    craft_model,
                    &candidates,
                    &attack_cfg,
                    deltas[mi],
                )?;
                for (ei, eval_model) in models.iter().enumerate() {
                    for spec in specs {
                        let report = evaluate_attack(
                            &result.adv_texture,
                            &attacker_shape,
                            &victim_image,
                            eval_model,
                            deltas[ei],
                            spec,
                            config.mode,
                            &method.to_string(),
                        )?;
                        cells.push(BenchmarkCell {
                            attacker_seed,
                            victim_seed,
                            craft_model: craft_model.id().to_string(),
                            eval_model: eval_model.id().to_string(),
                            method: method.to_string(),
                            kind: spec.kind,
                            white_box: mi == ei,
                            asr: report.asr,
                        });
                    }
                }
            }
        }
    }
    Ok(BenchmarkBundle {
        mode: config.mode,
        region: config.region,
        cells,
        thresholds,
        baselines,
    })
}
