//! Subcommand implementations: load config, run the pipeline stage, write
//! artifacts. All file outputs are deterministic functions of the inputs.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use ndarray::Array2;

use facesim_core::attack::{run_attack, AttackMethod, CandidateSet};
use facesim_core::geometry::{
    build_shape, build_texture, region_mask, synth_identity, TextureMap, DEFAULT_SHAPE_RES,
    DEFAULT_TEXTURE_RES,
};
use facesim_core::io;
use facesim_core::protocol::{
    enumerate_conditions, evaluate_on_conditions, run_benchmark, success_heatmap, BenchmarkConfig,
    ProtocolSpec,
};
use facesim_core::recognizer::{separation_accuracy, EmbeddingModel, Threshold};
use facesim_core::reconstruction::{fit_face, FitConfig};
use facesim_core::renderer::{render_at, Lighting, Viewpoint};

use crate::config::{AttackCmdConfig, BenchCmdConfig, FitCmdConfig, ProtocolCmdConfig};

/// Error wrapper distinguishing bad configs (exit 2) from runtime
/// failures (exit 3).
pub struct CmdError {
    pub inner: anyhow::Error,
    pub is_config_error: bool,
}

pub type CmdResult = Result<(), CmdError>;

fn config_err(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        inner: e.into(),
        is_config_error: true,
    }
}

fn runtime_err(e: impl Into<anyhow::Error>) -> CmdError {
    CmdError {
        inner: e.into(),
        is_config_error: false,
    }
}

fn ensure_dir(path: &Path) -> Result<(), CmdError> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating output directory {}", path.display()))
        .map_err(runtime_err)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CmdError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(config_err)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(config_err)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CmdError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| runtime_err(anyhow!(e)))?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime_err)
}

fn model_by_id(id: &str) -> Result<EmbeddingModel, CmdError> {
    EmbeddingModel::preset(id).map_err(config_err)
}

/// Calibrated threshold, or the explicit override when given.
fn resolve_delta(
    model: &EmbeddingModel,
    explicit: Option<f64>,
    identities: usize,
    base_seed: u64,
) -> Result<Threshold, CmdError> {
    match explicit {
        Some(d) => Threshold::new(d).map_err(config_err),
        None => {
            let (delta, _) = separation_accuracy(model, identities, base_seed)
                .map_err(runtime_err)?;
            Ok(delta)
        }
    }
}

pub fn cmd_synth(seed: u64, out: &Path) -> CmdResult {
    ensure_dir(out)?;
    let params = synth_identity(seed);
    let shape = build_shape(&params, DEFAULT_SHAPE_RES).map_err(runtime_err)?;
    let texture = build_texture(&params, DEFAULT_TEXTURE_RES).map_err(runtime_err)?;
    write_json(&out.join("identity.json"), &params)?;
    io::write_ppm(&out.join("texture.ppm"), &texture.values).map_err(runtime_err)?;
    // shape dump: resolution plus row-major xyz positions
    let (rows, cols) = shape.resolution();
    let positions: Vec<[f64; 3]> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .map(|(r, c)| shape.position(r, c))
        .collect();
    write_json(
        &out.join("shape.json"),
        &serde_json::json!({
            "rows": rows,
            "cols": cols,
            "positions": positions,
        }),
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_render(
    seed: u64,
    yaw: f64,
    pitch: f64,
    azimuth: f64,
    ambient: f64,
    size: usize,
    out: &Path,
) -> CmdResult {
    ensure_dir(out)?;
    let params = synth_identity(seed);
    let shape = build_shape(&params, DEFAULT_SHAPE_RES).map_err(runtime_err)?;
    let texture = build_texture(&params, DEFAULT_TEXTURE_RES).map_err(runtime_err)?;
    let viewpoint = Viewpoint::new(yaw, pitch).map_err(config_err)?;
    let lighting = Lighting {
        azimuth_deg: azimuth,
        ambient,
    };
    lighting.validate().map_err(config_err)?;
    let output =
        render_at(&shape, &texture, &viewpoint, &lighting, (size, size)).map_err(runtime_err)?;
    io::write_ppm(&out.join("render.ppm"), &output.image).map_err(runtime_err)?;
    io::write_raw_f32(&out.join("render.f32"), &output.image).map_err(runtime_err)?;
    // depth normalized over coverage for inspection; background stays white
    let normalized =
        facesim_core::recognizer::normalize_depth(&output.depth, &output.coverage);
    io::write_pgm16(&out.join("depth.pgm"), &normalized).map_err(runtime_err)?;
    Ok(())
}

pub fn cmd_fit(config_path: &Path, out: &Path) -> CmdResult {
    let cfg: FitCmdConfig = load_json(config_path)?;
    ensure_dir(out)?;
    let model = model_by_id(&cfg.model)?;
    let target = io::read_ppm(Path::new(&cfg.target))
        .with_context(|| format!("reading target {}", cfg.target))
        .map_err(config_err)?;
    let fit_config = FitConfig {
        lambda: cfg.lambda,
        max_iters: cfg.max_iters,
        learning_rate: cfg.learning_rate,
        model: &model,
    };
    let result = fit_face(&target, &fit_config, cfg.init_seed).map_err(runtime_err)?;
    write_json(&out.join("fitted.json"), &result.params)?;
    let rows: Vec<Vec<String>> = result
        .loss_trace
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    io::write_csv(&out.join("loss.csv"), &["iteration", "loss"], &rows).map_err(runtime_err)?;
    io::write_ppm(&out.join("final_render.ppm"), &result.final_render.image)
        .map_err(runtime_err)?;
    Ok(())
}

pub fn cmd_attack(config_path: &Path, out: &Path, seed_override: Option<u64>) -> CmdResult {
    let mut cfg: AttackCmdConfig = load_json(config_path)?;
    if let Some(seed) = seed_override {
        cfg.overrides.rng_seed = Some(seed);
    }
    ensure_dir(out)?;
    let model = model_by_id(&cfg.model)?;
    let attack_cfg = cfg.build_attack_config().map_err(config_err)?;
    attack_cfg.validate().map_err(config_err)?;
    let delta = resolve_delta(
        &model,
        cfg.delta,
        cfg.calibration_identities,
        cfg.calibration_base_seed,
    )?;
    let attacker = synth_identity(cfg.attacker_seed);
    let victim = synth_identity(cfg.victim_seed);
    let victim_shape = build_shape(&victim, DEFAULT_SHAPE_RES).map_err(runtime_err)?;
    let victim_texture = build_texture(&victim, DEFAULT_TEXTURE_RES).map_err(runtime_err)?;
    let victim_image = render_at(
        &victim_shape,
        &victim_texture,
        &Viewpoint::NEUTRAL,
        &Lighting::NEUTRAL,
        model.input_res(),
    )
    .map_err(runtime_err)?
    .image;
    let mask = region_mask(cfg.region, cfg.texture_res).map_err(config_err)?;
    let candidates = CandidateSet::stratified_default();
    let result = run_attack(
        &attacker,
        &victim_image,
        &mask,
        &model,
        &candidates,
        &attack_cfg,
        delta,
    )
    .map_err(runtime_err)?;

    io::write_ppm(&out.join("adv_texture.ppm"), &result.adv_texture.values)
        .map_err(runtime_err)?;
    io::write_raw_f32(&out.join("adv_texture.f32"), &result.adv_texture.values)
        .map_err(runtime_err)?;
    let rows: Vec<Vec<String>> = result
        .loss_trace
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    io::write_csv(&out.join("loss.csv"), &["iteration", "mean_loss"], &rows)
        .map_err(runtime_err)?;
    write_json(&out.join("config_echo.json"), &cfg)?;
    write_json(
        &out.join("result.json"),
        &serde_json::json!({
            "iterations_run": result.iterations_run,
            "success_at_neutral": result.success_at_neutral,
            "delta": delta.delta,
            "texture_res": cfg.texture_res,
        }),
    )?;
    Ok(())
}

pub fn cmd_protocol(config_path: &Path, out: &Path, seed_override: Option<u64>) -> CmdResult {
    let mut cfg: ProtocolCmdConfig = load_json(config_path)?;
    if let Some(seed) = seed_override {
        cfg.protocol_seed = seed;
    }
    ensure_dir(out)?;
    let model = model_by_id(&cfg.model)?;
    let delta = resolve_delta(
        &model,
        cfg.delta,
        cfg.calibration_identities,
        cfg.calibration_base_seed,
    )?;
    let attacker = synth_identity(cfg.attacker_seed);
    let shape = build_shape(&attacker, DEFAULT_SHAPE_RES).map_err(runtime_err)?;
    let texture = match &cfg.adv_texture {
        Some(path) => {
            let values = io::read_raw_f32(Path::new(path), cfg.texture_res.0, cfg.texture_res.1)
                .with_context(|| format!("reading adversarial texture {path}"))
                .map_err(config_err)?;
            TextureMap { values }
        }
        None => build_texture(&attacker, cfg.texture_res).map_err(runtime_err)?,
    };
    let victim = synth_identity(cfg.victim_seed);
    let victim_shape = build_shape(&victim, DEFAULT_SHAPE_RES).map_err(runtime_err)?;
    let victim_texture = build_texture(&victim, DEFAULT_TEXTURE_RES).map_err(runtime_err)?;
    let victim_image = render_at(
        &victim_shape,
        &victim_texture,
        &Viewpoint::NEUTRAL,
        &Lighting::NEUTRAL,
        model.input_res(),
    )
    .map_err(runtime_err)?
    .image;

    let spec = ProtocolSpec {
        kind: cfg.kind,
        sigma_range: 0.1,
        rng_seed: cfg.protocol_seed,
    };
    let conditions = enumerate_conditions(&spec).map_err(config_err)?;
    let method = cfg.method_label.clone().unwrap_or_else(|| "manual".into());
    let report = evaluate_on_conditions(
        &texture,
        &shape,
        &victim_image,
        &model,
        delta,
        &conditions,
        cfg.mode,
        &method,
    )
    .map_err(runtime_err)?;

    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.index.to_string(),
                r.yaw_deg.to_string(),
                r.pitch_deg.to_string(),
                r.light_azimuth_deg.to_string(),
                r.distance.to_string(),
                match r.decision {
                    facesim_core::recognizer::Decision::Same => "same".to_string(),
                    facesim_core::recognizer::Decision::Different => "different".to_string(),
                },
                (r.success as u8).to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &out.join("report.csv"),
        &[
            "index",
            "yaw_deg",
            "pitch_deg",
            "light_azimuth_deg",
            "distance",
            "decision",
            "success",
        ],
        &rows,
    )
    .map_err(runtime_err)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({
            "kind": report.kind,
            "mode": report.mode,
            "model_id": report.model_id,
            "method": report.method,
            "conditions": report.records.len(),
            "asr": report.asr,
            "delta": delta.delta,
        }),
    )?;
    let heat = success_heatmap(&report);
    io::write_ppm(&out.join("heatmap.ppm"), &heat_to_rgb(&heat)).map_err(runtime_err)?;
    Ok(())
}

/// Grayscale heat map image: success fraction 0 (black) to 1 (white).
fn heat_to_rgb(heat: &Array2<f64>) -> ndarray::Array3<f64> {
    let (h, w) = heat.dim();
    let mut rgb = ndarray::Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                rgb[[r, c, ch]] = heat[[r, c]];
            }
        }
    }
    rgb
}

pub fn cmd_bench(config_path: &Path, out: &Path, seed_override: Option<u64>) -> CmdResult {
    let mut cfg: BenchCmdConfig = load_json(config_path)?;
    if let Some(seed) = seed_override {
        cfg.global_seed = seed;
    }
    ensure_dir(out)?;
    let methods: Vec<AttackMethod> = cfg
        .methods
        .iter()
        .map(|m| m.parse().map_err(|e| config_err(anyhow!("{e}"))))
        .collect::<Result<_, _>>()?;
    let models: Vec<EmbeddingModel> = cfg
        .models
        .iter()
        .map(|id| model_by_id(id))
        .collect::<Result<_, _>>()?;
    let specs: Vec<ProtocolSpec> = cfg
        .specs
        .iter()
        .map(|&kind| ProtocolSpec {
            kind,
            sigma_range: 0.1,
            rng_seed: cfg.global_seed,
        })
        .collect();
    let mut bench_cfg = BenchmarkConfig::new(cfg.mode, AttackMethod::Face3dAdvX);
    bench_cfg.region = cfg.region;
    bench_cfg.global_seed = cfg.global_seed;
    bench_cfg.calibration_identities = cfg.calibration_identities;
    bench_cfg.calibration_base_seed = cfg.calibration_base_seed;
    {
        // apply shared overrides onto the template attack config
        let attack_cmd = AttackCmdConfig {
            attacker_seed: 0,
            victim_seed: 0,
            model: cfg.models[0].clone(),
            region: cfg.region,
            mode: cfg.mode,
            method: "face3dadv_x".into(),
            delta: None,
            texture_res: DEFAULT_TEXTURE_RES,
            overrides: cfg.overrides.clone(),
            calibration_identities: cfg.calibration_identities,
            calibration_base_seed: cfg.calibration_base_seed,
        };
        bench_cfg.attack = attack_cmd.build_attack_config().map_err(config_err)?;
    }
    let bundle = run_benchmark(&cfg.identity_seeds, &methods, &models, &specs, &bench_cfg)
        .map_err(runtime_err)?;

    let rows: Vec<Vec<String>> = bundle
        .cells
        .iter()
        .map(|c| {
            vec![
                c.attacker_seed.to_string(),
                c.victim_seed.to_string(),
                c.craft_model.clone(),
                c.eval_model.clone(),
                c.method.clone(),
                c.kind.to_string(),
                (c.white_box as u8).to_string(),
                c.asr.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &out.join("bench_cells.csv"),
        &[
            "attacker_seed",
            "victim_seed",
            "craft_model",
            "eval_model",
            "method",
            "spec",
            "white_box",
            "asr",
        ],
        &rows,
    )
    .map_err(runtime_err)?;
    write_json(&out.join("bench_summary.json"), &bundle)?;
    write_json(&out.join("config_echo.json"), &cfg)?;
    Ok(())
}
