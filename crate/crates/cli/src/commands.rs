use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use motdrive::dataqa::{derive_command, instruction_prompt_text, PLANNING_PROMPT};
use motdrive::evalkit::{evaluate, EvalOptions, ScenarioOutput};
use motdrive::experts::{infer as run_infer, InferOptions, InferRequest, Model, ModelConfig};
use motdrive::toyworld::{
    export_dataset, generate_scenarios, import_dataset, render_frame, write_pgm, LoadedDataset, Scenario,
    ScenarioRecord, WorldConfig,
};
use motdrive::training::{
    load_checkpoint, run_stage_with, save_checkpoint, write_gnuplot, write_loss_csv, CheckpointManifest, StageConfig,
    BLOB_FILE,
};
use motdrive::{sha256_hex, Error, Exec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{EvalArgs, GenDataArgs, InferArgs, TrainArgs};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn compat(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } => 3,
            Error::Incompatible(_) | Error::CheckpointLength { .. } => 4,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Res<T = ()> = Result<T, CliError>;

/// Resolved description of a run, written as `run.json` beside its outputs.
#[derive(Serialize)]
struct RunSpec<'a> {
    subcommand: &'a str,
    config: Value,
    seed: u64,
    output: &'a Path,
    flags: BTreeMap<&'a str, Value>,
}

fn write_json(path: &Path, v: &impl Serialize) -> Res {
    let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Res<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Res {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

fn file_hash(path: &Path) -> Res<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn snapshot(out: &Path, spec: &RunSpec) -> Res {
    write_json(&out.join("run.json"), spec)
}

// gen-data ------------------------------------------------------------------

pub fn gen_data(a: &GenDataArgs) -> Res {
    let world: WorldConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => WorldConfig::default(),
    };
    world.validate()?;
    let exec = Exec::default();
    let scenarios = generate_scenarios(a.seed, a.count, &world, exec)?;
    let manifest = export_dataset(&scenarios, &world, &a.out, exec)?;
    snapshot(
        &a.out,
        &RunSpec {
            subcommand: "gen-data",
            config: json!(world),
            seed: a.seed,
            output: &a.out,
            flags: BTreeMap::from([("count", json!(a.count))]),
        },
    )?;
    info!("wrote {} scenarios ({} frames) to {}", manifest.count, manifest.frame_count, a.out.display());
    Ok(())
}

// train ---------------------------------------------------------------------

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
struct TrainConfig {
    training: Option<StageConfig>,
    model: Option<ModelConfig>,
}

fn load_model(dir: &Path, expected: Option<&ModelConfig>, force: bool) -> Res<(Model, CheckpointManifest)> {
    Ok(load_checkpoint(dir, expected, force)?)
}

fn check_world(manifest: &CheckpointManifest, world: &WorldConfig, force: bool) -> Res {
    if let Some(h) = &manifest.world_config_hash {
        if *h != world.hash() {
            if !force {
                return Err(CliError::compat(
                    "checkpoint was trained on a different world config (use --force to proceed)",
                ));
            }
            warn!("world config differs from the checkpoint's training data (forced)");
        }
    }
    if manifest.model_config.frame_size != world.frame_size {
        return Err(CliError::compat(format!(
            "model expects {}px frames, dataset has {}px",
            manifest.model_config.frame_size, world.frame_size
        )));
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Res {
    let file: TrainConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    let mut cfg = file.training.unwrap_or_default();
    cfg.stage = a.stage;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if cfg.stage >= 2 && a.init.is_none() {
        return Err(CliError::usage(format!("stage {} requires --init <checkpoint>", cfg.stage)));
    }
    let data = import_dataset(&a.data)?;
    if data.scenarios.is_empty() {
        return Err(CliError::usage("training dataset is empty"));
    }
    let (mut model, init_hash) = match &a.init {
        Some(dir) => {
            let (m, manifest) = load_model(dir, file.model.as_ref(), a.force)?;
            check_world(&manifest, &data.config, a.force)?;
            (m, Some(file_hash(&dir.join(BLOB_FILE))?))
        }
        None => {
            let mc = file.model.clone().unwrap_or_default();
            (Model::new(mc, cfg.seed)?, None)
        }
    };
    if model.config.frame_size != data.config.frame_size {
        return Err(CliError::usage(format!(
            "model expects {}px frames, dataset has {}px",
            model.config.frame_size, data.config.frame_size
        )));
    }
    create_dir(&a.out)?;
    snapshot(
        &a.out,
        &RunSpec {
            subcommand: "train",
            config: json!({ "training": cfg, "model": model.config }),
            seed: cfg.seed,
            output: &a.out,
            flags: BTreeMap::from([
                ("data", json!(a.data)),
                ("init", json!(a.init)),
                ("init_hash", json!(init_hash)),
                ("force", json!(a.force)),
            ]),
        },
    )?;
    info!(
        "stage {}: {} steps, batch {}, {} scenarios, {} parameters",
        cfg.stage,
        cfg.steps,
        cfg.batch_size,
        data.scenarios.len(),
        model.store.scalar_count()
    );
    let every = (cfg.steps / 20).max(1);
    let mut report = run_stage_with(&mut model, &cfg, &data.scenarios, &data.config, Exec::default(), |l| {
        if l.step % every == 0 || l.step + 1 == cfg.steps {
            info!("step {:>6}  loss {:.5}  lr {:.2e}", l.step, l.total, l.lr);
        }
    })?;
    report.meta.world_config_hash = Some(data.config.hash());
    save_checkpoint(&model, &report.meta, &a.out)?;
    write_loss_csv(&a.out.join("loss.csv"), &report.losses)?;
    write_gnuplot(&a.out.join("loss.gp"), "loss.csv")?;
    info!("checkpoint written to {}", a.out.display());
    Ok(())
}

// eval ----------------------------------------------------------------------

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    waypoints: &'a [[f64; 2]],
    qa: Vec<(&'a str, &'a str)>,
    cot: Option<&'a str>,
}

pub fn eval(a: &EvalArgs) -> Res {
    let (model, manifest) = load_model(&a.ckpt, None, a.force)?;
    let data = import_dataset(&a.data)?;
    check_world(&manifest, &data.config, a.force)?;
    let n = a.limit.unwrap_or(data.scenarios.len()).min(data.scenarios.len());
    if n == 0 {
        return Err(CliError::usage("evaluation split is empty"));
    }
    let scenarios = &data.scenarios[..n];
    let opts = EvalOptions {
        steps: a.steps.unwrap_or(model.config.flow_steps),
        seed: a.seed,
        generate: !a.no_gen,
        decode_text: !a.no_text,
        with_command: !a.no_command,
        ego_radius: data.config.ego_radius,
        ..EvalOptions::default()
    };
    let (mut report, outputs) = evaluate(&model, scenarios, &data.config, &opts, Exec::default())?;
    report.meta.checkpoint_hash = Some(file_hash(&a.ckpt.join(BLOB_FILE))?);
    report.meta.dataset_hash = Some(file_hash(&a.data.join("scenarios.jsonl"))?);
    report.validate()?;

    create_dir(&a.out)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    let csv = a.out.join("metrics.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_predictions(&a.out, &outputs)?;
    snapshot(
        &a.out,
        &RunSpec {
            subcommand: "eval",
            config: json!({ "eval": format!("{opts:?}"), "model": model.config }),
            seed: a.seed,
            output: &a.out,
            flags: BTreeMap::from([
                ("ckpt", json!(a.ckpt)),
                ("data", json!(a.data)),
                ("no_gen", json!(a.no_gen)),
                ("no_text", json!(a.no_text)),
                ("no_command", json!(a.no_command)),
                ("limit", json!(a.limit)),
                ("force", json!(a.force)),
            ]),
        },
    )?;
    info!(
        "L2@3s {:.3} m, collision {:.3}, agreement {:.3} over {} scenarios",
        report.l2_at.s3, report.collision_rate, report.instruction_agreement, n
    );
    Ok(())
}

fn write_predictions(out: &Path, outputs: &[ScenarioOutput]) -> Res {
    let mut text = String::new();
    for o in outputs {
        let p = Prediction {
            id: &o.id,
            waypoints: o.action.waypoints(),
            qa: o.qa.iter().map(|(q, ans)| (q.question.as_str(), ans.as_str())).collect(),
            cot: o.cot.as_ref().map(|(_, t)| t.as_str()),
        };
        text.push_str(&serde_json::to_string(&p).map_err(Error::from)?);
        text.push('\n');
    }
    let path = out.join("predictions.jsonl");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

// infer ---------------------------------------------------------------------

fn resolve_scenario(a: &InferArgs) -> Res<(Scenario, WorldConfig)> {
    let as_path = PathBuf::from(&a.scenario);
    if as_path.is_file() {
        let text = fs::read_to_string(&as_path).map_err(|e| Error::io(&as_path, e))?;
        let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        let rec: ScenarioRecord =
            serde_json::from_str(line).map_err(|e| CliError::usage(format!("{}: {e}", as_path.display())))?;
        rec.validate()?;
        let world = match &a.world_config {
            Some(p) => read_config(p)?,
            None => WorldConfig::default(),
        };
        return Ok((rec.into_scenario()?, world));
    }
    let dir = a
        .data
        .as_ref()
        .ok_or_else(|| CliError::usage("a scenario id needs --data <dataset>"))?;
    let LoadedDataset { scenarios, config, .. } = import_dataset(dir)?;
    let s = scenarios
        .into_iter()
        .find(|s| s.id == a.scenario)
        .ok_or_else(|| Error::UnknownScenario(a.scenario.clone()))?;
    Ok((s, config))
}

pub fn infer(a: &InferArgs) -> Res {
    let (model, manifest) = load_model(&a.ckpt, None, a.force)?;
    let (s, world) = resolve_scenario(a)?;
    check_world(&manifest, &world, a.force)?;
    let c = &model.config;
    let render = |ts: &[usize]| -> Res<Vec<_>> { Ok(ts.iter().map(|&t| render_frame(&s, t, &world)).collect::<Result<Vec<_>, _>>()?) };
    let prompt = match &a.instruction {
        Some(text) => instruction_prompt_text(text.trim().trim_end_matches('.')),
        None => PLANNING_PROMPT.to_string(),
    };
    let req = InferRequest {
        frames: render(&c.obs_frames)?.into_iter().map(|f| f.pixels).collect(),
        prompt: prompt.clone(),
        history: s.history(),
        gen_history: render(&c.hist_frames)?.into_iter().map(|f| f.pixels).collect(),
    };
    let opts = InferOptions {
        steps: a.steps.unwrap_or(c.flow_steps),
        seed: a.seed,
        decode: true,
        generate: !a.no_gen,
    };
    if opts.steps == 0 {
        return Err(CliError::usage("--steps must be at least 1"));
    }
    let out = run_infer(&model, &req, &opts)?;

    create_dir(&a.out)?;
    let mut csv = String::from("x,y\n");
    for w in out.action.waypoints() {
        csv.push_str(&format!("{},{}\n", w[0], w[1]));
    }
    let traj = a.out.join("trajectory.csv");
    fs::write(&traj, csv).map_err(|e| Error::io(&traj, e))?;
    let ans = a.out.join("answer.txt");
    fs::write(&ans, format!("{}\n", out.answer_text)).map_err(|e| Error::io(&ans, e))?;
    let mut frame_files = Vec::new();
    for (f, t) in out.future_frames.iter().zip(&c.fut_frames) {
        let name = format!("future_{t:02}.pgm");
        write_pgm(&a.out.join(&name), f)?;
        frame_files.push(name);
    }
    let command = derive_command(&out.action, world.straight_threshold);
    write_json(
        &a.out.join("inference.json"),
        &json!({
            "scenario": s.id,
            "prompt": prompt,
            "answer": out.answer_text,
            "waypoints": out.action.waypoints(),
            "derived_command": command,
            "future_frames": frame_files,
        }),
    )?;
    snapshot(
        &a.out,
        &RunSpec {
            subcommand: "infer",
            config: json!({ "model": model.config, "world": world, "steps": opts.steps }),
            seed: a.seed,
            output: &a.out,
            flags: BTreeMap::from([
                ("ckpt", json!(a.ckpt)),
                ("scenario", json!(a.scenario)),
                ("instruction", json!(a.instruction)),
                ("no_gen", json!(a.no_gen)),
            ]),
        },
    )?;
    println!("{command:?}: {}", out.answer_text);
    Ok(())
}
