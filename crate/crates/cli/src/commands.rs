use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use endotrack::annotate::{generate_dataset, read_samples, write_samples};
use endotrack::eval::{
    eval_cc, eval_generalization, eval_pp_ar, format_table, frame_seed, rollout, AlwaysStop, Controller, EpisodeResult,
    EvalReport, OracleController, PolicyController, RandomController,
};
use endotrack::policy::{Checkpoint, Phase, PolicyParams};
use endotrack::scenes::{scene_pool, GeneralizationSuite};
use endotrack::sim::{render, SceneFile, Task};
use endotrack::trainer::{build_prompts, grpo_train, sft_train};
use endotrack::Error;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{Command, Common, UsageError};

const MANIFEST: &str = "manifest.json";
const SCENES: &str = "scenes.json";
const TRAIN: &str = "train.jsonl";
const EVAL: &str = "eval.jsonl";
const STATS: &str = "stats.txt";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

/// Library errors that stem from the invocation rather than the run.
fn classify(e: Error) -> anyhow::Error {
    match e {
        Error::Config(_) | Error::ColdStart | Error::Dimension(_) | Error::Checkpoint(_) => usage(e.to_string()),
        other => anyhow::Error::new(other),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e:#}")))?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn check_hash(what: &str, found: &str, cfg: &RunConfig, allow: bool) -> Result<()> {
    let expected = cfg.hash();
    if found == expected {
        return Ok(());
    }
    if allow {
        warn!("{what} was produced under config {found}, current config is {expected}; proceeding");
        Ok(())
    } else {
        Err(usage(format!(
            "{what} was produced under config {found} but the current config hashes to {expected} \
             (pass --allow-hash-mismatch to proceed)"
        )))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    scenes: usize,
    annotations: usize,
    train_samples: usize,
    eval_samples: usize,
    curated_out: usize,
    dropped: usize,
    skipped: Vec<u64>,
    files: Vec<String>,
}

pub(crate) fn run(common: &Common, command: Command) -> Result<()> {
    match command {
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
        Command::GenData { out } => gen_data(&load_config(common)?, &out),
        Command::Sft {
            data,
            out,
            resume,
            allow_hash_mismatch,
        } => sft(&load_config(common)?, &data, &out, resume.as_deref(), allow_hash_mismatch),
        Command::Grpo {
            data,
            checkpoint,
            out,
            steps,
            allow_cold_start,
            allow_hash_mismatch,
        } => grpo(
            &load_config(common)?,
            &data,
            &checkpoint,
            &out,
            steps,
            allow_cold_start,
            allow_hash_mismatch,
        ),
        Command::Eval {
            controller,
            suite,
            out,
            allow_hash_mismatch,
        } => eval(&load_config(common)?, &controller, &suite, &out, allow_hash_mismatch),
        Command::Rollout {
            controller,
            scenes,
            scene_id,
            budget,
            out,
            dump_frames,
            allow_hash_mismatch,
        } => rollout_cmd(
            &load_config(common)?,
            &controller,
            &scenes,
            scene_id,
            budget,
            &out,
            dump_frames,
            allow_hash_mismatch,
        ),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let scenes = scene_pool(&cfg.data.tasks, cfg.data.scenes, cfg.scene_seed(), cfg.data.cc_markers, &cfg.kinematics);
    info!("annotating {} scenes", scenes.len());
    let bundle = generate_dataset(&scenes, &cfg.kinematics, &cfg.annotation, &cfg.noise, &cfg.dataset_options())
        .map_err(classify)?;
    SceneFile::new(bundle.scenes.clone()).save(&out.join(SCENES))?;
    write_samples(&out.join(TRAIN), &bundle.train)?;
    write_samples(&out.join(EVAL), &bundle.eval)?;
    let table = bundle.stats.to_table();
    fs::write(out.join(STATS), &table)?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        scenes: bundle.scenes.len(),
        annotations: bundle.stats.annotations,
        train_samples: bundle.train.len(),
        eval_samples: bundle.eval.len(),
        curated_out: bundle.stats.curated_out,
        dropped: bundle.stats.dropped,
        skipped: bundle.skipped.iter().map(|s| s.scene_id).collect(),
        files: [SCENES, TRAIN, EVAL, STATS].iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    print!("{table}");
    info!(
        "wrote {} train / {} eval samples to {}",
        bundle.train.len(),
        bundle.eval.len(),
        out.display()
    );
    Ok(())
}

fn load_manifest(data: &Path) -> Result<Manifest> {
    let path = data.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Training prompts (frames re-rendered and featurized) of a dataset split.
fn load_prompts(cfg: &RunConfig, data: &Path, split: &str, allow: bool) -> Result<Vec<endotrack::trainer::Prompt>> {
    let manifest = load_manifest(data)?;
    check_hash("dataset", &manifest.config_hash, cfg, allow)?;
    let scenes = SceneFile::load(&data.join(SCENES))?.scenes;
    let samples = read_samples(&data.join(split))?;
    Ok(build_prompts(&scenes, &samples, &cfg.kinematics, &cfg.noise, cfg.policy.grid)?)
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<(Checkpoint, PolicyParams)> {
    let ck = Checkpoint::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if ck.policy != cfg.policy {
        return Err(usage(format!(
            "checkpoint {} has policy shape {:?} but the config asks for {:?}",
            path.display(),
            ck.policy,
            cfg.policy
        )));
    }
    let params = ck.to_params().map_err(classify)?;
    Ok((ck, params))
}

fn sft(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>, allow: bool) -> Result<()> {
    let prompts = load_prompts(cfg, data, TRAIN, allow)?;
    let (start, start_step) = match resume {
        Some(p) => {
            let (ck, params) = load_checkpoint(cfg, p)?;
            let step = if ck.phase == Phase::Sft { ck.step } else { 0 };
            (params, step)
        }
        None => (PolicyParams::init(cfg.policy, cfg.init_seed()), 0),
    };
    let scfg = cfg.sft_config();
    info!(
        "sft: {} prompts, {} steps, {} parameters",
        prompts.len(),
        scfg.total_steps(prompts.len()),
        start.len()
    );
    let outcome = sft_train(&start, &prompts, &scfg, start_step).map_err(classify)?;
    Checkpoint::new(Phase::Sft, cfg.hash(), outcome.step, &outcome.params).save(out)?;
    write_jsonl(&log_path(out), &outcome.log)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!("sft: nll {:.4} -> {:.4} over {} steps", first.nll, last.nll, outcome.log.len());
    } else {
        println!("sft: no steps taken");
    }
    Ok(())
}

fn grpo(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    steps: Option<u64>,
    allow_cold_start: bool,
    allow: bool,
) -> Result<()> {
    let (ck, start) = load_checkpoint(cfg, checkpoint)?;
    check_hash("checkpoint", &ck.config_hash, cfg, allow)?;
    if ck.phase == Phase::Init && !allow_cold_start {
        return Err(classify(Error::ColdStart));
    }
    let steps = steps.unwrap_or(cfg.grpo_steps);
    if steps == 0 {
        fs::copy(checkpoint, out).with_context(|| format!("copying {}", checkpoint.display()))?;
        write_jsonl::<()>(&log_path(out), &[])?;
        println!("grpo: zero steps, checkpoint copied unchanged");
        return Ok(());
    }
    let prompts = load_prompts(cfg, data, TRAIN, allow)?;
    let gcfg = cfg.grpo_config();
    info!("grpo: {} prompts, {steps} steps, group size {}", prompts.len(), gcfg.group_size);
    let outcome = grpo_train(
        &start,
        ck.phase,
        &prompts,
        &gcfg,
        steps,
        cfg.kinematics.image_size,
        allow_cold_start,
    )
    .map_err(classify)?;
    Checkpoint::new(Phase::Dft, cfg.hash(), steps, &outcome.params).save(out)?;
    write_jsonl(&log_path(out), &outcome.log)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "grpo: mean reward {:.4} -> {:.4} over {} steps",
            first.mean_reward,
            last.mean_reward,
            outcome.log.len()
        );
    }
    Ok(())
}

fn controller(cfg: &RunConfig, spec: &str, allow: bool) -> Result<Box<dyn Controller>> {
    Ok(match spec {
        "oracle" => Box::new(OracleController),
        "stop" => Box::new(AlwaysStop),
        "random" => Box::new(RandomController {
            seed: cfg.derived_seed(0xA11),
        }),
        path => {
            let (ck, params) = load_checkpoint(cfg, Path::new(path))?;
            check_hash("checkpoint", &ck.config_hash, cfg, allow)?;
            Box::new(PolicyController {
                params,
                instruction: cfg.eval.instruction,
            })
        }
    })
}

enum Suite {
    Single(Task),
    Cc,
    General(GeneralizationSuite),
}

fn suites(name: &str) -> Result<Vec<Suite>> {
    Ok(match name {
        "pp" => vec![Suite::Single(Task::Pp)],
        "ar" => vec![Suite::Single(Task::Ar)],
        "cc" => vec![Suite::Cc],
        "seq-chars" => vec![Suite::General(GeneralizationSuite::SeqChars)],
        "seq-fruit" => vec![Suite::General(GeneralizationSuite::SeqFruitAnalog)],
        "hole" => vec![Suite::General(GeneralizationSuite::HoleAnalog)],
        "all" => {
            let mut v = vec![Suite::Single(Task::Pp), Suite::Single(Task::Ar), Suite::Cc];
            v.extend(GeneralizationSuite::ALL.map(Suite::General));
            v
        }
        other => bail!(UsageError(format!(
            "unknown suite `{other}` (expected pp, ar, cc, seq-chars, seq-fruit, hole or all)"
        ))),
    })
}

fn eval(cfg: &RunConfig, spec: &str, suite: &str, out: &Path, allow: bool) -> Result<()> {
    let suites = suites(suite)?;
    let ctrl = controller(cfg, spec, allow)?;
    let ctx = cfg.eval_context();
    let e = &cfg.eval;
    let mut reports: Vec<EvalReport> = Vec::new();
    for s in suites {
        let r = match s {
            Suite::Single(task) => eval_pp_ar(ctrl.as_ref(), task, e.pp_ar_trials, e.pp_ar_budget, &ctx),
            Suite::Cc => eval_cc(ctrl.as_ref(), e.cc_trials, e.cc_budget, e.cc_markers, &ctx),
            Suite::General(g) => eval_generalization(ctrl.as_ref(), g, e.general_trials, e.general_budget, &ctx),
        }
        .map_err(classify)?;
        reports.push(r);
    }
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &reports)?;
    let table = format_table(&reports);
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct TraceFile<'a> {
    config_hash: String,
    controller: String,
    episode: &'a EpisodeResult,
}

#[allow(clippy::too_many_arguments)]
fn rollout_cmd(
    cfg: &RunConfig,
    spec: &str,
    scenes: &Path,
    scene_id: Option<u64>,
    budget: Option<usize>,
    out: &Path,
    dump_frames: bool,
    allow: bool,
) -> Result<()> {
    let ctrl = controller(cfg, spec, allow)?;
    let file = SceneFile::load(scenes).map_err(|e| anyhow!("{}: {e}", scenes.display()))?;
    let selected: Vec<_> = file
        .scenes
        .iter()
        .filter(|s| scene_id.is_none_or(|id| s.id == id))
        .collect();
    if selected.is_empty() {
        return Err(usage("no scene matches the selection"));
    }
    let ctx = cfg.eval_context();
    fs::create_dir_all(out)?;
    if dump_frames {
        fs::create_dir_all(out.join("frames"))?;
    }
    for scene in selected {
        let b = budget.unwrap_or(match scene.task {
            Task::Pp | Task::Ar => cfg.eval.pp_ar_budget,
            Task::Cc => cfg.eval.cc_budget,
            Task::GeneralSeq => cfg.eval.general_budget,
        });
        let ep = rollout(ctrl.as_ref(), scene, b, &ctx).map_err(classify)?;
        write_json(
            &out.join(format!("trace_{}.json", scene.id)),
            &TraceFile {
                config_hash: ctx.config_hash.clone(),
                controller: ctrl.name(),
                episode: &ep,
            },
        )?;
        if dump_frames {
            for t in &ep.trace {
                let frame = render(scene, t.theta, &cfg.kinematics, &cfg.noise, frame_seed(scene, t.step))?;
                frame.save_pgm(&out.join("frames").join(format!("scene_{}_step_{:03}.pgm", scene.id, t.step)))?;
            }
        }
        println!(
            "scene {}: {} steps, initial {:.1}px, final {:.1}px, min {:.1}px, visited {}/{}{}",
            scene.id,
            ep.steps_taken,
            ep.initial_distance,
            ep.final_distance,
            ep.min_distance,
            ep.visited.len(),
            ep.target_count,
            if ep.stop_issued { ", stopped" } else { "" }
        );
    }
    Ok(())
}
