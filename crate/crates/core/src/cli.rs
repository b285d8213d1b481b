//! Command-line entry point wiring dataset generation, training, feature
//! ablation, evaluation, benchmarking, and the end-to-end reproduction
//! protocol.

use crate::bench::{bench_feedforward, bench_recurrent, BenchConfig, BenchReport};
use crate::data::{Episode, FeatureGroup};
use crate::error::{Error, Result};
use crate::evaluator::{
    self, grad_cam, write_cam_pgm, write_cam_svg, write_per_axis_csv, write_table_csv, Estimator,
    EstimatorRow,
};
use crate::imgproc::{PipeSpec, SpaceTimeSpec};
use crate::nets::{Network, Variant};
use crate::physics::PhysicsBaseline;
use crate::sim::{generate_dataset, load_split, ChainParams, DatasetPreset};
use crate::trainer::{self, preprocess_clip, TrainConfig};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_DATA: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "tactisense",
    version,
    about = "Vision + robot-state force estimation bench"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Override the preset's clip length.
        #[arg(long)]
        clip_seconds: Option<f64>,
    },
    /// Train one estimator variant.
    Train {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Feature-removal study: none, kin, or force.
        #[arg(long, default_value = "none")]
        ablate: String,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Keep the backbone's stem convolution at its initialization.
        #[arg(long, default_value_t = false)]
        freeze_stem: bool,
    },
    /// Train a state-consuming variant with a feature group removed.
    Ablate {
        #[arg(long)]
        variant: String,
        /// kin or force.
        #[arg(long)]
        group: String,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run on the test splits.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Drop ticks whose ground-truth magnitude exceeds this many newtons.
        #[arg(long)]
        exclude_above_newtons: Option<f64>,
    },
    /// Measure end-to-end inference latency.
    Bench {
        #[arg(long)]
        run: PathBuf,
        /// vs or rnn.
        #[arg(long)]
        pipeline: String,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = false)]
        carry_state: bool,
    },
    /// Write a saliency map for one frame of a clip.
    Gradcam {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "test_seen")]
        split: String,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 80)]
        tick: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge evaluation reports from several runs into one table.
    Report {
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate data, train every method, evaluate, and benchmark.
    Reproduce {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Skip the (non-deterministic) latency stage.
        #[arg(long, default_value_t = false)]
        skip_bench: bool,
    },
}

fn env_seed() -> u64 {
    std::env::var("TACTISENSE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Data-loading parallelism cap; the pipeline is sequential today, so the
/// value is recorded in run configs and clamped to what is implemented.
fn env_threads() -> usize {
    std::env::var("TACTISENSE_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1)
}

pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(Error::Config(msg)) if msg.starts_with("data directory") => {
            eprintln!("error: {msg}");
            EXIT_MISSING_DATA
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn require_data(arg: &DataArg) -> Result<PathBuf> {
    let Some(dir) = &arg.data else {
        return Err(Error::Config(
            "data directory missing: pass --data DIR".into(),
        ));
    };
    if !dir.join("manifest.json").is_file() {
        return Err(Error::Config(format!(
            "data directory {} has no manifest.json",
            dir.display()
        )));
    }
    Ok(dir.clone())
}

fn parse_ablate(s: &str) -> Result<Option<FeatureGroup>> {
    match s {
        "none" => Ok(None),
        "kin" => Ok(Some(FeatureGroup::Kinematic)),
        "force" => Ok(Some(FeatureGroup::Force)),
        other => Err(Error::Config(format!(
            "unknown feature group '{other}' (expected none, kin, or force)"
        ))),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything needed to replay a run, saved before any work starts.
#[derive(Debug, serde::Serialize)]
struct RunConfig<'a> {
    subcommand: &'a str,
    preset: &'a str,
    seed: u64,
    threads: usize,
    data: Option<&'a Path>,
    out: &'a Path,
    train: Option<&'a TrainConfig>,
    clip_seconds: Option<f64>,
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            out,
            seed,
            preset,
            clip_seconds,
        } => {
            let seed = seed.unwrap_or_else(env_seed);
            let mut p = DatasetPreset::by_name(&preset)?;
            if let Some(s) = clip_seconds {
                p.clip_seconds = s;
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(
                &out.join("config.json"),
                &RunConfig {
                    subcommand: "gen",
                    preset: &preset,
                    seed,
                    threads: env_threads(),
                    data: None,
                    out: &out,
                    train: None,
                    clip_seconds,
                },
            )?;
            generate_dataset(&out, &p, seed)?;
            println!("dataset written to {}", out.display());
            Ok(())
        }
        Cmd::Train {
            variant,
            preset,
            ablate,
            seed,
            data,
            out,
            freeze_stem,
        } => {
            let data = require_data(&data)?;
            let variant = Variant::parse(&variant)?;
            let p = DatasetPreset::by_name(&preset)?;
            let mut cfg = TrainConfig::for_preset(&p, variant);
            cfg.seed = seed.unwrap_or_else(env_seed);
            cfg.ablate = parse_ablate(&ablate)?;
            cfg.freeze_stem = freeze_stem;
            train_run(&data, &p, &cfg, &out)
        }
        Cmd::Ablate {
            variant,
            group,
            preset,
            seed,
            data,
            out,
        } => {
            let data = require_data(&data)?;
            let variant = Variant::parse(&variant)?;
            let group = parse_ablate(&group)?
                .ok_or_else(|| Error::Config("ablate needs --group kin or force".into()))?;
            let p = DatasetPreset::by_name(&preset)?;
            let mut cfg = TrainConfig::for_preset(&p, variant);
            cfg.seed = seed.unwrap_or_else(env_seed);
            cfg.ablate = Some(group);
            train_run(&data, &p, &cfg, &out)
        }
        Cmd::Eval {
            run,
            data,
            exclude_above_newtons,
        } => {
            let data = require_data(&data)?;
            let ckpt = run.join("checkpoint.bin");
            if !ckpt.is_file() {
                return Err(Error::Config(format!(
                    "{} has no checkpoint.bin",
                    run.display()
                )));
            }
            let name = std::fs::read_to_string(run.join("model.json"))
                .ok()
                .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                .and_then(|v| v["variant"].as_str().map(str::to_string))
                .unwrap_or_else(|| "model".into());
            let mut est = Estimator::from_checkpoint(&name, &ckpt)?;
            let preset = preset_of(&data)?;
            eval_estimators(
                &data,
                &preset,
                std::slice::from_mut(&mut est),
                exclude_above_newtons,
                &run,
            )
        }
        Cmd::Bench {
            run,
            pipeline,
            iters,
            carry_state,
        } => {
            let ckpt = run.join("checkpoint.bin");
            let (mut net, _) = Network::load(&ckpt)?;
            let cfg = BenchConfig {
                iterations: iters,
                carry_state,
                ..BenchConfig::default()
            };
            let pipe = PipeSpec::desk();
            let report = match pipeline.as_str() {
                "vs" => bench_feedforward(&mut net, &pipe, &cfg)?,
                "rnn" => bench_recurrent(&mut net, &pipe, &cfg)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown pipeline '{other}' (expected vs or rnn)"
                    )))
                }
            };
            write_bench_csv(&run.join("bench.csv"), &[report])?;
            println!("bench written to {}", run.join("bench.csv").display());
            Ok(())
        }
        Cmd::Gradcam {
            run,
            data,
            split,
            clip,
            tick,
            out,
        } => {
            let data = require_data(&data)?;
            let (mut net, extra) = Network::load(&run.join("checkpoint.bin"))?;
            let stats = stats_from_extra(&extra)?;
            let preset = preset_of(&data)?;
            let pipe = pipe_of(&preset);
            let eps = load_split(&data, &split)?;
            let ep = eps
                .get(clip)
                .ok_or_else(|| Error::Config(format!("split {split} has no clip {clip}")))?;
            let cd = preprocess_clip(ep, &stats, &pipe, true)?;
            let st = SpaceTimeSpec::default();
            if tick < st.required_history() || tick >= ep.len() {
                return Err(Error::Config(format!(
                    "tick {tick} outside the usable range of clip {clip}"
                )));
            }
            let stack = trainer::stack_tensor(&cd, tick, &st)?;
            let state = cd.states[tick];
            let needs_state = net.variant().uses_state();
            let cam = grad_cam(
                &mut net,
                &stack,
                if needs_state { Some(&state) } else { None },
            )?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_cam_pgm(&out.join(format!("gradcam_{clip}_{tick}.pgm")), &cam)?;
            write_cam_svg(&out.join(format!("gradcam_{clip}_{tick}.svg")), &cam, 8)?;
            Ok(())
        }
        Cmd::Report { runs, out } => {
            if runs.is_empty() {
                return Err(Error::Config(
                    "report needs at least one --runs entry".into(),
                ));
            }
            let mut merged = String::new();
            for (i, dir) in runs.iter().enumerate() {
                let path = dir.join("report.csv");
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                for (j, line) in text.lines().enumerate() {
                    if j == 0 && i > 0 {
                        continue; // keep one header
                    }
                    merged.push_str(line);
                    merged.push('\n');
                }
            }
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&out, merged).map_err(|e| Error::io(&out, e))?;
            Ok(())
        }
        Cmd::Reproduce {
            out,
            seed,
            preset,
            skip_bench,
        } => {
            let seed = seed.unwrap_or_else(env_seed);
            reproduce_paper_protocol(&out, seed, &preset, skip_bench)
        }
    }
}

fn pipe_of(preset: &DatasetPreset) -> PipeSpec {
    if preset.name == "paper" {
        PipeSpec::paper()
    } else {
        PipeSpec::desk()
    }
}

/// Recover the generation preset of a dataset from its manifest.
fn preset_of(data: &Path) -> Result<DatasetPreset> {
    let path = data.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad manifest: {e}")))?;
    serde_json::from_value(v["preset"].clone())
        .map_err(|e| Error::Config(format!("bad manifest preset: {e}")))
}

fn stats_from_extra(extra: &[(String, Vec<usize>, Vec<f64>)]) -> Result<crate::data::NormStats> {
    let find = |key: &str| -> Result<Vec<f64>> {
        extra
            .iter()
            .find(|(n, _, _)| n == key)
            .map(|(_, _, d)| d.clone())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks '{key}'")))
    };
    crate::data::NormStats::new(find("state_mean")?, find("state_std")?)
}

/// Shared training path for `train` and `ablate`: saves the run config
/// first, then the checkpoint, training curve, and model card.
fn train_run(data: &Path, preset: &DatasetPreset, cfg: &TrainConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("config.json"),
        &RunConfig {
            subcommand: "train",
            preset: &preset.name,
            seed: cfg.seed,
            threads: env_threads(),
            data: Some(data),
            out,
            train: Some(cfg),
            clip_seconds: Some(preset.clip_seconds),
        },
    )?;
    let ckpt = out.join("checkpoint.bin");
    let trained = trainer::train(data, preset, cfg, &ckpt)?;
    let mut log = String::from("epoch,loss,val_rmse\n");
    for (e, (loss, val)) in trained
        .report
        .train_loss
        .iter()
        .zip(&trained.report.val_rmse)
        .enumerate()
    {
        log.push_str(&format!("{e},{loss:.6},{val:.6}\n"));
    }
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    let mut net = trained.net;
    write_json(
        &out.join("model.json"),
        &serde_json::json!({
            "variant": cfg.variant.name(),
            "param_count": net.param_count(),
            "best_epoch": trained.report.best_epoch,
            "best_val_rmse": trained.report.best_val_rmse,
        }),
    )?;
    Ok(())
}

fn write_bench_csv(path: &Path, reports: &[BenchReport]) -> Result<()> {
    let mut s = String::from(
        "pipeline,carry_state,iterations,mean_ms,p50_ms,p99_ms,mean_hz,clock_resolution_ns,clock_unreliable,os,arch,logical_cpus\n",
    );
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.2},{},{},{},{},{}\n",
            r.pipeline,
            r.carry_state,
            r.iterations,
            r.stats.mean_ms,
            r.stats.p50_ms,
            r.stats.p99_ms,
            1e3 / r.stats.mean_ms,
            r.clock_resolution_ns,
            r.clock_unreliable,
            r.host.os,
            r.host.arch,
            r.host.logical_cpus
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Evaluate estimators over both test splits and write the report table,
/// per-axis breakdown, trajectory exports, and a saliency map for the
/// first vision estimator.
fn eval_estimators(
    data: &Path,
    preset: &DatasetPreset,
    estimators: &mut [Estimator],
    exclude_above: Option<f64>,
    out: &Path,
) -> Result<()> {
    let pipe = pipe_of(preset);
    let mut episodes = load_split(data, "test_seen")?;
    episodes.extend(load_split(data, "test_unseen")?);
    let mut rows: Vec<EstimatorRow> = Vec::new();
    for est in estimators.iter_mut() {
        eprintln!("[eval] {}", est.name());
        rows.push(evaluator::evaluate(est, &episodes, &pipe, exclude_above)?);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_table_csv(&out.join("report.csv"), &rows)?;
    write_per_axis_csv(&out.join("per_axis.csv"), &rows)?;

    // force-tracking export over the first seen-test clip
    let first = &episodes[0];
    for est in estimators.iter_mut() {
        let preds = est.predict(first, &pipe)?;
        evaluator::export_trajectory(
            &out.join(format!("traj_{}.csv", est.name())),
            first,
            &preds,
            6.0,
        )?;
    }
    for est in estimators.iter_mut() {
        let Estimator::Net { net, stats, .. } = est else {
            continue;
        };
        if matches!(net.variant(), Variant::V | Variant::Vs) {
            let cd = preprocess_clip(first, stats, &pipe, true)?;
            let st = SpaceTimeSpec::default();
            let tick = trainer::TRIM_FRONT;
            let stack = trainer::stack_tensor(&cd, tick, &st)?;
            let state = cd.states[tick];
            let needs_state = net.variant().uses_state();
            let name = net.variant().name().to_string();
            let cam = grad_cam(net, &stack, if needs_state { Some(&state) } else { None })?;
            write_cam_pgm(&out.join(format!("gradcam_{name}.pgm")), &cam)?;
            write_cam_svg(&out.join(format!("gradcam_{name}.svg")), &cam, 8)?;
        }
    }
    Ok(())
}

/// End-to-end protocol: dataset, the four networks, the physics fit,
/// evaluation, and (optionally) the latency benchmark. Finished stages
/// are detected by their artifacts and reused on retry.
pub fn reproduce_paper_protocol(
    out: &Path,
    seed: u64,
    preset_name: &str,
    skip_bench: bool,
) -> Result<()> {
    let preset = DatasetPreset::by_name(preset_name)?;
    let stage = |name: &str, err: Error| -> Error {
        Error::Config(format!("stage '{name}' failed: {err}"))
    };

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("config.json"),
        &RunConfig {
            subcommand: "reproduce",
            preset: preset_name,
            seed,
            threads: env_threads(),
            data: None,
            out,
            train: None,
            clip_seconds: Some(preset.clip_seconds),
        },
    )?;

    let data = out.join("dataset");
    if !data.join("manifest.json").is_file() {
        eprintln!("[reproduce] generating dataset");
        generate_dataset(&data, &preset, seed).map_err(|e| stage("gen", e))?;
    } else {
        eprintln!("[reproduce] reusing dataset");
    }

    for variant in Variant::ALL {
        let run = out.join("runs").join(variant.name());
        if run.join("checkpoint.bin").is_file() {
            eprintln!("[reproduce] reusing {} checkpoint", variant.name());
            continue;
        }
        eprintln!("[reproduce] training {}", variant.name());
        let mut cfg = TrainConfig::for_preset(&preset, variant);
        cfg.seed = seed;
        train_run(&data, &preset, &cfg, &run)
            .map_err(|e| stage(&format!("train-{}", variant.name()), e))?;
    }

    eprintln!("[reproduce] fitting physics baseline");
    let train_eps: Vec<Episode> = load_split(&data, "train").map_err(|e| stage("physics", e))?;
    let baseline = PhysicsBaseline::fit(ChainParams::default(), &train_eps, 1e-3)
        .map_err(|e| stage("physics", e))?;

    let mut estimators: Vec<Estimator> = Vec::new();
    for variant in Variant::ALL {
        let ckpt = out.join("runs").join(variant.name()).join("checkpoint.bin");
        estimators
            .push(Estimator::from_checkpoint(variant.name(), &ckpt).map_err(|e| stage("eval", e))?);
    }
    estimators.push(Estimator::Physics {
        name: "physics".into(),
        baseline,
    });
    eval_estimators(&data, &preset, &mut estimators, None, out).map_err(|e| stage("eval", e))?;

    if !skip_bench {
        eprintln!("[reproduce] benchmarking");
        let cfg = BenchConfig {
            iterations: 30,
            ..BenchConfig::default()
        };
        let mut reports = Vec::new();
        for est in estimators.iter_mut() {
            let Estimator::Net { net, .. } = est else {
                continue;
            };
            match net.variant() {
                Variant::Vs => {
                    reports.push(
                        bench_feedforward(net, &pipe_of(&preset), &cfg)
                            .map_err(|e| stage("bench", e))?,
                    );
                }
                Variant::Rnn => {
                    for carry in [false, true] {
                        let c = BenchConfig {
                            carry_state: carry,
                            ..cfg.clone()
                        };
                        reports.push(
                            bench_recurrent(net, &pipe_of(&preset), &c)
                                .map_err(|e| stage("bench", e))?,
                        );
                    }
                }
                _ => {}
            }
        }
        write_bench_csv(&out.join("bench.csv"), &reports).map_err(|e| stage("bench", e))?;
    }
    eprintln!("[reproduce] done: {}", out.join("report.csv").display());
    Ok(())
}
