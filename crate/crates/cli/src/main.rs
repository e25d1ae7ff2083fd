use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use streamtpp_core::checkpoint::Checkpoint;
use streamtpp_core::event_store::{load_sequences, save_sequences, slice_tasks, Event};
use streamtpp_core::harness::{
    emit_report, load_predictions, metrics_from_predictions, predict_targets, run_stream_full, write_predictions,
    Scheme, StreamConfig, TaskMetrics,
};
use streamtpp_core::training::{grad_check, train_sequences, TrainConfig};
use streamtpp_core::{EncoderKind, EventSequence, ModelConfig, PromptMode, PromptTpp, TemporalBlock, TppError};

#[derive(Parser)]
#[command(name = "streamtpp", version, about = "Continual learning for temporal point processes on event streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured synthetic stream and write it as JSONL.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the streaming protocol for every configured scheme.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's scheme list; repeatable.
        #[arg(long)]
        scheme: Vec<String>,
    },
    /// Train one scheme's model on a single task and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long, default_value = "prompt_continual")]
        scheme: String,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-step predictions for every event after `--after` in a JSONL file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sampler settings are read from this stream config if given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        after: Option<f64>,
    },
    /// Recompute per-task metrics from a predictions CSV.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck {
        /// Model config JSON; defaults to a toy model with D = 8.
        #[arg(long)]
        model: Option<PathBuf>,
        /// JSONL data; the first sequence is used.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 16)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit nonzero when the worst relative error exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn read_config(path: &Path) -> Result<StreamConfig> {
    let text =
        fs::read_to_string(path).map_err(TppError::from).with_context(|| format!("reading {}", path.display()))?;
    let config: StreamConfig = serde_json::from_str(&text).map_err(TppError::from)?;
    config.validate()?;
    Ok(config)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn generate(config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let config = match config {
        Some(p) => read_config(&p)?,
        None => StreamConfig::default(),
    };
    let seqs = config.data.load::<f64>(config.num_tasks, config.seed)?;
    save_sequences(&out, &seqs)?;
    println!("{}", json!({ "sequences": seqs.len(), "events": seqs.iter().map(|s| s.len()).sum::<usize>() }));
    Ok(())
}

fn run(config: PathBuf, out: Option<PathBuf>, schemes: Vec<String>) -> Result<()> {
    let mut config = read_config(&config)?;
    if !schemes.is_empty() {
        config.schemes = schemes.iter().map(|s| s.parse()).collect::<Result<_, TppError>>()?;
        config.validate()?;
    }
    let dir =
        out.or_else(|| config.output_dir.clone().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("streamtpp-out"));
    fs::create_dir_all(&dir)?;
    let mut summary = Vec::new();
    for &scheme in &config.schemes {
        let run = run_stream_full::<f64>(&config, scheme)?;
        emit_report(&run.report, &dir)?;
        write_predictions(&run.predictions, dir.join(format!("{scheme}_predictions.csv")))?;
        let ck_dir = dir.join(format!("{scheme}_checkpoints"));
        fs::create_dir_all(&ck_dir)?;
        for (k, m) in run.checkpoints.iter().enumerate() {
            Checkpoint::capture(m, None).save(ck_dir.join(format!("task_{k}.json")))?;
        }
        for (k, log) in run.train_logs.iter().enumerate() {
            if let Some(log) = log {
                log.write_csv(ck_dir.join(format!("task_{k}_train_log.csv")))?;
            }
        }
        summary.push(json!({
            "scheme": scheme.name(),
            "avg_error_rate": run.report.avg_error_rate,
            "avg_time_rmse": run.report.avg_time_rmse,
            "mean_forgetting_error_rate": run.report.forgetting.as_ref().and_then(|f| f.mean_error_rate_drop),
            "rehearsal_reads": run.report.audit.rehearsal_reads,
        }));
        info!("{scheme} done");
    }
    println!("{}", serde_json::Value::Array(summary));
    Ok(())
}

fn train(config: PathBuf, task: usize, scheme: String, init: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let config = read_config(&config)?;
    let scheme: Scheme = scheme.parse()?;
    if task >= config.num_tasks {
        bail!(TppError::InvalidArgument(format!("task {task} out of range for {} tasks", config.num_tasks)));
    }
    let mut model = match init {
        Some(p) => Checkpoint::load(p)?.restore::<f64>()?,
        None => PromptTpp::new(scheme.model_config(&config.model)?, config.seed)?,
    };
    let seqs = config.data.load::<f64>(config.num_tasks, config.seed)?;
    let tasks = slice_tasks(&seqs, config.num_tasks, config.split)?;
    let tc = TrainConfig { seed: config.train.seed ^ config.seed, ..config.train.clone() };
    let log = train_sequences(&mut model, &tasks[task].train, &tasks[task].valid, &tc)?;
    Checkpoint::capture(&model, log.rng_state.as_ref()).save(&out)?;
    log.write_csv(out.with_extension("log.csv"))?;
    println!(
        "{}",
        json!({ "epochs": log.epochs.len(), "best_epoch": log.best_epoch, "best_valid_nll": log.best_valid_nll })
    );
    Ok(())
}

fn predict(
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    after: Option<f64>,
) -> Result<()> {
    let model: PromptTpp<f64> = Checkpoint::load(checkpoint)?.restore()?;
    let sampler = match config {
        Some(p) => read_config(&p)?.sampler,
        None => Default::default(),
    };
    let seqs: Vec<EventSequence<f64>> = load_sequences(&data, model.num_types())?;
    let after = after.unwrap_or(f64::NEG_INFINITY);
    let targets: Vec<_> = seqs
        .into_iter()
        .map(|s| {
            let first = s.events.iter().take_while(|e: &&Event<f64>| e.time <= after).count();
            (s, first)
        })
        .collect();
    let recs = predict_targets(&model, &targets, &sampler)?;
    write_predictions(&recs, &out)?;
    let m = metrics_from_predictions(&recs, 0);
    println!("{}", json!({ "targets": m.targets, "error_rate": m.error_rate, "time_rmse": m.time_rmse }));
    Ok(())
}

fn report(predictions: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let recs = load_predictions(&predictions)?;
    let mut tasks: Vec<usize> = recs.iter().map(|r| r.task).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let metrics: Vec<TaskMetrics> = tasks.iter().map(|&t| metrics_from_predictions(&recs, t)).collect();
    let mean = |f: fn(&TaskMetrics) -> Option<f64>| {
        let v: Vec<f64> = metrics.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let value = json!({
        "tasks": metrics,
        "avg_error_rate": mean(|m| m.error_rate),
        "avg_time_rmse": mean(|m| m.time_rmse),
    });
    match out {
        Some(p) => write_json(&p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        num_types: 2,
        type_dim: 4,
        time_dim: 4,
        te_scale_big: 8.0,
        te_scale_small: 2.0,
        encoder: EncoderKind::Attention,
        encoder_layers: 2,
        encoder_heads: 2,
        decoder_heads: 2,
        prompt_mode: PromptMode::PreT,
        temporal_block: TemporalBlock::Encoded,
        pool_size: 3,
        top_n: 2,
        prompt_len: 4,
    }
}

#[allow(clippy::too_many_arguments)]
fn gradcheck(
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    epsilon: f64,
    alpha: f64,
    mc_samples: usize,
    seed: u64,
    tolerance: Option<f64>,
) -> Result<()> {
    let cfg = match model {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(TppError::from)?,
        None => toy_model(),
    };
    let seq = match data {
        Some(p) => load_sequences::<f64>(p, cfg.num_types)?
            .into_iter()
            .next()
            .ok_or_else(|| TppError::InvalidArgument("no sequences in data".into()))?,
        None => EventSequence::new(
            "toy",
            (0.0, 3.0),
            vec![Event::new(1, 0.4), Event::new(2, 1.1), Event::new(1, 2.5)],
            cfg.num_types,
        )?,
    };
    let m = PromptTpp::<f64>::new(cfg, seed)?;
    let report = grad_check(&m, &seq, epsilon, mc_samples, alpha, seed)?;
    println!("{}", serde_json::to_string(&report)?);
    if let Some(tol) = tolerance {
        if report.max_rel_error.is_nan() || report.max_rel_error >= tol {
            bail!(TppError::Numerical(format!(
                "max relative error {} exceeds {tol} at {:?}",
                report.max_rel_error,
                report.worst.map(|w| w.param)
            )));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out } => generate(config, out),
        Command::Run { config, out, scheme } => run(config, out, scheme),
        Command::Train { config, task, scheme, init, out } => train(config, task, scheme, init, out),
        Command::Predict { checkpoint, data, out, config, after } => predict(checkpoint, data, out, config, after),
        Command::Report { predictions, out } => report(predictions, out),
        Command::Gradcheck { model, data, epsilon, alpha, mc_samples, seed, tolerance } => {
            gradcheck(model, data, epsilon, alpha, mc_samples, seed, tolerance)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<TppError>().map_or("cli", TppError::kind);
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", json!({ "error": kind, "message": message }));
            ExitCode::FAILURE
        }
    }
}
