use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use hdrr::config::RunConfig;
use hdrr::data::{load_manifest, synthesize, SynthOptions};
use hdrr::error::{Error, Result};
use hdrr::eval::evaluate;
use hdrr::model::{load_samples, predict, SampleInputs};
use hdrr::numeric::{merge_by_op, op_suite};
use hdrr::params::ModelParams;
use hdrr::training::{gradcheck_model, load_checkpoint, train_to_dir};

#[derive(Parser)]
#[command(name = "hdrr", version, about = "Temporal moment localization with hierarchical residual reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic manifest and feature files.
    Synth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Takes `t_units` and `d_v` from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and write `model.ckpt` and `metrics.jsonl`.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print R@m,IoU@n over a manifest as JSON.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        top_m: usize,
    },
    /// Print the top-m moments for one record.
    Localize {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record_id: String,
        #[arg(long, default_value_t = 1)]
        top_m: usize,
    },
    /// Write per-candidate scores for one record as CSV.
    Scores {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record_id: String,
        /// Directory for `scores_<id>.csv`; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every operation and the composed model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Randomized cases per operation.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

fn load_model(data: &DataArgs, checkpoint: &Path) -> Result<(RunConfig, ModelParams)> {
    let cfg = RunConfig::load(&data.config)?;
    let params = load_checkpoint(checkpoint)?;
    ModelParams::init(&cfg)?.check_layout(&params)?;
    Ok((cfg, params))
}

fn one_sample(data: &DataArgs, cfg: &RunConfig, id: &str) -> Result<SampleInputs> {
    let records = load_manifest(&data.manifest)?;
    let rec = records
        .into_iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::Usage(format!("no record with id {id} in {}", data.manifest.display())))?;
    Ok(load_samples(std::slice::from_ref(&rec), cfg)?.remove(0))
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { seed, n, out, config } => {
            let mut opts = SynthOptions::default();
            if let Some(path) = config {
                let cfg = RunConfig::load(&path)?;
                opts.t_units = cfg.t_units;
                opts.d_v = cfg.d_v;
                opts.max_len_units = opts.max_len_units.min(cfg.t_units);
                opts.min_len_units = opts.min_len_units.min(opts.max_len_units);
            }
            let manifest = synthesize(seed, n, &opts)?.write(&out)?;
            println!("{}", manifest.display());
        }
        Command::Train { data, out, seed } => {
            let mut cfg = RunConfig::load(&data.config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let art = train_to_dir(&cfg, &data.manifest, &out)?;
            println!("{}", art.checkpoint.display());
            println!("{}", art.metrics.display());
        }
        Command::Eval { data, checkpoint, top_m } => {
            let (cfg, params) = load_model(&data, &checkpoint)?;
            let samples = load_samples(&load_manifest(&data.manifest)?, &cfg)?;
            let report = evaluate(&params, &cfg, &samples, top_m)?;
            println!("{}", report.to_json());
        }
        Command::Localize { data, checkpoint, record_id, top_m } => {
            let (cfg, params) = load_model(&data, &checkpoint)?;
            let sample = one_sample(&data, &cfg, &record_id)?;
            let moments = predict(&params, &cfg, &sample)?.localize(top_m);
            let rows: Vec<_> = moments
                .iter()
                .enumerate()
                .map(|(rank, m)| {
                    json!({
                        "rank": rank + 1,
                        "k": m.k,
                        "score": m.score,
                        "start": m.seconds.0,
                        "end": m.seconds.1,
                    })
                })
                .collect();
            println!("{}", json!({ "id": record_id, "moments": rows }));
        }
        Command::Scores { data, checkpoint, record_id, out } => {
            let (cfg, params) = load_model(&data, &checkpoint)?;
            let sample = one_sample(&data, &cfg, &record_id)?;
            let set = predict(&params, &cfg, &sample)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    let path = dir.join(format!("scores_{record_id}.csv"));
                    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                    let mut w = BufWriter::new(file);
                    set.write_csv(&mut w)
                        .and_then(|_| w.flush())
                        .map_err(|e| Error::io(&path, e))?;
                    println!("{}", path.display());
                }
                None => set
                    .write_csv(io::stdout().lock())
                    .map_err(|e| Error::io("<stdout>", e))?,
            }
        }
        Command::Gradcheck { seed, cases } => {
            let mut ok = true;
            let mut reports = merge_by_op(&op_suite(seed, cases, 1e-4)?);
            reports.push(gradcheck_model(seed, 1e-5, 1e-3)?);
            for r in &reports {
                println!("{}", r.summary());
                ok &= r.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
