//! Losses, optimizer, checkpoints and the training loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::data::{load_manifest, DatasetRecord, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::model::{forward, load_samples, SampleInputs};
use crate::numeric::{finite_diff_check, GradCheckReport, Graph, Tensor};
use crate::params::ModelParams;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use loss::{
    alignment_loss, alignment_loss_value, gt_units, regression_loss, regression_loss_value,
    targets, total_loss, total_loss_value, LossBreakdown, Targets, BCE_EPS,
};
pub use optim::OptimizerState;

/// Loss of one sample, with parameter gradients in registry order when
/// `with_grad` is set.
pub fn sample_loss(
    params: &ModelParams,
    cfg: &RunConfig,
    sample: &SampleInputs,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = forward(&mut g, &b, cfg, sample)?;
    let tg = targets(&out.candidates, sample.moment, sample.duration, sample.t_units())?;
    let aln = alignment_loss(&mut g, out.scores, &tg.ious)?;
    let best = out.candidates[tg.best];
    let reg = regression_loss(&mut g, out.d_start, out.d_end, &best, tg.best, tg.gt_units)?;
    let total = total_loss(&mut g, aln, reg, cfg.alpha)?;
    let breakdown = LossBreakdown {
        aln: g.value(aln).item(),
        reg: g.value(reg).item(),
        total: g.value(total).item(),
        best: tg.best,
    };
    if !with_grad {
        return Ok((breakdown, None));
    }
    let vars = b.vars().to_vec();
    let mut grads = g.backward(total)?;
    let grads = vars
        .iter()
        .map(|&v| grads.take(v).expect("parameter gradient"))
        .collect();
    Ok((breakdown, Some(grads)))
}

/// Mean losses over a set of samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanLoss {
    pub aln: f64,
    pub reg: f64,
    pub total: f64,
}

pub fn mean_loss(params: &ModelParams, cfg: &RunConfig, samples: &[SampleInputs]) -> Result<MeanLoss> {
    if samples.is_empty() {
        return Err(Error::Training("no samples".into()));
    }
    let mut acc = MeanLoss { aln: 0.0, reg: 0.0, total: 0.0 };
    for s in samples {
        let (l, _) = sample_loss(params, cfg, s, false)?;
        acc.aln += l.aln;
        acc.reg += l.reg;
        acc.total += l.total;
    }
    let n = samples.len() as f64;
    Ok(MeanLoss {
        aln: acc.aln / n,
        reg: acc.reg / n,
        total: acc.total / n,
    })
}

/// Number of leading records used for training; the last `floor(n/5)` are
/// held out.
pub fn train_split(n: usize) -> usize {
    n - n / 5
}

/// Worker threads for per-sample gradients, from `HDRR_THREADS` (default 1).
pub fn thread_count() -> usize {
    std::env::var("HDRR_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

type SampleResult = Result<(LossBreakdown, Option<Vec<Tensor>>)>;

/// Per-sample losses and gradients for `batch`, in batch order whatever the
/// thread count.
fn batch_gradients(
    params: &ModelParams,
    cfg: &RunConfig,
    samples: &[SampleInputs],
    batch: &[usize],
    threads: usize,
) -> Vec<SampleResult> {
    let threads = threads.min(batch.len()).max(1);
    if threads == 1 {
        return batch.iter().map(|&i| sample_loss(params, cfg, &samples[i], true)).collect();
    }
    let chunk = batch.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(chunk)
            .map(|ids| {
                scope.spawn(move || {
                    ids.iter()
                        .map(|&i| sample_loss(params, cfg, &samples[i], true))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: MeanLoss,
    /// Metrics on the held-out split; `None` when it is empty.
    pub heldout: Option<MetricReport>,
}

impl EpochLog {
    pub fn to_json(&self, thresholds: &[f64]) -> Value {
        let mut map = Map::new();
        map.insert("epoch".into(), Value::from(self.epoch));
        map.insert("l_aln".into(), Value::from(self.loss.aln));
        map.insert("l_reg".into(), Value::from(self.loss.reg));
        map.insert("l_total".into(), Value::from(self.loss.total));
        for &n in thresholds {
            let v = self.heldout.as_ref().and_then(|r| r.get(n));
            map.insert(MetricReport::key(1, n), v.map(Value::from).unwrap_or(Value::Null));
        }
        Value::Object(map)
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

/// Trains from `init` (or a fresh seeded initialization) on the leading
/// split of `samples`. `on_epoch` sees every log line as it is produced.
pub fn train(
    cfg: &RunConfig,
    samples: &[SampleInputs],
    init: Option<ModelParams>,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("dataset is empty".into()));
    }
    let mut params = match init {
        Some(p) => {
            ModelParams::init(cfg)?.check_layout(&p)?;
            p
        }
        None => ModelParams::init(cfg)?,
    };
    let n_train = train_split(samples.len());
    let (train_set, heldout) = samples.split_at(n_train);
    let mut opt = OptimizerState::adam(&params, cfg.learning_rate);
    let threads = thread_count();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut acc = MeanLoss { aln: 0.0, reg: 0.0, total: 0.0 };
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results = batch_gradients(&params, cfg, train_set, batch, threads);
            let mut sum: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, grads) = r?;
                if !l.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss in batch {b} of epoch {epoch}"
                    )));
                }
                acc.aln += l.aln;
                acc.reg += l.reg;
                acc.total += l.total;
                let grads = grads.expect("requested gradients");
                match &mut sum {
                    None => sum = Some(grads),
                    Some(s) => {
                        for (a, g) in s.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            opt.step(&mut params, &grads)?;
        }
        let n = n_train as f64;
        let loss = MeanLoss {
            aln: acc.aln / n,
            reg: acc.reg / n,
            total: acc.total / n,
        };
        let heldout = if heldout.is_empty() {
            None
        } else {
            Some(evaluate(&params, cfg, heldout, 1)?)
        };
        let line = EpochLog { epoch, loss, heldout };
        log::info!(
            "epoch {epoch}: l_total {:.6} l_aln {:.6} l_reg {:.6}",
            loss.total,
            loss.aln,
            loss.reg
        );
        on_epoch(&line)?;
        log.push(line);
    }
    Ok(TrainOutcome { params, log })
}

/// Files written by [`train_to_dir`].
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains on a manifest and writes `model.ckpt` and `metrics.jsonl` under
/// `out`.
pub fn train_to_dir(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<TrainArtifacts> {
    let records = load_manifest(manifest)?;
    let samples = load_samples(&records, cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let metrics = out.join("metrics.jsonl");
    let file = File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut writer = BufWriter::new(file);
    let outcome = train(cfg, &samples, None, |line| {
        writeln!(writer, "{}", line.to_json(&cfg.iou_thresholds)).map_err(|e| Error::io(&metrics, e))
    })?;
    writer.flush().map_err(|e| Error::io(&metrics, e))?;
    let checkpoint = out.join("model.ckpt");
    save_checkpoint(&checkpoint, &outcome.params)?;
    Ok(TrainArtifacts { checkpoint, metrics })
}

/// Configuration used by the composed-model gradient check.
pub fn gradcheck_config() -> RunConfig {
    RunConfig {
        l_max: 4,
        t_units: 6,
        d_w: 3,
        d_v: 3,
        d_s: 4,
        d_f: 8,
        depth: 2,
        heads: 2,
        filter_sizes: vec![2, 3],
        alpha: 1.0,
        ..RunConfig::charades()
    }
}

/// Finite-difference check of the total loss against every parameter of a
/// tiny model.
pub fn gradcheck_model(seed: u64, step: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = RunConfig { seed, ..gradcheck_config() };
    let base = ModelParams::init(&cfg)?;
    let rec = DatasetRecord {
        id: "gradcheck".into(),
        feature_path: PathBuf::new(),
        duration_seconds: 9.0,
        query_tokens: ["a", "woman", "holding", "book"].iter().map(|s| s.to_string()).collect(),
        action_mask: vec![false, false, true, false],
        object_mask: vec![false, true, false, true],
        moment: (2.5, 6.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats: Vec<f64> = (0..cfg.t_units * cfg.d_v)
        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
        .collect();
    let features = Tensor::matrix(cfg.t_units, cfg.d_v, feats)?;
    let sample = SampleInputs::new(&rec, features, &EmbeddingTable::hashed(cfg.d_w, seed), &cfg)?;

    let flat = base.flatten();
    let mut work = base.clone();
    // Only the base point needs the analytic gradient.
    let mut first = true;
    finite_diff_check(
        "full model",
        |x: &[f64]| {
            work.assign_flat(x)?;
            let (l, grads) = sample_loss(&work, &cfg, &sample, first)?;
            first = false;
            let g: Vec<f64> = grads
                .map(|g| g.iter().flat_map(|t| t.data().iter().copied()).collect())
                .unwrap_or_default();
            Ok((l.total, g))
        },
        &flat,
        step,
        tol,
    )
}
