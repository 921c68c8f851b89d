use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::{sgd_step, SgdState};
use crate::backbone::{build_network, network_forward, ForwardOptions, ModelParams, NetworkConfig, NUM_GRADES};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionMatrix, MetricsReport};
use crate::objective::loss_on_logits;
use crate::params::Forward;
use crate::tensor::argmax;

/// Generator stream for shuffling and augmentation; parameter init uses
/// per-name streams of the same seed.
const DATA_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_acc,val_mae,val_qwk";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.train_loss,
            self.val.accuracy,
            self.val.mae,
            self.val.qwk_or_nan()
        )
    }
}

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{EPOCH_LOG_HEADER}\n");
    for l in logs {
        let _ = writeln!(out, "{}", l.csv_row());
    }
    out
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `last.ckpt`, `best.ckpt` and `epochs.csv`.
    pub out_dir: Option<&'a Path>,
    /// Continue from this state up to the configured epoch count.
    pub resume: Option<Checkpoint>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Highest validation accuracy reached during this call, if any epoch
    /// improved on the starting best.
    pub best: Option<Checkpoint>,
    pub logs: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
    /// Softmax outputs, one row per sample.
    pub probabilities: Vec<[f64; NUM_GRADES]>,
}

/// Fresh training state for `config`, drawing a seed if none is set.
pub fn initial_checkpoint(config: &RunConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut config = config.clone();
    let seed = *config.train.seed.get_or_insert_with(|| {
        let s = rand::rng().random::<u64>();
        log::info!("no seed given; using {s}");
        s
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    Ok(Checkpoint {
        params: build_network(&config.model, seed)?,
        config,
        momentum: SgdState::new(),
        epoch: 0,
        rng,
        best_accuracy: -1.0,
        best_epoch: 0,
    })
}

fn check_labels(ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::input(format!("{what} split is empty")));
    }
    if let Some(&g) = ds.grades.iter().find(|&&g| g >= NUM_GRADES) {
        return Err(Error::input(format!("{what} split has grade {g}")));
    }
    Ok(())
}

/// Mini-batch SGD over `train`, validating on `val` after every epoch.
///
/// With a zero learning rate nothing is updated, batch-norm running
/// statistics included, so the model is genuinely frozen.
pub fn train(config: &RunConfig, train: &Dataset, val: &Dataset, opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    check_labels(train, "train")?;
    check_labels(val, "val")?;
    let TrainOptions {
        out_dir,
        resume,
        mut on_epoch,
    } = opts;
    let mut state = match resume {
        Some(ck) => {
            ck.ensure_compatible(&config.model)?;
            if config.train.seed.is_some() && config.train.seed != ck.config.train.seed {
                return Err(Error::config(format!(
                    "resume seed {:?} differs from the checkpoint's {:?}",
                    config.train.seed, ck.config.train.seed
                )));
            }
            let seed = ck.config.train.seed;
            Checkpoint {
                config: RunConfig {
                    train: super::config::TrainConfig {
                        seed,
                        ..config.train.clone()
                    },
                    ..config.clone()
                },
                ..ck
            }
        }
        None => initial_checkpoint(config)?,
    };
    let cfg = state.config.clone();
    let t = &cfg.train;
    let model = &cfg.model;
    let frozen = t.learning_rate == 0.0;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut logs = Vec::new();
    let mut best = None;
    for epoch in state.epoch as usize + 1..=t.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let aug = cfg.augment.enabled.then_some((&cfg.augment, &mut state.rng));
            let (x, y) = train.batch::<f32, _>(chunk, model.in_channels, aug)?;
            let mut fw = Forward::new(&state.params, true);
            let xv = fw.graph.constant(x);
            let logits = network_forward(&mut fw, model, xv, ForwardOptions::train())?;
            let loss = loss_on_logits(&mut fw.graph, logits, &y, cfg.loss.kind, &cfg.loss.penalty)?;
            let value = fw.graph.value(loss).data()[0] as f64;
            if !value.is_finite() {
                let names: Vec<&str> = chunk.iter().map(|&i| train.names[i].as_str()).collect();
                return Err(Error::NonFinite(format!(
                    "epoch {epoch} batch {b}: loss {value}; grades {y:?}; samples {names:?}"
                )));
            }
            loss_sum += value * chunk.len() as f64;
            if frozen {
                continue;
            }
            fw.graph.backward(loss)?;
            let grads = fw.param_grads();
            let moments = fw.take_moments();
            drop(fw);
            sgd_step(&mut state.params, &grads, &mut state.momentum, t.learning_rate, t.momentum)?;
            state.params.apply_moments(&moments, t.bn_momentum)?;
        }
        state.epoch = epoch as u64;

        let eval = evaluate(model, &state.params, val, t.batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val: eval.report,
        };
        log::info!("epoch {epoch}: loss {:.4} val {}", log.train_loss, log.val);
        if log.val.accuracy > state.best_accuracy {
            state.best_accuracy = log.val.accuracy;
            state.best_epoch = epoch as u64;
            best = Some(state.clone());
            if let Some(dir) = out_dir {
                state.save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = out_dir {
            let last_epoch = epoch == t.epochs;
            if last_epoch || (t.checkpoint_every > 0 && epoch % t.checkpoint_every == 0) {
                state.save(&dir.join("last.ckpt"))?;
            }
            append_log(&dir.join("epochs.csv"), &log)?;
        }
        if let Some(cb) = on_epoch.as_mut() {
            cb(&log);
        }
        logs.push(log);
    }
    Ok(TrainOutcome {
        last: state,
        best,
        logs,
    })
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(EPOCH_LOG_HEADER);
        text.push('\n');
    }
    text.push_str(&log.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Eval-mode predictions over `ds`; parameters are not modified.
pub fn evaluate(model: &NetworkConfig, params: &ModelParams<f32>, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    check_labels(ds, "evaluation")?;
    let mut predictions = Vec::with_capacity(ds.len());
    let mut probabilities = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = ds.batch::<f32, ChaCha8Rng>(chunk, model.in_channels, None)?;
        let mut fw = Forward::new(params, false).frozen();
        let xv = fw.graph.constant(x);
        let logits = network_forward(&mut fw, model, xv, ForwardOptions::eval())?;
        for row in fw.graph.value(logits).data().chunks(NUM_GRADES) {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let p = crate::autodiff::softmax_row(&row);
            predictions.push(argmax(&row));
            probabilities.push(std::array::from_fn(|k| p[k]));
        }
    }
    let cm = confusion(&ds.grades, &predictions)?;
    Ok(Evaluation {
        report: MetricsReport::from_confusion(&cm)?,
        confusion: cm,
        predictions,
        probabilities,
    })
}

pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &Dataset) -> Result<Evaluation> {
    evaluate(&ck.config.model, &ck.params, ds, ck.config.train.batch_size)
}

/// Sizes the global worker pool from an `OSTEO_THREADS`-style value:
/// `0` means one thread (deterministic mode), `n` means `n`, absent keeps
/// the default. Has no effect once the pool exists.
pub fn init_threads(setting: Option<&str>) -> Result<()> {
    let Some(text) = setting else { return Ok(()) };
    let n: usize = text
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("thread count `{text}` is not a number")))?;
    let threads = n.max(1);
    if rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_err() {
        log::debug!("worker pool already initialized; keeping it");
    }
    Ok(())
}
