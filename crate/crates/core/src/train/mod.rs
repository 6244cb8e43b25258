//! Optimization: schedule, clipping, AdamW and the training loop.

mod optim;
mod schedule;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub use optim::{clip_global_norm, global_norm, AdamW};
pub use schedule::Schedule;

use crate::config::RunConfig;
use crate::data::{Batch, BatchIterator, BpeVocab, EvalSet};
use crate::diag::eval_loss;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::params::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Model plus optimizer state; one call to [`Trainer::step`] is one update.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamW<f32>,
    pub schedule: Schedule,
    pub grad_clip: f64,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.train;
        Ok(Self {
            model: Model::new(cfg.model.clone())?,
            opt: AdamW::new(t.beta1, t.beta2, t.eps, t.weight_decay),
            schedule: Schedule { base: t.lr, floor: t.min_lr, warmup: t.warmup_steps, total: t.steps },
            grad_clip: t.grad_clip,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, batch: &Batch) -> Result<StepStats> {
        let (loss, mut grads) = {
            let g = Graph::new(self.model.params(), true);
            let loss = self.model.loss_graph(&g, batch)?;
            g.backward(loss)?;
            (g.value(loss).item() as f64, g.param_grads())
        };
        if !loss.is_finite() {
            return Err(Error::Computation(format!("loss became {loss} at step {}", self.step + 1)));
        }
        let grad_norm = global_norm(&grads);
        clip_global_norm(&mut grads, self.grad_clip);
        self.step += 1;
        let lr = self.schedule.lr_at(self.step);
        self.opt.step(self.model.params_mut(), &grads, lr);
        Ok(StepStats { step: self.step, loss, lr, grad_norm })
    }
}

/// Training and validation data for one run.
pub struct TrainData {
    pub train: BatchIterator,
    pub val: Option<EvalSet>,
}

impl TrainData {
    pub fn from_tokens(cfg: &RunConfig, train: Vec<usize>, val: Option<&[usize]>) -> Result<Self> {
        let seq = cfg.seq_len();
        let train = BatchIterator::new(train, seq, cfg.train.batch_size, cfg.train.seed)?;
        let val = match val {
            Some(v) => Some(EvalSet::new(v, seq, cfg.train.batch_size, cfg.train.eval_windows)?),
            None => None,
        };
        Ok(Self { train, val })
    }
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub history: Vec<StepStats>,
    pub final_val_loss: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Serialize)]
struct MetricLine {
    step: u64,
    loss: f64,
    lr: f64,
    grad_norm: f64,
    tokens_per_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_loss: Option<f64>,
}

fn write_line(out: &mut BufWriter<File>, path: &Path, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).expect("metrics serialize");
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs `cfg.train.steps` updates, writing `metrics.jsonl`, periodic
/// `ckpt_{step}.dstf` files and `final.dstf` into `out_dir`.
///
/// The metrics file starts with a `{"header": ...}` line holding the run
/// configuration, followed by one line per step. Steps where validation
/// runs (every `eval_every` steps and the last step) carry `val_loss`.
pub fn train_loop(cfg: &RunConfig, vocab: &BpeVocab, data: TrainData, out_dir: &Path) -> Result<TrainOutcome> {
    train_loop_with(cfg, vocab, data, out_dir, |_, _| {})
}

/// [`train_loop`] with a callback after every step, receiving the step
/// statistics and the validation loss when one was computed.
pub fn train_loop_with(
    cfg: &RunConfig,
    vocab: &BpeVocab,
    mut data: TrainData,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepStats, Option<f64>),
) -> Result<TrainOutcome> {
    if vocab.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} ids but model.vocab_size is {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = Trainer::new(cfg)?;
    let run_json = serde_json::to_value(cfg).expect("config serializes");
    let tok_json = serde_json::to_value(vocab).expect("vocab serializes");

    let metrics_path = out_dir.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    write_line(&mut metrics, &metrics_path, &serde_json::json!({ "header": run_json }))?;

    let total = cfg.train.steps;
    let tokens_per_step = (cfg.train.batch_size * cfg.seq_len()) as f64;
    let mut history = Vec::with_capacity(total as usize);
    let mut final_val = None;
    let final_path = out_dir.join("final.dstf");
    for step in 1..=total {
        let batch = data.train.next_batch();
        let started = Instant::now();
        let stats = trainer.step(&batch)?;
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        let last = step == total;
        let eval_now = last || (cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0);
        let val_loss = match (&data.val, eval_now) {
            (Some(v), true) => Some(eval_loss(&trainer.model, v, &ForwardOptions::default())?),
            _ => None,
        };
        if last {
            final_val = val_loss;
        }
        write_line(
            &mut metrics,
            &metrics_path,
            &MetricLine {
                step,
                loss: stats.loss,
                lr: stats.lr,
                grad_norm: stats.grad_norm,
                tokens_per_s: tokens_per_step / elapsed,
                val_loss,
            },
        )?;
        on_step(&stats, val_loss);
        history.push(stats);
        let periodic = cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0;
        if periodic || last {
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
            let path = if last { final_path.clone() } else { out_dir.join(format!("ckpt_{step:06}.dstf")) };
            trainer.model.to_checkpoint(step, run_json.clone(), tok_json.clone()).save(&path)?;
        }
    }
    if total == 0 {
        trainer.model.to_checkpoint(0, run_json, tok_json).save(&final_path)?;
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(TrainOutcome {
        model: trainer.model,
        history,
        final_val_loss: final_val,
        final_checkpoint: final_path,
        metrics: metrics_path,
    })
}
