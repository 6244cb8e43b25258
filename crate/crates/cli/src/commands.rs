use std::path::{Path, PathBuf};
use std::time::Instant;

use dstf::data::{read_corpus, BpeVocab, EvalSet};
use dstf::diag::{
    amplification_sweep, dump_attention, eval_loss, export_routing, run_ablation_suite, specialization, write_ablation,
    write_specialization, write_sweep, write_sweep_summary,
};
use dstf::model::{Checkpoint, GenerateOptions};
use dstf::report::{file_hash, write_text, Provenance};
use dstf::train::{train_loop_with, TrainData};
use dstf::{Error, ForwardOptions, Model, Result, RunConfig};

use crate::{Command, EvalArgs, TrainArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BpeTrain { corpus, vocab_size, out } => bpe_train(&corpus, vocab_size, &out),
        Command::Train(args) => train(args),
        Command::Eval { eval, alpha } => eval_cmd(&eval, alpha),
        Command::SweepAlpha { eval, alphas, dump_attn } => sweep(&eval, &alphas, dump_attn),
        Command::Ablate { eval, seed } => ablate(&eval, seed),
        Command::ExportRouting { ckpt, out } => routing(&ckpt, &out),
        Command::Specialize { eval } => specialize(&eval),
        Command::Generate { ckpt, prompt, alpha, temp, n, seed, out } => {
            generate(&ckpt, &prompt, GenerateOptions { n, alpha, temperature: temp, seed }, out.as_deref())
        }
    }
}

fn bpe_train(corpus: &Path, vocab_size: usize, out: &Path) -> Result<()> {
    let text = read_corpus(corpus)?;
    let started = Instant::now();
    let vocab = BpeVocab::train(&text, vocab_size)?;
    vocab.save(out)?;
    let ids = vocab.encode(&text).len();
    println!(
        "{} merges, vocabulary {} -> {} ({:.2} bytes/token, {:.1}s)",
        vocab.merges().len(),
        vocab.len(),
        out.display(),
        text.len() as f64 / ids.max(1) as f64,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Splits text so roughly the last `fraction` of its bytes is held out,
/// moving the cut to a character boundary.
fn split_text(text: &str, fraction: f64) -> (&str, &str) {
    let mut cut = ((text.len() as f64) * (1.0 - fraction)).round() as usize;
    while !text.is_char_boundary(cut) {
        cut += 1;
    }
    text.split_at(cut)
}

fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(m) = &args.mixing {
        overrides.push(format!("model.mixing={m}"));
    }
    if let Some(m) = &args.mode {
        let mode: dstf::StreamMode = m.parse()?;
        overrides.push(format!("model.mode={mode}"));
    }
    if args.gated {
        overrides.push("model.gated=true".into());
    }
    if let Some(s) = &args.supervision {
        let schedule: dstf::model::SupervisionSchedule = s.parse()?;
        overrides.push("model.supervision.enabled=true".into());
        overrides.push(format!("model.supervision.schedule={}", serde_json::to_value(schedule).expect("enum")));
    }
    if let Some(l) = args.lambda {
        overrides.push(format!("model.supervision.lambda={l:?}"));
    }
    if let Some(s) = args.steps {
        overrides.push(format!("train.steps={s}"));
    }
    if let Some(seed) = args.seed {
        overrides.push(format!("model.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(out) = &args.out {
        overrides.push(format!("out_dir={}", toml_string(&out.to_string_lossy())));
    }
    overrides.extend(args.overrides.iter().cloned());
    RunConfig::load(&args.config, &overrides)
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string")
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = train_config(&args)?;
    let corpus_path = cfg
        .data
        .corpus
        .clone()
        .ok_or_else(|| Error::Config(format!("{}: data.corpus is not set", args.config.display())))?;
    let vocab = match &cfg.data.vocab {
        Some(p) => BpeVocab::load(p)?,
        None => BpeVocab::bytes_only(),
    };
    let text = read_corpus(&corpus_path)?;
    let out_dir = cfg.out_dir.clone();
    let (train_text, val_text) = match &cfg.data.val {
        Some(p) => (text.as_str(), Some(read_corpus(p)?)),
        None if cfg.data.val_fraction() > 0.0 => {
            let (a, b) = split_text(&text, cfg.data.val_fraction());
            let held_out = out_dir.join("val.txt");
            write_text(&held_out, b)?;
            println!("held out {} bytes of {} -> {}", b.len(), corpus_path.display(), held_out.display());
            (a, Some(b.to_string()))
        }
        None => (text.as_str(), None),
    };
    let train_ids = vocab.encode(train_text);
    let val_ids = val_text.as_deref().map(|t| vocab.encode(t));
    let data = TrainData::from_tokens(&cfg, train_ids, val_ids.as_deref())?;
    println!(
        "training {} mode={} params={} steps={} -> {}",
        cfg.model.mixing,
        cfg.model.mode,
        cfg.model.param_total()?,
        cfg.train.steps,
        out_dir.display()
    );
    let started = Instant::now();
    let every = cfg.train.eval_every.max(1);
    let total = cfg.train.steps;
    let outcome = train_loop_with(&cfg, &vocab, data, &out_dir, |s, val| {
        if s.step % every == 0 || s.step == total || s.step == 1 {
            let val = val.map(|v| format!(" val_loss={v:.4}")).unwrap_or_default();
            println!("step {:>6} loss={:.4} lr={:.3e} grad_norm={:.3}{val}", s.step, s.loss, s.lr, s.grad_norm);
        }
    })?;
    println!(
        "done in {:.1}s; final checkpoint {}{}",
        started.elapsed().as_secs_f64(),
        outcome.final_checkpoint.display(),
        outcome.final_val_loss.map(|v| format!(", val_loss={v}")).unwrap_or_default()
    );
    Ok(())
}

struct Loaded {
    model: Model<f32>,
    run: Option<RunConfig>,
    vocab: BpeVocab,
    prov: Provenance,
}

fn load(ckpt_path: &Path) -> Result<Loaded> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    let run = serde_json::from_value::<RunConfig>(ckpt.meta.run.clone()).ok();
    let vocab = if ckpt.meta.tokenizer.is_null() {
        BpeVocab::bytes_only()
    } else {
        serde_json::from_value(ckpt.meta.tokenizer.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: tokenizer: {e}", ckpt_path.display())))?
    };
    let c = model.config();
    let prov = Provenance { signature: c.mixing.to_string(), mode: c.mode.to_string(), checkpoint: file_hash(ckpt_path)? };
    Ok(Loaded { model, run, vocab, prov })
}

impl Loaded {
    /// Windows the evaluation text exactly as the training run windowed its
    /// validation split, unless overridden.
    fn eval_set(&self, args: &EvalArgs) -> Result<EvalSet> {
        let text = read_corpus(&args.data)?;
        let ids = self.vocab.encode(&text);
        let (seq, batch, cap) = match &self.run {
            Some(r) => (r.seq_len(), r.train.batch_size, r.train.eval_windows),
            None => (self.model.config().max_seq_len, 32, None),
        };
        let seq = args.seq_len.unwrap_or(seq);
        if seq > self.model.config().max_seq_len {
            return Err(Error::Config(format!(
                "--seq-len {seq} exceeds the model maximum {}",
                self.model.config().max_seq_len
            )));
        }
        EvalSet::new(&ids, seq, args.batch_size.unwrap_or(batch), args.max_windows.or(cap))
            .map_err(|e| match e {
                Error::Data(m) => Error::Data(format!("{}: {m}", args.data.display())),
                other => other,
            })
    }
}

fn out_dir(args: &EvalArgs) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| args.ckpt.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn eval_cmd(args: &EvalArgs, alpha: f64) -> Result<()> {
    let l = load(&args.ckpt)?;
    let set = l.eval_set(args)?;
    let loss = eval_loss(&l.model, &set, &ForwardOptions { alpha, ..Default::default() })?;
    let path = out_dir(args).join("eval.csv");
    write_text(&path, &format!("{}\nalpha,loss\n{alpha},{loss}\n", l.prov.comment_line()))?;
    println!("loss={loss} alpha={alpha}");
    Ok(())
}

fn sweep(args: &EvalArgs, alphas: &[f64], dump_attn: bool) -> Result<()> {
    let l = load(&args.ckpt)?;
    let set = l.eval_set(args)?;
    let (records, area) = amplification_sweep(&l.model, &set, alphas)?;
    let dir = out_dir(args);
    write_sweep(&dir.join("sweep.csv"), &records, &l.prov)?;
    write_sweep_summary(&dir.join("sweep.json"), &records, area, &l.prov)?;
    for r in &records {
        println!("alpha={:<5} loss={:.4}", r.alpha, r.loss);
    }
    if let Some(a) = area {
        println!("auc={a:.4}");
    }
    if dump_attn {
        let first = &set.batches()[0];
        let window = &first.inputs[..first.seq];
        for &alpha in alphas {
            dump_attention(&l.model, window, alpha, &dir.join("attn"), &l.prov)?;
        }
        println!("attention maps -> {}", dir.join("attn").display());
    }
    Ok(())
}

fn ablate(args: &EvalArgs, seed: u64) -> Result<()> {
    let l = load(&args.ckpt)?;
    let set = l.eval_set(args)?;
    let rows = run_ablation_suite(&l.model, &set, seed)?;
    write_ablation(&out_dir(args).join("ablation.csv"), &rows, &l.prov)?;
    for r in &rows {
        println!("{:<12} loss={:.4} delta={:+.1}%", r.condition, r.loss, r.delta_pct);
    }
    Ok(())
}

fn routing(ckpt: &Path, out: &Path) -> Result<()> {
    let l = load(ckpt)?;
    let files = export_routing(&l.model, out, &l.prov)?;
    println!("{} routing matrices -> {}", files.len(), out.display());
    Ok(())
}

fn specialize(args: &EvalArgs) -> Result<()> {
    let l = load(&args.ckpt)?;
    let set = l.eval_set(args)?;
    let report = specialization(&l.model, &set)?;
    let dir = out_dir(args);
    write_specialization(&dir.join("specialization.csv"), &report, &l.prov)?;
    for layer in &report.layers {
        let mean = layer.entropy.iter().sum::<f64>() / layer.entropy.len().max(1) as f64;
        println!("layer {} hss={:.3} mean_entropy={mean:.3}", layer.layer, layer.hss);
    }
    println!("mean hss={:.3}", report.mean_hss);
    Ok(())
}

fn generate(ckpt: &Path, prompt: &str, opts: GenerateOptions, out: Option<&Path>) -> Result<()> {
    let l = load(ckpt)?;
    let mut ids = l.vocab.encode(prompt);
    let max_t = l.model.config().max_seq_len;
    if ids.len() > max_t {
        ids.drain(..ids.len() - max_t);
    }
    let new = l.model.generate(&ids, &opts)?;
    let mut bytes = Vec::new();
    for id in new {
        match l.vocab.piece(id) {
            Ok(p) => bytes.extend_from_slice(p),
            Err(_) => bytes.extend_from_slice("\u{fffd}".as_bytes()),
        }
    }
    let text = format!("{prompt}{}", String::from_utf8_lossy(&bytes));
    if let Some(path) = out {
        write_text(path, &format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}
