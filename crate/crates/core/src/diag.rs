//! Measurement tools for trained models: amplification sweeps, stream
//! ablations, head specialization and routing export.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::EvalSet;
use crate::error::{Error, Result};
use crate::mixing::{write_routing_csv, MixingLinear, MixingStrategy};
use crate::model::{AblationMode, AblationSpec, ForwardOptions, Model, StreamTarget};
use crate::real::Real;
use crate::report::{fmt_sig, write_text, Provenance};
use crate::tensor::Tensor;


/// Default amplification grid.
pub const DEFAULT_ALPHAS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Mean next-token cross-entropy over every counted target of the set.
pub fn eval_loss<F: Real>(model: &Model<F>, set: &EvalSet, opts: &ForwardOptions) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Usage("evaluation set has no targets".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for b in set.batches() {
        let n = b.target_count();
        if n == 0 {
            continue;
        }
        total += model.eval_batch(b, opts)?.as_f64() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub alpha: f64,
    pub loss: f64,
}

/// Trapezoidal area under `loss(alpha)` with raw alpha on the x-axis.
///
/// The integrand is taken relative to the first loss and the rectangle
/// added back afterwards, so a flat curve integrates to exactly
/// `(α_max − α_min)·c`.
pub fn auc(alphas: &[f64], losses: &[f64]) -> Result<f64> {
    if alphas.len() != losses.len() || alphas.len() < 2 {
        return Err(Error::Usage("area under the curve needs at least two (alpha, loss) points".into()));
    }
    if alphas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Usage(format!("alphas must be strictly ascending, got {alphas:?}")));
    }
    let base = losses[0];
    let excess: f64 = (0..alphas.len() - 1)
        .map(|i| (alphas[i + 1] - alphas[i]) * ((losses[i] + losses[i + 1]) / 2.0 - base))
        .sum();
    Ok((alphas[alphas.len() - 1] - alphas[0]) * base + excess)
}

/// Evaluates the set once per alpha. The AUC is `None` for a single point.
pub fn amplification_sweep<F: Real>(
    model: &Model<F>,
    set: &EvalSet,
    alphas: &[f64],
) -> Result<(Vec<SweepRecord>, Option<f64>)> {
    if alphas.is_empty() {
        return Err(Error::Usage("empty alpha grid".into()));
    }
    let mut records = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let loss = eval_loss(model, set, &ForwardOptions { alpha, ..Default::default() })?;
        records.push(SweepRecord { alpha, loss });
    }
    let area = if alphas.len() >= 2 {
        let losses: Vec<f64> = records.iter().map(|r| r.loss).collect();
        Some(auc(alphas, &losses)?)
    } else {
        None
    };
    Ok((records, area))
}

/// Mean pairwise cosine distance between head patterns, over ordered pairs
/// `i ≠ j`.
pub fn hss(patterns: &[Vec<f64>]) -> Result<f64> {
    let h = patterns.len();
    if h < 2 {
        return Err(Error::Usage(format!("specialization needs at least two heads, got {h}")));
    }
    let len = patterns[0].len();
    if patterns.iter().any(|p| p.len() != len) {
        return Err(Error::Dimension("head patterns differ in length".into()));
    }
    let norms: Vec<f64> = patterns.iter().map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Computation(format!("attention pattern of head {i} has zero norm")));
    }
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..h {
            if i != j {
                let dot: f64 = patterns[i].iter().zip(&patterns[j]).map(|(a, b)| a * b).sum();
                total += 1.0 - dot / (norms[i] * norms[j]);
            }
        }
    }
    Ok(total / (h * (h - 1)) as f64)
}

/// Mean Shannon entropy (nats) of each head's attention rows over their
/// causal support, for weights `[B, H, T, T]`.
pub fn attention_entropy<F: Real>(weights: &Tensor<F>) -> Result<Vec<f64>> {
    let s = weights.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Dimension(format!("expected [B, H, T, T] weights, got {s:?}")));
    }
    let (b, h, t) = (s[0], s[1], s[2]);
    let data = weights.data();
    let mut out = vec![0.0; h];
    for (head, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for bi in 0..b {
            let base = (bi * h + head) * t * t;
            for i in 0..t {
                let row = &data[base + i * t..base + i * t + i + 1];
                acc -= row
                    .iter()
                    .map(|p| p.as_f64())
                    .filter(|&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
            }
        }
        *slot = acc / (b * t) as f64;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSpecialization {
    pub layer: usize,
    pub hss: f64,
    /// Mean attention entropy per head.
    pub entropy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpecializationReport {
    pub layers: Vec<LayerSpecialization>,
    pub mean_hss: f64,
}

/// Per-layer HSS of batch-averaged `[T, T]` patterns and per-head entropy.
pub fn specialization<F: Real>(model: &Model<F>, set: &EvalSet) -> Result<SpecializationReport> {
    let c = model.config();
    let (n_layers, h, t) = (c.n_layers, c.n_heads, set.seq());
    if set.batches().is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut sums = vec![vec![vec![0.0; t * t]; h]; n_layers];
    let mut entropy = vec![vec![0.0; h]; n_layers];
    let mut rows = 0usize;
    let opts = ForwardOptions { trace: true, ..Default::default() };
    for batch in set.batches() {
        let (_, trace) = model.forward(&batch.inputs, batch.batch, batch.seq, &opts)?;
        let trace = trace.expect("trace requested");
        for (l, layer) in trace.layers.iter().enumerate() {
            let w = layer.attn_weights.data();
            for bi in 0..batch.batch {
                for head in 0..h {
                    let off = (bi * h + head) * t * t;
                    for (acc, x) in sums[l][head].iter_mut().zip(&w[off..off + t * t]) {
                        *acc += x.as_f64();
                    }
                }
            }
            for (e, v) in entropy[l].iter_mut().zip(attention_entropy(&layer.attn_weights)?) {
                *e += v * batch.batch as f64;
            }
        }
        rows += batch.batch;
    }
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let patterns: Vec<Vec<f64>> =
            sums[l].iter().map(|p| p.iter().map(|x| x / rows as f64).collect()).collect();
        let score = if h >= 2 { hss(&patterns)? } else { 0.0 };
        let ent = entropy[l].iter().map(|e| e / rows as f64).collect();
        layers.push(LayerSpecialization { layer: l, hss: score, entropy: ent });
    }
    let mean_hss = if n_layers == 0 { 0.0 } else { layers.iter().map(|l| l.hss).sum::<f64>() / n_layers as f64 };
    Ok(SpecializationReport { layers, mean_hss })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub condition: String,
    pub loss: f64,
    pub delta_pct: f64,
}

pub fn delta_pct(loss: f64, base: f64) -> f64 {
    (loss - base) / base * 100.0
}

/// Baseline plus the three stream corruptions, each evaluated at α = 1.
pub fn run_ablation_suite<F: Real>(model: &Model<F>, set: &EvalSet, seed: u64) -> Result<Vec<AblationRow>> {
    let base = eval_loss(model, set, &ForwardOptions::default())?;
    let mut rows = vec![AblationRow { condition: "baseline".into(), loss: base, delta_pct: 0.0 }];
    let specs = [
        AblationSpec::new(StreamTarget::Token, AblationMode::Zero, seed)?,
        AblationSpec::new(StreamTarget::Context, AblationMode::Zero, seed)?,
        AblationSpec::new(StreamTarget::Token, AblationMode::RandomVocab, seed)?,
    ];
    for spec in specs {
        let loss = eval_loss(model, set, &ForwardOptions { ablation: Some(spec), ..Default::default() })?;
        rows.push(AblationRow { condition: spec.label().into(), loss, delta_pct: delta_pct(loss, base) });
    }
    Ok(rows)
}

fn sites(model_block: &crate::model::Block) -> [(&'static str, &MixingLinear); 4] {
    [
        ("attn_v", &model_block.attn.v_mix),
        ("attn_o", &model_block.attn.o_mix),
        ("ffn_up", &model_block.ffn.up),
        ("ffn_down", &model_block.ffn.down),
    ]
}

/// Writes one routing CSV per Kronecker site as `layer{l}_{site}.csv`.
pub fn export_routing<F: Real>(model: &Model<F>, dir: &Path, prov: &Provenance) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (l, block) in model.blocks().iter().enumerate() {
        for (site, layer) in sites(block) {
            if layer.strategy != MixingStrategy::Kronecker {
                continue;
            }
            let path = dir.join(format!("layer{l}_{site}.csv"));
            let comment = format!("{} layer={l} site={site}", prov.comment_line());
            write_routing_csv(&path, &layer.export_kronecker(model.params())?, Some(&comment))?;
            written.push(path);
        }
    }
    if written.is_empty() {
        return Err(Error::Usage(format!(
            "signature {} has no Kronecker sites to export",
            model.config().mixing
        )));
    }
    Ok(written)
}

pub fn write_sweep(path: &Path, records: &[SweepRecord], prov: &Provenance) -> Result<()> {
    let mut out = format!("{}\nalpha,loss\n", prov.comment_line());
    for r in records {
        out.push_str(&format!("{},{}\n", fmt_sig(r.alpha, 9), fmt_sig(r.loss, 9)));
    }
    write_text(path, &out)
}

pub fn write_sweep_summary(path: &Path, records: &[SweepRecord], area: Option<f64>, prov: &Provenance) -> Result<()> {
    let summary = serde_json::json!({
        "signature": prov.signature,
        "mode": prov.mode,
        "checkpoint": prov.checkpoint,
        "records": records,
        "auc": area,
    });
    write_text(path, &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))
}

pub fn write_ablation(path: &Path, rows: &[AblationRow], prov: &Provenance) -> Result<()> {
    let mut out = format!("{}\ncondition,loss,delta_pct\n", prov.comment_line());
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.condition, fmt_sig(r.loss, 9), fmt_sig(r.delta_pct, 9)));
    }
    write_text(path, &out)
}

pub fn write_specialization(path: &Path, report: &SpecializationReport, prov: &Provenance) -> Result<()> {
    let mut out = format!("{} mean_hss={}\nlayer,head,entropy,layer_hss\n", prov.comment_line(), fmt_sig(report.mean_hss, 9));
    for l in &report.layers {
        for (h, e) in l.entropy.iter().enumerate() {
            out.push_str(&format!("{},{h},{},{}\n", l.layer, fmt_sig(*e, 9), fmt_sig(l.hss, 9)));
        }
    }
    write_text(path, &out)
}

/// Writes the attention weights of the first sequence of `ids` as one
/// `T × T` CSV per (layer, head): `attn_a{alpha}_l{layer}_h{head}.csv`.
pub fn dump_attention<F: Real>(
    model: &Model<F>,
    ids: &[usize],
    alpha: f64,
    dir: &Path,
    prov: &Provenance,
) -> Result<Vec<PathBuf>> {
    let t = ids.len();
    let opts = ForwardOptions { alpha, trace: true, ..Default::default() };
    let (_, trace) = model.forward(ids, 1, t, &opts)?;
    let trace = trace.expect("trace requested");
    let mut written = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        let h = layer.attn_weights.shape()[1];
        for head in 0..h {
            let mut out = format!("{} alpha={} layer={l} head={head}\nquery\\key", prov.comment_line(), fmt_sig(alpha, 9));
            for k in 0..t {
                out.push_str(&format!(",k{k}"));
            }
            out.push('\n');
            for q in 0..t {
                out.push_str(&format!("q{q}"));
                for k in 0..t {
                    out.push(',');
                    out.push_str(&fmt_sig(layer.attn_weights.at(&[0, head, q, k]).as_f64(), 9));
                }
                out.push('\n');
            }
            let path = dir.join(format!("attn_a{}_l{l}_h{head}.csv", fmt_sig(alpha, 9)));
            write_text(&path, &out)?;
            written.push(path);
        }
    }
    Ok(written)
}
