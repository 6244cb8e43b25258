//! The full model: embeddings, `L` dual-stream blocks, final LayerNorm and
//! LM head, plus the per-layer supervision loss and a sampler.

mod census;
mod checkpoint;
mod config;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use census::CensusRow;
pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, StreamMode, Supervision, SupervisionSchedule};

use crate::attention::{AttentionLayer, ValueSource};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ffn::FfnLayer;
use crate::norm::ChannelLayerNorm;
use crate::params::{Graph, Init, ParamId, ParamKind, ParamStore, INIT_STD};
use crate::real::Real;
use crate::tensor::{NodeId, Tensor};

/// Which stream an ablation corrupts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum StreamTarget {
    Token,
    Context,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AblationMode {
    Zero,
    /// Replace the stream by embeddings of uniformly drawn token ids.
    RandomVocab,
}

/// A stream corruption applied at every layer boundary and before the
/// final norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationSpec {
    pub target: StreamTarget,
    pub mode: AblationMode,
    pub seed: u64,
}

impl AblationSpec {
    pub fn new(target: StreamTarget, mode: AblationMode, seed: u64) -> Result<Self> {
        if mode == AblationMode::RandomVocab && target != StreamTarget::Token {
            return Err(Error::Usage("random-vocab ablation applies to the token stream only".into()));
        }
        Ok(Self { target, mode, seed })
    }

    pub fn label(&self) -> &'static str {
        match (self.target, self.mode) {
            (StreamTarget::Token, AblationMode::Zero) => "x_t->0",
            (StreamTarget::Context, AblationMode::Zero) => "x_e->0",
            (StreamTarget::Token, AblationMode::RandomVocab) => "x_t->random",
            (StreamTarget::Context, AblationMode::RandomVocab) => "x_e->random",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub alpha: f64,
    pub ablation: Option<AblationSpec>,
    pub trace: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { alpha: 1.0, ablation: None, trace: false }
    }
}

/// Values recorded after one block.
#[derive(Clone, Debug)]
pub struct LayerTrace<F> {
    pub x_t: Rc<Tensor<F>>,
    pub x_e: Rc<Tensor<F>>,
    /// Scaled attention logits before masking, `[B, H, T, T]`.
    pub attn_logits: Rc<Tensor<F>>,
    pub attn_weights: Rc<Tensor<F>>,
    pub gates: Option<Rc<Tensor<F>>>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    /// `x_t⁽⁰⁾`: token plus position embeddings.
    pub embedding: Rc<Tensor<F>>,
    pub layers: Vec<LayerTrace<F>>,
}

/// Tape nodes from [`Model::forward_graph`].
pub struct GraphForward<F> {
    pub logits: NodeId,
    /// Logits of the combined stream after blocks `1..L-1`, when requested.
    pub layer_logits: Vec<NodeId>,
    pub trace: Option<ForwardTrace<F>>,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn: AttentionLayer,
    pub ffn: FfnLayer,
}

#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    config: ModelConfig,
    params: ParamStore<F>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_norm: ChannelLayerNorm,
    lm_head: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct GenerateOptions {
    pub n: usize,
    pub alpha: f64,
    /// Zero selects greedy decoding.
    pub temperature: f64,
    pub seed: u64,
}

impl<F: Real> Model<F> {
    /// Builds a freshly initialized model; parameter values depend only on
    /// `config.seed` and parameter names.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new(c.seed);
        let emb = Init::Normal(INIT_STD);
        let tok_emb = store.register("tok_emb.weight", &[c.vocab_size, c.d_model], ParamKind::Embedding, emb);
        let pos_emb = store.register("pos_emb.weight", &[c.max_seq_len, c.d_model], ParamKind::Embedding, emb);
        let m = c.mixing;
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let attn = AttentionLayer::new(
                &mut store,
                &format!("layers.{l}.attn"),
                c.d_model,
                c.n_heads,
                m.attn_v,
                m.attn_o,
                c.gated,
                c.mixing_bias,
            )?;
            let ffn = FfnLayer::new(
                &mut store,
                &format!("layers.{l}.ffn"),
                c.d_model,
                c.n_heads,
                c.d_ff,
                m.ffn_up,
                m.ffn_down,
                c.mixing_bias,
            )?;
            blocks.push(Block { attn, ffn });
        }
        let final_norm = ChannelLayerNorm::layer_norm(&mut store, "final_ln", c.d_model)?;
        let lm_head = (!c.tie_embeddings).then(|| {
            store.register("lm_head.weight", &[c.d_model, c.vocab_size], ParamKind::Dense, emb)
        });
        Ok(Self { config, params: store, tok_emb, pos_emb, blocks, final_norm, lm_head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Same model in another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            final_norm: self.final_norm.clone(),
            lm_head: self.lm_head,
        }
    }

    /// One row per allocated tensor.
    pub fn param_table(&self) -> Vec<CensusRow> {
        self.params
            .iter()
            .map(|(_, p)| CensusRow {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                count: p.value.len(),
                kind: p.kind.label(),
            })
            .collect()
    }

    fn embed(&self, g: &Graph<'_, F>, ids: &[usize], b: usize, t: usize) -> Result<NodeId> {
        let tok = g.embedding(g.param(self.tok_emb), ids, &[b, t])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = g.embedding(g.param(self.pos_emb), &positions, &[b, t])?;
        g.add(tok, pos)
    }

    fn head(&self, g: &Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let xf = self.final_norm.apply(g, x)?;
        let w = match self.lm_head {
            Some(w) => g.param(w),
            None => g.transpose_last(g.param(self.tok_emb))?,
        };
        g.linear(xf, w)
    }

    fn check_ids(&self, ids: &[usize], b: usize, t: usize) -> Result<()> {
        if b == 0 || t == 0 || ids.len() != b * t {
            return Err(Error::Data(format!("{} token ids do not form a [{b}, {t}] batch", ids.len())));
        }
        if t > self.config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {t} exceeds the model maximum {}",
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `supervise` also produces logits
    /// for the intermediate layers `1..L-1`.
    pub fn forward_graph(
        &self,
        g: &Graph<'_, F>,
        ids: &[usize],
        b: usize,
        t: usize,
        opts: &ForwardOptions,
        supervise: bool,
    ) -> Result<GraphForward<F>> {
        self.check_ids(ids, b, t)?;
        let c = &self.config;
        let alpha = F::lit(opts.alpha);
        let shape = [b, t, c.d_model];

        let x_t0 = self.embed(g, ids, b, t)?;
        let zeros = g.constant(Tensor::zeros(&shape));
        let replacement = match opts.ablation {
            None => None,
            Some(spec) => Some(match spec.mode {
                AblationMode::Zero => zeros,
                AblationMode::RandomVocab => {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                    let random: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..c.vocab_size)).collect();
                    self.embed(g, &random, b, t)?
                }
            }),
        };
        let ablate = |x_t: NodeId, x_e: NodeId| match (opts.ablation, replacement) {
            (Some(spec), Some(r)) => match spec.target {
                StreamTarget::Token => (r, x_e),
                StreamTarget::Context => (x_t, r),
            },
            _ => (x_t, x_e),
        };

        let values = match c.mode {
            StreamMode::SingleStream => ValueSource::Combined,
            _ => ValueSource::Token,
        };
        let (mut x_t, mut x_e) = (x_t0, zeros);
        let mut layers = Vec::new();
        let mut layer_logits = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            (x_t, x_e) = ablate(x_t, x_e);
            let a = block.attn.attend(g, x_t, x_e, alpha, values)?;
            match c.mode {
                StreamMode::SingleStream | StreamMode::TokenFactor => x_t = g.add(x_t, a.delta)?,
                StreamMode::FrozenTokenStream => x_e = g.add(x_e, a.delta)?,
            }
            let f = block.ffn.forward(g, x_t, x_e)?;
            x_e = g.add(x_e, f)?;
            if opts.trace {
                layers.push(LayerTrace {
                    x_t: g.value(x_t),
                    x_e: g.value(x_e),
                    attn_logits: g.value(a.logits),
                    attn_weights: g.value(a.weights),
                    gates: a.gates.map(|n| g.value(n)),
                });
            }
            if supervise && l + 1 < c.n_layers {
                layer_logits.push(self.head(g, g.add(x_t, x_e)?)?);
            }
        }
        (x_t, x_e) = ablate(x_t, x_e);
        let logits = self.head(g, g.add(x_t, x_e)?)?;
        let trace = opts.trace.then(|| ForwardTrace { embedding: g.value(x_t0), layers });
        Ok(GraphForward { logits, layer_logits, trace })
    }

    /// Inference forward pass; logits are `[B, T, V]`.
    pub fn forward(
        &self,
        ids: &[usize],
        b: usize,
        t: usize,
        opts: &ForwardOptions,
    ) -> Result<(Tensor<F>, Option<ForwardTrace<F>>)> {
        let g = Graph::new(&self.params, false);
        let out = self.forward_graph(&g, ids, b, t, opts, false)?;
        Ok(((*g.value(out.logits)).clone(), out.trace))
    }

    /// `L_final + λ Σ_{ℓ=1}^{L-1} w_ℓ L⁽ℓ⁾` on `g`; the sum is dropped when
    /// supervision is off.
    pub fn loss_graph(&self, g: &Graph<'_, F>, batch: &Batch) -> Result<NodeId> {
        let sup = self.config.supervision;
        let out = self.forward_graph(g, &batch.inputs, batch.batch, batch.seq, &ForwardOptions::default(), sup.active())?;
        let mut loss = g.cross_entropy(out.logits, &batch.targets)?;
        for (i, &logits) in out.layer_logits.iter().enumerate() {
            let w = sup.lambda * sup.weight(i + 1, self.config.n_layers);
            let term = g.cross_entropy(logits, &batch.targets)?;
            loss = g.add(loss, g.scale(term, F::lit(w)))?;
        }
        Ok(loss)
    }

    /// Training objective without gradient recording.
    pub fn loss(&self, batch: &Batch) -> Result<F> {
        let g = Graph::new(&self.params, false);
        let loss = self.loss_graph(&g, batch)?;
        Ok(g.value(loss).item())
    }

    /// Plain next-token cross-entropy of the final logits.
    pub fn eval_batch(&self, batch: &Batch, opts: &ForwardOptions) -> Result<F> {
        let g = Graph::new(&self.params, false);
        let out = self.forward_graph(&g, &batch.inputs, batch.batch, batch.seq, opts, false)?;
        let loss = g.cross_entropy(out.logits, &batch.targets)?;
        Ok(g.value(loss).item())
    }

    /// Samples `opts.n` continuation tokens after `prompt`, re-running the
    /// full forward pass per token on the last `max_seq_len` tokens.
    pub fn generate(&self, prompt: &[usize], opts: &GenerateOptions) -> Result<Vec<usize>> {
        if opts.n == 0 {
            return Err(Error::Usage("generate needs n >= 1".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Data("empty prompt".into()));
        }
        let max_t = self.config.max_seq_len;
        if prompt.len() > max_t {
            return Err(Error::Data(format!("prompt of {} tokens exceeds the model maximum {max_t}", prompt.len())));
        }
        let fopts = ForwardOptions { alpha: opts.alpha, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut ctx = prompt.to_vec();
        let mut out = Vec::with_capacity(opts.n);
        let v = self.config.vocab_size;
        for _ in 0..opts.n {
            let window = &ctx[ctx.len().saturating_sub(max_t)..];
            let (logits, _) = self.forward(window, 1, window.len(), &fopts)?;
            let last: Vec<f64> = logits.data()[(window.len() - 1) * v..].iter().map(|x| x.as_f64()).collect();
            let next = if opts.temperature <= 0.0 {
                argmax(&last)
            } else {
                sample(&last, opts.temperature, &mut rng)
            };
            ctx.push(next);
            out.push(next);
        }
        Ok(out)
    }
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn sample(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    logits.len() - 1
}
