//! Dual-stream multi-head attention.
//!
//! Queries and keys come from the combined stream through dense `[D, D]`
//! maps. Values come from the token stream (or the combined stream in
//! single-stream mode) through a mixing layer, and the per-head context goes
//! through a second mixing layer before being written back.

use crate::error::{Error, Result};
use crate::mixing::{MixingLinear, MixingStrategy};
use crate::norm::ChannelLayerNorm;
use crate::params::{Graph, Init, ParamId, ParamKind, ParamStore, INIT_STD};
use crate::real::Real;
use crate::tensor::{causal_softmax, NodeId, Tensor};

/// Which stream the value projection reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueSource {
    Token,
    Combined,
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub heads: usize,
    pub d_head: usize,
    wq: ParamId,
    wk: ParamId,
    pub v_mix: MixingLinear,
    pub o_mix: MixingLinear,
    pub cln_combined: ChannelLayerNorm,
    pub cln_token: ChannelLayerNorm,
    gate: Option<ParamId>,
}

/// Tape nodes produced by one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[B, T, D]`, to be added to the residual.
    pub delta: NodeId,
    /// Scaled, unmasked logits `QKᵀ/√d_h`, `[B, H, T, T]`.
    pub logits: NodeId,
    /// Causal attention weights, `[B, H, T, T]`.
    pub weights: NodeId,
    /// Gate values `[B, T, H]` when gating is on.
    pub gates: Option<NodeId>,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        heads: usize,
        v: MixingStrategy,
        o: MixingStrategy,
        gated: bool,
        bias: bool,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_head = d_model / heads;
        let cln_combined = ChannelLayerNorm::new(store, &format!("{name}.ln_combined"), d_model, heads)?;
        let cln_token = ChannelLayerNorm::new(store, &format!("{name}.ln_token"), d_model, heads)?;
        let dense = Init::Normal(INIT_STD);
        let wq = store.register(&format!("{name}.q.weight"), &[d_model, d_model], ParamKind::Dense, dense);
        let wk = store.register(&format!("{name}.k.weight"), &[d_model, d_model], ParamKind::Dense, dense);
        let v_mix = MixingLinear::new(store, &format!("{name}.v"), v, heads, d_head, d_head, bias)?;
        let o_mix = MixingLinear::new(store, &format!("{name}.o"), o, heads, d_head, d_head, bias)?;
        let gate = gated.then(|| {
            store.register(&format!("{name}.gate.weight"), &[heads, d_head], ParamKind::Gate, dense)
        });
        Ok(Self { heads, d_head, wq, wk, v_mix, o_mix, cln_combined, cln_token, gate })
    }

    pub fn q_weight(&self) -> ParamId {
        self.wq
    }

    pub fn k_weight(&self) -> ParamId {
        self.wk
    }

    pub fn gate_weight(&self) -> Option<ParamId> {
        self.gate
    }

    /// Runs the block on `x_t`, `x_e` (`[B, T, D]` each) with logits scaled
    /// by `alpha` before the causal softmax.
    pub fn attend<F: Real>(
        &self,
        g: &Graph<'_, F>,
        x_t: NodeId,
        x_e: NodeId,
        alpha: F,
        values: ValueSource,
    ) -> Result<AttentionOutput> {
        if !(alpha > F::zero()) {
            return Err(Error::Usage(format!("amplification factor must be positive, got {alpha}")));
        }
        if alpha != F::one() && g.trainable() {
            return Err(Error::Usage("attention amplification is inference-only".into()));
        }
        let shape = g.shape(x_t);
        if shape.len() != 3 || shape[2] != self.heads * self.d_head {
            return Err(Error::Dimension(format!(
                "attention expects [B, T, {}], got {shape:?}",
                self.heads * self.d_head
            )));
        }
        let (b, t, h, d) = (shape[0], shape[1], self.heads, self.d_head);

        let x = g.add(x_t, x_e)?;
        let xn = self.cln_combined.apply(g, x)?;
        let q = g.linear(xn, g.param(self.wq))?;
        let k = g.linear(xn, g.param(self.wk))?;
        let qh = g.split_heads(q, h)?;
        let kh = g.split_heads(k, h)?;
        let raw = g.matmul(qh, g.transpose_last(kh)?)?;
        let logits = g.scale(raw, F::lit(1.0 / (d as f64).sqrt()));
        let weights = g.causal_softmax(logits, alpha)?;

        let v_in = match values {
            ValueSource::Token => x_t,
            ValueSource::Combined => x,
        };
        let vn = self.cln_token.apply(g, v_in)?;
        let v = self.v_mix.apply(g, g.reshape(vn, &[b, t, h, d])?)?;
        let vh = g.permute(v, &[0, 2, 1, 3])?;
        let ctx = g.matmul(weights, vh)?;
        let mut ctx = g.permute(ctx, &[0, 2, 1, 3])?;

        let gates = match self.gate {
            Some(w) => {
                let q4 = g.reshape(q, &[b, t, h, d])?;
                let dot = g.scale(g.mean_last(g.mul_trailing(q4, g.param(w))?), F::lit(d as f64));
                let gates = g.sigmoid(dot);
                ctx = g.scale_rows(ctx, gates)?;
                Some(gates)
            }
            None => None,
        };

        let out = self.o_mix.apply(g, ctx)?;
        let delta = g.reshape(out, &[b, t, h * d])?;
        Ok(AttentionOutput { delta, logits, weights, gates })
    }
}

/// Re-weights cached attention logits `[.., T, T]` at amplification
/// `alpha`; identical to what [`AttentionLayer::attend`] computes.
pub fn amplified_weights<F: Real>(logits: &Tensor<F>, alpha: F) -> Result<Tensor<F>> {
    if !(alpha > F::zero()) {
        return Err(Error::Usage(format!("amplification factor must be positive, got {alpha}")));
    }
    let r = logits.rank();
    if r < 2 || logits.shape()[r - 1] != logits.shape()[r - 2] {
        return Err(Error::Dimension(format!("expected square trailing axes, got {:?}", logits.shape())));
    }
    Ok(causal_softmax(logits, alpha))
}
