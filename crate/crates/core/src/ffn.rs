//! Feed-forward block: reads the combined stream, writes the context stream.
//!
//! The hidden width `d_ff` is split into `H` contiguous channels of width
//! `d_ff / H`, matched by index with the attention heads.

use crate::error::{Error, Result};
use crate::mixing::{MixingLinear, MixingStrategy};
use crate::norm::ChannelLayerNorm;
use crate::params::{Graph, ParamStore};
use crate::real::Real;
use crate::tensor::NodeId;

#[derive(Clone, Debug)]
pub struct FfnLayer {
    pub cln: ChannelLayerNorm,
    pub up: MixingLinear,
    pub down: MixingLinear,
}

impl FfnLayer {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        up: MixingStrategy,
        down: MixingStrategy,
        bias: bool,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        if d_ff % heads != 0 {
            return Err(Error::Config(format!(
                "ffn width {d_ff} is not divisible by {heads} heads"
            )));
        }
        let (d_h, d_c) = (d_model / heads, d_ff / heads);
        if (up.preserves_width() || down.preserves_width()) && d_c != d_h {
            return Err(Error::Config(format!(
                "{up}/{down} ffn mixing keeps per-head width, so d_ff must equal d_model ({d_ff} != {d_model})"
            )));
        }
        let cln = ChannelLayerNorm::new(store, &format!("{name}.ln"), d_model, heads)?;
        let up = MixingLinear::new(store, &format!("{name}.up"), up, heads, d_h, d_c, bias)?;
        let down = MixingLinear::new(store, &format!("{name}.down"), down, heads, d_c, d_h, bias)?;
        Ok(Self { cln, up, down })
    }

    /// `down(GELU(up(CLN(x_t + x_e))))`, shape `[B, T, D]`.
    pub fn forward<F: Real>(&self, g: &Graph<'_, F>, x_t: NodeId, x_e: NodeId) -> Result<NodeId> {
        let x = g.add(x_t, x_e)?;
        let shape = g.shape(x);
        let xn = self.cln.apply(g, x)?;
        let mut split = shape[..shape.len() - 1].to_vec();
        split.extend([self.up.heads, self.up.d_in]);
        let h = self.up.apply(g, g.reshape(xn, &split)?)?;
        let h = g.gelu(h);
        let y = self.down.apply(g, h)?;
        g.reshape(y, &shape)
    }
}
