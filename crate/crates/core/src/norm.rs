//! Channel-aware LayerNorm: statistics are taken over each head's slice of
//! the model width, never across heads. With one channel it is the usual
//! full-width LayerNorm.

use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::NodeId;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ChannelLayerNorm {
    pub heads: usize,
    pub width: usize,
    pub eps: f64,
    gamma: ParamId,
    beta: ParamId,
}

impl ChannelLayerNorm {
    /// Registers `name.gamma` (ones) and `name.beta` (zeros), both `[heads, d_model / heads]`.
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: model width {d_model} is not divisible by {heads} heads"
            )));
        }
        let width = d_model / heads;
        let gamma = store.register(&format!("{name}.gamma"), &[heads, width], ParamKind::Norm, Init::Ones);
        let beta = store.register(&format!("{name}.beta"), &[heads, width], ParamKind::Norm, Init::Zeros);
        Ok(Self { heads, width, eps: LN_EPS, gamma, beta })
    }

    /// Full-width LayerNorm with learned affine.
    pub fn layer_norm<F: Real>(store: &mut ParamStore<F>, name: &str, d_model: usize) -> Result<Self> {
        Self::new(store, name, d_model, 1)
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    /// `x: [.., H·d_h] -> [.., H·d_h]`.
    pub fn apply<F: Real>(&self, g: &Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x);
        let d = *shape.last().unwrap_or(&0);
        if d != self.heads * self.width {
            return Err(Error::Dimension(format!(
                "norm expects last axis {}, got {shape:?}",
                self.heads * self.width
            )));
        }
        let mut split = shape[..shape.len() - 1].to_vec();
        split.extend([self.heads, self.width]);
        let xs = g.reshape(x, &split)?;
        let n = g.normalize_last(xs, F::lit(self.eps));
        let scaled = g.mul_trailing(n, g.param(self.gamma))?;
        let shifted = g.add_trailing(scaled, g.param(self.beta))?;
        g.reshape(shifted, &shape)
    }
}
