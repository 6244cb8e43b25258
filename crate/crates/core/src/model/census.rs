use serde::Serialize;

use crate::error::Result;
use crate::mixing::weight_shape;
use crate::mixing::MixingStrategy;

use super::ModelConfig;

/// One parameter tensor: name, shape, scalar count and kind label
/// (`embedding`, `norm`, `dense`, `gate`, `bias`, or a mixing token).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CensusRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub kind: String,
}

impl CensusRow {
    fn new(name: String, shape: Vec<usize>, kind: &str) -> Self {
        Self { count: shape.iter().product(), name, shape, kind: kind.to_string() }
    }
}

impl ModelConfig {
    /// Parameter table computed from the configuration alone, without
    /// allocating the model. Rows follow allocation order.
    pub fn param_census(&self) -> Result<Vec<CensusRow>> {
        self.validate()?;
        let (d, h, v) = (self.d_model, self.n_heads, self.vocab_size);
        let (dh, dc) = (d / h, self.d_ff / h);
        let mut rows = vec![
            CensusRow::new("tok_emb.weight".into(), vec![v, d], "embedding"),
            CensusRow::new("pos_emb.weight".into(), vec![self.max_seq_len, d], "embedding"),
        ];
        let norm = |rows: &mut Vec<CensusRow>, name: String, heads: usize, width: usize| {
            rows.push(CensusRow::new(format!("{name}.gamma"), vec![heads, width], "norm"));
            rows.push(CensusRow::new(format!("{name}.beta"), vec![heads, width], "norm"));
        };
        let bias = self.mixing_bias;
        let mixing = |rows: &mut Vec<CensusRow>, name: String, s: MixingStrategy, din: usize, dout: usize| {
            if let Some(shape) = weight_shape(s, h, din, dout) {
                rows.push(CensusRow::new(format!("{name}.weight"), shape, s.token()));
                if bias {
                    rows.push(CensusRow::new(format!("{name}.bias"), vec![h * dout], "bias"));
                }
            }
        };
        let m = self.mixing;
        for l in 0..self.n_layers {
            let a = format!("layers.{l}.attn");
            norm(&mut rows, format!("{a}.ln_combined"), h, dh);
            norm(&mut rows, format!("{a}.ln_token"), h, dh);
            rows.push(CensusRow::new(format!("{a}.q.weight"), vec![d, d], "dense"));
            rows.push(CensusRow::new(format!("{a}.k.weight"), vec![d, d], "dense"));
            mixing(&mut rows, format!("{a}.v"), m.attn_v, dh, dh);
            mixing(&mut rows, format!("{a}.o"), m.attn_o, dh, dh);
            if self.gated {
                rows.push(CensusRow::new(format!("{a}.gate.weight"), vec![h, dh], "gate"));
            }
            let f = format!("layers.{l}.ffn");
            norm(&mut rows, format!("{f}.ln"), h, dh);
            mixing(&mut rows, format!("{f}.up"), m.ffn_up, dh, dc);
            mixing(&mut rows, format!("{f}.down"), m.ffn_down, dc, dh);
        }
        norm(&mut rows, "final_ln".into(), 1, d);
        if !self.tie_embeddings {
            rows.push(CensusRow::new("lm_head.weight".into(), vec![d, v], "dense"));
        }
        Ok(rows)
    }

    pub fn param_total(&self) -> Result<usize> {
        Ok(self.param_census()?.iter().map(|r| r.count).sum())
    }
}
