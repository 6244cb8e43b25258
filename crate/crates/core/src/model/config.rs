use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::MixingSignature;

/// How the two residual streams are read and written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamMode {
    /// Every read uses `x_t + x_e`; equivalent to an ordinary residual stream.
    #[serde(rename = "ss")]
    SingleStream,
    /// Attention writes `x_t`, the FFN writes `x_e`; values read `x_t` only.
    #[serde(rename = "tf")]
    TokenFactor,
    /// `x_t` stays at the embeddings. Attention output is added to `x_e`.
    #[serde(rename = "fts")]
    FrozenTokenStream,
}

impl StreamMode {
    pub const ALL: [StreamMode; 3] =
        [StreamMode::SingleStream, StreamMode::TokenFactor, StreamMode::FrozenTokenStream];

    pub fn token(self) -> &'static str {
        match self {
            StreamMode::SingleStream => "ss",
            StreamMode::TokenFactor => "tf",
            StreamMode::FrozenTokenStream => "fts",
        }
    }
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ss" | "single" | "single-stream" => Ok(StreamMode::SingleStream),
            "tf" | "token-factor" => Ok(StreamMode::TokenFactor),
            "fts" | "frozen" | "frozen-token-stream" => Ok(StreamMode::FrozenTokenStream),
            other => Err(Error::Config(format!("unknown stream mode {other:?} (expected ss, tf or fts)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupervisionSchedule {
    Uniform,
    Linear,
    Exponential,
}

impl FromStr for SupervisionSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "linear" => Ok(Self::Linear),
            "exponential" => Ok(Self::Exponential),
            other => Err(Error::Config(format!(
                "unknown supervision schedule {other:?} (expected uniform, linear or exponential)"
            ))),
        }
    }
}

/// Auxiliary next-token losses on intermediate layers, training only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Supervision {
    pub enabled: bool,
    pub lambda: f64,
    pub schedule: SupervisionSchedule,
}

impl Default for Supervision {
    fn default() -> Self {
        Self { enabled: false, lambda: 0.1, schedule: SupervisionSchedule::Linear }
    }
}

impl Supervision {
    /// Weight of layer `layer` (1-based) in a model of `n_layers` layers.
    pub fn weight(&self, layer: usize, n_layers: usize) -> f64 {
        match self.schedule {
            SupervisionSchedule::Uniform => 1.0,
            SupervisionSchedule::Linear => layer as f64 / n_layers as f64,
            SupervisionSchedule::Exponential => 2f64.powi(layer as i32 - n_layers as i32 + 1),
        }
    }

    /// True when the auxiliary terms contribute anything.
    pub fn active(&self) -> bool {
        self.enabled && self.lambda > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mode: StreamMode,
    pub mixing: MixingSignature,
    pub gated: bool,
    /// Adds a bias vector at every non-identity mixing site.
    pub mixing_bias: bool,
    /// Reuses the token embedding as the output projection.
    pub tie_embeddings: bool,
    pub supervision: Supervision,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The base configuration: D=512, L=6, H=8, d_ff=2048, V=32000.
    fn default() -> Self {
        Self {
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            vocab_size: 32_000,
            max_seq_len: 512,
            mode: StreamMode::TokenFactor,
            mixing: MixingSignature::default(),
            gated: false,
            mixing_bias: false,
            tie_embeddings: false,
            supervision: Supervision::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and the toy presets.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 64,
            mixing: MixingSignature::uniform(crate::MixingStrategy::Dense),
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model = {} is not divisible by model.n_heads = {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_ff = {} is not divisible by model.n_heads = {}",
                self.d_ff, self.n_heads
            )));
        }
        let m = self.mixing;
        if (m.ffn_up.preserves_width() || m.ffn_down.preserves_width()) && self.d_ff != self.d_model {
            return Err(Error::Config(format!(
                "ffn mixing {}-{} keeps per-head width, so model.d_ff must equal model.d_model",
                m.ffn_up, m.ffn_down
            )));
        }
        if !(self.supervision.lambda >= 0.0) {
            return Err(Error::Config("model.supervision.lambda must be >= 0".into()));
        }
        Ok(())
    }
}
