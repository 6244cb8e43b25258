//! Channelized projections: one linear map type whose cross-head
//! connectivity is chosen from four strategies.
//!
//! | strategy    | weight            | parameters          |
//! |-------------|-------------------|---------------------|
//! | Identity    | none              | 0                   |
//! | Independent | `[H, d_in, d_out]`| `H·d_in·d_out`      |
//! | Kronecker   | `[H, H]`          | `H²`                |
//! | Dense       | `[H·d_in, H·d_out]`| `(H·d_in)·(H·d_out)`|
//!
//! Kronecker computes `y[.., k, i] = Σ_h W[k, h] · x[.., h, i]`, i.e. the
//! dense map `W ⊗ I_d`. Row `k` of the routing matrix is the destination
//! head, column `h` the source head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamId, ParamKind, ParamStore, INIT_STD};
use crate::real::Real;
use crate::report::{fmt_sig, read_csv_rows, write_text};
use crate::tensor::{NodeId, Tensor};

/// Ordered by expressiveness: each strategy can be expressed by the ones
/// after it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MixingStrategy {
    #[serde(rename = "id")]
    Identity,
    #[serde(rename = "ind")]
    Independent,
    #[serde(rename = "kron")]
    Kronecker,
    #[serde(rename = "dns")]
    Dense,
}

impl MixingStrategy {
    pub const ALL: [MixingStrategy; 4] = [
        MixingStrategy::Identity,
        MixingStrategy::Independent,
        MixingStrategy::Kronecker,
        MixingStrategy::Dense,
    ];

    pub fn token(self) -> &'static str {
        match self {
            MixingStrategy::Identity => "id",
            MixingStrategy::Independent => "ind",
            MixingStrategy::Kronecker => "kron",
            MixingStrategy::Dense => "dns",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.token() == s)
    }

    /// Identity and Kronecker act within each head's coordinates, so they
    /// cannot change the per-head width.
    pub fn preserves_width(self) -> bool {
        matches!(self, MixingStrategy::Identity | MixingStrategy::Kronecker)
    }
}

impl fmt::Display for MixingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Number of trainable weights of one projection site (bias excluded).
pub fn param_count(strategy: MixingStrategy, heads: usize, d_in: usize, d_out: usize) -> usize {
    match strategy {
        MixingStrategy::Identity => 0,
        MixingStrategy::Independent => heads * d_in * d_out,
        MixingStrategy::Kronecker => heads * heads,
        MixingStrategy::Dense => (heads * d_in) * (heads * d_out),
    }
}

/// Shape of a site's weight tensor, `None` for Identity.
pub fn weight_shape(strategy: MixingStrategy, heads: usize, d_in: usize, d_out: usize) -> Option<Vec<usize>> {
    match strategy {
        MixingStrategy::Identity => None,
        MixingStrategy::Independent => Some(vec![heads, d_in, d_out]),
        MixingStrategy::Kronecker => Some(vec![heads, heads]),
        MixingStrategy::Dense => Some(vec![heads * d_in, heads * d_out]),
    }
}

/// Strategies at the four sites, written `v-o/up-down`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MixingSignature {
    pub attn_v: MixingStrategy,
    pub attn_o: MixingStrategy,
    pub ffn_up: MixingStrategy,
    pub ffn_down: MixingStrategy,
}

impl MixingSignature {
    pub const fn new(
        attn_v: MixingStrategy,
        attn_o: MixingStrategy,
        ffn_up: MixingStrategy,
        ffn_down: MixingStrategy,
    ) -> Self {
        Self { attn_v, attn_o, ffn_up, ffn_down }
    }

    pub const fn uniform(s: MixingStrategy) -> Self {
        Self::new(s, s, s, s)
    }

    /// The four named configurations: dense baseline, Kronecker attention
    /// with dense FFN, independent attention with dense FFN, and fully
    /// independent.
    pub fn presets() -> [(&'static str, MixingSignature); 4] {
        use MixingStrategy::*;
        [
            ("dense-baseline", Self::uniform(Dense)),
            ("kronecker-dense", Self::new(Kronecker, Kronecker, Dense, Dense)),
            ("independent-dense", Self::new(Independent, Independent, Dense, Dense)),
            ("fully-independent", Self::uniform(Independent)),
        ]
    }
}

impl Default for MixingSignature {
    fn default() -> Self {
        Self::new(
            MixingStrategy::Kronecker,
            MixingStrategy::Kronecker,
            MixingStrategy::Dense,
            MixingStrategy::Dense,
        )
    }
}

impl fmt::Display for MixingSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}/{}-{}", self.attn_v, self.attn_o, self.ffn_up, self.ffn_down)
    }
}

impl FromStr for MixingSignature {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let halves: Vec<&str> = text.split('/').collect();
        if halves.len() != 2 {
            let position = text.match_indices('/').nth(1).map_or(text.len(), |(i, _)| i);
            return Err(Error::Parse {
                position,
                message: format!("expected `<v>-<o>/<up>-<down>`, got {text:?}"),
            });
        }
        let mut slots = Vec::with_capacity(4);
        let mut offset = 0;
        for half in halves {
            let parts: Vec<&str> = half.split('-').collect();
            if parts.len() != 2 {
                return Err(Error::Parse {
                    position: offset,
                    message: format!("expected two strategies joined by '-', got {half:?}"),
                });
            }
            for p in parts {
                let s = MixingStrategy::from_token(p).ok_or_else(|| Error::Parse {
                    position: offset,
                    message: format!("unknown mixing token {p:?} (expected id, ind, kron or dns)"),
                })?;
                slots.push(s);
                offset += p.len() + 1;
            }
        }
        Ok(Self::new(slots[0], slots[1], slots[2], slots[3]))
    }
}

impl TryFrom<String> for MixingSignature {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MixingSignature> for String {
    fn from(s: MixingSignature) -> String {
        s.to_string()
    }
}

/// One projection site: `[.., H, d_in] -> [.., H, d_out]`.
#[derive(Clone, Debug)]
pub struct MixingLinear {
    pub strategy: MixingStrategy,
    pub heads: usize,
    pub d_in: usize,
    pub d_out: usize,
    weight: Option<ParamId>,
    bias: Option<ParamId>,
}

impl MixingLinear {
    /// Registers the site's parameters under `name.weight` / `name.bias`.
    ///
    /// Kronecker weights start at `I_H` plus small noise so the layer is
    /// initially close to a pass-through.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        strategy: MixingStrategy,
        heads: usize,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        if heads == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!("{name}: dimensions must be positive")));
        }
        if strategy.preserves_width() && d_in != d_out {
            return Err(Error::Config(format!(
                "{name}: {strategy} mixing needs equal per-head widths, got {d_in} -> {d_out}"
            )));
        }
        let init = match strategy {
            MixingStrategy::Kronecker => Init::IdentityNoise(INIT_STD),
            _ => Init::Normal(INIT_STD),
        };
        let weight = weight_shape(strategy, heads, d_in, d_out).map(|shape| {
            store.register(&format!("{name}.weight"), &shape, ParamKind::Mixing(strategy), init)
        });
        let bias = (bias && strategy != MixingStrategy::Identity).then(|| {
            store.register(&format!("{name}.bias"), &[heads * d_out], ParamKind::Bias, Init::Zeros)
        });
        Ok(Self { strategy, heads, d_in, d_out, weight, bias })
    }

    pub fn weight(&self) -> Option<ParamId> {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn param_count(&self) -> usize {
        param_count(self.strategy, self.heads, self.d_in, self.d_out)
    }

    pub fn apply<F: Real>(&self, g: &Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x);
        let r = shape.len();
        if r < 2 || shape[r - 2] != self.heads || shape[r - 1] != self.d_in {
            return Err(Error::Dimension(format!(
                "mixing expects trailing [{}, {}], got {shape:?}",
                self.heads, self.d_in
            )));
        }
        let lead = &shape[..r - 2];
        let n: usize = lead.iter().product();
        let (h, di, d_o) = (self.heads, self.d_in, self.d_out);
        let mut out_shape = lead.to_vec();
        out_shape.extend([h, d_o]);
        let y = match (self.strategy, self.weight) {
            (MixingStrategy::Identity, _) => x,
            (MixingStrategy::Independent, Some(w)) => {
                let xs = g.reshape(x, &[n, h, di])?;
                let xh = g.permute(xs, &[1, 0, 2])?;
                let yh = g.matmul(xh, g.param(w))?;
                let ys = g.permute(yh, &[1, 0, 2])?;
                g.reshape(ys, &out_shape)?
            }
            (MixingStrategy::Kronecker, Some(w)) => {
                let xs = g.reshape(x, &[n, h, di])?;
                let xh = g.permute(xs, &[1, 0, 2])?;
                let flat = g.reshape(xh, &[h, n * di])?;
                let mixed = g.matmul(g.param(w), flat)?;
                let yh = g.reshape(mixed, &[h, n, di])?;
                let ys = g.permute(yh, &[1, 0, 2])?;
                g.reshape(ys, &out_shape)?
            }
            (MixingStrategy::Dense, Some(w)) => {
                let flat = g.reshape(x, &[n, h * di])?;
                let y = g.matmul(flat, g.param(w))?;
                g.reshape(y, &out_shape)?
            }
            _ => unreachable!("weights exist for every non-identity strategy"),
        };
        match self.bias {
            Some(b) => {
                let bias = g.reshape(g.param(b), &[h, d_o])?;
                g.add_trailing(y, bias)
            }
            None => Ok(y),
        }
    }

    fn kronecker_weight(&self) -> Result<ParamId> {
        match (self.strategy, self.weight) {
            (MixingStrategy::Kronecker, Some(w)) => Ok(w),
            _ => Err(Error::Usage(format!(
                "routing export needs a Kronecker layer, this one is {}",
                self.strategy
            ))),
        }
    }

    /// The learned `H × H` routing matrix; entry `(k, h)` weights the flow
    /// from source head `h` into destination head `k`.
    pub fn export_kronecker<F: Real>(&self, store: &ParamStore<F>) -> Result<Tensor<F>> {
        Ok(store.value(self.kronecker_weight()?).clone())
    }

    pub fn import_kronecker<F: Real>(&self, store: &mut ParamStore<F>, routing: Tensor<F>) -> Result<()> {
        let w = self.kronecker_weight()?;
        store.assign(w, routing)
    }
}

/// Writes a routing matrix as CSV: optional `#` comment line, a
/// `dst\src,h0,..` header, then one row per destination head with 9
/// significant digits.
pub fn write_routing_csv<F: Real>(path: &Path, routing: &Tensor<F>, comment: Option<&str>) -> Result<()> {
    let h = routing.shape()[0];
    let mut out = String::new();
    if let Some(c) = comment {
        out.push_str(c);
        out.push('\n');
    }
    out.push_str("dst\\src");
    for j in 0..h {
        out.push_str(&format!(",h{j}"));
    }
    out.push('\n');
    for i in 0..h {
        out.push_str(&format!("h{i}"));
        for j in 0..h {
            out.push(',');
            out.push_str(&fmt_sig(routing.at(&[i, j]).as_f64(), 9));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_routing_csv<F: Real>(path: &Path) -> Result<Tensor<F>> {
    let (header, rows) = read_csv_rows(path)?;
    let h = header.len().saturating_sub(1);
    if h == 0 || rows.len() != h {
        return Err(Error::Data(format!("{}: expected a square routing table", path.display())));
    }
    let mut data = Vec::with_capacity(h * h);
    for row in &rows {
        if row.len() != h + 1 {
            return Err(Error::Data(format!("{}: ragged row {row:?}", path.display())));
        }
        for cell in &row[1..] {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Data(format!("{}: bad number {cell:?}", path.display())))?;
            data.push(F::lit(v));
        }
    }
    Tensor::new(vec![h, h], data)
}
