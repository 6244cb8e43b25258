//! Straight-line forward pass written from the algorithm description:
//! plain `Vec<f64>` arrays, explicit loops, one sequence at a time.

use dstf::mixing::MixingStrategy;
use dstf::model::{Model, StreamMode};

struct Weights<'a> {
    model: &'a Model<f64>,
}

impl Weights<'_> {
    fn get(&self, name: &str) -> Vec<f64> {
        self.model.params().by_name(name).map(|t| t.data().to_vec()).unwrap_or_default()
    }

    fn has(&self, name: &str) -> bool {
        self.model.params().find(name).is_some()
    }
}

/// Per-head layer norm of a `heads × width` vector.
pub fn channel_norm(x: &[f64], heads: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let w = x.len() / heads;
    let mut out = vec![0.0; x.len()];
    for h in 0..heads {
        let s = &x[h * w..(h + 1) * w];
        let mean = s.iter().sum::<f64>() / w as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let denom = (var + 1e-5).sqrt();
        for i in 0..w {
            out[h * w + i] = (s[i] - mean) / denom * gamma[h * w + i] + beta[h * w + i];
        }
    }
    out
}

/// `y = x W` for row vector `x` and row-major `W` of `x.len() × n`.
pub fn vec_mat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..n {
            y[j] += xi * w[i * n + j];
        }
    }
    y
}

/// One mixing site applied to a single position's `H·d_in` vector.
pub fn mix(
    x: &[f64],
    strategy: MixingStrategy,
    w: &[f64],
    bias: &[f64],
    heads: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    let mut y = match strategy {
        MixingStrategy::Identity => x.to_vec(),
        MixingStrategy::Independent => {
            let mut y = vec![0.0; heads * d_out];
            for h in 0..heads {
                for i in 0..d_in {
                    for o in 0..d_out {
                        y[h * d_out + o] += x[h * d_in + i] * w[(h * d_in + i) * d_out + o];
                    }
                }
            }
            y
        }
        MixingStrategy::Kronecker => {
            let mut y = vec![0.0; heads * d_out];
            for k in 0..heads {
                for h in 0..heads {
                    for i in 0..d_in {
                        y[k * d_in + i] += w[k * heads + h] * x[h * d_in + i];
                    }
                }
            }
            y
        }
        MixingStrategy::Dense => vec_mat(x, w, heads * d_out),
    };
    for (v, b) in y.iter_mut().zip(bias) {
        *v += b;
    }
    y
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Stream snapshots and logits of one sequence.
pub struct OracleOutput {
    pub logits: Vec<Vec<f64>>,
    pub x_t: Vec<Vec<Vec<f64>>>,
    pub x_e: Vec<Vec<Vec<f64>>>,
    pub attn: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Runs one sequence through the model described by `model`'s config and
/// weights at amplification `alpha`.
pub fn forward(model: &Model<f64>, ids: &[usize], alpha: f64) -> OracleOutput {
    let c = model.config();
    let w = Weights { model };
    let (d, hh, t) = (c.d_model, c.n_heads, ids.len());
    let dh = d / hh;
    let dc = c.d_ff / hh;
    let tok = w.get("tok_emb.weight");
    let pos = w.get("pos_emb.weight");

    let embed: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..d).map(|k| tok[ids[i] * d + k] + pos[i * d + k]).collect())
        .collect();
    let mut x_t = embed.clone();
    let mut x_e = vec![vec![0.0; d]; t];
    let mut out = OracleOutput { logits: Vec::new(), x_t: Vec::new(), x_e: Vec::new(), attn: Vec::new() };

    for l in 0..c.n_layers {
        let a = format!("layers.{l}.attn");
        let site = |name: &str| (w.get(&format!("{name}.weight")), w.get(&format!("{name}.bias")));
        let combined: Vec<Vec<f64>> = (0..t).map(|i| add(&x_t[i], &x_e[i])).collect();
        let (g1, b1) = (w.get(&format!("{a}.ln_combined.gamma")), w.get(&format!("{a}.ln_combined.beta")));
        let (g2, b2) = (w.get(&format!("{a}.ln_token.gamma")), w.get(&format!("{a}.ln_token.beta")));
        let wq = w.get(&format!("{a}.q.weight"));
        let wk = w.get(&format!("{a}.k.weight"));
        let (wv, bv) = site(&format!("{a}.v"));
        let (wo, bo) = site(&format!("{a}.o"));

        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        for i in 0..t {
            let xn = channel_norm(&combined[i], hh, &g1, &b1);
            q.push(vec_mat(&xn, &wq, d));
            k.push(vec_mat(&xn, &wk, d));
            let src = if c.mode == StreamMode::SingleStream { &combined[i] } else { &x_t[i] };
            let vn = channel_norm(src, hh, &g2, &b2);
            v.push(mix(&vn, c.mixing.attn_v, &wv, &bv, hh, dh, dh));
        }

        let gate_w = w.has(&format!("{a}.gate.weight")).then(|| w.get(&format!("{a}.gate.weight")));
        let mut layer_attn = vec![vec![vec![0.0; t]; t]; hh];
        let mut delta = Vec::new();
        for i in 0..t {
            let mut ctx = vec![0.0; d];
            for h in 0..hh {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let dot: f64 = (0..dh).map(|e| q[i][h * dh + e] * k[j][h * dh + e]).sum();
                        alpha * dot / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let gate = match &gate_w {
                    Some(gw) => {
                        let dot: f64 = (0..dh).map(|e| gw[h * dh + e] * q[i][h * dh + e]).sum();
                        1.0 / (1.0 + (-dot).exp())
                    }
                    None => 1.0,
                };
                for (j, e) in exps.iter().enumerate() {
                    let p = e / z;
                    layer_attn[h][i][j] = p;
                    for e2 in 0..dh {
                        ctx[h * dh + e2] += gate * p * v[j][h * dh + e2];
                    }
                }
            }
            delta.push(mix(&ctx, c.mixing.attn_o, &wo, &bo, hh, dh, dh));
        }
        for i in 0..t {
            match c.mode {
                StreamMode::FrozenTokenStream => x_e[i] = add(&x_e[i], &delta[i]),
                _ => x_t[i] = add(&x_t[i], &delta[i]),
            }
        }

        let f = format!("layers.{l}.ffn");
        let (g3, b3) = (w.get(&format!("{f}.ln.gamma")), w.get(&format!("{f}.ln.beta")));
        let (wu, bu) = site(&format!("{f}.up"));
        let (wd, bd) = site(&format!("{f}.down"));
        for i in 0..t {
            let xn = channel_norm(&add(&x_t[i], &x_e[i]), hh, &g3, &b3);
            let hidden: Vec<f64> = mix(&xn, c.mixing.ffn_up, &wu, &bu, hh, dh, dc).into_iter().map(gelu).collect();
            let y = mix(&hidden, c.mixing.ffn_down, &wd, &bd, hh, dc, dh);
            x_e[i] = add(&x_e[i], &y);
        }
        out.x_t.push(x_t.clone());
        out.x_e.push(x_e.clone());
        out.attn.push(layer_attn);
    }

    let (gf, bf) = (w.get("final_ln.gamma"), w.get("final_ln.beta"));
    let head: Vec<f64> = if w.has("lm_head.weight") {
        w.get("lm_head.weight")
    } else {
        // Transposed embedding, [D, V].
        let mut h = vec![0.0; d * c.vocab_size];
        for vi in 0..c.vocab_size {
            for k in 0..d {
                h[k * c.vocab_size + vi] = tok[vi * d + k];
            }
        }
        h
    };
    for i in 0..t {
        let xf = channel_norm(&add(&x_t[i], &x_e[i]), 1, &gf, &bf);
        out.logits.push(vec_mat(&xf, &head, c.vocab_size));
    }
    out
}

/// Mean next-token negative log-likelihood of a single sequence's logits.
pub fn cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / targets.len() as f64
}

/// Dense matrix equivalent to a Kronecker site: `M[h·d+i, k·d+i] = W[k, h]`.
pub fn kronecker_expand(w: &[f64], heads: usize, d: usize) -> Vec<f64> {
    let n = heads * d;
    let mut m = vec![0.0; n * n];
    for k in 0..heads {
        for h in 0..heads {
            for i in 0..d {
                m[(h * d + i) * n + k * d + i] = w[k * heads + h];
            }
        }
    }
    m
}

/// Block-diagonal dense matrix of an Independent site.
pub fn block_diagonal_expand(w: &[f64], heads: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let (rows, cols) = (heads * d_in, heads * d_out);
    let mut m = vec![0.0; rows * cols];
    for h in 0..heads {
        for i in 0..d_in {
            for o in 0..d_out {
                m[(h * d_in + i) * cols + h * d_out + o] = w[(h * d_in + i) * d_out + o];
            }
        }
    }
    m
}
