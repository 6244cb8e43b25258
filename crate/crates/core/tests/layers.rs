//! Mixing, norm, attention and FFN layers against loop and expansion
//! oracles.

mod common;

use common::oracle;
use common::{random_vec, rng};
use dstf::attention::{AttentionLayer, ValueSource};
use dstf::ffn::FfnLayer;
use dstf::mixing::{read_routing_csv, write_routing_csv, MixingLinear};
use dstf::norm::ChannelLayerNorm;
use dstf::params::{Graph, ParamStore};
use dstf::tensor::Tensor;
use dstf::MixingStrategy::{self, *};

fn apply(store: &ParamStore<f32>, layer: &MixingLinear, x: &Tensor<f32>) -> Tensor<f32> {
    let g = Graph::new(store, false);
    let xi = g.constant(x.clone());
    (*g.value(layer.apply(&g, xi).unwrap())).clone()
}

fn random_input(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(&mut rng(seed), n, 1.0).into_iter().map(|v| v as f32).collect()).unwrap()
}

#[test]
fn kronecker_identity_is_passthrough() {
    let mut s = ParamStore::<f32>::new(0);
    let m = MixingLinear::new(&mut s, "m", Kronecker, 3, 4, 4, false).unwrap();
    m.import_kronecker(&mut s, Tensor::eye(3)).unwrap();
    let x = random_input(1, &[2, 5, 3, 4]);
    assert_eq!(apply(&s, &m, &x), x);
}

#[test]
fn structured_sites_equal_their_dense_expansion() {
    for seed in 0..100u64 {
        for (h, d) in [(2, 2), (4, 8)] {
            for strategy in [Independent, Kronecker] {
                let mut s = ParamStore::<f32>::new(seed);
                let m = MixingLinear::new(&mut s, "m", strategy, h, d, d, false).unwrap();
                let dense = MixingLinear::new(&mut s, "dense", Dense, h, d, d, false).unwrap();
                let w: Vec<f64> = s.value(m.weight().unwrap()).to_f64_vec();
                let expanded = match strategy {
                    Kronecker => oracle::kronecker_expand(&w, h, d),
                    _ => oracle::block_diagonal_expand(&w, h, d, d),
                };
                s.assign(dense.weight().unwrap(), Tensor::<f64>::from_f64(&[h * d, h * d], &expanded).unwrap().cast()).unwrap();
                let x = random_input(seed + 1000, &[2, 3, h, d]);
                let diff = apply(&s, &m, &x).max_abs_diff(&apply(&s, &dense, &x));
                assert!(diff < 1e-5, "{strategy} h={h} d={d}: {diff}");
            }
        }
    }
}

#[test]
fn independent_widening_matches_oracle() {
    let mut s = ParamStore::<f32>::new(3);
    let m = MixingLinear::new(&mut s, "m", Independent, 2, 3, 5, true).unwrap();
    s.value_mut(m.bias().unwrap()).data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = i as f32 * 0.1);
    let x = random_input(4, &[1, 1, 2, 3]);
    let got = apply(&s, &m, &x).to_f64_vec();
    let w = s.value(m.weight().unwrap()).to_f64_vec();
    let b = s.value(m.bias().unwrap()).to_f64_vec();
    let want = oracle::mix(&x.to_f64_vec(), Independent, &w, &b, 2, 3, 5);
    for (a, e) in got.iter().zip(&want) {
        assert!((a - e).abs() < 1e-6);
    }
}

/// Gradient of output head `i` with respect to input head `j`.
fn cross_head_grad(strategy: MixingStrategy, heads: usize, d: usize) -> Vec<Vec<f64>> {
    let mut s = ParamStore::<f64>::new(9);
    let m = MixingLinear::new(&mut s, "m", strategy, heads, d, d, false).unwrap();
    let mut out = vec![vec![0.0; heads]; heads];
    for i in 0..heads {
        let g = Graph::new(&s, false);
        let x = g.leaf(Tensor::full(&[2, heads, d], 0.7), true);
        let y = m.apply(&g, x).unwrap();
        let mut mask = Tensor::zeros(&[2, heads, d]);
        for b in 0..2 {
            for k in 0..d {
                mask.set(&[b, i, k], 1.0);
            }
        }
        let loss = g.sum(g.mul(y, g.constant(mask)).unwrap());
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for j in 0..heads {
            out[i][j] = (0..2).flat_map(|b| (0..d).map(move |k| (b, k))).map(|(b, k)| grad.at(&[b, j, k]).abs()).sum();
        }
    }
    out
}

#[test]
fn independent_heads_are_isolated() {
    let grads = cross_head_grad(Independent, 4, 3);
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                assert_eq!(grads[i][j], 0.0);
            } else {
                assert!(grads[i][j] > 0.0);
            }
        }
    }
    let dense = cross_head_grad(Dense, 4, 3);
    assert!(dense[0][1] > 0.0);
}

#[test]
fn kronecker_commutes_with_within_head_permutation() {
    let mut s = ParamStore::<f32>::new(5);
    let m = MixingLinear::new(&mut s, "m", Kronecker, 3, 4, 4, false).unwrap();
    let x = random_input(6, &[2, 3, 4]);
    let perm = [2, 0, 3, 1];
    let permute = |t: &Tensor<f32>| {
        let mut out = t.clone();
        for b in 0..2 {
            for h in 0..3 {
                for (k, &p) in perm.iter().enumerate() {
                    out.set(&[b, h, k], t.at(&[b, h, p]));
                }
            }
        }
        out
    };
    assert_eq!(apply(&s, &m, &permute(&x)), permute(&apply(&s, &m, &x)));
}

#[test]
fn routing_roundtrip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ParamStore::<f32>::new(10);
    let m = MixingLinear::new(&mut s, "m", Kronecker, 4, 2, 2, false).unwrap();
    let routing = m.export_kronecker(&s).unwrap();
    let path = dir.path().join("r.csv");
    write_routing_csv(&path, &routing, Some("# test")).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("dst\\src,h0,h1,h2,h3"));

    let mut fresh = ParamStore::<f32>::new(99);
    let m2 = MixingLinear::new(&mut fresh, "m", Kronecker, 4, 2, 2, false).unwrap();
    m2.import_kronecker(&mut fresh, read_routing_csv(&path).unwrap()).unwrap();
    let x = random_input(11, &[3, 4, 2]);
    assert_eq!(apply(&s, &m, &x), apply(&fresh, &m2, &x));
}

#[test]
fn channel_norm_matches_per_head_loop() {
    let mut s = ParamStore::<f64>::new(0);
    let ln = ChannelLayerNorm::new(&mut s, "ln", 32, 4).unwrap();
    let mut r = rng(12);
    s.value_mut(ln.gamma()).data_mut().copy_from_slice(&random_vec(&mut r, 32, 2.0));
    s.value_mut(ln.beta()).data_mut().copy_from_slice(&random_vec(&mut r, 32, 1.0));
    let x = Tensor::from_f64(&[2, 3, 32], &random_vec(&mut r, 192, 3.0)).unwrap();
    let g = Graph::new(&s, false);
    let y = g.value(ln.apply(&g, g.constant(x.clone())).unwrap());
    let gamma = s.value(ln.gamma()).data().to_vec();
    let beta = s.value(ln.beta()).data().to_vec();
    for row in 0..6 {
        let want = oracle::channel_norm(&x.data()[row * 32..(row + 1) * 32], 4, &gamma, &beta);
        for k in 0..32 {
            assert!((y.data()[row * 32 + k] - want[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn single_channel_norm_is_layer_norm() {
    let mut s = ParamStore::<f64>::new(1);
    let cln = ChannelLayerNorm::new(&mut s, "c", 12, 1).unwrap();
    let ln = ChannelLayerNorm::layer_norm(&mut s, "l", 12).unwrap();
    let x = Tensor::from_f64(&[2, 12], &random_vec(&mut rng(2), 24, 2.0)).unwrap();
    let g = Graph::new(&s, false);
    let xi = g.constant(x);
    let a = g.value(cln.apply(&g, xi).unwrap());
    let b = g.value(ln.apply(&g, xi).unwrap());
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn channel_norm_statistics_and_isolation() {
    let mut s = ParamStore::<f64>::new(1);
    let ln = ChannelLayerNorm::new(&mut s, "ln", 16, 4).unwrap();
    let mut x = Tensor::from_f64(&[1, 16], &random_vec(&mut rng(3), 16, 10.0)).unwrap();
    let run = |x: &Tensor<f64>| {
        let g = Graph::new(&s, false);
        (*g.value(ln.apply(&g, g.constant(x.clone())).unwrap())).clone()
    };
    let y = run(&x);
    for h in 0..4 {
        let slice = &y.data()[h * 4..h * 4 + 4];
        let mean = slice.iter().sum::<f64>() / 4.0;
        let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
    }
    x.data_mut()[5] += 3.0;
    let y2 = run(&x);
    assert_eq!(&y.data()[..4], &y2.data()[..4]);
    assert_eq!(&y.data()[8..], &y2.data()[8..]);
}

#[test]
fn channel_norm_cross_head_gradients_are_zero() {
    let mut s = ParamStore::<f64>::new(1);
    let ln = ChannelLayerNorm::new(&mut s, "ln", 8, 2).unwrap();
    let g = Graph::new(&s, false);
    let x = g.leaf(Tensor::from_f64(&[1, 8], &random_vec(&mut rng(4), 8, 1.0)).unwrap(), true);
    let y = ln.apply(&g, x).unwrap();
    let mask = Tensor::from_f64(&[1, 8], &[0.3, -1.0, 2.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
    g.backward(g.sum(g.mul(y, g.constant(mask)).unwrap())).unwrap();
    let grad = g.grad(x).unwrap();
    assert!(grad.data()[4..].iter().all(|&v| v == 0.0));
    assert!(grad.data()[..4].iter().any(|&v| v != 0.0));
}

/// Loop-based attention for B=1, reading the layer's weights.
fn attention_oracle(s: &ParamStore<f64>, layer: &AttentionLayer, x_t: &[f64], x_e: &[f64], t: usize, alpha: f64) -> Vec<f64> {
    let (h, d) = (layer.heads, layer.d_head);
    let dm = h * d;
    let get = |n: &str| s.by_name(n).unwrap().data().to_vec();
    let mut out = vec![0.0; t * dm];
    let q: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let x: Vec<f64> = (0..dm).map(|k| x_t[i * dm + k] + x_e[i * dm + k]).collect();
            oracle::vec_mat(&oracle::channel_norm(&x, h, &get("a.ln_combined.gamma"), &get("a.ln_combined.beta")), &get("a.q.weight"), dm)
        })
        .collect();
    let k: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let x: Vec<f64> = (0..dm).map(|k| x_t[i * dm + k] + x_e[i * dm + k]).collect();
            oracle::vec_mat(&oracle::channel_norm(&x, h, &get("a.ln_combined.gamma"), &get("a.ln_combined.beta")), &get("a.k.weight"), dm)
        })
        .collect();
    let v: Vec<Vec<f64>> = (0..t)
        .map(|i| oracle::vec_mat(&oracle::channel_norm(&x_t[i * dm..(i + 1) * dm], h, &get("a.ln_token.gamma"), &get("a.ln_token.beta")), &get("a.v.weight"), dm))
        .collect();
    for i in 0..t {
        let mut ctx = vec![0.0; dm];
        for head in 0..h {
            let logits: Vec<f64> = (0..=i)
                .map(|j| alpha * (0..d).map(|e| q[i][head * d + e] * k[j][head * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                for e in 0..d {
                    ctx[head * d + e] += (l - m).exp() / z * v[j][head * d + e];
                }
            }
        }
        out[i * dm..(i + 1) * dm].copy_from_slice(&oracle::vec_mat(&ctx, &get("a.o.weight"), dm));
    }
    out
}

#[test]
fn attention_matches_loop_oracle() {
    let mut s = ParamStore::<f64>::new(21);
    let a = AttentionLayer::new(&mut s, "a", 4, 2, Dense, Dense, false, false).unwrap();
    let mut r = rng(22);
    let (x_t, x_e) = (random_vec(&mut r, 12, 1.0), random_vec(&mut r, 12, 1.0));
    for alpha in [1.0, 8.0] {
        let g = Graph::new(&s, false);
        let xt = g.constant(Tensor::from_f64(&[1, 3, 4], &x_t).unwrap());
        let xe = g.constant(Tensor::from_f64(&[1, 3, 4], &x_e).unwrap());
        let out = a.attend(&g, xt, xe, alpha, ValueSource::Token).unwrap();
        let got = g.value(out.delta);
        let want = attention_oracle(&s, &a, &x_t, &x_e, 3, alpha);
        for (x, y) in got.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_is_causal() {
    let mut s = ParamStore::<f64>::new(23);
    let a = AttentionLayer::new(&mut s, "a", 4, 2, Kronecker, Independent, true, false).unwrap();
    let t = 5;
    for i in 0..t {
        let g = Graph::new(&s, false);
        let xt = g.leaf(Tensor::from_f64(&[1, t, 4], &random_vec(&mut rng(24), 4 * t, 1.0)).unwrap(), true);
        let xe = g.leaf(Tensor::from_f64(&[1, t, 4], &random_vec(&mut rng(25), 4 * t, 1.0)).unwrap(), true);
        let out = a.attend(&g, xt, xe, 1.0, ValueSource::Token).unwrap();
        let mut mask = Tensor::zeros(&[1, t, 4]);
        for k in 0..4 {
            mask.set(&[0, i, k], 1.0);
        }
        g.backward(g.sum(g.mul(out.delta, g.constant(mask)).unwrap())).unwrap();
        for x in [xt, xe] {
            let grad = g.grad(x).unwrap();
            for j in i + 1..t {
                for k in 0..4 {
                    assert_eq!(grad.at(&[0, j, k]), 0.0, "position {i} depends on {j}");
                }
            }
        }
    }
}

#[test]
fn uniform_logits_stay_uniform_under_amplification() {
    let mut s = ParamStore::<f64>::new(26);
    let a = AttentionLayer::new(&mut s, "a", 4, 2, Dense, Dense, false, false).unwrap();
    // Zero query weights make every logit zero.
    *s.value_mut(a.q_weight()) = Tensor::zeros(&[4, 4]);
    for alpha in [1.0, 4.0, 16.0] {
        let g = Graph::new(&s, false);
        let x = g.constant(Tensor::from_f64(&[1, 3, 4], &random_vec(&mut rng(27), 12, 1.0)).unwrap());
        let w = g.value(a.attend(&g, x, x, alpha, ValueSource::Token).unwrap().weights);
        for h in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                    assert_eq!(w.at(&[0, h, i, j]), want);
                }
            }
        }
    }
}

#[test]
fn zero_gate_weights_halve_the_output() {
    let mut s = ParamStore::<f64>::new(28);
    let gated = AttentionLayer::new(&mut s, "a", 4, 2, Dense, Dense, true, false).unwrap();
    *s.value_mut(gated.gate_weight().unwrap()) = Tensor::zeros(&[2, 2]);
    let mut s2 = s.clone();
    let plain = AttentionLayer::new(&mut s2, "b", 4, 2, Dense, Dense, false, false).unwrap();
    for suffix in ["ln_combined.gamma", "ln_combined.beta", "ln_token.gamma", "ln_token.beta", "q.weight", "k.weight", "v.weight", "o.weight"] {
        let v = s2.by_name(&format!("a.{suffix}")).unwrap().clone();
        let id = s2.find(&format!("b.{suffix}")).unwrap();
        s2.assign(id, v).unwrap();
    }
    let x = Tensor::from_f64(&[1, 3, 4], &random_vec(&mut rng(29), 12, 1.0)).unwrap();
    let g1 = Graph::new(&s, false);
    let xi = g1.constant(x.clone());
    let out = gated.attend(&g1, xi, xi, 1.0, ValueSource::Token).unwrap();
    assert!(g1.value(out.gates.unwrap()).data().iter().all(|&v| v == 0.5));
    let g2 = Graph::new(&s2, false);
    let xi2 = g2.constant(x);
    let base = plain.attend(&g2, xi2, xi2, 1.0, ValueSource::Token).unwrap();
    let (a, b) = (g1.value(out.delta), g2.value(base.delta));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - 0.5 * y).abs() < 1e-15);
    }
}

#[test]
fn gate_values_lie_in_open_unit_interval() {
    let mut s = ParamStore::<f64>::new(30);
    let a = AttentionLayer::new(&mut s, "a", 8, 4, Kronecker, Kronecker, true, false).unwrap();
    *s.value_mut(a.gate_weight().unwrap()) = Tensor::from_f64(&[4, 2], &random_vec(&mut rng(31), 8, 5.0)).unwrap();
    let g = Graph::new(&s, false);
    let x = g.constant(Tensor::from_f64(&[2, 4, 8], &random_vec(&mut rng(32), 64, 3.0)).unwrap());
    let gates = g.value(a.attend(&g, x, x, 1.0, ValueSource::Token).unwrap().gates.unwrap());
    assert_eq!(gates.shape(), &[2, 4, 4]);
    assert!(gates.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn dense_ffn_is_a_two_layer_mlp() {
    let mut s = ParamStore::<f64>::new(33);
    let f = FfnLayer::new(&mut s, "f", 4, 2, 12, Dense, Dense, false).unwrap();
    let mut r = rng(34);
    let (x_t, x_e) = (random_vec(&mut r, 8, 1.0), random_vec(&mut r, 8, 1.0));
    let g = Graph::new(&s, false);
    let out = f
        .forward(&g, g.constant(Tensor::from_f64(&[1, 2, 4], &x_t).unwrap()), g.constant(Tensor::from_f64(&[1, 2, 4], &x_e).unwrap()))
        .unwrap();
    let got = g.value(out);
    let up = s.by_name("f.up.weight").unwrap().data().to_vec();
    let down = s.by_name("f.down.weight").unwrap().data().to_vec();
    for i in 0..2 {
        let x: Vec<f64> = (0..4).map(|k| x_t[i * 4 + k] + x_e[i * 4 + k]).collect();
        let n = oracle::channel_norm(&x, 2, &[1.0; 4], &[0.0; 4]);
        let hidden: Vec<f64> = oracle::vec_mat(&n, &up, 12).into_iter().map(oracle::gelu).collect();
        let y = oracle::vec_mat(&hidden, &down, 4);
        for k in 0..4 {
            assert!((got.at(&[0, i, k]) - y[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn independent_ffn_isolates_heads() {
    let mut s = ParamStore::<f64>::new(35);
    let f = FfnLayer::new(&mut s, "f", 6, 3, 12, Independent, Independent, false).unwrap();
    let g = Graph::new(&s, false);
    let x = g.leaf(Tensor::from_f64(&[1, 1, 6], &random_vec(&mut rng(36), 6, 1.0)).unwrap(), true);
    let z = g.constant(Tensor::zeros(&[1, 1, 6]));
    let y = f.forward(&g, x, z).unwrap();
    let mask = Tensor::from_f64(&[1, 1, 6], &[0.0, 0.0, 1.0, -2.0, 0.0, 0.0]).unwrap();
    g.backward(g.sum(g.mul(y, g.constant(mask)).unwrap())).unwrap();
    let grad = g.grad(x).unwrap();
    assert_eq!(&grad.data()[..2], &[0.0, 0.0]);
    assert_eq!(&grad.data()[4..], &[0.0, 0.0]);
    assert!(grad.data()[2..4].iter().any(|&v| v != 0.0));
}
