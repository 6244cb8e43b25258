//! Central finite differences in 64-bit. Every check returns the worst
//! relative error so callers decide the tolerance.

use dstf::data::Batch;
use dstf::model::{Model, StreamMode, Supervision, SupervisionSchedule};
use dstf::{Graph, MixingSignature, NodeId, Tape, Tensor};

use super::{random_ids, random_vec, rel_err, rng, tiny_config};

pub const STEP: f64 = 1e-5;

type OpFn<'a> = &'a dyn Fn(&Tape<f64>, &[NodeId]) -> NodeId;

/// `sum(f(inputs) ⊙ R)` for a fixed random `R`; the weighting keeps
/// symmetric outputs from hiding errors.
fn weighted_loss(inputs: &[Tensor<f64>], f: OpFn, track: bool) -> (f64, Vec<Option<Tensor<f64>>>) {
    let tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&tape, &ids);
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let mut r = rng(n as u64 + 99);
    let weights = tape.constant(Tensor::new(shape, random_vec(&mut r, n, 1.0)).unwrap());
    let loss = tape.sum(tape.mul(out, weights).unwrap());
    let value = tape.value(loss).item();
    if track {
        tape.backward(loss).unwrap();
    }
    (value, ids.iter().map(|&i| tape.grad(i)).collect())
}

/// Worst relative error over every element of every input.
pub fn check(inputs: Vec<Tensor<f64>>, f: OpFn) -> f64 {
    let (_, grads) = weighted_loss(&inputs, f, true);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let Some(g) = grads[k].as_ref() else { return f64::INFINITY };
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= STEP;
            let numeric = (weighted_loss(&plus, f, false).0 - weighted_loss(&minus, f, false).0) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    worst
}

pub fn rand_t(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(&mut rng(seed), n, 1.0)).unwrap()
}

fn positive_t(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rand_t(seed, shape).map(|x| x.abs() + 0.5)
}

/// Every differentiable tape op, plus random DAGs with shared nodes.
pub fn op_checks() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: OpFn| out.push((name.to_string(), check(inputs, f)));
    let (a, b) = (rand_t(1, &[2, 3]), rand_t(2, &[2, 3]));
    run("add", vec![a.clone(), b.clone()], &|t, x| t.add(x[0], x[1]).unwrap());
    run("sub", vec![a.clone(), b.clone()], &|t, x| t.sub(x[0], x[1]).unwrap());
    run("mul", vec![a.clone(), b.clone()], &|t, x| t.mul(x[0], x[1]).unwrap());
    run("scale", vec![a.clone()], &|t, x| t.scale(x[0], -2.5));
    run("gelu", vec![rand_t(3, &[4, 5]).map(|x| 3.0 * x)], &|t, x| t.gelu(x[0]));
    run("sigmoid", vec![rand_t(4, &[7]).map(|x| 4.0 * x)], &|t, x| t.sigmoid(x[0]));

    let x = rand_t(5, &[2, 3, 4]);
    run("reshape", vec![x.clone()], &|t, v| t.reshape(v[0], &[6, 4]).unwrap());
    run("permute", vec![x.clone()], &|t, v| t.permute(v[0], &[2, 0, 1]).unwrap());
    run("transpose", vec![x.clone()], &|t, v| t.transpose_last(v[0]).unwrap());
    run("split_heads", vec![rand_t(6, &[2, 3, 6])], &|t, v| t.split_heads(v[0], 3).unwrap());
    run("merge_heads", vec![rand_t(7, &[2, 3, 2, 2])], &|t, v| t.merge_heads(v[0]).unwrap());
    run("concat", vec![rand_t(8, &[2, 1, 3]), rand_t(9, &[2, 2, 3])], &|t, v| t.concat(&[v[0], v[1]], 1).unwrap());

    run("matmul", vec![rand_t(10, &[3, 4]), rand_t(11, &[4, 2])], &|t, v| t.matmul(v[0], v[1]).unwrap());
    run("batched matmul", vec![rand_t(12, &[2, 3, 4]), rand_t(13, &[2, 4, 5])], &|t, v| t.matmul(v[0], v[1]).unwrap());
    run("linear", vec![rand_t(14, &[2, 3, 4]), rand_t(15, &[4, 3])], &|t, v| t.linear(v[0], v[1]).unwrap());

    let s = rand_t(18, &[2, 3, 4]).map(|v| 2.0 * v);
    for scale in [1.0, 3.0] {
        run(&format!("softmax last x{scale}"), vec![s.clone()], &|t, v| t.softmax(v[0], 2, scale).unwrap());
        run(&format!("softmax middle x{scale}"), vec![s.clone()], &|t, v| t.softmax(v[0], 1, scale).unwrap());
        run(&format!("causal softmax x{scale}"), vec![rand_t(19, &[2, 4, 4])], &|t, v| t.causal_softmax(v[0], scale).unwrap());
    }

    run("normalize", vec![rand_t(20, &[3, 5])], &|t, v| t.normalize_last(v[0], 1e-5));
    run("add_trailing", vec![rand_t(21, &[2, 3, 4]), rand_t(22, &[3, 4])], &|t, v| t.add_trailing(v[0], v[1]).unwrap());
    run("mul_trailing", vec![rand_t(23, &[2, 3, 4]), rand_t(24, &[4])], &|t, v| t.mul_trailing(v[0], v[1]).unwrap());
    run("scale_rows", vec![rand_t(25, &[2, 3, 4]), rand_t(26, &[2, 3])], &|t, v| t.scale_rows(v[0], v[1]).unwrap());

    let r = rand_t(27, &[2, 3, 4]);
    run("sum", vec![r.clone()], &|t, v| t.sum(v[0]));
    run("mean", vec![r.clone()], &|t, v| t.mean(v[0]));
    run("mean_last", vec![r.clone()], &|t, v| t.mean_last(v[0]));
    run("var_last", vec![r.clone()], &|t, v| t.var_last(v[0]));

    let ids = [2usize, 0, 2, 1, 3, 3];
    run("embedding", vec![rand_t(28, &[4, 3])], &|t, v| t.embedding(v[0], &ids, &[2, 3]).unwrap());
    let targets = [1usize, 0, dstf::tensor::IGNORE_TARGET, 4, 2, 2];
    run("cross_entropy", vec![rand_t(29, &[2, 3, 5])], &|t, v| t.cross_entropy(v[0], &targets).unwrap());

    for seed in 0..5 {
        let inputs = vec![rand_t(100 + seed, &[3, 4]), positive_t(200 + seed, &[4, 4])];
        run(&format!("dag {seed}"), inputs, &|t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            let z = t.add(y, t.gelu(y)).unwrap();
            let s = t.sigmoid(v[0]);
            let m = t.matmul(t.mul(z, s).unwrap(), v[1]).unwrap();
            let n = t.normalize_last(t.add(m, y).unwrap(), 1e-5);
            t.add(n, t.softmax(m, 1, 2.0).unwrap()).unwrap()
        });
    }
    out
}

/// Worst relative error over every parameter of the model against central
/// differences of the full training loss, with the offending name.
pub fn check_model(model: &mut Model<f64>, batch: &Batch) -> (f64, String) {
    let grads = {
        let g = Graph::new(model.params(), true);
        let loss = model.loss_graph(&g, batch).unwrap();
        g.backward(loss).unwrap();
        g.param_grads()
    };
    let mut worst = (0.0, String::new());
    for p in 0..model.params().len() {
        let id = dstf::ParamId::from_index(p);
        let analytic = grads[p].clone().unwrap_or_else(|| Tensor::zeros(model.params().value(id).shape()));
        for j in 0..analytic.len() {
            let orig = model.params().value(id).data()[j];
            model.params_mut().value_mut(id).data_mut()[j] = orig + STEP;
            let plus = model.loss(batch).unwrap();
            model.params_mut().value_mut(id).data_mut()[j] = orig - STEP;
            let minus = model.loss(batch).unwrap();
            model.params_mut().value_mut(id).data_mut()[j] = orig;
            let err = rel_err(analytic.data()[j], (plus - minus) / (2.0 * STEP));
            if err > worst.0 {
                worst = (err, format!("{}[{j}]", model.params().get(id).name));
            }
        }
    }
    worst
}

/// Two-layer models over every stream mode and four signatures, with
/// gating, biases and tying spread across them.
pub fn model_checks() -> Vec<(String, f64)> {
    let mut r = rng(31);
    let sigs = ["dns-dns/dns-dns", "kron-kron/dns-dns", "ind-ind/ind-ind", "id-kron/kron-ind"];
    let mut out = Vec::new();
    for (k, mode) in StreamMode::ALL.into_iter().enumerate() {
        for (s, sig) in sigs.iter().enumerate() {
            let mut cfg = tiny_config(mode, sig.parse::<MixingSignature>().unwrap(), 40 + (k * 4 + s) as u64);
            cfg.gated = s % 2 == 1;
            cfg.mixing_bias = s == 3;
            cfg.tie_embeddings = s == 2;
            let mut model = Model::<f64>::new(cfg).unwrap();
            // Perturb norm parameters and biases away from their symmetric init.
            for p in model.params_mut().iter_mut() {
                if p.name.ends_with("gamma") || p.name.ends_with("beta") || p.name.ends_with("bias") {
                    let noise = random_vec(&mut r, p.value.len(), 0.3);
                    p.value.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v += n);
                }
            }
            let ids = random_ids(&mut r, 2 * 5, 13);
            let batch = Batch::from_windows([&ids[..5], &ids[5..]], 4);
            let (err, at) = check_model(&mut model, &batch);
            out.push((format!("{mode} {sig} ({at})"), err));
        }
    }
    let mut cfg = tiny_config(StreamMode::TokenFactor, "kron-kron/dns-dns".parse().unwrap(), 77);
    cfg.n_layers = 3;
    cfg.supervision = Supervision { enabled: true, lambda: 0.3, schedule: SupervisionSchedule::Exponential };
    let mut model = Model::<f64>::new(cfg).unwrap();
    let ids = random_ids(&mut rng(78), 5, 13);
    let (err, at) = check_model(&mut model, &Batch::from_windows([&ids[..]], 4));
    out.push((format!("supervised L=3 ({at})"), err));
    out
}
