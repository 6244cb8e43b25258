use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// L2 norm over all gradient tensors together.
pub fn global_norm<F: Real>(grads: &[Option<Tensor<F>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the factor applied (1 when already within bounds).
pub fn clip_global_norm<F: Real>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    let f = F::lit(factor);
    for g in grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|x| *x *= f);
    }
    factor
}

/// Adam with decoupled weight decay. Decay applies only to parameters
/// whose kind opts in (dense, mixing and gate weights).
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Option<Tensor<F>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![F::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one, eps, lr_f) = (F::one(), F::lit(self.eps), F::lit(lr));
        let c1 = F::lit(1.0 - self.beta1.powi(t));
        let c2 = F::lit(1.0 - self.beta2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            assert_eq!(self.m[i].len(), p.value.len(), "moment shape of {}", p.name);
            let decay = if p.kind.decays() { F::lit(lr * self.weight_decay) } else { F::zero() };
            let g = grads[i].as_ref().map(|g| g.data());
            if let Some(g) = g {
                assert_eq!(g.len(), p.value.len(), "gradient shape of {}", p.name);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(F::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= decay * *theta;
                *theta -= lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
