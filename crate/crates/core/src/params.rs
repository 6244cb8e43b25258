//! Named parameter storage, deterministic initialization, and binding of
//! parameters onto a tape.

use std::cell::RefCell;
use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::MixingStrategy;
use crate::real::Real;
use crate::tensor::{NodeId, Tape, Tensor};

/// Standard deviation of the normal initializer for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// What a parameter is used for; drives weight decay and the census table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Norm,
    Dense,
    Mixing(MixingStrategy),
    Bias,
    Gate,
}

impl ParamKind {
    /// Norm gains/offsets, biases and embeddings are excluded from decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Dense | ParamKind::Mixing(_) | ParamKind::Gate)
    }

    pub fn label(self) -> String {
        match self {
            ParamKind::Embedding => "embedding".into(),
            ParamKind::Norm => "norm".into(),
            ParamKind::Dense => "dense".into(),
            ParamKind::Mixing(s) => s.token().into(),
            ParamKind::Bias => "bias".into(),
            ParamKind::Gate => "gate".into(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Identity matrix plus normal noise (square shapes only).
    IdentityNoise(f64),
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub kind: ParamKind,
}

/// All trainable tensors of a model, in registration order.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    seed: u64,
    params: Vec<Param<F>>,
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator dedicated to one named parameter.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(name))
}

impl<F: Real> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self { seed, params: Vec::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, shape: &[usize], kind: ParamKind, init: Init) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let n: usize = shape.iter().product();
        let mut rng = param_rng(self.seed, name);
        let mut normal = |std: f64| -> F {
            let z: f64 = StandardNormal.sample(&mut rng);
            F::lit(z * std)
        };
        let data: Vec<F> = match init {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Normal(std) => (0..n).map(|_| normal(std)).collect(),
            Init::IdentityNoise(std) => {
                assert!(shape.len() == 2 && shape[0] == shape[1], "identity init needs a square shape");
                (0..n)
                    .map(|i| {
                        let eye = if i / shape[1] == i % shape[1] { 1.0 } else { 0.0 };
                        F::lit(eye) + normal(std)
                    })
                    .collect()
            }
        };
        let value = Tensor::new(shape.to_vec(), data).expect("shape/data agree");
        self.params.push(Param { name: name.to_string(), value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<F>> {
        self.find(name)
            .map(|id| self.value(id))
            .ok_or_else(|| Error::Usage(format!("no parameter named {name}")))
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(crate::error::shape_mismatch(&p.name, p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), kind: p.kind })
                .collect(),
        }
    }
}

/// A tape plus lazily bound parameters.
///
/// Each parameter is copied onto the tape the first time a module asks for
/// it. With `trainable` set the copies are gradient-tracking leaves and
/// [`Graph::param_grads`] collects their gradients after
/// [`Tape::backward`].
pub struct Graph<'p, F: Real> {
    tape: Tape<F>,
    params: &'p ParamStore<F>,
    bound: RefCell<Vec<Option<NodeId>>>,
    trainable: bool,
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>, trainable: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: RefCell::new(vec![None; params.len()]),
            trainable,
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    pub fn store(&self) -> &'p ParamStore<F> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound.borrow()[id.0] {
            return n;
        }
        let n = self.tape.leaf(self.params.value(id).clone(), self.trainable);
        self.bound.borrow_mut()[id.0] = Some(n);
        n
    }

    /// Gradients per parameter (None for parameters never used).
    pub fn param_grads(&self) -> Vec<Option<Tensor<F>>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.and_then(|n| self.tape.grad(n)))
            .collect()
    }
}

impl<F: Real> Deref for Graph<'_, F> {
    type Target = Tape<F>;

    fn deref(&self) -> &Tape<F> {
        &self.tape
    }
}
