//! Named parameter storage and the forward-pass context.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// 64-bit FNV-1a; used to derive a per-parameter RNG stream from its name.
pub(crate) fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Ordered map of named parameters.
///
/// Initial values depend only on the seed and the parameter's name, so two
/// models that share a parameter name share its initial value regardless of
/// which other components were constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    seed: u64,
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: IndexMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> String {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(fnv1a(name));
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut rng)))
            }
        };
        assert!(
            self.params.insert(name.to_string(), t).is_none(),
            "parameter `{name}` registered twice"
        );
        name.to_string()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::DimMismatch {
                op: "ParamStore::set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// One forward evaluation: a fresh tape plus the parameter bindings made on it.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamStore<T>,
    bound: HashMap<String, Var>,
    frozen_prefixes: Vec<String>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// Inference context: no dropout.
    pub fn eval(params: &'a ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            frozen_prefixes: Vec::new(),
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training context with dropout probability `dropout` drawn from `rng`.
    pub fn train(params: &'a ParamStore<T>, dropout: f64, rng: ChaCha8Rng) -> Self {
        Ctx {
            dropout,
            rng: Some(rng),
            ..Ctx::eval(params)
        }
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    /// Binds a parameter on the tape once; later calls reuse the same node.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let v = if self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
            self.tape.constant(value)
        } else {
            self.tape.leaf(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.dropout;
        match &mut self.rng {
            Some(rng) if p > 0.0 => {
                let n = self.tape.value(x).numel();
                let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= p).collect();
                self.tape.dropout(x, &keep, p)
            }
            _ => Ok(x),
        }
    }

    /// Gradients of every trainable parameter bound on this tape, in binding
    /// order. Call after `tape.backward`.
    pub fn param_grads(&self) -> IndexMap<String, Tensor<T>> {
        let mut out: Vec<(&String, &Var)> = self.bound.iter().collect();
        out.sort_by_key(|(_, v)| v.index());
        out.into_iter()
            .filter_map(|(k, &v)| self.tape.grad(v).map(|g| (k.clone(), g)))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }
}
