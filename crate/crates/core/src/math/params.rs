use indexmap::IndexMap;
use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named parameter tensors. Order is insertion order and is what
/// checkpoints and the optimizer iterate over.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let (idx, _) = self.params.insert_full(name.into(), t);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.values_mut()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`; those for which `trainable`
    /// returns true are tracked for gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| false)
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let src = other
                .params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape(
                    "load_params",
                    format!("{name}: {:?} vs {:?}", src.shape(), t.shape()),
                ));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, for callers that place parameters on the tape
    /// themselves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter in store order (zeros when untracked).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get(*v)).collect()
    }
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in ±sqrt(1/fan_in), zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_broadcast(y, p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), 1e-5)
    }
}

/// Pre-norm transformer encoder block: fused-QKV self-attention and a GELU
/// feed-forward, each with a residual connection. Input is `[B, N, d]`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, ff, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, heads: usize) -> Result<Var> {
        let [b, n, d]: [usize; 3] = tape
            .shape(x)
            .try_into()
            .map_err(|_| Error::shape("transformer_block", format!("{:?} is not [B, N, d]", tape.shape(x))))?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let y = self.ln1.forward(tape, p, x)?;
        let qkv = self.qkv.forward(tape, p, y)?;
        let qkv = tape.reshape(qkv, &[b, n, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |tape: &mut Tape, i: usize| -> Result<Var> {
            let s = tape.slice(qkv, 0, i, 1)?;
            tape.reshape(s, &[b * heads, n, dh])
        };
        let (q, k, v) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = tape.softmax(scores)?;
        let o = tape.bmm(att, v, false)?;
        let o = tape.reshape(o, &[b, heads, n, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, n, d])?;
        let o = self.out.forward(tape, p, o)?;
        let x = tape.add(x, o)?;
        let y = self.ln2.forward(tape, p, x)?;
        let f = self.ff1.forward(tape, p, y)?;
        let f = tape.gelu(f)?;
        let f = self.ff2.forward(tape, p, f)?;
        tape.add(x, f)
    }
}
