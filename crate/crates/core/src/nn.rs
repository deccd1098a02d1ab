//! Parameterized layers. Each layer only remembers parameter names and
//! extents; the values live in a [`ParamStore`] and are bound to a [`Tape`]
//! on every forward pass.

use crate::autodiff::{AttnMask, Tape, Var};
use crate::error::{AsuError, Result};
use crate::rng::Prng;
use crate::tensor::{ParamStore, Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// `x · W + b` with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut Prng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt();
        Self::init_with_std(store, rng, name, in_dim, out_dim, bias, std)
    }

    pub fn init_with_std<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut Prng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = join(name, "weight");
        store.insert(&weight, Tensor::randn(&[in_dim, out_dim], std, rng))?;
        let bias = if bias {
            let b = join(name, "bias");
            store.insert(&b, Tensor::zeros(&[out_dim]))?;
            Some(b)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_tiled(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gain = join(name, "gain");
        let bias = join(name, "bias");
        store.insert(&gain, Tensor::ones(&[dim]))?;
        store.insert(&bias, Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, &self.gain)?;
        let b = tape.param(store, &self.bias)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two affine layers with a GELU between; hidden width `ratio · dim`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut Prng, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::init(store, rng, &join(name, "fc1"), dim, hidden, true)?,
            fc2: Linear::init(store, rng, &join(name, "fc2"), hidden, out, true)?,
        })
    }

    pub fn with_ratio<T: Real>(store: &mut ParamStore<T>, rng: &mut Prng, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        Self::init(store, rng, name, dim, ratio * dim, dim)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut Prng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(AsuError::Dimension(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::init(store, rng, &join(name, "q"), dim, dim, true)?,
            k: Linear::init(store, rng, &join(name, "k"), dim, dim, true)?,
            v: Linear::init(store, rng, &join(name, "v"), dim, dim, true)?,
            out: Linear::init(store, rng, &join(name, "out"), dim, dim, true)?,
            heads,
        })
    }

    /// `query` is `[groups·lq × d]`; `key`/`value` are `[groups·lk × d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        key: Var,
        value: Var,
        groups: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, key)?;
        let v = self.v.forward(tape, store, value)?;
        let a = tape.attention(q, k, v, self.heads, groups, mask)?;
        self.out.forward(tape, store, a)
    }
}

/// Residual cross-attention block `c = a + MHA(a, b, b); out = c + MLP(c)`,
/// with pre-normalization of the query, key/value and MLP inputs.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut Prng, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(CrossAttentionBlock {
            norm_q: LayerNorm::init(store, &join(name, "norm_q"), dim)?,
            norm_kv: LayerNorm::init(store, &join(name, "norm_kv"), dim)?,
            attn: MultiHeadAttention::init(store, rng, &join(name, "attn"), dim, heads)?,
            norm_mlp: LayerNorm::init(store, &join(name, "norm_mlp"), dim)?,
            mlp: Mlp::with_ratio(store, rng, &join(name, "mlp"), dim, mlp_ratio)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        context: Var,
        groups: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let qn = self.norm_q.forward(tape, store, query)?;
        let kv = self.norm_kv.forward(tape, store, context)?;
        let a = self.attn.forward(tape, store, qn, kv, kv, groups, mask)?;
        let c = tape.add(query, a)?;
        let cn = self.norm_mlp.forward(tape, store, c)?;
        let m = self.mlp.forward(tape, store, cn)?;
        tape.add(c, m)
    }
}

/// Pre-norm self-attention transformer block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn init<T: Real>(store: &mut ParamStore<T>, rng: &mut Prng, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::init(store, &join(name, "norm1"), dim)?,
            attn: MultiHeadAttention::init(store, rng, &join(name, "attn"), dim, heads)?,
            norm2: LayerNorm::init(store, &join(name, "norm2"), dim)?,
            mlp: Mlp::with_ratio(store, rng, &join(name, "mlp"), dim, mlp_ratio)?,
        })
    }

    /// `x` is `[groups·len × d]`; tokens attend within their own group.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, groups: usize) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h, h, groups, None)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }
}

/// Overwrites every parameter under `prefix` with zeros.
pub fn zero_params<T: Real>(store: &mut ParamStore<T>, prefix: &str) {
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        p.tensor.data_mut().iter_mut().for_each(|x| *x = T::zero());
    }
}

/// Sets a square weight matrix to the identity.
pub fn set_identity<T: Real>(store: &mut ParamStore<T>, name: &str) -> Result<()> {
    let p = store
        .get_mut(name)
        .ok_or_else(|| AsuError::Invalid(format!("unknown parameter {name}")))?;
    let shape = p.tensor.shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(AsuError::Dimension(format!("{name} is not square: {shape:?}")));
    }
    p.tensor.data_mut().copy_from_slice(Tensor::<T>::eye(shape[0]).data());
    Ok(())
}
