//! Parameterized building blocks composed from graph primitives.

use rand::Rng as _;

use super::{Array, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Glorot-uniform matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Array {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Array::matrix(rows, cols, data)
}

/// Uniform `[-scale, scale)` matrix.
pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Array {
    let data = (0..rows * cols)
        .map(|_| if scale > 0.0 { rng.random_range(-scale..scale) } else { 0.0 })
        .collect();
    Array::matrix(rows, cols, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), glorot(in_dim, out_dim, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Array::zeros(&[1, out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Array::ones(&[1, dim]))?,
            bias: store.add(format!("{name}.bias"), Array::zeros(&[1, dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention: per-head scaled dot products, heads concatenated,
/// then an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: width {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// `queries` attend over `context`; `head_bias[h]`, when given, is added
    /// to head `h`'s logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        context: Var,
        head_bias: Option<&[Var]>,
    ) -> Result<Var> {
        if let Some(b) = head_bias {
            if b.len() != self.heads {
                return Err(Error::Contract(format!(
                    "{} bias tensors for {} heads",
                    b.len(),
                    self.heads
                )));
            }
        }
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, context)?;
        let v = self.value.forward(g, store, context)?;
        let merged = g.multi_head_attention(q, k, v, self.heads, head_bias.unwrap_or(&[]))?;
        self.output.forward(g, store, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim)?,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ff_hidden, true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_hidden, dim, true, rng)?,
        })
    }

    /// Multiplies the weights that write into the residual stream, so a
    /// fresh block starts close to the identity.
    pub fn scale_residual_init(&self, store: &mut ParamStore, factor: f64) {
        for id in [self.attn.output.weight, self.ff_out.weight] {
            store.value_mut(id).data_mut().iter_mut().for_each(|w| *w *= factor);
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        head_bias: Option<&[Var]>,
    ) -> Result<Var> {
        let h = self.norm_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, head_bias)?;
        let x = g.add(x, a)?;
        let h = self.norm_ff.forward(g, store, x)?;
        let h = self.ff_in.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.ff_out.forward(g, store, h)?;
        g.add(x, h)
    }
}
