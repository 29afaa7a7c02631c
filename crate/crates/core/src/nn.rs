//! Layers shared by the visual backbone and both sequence encoders.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamSpec};
use crate::tensor::Element;

pub const LN_EPS: f64 = 1e-5;
pub const TRANSFORMER_INIT_STD: f64 = 0.02;

/// `x·w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<T: Element>(g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize, init: Init) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), [fan_in, fan_out], init),
        ParamSpec::new(format!("{prefix}.b"), [fan_out], Init::Zeros),
    ]
}

pub fn layer_norm<T: Element>(g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let shift = g.param(&format!("{prefix}.b"))?;
    g.layer_norm(x, gain, shift, T::lit(LN_EPS))
}

pub fn layer_norm_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.g"), [dim], Init::Ones),
        ParamSpec::new(format!("{prefix}.b"), [dim], Init::Zeros),
    ]
}

/// Pre-norm Transformer encoder shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self, what: &'static str) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid(what, "encoder sizes must be positive"));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(
                what,
                format!("dim {} not divisible by {} heads", self.dim, self.heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Blocks `{prefix}.block{i}.*` plus the final norm `{prefix}.ln_f`.
    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let d = self.dim;
        let w = Init::TruncNormal(TRANSFORMER_INIT_STD);
        let mut specs = Vec::new();
        for i in 0..self.layers {
            let p = format!("{prefix}.block{i}");
            specs.extend(layer_norm_specs(&format!("{p}.ln1"), d));
            for name in ["wq", "wk", "wv", "wo"] {
                specs.push(ParamSpec::new(format!("{p}.attn.{name}"), [d, d], w));
            }
            specs.extend(layer_norm_specs(&format!("{p}.ln2"), d));
            specs.extend(linear_specs(&format!("{p}.ffn.fc1"), d, self.ffn_dim, w));
            specs.extend(linear_specs(&format!("{p}.ffn.fc2"), self.ffn_dim, d, w));
        }
        specs.extend(layer_norm_specs(&format!("{prefix}.ln_f"), d));
        specs
    }
}

/// Output of a multi-sequence encoder pass.
pub struct EncoderOutput {
    /// `[batch·len, dim]`.
    pub out: Var,
    /// One `[batch, heads, len, len]` attention tensor per layer.
    pub attention: Vec<Var>,
}

/// Multi-head self-attention over `batch` independent sequences packed as
/// `x: [batch·len, dim]`. Per head, `softmax(Q Kᵀ/√d_k) V`; the heads are
/// concatenated and projected by `wo`.
pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    prefix: &str,
    batch: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let (rows, dim) = (shape[0], shape[1]);
    if rows % batch != 0 || dim % heads != 0 {
        return Err(Error::invalid(
            "multi_head_attention",
            format!("cannot split {shape:?} into {batch} sequences and {heads} heads"),
        ));
    }
    let len = rows / batch;
    let dk = dim / heads;

    let split = |g: &mut Graph<T>, name: &str| -> Result<Var> {
        let w = g.param(&format!("{prefix}.{name}"))?;
        let p = g.matmul(x, w)?;
        let p = g.reshape(p, [batch, len, heads, dk])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        g.reshape(p, [batch * heads, len, dk])
    };
    let q = split(g, "wq")?;
    let k = split(g, "wk")?;
    let v = split(g, "wv")?;

    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::one() / T::from_usize(dk).expect("dim").sqrt())?;
    let attn = g.softmax(scores, 2)?;
    let ctx = g.batch_matmul(attn, v, false)?;
    let ctx = g.reshape(ctx, [batch, heads, len, dk])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, [rows, dim])?;
    let wo = g.param(&format!("{prefix}.wo"))?;
    let out = g.matmul(ctx, wo)?;
    let maps = g.reshape(attn, [batch, heads, len, len])?;
    Ok((out, maps))
}

/// Pre-norm encoder: per block `x += MHA(LN(x)); x += FFN(LN(x))`, then a
/// final layer norm. No attention mask.
pub fn encoder_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    prefix: &str,
    x: Var,
    batch: usize,
) -> Result<EncoderOutput> {
    let mut h = x;
    let mut attention = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let p = format!("{prefix}.block{i}");
        let n1 = layer_norm(g, h, &format!("{p}.ln1"))?;
        let (a, maps) = multi_head_attention(g, n1, &format!("{p}.attn"), batch, cfg.heads)?;
        attention.push(maps);
        h = g.add(h, a)?;
        let n2 = layer_norm(g, h, &format!("{p}.ln2"))?;
        let f = linear(g, n2, &format!("{p}.ffn.fc1"))?;
        let f = g.gelu(f)?;
        let f = linear(g, f, &format!("{p}.ffn.fc2"))?;
        h = g.add(h, f)?;
    }
    let out = layer_norm(g, h, &format!("{prefix}.ln_f"))?;
    Ok(EncoderOutput { out, attention })
}
