//! Modality attention fusion: per-frame softmax weighting of the motion,
//! local and global feature streams.

use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{linear, linear_specs};
use crate::params::{Graph, Init, ParamSpec};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MafMode {
    #[default]
    Attention,
    /// Unweighted mean of the streams.
    Addition,
}

impl MafMode {
    pub fn name(self) -> &'static str {
        match self {
            MafMode::Attention => "attention",
            MafMode::Addition => "addition",
        }
    }
}

impl FromStr for MafMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "attention" => Ok(MafMode::Attention),
            "addition" => Ok(MafMode::Addition),
            other => Err(format!("expected attention|addition, got {other:?}")),
        }
    }
}

/// `maf.we` (`[d,d]`), `maf.ws.w` (`[d]`), `maf.ws.b` (`[1]`), `maf.wc` (`[d,d]`).
pub fn maf_specs(d: usize) -> Vec<ParamSpec> {
    let square = Init::Xavier { fan_in: d, fan_out: d };
    let mut specs = linear_specs("maf.we", d, d, square);
    specs.push(ParamSpec::new("maf.ws.w", [d], Init::Xavier { fan_in: d, fan_out: 1 }));
    specs.push(ParamSpec::new("maf.ws.b", [1], Init::Zeros));
    specs.extend(linear_specs("maf.wc", d, d, square));
    specs
}

fn check_streams<T: Element>(g: &Graph<T>, op: &'static str, streams: &[Var]) -> Result<[usize; 2]> {
    let first = streams
        .first()
        .ok_or_else(|| Error::invalid(op, "no modality streams"))?;
    let s0 = g.shape(*first).to_vec();
    if s0.len() != 2 {
        return Err(Error::invalid(op, format!("expected [N, d] streams, got {s0:?}")));
    }
    for &s in &streams[1..] {
        if g.shape(s) != s0.as_slice() {
            return Err(Error::shape(op, &s0, g.shape(s)));
        }
    }
    Ok([s0[0], s0[1]])
}

/// `e_m = W_sᵀ tanh(W_e f_m + b_e) + b_s` for each stream `[N, d]`, with
/// parameters shared across streams. Returns `[N, streams]`.
pub fn modality_scores<T: Element>(g: &mut Graph<T>, streams: &[Var]) -> Result<Var> {
    let [_, d] = check_streams(g, "modality_scores", streams)?;
    let ws = g.param("maf.ws.w")?;
    let ws = g.reshape(ws, [d, 1])?;
    let bs = g.param("maf.ws.b")?;
    let mut cols = Vec::with_capacity(streams.len());
    for &f in streams {
        let h = linear(g, f, "maf.we")?;
        let h = g.tanh(h)?;
        let e = g.matmul(h, ws)?;
        cols.push(g.add(e, bs)?);
    }
    g.concat(&cols, 1)
}

/// Softmax over the stream axis of `[N, streams]` scores.
pub fn modality_weights<T: Element>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    g.softmax(scores, 1)
}

pub struct MafOutput {
    /// `[N, d]`, entries in `(-1, 1)`.
    pub fused: Var,
    /// `[N, streams]`; for [`MafMode::Addition`] a constant uniform tensor.
    pub weights: Var,
}

/// `f = tanh(W_c Σ_m α_m f_m + b_c)` per frame. Streams must be `[N, d]`.
pub fn fuse_modalities<T: Element>(g: &mut Graph<T>, streams: &[Var], mode: MafMode) -> Result<MafOutput> {
    let [n, _] = check_streams(g, "fuse_modalities", streams)?;
    let k = streams.len();
    let (mixed, weights) = match mode {
        MafMode::Attention => {
            let scores = modality_scores(g, streams)?;
            let alpha = modality_weights(g, scores)?;
            let mut acc: Option<Var> = None;
            for (m, &f) in streams.iter().enumerate() {
                let a = g.narrow(alpha, 1, m, 1)?;
                let term = g.mul(f, a)?;
                acc = Some(match acc {
                    None => term,
                    Some(prev) => g.add(prev, term)?,
                });
            }
            (acc.expect("at least one stream"), alpha)
        }
        MafMode::Addition => {
            let mut acc = streams[0];
            for &f in &streams[1..] {
                acc = g.add(acc, f)?;
            }
            let mean = g.scale(acc, T::one() / T::from_usize(k).expect("count"))?;
            let uniform = Tensor::full([n, k], T::one() / T::from_usize(k).expect("count"));
            (mean, g.input(uniform))
        }
    };
    let out = linear(g, mixed, "maf.wc")?;
    let fused = g.tanh(out)?;
    Ok(MafOutput { fused, weights })
}
