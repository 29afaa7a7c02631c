//! Depth-guided attention: depth feature maps gate the channels and spatial
//! positions of a paired guided stream (local RGB or global semantics).

use std::str::FromStr;

use crate::autodiff::{PoolMode, Var};
use crate::error::{Error, Result};
use crate::nn::linear;
use crate::params::{Graph, Init, ParamSpec};
use crate::tensor::Element;

/// How the guided and depth streams are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DgaMode {
    #[default]
    Attention,
    /// `down_guided(f) + down_depth(d)`, no attention.
    Addition,
}

impl DgaMode {
    pub fn name(self) -> &'static str {
        match self {
            DgaMode::Attention => "attention",
            DgaMode::Addition => "addition",
        }
    }
}

impl FromStr for DgaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "attention" => Ok(DgaMode::Attention),
            "addition" => Ok(DgaMode::Addition),
            other => Err(format!("expected attention|addition, got {other:?}")),
        }
    }
}

/// The two co-registered pairs, each with its own parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgaPair {
    Local,
    Global,
}

impl DgaPair {
    pub fn prefix(self) -> &'static str {
        match self {
            DgaPair::Local => "dga.local",
            DgaPair::Global => "dga.global",
        }
    }
}

/// Parameters of one pair: 1×1 kernels `down_guided`, `down_depth`
/// (`[C_f, D_v, 1, 1]`), the channel FC `ca` (`[C_f, C_f]`) and the spatial
/// kernel `sa` (`[1, 2, 3, 3]`), all with biases.
pub fn dga_specs(prefix: &str, in_dim: usize, c_f: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for stream in ["down_guided", "down_depth"] {
        specs.push(ParamSpec::new(
            format!("{prefix}.{stream}.w"),
            [c_f, in_dim, 1, 1],
            Init::Xavier {
                fan_in: in_dim,
                fan_out: c_f,
            },
        ));
        specs.push(ParamSpec::new(format!("{prefix}.{stream}.b"), [c_f], Init::Zeros));
    }
    specs.push(ParamSpec::new(
        format!("{prefix}.ca.w"),
        [c_f, c_f],
        Init::Xavier {
            fan_in: c_f,
            fan_out: c_f,
        },
    ));
    specs.push(ParamSpec::new(format!("{prefix}.ca.b"), [c_f], Init::Zeros));
    specs.push(ParamSpec::new(
        format!("{prefix}.sa.w"),
        [1, 2, 3, 3],
        Init::Xavier { fan_in: 18, fan_out: 9 },
    ));
    specs.push(ParamSpec::new(format!("{prefix}.sa.b"), [1], Init::Zeros));
    specs
}

/// 1×1 convolution `[D_v,G,G] → [C_f,G,G]` with the `{prefix}.{stream}` kernel.
pub fn downsample<T: Element>(g: &mut Graph<T>, f: Var, prefix: &str, stream: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.{stream}.w"))?;
    let b = g.param(&format!("{prefix}.{stream}.b"))?;
    g.conv2d(f, w, b)
}

fn check_pair<T: Element>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb || sa.len() != 3 {
        return Err(Error::shape(op, sa, sb));
    }
    Ok(())
}

/// Channel attention `CA = σ(FC(avgpool(d) + maxpool(d)))`, applied per
/// channel to `guided`. Returns the enhanced map and `CA: [C_f]`.
pub fn dgca<T: Element>(g: &mut Graph<T>, guided: Var, depth: Var, prefix: &str) -> Result<(Var, Var)> {
    check_pair(g, "dgca", guided, depth)?;
    let c = g.shape(depth)[0];
    let avg = g.pool(depth, PoolMode::SpatialAvg)?;
    let max = g.pool(depth, PoolMode::SpatialMax)?;
    let pooled = g.add(avg, max)?;
    let pooled = g.reshape(pooled, [1, c])?;
    let logits = linear(g, pooled, &format!("{prefix}.ca"))?;
    let logits = g.reshape(logits, [c])?;
    let ca = g.sigmoid(logits)?;
    let out = g.broadcast_mul(ca, guided)?;
    Ok((out, ca))
}

/// Spatial attention `SA = σ(conv3×3([chan_avg(d); chan_max(d)]))`, applied
/// at every channel of `enhanced`. Returns the output and `SA: [1,G,G]`.
pub fn dgsa<T: Element>(g: &mut Graph<T>, enhanced: Var, depth: Var, prefix: &str) -> Result<(Var, Var)> {
    check_pair(g, "dgsa", enhanced, depth)?;
    let avg = g.pool(depth, PoolMode::ChannelAvg)?;
    let max = g.pool(depth, PoolMode::ChannelMax)?;
    let stacked = g.concat(&[avg, max], 0)?;
    let w = g.param(&format!("{prefix}.sa.w"))?;
    let b = g.param(&format!("{prefix}.sa.b"))?;
    let logits = g.conv2d(stacked, w, b)?;
    let sa = g.sigmoid(logits)?;
    let out = g.broadcast_mul(sa, enhanced)?;
    Ok((out, sa))
}

/// One frame through the block.
pub struct DgaFrame {
    /// Pooled feature `[C_f]`.
    pub feature: Var,
    /// `[C_f]`, attention mode only.
    pub channel_attention: Option<Var>,
    /// `[1,G,G]`, attention mode only.
    pub spatial_attention: Option<Var>,
}

/// Downsample both streams, apply channel then spatial attention, and
/// global-average-pool to a `[C_f]` vector.
pub fn dga_fuse<T: Element>(
    g: &mut Graph<T>,
    guided: Var,
    depth: Var,
    prefix: &str,
    mode: DgaMode,
) -> Result<DgaFrame> {
    check_pair(g, "dga_fuse", guided, depth)?;
    let fg = downsample(g, guided, prefix, "down_guided")?;
    let fd = downsample(g, depth, prefix, "down_depth")?;
    match mode {
        DgaMode::Attention => {
            let (fc, ca) = dgca(g, fg, fd, prefix)?;
            let (fs, sa) = dgsa(g, fc, fd, prefix)?;
            Ok(DgaFrame {
                feature: g.pool(fs, PoolMode::GlobalAvg)?,
                channel_attention: Some(ca),
                spatial_attention: Some(sa),
            })
        }
        DgaMode::Addition => {
            let sum = g.add(fg, fd)?;
            Ok(DgaFrame {
                feature: g.pool(sum, PoolMode::GlobalAvg)?,
                channel_attention: None,
                spatial_attention: None,
            })
        }
    }
}

/// Frame sequence through the block.
pub struct DgaSequence {
    /// `[N, C_f]`.
    pub features: Var,
    pub channel_attention: Vec<Var>,
    pub spatial_attention: Vec<Var>,
}

/// Apply [`dga_fuse`] to every frame of `[N, D_v, G, G]` stacks.
pub fn dga_sequence<T: Element>(
    g: &mut Graph<T>,
    guided: Var,
    depth: Var,
    prefix: &str,
    mode: DgaMode,
) -> Result<DgaSequence> {
    let (sg, sd) = (g.shape(guided).to_vec(), g.shape(depth).to_vec());
    if sg != sd || sg.len() != 4 {
        return Err(Error::shape("dga_sequence", &sg, &sd));
    }
    let frame_shape = sg[1..].to_vec();
    let mut rows = Vec::with_capacity(sg[0]);
    let mut out = DgaSequence {
        features: guided,
        channel_attention: Vec::new(),
        spatial_attention: Vec::new(),
    };
    for f in 0..sg[0] {
        let fg = g.narrow(guided, 0, f, 1)?;
        let fg = g.reshape(fg, frame_shape.clone())?;
        let fd = if depth == guided {
            fg
        } else {
            let fd = g.narrow(depth, 0, f, 1)?;
            g.reshape(fd, frame_shape.clone())?
        };
        let frame = dga_fuse(g, fg, fd, prefix, mode)?;
        let c = g.shape(frame.feature)[0];
        rows.push(g.reshape(frame.feature, [1, c])?);
        out.channel_attention.extend(frame.channel_attention);
        out.spatial_attention.extend(frame.spatial_attention);
    }
    out.features = g.concat(&rows, 0)?;
    Ok(out)
}
