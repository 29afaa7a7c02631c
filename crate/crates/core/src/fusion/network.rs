//! The assembled network: visual backbones and depth-guided attention, the
//! motion encoder, modality fusion, temporal fusion and the head.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::data::Sample;
use crate::dga::{dga_sequence, dga_specs, DgaMode, DgaPair};
use crate::error::{Error, Result};
use crate::fusion::head::{head_specs, predict_head, Dropout};
use crate::fusion::maf::{fuse_modalities, maf_specs, MafMode};
use crate::fusion::taf::{taf_forward, taf_specs};
use crate::mfe::{mfe_forward, MfeConfig};
use crate::nn::EncoderConfig;
use crate::params::{Graph, ParamSpec};
use crate::tensor::{Element, Tensor};
use crate::vfe::{vit_forward_batch, VisualModality, VitConfig};

/// Named ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Full,
    /// Visual branch only.
    V3,
    /// Motion branch only.
    V4,
    /// No depth inputs; each guided stream guides itself.
    V5,
    /// Depth-guided attention replaced by feature addition.
    V6,
    /// Modality attention replaced by an unweighted mean.
    V7,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::V3,
        Variant::V4,
        Variant::V5,
        Variant::V6,
        Variant::V7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
            Variant::V5 => "v5",
            Variant::V6 => "v6",
            Variant::V7 => "v7",
        }
    }

    pub fn toggles(self) -> Toggles {
        let full = Toggles::default();
        match self {
            Variant::Full => full,
            Variant::V3 => Toggles { motion: false, ..full },
            Variant::V4 => Toggles { visual: false, ..full },
            Variant::V5 => Toggles { depth: false, ..full },
            Variant::V6 => Toggles {
                dga: DgaMode::Addition,
                ..full
            },
            Variant::V7 => Toggles {
                maf: MafMode::Addition,
                ..full
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("expected one of full|v3|v4|v5|v6|v7, got {s:?}"))
    }
}

/// Branch and block switches behind the variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub visual: bool,
    pub motion: bool,
    pub depth: bool,
    pub dga: DgaMode,
    pub maf: MafMode,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            visual: true,
            motion: true,
            depth: true,
            dga: DgaMode::Attention,
            maf: MafMode::Attention,
        }
    }
}

/// Columns of the modality-weight diagnostics.
pub const MODALITY_NAMES: [&str; 3] = ["motion", "local", "global"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vit: VitConfig,
    /// Shared feature width: motion embedding, DGA output channels, fusion
    /// and temporal encoder width.
    pub feature_dim: usize,
    pub mfe_layers: usize,
    pub mfe_heads: usize,
    pub taf_layers: usize,
    pub taf_heads: usize,
    pub ffn_mult: usize,
    pub frames: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vit: VitConfig::default(),
            feature_dim: 32,
            mfe_layers: 2,
            mfe_heads: 4,
            taf_layers: 2,
            taf_heads: 4,
            ffn_mult: 4,
            frames: 16,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Full-size settings: 224px images, ViT-Base backbones, 256-wide features.
    pub fn base() -> Self {
        ModelConfig {
            vit: VitConfig {
                image_size: 224,
                patch_size: 16,
                embed_dim: 768,
                depth: 12,
                heads: 12,
                ffn_mult: 4,
            },
            feature_dim: 256,
            ..Self::default()
        }
    }

    /// Smallest setting that still exercises every block; for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            vit: VitConfig {
                image_size: 16,
                patch_size: 8,
                embed_dim: 8,
                depth: 1,
                heads: 2,
                ffn_mult: 2,
            },
            feature_dim: 8,
            mfe_layers: 1,
            mfe_heads: 2,
            taf_layers: 1,
            taf_heads: 2,
            ffn_mult: 2,
            frames: 4,
            variant: Variant::Full,
        }
    }

    pub fn toggles(&self) -> Toggles {
        self.variant.toggles()
    }

    pub fn mfe(&self) -> MfeConfig {
        MfeConfig {
            embed_dim: self.feature_dim,
            layers: self.mfe_layers,
            heads: self.mfe_heads,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn taf(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.feature_dim,
            heads: self.taf_heads,
            layers: self.taf_layers,
            ffn_dim: self.ffn_mult * self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.mfe().validate()?;
        self.taf().validate("taf")?;
        if self.frames == 0 {
            return Err(Error::invalid("model", "frames must be positive"));
        }
        Ok(())
    }

    /// Visual modalities the variant reads.
    pub fn visual_modalities(&self) -> Vec<VisualModality> {
        let t = self.toggles();
        match (t.visual, t.depth) {
            (false, _) => Vec::new(),
            (true, true) => VisualModality::ALL.to_vec(),
            (true, false) => vec![VisualModality::LocalRgb, VisualModality::GlobalSem],
        }
    }

    /// Diagnostic columns (into [`MODALITY_NAMES`]) of the enabled streams,
    /// in fusion order.
    pub fn stream_columns(&self) -> Vec<usize> {
        let t = self.toggles();
        let mut cols = Vec::new();
        if t.motion {
            cols.push(0);
        }
        if t.visual {
            cols.extend([1, 2]);
        }
        cols
    }

    /// Every parameter the variant uses.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let t = self.toggles();
        let mut specs = Vec::new();
        for m in self.visual_modalities() {
            specs.extend(self.vit.specs(&m.prefix()));
        }
        if t.visual {
            for pair in [DgaPair::Local, DgaPair::Global] {
                specs.extend(
                    dga_specs(pair.prefix(), self.vit.embed_dim, self.feature_dim)
                        .into_iter()
                        .filter(|s| {
                            t.dga == DgaMode::Attention || !(s.name.contains(".ca.") || s.name.contains(".sa."))
                        }),
                );
            }
        }
        if t.motion {
            specs.extend(self.mfe().specs());
        }
        specs.extend(
            maf_specs(self.feature_dim)
                .into_iter()
                .filter(|s| t.maf == MafMode::Attention || s.name.starts_with("maf.wc")),
        );
        specs.extend(taf_specs(&self.taf()));
        specs.extend(head_specs(self.feature_dim));
        specs
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ForwardMode {
    #[default]
    Eval,
    Train {
        dropout: f64,
        seed: u64,
    },
}

/// Graph handles produced by one forward pass.
pub struct ForwardOutput {
    /// Crossing probability, `[1]`.
    pub prob: Var,
    /// `[N, streams]` in the order of `columns`.
    pub modality_weights: Var,
    pub columns: Vec<usize>,
    /// Per temporal layer, `[1, heads, N, N]`.
    pub temporal_attention: Vec<Var>,
    /// DGA channel maps `[C_f]`, local pair frames then global pair frames.
    pub channel_attention: Vec<Var>,
    /// DGA spatial maps `[1, G, G]`, same order.
    pub spatial_attention: Vec<Var>,
}

/// Attention read-outs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics<T> {
    /// `[N, 3]`: motion, local, global. Disabled streams read 0.
    pub modality_weights: Tensor<T>,
    /// `[layers, heads, N, N]`.
    pub temporal_attention: Tensor<T>,
    pub channel_attention: Vec<Tensor<T>>,
    pub spatial_attention: Vec<Tensor<T>>,
}

impl ForwardOutput {
    pub fn probability<T: Element>(&self, g: &Graph<T>) -> T {
        g.value(self.prob).item()
    }

    pub fn diagnostics<T: Element>(&self, g: &Graph<T>) -> Result<Diagnostics<T>> {
        let w = g.value(self.modality_weights);
        let n = w.shape()[0];
        let k = self.columns.len();
        let mut full = Tensor::zeros([n, 3]);
        for r in 0..n {
            for (j, &c) in self.columns.iter().enumerate() {
                full.data_mut()[r * 3 + c] = w.data()[r * k + j];
            }
        }
        let layers: Vec<Tensor<T>> = self.temporal_attention.iter().map(|&a| g.value(a).index0(0)).collect();
        Ok(Diagnostics {
            modality_weights: full,
            temporal_attention: Tensor::stack(&layers)?,
            channel_attention: self.channel_attention.iter().map(|&v| g.value(v).clone()).collect(),
            spatial_attention: self.spatial_attention.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

/// Full forward pass for one sample.
pub fn pmfnet_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    sample: &Sample<T>,
    mode: ForwardMode,
) -> Result<ForwardOutput> {
    let t = cfg.toggles();
    let n = sample.motion.frames();
    if n != cfg.frames {
        return Err(Error::sample(
            "frames",
            format!("sample has {n} frames, model expects {}", cfg.frames),
        ));
    }
    let mut streams = Vec::with_capacity(3);
    if t.motion {
        let enc = mfe_forward(g, &cfg.mfe(), &sample.motion)?;
        streams.push(enc.out);
    }
    let mut channel_attention = Vec::new();
    let mut spatial_attention = Vec::new();
    if t.visual {
        let pairs = [
            (DgaPair::Local, VisualModality::LocalRgb, VisualModality::LocalDepth),
            (DgaPair::Global, VisualModality::GlobalSem, VisualModality::GlobalDepth),
        ];
        for (pair, guided_m, depth_m) in pairs {
            let guided = encode(g, cfg, sample, guided_m, n)?;
            let depth = if t.depth {
                encode(g, cfg, sample, depth_m, n)?
            } else {
                guided
            };
            let seq = dga_sequence(g, guided, depth, pair.prefix(), t.dga)?;
            streams.push(seq.features);
            channel_attention.extend(seq.channel_attention);
            spatial_attention.extend(seq.spatial_attention);
        }
    }
    let maf = fuse_modalities(g, &streams, t.maf)?;
    let taf = taf_forward(g, &cfg.taf(), maf.fused)?;
    let last = g.narrow(taf.out, 0, n - 1, 1)?;
    let dropout = match mode {
        ForwardMode::Eval => None,
        ForwardMode::Train { dropout, seed } => Some(Dropout { rate: dropout, seed }),
    };
    let prob = predict_head(g, last, dropout)?;
    Ok(ForwardOutput {
        prob,
        modality_weights: maf.weights,
        columns: cfg.stream_columns(),
        temporal_attention: taf.attention,
        channel_attention,
        spatial_attention,
    })
}

fn encode<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    sample: &Sample<T>,
    m: VisualModality,
    frames: usize,
) -> Result<Var> {
    let images = sample
        .visual
        .get(m)
        .ok_or_else(|| Error::MissingModality(m.name().to_string()))?;
    if images.shape().len() != 4 || images.shape()[0] != frames || images.shape()[1] != m.channels() {
        return Err(Error::sample(
            m.name(),
            format!("expected [{frames}, {}, H, W], got {:?}", m.channels(), images.shape()),
        ));
    }
    Ok(vit_forward_batch(g, &cfg.vit, &m.prefix(), images)?.maps)
}

/// Probability and diagnostics from an inference graph.
pub fn predict<T: Element>(
    store: &crate::params::ParamStore<T>,
    cfg: &ModelConfig,
    sample: &Sample<T>,
) -> Result<(T, Diagnostics<T>)> {
    let mut g = Graph::inference(store);
    let out = pmfnet_forward(&mut g, cfg, sample, ForwardMode::Eval)?;
    Ok((out.probability(&g), out.diagnostics(&g)?))
}
