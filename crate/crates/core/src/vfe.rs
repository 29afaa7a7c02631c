//! ViT-style backbones turning each visual modality frame into a spatial
//! feature map `[D_v, G, G]`.
//!
//! All patch tokens are kept (there is no class token) and the final token
//! sequence is laid back out on the `G×G` patch grid, so the depth-guided
//! attention stage sees a genuine spatial map. Each of the four visual
//! modalities has its own backbone parameters.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{encoder_forward, linear, linear_specs, EncoderConfig, TRANSFORMER_INIT_STD};
use crate::params::{Graph, Init, ParamSpec};
use crate::tensor::{Element, Tensor};

/// Channels every backbone consumes; single-channel depth is replicated.
pub const BACKBONE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(
                "vit",
                format!(
                    "image size {} not divisible by patch size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        self.encoder().validate("vit")
    }

    /// Patch grid side `G`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        BACKBONE_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.embed_dim,
            heads: self.heads,
            layers: self.depth,
            ffn_dim: self.ffn_mult * self.embed_dim,
        }
    }

    pub fn specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let w = Init::TruncNormal(TRANSFORMER_INIT_STD);
        let mut specs = linear_specs(&format!("{prefix}.patch"), self.patch_dim(), self.embed_dim, w);
        specs.push(ParamSpec::new(
            format!("{prefix}.pos"),
            [self.tokens(), self.embed_dim],
            w,
        ));
        specs.extend(self.encoder().specs(prefix));
        specs
    }
}

/// The four visual inputs, in the fixed order used for parameter paths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VisualModality {
    LocalRgb,
    LocalDepth,
    GlobalSem,
    GlobalDepth,
}

impl VisualModality {
    pub const ALL: [VisualModality; 4] = [
        VisualModality::LocalRgb,
        VisualModality::LocalDepth,
        VisualModality::GlobalSem,
        VisualModality::GlobalDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VisualModality::LocalRgb => "local_rgb",
            VisualModality::LocalDepth => "local_depth",
            VisualModality::GlobalSem => "global_sem",
            VisualModality::GlobalDepth => "global_depth",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            VisualModality::LocalRgb | VisualModality::GlobalSem => 3,
            VisualModality::LocalDepth | VisualModality::GlobalDepth => 1,
        }
    }

    pub fn prefix(self) -> String {
        format!("vfe.{}", self.name())
    }
}

/// `[C,H,W] -> [G·G, C·p²]`. Tokens run row-major over the patch grid;
/// inside a token, channel-major then row-major pixels.
pub fn patchify<T: Element>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::invalid("patchify", format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("{h}x{w} image not divisible into {patch}x{patch} patches"),
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = ch * h * w + (py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new([gh * gw, dim], out)
}

/// Inverse of [`patchify`] for a square image.
pub fn unpatchify<T: Element>(tokens: &Tensor<T>, channels: usize, patch: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    let g = (s[0] as f64).sqrt().round() as usize;
    if s.len() != 2 || g * g != s[0] || s[1] != channels * patch * patch {
        return Err(Error::invalid("unpatchify", format!("bad token shape {s:?}")));
    }
    let side = g * patch;
    let mut img = vec![T::zero(); channels * side * side];
    let src = tokens.data();
    let mut i = 0;
    for py in 0..g {
        for px in 0..g {
            for ch in 0..channels {
                for y in 0..patch {
                    let row = ch * side * side + (py * patch + y) * side + px * patch;
                    img[row..row + patch].copy_from_slice(&src[i..i + patch]);
                    i += patch;
                }
            }
        }
    }
    Tensor::new([channels, side, side], img)
}

/// Replicate a `[B,1,H,W]` stack to three channels; 3-channel input passes through.
pub fn to_backbone_channels<T: Element>(images: &Tensor<T>) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::invalid("vfe", format!("expected [B,C,H,W], got {s:?}")));
    }
    match s[1] {
        BACKBONE_CHANNELS => Ok(images.clone()),
        1 => {
            let plane = s[2] * s[3];
            let mut data = Vec::with_capacity(images.numel() * BACKBONE_CHANNELS);
            for chunk in images.data().chunks(plane) {
                for _ in 0..BACKBONE_CHANNELS {
                    data.extend_from_slice(chunk);
                }
            }
            Tensor::new([s[0], BACKBONE_CHANNELS, s[2], s[3]], data)
        }
        c => Err(Error::invalid("vfe", format!("unsupported channel count {c}"))),
    }
}

/// Backbone output for a stack of frames.
pub struct VitOutput {
    /// `[B, D_v, G, G]`.
    pub maps: Var,
    pub attention: Vec<Var>,
}

/// Run one backbone over a stack of frames `[B, C, H, W]` (C ∈ {1, 3}).
pub fn vit_forward_batch<T: Element>(
    g: &mut Graph<T>,
    cfg: &VitConfig,
    prefix: &str,
    images: &Tensor<T>,
) -> Result<VitOutput> {
    let images = to_backbone_channels(images)?;
    let s = images.shape().to_vec();
    if s[2] != cfg.image_size || s[3] != cfg.image_size {
        return Err(Error::invalid(
            "vit_forward",
            format!("expected {0}x{0} images, got {1}x{2}", cfg.image_size, s[2], s[3]),
        ));
    }
    let (batch, t, d, grid) = (s[0], cfg.tokens(), cfg.embed_dim, cfg.grid());
    let mut tokens = Vec::with_capacity(batch * t * cfg.patch_dim());
    for b in 0..batch {
        tokens.extend_from_slice(patchify(&images.index0(b), cfg.patch_size)?.data());
    }
    let x = g.input(Tensor::new([batch * t, cfg.patch_dim()], tokens)?);
    let x = linear(g, x, &format!("{prefix}.patch"))?;
    let x = g.reshape(x, [batch, t, d])?;
    let pos = g.param(&format!("{prefix}.pos"))?;
    let x = g.add(x, pos)?;
    let x = g.reshape(x, [batch * t, d])?;
    let enc = encoder_forward(g, &cfg.encoder(), prefix, x, batch)?;
    let maps = g.reshape(enc.out, [batch, t, d])?;
    let maps = g.permute(maps, &[0, 2, 1])?;
    let maps = g.reshape(maps, [batch, d, grid, grid])?;
    Ok(VitOutput {
        maps,
        attention: enc.attention,
    })
}

/// Single image `[C,H,W]` to a feature map `[D_v, G, G]`.
pub fn vit_forward<T: Element>(g: &mut Graph<T>, cfg: &VitConfig, prefix: &str, image: &Tensor<T>) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(shape)?;
    let out = vit_forward_batch(g, cfg, prefix, &batch)?;
    let d = cfg.embed_dim;
    g.reshape(out.maps, [d, cfg.grid(), cfg.grid()])
}

/// Per-modality images for one or more frames, each `[B, C, H, W]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisualInputs<T> {
    pub local_rgb: Option<Tensor<T>>,
    pub local_depth: Option<Tensor<T>>,
    pub global_sem: Option<Tensor<T>>,
    pub global_depth: Option<Tensor<T>>,
}

impl<T> VisualInputs<T> {
    pub fn get(&self, m: VisualModality) -> Option<&Tensor<T>> {
        match m {
            VisualModality::LocalRgb => self.local_rgb.as_ref(),
            VisualModality::LocalDepth => self.local_depth.as_ref(),
            VisualModality::GlobalSem => self.global_sem.as_ref(),
            VisualModality::GlobalDepth => self.global_depth.as_ref(),
        }
    }
}

/// Feature maps for the four visual modalities, each `[B, D_v, G, G]`.
#[derive(Clone, Copy, Debug)]
pub struct VisualFeatureMaps {
    pub local_rgb: Var,
    pub local_depth: Var,
    pub global_sem: Var,
    pub global_depth: Var,
}

/// Run the requested backbones, each with its own parameter set.
pub fn encode_modalities<T: Element>(
    g: &mut Graph<T>,
    cfg: &VitConfig,
    inputs: &VisualInputs<T>,
    which: &[VisualModality],
) -> Result<Vec<Var>> {
    which
        .iter()
        .map(|&m| {
            let images = inputs
                .get(m)
                .ok_or_else(|| Error::MissingModality(m.name().to_string()))?;
            Ok(vit_forward_batch(g, cfg, &m.prefix(), images)?.maps)
        })
        .collect()
}

/// Encode all four visual modalities of the given frames.
pub fn encode_visual_frame<T: Element>(
    g: &mut Graph<T>,
    cfg: &VitConfig,
    inputs: &VisualInputs<T>,
) -> Result<VisualFeatureMaps> {
    let maps = encode_modalities(g, cfg, inputs, &VisualModality::ALL)?;
    Ok(VisualFeatureMaps {
        local_rgb: maps[0],
        local_depth: maps[1],
        global_sem: maps[2],
        global_depth: maps[3],
    })
}

/// Parameter specs for all four backbones.
pub fn vfe_specs(cfg: &VitConfig) -> Vec<ParamSpec> {
    VisualModality::ALL
        .iter()
        .flat_map(|m| cfg.specs(&m.prefix()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn tiny() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
        }
    }

    #[test]
    fn patchify_layout() {
        let img = Tensor::<f64>::from_fn([1, 4, 4], |i| i as f64);
        let tokens = patchify(&img, 2).unwrap();
        assert_eq!(tokens.shape(), &[4, 4]);
        // pixels (0,0),(0,1),(1,0),(1,1)
        assert_eq!(&tokens.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert!(patchify(&img, 3).is_err());

        let flat = Tensor::<f64>::full([3, 4, 4], 0.3);
        let t = patchify(&flat, 2).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let img = Tensor::<f64>::from_fn([3, 8, 8], |i| (i as f64 * 0.37).sin());
        let tokens = patchify(&img, 4).unwrap();
        assert_eq!(unpatchify(&tokens, 3, 4).unwrap(), img);
    }

    #[test]
    fn default_output_shape() {
        let cfg = VitConfig::default();
        let store = ParamStore::<f32>::init(&cfg.specs("v"), 0);
        let mut g = Graph::inference(&store);
        let img = Tensor::from_fn([3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let out = vit_forward(&mut g, &cfg, "v", &img).unwrap();
        assert_eq!(g.shape(out), &[64, 4, 4]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let store = ParamStore::<f64>::init(&cfg.specs("v"), 1);
        let img = Tensor::from_fn([1, 8, 8], |i| (i as f64 * 0.1).cos());
        let run = || {
            let mut g = Graph::inference(&store);
            let v = vit_forward(&mut g, &cfg, "v", &img).unwrap();
            g.value(v).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn depth_is_replicated_to_three_channels() {
        let d = Tensor::<f32>::from_fn([2, 1, 2, 2], |i| i as f32);
        let r = to_backbone_channels(&d).unwrap();
        assert_eq!(r.shape(), &[2, 3, 2, 2]);
        assert_eq!(&r.data()[4..8], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&r.data()[12..16], &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn missing_modality_is_named() {
        let cfg = tiny();
        let store = ParamStore::<f64>::init(&vfe_specs(&cfg), 0);
        let mut g = Graph::inference(&store);
        let img = Tensor::zeros([1, 3, 8, 8]);
        let inputs = VisualInputs {
            local_rgb: Some(img.clone()),
            local_depth: Some(Tensor::zeros([1, 1, 8, 8])),
            global_sem: Some(img),
            global_depth: None,
        };
        let err = encode_visual_frame(&mut g, &cfg, &inputs).unwrap_err();
        assert!(err.to_string().contains("global_depth"), "{err}");
    }
}
