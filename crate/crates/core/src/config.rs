//! Run configuration: a flat `key = value` text file.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key has a typed range check and unknown keys are rejected. Keys not
//! present in a file keep the value of the preset the file is applied to.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{Signal, SynthConfig};
use crate::error::{Error, Result};
use crate::fusion::{ModelConfig, Variant};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `frames` and `image_size` are ignored here; see [`RunConfig::synth`].
    pub synth: SynthConfig,
    /// Dataset root holding `train/` and `test/`; the `--data` flag wins.
    pub data_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data_dir: PathBuf::from("data"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Small,
    Base,
    Tiny,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "small" => Ok(Preset::Small),
            "base" => Ok(Preset::Base),
            "tiny" => Ok(Preset::Tiny),
            other => Err(format!("expected small|base|tiny, got {other:?}")),
        }
    }
}

type Setter = fn(&mut RunConfig, &str, &str) -> Result<()>;
type Getter = fn(&RunConfig) -> String;

fn parse<V: FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    raw.parse::<V>()
        .map_err(|e| Error::config(key, format!("cannot parse {raw:?}: {e}")))
}

fn positive(key: &str, raw: &str) -> Result<usize> {
    let v: usize = parse(key, raw)?;
    if v == 0 {
        return Err(Error::config(key, "must be a positive integer"));
    }
    Ok(v)
}

fn finite(key: &str, raw: &str) -> Result<f64> {
    let v: f64 = parse(key, raw)?;
    if !v.is_finite() {
        return Err(Error::config(key, "must be finite"));
    }
    Ok(v)
}

fn non_negative(key: &str, raw: &str) -> Result<f64> {
    let v = finite(key, raw)?;
    if v < 0.0 {
        return Err(Error::config(key, format!("{v} must be >= 0")));
    }
    Ok(v)
}

fn in_range(key: &str, raw: &str, lo: f64, hi: f64, hi_open: bool) -> Result<f64> {
    let v = finite(key, raw)?;
    let ok = v >= lo && if hi_open { v < hi } else { v <= hi };
    if !ok {
        let close = if hi_open { ')' } else { ']' };
        return Err(Error::config(key, format!("{v} outside [{lo}, {hi}{close}")));
    }
    Ok(v)
}

macro_rules! key {
    ($name:literal, $get:expr, $set:expr) => {
        ($name, $get as Getter, $set as Setter)
    };
}

const KEYS: &[(&str, Getter, Setter)] = &[
    key!(
        "model.image_size",
        |c: &RunConfig| c.model.vit.image_size.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.vit.image_size = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.patch_size",
        |c: &RunConfig| c.model.vit.patch_size.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.vit.patch_size = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.vit_embed_dim",
        |c: &RunConfig| c.model.vit.embed_dim.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.vit.embed_dim = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.vit_depth",
        |c: &RunConfig| c.model.vit.depth.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.vit.depth = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.vit_heads",
        |c: &RunConfig| c.model.vit.heads.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.vit.heads = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.vit_ffn_mult",
        |c: &RunConfig| c.model.vit.ffn_mult.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.vit.ffn_mult = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.feature_dim",
        |c: &RunConfig| c.model.feature_dim.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.feature_dim = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.mfe_layers",
        |c: &RunConfig| c.model.mfe_layers.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.mfe_layers = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.mfe_heads",
        |c: &RunConfig| c.model.mfe_heads.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.mfe_heads = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.taf_layers",
        |c: &RunConfig| c.model.taf_layers.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.taf_layers = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.taf_heads",
        |c: &RunConfig| c.model.taf_heads.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.taf_heads = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.ffn_mult",
        |c: &RunConfig| c.model.ffn_mult.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.ffn_mult = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "model.frames",
        |c: &RunConfig| c.model.frames.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            let n = positive(k, v)?;
            if n < 2 {
                return Err(Error::config(k, "need at least 2 frames"));
            }
            c.model.frames = n;
            Ok(())
        }
    ),
    key!(
        "model.variant",
        |c: &RunConfig| c.model.variant.name().to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.model.variant = parse::<Variant>(k, v)?;
            Ok(())
        }
    ),
    key!(
        "train.learning_rate",
        |c: &RunConfig| c.train.learning_rate.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            let lr = finite(k, v)?;
            if lr <= 0.0 {
                return Err(Error::config(k, "must be positive"));
            }
            c.train.learning_rate = lr;
            Ok(())
        }
    ),
    key!(
        "train.dropout",
        |c: &RunConfig| c.train.dropout.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.train.dropout = in_range(k, v, 0.0, 1.0, true)?;
            Ok(())
        }
    ),
    key!(
        "train.l2_head",
        |c: &RunConfig| c.train.l2_head.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.train.l2_head = non_negative(k, v)?;
            Ok(())
        }
    ),
    key!(
        "train.batch_size",
        |c: &RunConfig| c.train.batch_size.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.train.batch_size = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "train.epochs",
        |c: &RunConfig| c.train.epochs.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.train.epochs = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "train.seed",
        |c: &RunConfig| c.train.seed.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.train.seed = parse(k, v)?;
            Ok(())
        }
    ),
    key!(
        "train.threshold",
        |c: &RunConfig| c.train.threshold.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.train.threshold = in_range(k, v, 0.0, 1.0, false)?;
            Ok(())
        }
    ),
    key!(
        "synth.n_train",
        |c: &RunConfig| c.synth.n_train.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.synth.n_train = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "synth.n_test",
        |c: &RunConfig| c.synth.n_test.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.synth.n_test = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "synth.noise_std",
        |c: &RunConfig| c.synth.noise_std.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.synth.noise_std = non_negative(k, v)?;
            Ok(())
        }
    ),
    key!(
        "synth.class_balance",
        |c: &RunConfig| c.synth.class_balance.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.synth.class_balance = in_range(k, v, 0.0, 1.0, false)?;
            Ok(())
        }
    ),
    key!(
        "synth.signal",
        |c: &RunConfig| c.synth.signal.name().to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.synth.signal = parse::<Signal>(k, v)?;
            Ok(())
        }
    ),
    key!(
        "synth.horizon",
        |c: &RunConfig| c.synth.horizon.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.synth.horizon = positive(k, v)?;
            Ok(())
        }
    ),
    key!(
        "synth.seed",
        |c: &RunConfig| c.synth.seed.to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            c.synth.seed = parse(k, v)?;
            Ok(())
        }
    ),
    key!(
        "data.dir",
        |c: &RunConfig| c.data_dir.display().to_string(),
        |c: &mut RunConfig, k: &str, v: &str| {
            if v.is_empty() {
                return Err(Error::config(k, "path is empty"));
            }
            c.data_dir = PathBuf::from(v);
            Ok(())
        }
    ),
];

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = RunConfig::default();
        match p {
            Preset::Small => {}
            Preset::Base => c.model = ModelConfig::base(),
            Preset::Tiny => {
                c.model = ModelConfig::tiny();
                c.synth.n_train = 8;
                c.synth.n_test = 8;
                c.train.batch_size = 4;
                c.train.epochs = 2;
            }
        }
        c
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|k| k.0)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (_, _, set) = KEYS
            .iter()
            .find(|k| k.0 == key)
            .ok_or_else(|| Error::config(key, "unknown key"))?;
        set(self, key, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.0 == key).map(|k| (k.1)(self))
    }

    /// Apply `text` on top of `self`, then validate the combination.
    pub fn apply(mut self, text: &str) -> Result<Self> {
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got {line:?}"),
                )
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        RunConfig::default().apply(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Cross-key checks that a single value cannot express.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !m.vit.image_size.is_multiple_of(m.vit.patch_size) {
            return Err(Error::config(
                "model.patch_size",
                format!("{} does not divide image_size {}", m.vit.patch_size, m.vit.image_size),
            ));
        }
        if !m.vit.embed_dim.is_multiple_of(m.vit.heads) {
            return Err(Error::config(
                "model.vit_heads",
                format!("{} does not divide vit_embed_dim {}", m.vit.heads, m.vit.embed_dim),
            ));
        }
        if !m.feature_dim.is_multiple_of(2) {
            return Err(Error::config("model.feature_dim", "must be even"));
        }
        for (key, heads) in [("model.mfe_heads", m.mfe_heads), ("model.taf_heads", m.taf_heads)] {
            if !m.feature_dim.is_multiple_of(heads) {
                return Err(Error::config(
                    key,
                    format!("{heads} does not divide feature_dim {}", m.feature_dim),
                ));
            }
        }
        m.validate().map_err(|e| Error::config("model", e.to_string()))?;
        self.train.validate()?;
        self.synth().validate()
    }

    /// Generator settings with frame count and image size taken from the model.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            frames: self.model.frames,
            image_size: self.model.vit.image_size,
            ..self.synth
        }
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, get, _) in KEYS {
            let head = key.split('.').next().unwrap_or_default();
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {head}");
                section = head;
            }
            let _ = writeln!(out, "{key} = {}", get(self));
        }
        out
    }

    /// Hex SHA-256 of the model section, which fixes the parameter layout.
    pub fn model_hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| l.starts_with("model."))
            .map(|l| format!("{l}\n"))
            .collect();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emitted_text_roundtrips_for_every_preset() {
        for p in [Preset::Small, Preset::Base, Preset::Tiny] {
            let c = RunConfig::preset(p);
            let back = RunConfig::parse(&c.to_text()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn every_key_is_emitted_once() {
        let text = RunConfig::default().to_text();
        for key in RunConfig::keys() {
            let n = text.lines().filter(|l| l.starts_with(&format!("{key} ="))).count();
            assert_eq!(n, 1, "{key}");
        }
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let c = RunConfig::parse("# header\n\ntrain.epochs = 3  # short run\nmodel.variant=V4\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.variant, Variant::V4);
        assert_eq!(c.train.batch_size, 16);
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("synth.noise_std = -1", "synth.noise_std"),
            ("train.dropout = 1.0", "train.dropout"),
            ("train.learning_rate = 0", "train.learning_rate"),
            ("model.frames = 0", "model.frames"),
            ("model.patch_size = 5", "model.patch_size"),
            ("model.taf_heads = 3", "model.taf_heads"),
            ("model.variant = v9", "model.variant"),
            ("bogus.key = 1", "bogus.key"),
            ("train.epochs = many", "train.epochs"),
        ];
        for (text, key) in cases {
            match RunConfig::parse(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn synth_follows_model_geometry() {
        let c = RunConfig::preset(Preset::Tiny);
        assert_eq!(c.synth().frames, 4);
        assert_eq!(c.synth().image_size, 16);
    }

    #[test]
    fn model_hash_ignores_training_keys() {
        let a = RunConfig::default();
        let b = RunConfig::parse("train.epochs = 7\nsynth.seed = 3").unwrap();
        let c = RunConfig::parse("model.variant = v6").unwrap();
        assert_eq!(a.model_hash(), b.model_hash());
        assert_ne!(a.model_hash(), c.model_hash());
        assert_eq!(a.model_hash().len(), 64);
    }
}
