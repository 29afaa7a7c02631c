//! One observation window of all seven modalities, and its directory form.
//!
//! A sample directory holds `meta.txt` (`key: value` lines for `id`, `label`,
//! `n`, `N`, `H`, `W`) and one `.pmft` file per modality.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::pmft::{read_pmft, write_pmft};
use crate::error::{Error, Result};
use crate::mfe::{MotionSequence, BBOX_DIM, POSE_DIM, SPEED_DIM};
use crate::tensor::{Element, Tensor};
use crate::vfe::{VisualInputs, VisualModality};

pub const META_FILE: &str = "meta.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    /// 1 if the pedestrian crosses within the horizon.
    pub label: u8,
    /// Prediction horizon in frames; metadata only.
    pub horizon: usize,
    pub motion: MotionSequence<T>,
    /// `[N, C, H, W]` per modality. Loaded samples always have all four.
    pub visual: VisualInputs<T>,
}

impl<T: Element> Sample<T> {
    pub fn frames(&self) -> usize {
        self.motion.frames()
    }

    pub fn cast<U: Element>(&self) -> Sample<U> {
        let v = &self.visual;
        Sample {
            id: self.id.clone(),
            label: self.label,
            horizon: self.horizon,
            motion: MotionSequence {
                pose: self.motion.pose.cast(),
                bbox: self.motion.bbox.cast(),
                speed: self.motion.speed.cast(),
            },
            visual: VisualInputs {
                local_rgb: v.local_rgb.as_ref().map(Tensor::cast),
                local_depth: v.local_depth.as_ref().map(Tensor::cast),
                global_sem: v.global_sem.as_ref().map(Tensor::cast),
                global_depth: v.global_depth.as_ref().map(Tensor::cast),
            },
        }
    }

    /// Check every invariant: binary label, shared frame count, shared image
    /// size, ordered boxes, finite values, images in `[0,1]`.
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::sample("label", format!("must be 0 or 1, got {}", self.label)));
        }
        self.motion.validate()?;
        let n = self.frames();
        for (name, t) in [
            ("pose", &self.motion.pose),
            ("bbox", &self.motion.bbox),
            ("speed", &self.motion.speed),
        ] {
            if !t.is_finite() {
                return Err(Error::sample(name, "non-finite value"));
            }
        }
        let mut size: Option<(usize, usize)> = None;
        for m in VisualModality::ALL {
            let Some(img) = self.visual.get(m) else { continue };
            let s = img.shape();
            if s.len() != 4 || s[0] != n || s[1] != m.channels() {
                return Err(Error::sample(
                    m.name(),
                    format!("expected [{n}, {}, H, W], got {s:?}", m.channels()),
                ));
            }
            match size {
                None => size = Some((s[2], s[3])),
                Some(hw) if hw != (s[2], s[3]) => {
                    return Err(Error::sample(
                        m.name(),
                        format!("image size {}x{} differs from {}x{}", s[2], s[3], hw.0, hw.1),
                    ))
                }
                _ => {}
            }
            if let Some(v) = img.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
                return Err(Error::sample(m.name(), format!("value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// `(H, W)` of the image modalities, if any are present.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        VisualModality::ALL
            .iter()
            .find_map(|&m| self.visual.get(m))
            .map(|t| (t.shape()[2], t.shape()[3]))
    }
}

fn file_name(name: &str) -> String {
    format!("{name}.pmft")
}

fn parse_meta(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::sample("meta", format!("malformed line {line:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn meta_usize(pairs: &[(String, String)], key: &str) -> Result<usize> {
    let v = pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| Error::sample(key, "missing from meta.txt"))?;
    v.parse()
        .map_err(|_| Error::sample(key, format!("expected a non-negative integer, got {v:?}")))
}

fn load_modality(dir: &Path, name: &str, expected: &[usize]) -> Result<Tensor<f32>> {
    let path = dir.join(file_name(name));
    if !path.exists() {
        return Err(Error::MissingModality(name.to_string()));
    }
    let t = read_pmft::<f32>(&path)?;
    if t.shape() != expected {
        return Err(Error::sample(
            name,
            format!("shape {:?} does not match meta {expected:?}", t.shape()),
        ));
    }
    Ok(t)
}

/// Load and validate a sample directory.
pub fn load_sample(dir: impl AsRef<Path>) -> Result<Sample<f32>> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = parse_meta(&text)?;
    let id = meta
        .iter()
        .find(|(k, _)| k == "id")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::sample("id", "missing from meta.txt"))?;
    let label = meta_usize(&meta, "label")?;
    if label > 1 {
        return Err(Error::sample("label", format!("must be 0 or 1, got {label}")));
    }
    let horizon = meta_usize(&meta, "n")?;
    let n = meta_usize(&meta, "N")?;
    let h = meta_usize(&meta, "H")?;
    let w = meta_usize(&meta, "W")?;
    for (key, v) in [("N", n), ("H", h), ("W", w)] {
        if v == 0 {
            return Err(Error::sample(key, "must be positive"));
        }
    }
    let motion = MotionSequence {
        pose: load_modality(dir, "pose", &[n, POSE_DIM])?,
        bbox: load_modality(dir, "bbox", &[n, BBOX_DIM])?,
        speed: load_modality(dir, "speed", &[n, SPEED_DIM])?,
    };
    let mut images = VisualModality::ALL
        .iter()
        .map(|&m| load_modality(dir, m.name(), &[n, m.channels(), h, w]).map(Some));
    let visual = VisualInputs {
        local_rgb: images.next().expect("four")?,
        local_depth: images.next().expect("four")?,
        global_sem: images.next().expect("four")?,
        global_depth: images.next().expect("four")?,
    };
    let sample = Sample {
        id,
        label: label as u8,
        horizon,
        motion,
        visual,
    };
    sample.validate()?;
    Ok(sample)
}

/// Write a complete, valid sample as a directory.
pub fn write_sample(dir: impl AsRef<Path>, sample: &Sample<f32>) -> Result<()> {
    let dir = dir.as_ref();
    sample.validate()?;
    let (h, w) = sample
        .image_size()
        .ok_or_else(|| Error::MissingModality(VisualModality::LocalRgb.name().into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = String::new();
    for (k, v) in [
        ("id", sample.id.clone()),
        ("label", sample.label.to_string()),
        ("n", sample.horizon.to_string()),
        ("N", sample.frames().to_string()),
        ("H", h.to_string()),
        ("W", w.to_string()),
    ] {
        writeln!(meta, "{k}: {v}").expect("string write");
    }
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    write_pmft(dir.join(file_name("pose")), &sample.motion.pose)?;
    write_pmft(dir.join(file_name("bbox")), &sample.motion.bbox)?;
    write_pmft(dir.join(file_name("speed")), &sample.motion.speed)?;
    for m in VisualModality::ALL {
        let t = sample
            .visual
            .get(m)
            .ok_or_else(|| Error::MissingModality(m.name().into()))?;
        write_pmft(dir.join(file_name(m.name())), t)?;
    }
    Ok(())
}

/// Sample directories under `dir`, sorted by name.
pub fn sample_dirs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(META_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Load every sample directory under `dir`, in name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample<f32>>> {
    let dirs = sample_dirs(&dir)?;
    if dirs.is_empty() {
        return Err(Error::sample(
            "dataset",
            format!("no sample directories under {}", dir.as_ref().display()),
        ));
    }
    dirs.iter().map(load_sample).collect()
}

/// Write samples as `<dir>/<id>/`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample<f32>]) -> Result<()> {
    let dir = dir.as_ref();
    for s in samples {
        write_sample(dir.join(&s.id), s)?;
    }
    Ok(())
}
