//! Planted-rule synthetic dataset.
//!
//! Every sample carries two latent classes, one for the motion modalities
//! and one for the visual modalities (`t = τ/(N-1)` runs from 0 to 1):
//!
//! * motion class 1: box height `h0·g^t` with `g ∈ [1.35, 1.7]`, speed
//!   `s0 - Δ·t` with `Δ ∈ [0.3, 0.5]`;
//! * motion class 0: `g ∈ [0.75, 1.0]`, speed `s0 + Δ·t` with `Δ ∈ [0.05, 0.2]`;
//! * visual class 1: pedestrian depth `d0 - Δd·t` with `Δd ∈ [0.25, 0.4]`;
//! * visual class 0: `d0 + Δd·t` with `Δd ∈ [0, 0.1]`.
//!
//! Box width is `0.4·h` around a slowly drifting centre; pose is an 18-joint
//! template scaled into the box plus a small random walk. The local crop
//! holds a fixed elliptical silhouette: `rgb = 0.3·field + 0.7·(1-d)·sil` and
//! `depth = d·sil + (d+0.1)·(1-sil) + 0.04·(field-0.5)`, so the frame-mean
//! local depth moves exactly with `d`. The global semantic map is a
//! sky/road palette with a red blob whose height follows a second growth
//! trajectory tied to the visual class; the global depth map is a vertical
//! ramp with the blob at depth `d`. Fields are smooth random sinusoid mixes
//! in `[0,1]`, fixed per sample.
//!
//! With [`Signal::Both`] both classes equal the label, so at zero noise a
//! label-1 sample satisfies all three planted conditions of [`rule_oracle`]
//! and a label-0 sample violates all three. [`Signal::Motion`] and
//! [`Signal::Visual`] draw the other branch's class independently at random.
//! Gaussian noise `N(0, σ²)` is then added to every channel; images and pose
//! are clamped to `[0,1]`, box corners reordered and clamped.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::sample::{write_dataset, Sample};
use crate::error::{Error, Result};
use crate::mfe::MotionSequence;
use crate::tensor::{Element, Tensor};
use crate::vfe::VisualInputs;

/// Which branch carries the label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Signal {
    #[default]
    Both,
    Motion,
    Visual,
}

impl Signal {
    pub fn name(self) -> &'static str {
        match self {
            Signal::Both => "both",
            Signal::Motion => "motion",
            Signal::Visual => "visual",
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Signal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "both" => Ok(Signal::Both),
            "motion" => Ok(Signal::Motion),
            "visual" => Ok(Signal::Visual),
            other => Err(format!("expected both|motion|visual, got {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub frames: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub class_balance: f64,
    pub signal: Signal,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 512,
            n_test: 128,
            frames: 16,
            image_size: 32,
            noise_std: 0.1,
            class_balance: 0.5,
            signal: Signal::Both,
            horizon: 30,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("synth.n_train", "both splits need at least one sample"));
        }
        if self.frames < 2 {
            return Err(Error::config("model.frames", "need at least 2 frames"));
        }
        if self.image_size < 4 {
            return Err(Error::config("model.image_size", "need at least 4 pixels"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("synth.noise_std", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(Error::config("synth.class_balance", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// Joint positions `(u, v)` inside the box, in OpenPose COCO order.
const POSE_TEMPLATE: [(f64, f64); 18] = [
    (0.50, 0.08),
    (0.50, 0.20),
    (0.35, 0.20),
    (0.30, 0.35),
    (0.28, 0.50),
    (0.65, 0.20),
    (0.70, 0.35),
    (0.72, 0.50),
    (0.42, 0.52),
    (0.40, 0.72),
    (0.40, 0.95),
    (0.58, 0.52),
    (0.60, 0.72),
    (0.60, 0.95),
    (0.47, 0.06),
    (0.53, 0.06),
    (0.44, 0.07),
    (0.56, 0.07),
];

const SKY: [f64; 3] = [0.55, 0.75, 1.0];
const ROAD: [f64; 3] = [0.3, 0.3, 0.32];
const PEDESTRIAN: [f64; 3] = [1.0, 0.1, 0.1];
const HORIZON: f64 = 0.4;

/// Smooth random field in `[0,1]`: a normalized mix of four plane waves.
struct Field {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Field {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.2..1.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Field { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.waves.iter().map(|w| w.0).sum();
        let s: f64 = self
            .waves
            .iter()
            .map(|&(a, fx, fy, ph)| a * (2.0 * PI * (fx * x + fy * y) + ph).sin())
            .sum();
        0.5 + 0.5 * s / total
    }
}

fn growth(rng: &mut ChaCha8Rng, class: bool) -> f64 {
    if class {
        rng.random_range(1.35..1.7)
    } else {
        rng.random_range(0.75..1.0)
    }
}

/// Noise-free sample for the given latent classes.
fn clean_sample(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    motion: bool,
    visual: bool,
) -> (MotionSequence<f64>, VisualInputs<f64>) {
    let n = cfg.frames;
    let size = cfg.image_size;
    let hw = size * size;
    let time = |tau: usize| tau as f64 / (n - 1) as f64;

    // Motion.
    let h0 = rng.random_range(0.25..0.4);
    let g = growth(rng, motion);
    let cx0 = rng.random_range(0.3..0.7);
    let drift = rng.random_range(-0.05..0.05);
    let cy = rng.random_range(0.45..0.55);
    let s0 = rng.random_range(0.5..0.9);
    let ds = if motion {
        -rng.random_range(0.3..0.5)
    } else {
        rng.random_range(0.05..0.2)
    };
    let walk = Normal::new(0.0, 0.005).expect("std");
    let mut offsets = [[0.0f64; 2]; 18];
    let mut pose = Vec::with_capacity(n * 36);
    let mut bbox = Vec::with_capacity(n * 4);
    let mut speed = Vec::with_capacity(n);
    for tau in 0..n {
        let t = time(tau);
        let h = h0 * g.powf(t);
        let w = 0.4 * h;
        let cx = cx0 + drift * t;
        let (x1, y1) = (cx - w / 2.0, cy - h / 2.0);
        bbox.extend([x1, y1, cx + w / 2.0, cy + h / 2.0]);
        speed.push(s0 + ds * t);
        for (j, &(u, v)) in POSE_TEMPLATE.iter().enumerate() {
            if tau > 0 {
                offsets[j][0] += walk.sample(rng);
                offsets[j][1] += walk.sample(rng);
            }
            pose.push(x1 + u * w + offsets[j][0]);
            pose.push(y1 + v * h + offsets[j][1]);
        }
    }

    // Visual.
    let d0 = rng.random_range(0.5..0.75);
    let dd = if visual {
        -rng.random_range(0.25..0.4)
    } else {
        rng.random_range(0.0..0.1)
    };
    let hv0 = rng.random_range(0.25..0.4);
    let gv = growth(rng, visual);
    let bx = rng.random_range(0.3..0.7);
    let fields: Vec<Field> = (0..5).map(|_| Field::new(rng)).collect();
    let coords = |i: usize| ((i % size) as f64 + 0.5) / size as f64;
    let rows = |i: usize| ((i / size) as f64 + 0.5) / size as f64;
    // Fixed silhouette: ellipse centred in the crop.
    let sil: Vec<f64> = (0..hw)
        .map(|i| {
            let (x, y) = ((coords(i) - 0.5) / 0.22, (rows(i) - 0.5) / 0.42);
            if x * x + y * y <= 1.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut local_rgb = Vec::with_capacity(n * 3 * hw);
    let mut local_depth = Vec::with_capacity(n * hw);
    let mut global_sem = Vec::with_capacity(n * 3 * hw);
    let mut global_depth = Vec::with_capacity(n * hw);
    for tau in 0..n {
        let t = time(tau);
        let d = d0 + dd * t;
        for field in &fields[..3] {
            local_rgb.extend((0..hw).map(|i| 0.3 * field.at(coords(i), rows(i)) + 0.7 * (1.0 - d) * sil[i]));
        }
        local_depth.extend(
            (0..hw).map(|i| d * sil[i] + (d + 0.1) * (1.0 - sil[i]) + 0.04 * (fields[3].at(coords(i), rows(i)) - 0.5)),
        );
        let hv = hv0 * gv.powf(t);
        let in_blob = |i: usize| {
            let (x, y) = ((coords(i) - bx) / (0.2 * hv), (rows(i) - 0.55) / (0.5 * hv));
            x * x + y * y <= 1.0
        };
        for c in 0..3 {
            global_sem.extend((0..hw).map(|i| {
                if in_blob(i) {
                    PEDESTRIAN[c]
                } else if rows(i) < HORIZON {
                    SKY[c]
                } else {
                    ROAD[c] + 0.1 * (fields[4].at(coords(i), rows(i)) - 0.5)
                }
            }));
        }
        global_depth.extend((0..hw).map(|i| if in_blob(i) { d } else { 1.0 - 0.8 * rows(i) }));
    }

    let t = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data).expect("synth shape");
    (
        MotionSequence {
            pose: t(vec![n, 36], pose),
            bbox: t(vec![n, 4], bbox),
            speed: t(vec![n, 1], speed),
        },
        VisualInputs {
            local_rgb: Some(t(vec![n, 3, size, size], local_rgb)),
            local_depth: Some(t(vec![n, 1, size, size], local_depth)),
            global_sem: Some(t(vec![n, 3, size, size], global_sem)),
            global_depth: Some(t(vec![n, 1, size, size], global_depth)),
        },
    )
}

fn add_noise(t: &Tensor<f64>, rng: &mut ChaCha8Rng, noise: Option<&Normal<f64>>, clamp: bool) -> Tensor<f32> {
    Tensor::from_fn(t.shape().to_vec(), |i| {
        let mut v = t.data()[i];
        if let Some(dist) = noise {
            v += dist.sample(rng);
        }
        if clamp {
            v = v.clamp(0.0, 1.0);
        }
        v as f32
    })
}

/// Generate one split. Train and test use distinct random streams of the
/// same seed.
pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Vec<Sample<f32>>> {
    cfg.validate()?;
    let n = match split {
        Split::Train => cfg.n_train,
        Split::Test => cfg.n_test,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(split.stream());
    let n_pos = (n as f64 * cfg.class_balance).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("std"));

    let mut samples = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let y = label == 1;
        let (motion_class, visual_class) = match cfg.signal {
            Signal::Both => (y, y),
            Signal::Motion => (y, rng.random_bool(0.5)),
            Signal::Visual => (rng.random_bool(0.5), y),
        };
        let (m, v) = clean_sample(&mut rng, cfg, motion_class, visual_class);
        let nz = noise.as_ref();
        let mut bbox = add_noise(&m.bbox, &mut rng, nz, false);
        for b in bbox.data_mut().chunks_mut(4) {
            let (x1, x2) = (b[0].min(b[2]), b[0].max(b[2]));
            let (y1, y2) = (b[1].min(b[3]), b[1].max(b[3]));
            b.copy_from_slice(&[x1, y1, x2, y2].map(|c| c.clamp(0.0, 1.0)));
        }
        let motion = MotionSequence {
            pose: add_noise(&m.pose, &mut rng, nz, true),
            bbox,
            speed: add_noise(&m.speed, &mut rng, nz, false),
        };
        let mut img = |t: &Option<Tensor<f64>>| Some(add_noise(t.as_ref().expect("generated"), &mut rng, nz, true));
        let visual = VisualInputs {
            local_rgb: img(&v.local_rgb),
            local_depth: img(&v.local_depth),
            global_sem: img(&v.global_sem),
            global_depth: img(&v.global_depth),
        };
        let sample = Sample {
            id: format!("{}_{i:05}", split.name()),
            label,
            horizon: cfg.horizon,
            motion,
            visual,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Train and test samples.
pub type Splits = (Vec<Sample<f32>>, Vec<Sample<f32>>);

/// Both splits, in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Splits> {
    Ok((generate_split(cfg, Split::Train)?, generate_split(cfg, Split::Test)?))
}

/// Write `<out>/train/<id>/` and `<out>/test/<id>/`.
pub fn synth_generate(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    for split in [Split::Train, Split::Test] {
        write_dataset(out.join(split.name()), &generate_split(cfg, split)?)?;
    }
    Ok(())
}

/// Box height grows monotonically and by at least 30%.
pub fn motion_rule_height<T: Element>(s: &Sample<T>) -> bool {
    let h: Vec<T> = s.motion.bbox.data().chunks(4).map(|b| b[3] - b[1]).collect();
    h.windows(2).all(|w| w[1] >= w[0]) && h[h.len() - 1] >= T::lit(1.3) * h[0]
}

/// Speed decreases monotonically and ends below its start.
pub fn motion_rule_speed<T: Element>(s: &Sample<T>) -> bool {
    let v = s.motion.speed.data();
    v.windows(2).all(|w| w[1] <= w[0]) && v[v.len() - 1] < v[0]
}

/// Frame-mean local depth falls by at least 0.2 across the window.
pub fn visual_rule_depth<T: Element>(s: &Sample<T>) -> bool {
    let Some(depth) = s.visual.local_depth.as_ref() else {
        return false;
    };
    let n = depth.shape()[0];
    let per = depth.numel() / n;
    let mean = |f: usize| {
        let xs = &depth.data()[f * per..(f + 1) * per];
        xs.iter().map(|v| v.to_f64().expect("finite")).sum::<f64>() / per as f64
    };
    mean(n - 1) - mean(0) <= -0.2
}

/// The planted rule: 1 iff all three conditions hold.
pub fn rule_oracle<T: Element>(s: &Sample<T>) -> u8 {
    u8::from(motion_rule_height(s) && motion_rule_speed(s) && visual_rule_depth(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(signal: Signal, noise: f64) -> SynthConfig {
        SynthConfig {
            n_train: 24,
            n_test: 8,
            frames: 8,
            image_size: 16,
            noise_std: noise,
            signal,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn clean_data_follows_the_rule_exactly() {
        let train = generate_split(&small(Signal::Both, 0.0), Split::Train).unwrap();
        for s in &train {
            assert_eq!(rule_oracle(s), s.label, "{}", s.id);
            if s.label == 0 {
                assert!(!motion_rule_height(s) && !motion_rule_speed(s) && !visual_rule_depth(s));
            }
        }
    }

    #[test]
    fn balance_is_exact() {
        let c = SynthConfig {
            n_train: 9,
            ..small(Signal::Both, 0.1)
        };
        let s = generate_split(&c, Split::Train).unwrap();
        let pos = s.iter().filter(|s| s.label == 1).count();
        assert!(pos == 4 || pos == 5);
    }

    #[test]
    fn deterministic_and_split_distinct() {
        let c = small(Signal::Both, 0.1);
        let a = generate_split(&c, Split::Train).unwrap();
        assert_eq!(a, generate_split(&c, Split::Train).unwrap());
        let t = generate_split(&c, Split::Test).unwrap();
        assert_ne!(a[0].motion.pose, t[0].motion.pose);
        let other = generate_split(&SynthConfig { seed: 1, ..c }, Split::Train).unwrap();
        assert_ne!(a[0].motion.pose, other[0].motion.pose);
    }

    #[test]
    fn single_signal_modes_decouple_branches() {
        let m = generate_split(
            &SynthConfig {
                n_train: 64,
                ..small(Signal::Motion, 0.0)
            },
            Split::Train,
        )
        .unwrap();
        assert!(m.iter().all(|s| motion_rule_speed(s) == (s.label == 1)));
        let mismatched = m.iter().filter(|s| visual_rule_depth(s) != (s.label == 1)).count();
        assert!(
            mismatched > 10,
            "visual class should be independent, {mismatched} mismatches"
        );
        let v = generate_split(
            &SynthConfig {
                n_train: 64,
                ..small(Signal::Visual, 0.0)
            },
            Split::Train,
        )
        .unwrap();
        assert!(v.iter().all(|s| visual_rule_depth(s) == (s.label == 1)));
    }

    #[test]
    fn rejects_negative_noise() {
        let c = SynthConfig {
            noise_std: -1.0,
            ..SynthConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "synth.noise_std"));
    }
}
