//! Motion branch: pose, bounding box and ego speed per frame, embedded and
//! encoded by a bidirectional Transformer encoder.

use crate::error::{Error, Result};
use crate::nn::{encoder_forward, linear, linear_specs, EncoderConfig, EncoderOutput};
use crate::params::{Graph, Init, ParamSpec};
use crate::tensor::{Element, Tensor};

pub const POSE_DIM: usize = 36;
pub const BBOX_DIM: usize = 4;
pub const SPEED_DIM: usize = 1;
/// Width of one stacked motion frame: pose, then bbox, then speed.
pub const MOTION_DIM: usize = POSE_DIM + BBOX_DIM + SPEED_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MfeConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for MfeConfig {
    fn default() -> Self {
        MfeConfig {
            embed_dim: 256,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

impl MfeConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.embed_dim,
            heads: self.heads,
            layers: self.layers,
            ffn_dim: self.ffn_mult * self.embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("mfe", "embedding width must be even"));
        }
        self.encoder().validate("mfe")
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut specs = linear_specs(
            "mfe.embed",
            MOTION_DIM,
            self.embed_dim,
            Init::Xavier {
                fan_in: MOTION_DIM,
                fan_out: self.embed_dim,
            },
        );
        specs.extend(self.encoder().specs("mfe"));
        specs
    }
}

/// Per-frame motion modalities for one observation window.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence<T> {
    /// `[N, 36]`: 18 joints, (x, y) normalized to `[0,1]`, missing joints 0.
    pub pose: Tensor<T>,
    /// `[N, 4]`: `x1, y1, x2, y2` normalized to `[0,1]`.
    pub bbox: Tensor<T>,
    /// `[N, 1]`: ego-vehicle speed.
    pub speed: Tensor<T>,
}

impl<T: Element> MotionSequence<T> {
    pub fn frames(&self) -> usize {
        self.pose.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pose.shape()[0];
        for (name, t, width) in [
            ("pose", &self.pose, POSE_DIM),
            ("bbox", &self.bbox, BBOX_DIM),
            ("speed", &self.speed, SPEED_DIM),
        ] {
            if t.shape() != [n, width] {
                return Err(Error::sample(
                    name,
                    format!("expected shape [{n}, {width}], got {:?}", t.shape()),
                ));
            }
        }
        for (f, b) in self.bbox.data().chunks(BBOX_DIM).enumerate() {
            if b[0] > b[2] || b[1] > b[3] {
                return Err(Error::sample("bbox", format!("frame {f}: corners out of order {b:?}")));
            }
        }
        Ok(())
    }
}

/// `[N, 41]` rows of `[pose(36), bbox(4), speed(1)]`.
pub fn stack_motion<T: Element>(seq: &MotionSequence<T>) -> Result<Tensor<T>> {
    let n = seq.pose.shape()[0];
    if seq.bbox.shape()[0] != n || seq.speed.shape()[0] != n {
        return Err(Error::invalid(
            "stack_motion",
            format!(
                "sequence lengths differ: pose {}, bbox {}, speed {}",
                n,
                seq.bbox.shape()[0],
                seq.speed.shape()[0]
            ),
        ));
    }
    seq.validate()?;
    let mut data = Vec::with_capacity(n * MOTION_DIM);
    for f in 0..n {
        data.extend_from_slice(&seq.pose.data()[f * POSE_DIM..(f + 1) * POSE_DIM]);
        data.extend_from_slice(&seq.bbox.data()[f * BBOX_DIM..(f + 1) * BBOX_DIM]);
        data.push(seq.speed.data()[f]);
    }
    Tensor::new([n, MOTION_DIM], data)
}

/// Sinusoidal encoding: `PE[t, 2i] = sin(t / 10000^(2i/d))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn positional_encoding<T: Element>(frames: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::invalid("positional_encoding", format!("width {d} must be even")));
    }
    Ok(Tensor::from_fn([frames, d], |idx| {
        let (t, j) = ((idx / d) as f64, idx % d);
        let angle = t / 10000f64.powf((j - j % 2) as f64 / d as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// Embed, add positions, encode. Output `out` is `F_M: [N, embed_dim]`.
pub fn mfe_forward<T: Element>(g: &mut Graph<T>, cfg: &MfeConfig, seq: &MotionSequence<T>) -> Result<EncoderOutput> {
    let stacked = stack_motion(seq)?;
    let n = stacked.shape()[0];
    let x = g.input(stacked);
    let x = linear(g, x, "mfe.embed")?;
    let pe = g.input(positional_encoding(n, cfg.embed_dim)?);
    let x = g.add(x, pe)?;
    encoder_forward(g, &cfg.encoder(), "mfe", x, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn seq(n: usize, f: impl Fn(usize) -> f64) -> MotionSequence<f64> {
        let bbox = Tensor::from_fn([n, 4], |i| if i % 4 < 2 { 0.2 } else { 0.6 });
        MotionSequence {
            pose: Tensor::from_fn([n, 36], &f),
            bbox,
            speed: Tensor::from_fn([n, 1], |i| f(i + 1000)),
        }
    }

    #[test]
    fn stacking_order_and_width() {
        let s = seq(5, |i| (i as f64 * 0.13).sin());
        let st = stack_motion(&s).unwrap();
        assert_eq!(st.shape(), &[5, 41]);
        for t in 0..5 {
            assert_eq!(st.at(&[t, 40]), s.speed.at(&[t, 0]));
            assert_eq!(st.at(&[t, 36]), s.bbox.at(&[t, 0]));
            assert_eq!(st.at(&[t, 3]), s.pose.at(&[t, 3]));
        }
        let zeros = MotionSequence::<f64> {
            pose: Tensor::zeros([3, 36]),
            bbox: Tensor::zeros([3, 4]),
            speed: Tensor::zeros([3, 1]),
        };
        assert!(stack_motion(&zeros).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stacking_rejects_length_mismatch_and_bad_boxes() {
        let mut s = seq(4, |_| 0.5);
        s.speed = Tensor::zeros([3, 1]);
        assert!(stack_motion(&s).is_err());
        let mut s = seq(4, |_| 0.5);
        s.bbox.data_mut()[0] = 0.9;
        assert!(matches!(stack_motion(&s), Err(Error::Sample { .. })));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(16, 8).unwrap();
        assert_eq!(pe.at(&[0, 0]), 0.0);
        assert_eq!(pe.at(&[0, 1]), 1.0);
        assert!((pe.at(&[1, 0]) - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // Column pair i=1 uses frequency 10000^(-2/8).
        assert!((pe.at(&[3, 3]) - (3.0 / 10f64).cos()).abs() < 1e-12);
        assert!(positional_encoding::<f64>(4, 7).is_err());
    }

    #[test]
    fn default_output_shape() {
        let cfg = MfeConfig::default();
        let store = ParamStore::<f32>::init(&cfg.specs(), 0);
        let mut g = Graph::inference(&store);
        let s = MotionSequence::<f32> {
            pose: Tensor::full([16, 36], 0.5),
            bbox: Tensor::from_fn([16, 4], |i| if i % 4 < 2 { 0.1 } else { 0.3 }),
            speed: Tensor::full([16, 1], 0.4),
        };
        let out = mfe_forward(&mut g, &cfg, &s).unwrap();
        assert_eq!(g.shape(out.out), &[16, 256]);
        assert_eq!(out.attention.len(), 2);
    }
}
