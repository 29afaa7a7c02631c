//! Prediction MLP on the last frame's encoded feature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{linear, linear_specs};
use crate::params::{Graph, Init, ParamSpec};
use crate::tensor::{Element, Tensor};

/// Inverted dropout on the hidden layer: a fresh mask from `seed`, kept
/// units scaled by `1/(1-rate)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

pub fn head_hidden(d: usize) -> usize {
    (d / 2).max(1)
}

/// `head.fc1` (`[d, d/2]`) and `head.fc2` (`[d/2, 1]`).
pub fn head_specs(d: usize) -> Vec<ParamSpec> {
    let h = head_hidden(d);
    let mut specs = linear_specs("head.fc1", d, h, Init::Xavier { fan_in: d, fan_out: h });
    specs.extend(linear_specs("head.fc2", h, 1, Init::Xavier { fan_in: h, fan_out: 1 }));
    specs
}

/// Names of the head weights the L2 penalty applies to.
pub const HEAD_WEIGHTS: [&str; 2] = ["head.fc1.w", "head.fc2.w"];

/// `σ(fc2(dropout(tanh(fc1(f)))))` for `f: [1, d]`. Returns `p: [1]`.
pub fn predict_head<T: Element>(g: &mut Graph<T>, f_last: Var, dropout: Option<Dropout>) -> Result<Var> {
    if g.shape(f_last).len() != 2 || g.shape(f_last)[0] != 1 {
        return Err(Error::invalid(
            "predict_head",
            format!("expected [1, d], got {:?}", g.shape(f_last)),
        ));
    }
    let h = linear(g, f_last, "head.fc1")?;
    let mut h = g.tanh(h)?;
    if let Some(Dropout { rate, seed }) = dropout.filter(|d| d.rate > 0.0) {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - rate));
        let width = g.shape(h)[1];
        let mask = Tensor::from_fn(
            [1, width],
            |_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            },
        );
        let mask = g.input(mask);
        h = g.mul(h, mask)?;
    }
    let logit = linear(g, h, "head.fc2")?;
    let p = g.sigmoid(logit)?;
    g.reshape(p, [1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn zero_weights_give_half() {
        let mut s = ParamStore::<f64>::init(&head_specs(8), 0);
        s.zero_prefix("head");
        let mut g = Graph::inference(&s);
        let f = g.input(Tensor::from_fn([1, 8], |i| i as f64));
        let p = predict_head(&mut g, f, None).unwrap();
        assert_eq!(g.value(p).item(), 0.5);
    }

    #[test]
    fn probability_in_open_interval_and_eval_is_deterministic() {
        let s = ParamStore::<f64>::init(&head_specs(8), 1);
        let run = || {
            let mut g = Graph::inference(&s);
            let f = g.input(Tensor::from_fn([1, 8], |i| (i as f64 - 3.0) * 5.0));
            let p = predict_head(&mut g, f, None).unwrap();
            g.value(p).item()
        };
        let p = run();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(p.to_bits(), run().to_bits());
    }

    #[test]
    fn dropout_mask_is_seeded() {
        let s = ParamStore::<f64>::init(&head_specs(16), 2);
        let run = |seed| {
            let mut g = Graph::inference(&s);
            let f = g.input(Tensor::from_fn([1, 16], |i| i as f64 / 8.0 - 1.0));
            let p = predict_head(&mut g, f, Some(Dropout { rate: 0.5, seed })).unwrap();
            g.value(p).item()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
