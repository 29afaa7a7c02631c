//! Objective, optimizer, metrics, evaluation and the training loop.

pub mod adam;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::head::HEAD_WEIGHTS;
use crate::fusion::network::{pmfnet_forward, ForwardMode, ModelConfig};
use crate::params::{Graph, ParamStore};
use crate::tensor::{Element, Tensor};

pub use adam::{Adam, AdamConfig};
pub use metrics::{auc, auc_counts, f1_score, Confusion, MetricsReport};

/// Probability clamp inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub l2_head: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            dropout: 0.2,
            l2_head: 1e-3,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("train.dropout", "must lie in [0, 1)"));
        }
        if !(self.l2_head.is_finite() && self.l2_head >= 0.0) {
            return Err(Error::config("train.l2_head", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("train.threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Clamped binary cross-entropy of a probability against a 0/1 label.
pub fn bce_loss<T: Element>(g: &mut Graph<T>, p: Var, label: u8) -> Result<Var> {
    g.bce(p, T::lit(f64::from(label)), T::lit(BCE_EPS))
}

/// `λ · Σ‖W‖²` over the head weight matrices (biases excluded).
pub fn l2_penalty<T: Element>(g: &mut Graph<T>, lambda: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for name in HEAD_WEIGHTS {
        let w = g.param(name)?;
        let s = g.sum_squares(w)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    g.scale(total.expect("head weights"), T::lit(lambda))
}

/// Per-sample objective: `(bce + λ‖W_head‖²) / batch`. Returns the graph
/// node and the unscaled cross-entropy.
pub fn sample_objective<T: Element>(
    g: &mut Graph<T>,
    model: &ModelConfig,
    train: &TrainConfig,
    sample: &Sample<T>,
    batch: usize,
    dropout_seed: u64,
) -> Result<(Var, T)> {
    let mode = ForwardMode::Train {
        dropout: train.dropout,
        seed: dropout_seed,
    };
    let out = pmfnet_forward(g, model, sample, mode)?;
    let loss = bce_loss(g, out.prob, sample.label)?;
    let bce = g.value(loss).item();
    let l2 = l2_penalty(g, train.l2_head)?;
    let obj = g.add(loss, l2)?;
    let obj = g.scale(obj, T::one() / T::from_usize(batch).expect("batch"))?;
    Ok((obj, bce))
}

/// Probabilities for every sample in eval mode, in input order.
pub fn predict_all<T: Element>(store: &ParamStore<T>, model: &ModelConfig, samples: &[Sample<T>]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::inference(store);
            let out = pmfnet_forward(&mut g, model, s, ForwardMode::Eval)?;
            Ok(out.probability(&g).to_f64().expect("finite"))
        })
        .collect()
}

pub fn evaluate<T: Element>(
    store: &ParamStore<T>,
    model: &ModelConfig,
    samples: &[Sample<T>],
    threshold: f64,
) -> Result<MetricsReport> {
    let scores = predict_all(store, model, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    MetricsReport::compute(&scores, &labels, threshold)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training-mode cross-entropy over the epoch.
    pub loss: f64,
    /// Eval-mode metrics on the training split after the epoch.
    pub metrics: MetricsReport,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} loss={:.6} {}", self.epoch, self.loss, self.metrics)
    }
}

/// SplitMix64 finalizer, for deriving independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ p))
}

/// Mini-batch Adam on `samples`. Each epoch visits a seeded permutation;
/// per-sample gradients are summed in batch order and applied once per
/// batch. `on_epoch` sees each log line as it is produced.
pub fn train<T: Element>(
    store: &mut ParamStore<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[Sample<T>],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::sample("dataset", "no training samples"));
    }
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate));
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let context = || format!("epoch {epoch} batch {b}");
            let mut acc: BTreeMap<String, Tensor<T>> = BTreeMap::new();
            for (k, &i) in batch.iter().enumerate() {
                let seed = derive_seed(cfg.seed, &[epoch as u64, b as u64, k as u64, 0xd0]);
                let mut g = Graph::new(store);
                let (obj, bce) =
                    sample_objective(&mut g, model, cfg, &samples[i], batch.len(), seed).map_err(|e| match e {
                        Error::NonFinite(_) => Error::NonFiniteLoss { context: context() },
                        other => other,
                    })?;
                let bce = bce.to_f64().expect("finite");
                if !bce.is_finite() {
                    return Err(Error::NonFiniteLoss { context: context() });
                }
                loss_sum += bce;
                for (name, grad) in g.param_grads(obj)? {
                    match acc.get_mut(&name) {
                        Some(a) => a.data_mut().iter_mut().zip(grad.data()).for_each(|(x, &y)| *x += y),
                        None => {
                            acc.insert(name, grad);
                        }
                    }
                }
            }
            if acc.values().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    context: format!("{} (gradient)", context()),
                });
            }
            adam.step(store, &acc)?;
        }
        let metrics = evaluate(store, model, samples, cfg.threshold)?;
        let log = EpochLog {
            epoch,
            loss: loss_sum / samples.len() as f64,
            metrics,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_line_format() {
        let metrics = MetricsReport::compute(&[0.9, 0.2], &[1, 0], 0.5).unwrap();
        let line = EpochLog {
            epoch: 3,
            loss: 0.25,
            metrics,
        }
        .to_string();
        assert_eq!(
            line,
            "epoch=3 loss=0.250000 acc=1.000000 auc=1.000000 f1=1.000000 p=1.000000 r=1.000000"
        );
    }

    #[test]
    fn l2_ignores_everything_but_head_weights() {
        let mut s = ParamStore::<f64>::init(&crate::fusion::head::head_specs(8), 0);
        s.zero_prefix("head.fc1.w");
        s.zero_prefix("head.fc2.w");
        s.insert("vfe.other", Tensor::ones([3]));
        let mut g = Graph::new(&s);
        let l2 = l2_penalty(&mut g, 1e-3).unwrap();
        assert_eq!(g.value(l2).item(), 0.0);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let p = g.input(Tensor::scalar(0.5));
        for y in [0, 1] {
            let l = bce_loss(&mut g, p, y).unwrap();
            assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, &[1, 2]), derive_seed(0, &[2, 1]));
        assert_eq!(derive_seed(5, &[1]), derive_seed(5, &[1]));
    }
}
