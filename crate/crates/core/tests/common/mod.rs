//! Brute-force reference implementations and random instance generators
//! shared by the integration tests.

#![allow(dead_code)]

use pmfnet::autodiff::PoolMode;
use pmfnet::nn::multi_head_attention;
use pmfnet::params::{Graph, ParamStore};
use pmfnet::train::{auc_counts, Confusion, MetricsReport};
use pmfnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 100;
/// f64 agreement required of linear-algebra kernels against loop oracles.
pub const LINALG_TOL: f64 = 1e-10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation seen over a batch of random instances.
#[derive(Debug, Clone, Copy)]
pub struct OracleRun {
    pub instances: usize,
    pub max_error: f64,
}

fn run(mut one: impl FnMut(&mut ChaCha8Rng) -> f64, seed: u64) -> OracleRun {
    let mut r = rng(seed);
    let max_error = (0..INSTANCES).map(|_| one(&mut r)).fold(0.0, f64::max);
    OracleRun {
        instances: INSTANCES,
        max_error,
    }
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                c[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    c
}

pub fn matmul_oracle(seed: u64) -> OracleRun {
    run(
        |r| {
            let (m, k, n) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..7));
            let a = random_tensor(r, &[m, k]);
            let b = random_tensor(r, &[k, n]);
            let store = ParamStore::new();
            let mut g = Graph::inference(&store);
            let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
            let c = g.matmul(va, vb).unwrap();
            assert_eq!(g.shape(c), &[m, n]);
            max_diff(g.value(c).data(), &naive_matmul(a.data(), b.data(), m, k, n))
        },
        seed,
    )
}

pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - p;
                            let sx = xx as isize + kx as isize - p;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc += w.at(&[o, c, ky, kx]) * x.at(&[c, sy as usize, sx as usize]);
                            }
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

pub fn conv2d_oracle(seed: u64) -> OracleRun {
    run(
        |r| {
            let (ci, co) = (r.random_range(1..4), r.random_range(1..4));
            let (h, w) = (r.random_range(1..6), r.random_range(1..6));
            let k = if r.random_bool(0.5) { 1 } else { 3 };
            let x = random_tensor(r, &[ci, h, w]);
            let wt = random_tensor(r, &[co, ci, k, k]);
            let b = random_tensor(r, &[co]);
            let store = ParamStore::new();
            let mut g = Graph::inference(&store);
            let (vx, vw, vb) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
            let y = g.conv2d(vx, vw, vb).unwrap();
            assert_eq!(g.shape(y), &[co, h, w]);
            max_diff(g.value(y).data(), &naive_conv2d(&x, &wt, &b))
        },
        seed,
    )
}

pub fn naive_pool(x: &Tensor<f64>, mode: PoolMode) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    match mode {
        PoolMode::SpatialAvg | PoolMode::GlobalAvg | PoolMode::SpatialMax => {
            for ch in 0..c {
                let mut vals = Vec::new();
                for y in 0..h {
                    for xx in 0..w {
                        vals.push(x.at(&[ch, y, xx]));
                    }
                }
                out.push(if mode == PoolMode::SpatialMax {
                    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
        PoolMode::ChannelAvg | PoolMode::ChannelMax => {
            for y in 0..h {
                for xx in 0..w {
                    let vals: Vec<f64> = (0..c).map(|ch| x.at(&[ch, y, xx])).collect();
                    out.push(if mode == PoolMode::ChannelMax {
                        vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        vals.iter().sum::<f64>() / c as f64
                    });
                }
            }
        }
    }
    out
}

pub const POOL_MODES: [PoolMode; 5] = [
    PoolMode::SpatialAvg,
    PoolMode::SpatialMax,
    PoolMode::ChannelAvg,
    PoolMode::ChannelMax,
    PoolMode::GlobalAvg,
];

/// Max modes must agree exactly; averages are summed in the same order as
/// the oracle for spatial reductions, so they are held to exact equality too.
pub fn pool_oracle(seed: u64) -> OracleRun {
    run(
        |r| {
            let shape = [r.random_range(1..5), r.random_range(1..5), r.random_range(1..5)];
            let x = random_tensor(r, &shape);
            let mut worst = 0f64;
            for mode in POOL_MODES {
                let store = ParamStore::new();
                let mut g = Graph::inference(&store);
                let vx = g.input(x.clone());
                let y = g.pool(vx, mode).unwrap();
                worst = worst.max(max_diff(g.value(y).data(), &naive_pool(&x, mode)));
            }
            worst
        },
        seed,
    )
}

pub fn naive_softmax(x: &Tensor<f64>, axis: usize) -> Vec<f64> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let m = (0..len).map(|j| x.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|j| (x.data()[idx(j)] - m).exp()).sum();
            for j in 0..len {
                out[idx(j)] = (x.data()[idx(j)] - m).exp() / z;
            }
        }
    }
    out
}

pub fn softmax_oracle(seed: u64) -> OracleRun {
    run(
        |r| {
            let rank = r.random_range(1..4);
            let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..6)).collect();
            let axis = r.random_range(0..rank);
            let x = random_tensor(r, &shape).map(|v| v * 5.0);
            let store = ParamStore::new();
            let mut g = Graph::inference(&store);
            let vx = g.input(x.clone());
            let y = g.softmax(vx, axis).unwrap();
            max_diff(g.value(y).data(), &naive_softmax(&x, axis))
        },
        seed,
    )
}

/// Per-sequence, per-head loops for attention over packed `[batch·len, dim]`.
/// Returns the output rows and the `[batch, heads, len, len]` weights.
pub fn naive_mha(
    x: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    wo: &Tensor<f64>,
    batch: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let len = rows / batch;
    let dk = d / heads;
    let q = naive_matmul(x.data(), wq.data(), rows, d, d);
    let k = naive_matmul(x.data(), wk.data(), rows, d, d);
    let v = naive_matmul(x.data(), wv.data(), rows, d, d);
    let mut ctx = vec![0.0; rows * d];
    let mut weights = vec![0.0; batch * heads * len * len];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..len {
                let qi = (b * len + i) * d + h * dk;
                let scores: Vec<f64> = (0..len)
                    .map(|j| {
                        let kj = (b * len + j) * d + h * dk;
                        (0..dk).map(|t| q[qi + t] * k[kj + t]).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..len {
                    let a = (scores[j] - m).exp() / z;
                    weights[((b * heads + h) * len + i) * len + j] = a;
                    let vj = (b * len + j) * d + h * dk;
                    for t in 0..dk {
                        ctx[qi + t] += a * v[vj + t];
                    }
                }
            }
        }
    }
    (naive_matmul(&ctx, wo.data(), rows, d, d), weights)
}

pub fn mha_oracle(seed: u64) -> OracleRun {
    run(
        |r| {
            let (batch, len) = (r.random_range(1..4), r.random_range(1..6));
            let heads = r.random_range(1..4);
            let d = heads * r.random_range(1..4);
            let x = random_tensor(r, &[batch * len, d]);
            let mut store = ParamStore::new();
            let w: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(r, &[d, d])).collect();
            for (name, t) in ["wq", "wk", "wv", "wo"].iter().zip(&w) {
                store.insert(format!("attn.{name}"), t.clone());
            }
            let mut g = Graph::inference(&store);
            let vx = g.input(x.clone());
            let (out, maps) = multi_head_attention(&mut g, vx, "attn", batch, heads).unwrap();
            let (o, a) = naive_mha(&x, &w[0], &w[1], &w[2], &w[3], batch, heads);
            max_diff(g.value(out).data(), &o).max(max_diff(g.value(maps).data(), &a))
        },
        seed,
    )
}

/// Scores on a coarse grid so ties are frequent, and labels with both classes.
pub fn random_scored_labels(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = r.random_range(2..40);
    let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..11u8)) / 10.0).collect();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
    labels[0] = 0;
    labels[1] = 1;
    (scores, labels)
}

pub fn brute_confusion(scores: &[f64], labels: &[u8], threshold: f64) -> [usize; 4] {
    let mut c = [0usize; 4];
    for (&s, &y) in scores.iter().zip(labels) {
        let p = s >= threshold;
        let slot = match (p, y == 1) {
            (true, true) => 0,
            (true, false) => 1,
            (false, false) => 2,
            (false, true) => 3,
        };
        c[slot] += 1;
    }
    c
}

/// Twice the Mann–Whitney U over every positive/negative pair, and the pair count.
pub fn brute_auc_counts(scores: &[f64], labels: &[u8]) -> (u64, u64) {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (twice, pairs)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Count mismatches between the library metrics and the brute-force ones.
/// Confusion counts and AUC rationals must agree exactly; the derived ratios
/// are recomputed from the oracle counts with the same formulas.
pub fn metrics_oracle(seed: u64) -> usize {
    let mut r = rng(seed);
    let mut mismatches = 0;
    for _ in 0..INSTANCES {
        let (scores, labels) = random_scored_labels(&mut r);
        let [tp, fp, tn, fn_] = brute_confusion(&scores, &labels, 0.5);
        let c = Confusion::from_scores(&scores, &labels, 0.5);
        let m = MetricsReport::compute(&scores, &labels, 0.5).unwrap();
        let (p, rc) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        let (twice, pairs) = brute_auc_counts(&scores, &labels);
        let ok = [c.tp, c.fp, c.tn, c.fn_] == [tp, fp, tn, fn_]
            && m.accuracy == ratio(tp + tn, scores.len())
            && m.precision == p
            && m.recall == rc
            && m.f1 == f1
            && auc_counts(&scores, &labels).unwrap() == (twice, pairs)
            && m.auc == twice as f64 / (2 * pairs) as f64;
        mismatches += usize::from(!ok);
    }
    mismatches
}
