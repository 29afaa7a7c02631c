//! Acceptance gate. Each test prints one `C<k> PASS|FAIL ...` line and then
//! asserts. Tests are serialized so wall-clock budgets are measured alone.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use pmfnet::cli::model_grad_check;
use pmfnet::config::{Preset, RunConfig};
use pmfnet::data::pmft::{decode, encode};
use pmfnet::data::synth::{generate, generate_split, Signal, Split};
use pmfnet::fusion::network::predict;
use pmfnet::fusion::Variant;
use pmfnet::gradcheck::{DEFAULT_STEP, DEFAULT_TOL};
use pmfnet::params::ParamStore;
use pmfnet::train::{evaluate, f1_score, train, MetricsReport};
use pmfnet::Tensor;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn gate<R>(f: impl FnOnce() -> R) -> R {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    f()
}

/// Written to the real stdout so the line shows without `--nocapture`.
fn report(id: &str, ok: bool, detail: String) {
    let line = format!("\n{id} {} {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "{id} failed: {detail}");
}

const C1_BUDGET: Duration = Duration::from_secs(120);
const C3_PASSES: usize = 1000;
const C3_TOL: f64 = 1e-6;
const C5_BUDGET: Duration = Duration::from_secs(600);
const C5_MIN_ACC: f64 = 0.95;
const C5_MIN_AUC: f64 = 0.98;
const C6_MAX_BLIND_AUC: f64 = 0.6;
const C6_MIN_SIGHTED_AUC: f64 = 0.95;
const C8_TENSORS: usize = 1000;

#[test]
fn c1_gradient_integrity() {
    gate(|| {
        let cfg = RunConfig::preset(Preset::Tiny);
        let start = Instant::now();
        let r = model_grad_check(&cfg, DEFAULT_STEP, DEFAULT_TOL, None).unwrap();
        let took = start.elapsed();
        let modules = ["vfe.", "mfe.", "dga.", "maf.", "taf.", "head."];
        let covered = modules.iter().all(|m| r.entries.iter().any(|e| e.path.starts_with(m)));
        report(
            "C1",
            r.passed() && covered && took <= C1_BUDGET,
            format!(
                "params={} max_rel_err={:.3e} tol={DEFAULT_TOL:e} time={:.1}s budget={}s",
                r.entries.len(),
                r.max_error(),
                took.as_secs_f64(),
                C1_BUDGET.as_secs()
            ),
        );
    });
}

#[test]
fn c2_oracle_equivalence() {
    gate(|| {
        let runs = [
            ("matmul", matmul_oracle(101)),
            ("conv2d", conv2d_oracle(102)),
            ("pool", pool_oracle(103)),
            ("softmax", softmax_oracle(104)),
            ("mha", mha_oracle(105)),
        ];
        let mut ok = true;
        let mut parts = Vec::new();
        for (name, r) in runs {
            ok &= r.instances >= 100 && r.max_error <= LINALG_TOL;
            parts.push(format!("{name}={:.1e}/{}", r.max_error, r.instances));
        }
        let mismatches = metrics_oracle(106);
        ok &= mismatches == 0;
        parts.push(format!("metrics_mismatches={mismatches}/{INSTANCES}"));
        report("C2", ok, format!("{} tol={LINALG_TOL:e}", parts.join(" ")));
    });
}

#[test]
fn c3_normalization_invariants() {
    gate(|| {
        let cfg = RunConfig::preset(Preset::Tiny);
        let mut synth = cfg.synth();
        synth.n_train = C3_PASSES;
        synth.seed = 31;
        let samples = generate_split(&synth, Split::Train).unwrap();
        let mut r = rng(32);
        let (mut worst_row, mut ca_sa_out, mut ca_sa_count) = (0.0f64, 0usize, 0usize);
        for (i, s) in samples.iter().enumerate() {
            let mut s = s.cast::<f64>();
            // Half the passes see raw noise instead of structured frames.
            if i % 2 == 1 {
                let v = &mut s.visual;
                for t in [
                    &mut v.local_rgb,
                    &mut v.local_depth,
                    &mut v.global_sem,
                    &mut v.global_depth,
                ]
                .into_iter()
                .flatten()
                {
                    t.data_mut().iter_mut().for_each(|x| *x = r.random_range(0.0..1.0));
                }
                s.motion
                    .speed
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = r.random_range(-3.0..3.0));
            }
            let store = ParamStore::<f64>::init(&cfg.model.param_specs(), i as u64);
            let (_, d) = predict(&store, &cfg.model, &s).unwrap();
            let n = cfg.model.frames;
            for row in d.modality_weights.data().chunks(3) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            for row in d.temporal_attention.data().chunks(n) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            for t in d.channel_attention.iter().chain(&d.spatial_attention) {
                ca_sa_count += t.numel();
                ca_sa_out += t.data().iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
            }
        }
        report(
            "C3",
            worst_row <= C3_TOL && ca_sa_out == 0 && ca_sa_count > 0,
            format!(
                "passes={C3_PASSES} max_row_sum_err={worst_row:.2e} tol={C3_TOL:e} ca_sa_outside_open_unit={ca_sa_out}/{ca_sa_count}"
            ),
        );
    });
}

#[test]
fn c4_f1_reference_rows() {
    gate(|| {
        let rows = [(0.70, 0.93, 0.7988, 5e-5, 0.80), (0.68, 0.91, 0.778, 5e-4, 0.78)];
        let mut ok = true;
        let mut parts = Vec::new();
        for (p, r, want, tol, published) in rows {
            let f = f1_score(p, r);
            let rounded = (f * 100.0).round() / 100.0;
            ok &= (f - want).abs() <= tol && rounded == published;
            parts.push(format!("f1({p},{r})={f:.4}->{rounded:.2}"));
        }
        report("C4", ok, parts.join(" "));
    });
}

fn train_and_test(cfg: &RunConfig) -> (MetricsReport, Duration) {
    let start = Instant::now();
    let (train_set, test_set) = generate(&cfg.synth()).unwrap();
    let mut store = ParamStore::<f32>::init(&cfg.model.param_specs(), cfg.train.seed);
    train(&mut store, &cfg.model, &cfg.train, &train_set, |_| {}).unwrap();
    let m = evaluate(&store, &cfg.model, &test_set, cfg.train.threshold).unwrap();
    (m, start.elapsed())
}

#[test]
fn c5_synthetic_learnability() {
    gate(|| {
        let cfg = RunConfig::default();
        let (m, took) = train_and_test(&cfg);
        report(
            "C5",
            m.accuracy >= C5_MIN_ACC && m.auc >= C5_MIN_AUC && took <= C5_BUDGET,
            format!(
                "test_acc={:.4} (>= {C5_MIN_ACC}) test_auc={:.4} (>= {C5_MIN_AUC}) epochs={} time={:.0}s budget={}s",
                m.accuracy,
                m.auc,
                cfg.train.epochs,
                took.as_secs_f64(),
                C5_BUDGET.as_secs()
            ),
        );
    });
}

/// Same data size, epochs and seeds as C5; only the label source and the
/// variant change.
fn ablation_config(signal: Signal, variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.variant = variant;
    cfg.synth.signal = signal;
    cfg
}

#[test]
fn c6_branch_ablation_direction() {
    gate(|| {
        let mut ok = true;
        let mut parts = Vec::new();
        for (signal, sighted, blind) in [
            (Signal::Motion, Variant::V4, Variant::V3),
            (Signal::Visual, Variant::V3, Variant::V4),
        ] {
            let (s, _) = train_and_test(&ablation_config(signal, sighted));
            let (b, _) = train_and_test(&ablation_config(signal, blind));
            ok &= s.auc >= C6_MIN_SIGHTED_AUC && b.auc <= C6_MAX_BLIND_AUC;
            parts.push(format!(
                "{signal}-signal: {}_auc={:.4} {}_auc={:.4}",
                sighted.name(),
                s.auc,
                blind.name(),
                b.auc
            ));
        }
        report(
            "C6",
            ok,
            format!(
                "{} (sighted >= {C6_MIN_SIGHTED_AUC}, blind <= {C6_MAX_BLIND_AUC})",
                parts.join("; ")
            ),
        );
    });
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c7_training_is_deterministic() {
    gate(|| {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tmp.path().join("cfg.txt");
        fs::write(&cfg, RunConfig::preset(Preset::Tiny).to_text()).unwrap();
        let data = tmp.path().join("data");
        let bin = env!("CARGO_BIN_EXE_pmfnet");
        let run = |args: &[&Path]| {
            let mut c = Command::new(bin);
            for a in args {
                c.arg(a);
            }
            let o = c.output().unwrap();
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            o.stdout
        };
        let p = |s: &'static str| Path::new(s);
        run(&[p("synth"), p("--config"), &cfg, p("--out"), &data]);
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let log_a = run(&[p("train"), p("--config"), &cfg, p("--data"), &data, p("--out"), &a]);
        let log_b = run(&[p("train"), p("--config"), &cfg, p("--data"), &data, p("--out"), &b]);
        let (ta, tb) = (tree(&a), tree(&b));
        report(
            "C7",
            log_a == log_b && ta == tb && !ta.is_empty(),
            format!(
                "stdout_identical={} files={} checkpoint_identical={}",
                log_a == log_b,
                ta.len(),
                ta == tb
            ),
        );
    });
}

#[test]
fn c8_pmft_format() {
    gate(|| {
        let mut r = rng(81);
        let mut exact = 0;
        for i in 0..C8_TENSORS {
            let shape: Vec<usize> = (0..r.random_range(1..=4)).map(|_| r.random_range(1..5)).collect();
            let ok = if i % 2 == 0 {
                let t = Tensor::<f32>::from_fn(shape, |_| loop {
                    let v = f32::from_bits(r.random::<u32>());
                    if v.is_finite() {
                        break v;
                    }
                });
                let back = decode::<f32>(&encode(&t).unwrap()).unwrap();
                back.shape() == t.shape()
                    && back
                        .data()
                        .iter()
                        .zip(t.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            } else {
                let t = Tensor::<f64>::from_fn(shape, |_| r.random_range(-1e6..1e6));
                let back = decode::<f64>(&encode(&t).unwrap()).unwrap();
                back.shape() == t.shape()
                    && back
                        .data()
                        .iter()
                        .zip(t.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            };
            exact += usize::from(ok);
        }
        let header = encode(&Tensor::<f32>::zeros([2, 3])).unwrap();
        let want = [
            0x50, 0x4D, 0x46, 0x54, 0x01, 0x01, 0x02, 0x02, 0x00, 0x00, 0x00, 0x03, 0x00, 0x00, 0x00,
        ];
        let header_ok = header[..15] == want && header.len() == 15 + 24;
        report(
            "C8",
            exact == C8_TENSORS && header_ok,
            format!("bit_exact={exact}/{C8_TENSORS} header_match={header_ok}"),
        );
    });
}
