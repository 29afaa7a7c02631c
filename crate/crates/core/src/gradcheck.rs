//! Central-difference verification of reverse-mode gradients.

use std::fmt;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub path: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.entries.iter().filter(|e| e.max_rel_error > self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let status = if e.max_rel_error <= self.tol { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{status:4} {:<40} n={:<6} max_rel_err={:.3e}",
                e.path, e.numel, e.max_rel_error
            )?;
        }
        Ok(())
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_loss<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let loss = f(&mut g)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "gradient check".into(),
        });
    }
    Ok(v)
}

/// Compare the analytic gradient of the scalar built by `f` against central
/// differences for every element of every selected parameter. The store is
/// perturbed in place and restored exactly.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    select: impl Fn(&str) -> bool,
    step: f64,
    tol: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "gradient check".into(),
            });
        }
        g.param_grads(loss)?
    };
    let paths: Vec<String> = store.names().filter(|n| select(n)).map(String::from).collect();
    let mut entries = Vec::with_capacity(paths.len());
    for path in paths {
        let numel = store.get(&path)?.numel();
        let mut check = ParamCheck {
            path: path.clone(),
            numel,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..numel {
            let orig = store.get(&path)?.data()[i];
            store.get_mut(&path)?.data_mut()[i] = orig + step;
            let plus = eval_loss(store, &f);
            store.get_mut(&path)?.data_mut()[i] = orig - step;
            let minus = eval_loss(store, &f);
            store.get_mut(&path)?.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic[&path].data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        entries.push(check);
    }
    Ok(GradCheckReport { step, tol, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::scalar(v));
        s
    }

    #[test]
    fn square_at_three() {
        let mut store = single("x", 3.0);
        let report = grad_check(
            &mut store,
            |_| true,
            DEFAULT_STEP,
            1e-8,
            |g| {
                let x = g.param("x")?;
                g.sum_squares(x)
            },
        )
        .unwrap();
        let e = &report.entries[0];
        assert_eq!(e.analytic, 6.0);
        assert!((e.numeric - 6.0).abs() < 1e-8);
        assert!(report.passed());
        assert_eq!(store.get("x").unwrap().item(), 3.0);
    }

    #[test]
    fn sigmoid_at_one() {
        let mut store = single("x", 1.0);
        let report = grad_check(
            &mut store,
            |_| true,
            DEFAULT_STEP,
            1e-8,
            |g| {
                let x = g.param("x")?;
                g.sigmoid(x)
            },
        )
        .unwrap();
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((report.entries[0].analytic - s * (1.0 - s)).abs() < 1e-15);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = single("x", 0.0);
        let r = grad_check(
            &mut store,
            |_| true,
            DEFAULT_STEP,
            1e-4,
            |g| {
                let x = g.param("x")?;
                let big = g.scale(x, 1.0)?;
                let c = g.input(Tensor::scalar(f64::INFINITY));
                g.add(big, c)
            },
        );
        assert!(r.is_err());
    }
}
