use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which coordinates a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    All,
    /// Up to `count` coordinates drawn uniformly without replacement.
    Random { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Magnitudes below this are compared absolutely rather than relatively.
const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of `f` against central finite differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-6)`. The
/// store is restored to its original values before returning.
pub fn grad_check<S, F>(
    store: &mut ParamStore<S>,
    f: F,
    eps: f64,
    tol: f64,
    sampling: Sampling,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: for<'a> Fn(&mut Graph<'a, S>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let analytic: Vec<(ParamId, Vec<S>)> = {
        let mut g = Graph::with_params(store, Mode::Eval);
        let loss = f(&mut g)?;
        check_finite(g.value(loss).item().as_f64(), "loss")?;
        let grads = g.backward(loss)?;
        store
            .iter()
            .map(|(pid, p)| {
                let var = g.param(pid);
                let grad = grads
                    .wrt(var)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![S::zero(); p.value.numel()]);
                (pid, grad)
            })
            .collect()
    };
    let coords: Vec<(ParamId, usize)> = analytic
        .iter()
        .flat_map(|(pid, g)| (0..g.len()).map(move |i| (*pid, i)))
        .collect();
    let chosen: Vec<usize> = match sampling {
        Sampling::Random { count, seed } if count < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, coords.len(), count).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..coords.len()).collect(),
    };
    let eval = |store: &ParamStore<S>| -> Result<f64> {
        let mut g = Graph::with_params(store, Mode::Eval);
        let loss = f(&mut g)?;
        let v = g.value(loss).item().as_f64();
        check_finite(v, "loss")?;
        Ok(v)
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: None,
        tol,
    };
    for &c in &chosen {
        let (pid, i) = coords[c];
        let original = store.value(pid).data()[i];
        store.get_mut(pid).value.data_mut()[i] = original + S::of(eps);
        let plus = eval(store);
        store.get_mut(pid).value.data_mut()[i] = original - S::of(eps);
        let minus = eval(store);
        store.get_mut(pid).value.data_mut()[i] = original;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let a = analytic[pid.index()].1[i].as_f64();
        check_finite(a, "analytic gradient")?;
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((store.get(pid).name.clone(), i));
        }
    }
    Ok(report)
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
