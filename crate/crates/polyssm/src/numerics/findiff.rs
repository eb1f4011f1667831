//! Central-difference gradient oracle. Runs in `f64` regardless of the
//! training dtype; this is the independent route every backward rule is
//! validated against.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct FdEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Relative error with an absolute floor so that near-zero gradients do not
/// blow up the ratio: `|a - n| / max(|a|, |n|, 1e-6)`.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `f` against central differences
/// `(f(θ+eps) - f(θ-eps)) / (2·eps)` per parameter element.
///
/// `f` must be deterministic: two evaluations at the same point must agree
/// bit-for-bit, otherwise an error is returned. Passing means every
/// parameter's max relative error is at most `tol`.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    eps: f64,
    tol: f64,
    mut f: F,
) -> Result<FdReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_check", "eps must be positive"));
    }
    let eval = |store: &ParamStore<f64>, f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.value(loss).item()
    };

    let base1 = eval(store, &mut f)?;
    let base2 = eval(store, &mut f)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("f is not deterministic: {base1} vs {base2}"),
        ));
    }

    // analytic gradients
    store.zero_grads();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss, store)?;
    }

    let n_params = store.len();
    let mut entries = Vec::with_capacity(n_params);
    let mut overall: f64 = 0.0;
    for pi in 0..n_params {
        let (name, numel) = {
            let p = store.iter().nth(pi).expect("param index").1;
            (p.name.clone(), p.value.numel())
        };
        let mut worst: f64 = 0.0;
        for e in 0..numel {
            let orig = {
                let p = store.iter_mut().nth(pi).expect("param index").1;
                let v = p.value.data()[e];
                p.value.data_mut()[e] = v + eps;
                v
            };
            let plus = eval(store, &mut f)?;
            {
                let p = store.iter_mut().nth(pi).expect("param index").1;
                p.value.data_mut()[e] = orig - eps;
            }
            let minus = eval(store, &mut f)?;
            {
                let p = store.iter_mut().nth(pi).expect("param index").1;
                p.value.data_mut()[e] = orig;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.iter().nth(pi).expect("param index").1.grad.data()[e];
            worst = worst.max(rel_err(analytic, numeric));
        }
        overall = overall.max(worst);
        entries.push(FdEntry {
            name,
            max_rel_err: worst,
        });
    }
    Ok(FdReport {
        entries,
        max_rel_err: overall,
        pass: overall <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_of_squares_is_exact_to_order_eps_squared() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("theta", Tensor::new(&[3], &[0.5, -1.5, 2.0]))
            .unwrap();
        let report = finite_diff_check(&mut store, 1e-5, 1e-8, |g, s| {
            let v = g.param(s, s.lookup("theta").unwrap());
            let sq = g.mul(v, v)?;
            g.sum_all(sq)
        })
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err <= 1e-8);
    }

    #[test]
    fn wrong_backward_rule_fails() {
        // detach treats one factor as constant, so the analytic gradient of
        // sum(p ⊙ detach(p)) is p while the numeric gradient is 2p.
        let mut store = ParamStore::<f64>::new();
        store
            .add("theta", Tensor::new(&[2], &[1.0, -2.0]))
            .unwrap();
        let report = finite_diff_check(&mut store, 1e-5, 1e-4, |g, s| {
            let v = g.param(s, s.lookup("theta").unwrap());
            let c = g.detach(v);
            let prod = g.mul(v, c)?;
            g.sum_all(prod)
        })
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn rejects_bad_eps() {
        let mut store = ParamStore::<f64>::new();
        store.add("p", Tensor::new(&[1], &[1.0])).unwrap();
        assert!(finite_diff_check(&mut store, 0.0, 1e-4, |g, s| {
            let v = g.param(s, s.lookup("p").unwrap());
            g.sum_all(v)
        })
        .is_err());
    }
}
