//! Central finite-difference checks of analytic parameter gradients.

use rand::Rng;

use crate::params::ParamStore;
use crate::rng::{derive_rng, streams};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so entries whose true gradient
/// is at rounding level do not dominate the maximum.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub entry: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares `loss_fn`'s analytic gradient with central differences of step
/// `step` at `n_probes` entries drawn uniformly over all scalars. Returns
/// the maximum relative error and the individual probes.
pub fn gradient_check<F>(
    loss_fn: F,
    params: &ParamStore<f64>,
    n_probes: usize,
    step: f64,
    seed: u64,
) -> (f64, Vec<ProbeResult>)
where
    F: Fn(&ParamStore<f64>) -> (f64, Vec<Tensor<f64>>),
{
    let (_, grads) = loss_fn(params);
    assert_eq!(grads.len(), params.len());
    let total = params.num_elements();
    let mut rng = derive_rng(seed, streams::PROBE);
    let mut worst: f64 = 0.0;
    let mut probes = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let mut flat = rng.random_range(0..total);
        let mut entry = 0;
        while flat >= params.tensor_at(entry).len() {
            flat -= params.tensor_at(entry).len();
            entry += 1;
        }
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.tensor_at_mut(entry).data_mut()[flat] += delta;
            loss_fn(&p).0
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let analytic = grads[entry].data()[flat];
        let rel_err = relative_error(analytic, numeric);
        worst = worst.max(rel_err);
        probes.push(ProbeResult { entry, index: flat, analytic, numeric, rel_err });
    }
    (worst, probes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_vec(&[3], vec![0.5, -1.25, 2.0]));
        p.insert("b", Tensor::from_vec(&[2], vec![3.0, 0.75]));
        let coef = [1.0, 2.0, 0.5, 4.0, 1.5];
        let f = |p: &ParamStore<f64>| {
            let mut loss = 0.0;
            let mut k = 0;
            let grads = p
                .tensors()
                .map(|t| {
                    t.map(|x| {
                        let c = coef[k];
                        k += 1;
                        loss += c * x * x;
                        2.0 * c * x
                    })
                })
                .collect();
            (loss, grads)
        };
        let (err, probes) = gradient_check(f, &p, 20, 1e-3, 1);
        assert_eq!(probes.len(), 20);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let f = |p: &ParamStore<f64>| {
            let t = p.tensor_at(0);
            let l = t.data().iter().map(|x| x * x).sum();
            (l, vec![t.map(|x| 3.0 * x)])
        };
        assert!(gradient_check(f, &p, 4, 1e-4, 2).0 > 0.1);
    }
}
