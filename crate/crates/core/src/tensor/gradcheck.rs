//! Central finite-difference check of tape gradients.
//!
//! Everything to be differentiated is passed as a [`ParameterSet`]; the closure
//! rebuilds the scalar from scratch for every probe. Coordinates whose
//! perturbation straddles a ReLU or max-pool switch point are recognised by
//! disagreeing one-sided slopes and reported as skipped instead of failed.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParameterSet, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Tolerance a coordinate must meet.
    pub tol: f64,
    /// Coordinates probed per parameter tensor (all of them when smaller).
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            floor: 1e-4,
            tol: 1e-4,
            per_tensor: 6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Name and flat index of the worst non-skipped coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares tape gradients of `f` against central differences.
pub fn check<F>(params: &ParameterSet, opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, p)?;
        Ok(g.scalar(v))
    };
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let grads = g.backward(loss)?;
    let f0 = g.scalar(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let n = tensor.numel();
        let analytic: Vec<f64> = g
            .param_var(name)
            .and_then(|v| grads.get(v))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let idx: Vec<usize> = if n <= opts.per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.per_tensor).into_vec()
        };
        for i in idx {
            let x0 = tensor.values()[i];
            probe.get_mut(name).expect("cloned").values_mut()[i] = x0 + opts.h;
            let fp = eval(&probe)?;
            probe.get_mut(name).expect("cloned").values_mut()[i] = x0 - opts.h;
            let fm = eval(&probe)?;
            probe.get_mut(name).expect("cloned").values_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let err = rel_err(analytic[i], numeric, opts.floor);
            if err > opts.tol {
                let right = (fp - f0) / opts.h;
                let left = (f0 - fm) / opts.h;
                let sides_disagree = rel_err(right, left, opts.floor) > 1e-2;
                let matches_side = rel_err(analytic[i], right, opts.floor) < 1e-2
                    || rel_err(analytic[i], left, opts.floor) < 1e-2;
                if sides_disagree && matches_side {
                    report.skipped_kinks += 1;
                    continue;
                }
            }
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cubic_passes() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_vec(vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        let r = check(&p, GradCheckOptions::default(), |g, p| {
            let x = g.param("x", p.get("x").unwrap());
            let x2 = g.mul(x, x)?;
            let x3 = g.mul(x2, x)?;
            Ok(g.sum(x3))
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::from_vec(vec![0.7, 1.1]).unwrap()).unwrap();
        // detach hides x from one factor, so the tape reports half the slope of x².
        let r = check(&p, GradCheckOptions::default(), |g, p| {
            let x = g.param("x", p.get("x").unwrap());
            let d = g.detach(x);
            let y = g.mul(x, d)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_err > 0.4);
    }
}
