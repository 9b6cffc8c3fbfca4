//! Finite-difference check of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Graph, ParamId, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Number of coordinates drawn; all of them when this exceeds the total.
    pub samples: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so coordinates with
    /// near-zero gradient are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-2,
            samples: 200,
            seed: 0,
            floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error.
    pub worst: Option<Discrepancy>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

fn eval<T: Real, F>(loss_fn: &F, params: &ParamSet<T>) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, T>, &'p ParamSet<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let v = g.value(loss).item().to_f64_lossy();
    if !v.is_finite() {
        return Err(Error::Invalid(format!("gradient check: loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of `loss_fn` with central differences
/// `(f(θ + eps) - f(θ - eps)) / 2eps` on randomly drawn coordinates.
pub fn gradient_check<T: Real, F>(loss_fn: F, params: &ParamSet<T>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p, T>, &'p ParamSet<T>) -> Result<Var>,
{
    let mut grads = params.zeros_like();
    {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, params)?;
        let v = g.value(loss).item().to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::Invalid(format!("gradient check: loss evaluated to {v}")));
        }
        g.backward(loss).accumulate_into(&mut grads);
    }

    let coords: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picked: Vec<usize> = if opts.samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        let mut v = rand::seq::index::sample(&mut rng, coords.len(), opts.samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for c in picked {
        let (p, i) = coords[c];
        let id = ParamId(p);
        let orig = work.get(id).data()[i];
        let up = orig + T::from_f64_lossy(opts.eps);
        let down = orig - T::from_f64_lossy(opts.eps);
        work.get_mut(id).data_mut()[i] = up;
        let f_up = eval(&loss_fn, &work)?;
        work.get_mut(id).data_mut()[i] = down;
        let f_down = eval(&loss_fn, &work)?;
        work.get_mut(id).data_mut()[i] = orig;
        // divide by the step actually representable in T
        let step = (up - down).to_f64_lossy();
        let numeric = (f_up - f_down) / step;
        let analytic = grads[p].data()[i].to_f64_lossy();
        let rel = relative_error(analytic, numeric, opts.floor);
        report.checked += 1;
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(Discrepancy {
                param: params.name(id).to_string(),
                index: i,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("x", Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let r = gradient_check(
            |g, ps| {
                let x = ps.var(g, ParamId(0));
                let y = g.matmul(x, x);
                Ok(g.sum(y))
            },
            &ps,
            GradCheckOptions {
                eps: 1e-4,
                samples: 1,
                seed: 0,
                floor: 0.0,
            },
        )
        .unwrap();
        let w = r.worst.unwrap();
        assert!((w.analytic - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn softmax_dot_constant() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("x", Tensor::new(vec![1, 4], vec![0.3, -1.2, 2.0, 0.5]).unwrap());
        let c = Tensor::new(vec![4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let r = gradient_check(
            |g, ps| {
                let x = ps.var(g, ParamId(0));
                let s = g.softmax(x);
                let cv = g.input(c.clone());
                let y = g.matmul(s, cv);
                Ok(g.sum(y))
            },
            &ps,
            GradCheckOptions {
                eps: 1e-3,
                samples: 4,
                seed: 0,
                floor: 0.0,
            },
        )
        .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("x", Tensor::new(vec![1, 1], vec![f64::INFINITY]).unwrap());
        let r = gradient_check(|g, ps| Ok(ps.var(g, ParamId(0))), &ps, GradCheckOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert!((relative_error(1e-9, 0.0, 1e-2) - 1e-7).abs() < 1e-20);
        assert_eq!(relative_error(2.0, 1.0, 0.0), 0.5);
        assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
    }
}
