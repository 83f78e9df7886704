use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Var};
use crate::scalar::Scalar;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Largest relative error seen on each checked parameter.
    pub per_param: Vec<(String, f64)>,
}

fn eval<S: Scalar, F>(store: &ParamStore<S>, loss_fn: &F) -> Result<f64>
where
    F: Fn(&Graph<S>, &ParamStore<S>) -> Result<Var>,
{
    let g = Graph::new();
    let loss = loss_fn(&g, store)?;
    Ok(g.scalar_value(loss).as_f64())
}

/// Compares reverse-mode gradients against finite differences on up to
/// `coords` randomly chosen entries of every trainable parameter.
///
/// The numeric derivative is a five-point central difference with initial
/// step `eps · max(1, |θ|)`. The step is halved until two successive
/// estimates agree, which keeps the stencil clear of ReLU kinks near `θ`.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. Frozen parameters are
/// never sampled.
pub fn grad_check<S, F>(
    store: &mut ParamStore<S>,
    loss_fn: F,
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&Graph<S>, &ParamStore<S>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let first = eval(store, &loss_fn)?;
    let second = eval(store, &loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let g = Graph::new();
    let loss = loss_fn(&g, store)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.get(id).value.len();
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, coords).into_vec();
            v.sort_unstable();
            v
        };
        let mut param_max = 0.0f64;
        for idx in picks {
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[idx].as_f64());
            let numeric = numeric_derivative(store, &loss_fn, id, idx, eps, first)?;
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            param_max = param_max.max(rel);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), idx, analytic, numeric));
            }
        }
        report.per_param.push((store.get(id).name.clone(), param_max));
    }
    Ok(report)
}

const MAX_HALVINGS: usize = 12;

fn numeric_derivative<S, F>(
    store: &mut ParamStore<S>,
    loss_fn: &F,
    id: crate::numerics::ParamId,
    idx: usize,
    eps: f64,
    loss: f64,
) -> Result<f64>
where
    S: Scalar,
    F: Fn(&Graph<S>, &ParamStore<S>) -> Result<Var>,
{
    let orig = store.get(id).value.data()[idx];
    let x = orig.as_f64();
    let mut five_point = |h: f64| -> Result<f64> {
        let mut at = |k: f64| {
            store.get_mut(id).value.data_mut()[idx] = S::of(x + k * h);
            eval(store, loss_fn)
        };
        let f = [at(2.0), at(1.0), at(-1.0), at(-2.0)];
        store.get_mut(id).value.data_mut()[idx] = orig;
        let [p2, p1, m1, m2] = f;
        Ok((8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * h))
    };
    let mut h = eps * x.abs().max(1.0);
    let mut prev = five_point(h)?;
    for _ in 0..MAX_HALVINGS {
        h *= 0.5;
        let next = five_point(h)?;
        // Rounding noise of a difference quotient at step h.
        let noise = 64.0 * f64::EPSILON * loss.abs().max(1.0) / h;
        if (next - prev).abs() <= 1e-7 * next.abs().max(prev.abs()) + noise {
            return Ok(next);
        }
        prev = next;
    }
    Ok(prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::from_vec(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.9]).unwrap())
            .unwrap();
        let r = grad_check(
            &mut s,
            |g, st| {
                let w = g.param(st, st.id("w").unwrap());
                Ok(g.sum(g.square(w)))
            },
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coords_checked, 5);
    }

    #[test]
    fn frozen_tensor_is_not_sampled() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        s.add_frozen("c", Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let r = grad_check(
            &mut s,
            |g, st| {
                let w = g.param(st, st.id("w").unwrap());
                let c = g.param(st, st.id("c").unwrap());
                Ok(g.sum(g.mul(w, c)?))
            },
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert_eq!(r.coords_checked, 2);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(
            &mut s,
            |g, st| {
                calls.set(calls.get() + 1.0);
                let w = g.param(st, st.id("w").unwrap());
                Ok(g.add_scalar(w, calls.get()))
            },
            1e-5,
            4,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
