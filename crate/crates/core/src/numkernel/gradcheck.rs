use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest `|analytic − central difference| / max(1, |analytic|)` over every
/// element of `x`, for a scalar function built on a graph.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; every element of every input
/// is perturbed.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Evaluation(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let y = f(&mut g, &vars)?;
    finite(g.value(y).item())?;
    let grads = g.backward(y)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let y = f(&mut g, &vars)?;
        finite(g.value(y).item()).map(|v| v as f64)
    };

    let mut worst = 0.0f32;
    let mut inputs = xs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; xs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = xs[k].data()[i];
            inputs[k].data_mut()[i] = orig + h;
            let plus = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - h;
            let minus = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h as f64);
            let err = ((a as f64 - numeric).abs() / (a.abs() as f64).max(1.0)) as f32;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn finite(v: f32) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Evaluation(format!(
            "function value is not finite: {v}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        let x = Tensor::scalar(3.0);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::full(&[3], 0.5);
        let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(2.0))), &x, 1e-3).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|g, x| Ok(g.scale(x, f32::INFINITY)), &x, 1e-3);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0).is_err());
    }
}
