use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Relative error with a small floor on the denominator so coordinates whose
/// true gradient is ~0 are judged on absolute error instead.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks a gradient supplied by `eval`, which maps a flat input to
/// `(value, analytic gradient)`.
///
/// `coords` restricts the check to a subset of coordinates; `None` checks all.
pub fn check_gradient<F>(
    eval: F,
    x0: &[f64],
    h: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = eval(x0)?;
    if analytic.len() != x0.len() {
        return Err(Error::Shape(format!(
            "analytic gradient has {} entries for {} inputs",
            analytic.len(),
            x0.len()
        )));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x0.len()).collect();
            &all
        }
    };
    let mut x = x0.to_vec();
    let mut worst = (0.0f64, 0usize);
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let (up, _) = eval(&x)?;
        x[i] = orig - h;
        let (down, _) = eval(&x)?;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = rel_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
        passed: worst.0 < tol,
    })
}

/// Gradient check for a scalar-valued graph function of one tensor input.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let shape = x.shape().to_vec();
    let eval = |flat: &[f64]| -> Result<(f64, Vec<f64>)> {
        let input = Tensor::new(&shape, flat.to_vec())?;
        let mut g = Graph::new();
        let v = g.variable(&input)?;
        let out = f(&mut g, v)?;
        let value = g.scalar_value(out)?;
        let grads = g.backward(out)?;
        let grad = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; flat.len()]);
        Ok((value, grad))
    };
    check_gradient(eval, x.data(), h, tol, None)
}

/// Gradient check of a scalar model loss with respect to one stored
/// parameter. `forward` rebuilds the loss from the store on every call.
pub fn check_param_gradient<F>(
    store: &ParamStore,
    id: ParamId,
    forward: F,
    h: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |flat: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut local = store.clone();
        local.assign(id, flat)?;
        let mut g = Graph::new();
        let out = forward(&mut g, &local)?;
        let value = g.scalar_value(out)?;
        let grads = g.backward(out)?;
        grads.accumulate_into(&mut local);
        let grad = local.tensor(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; flat.len()]);
        Ok((value, grad))
    };
    check_gradient(eval, store.tensor(id).data(), h, tol, coords)
}
