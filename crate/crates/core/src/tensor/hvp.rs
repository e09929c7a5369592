use crate::error::{Error, Result};

/// Gradient oracle over a flat parameter vector.
pub trait GradFn {
    fn grad(&self, params: &[f64]) -> Result<Vec<f64>>;
}

impl<F> GradFn for F
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn grad(&self, params: &[f64]) -> Result<Vec<f64>> {
        self(params)
    }
}

/// Step used by [`hvp`]: `1e-4·(1+‖p‖∞)/(‖v‖∞+1e-12)`.
pub fn hvp_epsilon(params: &[f64], v: &[f64]) -> f64 {
    let pinf = params.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let vinf = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    1e-4 * (1.0 + pinf) / (vinf + 1e-12)
}

/// Hessian-vector product by central differences of gradients:
/// `(∇f(p+εv) − ∇f(p−εv)) / 2ε`.
///
/// `name` labels the parameter group in the error raised on a non-finite result.
pub fn hvp(f: &impl GradFn, params: &[f64], v: &[f64], name: &str) -> Result<Vec<f64>> {
    if params.len() != v.len() {
        return Err(Error::shape("hvp", &[params.len()], &[v.len()]));
    }
    let eps = hvp_epsilon(params, v);
    let plus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p + eps * d).collect();
    let minus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p - eps * d).collect();
    let gp = f.grad(&plus)?;
    let gm = f.grad(&minus)?;
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("hessian-vector product for `{name}`")));
    }
    Ok(out)
}
