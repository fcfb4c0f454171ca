use super::graph::{Graph, Var};
use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Matrix>,
}

/// Relative error with the `1e-12` floor used throughout the checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the analytic gradient of a scalar function against central
/// differences.
///
/// `f` builds the loss on a fresh graph from leaves holding `params`.
pub fn gradcheck<F>(f: F, params: &[Matrix], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("gradcheck epsilon must be positive"));
    }
    let eval = |ps: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).scalar())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| g.grad(v)).collect();
    drop(g);

    let mut work = params.to_vec();
    let mut max_err = 0.0;
    let mut worst = None;
    for p in 0..work.len() {
        for k in 0..work[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + epsilon;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - epsilon;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[p].data()[k], numeric);
            if err > max_err || worst.is_none() {
                max_err = err;
                worst = Some((p, k));
            }
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        worst,
        analytic,
    })
}
