use super::{Graph, ParameterSet, TensorError, Var};

/// Relative errors are measured against `max(|analytic|, |numeric|, DENOM_FLOOR)`
/// so that coordinates with vanishing gradients are judged on absolute error.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamFdResult {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamFdResult>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&ParamFdResult> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `step`, on every coordinate of every parameter.
///
/// Parameter values are restored exactly afterwards; `params` is left holding
/// the analytic gradient.
pub fn finite_diff_check<F>(f: F, params: &mut ParameterSet, step: f64, tol: f64) -> Result<FdReport, TensorError>
where
    F: FnMut(&mut Graph, &ParameterSet) -> Result<Var, TensorError>,
{
    finite_diff_check_floored(f, params, step, tol, DENOM_FLOOR)
}

/// [`finite_diff_check`] with an explicit denominator floor. A central difference
/// of a loss of magnitude `|f|` carries roundoff near `1e-16 * |f| / step`, so the
/// floor should keep `tol * floor` above that.
pub fn finite_diff_check_floored<F>(
    mut f: F,
    params: &mut ParameterSet,
    step: f64,
    tol: f64,
    floor: f64,
) -> Result<FdReport, TensorError>
where
    F: FnMut(&mut Graph, &ParameterSet) -> Result<Var, TensorError>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss, params)?;

    let mut eval = |params: &ParameterSet| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        Ok(g.scalar(loss))
    };

    let mut results = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let analytic = params.tensor(idx).grad().expect("parameters carry gradients").to_vec();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params.tensor(idx).data()[j];
            params.tensor_mut(idx).data_mut()[j] = orig + step;
            let plus = eval(params)?;
            params.tensor_mut(idx).data_mut()[j] = orig - step;
            let minus = eval(params)?;
            params.tensor_mut(idx).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_rel = max_rel.max(relative_error(a, numeric, floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        results.push(ParamFdResult {
            name: params.name(idx).to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            coords_checked: analytic.len(),
        });
    }
    let max_rel_error = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(FdReport {
        params: results,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}
