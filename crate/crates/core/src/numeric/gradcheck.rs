//! Central finite-difference checking of reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent route to the same derivatives.

use rand::Rng;

use super::{Graph, NumericError, ParamStore, Var};

/// Default perturbation size.
pub const STEP: f64 = 1e-5;

/// Worst-case agreement between analytic and numeric derivatives.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor on the denominator, so coordinates whose
/// true derivative is essentially zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `loss`'s reverse-mode gradient with central differences.
///
/// At most `max_per_param` coordinates of each tensor are probed (evenly
/// strided); pass `usize::MAX` to probe all of them.
pub fn check_gradients<F>(
    store: &ParamStore,
    loss: F,
    step: f64,
    floor: f64,
    max_per_param: usize,
) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, NumericError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.gradients(l)?
    };
    let eval = |s: &ParamStore| -> Result<f64, NumericError> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name)?.numel();
        let stride = if n <= max_per_param {
            1
        } else {
            n.div_ceil(max_per_param)
        };
        for i in (0..n).step_by(stride) {
            let orig = work.get(&name)?.data()[i];
            work.values_mut(&name)?[i] = orig + step;
            let plus = eval(&work)?;
            work.values_mut(&name)?[i] = orig - step;
            let minus = eval(&work)?;
            work.values_mut(&name)?[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(&name)?.data()[i];
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Redraws every parameter uniformly from `[-scale, scale]`.
///
/// Zero-initialized biases put ReLU units exactly on their kink, where the
/// one-sided derivative and a central difference legitimately disagree;
/// checks run on jittered parameters instead.
pub fn jitter<R: Rng + ?Sized>(store: &mut ParamStore, scale: f64, rng: &mut R) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        for v in store.values_mut(&name).expect("name from store") {
            *v = rng.gen_range(-scale..=scale);
        }
    }
}
