//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Worst element of a gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (tensor index, element index, analytic, numeric) at the worst element.
    pub worst: (usize, usize, f64, f64),
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss` with respect to every element of
/// `values` against `(L(v + h) − L(v − h)) / 2h`. Perturbations and loss
/// evaluations run in precision `S`. `loss` receives one leaf per tensor.
pub fn check<S: Real>(
    values: &[Tensor<S>],
    h: f64,
    floor: f64,
    loss: impl Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |vals: &[Tensor<S>], track: bool| -> Result<(S, Option<Vec<Tensor<S>>>)> {
        let mut g = Graph::<S>::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), track)).collect();
        let out = loss(&mut g, &vars)?;
        let value = g.scalar(out);
        let grads = track.then(|| {
            let grads = g.backward(out);
            vars.iter()
                .zip(vals)
                .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
                .collect()
        });
        Ok((value, grads))
    };
    let (_, analytic) = eval(values, true)?;
    let analytic = analytic.expect("tracked");
    let step = S::of(h);
    let mut work = values.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    for ti in 0..values.len() {
        for ei in 0..values[ti].len() {
            let orig = values[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[ti].data_mut()[ei] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[ti].data_mut()[ei] = orig;
            // Divide by the step actually taken after rounding in S.
            let taken = (orig + step).f64() - (orig - step).f64();
            let numeric = (plus.f64() - minus.f64()) / taken;
            let a = analytic[ti].data()[ei].f64();
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst = (ti, ei, a, numeric);
            }
        }
    }
    Ok(report)
}
