//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use giftsw::model::{self, ModelConfig, ParamSet};

/// Central-difference derivative of the loss along one parameter entry,
/// using the 4th-order stencil `(-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h`.
pub fn central_difference(
    params: &ParamSet,
    name: &str,
    index: usize,
    h: f64,
    tokens: &[Vec<usize>],
    targets: &[Vec<usize>],
) -> f64 {
    let at = |offset: f64| {
        let mut p = params.clone();
        p.get_mut(name).unwrap().data_mut()[index] += offset;
        model::loss(&p, tokens, targets).unwrap()
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

/// Relative discrepancy `|a - n| / max(|a|, |n|)`, with the denominator
/// floored at `floor` so exact zeros compare absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub struct GradCheck {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares every gradient entry against central differences, sweeping the
/// step over `steps` and keeping the step with the smallest total discrepancy
/// for the whole model.
pub fn check_gradients(
    config: &ModelConfig,
    params: &ParamSet,
    tokens: &[Vec<usize>],
    targets: &[Vec<usize>],
    steps: &[f64],
    floor: f64,
) -> (f64, GradCheck) {
    let (_, grads) = model::loss_and_backward(params, tokens, targets).unwrap();
    let _ = config;
    let mut best: Option<(f64, GradCheck)> = None;
    for &h in steps {
        let mut report = GradCheck {
            max_rel: 0.0,
            worst: String::new(),
            checked: 0,
        };
        for (name, g) in grads.iter() {
            for (i, &a) in g.data().iter().enumerate() {
                let n = central_difference(params, name, i, h, tokens, targets);
                let rel = relative_error(a, n, floor);
                report.checked += 1;
                if rel > report.max_rel {
                    report.max_rel = rel;
                    report.worst = format!("{name}[{i}] analytic={a:e} numeric={n:e}");
                }
            }
        }
        if best.as_ref().map_or(true, |(_, b)| report.max_rel < b.max_rel) {
            best = Some((h, report));
        }
    }
    best.unwrap()
}
