//! Central-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Gradients, Graph, Mode, NodeId};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so gradients
    /// that are numerically zero are compared absolutely.
    pub floor: f64,
    pub mode: Mode,
}

impl GradCheckConfig {
    pub fn new(eps: f64, tolerance: f64) -> Self {
        Self { eps, tolerance, floor: 1e-2, mode: Mode::Train }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn analytic_gradients<F>(store: &ParamStore, mode: Mode, build: &F) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(store, mode);
    let out = build(&mut g)?;
    let value = g.value(out).item();
    let grads = g.backward(out)?;
    Ok((value, grads))
}

fn evaluate<F>(store: &ParamStore, mode: Mode, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(store, mode);
    let out = build(&mut g)?;
    Ok(g.value(out).item())
}

/// Compares `analytic` against central differences of `build` for every
/// scalar of every parameter in `store`.
pub fn compare_gradients<F>(
    store: &mut ParamStore,
    config: GradCheckConfig,
    build: &F,
    analytic: &Gradients,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance: config.tolerance,
        passed: true,
    };
    let ids: Vec<_> = store.param_ids().collect();
    for id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + config.eps;
            let plus = evaluate(store, config.mode, build)?;
            store.value_mut(id).data_mut()[i] = original - config.eps;
            let minus = evaluate(store, config.mode, build)?;
            store.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * config.eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(config.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if !(rel <= report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = store.param(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= config.tolerance;
    Ok(report)
}

/// Builds the graph, runs backward, and checks every parameter gradient.
pub fn grad_check<F>(store: &mut ParamStore, config: GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    let (_, analytic) = analytic_gradients(store, config.mode, &build)?;
    compare_gradients(store, config, &build, &analytic)
}
