//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward implementations it is checking.

use super::array::DArray;
use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::rng::RngState;

/// Denominator floor for the relative error, so that near-zero gradients are
/// judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, label: impl FnOnce() -> String) {
        let rel = relative_error(analytic, numeric);
        self.checked += 1;
        if self.checked == 1 || rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", label());
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks gradients of `f` with respect to every entry of every input.
pub fn check_inputs<F>(inputs: &[DArray], h: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[DArray]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.constant(v.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.input(v.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss, None).expect("backward");

    let mut report = GradCheckReport::default();
    let mut work: Vec<DArray> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| DArray::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            report.record(analytic.data()[j], (fp - fm) / (2.0 * h), || format!("input {i}[{j}]"));
        }
    }
    report
}

/// Checks parameter gradients of a loss built from `store`. At most
/// `per_tensor` randomly chosen entries of each tensor are probed.
pub fn check_params<F>(store: &ParamStore, h: f64, per_tensor: usize, rng: &mut RngState, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, &analytic);
        g.backward(loss, Some(&mut analytic)).expect("backward");
    }
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = f(&mut g, s);
        g.value(l).item()
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids() {
        if store.is_frozen(id) {
            continue;
        }
        let n = store.value(id).len();
        let picks = if n <= per_tensor { (0..n).collect() } else { rng.choose_k(n, per_tensor) };
        for j in picks {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&work);
            work.value_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&work);
            work.value_mut(id).data_mut()[j] = orig;
            report.record(analytic.grad(id).data()[j], (fp - fm) / (2.0 * h), || {
                format!("{}[{j}]", store.name(id))
            });
        }
    }
    report
}
