use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates skipped because the one-sided differences disagree, i.e.
    /// the probe interval straddles a kink such as a relu at zero.
    pub kinks: usize,
}

/// Relative gap between forward and backward differences above which a
/// coordinate is treated as non-differentiable at step `h`.
pub const KINK_TOLERANCE: f64 = 1e-4;

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            kinks: 0,
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err.max(self.max_rel_error);
            self.worst = label();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            let (checked, kinks) = (self.checked, self.kinks);
            *self = other;
            self.checked = checked;
            self.kinks = kinks;
        }
    }
}

/// Compares the reverse-mode gradient of the scalar function `f` at `x` with
/// central differences of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(t);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    };
    let mut report = GradCheckReport::new();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.record(|| format!("x[{i}]"), analytic[i], numeric);
    }
    Ok(report)
}

/// Like [`grad_check`] but differentiates with respect to every parameter in
/// `store`. `f` must load parameters through [`Graph::param`]. At most
/// `max_per_param` evenly spaced coordinates of each parameter are probed.
/// Coordinates whose forward and backward differences disagree by more than
/// [`KINK_TOLERANCE`] are counted in `kinks` instead of compared.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore,
    h: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut grads = store.clone();
    grads.zero_grads();
    let mut g = Graph::new();
    let y = f(&mut g, &grads)?;
    g.backward(y)?;
    g.accumulate_param_grads(&mut grads);
    grads.fill_missing_grads();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let y = f(&mut g, s)?;
        Ok(g.value(y).item())
    };

    let mut report = GradCheckReport::new();
    let f0 = eval(store)?;
    let mut probe = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).value().len();
        let count = n.min(max_per_param.max(1));
        let mut sub = GradCheckReport::new();
        for j in 0..count {
            let i = j * n / count;
            let orig = store.get(id).value().data()[i];
            probe.get_mut(id).value_mut().data_mut()[i] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(id).value_mut().data_mut()[i] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(id).value_mut().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let gap = ((fp - f0) - (f0 - fm)).abs() / h;
            if gap > KINK_TOLERANCE * numeric.abs().max(1.0) {
                sub.kinks += 1;
                continue;
            }
            let analytic = grads.get(id).grad().expect("filled")[i];
            sub.record(|| format!("{}[{i}]", store.get(id).name()), analytic, numeric);
        }
        report.merge(sub);
    }
    Ok(report)
}
