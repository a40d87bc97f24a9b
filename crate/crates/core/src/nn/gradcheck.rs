//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use super::{Graph, NnError, ParamStore, Var};

/// Lower bound on the error denominator, so parameters whose true gradient
/// is exactly zero are judged by absolute finite-difference noise.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Per parameter: `max|analytic − numeric| / max(max|analytic|, max|numeric|, SCALE_FLOOR)`.
    pub relative_error: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_error.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.relative_error
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Compares backpropagated gradients of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every element of every entry in `store`.
///
/// `f` must read its weights through [`Graph::param`] so that perturbed
/// copies of the store are picked up.
pub fn check_gradients<F>(store: &ParamStore, f: F, h: f64) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NnError>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let analytic = g.param_grads();

    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut relative_error = BTreeMap::new();
    let mut probe = store.clone();
    for (name, t) in store.iter() {
        let zeros = vec![0.0; t.len()];
        let a = analytic.get(name).unwrap_or(&zeros);
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_diff = max_diff.max((a[i] - numeric).abs());
            scale = scale.max(a[i].abs()).max(numeric.abs());
        }
        let rel = max_diff / scale.max(SCALE_FLOOR);
        relative_error.insert(name.clone(), rel);
    }
    Ok(GradCheckReport { relative_error })
}
