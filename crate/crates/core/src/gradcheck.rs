//! Central finite-difference check of tape gradients.

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;

/// Denominator floor of the relative error. Central differences at step
/// 1e-5 on an O(1) loss carry roughly 1e-11 of rounding noise, so entries
/// whose gradient is below this floor are effectively compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Tensor holding the worst entry.
    pub worst: String,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the backward pass of the scalar `loss` against central
/// differences with step `h` for every entry of every tensor in `store`.
pub fn check_gradients(store: &ParamStore, h: f64, loss: impl Fn(&mut Graph) -> Var) -> GradCheck {
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let l = loss(&mut g);
        g.value(l).data()[0]
    };
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        assert_eq!(g.shape(l), [1, 1], "loss must be a scalar");
        g.backward(l, 1.0)
    };
    let mut work = store.clone();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    for id in 0..store.len() {
        let n = store.get_by_id(id).len();
        for i in 0..n {
            let orig = store.get_by_id(id).data()[i];
            work.get_by_id_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work);
            work.get_by_id_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work);
            work.get_by_id_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = store.name(id).to_string();
                out.worst_pair = (a, numeric);
            }
            out.checked += 1;
        }
    }
    out
}
