//! Central finite-difference checks of tape gradients against a parameter
//! store.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, TrainMask};

/// Per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and
/// numeric gradients of the scalar built by `f`, for every parameter in
/// `names`. Pairs whose norms are both below `1e-12` report `0`.
pub fn relative_errors(
    store: &ParamStore,
    names: &[String],
    step: f64,
    f: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<BTreeMap<String, f64>> {
    let mask = TrainMask::prefixes(names.iter().cloned());
    let mut g = Graph::with_params(store, mask);
    let out = f(&mut g)?;
    if g.value(out).shape() != (1, 1) {
        return Err(Error::invalid("gradient check needs a scalar output"));
    }
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s, TrainMask::Nothing);
        let o = f(&mut g)?;
        Ok(g.value(o).get(0, 0))
    };

    let mut errors = BTreeMap::new();
    let mut moved = store.clone();
    for name in names {
        let base = store.require(name)?.clone();
        let a = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| crate::tensor::Matrix::zeros(base.rows(), base.cols()));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for i in 0..base.len() {
            let orig = base.data()[i];
            moved.get_mut(name).expect("cloned").data_mut()[i] = orig + step;
            let up = eval(&moved)?;
            moved.get_mut(name).expect("cloned").data_mut()[i] = orig - step;
            let down = eval(&moved)?;
            moved.get_mut(name).expect("cloned").data_mut()[i] = orig;
            let n = (up - down) / (2.0 * step);
            let av = a.data()[i];
            diff2 += (av - n).powi(2);
            a2 += av * av;
            n2 += n * n;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let err = if denom < 1e-12 { 0.0 } else { diff2.sqrt() / denom };
        errors.insert(name.clone(), err);
    }
    Ok(errors)
}
