//! Central-finite-difference gradient verification against the tape.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares analytic gradients (one tensor per parameter, in set order)
/// against central differences of `loss_fn`. Entries where both analytic and
/// numeric magnitude fall below `abs_floor` are skipped: they sit under the
/// finite-difference resolution.
pub fn check_gradients<F: Scalar>(
    params: &mut ParamSet<F>,
    analytic: &[Tensor<F>],
    mut loss_fn: impl FnMut(&ParamSet<F>) -> F,
    eps: f64,
    abs_floor: f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), params.len());
    let mut checked = 0;
    let mut max_rel: f64 = 0.0;
    for pi in 0..params.len() {
        let id = ParamId::from_index(pi);
        for ei in 0..params.tensor(id).len() {
            let orig = params.tensor(id).data()[ei];
            let epsf = F::from_f64(eps).unwrap();

            params.tensor_mut(id).data_mut()[ei] = orig + epsf;
            let plus = loss_fn(params).to_f64().unwrap();
            params.tensor_mut(id).data_mut()[ei] = orig - epsf;
            let minus = loss_fn(params).to_f64().unwrap();
            params.tensor_mut(id).data_mut()[ei] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic[pi].data()[ei].to_f64().unwrap();
            if an.abs() < abs_floor && fd.abs() < abs_floor {
                continue;
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(abs_floor);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    GradCheckReport {
        checked,
        max_rel_err: max_rel,
    }
}
