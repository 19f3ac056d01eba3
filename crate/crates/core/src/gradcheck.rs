//! Central finite-difference gradient checking.
//!
//! Every differentiable kernel in this crate is validated against
//! `(f(x+h) - f(x-h)) / 2h` in double precision. The comparison is
//! `|num - ana| / max(1, |num|, |ana|) <= tol`, i.e. relative for gradients
//! of magnitude above one and absolute below.

use crate::tensor::Tensor;

/// Maximum finite-difference discrepancy over all elements of all `params`
/// for the scalar produced by `build_loss`. `build_loss` must rebuild the
/// graph from the current parameter values on every call.
pub fn max_grad_error(params: &[Tensor], build_loss: impl Fn() -> Tensor, h: f64) -> f64 {
    for p in params {
        p.zero_grad();
    }
    let loss = build_loss();
    loss.backward();
    let analytic: Vec<_> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| ndarray::ArrayD::zeros(p.data().raw_dim())))
        .collect();

    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let base = p.to_array();
        let flat_base: Vec<f64> = base.iter().copied().collect();
        let ana_flat: Vec<f64> = analytic[pi].iter().copied().collect();
        for i in 0..flat_base.len() {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[i] = flat_base[i] + h;
            p.set_data(plus);
            let lp = build_loss().item();

            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[i] = flat_base[i] - h;
            p.set_data(minus);
            let lm = build_loss().item();

            p.set_data(base.clone());

            let num = (lp - lm) / (2.0 * h);
            let ana = ana_flat[i];
            let err = (num - ana).abs() / 1.0f64.max(num.abs()).max(ana.abs());
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

/// Panics when any element's finite-difference error exceeds `tol`.
pub fn check_gradients(params: &[Tensor], build_loss: impl Fn() -> Tensor, h: f64, tol: f64) {
    let err = max_grad_error(params, build_loss, h);
    assert!(
        err <= tol,
        "gradient check failed: max relative error {err:.3e} > tol {tol:.1e}"
    );
}
