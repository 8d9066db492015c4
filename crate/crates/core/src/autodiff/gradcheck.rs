//! Finite-difference verification of reverse-mode gradients.

use super::elem::Elem;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Max relative error between analytic gradients and central differences.
///
/// `f` must build a scalar from the input var. The error at coordinate `i` is
/// `|analytic_i - fd_i| / max(1, |analytic_i|)`, and the max over coordinates
/// is returned. Use the `f64` instantiation for tolerances near 1e-4 with
/// `eps = 1e-3`; `f32` rounding noise alone exceeds that bar on deep graphs.
pub fn grad_check<E, F>(f: F, x: &Tensor<E>, eps: E) -> f64
where
    E: Elem,
    F: for<'a> Fn(&'a Tape<E>, Var<'a, E>) -> Var<'a, E>,
{
    assert!(eps > E::ZERO, "grad_check requires eps > 0");
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&tape, xv);
    assert_eq!(loss.shape(), (1, 1), "grad_check requires a scalar-valued function");
    let grads = tape.backward(loss);
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let eval = |t: &Tensor<E>| -> f64 {
        let tape = Tape::new();
        let xv = tape.constant(t.clone());
        f(&tape, xv).value().item().to_f64()
    };

    let mut worst = 0.0f64;
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let base = x.get(r, c);
            let plus = eval(&x.with_coord(r, c, base + eps));
            let minus = eval(&x.with_coord(r, c, base - eps));
            let fd = (plus - minus) / (2.0 * eps.to_f64());
            let a = analytic.get(r, c).to_f64();
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
