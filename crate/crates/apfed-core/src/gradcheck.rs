//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates losses forward, so it stays
//! independent of the backward implementation it is checking. Relative
//! error is |analytic - numeric| / (|numeric| + 1e-8), maximized over all
//! checked coordinates.

use crate::error::TensorError;
use crate::scalar::{to_f64, Scalar};
use crate::tape::{ParamId, ParamStore, Tape, ValueId};
use crate::tensor::Tensor;

fn eval_loss<T: Scalar>(
    store: &ParamStore<T>,
    build: &mut impl FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<ValueId, TensorError>,
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    Ok(to_f64(tape.value(loss).scalar_value()?))
}

/// Checks analytic parameter gradients of a scalar loss against central
/// finite differences with the given step. Returns the worst relative
/// error over every coordinate of every listed parameter.
pub fn finite_difference_check<T: Scalar>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    step: f64,
    mut build: impl FnMut(&mut Tape<T>, &ParamStore<T>) -> Result<ValueId, TensorError>,
) -> Result<f64, TensorError> {
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| store.grad(p).data().iter().map(|&g| to_f64(g)).collect())
        .collect();

    let mut worst = 0.0f64;
    for (pi, &pid) in params.iter().enumerate() {
        for i in 0..store.value(pid).numel() {
            let orig = store.value(pid).data()[i];
            store.value_mut(pid).data_mut()[i] = orig + T::from_f64(step).expect("step");
            let up = eval_loss(store, &mut build)?;
            store.value_mut(pid).data_mut()[i] = orig - T::from_f64(step).expect("step");
            let down = eval_loss(store, &mut build)?;
            store.value_mut(pid).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let rel = (analytic[pi][i] - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    store.zero_grads();
    Ok(worst)
}

/// Same check for the adjoint of an input tensor (the gradient a client
/// exports for a received representation batch). `build` must return the
/// input's node id and the loss id.
pub fn finite_difference_check_input<T: Scalar>(
    store: &mut ParamStore<T>,
    input: &Tensor<T>,
    step: f64,
    mut build: impl FnMut(&mut Tape<T>, &ParamStore<T>, &Tensor<T>) -> Result<(ValueId, ValueId), TensorError>,
) -> Result<f64, TensorError> {
    store.zero_grads();
    let mut tape = Tape::new();
    let (input_id, loss) = build(&mut tape, store, input)?;
    tape.backward(loss, store)?;
    let analytic: Vec<f64> = tape.grad(input_id).data().iter().map(|&g| to_f64(g)).collect();

    let mut probe = input.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::from_f64(step).expect("step");
        let up = {
            let mut t = Tape::new();
            let (_, l) = build(&mut t, store, &probe)?;
            to_f64(t.value(l).scalar_value()?)
        };
        probe.data_mut()[i] = orig - T::from_f64(step).expect("step");
        let down = {
            let mut t = Tape::new();
            let (_, l) = build(&mut t, store, &probe)?;
            to_f64(t.value(l).scalar_value()?)
        };
        probe.data_mut()[i] = orig;

        let numeric = (up - down) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    store.zero_grads();
    Ok(worst)
}
