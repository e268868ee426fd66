use crate::engine::{Saved, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Sum of all elements as a 1-element tensor.
pub fn sum_all(tape: &mut Tape, x: &Var) -> Result<Var> {
    let out = Tensor::scalar(x.value().sum() as f32);
    let shape = x.shape();
    Ok(tape.record(
        "sum",
        &[x],
        out,
        &[],
        Saved::Nothing,
        Box::new(move |_ctx, g| Ok(vec![Some(Tensor::full(shape, g.data()[0]))])),
    ))
}

/// `Σ weights ⊙ x` with constant weights, accumulated in double precision.
pub fn weighted_sum(tape: &mut Tape, x: &Var, weights: &Tensor) -> Result<Var> {
    if weights.shape() != x.shape() {
        return Err(Error::shape("weighted_sum", x.shape(), weights.shape()));
    }
    let s: f64 = x
        .value()
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&a, &w)| a as f64 * w as f64)
        .sum();
    let w = weights.clone();
    Ok(tape.record(
        "weighted_sum",
        &[x],
        Tensor::scalar(s as f32),
        &[],
        Saved::Nothing,
        Box::new(move |_ctx, g| {
            let mut out = w.clone();
            out.scale(g.data()[0]);
            Ok(vec![Some(out)])
        }),
    ))
}
