use crate::engine::{Saved, Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.01;

/// `x` where `x >= 0`, `slope * x` elsewhere.
pub fn leaky_relu(tape: &mut Tape, x: &Var, slope: f32) -> Result<Var> {
    let data = x
        .value()
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { v } else { slope * v })
        .collect();
    let out = Tensor::from_vec(x.shape(), data);
    Ok(tape.record(
        "leaky_relu",
        &[x],
        out,
        &[],
        Saved::Inputs,
        Box::new(move |ctx, mut g| {
            let x = ctx.input(0)?;
            for (g, &v) in g.data_mut().iter_mut().zip(x.data()) {
                if v < 0.0 {
                    *g *= slope;
                }
            }
            Ok(vec![Some(g)])
        }),
    ))
}

/// Logistic function `1 / (1 + e^-x)`.
pub fn sigmoid(tape: &mut Tape, x: &Var) -> Result<Var> {
    let data = x
        .value()
        .data()
        .iter()
        .map(|&v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let out = Tensor::from_vec(x.shape(), data);
    Ok(tape.record(
        "sigmoid",
        &[x],
        out,
        &[],
        Saved::Output,
        Box::new(|ctx, mut g| {
            let y = ctx.output()?;
            for (g, &y) in g.data_mut().iter_mut().zip(y.data()) {
                *g *= y * (1.0 - y);
            }
            Ok(vec![Some(g)])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ParamStore, Shape};

    fn eval(f: impl Fn(&mut Tape, &Var) -> Result<Var>, v: f32) -> (f32, f32) {
        let mut tape = Tape::new();
        let mut params = ParamStore::new();
        let x = tape.leaf(Tensor::scalar(v), true);
        let y = f(&mut tape, &x).unwrap();
        let out = y.value().data()[0];
        let grads = tape.backward(&y, &mut params).unwrap();
        (out, grads.get(&x).unwrap().data()[0])
    }

    fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn leaky_relu_values_and_slope() {
        let lr = |t: &mut Tape, x: &Var| leaky_relu(t, x, 0.01);
        assert_eq!(eval(lr, 1.0).0, 1.0);
        let (y, g) = eval(lr, -2.0);
        assert_eq!(y, -0.02);
        assert_eq!(g, 0.01);
        let fd = central_difference(|x| if x >= 0.0 { x } else { 0.01 * x }, -2.0, 1e-3);
        assert!((g as f64 - fd).abs() <= 1e-4);
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let (y, g) = eval(sigmoid, 0.0);
        assert_eq!(y, 0.5);
        assert_eq!(g, 0.25);
        let fd = central_difference(|x| 1.0 / (1.0 + (-x).exp()), 0.0, 1e-3);
        assert!((g as f64 - fd).abs() <= 1e-5);
        assert!((eval(sigmoid, 40.0).0 as f64 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(0, 3, 2, 2, 2)), true);
        assert_eq!(leaky_relu(&mut tape, &x, 0.01).unwrap().shape().numel(), 0);
        assert_eq!(sigmoid(&mut tape, &x).unwrap().shape().numel(), 0);
    }
}
