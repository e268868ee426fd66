use crate::engine::{Saved, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Concatenates `a` and `b` along the channel axis.
pub fn concat_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch() != sb.batch() || sa.spatial() != sb.spatial() {
        return Err(Error::shape("concat_channels", sa, sb));
    }
    let (ca, cb) = (sa.channels() * sa.volume(), sb.channels() * sb.volume());
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..sa.batch() {
        data.extend_from_slice(&a.data()[n * ca..(n + 1) * ca]);
        data.extend_from_slice(&b.data()[n * cb..(n + 1) * cb]);
    }
    Ok(Tensor::from_vec(
        sa.with_channels(sa.channels() + sb.channels()),
        data,
    ))
}

/// Copies channels `[start, start + len)`.
pub fn narrow_tensor(x: &Tensor, start: usize, len: usize) -> Tensor {
    let s = x.shape();
    assert!(start + len <= s.channels(), "narrow out of range");
    let v = s.volume();
    let mut data = Vec::with_capacity(s.batch() * len * v);
    for n in 0..s.batch() {
        let base = (n * s.channels() + start) * v;
        data.extend_from_slice(&x.data()[base..base + len * v]);
    }
    Tensor::from_vec(s.with_channels(len), data)
}

/// Writes `src` into channels `[start, ..)` of `dst`.
fn scatter_channels(dst: &mut Tensor, src: &Tensor, start: usize) {
    let (sd, ss) = (dst.shape(), src.shape());
    let v = sd.volume();
    let len = ss.channels() * v;
    for n in 0..sd.batch() {
        let base = (n * sd.channels() + start) * v;
        dst.data_mut()[base..base + len].copy_from_slice(&src.data()[n * len..(n + 1) * len]);
    }
}

pub fn concat_channels(tape: &mut Tape, a: &Var, b: &Var) -> Result<Var> {
    let out = concat_tensors(a.value(), b.value())?;
    let ca = a.shape().channels();
    let cb = b.shape().channels();
    Ok(tape.record(
        "concat_channels",
        &[a, b],
        out,
        &[],
        Saved::Nothing,
        Box::new(move |ctx, g| {
            let ga = ctx.needs_input_grad(0).then(|| narrow_tensor(&g, 0, ca));
            let gb = ctx.needs_input_grad(1).then(|| narrow_tensor(&g, ca, cb));
            Ok(vec![ga, gb])
        }),
    ))
}

/// Channels `[start, start + len)` of `x` as a new value.
pub fn narrow_channels(tape: &mut Tape, x: &Var, start: usize, len: usize) -> Result<Var> {
    let shape = x.shape();
    if start + len > shape.channels() {
        return Err(Error::invalid(
            "narrow_channels",
            format!("channels {start}..{} out of range for {shape}", start + len),
        ));
    }
    let out = narrow_tensor(x.value(), start, len);
    Ok(tape.record(
        "narrow_channels",
        &[x],
        out,
        &[],
        Saved::Nothing,
        Box::new(move |_ctx, g| {
            let mut full = Tensor::zeros(shape);
            scatter_channels(&mut full, &g, start);
            Ok(vec![Some(full)])
        }),
    ))
}

/// Splits into channels `[0, at)` and `[at, C)`; requires `0 < at < C`.
pub fn split_channels(tape: &mut Tape, x: &Var, at: usize) -> Result<(Var, Var)> {
    let c = x.shape().channels();
    if at == 0 || at >= c {
        return Err(Error::invalid(
            "split_channels",
            format!("split point {at} must lie strictly inside 0..{c}"),
        ));
    }
    Ok((
        narrow_channels(tape, x, 0, at)?,
        narrow_channels(tape, x, at, c - at)?,
    ))
}

/// Elementwise sum of equally shaped values.
pub fn add(tape: &mut Tape, a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let mut out = a.value().clone();
    out.add_assign(b.value());
    Ok(tape.record(
        "add",
        &[a, b],
        out,
        &[],
        Saved::Nothing,
        Box::new(|ctx, g| {
            Ok(vec![
                ctx.needs_input_grad(0).then(|| g.clone()),
                ctx.needs_input_grad(1).then_some(g),
            ])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ParamStore, Shape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_shape_arithmetic() {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::zeros(Shape::new(2, 2, 3, 3, 3)));
        let b = tape.constant(Tensor::zeros(Shape::new(2, 3, 3, 3, 3)));
        assert_eq!(
            concat_channels(&mut tape, &a, &b).unwrap().shape(),
            Shape::new(2, 5, 3, 3, 3)
        );
    }

    #[test]
    fn split_inverts_concat_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::inference();
        let at = Tensor::randn(Shape::new(2, 2, 2, 3, 4), 1.0, &mut rng);
        let bt = Tensor::randn(Shape::new(2, 3, 2, 3, 4), 1.0, &mut rng);
        let a = tape.constant(at.clone());
        let b = tape.constant(bt.clone());
        let cat = concat_channels(&mut tape, &a, &b).unwrap();
        let (a2, b2) = split_channels(&mut tape, &cat, 2).unwrap();
        assert_eq!(*a2.value(), at);
        assert_eq!(*b2.value(), bt);
    }

    #[test]
    fn gradient_round_trip_preserves_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let mut params = ParamStore::new();
        let x = tape.leaf(
            Tensor::randn(Shape::new(2, 5, 2, 2, 2), 1.0, &mut rng),
            true,
        );
        let (lo, hi) = split_channels(&mut tape, &x, 3).unwrap();
        let back = concat_channels(&mut tape, &lo, &hi).unwrap();
        let seed = Tensor::randn(back.shape(), 1.0, &mut rng);
        let grads = tape
            .backward_from(&back, seed.clone(), &mut params)
            .unwrap();
        assert_eq!(*grads.get(&x).unwrap(), seed);
    }

    #[test]
    fn mismatched_extents_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3, 3)));
        let b = tape.constant(Tensor::zeros(Shape::new(1, 2, 3, 3, 4)));
        assert!(matches!(
            concat_channels(&mut tape, &a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(split_channels(&mut tape, &a, 0).is_err());
        assert!(split_channels(&mut tape, &a, 2).is_err());
    }

    #[test]
    fn zero_extent() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(0, 2, 3, 3, 3)), true);
        let (l, r) = split_channels(&mut tape, &a, 1).unwrap();
        let c = concat_channels(&mut tape, &l, &r).unwrap();
        assert_eq!(c.shape(), a.shape());
        assert_eq!(add(&mut tape, &c, &a).unwrap().shape().numel(), 0);
    }
}
