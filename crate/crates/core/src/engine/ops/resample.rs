//! Spatial down- and upsampling by a factor of two.

use crate::engine::{Saved, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of the first maximum of the 2×2×2 block at output voxel
/// `(z, y, x)`, scanning depth, then height, then width.
#[inline]
fn block_argmax(src: &[f32], [_, h, w]: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    let mut best = (2 * z * h + 2 * y) * w + 2 * x;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let i = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx;
                if src[i] > src[best] {
                    best = i;
                }
            }
        }
    }
    best
}

/// Non-overlapping 2×2×2 max pooling. Ties route the gradient to the
/// first voxel in scan order.
pub fn max_pool2(tape: &mut Tape, x: &Var) -> Result<Var> {
    let shape = x.shape();
    let sp = shape.spatial();
    if sp.iter().any(|e| e % 2 != 0) {
        return Err(Error::invalid(
            "max_pool2",
            format!("spatial extents of {shape} must be even"),
        ));
    }
    let osp = sp.map(|e| e / 2);
    let oshape = shape.with_spatial(osp);
    let mut out = Tensor::zeros(oshape);
    for b in 0..shape.batch() {
        for c in 0..shape.channels() {
            let src = x.value().channel(b, c);
            let dst = out.channel_mut(b, c);
            for z in 0..osp[0] {
                for y in 0..osp[1] {
                    for xx in 0..osp[2] {
                        dst[(z * osp[1] + y) * osp[2] + xx] = src[block_argmax(src, sp, z, y, xx)];
                    }
                }
            }
        }
    }
    Ok(tape.record(
        "max_pool2",
        &[x],
        out,
        &[],
        Saved::Inputs,
        Box::new(move |ctx, g| {
            let x = ctx.input(0)?;
            let mut gin = Tensor::zeros(shape);
            for b in 0..shape.batch() {
                for c in 0..shape.channels() {
                    let src = x.channel(b, c);
                    let go = g.channel(b, c);
                    let mut idx = Vec::with_capacity(go.len());
                    for z in 0..osp[0] {
                        for y in 0..osp[1] {
                            for xx in 0..osp[2] {
                                idx.push(block_argmax(src, sp, z, y, xx));
                            }
                        }
                    }
                    let dst = gin.channel_mut(b, c);
                    for (i, &gv) in idx.into_iter().zip(go) {
                        dst[i] += gv;
                    }
                }
            }
            Ok(vec![Some(gin)])
        }),
    ))
}

/// Source taps for output index `o` when doubling an axis of length `n`
/// with half-pixel centers: `src = (o + 0.5) / 2 - 0.5`, clamped to the
/// valid range.
#[inline]
fn taps(o: usize, n: usize) -> (usize, usize, f32) {
    let src = ((o as f32 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, src - i0 as f32)
}

/// Views `shape` as `[outer, len, inner]` around spatial axis `axis` (0..3).
fn axis_layout(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let d = shape.0;
    let outer: usize = d[..2 + axis].iter().product();
    let inner: usize = d[3 + axis..].iter().product();
    (outer, d[2 + axis], inner)
}

fn upsample_axis(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let (outer, n, inner) = axis_layout(shape, axis);
    let mut sp = shape.spatial();
    sp[axis] *= 2;
    let mut out = Tensor::zeros(shape.with_spatial(sp));
    if n == 0 {
        return out;
    }
    let (src, dst) = (x.data(), out.data_mut());
    for o in 0..outer {
        for j in 0..2 * n {
            let (i0, i1, l) = taps(j, n);
            let a = &src[(o * n + i0) * inner..][..inner];
            let b = &src[(o * n + i1) * inner..][..inner];
            let d = &mut dst[(o * 2 * n + j) * inner..][..inner];
            for ((d, &a), &b) in d.iter_mut().zip(a).zip(b) {
                *d = (1.0 - l) * a + l * b;
            }
        }
    }
    out
}

/// Adjoint of [`upsample_axis`]: scatters each output gradient back onto
/// its two source taps with the same weights.
fn upsample_axis_transpose(g: &Tensor, axis: usize) -> Tensor {
    let shape = g.shape();
    let (outer, n2, inner) = axis_layout(shape, axis);
    let n = n2 / 2;
    let mut sp = shape.spatial();
    sp[axis] = n;
    let mut out = Tensor::zeros(shape.with_spatial(sp));
    if n == 0 {
        return out;
    }
    let (src, dst) = (g.data(), out.data_mut());
    for o in 0..outer {
        for j in 0..n2 {
            let (i0, i1, l) = taps(j, n);
            let gv = &src[(o * n2 + j) * inner..][..inner];
            for (k, &v) in gv.iter().enumerate() {
                dst[(o * n + i0) * inner + k] += (1.0 - l) * v;
                dst[(o * n + i1) * inner + k] += l * v;
            }
        }
    }
    out
}

/// Trilinear ×2 upsampling (half-pixel centers, edge clamped).
pub fn upsample2(tape: &mut Tape, x: &Var) -> Result<Var> {
    let out = upsample_axis(&upsample_axis(&upsample_axis(x.value(), 2), 1), 0);
    Ok(tape.record(
        "upsample2",
        &[x],
        out,
        &[],
        Saved::Nothing,
        Box::new(|_ctx, g| {
            let back = upsample_axis_transpose(
                &upsample_axis_transpose(&upsample_axis_transpose(&g, 0), 1),
                2,
            );
            Ok(vec![Some(back)])
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_block_pools_to_constant() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::full(Shape::new(1, 1, 2, 2, 2), 4.5));
        assert_eq!(max_pool2(&mut tape, &x).unwrap().value().data(), &[4.5]);
    }

    #[test]
    fn block_maximum() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_vec(
            Shape::new(1, 1, 2, 2, 2),
            (1..=8).map(|v| v as f32).collect(),
        ));
        assert_eq!(max_pool2(&mut tape, &x).unwrap().value().data(), &[8.0]);
    }

    #[test]
    fn ties_route_to_first_voxel() {
        let mut tape = Tape::new();
        let mut params = ParamStore::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2, 2), 5.0), true);
        let y = max_pool2(&mut tape, &x).unwrap();
        let grads = tape
            .backward_from(&y, Tensor::scalar(3.0), &mut params)
            .unwrap();
        let g = grads.get(&x).unwrap().data();
        assert_eq!(g[0], 3.0);
        assert!(g[1..].iter().all(|&v| v == 0.0));
        assert_eq!(g.iter().sum::<f32>(), 3.0);
    }

    #[test]
    fn odd_extent_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 3, 2)));
        assert!(matches!(
            max_pool2(&mut tape, &x),
            Err(Error::InvalidArgument { .. })
        ));
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::full(Shape::new(1, 2, 2, 3, 2), 2.5));
        let y = upsample2(&mut tape, &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 4, 6, 4));
        assert!(y.value().data().iter().all(|&v| (v - 2.5).abs() <= 1e-6));
    }

    #[test]
    fn upsample_two_values_along_one_axis() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 1, 2), vec![0.0, 1.0]));
        let y = upsample2(&mut tape, &x).unwrap();
        // depth and height double too; every (z, y) row carries the same profile
        let row = &y.value().data()[..4];
        assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        assert!(y.value().data().chunks(4).all(|r| r == row));
    }

    #[test]
    fn upsample_backward_preserves_mass() {
        let mut tape = Tape::new();
        let mut params = ParamStore::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 3, 2, 4)), true);
        let y = upsample2(&mut tape, &x).unwrap();
        let grads = tape
            .backward_from(&y, Tensor::full(y.shape(), 1.0), &mut params)
            .unwrap();
        let g = grads.get(&x).unwrap();
        for c in 0..2 {
            let total: f32 = g.channel(0, c).iter().sum();
            assert_eq!(total, y.shape().volume() as f32);
        }
    }

    #[test]
    fn upsample_transpose_is_adjoint() {
        // <U x, y> == <x, Uᵀ y>
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(Shape::new(1, 1, 3, 2, 5), 1.0, &mut rng);
        let ux = upsample_axis(&upsample_axis(&upsample_axis(&x, 2), 1), 0);
        let y = Tensor::randn(ux.shape(), 1.0, &mut rng);
        let uty = upsample_axis_transpose(
            &upsample_axis_transpose(&upsample_axis_transpose(&y, 0), 1),
            2,
        );
        let lhs: f64 = ux
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(uty.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn zero_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 0, 2, 2)), true);
        assert_eq!(
            max_pool2(&mut tape, &x).unwrap().shape(),
            Shape::new(1, 2, 0, 1, 1)
        );
        assert_eq!(
            upsample2(&mut tape, &x).unwrap().shape(),
            Shape::new(1, 2, 0, 4, 4)
        );
    }
}
