//! Stride-1 3D cross-correlation.
//!
//! The kernels are direct loops arranged as shifted row updates: for every
//! kernel offset, a contiguous run of output voxels along the width axis is
//! updated from the matching run of input voxels. Work is split by output
//! channel (forward, kernel gradient) or input channel (input gradient), so
//! every accumulation happens in a fixed order.

use crate::engine::{for_each_chunk, ParamId, Parameter, Saved, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` per axis; requires odd kernel extents.
    Same,
    Explicit([usize; 3]),
}

fn resolve_padding(kernel: [usize; 3], padding: Padding) -> Result<[usize; 3]> {
    match padding {
        Padding::Explicit(p) => Ok(p),
        Padding::Same => {
            if kernel.iter().any(|k| k % 2 == 0) {
                return Err(Error::invalid(
                    "conv3d",
                    format!("same padding needs odd kernel extents, got {kernel:?}"),
                ));
            }
            Ok(kernel.map(|k| (k - 1) / 2))
        }
    }
}

/// Output-index range whose input index `o + offset - pad` lies in `[0, input)`.
#[inline]
fn valid_range(output: usize, input: usize, offset: usize, pad: usize) -> (usize, usize) {
    let start = pad.saturating_sub(offset);
    let end = (input + pad).saturating_sub(offset).min(output);
    (start, end.max(start))
}

#[derive(Clone, Copy)]
struct Geometry {
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    fn new(input: [usize; 3], kernel: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad[a] + 1;
            if span < kernel[a] {
                return Err(Error::invalid(
                    "conv3d",
                    format!("kernel {kernel:?} larger than padded input {input:?} (pad {pad:?})"),
                ));
            }
            output[a] = span - kernel[a];
        }
        Ok(Geometry {
            input,
            output,
            kernel,
            pad,
        })
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Calls `f(kernel_index, out_row_start, in_row_start, len)` for every
    /// kernel offset and every overlapping pair of width-axis rows.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let [pd, ph, pw] = self.pad;
        for a in 0..kd {
            let (z0, z1) = valid_range(od, id, a, pd);
            for b in 0..kh {
                let (y0, y1) = valid_range(oh, ih, b, ph);
                for c in 0..kw {
                    let (x0, x1) = valid_range(ow, iw, c, pw);
                    if x1 == x0 {
                        continue;
                    }
                    let k = (a * kh + b) * kw + c;
                    let len = x1 - x0;
                    for z in z0..z1 {
                        let zi = z + a - pd;
                        for y in y0..y1 {
                            let yi = y + b - ph;
                            f(
                                k,
                                (z * oh + y) * ow + x0,
                                (zi * ih + yi) * iw + x0 + c - pw,
                                len,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Forward kernel: `out[b, o] = bias[o] + Σ_i w[o, i] ⋆ x[b, i]`.
pub fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, pad: [usize; 3]) -> Tensor {
    let [n, ic, ..] = x.shape().0;
    let [oc, wic, kd, kh, kw] = w.shape().0;
    assert_eq!(ic, wic, "conv3d_forward channel mismatch");
    let geo =
        Geometry::new(x.shape().spatial(), [kd, kh, kw], pad).expect("conv3d_forward geometry");
    let mut out = Tensor::zeros(Shape::new(
        n,
        oc,
        geo.output[0],
        geo.output[1],
        geo.output[2],
    ));
    let (iv, ov, kv) = (
        x.shape().volume(),
        out.shape().volume(),
        geo.kernel_volume(),
    );
    let (xd, wd) = (x.data(), w.data());
    let bias = bias.map(Tensor::data);
    for_each_chunk(out.data_mut(), ov, |idx, o| {
        let (b, oc_i) = (idx / oc, idx % oc);
        if let Some(bias) = bias {
            o.fill(bias[oc_i]);
        }
        for c in 0..ic {
            let xin = &xd[(b * ic + c) * iv..][..iv];
            let wk = &wd[(oc_i * ic + c) * kv..][..kv];
            geo.for_each_row(|k, o0, i0, len| {
                let wv = wk[k];
                for (dst, src) in o[o0..o0 + len].iter_mut().zip(&xin[i0..i0 + len]) {
                    *dst += wv * src;
                }
            });
        }
    });
    out
}

fn conv3d_backward_input(grad: &Tensor, w: &Tensor, input: Shape, geo: &Geometry) -> Tensor {
    let oc = grad.shape().channels();
    let ic = input.channels();
    let mut gin = Tensor::zeros(input);
    let (iv, ov, kv) = (input.volume(), grad.shape().volume(), geo.kernel_volume());
    let (gd, wd) = (grad.data(), w.data());
    for_each_chunk(gin.data_mut(), iv, |idx, gi| {
        let (b, c) = (idx / ic, idx % ic);
        for o in 0..oc {
            let go = &gd[(b * oc + o) * ov..][..ov];
            let wk = &wd[(o * ic + c) * kv..][..kv];
            geo.for_each_row(|k, o0, i0, len| {
                let wv = wk[k];
                for (dst, src) in gi[i0..i0 + len].iter_mut().zip(&go[o0..o0 + len]) {
                    *dst += wv * src;
                }
            });
        }
    });
    gin
}

fn conv3d_backward_kernel(grad: &Tensor, x: &Tensor, geo: &Geometry, wgrad: &mut Tensor) {
    let [n, oc, ..] = grad.shape().0;
    let ic = x.shape().channels();
    let (iv, ov, kv) = (
        x.shape().volume(),
        grad.shape().volume(),
        geo.kernel_volume(),
    );
    let (gd, xd) = (grad.data(), x.data());
    for_each_chunk(wgrad.data_mut(), ic * kv, |o, gw| {
        let mut acc = vec![0f64; ic * kv];
        for b in 0..n {
            let go = &gd[(b * oc + o) * ov..][..ov];
            for c in 0..ic {
                let xin = &xd[(b * ic + c) * iv..][..iv];
                let row = &mut acc[c * kv..][..kv];
                geo.for_each_row(|k, o0, i0, len| {
                    let dot: f32 = go[o0..o0 + len]
                        .iter()
                        .zip(&xin[i0..i0 + len])
                        .map(|(a, b)| a * b)
                        .sum();
                    row[k] += dot as f64;
                });
            }
        }
        for (dst, a) in gw.iter_mut().zip(acc) {
            *dst += a as f32;
        }
    });
}

fn bias_grad(grad: &Tensor, bgrad: &mut Tensor) {
    let [n, oc, ..] = grad.shape().0;
    for (o, dst) in bgrad.data_mut().iter_mut().enumerate().take(oc) {
        let s: f64 = (0..n)
            .map(|b| grad.channel(b, o).iter().map(|&v| v as f64).sum::<f64>())
            .sum();
        *dst += s as f32;
    }
}

fn check_conv_args(x: &Var, weight: &Parameter, bias: Option<&Parameter>) -> Result<()> {
    let ws = weight.shape();
    if x.shape().channels() != ws.0[1] {
        return Err(Error::shape(
            "conv3d",
            format!("input with {} channels for kernel {ws}", ws.0[1]),
            x.shape(),
        ));
    }
    if let Some(b) = bias {
        if b.numel() != ws.0[0] {
            return Err(Error::shape(
                "conv3d",
                format!("{} bias values", ws.0[0]),
                b.shape(),
            ));
        }
    }
    Ok(())
}

/// Stride-1 3D convolution with a `[out, in, kd, kh, kw]` kernel.
pub fn conv3d(
    tape: &mut Tape,
    x: &Var,
    weight: &Parameter,
    bias: Option<&Parameter>,
    padding: Padding,
) -> Result<Var> {
    check_conv_args(x, weight, bias)?;
    let [_, _, kd, kh, kw] = weight.shape().0;
    let pad = resolve_padding([kd, kh, kw], padding)?;
    let geo = Geometry::new(x.shape().spatial(), [kd, kh, kw], pad)?;
    let out = conv3d_forward(x.value(), &weight.value, bias.map(|b| &b.value), pad);
    let (wid, bid) = (weight.id, bias.map(|b| b.id));
    let op = if [kd, kh, kw] == [1, 1, 1] {
        "conv1x1x1"
    } else {
        "conv3d"
    };
    let ids: Vec<ParamId> = std::iter::once(wid).chain(bid).collect();
    Ok(tape.record(
        op,
        &[x],
        out,
        &ids,
        Saved::Inputs,
        Box::new(move |ctx, g| {
            let x = ctx.input(0)?;
            let gin = ctx
                .needs_input_grad(0)
                .then(|| conv3d_backward_input(&g, &ctx.params().get(wid).value, x.shape(), &geo));
            conv3d_backward_kernel(&g, x, &geo, &mut ctx.params().get_mut(wid).grad);
            if let Some(bid) = bid {
                bias_grad(&g, &mut ctx.params().get_mut(bid).grad);
            }
            Ok(vec![gin])
        }),
    ))
}

/// Pointwise channel mixing; a [`conv3d`] restricted to 1×1×1 kernels.
pub fn conv1x1x1(
    tape: &mut Tape,
    x: &Var,
    weight: &Parameter,
    bias: Option<&Parameter>,
) -> Result<Var> {
    let [_, _, kd, kh, kw] = weight.shape().0;
    if [kd, kh, kw] != [1, 1, 1] {
        return Err(Error::shape(
            "conv1x1x1",
            "kernel extents 1x1x1",
            weight.shape(),
        ));
    }
    conv3d(tape, x, weight, bias, Padding::Explicit([0; 3]))
}
