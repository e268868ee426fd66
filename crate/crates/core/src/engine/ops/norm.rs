use crate::engine::{Parameter, Saved, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Channels per normalization group.
pub const DEFAULT_GROUP_SIZE: usize = 10;
pub const DEFAULT_GN_EPSILON: f32 = 1e-5;

/// Per (batch, group) mean and reciprocal standard deviation.
#[derive(Clone, Copy)]
struct GroupStats {
    mean: f64,
    rstd: f64,
}

fn stats(x: &Tensor, group_size: usize, epsilon: f32) -> Vec<GroupStats> {
    let [n, c, ..] = x.shape().0;
    let len = group_size * x.shape().volume();
    let groups = c.checked_div(group_size).unwrap_or(0);
    let mut out = Vec::with_capacity(n * groups);
    for k in 0..n * groups {
        let chunk = &x.data()[k * len..(k + 1) * len];
        let count = len.max(1) as f64;
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / count;
        let var = chunk
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count;
        out.push(GroupStats {
            mean,
            rstd: 1.0 / (var + epsilon as f64).sqrt(),
        });
    }
    out
}

/// Group normalization: each group of `group_size` consecutive channels of
/// each sample is centered and scaled to unit variance, then a per-channel
/// affine `gamma * x + beta` is applied.
pub fn group_norm(
    tape: &mut Tape,
    x: &Var,
    gamma: &Parameter,
    beta: &Parameter,
    group_size: usize,
    epsilon: f32,
) -> Result<Var> {
    let shape = x.shape();
    let c = shape.channels();
    if group_size == 0 || !c.is_multiple_of(group_size) {
        return Err(Error::invalid(
            "group_norm",
            format!("{c} channels not divisible by group size {group_size}"),
        ));
    }
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            "group_norm",
            format!("{c} affine values"),
            format!("gamma {} / beta {}", gamma.shape(), beta.shape()),
        ));
    }
    let st = stats(x.value(), group_size, epsilon);
    let mut out = Tensor::zeros(shape);
    let (g, b) = (gamma.value.data(), beta.value.data());
    for bi in 0..shape.batch() {
        for ch in 0..c {
            let s = st[bi * (c / group_size) + ch / group_size];
            let (scale, shift) = (g[ch] as f64 * s.rstd, b[ch] as f64);
            let src = x.value().channel(bi, ch);
            for (dst, &xv) in out.channel_mut(bi, ch).iter_mut().zip(src) {
                *dst = ((xv as f64 - s.mean) * scale + shift) as f32;
            }
        }
    }
    let (gid, bid) = (gamma.id, beta.id);
    Ok(tape.record(
        "group_norm",
        &[x],
        out,
        &[gid, bid],
        Saved::Inputs,
        Box::new(move |ctx, dy| {
            let x = ctx.input(0)?;
            let shape = x.shape();
            let [n, c, ..] = shape.0;
            let groups = c / group_size;
            let count = (group_size * shape.volume()).max(1) as f64;
            let gamma = ctx.params().get(gid).value.data().to_vec();
            let mut dgamma = vec![0f64; c];
            let mut dbeta = vec![0f64; c];
            let mut dx = ctx.needs_input_grad(0).then(|| Tensor::zeros(shape));
            for bi in 0..n {
                for gi in 0..groups {
                    let s = st[bi * groups + gi];
                    let chans = gi * group_size..(gi + 1) * group_size;
                    // Σ dx̂ and Σ dx̂·x̂ over the group
                    let (mut s1, mut s2) = (0f64, 0f64);
                    for ch in chans.clone() {
                        let gch = gamma[ch] as f64;
                        for (&d, &xv) in dy.channel(bi, ch).iter().zip(x.channel(bi, ch)) {
                            let xh = (xv as f64 - s.mean) * s.rstd;
                            let d = d as f64;
                            dgamma[ch] += d * xh;
                            dbeta[ch] += d;
                            s1 += d * gch;
                            s2 += d * gch * xh;
                        }
                    }
                    let Some(dx) = dx.as_mut() else { continue };
                    let (m1, m2) = (s1 / count, s2 / count);
                    for ch in chans {
                        let gch = gamma[ch] as f64;
                        let src = x.channel(bi, ch);
                        let dys = dy.channel(bi, ch);
                        for ((dst, &xv), &d) in dx.channel_mut(bi, ch).iter_mut().zip(src).zip(dys)
                        {
                            let xh = (xv as f64 - s.mean) * s.rstd;
                            *dst = (s.rstd * (d as f64 * gch - m1 - xh * m2)) as f32;
                        }
                    }
                }
            }
            let params = ctx.params();
            for (dst, v) in params.get_mut(gid).grad.data_mut().iter_mut().zip(dgamma) {
                *dst += v as f32;
            }
            for (dst, v) in params.get_mut(bid).grad.data_mut().iter_mut().zip(dbeta) {
                *dst += v as f32;
            }
            Ok(vec![dx])
        }),
    ))
}
