//! Soft Dice loss and the hard Dice score over region channels.

use crate::engine::{Saved, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_DICE_EPSILON: f64 = 1e-5;

/// Per-channel `(Σ p·g, Σ p, Σ g)` over batch and voxels.
fn overlap_sums(pred: &Tensor, target: &Tensor) -> Vec<(f64, f64, f64)> {
    let s = pred.shape();
    (0..s.channels())
        .map(|c| {
            let mut acc = (0.0, 0.0, 0.0);
            for b in 0..s.batch() {
                for (&p, &g) in pred.channel(b, c).iter().zip(target.channel(b, c)) {
                    let (p, g) = (p as f64, g as f64);
                    acc.0 += p * g;
                    acc.1 += p;
                    acc.2 += g;
                }
            }
            acc
        })
        .collect()
}

/// `Σ_r 1 − (2 Σ p·g + ε) / (Σ p + Σ g + ε)`, one term per channel `r`.
/// Differentiable in `pred`; `target` is a constant.
pub fn dice_loss(tape: &mut Tape, pred: &Var, target: &Tensor, epsilon: f64) -> Result<Var> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("dice_loss", pred.shape(), target.shape()));
    }
    let sums = overlap_sums(pred.value(), target);
    let loss: f64 = sums
        .iter()
        .map(|&(i, p, g)| 1.0 - (2.0 * i + epsilon) / (p + g + epsilon))
        .sum();
    let target = target.clone();
    Ok(tape.record(
        "dice_loss",
        &[pred],
        Tensor::scalar(loss as f32),
        &[],
        Saved::Inputs,
        Box::new(move |ctx, g| {
            let pred = ctx.input(0)?;
            let seed = g.data()[0] as f64;
            let s = pred.shape();
            let mut out = Tensor::zeros(s);
            // d/dp_k of -(2I + ε)/D with D = P + G + ε: -(2 g_k D - (2I + ε)) / D²
            for (c, &(i, p, gs)) in sums.iter().enumerate() {
                let d = p + gs + epsilon;
                let (a, b) = (-2.0 / d, (2.0 * i + epsilon) / (d * d));
                for bi in 0..s.batch() {
                    let tg = target.channel(bi, c);
                    for (dst, &t) in out.channel_mut(bi, c).iter_mut().zip(tg) {
                        *dst = (seed * (a * t as f64 + b)) as f32;
                    }
                }
            }
            Ok(vec![Some(out)])
        }),
    ))
}

/// `1` where `p > threshold`, else `0`.
pub fn binarize(pred: &Tensor, threshold: f32) -> Tensor {
    let data = pred
        .data()
        .iter()
        .map(|&p| if p > threshold { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(pred.shape(), data)
}

/// Hard Dice `2|P∩G| / (|P| + |G|)` per channel of binary masks; an empty
/// prediction of an empty region scores 1.
pub fn dice_score(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("dice_score", pred.shape(), target.shape()));
    }
    Ok(overlap_sums(pred, target)
        .into_iter()
        .map(|(i, p, g)| if p + g == 0.0 { 1.0 } else { 2.0 * i / (p + g) })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{ParamStore, Shape};

    fn mask(bits: &[u8], channels: usize) -> Tensor {
        let n = bits.len();
        let data = (0..channels)
            .flat_map(|_| bits.iter().map(|&b| b as f32))
            .collect();
        Tensor::from_vec(Shape::new(1, channels, 1, 1, n), data)
    }

    fn loss_value(pred: &Tensor, target: &Tensor, eps: f64) -> f32 {
        let mut tape = Tape::inference();
        let p = tape.constant(pred.clone());
        dice_loss(&mut tape, &p, target, eps)
            .unwrap()
            .value()
            .data()[0]
    }

    #[test]
    fn perfect_overlap_is_zero() {
        let m = mask(&[1, 0, 1, 1, 0, 0, 1, 0], 3);
        assert_eq!(loss_value(&m, &m, 1e-5), 0.0);
    }

    #[test]
    fn empty_region_convention() {
        let z = mask(&[0; 8], 3);
        assert_eq!(loss_value(&z, &z, 1e-5), 0.0);
        assert_eq!(dice_score(&z, &z).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn all_ones_against_half_mask() {
        // 1 - 8/12 per region
        let ones = mask(&[1; 8], 3);
        let half = mask(&[1, 1, 1, 1, 0, 0, 0, 0], 3);
        let l = loss_value(&ones, &half, 1e-12) as f64;
        assert!((l - 3.0 / 3.0).abs() < 1e-6, "{l}");
        let one_region = loss_value(
            &mask(&[1; 8], 1),
            &mask(&[1, 1, 1, 1, 0, 0, 0, 0], 1),
            1e-12,
        ) as f64;
        assert!((one_region - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn scores_by_hand() {
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0], 1);
        let b = mask(&[0, 0, 1, 1, 1, 1, 0, 0], 1);
        let c = mask(&[0, 0, 0, 0, 0, 0, 1, 1], 1);
        assert_eq!(dice_score(&a, &a).unwrap(), vec![1.0]);
        assert_eq!(dice_score(&a, &c).unwrap(), vec![0.0]);
        assert_eq!(dice_score(&a, &b).unwrap(), vec![0.5]);
    }

    #[test]
    fn gradient_matches_closed_form_for_one_voxel() {
        // single voxel p, target 1: L = 1 - (2p + e)/(p + 1 + e)
        let (p, e) = (0.3f64, 0.1f64);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(p as f32), true);
        let l = dice_loss(&mut tape, &x, &Tensor::scalar(1.0), e).unwrap();
        let grads = tape.backward(&l, &mut ParamStore::new()).unwrap();
        let d = p + 1.0 + e;
        let expected = -(2.0 * d - (2.0 * p + e)) / (d * d);
        assert!((grads.get(&x).unwrap().data()[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let p = tape.constant(mask(&[1, 0], 3));
        assert!(dice_loss(&mut tape, &p, &mask(&[1, 0], 2), 1e-5).is_err());
        assert!(dice_score(&mask(&[1], 1), &mask(&[1, 0], 1)).is_err());
    }

    #[test]
    fn binarize_is_strict() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 1, 3), vec![0.2, 0.5, 0.7]);
        assert_eq!(binarize(&t, 0.5).data(), &[0.0, 0.0, 1.0]);
    }
}
