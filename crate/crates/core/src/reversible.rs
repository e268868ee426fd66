//! Additive-coupling reversible blocks and sequences.
//!
//! A block splits its input channels in half and computes
//!
//! ```text
//! y1 = x1 + F(x2)
//! y2 = x2 + G(y1)
//! ```
//!
//! which inverts exactly (up to rounding) as `x2 = y2 - G(y1)`,
//! `x1 = y1 - F(x2)`. In [`Storage::Recompute`] mode a whole sequence
//! occupies a single tape node that keeps only its output; the backward
//! pass walks the blocks in reverse, rebuilding each block input from its
//! output while differentiating the two sub-networks on short-lived local
//! tapes.

use rand::Rng;

use crate::engine::ops::{self, concat_tensors, narrow_tensor, Padding};
use crate::engine::{ParamId, ParamStore, Saved, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How a reversible sequence keeps what its backward pass needs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Storage {
    /// Keep only the sequence output; recompute block inputs on the way back.
    #[default]
    Recompute,
    /// Record every primitive on the caller's tape like an ordinary network.
    Stored,
}

/// Group norm, leaky ReLU, then a same-padded convolution, all at one width.
#[derive(Clone, Debug)]
pub struct SubNet {
    gamma: ParamId,
    beta: ParamId,
    weight: ParamId,
    bias: ParamId,
    group_size: usize,
}

impl SubNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        kernel: usize,
        group_size: usize,
        rng: &mut R,
    ) -> Self {
        SubNet {
            gamma: store.add_filled(format!("{prefix}.norm.gamma"), channels, 1.0),
            beta: store.add_filled(format!("{prefix}.norm.beta"), channels, 0.0),
            weight: store.add_conv_kernel(
                format!("{prefix}.conv.weight"),
                Shape::new(channels, channels, kernel, kernel, kernel),
                rng,
            ),
            bias: store.add_filled(format!("{prefix}.conv.bias"), channels, 0.0),
            group_size,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let h = ops::group_norm(
            tape,
            x,
            store.get(self.gamma),
            store.get(self.beta),
            self.group_size,
            ops::DEFAULT_GN_EPSILON,
        )?;
        let h = ops::leaky_relu(tape, &h, ops::DEFAULT_LEAKY_SLOPE)?;
        ops::conv3d(
            tape,
            &h,
            store.get(self.weight),
            Some(store.get(self.bias)),
            Padding::Same,
        )
    }

    /// Untracked evaluation.
    pub fn eval(&self, store: &ParamStore, x: &Var) -> Result<Tensor> {
        Ok(self
            .forward(&mut Tape::inference(), store, x)?
            .into_tensor())
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.gamma, self.beta, self.weight, self.bias]
    }
}

/// `(y1, y2)` from `(x1, x2)` for arbitrary coupling functions.
pub fn couple(
    x1: Tensor,
    x2: Tensor,
    f: impl Fn(&Var) -> Result<Tensor>,
    g: impl Fn(&Var) -> Result<Tensor>,
) -> Result<(Tensor, Tensor)> {
    let x2 = Var::constant(x2);
    let mut y1 = x1;
    y1.add_assign(&f(&x2)?);
    let y1 = Var::constant(y1);
    let mut y2 = x2.into_tensor();
    y2.add_assign(&g(&y1)?);
    Ok((y1.into_tensor(), y2))
}

/// Inverse of [`couple`] for the same `f` and `g`.
pub fn uncouple(
    y1: Tensor,
    y2: Tensor,
    f: impl Fn(&Var) -> Result<Tensor>,
    g: impl Fn(&Var) -> Result<Tensor>,
) -> Result<(Tensor, Tensor)> {
    let y1 = Var::constant(y1);
    let mut x2 = y2;
    x2.sub_assign(&g(&y1)?);
    let x2 = Var::constant(x2);
    let mut x1 = y1.into_tensor();
    x1.sub_assign(&f(&x2)?);
    Ok((x1, x2.into_tensor()))
}

#[derive(Clone, Debug)]
pub struct ReversibleBlock {
    f: SubNet,
    g: SubNet,
}

impl ReversibleBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        kernel: usize,
        group_size: usize,
        rng: &mut R,
    ) -> Self {
        let half = channels / 2;
        ReversibleBlock {
            f: SubNet::new(store, &format!("{prefix}.f"), half, kernel, group_size, rng),
            g: SubNet::new(store, &format!("{prefix}.g"), half, kernel, group_size, rng),
        }
    }

    pub fn f(&self) -> &SubNet {
        &self.f
    }

    pub fn g(&self) -> &SubNet {
        &self.g
    }

    pub fn forward_halves(
        &self,
        store: &ParamStore,
        x1: Tensor,
        x2: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        couple(x1, x2, |v| self.f.eval(store, v), |v| self.g.eval(store, v))
    }

    pub fn inverse_halves(
        &self,
        store: &ParamStore,
        y1: Tensor,
        y2: Tensor,
    ) -> Result<(Tensor, Tensor)> {
        uncouple(y1, y2, |v| self.f.eval(store, v), |v| self.g.eval(store, v))
    }

    /// One step of the recomputing backward pass. Takes the block output
    /// halves and their gradients; returns the reconstructed input halves
    /// and their gradients, accumulating parameter gradients into `store`.
    fn backward(
        &self,
        store: &mut ParamStore,
        (y1, y2): (Tensor, Tensor),
        (gy1, gy2): (Tensor, Tensor),
    ) -> Result<[Tensor; 4]> {
        // G: rebuild x2 and push gy2 through G into y1.
        let mut tape = Tape::new();
        let y1 = tape.leaf(y1, true);
        let out = self.g.forward(&mut tape, store, &y1)?;
        let mut x2 = y2;
        x2.sub_assign(out.value());
        let node = out.node().ok_or(Error::Untracked)?;
        drop(out);
        let mut grads = tape.backward_node(node, gy2.clone(), store)?;
        let mut gy1_total = gy1;
        if let Some(g) = grads.take(&y1) {
            gy1_total.add_assign(&g);
        }
        drop(grads);
        drop(tape);
        let y1 = y1.into_tensor();

        // F: rebuild x1 and push the total y1 gradient through F into x2.
        let mut tape = Tape::new();
        let x2 = tape.leaf(x2, true);
        let out = self.f.forward(&mut tape, store, &x2)?;
        let mut x1 = y1;
        x1.sub_assign(out.value());
        let node = out.node().ok_or(Error::Untracked)?;
        drop(out);
        let mut grads = tape.backward_node(node, gy1_total.clone(), store)?;
        let mut gx2 = gy2;
        if let Some(g) = grads.take(&x2) {
            gx2.add_assign(&g);
        }
        drop(grads);
        drop(tape);
        Ok([x1, x2.into_tensor(), gy1_total, gx2])
    }
}

/// A chain of reversible blocks at constant width.
#[derive(Clone, Debug)]
pub struct ReversibleSequence {
    channels: usize,
    blocks: Vec<ReversibleBlock>,
}

impl ReversibleSequence {
    /// `channels` must be even and each half divisible by `group_size`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        depth: usize,
        kernel: usize,
        group_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(Error::invalid(
                "reversible_sequence",
                format!("width {channels} must be positive and even"),
            ));
        }
        if group_size == 0 || !(channels / 2).is_multiple_of(group_size) {
            return Err(Error::invalid(
                "reversible_sequence",
                format!(
                    "half width {} not divisible by group size {group_size}",
                    channels / 2
                ),
            ));
        }
        let blocks = (0..depth)
            .map(|i| {
                ReversibleBlock::new(
                    store,
                    &format!("{prefix}.{i}"),
                    channels,
                    kernel,
                    group_size,
                    rng,
                )
            })
            .collect();
        Ok(ReversibleSequence { channels, blocks })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[ReversibleBlock] {
        &self.blocks
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if shape.channels() != self.channels {
            return Err(Error::shape(
                "reversible_sequence",
                format!("{} channels", self.channels),
                shape,
            ));
        }
        Ok(())
    }

    fn halves(&self, x: &Tensor) -> (Tensor, Tensor) {
        let h = self.channels / 2;
        (narrow_tensor(x, 0, h), narrow_tensor(x, h, h))
    }

    /// Untracked forward pass.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check(x.shape())?;
        let (mut a, mut b) = self.halves(x);
        for block in &self.blocks {
            (a, b) = block.forward_halves(store, a, b)?;
        }
        concat_tensors(&a, &b)
    }

    /// Reconstructs the input from an output.
    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        self.check(y.shape())?;
        let (mut a, mut b) = self.halves(y);
        for block in self.blocks.iter().rev() {
            (a, b) = block.inverse_halves(store, a, b)?;
        }
        concat_tensors(&a, &b)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Var,
        storage: Storage,
    ) -> Result<Var> {
        self.check(x.shape())?;
        if self.blocks.is_empty() {
            return Ok(x.clone());
        }
        match storage {
            Storage::Stored => self.forward_stored(tape, store, x),
            Storage::Recompute => self.forward_recompute(tape, store, x),
        }
    }

    fn forward_stored(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let (mut x1, mut x2) = ops::split_channels(tape, x, self.channels / 2)?;
        for block in &self.blocks {
            let f = block.f.forward(tape, store, &x2)?;
            let y1 = ops::add(tape, &x1, &f)?;
            let g = block.g.forward(tape, store, &y1)?;
            let y2 = ops::add(tape, &x2, &g)?;
            (x1, x2) = (y1, y2);
        }
        ops::concat_channels(tape, &x1, &x2)
    }

    fn forward_recompute(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let out = self.apply(store, x.value())?;
        let seq = self.clone();
        let ids: Vec<ParamId> = self
            .blocks
            .iter()
            .flat_map(|b| b.f.params().into_iter().chain(b.g.params()))
            .collect();
        Ok(tape.record(
            "reversible_sequence",
            &[x],
            out,
            &ids,
            Saved::Output,
            Box::new(move |ctx, grad| {
                let y = ctx.take_output()?;
                let mut state = seq.halves(&y);
                drop(y);
                let mut grads = seq.halves(&grad);
                drop(grad);
                for block in seq.blocks.iter().rev() {
                    let [x1, x2, g1, g2] = block.backward(ctx.params(), state, grads)?;
                    (state, grads) = ((x1, x2), (g1, g2));
                }
                drop(state);
                if !ctx.needs_input_grad(0) {
                    return Ok(vec![None]);
                }
                Ok(vec![Some(concat_tensors(&grads.0, &grads.1)?)])
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::alloc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(depth: usize, channels: usize, seed: u64) -> (ParamStore, ReversibleSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s =
            ReversibleSequence::new(&mut store, "rev", channels, depth, 3, 2, &mut rng).unwrap();
        // non-trivial affine parameters so the sub-networks are not symmetric
        for p in store.iter_mut() {
            if p.name.ends_with("gamma") || p.name.ends_with("bias") || p.name.ends_with("beta") {
                let v = Tensor::randn(p.shape(), 0.3, &mut rng);
                p.value.add_assign(&v);
            }
        }
        (store, s)
    }

    #[test]
    fn scalar_toy_coupling() {
        // F(x) = x, G(x) = 2x
        let t = |v: f32| Tensor::from_vec(Shape::new(1, 1, 1, 1, 1), vec![v]);
        let f = |v: &Var| Ok(v.value().clone());
        let g = |v: &Var| {
            let mut o = v.value().clone();
            o.scale(2.0);
            Ok(o)
        };
        let (y1, y2) = couple(t(1.0), t(2.0), f, g).unwrap();
        assert_eq!((y1.data()[0], y2.data()[0]), (3.0, 8.0));
        let (x1, x2) = uncouple(y1, y2, f, g).unwrap();
        assert_eq!((x1.data()[0], x2.data()[0]), (1.0, 2.0));
    }

    #[test]
    fn zero_subnets_are_identity() {
        let (mut store, s) = seq(2, 4, 3);
        for p in store.iter_mut() {
            if p.name.contains(".conv.") {
                p.value.fill(0.0);
            }
        }
        let x = Tensor::randn(
            Shape::new(1, 4, 3, 3, 3),
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert_eq!(s.apply(&store, &x).unwrap(), x);
    }

    #[test]
    fn inverse_reconstructs_input() {
        let (store, s) = seq(3, 8, 11);
        let x = Tensor::randn(
            Shape::new(2, 8, 4, 4, 4),
            1.0,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let y = s.apply(&store, &x).unwrap();
        let back = s.inverse(&store, &y).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-4);
    }

    #[test]
    fn rejects_bad_widths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ReversibleSequence::new(&mut store, "a", 5, 1, 3, 1, &mut rng).is_err());
        assert!(ReversibleSequence::new(&mut store, "b", 6, 1, 3, 2, &mut rng).is_err());
        let (store, s) = seq(1, 4, 0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 6, 2, 2, 2)), true);
        assert!(matches!(
            s.forward(&mut tape, &store, &x, Storage::Recompute),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn run(storage: Storage, depth: usize, seed: u64) -> (Tensor, Tensor, ParamStore) {
        let (mut store, s) = seq(depth, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x0 = Tensor::randn(Shape::new(2, 4, 3, 4, 3), 1.0, &mut rng);
        let w = Tensor::randn(x0.shape(), 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0, true);
        let y = s.forward(&mut tape, &store, &x, storage).unwrap();
        let loss = ops::weighted_sum(&mut tape, &y, &w).unwrap();
        let grads = tape.backward(&loss, &mut store).unwrap();
        (y.value().clone(), grads.get(&x).unwrap().clone(), store)
    }

    #[test]
    fn recompute_matches_stored_gradients() {
        let (ya, ga, pa) = run(Storage::Recompute, 3, 7);
        let (yb, gb, pb) = run(Storage::Stored, 3, 7);
        assert!(ya.max_abs_diff(&yb) <= 1e-6);
        let rel = |a: &Tensor, b: &Tensor| a.max_abs_diff(b) / b.max_abs().max(1e-5);
        assert!(
            rel(&ga, &gb) <= 1e-4,
            "input gradient rel err {}",
            rel(&ga, &gb)
        );
        for (a, b) in pa.iter().zip(pb.iter()) {
            assert!(
                rel(&a.grad, &b.grad) <= 1e-4,
                "{}: {}",
                a.name,
                rel(&a.grad, &b.grad)
            );
        }
    }

    #[test]
    fn recompute_tape_retains_only_the_output() {
        for depth in [1, 4] {
            let (store, s) = seq(depth, 4, 5);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::zeros(Shape::new(1, 4, 4, 4, 4)), true);
            let y = s
                .forward(&mut tape, &store, &x, Storage::Recompute)
                .unwrap();
            assert_eq!(tape.retained_bytes(), y.value().bytes());
        }
    }

    #[test]
    fn transient_peak_independent_of_depth() {
        let peak = |depth: usize| {
            let (mut store, s) = seq(depth, 4, 9);
            let x0 = Tensor::randn(
                Shape::new(1, 4, 6, 6, 6),
                1.0,
                &mut ChaCha8Rng::seed_from_u64(4),
            );
            let w = Tensor::full(x0.shape(), 1.0);
            let base = alloc::live_bytes();
            let (_, p) = alloc::measure_peak(|| {
                let mut tape = Tape::new();
                let x = tape.leaf(x0, true);
                let y = s
                    .forward(&mut tape, &store, &x, Storage::Recompute)
                    .unwrap();
                let loss = ops::weighted_sum(&mut tape, &y, &w).unwrap();
                drop(y);
                tape.backward(&loss, &mut store).unwrap();
            });
            p - base
        };
        assert_eq!(peak(1), peak(5));
    }

    #[test]
    fn stored_retention_grows_linearly_with_depth() {
        let retained = |depth: usize| {
            let (store, s) = seq(depth, 4, 9);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::zeros(Shape::new(1, 4, 4, 4, 4)), true);
            s.forward(&mut tape, &store, &x, Storage::Stored).unwrap();
            tape.retained_bytes()
        };
        let per_block = retained(2) - retained(1);
        assert!(per_block > 0);
        assert_eq!(retained(4) - retained(1), 3 * per_block);
    }

    #[test]
    fn empty_sequence_is_identity() {
        let (store, s) = seq(0, 4, 1);
        let x = Tensor::full(Shape::new(1, 4, 1, 1, 1), 2.0);
        assert_eq!(s.apply(&store, &x).unwrap(), x);
        assert_eq!(s.inverse(&store, &x).unwrap(), x);
    }
}
