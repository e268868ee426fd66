use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ArchitectureSpec;
use crate::engine::ops::{self, Padding};
use crate::engine::{NodeInfo, ParamId, ParamStore, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::reversible::{ReversibleSequence, Storage};

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        Conv {
            weight: store.add_conv_kernel(
                format!("{name}.weight"),
                Shape::new(cout, cin, k, k, k),
                rng,
            ),
            bias: store.add_filled(format!("{name}.bias"), cout, 0.0),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        ops::conv3d(
            tape,
            x,
            store.get(self.weight),
            Some(store.get(self.bias)),
            Padding::Same,
        )
    }
}

/// GN–LReLU–Conv–GN–LReLU–Conv.
#[derive(Clone, Debug)]
struct ConvStack {
    norm1: [ParamId; 2],
    conv1: Conv,
    norm2: [ParamId; 2],
    conv2: Conv,
    group_size: usize,
}

impl ConvStack {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        [cin, mid, cout]: [usize; 3],
        k: usize,
        group_size: usize,
        rng: &mut R,
    ) -> Self {
        let norm = |store: &mut ParamStore, n: &str, c| {
            [
                store.add_filled(format!("{name}.{n}.gamma"), c, 1.0),
                store.add_filled(format!("{name}.{n}.beta"), c, 0.0),
            ]
        };
        let norm1 = norm(store, "norm1", cin);
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, mid, k, rng);
        let norm2 = norm(store, "norm2", mid);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), mid, cout, k, rng);
        ConvStack {
            norm1,
            conv1,
            norm2,
            conv2,
            group_size,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for (norm, conv) in [(&self.norm1, &self.conv1), (&self.norm2, &self.conv2)] {
            h = ops::group_norm(
                tape,
                &h,
                store.get(norm[0]),
                store.get(norm[1]),
                self.group_size,
                ops::DEFAULT_GN_EPSILON,
            )?;
            h = ops::leaky_relu(tape, &h, ops::DEFAULT_LEAKY_SLOPE)?;
            h = conv.forward(tape, store, &h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
enum Layout {
    Baseline {
        /// One stack per level; the last is the bottleneck.
        encoder: Vec<ConvStack>,
        /// Levels `0..L-1`.
        decoder: Vec<ConvStack>,
    },
    Reversible {
        encoder: Vec<ReversibleSequence>,
        /// Width change after pooling into level `l + 1`.
        down: Vec<Conv>,
        decoder: Vec<ReversibleSequence>,
        /// Width change from level `l + 1` down to level `l`, applied
        /// before upsampling.
        up: Vec<Conv>,
    },
}

/// Where a reversible sequence sits in the U.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// The node range a reversible sequence occupied on a traced tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceSpan {
    /// First node recorded by the sequence.
    pub first: usize,
    /// One past the last node; the last node's output is the sequence output.
    pub end: usize,
    pub channels: usize,
    pub depth: usize,
}

/// Shape-only record of a training forward pass with every primitive on
/// the tape.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Recorded nodes with a zero batch extent; scale by `batch`.
    pub nodes: Vec<NodeInfo>,
    pub sequences: Vec<SequenceSpan>,
    pub batch: usize,
}

/// A built U-Net and its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ArchitectureSpec,
    store: ParamStore,
    stem: Conv,
    layout: Layout,
    head: Conv,
}

impl Network {
    /// Builds the network with weights drawn from a seeded generator.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let st = &mut store;
        let w = &spec.levels;
        let n = w.len();
        let (k, gs) = (spec.kernel_size, spec.group_size);
        let stem = Conv::new(st, "stem", spec.in_channels, w[0], spec.stem_kernel, rng);
        let layout = if spec.reversible {
            let mut encoder = Vec::with_capacity(n);
            let mut down = Vec::with_capacity(n - 1);
            for l in 0..n {
                if l > 0 {
                    down.push(Conv::new(st, &format!("down{l}"), w[l - 1], w[l], 1, rng));
                }
                encoder.push(ReversibleSequence::new(
                    st,
                    &format!("enc{l}"),
                    w[l],
                    spec.encoder_blocks,
                    k,
                    gs,
                    rng,
                )?);
            }
            let mut decoder: Vec<_> = Vec::with_capacity(n);
            let mut up = Vec::with_capacity(n - 1);
            for l in (0..n).rev() {
                decoder.push(ReversibleSequence::new(
                    st,
                    &format!("dec{l}"),
                    w[l],
                    spec.decoder_blocks,
                    k,
                    gs,
                    rng,
                )?);
                if l > 0 {
                    up.push(Conv::new(st, &format!("up{l}"), w[l], w[l - 1], 1, rng));
                }
            }
            // stored finest-first
            decoder.reverse();
            up.reverse();
            Layout::Reversible {
                encoder,
                down,
                decoder,
                up,
            }
        } else {
            let mut encoder = Vec::with_capacity(n);
            encoder.push(ConvStack::new(st, "enc0", [w[0], w[0], w[0]], k, gs, rng));
            for l in 1..n - 1 {
                encoder.push(ConvStack::new(
                    st,
                    &format!("enc{l}"),
                    [w[l - 1], w[l], w[l]],
                    k,
                    gs,
                    rng,
                ));
            }
            encoder.push(ConvStack::new(
                st,
                &format!("enc{}", n - 1),
                [w[n - 2], w[n - 1], w[n - 2]],
                k,
                gs,
                rng,
            ));
            let mut decoder = Vec::with_capacity(n - 1);
            for l in (1..n - 1).rev() {
                decoder.push(ConvStack::new(
                    st,
                    &format!("dec{l}"),
                    [w[l], w[l], w[l - 1]],
                    k,
                    gs,
                    rng,
                ));
            }
            decoder.push(ConvStack::new(st, "dec0", [w[0], w[0], w[0]], k, gs, rng));
            decoder.reverse();
            Layout::Baseline { encoder, decoder }
        };
        let head = Conv::new(st, "head", w[0], spec.out_regions, spec.stem_kernel, rng);
        Ok(Network {
            spec: spec.clone(),
            store,
            stem,
            layout,
            head,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.numel()
    }

    /// Reversible sequences with their side and level.
    pub fn sequences(&self) -> Vec<(Side, usize, &ReversibleSequence)> {
        match &self.layout {
            Layout::Baseline { .. } => Vec::new(),
            Layout::Reversible {
                encoder, decoder, ..
            } => {
                let enc = encoder
                    .iter()
                    .enumerate()
                    .map(|(l, s)| (Side::Encoder, l, s));
                let dec = decoder
                    .iter()
                    .enumerate()
                    .map(|(l, s)| (Side::Decoder, l, s));
                enc.chain(dec).collect()
            }
        }
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let d = self.spec.divisor();
        if shape.spatial().iter().any(|e| e % d != 0) {
            return Err(Error::invalid(
                "forward",
                format!("spatial extents of {shape} must be divisible by {d}"),
            ));
        }
        if shape.channels() != self.spec.in_channels {
            return Err(Error::shape(
                "forward",
                format!("{} input channels", self.spec.in_channels),
                shape,
            ));
        }
        Ok(())
    }

    /// Sigmoid region probabilities for a `(B, in_channels, D, H, W)` batch.
    pub fn forward(&self, tape: &mut Tape, x: &Var, storage: Storage) -> Result<Var> {
        self.run(tape, x, storage, &mut Vec::new())
    }

    /// Untracked single-pass segmentation of whole volumes.
    pub fn forward_full_volume(&self, volume: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = Var::constant(volume.clone());
        Ok(self
            .run(&mut tape, &x, Storage::Recompute, &mut Vec::new())?
            .into_tensor())
    }

    /// Records the stored-activation graph for `input` without touching any
    /// voxel data: the pass runs at batch extent zero.
    pub fn trace(&self, input: Shape) -> Result<Trace> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(input.with_batch(0)));
        let mut spans = Vec::new();
        self.run(&mut tape, &x, Storage::Stored, &mut spans)?;
        Ok(Trace {
            nodes: tape.nodes(),
            sequences: spans,
            batch: input.batch(),
        })
    }

    fn run(
        &self,
        tape: &mut Tape,
        x: &Var,
        storage: Storage,
        spans: &mut Vec<SequenceSpan>,
    ) -> Result<Var> {
        self.check_input(x.shape())?;
        let st = &self.store;
        let h = self.stem.forward(tape, st, x)?;
        let h = match &self.layout {
            Layout::Baseline { encoder, decoder } => {
                let n = encoder.len();
                let mut skips = Vec::with_capacity(n - 1);
                let mut h = h;
                for (l, stack) in encoder.iter().enumerate() {
                    if l > 0 {
                        h = ops::max_pool2(tape, &h)?;
                    }
                    h = stack.forward(tape, st, &h)?;
                    if l < n - 1 {
                        skips.push(h.clone());
                    }
                }
                for (stack, skip) in decoder.iter().zip(skips).rev() {
                    h = ops::upsample2(tape, &h)?;
                    h = ops::add(tape, &h, &skip)?;
                    h = stack.forward(tape, st, &h)?;
                }
                h
            }
            Layout::Reversible {
                encoder,
                down,
                decoder,
                up,
            } => {
                let mut seq = |tape: &mut Tape, s: &ReversibleSequence, h: &Var| {
                    let first = tape.len();
                    let out = s.forward(tape, st, h, storage)?;
                    if tape.len() > first {
                        spans.push(SequenceSpan {
                            first,
                            end: tape.len(),
                            channels: s.channels(),
                            depth: s.depth(),
                        });
                    }
                    Ok::<_, Error>(out)
                };
                let n = encoder.len();
                let mut skips = Vec::with_capacity(n - 1);
                let mut h = h;
                for (l, s) in encoder.iter().enumerate() {
                    if l > 0 {
                        h = ops::max_pool2(tape, &h)?;
                        h = down[l - 1].forward(tape, st, &h)?;
                    }
                    h = seq(tape, s, &h)?;
                    if l < n - 1 {
                        skips.push(h.clone());
                    }
                }
                for l in (0..n).rev() {
                    h = seq(tape, &decoder[l], &h)?;
                    if l > 0 {
                        h = up[l - 1].forward(tape, st, &h)?;
                        h = ops::upsample2(tape, &h)?;
                        h = ops::add(tape, &h, &skips[l - 1])?;
                    }
                }
                h
            }
        };
        let logits = self.head.forward(tape, st, &h)?;
        ops::sigmoid(tape, &logits)
    }
}
