//! Self-checks: finite-difference gradient suites for every primitive,
//! recompute-versus-stored gradient equivalence, round-trip inversion of
//! random blocks, and a step-time benchmark of the two storage modes.
//!
//! Finite differences use central differences with step [`FD_STEP`] on a
//! random linear functional `L = Σ w ⊙ y` of the op output, accumulated in
//! double precision outside the tape. A tensor's error is
//! `max|analytic − numeric| / max(max|analytic|, max|numeric|, FD_FLOOR / FD_TOLERANCE)`,
//! so differences below [`FD_FLOOR`] always pass. Inputs are drawn away
//! from kinks and ties so no perturbation changes a branch.
//!
//! Composite reversible sequences are not finite-differenced: stacked
//! normalizations put single-precision difference quotients well above the
//! tolerance. Their recomputing backward is instead compared against the
//! stored-activation path, which is built only from the checked primitives.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::ops::{self, Padding};
use crate::engine::{ParamId, ParamStore, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::reversible::{ReversibleBlock, ReversibleSequence, Storage};
use crate::training::{dice_loss, training_step, Adam, TrainingConfig, DEFAULT_DICE_EPSILON};
use crate::unet::{ArchitectureSpec, Network};

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-3;
pub const FD_FLOOR: f64 = 1e-5;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-4;
pub const INVERSION_TOLERANCE: f32 = 1e-4;

/// Elements probed per tensor; larger tensors are subsampled.
const FD_MAX_PROBES: usize = 192;

/// Every op exercised by [`finite_difference_suite`], by tape name.
pub const CHECKED_OPS: [&str; 13] = [
    "conv3d",
    "conv1x1x1",
    "group_norm",
    "leaky_relu",
    "sigmoid",
    "add",
    "concat",
    "narrow",
    "max_pool2",
    "upsample2",
    "sum",
    "weighted_sum",
    "dice_loss",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    FiniteDifference,
    Equivalence,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub worst_relative_error: f64,
    pub tolerance: f64,
    pub elements_checked: usize,
    pub passed: bool,
}

impl Check {
    fn new(
        name: impl Into<String>,
        kind: CheckKind,
        error: f64,
        tolerance: f64,
        elements: usize,
    ) -> Self {
        Check {
            name: name.into(),
            kind,
            worst_relative_error: error,
            tolerance,
            elements_checked: elements,
            passed: error <= tolerance,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub depth: usize,
    pub checks: Vec<Check>,
    pub failing: Vec<String>,
    pub passed: bool,
}

/// Runs the equivalence checks for `spec` and the finite-difference suite.
pub fn gradcheck(spec: &ArchitectureSpec, seed: u64, depth: usize) -> Result<GradcheckReport> {
    spec.validate()?;
    let mut checks = equivalence_suite(spec, seed, depth)?;
    checks.extend(finite_difference_suite(seed)?);
    let failing: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    Ok(GradcheckReport {
        seed,
        depth,
        passed: failing.is_empty(),
        failing,
        checks,
    })
}

type Build = dyn Fn(&mut Tape, &[Var], &ParamStore) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    store: ParamStore,
    build: Box<Build>,
}

fn output_weights(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn functional(y: &Tensor, w: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn normalized_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let amax = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    let scale = amax(analytic).max(amax(numeric)).max(floor);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error of `a` against reference `b`: `max|a − b| / max|b|`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.max_abs_diff(b) as f64;
    if diff == 0.0 {
        return 0.0;
    }
    diff / (b.max_abs() as f64)
        .max(a.max_abs() as f64)
        .max(f64::MIN_POSITIVE)
}

impl Case {
    fn eval(&self, inputs: &[Tensor], store: &ParamStore, w: &Tensor) -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(functional(
            (self.build)(&mut tape, &vars, store)?.value(),
            w,
        ))
    }

    fn check(mut self, rng: &mut ChaCha8Rng) -> Result<Check> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|t| tape.leaf(t.clone(), true))
            .collect();
        let y = (self.build)(&mut tape, &vars, &self.store)?;
        let w = output_weights(y.shape(), rng);
        self.store.zero_grad();
        let grads = tape.backward_from(&y, w.clone(), &mut self.store)?;
        drop(y);
        let h = FD_STEP;
        let floor = FD_FLOOR / FD_TOLERANCE;
        let (mut worst, mut probed) = (0.0f64, 0usize);

        let mut probe =
            |analytic: &Tensor, perturb: &mut dyn FnMut(usize, f32) -> Result<f64>| -> Result<()> {
                let mut idx: Vec<usize> = (0..analytic.numel()).collect();
                if idx.len() > FD_MAX_PROBES {
                    idx.shuffle(rng);
                    idx.truncate(FD_MAX_PROBES);
                }
                let mut a = Vec::with_capacity(idx.len());
                let mut n = Vec::with_capacity(idx.len());
                for &i in &idx {
                    let plus = perturb(i, h)?;
                    let minus = perturb(i, -h)?;
                    n.push((plus - minus) / (2.0 * h as f64));
                    a.push(analytic.data()[i] as f64);
                }
                probed += a.len();
                worst = worst.max(normalized_error(&a, &n, floor));
                Ok(())
            };

        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(v.shape()));
            let mut inputs = self.inputs.clone();
            probe(&analytic, &mut |i, d| {
                let orig = inputs[k].data()[i];
                inputs[k].data_mut()[i] = orig + d;
                let l = self.eval(&inputs, &self.store, &w);
                inputs[k].data_mut()[i] = orig;
                l
            })?;
        }
        let ids: Vec<ParamId> = self.store.iter().map(|p| p.id).collect();
        for id in ids {
            let analytic = self.store.get(id).grad.clone();
            let mut store = self.store.clone();
            probe(&analytic, &mut |i, d| {
                let orig = store.get(id).value.data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + d;
                let l = self.eval(&self.inputs, &store, &w);
                store.get_mut(id).value.data_mut()[i] = orig;
                l
            })?;
        }
        Ok(Check::new(
            self.name,
            CheckKind::FiniteDifference,
            worst,
            FD_TOLERANCE,
            probed,
        ))
    }
}

/// Values at least `margin` away from zero, so no perturbation crosses a kink.
fn away_from_zero(shape: Shape, margin: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    t.data_mut()
        .iter_mut()
        .for_each(|x| *x = x.signum() * (margin + x.abs()));
    t
}

/// Distinct values spaced far wider than the finite-difference step, so
/// every pooling window has a clear maximum.
fn untied(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.numel();
    let mut v: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.02).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v)
}

fn randomize_affine(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with("gamma") || p.name.ends_with("beta") || p.name.ends_with("bias") {
            let v = Tensor::randn(p.shape(), 0.3, rng);
            p.value.add_assign(&v);
        }
    }
}

fn cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let s = Shape::new;
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let w = store.add_conv_kernel("w", s(3, 2, 3, 3, 3), rng);
    let b = store.add("b", Tensor::randn(s(3, 1, 1, 1, 1), 0.3, rng));
    out.push(Case {
        name: "conv3d",
        inputs: vec![Tensor::randn(s(2, 2, 4, 4, 4), 1.0, rng)],
        store,
        build: Box::new(move |t, v, st| {
            ops::conv3d(t, &v[0], st.get(w), Some(st.get(b)), Padding::Same)
        }),
    });

    let mut store = ParamStore::new();
    let w = store.add_conv_kernel("w", s(4, 3, 1, 1, 1), rng);
    let b = store.add("b", Tensor::randn(s(4, 1, 1, 1, 1), 0.3, rng));
    out.push(Case {
        name: "conv1x1x1",
        inputs: vec![Tensor::randn(s(2, 3, 4, 3, 2), 1.0, rng)],
        store,
        build: Box::new(move |t, v, st| ops::conv1x1x1(t, &v[0], st.get(w), Some(st.get(b)))),
    });

    let mut store = ParamStore::new();
    let gamma = store.add("gamma", away_from_zero(s(4, 1, 1, 1, 1), 0.5, rng));
    let beta = store.add("beta", Tensor::randn(s(4, 1, 1, 1, 1), 0.3, rng));
    out.push(Case {
        name: "group_norm",
        inputs: vec![Tensor::randn(s(2, 4, 3, 4, 2), 1.0, rng)],
        store,
        build: Box::new(move |t, v, st| {
            ops::group_norm(
                t,
                &v[0],
                st.get(gamma),
                st.get(beta),
                2,
                ops::DEFAULT_GN_EPSILON,
            )
        }),
    });

    out.push(Case {
        name: "leaky_relu",
        inputs: vec![away_from_zero(s(2, 3, 4, 4, 4), 0.05, rng)],
        store: ParamStore::new(),
        build: Box::new(|t, v, _| ops::leaky_relu(t, &v[0], ops::DEFAULT_LEAKY_SLOPE)),
    });

    out.push(Case {
        name: "sigmoid",
        inputs: vec![Tensor::randn(s(2, 3, 4, 4, 4), 2.0, rng)],
        store: ParamStore::new(),
        build: Box::new(|t, v, _| ops::sigmoid(t, &v[0])),
    });

    let shape = s(2, 3, 4, 3, 2);
    out.push(Case {
        name: "add",
        inputs: vec![
            Tensor::randn(shape, 1.0, rng),
            Tensor::randn(shape, 1.0, rng),
        ],
        store: ParamStore::new(),
        build: Box::new(|t, v, _| ops::add(t, &v[0], &v[1])),
    });

    out.push(Case {
        name: "concat",
        inputs: vec![
            Tensor::randn(s(2, 2, 3, 4, 2), 1.0, rng),
            Tensor::randn(s(2, 3, 3, 4, 2), 1.0, rng),
        ],
        store: ParamStore::new(),
        build: Box::new(|t, v, _| ops::concat_channels(t, &v[0], &v[1])),
    });

    out.push(Case {
        name: "narrow",
        inputs: vec![Tensor::randn(s(2, 5, 3, 4, 2), 1.0, rng)],
        store: ParamStore::new(),
        build: Box::new(|t, v, _| ops::narrow_channels(t, &v[0], 1, 3)),
    });

    out.push(Case {
        name: "max_pool2",
        inputs: vec![untied(s(2, 2, 4, 4, 4), rng)],
        store: ParamStore::new(),
        build: Box::new(|t, v, _| ops::max_pool2(t, &v[0])),
    });

    out.push(Case {
        name: "upsample2",
        inputs: vec![Tensor::randn(s(2, 2, 2, 2, 2), 1.0, rng)],
        store: ParamStore::new(),
        build: Box::new(|t, v, _| ops::upsample2(t, &v[0])),
    });

    out.push(Case {
        name: "sum",
        inputs: vec![Tensor::randn(s(2, 3, 4, 4, 4), 1.0, rng)],
        store: ParamStore::new(),
        build: Box::new(|t, v, _| ops::sum_all(t, &v[0])),
    });

    let weights = Tensor::randn(s(2, 3, 4, 4, 4), 1.0, rng);
    out.push(Case {
        name: "weighted_sum",
        inputs: vec![Tensor::randn(s(2, 3, 4, 4, 4), 1.0, rng)],
        store: ParamStore::new(),
        build: Box::new(move |t, v, _| ops::weighted_sum(t, &v[0], &weights)),
    });

    // the loss is a single f32, whose rounding limits the difference
    // quotient; a small volume keeps per-voxel gradients well above it
    let shape = s(1, 3, 2, 2, 2);
    let mut pred = Tensor::randn(shape, 1.0, rng);
    pred.data_mut()
        .iter_mut()
        .for_each(|x| *x = 0.05 + 0.9 / (1.0 + (-*x).exp()));
    let target = Tensor::from_vec(
        shape,
        (0..shape.numel())
            .map(|_| rng.random_bool(0.4) as u8 as f32)
            .collect(),
    );
    out.push(Case {
        name: "dice_loss",
        inputs: vec![pred],
        store: ParamStore::new(),
        build: Box::new(move |t, v, _| dice_loss(t, &v[0], &target, DEFAULT_DICE_EPSILON)),
    });

    Ok(out)
}

/// Central-difference checks of every primitive listed in [`CHECKED_OPS`].
pub fn finite_difference_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases(&mut rng)?
        .into_iter()
        .map(|c| c.check(&mut rng))
        .collect()
}

/// Input and parameter gradients of `y` under both storage modes.
fn gradients_both_ways(
    store: &ParamStore,
    input: &Tensor,
    w: &Tensor,
    forward: impl Fn(&mut Tape, &ParamStore, &Var, Storage) -> Result<Var>,
) -> Result<[Vec<Tensor>; 2]> {
    let run = |storage| -> Result<Vec<Tensor>> {
        let mut store = store.clone();
        store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let y = forward(&mut tape, &store, &x, storage)?;
        let grads = tape.backward_from(&y, w.clone(), &mut store)?;
        let gx = grads
            .get(&x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        Ok(std::iter::once(gx)
            .chain(store.iter().map(|p| p.grad.clone()))
            .collect())
    };
    Ok([run(Storage::Recompute)?, run(Storage::Stored)?])
}

fn worst_relative(a: &[Tensor], b: &[Tensor]) -> (f64, usize) {
    let worst = a
        .iter()
        .zip(b)
        .map(|(x, y)| relative_error(x, y))
        .fold(0.0, f64::max);
    (worst, a.iter().map(Tensor::numel).sum())
}

/// Recompute-versus-stored gradients: one `depth`-block sequence at every
/// level width of `spec`, then the whole network when it is reversible.
pub fn equivalence_suite(spec: &ArchitectureSpec, seed: u64, depth: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut checks = Vec::new();
    let mut widths = spec.levels.clone();
    widths.dedup();
    for &c in &widths {
        if c % 2 != 0 || (c / 2) % spec.group_size != 0 {
            continue;
        }
        let mut store = ParamStore::new();
        let seq = ReversibleSequence::new(
            &mut store,
            "rev",
            c,
            depth,
            spec.kernel_size,
            spec.group_size,
            &mut rng,
        )?;
        randomize_affine(&mut store, &mut rng);
        let input = Tensor::randn(Shape::new(2, c, 4, 4, 4), 1.0, &mut rng);
        let w = Tensor::randn(input.shape(), 1.0, &mut rng);
        let [a, b] =
            gradients_both_ways(&store, &input, &w, |t, st, x, m| seq.forward(t, st, x, m))?;
        let (err, n) = worst_relative(&a, &b);
        checks.push(Check::new(
            format!("reversible_sequence_c{c}_depth{depth}"),
            CheckKind::Equivalence,
            err,
            EQUIVALENCE_TOLERANCE,
            n,
        ));
    }
    if spec.reversible {
        let mut net = Network::build(spec, seed)?;
        randomize_affine(net.params_mut(), &mut rng);
        let d = spec.divisor() * 2;
        let input = Tensor::randn(Shape::new(1, spec.in_channels, d, d, d), 1.0, &mut rng);
        let w = Tensor::randn(input.shape().with_channels(spec.out_regions), 1.0, &mut rng);
        let [a, b] = gradients_both_ways(net.params(), &input, &w, |t, st, x, m| {
            let mut n = net.clone();
            n.params_mut().restore(&st.snapshot());
            n.forward(t, x, m)
        })?;
        let (err, n) = worst_relative(&a[1..], &b[1..]);
        let (ierr, _) = worst_relative(&a[..1], &b[..1]);
        checks.push(Check::new(
            "network",
            CheckKind::Equivalence,
            err.max(ierr),
            EQUIVALENCE_TOLERANCE,
            n,
        ));
    }
    Ok(checks)
}

#[derive(Clone, Debug, Serialize)]
pub struct InversionReport {
    pub seed: u64,
    pub trials: usize,
    pub channels: usize,
    pub spatial: usize,
    pub max_error: f32,
    pub mean_error: f64,
    pub tolerance: f32,
    pub passed: bool,
}

/// Round-trips random inputs through `trials` freshly initialized blocks.
pub fn inversion_trials(
    seed: u64,
    trials: usize,
    channels: usize,
    spatial: usize,
) -> Result<InversionReport> {
    if channels < 2 || !channels.is_multiple_of(2) {
        return Err(Error::invalid(
            "invert",
            format!("width {channels} must be even and at least 2"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut max_error, mut total) = (0.0f32, 0.0f64);
    let half = channels / 2;
    let group = if half.is_multiple_of(2) { 2 } else { 1 };
    for i in 0..trials {
        let mut store = ParamStore::new();
        let block =
            ReversibleBlock::new(&mut store, &format!("b{i}"), channels, 3, group, &mut rng);
        randomize_affine(&mut store, &mut rng);
        let shape = Shape::new(1, half, spatial, spatial, spatial);
        let (x1, x2) = (
            Tensor::randn(shape, 1.0, &mut rng),
            Tensor::randn(shape, 1.0, &mut rng),
        );
        let (y1, y2) = block.forward_halves(&store, x1.clone(), x2.clone())?;
        let (r1, r2) = block.inverse_halves(&store, y1, y2)?;
        let err = r1.max_abs_diff(&x1).max(r2.max_abs_diff(&x2));
        max_error = max_error.max(err);
        total += err as f64;
    }
    Ok(InversionReport {
        seed,
        trials,
        channels,
        spatial,
        max_error,
        mean_error: if trials == 0 {
            0.0
        } else {
            total / trials as f64
        },
        tolerance: INVERSION_TOLERANCE,
        passed: max_error <= INVERSION_TOLERANCE,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeTiming {
    pub mean_step_seconds: f64,
    pub min_step_seconds: f64,
    pub peak_bytes: u64,
    pub stored_activation_bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub steps: usize,
    pub input_shape: [usize; 5],
    pub parameters: usize,
    /// Recomputing reversible sequences during backward.
    pub reversible: ModeTiming,
    /// The same network keeping every activation.
    pub reference: ModeTiming,
    pub time_ratio: f64,
    pub peak_ratio: f64,
}

/// Times `steps` training steps of `spec` in each storage mode, alternating
/// modes step by step after one warm-up step each.
pub fn bench(
    spec: &ArchitectureSpec,
    steps: usize,
    seed: u64,
    spatial: usize,
) -> Result<BenchReport> {
    if steps == 0 {
        return Err(Error::invalid("bench", "need at least one step"));
    }
    let net = Network::build(spec, seed)?;
    let shape = Shape::new(1, spec.in_channels, spatial, spatial, spatial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::randn(shape, 1.0, &mut rng);
    let ts = shape.with_channels(spec.out_regions);
    let target = Tensor::from_vec(
        ts,
        (0..ts.numel())
            .map(|_| rng.random_bool(0.3) as u8 as f32)
            .collect(),
    );
    let config = TrainingConfig::default();

    let modes = [Storage::Recompute, Storage::Stored];
    let mut nets = [net.clone(), net];
    let mut adams: Vec<Adam> = nets.iter().map(|n| Adam::new(n.params())).collect();
    let mut times = [Vec::new(), Vec::new()];
    let mut peaks = [0u64; 2];
    let mut stored = [0u64; 2];
    for step in 0..=steps {
        for k in 0..2 {
            let started = Instant::now();
            let s = training_step(
                &mut nets[k],
                &mut adams[k],
                &image,
                &target,
                1e-4,
                &config,
                modes[k],
            )?;
            let secs = started.elapsed().as_secs_f64();
            if step > 0 {
                times[k].push(secs);
            }
            peaks[k] = peaks[k].max(s.peak_bytes);
            stored[k] = s.stored_activation_bytes;
        }
    }
    let timing = |k: usize| ModeTiming {
        mean_step_seconds: times[k].iter().sum::<f64>() / steps as f64,
        min_step_seconds: times[k].iter().copied().fold(f64::INFINITY, f64::min),
        peak_bytes: peaks[k],
        stored_activation_bytes: stored[k],
    };
    let (reversible, reference) = (timing(0), timing(1));
    Ok(BenchReport {
        steps,
        input_shape: shape.0,
        parameters: nets[0].parameter_count(),
        time_ratio: reversible.mean_step_seconds / reference.mean_step_seconds,
        peak_ratio: reversible.peak_bytes as f64 / reference.peak_bytes as f64,
        reversible,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::inject_fault;

    #[test]
    fn every_op_passes_finite_differences() {
        let checks = finite_difference_suite(0).unwrap();
        assert_eq!(
            checks.iter().map(|c| c.name.as_str()).collect::<Vec<_>>(),
            CHECKED_OPS
        );
        for c in &checks {
            assert!(c.passed, "{c:?}");
            assert!(c.elements_checked > 0);
        }
    }

    #[test]
    fn doubled_backward_is_caught() {
        inject_fault(Some("group_norm"));
        let checks = finite_difference_suite(1);
        inject_fault(None);
        let failing: Vec<_> = checks
            .unwrap()
            .into_iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect();
        assert_eq!(failing, ["group_norm"]);
    }

    #[test]
    fn normalized_error_floor() {
        assert!((normalized_error(&[1e-9], &[0.0], 1e-2) - 1e-7).abs() < 1e-18);
        assert!((normalized_error(&[2.0, 1.0], &[2.0, 1.002], 1e-2) - 1e-3).abs() < 1e-12);
        assert_eq!(normalized_error(&[0.0], &[0.0], 1e-2), 0.0);
    }

    #[test]
    fn sequences_agree_across_modes() {
        for depth in [0, 1, 3] {
            for c in equivalence_suite(&ArchitectureSpec::tiny(), 2, depth).unwrap() {
                assert!(c.passed, "{c:?}");
                if depth == 0 && c.name.starts_with("reversible_sequence") {
                    assert_eq!(c.worst_relative_error, 0.0);
                }
            }
        }
    }

    #[test]
    fn corrupted_recompute_breaks_equivalence() {
        inject_fault(Some("reversible_sequence"));
        let checks = equivalence_suite(&ArchitectureSpec::tiny(), 0, 2);
        inject_fault(None);
        assert!(checks.unwrap().iter().all(|c| !c.passed));
    }

    #[test]
    fn inversion_round_trip() {
        let r = inversion_trials(3, 5, 8, 4).unwrap();
        assert!(r.passed && r.max_error > 0.0, "{r:?}");
        assert!(inversion_trials(0, 1, 5, 4).is_err());
    }

    #[test]
    fn bench_reports_both_modes() {
        let r = bench(&ArchitectureSpec::tiny(), 1, 0, 8).unwrap();
        assert!(r.time_ratio > 0.0 && r.reversible.mean_step_seconds > 0.0);
        assert!(r.reversible.stored_activation_bytes < r.reference.stored_activation_bytes);
        assert!(bench(&ArchitectureSpec::tiny(), 0, 0, 8).is_err());
    }
}
