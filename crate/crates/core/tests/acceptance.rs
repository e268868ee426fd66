//! End-to-end acceptance checks. Runs without the test harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fail.

use std::process::ExitCode;
use std::time::Instant;

use revvolnet::engine::{ParamStore, Shape, Tape, Tensor};
use revvolnet::memory::{self, ADAM_MULTIPLIER};
use revvolnet::reversible::{ReversibleSequence, Storage};
use revvolnet::training::{
    early_stop, lr_at, synthetic_dataset, train_split, TrainOptions, TrainingConfig,
};
use revvolnet::unet::{ArchitectureSpec, Network};
use revvolnet::verify;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INVERSION_TRIALS: usize = 100;
const INVERSION_WIDTH: usize = 8;
const INVERSION_SPATIAL: usize = 8;
const INVERSION_TOL: f32 = 1e-4;

const EQUIVALENCE_DEPTHS: std::ops::RangeInclusive<usize> = 1..=6;
const EQUIVALENCE_TOL: f64 = 1e-4;

const FD_SEEDS: std::ops::Range<u64> = 0..3;

const MEMORY_PATCH: usize = 32;
const MIN_REDUCTION: f64 = 0.25;

const TARGET_BASELINE_PARAMS: f64 = 12.5e6;
const BASELINE_PARAM_TOL: f64 = 0.05;
const REVERSIBLE_PARAM_TOL: f64 = 0.02;

const BENCH_STEPS: usize = 10;
const BENCH_SPATIAL: usize = 24;
const BENCH_BAND: (f64, f64) = (1.2, 2.0);

const TRAIN_VOLUMES: usize = 25;
const TRAIN_SIZE: usize = 32;
const TRAIN_EPOCHS: usize = 60;
const TRAIN_WT_TARGET: f64 = 0.90;

type Outcome = Result<String, String>;

fn pass_if(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn inversion() -> Outcome {
    let r = verify::inversion_trials(0, INVERSION_TRIALS, INVERSION_WIDTH, INVERSION_SPATIAL)
        .map_err(|e| e.to_string())?;
    pass_if(
        r.max_error <= INVERSION_TOL,
        format!(
            "{} blocks, width {}, {}^3: max round-trip error {:.3e} (mean {:.3e}, limit {INVERSION_TOL:.0e})",
            r.trials, r.channels, r.spatial, r.max_error, r.mean_error
        ),
    )
}

fn gradient_equivalence() -> Outcome {
    let spec = ArchitectureSpec::tiny();
    let mut worst = (0.0f64, String::new());
    for depth in EQUIVALENCE_DEPTHS {
        for c in verify::equivalence_suite(&spec, depth as u64, depth).map_err(|e| e.to_string())? {
            if c.worst_relative_error >= worst.0 {
                worst = (c.worst_relative_error, c.name);
            }
        }
    }
    pass_if(
        worst.0 <= EQUIVALENCE_TOL,
        format!(
            "depths 1-6: worst relative error {:.3e} ({}), limit {EQUIVALENCE_TOL:.0e}",
            worst.0, worst.1
        ),
    )
}

fn finite_differences() -> Outcome {
    let mut failing = Vec::new();
    let mut worst = (0.0f64, String::new());
    for seed in FD_SEEDS {
        for c in verify::finite_difference_suite(seed).map_err(|e| e.to_string())? {
            if !c.passed {
                failing.push(format!("{} (seed {seed})", c.name));
            }
            if c.worst_relative_error >= worst.0 {
                worst = (c.worst_relative_error, c.name);
            }
        }
    }
    pass_if(
        failing.is_empty(),
        format!(
            "{} ops x {} seeds, h {:.0e}: worst {:.3e} ({}), limit {:.0e}, floor {:.0e}{}",
            verify::CHECKED_OPS.len(),
            FD_SEEDS.end - FD_SEEDS.start,
            verify::FD_STEP,
            worst.0,
            worst.1,
            verify::FD_TOLERANCE,
            verify::FD_FLOOR,
            if failing.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failing.join(", "))
            }
        ),
    )
}

fn retained_bytes(depth: usize, storage: Storage) -> revvolnet::Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
    let mut store = ParamStore::new();
    let seq = ReversibleSequence::new(&mut store, "rev", 8, depth, 3, 2, &mut rng)?;
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::randn(Shape::new(1, 8, 8, 8, 8), 1.0, &mut rng),
        true,
    );
    let y = seq.forward(&mut tape, &store, &x, storage)?;
    drop(y);
    Ok(tape.retained_bytes())
}

fn depth_independent_memory() -> Outcome {
    let err = |e: revvolnet::Error| e.to_string();
    let recompute: Vec<usize> = (1..=6)
        .map(|d| retained_bytes(d, Storage::Recompute))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let stored: Vec<usize> = (1..=6)
        .map(|d| retained_bytes(d, Storage::Stored))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let step = stored[1] - stored[0];
    let linear = step > 0 && stored.windows(2).all(|w| w[1] - w[0] == step);
    pass_if(
        recompute[0] == recompute[5] && recompute.windows(2).all(|w| w[0] == w[1]) && linear,
        format!(
            "recomputing depth 1 = {} B, depth 6 = {} B; stored {} B + {} B per block",
            recompute[0],
            recompute[5],
            stored[0] - step,
            step
        ),
    )
}

fn memory_model() -> Outcome {
    let input = Shape::new(1, 4, MEMORY_PATCH, MEMORY_PATCH, MEMORY_PATCH);
    let report = |spec: ArchitectureSpec| -> revvolnet::Result<memory::MemoryReport> {
        memory::estimate(&Network::build(&spec, 0)?, input, ADAM_MULTIPLIER)
    };
    let base = report(ArchitectureSpec::desk_baseline()).map_err(|e| e.to_string())?;
    let rev = report(ArchitectureSpec::desk_reversible(1, 1)).map_err(|e| e.to_string())?;
    let consistent = base.is_consistent() && rev.is_consistent();
    let (b, r) = (base.total_nonrev_bytes, rev.total_prev_bytes);
    let reduction = 1.0 - r as f64 / b as f64;
    pass_if(
        consistent && r < b && reduction >= MIN_REDUCTION,
        format!(
            "totals recompute from terms: {consistent}; {MEMORY_PATCH}^3 patch: baseline {:.2} MB, reversible(1,1) {:.2} MB, reduction {:.1}% (limit {:.0}%)",
            b as f64 / 1e6,
            r as f64 / 1e6,
            100.0 * reduction,
            100.0 * MIN_REDUCTION
        ),
    )
}

fn parameter_match() -> Outcome {
    let count = |spec| {
        Network::build(&spec, 0)
            .map(|n| n.parameter_count() as f64)
            .map_err(|e| e.to_string())
    };
    let base = count(ArchitectureSpec::baseline())?;
    let rev = count(ArchitectureSpec::reversible(1, 1))?;
    let off = (base / TARGET_BASELINE_PARAMS - 1.0).abs();
    let rel = (rev / base - 1.0).abs();
    pass_if(
        off <= BASELINE_PARAM_TOL && rel <= REVERSIBLE_PARAM_TOL,
        format!(
            "baseline {base} ({:+.2}% vs 12.5M, limit 5%), reversible(1,1) {rev} ({:+.2}% vs baseline, limit 2%)",
            100.0 * (base / TARGET_BASELINE_PARAMS - 1.0),
            100.0 * (rev / base - 1.0)
        ),
    )
}

fn overhead() -> Outcome {
    let r = verify::bench(
        &ArchitectureSpec::desk_reversible(1, 1),
        BENCH_STEPS,
        0,
        BENCH_SPATIAL,
    )
    .map_err(|e| e.to_string())?;
    pass_if(
        (BENCH_BAND.0..=BENCH_BAND.1).contains(&r.time_ratio),
        format!(
            "{BENCH_STEPS} steps at {BENCH_SPATIAL}^3: recomputing {:.1} ms, storing {:.1} ms, ratio {:.3} (band {}-{}); peak ratio {:.3}",
            1e3 * r.reversible.mean_step_seconds,
            1e3 * r.reference.mean_step_seconds,
            r.time_ratio,
            BENCH_BAND.0,
            BENCH_BAND.1,
            r.peak_ratio
        ),
    )
}

fn training_config(max_epochs: usize) -> TrainingConfig {
    TrainingConfig {
        initial_lr: 3e-3,
        max_epochs,
        seed: 1,
        ..TrainingConfig::default()
    }
}

fn end_to_end() -> Outcome {
    let err = |e: revvolnet::Error| e.to_string();
    let data = synthetic_dataset(TRAIN_VOLUMES, TRAIN_SIZE, 4, 1);
    let run = |epochs| -> revvolnet::Result<_> {
        let mut net = Network::build(&ArchitectureSpec::tiny(), 1)?;
        let report = train_split(
            &mut net,
            &training_config(epochs),
            &data,
            &TrainOptions::default(),
        )?;
        Ok((report, net.params().snapshot()))
    };
    let (a, wa) = run(3).map_err(err)?;
    let (b, wb) = run(3).map_err(err)?;
    let deterministic = a.epochs == b.epochs && wa == wb;

    let started = Instant::now();
    let (report, _) = run(TRAIN_EPOCHS).map_err(err)?;
    let wt = report.best_dice[0];
    let first = report
        .epochs
        .iter()
        .find(|m| m.val_dice_wt >= TRAIN_WT_TARGET)
        .map(|m| m.epoch);
    pass_if(
        deterministic && wt >= TRAIN_WT_TARGET,
        format!(
            "{} train / {} held-out volumes at {TRAIN_SIZE}^3; best epoch {} held-out WT {:.4} (TC {:.4}, ET {:.4}), first WT >= {TRAIN_WT_TARGET} at epoch {}, {} epochs in {:.0} s; repeat runs identical: {deterministic}",
            report.train_volumes,
            report.val_volumes,
            report.best_epoch,
            wt,
            report.best_dice[1],
            report.best_dice[2],
            first.map_or("never".to_string(), |e| e.to_string()),
            report.epochs.len(),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn schedule_and_stopping() -> Outcome {
    let c = TrainingConfig::default();
    let table = [
        (0, 1e-4),
        (249, 1e-4),
        (250, 2e-5),
        (399, 2e-5),
        (400, 4e-6),
        (549, 4e-6),
        (550, 8e-7),
        (999, 8e-7),
    ];
    let lr_ok = table
        .iter()
        .all(|&(e, lr)| (lr_at(e, &c) - lr).abs() <= 1e-12 * lr);

    let (w, p) = (c.moving_average_window, c.patience);
    let rising: Vec<f64> = (0..300).map(|i| i as f64 / 300.0).collect();
    let never_on_rise = (0..=rising.len()).all(|n| !early_stop(&rising[..n], w, p));
    let flat = vec![0.5; w + p];
    let flat_ok = early_stop(&flat, w, p) && !early_stop(&flat[..w + p - 1], w, p);
    let mut late = vec![0.5; 85];
    late.push(1.0);
    late.extend(vec![0.5; 59]);
    let late_waits = !early_stop(&late, w, p);
    late.push(0.5);
    let late_stops = early_stop(&late, w, p);
    pass_if(
        lr_ok && never_on_rise && flat_ok && late_waits && late_stops,
        format!(
            "lr table ({} epochs): {lr_ok}; rising never stops: {never_on_rise}; plateau stops at epoch {}: {flat_ok}; late improvement resets patience: {}",
            table.len(),
            w + p - 1,
            late_waits && late_stops
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("inversion", inversion),
        ("gradient equivalence", gradient_equivalence),
        ("finite differences", finite_differences),
        (
            "depth-independent activation memory",
            depth_independent_memory,
        ),
        ("memory model", memory_model),
        ("parameter match", parameter_match),
        ("overhead", overhead),
        ("end-to-end training", end_to_end),
        ("schedule and stopping", schedule_and_stopping),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {}: {status} {name} [{:.1} s] {detail}",
            i + 1,
            started.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
