//! Labeled volumes: synthetic generation, preprocessing, augmentation and
//! on-disk datasets.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::{io, Shape, Tensor};
use crate::error::{Error, Result};

/// Whole tumor, tumor core, enhancing tumor.
pub const REGIONS: [&str; 3] = ["wt", "tc", "et"];

pub const INDEX_FILE: &str = "index.tsv";

/// One image (`1 × modalities × D × H × W`) with its nested region masks
/// (`1 × 3 × D × H × W`, values 0 or 1).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub image: Tensor,
    pub regions: Tensor,
}

impl LabeledVolume {
    pub fn new(image: Tensor, regions: Tensor) -> Result<Self> {
        let (i, r) = (image.shape(), regions.shape());
        if i.batch() != 1
            || r.batch() != 1
            || r.channels() != REGIONS.len()
            || i.spatial() != r.spatial()
        {
            return Err(Error::Dataset(format!(
                "image {i} and regions {r} must be 1×M×D×H×W and 1×3×D×H×W"
            )));
        }
        Ok(LabeledVolume { image, regions })
    }

    /// Whether every voxel in a region also lies in all enclosing regions.
    pub fn is_nested(&self) -> bool {
        (1..self.regions.shape().channels()).all(|c| {
            let outer = self.regions.channel(0, c - 1);
            let inner = self.regions.channel(0, c);
            inner.iter().zip(outer).all(|(&i, &o)| i <= o)
        })
    }
}

/// Voxel-centre coordinates in `(-1, 1)` along an axis of length `n`.
fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

// per-modality intensity: base, then offsets for edema, non-enhancing core
// and enhancing rim (indexed by modality modulo 4)
const BASE: [f32; 4] = [1.0, 0.8, 0.9, 1.1];
const EDEMA: [f32; 4] = [1.0, -0.2, 0.0, 0.8];
const CORE: [f32; 4] = [0.4, -0.5, -0.3, 0.3];
const RIM: [f32; 4] = [0.5, -0.3, 1.2, 0.4];
const NOISE_STD: f32 = 0.25;

/// A brain-like ellipsoid holding a tumor: whole tumor `q ≤ 1`, core
/// `q ≤ 0.36`, enhancing rim `0.09 ≤ q ≤ 0.36`, where `q` is the tumor's
/// normalized squared radius. Voxels outside the brain are exactly zero
/// in every modality and in every mask.
pub fn generate_synthetic<R: Rng + ?Sized>(
    rng: &mut R,
    size: usize,
    modalities: usize,
) -> LabeledVolume {
    let brain: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..0.9));
    let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.4));
    let spatial = [size; 3];
    let mut image = Tensor::zeros(Shape::new(1, modalities, size, size, size));
    let mut regions = Tensor::zeros(Shape::new(1, REGIONS.len(), size, size, size));
    let v = size * size * size;
    for idx in 0..v {
        let p = [idx / (size * size), (idx / size) % size, idx % size];
        let x: [f64; 3] = std::array::from_fn(|a| coord(p[a], spatial[a]));
        let inside_brain = (0..3).map(|a| (x[a] / brain[a]).powi(2)).sum::<f64>() <= 1.0;
        if !inside_brain {
            continue;
        }
        let q: f64 = (0..3)
            .map(|a| ((x[a] - center[a]) / radii[a]).powi(2))
            .sum();
        let (wt, tc, et) = (q <= 1.0, q <= 0.36, (0.09..=0.36).contains(&q));
        for (c, on) in [wt, tc, et].into_iter().enumerate() {
            regions.channel_mut(0, c)[idx] = on as u8 as f32;
        }
        for m in 0..modalities {
            let k = m % 4;
            let mut value = BASE[k];
            if wt && !tc {
                value += EDEMA[k];
            } else if et {
                value += RIM[k];
            } else if tc {
                value += CORE[k];
            }
            value += NOISE_STD * rng.sample::<f32, _>(StandardNormal);
            image.channel_mut(0, m)[idx] = if value == 0.0 { f32::EPSILON } else { value };
        }
    }
    LabeledVolume { image, regions }
}

/// `count` volumes from one seeded stream.
pub fn synthetic_dataset(
    count: usize,
    size: usize,
    modalities: usize,
    seed: u64,
) -> Vec<LabeledVolume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| generate_synthetic(&mut rng, size, modalities))
        .collect()
}

/// Zero-mean, unit-variance scaling computed over nonzero voxels only, per
/// modality or jointly. Zero voxels stay zero; a modality with no nonzero
/// voxel is left as is.
pub fn standardize(image: &Tensor, per_modality: bool) -> Tensor {
    let s = image.shape();
    let mut out = image.clone();
    let groups: Vec<Vec<usize>> = if per_modality {
        (0..s.channels()).map(|c| vec![c]).collect()
    } else {
        vec![(0..s.channels()).collect()]
    };
    for b in 0..s.batch() {
        for chans in &groups {
            let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
            for &c in chans {
                for &v in image.channel(b, c).iter().filter(|&&v| v != 0.0) {
                    n += 1;
                    sum += v as f64;
                    sq += v as f64 * v as f64;
                }
            }
            if n == 0 {
                log::warn!(
                    "standardize: modality group {chans:?} has no nonzero voxels; left unchanged"
                );
                continue;
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for &c in chans {
                for v in out.channel_mut(b, c).iter_mut().filter(|v| **v != 0.0) {
                    *v = ((*v as f64 - mean) * inv) as f32;
                }
            }
        }
    }
    out
}

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
pub const MAX_INTENSITY_SHIFT: f32 = 0.1;

/// One drawn set of augmentation parameters. Rotation and scaling act in
/// the plane of the last two axes (perpendicular to the first).
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub flips: [bool; 3],
    pub angle_deg: f64,
    pub scale: f64,
    /// Added to the nonzero voxels of each modality.
    pub shifts: Vec<f32>,
}

impl Augmentation {
    pub fn identity(modalities: usize) -> Self {
        Augmentation {
            flips: [false; 3],
            angle_deg: 0.0,
            scale: 1.0,
            shifts: vec![0.0; modalities],
        }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R, modalities: usize) -> Self {
        Augmentation {
            flips: std::array::from_fn(|_| rng.random_bool(0.5)),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            shifts: (0..modalities)
                .map(|_| rng.random_range(-MAX_INTENSITY_SHIFT..=MAX_INTENSITY_SHIFT))
                .collect(),
        }
    }

    pub fn apply(&self, volume: &LabeledVolume) -> LabeledVolume {
        let mut image = flip(&volume.image, self.flips);
        let mut regions = flip(&volume.regions, self.flips);
        if self.angle_deg != 0.0 || self.scale != 1.0 {
            image = rotate_in_plane(&image, self.angle_deg, self.scale, false);
            regions = rotate_in_plane(&regions, self.angle_deg, self.scale, true);
        }
        for (m, &shift) in self.shifts.iter().enumerate() {
            if shift != 0.0 {
                for v in image.channel_mut(0, m).iter_mut().filter(|v| **v != 0.0) {
                    *v += shift;
                }
            }
        }
        LabeledVolume { image, regions }
    }
}

/// Draws and applies one augmentation.
pub fn augment<R: Rng + ?Sized>(volume: &LabeledVolume, rng: &mut R) -> LabeledVolume {
    Augmentation::draw(rng, volume.image.shape().channels()).apply(volume)
}

fn flip(t: &Tensor, axes: [bool; 3]) -> Tensor {
    if !axes.iter().any(|&f| f) {
        return t.clone();
    }
    let s = t.shape();
    let [d, h, w] = s.spatial();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            let src = t.channel(b, c);
            let dst = out.channel_mut(b, c);
            for z in 0..d {
                let sz = if axes[0] { d - 1 - z } else { z };
                for y in 0..h {
                    let sy = if axes[1] { h - 1 - y } else { y };
                    for x in 0..w {
                        let sx = if axes[2] { w - 1 - x } else { x };
                        dst[(z * h + y) * w + x] = src[(sz * h + sy) * w + sx];
                    }
                }
            }
        }
    }
    out
}

/// Rotates by `angle_deg` and scales by `scale` about the centre of each
/// slice; samples falling outside read as zero. Bilinear, or nearest
/// neighbour when `nearest` (masks).
fn rotate_in_plane(t: &Tensor, angle_deg: f64, scale: f64, nearest: bool) -> Tensor {
    let s = t.shape();
    let [d, h, w] = s.spatial();
    let (sin, cos) = (angle_deg * PI / 180.0).sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // inverse map from output to source position
    let source = |y: usize, x: usize| {
        let (dy, dx) = ((y as f64 - cy) / scale, (x as f64 - cx) / scale);
        (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
    };
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch() {
        for c in 0..s.channels() {
            let src = t.channel(b, c);
            let dst = out.channel_mut(b, c);
            let at = |z: usize, y: isize, x: isize| -> f64 {
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    0.0
                } else {
                    src[(z * h + y as usize) * w + x as usize] as f64
                }
            };
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = source(y, x);
                        let v = if nearest {
                            at(z, sy.round() as isize, sx.round() as isize)
                        } else {
                            let (y0, x0) = (sy.floor(), sx.floor());
                            let (fy, fx) = (sy - y0, sx - x0);
                            let (y0, x0) = (y0 as isize, x0 as isize);
                            (1.0 - fy) * ((1.0 - fx) * at(z, y0, x0) + fx * at(z, y0, x0 + 1))
                                + fy * ((1.0 - fx) * at(z, y0 + 1, x0) + fx * at(z, y0 + 1, x0 + 1))
                        };
                        dst[(z * h + y) * w + x] = v as f32;
                    }
                }
            }
        }
    }
    out
}

/// Seeded shuffle of `0..n` into training and validation indices; the
/// validation part gets `round(n · fraction)` items, at least one when
/// `n ≥ 2`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = if n < 2 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    };
    let train = idx.split_off(val);
    (train, idx)
}

/// Writes `NNNN.image.rvt` / `NNNN.regions.rvt` per volume and an index
/// listing both file names per line.
pub fn save_dataset(dir: impl AsRef<Path>, volumes: &[LabeledVolume]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (i, v) in volumes.iter().enumerate() {
        let (img, reg) = (format!("{i:04}.image.rvt"), format!("{i:04}.regions.rvt"));
        io::save(dir.join(&img), &v.image)?;
        io::save(dir.join(&reg), &v.regions)?;
        let _ = writeln!(index, "{img}\t{reg}");
    }
    std::fs::write(dir.join(INDEX_FILE), index)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledVolume>> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX_FILE);
    let index = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", index_path.display())))?;
    let mut out = Vec::new();
    for (n, line) in index
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let (img, reg) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!(
                "{} line {}: expected two names",
                index_path.display(),
                n + 1
            ))
        })?;
        let v = LabeledVolume::new(
            io::load(dir.join(img.trim()))?,
            io::load(dir.join(reg.trim()))?,
        )?;
        if !v.is_nested() {
            return Err(Error::Dataset(format!("{img}: regions are not nested")));
        }
        out.push(v);
    }
    Ok(out)
}
