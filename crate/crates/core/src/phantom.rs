//! Synthetic 2-D brain phantoms with known anatomy and lesion factors.
//!
//! Anatomy: an elliptical skull ring, a cortical band whose inner boundary
//! is modulated by sulcal sinusoids, white matter inside it, and a mirrored
//! pair of dark ventricles. Lesions are hyperintense discs whose centres are
//! rejection-sampled inside white matter and outside the ventricles; the
//! lesion mask is clipped to that same valid region.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HvaeError, Result};
use crate::rng::{stream_rng, streams};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_RESOLUTION: usize = 64;
const MAX_PLACEMENT_TRIES: usize = 10_000;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub boost: f64,
}

/// Ground-truth generative factors of one phantom. Lengths are in pixels
/// of the resolution the record was sampled for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub resolution: usize,
    pub skull_axes: (f64, f64),
    pub ventricle_scale: f64,
    pub ventricle_angle: f64,
    pub sulcal_freq: f64,
    pub sulcal_phase: f64,
    pub tissue_base: f64,
    pub texture_seed: u64,
    pub lesion_count: usize,
    pub lesion_params: Vec<Lesion>,
    /// Lesion pixels in the rendered mask.
    pub lesion_area: usize,
}

/// Closed intervals the factors are drawn from. Radii are given for a
/// 64-pixel image and scale with resolution (never below one pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorRanges {
    /// Skull semi-axes as fractions of the image side.
    pub skull_a: (f64, f64),
    pub skull_b: (f64, f64),
    pub ventricle_scale: (f64, f64),
    pub ventricle_angle: (f64, f64),
    pub sulcal_freq: (f64, f64),
    pub tissue_base: (f64, f64),
    pub lesion_rate: f64,
    pub max_lesions: usize,
    pub lesion_radius_64: (f64, f64),
    pub lesion_boost: (f64, f64),
}

impl Default for FactorRanges {
    fn default() -> Self {
        FactorRanges {
            skull_a: (0.38, 0.45),
            skull_b: (0.43, 0.48),
            ventricle_scale: (0.7, 1.3),
            ventricle_angle: (-0.35, 0.35),
            sulcal_freq: (6.0, 12.0),
            tissue_base: (0.8, 1.2),
            lesion_rate: 3.0,
            max_lesions: 8,
            lesion_radius_64: (1.0, 3.0),
            lesion_boost: (1.5, 3.0),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Anatomical regions evaluated at pixel centres.
#[derive(Clone, Debug, PartialEq)]
pub struct Regions {
    pub resolution: usize,
    pub head: Vec<bool>,
    pub brain: Vec<bool>,
    pub white_matter: Vec<bool>,
    pub ventricles: Vec<bool>,
}

impl Regions {
    /// Pixels where lesions may occur: white matter outside the ventricles.
    pub fn valid(&self, i: usize) -> bool {
        self.white_matter[i] && !self.ventricles[i]
    }
}

const SKULL_THICKNESS: f64 = 0.12;
const WM_RADIUS: f64 = 0.7;
const SULCAL_DEPTH: f64 = 0.06;

/// Continuous anatomy shared by region tests and rendering.
struct Anatomy<'a> {
    f: &'a FactorRecord,
    c: f64,
}

impl<'a> Anatomy<'a> {
    fn new(f: &'a FactorRecord) -> Self {
        Anatomy {
            f,
            c: f.resolution as f64 / 2.0,
        }
    }

    /// Normalised elliptic radius and polar angle of a point.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (a, b) = self.f.skull_axes;
        let (u, v) = ((x - self.c) / a, (y - self.c) / b);
        ((u * u + v * v).sqrt(), v.atan2(u))
    }

    fn wm_boundary(&self, theta: f64) -> f64 {
        WM_RADIUS + SULCAL_DEPTH * (self.f.sulcal_freq * theta + self.f.sulcal_phase).sin()
    }

    fn in_ventricles(&self, x: f64, y: f64) -> bool {
        let s = self.f.ventricle_scale;
        let r = self.f.resolution as f64;
        let (ax, ay) = (0.06 * r * s, 0.15 * r * s);
        let (dx, dy) = (0.08 * r * s, -0.02 * r);
        for side in [-1.0, 1.0] {
            let ang = side * self.f.ventricle_angle;
            let (px, py) = (x - (self.c + side * dx), y - (self.c + dy));
            let (cs, sn) = (ang.cos(), ang.sin());
            let (u, v) = (cs * px + sn * py, -sn * px + cs * py);
            if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                return true;
            }
        }
        false
    }

    fn regions_at(&self, x: f64, y: f64) -> (bool, bool, bool, bool) {
        let (rho, theta) = self.polar(x, y);
        let head = rho <= 1.0;
        let brain = rho < 1.0 - SKULL_THICKNESS;
        let wm = brain && rho < self.wm_boundary(theta);
        let vent = brain && self.in_ventricles(x, y);
        (head, brain, wm, vent)
    }

    /// Lesion-free intensity before texture.
    fn tissue(&self, x: f64, y: f64) -> f64 {
        let (head, brain, wm, vent) = self.regions_at(x, y);
        let base = self.f.tissue_base;
        if vent {
            0.15
        } else if wm {
            base
        } else if brain {
            let (_, theta) = self.polar(x, y);
            let ridge = 0.5 + 0.5 * (2.0 * self.f.sulcal_freq * theta + self.f.sulcal_phase).cos();
            0.55 * base + 0.15 * ridge
        } else if head {
            1.6
        } else {
            0.0
        }
    }
}

pub fn regions(f: &FactorRecord) -> Regions {
    let r = f.resolution;
    let an = Anatomy::new(f);
    let mut out = Regions {
        resolution: r,
        head: vec![false; r * r],
        brain: vec![false; r * r],
        white_matter: vec![false; r * r],
        ventricles: vec![false; r * r],
    };
    for y in 0..r {
        for x in 0..r {
            let (h, b, w, v) = an.regions_at(x as f64 + 0.5, y as f64 + 0.5);
            let i = y * r + x;
            out.head[i] = h;
            out.brain[i] = b;
            out.white_matter[i] = w;
            out.ventricles[i] = v;
        }
    }
    out
}

/// Fraction of pixel `(x, y)` covered by a disc, by supersampling.
fn disc_coverage(l: &Lesion, x: usize, y: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            if (px - l.cx).powi(2) + (py - l.cy).powi(2) <= l.radius * l.radius {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Per-pixel lesion coverage (max over discs) restricted to the valid region.
fn lesion_coverage(f: &FactorRecord, reg: &Regions) -> Vec<f64> {
    let r = f.resolution;
    let mut cov = vec![0.0f64; r * r];
    for l in &f.lesion_params {
        let x0 = (l.cx - l.radius).floor().max(0.0) as usize;
        let y0 = (l.cy - l.radius).floor().max(0.0) as usize;
        let x1 = ((l.cx + l.radius).ceil() as usize).min(r - 1);
        let y1 = ((l.cy + l.radius).ceil() as usize).min(r - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let i = y * r + x;
                if reg.valid(i) {
                    cov[i] = cov[i].max(disc_coverage(l, x, y));
                }
            }
        }
    }
    cov
}

fn lesion_mask(cov: &[f64]) -> Vec<u8> {
    cov.iter().map(|&c| u8::from(c >= 0.5)).collect()
}

/// Poisson draw truncated to `[0, max]` by rejection.
fn truncated_poisson(rng: &mut ChaCha8Rng, rate: f64, max: usize) -> usize {
    let p = Poisson::new(rate).expect("positive rate");
    loop {
        let k: f64 = p.sample(rng);
        if k as usize <= max {
            return k as usize;
        }
    }
}

/// Draws a full factor record for a `resolution`-pixel image.
pub fn sample_factors(rng: &mut ChaCha8Rng, resolution: usize, ranges: &FactorRanges) -> Result<FactorRecord> {
    let count = truncated_poisson(rng, ranges.lesion_rate, ranges.max_lesions);
    sample_factors_with_count(rng, resolution, ranges, count)
}

/// As [`sample_factors`] with a forced lesion count.
pub fn sample_factors_with_count(
    rng: &mut ChaCha8Rng,
    resolution: usize,
    ranges: &FactorRanges,
    lesion_count: usize,
) -> Result<FactorRecord> {
    if resolution < 8 {
        return Err(HvaeError::Generation(format!("resolution {resolution} too small")));
    }
    let r = resolution as f64;
    let mut f = FactorRecord {
        resolution,
        skull_axes: (uniform(rng, ranges.skull_a) * r, uniform(rng, ranges.skull_b) * r),
        ventricle_scale: uniform(rng, ranges.ventricle_scale),
        ventricle_angle: uniform(rng, ranges.ventricle_angle),
        sulcal_freq: uniform(rng, ranges.sulcal_freq).round(),
        sulcal_phase: rng.gen_range(0.0..2.0 * PI),
        tissue_base: uniform(rng, ranges.tissue_base),
        texture_seed: rng.gen(),
        lesion_count,
        lesion_params: Vec::with_capacity(lesion_count),
        lesion_area: 0,
    };
    let reg = regions(&f);
    let valid: Vec<usize> = (0..resolution * resolution).filter(|&i| reg.valid(i)).collect();
    let scale = r / DEFAULT_RESOLUTION as f64;
    for _ in 0..lesion_count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x = rng.gen_range(0..resolution);
            let y = rng.gen_range(0..resolution);
            if reg.valid(y * resolution + x) {
                placed = Some((x, y));
                break;
            }
        }
        let (x, y) = placed.ok_or_else(|| {
            HvaeError::Generation(format!(
                "no valid lesion site after {MAX_PLACEMENT_TRIES} tries ({} valid pixels)",
                valid.len()
            ))
        })?;
        let radius = (uniform(rng, ranges.lesion_radius_64) * scale).max(1.0);
        f.lesion_params.push(Lesion {
            cx: x as f64 + 0.5,
            cy: y as f64 + 0.5,
            radius,
            boost: uniform(rng, ranges.lesion_boost),
        });
    }
    let mask = lesion_mask(&lesion_coverage(&f, &reg));
    f.lesion_area = mask.iter().map(|&m| m as usize).sum();
    Ok(f)
}

/// One rendered phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    /// Row-major, standardised to zero mean and unit variance.
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub factors: FactorRecord,
}

/// Smooth low-amplitude texture: a few random plane waves.
fn texture(seed: u64, r: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let ang = rng.gen_range(0.0..2.0 * PI);
            let freq = rng.gen_range(2.0..8.0) * 2.0 * PI / r as f64;
            (freq * ang.cos(), freq * ang.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.01..0.03))
        })
        .collect();
    (0..r * r)
        .map(|i| {
            let (x, y) = ((i % r) as f64, (i / r) as f64);
            waves.iter().map(|&(kx, ky, ph, amp)| amp * (kx * x + ky * y + ph).sin()).sum()
        })
        .collect()
}

pub fn render(f: &FactorRecord) -> Result<PhantomSample> {
    let r = f.resolution;
    let an = Anatomy::new(f);
    let reg = regions(f);
    let cov = lesion_coverage(f, &reg);
    let mask = lesion_mask(&cov);
    let area: usize = mask.iter().map(|&m| m as usize).sum();
    if area != f.lesion_area {
        return Err(HvaeError::Generation(format!(
            "rendered lesion area {area} differs from record {}",
            f.lesion_area
        )));
    }
    if mask.iter().enumerate().any(|(i, &m)| m == 1 && !reg.valid(i)) {
        return Err(HvaeError::Generation("lesion pixel outside the valid region".into()));
    }
    let tex = texture(f.texture_seed, r);
    let mut img = vec![0.0f64; r * r];
    for y in 0..r {
        for x in 0..r {
            let i = y * r + x;
            let mut v = an.tissue(x as f64 + 0.5, y as f64 + 0.5);
            if reg.head[i] {
                v += tex[i];
            }
            if cov[i] > 0.0 {
                let boost = f
                    .lesion_params
                    .iter()
                    .map(|l| l.boost * disc_coverage(l, x, y))
                    .fold(0.0, f64::max);
                v += boost;
            }
            img[i] = v;
        }
    }
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    Ok(PhantomSample {
        image: img.iter().map(|v| ((v - mean) / sd) as f32).collect(),
        mask,
        factors: f.clone(),
    })
}

/// Factors and rendering of sample `index` of a dataset seeded by `seed`.
pub fn generate_sample(seed: u64, index: usize, resolution: usize, ranges: &FactorRanges) -> Result<PhantomSample> {
    let mut rng = stream_rng(seed, streams::PHANTOM_BASE + index as u64);
    render(&sample_factors(&mut rng, resolution, ranges)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 60/20/20 split of `0..n`: validation and test get `floor(n / 5)` each,
/// training gets the remainder, assigned after a seeded shuffle.
pub fn split_indices(n: usize, seed: u64) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, streams::SPLIT));
    let k = n / 5;
    let mut val = idx[..k].to_vec();
    let mut test = idx[k..2 * k].to_vec();
    let mut train = idx[2 * k..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub n: usize,
    pub resolution: usize,
    pub seed: u64,
    pub splits: Splits,
    pub samples: Vec<FactorRecord>,
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("img_{i:06}.f32"))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("msk_{i:06}.u8"))
}

/// Generates `n` phantoms into `out_dir` and writes `manifest.json`.
pub fn make_dataset(n: usize, seed: u64, resolution: usize, out_dir: &Path) -> Result<Manifest> {
    make_dataset_with(n, seed, resolution, &FactorRanges::default(), out_dir)
}

pub fn make_dataset_with(
    n: usize,
    seed: u64,
    resolution: usize,
    ranges: &FactorRanges,
    out_dir: &Path,
) -> Result<Manifest> {
    if n < 5 {
        return Err(HvaeError::Data(format!("dataset needs n >= 5, got {n}")));
    }
    fs::create_dir_all(out_dir).map_err(|e| HvaeError::io(out_dir, e))?;
    // Every index owns its stream, so parallel output equals serial output.
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(seed, i, resolution, ranges)?;
            let bytes: Vec<u8> = s.image.iter().flat_map(|v| v.to_le_bytes()).collect();
            let p = image_path(out_dir, i);
            fs::write(&p, bytes).map_err(|e| HvaeError::io(&p, e))?;
            let p = mask_path(out_dir, i);
            fs::write(&p, &s.mask).map_err(|e| HvaeError::io(&p, e))?;
            Ok(s.factors)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: DATASET_VERSION,
        n,
        resolution,
        seed,
        splits: split_indices(n, seed),
        samples,
    };
    let p = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&p, text).map_err(|e| HvaeError::io(&p, e))?;
    Ok(manifest)
}

/// Images, masks and factors of one split, as NHWC tensors.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub factors: Vec<FactorRecord>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Rows `rows` of this split.
    pub fn subset(&self, rows: &[usize]) -> SplitData {
        SplitData {
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
            images: self.images.select(rows),
            masks: self.masks.select(rows),
            factors: rows.iter().map(|&r| self.factors[r].clone()).collect(),
        }
    }

    pub fn lesion_areas(&self) -> Vec<f64> {
        self.factors.iter().map(|f| f.lesion_area as f64).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let p = dir.join("manifest.json");
        let text = fs::read_to_string(&p).map_err(|e| HvaeError::io(&p, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| HvaeError::format(&p, e.to_string()))?;
        if manifest.version != DATASET_VERSION {
            return Err(HvaeError::format(&p, format!("unsupported version {}", manifest.version)));
        }
        if manifest.samples.len() != manifest.n {
            return Err(HvaeError::format(&p, "sample count does not match n"));
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn resolution(&self) -> usize {
        self.manifest.resolution
    }

    pub fn read_image(&self, i: usize) -> Result<Vec<f32>> {
        let p = image_path(&self.dir, i);
        let bytes = fs::read(&p).map_err(|e| HvaeError::io(&p, e))?;
        let r = self.resolution();
        if bytes.len() != r * r * 4 {
            return Err(HvaeError::format(&p, format!("expected {} bytes, found {}", r * r * 4, bytes.len())));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_mask(&self, i: usize) -> Result<Vec<u8>> {
        let p = mask_path(&self.dir, i);
        let bytes = fs::read(&p).map_err(|e| HvaeError::io(&p, e))?;
        let r = self.resolution();
        if bytes.len() != r * r {
            return Err(HvaeError::format(&p, format!("expected {} bytes, found {}", r * r, bytes.len())));
        }
        Ok(bytes)
    }

    pub fn load(&self, indices: &[usize]) -> Result<SplitData> {
        let r = self.resolution();
        let mut img = Vec::with_capacity(indices.len() * r * r);
        let mut msk = Vec::with_capacity(indices.len() * r * r);
        let mut factors = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.manifest.n {
                return Err(HvaeError::Data(format!("sample {i} out of range")));
            }
            img.extend(self.read_image(i)?);
            msk.extend(self.read_mask(i)?.into_iter().map(f32::from));
            factors.push(self.manifest.samples[i].clone());
        }
        let shape = [indices.len(), r, r, 1];
        Ok(SplitData {
            indices: indices.to_vec(),
            images: Tensor::from_vec(&shape, img)?,
            masks: Tensor::from_vec(&shape, msk)?,
            factors,
        })
    }

    pub fn train(&self) -> Result<SplitData> {
        self.load(&self.manifest.splits.train)
    }

    pub fn val(&self) -> Result<SplitData> {
        self.load(&self.manifest.splits.val)
    }

    pub fn test(&self) -> Result<SplitData> {
        self.load(&self.manifest.splits.test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let s = split_indices(100, 7);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        let s = split_indices(5, 7);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 1, 1));
    }

    #[test]
    fn zero_lesions_give_empty_mask() {
        let mut rng = stream_rng(3, 0);
        let f = sample_factors_with_count(&mut rng, 64, &FactorRanges::default(), 0).unwrap();
        assert!(f.lesion_params.is_empty());
        assert_eq!(f.lesion_area, 0);
        let s = render(&f).unwrap();
        assert!(s.mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn render_is_standardised() {
        let s = generate_sample(11, 0, 64, &FactorRanges::default()).unwrap();
        let n = s.image.len() as f64;
        let mean = s.image.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = s.image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}
