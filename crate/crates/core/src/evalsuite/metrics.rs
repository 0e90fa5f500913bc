//! Pairwise image metrics and the Fréchet feature distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{HvaeError, Result};
use crate::kernels::{conv2d_forward, ConvGeom};
use crate::rng::{normal_tensor, stream_rng, streams};
use crate::tensor::Tensor;

/// Reported PSNR when the two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 7;
/// Added to both covariances when either is numerically singular.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

fn check_len(op: &'static str, x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.is_empty() {
        return Err(HvaeError::Shape {
            op,
            expected: vec![x.len()],
            actual: vec![y.len()],
        });
    }
    Ok(())
}

/// Max minus min of `reference`; a flat image falls back to 1.
pub fn data_range(reference: &[f64]) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let r = hi - lo;
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

pub fn psnr(x: &[f64], y: &[f64], data_range: f64) -> Result<f64> {
    check_len("psnr", x, y)?;
    if !(data_range > 0.0) {
        return Err(HvaeError::contract("psnr data_range must be > 0"));
    }
    let mse = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over every 7×7 window fully inside a single-channel
/// `height × width` image, with sample (n−1) local variances.
pub fn ssim(x: &[f64], y: &[f64], height: usize, width: usize, data_range: f64) -> Result<f64> {
    check_len("ssim", x, y)?;
    if x.len() != height * width {
        return Err(HvaeError::Shape {
            op: "ssim",
            expected: vec![height, width],
            actual: vec![x.len()],
        });
    }
    let k = SSIM_WINDOW;
    if height < k || width < k {
        return Err(HvaeError::contract(format!("ssim needs at least {k}x{k} pixels, got {height}x{width}")));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=height - k {
        for j in 0..=width - k {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in i..i + k {
                for c in j..j + k {
                    let a = x[r * width + c];
                    let b = y[r * width + c];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx - n * mx * mx) / (n - 1.0);
            let vy = (syy - n * my * my) / (n - 1.0);
            let cxy = (sxy - n * mx * my) / (n - 1.0);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrechetDistance {
    pub distance: f64,
    /// True when the covariance ridge had to be added.
    pub regularized: bool,
}

fn mean_and_cov(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows() as f64;
    let mean = rows.row_mean().transpose();
    let mut centered = rows.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let max = e.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    e.eigenvalues.iter().any(|&v| v <= 1e-12 * max.max(1.0))
}

/// `‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})` over row-sample matrices.
/// The trace of the cross term is taken as `Tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`,
/// which keeps every square root symmetric.
pub fn frechet_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<FrechetDistance> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(HvaeError::contract("frechet distance needs at least 2 samples per set"));
    }
    if a.ncols() != b.ncols() {
        return Err(HvaeError::Shape {
            op: "frechet_distance",
            expected: vec![a.ncols()],
            actual: vec![b.ncols()],
        });
    }
    let (ma, mut ca) = mean_and_cov(a);
    let (mb, mut cb) = mean_and_cov(b);
    let regularized = is_singular(&ca) || is_singular(&cb);
    if regularized {
        let ridge = DMatrix::identity(ca.nrows(), ca.ncols()) * COVARIANCE_RIDGE;
        ca += &ridge;
        cb += &ridge;
    }
    let sa = sym_sqrt(&ca);
    let cross = sym_sqrt(&(&sa * &cb * &sa)).trace();
    let d = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(FrechetDistance {
        distance: d.max(0.0),
        regularized,
    })
}

/// Fixed random feature map: three 3×3 stride-2 convolutions with SiLU,
/// then a global average pool. Never trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<(Vec<f64>, usize, usize)>,
}

pub const FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::FEATURES);
        let mut cin = 1;
        let mut layers = Vec::new();
        for &cout in &FEATURE_WIDTHS {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let w: Tensor<f64> = normal_tensor(&mut rng, &[3, 3, cin, cout]);
            layers.push((w.data().iter().map(|v| v * std).collect(), cin, cout));
            cin = cout;
        }
        FeatureExtractor { layers }
    }

    pub fn dim(&self) -> usize {
        FEATURE_WIDTHS[FEATURE_WIDTHS.len() - 1]
    }

    /// One feature row per image of an NHWC single-channel batch.
    pub fn features(&self, images: &Tensor<f64>) -> Result<DMatrix<f64>> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 1 {
            return Err(HvaeError::contract(format!("features expect [n, h, w, 1], got {s:?}")));
        }
        let (n, mut h, mut w) = (s[0], s[1], s[2]);
        let mut x = images.data().to_vec();
        for (weight, cin, cout) in &self.layers {
            let geom = ConvGeom {
                n,
                h,
                w,
                cin: *cin,
                cout: *cout,
                k: 3,
                stride: 2,
                pad: 1,
            };
            let bias = vec![0.0; *cout];
            x = conv2d_forward(&geom, &x, weight, &bias);
            for v in &mut x {
                *v /= 1.0 + (-*v).exp();
            }
            (h, w) = geom.out_hw();
        }
        let c = self.dim();
        let per = h * w;
        Ok(DMatrix::from_fn(n, c, |i, j| {
            (0..per).map(|p| x[(i * per + p) * c + j]).sum::<f64>() / per as f64
        }))
    }
}

/// Fréchet distance between feature sets of two image batches.
pub fn fid_surrogate(real: &Tensor<f64>, generated: &Tensor<f64>, feature_seed: u64) -> Result<FrechetDistance> {
    let fx = FeatureExtractor::new(feature_seed);
    frechet_distance(&fx.features(real)?, &fx.features(generated)?)
}
