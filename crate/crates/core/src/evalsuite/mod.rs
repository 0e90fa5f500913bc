//! Evaluation on a frozen model: reconstruction metrics, the layer-wise
//! Lasso probe, and latent manipulations, plus the writers for their
//! JSON reports and image grids.

mod manipulate;
mod metrics;
mod probe;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use manipulate::{
    attribute_sensitivity, conditional_resample, sensitivity_scan, style_mix, ResampleMode, SensitivityReport,
    SENSITIVITY_FACTORS,
};
pub use metrics::{
    data_range, fid_surrogate, frechet_distance, psnr, ssim, FeatureExtractor, FrechetDistance, COVARIANCE_RIDGE,
    FEATURE_WIDTHS, PSNR_CAP_DB, SSIM_WINDOW,
};
pub use probe::{
    informativeness_probe, lasso_fit, posterior_mean_features, probe_arrays, r2_score, LassoConfig, LassoFit,
    LayerProbe, ProbeReport, Standardizer,
};

use crate::error::{HvaeError, Result};
use crate::model::Hvae;
use crate::phantom::SplitData;
use crate::rng::NoiseSource;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-image negative Gaussian log-likelihood of the posterior-mean
    /// reconstruction, in nats; lower is better.
    pub neg_recon_ll: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Fréchet distance between features of test images and of their
    /// reconstructions.
    pub fid_surrogate: f64,
    pub fid_regularized: bool,
    pub feature_seed: u64,
    pub n_recon_ll: usize,
    pub n_psnr: usize,
    pub n_ssim: usize,
    pub n_fid: usize,
}

/// Posterior-mean reconstructions of a split, in chunks.
pub fn reconstruct_split(model: &Hvae<f32>, data: &SplitData) -> Result<Tensor<f32>> {
    const CHUNK: usize = 64;
    let n = data.len();
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let x = data.images.select(&idx);
        parts.push(model.reconstruct(&x, &mut NoiseSource::new(0, 0).with_scale(0.0))?);
    }
    Tensor::stack(&parts.iter().collect::<Vec<_>>())
}

pub fn evaluate_reconstruction(model: &Hvae<f32>, data: &SplitData, feature_seed: u64) -> Result<MetricsReport> {
    let n = data.len();
    if n < 2 {
        return Err(HvaeError::Data("metrics need at least 2 images".into()));
    }
    let recon = reconstruct_split(model, data)?;
    let log_std = model
        .params()
        .get("lik.log_std")
        .map(|t| t.data()[0] as f64)
        .ok_or_else(|| HvaeError::contract("model has no likelihood scale"))?;
    let s = data.images.shape();
    let (h, w) = (s[1], s[2]);
    let per = data.images.per_item();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let inv_var = (-2.0 * log_std).exp();
    let (mut nll, mut ps, mut ss) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x: Vec<f64> = data.images.item(i).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = recon.item(i).iter().map(|&v| v as f64).collect();
        nll += x
            .iter()
            .zip(&y)
            .map(|(a, b)| 0.5 * (a - b) * (a - b) * inv_var + log_std + half_log_2pi)
            .sum::<f64>();
        let r = data_range(&x);
        ps += psnr(&x, &y, r)?;
        ss += ssim(&x, &y, h, w, r)?;
    }
    debug_assert_eq!(per, h * w);
    let fid = fid_surrogate(&data.images.cast(), &recon.cast(), feature_seed)?;
    Ok(MetricsReport {
        neg_recon_ll: nll / n as f64,
        psnr: ps / n as f64,
        ssim: ss / n as f64,
        fid_surrogate: fid.distance,
        fid_regularized: fid.regularized,
        feature_seed,
        n_recon_ll: n,
        n_psnr: n,
        n_ssim: n,
        n_fid: n,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HvaeError::io(path, e))
}

/// Raw little-endian `f32` dump, no header.
pub fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| HvaeError::io(path, e))
}

/// Tiles single-channel NHWC batches into a grid, one batch per row, with
/// a one-pixel gap. Rows may hold different numbers of images.
pub fn tile_grid(rows: &[Tensor<f32>]) -> Result<(usize, usize, Vec<f32>)> {
    let first = rows.first().ok_or_else(|| HvaeError::contract("grid needs at least one row"))?;
    let s = first.shape();
    if s.len() != 4 || s[3] != 1 {
        return Err(HvaeError::contract(format!("grid rows must be [n, h, w, 1], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if rows.iter().any(|r| r.shape()[1..] != s[1..]) {
        return Err(HvaeError::contract("grid rows must share image size"));
    }
    let cols = rows.iter().map(|r| r.batch()).max().unwrap_or(0);
    let gw = cols * (w + 1) - 1;
    let gh = rows.len() * (h + 1) - 1;
    let mut px = vec![f32::NAN; gw * gh];
    for (ri, r) in rows.iter().enumerate() {
        for ci in 0..r.batch() {
            let img = r.item(ci);
            for y in 0..h {
                let dst = (ri * (h + 1) + y) * gw + ci * (w + 1);
                px[dst..dst + w].copy_from_slice(&img[y * w..(y + 1) * w]);
            }
        }
    }
    Ok((gw, gh, px))
}

/// 8-bit binary PGM of a grid after min-max normalisation over the
/// whole grid; gaps render black.
pub fn write_pgm_grid(path: &Path, rows: &[Tensor<f32>]) -> Result<()> {
    let (w, h, px) = tile_grid(rows)?;
    let (lo, hi) = px
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(px.iter().map(|&v| {
        if v.is_finite() {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, bytes).map_err(|e| HvaeError::io(path, e))
}
