//! Latent manipulations on a frozen model: per-group sensitivity scans,
//! style mixing between two inputs and conditional resampling.

use serde::{Deserialize, Serialize};

use crate::error::{HvaeError, Result};
use crate::model::{Hvae, Source};
use crate::rng::NoiseSource;
use crate::tensor::Tensor;

pub const SENSITIVITY_FACTORS: [f64; 3] = [0.5, 1.5, 2.0];

fn mean_mode() -> NoiseSource {
    NoiseSource::new(0, 0).with_scale(0.0)
}

/// Per-sample sensitivity of the output to scaling group `layer`: mean
/// absolute change inside the lesion mask minus outside, averaged over
/// `factors`. Samples with an empty (or full) mask give `None`.
pub fn attribute_sensitivity(
    model: &Hvae<f32>,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    layer: usize,
    factors: &[f64],
) -> Result<Vec<Option<f64>>> {
    if images.shape() != masks.shape() {
        return Err(HvaeError::Shape {
            op: "attribute_sensitivity",
            expected: images.shape().to_vec(),
            actual: masks.shape().to_vec(),
        });
    }
    if factors.is_empty() {
        return Err(HvaeError::contract("sensitivity needs at least one scale factor"));
    }
    let latents = model.infer(images, &mut mean_mode())?.latents;
    let base = model.decode_latents(&latents)?;
    let per = images.per_item();
    let mut sums = vec![0.0; images.batch()];
    for &f in factors {
        let moved = model.decode_latents(&latents.scale_layer(layer, f)?)?;
        for (i, s) in sums.iter_mut().enumerate() {
            let (mut din, mut nin, mut dout, mut nout) = (0.0, 0usize, 0.0, 0usize);
            for j in i * per..(i + 1) * per {
                let d = (moved.data()[j] - base.data()[j]).abs() as f64;
                if masks.data()[j] > 0.5 {
                    din += d;
                    nin += 1;
                } else {
                    dout += d;
                    nout += 1;
                }
            }
            if nin > 0 && nout > 0 {
                *s += din / nin as f64 - dout / nout as f64;
            } else {
                *s = f64::NAN;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|s| (!s.is_nan()).then(|| s / factors.len() as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub factors: Vec<f64>,
    /// Mean score per group over scored samples.
    pub mean_per_layer: Vec<f64>,
    /// Per sample, the group with the largest score (`None` if skipped).
    pub argmax: Vec<Option<usize>>,
    pub scored: usize,
    pub skipped: usize,
    /// Layer the argmax is compared against, if any.
    pub reference_layer: Option<usize>,
    /// Fraction of scored samples whose argmax equals `reference_layer`.
    pub argmax_match_fraction: Option<f64>,
}

/// Sensitivity scan over every group for a batch.
pub fn sensitivity_scan(
    model: &Hvae<f32>,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    factors: &[f64],
    reference_layer: Option<usize>,
) -> Result<SensitivityReport> {
    let n = images.batch();
    let levels = model.levels();
    let mut scores: Vec<Vec<Option<f64>>> = Vec::with_capacity(levels + 1);
    for l in 0..=levels {
        scores.push(attribute_sensitivity(model, images, masks, l, factors)?);
    }
    let mut argmax = Vec::with_capacity(n);
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (l, s) in scores.iter().enumerate() {
            if let Some(v) = s[i] {
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((l, v));
                }
            }
        }
        argmax.push(best.map(|(l, _)| l));
    }
    let scored = argmax.iter().filter(|a| a.is_some()).count();
    let mean_per_layer = scores
        .iter()
        .map(|s| {
            let v: Vec<f64> = s.iter().flatten().copied().collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    let argmax_match_fraction = match reference_layer {
        Some(r) if scored > 0 => Some(argmax.iter().filter(|a| **a == Some(r)).count() as f64 / scored as f64),
        _ => None,
    };
    Ok(SensitivityReport {
        factors: factors.to_vec(),
        mean_per_layer,
        argmax,
        scored,
        skipped: n - scored,
        reference_layer,
        argmax_match_fraction,
    })
}

fn check_layer_set(model: &Hvae<f32>, layers: &[usize]) -> Result<()> {
    let levels = model.levels();
    for (i, &l) in layers.iter().enumerate() {
        if l > levels {
            return Err(HvaeError::contract(format!("layer {l} out of range 0..={levels}")));
        }
        if layers[..i].contains(&l) {
            return Err(HvaeError::contract(format!("layer {l} listed twice")));
        }
    }
    Ok(())
}

/// Decodes with encoder deltas from `x_b` at `layers` and from `x_a`
/// elsewhere, in posterior-mean mode.
pub fn style_mix(model: &Hvae<f32>, x_a: &Tensor<f32>, x_b: &Tensor<f32>, layers: &[usize]) -> Result<Tensor<f32>> {
    check_layer_set(model, layers)?;
    if x_a.shape() != x_b.shape() {
        return Err(HvaeError::Shape {
            op: "style_mix",
            expected: x_a.shape().to_vec(),
            actual: x_b.shape().to_vec(),
        });
    }
    let da = model.encode(x_a)?;
    let db = model.encode(x_b)?;
    let sources: Vec<Source<f32>> = (0..=model.levels())
        .map(|l| {
            let d = if layers.contains(&l) { &db[l] } else { &da[l] };
            Source::Posterior(d.clone())
        })
        .collect();
    Ok(model.decode_sources(&sources, &mut mean_mode())?.reconstruction)
}

#[derive(Clone, Debug)]
pub enum ResampleMode<'a> {
    /// Keep every inferred group except `layer`, which is drawn from its
    /// conditional prior `draws` times.
    ResamplePathology { draws: usize, temperature: f64 },
    /// Keep `x`'s deltas at `layer`; take every other group from each donor.
    TransplantPathology { donors: Option<&'a Tensor<f32>> },
}

/// Conditional resampling around the pathology group `layer`. Returns one
/// image batch (same batch size as `x`) per draw or donor.
pub fn conditional_resample(
    model: &Hvae<f32>,
    x: &Tensor<f32>,
    layer: usize,
    mode: ResampleMode<'_>,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    check_layer_set(model, &[layer])?;
    let dx = model.encode(x)?;
    match mode {
        ResampleMode::ResamplePathology { draws, temperature } => {
            if !(temperature >= 0.0 && temperature.is_finite()) {
                return Err(HvaeError::contract(format!("temperature must be >= 0, got {temperature}")));
            }
            let mut out = Vec::with_capacity(draws);
            for i in 0..draws as u64 {
                let mut noise = NoiseSource::new(seed, i).with_scale(temperature);
                let mut sources: Vec<Source<f32>> = dx.iter().cloned().map(Source::PosteriorMean).collect();
                sources[layer] = if layer == 0 && model.variant().uses_vamprior() {
                    Source::Fixed(model.sample_top(x.batch(), temperature, &mut noise))
                } else {
                    Source::Prior
                };
                out.push(model.decode_sources(&sources, &mut noise)?.reconstruction);
            }
            Ok(out)
        }
        ResampleMode::TransplantPathology { donors } => {
            let donors = donors.ok_or_else(|| HvaeError::contract("transplant mode needs donor images"))?;
            let per = x.per_item();
            if donors.shape().len() != 4 || donors.per_item() != per {
                return Err(HvaeError::Shape {
                    op: "conditional_resample",
                    expected: x.shape().to_vec(),
                    actual: donors.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(donors.batch());
            for d in 0..donors.batch() {
                let donor = donors.select(&vec![d; x.batch()]);
                let dd = model.encode(&donor)?;
                let sources: Vec<Source<f32>> = (0..=model.levels())
                    .map(|l| Source::Posterior(if l == layer { dx[l].clone() } else { dd[l].clone() }))
                    .collect();
                out.push(model.decode_sources(&sources, &mut mean_mode())?.reconstruction);
            }
            Ok(out)
        }
    }
}
