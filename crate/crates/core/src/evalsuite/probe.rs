//! Layer-wise informativeness probe: a Lasso regressor from posterior-mean
//! latents to lesion area, scored by held-out R².

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{HvaeError, Result};
use crate::model::Hvae;
use crate::phantom::SplitData;
use crate::rng::NoiseSource;

#[derive(Clone, Debug, PartialEq)]
pub struct LassoConfig {
    pub alpha: f64,
    /// Stop once no coefficient moves by more than this in a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            alpha: 10.0,
            tol: 1e-6,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub sweeps: usize,
    pub converged: bool,
}

impl LassoFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + self.coef.iter().enumerate().map(|(j, w)| w * x[(i, j)]).sum::<f64>())
            .collect()
    }

    pub fn nonzero(&self) -> usize {
        self.coef.iter().filter(|w| **w != 0.0).count()
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on `(1/2n)‖y − Xw − b‖² + α‖w‖₁` with an
/// unpenalised intercept. Columns are centred internally.
pub fn lasso_fit(x: &DMatrix<f64>, y: &[f64], cfg: &LassoConfig) -> Result<LassoFit> {
    let (n, p) = x.shape();
    if n == 0 || y.len() != n {
        return Err(HvaeError::Shape {
            op: "lasso_fit",
            expected: vec![n],
            actual: vec![y.len()],
        });
    }
    if !(cfg.alpha >= 0.0) {
        return Err(HvaeError::contract("lasso alpha must be >= 0"));
    }
    let nf = n as f64;
    let x_mean: Vec<f64> = x.column_iter().map(|c| c.sum() / nf).collect();
    let y_mean = y.iter().sum::<f64>() / nf;
    let mut xc = x.clone();
    for (j, mut c) in xc.column_iter_mut().enumerate() {
        c.add_scalar_mut(-x_mean[j]);
    }
    let sq: Vec<f64> = xc.column_iter().map(|c| c.norm_squared() / nf).collect();
    let mut r: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut w = vec![0.0; p];
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut max_step = 0.0f64;
        for j in 0..p {
            if sq[j] == 0.0 {
                continue;
            }
            let col = xc.column(j);
            let col = col.as_slice();
            let rho = col.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / nf + sq[j] * w[j];
            let new = soft_threshold(rho, cfg.alpha) / sq[j];
            let d = new - w[j];
            if d != 0.0 {
                for (ri, ci) in r.iter_mut().zip(col) {
                    *ri -= d * ci;
                }
                w[j] = new;
                max_step = max_step.max(d.abs());
            }
        }
        if max_step <= cfg.tol {
            converged = true;
            break;
        }
    }
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(a, b)| a * b).sum::<f64>();
    Ok(LassoFit {
        coef: w,
        intercept,
        sweeps,
        converged,
    })
}

/// Per-column standardisation fitted on one matrix and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; zero-variance columns keep scale 1.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
        let scale = x
            .column_iter()
            .zip(&mean)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }
}

/// Coefficient of determination; a constant target is an error.
pub fn r2_score(y: &[f64], pred: &[f64]) -> Result<f64> {
    if y.len() != pred.len() || y.is_empty() {
        return Err(HvaeError::contract("r2_score needs equal, non-empty inputs"));
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if ss_tot == 0.0 {
        return Err(HvaeError::Data("probe target is constant, R² undefined".into()));
    }
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerProbe {
    pub r2: f64,
    pub nonzero: usize,
    pub converged: bool,
    pub standardizer: Standardizer,
}

/// Standardise on train, fit on train, score on test.
pub fn probe_arrays(
    train_x: &DMatrix<f64>,
    train_y: &[f64],
    test_x: &DMatrix<f64>,
    test_y: &[f64],
    cfg: &LassoConfig,
) -> Result<LayerProbe> {
    if train_y.iter().all(|v| *v == train_y[0]) {
        return Err(HvaeError::Data("probe target is constant on the training split".into()));
    }
    let standardizer = Standardizer::fit(train_x);
    let fit = lasso_fit(&standardizer.transform(train_x), train_y, cfg)?;
    let pred = fit.predict(&standardizer.transform(test_x));
    Ok(LayerProbe {
        r2: r2_score(test_y, &pred)?,
        nonzero: fit.nonzero(),
        converged: fit.converged,
        standardizer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: String,
    pub alpha: f64,
    /// Held-out R² per group, clipped to [−1, 1].
    pub r2_per_layer: Vec<f64>,
    pub r2_unclipped: Vec<f64>,
    pub nonzero_per_layer: Vec<usize>,
    pub converged_per_layer: Vec<bool>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Posterior means of every group, one row per image, in chunks.
pub fn posterior_mean_features(model: &Hvae<f32>, data: &SplitData) -> Result<Vec<DMatrix<f64>>> {
    const CHUNK: usize = 64;
    let n = data.len();
    let levels = model.levels();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); levels + 1];
    let mut widths = vec![0; levels + 1];
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let x = data.images.select(&idx);
        let inf = model.infer(&x, &mut NoiseSource::new(0, 0).with_scale(0.0))?;
        for (l, pair) in inf.layers.iter().enumerate() {
            widths[l] = pair.posterior.mean.per_item();
            rows[l].extend(pair.posterior.mean.data().iter().map(|&v| v as f64));
        }
    }
    Ok(rows
        .into_iter()
        .zip(widths)
        .map(|(r, w)| DMatrix::from_row_slice(n, w, &r))
        .collect())
}

pub fn informativeness_probe(model: &Hvae<f32>, train: &SplitData, test: &SplitData, cfg: &LassoConfig) -> Result<ProbeReport> {
    let ytr = train.lesion_areas();
    let yte = test.lesion_areas();
    let ftr = posterior_mean_features(model, train)?;
    let fte = posterior_mean_features(model, test)?;
    let mut report = ProbeReport {
        target: "lesion_area".into(),
        alpha: cfg.alpha,
        r2_per_layer: Vec::new(),
        r2_unclipped: Vec::new(),
        nonzero_per_layer: Vec::new(),
        converged_per_layer: Vec::new(),
        n_train: train.len(),
        n_test: test.len(),
    };
    for (a, b) in ftr.iter().zip(&fte) {
        let lp = probe_arrays(a, &ytr, b, &yte, cfg)?;
        report.r2_per_layer.push(lp.r2.clamp(-1.0, 1.0));
        report.r2_unclipped.push(lp.r2);
        report.nonzero_per_layer.push(lp.nonzero);
        report.converged_per_layer.push(lp.converged);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_is_odd_and_shrinks() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn constant_target_is_an_error() {
        let x = DMatrix::from_fn(4, 2, |i, j| (i + j) as f64);
        assert!(probe_arrays(&x, &[1.0; 4], &x, &[1.0; 4], &LassoConfig::default()).is_err());
    }
}
