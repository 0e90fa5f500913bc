//! Reference implementations and checks shared by the integration suites
//! and the acceptance runner. Each oracle is written from the defining
//! formula and never calls the library routine it checks.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use hvae_core::evalsuite::{probe_arrays, LassoConfig};
use hvae_core::gaussian::DiagonalGaussian;
use hvae_core::graph::Graph;
use hvae_core::model::{Hvae, ModelConfig, PriorKind, Variant};
use hvae_core::objectives::{compute_elbo, elbo_graph, ElboInputs, LayerDists, LossWeights};
use hvae_core::phantom::{generate_sample, FactorRanges, FactorRecord, SplitData};
use hvae_core::rng::NoiseSource;
use hvae_core::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// ---- Gaussian KL by quadrature ---------------------------------------------

pub fn log_pdf(x: f64, m: f64, s: f64) -> f64 {
    let u = (x - m) / s;
    -0.5 * u * u - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

pub fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
        return left + right + (left + right - whole) / 15.0;
    }
    adaptive(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + adaptive(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

/// `∫ q log(q / p)` by adaptive Simpson over `mq ± 14 sq`.
pub fn kl_quadrature(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let f = |x: f64| {
        let lq = log_pdf(x, mq, sq);
        lq.exp() * (lq - log_pdf(x, mp, sp))
    };
    let (a, b) = (mq - 14.0 * sq, mq + 14.0 * sq);
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(a, b, fa, fm, fb);
    adaptive(&f, a, b, fa, fm, fb, whole, 1e-12, 40)
}

// ---- metrics and probe ----------------------------------------------------

/// Window-by-window SSIM with two-pass statistics.
pub fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let k = 7;
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut vals = Vec::new();
    for i in 0..=h - k {
        for j in 0..=w - k {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for r in i..i + k {
                for c in j..j + k {
                    a.push(x[r * w + c]);
                    b.push(y[r * w + c]);
                }
            }
            let n = a.len() as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / (n - 1.0);
            let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (n - 1.0);
            let cab = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / (n - 1.0);
            vals.push(((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
        }
    }
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Lasso by plain cyclic coordinate descent that recomputes the full
/// residual for every coordinate; intercept handled by explicit centring.
pub fn lasso_oracle(x: &[Vec<f64>], y: &[f64], alpha: f64) -> (Vec<f64>, f64) {
    let n = x.len();
    let p = x[0].len();
    let xm: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let ym = y.iter().sum::<f64>() / n as f64;
    let mut w = vec![0.0; p];
    for _ in 0..100_000 {
        let mut moved = 0.0f64;
        for j in 0..p {
            let mut rho = 0.0;
            let mut z = 0.0;
            for i in 0..n {
                let xij = x[i][j] - xm[j];
                let pred_wo_j: f64 = (0..p).filter(|&k| k != j).map(|k| (x[i][k] - xm[k]) * w[k]).sum();
                rho += xij * (y[i] - ym - pred_wo_j);
                z += xij * xij;
            }
            rho /= n as f64;
            z /= n as f64;
            let new = if rho > alpha {
                (rho - alpha) / z
            } else if rho < -alpha {
                (rho + alpha) / z
            } else {
                0.0
            };
            moved = moved.max((new - w[j]).abs());
            w[j] = new;
        }
        if moved < 1e-12 {
            break;
        }
    }
    let b = ym - w.iter().zip(&xm).map(|(a, c)| a * c).sum::<f64>();
    (w, b)
}

pub fn r2_oracle(y: &[f64], pred: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let tot: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - res / tot
}

// ---- phantom geometry -----------------------------------------------------

/// Ventricle test recomputed from the stored factors: two rotated
/// ellipses either side of the midline.
pub fn in_ventricles_oracle(f: &FactorRecord, x: f64, y: f64) -> bool {
    let r = f.resolution as f64;
    let c = r / 2.0;
    let s = f.ventricle_scale;
    [-1.0f64, 1.0].iter().any(|&side| {
        let ang = side * f.ventricle_angle;
        let px = x - (c + side * 0.08 * r * s);
        let py = y - (c - 0.02 * r);
        let u = ang.cos() * px + ang.sin() * py;
        let v = -ang.sin() * px + ang.cos() * py;
        (u / (0.06 * r * s)).powi(2) + (v / (0.15 * r * s)).powi(2) <= 1.0
    })
}

/// White matter recomputed from the stored factors: inside the brain and
/// within the sulcal boundary in elliptic polar coordinates.
pub fn in_white_matter_oracle(f: &FactorRecord, x: f64, y: f64) -> bool {
    let c = f.resolution as f64 / 2.0;
    let (u, v) = ((x - c) / f.skull_axes.0, (y - c) / f.skull_axes.1);
    let rho = (u * u + v * v).sqrt();
    let theta = v.atan2(u);
    rho < 0.88 && rho < 0.7 + 0.06 * (f.sulcal_freq * theta + f.sulcal_phase).sin()
}

// ---- fixtures -------------------------------------------------------------

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn phantom_split(seed: u64, n: usize, res: usize, ranges: &FactorRanges) -> SplitData {
    let samples: Vec<_> = (0..n).map(|i| generate_sample(seed, i, res, ranges).unwrap()).collect();
    let img: Vec<f32> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    let msk: Vec<f32> = samples.iter().flat_map(|s| s.mask.iter().map(|&m| m as f32)).collect();
    SplitData {
        indices: (0..n).collect(),
        images: Tensor::from_vec(&[n, res, res, 1], img).unwrap(),
        masks: Tensor::from_vec(&[n, res, res, 1], msk).unwrap(),
        factors: samples.into_iter().map(|s| s.factors).collect(),
    }
}


/// Library and oracle R² on the synthetic probe fixture: 1000 rows of five
/// features with scale 4, target `5 x_0` plus small noise, 800/200 split,
/// default penalty. Returns `(library, oracle, library nonzero count)`.
pub fn lasso_fixture() -> (f64, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 1000;
    let p = 5;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| 4.0 * normal(&mut rng)).collect()).collect();
    let y: Vec<f64> = rows.iter().map(|r| 5.0 * r[0] + 0.01 * normal(&mut rng)).collect();
    let (ntr, nte) = (800, 200);
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let xtr = x.rows(0, ntr).into_owned();
    let xte = x.rows(ntr, nte).into_owned();
    let cfg = LassoConfig::default();
    let got = probe_arrays(&xtr, &y[..ntr], &xte, &y[ntr..], &cfg).unwrap();

    // Oracle on the same train-standardised features.
    let st = &got.standardizer;
    let ztr: Vec<Vec<f64>> = (0..ntr).map(|i| (0..p).map(|j| (rows[i][j] - st.mean[j]) / st.scale[j]).collect()).collect();
    let (w, b) = lasso_oracle(&ztr, &y[..ntr], cfg.alpha);
    let pred: Vec<f64> = (ntr..n)
        .map(|i| b + (0..p).map(|j| w[j] * (rows[i][j] - st.mean[j]) / st.scale[j]).sum::<f64>())
        .collect();
    (got.r2, r2_oracle(&y[ntr..], &pred), got.nonzero)
}

// ---- shared checks ----------------------------------------------------------

/// Runs the exact lesion-placement check over `n` samples. Returns the
/// number of samples carrying lesions, or the first violation.
pub fn phantom_exact_check(seed: u64, n: usize, res: usize) -> Result<usize, String> {
    let ranges = FactorRanges::default();
    let mut with_lesions = 0;
    for i in 0..n {
        let s = generate_sample(seed, i, res, &ranges).map_err(|e| e.to_string())?;
        let f = &s.factors;
        let mut area = 0;
        for (p, &m) in s.mask.iter().enumerate() {
            if m == 0 {
                continue;
            }
            if m != 1 {
                return Err(format!("sample {i} pixel {p}: mask value {m}"));
            }
            area += 1;
            let (x, y) = ((p % res) as f64 + 0.5, (p / res) as f64 + 0.5);
            if !in_white_matter_oracle(f, x, y) {
                return Err(format!("sample {i} pixel {p} outside white matter"));
            }
            if in_ventricles_oracle(f, x, y) {
                return Err(format!("sample {i} pixel {p} inside a ventricle"));
            }
        }
        if area != f.lesion_area || f.lesion_count != f.lesion_params.len() {
            return Err(format!("sample {i}: stored factors disagree with the mask"));
        }
        with_lesions += usize::from(area > 0);
    }
    Ok(with_lesions)
}

/// Sorted `(file name, bytes)` for every file directly under `dir`.
pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

/// Two-level 16×16 model with narrow widths and three mixture components.
pub fn mini_config(variant: Variant, supervise: bool) -> ModelConfig {
    let mut cfg = ModelConfig {
        variant,
        levels: 2,
        resolution: 16,
        base_channels: 4,
        max_channels: 8,
        components: 3,
        seg_channels: 4,
        ..ModelConfig::default()
    };
    cfg.supervision.enabled = supervise;
    cfg.supervision.target_layer = 1;
    cfg
}

pub fn uniform_images(n: usize, r: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[n, r, r, 1], (0..n * r * r).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

pub fn striped_mask(n: usize, r: usize) -> Tensor<f64> {
    Tensor::from_vec(&[n, r, r, 1], (0..n * r * r).map(|i| ((i / 3) % 5 == 0) as u8 as f64).collect()).unwrap()
}

/// Full supervised negative ELBO and its parameter gradients.
pub fn objective_and_grads(model: &Hvae<f64>, x: &Tensor<f64>, m: Option<&Tensor<f64>>) -> (f64, Vec<Tensor<f64>>) {
    let weights = LossWeights {
        beta: 0.6,
        balancing: false,
        supervision_weight: 1.0,
    };
    let mut g = Graph::<f64>::new();
    let p = model.params().bind(&mut g);
    let xv = g.constant(x.clone());
    let mut noise = NoiseSource::new(5, 6);
    let fwd = model.forward(&mut g, &p, xv, &mut noise);
    let (loss, _) = elbo_graph(&mut g, model.variant(), &fwd, xv, m, &weights, &mut noise).unwrap();
    let value = g.scalar(loss);
    let mut grads = g.backward(loss);
    let grads = p
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, grads)
}

/// Central differences with step 1e-4 on `picks` random parameters of the
/// supervised mini model. Returns the worst relative error
/// `|a − n| / max(|a|, |n|, 1e-6)` and where it occurred.
pub fn worst_gradient_error(variant: Variant, picks: usize) -> (f64, String) {
    let x = uniform_images(2, 16, 9);
    let m = striped_mask(2, 16);
    let h = 1e-4;
    let mut model = Hvae::<f64>::new(mini_config(variant, true), 21).unwrap();
    let (_, grads) = objective_and_grads(&model, &x, Some(&m));
    let sizes: Vec<usize> = model.params().tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = (0.0, String::new());
    for _ in 0..picks {
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let orig = model.params().tensors()[t].data()[flat];
        let at = |v: f64, model: &mut Hvae<f64>| {
            let tensor = &mut model.params_mut().tensors_mut()[t];
            let mut d = tensor.data().to_vec();
            d[flat] = v;
            *tensor = Tensor::from_vec(tensor.shape(), d).unwrap();
            objective_and_grads(model, &x, Some(&m)).0
        };
        let up = at(orig + h, &mut model);
        let down = at(orig - h, &mut model);
        at(orig, &mut model);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t].data()[flat];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if err > worst.0 {
            worst = (err, format!("{}[{flat}]: {analytic} vs {numeric}", model.params().names()[t]));
        }
    }
    worst
}

/// Plain-value objective inputs from a model's inference pass.
pub fn elbo_inputs_from(model: &Hvae<f64>, x: &Tensor<f64>) -> ElboInputs<f64> {
    let inf = model.infer(x, &mut NoiseSource::new(4, 9)).unwrap();
    let layers = inf
        .layers
        .iter()
        .zip(&inf.latents.groups)
        .map(|(pair, z)| LayerDists {
            prior: match &pair.prior {
                PriorKind::Gaussian(p) => Some(p.clone()),
                _ => None,
            },
            delta: pair.delta.clone(),
            posterior: pair.posterior.clone(),
            z: z.clone(),
        })
        .collect();
    ElboInputs {
        layers,
        image_mean: inf.reconstruction,
        lik_log_std: model.params().get("lik.log_std").unwrap().data()[0],
        vamprior: None,
        seg_logits: None,
    }
}

/// Losses of the residual objective and of the VamPrior objective with one
/// standard-normal component, on identical inference outputs. Returns
/// `(residual total, vamprior total, residual top KL, vamprior top KL)`.
pub fn single_component_nesting() -> (f64, f64, f64, f64) {
    let cfg = ModelConfig {
        components: 1,
        ..mini_config(Variant::Nvae, false)
    };
    let model = Hvae::<f64>::new(cfg, 3).unwrap();
    let data = (0..3 * 256).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.8).collect();
    let x = Tensor::from_vec(&[3, 16, 16, 1], data).unwrap();
    let inputs = elbo_inputs_from(&model, &x);
    let w = LossWeights { beta: 0.7, ..LossWeights::default() };
    let nvae = compute_elbo(Variant::Nvae, &inputs, &x, None, &w, &mut NoiseSource::new(0, 0)).unwrap();
    let [h, wd, c] = model.latent_shape(0);
    let mut forced = inputs;
    forced.vamprior = Some(vec![DiagonalGaussian::standard(&[1, h, wd, c])]);
    let nvmp = compute_elbo(Variant::Nvmp, &forced, &x, None, &w, &mut NoiseSource::new(0, 0)).unwrap();
    (nvae.total_weighted_loss, nvmp.total_weighted_loss, nvae.kl_per_layer[0], nvmp.kl_per_layer[0])
}
