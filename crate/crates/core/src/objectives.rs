//! Negative ELBOs of the four variants, the cyclical KL weight, KL
//! balancing and the lesion supervision loss.

use crate::error::{check_shape, HvaeError, Result};
use crate::gaussian::DiagonalGaussian;
use crate::graph::{Graph, Var};
use crate::model::{Forward, GaussVar, LayerTrace, TopDown, Variant};
use crate::real::Real;
use crate::rng::NoiseSource;
use crate::tensor::Tensor;

/// Cyclical linear KL-weight schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub cycle_length: u64,
    pub beta_init: f64,
    /// Fraction of each cycle spent ramping from `beta_init` to 1.
    pub ramp_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            cycle_length: 10_000,
            beta_init: 2e-7,
            ramp_fraction: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_length == 0 {
            return Err(HvaeError::Config("cycle_length must be >= 1".into()));
        }
        if !(self.beta_init > 0.0 && self.beta_init <= 1.0) {
            return Err(HvaeError::Config("beta_init must lie in (0, 1]".into()));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(HvaeError::Config("ramp_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// KL weight at `iteration`; resets to `beta_init` at every cycle start.
pub fn kl_anneal_coefficient(iteration: u64, cfg: &ScheduleConfig) -> f64 {
    let pos = (iteration % cfg.cycle_length) as f64;
    let ramp = cfg.ramp_fraction * cfg.cycle_length as f64;
    (cfg.beta_init + (1.0 - cfg.beta_init) * (pos / ramp)).min(1.0)
}

const BALANCE_EPS: f64 = 1e-8;

/// Per-layer KL multipliers proportional to `size * kl`, normalised so that
/// `sum(gamma * kl) == sum(kl)`.
pub fn kl_balancing_coeffs(layer_sizes: &[f64], layer_klds: &[f64]) -> Result<Vec<f64>> {
    if layer_sizes.len() != layer_klds.len() {
        return Err(HvaeError::contract(format!(
            "{} layer sizes but {} KL values",
            layer_sizes.len(),
            layer_klds.len()
        )));
    }
    if layer_sizes.iter().any(|&s| !(s > 0.0)) {
        return Err(HvaeError::contract("layer sizes must be positive"));
    }
    let total: f64 = layer_klds.iter().sum();
    let raw: Vec<f64> = layer_sizes
        .iter()
        .zip(layer_klds)
        .map(|(&s, &k)| s * k.max(BALANCE_EPS))
        .collect();
    let weighted: f64 = raw.iter().zip(layer_klds).map(|(r, k)| r * k).sum();
    if layer_klds.iter().all(|&k| k == 0.0) || weighted == 0.0 || !weighted.is_finite() {
        return Ok(vec![1.0; layer_klds.len()]);
    }
    Ok(raw.iter().map(|r| r * total / weighted).collect())
}

const PROB_CLAMP: f64 = 1e-7;

fn check_binary<T: Real>(label: &Tensor<T>) -> Result<()> {
    if label.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(HvaeError::contract("labels must be binary (0 or 1)"));
    }
    Ok(())
}

/// `BCE(pred, label) + 1 - softDice(pred, label)` for one probability map,
/// BCE summed over pixels, probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn supervision_loss<T: Real>(pred: &Tensor<T>, label: &Tensor<T>) -> Result<f64> {
    check_shape("supervision_loss", pred.shape(), label.shape())?;
    check_binary(label)?;
    if pred.is_empty() {
        return Err(HvaeError::contract("empty prediction"));
    }
    let (mut bce, mut spy, mut sp, mut sy) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in pred.data().iter().zip(label.data()) {
        let p = p.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let y = y.as_f64();
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        spy += p * y;
        sp += p;
        sy += y;
    }
    let dice = (2.0 * spy + 1.0) / (sp + sy + 1.0);
    Ok(bce + 1.0 - dice)
}

/// Per-term values of one negative-ELBO evaluation, batch-averaged nats.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub recon_ll: f64,
    /// Raw KL of each group before weighting. Mixture terms are
    /// single-sample Monte-Carlo estimates and may be negative.
    pub kl_per_layer: Vec<f64>,
    /// Prior-to-VamPrior terms of groups `1..=L` (NVMP+ only).
    pub vamprior_extra_kl: Vec<f64>,
    pub supervision_loss: Option<f64>,
    pub beta: f64,
    pub gamma: Vec<f64>,
    pub supervision_weight: f64,
    pub total_weighted_loss: f64,
}

impl ElboBreakdown {
    /// `-recon + beta * (sum gamma_l KL_l + sum extra) + weight * sup`.
    pub fn recompute_total(&self) -> f64 {
        let kl: f64 = self.gamma.iter().zip(&self.kl_per_layer).map(|(g, k)| g * k).sum();
        let extra: f64 = self.vamprior_extra_kl.iter().sum();
        -self.recon_ll
            + self.beta * (kl + extra)
            + self.supervision_weight * self.supervision_loss.unwrap_or(0.0)
    }

    /// Name and value of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<(String, f64)> {
        let mut terms = vec![("recon_ll".to_string(), self.recon_ll)];
        terms.extend(self.kl_per_layer.iter().enumerate().map(|(l, &v)| (format!("kl[{l}]"), v)));
        terms.extend(
            self.vamprior_extra_kl
                .iter()
                .enumerate()
                .map(|(l, &v)| (format!("vamprior_kl[{}]", l + 1), v)),
        );
        if let Some(s) = self.supervision_loss {
            terms.push(("supervision".into(), s));
        }
        terms.push(("total".into(), self.total_weighted_loss));
        terms.into_iter().find(|(_, v)| !v.is_finite())
    }
}

/// Weighting state for one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub beta: f64,
    pub balancing: bool,
    pub supervision_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            balancing: true,
            supervision_weight: 1.0,
        }
    }
}

/// Batch-mean of a per-element term summed over each item.
fn batch_mean<T: Real>(g: &mut Graph<T>, v: Var) -> Var {
    let n = g.shape(v)[0];
    let s = g.sum(v);
    g.scale(s, T::one() / T::from_usize(n).unwrap())
}

/// Single-sample (or closed-form for K = 1) `KL(q || mixture)` where `z` is
/// a draw from `q`, summed per item.
fn mixture_kl<T: Real>(g: &mut Graph<T>, q: GaussVar, z: Var, comps: GaussVar) -> Var {
    let n = g.shape(q.mean)[0];
    if g.shape(comps.mean)[0] == 1 {
        let mp = g.repeat_items(comps.mean, n);
        let lp = g.repeat_items(comps.log_std, n);
        return g.kl_diag(q.mean, q.log_std, mp, lp);
    }
    let lq = g.log_normal(z, q.mean, q.log_std);
    let lm = g.mixture_log_density(z, comps.mean, comps.log_std);
    g.sub(lq, lm)
}

/// Builds the scalar negative ELBO on `g` and reports its parts.
///
/// `mask` is required exactly when the forward pass carries lesion logits.
/// `noise` supplies the prior draws of the extra NVMP+ terms.
pub fn elbo_graph<T: Real>(
    g: &mut Graph<T>,
    variant: Variant,
    fwd: &Forward,
    x: Var,
    mask: Option<&Tensor<T>>,
    weights: &LossWeights,
    noise: &mut NoiseSource,
) -> Result<(Var, ElboBreakdown)> {
    let layers = &fwd.top_down.layers;
    let levels = layers.len() - 1;
    let vamp = match (variant.uses_vamprior(), &fwd.vamprior) {
        (true, Some(v)) => Some(v.as_slice()),
        (false, _) => None,
        (true, None) => return Err(HvaeError::contract(format!("{variant} needs VamPrior components"))),
    };
    if variant == Variant::NvmpPlus && vamp.map(|v| v.len()) != Some(levels + 1) {
        return Err(HvaeError::contract("nvmp+ needs VamPrior components for every group"));
    }

    // Reconstruction: sum over pixels of log N(x; mean, sigma^2), batch mean.
    let shape = g.shape(x).to_vec();
    let ls = g.broadcast(fwd.lik_log_std, &shape);
    let ll = g.log_normal(x, fwd.top_down.image_mean, ls);
    let recon = batch_mean(g, ll);

    let mut kl_vars = Vec::with_capacity(levels + 1);
    for (l, t) in layers.iter().enumerate() {
        let post = t
            .posterior
            .ok_or_else(|| HvaeError::contract(format!("layer {l} has no posterior")))?;
        let per_elem = if l == 0 || !variant.is_residual() {
            if t.prior.is_some() {
                return Err(HvaeError::contract(format!(
                    "{variant}: layer {l} must have a parameter-free prior"
                )));
            }
            match vamp {
                Some(comps) if l == 0 => mixture_kl(g, post, t.z, comps[0]),
                _ => g.kl_standard(post.mean, post.log_std),
            }
        } else {
            let (prior, delta) = match (t.prior, t.delta) {
                (Some(p), Some(d)) => (p, d),
                _ => {
                    return Err(HvaeError::contract(format!(
                        "{variant}: layer {l} needs a decoder prior and encoder deltas"
                    )))
                }
            };
            g.relative_kl(prior.log_std, delta.mean, delta.log_std)
        };
        kl_vars.push(batch_mean(g, per_elem));
    }

    let mut extra_vars = Vec::new();
    if variant == Variant::NvmpPlus {
        let comps = vamp.expect("checked above");
        for (l, t) in layers.iter().enumerate().skip(1) {
            let prior = t.prior.expect("residual layers carry priors");
            let eps = noise.draw(g.shape(prior.mean));
            let z = g.reparam(prior.mean, prior.log_std, eps);
            let per_elem = mixture_kl(g, prior, z, comps[l]);
            extra_vars.push(batch_mean(g, per_elem));
        }
    }

    let sup_var = match (fwd.seg_logits, mask) {
        (Some(logits), Some(m)) => {
            check_shape("lesion mask", g.shape(logits), m.shape())?;
            check_binary(m)?;
            Some(g.seg_loss(logits, m.clone()))
        }
        (Some(_), None) => return Err(HvaeError::contract("supervised model needs lesion masks")),
        (None, _) => None,
    };

    let kl_values: Vec<f64> = kl_vars.iter().map(|&v| g.scalar(v).as_f64()).collect();
    let gamma = if weights.balancing {
        let sizes: Vec<f64> = layers.iter().map(|t| g.value(t.z).per_item() as f64).collect();
        kl_balancing_coeffs(&sizes, &kl_values)?
    } else {
        vec![1.0; kl_values.len()]
    };
    let beta = weights.beta;
    let sup_w = if sup_var.is_some() { weights.supervision_weight } else { 0.0 };

    let mut terms = vec![(recon, -T::one())];
    terms.extend(kl_vars.iter().zip(&gamma).map(|(&v, &gm)| (v, T::lit(beta * gm))));
    terms.extend(extra_vars.iter().map(|&v| (v, T::lit(beta))));
    if let Some(s) = sup_var {
        terms.push((s, T::lit(sup_w)));
    }
    let total = g.linear(&terms);

    let breakdown = ElboBreakdown {
        recon_ll: g.scalar(recon).as_f64(),
        kl_per_layer: kl_values,
        vamprior_extra_kl: extra_vars.iter().map(|&v| g.scalar(v).as_f64()).collect(),
        supervision_loss: sup_var.map(|v| g.scalar(v).as_f64()),
        beta,
        gamma,
        supervision_weight: sup_w,
        total_weighted_loss: g.scalar(total).as_f64(),
    };
    Ok((total, breakdown))
}

/// Distributions of one group as plain values.
#[derive(Clone, Debug)]
pub struct LayerDists<T> {
    /// Decoder prior; `None` for parameter-free `N(0, I)` priors.
    pub prior: Option<DiagonalGaussian<T>>,
    pub delta: DiagonalGaussian<T>,
    pub posterior: DiagonalGaussian<T>,
    /// Posterior sample fed to the next group.
    pub z: Tensor<T>,
}

/// Everything [`compute_elbo`] needs, as plain values.
#[derive(Clone, Debug)]
pub struct ElboInputs<T> {
    pub layers: Vec<LayerDists<T>>,
    pub image_mean: Tensor<T>,
    pub lik_log_std: T,
    /// Stacked `[K, ...]` VamPrior components per group that carries one.
    pub vamprior: Option<Vec<DiagonalGaussian<T>>>,
    pub seg_logits: Option<Tensor<T>>,
}

/// Plain-value negative ELBO; shares every formula with [`elbo_graph`].
pub fn compute_elbo<T: Real>(
    variant: Variant,
    inputs: &ElboInputs<T>,
    x: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    weights: &LossWeights,
    noise: &mut NoiseSource,
) -> Result<ElboBreakdown> {
    check_shape("compute_elbo", inputs.image_mean.shape(), x.shape())?;
    if inputs.layers.is_empty() {
        return Err(HvaeError::contract("no latent groups"));
    }
    let mut g = Graph::inference();
    let gauss = |g: &mut Graph<T>, d: &DiagonalGaussian<T>| GaussVar {
        mean: g.constant(d.mean.clone()),
        log_std: g.constant(d.log_std.clone()),
    };
    let mut traces = Vec::with_capacity(inputs.layers.len());
    for ld in &inputs.layers {
        traces.push(LayerTrace {
            prior: ld.prior.as_ref().map(|p| gauss(&mut g, p)),
            delta: Some(gauss(&mut g, &ld.delta)),
            posterior: Some(gauss(&mut g, &ld.posterior)),
            z: g.constant(ld.z.clone()),
        });
    }
    let vamprior = inputs
        .vamprior
        .as_ref()
        .map(|v| v.iter().map(|d| gauss(&mut g, d)).collect());
    let fwd = Forward {
        top_down: TopDown {
            layers: traces,
            image_mean: g.constant(inputs.image_mean.clone()),
        },
        lik_log_std: g.constant(Tensor::from_vec(&[1], vec![inputs.lik_log_std])?),
        seg_logits: inputs.seg_logits.as_ref().map(|s| g.constant(s.clone())),
        vamprior,
    };
    let xv = g.constant(x.clone());
    let (_, breakdown) = elbo_graph(&mut g, variant, &fwd, xv, mask, weights, noise)?;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = ScheduleConfig::default();
        assert_eq!(kl_anneal_coefficient(0, &c), 2e-7);
        assert_eq!(kl_anneal_coefficient(5000, &c), 1.0);
        assert_eq!(kl_anneal_coefficient(10_000, &c), 2e-7);
        assert!(kl_anneal_coefficient(2500, &c) > 0.49);
    }

    #[test]
    fn balancing_examples() {
        assert_eq!(kl_balancing_coeffs(&[2.0, 2.0], &[1.5, 1.5]).unwrap(), vec![1.0, 1.0]);
        let g = kl_balancing_coeffs(&[1.0, 3.0], &[2.0, 2.0]).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] - 1.5).abs() < 1e-12);
        assert_eq!(kl_balancing_coeffs(&[7.0], &[0.3]).unwrap(), vec![1.0]);
        assert_eq!(kl_balancing_coeffs(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), vec![1.0, 1.0]);
        assert!(kl_balancing_coeffs(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn supervision_examples() {
        let y = Tensor::<f64>::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let perfect = y.map(|v| if v > 0.5 { 1.0 - 1e-9 } else { 1e-9 });
        assert!(supervision_loss(&perfect, &y).unwrap() < 1e-6);
        let zeros = Tensor::<f64>::zeros(&[16]);
        let tiny = Tensor::full(&[16], 1e-9);
        assert!(supervision_loss(&tiny, &zeros).unwrap() < 1e-5);
        let bad = Tensor::<f64>::full(&[4], 0.5);
        assert!(supervision_loss(&perfect, &bad).is_err());
    }
}
