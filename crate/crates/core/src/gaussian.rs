//! Diagonal Gaussian algebra on spatial grids.
//!
//! All distributions are parameterised by mean and log standard deviation.
//! The scalar kernels at the top of the module (value plus partial
//! derivatives) are shared with the autodiff graph so that training and
//! evaluation use one implementation of each formula.

use rand_chacha::ChaCha8Rng;

use crate::error::{check_shape, HvaeError, Result};
use crate::real::Real;
use crate::rng::{normal_tensor, stream_rng};
use crate::tensor::Tensor;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `0.5 * (m^2 + s^2 - ln s^2 - 1)` with `s = exp(ls)`.
#[inline]
pub fn kl_standard_elem<T: Real>(m: T, ls: T) -> T {
    let two = T::lit(2.0);
    T::lit(0.5) * (m * m + (two * ls).exp_m1() - two * ls)
}

/// Partials of [`kl_standard_elem`] with respect to `(m, ls)`.
#[inline]
pub fn kl_standard_grad<T: Real>(m: T, ls: T) -> (T, T) {
    (m, (T::lit(2.0) * ls).exp_m1())
}

/// KL between `N(mq, exp(lq)^2)` and `N(mp, exp(lp)^2)`.
#[inline]
pub fn kl_diag_elem<T: Real>(mq: T, lq: T, mp: T, lp: T) -> T {
    let two = T::lit(2.0);
    let d = mq - mp;
    let inv_vp = (-two * lp).exp();
    T::lit(0.5) * ((two * (lq - lp)).exp_m1() + d * d * inv_vp - two * (lq - lp))
}

/// Partials of [`kl_diag_elem`] with respect to `(mq, lq, mp, lp)`.
#[inline]
pub fn kl_diag_grad<T: Real>(mq: T, lq: T, mp: T, lp: T) -> [T; 4] {
    let two = T::lit(2.0);
    let d = mq - mp;
    let inv_vp = (-two * lp).exp();
    let ratio = (two * (lq - lp)).exp_m1();
    let dm = d * inv_vp;
    [dm, ratio, -dm, -ratio - d * d * inv_vp]
}

/// KL between the composed residual posterior `N(mu + dm, (s * ds)^2)` and
/// the prior `N(mu, s^2)`, where `s = exp(prior_ls)` and `ds = exp(dls)`.
/// Independent of the prior mean.
#[inline]
pub fn relative_kl_elem<T: Real>(prior_ls: T, dm: T, dls: T) -> T {
    let two = T::lit(2.0);
    T::lit(0.5) * (dm * dm * (-two * prior_ls).exp() + (two * dls).exp_m1() - two * dls)
}

/// Partials of [`relative_kl_elem`] with respect to `(prior_ls, dm, dls)`.
#[inline]
pub fn relative_kl_grad<T: Real>(prior_ls: T, dm: T, dls: T) -> [T; 3] {
    let two = T::lit(2.0);
    let inv_v = (-two * prior_ls).exp();
    [-dm * dm * inv_v, dm * inv_v, (two * dls).exp_m1()]
}

/// `ln N(z; m, exp(ls)^2)`.
#[inline]
pub fn log_normal_elem<T: Real>(z: T, m: T, ls: T) -> T {
    let u = (z - m) * (-ls).exp();
    -T::lit(0.5) * u * u - ls - T::lit(HALF_LN_2PI)
}

/// Partials of [`log_normal_elem`] with respect to `(z, m, ls)`.
#[inline]
pub fn log_normal_grad<T: Real>(z: T, m: T, ls: T) -> [T; 3] {
    let inv_s = (-ls).exp();
    let u = (z - m) * inv_s;
    [-u * inv_s, u * inv_s, u * u - T::one()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian<T> {
    pub mean: Tensor<T>,
    pub log_std: Tensor<T>,
}

impl<T: Real> DiagonalGaussian<T> {
    pub fn new(mean: Tensor<T>, log_std: Tensor<T>) -> Result<Self> {
        check_shape("DiagonalGaussian", mean.shape(), log_std.shape())?;
        if !log_std.all_finite() {
            return Err(HvaeError::contract("log_std must be finite"));
        }
        Ok(DiagonalGaussian { mean, log_std })
    }

    pub fn standard(shape: &[usize]) -> Self {
        DiagonalGaussian {
            mean: Tensor::zeros(shape),
            log_std: Tensor::zeros(shape),
        }
    }

    /// Builds a distribution with the same parameters at every element.
    pub fn constant(shape: &[usize], mean: f64, log_std: f64) -> Self {
        DiagonalGaussian {
            mean: Tensor::full(shape, T::lit(mean)),
            log_std: Tensor::full(shape, T::lit(log_std)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn std(&self) -> Tensor<T> {
        self.log_std.map(|v| v.exp())
    }

    /// Element-wise log density of `z`.
    pub fn log_density(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        check_shape("log_density", self.shape(), z.shape())?;
        let data = z
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.log_std.data())
            .map(|((&z, &m), &ls)| log_normal_elem(z, m, ls))
            .collect();
        Tensor::from_vec(z.shape(), data)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let eps = normal_tensor(rng, self.shape());
        reparam_sample(self, &eps).expect("noise drawn at distribution shape")
    }
}

/// Encoder deltas on top of a decoder-side prior.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPosteriorParams<T> {
    pub prior: DiagonalGaussian<T>,
    pub delta_mean: Tensor<T>,
    pub delta_log_std: Tensor<T>,
}

impl<T: Real> ResidualPosteriorParams<T> {
    pub fn new(prior: DiagonalGaussian<T>, delta_mean: Tensor<T>, delta_log_std: Tensor<T>) -> Result<Self> {
        check_shape("ResidualPosteriorParams", prior.shape(), delta_mean.shape())?;
        check_shape("ResidualPosteriorParams", prior.shape(), delta_log_std.shape())?;
        Ok(ResidualPosteriorParams {
            prior,
            delta_mean,
            delta_log_std,
        })
    }

    /// Posterior `N(mu + dmu, (sigma * dsigma)^2)`.
    pub fn compose(&self) -> DiagonalGaussian<T> {
        DiagonalGaussian {
            mean: self
                .prior
                .mean
                .zip_map(&self.delta_mean, |a, b| a + b)
                .expect("validated shapes"),
            log_std: self
                .prior
                .log_std
                .zip_map(&self.delta_log_std, |a, b| a + b)
                .expect("validated shapes"),
        }
    }
}

/// Uniform mixture of diagonal Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture<T> {
    components: Vec<DiagonalGaussian<T>>,
}

impl<T: Real> GaussianMixture<T> {
    pub fn new(components: Vec<DiagonalGaussian<T>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| HvaeError::contract("mixture needs at least one component"))?;
        for c in &components[1..] {
            check_shape("GaussianMixture", first.shape(), c.shape())?;
        }
        Ok(GaussianMixture { components })
    }

    pub fn components(&self) -> &[DiagonalGaussian<T>] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.components[0].shape()
    }
}

/// `mean + exp(log_std) * noise`.
pub fn reparam_sample<T: Real>(dist: &DiagonalGaussian<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    check_shape("reparam_sample", dist.shape(), noise.shape())?;
    let data = dist
        .mean
        .data()
        .iter()
        .zip(dist.log_std.data())
        .zip(noise.data())
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect();
    Tensor::from_vec(dist.shape(), data)
}

/// Per-element `KL(q || N(0, I))`.
pub fn kl_standard<T: Real>(q: &DiagonalGaussian<T>) -> Tensor<T> {
    q.mean
        .zip_map(&q.log_std, kl_standard_elem)
        .expect("validated shapes")
}

/// Per-element `KL(q || p)`.
pub fn kl_diag<T: Real>(q: &DiagonalGaussian<T>, p: &DiagonalGaussian<T>) -> Result<Tensor<T>> {
    check_shape("kl_diag", q.shape(), p.shape())?;
    let data = q
        .mean
        .data()
        .iter()
        .zip(q.log_std.data())
        .zip(p.mean.data().iter().zip(p.log_std.data()))
        .map(|((&mq, &lq), (&mp, &lp))| kl_diag_elem(mq, lq, mp, lp))
        .collect();
    Tensor::from_vec(q.shape(), data)
}

/// Per-element KL between the composed residual posterior and its prior.
pub fn relative_kl<T: Real>(params: &ResidualPosteriorParams<T>) -> Tensor<T> {
    let data = params
        .prior
        .log_std
        .data()
        .iter()
        .zip(params.delta_mean.data())
        .zip(params.delta_log_std.data())
        .map(|((&pls, &dm), &dls)| relative_kl_elem(pls, dm, dls))
        .collect();
    Tensor::from_vec(params.prior.shape(), data).expect("validated shapes")
}

/// Numerically stable `ln sum_k exp(x_k)`.
pub fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<T>().ln()
}

/// Per-element `ln[(1/K) sum_k N(z; mu_k, sigma_k^2)]`.
pub fn mixture_log_density<T: Real>(m: &GaussianMixture<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    check_shape("mixture_log_density", m.shape(), z.shape())?;
    let ln_k = T::from_usize(m.len()).unwrap().ln();
    let data = (0..z.len())
        .map(|i| {
            let zi = z.data()[i];
            let terms = m
                .components
                .iter()
                .map(move |c| log_normal_elem(zi, c.mean.data()[i], c.log_std.data()[i]));
            log_sum_exp(terms) - ln_k
        })
        .collect();
    Tensor::from_vec(z.shape(), data)
}

/// Monte-Carlo KL estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

fn mc_kl<T: Real>(
    sampler: &DiagonalGaussian<T>,
    m: &GaussianMixture<T>,
    n_samples: usize,
    rng_seed: u64,
) -> Result<McEstimate> {
    check_shape("mc_kl", m.shape(), sampler.shape())?;
    if n_samples == 0 {
        return Err(HvaeError::contract("n_samples must be >= 1"));
    }
    let mut rng = stream_rng(rng_seed, 0);
    let mut values = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = sampler.sample(&mut rng);
        let lq = sampler.log_density(&z)?;
        let lm = mixture_log_density(m, &z)?;
        let v: f64 = lq
            .data()
            .iter()
            .zip(lm.data())
            .map(|(&a, &b)| (a - b).as_f64())
            .sum();
        values.push(v);
    }
    let n = n_samples as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_error = if n_samples > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(McEstimate {
        estimate: mean,
        std_error,
        n_samples,
    })
}

/// `KL(q || m)` summed over elements, estimated from samples of `q`.
pub fn mc_kl_to_mixture<T: Real>(
    q: &DiagonalGaussian<T>,
    m: &GaussianMixture<T>,
    n_samples: usize,
    rng_seed: u64,
) -> Result<McEstimate> {
    mc_kl(q, m, n_samples, rng_seed)
}

/// `KL(p || m)` for a decoder prior `p`, estimated from samples of `p`.
pub fn kl_prior_to_mixture<T: Real>(
    p: &DiagonalGaussian<T>,
    m: &GaussianMixture<T>,
    n_samples: usize,
    rng_seed: u64,
) -> Result<McEstimate> {
    mc_kl(p, m, n_samples, rng_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(m: f64, ls: f64) -> DiagonalGaussian<f64> {
        DiagonalGaussian::constant(&[1, 1, 1], m, ls)
    }

    #[test]
    fn reparam_examples() {
        let eps = Tensor::from_vec(&[1, 1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let std = DiagonalGaussian::<f64>::standard(&[1, 1, 3]);
        assert_eq!(reparam_sample(&std, &eps).unwrap(), eps);

        let d = g1(2.0, 2f64.ln());
        let z = reparam_sample(&d, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert!((z.data()[0] - 4.0).abs() < 1e-15);

        let d = g1(1.5, -0.5);
        let z = reparam_sample(&d, &Tensor::full(&[1, 1, 1], -0.3)).unwrap();
        assert!((z.data()[0] - 1.318_040_7).abs() < 1e-6);
    }

    #[test]
    fn reparam_rejects_shape_mismatch() {
        let d = DiagonalGaussian::<f64>::standard(&[1, 2, 2]);
        assert!(reparam_sample(&d, &Tensor::zeros(&[1, 2, 3])).is_err());
    }

    #[test]
    fn kl_standard_examples() {
        assert_eq!(kl_standard(&g1(0.0, 0.0)).data()[0], 0.0);
        assert!((kl_standard(&g1(1.0, 0.0)).data()[0] - 0.5).abs() < 1e-15);
        assert!((kl_standard(&g1(0.5, 0.8f64.ln())).data()[0] - 0.168_143_55).abs() < 1e-8);
    }

    #[test]
    fn kl_diag_reduces_to_standard() {
        let q = g1(1.0, 0.0);
        let p = g1(0.0, 0.0);
        assert!((kl_diag(&q, &p).unwrap().data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(kl_diag(&q, &q).unwrap().data()[0], 0.0);
        assert!(kl_diag(&q, &DiagonalGaussian::standard(&[2, 1, 1])).is_err());
    }

    #[test]
    fn relative_kl_examples() {
        let prior = g1(0.7, 2f64.ln());
        let zero = ResidualPosteriorParams::new(prior.clone(), Tensor::zeros(&[1, 1, 1]), Tensor::zeros(&[1, 1, 1])).unwrap();
        assert_eq!(relative_kl(&zero).data()[0], 0.0);
        let one = ResidualPosteriorParams::new(prior, Tensor::full(&[1, 1, 1], 1.0), Tensor::zeros(&[1, 1, 1])).unwrap();
        assert!((relative_kl(&one).data()[0] - 0.125).abs() < 1e-15);
        let direct = kl_diag(&one.compose(), &one.prior).unwrap();
        assert!((direct.data()[0] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn mixture_log_density_examples() {
        let m = GaussianMixture::new(vec![g1(0.0, 0.0)]).unwrap();
        let at0 = mixture_log_density(&m, &Tensor::zeros(&[1, 1, 1])).unwrap();
        assert!((at0.data()[0] + HALF_LN_2PI).abs() < 1e-15);
        let at1 = mixture_log_density(&m, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert!((at1.data()[0] + 1.418_938_533_204_672_7).abs() < 1e-14);
        let two = GaussianMixture::new(vec![g1(-1.0, 0.0), g1(1.0, 0.0)]).unwrap();
        let v = mixture_log_density(&two, &Tensor::zeros(&[1, 1, 1])).unwrap();
        assert!((v.data()[0] + 1.418_938_533_204_672_7).abs() < 1e-14);
    }

    #[test]
    fn mixture_far_components_do_not_underflow() {
        let m = GaussianMixture::new(vec![g1(-60.0, -3.0), g1(60.0, -3.0)]).unwrap();
        let v = mixture_log_density(&m, &Tensor::full(&[1, 1, 1], 60.0)).unwrap();
        assert!(v.data()[0].is_finite());
        assert!((v.data()[0] - (3.0 - HALF_LN_2PI - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn empty_mixture_is_rejected() {
        assert!(GaussianMixture::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn mc_kl_identical_is_zero() {
        let q = DiagonalGaussian::<f64>::constant(&[1, 2, 2], 0.3, -0.2);
        let m = GaussianMixture::new(vec![q.clone()]).unwrap();
        let est = mc_kl_to_mixture(&q, &m, 256, 5).unwrap();
        assert!(est.estimate.abs() < 1e-12);
        assert!(est.std_error < 1e-12);
        assert!(mc_kl_to_mixture(&q, &m, 0, 5).is_err());
    }

    #[test]
    fn mc_kl_matches_closed_form_for_single_component() {
        let q = g1(1.0, 0.0);
        let m = GaussianMixture::new(vec![g1(0.0, 0.0)]).unwrap();
        let est = mc_kl_to_mixture(&q, &m, 10_000, 11).unwrap();
        assert!((est.estimate - 0.5).abs() < 3.0 * est.std_error);

        let p = g1(0.0, 0.5f64.ln());
        let exact = kl_diag(&p, &g1(0.0, 0.0)).unwrap().data()[0];
        let est = kl_prior_to_mixture(&p, &m, 10_000, 12).unwrap();
        assert!((est.estimate - exact).abs() < 3.0 * est.std_error);
    }
}
