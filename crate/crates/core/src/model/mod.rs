//! The (L+1)-group hierarchical VAE.
//!
//! Latent group `z_l` lives at resolution `R / 2^(L - l)`: `z_0` is the
//! coarsest, `z_L` is at full image resolution. A bottom-up encoder emits one
//! pair of deltas `(dmu_l, dlog_sigma_l)` per group. A top-down decoder
//! consumes `z_0, z_1, ...` in order and, for the residual variants, emits
//! the prior `p(z_l | z_<l)` of every group below the top. Bidirectional
//! inference composes each prior with the encoder deltas.

mod checkpoint;
mod config;
mod params;

use rand::Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, SupervisionConfig, Variant};
pub use params::{normal_init, ParamStore};

use crate::error::{check_shape, HvaeError, Result};
use crate::gaussian::{DiagonalGaussian, GaussianMixture};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::rng::NoiseSource;
use crate::tensor::Tensor;

/// Mean and log-std nodes of a diagonal Gaussian inside a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussVar {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussVar {
    pub fn to_plain<T: Real>(self, g: &Graph<T>) -> DiagonalGaussian<T> {
        DiagonalGaussian {
            mean: g.value(self.mean).clone(),
            log_std: g.value(self.log_std).clone(),
        }
    }
}

/// How the top-down pass obtains each latent group.
#[derive(Clone, Copy, Debug)]
pub enum LayerSource {
    /// Sample the posterior built from these encoder deltas.
    Posterior(GaussVar),
    /// Posterior from these deltas, taken at its mean; draws no noise.
    PosteriorMean(GaussVar),
    /// Sample the generative prior (`N(0, I)` for mean-field groups and the top).
    Prior,
    /// Use the given latent value as-is.
    Fixed(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// Decoder prior; `None` means the parameter-free `N(0, I)`.
    pub prior: Option<GaussVar>,
    pub delta: Option<GaussVar>,
    pub posterior: Option<GaussVar>,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct TopDown {
    pub layers: Vec<LayerTrace>,
    pub image_mean: Var,
}

/// Everything the objectives need from one training forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub top_down: TopDown,
    pub lik_log_std: Var,
    pub seg_logits: Option<Var>,
    /// VamPrior components `q(z_l | u_k)` stacked along the leading axis,
    /// one entry per group that carries a mixture term (only `z_0` for
    /// NVMP, every group for NVMP+).
    pub vamprior: Option<Vec<GaussVar>>,
}

/// Prior of one group as seen by plain-value callers.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorKind<T> {
    Standard,
    Gaussian(DiagonalGaussian<T>),
    Mixture(GaussianMixture<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPair<T> {
    pub prior: PriorKind<T>,
    pub delta: DiagonalGaussian<T>,
    pub posterior: DiagonalGaussian<T>,
}

/// Ordered latent groups `z_0 .. z_L`, each NHWC.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHierarchy<T> {
    pub groups: Vec<Tensor<T>>,
}

impl<T: Real> LatentHierarchy<T> {
    pub fn levels(&self) -> usize {
        self.groups.len() - 1
    }

    /// Copy with group `layer` multiplied by `factor`.
    pub fn scale_layer(&self, layer: usize, factor: f64) -> Result<Self> {
        if layer >= self.groups.len() {
            return Err(HvaeError::contract(format!(
                "layer {layer} out of range 0..={}",
                self.levels()
            )));
        }
        let mut out = self.clone();
        let f = T::lit(factor);
        out.groups[layer] = out.groups[layer].map(|v| v * f);
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub latents: LatentHierarchy<T>,
    pub layers: Vec<LayerPair<T>>,
    pub reconstruction: Tensor<T>,
}

/// Plain-value counterpart of [`LayerSource`].
#[derive(Clone, Debug)]
pub enum Source<T> {
    Posterior(DiagonalGaussian<T>),
    PosteriorMean(DiagonalGaussian<T>),
    Prior,
    Fixed(Tensor<T>),
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
}

impl Conv {
    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.w], p[self.b], self.stride)
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    c1: Conv,
    c2: Conv,
}

impl Cell {
    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let a = g.silu(x);
        let a = self.c1.apply(g, p, a);
        let a = g.silu(a);
        let a = self.c2.apply(g, p, a);
        g.add(x, a)
    }
}

#[derive(Clone, Debug)]
struct EncoderScale {
    cell: Cell,
    tap: Conv,
    down: Option<Conv>,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    up: Option<Conv>,
    prior: Option<Conv>,
    inject: Conv,
    cell: Cell,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    enc: Vec<EncoderScale>,
    dec: Vec<DecoderLayer>,
    out: Conv,
    lik_log_std: usize,
    seg: Option<(Conv, Conv)>,
    pseudo_inputs: Option<usize>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Real> Builder<'_, T> {
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, stride: usize, gain: f64) -> Conv {
        let std = gain / ((k * k * cin) as f64).sqrt();
        let wname = format!("{name}.w");
        let w = normal_init(self.seed, &wname, &[k, k, cin, cout], std);
        let w = self.store.push(wname, w);
        let b = self.store.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv { w, b, stride }
    }

    fn cell(&mut self, name: &str, ch: usize) -> Cell {
        Cell {
            c1: self.conv(&format!("{name}.c1"), 3, ch, ch, 1, 1.0),
            c2: self.conv(&format!("{name}.c2"), 3, ch, ch, 1, 0.1),
        }
    }
}

/// Hierarchical VAE parameters plus the fixed network layout.
#[derive(Clone, Debug)]
pub struct Hvae<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

const TAP_GAIN: f64 = 0.1;

impl<T: Real> Hvae<T> {
    /// Freshly initialised model. Pseudo-inputs start as standard normal
    /// noise; the trainer replaces them with perturbed training images.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = Self::build(&config, &mut store, seed);
        Ok(Hvae {
            config,
            params: store,
            layout,
        })
    }

    /// Model with externally supplied parameters; names and shapes must
    /// match the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.assign(&params).map_err(|e| {
            HvaeError::Mismatch(format!("parameters do not fit configuration: {e}"))
        })?;
        Ok(model)
    }

    fn build(cfg: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Layout {
        let levels = cfg.levels;
        let c = cfg.latent_channels;
        let ch = |s: usize| cfg.channels(s);
        let mut b = Builder { store, seed };

        let stem = b.conv("enc.stem", 3, 1, ch(0), 1, 1.0);
        let enc = (0..=levels)
            .map(|s| EncoderScale {
                cell: b.cell(&format!("enc.s{s}.cell"), ch(s)),
                tap: b.conv(&format!("enc.s{s}.tap"), 1, ch(s), 2 * c, 1, TAP_GAIN),
                down: (s < levels).then(|| b.conv(&format!("enc.s{s}.down"), 3, ch(s), ch(s + 1), 2, 1.0)),
            })
            .collect();

        let dec = (0..=levels)
            .map(|l| {
                let s = levels - l;
                DecoderLayer {
                    up: (l > 0).then(|| b.conv(&format!("dec.l{l}.up"), 1, ch(s + 1), ch(s), 1, 1.0)),
                    prior: (l > 0 && cfg.variant.is_residual())
                        .then(|| b.conv(&format!("dec.l{l}.prior"), 1, ch(s), 2 * c, 1, TAP_GAIN)),
                    inject: b.conv(&format!("dec.l{l}.inject"), 1, c, ch(s), 1, 1.0),
                    cell: b.cell(&format!("dec.l{l}.cell"), ch(s)),
                }
            })
            .collect();
        let out = b.conv("dec.out", 3, ch(0), 1, 1, 1.0);
        let lik_log_std = b.store.push("lik.log_std", Tensor::zeros(&[1]));
        let seg = cfg.supervision.enabled.then(|| {
            (
                b.conv("seg.conv", 3, c, cfg.seg_channels, 1, 1.0),
                b.conv("seg.out", 1, cfg.seg_channels, 1, 1, 1.0),
            )
        });
        let pseudo_inputs = cfg.variant.uses_vamprior().then(|| {
            let r = cfg.resolution;
            let init = normal_init(seed, "vamprior.pseudo_inputs", &[cfg.components, r, r, 1], 1.0);
            b.store.push("vamprior.pseudo_inputs", init)
        });
        Layout {
            stem,
            enc,
            dec,
            out,
            lik_log_std,
            seg,
            pseudo_inputs,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn levels(&self) -> usize {
        self.config.levels
    }

    /// `[h, w, c]` of group `layer`.
    pub fn latent_shape(&self, layer: usize) -> [usize; 3] {
        let r = self.config.latent_resolution(layer);
        [r, r, self.config.latent_channels]
    }

    pub fn cast<U: Real>(&self) -> Hvae<U> {
        Hvae {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Position of the pseudo-input tensor in the parameter store.
    pub fn pseudo_input_index(&self) -> Option<usize> {
        self.layout.pseudo_inputs
    }

    pub fn check_images(&self, x: &Tensor<T>) -> Result<()> {
        let r = self.config.resolution;
        let s = x.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(HvaeError::contract(format!("expected NHWC images, got shape {s:?}")));
        }
        check_shape("image", &[s[0], r, r, 1], s)
    }

    fn split(g: &mut Graph<T>, v: Var, c: usize) -> GaussVar {
        GaussVar {
            mean: g.slice_channels(v, 0, c),
            log_std: g.slice_channels(v, c, c),
        }
    }

    /// Bottom-up pass: encoder deltas for groups `0..=L`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Vec<GaussVar> {
        let levels = self.config.levels;
        let c = self.config.latent_channels;
        let mut deltas = vec![None; levels + 1];
        let mut e = self.layout.stem.apply(g, p, x);
        for (s, scale) in self.layout.enc.iter().enumerate() {
            e = scale.cell.apply(g, p, e);
            let a = g.silu(e);
            let tap = scale.tap.apply(g, p, a);
            deltas[levels - s] = Some(Self::split(g, tap, c));
            if let Some(down) = &scale.down {
                e = down.apply(g, p, a);
            }
        }
        deltas.into_iter().map(|d| d.expect("every scale taps")).collect()
    }

    /// Top-down pass over all groups.
    ///
    /// `noise` scales every reparameterised draw; a zero-scale source gives
    /// distribution means (posterior-mean mode).
    pub fn top_down_graph(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        sources: &[LayerSource],
        noise: &mut NoiseSource,
    ) -> TopDown {
        let levels = self.config.levels;
        assert_eq!(sources.len(), levels + 1, "one source per latent group");
        let c = self.config.latent_channels;
        let residual = self.config.variant.is_residual();
        let batch = self.batch_of(g, sources);
        let mut layers = Vec::with_capacity(levels + 1);
        let mut h: Option<Var> = None;

        for (l, dl) in self.layout.dec.iter().enumerate() {
            let [zh, zw, _] = self.latent_shape(l);
            let shape = [batch, zh, zw, c];
            let mut feat = None;
            let mut prior = None;
            if let (Some(up), Some(prev)) = (&dl.up, h) {
                let a = up.apply(g, p, prev);
                let a = g.upsample_nearest(a, 2);
                if let Some(tap) = &dl.prior {
                    let act = g.silu(a);
                    let t = tap.apply(g, p, act);
                    prior = Some(Self::split(g, t, c));
                }
                feat = Some(a);
            }
            let (delta, posterior, z) = match sources[l] {
                LayerSource::Posterior(d) | LayerSource::PosteriorMean(d) => {
                    let post = match prior {
                        Some(pr) if residual => GaussVar {
                            mean: g.add(pr.mean, d.mean),
                            log_std: g.add(pr.log_std, d.log_std),
                        },
                        _ => d,
                    };
                    let z = if matches!(sources[l], LayerSource::PosteriorMean(_)) {
                        post.mean
                    } else {
                        let eps = noise.draw(&shape);
                        g.reparam(post.mean, post.log_std, eps)
                    };
                    (Some(d), Some(post), z)
                }
                LayerSource::Prior => {
                    let eps = noise.draw(&shape);
                    let z = match prior {
                        Some(pr) => g.reparam(pr.mean, pr.log_std, eps),
                        None => g.constant(eps),
                    };
                    (None, None, z)
                }
                LayerSource::Fixed(z) => (None, None, z),
            };
            let inj = dl.inject.apply(g, p, z);
            let merged = match feat {
                Some(f) => g.add(f, inj),
                None => inj,
            };
            h = Some(dl.cell.apply(g, p, merged));
            layers.push(LayerTrace {
                prior,
                delta,
                posterior,
                z,
            });
        }
        let a = g.silu(h.expect("at least one group"));
        let image_mean = self.layout.out.apply(g, p, a);
        TopDown { layers, image_mean }
    }

    fn batch_of(&self, g: &Graph<T>, sources: &[LayerSource]) -> usize {
        for s in sources {
            match s {
                LayerSource::Posterior(d) | LayerSource::PosteriorMean(d) => return g.shape(d.mean)[0],
                LayerSource::Fixed(z) => return g.shape(*z)[0],
                LayerSource::Prior => {}
            }
        }
        1
    }

    /// VamPrior components `q(z_l | u_k)` for the groups that need them.
    /// The pseudo-inputs are pushed through bidirectional inference in
    /// posterior-mean mode.
    pub fn vamprior_graph(&self, g: &mut Graph<T>, p: &[Var]) -> Option<Vec<GaussVar>> {
        let idx = self.layout.pseudo_inputs?;
        let u = p[idx];
        let deltas = self.encode_graph(g, p, u);
        match self.config.variant {
            Variant::Nvmp => Some(vec![deltas[0]]),
            Variant::NvmpPlus => {
                let sources: Vec<LayerSource> = deltas.iter().map(|&d| LayerSource::Posterior(d)).collect();
                let mut mean_mode = NoiseSource::new(0, 0).with_scale(0.0);
                let td = self.top_down_graph(g, p, &sources, &mut mean_mode);
                Some(td.layers.iter().map(|t| t.posterior.expect("posterior source")).collect())
            }
            _ => None,
        }
    }

    /// Lesion logits from a sample of the supervised group.
    pub fn segment_graph(&self, g: &mut Graph<T>, p: &[Var], z_p: Var) -> Result<Var> {
        let (conv, out) = self
            .layout
            .seg
            .ok_or_else(|| HvaeError::contract("segmentation head requires supervision to be enabled"))?;
        let a = conv.apply(g, p, z_p);
        let f = 1usize << (self.config.levels - self.config.supervision.target_layer);
        let a = if f > 1 { g.upsample_bilinear(a, f) } else { a };
        Ok(out.apply(g, p, a))
    }

    /// Full training-time pass: bidirectional inference, likelihood mean,
    /// optional lesion logits and VamPrior components.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var, noise: &mut NoiseSource) -> Forward {
        let deltas = self.encode_graph(g, p, x);
        let sources: Vec<LayerSource> = deltas.iter().map(|&d| LayerSource::Posterior(d)).collect();
        let top_down = self.top_down_graph(g, p, &sources, noise);
        let seg_logits = self.layout.seg.map(|_| {
            let z_p = top_down.layers[self.config.supervision.target_layer].z;
            self.segment_graph(g, p, z_p).expect("head present")
        });
        let vamprior = self.vamprior_graph(g, p);
        Forward {
            top_down,
            lik_log_std: p[self.layout.lik_log_std],
            seg_logits,
            vamprior,
        }
    }

    // ---- plain-value API -------------------------------------------------

    pub fn encode(&self, x: &Tensor<T>) -> Result<Vec<DiagonalGaussian<T>>> {
        self.check_images(x)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        Ok(self.encode_graph(&mut g, &p, xv).into_iter().map(|d| d.to_plain(&g)).collect())
    }

    fn prior_kind(&self, g: &Graph<T>, layer: usize, trace: &LayerTrace, vamp: &Option<Vec<GaussVar>>) -> Result<PriorKind<T>> {
        if layer == 0 && self.config.variant.uses_vamprior() {
            let comps = vamp.as_ref().expect("vamprior variant")[0].to_plain(g);
            return Ok(PriorKind::Mixture(split_components(&comps)?));
        }
        Ok(match trace.prior {
            Some(pr) => PriorKind::Gaussian(pr.to_plain(g)),
            None => PriorKind::Standard,
        })
    }

    /// Bidirectional inference. A zero-scale `noise` gives posterior means.
    pub fn infer(&self, x: &Tensor<T>, noise: &mut NoiseSource) -> Result<Inference<T>> {
        self.check_images(x)?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let deltas = self.encode_graph(&mut g, &p, xv);
        let sources: Vec<LayerSource> = deltas.iter().map(|&d| LayerSource::Posterior(d)).collect();
        let td = self.top_down_graph(&mut g, &p, &sources, noise);
        let vamp = if self.config.variant.uses_vamprior() {
            self.vamprior_graph(&mut g, &p)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(td.layers.len());
        for (l, t) in td.layers.iter().enumerate() {
            layers.push(LayerPair {
                prior: self.prior_kind(&g, l, t, &vamp)?,
                delta: t.delta.expect("posterior source").to_plain(&g),
                posterior: t.posterior.expect("posterior source").to_plain(&g),
            });
        }
        Ok(Inference {
            latents: LatentHierarchy {
                groups: td.layers.iter().map(|t| g.value(t.z).clone()).collect(),
            },
            layers,
            reconstruction: g.value(td.image_mean).clone(),
        })
    }

    /// Likelihood mean after inference; zero-scale noise is deterministic.
    pub fn reconstruct(&self, x: &Tensor<T>, noise: &mut NoiseSource) -> Result<Tensor<T>> {
        Ok(self.infer(x, noise)?.reconstruction)
    }

    /// Runs the decoder from per-group sources. Posterior sources carry
    /// encoder deltas.
    pub fn decode_sources(&self, sources: &[Source<T>], noise: &mut NoiseSource) -> Result<Inference<T>> {
        let levels = self.config.levels;
        if sources.len() != levels + 1 {
            return Err(HvaeError::contract(format!(
                "expected {} sources, got {}",
                levels + 1,
                sources.len()
            )));
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let mut batch = None;
        let mut srcs = Vec::with_capacity(sources.len());
        for (l, s) in sources.iter().enumerate() {
            let [h, w, c] = self.latent_shape(l);
            let check = |t: &Tensor<T>, batch: &mut Option<usize>| -> Result<()> {
                let n = *batch.get_or_insert(t.batch());
                check_shape("latent source", &[n, h, w, c], t.shape())
            };
            srcs.push(match s {
                Source::Posterior(d) | Source::PosteriorMean(d) => {
                    check(&d.mean, &mut batch)?;
                    check(&d.log_std, &mut batch)?;
                    let gv = GaussVar {
                        mean: g.constant(d.mean.clone()),
                        log_std: g.constant(d.log_std.clone()),
                    };
                    if matches!(s, Source::PosteriorMean(_)) {
                        LayerSource::PosteriorMean(gv)
                    } else {
                        LayerSource::Posterior(gv)
                    }
                }
                Source::Fixed(z) => {
                    check(z, &mut batch)?;
                    LayerSource::Fixed(g.constant(z.clone()))
                }
                Source::Prior => LayerSource::Prior,
            });
        }
        if batch.is_none() {
            return Err(HvaeError::contract("at least one source must fix the batch size"));
        }
        let td = self.top_down_graph(&mut g, &p, &srcs, noise);
        let layers = td
            .layers
            .iter()
            .map(|t| {
                let prior = match t.prior {
                    Some(pr) => PriorKind::Gaussian(pr.to_plain(&g)),
                    None => PriorKind::Standard,
                };
                let z = g.value(t.z).clone();
                let post = t
                    .posterior
                    .map(|q| q.to_plain(&g))
                    .unwrap_or_else(|| DiagonalGaussian::standard(z.shape()));
                let delta = t
                    .delta
                    .map(|q| q.to_plain(&g))
                    .unwrap_or_else(|| DiagonalGaussian::standard(z.shape()));
                LayerPair {
                    prior,
                    delta,
                    posterior: post,
                }
            })
            .collect();
        Ok(Inference {
            latents: LatentHierarchy {
                groups: td.layers.iter().map(|t| g.value(t.z).clone()).collect(),
            },
            layers,
            reconstruction: g.value(td.image_mean).clone(),
        })
    }

    /// Decodes fixed latent values.
    pub fn decode_latents(&self, latents: &LatentHierarchy<T>) -> Result<Tensor<T>> {
        let sources: Vec<Source<T>> = latents.groups.iter().cloned().map(Source::Fixed).collect();
        let mut none = NoiseSource::new(0, 0).with_scale(0.0);
        Ok(self.decode_sources(&sources, &mut none)?.reconstruction)
    }

    /// Mixture over `z_0` given by the pseudo-inputs (VamPrior variants).
    pub fn top_vamprior(&self) -> Option<GaussianMixture<T>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let comps = self.vamprior_graph(&mut g, &p)?;
        split_components(&comps[0].to_plain(&g)).ok()
    }

    /// Draws `z_0` from its generative prior.
    pub fn sample_top(&self, n: usize, temperature: f64, noise: &mut NoiseSource) -> Tensor<T> {
        let shape = {
            let [h, w, c] = self.latent_shape(0);
            [n, h, w, c]
        };
        let t = T::lit(temperature);
        match self.top_vamprior() {
            Some(mix) => {
                let eps: Tensor<T> = noise.draw(&shape);
                let per = eps.per_item();
                let mut data = Vec::with_capacity(eps.len());
                for i in 0..n {
                    let k = noise.rng().gen_range(0..mix.len());
                    let comp = &mix.components()[k];
                    for j in 0..per {
                        let e = eps.data()[i * per + j];
                        data.push(comp.mean.data()[j] + t * comp.log_std.data()[j].exp() * e);
                    }
                }
                Tensor::from_vec(&shape, data).expect("shape and length agree")
            }
            None => noise.draw::<T>(&shape).map(|e| e * t),
        }
    }

    /// Ancestral sampling. `temperature` scales the sampling standard
    /// deviation of every group; zero yields the modal image.
    pub fn generate(&self, n: usize, temperature: f64, seed: u64) -> Result<Tensor<T>> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(HvaeError::contract(format!("temperature must be >= 0, got {temperature}")));
        }
        if n == 0 {
            return Err(HvaeError::contract("generate needs n >= 1"));
        }
        let mut top_noise = NoiseSource::new(seed, 0);
        let z0 = self.sample_top(n, temperature, &mut top_noise);
        let mut sources = vec![Source::Prior; self.levels() + 1];
        sources[0] = Source::Fixed(z0);
        let mut noise = NoiseSource::new(seed, 1).with_scale(temperature);
        Ok(self.decode_sources(&sources, &mut noise)?.reconstruction)
    }

    /// Lesion probabilities from a sample of the supervised group.
    pub fn segment(&self, z_p: &Tensor<T>) -> Result<Tensor<T>> {
        if self.layout.seg.is_none() {
            return Err(HvaeError::contract("segmentation head requires supervision to be enabled"));
        }
        let [h, w, c] = self.latent_shape(self.config.supervision.target_layer);
        check_shape("segment", &[z_p.batch(), h, w, c], z_p.shape())?;
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let z = g.constant(z_p.clone());
        let logits = self.segment_graph(&mut g, &p, z)?;
        let probs = g.sigmoid(logits);
        Ok(g.value(probs).clone())
    }
}

/// Splits stacked `[K, ...]` components into a mixture.
pub fn split_components<T: Real>(stacked: &DiagonalGaussian<T>) -> Result<GaussianMixture<T>> {
    let k = stacked.mean.batch();
    let mut shape = stacked.shape().to_vec();
    shape[0] = 1;
    let comps = (0..k)
        .map(|i| DiagonalGaussian {
            mean: stacked.mean.select(&[i]),
            log_std: stacked.log_std.select(&[i]),
        })
        .collect();
    GaussianMixture::new(comps)
}
