//! Optimisation loop: minibatching, annealed and balanced ELBO, AdamW,
//! checkpoints and a JSON-lines log.
//!
//! Everything random is derived from `(seed, stream)` where the stream is a
//! function of the iteration, so a run resumed from a checkpoint replays the
//! uninterrupted run exactly.

mod adam;
mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use config::{RunConfig, CONFIG_KEYS};

use crate::error::{HvaeError, Result};
use crate::graph::Graph;
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, Hvae, ParamStore};
use crate::objectives::{elbo_graph, kl_anneal_coefficient, LossWeights};
use crate::phantom::{Dataset, SplitData};
use crate::rng::{stream_rng, streams, NoiseSource};
use crate::tensor::Tensor;

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// Number of completed optimisation steps after this one.
    pub iteration: u64,
    pub beta: f64,
    pub kl_per_layer: Vec<f64>,
    pub gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vamprior_extra_kl: Vec<f64>,
    pub recon_ll: f64,
    pub recon_mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supervision_loss: Option<f64>,
    pub total_loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Training state over an in-memory training split.
pub struct Trainer {
    cfg: RunConfig,
    model: Hvae<f32>,
    adam: Adam<f32>,
    data: SplitData,
    epoch_perm: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    /// Fresh model; VamPrior pseudo-inputs start as perturbed training images.
    pub fn new(cfg: RunConfig, data: SplitData) -> Result<Self> {
        let cfg = Self::bind_resolution(cfg, &data)?;
        let mut model = Hvae::<f32>::new(cfg.model.clone(), cfg.seed)?;
        if let Some(idx) = model.pseudo_input_index() {
            let u = Self::initial_pseudo_inputs(&cfg, &data);
            model.params_mut().tensors_mut()[idx] = u;
        }
        let adam = Self::fresh_adam(&cfg, model.params());
        Ok(Trainer {
            cfg,
            model,
            adam,
            data,
            epoch_perm: None,
        })
    }

    /// Continues from a checkpoint; the model configuration must match.
    pub fn from_checkpoint(cfg: RunConfig, ck: Checkpoint, data: SplitData) -> Result<Self> {
        let cfg = Self::bind_resolution(cfg, &data)?;
        if ck.config.variant != cfg.model.variant {
            return Err(HvaeError::Mismatch(format!(
                "checkpoint variant {} but configuration requests {}",
                ck.config.variant, cfg.model.variant
            )));
        }
        if ck.config != cfg.model {
            return Err(HvaeError::Mismatch(format!(
                "model configuration differs: checkpoint {:?} vs requested {:?}",
                ck.config, cfg.model
            )));
        }
        let mut model = Hvae::<f32>::new(cfg.model.clone(), cfg.seed)?;
        diff_shapes(model.params(), &ck.params)?;
        model.params_mut().assign(&ck.params)?;
        let mut adam = Self::fresh_adam(&cfg, model.params());
        if let Some((m, v)) = ck.moments {
            diff_shapes(model.params(), &m)?;
            diff_shapes(model.params(), &v)?;
            adam.m = m.tensors().to_vec();
            adam.v = v.tensors().to_vec();
        } else if ck.iteration > 0 {
            return Err(HvaeError::Mismatch("checkpoint has no optimizer state to resume from".into()));
        }
        adam.t = ck.iteration;
        Ok(Trainer {
            cfg,
            model,
            adam,
            data,
            epoch_perm: None,
        })
    }

    fn bind_resolution(mut cfg: RunConfig, data: &SplitData) -> Result<RunConfig> {
        if data.is_empty() {
            return Err(HvaeError::Data("training split is empty".into()));
        }
        let r = data.images.shape()[1];
        if r % (1 << cfg.model.levels) != 0 {
            return Err(HvaeError::Config(format!(
                "dataset resolution {r} not divisible by 2^{}",
                cfg.model.levels
            )));
        }
        cfg.model.resolution = r;
        cfg.validate()?;
        Ok(cfg)
    }

    fn fresh_adam(cfg: &RunConfig, params: &ParamStore<f32>) -> Adam<f32> {
        let shapes: Vec<&[usize]> = params.tensors().iter().map(|t| t.shape()).collect();
        Adam::new(cfg.adam.clone(), &shapes)
    }

    fn initial_pseudo_inputs(cfg: &RunConfig, data: &SplitData) -> Tensor<f32> {
        let mut rng = stream_rng(cfg.seed, streams::PSEUDO_INPUTS);
        let k = cfg.model.components;
        let n = data.len();
        let rows: Vec<usize> = if n >= k {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(k);
            all
        } else {
            (0..k).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut noise = NoiseSource::from_rng(rng).with_scale(cfg.pseudo_input_noise);
        let base = data.images.select(&rows);
        let eps: Tensor<f32> = noise.draw(base.shape());
        base.zip_map(&eps, |a, b| a + b).expect("same shape")
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Hvae<f32> {
        &self.model
    }

    /// Completed optimisation steps.
    pub fn iteration(&self) -> u64 {
        self.adam.t
    }

    /// Training rows of the minibatch used at step `t`: sample position
    /// `t * B + j` walks seeded per-epoch permutations.
    fn batch_rows(&mut self, t: u64) -> Vec<usize> {
        let n = self.data.len() as u64;
        let b = self.cfg.batch_size as u64;
        (0..b)
            .map(|j| {
                let pos = t * b + j;
                let epoch = pos / n;
                if self.epoch_perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n as usize).collect();
                    perm.shuffle(&mut stream_rng(self.cfg.seed, streams::EPOCH_BASE + epoch));
                    self.epoch_perm = Some((epoch, perm));
                }
                self.epoch_perm.as_ref().expect("set above").1[(pos % n) as usize]
            })
            .collect()
    }

    /// One optimisation step.
    pub fn step(&mut self) -> Result<TrainLogRecord> {
        let t = self.adam.t;
        let rows = self.batch_rows(t);
        let x = self.data.images.select(&rows);
        let mask = self
            .cfg
            .model
            .supervision
            .enabled
            .then(|| self.data.masks.select(&rows));
        let mut noise = NoiseSource::new(self.cfg.seed, streams::TRAIN_NOISE_BASE + t);
        let weights = LossWeights {
            beta: kl_anneal_coefficient(t, &self.cfg.schedule),
            balancing: self.cfg.balancing,
            supervision_weight: self.cfg.model.supervision.loss_weight,
        };

        let mut g = Graph::new();
        let p = self.model.params().bind(&mut g);
        let xv = g.constant(x.clone());
        let fwd = self.model.forward(&mut g, &p, xv, &mut noise);
        let (loss, bd) = elbo_graph(&mut g, self.cfg.model.variant, &fwd, xv, mask.as_ref(), &weights, &mut noise)?;
        if let Some((term, _)) = bd.first_non_finite() {
            return Err(HvaeError::NonFinite { iteration: t + 1, term });
        }
        let recon = g.value(fwd.top_down.image_mean);
        let recon_mse = recon
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / x.len() as f64;

        let mut grads = g.backward(loss);
        let mut grads: Vec<Option<Tensor<f32>>> = p.iter().map(|&v| grads.take(v)).collect();
        drop(g);
        let (grad_norm, clipped) = clip_global_norm(&mut grads, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(HvaeError::NonFinite {
                iteration: t + 1,
                term: "gradient".into(),
            });
        }
        self.adam.step(self.model.params_mut().tensors_mut(), &grads);

        Ok(TrainLogRecord {
            iteration: t + 1,
            beta: bd.beta,
            kl_per_layer: bd.kl_per_layer,
            gamma: bd.gamma,
            vamprior_extra_kl: bd.vamprior_extra_kl,
            recon_ll: bd.recon_ll,
            recon_mse,
            supervision_loss: bd.supervision_loss,
            total_loss: bd.total_weighted_loss,
            grad_norm,
            clipped,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let names = self.model.params().names();
        let store = |ts: &[Tensor<f32>]| {
            let mut s = ParamStore::new();
            for (n, t) in names.iter().zip(ts) {
                s.push(n.clone(), t.clone());
            }
            s
        };
        Checkpoint {
            config: self.cfg.model.clone(),
            iteration: self.adam.t,
            params: self.model.params().clone(),
            moments: Some((store(&self.adam.m), store(&self.adam.v))),
            meta: Default::default(),
        }
    }

    pub fn into_model(self) -> Hvae<f32> {
        self.model
    }
}

/// Lists every tensor whose name or shape differs between two stores.
pub fn diff_shapes(expected: &ParamStore<f32>, found: &ParamStore<f32>) -> Result<()> {
    let mut diffs = Vec::new();
    for (n, t) in expected.names().iter().zip(expected.tensors()) {
        match found.get(n) {
            None => diffs.push(format!("{n}: missing (expected {:?})", t.shape())),
            Some(f) if f.shape() != t.shape() => {
                diffs.push(format!("{n}: expected {:?}, found {:?}", t.shape(), f.shape()))
            }
            _ => {}
        }
    }
    for n in found.names() {
        if expected.get(n).is_none() {
            diffs.push(format!("{n}: unexpected"));
        }
    }
    if diffs.is_empty() && expected.names() != found.names() {
        diffs.push("parameter order differs".into());
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(HvaeError::Mismatch(format!("shape mismatch: {}", diffs.join("; "))))
    }
}

/// Fixed layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.checkpoints(), self.reports(), self.figures()] {
            fs::create_dir_all(&d).map_err(|e| HvaeError::io(&d, e))?;
        }
        Ok(())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    /// Wall-clock timings, kept apart from the deterministic log.
    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.jsonl")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn checkpoint_at(&self, iteration: u64) -> PathBuf {
        self.checkpoints().join(format!("ckpt_{iteration:08}.hvae"))
    }

    /// Highest-iteration checkpoint in the run, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(u64, PathBuf)> = None;
        for e in fs::read_dir(&dir).map_err(|e| HvaeError::io(&dir, e))? {
            let p = e.map_err(|e| HvaeError::io(&dir, e))?.path();
            let it = p
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("ckpt_"))
                .and_then(|n| n.strip_suffix(".hvae"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(it) = it {
                if best.as_ref().map_or(true, |(b, _)| it > *b) {
                    best = Some((it, p));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub records: Vec<TrainLogRecord>,
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    iteration: u64,
    error: &'a str,
    term: &'a str,
}

fn open_append(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HvaeError::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Runs `trainer` to `cfg.max_iters`, logging and checkpointing into `dir`.
fn drive(mut trainer: Trainer, dir: &RunDir) -> Result<TrainOutcome> {
    let max_iters = trainer.cfg.max_iters;
    let every = trainer.cfg.checkpoint_every;
    let mut log = open_append(&dir.log())?;
    let mut timing = open_append(&dir.timing())?;
    let mut records = Vec::new();
    let mut last = None;
    while trainer.iteration() < max_iters {
        let start = Instant::now();
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let HvaeError::NonFinite { iteration, term } = &e {
                    let line = serde_json::to_string(&FailureRecord {
                        iteration: *iteration,
                        error: "non_finite",
                        term,
                    })?;
                    writeln!(log, "{line}").map_err(|io| HvaeError::io(dir.log(), io))?;
                    log.flush().map_err(|io| HvaeError::io(dir.log(), io))?;
                }
                return Err(e);
            }
        };
        let line = serde_json::to_string(&rec)?;
        writeln!(log, "{line}").map_err(|e| HvaeError::io(dir.log(), e))?;
        writeln!(
            timing,
            "{{\"iteration\":{},\"wall_ms\":{:.3}}}",
            rec.iteration,
            start.elapsed().as_secs_f64() * 1e3
        )
        .map_err(|e| HvaeError::io(dir.timing(), e))?;
        let it = rec.iteration;
        records.push(rec);
        if it % every == 0 || it == max_iters {
            log.flush().map_err(|e| HvaeError::io(dir.log(), e))?;
            let p = dir.checkpoint_at(it);
            write_checkpoint(&p, &trainer.checkpoint())?;
            last = Some(p);
        }
    }
    log.flush().map_err(|e| HvaeError::io(dir.log(), e))?;
    timing.flush().map_err(|e| HvaeError::io(dir.timing(), e))?;
    let final_checkpoint = match last {
        Some(p) => p,
        None => {
            let p = dir.checkpoint_at(trainer.iteration());
            write_checkpoint(&p, &trainer.checkpoint())?;
            p
        }
    };
    Ok(TrainOutcome {
        final_checkpoint,
        records,
    })
}

/// Trains from scratch into `dir` on the training split of `cfg.data`.
pub fn train(cfg: &RunConfig, dir: &RunDir) -> Result<TrainOutcome> {
    let ds = Dataset::open(&cfg.data)?;
    let trainer = Trainer::new(cfg.clone(), ds.train()?)?;
    dir.create()?;
    fs::write(dir.config(), trainer.config().to_text()).map_err(|e| HvaeError::io(dir.config(), e))?;
    for p in [dir.log(), dir.timing()] {
        if p.exists() {
            fs::remove_file(&p).map_err(|e| HvaeError::io(&p, e))?;
        }
    }
    drive(trainer, dir)
}

/// Continues training from `checkpoint` up to `cfg.max_iters`. Log lines
/// past the checkpoint's iteration are discarded first so the log reads as
/// one uninterrupted run.
pub fn resume(checkpoint: &Path, cfg: &RunConfig, dir: &RunDir) -> Result<TrainOutcome> {
    let ck = read_checkpoint(checkpoint)?;
    let ds = Dataset::open(&cfg.data)?;
    let start = ck.iteration;
    let trainer = Trainer::from_checkpoint(cfg.clone(), ck, ds.train()?)?;
    dir.create()?;
    fs::write(dir.config(), trainer.config().to_text()).map_err(|e| HvaeError::io(dir.config(), e))?;
    for p in [dir.log(), dir.timing()] {
        truncate_log(&p, start)?;
    }
    drive(trainer, dir)
}

fn truncate_log(path: &Path, keep_through: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| HvaeError::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let it = v.get("iteration").and_then(|i| i.as_u64()).unwrap_or(u64::MAX);
        if it <= keep_through && v.get("error").is_none() {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| HvaeError::io(path, e))
}

/// Parses a `train_log.jsonl` stream, skipping failure records.
pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| HvaeError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("error").is_none() {
            out.push(serde_json::from_value(v)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // f(p) = (p - 3)^2 at p = 1: g = -4.
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::<f64>::new(cfg, &[&[1]]);
        let mut p = vec![Tensor::from_vec(&[1], vec![1.0]).unwrap()];
        let g = vec![Some(Tensor::from_vec(&[1], vec![-4.0]).unwrap())];
        adam.step(&mut p, &g);
        let m = 0.1 * -4.0;
        let v = 0.001 * 16.0;
        let want = 1.0 - 0.1 * (m / 0.1) / ((v / 0.001f64).sqrt() + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-10);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::<f64>::new(cfg.clone(), &[&[1]]);
        let mut p = vec![Tensor::from_vec(&[1], vec![2.0]).unwrap()];
        adam.step(&mut p, &[None]);
        let want = 2.0 * (1.0 - cfg.lr * cfg.weight_decay);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![Some(Tensor::from_vec(&[2], vec![300.0f64, 400.0]).unwrap()), None];
        let (n, c) = clip_global_norm(&mut g, 100.0);
        assert!(c && (n - 500.0).abs() < 1e-9);
        assert!((global_norm(&g) - 100.0).abs() < 1e-9);
    }
}
