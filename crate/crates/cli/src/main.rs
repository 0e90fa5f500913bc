//! `hvae`: one executable for the experiment lifecycle.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure. Every failure prints exactly one JSON line on stderr.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use sha2::{Digest, Sha256};

use hvae_core::evalsuite::{
    conditional_resample, evaluate_reconstruction, informativeness_probe, sensitivity_scan, style_mix, write_f32,
    write_json, write_pgm_grid, LassoConfig, ResampleMode, SENSITIVITY_FACTORS,
};
use hvae_core::model::{read_checkpoint, Hvae};
use hvae_core::phantom::{make_dataset, Dataset, SplitData};
use hvae_core::rng::NoiseSource;
use hvae_core::trainer::{resume, train, RunConfig, RunDir};
use hvae_core::{HvaeError, Tensor};

#[derive(Parser, Debug)]
#[command(name = "hvae", version, about = "Hierarchical VAE experiments on synthetic brain phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset directory.
    GenData(GenDataArgs),
    /// Train a model; writes config.resolved, checkpoints/ and train_log.jsonl.
    Train(TrainArgs),
    /// Reconstruction metrics on a split (reports/metrics.json).
    Eval(EvalArgs),
    /// Layer-wise Lasso informativeness probe (reports/probe.json).
    Probe(ProbeArgs),
    /// Ancestral samples (figures/samples.pgm, .f32).
    Sample(SampleArgs),
    /// Style mixing between pairs of test images (figures/mix.pgm, .f32).
    Mix(MixArgs),
    /// Conditional resampling around the pathology group (figures/resample.pgm, .f32).
    Resample(ResampleArgs),
    /// Per-group attribute sensitivity scan (reports/sensitivity.json).
    Sensitivity(SensitivityArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of phantoms.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Dataset directory (default: a fresh directory under runs/).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Overrides on top of the config file; unset flags keep file or default values.
#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Enable lesion supervision of this group.
    #[arg(long)]
    supervise_layer: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory (default: runs/train-<config hash>-<timestamp>).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where the model comes from and where outputs go.
#[derive(Args, Debug)]
struct ModelArgs {
    /// Run directory; its latest checkpoint and data path are used and
    /// outputs land in its reports/ and figures/.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (default: the run's configured data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (default: the run, or a fresh directory under runs/).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Split to evaluate.
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Seed of the FID-surrogate feature network.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Lasso penalty.
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct MixArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Groups taken from image B, comma-separated (default: the supervised group).
    #[arg(long)]
    layers: Option<String>,
    /// Number of (A, B) pairs drawn from the test split.
    #[arg(long, default_value_t = 8)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ResampleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "resample", value_parser = ["resample", "transplant"])]
    mode: String,
    /// Test-split position of the image to edit.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Draws in resample mode.
    #[arg(long, default_value_t = 8)]
    draws: usize,
    /// Test-split positions of donors in transplant mode, comma-separated.
    #[arg(long)]
    donors: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Group to resample (default: the supervised group).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of test images scanned (default: all).
    #[arg(long)]
    n: Option<usize>,
}

// ---- errors ---------------------------------------------------------------

struct Failure {
    kind: &'static str,
    code: u8,
    message: String,
}

impl From<HvaeError> for Failure {
    fn from(e: HvaeError) -> Self {
        let (kind, code) = match &e {
            HvaeError::Config(_) | HvaeError::Contract(_) => ("usage", 1),
            HvaeError::NonFinite { .. } => ("numeric", 3),
            HvaeError::Mismatch(_) => ("mismatch", 2),
            _ => ("data", 2),
        };
        Failure {
            kind,
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "usage",
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn fail(f: Failure) -> ExitCode {
    let line = serde_json::json!({ "error": f.kind, "code": f.code, "message": f.message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(f.code)
}

// ---- helpers --------------------------------------------------------------

/// Shows RunConfig defaults in `train --help` so they cannot drift.
fn command_with_defaults() -> clap::Command {
    let d = RunConfig::default();
    let keys = [
        ("variant", "variant"),
        ("levels", "levels"),
        ("k", "k"),
        ("supervise_layer", "supervise_layer"),
        ("lr", "lr"),
        ("weight_decay", "weight_decay"),
        ("batch", "batch"),
        ("iters", "iters"),
        ("seed", "seed"),
        ("data", "data"),
        ("checkpoint_every", "checkpoint_every"),
    ];
    Cli::command().mut_subcommand("train", |mut c| {
        for (arg, key) in keys {
            let v = d.get(key).expect("known key");
            c = c.mut_arg(arg, |a| {
                let help = a.get_help().map(|h| h.to_string()).unwrap_or_default();
                let help = if help.is_empty() {
                    format!("[default: {v}]")
                } else {
                    format!("{help} [default: {v}]")
                };
                a.help(help)
            });
        }
        c
    })
}

fn configure_threads() -> CliResult<()> {
    let n = match std::env::var("HVAE_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| usage(format!("HVAE_THREADS must be a positive integer, got '{v}'")))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot configure thread pool: {e}")))
}

fn fresh_dir(command: &str, resolved: &str) -> PathBuf {
    let hash = Sha256::digest(format!("{command}\n{resolved}").as_bytes());
    let hex: String = hash.iter().take(6).map(|b| format!("{b:02x}")).collect();
    let ts = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    PathBuf::from("runs").join(format!("{command}-{hex}-{ts}"))
}

fn print_resolved(resolved: &str) {
    println!("# resolved configuration");
    print!("{resolved}");
}

fn resolved_text(pairs: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn parse_list(text: &str, what: &str) -> CliResult<Vec<usize>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| usage(format!("invalid {what} '{p}'"))))
        .collect()
}

fn create_dir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| Failure::from(HvaeError::io(p, e)))
}

/// A loaded model with its data and output directory.
struct Loaded {
    model: Hvae<f32>,
    data: Dataset,
    out: RunDir,
}

fn load(args: &ModelArgs, command: &str, extra: &[(&str, String)]) -> CliResult<Loaded> {
    let (checkpoint, run_cfg) = match (&args.run, &args.checkpoint) {
        (Some(run), None) => {
            let dir = RunDir::new(run);
            let ck = dir
                .latest_checkpoint()?
                .ok_or_else(|| Failure::from(HvaeError::Data(format!("no checkpoint in {}", run.display()))))?;
            let text = std::fs::read_to_string(dir.config()).map_err(|e| Failure::from(HvaeError::io(dir.config(), e)))?;
            (ck, Some(RunConfig::from_text(&text)?))
        }
        (None, Some(ck)) => (ck.clone(), None),
        _ => return Err(usage("exactly one of --run or --checkpoint is required")),
    };
    let data_dir = match (&args.data, &run_cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => c.data.clone(),
        (None, None) => return Err(usage("--data is required with --checkpoint")),
    };
    let mut pairs: Vec<(&str, String)> = vec![
        ("checkpoint", checkpoint.display().to_string()),
        ("data", data_dir.display().to_string()),
    ];
    pairs.extend(extra.iter().cloned());
    let resolved = resolved_text(&pairs);
    print_resolved(&resolved);

    let ck = read_checkpoint(&checkpoint)?;
    let model = Hvae::from_params(ck.config, ck.params)?;
    let data = Dataset::open(&data_dir)?;
    if data.resolution() != model.config().resolution {
        return Err(HvaeError::Data(format!(
            "dataset resolution {} differs from model resolution {}",
            data.resolution(),
            model.config().resolution
        ))
        .into());
    }
    let out = match (&args.out, &args.run) {
        (Some(o), _) => RunDir::new(o),
        (None, Some(r)) => RunDir::new(r),
        (None, None) => RunDir::new(fresh_dir(command, &resolved)),
    };
    for d in [out.reports(), out.figures()] {
        create_dir(&d)?;
    }
    if args.run.is_none() || args.out.is_some() {
        std::fs::write(out.root.join(format!("{command}.resolved")), &resolved)
            .map_err(|e| Failure::from(HvaeError::io(&out.root, e)))?;
    }
    Ok(Loaded {
        model,
        data,
        out,
    })
}

fn pathology_layer(model: &Hvae<f32>) -> usize {
    model.config().supervision.target_layer.min(model.levels())
}

fn select(split: &SplitData, rows: &[usize]) -> CliResult<Tensor<f32>> {
    if let Some(&bad) = rows.iter().find(|&&r| r >= split.len()) {
        return Err(usage(format!("index {bad} out of range for a test split of {}", split.len())));
    }
    Ok(split.images.select(rows))
}

// ---- subcommands ----------------------------------------------------------

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let resolved = resolved_text(&[
        ("n", a.n.to_string()),
        ("seed", a.seed.to_string()),
        ("resolution", a.resolution.to_string()),
    ]);
    let out = a.out.clone().unwrap_or_else(|| fresh_dir("gen-data", &resolved));
    print_resolved(&resolved);
    let m = make_dataset(a.n, a.seed, a.resolution, &out)?;
    println!(
        "dataset {} train {} val {} test {}",
        out.display(),
        m.splits.train.len(),
        m.splits.val.len(),
        m.splits.test.len()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::from(HvaeError::io(p, e)))?;
        cfg.apply_text(&text)?;
    }
    let mut set = |k: &str, v: Option<String>| -> CliResult<()> {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
        Ok(())
    };
    set("variant", a.variant.clone())?;
    set("levels", a.levels.map(|v| v.to_string()))?;
    set("k", a.k.map(|v| v.to_string()))?;
    if let Some(l) = a.supervise_layer {
        set("supervise", Some("true".into()))?;
        set("supervise_layer", Some(l.to_string()))?;
    }
    set("lr", a.lr.map(|v| v.to_string()))?;
    set("weight_decay", a.weight_decay.map(|v| v.to_string()))?;
    set("batch", a.batch.map(|v| v.to_string()))?;
    set("iters", a.iters.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("data", a.data.as_ref().map(|v| v.display().to_string()))?;
    set("checkpoint_every", a.checkpoint_every.map(|v| v.to_string()))?;
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    // Resolution follows the dataset.
    if let Ok(ds) = Dataset::open(&cfg.data) {
        cfg.model.resolution = ds.resolution();
    }
    cfg.validate()?;
    let resolved = cfg.to_text();
    print_resolved(&resolved);
    let dir = RunDir::new(a.out.clone().unwrap_or_else(|| fresh_dir("train", &resolved)));
    let out = match &a.resume {
        Some(ck) => resume(ck, &cfg, &dir)?,
        None => train(&cfg, &dir)?,
    };
    if let Some(last) = out.records.last() {
        println!(
            "iteration {} total_loss {:.6} recon_mse {:.6}",
            last.iteration, last.total_loss, last.recon_mse
        );
    }
    println!("run {}", dir.root.display());
    println!("checkpoint {}", out.final_checkpoint.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let l = load(&a.model, "eval", &[("split", a.split.clone()), ("seed", a.seed.to_string())])?;
    let split = match a.split.as_str() {
        "train" => l.data.train()?,
        "val" => l.data.val()?,
        _ => l.data.test()?,
    };
    let rep = evaluate_reconstruction(&l.model, &split, a.seed)?;
    let p = l.out.reports().join("metrics.json");
    write_json(&p, &rep)?;
    println!("{}", serde_json::to_string(&rep).expect("serialisable"));
    Ok(())
}

fn probe_cmd(a: &ProbeArgs) -> CliResult<()> {
    let l = load(&a.model, "probe", &[("alpha", a.alpha.to_string())])?;
    let cfg = LassoConfig {
        alpha: a.alpha,
        ..LassoConfig::default()
    };
    let rep = informativeness_probe(&l.model, &l.data.train()?, &l.data.test()?, &cfg)?;
    write_json(&l.out.reports().join("probe.json"), &rep)?;
    println!("{}", serde_json::to_string(&rep).expect("serialisable"));
    Ok(())
}

fn sample_cmd(a: &SampleArgs) -> CliResult<()> {
    let l = load(
        &a.model,
        "sample",
        &[
            ("n", a.n.to_string()),
            ("temperature", a.temperature.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    let x = l.model.generate(a.n, a.temperature, a.seed)?;
    write_pgm_grid(&l.out.figures().join("samples.pgm"), &[x.clone()])?;
    write_f32(&l.out.figures().join("samples.f32"), &x)?;
    println!("wrote {}", l.out.figures().join("samples.pgm").display());
    Ok(())
}

fn mix_cmd(a: &MixArgs) -> CliResult<()> {
    let l = load(
        &a.model,
        "mix",
        &[
            ("layers", a.layers.clone().unwrap_or_else(|| "<supervised group>".into())),
            ("pairs", a.pairs.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    let layers = match &a.layers {
        Some(t) => parse_list(t, "layer")?,
        None => vec![pathology_layer(&l.model)],
    };
    let test = l.data.test()?;
    if test.len() < 2 || a.pairs == 0 {
        return Err(usage("mix needs --pairs >= 1 and a test split of at least 2 images"));
    }
    // Anatomy donors A: lesion-free first when available; B: largest lesions.
    let mut order: Vec<usize> = (0..test.len()).collect();
    let areas = test.lesion_areas();
    order.sort_by(|&i, &j| areas[i].total_cmp(&areas[j]).then(i.cmp(&j)));
    let shift = (a.seed as usize) % test.len();
    let pairs = a.pairs.min(test.len() / 2);
    let ia: Vec<usize> = (0..pairs).map(|i| order[(i + shift) % test.len()]).collect();
    let ib: Vec<usize> = (0..pairs).map(|i| order[test.len() - 1 - (i + shift) % test.len()]).collect();
    let xa = select(&test, &ia)?;
    let xb = select(&test, &ib)?;
    let mixed = style_mix(&l.model, &xa, &xb, &layers)?;
    let ra = style_mix(&l.model, &xa, &xb, &[])?;
    write_pgm_grid(&l.out.figures().join("mix.pgm"), &[xa, xb, ra, mixed.clone()])?;
    write_f32(&l.out.figures().join("mix.f32"), &mixed)?;
    println!("wrote {}", l.out.figures().join("mix.pgm").display());
    Ok(())
}

fn resample_cmd(a: &ResampleArgs) -> CliResult<()> {
    let l = load(
        &a.model,
        "resample",
        &[
            ("mode", a.mode.clone()),
            ("index", a.index.to_string()),
            ("draws", a.draws.to_string()),
            ("donors", a.donors.clone().unwrap_or_default()),
            ("temperature", a.temperature.to_string()),
            ("seed", a.seed.to_string()),
        ],
    )?;
    let test = l.data.test()?;
    let x = select(&test, &[a.index])?;
    let layer = a.layer.unwrap_or_else(|| pathology_layer(&l.model));
    let donors;
    let mode = if a.mode == "transplant" {
        let rows = parse_list(a.donors.as_deref().unwrap_or(""), "donor")?;
        if rows.is_empty() {
            return Err(usage("transplant mode needs --donors"));
        }
        donors = select(&test, &rows)?;
        ResampleMode::TransplantPathology { donors: Some(&donors) }
    } else {
        ResampleMode::ResamplePathology {
            draws: a.draws,
            temperature: a.temperature,
        }
    };
    let out = conditional_resample(&l.model, &x, layer, mode, a.seed)?;
    if out.is_empty() {
        return Err(usage("nothing to draw: --draws must be >= 1"));
    }
    let row = Tensor::stack(&out.iter().collect::<Vec<_>>())?;
    write_pgm_grid(&l.out.figures().join("resample.pgm"), &[x, row.clone()])?;
    write_f32(&l.out.figures().join("resample.f32"), &row)?;
    println!("wrote {}", l.out.figures().join("resample.pgm").display());
    Ok(())
}

fn sensitivity_cmd(a: &SensitivityArgs) -> CliResult<()> {
    let l = load(
        &a.model,
        "sensitivity",
        &[("n", a.n.map(|n| n.to_string()).unwrap_or_else(|| "all".into()))],
    )?;
    let test = l.data.test()?;
    let rows: Vec<usize> = (0..a.n.unwrap_or(test.len()).min(test.len())).collect();
    let sub = test.subset(&rows);
    let reference = l
        .model
        .config()
        .supervision
        .enabled
        .then(|| pathology_layer(&l.model));
    let rep = sensitivity_scan(&l.model, &sub.images, &sub.masks, &SENSITIVITY_FACTORS, reference)?;
    write_json(&l.out.reports().join("sensitivity.json"), &rep)?;
    // One row per group: the first image decoded with that group scaled.
    if let Some(first) = rows.first() {
        let x = sub.images.select(&[*first]);
        let lat = l.model.infer(&x, &mut NoiseSource::new(0, 0).with_scale(0.0))?.latents;
        let mut grid = Vec::new();
        for layer in 0..=l.model.levels() {
            let mut row = vec![l.model.decode_latents(&lat)?];
            for f in SENSITIVITY_FACTORS {
                row.push(l.model.decode_latents(&lat.scale_layer(layer, f)?)?);
            }
            grid.push(Tensor::stack(&row.iter().collect::<Vec<_>>())?);
        }
        write_pgm_grid(&l.out.figures().join("sensitivity.pgm"), &grid)?;
    }
    println!("{}", serde_json::to_string(&rep).expect("serialisable"));
    Ok(())
}

fn main() -> ExitCode {
    let matches = match command_with_defaults().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let msg = e.render().to_string();
                    let first = msg.lines().next().unwrap_or("invalid arguments");
                    fail(usage(first.trim_start_matches("error: ").to_string()))
                }
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return fail(usage(e.to_string())),
    };
    if let Err(f) = configure_threads() {
        return fail(f);
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Probe(a) => probe_cmd(a),
        Command::Sample(a) => sample_cmd(a),
        Command::Mix(a) => mix_cmd(a),
        Command::Resample(a) => resample_cmd(a),
        Command::Sensitivity(a) => sensitivity_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
