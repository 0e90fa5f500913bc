//! `HVAE1` checkpoint container.
//!
//! Layout: the magic line `HVAE1`, a UTF-8 manifest terminated by a line
//! `end`, then every tensor as raw little-endian `f32`. Manifest lines are
//! `meta <key> <value>` or `tensor <name> <d0,d1,..> <offset>`, where the
//! offset counts floats from the start of the data block.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::{ModelConfig, SupervisionConfig, Variant};
use super::params::ParamStore;
use crate::error::{HvaeError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "HVAE1";

const ADAM_M: &str = "adam.m:";
const ADAM_V: &str = "adam.v:";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Completed optimisation steps.
    pub iteration: u64,
    pub params: ParamStore<f32>,
    /// Adam first and second moments, aligned with `params`.
    pub moments: Option<(ParamStore<f32>, ParamStore<f32>)>,
    /// Free-form key/value metadata (no whitespace in keys, no newlines).
    pub meta: BTreeMap<String, String>,
}

fn config_meta(c: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("variant", c.variant.to_string()),
        ("levels", c.levels.to_string()),
        ("resolution", c.resolution.to_string()),
        ("latent_channels", c.latent_channels.to_string()),
        ("base_channels", c.base_channels.to_string()),
        ("max_channels", c.max_channels.to_string()),
        ("components", c.components.to_string()),
        ("seg_channels", c.seg_channels.to_string()),
        ("supervision.enabled", c.supervision.enabled.to_string()),
        ("supervision.target_layer", c.supervision.target_layer.to_string()),
        ("supervision.loss_weight", c.supervision.loss_weight.to_string()),
    ]
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut manifest = format!("{CHECKPOINT_MAGIC}\n");
    for (k, v) in config_meta(&ck.config) {
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    manifest.push_str(&format!("meta iteration {}\n", ck.iteration));
    for (k, v) in &ck.meta {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(HvaeError::contract(format!("unencodable meta entry '{k}'")));
        }
        manifest.push_str(&format!("meta x.{k} {v}\n"));
    }
    let mut stores: Vec<(&str, &ParamStore<f32>)> = vec![("", &ck.params)];
    if let Some((m, v)) = &ck.moments {
        stores.push((ADAM_M, m));
        stores.push((ADAM_V, v));
    }
    let tensors: Vec<(String, &Tensor<f32>)> = stores
        .iter()
        .flat_map(|(prefix, s)| {
            s.names()
                .iter()
                .zip(s.tensors())
                .map(move |(n, t)| (format!("{prefix}{n}"), t))
        })
        .collect();
    let mut offset = 0usize;
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("tensor {name} {} {offset}\n", dims.join(",")));
        offset += t.len();
    }
    manifest.push_str("end\n");

    let mut bytes = manifest.into_bytes();
    bytes.reserve(offset * 4);
    for (_, t) in &tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| HvaeError::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| HvaeError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HvaeError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HvaeError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HvaeError::io(path, e))?;
    let fail = |reason: String| HvaeError::format(path, reason);
    let magic = format!("{CHECKPOINT_MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(fail("bad magic, not an HVAE1 checkpoint".into()));
    }
    let end_marker = b"\nend\n";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| fail("manifest not terminated".into()))?;
    let manifest = std::str::from_utf8(&bytes[magic.len()..end + 1]).map_err(|_| fail("manifest is not UTF-8".into()))?;
    let data = &bytes[end + end_marker.len()..];
    if data.len() % 4 != 0 {
        return Err(fail("data block is not a whole number of f32".into()));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut meta = BTreeMap::new();
    let mut tensors = Vec::new();
    for line in manifest.lines() {
        let mut it = line.splitn(3, ' ');
        match (it.next(), it.next(), it.next()) {
            (Some("meta"), Some(k), v) => {
                meta.insert(k.to_string(), v.unwrap_or("").to_string());
            }
            (Some("tensor"), Some(name), Some(rest)) => {
                let (dims, off) = rest.split_once(' ').ok_or_else(|| fail(format!("bad tensor line '{line}'")))?;
                let shape = if dims.is_empty() {
                    Vec::new()
                } else {
                    dims.split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| fail(format!("bad shape in '{line}'")))?
                };
                let off: usize = off.parse().map_err(|_| fail(format!("bad offset in '{line}'")))?;
                let n: usize = shape.iter().product();
                let slice = floats
                    .get(off..off + n)
                    .ok_or_else(|| fail(format!("tensor {name} runs past end of data")))?;
                tensors.push((name.to_string(), Tensor::from_vec(&shape, slice.to_vec())?));
            }
            _ => return Err(fail(format!("unrecognised manifest line '{line}'"))),
        }
    }

    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| fail(format!("missing meta '{k}'")));
    let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| fail(format!("bad meta '{k}'"))) };
    let config = ModelConfig {
        variant: get("variant")?.parse::<Variant>()?,
        levels: num("levels")?,
        resolution: num("resolution")?,
        latent_channels: num("latent_channels")?,
        base_channels: num("base_channels")?,
        max_channels: num("max_channels")?,
        components: num("components")?,
        seg_channels: num("seg_channels")?,
        supervision: SupervisionConfig {
            enabled: get("supervision.enabled")? == "true",
            target_layer: num("supervision.target_layer")?,
            loss_weight: get("supervision.loss_weight")?
                .parse()
                .map_err(|_| fail("bad supervision.loss_weight".into()))?,
        },
    };
    let iteration = get("iteration")?.parse().map_err(|_| fail("bad iteration".into()))?;

    let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix(ADAM_M) {
            m.push(n, t);
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            v.push(n, t);
        } else {
            params.push(name, t);
        }
    }
    let moments = if m.is_empty() && v.is_empty() {
        None
    } else {
        if m.names() != params.names() || v.names() != params.names() {
            return Err(fail("optimizer moments do not align with parameters".into()));
        }
        Some((m, v))
    };
    let extra = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("x.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint {
        config,
        iteration,
        params,
        moments,
        meta: extra,
    })
}
