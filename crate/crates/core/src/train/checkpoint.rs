//! Checkpoint store: a text manifest plus a little-endian f32 blob.
//!
//! A checkpoint is a directory holding `manifest.txt` (format version, model
//! dimensions, training metadata, and one `entry` line per array) and
//! `params.bin` (the arrays' f32 values, concatenated in manifest order).
//! Saving a loaded checkpoint reproduces both files byte for byte.

use super::{contract, Result, TrainError};
use crate::model::{ModelConfig, ParamStore, PolicyModel};
use crate::train::adam::Adam;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_digest: String,
    pub dev_wer: Option<f64>,
    pub best_dev_wer: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EntryKind {
    Param,
    AdamM,
    AdamV,
}

impl EntryKind {
    fn as_str(&self) -> &'static str {
        match self {
            EntryKind::Param => "param",
            EntryKind::AdamM => "adam_m",
            EntryKind::AdamV => "adam_v",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "param" => Some(EntryKind::Param),
            "adam_m" => Some(EntryKind::AdamM),
            "adam_v" => Some(EntryKind::AdamV),
            _ => None,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:?}"),
        None => "none".to_string(),
    }
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "none" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| contract(format!("bad float {s:?} in manifest")))
}

/// Writes `dir/manifest.txt` and `dir/params.bin`.
pub fn save_checkpoint(
    dir: &Path,
    model: &PolicyModel<f32>,
    optimizer: Option<&Adam<f32>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let store = model.params();
    let cfg = model.config();

    let mut entries: Vec<(String, EntryKind, Vec<usize>, &[f32])> = Vec::new();
    for i in 0..store.len() {
        entries.push((
            store.name(i).to_string(),
            EntryKind::Param,
            store.shape(i).to_vec(),
            store.values(i),
        ));
    }
    if let Some(adam) = optimizer {
        let (m, v) = adam.moments();
        for i in 0..store.len() {
            entries.push((
                store.name(i).to_string(),
                EntryKind::AdamM,
                store.shape(i).to_vec(),
                &m[i],
            ));
        }
        for i in 0..store.len() {
            entries.push((
                store.name(i).to_string(),
                EntryKind::AdamV,
                store.shape(i).to_vec(),
                &v[i],
            ));
        }
    }

    let mut manifest = String::new();
    let _ = writeln!(manifest, "grpo-asr-checkpoint v{CHECKPOINT_VERSION}");
    let _ = writeln!(
        manifest,
        "model hidden={} layers={} heads={} frame_dim={} word_tokens={} ffn={} max_seq={}",
        cfg.hidden, cfg.layers, cfg.heads, cfg.frame_dim, cfg.word_tokens, cfg.ffn, cfg.max_seq
    );
    let adam_t = optimizer.map(Adam::step_count);
    let _ = writeln!(
        manifest,
        "meta step={} seed={} config_digest={} adam_t={} dev_wer={} best_dev_wer={}",
        meta.step,
        meta.seed,
        meta.config_digest,
        adam_t.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
        fmt_opt(meta.dev_wer),
        fmt_opt(meta.best_dev_wer),
    );
    let mut blob: Vec<u8> = Vec::new();
    for (name, kind, shape, values) in &entries {
        let offset = blob.len() / 4;
        let shape_s = shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            manifest,
            "entry {name} {} {shape_s} {offset} {}",
            kind.as_str(),
            values.len()
        );
        for v in *values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST_FILE), manifest).map_err(|e| io_err(&dir.join(MANIFEST_FILE), e))?;
    fs::write(dir.join(PARAMS_FILE), blob).map_err(|e| io_err(&dir.join(PARAMS_FILE), e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub model_config: ModelConfig,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam<f32>>,
    pub meta: CheckpointMeta,
}

impl LoadedCheckpoint {
    /// Reconstructs the policy with the stored parameter values.
    pub fn into_model(self) -> Result<(PolicyModel<f32>, Option<Adam<f32>>, CheckpointMeta)> {
        let mut model = PolicyModel::new(self.model_config.clone(), 0)
            .map_err(|e| contract(format!("invalid model config in checkpoint: {e}")))?;
        model
            .load_params(&self.params)
            .map_err(|e| contract(format!("checkpoint parameters do not fit the model: {e}")))?;
        Ok((model, self.adam, self.meta))
    }
}

fn kv<'a>(field: &'a str, key: &str, ctx: &str) -> Result<&'a str> {
    field
        .strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .ok_or_else(|| contract(format!("expected {key}=... in {ctx} line, got {field:?}")))
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest =
        fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;

    let mut lines = manifest.lines();
    let magic = lines.next().ok_or_else(|| contract("empty manifest"))?;
    if magic != format!("grpo-asr-checkpoint v{CHECKPOINT_VERSION}") {
        return Err(contract(format!("unsupported checkpoint header {magic:?}")));
    }
    let model_line = lines.next().ok_or_else(|| contract("manifest missing model line"))?;
    let mf: Vec<&str> = model_line.split(' ').collect();
    if mf.len() != 8 || mf[0] != "model" {
        return Err(contract(format!("malformed model line {model_line:?}")));
    }
    let parse_usize = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| contract(format!("bad integer {s:?} in manifest")))
    };
    let model_config = ModelConfig {
        hidden: parse_usize(kv(mf[1], "hidden", "model")?)?,
        layers: parse_usize(kv(mf[2], "layers", "model")?)?,
        heads: parse_usize(kv(mf[3], "heads", "model")?)?,
        frame_dim: parse_usize(kv(mf[4], "frame_dim", "model")?)?,
        word_tokens: parse_usize(kv(mf[5], "word_tokens", "model")?)?,
        ffn: parse_usize(kv(mf[6], "ffn", "model")?)?,
        max_seq: parse_usize(kv(mf[7], "max_seq", "model")?)?,
    };
    let meta_line = lines.next().ok_or_else(|| contract("manifest missing meta line"))?;
    let tf: Vec<&str> = meta_line.split(' ').collect();
    if tf.len() != 7 || tf[0] != "meta" {
        return Err(contract(format!("malformed meta line {meta_line:?}")));
    }
    let step: u64 = kv(tf[1], "step", "meta")?
        .parse()
        .map_err(|_| contract("bad step in manifest"))?;
    let seed: u64 = kv(tf[2], "seed", "meta")?
        .parse()
        .map_err(|_| contract("bad seed in manifest"))?;
    let config_digest = kv(tf[3], "config_digest", "meta")?.to_string();
    let adam_t_s = kv(tf[4], "adam_t", "meta")?;
    let adam_t: Option<u64> = if adam_t_s == "none" {
        None
    } else {
        Some(adam_t_s.parse().map_err(|_| contract("bad adam_t in manifest"))?)
    };
    let dev_wer = parse_opt(kv(tf[5], "dev_wer", "meta")?)?;
    let best_dev_wer = parse_opt(kv(tf[6], "best_dev_wer", "meta")?)?;

    let mut params = ParamStore::new();
    let mut adam_m: Vec<Vec<f32>> = Vec::new();
    let mut adam_v: Vec<Vec<f32>> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let ef: Vec<&str> = line.split(' ').collect();
        if ef.len() != 6 || ef[0] != "entry" {
            return Err(contract(format!("malformed entry line {line:?}")));
        }
        let name = ef[1];
        let kind = EntryKind::parse(ef[2])
            .ok_or_else(|| contract(format!("unknown entry kind {:?}", ef[2])))?;
        let shape: Vec<usize> = ef[3].split(',').map(parse_usize).collect::<Result<_>>()?;
        let offset = parse_usize(ef[4])?;
        let count = parse_usize(ef[5])?;
        if shape.iter().product::<usize>() != count {
            return Err(contract(format!("entry {name}: shape {shape:?} does not cover {count} values")));
        }
        let byte_start = offset * 4;
        let byte_end = byte_start + count * 4;
        if byte_end > blob.len() {
            return Err(contract(format!(
                "entry {name}: blob has {} bytes, entry needs {byte_end}",
                blob.len()
            )));
        }
        let values: Vec<f32> = blob[byte_start..byte_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        match kind {
            EntryKind::Param => params.push_entry(name.to_string(), shape, values),
            EntryKind::AdamM => adam_m.push(values),
            EntryKind::AdamV => adam_v.push(values),
        }
    }

    let adam = match adam_t {
        Some(t) => {
            if adam_m.len() != params.len() || adam_v.len() != params.len() {
                return Err(contract(format!(
                    "optimizer moments incomplete: {} params, {} m, {} v",
                    params.len(),
                    adam_m.len(),
                    adam_v.len()
                )));
            }
            Some(Adam::from_state(adam_m, adam_v, t))
        }
        None => None,
    };
    Ok(LoadedCheckpoint {
        model_config,
        params,
        adam,
        meta: CheckpointMeta { step, seed, config_digest, dev_wer, best_dev_wer },
    })
}
