//! Directory checkpoints: `manifest.txt` (sorted `key=value` lines) plus one
//! raw little-endian f32 blob per tensor under `tensors/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::distill::{eval_from_csv, eval_to_csv, trace_from_csv, trace_to_csv, RunState};
use crate::error::{Error, Result};
use crate::model::{CausalLM, ModelConfig};
use crate::optim::{Lion, LionConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "1";
const MANIFEST: &str = "manifest.txt";
const TENSOR_DIR: &str = "tensors";
const TRACE: &str = "trace.csv";
const EVAL: &str = "eval.csv";
/// Prefix of optimizer-state tensors inside a checkpoint.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
    /// Extra text files stored next to the manifest (e.g. traces).
    pub files: BTreeMap<String, String>,
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Format(format!("invalid checkpoint entry name {name:?}")))
    }
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("manifest line {}: expected key=value", n + 1)))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Format(format!("bad tensor shape {s:?}"))))
        .collect()
}

impl Checkpoint {
    /// Writes into a sibling temporary directory and renames it into place,
    /// so a crash never leaves a half-written checkpoint at `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let base = dir.file_name().ok_or_else(|| Error::Usage(format!("{} is not a directory name", dir.display())))?;
        let tmp = dir.with_file_name(format!("{}.partial", base.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(tmp.join(TENSOR_DIR)).map_err(|e| Error::io(&tmp, e))?;
        let mut manifest = self.meta.clone();
        manifest.insert("format".into(), FORMAT_VERSION.into());
        for (name, t) in &self.tensors {
            check_name(name)?;
            manifest.insert(format!("tensor.{name}"), shape_str(t.shape()));
            let mut bytes = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let path = tmp.join(TENSOR_DIR).join(format!("{name}.bin"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        for (name, text) in &self.files {
            check_name(name)?;
            let path = tmp.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        let path = tmp.join(MANIFEST);
        fs::write(&path, format_kv(&manifest)).map_err(|e| Error::io(&path, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::read(dir, true)
    }

    /// Manifest and text files only; no tensor data is read.
    pub fn load_header(dir: &Path) -> Result<Self> {
        Self::read(dir, false)
    }

    fn read(dir: &Path, with_tensors: bool) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut meta = parse_kv(&text)?;
        match meta.remove("format").as_deref() {
            Some(FORMAT_VERSION) => {}
            other => return Err(Error::Format(format!("unsupported checkpoint format {other:?}"))),
        }
        let mut tensors = BTreeMap::new();
        let names: Vec<String> = meta.keys().filter(|k| k.starts_with("tensor.")).cloned().collect();
        for key in names {
            let shape = parse_shape(&meta.remove(&key).unwrap_or_default())?;
            let name = &key["tensor.".len()..];
            check_name(name)?;
            if !with_tensors {
                continue;
            }
            let path = dir.join(TENSOR_DIR).join(format!("{name}.bin"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Format(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
            }
            let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            tensors.insert(name.to_string(), t);
        }
        let mut files = BTreeMap::new();
        for name in [TRACE, EVAL] {
            let path = dir.join(name);
            if path.exists() {
                files.insert(name.to_string(), fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
            }
        }
        Ok(Self { meta, tensors, files })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::Format(format!("checkpoint manifest {key}={v:?} is malformed")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            d_model: self.parse("model.d_model")?,
            n_heads: self.parse("model.n_heads")?,
            n_layers: self.parse("model.n_layers")?,
            d_ff: self.parse("model.d_ff")?,
            vocab_size: self.parse("model.vocab_size")?,
            context_len: self.parse("model.context_len")?,
            tie_embeddings: self.parse("model.tie_embeddings")?,
        })
    }

    pub fn model(&self) -> Result<CausalLM<f32>> {
        let cfg = self.model_config()?;
        let params = self
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(OPTIM_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        CausalLM::from_named(&cfg, params)
    }

    /// Peak learning rate of the run that produced this checkpoint.
    pub fn peak_lr(&self) -> Result<f64> {
        self.parse("run.peak_lr")
    }
}

fn put_model_config(meta: &mut BTreeMap<String, String>, cfg: &ModelConfig) {
    for (k, v) in [
        ("d_model", cfg.d_model.to_string()),
        ("n_heads", cfg.n_heads.to_string()),
        ("n_layers", cfg.n_layers.to_string()),
        ("d_ff", cfg.d_ff.to_string()),
        ("vocab_size", cfg.vocab_size.to_string()),
        ("context_len", cfg.context_len.to_string()),
        ("tie_embeddings", cfg.tie_embeddings.to_string()),
    ] {
        meta.insert(format!("model.{k}"), v);
    }
}

/// Model weights only.
pub fn model_checkpoint(model: &CausalLM<f32>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    put_model_config(&mut ck.meta, model.config());
    for (name, t) in model.named_params() {
        ck.tensors.insert(name, t.clone());
    }
    ck
}

/// Full resumable run state: weights, optimizer momentum, clock and traces.
pub fn run_checkpoint(state: &RunState, peak_lr: f64) -> Checkpoint {
    let mut ck = model_checkpoint(&state.model);
    let m = &mut ck.meta;
    let lion = state.optimizer.config;
    m.insert("run.peak_lr".into(), peak_lr.to_string());
    m.insert("run.step".into(), state.step.to_string());
    m.insert("run.tokens".into(), state.tokens.to_string());
    m.insert("run.flops".into(), state.flops.to_string());
    m.insert("run.teacher_flops".into(), state.teacher_flops.to_string());
    m.insert("run.dropped".into(), state.dropped.to_string());
    m.insert("run.origin".into(), state.origin.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    m.insert("optim.beta1".into(), lion.beta1.to_string());
    m.insert("optim.beta2".into(), lion.beta2.to_string());
    m.insert("optim.weight_decay".into(), lion.weight_decay.to_string());
    for (name, t) in state.optimizer.state() {
        ck.tensors.insert(format!("{OPTIM_PREFIX}{name}"), t.clone());
    }
    ck.files.insert(TRACE.into(), trace_to_csv(&state.trace));
    ck.files.insert(EVAL.into(), eval_to_csv(&state.evals));
    ck
}

pub fn run_state(ck: &Checkpoint) -> Result<RunState> {
    let model = ck.model()?;
    let lion = LionConfig {
        beta1: ck.parse("optim.beta1")?,
        beta2: ck.parse("optim.beta2")?,
        weight_decay: ck.parse("optim.weight_decay")?,
    };
    let momentum = ck
        .tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(OPTIM_PREFIX).map(|n| (n.to_string(), v.clone())))
        .collect();
    let origin_s = ck.get("run.origin")?;
    let origin = if origin_s.is_empty() {
        Vec::new()
    } else {
        origin_s
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad run.origin {origin_s:?}"))))
            .collect::<Result<Vec<usize>>>()?
    };
    if origin.len() != model.n_layers() {
        return Err(Error::Format(format!("run.origin lists {} layers, model has {}", origin.len(), model.n_layers())));
    }
    let trace = match ck.files.get(TRACE) {
        Some(t) => trace_from_csv(t)?,
        None => Vec::new(),
    };
    let evals = match ck.files.get(EVAL) {
        Some(t) => eval_from_csv(t)?,
        None => Vec::new(),
    };
    Ok(RunState {
        model,
        optimizer: Lion::from_state(lion, momentum),
        step: ck.parse("run.step")?,
        tokens: ck.parse("run.tokens")?,
        flops: ck.parse("run.flops")?,
        teacher_flops: ck.parse("run.teacher_flops")?,
        origin,
        dropped: ck.parse("run.dropped")?,
        trace,
        evals,
    })
}

/// `dir/step-000123`, zero-padded so listings sort by step.
pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step:08}"))
}
