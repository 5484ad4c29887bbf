//! Flat `key = value` configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [model]
//! d_model = 128
//! ```
//!
//! Every key is addressed as `section.key`. Unknown keys and malformed values
//! are all collected and reported together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{DataConfig, VOCAB_SIZE};
use crate::distill::{KdSettings, RemovalLayout};
use crate::error::{Error, Result};
use crate::model::{default_d_ff, ModelConfig};
use crate::optim::{LionConfig, LrSchedule};

/// Environment variable naming the directory relative corpus paths resolve against.
pub const DATA_ROOT_ENV: &str = "DISTILL_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        let mut errs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !section.is_empty() && !k.trim().is_empty() => {
                    let key = format!("{section}.{}", k.trim());
                    if values.insert(key.clone(), v.trim().to_string()).is_some() {
                        errs.push(format!("line {}: duplicate key {key}", n + 1));
                    }
                }
                Some(_) if section.is_empty() => errs.push(format!("line {}: key outside of a [section]", n + 1)),
                _ => errs.push(format!("line {}: expected key = value", n + 1)),
            }
        }
        if errs.is_empty() {
            Ok(Self { values })
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Canonical text form: sections in order, keys sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, v) in &self.values {
            let (section, k) = key.split_once('.').unwrap_or(("", key));
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Typed reads over a [`RawConfig`] that accumulate errors instead of
/// stopping at the first one.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: std::collections::BTreeSet<String>,
    errs: Vec<String>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Self { raw, used: Default::default(), errs: Vec::new() }
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Option<T> {
        self.used.insert(key.to_string());
        let v = self.raw.get(key)?;
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.errs.push(format!("{key}: cannot parse {v:?}"));
                None
            }
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> T {
        self.opt(key).unwrap_or(default)
    }

    fn req<T: FromStr + Default>(&mut self, key: &str) -> T {
        if self.raw.get(key).is_none() {
            self.used.insert(key.to_string());
            self.errs.push(format!("{key} is required"));
            return T::default();
        }
        self.opt(key).unwrap_or_default()
    }

    fn check(&mut self, r: Result<()>) {
        match r {
            Ok(()) => {}
            Err(Error::Config(e)) => self.errs.extend(e),
            Err(e) => self.errs.push(e.to_string()),
        }
    }

    fn finish(mut self, sections: &[&str]) -> Result<()> {
        for key in self.raw.entries().keys() {
            let section = key.split('.').next().unwrap_or("");
            if sections.contains(&section) && !self.used.contains(key) {
                self.errs.push(format!("unknown key {key}"));
            }
        }
        if self.errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(self.errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub corpus: PathBuf,
    pub batch: DataConfig,
    /// Every `holdout_every`-th document is held out for validation; 0 disables.
    pub holdout_every: usize,
    pub val_batches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub total_tokens: u64,
    pub warmup_tokens: u64,
    /// Zero for continued runs until the source peak is known.
    pub peak_lr: f64,
    pub eval_every_tokens: u64,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every_steps: u64,
    pub lion: LionConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanSettings {
    pub layout: RemovalLayout,
    pub k_remove: usize,
    pub drop_gap_tokens: u64,
    /// Defaults to the warmup span.
    pub pre_drop_tokens: Option<u64>,
    /// Peak LR of the continued run relative to the source run's.
    pub lr_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub data: DataSettings,
    pub train: TrainSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub source: PathBuf,
    pub data: DataSettings,
    pub train: TrainSettings,
    pub plan: PlanSettings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdConfig {
    pub teacher: PathBuf,
    pub data: DataSettings,
    pub train: TrainSettings,
    pub plan: PlanSettings,
    pub kd: KdSettings,
}

/// Resolves `path` against [`DATA_ROOT_ENV`] when it is relative.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Path::new(&root).join(path),
        None => path.to_path_buf(),
    }
}

fn read_data(r: &mut Reader<'_>) -> DataSettings {
    let corpus: String = r.req("data.corpus");
    let batch = DataConfig { batch_size: r.or("data.batch_size", 16), seq_len: r.or("data.seq_len", 512) };
    r.check(batch.validate());
    DataSettings {
        corpus: PathBuf::from(corpus),
        batch,
        holdout_every: r.or("data.holdout_every", 50),
        val_batches: r.or("data.val_batches", 4),
    }
}

/// `total_key` names where the run budget lives (pretraining and continued
/// runs use different sections).
fn read_train(r: &mut Reader<'_>, total_key: &str, peak_required: bool) -> TrainSettings {
    let lion = LionConfig {
        beta1: r.or("optim.beta1", 0.9),
        beta2: r.or("optim.beta2", 0.95),
        weight_decay: r.or("optim.weight_decay", 1e-4),
    };
    r.check(lion.validate());
    let total_tokens: u64 = r.req(total_key);
    // Continued runs derive their peak from the source run instead.
    let peak_lr = if peak_required { r.req("train.peak_lr") } else { 0.0 };
    let t = TrainSettings {
        seed: r.or("train.seed", 0),
        total_tokens,
        warmup_tokens: r.or("train.warmup_tokens", total_tokens / 10),
        peak_lr,
        eval_every_tokens: r.or("train.eval_every_tokens", 0),
        checkpoint_every_steps: r.or("train.checkpoint_every_steps", 0),
        lion,
    };
    if t.total_tokens == 0 {
        r.errs.push(format!("{total_key} must be positive"));
    }
    if t.warmup_tokens > t.total_tokens {
        r.errs.push(format!("train.warmup_tokens ({}) exceeds {total_key} ({})", t.warmup_tokens, t.total_tokens));
    }
    if peak_required && !(t.peak_lr > 0.0 && t.peak_lr.is_finite()) {
        r.errs.push(format!("train.peak_lr ({}) must be positive", t.peak_lr));
    }
    t
}

fn read_plan(r: &mut Reader<'_>) -> PlanSettings {
    let layout_s: String = r.or("distill.layout", "input".to_string());
    let layout = match layout_s.parse() {
        Ok(l) => l,
        Err(_) => {
            r.errs.push(format!("distill.layout: unknown layout {layout_s:?}"));
            RemovalLayout::Input
        }
    };
    let p = PlanSettings {
        layout,
        k_remove: r.req("distill.k_remove"),
        drop_gap_tokens: r.or("distill.drop_gap_tokens", 0),
        pre_drop_tokens: r.opt("distill.pre_drop_tokens"),
        lr_scale: r.or("distill.lr_scale", 0.1),
    };
    if !(p.lr_scale > 0.0 && p.lr_scale.is_finite()) {
        r.errs.push(format!("distill.lr_scale ({}) must be positive", p.lr_scale));
    }
    p
}

impl PretrainConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader::new(raw);
        let d_model = r.or("model.d_model", 128);
        let model = ModelConfig {
            d_model,
            n_heads: r.or("model.n_heads", 4),
            n_layers: r.or("model.n_layers", 4),
            d_ff: r.or("model.d_ff", default_d_ff(d_model)),
            vocab_size: r.or("model.vocab_size", VOCAB_SIZE),
            context_len: r.or("model.context_len", 512),
            tie_embeddings: r.or("model.tie_embeddings", true),
        };
        r.check(model.validate());
        if model.vocab_size < VOCAB_SIZE {
            r.errs.push(format!("model.vocab_size ({}) must cover the {VOCAB_SIZE} byte-level ids", model.vocab_size));
        }
        let data = read_data(&mut r);
        if data.batch.seq_len > model.context_len {
            r.errs.push(format!(
                "data.seq_len ({}) exceeds model.context_len ({})",
                data.batch.seq_len, model.context_len
            ));
        }
        let train = read_train(&mut r, "train.total_tokens", true);
        r.finish(&["model", "data", "train", "optim"])?;
        Ok(Self { model, data, train })
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.train.peak_lr, self.train.warmup_tokens, self.train.total_tokens)
    }
}

impl PlanSettings {
    pub fn pre_drop(&self, train: &TrainSettings) -> u64 {
        self.pre_drop_tokens.unwrap_or(train.warmup_tokens)
    }
}

impl DistillConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader::new(raw);
        let source: String = r.req("distill.source");
        let data = read_data(&mut r);
        let train = read_train(&mut r, "distill.continue_tokens", false);
        let plan = read_plan(&mut r);
        r.finish(&["data", "train", "optim", "distill"])?;
        Ok(Self { source: PathBuf::from(source), data, train, plan })
    }
}

impl KdConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader::new(raw);
        let teacher: String = r.req("kd.teacher");
        let data = read_data(&mut r);
        let train = read_train(&mut r, "distill.continue_tokens", false);
        let plan = read_plan(&mut r);
        let kd = KdSettings { temperature: r.or("kd.temperature", 2.0), alpha: r.or("kd.alpha", 0.5) };
        r.check(kd.validate());
        r.finish(&["data", "train", "optim", "distill", "kd"])?;
        Ok(Self { teacher: PathBuf::from(teacher), data, train, plan, kd })
    }
}
