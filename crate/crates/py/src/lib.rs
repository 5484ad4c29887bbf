//! Python bindings: model construction, scoring, truncation, short training
//! runs and the analytic helpers.

use std::collections::HashMap;
use std::path::PathBuf;

use distill_core::checkpoint::{model_checkpoint, Checkpoint};
use distill_core::data::{BatchStream, ByteTokenizer, Corpus, DataConfig, VOCAB_SIZE};
use distill_core::distill::{
    resolve_layout as core_resolve_layout, truncate_model, Control, DropSchedule, KdSettings, RemovalLayout, RunState,
    Teacher, TrainSpec, Trainer,
};
use distill_core::eval::{completion_logprob, evaluate_suite, parse_tasks};
use distill_core::flops::{self, Method};
use distill_core::model::{CausalLM, ModelConfig};
use distill_core::optim::{LionConfig, LrSchedule};
use distill_core::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Tensor(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "ModelConfig", module = "distill_rs", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (d_model, n_heads, n_layers, vocab_size = VOCAB_SIZE, context_len = 256, d_ff = None))]
    fn new(
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        vocab_size: usize,
        context_len: usize,
        d_ff: Option<usize>,
    ) -> PyResult<Self> {
        let mut inner = ModelConfig::new(d_model, n_heads, n_layers, vocab_size, context_len);
        if let Some(f) = d_ff {
            inner.d_ff = f;
        }
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers
    }

    #[getter]
    fn d_ff(&self) -> usize {
        self.inner.d_ff
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn context_len(&self) -> usize {
        self.inner.context_len
    }

    /// `{"total", "per_layer", "non_layer"}` parameter counts.
    fn param_count(&self) -> HashMap<&'static str, usize> {
        let pc = self.inner.param_count();
        HashMap::from([("total", pc.total), ("per_layer", pc.per_layer), ("non_layer", pc.non_layer)])
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(d_model={}, n_heads={}, n_layers={}, vocab_size={}, context_len={}, d_ff={})",
            c.d_model, c.n_heads, c.n_layers, c.vocab_size, c.context_len, c.d_ff
        )
    }
}

#[pyclass(name = "Model", module = "distill_rs")]
struct PyModel {
    inner: CausalLM<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn init(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: CausalLM::init(&config.inner, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { inner: ck.model().map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_checkpoint(&self.inner).save(&path).map_err(py_err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.inner.config().clone() }
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Next-token logits for every position of one sequence.
    fn logits(&self, ids: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        let t = self.inner.forward_logits(&ids, 1, ids.len()).map_err(py_err)?;
        Ok(t.data().chunks(self.inner.config().vocab_size).map(<[f32]>::to_vec).collect())
    }

    /// Mean next-token cross-entropy over one sequence of at least two ids.
    fn lm_loss(&self, ids: Vec<usize>) -> PyResult<f64> {
        self.inner.lm_loss(&ids, 1, None).map_err(py_err)
    }

    /// New model without the layers at `indices`.
    fn truncate(&self, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self { inner: truncate_model(&self.inner, &indices).map_err(py_err)? })
    }

    /// `log p(completion | BOS + prompt)`, or `None` past the context window.
    fn score(&self, prompt: &str, completion: &str) -> PyResult<Option<f64>> {
        completion_logprob(&self.inner, prompt.as_bytes(), completion.as_bytes()).map_err(py_err)
    }

    /// Scores a JSONL task file's contents; returns `(task, metric, value)`.
    fn evaluate(&self, tasks_jsonl: &str) -> PyResult<Vec<(String, String, f64)>> {
        let tasks = parse_tasks(tasks_jsonl).map_err(py_err)?;
        let report = evaluate_suite(&self.inner, &tasks).map_err(py_err)?;
        Ok(report.tasks.into_iter().map(|t| (t.task, t.metric.to_string(), t.value)).collect())
    }

    /// Trains in place on newline-delimited `text` for `tokens` tokens with
    /// Lion and a warmup-cosine schedule. With a `teacher`, the loss mixes in
    /// the distillation term. Returns the per-step LM losses.
    #[pyo3(signature = (text, tokens, peak_lr, batch_size = 4, seq_len = 64, seed = 0, teacher = None, alpha = 0.5, temperature = 2.0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        text: &str,
        tokens: u64,
        peak_lr: f64,
        batch_size: usize,
        seq_len: usize,
        seed: u64,
        teacher: Option<PyRef<'_, PyModel>>,
        alpha: f64,
        temperature: f64,
    ) -> PyResult<Vec<f64>> {
        let data = DataConfig { batch_size, seq_len };
        let spec = TrainSpec {
            data,
            schedule: LrSchedule::new(peak_lr, tokens / 10, tokens),
            drops: DropSchedule::none(),
            eval_every_tokens: 0,
        };
        spec.schedule.validate().map_err(py_err)?;
        let teacher = teacher.map(|t| Teacher { model: t.inner.clone(), settings: KdSettings { temperature, alpha } });
        if let Some(t) = &teacher {
            t.settings.validate().map_err(py_err)?;
        }
        let corpus = Corpus::from_bytes(text.as_bytes());
        let model = self.inner.clone();
        let state = py
            .detach(|| -> distill_core::Result<RunState> {
                let mut stream = BatchStream::new(corpus, data, seed)?;
                let mut state = RunState::new(model, LionConfig::default());
                let mut trainer = Trainer::new(&spec);
                if let Some(t) = &teacher {
                    trainer = trainer.with_teacher(t);
                }
                trainer.run(&mut state, &mut stream, |_| Ok(Control::Continue))?;
                Ok(state)
            })
            .map_err(py_err)?;
        self.inner = state.model;
        Ok(state.trace.iter().map(|r| r.lm_loss).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(n_layers={}, num_params={})", self.inner.n_layers(), self.inner.num_params())
    }
}

/// Original layer indices removed by `layout` when dropping `k` of `n_layers`.
#[pyfunction]
fn resolve_layout(layout: &str, n_layers: usize, k: usize) -> PyResult<Vec<usize>> {
    let layout: RemovalLayout = layout.parse().map_err(py_err)?;
    core_resolve_layout(layout, n_layers, k).map_err(py_err)
}

#[pyfunction]
fn layouts() -> Vec<String> {
    RemovalLayout::ALL.iter().map(ToString::to_string).collect()
}

#[pyfunction]
fn encode(data: &[u8]) -> Vec<usize> {
    ByteTokenizer.encode(data)
}

#[pyfunction]
fn decode(ids: Vec<usize>) -> PyResult<Vec<u8>> {
    ByteTokenizer.decode(&ids).map_err(py_err)
}

#[pyfunction]
fn kd_ratio(student_params: f64, teacher_params: f64) -> f64 {
    flops::kd_ratio(student_params, teacher_params)
}

/// Training-compute estimate for `method` ("teacher_free" or "kd").
#[pyfunction]
#[pyo3(signature = (method, student_params, tokens, teacher_params = None))]
fn flops_estimate(
    method: &str,
    student_params: f64,
    tokens: f64,
    teacher_params: Option<f64>,
) -> PyResult<HashMap<&'static str, f64>> {
    let method: Method = method.parse().map_err(py_err)?;
    let r = flops::estimate(method, student_params, teacher_params, tokens).map_err(py_err)?;
    Ok(HashMap::from([
        ("train_flops", r.train_flops),
        ("teacher_forward_flops", r.teacher_forward_flops),
        ("total_flops", r.total_flops),
        ("ratio_vs_teacher_free", r.ratio_vs_teacher_free),
    ]))
}

#[pyfunction]
fn lr_at(peak_lr: f64, warmup_tokens: u64, total_tokens: u64, tokens: u64) -> f64 {
    LrSchedule::new(peak_lr, warmup_tokens, total_tokens).lr_at(tokens)
}

#[pymodule]
fn distill_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(resolve_layout, m)?)?;
    m.add_function(wrap_pyfunction!(layouts, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(kd_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(flops_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add("VOCAB_SIZE", VOCAB_SIZE)?;
    Ok(())
}
