//! Zero-shot multiple-choice scoring: every completion is scored by its
//! log-likelihood after the prompt and the best one is picked per metric.

use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ByteTokenizer, BOS};
use crate::error::{Error, Result};
use crate::model::CausalLM;
use crate::tensor::Real;

pub const DEFAULT_DOMAIN_PREMISE: &str = "Answer:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Acc,
    LenNormAcc,
    PmiDc,
    F1,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Acc => "acc",
            Metric::LenNormAcc => "len_norm_acc",
            Metric::PmiDc => "pmi_dc",
            Metric::F1 => "f1",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub prompt: String,
    pub completions: Vec<String>,
    pub gold_index: usize,
}

/// One task per line of a task file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub name: String,
    pub metric: Metric,
    #[serde(default = "default_premise")]
    pub domain_premise: String,
    pub instances: Vec<Instance>,
}

fn default_premise() -> String {
    DEFAULT_DOMAIN_PREMISE.to_string()
}

impl EvalTask {
    pub fn validate(&self) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            let at = || format!("task {:?} instance {i}", self.name);
            if inst.completions.len() < 2 {
                return Err(Error::Format(format!("{}: needs at least 2 completions", at())));
            }
            if inst.gold_index >= inst.completions.len() {
                return Err(Error::Format(format!("{}: gold index {} out of range", at(), inst.gold_index)));
            }
            if inst.completions.iter().any(String::is_empty) {
                return Err(Error::Format(format!("{}: empty completion", at())));
            }
        }
        Ok(())
    }
}

pub fn parse_tasks(text: &str) -> Result<Vec<EvalTask>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let task: EvalTask =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("task file line {}: {e}", n + 1)))?;
            task.validate()?;
            Ok(task)
        })
        .collect()
}

pub fn load_tasks(path: &Path) -> Result<Vec<EvalTask>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tasks(&text)
}

pub fn tasks_to_jsonl(tasks: &[EvalTask]) -> String {
    tasks
        .iter()
        .map(|t| serde_json::to_string(t).expect("tasks serialize") + "\n")
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChoiceScore {
    /// Sum of completion-token log-probabilities given the prompt.
    pub raw_logprob: f64,
    /// Completion length in bytes.
    pub char_len: usize,
    /// Completion log-probability given the domain premise, for PMI-DC.
    pub domain_logprob: Option<f64>,
}

/// Log-probability of `completion` following `[BOS] + prompt`, or `None`
/// when the sequence does not fit the context window.
pub fn completion_logprob<T: Real>(model: &CausalLM<T>, prompt: &[u8], completion: &[u8]) -> Result<Option<f64>> {
    let tok = ByteTokenizer;
    let mut context = vec![BOS];
    context.extend(tok.encode(prompt));
    continuation_logprob(model, &context, &tok.encode(completion))
}

/// `Σ log p(continuation[i] | context, continuation[..i])` from one forward
/// pass over the concatenation. `context` must be non-empty.
pub fn continuation_logprob<T: Real>(model: &CausalLM<T>, context: &[usize], continuation: &[usize]) -> Result<Option<f64>> {
    if context.is_empty() {
        return Err(Error::Usage("scoring needs at least one context token".into()));
    }
    let ids: Vec<usize> = context.iter().chain(continuation).copied().collect();
    if ids.len() > model.config().context_len {
        return Ok(None);
    }
    let v = model.config().vocab_size;
    let logits = model.forward_logits(&ids, 1, ids.len())?;
    let mut total = 0.0;
    for (pos, &id) in ids.iter().enumerate().skip(context.len()) {
        // Token at `pos` is predicted by the logits at `pos - 1`.
        let row: Vec<f64> = logits.data()[(pos - 1) * v..pos * v].iter().map(|x| x.as_f64()).collect();
        total += log_softmax_at(&row, id);
    }
    Ok(Some(total))
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

/// Scores one completion; `domain` adds the PMI-DC denominator term.
pub fn score_completion<T: Real>(
    model: &CausalLM<T>,
    prompt: &str,
    completion: &str,
    domain: Option<&str>,
) -> Result<Option<ChoiceScore>> {
    let Some(raw) = completion_logprob(model, prompt.as_bytes(), completion.as_bytes())? else {
        return Ok(None);
    };
    let domain_logprob = match domain {
        Some(premise) => match completion_logprob(model, premise.as_bytes(), completion.as_bytes())? {
            Some(d) => Some(d),
            None => return Ok(None),
        },
        None => None,
    };
    Ok(Some(ChoiceScore { raw_logprob: raw, char_len: completion.len(), domain_logprob }))
}

fn selection_score(s: &ChoiceScore, metric: Metric) -> Result<f64> {
    Ok(match metric {
        Metric::Acc | Metric::F1 => s.raw_logprob,
        Metric::LenNormAcc => s.raw_logprob / s.char_len.max(1) as f64,
        Metric::PmiDc => {
            s.raw_logprob - s.domain_logprob.ok_or_else(|| Error::Usage("pmi_dc needs domain log-probabilities".into()))?
        }
    })
}

/// Index of the best completion; ties go to the lowest index.
pub fn select(scores: &[ChoiceScore], metric: Metric) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Usage("no completions to select from".into()));
    }
    let mut best = 0;
    let mut best_score = selection_score(&scores[0], metric)?;
    let mut tied = false;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let v = selection_score(s, metric)?;
        if v > best_score {
            best = i;
            best_score = v;
            tied = false;
        } else if v == best_score {
            tied = true;
        }
    }
    if tied {
        log::debug!("tie at score {best_score}; choosing index {best}");
    }
    Ok(best)
}

/// `(prediction, gold)` pairs reduced to the task metric. F1 treats
/// completion index 1 as the positive class.
pub fn aggregate(outcomes: &[(usize, usize)], metric: Metric) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Input("no scored instances to aggregate".into()));
    }
    Ok(match metric {
        Metric::F1 => {
            let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
            for &(pred, gold) in outcomes {
                match (pred == 1, gold == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fne += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fne;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        }
        _ => outcomes.iter().filter(|(p, g)| p == g).count() as f64 / outcomes.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub task: String,
    pub metric: Metric,
    pub value: f64,
    pub n: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub tasks: Vec<TaskResult>,
    /// Unweighted mean of the per-task values.
    pub mean: f64,
}

pub fn evaluate_task<T: Real>(model: &CausalLM<T>, task: &EvalTask) -> Result<TaskResult> {
    task.validate()?;
    let domain = (task.metric == Metric::PmiDc).then_some(task.domain_premise.as_str());
    let mut outcomes = Vec::with_capacity(task.instances.len());
    let mut skipped = 0;
    'inst: for inst in &task.instances {
        let mut scores = Vec::with_capacity(inst.completions.len());
        for c in &inst.completions {
            match score_completion(model, &inst.prompt, c, domain)? {
                Some(s) => scores.push(s),
                None => {
                    log::warn!("task {}: instance exceeds the context window; skipped", task.name);
                    skipped += 1;
                    continue 'inst;
                }
            }
        }
        outcomes.push((select(&scores, task.metric)?, inst.gold_index));
    }
    let value = aggregate(&outcomes, task.metric)
        .map_err(|_| Error::Input(format!("task {}: every instance was skipped", task.name)))?;
    Ok(TaskResult { task: task.name.clone(), metric: task.metric, value, n: outcomes.len(), skipped })
}

pub fn evaluate_suite<T: Real>(model: &CausalLM<T>, tasks: &[EvalTask]) -> Result<SuiteReport> {
    let results = tasks.iter().map(|t| evaluate_task(model, t)).collect::<Result<Vec<_>>>()?;
    suite_report(results)
}

pub fn suite_report(tasks: Vec<TaskResult>) -> Result<SuiteReport> {
    if tasks.is_empty() {
        return Err(Error::Input("no tasks to report".into()));
    }
    let mean = tasks.iter().map(|t| t.value).sum::<f64>() / tasks.len() as f64;
    Ok(SuiteReport { tasks, mean })
}

pub const REPORT_HEADER: &str = "task,metric,value,n,skipped";

impl SuiteReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for t in &self.tasks {
            let _ = writeln!(s, "{},{},{},{},{}", t.task, t.metric, t.value, t.n, t.skipped);
        }
        let n: usize = self.tasks.iter().map(|t| t.n).sum();
        let skipped: usize = self.tasks.iter().map(|t| t.skipped).sum();
        let _ = writeln!(s, "mean,avg,{},{n},{skipped}", self.mean);
        s
    }
}

/// Multiple-choice tasks over the facts of a synthetic world.
pub fn world_tasks(world: &crate::data::synthetic::World, seed: u64, per_task: usize) -> Vec<EvalTask> {
    use crate::data::synthetic::Choice;
    let mut tasks: Vec<EvalTask> = Vec::new();
    for q in world.questions(seed, per_task) {
        let metric = match q.metric {
            Choice::Acc => Metric::Acc,
            Choice::LenNorm => Metric::LenNormAcc,
            Choice::Pmi => Metric::PmiDc,
            Choice::F1 => Metric::F1,
        };
        let inst = Instance { prompt: q.prompt, completions: q.completions, gold_index: q.label };
        match tasks.iter_mut().find(|t| t.name == q.task) {
            Some(t) => t.instances.push(inst),
            None => tasks.push(EvalTask {
                name: q.task.to_string(),
                metric,
                domain_premise: DEFAULT_DOMAIN_PREMISE.into(),
                instances: vec![inst],
            }),
        }
    }
    tasks
}
