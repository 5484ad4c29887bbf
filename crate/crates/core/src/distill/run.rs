use crate::data::{BatchStream, DataConfig, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{split_teacher_forcing, CausalLM, Trainable};
use crate::optim::{Lion, LionConfig, LrSchedule};
use crate::tensor::Graph;

use super::remove_positions;
use super::trace::{EvalRow, TraceRow};

/// Layers (by original index) to remove, one at a time, starting at
/// `pre_drop_tokens` and then every `gap_tokens`. Until its drop, each
/// marked layer still runs forward but receives no updates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropSchedule {
    pub indices: Vec<usize>,
    pub pre_drop_tokens: u64,
    pub gap_tokens: u64,
}

impl DropSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    /// Clock position of drop number `m` (zero-based).
    pub fn drop_at(&self, m: usize) -> u64 {
        self.pre_drop_tokens + m as u64 * self.gap_tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdSettings {
    pub temperature: f64,
    /// Weight on the language-modelling loss; `1 - alpha` goes to the KL term.
    pub alpha: f64,
}

impl Default for KdSettings {
    fn default() -> Self {
        Self { temperature: 2.0, alpha: 0.5 }
    }
}

impl KdSettings {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push(format!("kd.temperature ({}) must be positive", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push(format!("kd.alpha ({}) must lie in [0, 1]", self.alpha));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Frozen reference model whose logits the student is pulled towards.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub model: CausalLM<f32>,
    pub settings: KdSettings,
}

/// Everything about a run that does not change while it executes.
#[derive(Clone, Debug)]
pub struct TrainSpec {
    pub data: DataConfig,
    /// `total_tokens` of the schedule is the run budget.
    pub schedule: LrSchedule,
    pub drops: DropSchedule,
    /// Held-out evaluation period on the token clock; 0 evaluates only after
    /// the last drop and at the end.
    pub eval_every_tokens: u64,
}

/// Mutable training state; everything needed to resume.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: CausalLM<f32>,
    pub optimizer: Lion<f32>,
    pub step: u64,
    pub tokens: u64,
    /// Cumulative training FLOPs including teacher forwards.
    pub flops: f64,
    pub teacher_flops: f64,
    /// Original index of every live layer.
    pub origin: Vec<usize>,
    /// Number of scheduled drops already applied.
    pub dropped: usize,
    pub trace: Vec<TraceRow>,
    pub evals: Vec<EvalRow>,
}

impl RunState {
    /// Fresh state with a cold optimizer.
    pub fn new(model: CausalLM<f32>, lion: LionConfig) -> Self {
        let origin = (0..model.n_layers()).collect();
        Self {
            model,
            optimizer: Lion::new(lion),
            step: 0,
            tokens: 0,
            flops: 0.0,
            teacher_flops: 0.0,
            origin,
            dropped: 0,
            trace: Vec::new(),
            evals: Vec::new(),
        }
    }

    /// Live positions of layers that are scheduled but not yet dropped.
    pub fn frozen_positions(&self, drops: &DropSchedule) -> Vec<usize> {
        let pending = &drops.indices[self.dropped.min(drops.indices.len())..];
        self.origin.iter().enumerate().filter(|(_, o)| pending.contains(o)).map(|(p, _)| p).collect()
    }
}

/// What the per-step hook asks the loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Mean LM loss over held-out batches.
pub fn evaluate_loss(model: &CausalLM<f32>, batches: &[SequenceBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Input("no validation batches".into()));
    }
    let mut total = 0.0;
    for b in batches {
        total += model.lm_loss(&b.ids, b.batch_size, None)?;
    }
    Ok(total / batches.len() as f64)
}

pub struct Trainer<'a> {
    pub spec: &'a TrainSpec,
    pub teacher: Option<&'a Teacher>,
    pub validation: &'a [SequenceBatch],
}

impl<'a> Trainer<'a> {
    pub fn new(spec: &'a TrainSpec) -> Self {
        Self { spec, teacher: None, validation: &[] }
    }

    pub fn with_teacher(mut self, teacher: &'a Teacher) -> Self {
        self.teacher = Some(teacher);
        self
    }

    pub fn with_validation(mut self, batches: &'a [SequenceBatch]) -> Self {
        self.validation = batches;
        self
    }

    fn record_eval(&self, state: &mut RunState) -> Result<()> {
        if self.validation.is_empty() || state.evals.last().is_some_and(|e| e.tokens == state.tokens) {
            return Ok(());
        }
        let val_loss = evaluate_loss(&state.model, self.validation)?;
        state.evals.push(EvalRow {
            tokens: state.tokens,
            layers_live: state.model.n_layers(),
            val_loss,
            val_ppl: val_loss.exp(),
        });
        Ok(())
    }

    fn apply_due_drops(&self, state: &mut RunState) -> Result<()> {
        let drops = &self.spec.drops;
        let mut applied = false;
        while state.dropped < drops.indices.len() && state.tokens >= drops.drop_at(state.dropped) {
            let target = drops.indices[state.dropped];
            let pos = state
                .origin
                .iter()
                .position(|&o| o == target)
                .ok_or_else(|| Error::Usage(format!("layer {target} is not live")))?;
            state.model = remove_positions(&state.model, &[pos]);
            state.origin.remove(pos);
            state.optimizer.remap_layers(|i| match i.cmp(&pos) {
                std::cmp::Ordering::Less => Some(i),
                std::cmp::Ordering::Equal => None,
                std::cmp::Ordering::Greater => Some(i - 1),
            });
            state.dropped += 1;
            applied = true;
            log::info!("dropped layer {target} at {} tokens; {} layers live", state.tokens, state.model.n_layers());
        }
        if applied && state.dropped == drops.indices.len() {
            self.record_eval(state)?;
        }
        Ok(())
    }

    /// One forward/backward/update on `batch`.
    pub fn step(&self, state: &mut RunState, batch: &SequenceBatch) -> Result<TraceRow> {
        let frozen = state.frozen_positions(&self.spec.drops);
        let trainable = if frozen.is_empty() { Trainable::All } else { Trainable::ExceptLayers(&frozen) };
        let bsz = batch.batch_size;
        let mut g = Graph::new();
        let vars = state.model.bind(&mut g, trainable);
        let (ce, logits) = state.model.lm_loss_on(&mut g, &vars, &batch.ids, bsz, None)?;
        let batch_tokens = (bsz * batch.seq_len) as u64;
        let mut step_flops = 6.0 * state.model.num_params() as f64 * batch_tokens as f64;
        let (loss, kl) = match self.teacher {
            None => (ce, None),
            Some(t) => {
                let (inputs, _, seq) = split_teacher_forcing(&batch.ids, bsz)?;
                let t_logits = t.model.forward_logits(&inputs, bsz, seq)?;
                let t_logits = t_logits.reshape(&[bsz * seq, t.model.config().vocab_size])?;
                let tv = g.constant(t_logits);
                let kl = g.kl_teacher_student(tv, logits, t.settings.temperature)?;
                let a = g.scale(ce, t.settings.alpha as f32)?;
                let b = g.scale(kl, (1.0 - t.settings.alpha) as f32)?;
                let teacher = 2.0 * t.model.num_params() as f64 * batch_tokens as f64;
                state.teacher_flops += teacher;
                step_flops += teacher;
                (g.add(a, b)?, Some(kl))
            }
        };
        let lm_loss = g.value(ce).item() as f64;
        let kl_loss = kl.map(|v| g.value(v).item() as f64);
        if !lm_loss.is_finite() || kl_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss at step {}", state.step)));
        }
        let grads = g.backward(loss)?;
        let lr = self.spec.schedule.lr_at(state.tokens + batch_tokens);
        let named = vars.named();
        for ((name, p), (_, v)) in state.model.named_params_mut().into_iter().zip(named) {
            if let Some(grad) = grads.get(v) {
                state.optimizer.step(&name, p, grad, lr)?;
            }
        }
        state.step += 1;
        state.tokens += batch_tokens;
        state.flops += step_flops;
        Ok(TraceRow {
            tokens: state.tokens,
            lm_loss,
            ppl: lm_loss.exp(),
            kl_loss,
            lr,
            layers_live: state.model.n_layers(),
            cumulative_flops: state.flops,
        })
    }

    /// Trains until the budget is spent or `hook` says stop. The stream must
    /// be positioned at `state.step`.
    pub fn run(
        &self,
        state: &mut RunState,
        stream: &mut BatchStream,
        mut hook: impl FnMut(&RunState) -> Result<Control>,
    ) -> Result<()> {
        if stream.clock().tokens() != state.tokens {
            return Err(Error::Usage(format!(
                "data stream at {} tokens but run state at {}",
                stream.clock().tokens(),
                state.tokens
            )));
        }
        let total = self.spec.schedule.total_tokens;
        let every = self.spec.eval_every_tokens;
        loop {
            self.apply_due_drops(state)?;
            if state.tokens >= total {
                break;
            }
            let before = state.tokens;
            let batch = stream.next().ok_or_else(|| Error::Input("data stream ended".into()))?;
            let row = self.step(state, &batch)?;
            state.trace.push(row);
            if every > 0 && state.tokens / every > before / every {
                self.record_eval(state)?;
            }
            if hook(state)? == Control::Stop {
                return Ok(());
            }
        }
        self.record_eval(state)
    }
}
