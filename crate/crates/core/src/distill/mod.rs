//! Layer-truncation distillation: removal layouts, truncation, staggered
//! drop schedules and the shared training loop used for pretraining,
//! teacher-free continued pretraining and logit distillation.

mod layout;
mod run;
mod trace;

pub use layout::{resolve_layout, RemovalLayout};
pub use run::{evaluate_loss, Control, DropSchedule, KdSettings, RunState, Teacher, TrainSpec, Trainer};
pub use trace::{eval_from_csv, eval_to_csv, trace_from_csv, trace_to_csv, EvalRow, TraceRow, EVAL_HEADER, TRACE_HEADER};

use crate::error::{Error, Result};
use crate::model::CausalLM;
use crate::tensor::Real;

/// Which layers to drop and how far apart on the token clock.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemovalPlan {
    pub layout: RemovalLayout,
    pub k_remove: usize,
    pub drop_gap_tokens: u64,
    pub resolved_indices: Vec<usize>,
}

impl RemovalPlan {
    pub fn resolve(layout: RemovalLayout, n_layers: usize, k_remove: usize, drop_gap_tokens: u64) -> Result<Self> {
        let resolved_indices = resolve_layout(layout, n_layers, k_remove)?;
        Ok(Self { layout, k_remove, drop_gap_tokens, resolved_indices })
    }

    /// Rejects schedules whose drops cannot all complete before the budget
    /// runs out.
    pub fn check_budget(&self, pre_drop_tokens: u64, continue_tokens: u64) -> Result<()> {
        let k = self.k_remove as u64;
        if k == 0 {
            return Ok(());
        }
        let mut errs = Vec::new();
        if continue_tokens <= self.drop_gap_tokens.saturating_mul(k) {
            errs.push(format!(
                "distill.continue_tokens ({continue_tokens}) must exceed drop_gap_tokens × k_remove ({})",
                self.drop_gap_tokens.saturating_mul(k)
            ));
        }
        let last_drop = pre_drop_tokens.saturating_add(self.drop_gap_tokens.saturating_mul(k - 1));
        if last_drop >= continue_tokens {
            errs.push(format!(
                "last layer drop at {last_drop} tokens does not precede the end of the run at {continue_tokens}"
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Copy of `model` without the layers at `indices`. Kept layers are moved
/// over unchanged in their original order.
///
/// Indices must be distinct, in range and exclude the first and last layer.
pub fn truncate_model<T: Real>(model: &CausalLM<T>, indices: &[usize]) -> Result<CausalLM<T>> {
    let l = model.n_layers();
    let mut seen = std::collections::BTreeSet::new();
    for &i in indices {
        if i == 0 || i + 1 >= l {
            return Err(Error::Usage(format!("cannot remove layer {i} of {l}: first and last layers are kept")));
        }
        if !seen.insert(i) {
            return Err(Error::Usage(format!("layer {i} listed twice")));
        }
    }
    Ok(remove_positions(model, indices))
}

pub(crate) fn remove_positions<T: Real>(model: &CausalLM<T>, indices: &[usize]) -> CausalLM<T> {
    let mut out = model.clone();
    let kept = model
        .layers
        .iter()
        .enumerate()
        .filter(|(i, _)| !indices.contains(i))
        .map(|(_, b)| b.clone())
        .collect();
    out.set_layers(kept);
    out
}
