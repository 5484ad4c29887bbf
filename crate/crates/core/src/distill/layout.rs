use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where in the depth of the model layers are removed. The first and last
/// layers are always kept, so every layout picks from the interior `1..=L-2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RemovalLayout {
    MaxGap,
    Input,
    Output,
    Both,
    Middle,
    AltInput,
    AltOutput,
    AltBoth,
    AltMiddle,
}

impl RemovalLayout {
    pub const ALL: [RemovalLayout; 9] = [
        RemovalLayout::MaxGap,
        RemovalLayout::Input,
        RemovalLayout::Output,
        RemovalLayout::Both,
        RemovalLayout::Middle,
        RemovalLayout::AltInput,
        RemovalLayout::AltOutput,
        RemovalLayout::AltBoth,
        RemovalLayout::AltMiddle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RemovalLayout::MaxGap => "max-gap",
            RemovalLayout::Input => "input",
            RemovalLayout::Output => "output",
            RemovalLayout::Both => "both",
            RemovalLayout::Middle => "middle",
            RemovalLayout::AltInput => "alt-input",
            RemovalLayout::AltOutput => "alt-output",
            RemovalLayout::AltBoth => "alt-both",
            RemovalLayout::AltMiddle => "alt-middle",
        }
    }
}

impl fmt::Display for RemovalLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RemovalLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RemovalLayout::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::config(format!("unknown removal layout {s:?}")))
    }
}

/// First `k` distinct entries of `order`.
fn take_distinct(order: impl IntoIterator<Item = usize>, k: usize, taken: &mut BTreeSet<usize>) {
    for i in order {
        if taken.len() == k {
            break;
        }
        taken.insert(i);
    }
}

/// Odd interior positions from the input side, then the even ones.
fn alt_input_order(l: usize) -> impl Iterator<Item = usize> {
    (1..=l - 2).step_by(2).chain((2..=l - 2).step_by(2))
}

fn alt_output_order(l: usize) -> impl Iterator<Item = usize> {
    alt_input_order(l).map(move |i| l - 1 - i)
}

/// Sorted layer positions removed by `layout` from an `n_layers` model.
pub fn resolve_layout(layout: RemovalLayout, n_layers: usize, k: usize) -> Result<Vec<usize>> {
    let interior = n_layers.saturating_sub(2);
    if k > interior {
        return Err(Error::config(format!(
            "cannot remove {k} layers from {n_layers}: only {interior} interior layers exist"
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let l = n_layers;
    let mut set = BTreeSet::new();
    match layout {
        RemovalLayout::Input => set.extend(1..=k),
        RemovalLayout::Output => set.extend(l - 1 - k..=l - 2),
        RemovalLayout::Middle => {
            let start = (l - k) / 2;
            set.extend(start..start + k);
        }
        RemovalLayout::Both => {
            set.extend(1..=k.div_ceil(2));
            set.extend(l - 1 - k / 2..=l - 2);
        }
        RemovalLayout::MaxGap => {
            let mut picks: Vec<usize> = (0..k)
                .map(|j| ((j + 1) as f64 * (l - 1) as f64 / (k + 1) as f64).round() as usize)
                .collect();
            for j in 1..k {
                if picks[j] <= picks[j - 1] {
                    picks[j] = picks[j - 1] + 1;
                }
            }
            let mut cap = l - 2;
            for p in picks.iter_mut().rev() {
                *p = (*p).min(cap);
                cap = p.saturating_sub(1);
            }
            set.extend(picks);
        }
        RemovalLayout::AltInput => take_distinct(alt_input_order(l), k, &mut set),
        RemovalLayout::AltOutput => take_distinct(alt_output_order(l), k, &mut set),
        RemovalLayout::AltBoth => {
            take_distinct(alt_input_order(l), k.div_ceil(2), &mut set);
            take_distinct(alt_output_order(l), k, &mut set);
        }
        RemovalLayout::AltMiddle => {
            let start = (l.saturating_sub(2 * k - 1) / 2).max(1);
            take_distinct((start..=l - 2).step_by(2).take(k), k, &mut set);
            let mut rest: Vec<usize> = (1..=l - 2).collect();
            // Remaining slots go to positions nearest the centre, lower first.
            let centre2 = l - 1;
            rest.sort_by_key(|&i| ((2 * i).abs_diff(centre2), i));
            take_distinct(rest, k, &mut set);
        }
    }
    let out: Vec<usize> = set.into_iter().collect();
    debug_assert_eq!(out.len(), k);
    debug_assert!(out.iter().all(|&i| i >= 1 && i <= l - 2));
    Ok(out)
}
