use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "tokens,lm_loss,ppl,kl_loss,lr,layers_live,cumulative_flops";
pub const EVAL_HEADER: &str = "tokens,layers_live,val_loss,val_ppl";

/// One optimizer step. `tokens` is the clock after the step; `layers_live`
/// is the depth the step ran with.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub tokens: u64,
    pub lm_loss: f64,
    pub ppl: f64,
    pub kl_loss: Option<f64>,
    pub lr: f64,
    pub layers_live: usize,
    pub cumulative_flops: f64,
}

/// Held-out loss measured at a point on the token clock.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub tokens: u64,
    pub layers_live: usize,
    pub val_loss: f64,
    pub val_ppl: f64,
}

fn field<T: std::str::FromStr>(line: usize, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("line {line}: bad {name} {s:?}")))
}

fn columns(line_no: usize, line: &str, n: usize) -> Result<Vec<&str>> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != n {
        return Err(Error::Format(format!("line {line_no}: expected {n} columns, found {}", cols.len())));
    }
    Ok(cols)
}

fn body<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => Ok(lines.enumerate().map(|(i, l)| (i + 2, l)).filter(|(_, l)| !l.is_empty())),
        other => Err(Error::Format(format!("expected header {header:?}, found {other:?}"))),
    }
}

/// CSV with a header row. Floats use shortest round-trip formatting so a
/// parsed trace equals the one written.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let kl = r.kl_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.tokens, r.lm_loss, r.ppl, kl, r.lr, r.layers_live, r.cumulative_flops
        );
    }
    s
}

pub fn trace_from_csv(text: &str) -> Result<Vec<TraceRow>> {
    body(text, TRACE_HEADER)?
        .map(|(n, line)| {
            let c = columns(n, line, 7)?;
            Ok(TraceRow {
                tokens: field(n, "tokens", c[0])?,
                lm_loss: field(n, "lm_loss", c[1])?,
                ppl: field(n, "ppl", c[2])?,
                kl_loss: if c[3].is_empty() { None } else { Some(field(n, "kl_loss", c[3])?) },
                lr: field(n, "lr", c[4])?,
                layers_live: field(n, "layers_live", c[5])?,
                cumulative_flops: field(n, "cumulative_flops", c[6])?,
            })
        })
        .collect()
}

pub fn eval_to_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(EVAL_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.tokens, r.layers_live, r.val_loss, r.val_ppl);
    }
    s
}

pub fn eval_from_csv(text: &str) -> Result<Vec<EvalRow>> {
    body(text, EVAL_HEADER)?
        .map(|(n, line)| {
            let c = columns(n, line, 4)?;
            Ok(EvalRow {
                tokens: field(n, "tokens", c[0])?,
                layers_live: field(n, "layers_live", c[1])?,
                val_loss: field(n, "val_loss", c[2])?,
                val_ppl: field(n, "val_ppl", c[3])?,
            })
        })
        .collect()
}
