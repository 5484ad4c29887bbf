//! Analytic training-compute accounting: `6·N·D` for a training step and
//! `2·N·D` for a gradient-free teacher forward.

use std::fmt::{self, Write as _};

use crate::distill::TraceRow;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    TeacherFree,
    Kd,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::TeacherFree => "teacher_free",
            Method::Kd => "kd",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_free" | "teacher-free" => Ok(Method::TeacherFree),
            "kd" => Ok(Method::Kd),
            _ => Err(Error::Usage(format!("unknown method {s:?}; expected teacher_free or kd"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub method: Method,
    pub student_params: f64,
    pub teacher_params: Option<f64>,
    pub tokens: f64,
    pub train_flops: f64,
    pub teacher_forward_flops: f64,
    pub total_flops: f64,
    /// Total relative to a teacher-free run of the same student and tokens.
    pub ratio_vs_teacher_free: f64,
}

/// `1 + N_T / (3·N_S)`: KD compute over teacher-free compute.
pub fn kd_ratio(student_params: f64, teacher_params: f64) -> f64 {
    1.0 + teacher_params / (3.0 * student_params)
}

pub fn estimate(method: Method, student_params: f64, teacher_params: Option<f64>, tokens: f64) -> Result<CostReport> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Usage(format!("{name} must be positive, got {v}")))
        }
    };
    let n_s = positive("student parameters", student_params)?;
    let d = positive("tokens", tokens)?;
    let train = 6.0 * n_s * d;
    let (teacher_params, teacher) = match method {
        Method::TeacherFree => (None, 0.0),
        Method::Kd => {
            let n_t = teacher_params.ok_or_else(|| Error::Usage("kd estimate needs teacher parameters".into()))?;
            let n_t = positive("teacher parameters", n_t)?;
            (Some(n_t), 2.0 * n_t * d)
        }
    };
    Ok(CostReport {
        method,
        student_params: n_s,
        teacher_params,
        tokens: d,
        train_flops: train,
        teacher_forward_flops: teacher,
        total_flops: train + teacher,
        ratio_vs_teacher_free: match teacher_params {
            Some(n_t) => kd_ratio(n_s, n_t),
            None => 1.0,
        },
    })
}

/// Parameter bookkeeping needed to integrate compute over a trace whose
/// depth changes at layer drops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accounting {
    pub per_layer: usize,
    pub non_layer: usize,
    pub teacher_params: Option<usize>,
}

impl Accounting {
    pub fn for_student(cfg: &ModelConfig, teacher_params: Option<usize>) -> Self {
        let pc = cfg.param_count();
        Self { per_layer: pc.per_layer, non_layer: pc.non_layer, teacher_params }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Measured {
    pub train_flops: f64,
    pub teacher_forward_flops: f64,
    pub total_flops: f64,
    pub tokens: u64,
}

/// Integrates the per-token cost over a trace, using each step's live depth.
pub fn measure(trace: &[TraceRow], acct: &Accounting) -> Measured {
    let mut m = Measured::default();
    let mut prev = 0u64;
    for row in trace {
        let d = row.tokens.saturating_sub(prev) as f64;
        prev = row.tokens;
        let n = (acct.non_layer + row.layers_live * acct.per_layer) as f64;
        m.train_flops += 6.0 * n * d;
        if let Some(n_t) = acct.teacher_params {
            m.teacher_forward_flops += 2.0 * n_t as f64 * d;
        }
    }
    m.total_flops = m.train_flops + m.teacher_forward_flops;
    m.tokens = prev;
    m
}

/// A published compute setting, expressed as parameter counts that
/// reproduce its FLOPs totals under the `6ND`/`2ND` model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Setting {
    pub label: &'static str,
    pub student_params: f64,
    pub teacher_params: f64,
    pub tokens: f64,
    pub teacher_free_total: f64,
    pub kd_total: f64,
    pub kd_ratio: f64,
}

/// Reference settings: 300M and 1.1B students continued for 20B tokens.
pub const REFERENCE_SETTINGS: [Setting; 2] = [
    Setting {
        label: "300M",
        student_params: 177.5e6,
        teacher_params: 303.5e6,
        tokens: 20e9,
        teacher_free_total: 21.3e18,
        kd_total: 33.44e18,
        kd_ratio: 1.57,
    },
    Setting {
        label: "1.1B",
        student_params: 72.8e18 / (6.0 * 20e9),
        teacher_params: (117.2e18 - 72.8e18) / (2.0 * 20e9),
        tokens: 20e9,
        teacher_free_total: 72.8e18,
        kd_total: 117.2e18,
        kd_ratio: 1.6,
    },
];

/// `x` rounded to three significant figures.
pub fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = (2 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.digits$}")
}

fn sci(x: f64) -> String {
    format!("{x:.4e}")
}

pub const CSV_HEADER: &str =
    "label,method,student_params,teacher_params,tokens,train_flops,teacher_forward_flops,total_flops,ratio_vs_teacher_free";

pub fn reports_to_csv(reports: &[(String, CostReport)]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for (label, r) in reports {
        let _ = writeln!(
            s,
            "{label},{},{},{},{},{},{},{},{}",
            r.method,
            r.student_params,
            r.teacher_params.map(|v| v.to_string()).unwrap_or_default(),
            r.tokens,
            r.train_flops,
            r.teacher_forward_flops,
            r.total_flops,
            r.ratio_vs_teacher_free
        );
    }
    s
}

/// Fixed-width table for terminals.
pub fn reports_to_table(reports: &[(String, CostReport)]) -> String {
    let header = ["label", "method", "N_S", "N_T", "tokens", "train", "teacher_fwd", "total", "ratio"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|(label, r)| {
            vec![
                label.clone(),
                r.method.to_string(),
                sci(r.student_params),
                r.teacher_params.map(sci).unwrap_or_else(|| "-".into()),
                sci(r.tokens),
                sci(r.train_flops),
                sci(r.teacher_forward_flops),
                sci(r.total_flops),
                format!("{}x", sig3(r.ratio_vs_teacher_free)),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec(), &mut out);
    for r in &rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
