//! Command-line surface: `pretrain`, `distill`, `kd`, `evaluate`, `flops`,
//! `report` and `gen-corpus`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{resolve_data_path, DataSettings, DistillConfig, KdConfig, PretrainConfig, RawConfig};
use crate::data::synthetic::World;
use crate::data::{fixed_batches, BatchStream, Corpus, SequenceBatch};
use crate::distill::{
    eval_to_csv, trace_from_csv, trace_to_csv, truncate_model, Control, DropSchedule, RemovalPlan, RunState, Teacher,
    TrainSpec, Trainer,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, load_tasks, tasks_to_jsonl, world_tasks};
use crate::flops::{self, Accounting, Method, REFERENCE_SETTINGS};
use crate::model::CausalLM;
use crate::optim::LrSchedule;

#[derive(Debug, Parser)]
#[command(name = "distill", version, about = "Layer-truncation distillation workbench for small causal LMs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from scratch.
    Pretrain(RunArgs),
    /// Truncate a checkpoint and continue pretraining it without a teacher.
    Distill(DistillArgs),
    /// Train a truncated student against its full teacher's logits.
    Kd(KdArgs),
    /// Score a checkpoint on multiple-choice tasks.
    Evaluate(EvalArgs),
    /// Analytic training-compute estimates.
    Flops(FlopsArgs),
    /// Merge run traces and evaluation reports into comparison tables.
    Report(ReportArgs),
    /// Write the synthetic corpus and matching task file.
    GenCorpus(GenArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Run checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) after this many total steps.
    #[arg(long, hide = true)]
    pub stop_after_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Overrides `distill.source`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KdArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Overrides `kd.teacher`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tasks: PathBuf,
    /// Report CSV path; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Print the reference 300M and 1.1B settings.
    #[arg(long)]
    pub reference: bool,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub student_params: Option<f64>,
    #[arg(long)]
    pub teacher_params: Option<f64>,
    #[arg(long)]
    pub tokens: Option<f64>,
    /// Integrate a run trace; needs `--student` (and `--teacher` for KD).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub student: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Also write the reports as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `name=path/to/trace.csv`, repeatable.
    #[arg(long = "trace")]
    pub traces: Vec<String>,
    /// Evaluation report of the undistilled model.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// `name=path/to/report.csv`, repeatable.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4_000_000)]
    pub bytes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 7)]
    pub world_seed: u64,
    /// Also write a task file here.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub per_task: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => pretrain(&a),
        Command::Distill(a) => distill(&a),
        Command::Kd(a) => kd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Flops(a) => flops_cmd(&a),
        Command::Report(a) => report(&a),
        Command::GenCorpus(a) => gen_corpus(&a),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_raw(args: &RunArgs) -> Result<RawConfig> {
    let mut raw = RawConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        raw.set("train.seed", seed.to_string());
    }
    Ok(raw)
}

/// Run manifest: command, version, seed, resolved config and clock span.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: RawConfig,
    pub start_tokens: u64,
    pub end_tokens: u64,
    /// `running` until the run finishes; `complete` or `stopped` afterwards.
    pub status: String,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("command".to_string(), self.command.clone());
        m.insert("code_version".to_string(), env!("CARGO_PKG_VERSION").to_string());
        m.insert("seed".to_string(), self.seed.to_string());
        m.insert("start_tokens".to_string(), self.start_tokens.to_string());
        m.insert("end_tokens".to_string(), self.end_tokens.to_string());
        m.insert("status".to_string(), self.status.clone());
        for (k, v) in self.config.entries() {
            m.insert(format!("config.{k}"), v.clone());
        }
        checkpoint::format_kv(&m)
    }
}

struct Prepared {
    stream: BatchStream,
    validation: Vec<SequenceBatch>,
}

fn prepare_data(data: &DataSettings, seed: u64) -> Result<Prepared> {
    let corpus = Corpus::load(&resolve_data_path(&data.corpus))?;
    let (train, held) = if data.holdout_every > 1 { corpus.split_every(data.holdout_every) } else { (corpus.clone(), corpus) };
    let validation = if data.val_batches > 0 && held.num_docs() > 0 {
        match fixed_batches(held, data.batch, seed ^ 0x5eed, data.val_batches) {
            Ok(v) => v,
            Err(Error::Input(msg)) => {
                log::warn!("no validation set: {msg}");
                Vec::new()
            }
            Err(e) => return Err(e),
        }
    } else {
        Vec::new()
    };
    Ok(Prepared { stream: BatchStream::new(train, data.batch, seed)?, validation })
}

/// Config entries recorded in a run checkpoint so a resume can be checked
/// against the invocation that created it.
fn stamp(ck: &mut Checkpoint, raw: &RawConfig) {
    for (k, v) in raw.entries() {
        ck.meta.insert(format!("config.{k}"), v.clone());
    }
}

fn check_resume_config(ck: &Checkpoint, raw: &RawConfig) -> Result<()> {
    let recorded: BTreeMap<&str, &str> =
        ck.meta.iter().filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k, v.as_str()))).collect();
    let current: BTreeMap<&str, &str> = raw.entries().iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    if recorded != current {
        let diff: Vec<String> = current
            .iter()
            .filter(|(k, v)| recorded.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k}={v}"))
            .chain(recorded.keys().filter(|k| !current.contains_key(*k)).map(|k| format!("{k} (removed)")))
            .collect();
        return Err(Error::config(format!("resume config differs from the checkpoint's: {}", diff.join(", "))));
    }
    Ok(())
}

const PROGRESS_EVERY_STEPS: u64 = 100;

struct Job<'a> {
    command: &'static str,
    args: &'a RunArgs,
    raw: &'a RawConfig,
    seed: u64,
    spec: TrainSpec,
    teacher: Option<Teacher>,
    peak_lr: f64,
    checkpoint_every: u64,
}

/// Shared driver for every training command.
fn execute(job: Job<'_>, fresh: impl FnOnce() -> Result<RunState>, mut data: Prepared) -> Result<RunState> {
    let mut state = match &job.args.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            check_resume_config(&ck, job.raw)?;
            checkpoint::run_state(&ck)?
        }
        None => fresh()?,
    };
    data.stream.skip_steps(state.step);
    let out = &job.args.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest {
        command: job.command.to_string(),
        seed: job.seed,
        config: job.raw.clone(),
        start_tokens: state.tokens,
        end_tokens: state.tokens,
        status: "running".into(),
    };
    write(&out.join("manifest.txt"), &manifest.to_text())?;
    write(&out.join("config.txt"), &job.raw.to_text())?;

    let mut trainer = Trainer::new(&job.spec).with_validation(&data.validation);
    if let Some(t) = &job.teacher {
        trainer = trainer.with_teacher(t);
    }
    let save = |state: &RunState, dir: &Path| -> Result<()> {
        let mut ck = checkpoint::run_checkpoint(state, job.peak_lr);
        stamp(&mut ck, job.raw);
        ck.save(dir)
    };
    let mut stopped = false;
    trainer.run(&mut state, &mut data.stream, |s| {
        if let Some(row) = s.trace.last().filter(|_| s.step % PROGRESS_EVERY_STEPS == 0) {
            log::info!("step {} tokens {} loss {:.4} lr {:.3e}", s.step, row.tokens, row.lm_loss, row.lr);
        }
        if job.checkpoint_every > 0 && s.step % job.checkpoint_every == 0 {
            save(s, &checkpoint::step_dir(&out.join("checkpoints"), s.step))?;
        }
        if job.args.stop_after_steps.is_some_and(|n| s.step >= n) {
            stopped = true;
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    })?;
    write(&out.join("trace.csv"), &trace_to_csv(&state.trace))?;
    write(&out.join("eval.csv"), &eval_to_csv(&state.evals))?;
    if stopped {
        save(&state, &checkpoint::step_dir(&out.join("checkpoints"), state.step))?;
        manifest.status = "stopped".into();
    } else {
        save(&state, &out.join("final"))?;
        manifest.status = "complete".into();
    }
    manifest.end_tokens = state.tokens;
    write(&out.join("manifest.txt"), &manifest.to_text())?;
    if let Some(last) = state.evals.last() {
        println!("tokens={} layers={} val_ppl={:.4}", last.tokens, last.layers_live, last.val_ppl);
    }
    Ok(state)
}

pub fn pretrain(args: &RunArgs) -> Result<()> {
    let raw = load_raw(args)?;
    let cfg = PretrainConfig::from_raw(&raw)?;
    let schedule = cfg.schedule();
    schedule.validate()?;
    let data = prepare_data(&cfg.data, cfg.train.seed)?;
    let spec = TrainSpec {
        data: cfg.data.batch,
        schedule,
        drops: DropSchedule::none(),
        eval_every_tokens: cfg.train.eval_every_tokens,
    };
    let job = Job {
        command: "pretrain",
        args,
        raw: &raw,
        seed: cfg.train.seed,
        spec,
        teacher: None,
        peak_lr: cfg.train.peak_lr,
        checkpoint_every: cfg.train.checkpoint_every_steps,
    };
    let fresh = || Ok(RunState::new(CausalLM::init(&cfg.model, cfg.train.seed)?, cfg.train.lion));
    execute(job, fresh, data).map(|_| ())
}

/// Source checkpoint header, plan and schedule for a continued run, all
/// validated before any tensor is read.
fn continued_setup(
    source: &Path,
    train: &crate::config::TrainSettings,
    plan: &crate::config::PlanSettings,
) -> Result<(Checkpoint, RemovalPlan, LrSchedule)> {
    let header = Checkpoint::load_header(source)?;
    let n_layers = header.model_config()?.n_layers;
    let removal = RemovalPlan::resolve(plan.layout, n_layers, plan.k_remove, plan.drop_gap_tokens)?;
    removal.check_budget(plan.pre_drop(train), train.total_tokens)?;
    let peak = header.peak_lr()? * plan.lr_scale;
    let schedule = LrSchedule::new(peak, train.warmup_tokens, train.total_tokens);
    schedule.validate()?;
    Ok((header, removal, schedule))
}

pub fn distill(args: &DistillArgs) -> Result<()> {
    let mut raw = load_raw(&args.run)?;
    if let Some(c) = &args.checkpoint {
        raw.set("distill.source", c.display().to_string());
    }
    let cfg = DistillConfig::from_raw(&raw)?;
    let (_, removal, schedule) = continued_setup(&cfg.source, &cfg.train, &cfg.plan)?;
    let data = prepare_data(&cfg.data, cfg.train.seed)?;
    let spec = TrainSpec {
        data: cfg.data.batch,
        schedule,
        drops: DropSchedule {
            indices: removal.resolved_indices.clone(),
            pre_drop_tokens: cfg.plan.pre_drop(&cfg.train),
            gap_tokens: removal.drop_gap_tokens,
        },
        eval_every_tokens: cfg.train.eval_every_tokens,
    };
    let job = Job {
        command: "distill",
        args: &args.run,
        raw: &raw,
        seed: cfg.train.seed,
        spec,
        teacher: None,
        peak_lr: schedule.peak_lr,
        checkpoint_every: cfg.train.checkpoint_every_steps,
    };
    let fresh = || Ok(RunState::new(Checkpoint::load(&cfg.source)?.model()?, cfg.train.lion));
    let state = execute(job, fresh, data)?;
    log::info!("distilled model has {} layers", state.model.n_layers());
    Ok(())
}

pub fn kd(args: &KdArgs) -> Result<()> {
    let mut raw = load_raw(&args.run)?;
    if let Some(t) = &args.teacher {
        raw.set("kd.teacher", t.display().to_string());
    }
    let cfg = KdConfig::from_raw(&raw)?;
    let (_, removal, schedule) = continued_setup(&cfg.teacher, &cfg.train, &cfg.plan)?;
    let data = prepare_data(&cfg.data, cfg.train.seed)?;
    let teacher_model = Checkpoint::load(&cfg.teacher)?.model()?;
    let student = truncate_model(&teacher_model, &removal.resolved_indices)?;
    let spec = TrainSpec {
        data: cfg.data.batch,
        schedule,
        drops: DropSchedule::none(),
        eval_every_tokens: cfg.train.eval_every_tokens,
    };
    let job = Job {
        command: "kd",
        args: &args.run,
        raw: &raw,
        seed: cfg.train.seed,
        spec,
        teacher: Some(Teacher { model: teacher_model, settings: cfg.kd }),
        peak_lr: schedule.peak_lr,
        checkpoint_every: cfg.train.checkpoint_every_steps,
    };
    let lion = cfg.train.lion;
    execute(job, move || Ok(RunState::new(student, lion)), data).map(|_| ())
}

pub fn evaluate(args: &EvalArgs) -> Result<()> {
    let tasks = load_tasks(&args.tasks)?;
    let model = Checkpoint::load(&args.checkpoint)?.model()?;
    let report = evaluate_suite(&model, &tasks)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        write(out, &csv)?;
    }
    Ok(())
}

fn flops_cmd(args: &FlopsArgs) -> Result<()> {
    let mut reports = Vec::new();
    if args.reference {
        for s in REFERENCE_SETTINGS {
            reports.push((s.label.to_string(), flops::estimate(Method::TeacherFree, s.student_params, None, s.tokens)?));
            reports.push((s.label.to_string(), flops::estimate(Method::Kd, s.student_params, Some(s.teacher_params), s.tokens)?));
        }
    }
    if let Some(method) = args.method {
        let n_s = args.student_params.ok_or_else(|| Error::Usage("--student-params is required".into()))?;
        let d = args.tokens.ok_or_else(|| Error::Usage("--tokens is required".into()))?;
        reports.push(("custom".to_string(), flops::estimate(method, n_s, args.teacher_params, d)?));
    }
    if let Some(trace_path) = &args.trace {
        let student = args.student.as_ref().ok_or_else(|| Error::Usage("--trace needs --student".into()))?;
        let cfg = Checkpoint::load_header(student)?.model_config()?;
        let teacher = match &args.teacher {
            Some(t) => Some(Checkpoint::load_header(t)?.model_config()?.param_count().total),
            None => None,
        };
        let text = fs::read_to_string(trace_path).map_err(|e| Error::io(trace_path, e))?;
        let m = flops::measure(&trace_from_csv(&text)?, &Accounting::for_student(&cfg, teacher));
        println!(
            "measured tokens={} train_flops={:e} teacher_forward_flops={:e} total_flops={:e}",
            m.tokens, m.train_flops, m.teacher_forward_flops, m.total_flops
        );
    }
    if reports.is_empty() && args.trace.is_none() {
        return Err(Error::Usage("nothing to do: pass --reference, --method or --trace".into()));
    }
    if !reports.is_empty() {
        print!("{}", flops::reports_to_table(&reports));
        if let Some(csv) = &args.csv {
            write(csv, &flops::reports_to_csv(&reports))?;
        }
    }
    Ok(())
}

fn named_path(spec: &str) -> Result<(String, PathBuf)> {
    spec.split_once('=')
        .map(|(n, p)| (n.to_string(), PathBuf::from(p)))
        .ok_or_else(|| Error::Usage(format!("expected name=path, got {spec:?}")))
}

/// Token-aligned perplexity table over several traces; blank cells where a
/// run has no row at that token count.
pub fn merge_traces(traces: &[(String, Vec<crate::distill::TraceRow>)]) -> String {
    let mut axis: BTreeMap<u64, Vec<Option<f64>>> = BTreeMap::new();
    for (i, (_, rows)) in traces.iter().enumerate() {
        for r in rows {
            axis.entry(r.tokens).or_insert_with(|| vec![None; traces.len()])[i] = Some(r.ppl);
        }
    }
    let mut out = String::from("tokens");
    for (name, _) in traces {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (tokens, cells) in axis {
        out.push_str(&tokens.to_string());
        for c in cells {
            out.push(',');
            if let Some(v) = c {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Mean row of an evaluation report.
fn report_mean(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("mean,avg,"))
        .and_then(|rest| rest.split(',').next())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: no mean row", path.display())))
}

fn report(args: &ReportArgs) -> Result<()> {
    if args.traces.is_empty() && args.variants.is_empty() {
        return Err(Error::Usage("pass --trace and/or --baseline with --variant".into()));
    }
    if !args.traces.is_empty() {
        let mut traces = Vec::new();
        for spec in &args.traces {
            let (name, path) = named_path(spec)?;
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            traces.push((name, trace_from_csv(&text)?));
        }
        write(&args.out.join("ppl_vs_tokens.csv"), &merge_traces(&traces))?;
        println!("{:<24} {:>12} {:>12}", "run", "tokens", "final_ppl");
        for (name, rows) in &traces {
            if let Some(last) = rows.last() {
                println!("{name:<24} {:>12} {:>12.4}", last.tokens, last.ppl);
            }
        }
    }
    if !args.variants.is_empty() {
        let baseline = args.baseline.as_ref().ok_or_else(|| Error::Usage("--variant needs --baseline".into()))?;
        let base = report_mean(baseline)?;
        let mut csv = String::from("variant,avg,pct_drop\n");
        csv.push_str(&format!("baseline,{base},0\n"));
        for spec in &args.variants {
            let (name, path) = named_path(spec)?;
            let v = report_mean(&path)?;
            let drop = if base != 0.0 { (base - v) / base * 100.0 } else { 0.0 };
            csv.push_str(&format!("{name},{v},{drop}\n"));
        }
        print!("{csv}");
        write(&args.out.join("percentage_drop.csv"), &csv)?;
    }
    Ok(())
}

fn gen_corpus(args: &GenArgs) -> Result<()> {
    let world = World::new(args.world_seed);
    write(&args.out, &world.corpus(args.seed, args.bytes))?;
    if let Some(tasks) = &args.tasks {
        write(tasks, &tasks_to_jsonl(&world_tasks(&world, args.seed ^ 0x7a5c, args.per_task)))?;
    }
    Ok(())
}
