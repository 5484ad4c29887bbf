//! Deterministic criteria: exact, analytic or property checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use distill_core::checkpoint::{self, Checkpoint};
use distill_core::data::synthetic::World;
use distill_core::data::{BatchStream, Corpus, DataConfig, BOS, VOCAB_SIZE};
use distill_core::distill::{
    resolve_layout, truncate_model, Control, DropSchedule, KdSettings, RemovalLayout, RunState, Teacher, TraceRow,
    TrainSpec, Trainer,
};
use distill_core::eval::{aggregate, completion_logprob, continuation_logprob, select, ChoiceScore, Metric};
use distill_core::flops::{estimate, sig3, Method};
use distill_core::model::{CausalLM, ModelConfig, Trainable};
use distill_core::optim::{LionConfig, LrSchedule};
use distill_core::tensor::{Graph, Real};
use rand::Rng;

use crate::common::{model_grad_check, op_cases, rng};
use crate::{Outcome, Shared};

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Adds uniform noise so norms, biases and logits are away from their
/// symmetric initial values.
pub fn jitter<T: Real>(model: &mut CausalLM<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, t) in model.named_params_mut() {
        for v in t.data_mut() {
            *v = T::from_f64(v.as_f64() + scale * (r.random::<f64>() - 0.5));
        }
    }
}

fn weight_bits<T: Real>(model: &CausalLM<T>) -> BTreeMap<String, Vec<u64>> {
    model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.as_f64().to_bits()).collect()))
        .collect()
}

pub fn small_corpus(seed: u64, bytes: usize) -> Corpus {
    Corpus::from_bytes(World::new(7).corpus(seed, bytes).as_bytes())
}

fn train_run(
    model: CausalLM<f32>,
    spec: &TrainSpec,
    teacher: Option<&Teacher>,
    corpus: &Corpus,
    stream_seed: u64,
) -> Result<RunState, String> {
    let mut state = RunState::new(model, LionConfig::default());
    let mut stream = ok(BatchStream::new(corpus.clone(), spec.data, stream_seed))?;
    let mut trainer = Trainer::new(spec);
    if let Some(t) = teacher {
        trainer = trainer.with_teacher(t);
    }
    ok(trainer.run(&mut state, &mut stream, |_| Ok(Control::Continue)))?;
    Ok(state)
}

pub fn gradients(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let cases = op_cases();
    let mut worst_op = 0.0f64;
    for (name, case) in &cases {
        for seed in 0..20 {
            let err = case(seed);
            ensure!(err < 1e-4, "{name} seed {seed}: rel err {err:e}");
            worst_op = worst_op.max(err);
        }
    }
    let cfg = ModelConfig { d_ff: 8, ..ModelConfig::new(8, 2, 2, 7, 6) };
    let mut worst_model = 0.0f64;
    for seed in 0..20 {
        let mut r = rng(seed + 500);
        let rows: Vec<usize> = (0..12).map(|_| r.random_range(0..7)).collect();
        let err = model_grad_check(&cfg, seed, &rows, 2, 4);
        ensure!(err < 1e-4, "2-layer model seed {seed}: rel err {err:e}");
        worst_model = worst_model.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s, limit 60s");
    Ok(format!(
        "{} ops x 20 seeds, max rel err {worst_op:.1e}; 2-layer model loss x 20 seeds, max rel err {worst_model:.1e}",
        cases.len()
    ))
}

pub fn causality(_: &mut Shared) -> Outcome {
    for pair in 0..50u64 {
        let mut r = rng(1000 + pair);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * [4, 8][r.random_range(0..2)];
        let layers = r.random_range(1..=3);
        let vocab = r.random_range(5..40);
        let t = r.random_range(3..=16);
        let cfg = ModelConfig::new(d, heads, layers, vocab, 16);
        let mut model = ok(CausalLM::<f32>::init(&cfg, pair))?;
        jitter(&mut model, pair, 0.2);
        let tokens: Vec<usize> = (0..t).map(|_| r.random_range(0..vocab)).collect();
        let j = r.random_range(1..t);
        let mut alt = tokens.clone();
        alt[j] = (tokens[j] + r.random_range(1..vocab)) % vocab;
        let a = ok(model.forward_logits(&tokens, 1, t))?;
        let b = ok(model.forward_logits(&alt, 1, t))?;
        let cut = j * vocab;
        let before = a.data()[..cut].iter().zip(&b.data()[..cut]).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        ensure!(before == 0, "pair {pair}: {before} logits before position {j} changed");
        ensure!(a.data()[cut..] != b.data()[cut..], "pair {pair}: perturbation at {j} had no effect");
    }
    Ok("50 (model, position) pairs; every logit before the perturbed position is bit-identical".into())
}

pub fn truncation(_: &mut Shared) -> Outcome {
    let cfg = ModelConfig::new(16, 2, 24, 32, 8);
    let mut model = ok(CausalLM::<f32>::init(&cfg, 3))?;
    jitter(&mut model, 3, 0.1);
    let per_layer = cfg.param_count().per_layer;
    let source = weight_bits(&model);
    let mut checked = 0;
    for k in [8usize, 12] {
        for layout in RemovalLayout::ALL {
            let idx = ok(resolve_layout(layout, 24, k))?;
            ensure!(idx.len() == k, "{layout} k={k}: {} indices", idx.len());
            ensure!(idx.windows(2).all(|w| w[0] < w[1]), "{layout} k={k}: indices not strictly increasing: {idx:?}");
            ensure!(idx.iter().all(|&i| (1..=22).contains(&i)), "{layout} k={k}: boundary layer in {idx:?}");
            let student = ok(truncate_model(&model, &idx))?;
            ensure!(student.n_layers() == 24 - k, "{layout} k={k}: {} layers left", student.n_layers());
            let delta = model.num_params() - student.num_params();
            ensure!(delta == k * per_layer, "{layout} k={k}: param delta {delta} != {k} x {per_layer}");
            ensure!(
                student.num_params() == student.config().param_count().total,
                "{layout} k={k}: allocated params disagree with the closed form"
            );
            let kept: Vec<usize> = (0..24).filter(|i| !idx.contains(i)).collect();
            let got = weight_bits(&student);
            for (name, bits) in &got {
                let src_name = match name.strip_prefix("layers.") {
                    Some(rest) => {
                        let (pos, part) = rest.split_once('.').ok_or("bad tensor name")?;
                        let pos: usize = pos.parse().map_err(|_| "bad layer index")?;
                        format!("layers.{}.{part}", kept[pos])
                    }
                    None => name.clone(),
                };
                ensure!(source.get(&src_name) == Some(bits), "{layout} k={k}: {name} differs from source {src_name}");
            }
            ensure!(got.len() == source.len() - k * 10, "{layout} k={k}: unexpected tensor count {}", got.len());
            checked += 1;
        }
    }
    Ok(format!("{checked} (layout, k) cases at L=24; kept tensors bit-identical, param delta = k x {per_layer}"))
}

pub fn kd_degeneracy(_: &mut Shared) -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let cfg = ModelConfig::new(32, 4, 2, VOCAB_SIZE, 32);
        let mut model = ok(CausalLM::<f32>::init(&cfg, seed))?;
        jitter(&mut model, seed, 0.5);
        let mut r = rng(seed);
        let rows: Vec<usize> = (0..4 * 17).map(|_| r.random_range(0..VOCAB_SIZE)).collect();
        let inputs: Vec<usize> = rows.chunks(17).flat_map(|c| c[..16].to_vec()).collect();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, Trainable::All);
        let (_, student_logits) = ok(model.lm_loss_on(&mut g, &vars, &rows, 4, None))?;
        let teacher = ok(ok(model.forward_logits(&inputs, 4, 16))?.reshape(&[64, VOCAB_SIZE]))?;
        let tv = g.constant(teacher);
        let kl = ok(g.kl_teacher_student(tv, student_logits, 1.0))?;
        let v = g.value(kl).item() as f64;
        ensure!(v.abs() < 1e-6, "seed {seed}: KL of a model against itself is {v:e}");
        worst = worst.max(v.abs());
    }

    let cfg = ModelConfig::new(32, 4, 4, VOCAB_SIZE, 32);
    let mut full = ok(CausalLM::<f32>::init(&cfg, 21))?;
    jitter(&mut full, 21, 0.3);
    let student = ok(truncate_model(&full, &[1, 2]))?;
    let data = DataConfig { batch_size: 4, seq_len: 32 };
    let spec =
        TrainSpec { data, schedule: LrSchedule::new(1e-3, 1280, 12800), drops: DropSchedule::none(), eval_every_tokens: 0 };
    let corpus = small_corpus(3, 60_000);
    let plain = train_run(student.clone(), &spec, None, &corpus, 5)?;
    let teacher = Teacher { model: full, settings: KdSettings { temperature: 2.0, alpha: 1.0 } };
    let kd = train_run(student, &spec, Some(&teacher), &corpus, 5)?;
    ensure!(plain.trace.len() == kd.trace.len(), "trace lengths differ");
    for (i, (a, b)) in plain.trace.iter().zip(&kd.trace).enumerate() {
        let same = a.tokens == b.tokens
            && a.lm_loss.to_bits() == b.lm_loss.to_bits()
            && a.ppl.to_bits() == b.ppl.to_bits()
            && a.lr.to_bits() == b.lr.to_bits()
            && a.layers_live == b.layers_live;
        ensure!(same, "step {i}: teacher-free {a:?} vs kd {b:?}");
        ensure!(b.kl_loss.is_some_and(|v| v > 0.0), "step {i}: kd row without a KL term");
    }
    ensure!(weight_bits(&plain.model) == weight_bits(&kd.model), "final weights differ");
    Ok(format!(
        "self-KL at T=1 max {worst:.1e} over 5 seeds; alpha=1 KD matches teacher-free bit-for-bit over {} steps",
        plain.trace.len()
    ))
}

pub fn flops_reproduction(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    // (label, N_S, N_T, D, teacher-free total, KD total, ratio) as published;
    // the 1.1B counts are back-solved from its totals.
    let rows = [
        ("300M", 177.5e6, 303.5e6, 20e9, 21.3e18, 33.44e18, 1.57),
        ("1.1B", 72.8e18 / (6.0 * 20e9), 44.4e18 / (2.0 * 20e9), 20e9, 72.8e18, 117.2e18, 1.6),
    ];
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let mut out = Vec::new();
    for (label, n_s, n_t, d, tf_total, kd_total, ratio) in rows {
        let tf = ok(estimate(Method::TeacherFree, n_s, None, d))?;
        let kd = ok(estimate(Method::Kd, n_s, Some(n_t), d))?;
        ensure!(rel(tf.total_flops, tf_total) <= 0.02, "{label}: teacher-free {:e} vs {tf_total:e}", tf.total_flops);
        ensure!(rel(kd.total_flops, kd_total) <= 0.02, "{label}: kd {:e} vs {kd_total:e}", kd.total_flops);
        ensure!(rel(kd.ratio_vs_teacher_free, ratio) <= 0.02, "{label}: ratio {} vs {ratio}", kd.ratio_vs_teacher_free);
        let formula = 1.0 + n_t / (3.0 * n_s);
        ensure!(kd.ratio_vs_teacher_free == formula, "{label}: ratio is not 1 + N_T/(3 N_S)");
        let direct = kd.total_flops / tf.total_flops;
        ensure!(rel(direct, formula) <= 4.0 * f64::EPSILON, "{label}: totals ratio {direct} vs formula {formula}");
        out.push(format!(
            "{label} {:.4e}/{:.4e} ratio {}",
            tf.total_flops,
            kd.total_flops,
            sig3(kd.ratio_vs_teacher_free)
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 0.1, "took {secs}s");
    Ok(out.join("; "))
}

fn same_trace(a: &[TraceRow], b: &[TraceRow]) -> bool {
    let bits = |r: &TraceRow| {
        (
            r.tokens,
            r.lm_loss.to_bits(),
            r.ppl.to_bits(),
            r.kl_loss.map(f64::to_bits),
            r.lr.to_bits(),
            r.layers_live,
            r.cumulative_flops.to_bits(),
        )
    };
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| bits(x) == bits(y))
}

pub fn drop_gap(_: &mut Shared) -> Outcome {
    let cfg = ModelConfig::new(32, 4, 4, VOCAB_SIZE, 32);
    let mut model = ok(CausalLM::<f32>::init(&cfg, 8))?;
    jitter(&mut model, 8, 0.3);
    let data = DataConfig { batch_size: 4, seq_len: 32 };
    let schedule = LrSchedule::new(1e-3, 1280, 7680);
    let staggered = TrainSpec {
        data,
        schedule,
        drops: DropSchedule { indices: vec![1, 2], pre_drop_tokens: 0, gap_tokens: 0 },
        eval_every_tokens: 0,
    };
    let immediate = TrainSpec { drops: DropSchedule::none(), ..staggered.clone() };
    let corpus = small_corpus(4, 60_000);
    let a = train_run(model.clone(), &staggered, None, &corpus, 9)?;
    let b = train_run(ok(truncate_model(&model, &[1, 2]))?, &immediate, None, &corpus, 9)?;
    ensure!(same_trace(&a.trace, &b.trace), "traces differ");
    ensure!(weight_bits(&a.model) == weight_bits(&b.model), "final weights differ");
    ensure!(a.trace.iter().all(|r| r.layers_live == 2), "staggered run trained with more than 2 layers");
    Ok(format!("{} steps; traces and final weights bit-identical", a.trace.len()))
}

/// `log p(continuation | context)` from one forward pass per prefix and a
/// naive softmax.
fn chain_rule_oracle(model: &CausalLM<f64>, context: &[usize], continuation: &[usize]) -> f64 {
    let v = model.config().vocab_size;
    let mut ids = context.to_vec();
    let mut total = 0.0;
    for &tok in continuation {
        let logits = model.forward_logits(&ids, 1, ids.len()).expect("forward");
        let last = &logits.data()[(ids.len() - 1) * v..];
        let z: f64 = last.iter().map(|x| x.exp()).sum();
        total += (last[tok].exp() / z).ln();
        ids.push(tok);
    }
    total
}

fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<usize>> {
    (0..vocab.pow(len as u32))
        .map(|mut n| {
            (0..len)
                .map(|_| {
                    let t = n % vocab;
                    n /= vocab;
                    t
                })
                .collect()
        })
        .collect()
}

pub fn eval_oracle(_: &mut Shared) -> Outcome {
    const TOL: f64 = 1e-12;
    let cfg = ModelConfig { d_ff: 16, ..ModelConfig::new(8, 2, 2, 8, 6) };
    let mut model = ok(CausalLM::<f64>::init(&cfg, 77))?;
    jitter(&mut model, 77, 1.0);
    let mut r = rng(77);
    let mut contexts: Vec<Vec<usize>> = all_sequences(8, 1);
    for len in 2..=3 {
        contexts.extend((0..6).map(|_| (0..len).map(|_| r.random_range(0..8)).collect::<Vec<_>>()));
    }
    let mut worst = 0.0f64;
    let mut scored = 0;
    for ctx in &contexts {
        for m in 1..=3 {
            let mut mass = 0.0;
            for cont in all_sequences(8, m) {
                let got = ok(continuation_logprob(&model, ctx, &cont))?;
                if ctx.len() + m > 6 {
                    ensure!(got.is_none(), "context overflow was scored");
                    continue;
                }
                let got = got.ok_or("in-window sequence was skipped")?;
                let want = chain_rule_oracle(&model, ctx, &cont);
                worst = worst.max((got - want).abs());
                ensure!((got - want).abs() <= TOL, "ctx {ctx:?} cont {cont:?}: {got} vs oracle {want}");
                mass += got.exp();
                scored += 1;
            }
            if ctx.len() + m <= 6 {
                ensure!((mass - 1.0).abs() <= TOL, "ctx {ctx:?}: length-{m} continuations carry mass {mass}");
            }
        }
    }
    let byte_cfg = ModelConfig::new(8, 2, 1, VOCAB_SIZE, 6);
    let mut byte_model = ok(CausalLM::<f64>::init(&byte_cfg, 5))?;
    jitter(&mut byte_model, 5, 1.0);
    let got = ok(completion_logprob(&byte_model, b"ab", b"cd"))?.ok_or("byte scoring skipped")?;
    let want = chain_rule_oracle(&byte_model, &[BOS, 97, 98], &[99, 100]);
    ensure!((got - want).abs() <= TOL, "byte-level prompt scoring {got} vs oracle {want}");

    // Hand-computed selection and aggregation fixtures.
    let s = |raw: f64, len: usize, dom: Option<f64>| ChoiceScore { raw_logprob: raw, char_len: len, domain_logprob: dom };
    let tie = [s(-3.0, 1, None), s(-2.5, 1, None), s(-2.5, 1, None)];
    ensure!(ok(select(&tie, Metric::Acc))? == 1, "tie must go to the lowest index");
    let len = [s(-6.0, 6, None), s(-4.0, 2, None)];
    ensure!(ok(select(&len, Metric::Acc))? == 1, "acc picks the higher raw score");
    ensure!(ok(select(&len, Metric::LenNormAcc))? == 0, "len-norm: -6/6 beats -4/2");
    let len_tie = [s(-4.0, 4, None), s(-2.0, 2, None)];
    ensure!(ok(select(&len_tie, Metric::LenNormAcc))? == 0, "len-norm tie must go to index 0");
    let pmi = [s(-4.0, 1, Some(-1.0)), s(-5.0, 1, Some(-4.0))];
    ensure!(ok(select(&pmi, Metric::Acc))? == 0, "acc ignores the domain term");
    ensure!(ok(select(&pmi, Metric::PmiDc))? == 1, "pmi-dc: -5-(-4) beats -4-(-1)");
    ensure!(select(&len, Metric::PmiDc).is_err(), "pmi-dc without domain scores must fail");
    let outcomes = [(1, 1), (1, 0), (0, 1), (0, 0), (1, 1)];
    let f1 = ok(aggregate(&outcomes, Metric::F1))?;
    ensure!((f1 - 2.0 / 3.0).abs() < 1e-15, "F1 {f1} != 2/3");
    let acc = ok(aggregate(&outcomes, Metric::Acc))?;
    ensure!((acc - 0.6).abs() < 1e-15, "accuracy {acc} != 0.6");
    ensure!(ok(aggregate(&[(0, 0), (0, 0)], Metric::F1))? == 0.0, "F1 with no positives must be 0");
    ensure!(aggregate(&[], Metric::Acc).is_err(), "empty aggregate must fail");
    Ok(format!(
        "{scored} (context, continuation) pairs on V=8 T<=6 match the chain-rule oracle within {worst:.1e}; \
         continuation mass sums to 1; metric fixtures match"
    ))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_distill")
}

fn run_cli(args: &[&str]) -> Result<std::process::Output, String> {
    Command::new(bin()).args(args).env("RUST_LOG", "warn").output().map_err(|e| format!("spawn: {e}"))
}

fn run_ok(args: &[&str]) -> Result<(), String> {
    let out = run_cli(args)?;
    ensure!(out.status.success(), "`distill {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in fs::read_dir(&d).map_err(|e| format!("{}: {e}", d.display()))? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                pending.push(p);
            } else {
                let rel = p.strip_prefix(dir).map_err(|e| e.to_string())?.to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn same_file(a: &Path, b: &Path) -> Result<bool, String> {
    Ok(fs::read(a).map_err(|e| format!("{}: {e}", a.display()))?
        == fs::read(b).map_err(|e| format!("{}: {e}", b.display()))?)
}

const TINY_PRETRAIN: &str = "\
[model]
d_model = 16
n_heads = 2
n_layers = 4
context_len = 16
[data]
corpus = CORPUS
batch_size = 2
seq_len = 16
holdout_every = 20
val_batches = 2
[train]
seed = 3
total_tokens = 3200
peak_lr = 1e-3
eval_every_tokens = 640
";

const TINY_DISTILL: &str = "\
[data]
corpus = CORPUS
batch_size = 2
seq_len = 16
holdout_every = 20
val_batches = 2
[train]
seed = 4
eval_every_tokens = 320
[distill]
source = SOURCE
layout = input
k_remove = 2
pre_drop_tokens = 320
drop_gap_tokens = 320
continue_tokens = 1600
";

/// Straight run vs the same run stopped at `stop` and resumed.
fn resume_matches(kind: &str, config: &Path, root: &Path, stop: u64) -> Result<(), String> {
    let cfg = config.to_str().ok_or("path")?;
    let straight = root.join(format!("{kind}-straight"));
    let first = root.join(format!("{kind}-first"));
    let second = root.join(format!("{kind}-second"));
    run_ok(&[kind, "--config", cfg, "--out", straight.to_str().ok_or("path")?])?;
    let stop_s = stop.to_string();
    run_ok(&[kind, "--config", cfg, "--out", first.to_str().ok_or("path")?, "--stop-after-steps", &stop_s])?;
    let ck = checkpoint::step_dir(&first.join("checkpoints"), stop);
    run_ok(&[
        kind,
        "--config",
        cfg,
        "--out",
        second.to_str().ok_or("path")?,
        "--resume",
        ck.to_str().ok_or("path")?,
    ])?;
    for f in ["trace.csv", "eval.csv"] {
        ensure!(same_file(&straight.join(f), &second.join(f))?, "{kind}: resumed {f} differs");
    }
    ensure!(
        dir_bytes(&straight.join("final"))? == dir_bytes(&second.join("final"))?,
        "{kind}: resumed final checkpoint differs"
    );
    Ok(())
}

pub fn operational(_: &mut Shared) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();

    // Checkpoint round trip on a mid-run state with optimizer momentum.
    let cfg = ModelConfig::new(16, 2, 3, VOCAB_SIZE, 16);
    let data = DataConfig { batch_size: 2, seq_len: 16 };
    let spec = TrainSpec {
        data,
        schedule: LrSchedule::new(1e-3, 320, 3200),
        drops: DropSchedule { indices: vec![1], pre_drop_tokens: 640, gap_tokens: 0 },
        eval_every_tokens: 0,
    };
    let corpus = small_corpus(5, 40_000);
    let mut state = RunState::new(ok(CausalLM::init(&cfg, 1))?, LionConfig::default());
    let mut stream = ok(BatchStream::new(corpus, data, 2))?;
    ok(Trainer::new(&spec).run(&mut state, &mut stream, |s| Ok(if s.step == 30 { Control::Stop } else { Control::Continue })))?;
    let a = root.join("ck-a");
    let b = root.join("ck-b");
    ok(checkpoint::run_checkpoint(&state, 1e-3).save(&a))?;
    let loaded = ok(Checkpoint::load(&a))?;
    ok(loaded.save(&b))?;
    ensure!(dir_bytes(&a)? == dir_bytes(&b)?, "save -> load -> save is not byte-identical");
    let restored = ok(checkpoint::run_state(&loaded))?;
    ensure!(weight_bits(&restored.model) == weight_bits(&state.model), "restored weights differ");
    ensure!(restored.optimizer.state() == state.optimizer.state(), "restored momentum differs");
    ensure!(same_trace(&restored.trace, &state.trace), "restored trace differs");

    // Resume equality through the command line, for pretraining and for a
    // distillation run stopped between its two drops.
    let corpus_path = root.join("corpus.txt");
    fs::write(&corpus_path, World::new(7).corpus(1, 120_000)).map_err(|e| e.to_string())?;
    let corpus_s = corpus_path.to_str().ok_or("path")?;
    let pre_cfg = root.join("pretrain.ini");
    fs::write(&pre_cfg, TINY_PRETRAIN.replace("CORPUS", corpus_s)).map_err(|e| e.to_string())?;
    resume_matches("pretrain", &pre_cfg, root, 40)?;
    let source = root.join("pretrain-straight").join("final");
    let dist_cfg = root.join("distill.ini");
    let dist_text = TINY_DISTILL.replace("CORPUS", corpus_s).replace("SOURCE", source.to_str().ok_or("path")?);
    fs::write(&dist_cfg, &dist_text).map_err(|e| e.to_string())?;
    resume_matches("distill", &dist_cfg, root, 15)?;

    // Invalid configs exit with the config status and leave no output behind.
    let pre = TINY_PRETRAIN.replace("CORPUS", corpus_s);
    let source_line = format!("source = {}\n", source.display());
    let kd_text = format!("{}[kd]\nteacher = {}\nalpha = 0.5\n", dist_text.replace(&source_line, ""), source.display());
    let bad: Vec<(&str, &str, String)> = vec![
        ("pretrain", "heads do not divide width", pre.replace("n_heads = 2", "n_heads = 3")),
        ("pretrain", "sequence longer than context", pre.replace("seq_len = 16", "seq_len = 32")),
        ("pretrain", "misspelled key", pre.replace("peak_lr", "peak_lrate")),
        ("pretrain", "warmup beyond budget", format!("{pre}warmup_tokens = 9999\n")),
        ("pretrain", "negative learning rate", pre.replace("peak_lr = 1e-3", "peak_lr = -1e-3")),
        ("pretrain", "malformed number", pre.replace("batch_size = 2", "batch_size = two")),
        ("distill", "too many layers removed", dist_text.replace("k_remove = 2", "k_remove = 3")),
        ("distill", "drops past the budget", dist_text.replace("drop_gap_tokens = 320", "drop_gap_tokens = 1600")),
        ("distill", "unknown layout", dist_text.replace("layout = input", "layout = sideways")),
        ("kd", "alpha outside [0, 1]", kd_text.replace("alpha = 0.5", "alpha = 1.5")),
    ];
    for (i, (cmd, what, text)) in bad.iter().enumerate() {
        let path = root.join(format!("bad-{i}.ini"));
        fs::write(&path, text).map_err(|e| e.to_string())?;
        let out_dir = root.join(format!("bad-out-{i}"));
        let started = Instant::now();
        let out = run_cli(&[cmd, "--config", path.to_str().ok_or("path")?, "--out", out_dir.to_str().ok_or("path")?])?;
        let secs = started.elapsed().as_secs_f64();
        ensure!(out.status.code() == Some(2), "{what}: exit status {:?}", out.status.code());
        ensure!(!out_dir.exists(), "{what}: output directory was created");
        ensure!(secs < 5.0, "{what}: rejection took {secs:.1}s");
    }
    Ok(format!(
        "checkpoint save/load/save byte-identical; pretrain and distill resume reproduce traces and final checkpoints; \
         {} invalid configs exit 2 with no output",
        bad.len()
    ))
}
