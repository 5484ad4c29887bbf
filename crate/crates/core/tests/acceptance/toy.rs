//! Toy-scale training experiments shared by the recovery, location and
//! teacher-free-vs-KD criteria.
//!
//! Per seed: pretrain a 4-layer teacher, truncate it, then continue several
//! students on the same data order and compare final held-out perplexity.

use std::fmt::Write as _;
use std::time::Instant;

use distill_core::data::synthetic::World;
use distill_core::data::{fixed_batches, BatchStream, Corpus, DataConfig, SequenceBatch, VOCAB_SIZE};
use distill_core::distill::{
    evaluate_loss, truncate_model, Control, DropSchedule, KdSettings, RunState, Teacher, TrainSpec, Trainer,
};
use distill_core::flops::{kd_ratio, measure, Accounting};
use distill_core::model::{CausalLM, ModelConfig};
use distill_core::optim::{LionConfig, LrSchedule};

use crate::{Outcome, Shared};

pub const SEEDS: [u64; 3] = [1, 2, 3];
const PEAK_LR: f64 = 1e-3;
const CONTINUE_LR_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct Scale {
    pub full: bool,
    pub pretrain_tokens: u64,
    pub continue_tokens: u64,
}

pub fn scale() -> Scale {
    let full = std::env::var("DISTILL_ACCEPT_FULL").is_ok_and(|v| v == "1");
    if full {
        Scale { full, pretrain_tokens: 20_000_000, continue_tokens: 5_000_000 }
    } else {
        Scale { full, pretrain_tokens: 1_000_000, continue_tokens: 250_000 }
    }
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher_ppl: f64,
    pub truncated_ppl: f64,
    pub teacher_free_ppl: f64,
    pub scratch_ppl: f64,
    pub kd_ppl: f64,
    pub input_k1_ppl: f64,
    pub output_k1_ppl: f64,
    /// Measured KD total FLOPs over teacher-free total FLOPs.
    pub compute_ratio: f64,
    /// `1 + N_T/(3 N_S)` for the same pair.
    pub predicted_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct Results {
    pub scale: Scale,
    pub seeds: Vec<SeedResult>,
    pub seconds: f64,
}

fn data_config() -> DataConfig {
    DataConfig { batch_size: 8, seq_len: 256 }
}

fn teacher_config() -> ModelConfig {
    ModelConfig::new(128, 4, 4, VOCAB_SIZE, 256)
}

fn final_ppl(state: &RunState) -> f64 {
    state.evals.last().map(|e| e.val_ppl).unwrap_or(f64::NAN)
}

struct Setup {
    train: Corpus,
    validation: Vec<SequenceBatch>,
}

fn train(
    setup: &Setup,
    model: CausalLM<f32>,
    peak_lr: f64,
    tokens: u64,
    teacher: Option<&Teacher>,
    stream_seed: u64,
) -> distill_core::Result<RunState> {
    let spec = TrainSpec {
        data: data_config(),
        schedule: LrSchedule::new(peak_lr, tokens / 10, tokens),
        drops: DropSchedule::none(),
        eval_every_tokens: 0,
    };
    let mut state = RunState::new(model, LionConfig::default());
    let mut stream = BatchStream::new(setup.train.clone(), spec.data, stream_seed)?;
    let mut trainer = Trainer::new(&spec).with_validation(&setup.validation);
    if let Some(t) = teacher {
        trainer = trainer.with_teacher(t);
    }
    trainer.run(&mut state, &mut stream, |_| Ok(Control::Continue))?;
    Ok(state)
}

fn run_seed(setup: &Setup, scale: Scale, seed: u64) -> distill_core::Result<SeedResult> {
    let cfg = teacher_config();
    let log = |what: &str, ppl: f64| eprintln!("  seed {seed}: {what} ppl {ppl:.4}");
    let teacher_state = train(setup, CausalLM::init(&cfg, seed)?, PEAK_LR, scale.pretrain_tokens, None, seed)?;
    let teacher_ppl = final_ppl(&teacher_state);
    let teacher = teacher_state.model;
    log("teacher", teacher_ppl);

    let continue_lr = PEAK_LR * CONTINUE_LR_SCALE;
    let stream_seed = seed + 100;
    let truncated = truncate_model(&teacher, &[1, 2])?;
    let truncated_ppl = evaluate_loss(&truncated, &setup.validation)?.exp();
    log("truncated", truncated_ppl);

    let tf = train(setup, truncated.clone(), continue_lr, scale.continue_tokens, None, stream_seed)?;
    log("teacher-free", final_ppl(&tf));
    let scratch_cfg = ModelConfig { n_layers: 2, ..cfg.clone() };
    let scratch = train(setup, CausalLM::init(&scratch_cfg, seed + 1000)?, PEAK_LR, scale.continue_tokens, None, stream_seed)?;
    log("scratch", final_ppl(&scratch));
    let kd_teacher = Teacher { model: teacher.clone(), settings: KdSettings::default() };
    let kd = train(setup, truncated, continue_lr, scale.continue_tokens, Some(&kd_teacher), stream_seed)?;
    log("kd", final_ppl(&kd));
    let input_k1 = train(setup, truncate_model(&teacher, &[1])?, continue_lr, scale.continue_tokens, None, stream_seed)?;
    log("input k=1", final_ppl(&input_k1));
    let output_k1 = train(setup, truncate_model(&teacher, &[2])?, continue_lr, scale.continue_tokens, None, stream_seed)?;
    log("output k=1", final_ppl(&output_k1));

    let student_cfg = ModelConfig { n_layers: 2, ..cfg };
    let tf_cost = measure(&tf.trace, &Accounting::for_student(&student_cfg, None));
    let kd_cost = measure(&kd.trace, &Accounting::for_student(&student_cfg, Some(teacher.num_params())));
    Ok(SeedResult {
        seed,
        teacher_ppl,
        truncated_ppl,
        teacher_free_ppl: final_ppl(&tf),
        scratch_ppl: final_ppl(&scratch),
        kd_ppl: final_ppl(&kd),
        input_k1_ppl: final_ppl(&input_k1),
        output_k1_ppl: final_ppl(&output_k1),
        compute_ratio: kd_cost.total_flops / tf_cost.total_flops,
        predicted_ratio: kd_ratio(student_cfg.param_count().total as f64, teacher.num_params() as f64),
    })
}

pub fn run_all() -> distill_core::Result<Results> {
    let start = Instant::now();
    let scale = scale();
    eprintln!(
        "toy experiments: {} scale, pretrain {} tokens, continue {} tokens, seeds {SEEDS:?}",
        if scale.full { "full" } else { "reduced" },
        scale.pretrain_tokens,
        scale.continue_tokens
    );
    let corpus = Corpus::from_bytes(World::new(7).corpus(0, 4_000_000).as_bytes());
    let (train, held) = corpus.split_every(50);
    let validation = fixed_batches(held, data_config(), 0x5eed, 8)?;
    let setup = Setup { train, validation };
    let seeds = SEEDS.iter().map(|&s| run_seed(&setup, scale, s)).collect::<distill_core::Result<Vec<_>>>()?;
    let results = Results { scale, seeds, seconds: start.elapsed().as_secs_f64() };
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_toy.csv");
    if let Err(e) = std::fs::write(&path, results.to_csv()) {
        eprintln!("could not write {}: {e}", path.display());
    } else {
        eprintln!("toy results written to {}", path.display());
    }
    Ok(results)
}

impl Results {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "seed,teacher_ppl,truncated_ppl,teacher_free_ppl,scratch_ppl,kd_ppl,input_k1_ppl,output_k1_ppl,compute_ratio\n",
        );
        for r in &self.seeds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.teacher_ppl,
                r.truncated_ppl,
                r.teacher_free_ppl,
                r.scratch_ppl,
                r.kd_ppl,
                r.input_k1_ppl,
                r.output_k1_ppl,
                r.compute_ratio
            );
        }
        s
    }

    fn budget(&self) -> String {
        format!(
            "{} scale ({}M pretrain, {}M continue tokens)",
            if self.scale.full { "full" } else { "reduced" },
            self.scale.pretrain_tokens as f64 / 1e6,
            self.scale.continue_tokens as f64 / 1e6
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn list(results: &Results, f: impl Fn(&SeedResult) -> f64) -> String {
    results.seeds.iter().map(|r| format!("s{}={:.3}", r.seed, f(r))).collect::<Vec<_>>().join(" ")
}

pub fn recovery(shared: &mut Shared) -> Outcome {
    let r = shared.toy()?;
    let below_truncated = r.seeds.iter().filter(|s| s.teacher_free_ppl < s.truncated_ppl).count();
    let below_scratch = r.seeds.iter().filter(|s| s.teacher_free_ppl < s.scratch_ppl).count();
    let detail = format!(
        "{}; continued {} | truncated {} | scratch {}; below truncated {below_truncated}/3, below scratch {below_scratch}/3",
        r.budget(),
        list(r, |s| s.teacher_free_ppl),
        list(r, |s| s.truncated_ppl),
        list(r, |s| s.scratch_ppl),
    );
    if below_truncated == 3 && below_scratch >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn location(shared: &mut Shared) -> Outcome {
    let r = shared.toy()?;
    let input = median(r.seeds.iter().map(|s| s.input_k1_ppl).collect());
    let output = median(r.seeds.iter().map(|s| s.output_k1_ppl).collect());
    let detail = format!(
        "{}; remove 1 of 4 layers; median ppl output {output:.3} vs input {input:.3}; output {} | input {}",
        r.budget(),
        list(r, |s| s.output_k1_ppl),
        list(r, |s| s.input_k1_ppl),
    );
    if output > input {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn headline(shared: &mut Shared) -> Outcome {
    let r = shared.toy()?;
    let tf = median(r.seeds.iter().map(|s| s.teacher_free_ppl).collect());
    let kd = median(r.seeds.iter().map(|s| s.kd_ppl).collect());
    let min_ratio = r.seeds.iter().map(|s| s.compute_ratio).fold(f64::INFINITY, f64::min);
    let model_ok = r.seeds.iter().all(|s| (s.compute_ratio - s.predicted_ratio).abs() <= 1e-9 * s.predicted_ratio);
    let detail = format!(
        "{}; median ppl teacher-free {tf:.3} vs KD {kd:.3}; teacher-free {} | KD {}; measured compute ratio {min_ratio:.3}",
        r.budget(),
        list(r, |s| s.teacher_free_ppl),
        list(r, |s| s.kd_ppl),
    );
    if !model_ok {
        return Err(format!("{detail}; measured ratio disagrees with 1 + N_T/(3 N_S)"));
    }
    if tf <= kd && min_ratio >= 1.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
