//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use distill_core::model::{CausalLM, ModelConfig, Trainable};
use distill_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Relative-error floor: gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        // Box-Muller keeps the oracle independent of rand_distr.
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Max relative error between analytic adjoints and central finite
/// differences of `build` with respect to every input.
///
/// `build` receives one leaf per input and must return a scalar.
pub fn grad_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("backward");
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = input.data()[j] + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = input.data()[j] - FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Reduces a tensor to a scalar through a fixed random projection so every
/// output coordinate influences the checked loss.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let w = randn(&mut rng(seed ^ 0x9e37), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

/// Finite-difference check of the full LM loss of a small model with respect
/// to a sample of coordinates from every parameter tensor.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, rows: &[usize], batch: usize, samples_per_tensor: usize) -> f64 {
    let model = CausalLM::<f64>::init(cfg, seed).unwrap();
    // Perturb norms and biases away from their trivial init so their adjoints are exercised.
    let mut model = model;
    let mut r = rng(seed + 1);
    for (_, t) in model.named_params_mut() {
        for v in t.data_mut() {
            *v += 0.05 * (r.random::<f64>() - 0.5);
        }
    }
    let loss_of = |m: &CausalLM<f64>| m.lm_loss(rows, batch, None).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Trainable::All);
    let (loss, _) = model.lm_loss_on(&mut g, &vars, rows, batch, None).unwrap();
    let grads = g.backward(loss).unwrap();
    let named_vars = vars.named();
    let mut worst = 0.0f64;
    for (ti, named) in named_vars.iter().enumerate() {
        let analytic = grads.get(named.1).unwrap().clone();
        let numel = analytic.numel();
        for s in 0..samples_per_tensor.min(numel) {
            let j = (s * 7919 + ti * 31) % numel;
            let mut probe = model.clone();
            let orig = probe.named_params()[ti].1.data()[j];
            probe.named_params_mut()[ti].1.data_mut()[j] = orig + FD_STEP;
            let up = loss_of(&probe);
            probe.named_params_mut()[ti].1.data_mut()[j] = orig - FD_STEP;
            let down = loss_of(&probe);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Exhaustive log-softmax via direct log-sum-exp, for loss oracles.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub type OpCase = (&'static str, fn(u64) -> f64);

/// One finite-difference case per differentiable op; each closure runs a
/// fresh random instance for the given seed and returns its max relative error.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |s| {
            let mut r = rng(s);
            let xs = [randn(&mut r, &[5, 7], 1.0), randn(&mut r, &[7, 3], 1.0)];
            grad_check(&xs, |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                project(g, y, s)
            })
        }),
        ("matmul_bt", |s| {
            let mut r = rng(s);
            let xs = [randn(&mut r, &[4, 6], 1.0), randn(&mut r, &[5, 6], 1.0)];
            grad_check(&xs, |g, v| {
                let y = g.matmul_bt(v[0], v[1]).unwrap();
                project(g, y, s)
            })
        }),
        ("add_row", |s| {
            let mut r = rng(s);
            let xs = [randn(&mut r, &[3, 4], 1.0), randn(&mut r, &[4], 1.0)];
            grad_check(&xs, |g, v| {
                let y = g.add_row(v[0], v[1]).unwrap();
                let y = g.mul(y, y).unwrap();
                project(g, y, s)
            })
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            let xs = [randn(&mut r, &[4, 6], 2.0)];
            grad_check(&xs, |g, v| {
                let y = g.softmax(v[0], 1).unwrap();
                project(g, y, s)
            })
        }),
        ("softmax_axis0_3d", |s| {
            let mut r = rng(s);
            let xs = [randn(&mut r, &[3, 2, 4], 2.0)];
            grad_check(&xs, |g, v| {
                let y = g.softmax(v[0], 0).unwrap();
                project(g, y, s)
            })
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            let mut gain = randn(&mut r, &[6], 0.3);
            gain.data_mut().iter_mut().for_each(|v| *v += 1.0);
            let xs = [randn(&mut r, &[4, 6], 1.5), gain, randn(&mut r, &[6], 0.3)];
            grad_check(&xs, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                project(g, y, s)
            })
        }),
        ("swiglu", |s| {
            let mut r = rng(s);
            let xs = [randn(&mut r, &[3, 8], 1.5)];
            grad_check(&xs, |g, v| {
                let y = g.swiglu(v[0]).unwrap();
                project(g, y, s)
            })
        }),
        ("causal_attention", |s| {
            let mut r = rng(s);
            // batch 2, seq 3, 2 heads of width 2
            let xs = [randn(&mut r, &[6, 4], 1.0), randn(&mut r, &[6, 4], 1.0), randn(&mut r, &[6, 4], 1.0)];
            grad_check(&xs, |g, v| {
                let y = g.causal_attention(v[0], v[1], v[2], 2, 3, 2).unwrap();
                project(g, y, s)
            })
        }),
        ("gather_slice_concat", |s| {
            let mut r = rng(s);
            let xs = [randn(&mut r, &[5, 4], 1.0), randn(&mut r, &[3, 2], 1.0)];
            grad_check(&xs, |g, v| {
                let e = g.gather(v[0], &[4, 0, 4]).unwrap();
                let e = g.slice_cols(e, 1, 3).unwrap();
                let c = g.concat_cols(e, v[1]).unwrap();
                let c = g.reshape(c, &[4, 3]).unwrap();
                let c = g.scale(c, -0.7).unwrap();
                let c = g.mul(c, c).unwrap();
                project(g, c, s)
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s);
            let xs = [randn(&mut r, &[5, 7], 2.0)];
            let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..7)).collect();
            // Leak the targets into the fn-pointer closure via a thread local.
            TARGETS.with(|t| *t.borrow_mut() = targets);
            grad_check(&xs, |g, v| TARGETS.with(|t| g.cross_entropy(v[0], &t.borrow(), Some(3)).unwrap()))
        }),
        ("kl_teacher_student", |s| {
            let mut r = rng(s);
            // Only the student is an input: the teacher side is detached.
            let xs = [randn(&mut r, &[4, 5], 2.0)];
            grad_check(&xs, |g, v| {
                let teacher = g.constant(randn(&mut rng(s + 1000), &[4, 5], 2.0));
                let kl = g.kl_teacher_student(teacher, v[0], 2.0).unwrap();
                let lm = g.sum(v[0]).unwrap();
                let lm = g.scale(lm, 0.1).unwrap();
                g.add(kl, lm).unwrap()
            })
        }),
    ]
}

thread_local! {
    static TARGETS: std::cell::RefCell<Vec<usize>> = const { std::cell::RefCell::new(Vec::new()) };
}
