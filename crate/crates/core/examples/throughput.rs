//! Times forward+backward+update steps for a small model.

use std::time::Instant;

use distill_core::model::{CausalLM, ModelConfig, Trainable};
use distill_core::optim::{Lion, LionConfig};
use distill_core::tensor::Graph;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (d, layers, seq, batch) = match args[..] {
        [d, l, t, b] => (d, l, t, b),
        _ => (128, 4, 256, 16),
    };
    let cfg = ModelConfig::new(d, 4, layers, 259, seq);
    let mut model = CausalLM::<f32>::init(&cfg, 0).expect("valid config");
    let mut opt = Lion::new(LionConfig::default());
    let rows: Vec<usize> = (0..batch * (seq + 1)).map(|i| (i * 31 + 7) % 256).collect();
    let steps = 5;
    let start = Instant::now();
    for _ in 0..steps {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, Trainable::All);
        let t0 = Instant::now();
        let (loss, _) = model.lm_loss_on(&mut g, &vars, &rows, batch, None).expect("forward");
        let t1 = Instant::now();
        let grads = g.backward(loss).expect("backward");
        eprintln!("fwd {:.3}s bwd {:.3}s", (t1 - t0).as_secs_f64(), t1.elapsed().as_secs_f64());
        let named = vars.named();
        for ((name, p), (_, v)) in model.named_params_mut().into_iter().zip(named) {
            opt.step(&name, p, grads.get(v).expect("grad"), 1e-4).expect("step");
        }
    }
    let secs = start.elapsed().as_secs_f64() / steps as f64;
    let tokens = (batch * seq) as f64;
    println!("params {} step {secs:.3}s tokens/s {:.0}", model.num_params(), tokens / secs);
}
