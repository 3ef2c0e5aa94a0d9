use bfa_core::data::load_mnist;
use bfa_core::train::{train_with_progress, TrainingConfig, Scheduler, InitScheme};
use std::time::Instant;

fn main() {
    let ds = load_mnist(std::path::Path::new("data/mnist")).unwrap();

    // C-CNN: one epoch for timing + trajectory.
    let cfg = TrainingConfig {
        lr: 0.01,
        scheduler: Scheduler::exponential(0.95),
        epochs: 1,
        batch_size: 128,
        weight_decay: 3e-4,
        init: InitScheme::Normal,
        dropout: 0.0,
        seed: 1,
    };
    let t = Instant::now();
    let _ = train_with_progress("ccnn-32f3", &ds, &cfg, |e, s| {
        println!("ccnn epoch {e}: loss {:.4} train {:.4} test {:.4} ({:.0}s)", s.train_loss, s.train_acc, s.test_acc, t.elapsed().as_secs_f64());
    }).unwrap();

    // MLP: the full 40-epoch criterion-1 recipe.
    let cfg = TrainingConfig { epochs: 40, ..cfg };
    let t = Instant::now();
    let mut last = Instant::now();
    let (_m, r) = train_with_progress("mlp-784-512-256-128-10", &ds, &cfg, |e, s| {
        println!("mlp epoch {e}: loss {:.4} train {:.4} test {:.4} lr {:.5} ({:.1}s)", s.train_loss, s.train_acc, s.test_acc, s.lr, last.elapsed().as_secs_f64());
        last = Instant::now();
    }).unwrap();
    println!("MLP 40 epochs in {:.0}s, final test acc {:.4}", t.elapsed().as_secs_f64(), r.final_test_accuracy().unwrap());
}
