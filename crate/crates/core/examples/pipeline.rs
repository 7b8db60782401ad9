//! Runs the full two-stage schedule on generated toy data and reports
//! held-out exact-match accuracy.
//!
//! Usage: `cargo run --release -p ommx-core --example pipeline [config.toml [checkpoint-out]]`

use std::time::Instant;

use ommx_core::infer::evaluate;
use ommx_core::toy::Dataset;
use ommx_core::train::{run_schedule, RunOptions};
use ommx_core::RunConfig;

fn main() -> ommx_core::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    let t0 = Instant::now();
    let train = Dataset::generate(cfg.train.seed, cfg.train.train_examples);
    let val = Dataset::generate(1 << 40, cfg.train.val_examples);
    let opts = RunOptions {
        seed: cfg.train.seed,
        ..RunOptions::default()
    };
    let out = run_schedule(&cfg, &train, &opts, |s| {
        if s.step % 250 == 0 {
            println!(
                "{} step {} lr {:.2e} mmu {:?} t2i {:?} |g| {:.3} t={:.0}s",
                s.stage,
                s.step,
                s.lr,
                s.mmu_loss,
                s.t2i_loss,
                s.grad_norm,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(p) = std::env::args().nth(2) {
        ommx_core::checkpoint::save(&out.model, p.as_ref())?;
    }
    let r = evaluate(&out.model, &val.mmu, &val.t2i, &cfg.gen)?;
    println!(
        "mmu {:.3} t2i {:.3} out-of-modality {} total {:.0}s",
        r.mmu_accuracy(),
        r.t2i_accuracy(),
        r.out_of_modality,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
