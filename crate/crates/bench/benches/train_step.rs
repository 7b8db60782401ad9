use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ommx_bench::{desk_model, toy_batch};
use ommx_core::train::{loss_and_grads, trainable_mask, Stage};

fn train_step(c: &mut Criterion) {
    let model = desk_model(0);
    let data = toy_batch(&model, 32, 1);
    let mmu: Vec<_> = data.mmu.iter().take(4).collect();
    let t2i: Vec<_> = data.t2i.iter().take(16).collect();
    let mut group = c.benchmark_group("loss_and_grads");
    group.sample_size(20);
    for stage in [Stage::Stage1Mmu, Stage::Stage1T2i, Stage::Stage2] {
        let mask = trainable_mask(&model.store, &stage.trainable_groups());
        let (m, t): (&[_], &[_]) = match stage {
            Stage::Stage1Mmu => (&mmu, &[]),
            Stage::Stage1T2i => (&[], &t2i),
            Stage::Stage2 => (&mmu, &t2i),
        };
        group.bench_function(stage.name(), |b| {
            b.iter(|| black_box(loss_and_grads(&model, m, t, mask.clone()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
