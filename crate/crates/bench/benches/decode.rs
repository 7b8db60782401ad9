use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ommx_bench::desk_model;
use ommx_core::attention::{AttentionConfig, AttentionModel};
use ommx_core::tensor::Mat;
use ommx_core::{DecodeSession, TaskRoute, Token};

fn decode(c: &mut Criterion) {
    let model = desk_model(0);
    let acfg = AttentionConfig::matched(&model.config).unwrap();
    let attn = AttentionModel::new(acfg, 0);
    let d = model.config.d_model;
    let mut group = c.benchmark_group("decode_step");
    for len in [256usize, 1024, 4096] {
        let prompt: Vec<Token> = (0..len).map(|i| Token::text((i % 20) as u32)).collect();
        let session = DecodeSession::prefill(&model, TaskRoute::T2i, &prompt, None).unwrap();
        group.bench_with_input(BenchmarkId::new("ssm", len), &len, |b, _| {
            b.iter_batched(
                || session.clone(),
                |mut s| {
                    s.push(Token::text(1)).unwrap();
                    s
                },
                criterion::BatchSize::LargeInput,
            )
        });

        let ctx = Mat::from_vec(len, d, (0..len * d).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect()).unwrap();
        let (_, cache) = attn.forward(&ctx).unwrap();
        let x = vec![0.1f32; d];
        group.bench_with_input(BenchmarkId::new("attention", len), &len, |b, _| {
            b.iter_batched(
                || cache.clone(),
                |mut kv| {
                    black_box(attn.step(&mut kv, &x).unwrap());
                    kv
                },
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, decode);
criterion_main!(benches);
