//! Per-token decode cost of the SSM stack and the attention baseline at
//! growing context lengths.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{kv_cache_bytes, AttentionConfig, AttentionModel, KvCache};
use crate::error::{Error, Result};
use crate::infer::DecodeSession;
use crate::lora::TaskRoute;
use crate::model::Model;
use crate::tensor::Mat;
use crate::vocab::Token;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub len: usize,
    pub ssm_tok_per_s: f64,
    pub attn_tok_per_s: f64,
    pub ssm_state_bytes: usize,
    pub attn_cache_bytes: usize,
}

impl BenchRow {
    pub fn ssm_sec_per_token(&self) -> f64 {
        1.0 / self.ssm_tok_per_s
    }

    pub fn attn_sec_per_token(&self) -> f64 {
        1.0 / self.attn_tok_per_s
    }
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub lens: Vec<usize>,
    /// Decode steps per timed repetition.
    pub steps: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lens: vec![256, 512, 1024, 2048, 4096],
            steps: 16,
            reps: 5,
            warmup: 2,
            seed: 0,
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median seconds per call of `f` over `reps` timed runs of `steps` calls.
fn time_per_step(
    warmup: usize,
    reps: usize,
    steps: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..steps {
            f()?;
        }
        samples.push(t.elapsed().as_secs_f64() / steps as f64);
    }
    Ok(median(samples))
}

/// Prefills both models to each context length, then times single-token
/// decode steps.
pub fn decode_bench(model: &Model<f32>, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.reps == 0 || opts.steps == 0 || opts.lens.is_empty() {
        return Err(Error::Bench("need at least one length, step and repetition".into()));
    }
    let acfg = AttentionConfig::matched(&model.config)?;
    let attn = AttentionModel::new(acfg.clone(), opts.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let vt = model.config.text_vocab_size as u32;
    let d = model.config.d_model;
    let mut rows = Vec::new();
    for &len in &opts.lens {
        if len == 0 {
            return Err(Error::Bench("context length must be positive".into()));
        }
        let prompt: Vec<Token> = (0..len).map(|_| Token::text(rng.gen_range(0..vt))).collect();
        let mut session = DecodeSession::prefill(model, TaskRoute::T2i, &prompt, None)?;
        let ssm_bytes = session.state_bytes();
        let next = Token::text(1);
        let ssm = time_per_step(opts.warmup, opts.reps, opts.steps, || session.push(next))?;
        if session.state_bytes() != ssm_bytes {
            return Err(Error::Bench("SSM state size changed during decode".into()));
        }

        let ctx = Mat::from_vec(
            len,
            d,
            (0..len * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let (_, cache) = attn.forward(&ctx)?;
        let attn_bytes = cache.byte_size();
        let x: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // every repetition decodes from the same context length
        let mut work: KvCache = cache.clone();
        let mut taken = 0;
        let att = time_per_step(opts.warmup, opts.reps, opts.steps, || {
            if taken == opts.steps {
                work = cache.clone();
                taken = 0;
            }
            taken += 1;
            attn.step(&mut work, &x).map(|_| ())
        })?;
        if attn_bytes != kv_cache_bytes(&acfg, len) {
            return Err(Error::Bench("cache size disagrees with closed form".into()));
        }
        log::info!("len {len}: ssm {:.1} us/tok, attn {:.1} us/tok", ssm * 1e6, att * 1e6);
        rows.push(BenchRow {
            len,
            ssm_tok_per_s: 1.0 / ssm,
            attn_tok_per_s: 1.0 / att,
            ssm_state_bytes: ssm_bytes,
            attn_cache_bytes: attn_bytes,
        });
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Bench(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
