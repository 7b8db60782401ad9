//! Reference implementations written directly from the block definition,
//! sharing no code with the library's scan or tape.

#![allow(dead_code)]

use ommx_core::{Mat, Model, ModelConfig, TaskRoute};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn rms_norm(row: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    row.iter().zip(w).map(|(v, g)| v * inv * g).collect()
}

fn vm(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xi * w[i * cols + j];
        }
    }
    out
}

fn param(model: &Model<f64>, name: &str) -> Vec<f64> {
    model
        .store
        .get(name)
        .unwrap_or_else(|| panic!("no tensor {name}"))
        .data
        .clone()
}

/// Block output by materializing the full lower-triangular decay matrix.
pub fn block_oracle(model: &Model<f64>, layer: usize, input: &Mat<f64>, route: TaskRoute) -> Mat<f64> {
    let cfg = &model.config;
    let p = |s: &str| param(model, &format!("layers.{layer}.{s}"));
    let (d, di, n, g, nh, hd, k) = (
        cfg.d_model,
        cfg.d_inner(),
        cfg.d_state,
        cfg.n_groups,
        cfg.n_heads,
        cfg.headdim,
        cfg.d_conv,
    );
    let dp = cfg.d_in_proj();
    let cd = di + 2 * g * n;
    let len = input.rows;
    let (w_in, conv, a_log, dt_bias, d_skip, out_norm, w_out, in_norm) = (
        p("in_proj"),
        p("conv"),
        p("a_log"),
        p("dt_bias"),
        p("d_skip"),
        p("out_norm"),
        p("out_proj"),
        p("in_norm"),
    );
    let lora = match route {
        TaskRoute::Mmu if cfg.lora_rank > 0 => Some((p("lora.mmu.down"), p("lora.mmu.up"))),
        TaskRoute::T2i if cfg.lora_rank > 0 => Some((p("lora.t2i.down"), p("lora.t2i.up"))),
        _ => None,
    };
    let scale = cfg.lora_alpha / cfg.lora_rank.max(1) as f64;

    let mut z = vec![vec![0.0; di]; len];
    let mut xbc = vec![vec![0.0; cd]; len];
    let mut dt = vec![vec![0.0; nh]; len];
    for t in 0..len {
        let h = rms_norm(input.row(t), &in_norm, cfg.rms_eps);
        let mut pr = vm(&h, &w_in, dp);
        if let Some((down, up)) = &lora {
            let low = vm(&h, down, cfg.lora_rank);
            let delta = vm(&low, up, dp);
            for (a, b) in pr.iter_mut().zip(delta) {
                *a += scale * b;
            }
        }
        z[t].copy_from_slice(&pr[..di]);
        xbc[t].copy_from_slice(&pr[di..di + cd]);
        for h in 0..nh {
            dt[t][h] = softplus(pr[di + cd + h] + dt_bias[h]);
        }
    }
    // causal depthwise convolution, last tap on the current step
    let mut act = vec![vec![0.0; cd]; len];
    for t in 0..len {
        for c in 0..cd {
            let mut s = 0.0;
            for j in 0..k {
                let src = t as isize - (k - 1 - j) as isize;
                if src >= 0 {
                    s += conv[c * k + j] * xbc[src as usize][c];
                }
            }
            act[t][c] = silu(s);
        }
    }
    let x = |t: usize, h: usize, i: usize| act[t][h * hd + i];
    let b = |t: usize, grp: usize, j: usize| act[t][di + grp * n + j];
    let c = |t: usize, grp: usize, j: usize| act[t][di + g * n + grp * n + j];
    let hpg = nh / g;

    let mut out = Mat::zeros(len, d);
    for t in 0..len {
        let mut y = vec![0.0; di];
        for h in 0..nh {
            let grp = h / hpg;
            let a = a_log[h].exp();
            for s in 0..=t {
                let mut log_decay = 0.0;
                for u in s + 1..=t {
                    log_decay -= dt[u][h] * a;
                }
                let cb: f64 = (0..n).map(|j| c(t, grp, j) * b(s, grp, j)).sum();
                let w = log_decay.exp() * dt[s][h] * cb;
                for i in 0..hd {
                    y[h * hd + i] += w * x(s, h, i);
                }
            }
            for i in 0..hd {
                y[h * hd + i] += d_skip[h] * x(t, h, i);
            }
        }
        let gated: Vec<f64> = y.iter().zip(&z[t]).map(|(v, zz)| v * silu(*zz)).collect();
        let normed = rms_norm(&gated, &out_norm, cfg.rms_eps);
        out.row_mut(t).copy_from_slice(&vm(&normed, &w_out, d));
    }
    out
}

/// Overwrites every LoRA up-projection with small random values so routed
/// paths are exercised.
pub fn randomize_adapters(model: &mut Model<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = model
        .store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.name.contains(".lora.") && e.name.ends_with(".up"))
        .map(|(i, _)| i)
        .collect();
    for id in ids {
        for v in model.store.value_mut(id).data.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
}

pub fn random_input(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f32> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Mat::from_vec(rows, cols, data).unwrap()
}

/// Max absolute difference scaled by the reference magnitude.
pub fn rel_err(got: &Mat<f64>, want: &Mat<f64>) -> f64 {
    got.max_abs_diff(want) / want.max_abs().max(1e-12)
}

/// Small randomized block configuration.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.n_groups = [1, 2][rng.gen_range(0..2)];
    cfg.n_heads = 4;
    cfg.headdim = [4, 8][rng.gen_range(0..2)];
    cfg.d_model = cfg.n_heads * cfg.headdim / cfg.expand;
    cfg.d_state = [4, 8][rng.gen_range(0..2)];
    cfg.d_conv = [2, 4][rng.gen_range(0..2)];
    cfg.lora_rank = 2;
    cfg.lora_alpha = 4.0;
    cfg
}

/// Per-group result of a finite-difference gradient check.
#[derive(Debug)]
pub struct GroupCheck {
    pub group: ommx_core::FreezeGroup,
    pub entries: usize,
    pub rel_err: f64,
}

/// Central differences on sampled entries of every differentiable tensor of
/// a 64-bit model, compared group by group against the tape gradients.
pub fn finite_difference_check(
    model: &Model<f64>,
    mmu: &[&ommx_core::sequence::TrainingExample],
    t2i: &[&ommx_core::sequence::TrainingExample],
    per_tensor: usize,
    seed: u64,
) -> Vec<GroupCheck> {
    use ommx_core::train::loss_and_grads;
    use ommx_core::FreezeGroup;

    let all = vec![true; model.store.len()];
    let (_, grads) = loss_and_grads(model, mmu, t2i, all.clone()).unwrap();
    let loss_at = |m: &Model<f64>| loss_and_grads(m, mmu, t2i, vec![false; m.store.len()]).unwrap().0.total;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let h = 1e-5;
    let mut out = Vec::new();
    for group in FreezeGroup::ALL {
        let (mut diff2, mut ref2, mut entries) = (0.0, 0.0, 0);
        for id in model.store.ids_in(group) {
            let n = model.store.value(id).len();
            for _ in 0..per_tensor.min(n) {
                let i = rng.gen_range(0..n);
                let orig = probe.store.value(id).data[i];
                probe.store.value_mut(id).data[i] = orig + h;
                let up = loss_at(&probe);
                probe.store.value_mut(id).data[i] = orig - h;
                let down = loss_at(&probe);
                probe.store.value_mut(id).data[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |g| g.data[i]);
                diff2 += (numeric - analytic).powi(2);
                ref2 += numeric.powi(2).max(analytic.powi(2));
                entries += 1;
            }
        }
        if entries > 0 {
            out.push(GroupCheck {
                group,
                entries,
                rel_err: diff2.sqrt() / ref2.sqrt().max(1e-10),
            });
        }
    }
    out
}

/// A few MMU and T2I examples for a small config.
pub fn toy_examples<T: ommx_core::real::Real>(
    model: &Model<T>,
    count: usize,
    seed: u64,
) -> ommx_core::train::TaskData {
    let data = ommx_core::toy::Dataset::generate(seed, count);
    ommx_core::train::prepare_examples(model, &data, false).unwrap()
}
