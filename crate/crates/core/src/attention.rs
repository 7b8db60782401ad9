//! Causal self-attention stack used as the quadratic-cost reference for
//! decode throughput and memory. Forward only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::real::silu;
use crate::tensor::{matmul, vecmat, Mat};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub rms_eps: f64,
    pub rope_base: f64,
}

impl AttentionConfig {
    /// Same width and depth as the SSM backbone with the FFN width chosen so
    /// the parameter counts match as closely as possible.
    pub fn matched(cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let n_heads = (d / 16).max(1);
        if d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(Error::Config(format!("d_model {d} does not split into rotary heads")));
        }
        let fixed = 2 * d + 4 * d * d;
        let target = cfg.block_param_count();
        let ffn_hidden = ((target.saturating_sub(fixed)) as f64 / (2 * d) as f64)
            .round()
            .max(1.0) as usize;
        Ok(Self {
            d_model: d,
            n_layers: cfg.n_layers,
            n_heads,
            ffn_hidden,
            rms_eps: cfg.rms_eps,
            rope_base: 10_000.0,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn layer_param_count(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + 2 * d * self.ffn_hidden
    }

    /// Layers plus final norm, comparable to
    /// [`ModelConfig::backbone_param_count`].
    pub fn param_count(&self) -> usize {
        self.n_layers * self.layer_param_count() + self.d_model
    }
}

/// Closed-form key/value cache size for `len` cached positions in `f32`.
pub fn kv_cache_bytes(cfg: &AttentionConfig, len: usize) -> usize {
    cfg.n_layers * 2 * len * cfg.d_model * std::mem::size_of::<f32>()
}

#[derive(Clone, Debug)]
struct Layer {
    norm1: Vec<f32>,
    wqkv: Mat<f32>,
    wo: Mat<f32>,
    norm2: Vec<f32>,
    w1: Mat<f32>,
    w2: Mat<f32>,
}

#[derive(Clone, Debug)]
pub struct AttentionModel {
    pub config: AttentionConfig,
    layers: Vec<Layer>,
    final_norm: Vec<f32>,
}

/// Per-layer keys and values of every processed position.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &AttentionConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn byte_size(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|v| v.len() * std::mem::size_of::<f32>())
            .sum()
    }
}

fn uniform(rows: usize, cols: usize, bound: f32, rng: &mut ChaCha8Rng) -> Mat<f32> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Mat { rows, cols, data }
}

fn rms_norm(x: &[f32], w: &[f32], eps: f32) -> Vec<f32> {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(w).map(|(v, g)| v * inv * g).collect()
}

impl AttentionModel {
    pub fn new(config: AttentionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let f = config.ffn_hidden;
        let bd = 1.0 / (d as f32).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                norm1: vec![1.0; d],
                wqkv: uniform(d, 3 * d, bd, &mut rng),
                wo: uniform(d, d, bd, &mut rng),
                norm2: vec![1.0; d],
                w1: uniform(d, f, bd, &mut rng),
                w2: uniform(f, d, 1.0 / (f as f32).sqrt(), &mut rng),
            })
            .collect();
        Self {
            final_norm: vec![1.0; d],
            config,
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.final_norm.len()
            + self
                .layers
                .iter()
                .map(|l| {
                    l.norm1.len()
                        + l.norm2.len()
                        + l.wqkv.len()
                        + l.wo.len()
                        + l.w1.len()
                        + l.w2.len()
                })
                .sum::<usize>()
    }

    /// Rotates consecutive halves of each head by position-dependent angles.
    fn rope(&self, v: &mut [f32], pos: usize) {
        let hd = self.config.head_dim();
        let half = hd / 2;
        for head in v.chunks_mut(hd) {
            for i in 0..half {
                let freq = self.config.rope_base.powf(-(2.0 * i as f64) / hd as f64);
                let (s, c) = (pos as f64 * freq).sin_cos();
                let (a, b) = (head[i] as f64, head[i + half] as f64);
                head[i] = (a * c - b * s) as f32;
                head[i + half] = (a * s + b * c) as f32;
            }
        }
    }

    fn ffn(&self, l: &Layer, x: &mut [f32]) {
        let h = rms_norm(x, &l.norm2, self.config.rms_eps as f32);
        let a: Vec<f32> = vecmat(&h, &l.w1).into_iter().map(silu).collect();
        for (xi, o) in x.iter_mut().zip(vecmat(&a, &l.w2)) {
            *xi += o;
        }
    }

    /// Attention of one query against the first `len` cached positions.
    fn attend(&self, q: &[f32], keys: &[f32], values: &[f32], len: usize) -> Vec<f32> {
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = vec![0.0; d];
        let mut scores = vec![0.0f32; len];
        for h in 0..self.config.n_heads {
            let qh = &q[h * hd..(h + 1) * hd];
            let mut max = f32::NEG_INFINITY;
            for (t, s) in scores.iter_mut().enumerate() {
                let k = &keys[t * d + h * hd..t * d + (h + 1) * hd];
                *s = qh.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                max = max.max(*s);
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            let oh = &mut out[h * hd..(h + 1) * hd];
            for (t, s) in scores.iter().enumerate() {
                let w = s / z;
                let v = &values[t * d + h * hd..t * d + (h + 1) * hd];
                for (o, vv) in oh.iter_mut().zip(v) {
                    *o += w * vv;
                }
            }
        }
        out
    }

    /// Advances the cache by one input row and returns the final-normed
    /// output row.
    pub fn step(&self, cache: &mut KvCache, input: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.d_model;
        if input.len() != d {
            return Err(Error::Shape(format!("input width {}", input.len())));
        }
        let pos = cache.len;
        let eps = self.config.rms_eps as f32;
        let mut x = input.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let h = rms_norm(&x, &l.norm1, eps);
            let qkv = vecmat(&h, &l.wqkv);
            let mut q = qkv[..d].to_vec();
            let mut k = qkv[d..2 * d].to_vec();
            self.rope(&mut q, pos);
            self.rope(&mut k, pos);
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&qkv[2 * d..]);
            let a = self.attend(&q, &cache.keys[li], &cache.values[li], pos + 1);
            for (xi, o) in x.iter_mut().zip(vecmat(&a, &l.wo)) {
                *xi += o;
            }
            self.ffn(l, &mut x);
        }
        cache.len += 1;
        Ok(rms_norm(&x, &self.final_norm, eps))
    }

    /// Full causal forward over a sequence; also returns the filled cache.
    pub fn forward(&self, input: &Mat<f32>) -> Result<(Mat<f32>, KvCache)> {
        let d = self.config.d_model;
        if input.cols != d {
            return Err(Error::Shape(format!("input width {}", input.cols)));
        }
        let n = input.rows;
        let eps = self.config.rms_eps as f32;
        let mut cache = KvCache::new(&self.config);
        let mut x = input.clone();
        for (li, l) in self.layers.iter().enumerate() {
            let mut h = Mat::zeros(n, d);
            for t in 0..n {
                h.row_mut(t).copy_from_slice(&rms_norm(x.row(t), &l.norm1, eps));
            }
            let qkv = matmul(&h, &l.wqkv);
            let mut qs = Vec::with_capacity(n * d);
            let (keys, values) = (&mut cache.keys[li], &mut cache.values[li]);
            for t in 0..n {
                let row = qkv.row(t);
                let mut q = row[..d].to_vec();
                let mut k = row[d..2 * d].to_vec();
                self.rope(&mut q, t);
                self.rope(&mut k, t);
                qs.extend(q);
                keys.extend(k);
                values.extend_from_slice(&row[2 * d..]);
            }
            let mut att = Mat::zeros(n, d);
            for t in 0..n {
                let a = self.attend(&qs[t * d..(t + 1) * d], keys, values, t + 1);
                att.row_mut(t).copy_from_slice(&a);
            }
            let proj = matmul(&att, &l.wo);
            x.add_assign(&proj);
            for t in 0..n {
                self.ffn(l, x.row_mut(t));
            }
        }
        cache.len = n;
        for t in 0..n {
            let y = rms_norm(x.row(t), &self.final_norm, eps);
            x.row_mut(t).copy_from_slice(&y);
        }
        Ok((x, cache))
    }
}
