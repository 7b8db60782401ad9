//! Losses, optimizer and the staged training schedule with freeze groups.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lora::TaskRoute;
use crate::model::Model;
use crate::params::{FreezeGroup, ParamStore};
use crate::real::Real;
use crate::sequence::{build_mmu_sequence, build_t2i_sequence, TrainingExample};
use crate::tensor::Mat;
use crate::toy::{encode_features, toy_tokenizer, Codebook, Dataset, QUESTION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1mmu")]
    Stage1Mmu,
    #[serde(rename = "1t2i")]
    Stage1T2i,
    #[serde(rename = "2")]
    Stage2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1Mmu => "1mmu",
            Stage::Stage1T2i => "1t2i",
            Stage::Stage2 => "2",
        }
    }

    pub fn trainable_groups(self) -> Vec<FreezeGroup> {
        match self {
            Stage::Stage1Mmu => vec![FreezeGroup::VisualProjector, FreezeGroup::MmuLora],
            Stage::Stage1T2i => vec![FreezeGroup::T2iLora, FreezeGroup::ImageHead],
            Stage::Stage2 => FreezeGroup::ALL
                .into_iter()
                .filter(|g| *g != FreezeGroup::FrozenVisionEncoder)
                .collect(),
        }
    }

    /// File name of the checkpoint a finished stage leaves in its output
    /// directory.
    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Stage::Stage1Mmu => "stage1_mmu.ckpt",
            Stage::Stage1T2i => "stage1_t2i.ckpt",
            Stage::Stage2 => "stage2.ckpt",
        }
    }

    fn seed_salt(self) -> u64 {
        match self {
            Stage::Stage1Mmu => 0x11,
            Stage::Stage1T2i => 0x12,
            Stage::Stage2 => 0x20,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1mmu" => Ok(Stage::Stage1Mmu),
            "1t2i" => Ok(Stage::Stage1T2i),
            "2" => Ok(Stage::Stage2),
            _ => Err(Error::Config(format!(
                "unknown stage {s:?} (expected 1mmu, 1t2i or 2)"
            ))),
        }
    }
}

/// Schedule and batch composition of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// MMU examples per step.
    pub mmu_batch: usize,
    /// T2I examples per step.
    pub t2i_batch: usize,
}

impl StageConfig {
    pub fn stage1_mmu() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 2000,
            mmu_batch: 4,
            t2i_batch: 0,
        }
    }

    pub fn stage1_t2i() -> Self {
        Self {
            peak_lr: 8e-4,
            warmup_steps: 200,
            total_steps: 5000,
            mmu_batch: 0,
            t2i_batch: 4,
        }
    }

    pub fn stage2() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_steps: 0,
            total_steps: 5000,
            mmu_batch: 1,
            t2i_batch: 4,
        }
    }

    pub fn validate(&self, stage: Stage) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "stage {stage}: warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("stage {stage}: peak_lr must be positive")));
        }
        let ok = match stage {
            Stage::Stage1Mmu => self.mmu_batch > 0 && self.t2i_batch == 0,
            Stage::Stage1T2i => self.t2i_batch > 0 && self.mmu_batch == 0,
            Stage::Stage2 => self.mmu_batch + self.t2i_batch > 0,
        };
        if !ok {
            return Err(Error::Config(format!(
                "stage {stage}: batch ratio {}:{} is not valid for this stage",
                self.mmu_batch, self.t2i_batch
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn cosine_warmup_lr(step: usize, cfg: &StageConfig) -> Result<f64> {
    let (w, n) = (cfg.warmup_steps, cfg.total_steps);
    if step > n {
        return Err(Error::StepOutOfRange { step, total: n });
    }
    if step < w {
        return Ok(cfg.peak_lr * step as f64 / w as f64);
    }
    if n == w {
        return Ok(cfg.peak_lr);
    }
    let progress = (step - w) as f64 / (n - w) as f64;
    Ok(cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: T) -> Result<T> {
    for (id, g) in grads.params.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(format!("parameter #{id}")));
            }
        }
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFiniteGradient("global norm".into()));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.params.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    Ok(norm)
}

/// Trainable flags for a store given the active groups.
pub fn trainable_mask<T: Real>(store: &ParamStore<T>, groups: &[FreezeGroup]) -> Vec<bool> {
    store
        .entries()
        .iter()
        .map(|e| FreezeGroup::of(&e.name).is_some_and(|g| groups.contains(&g)))
        .collect()
}

/// AdamW with decoupled weight decay. Moments exist only for the parameters
/// marked trainable at construction.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Mat<T>, Mat<T>)>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, trainable: &[bool]) -> Self {
        let moments = store
            .entries()
            .iter()
            .zip(trainable)
            .map(|(e, &t)| {
                t.then(|| {
                    let (r, c) = (e.value.rows, e.value.cols);
                    (Mat::zeros(r, c), Mat::zeros(r, c))
                })
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments,
        }
    }

    pub fn has_moments(&self, id: usize) -> bool {
        self.moments.get(id).is_some_and(Option::is_some)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step_size = T::of(lr / bc1);
        let decay = T::of(1.0 - lr * self.weight_decay);
        let inv_bc2 = T::of(1.0 / bc2);
        for (id, slot) in self.moments.iter_mut().enumerate() {
            let Some((m, v)) = slot else { continue };
            let Some(g) = grads.get(id) else { continue };
            let p = store.value_mut(id);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let denom = (v.data[i] * inv_bc2).sqrt() + eps;
                let mut w = p.data[i];
                if self.weight_decay != 0.0 {
                    w = w * decay;
                }
                p.data[i] = w - step_size * m.data[i] / denom;
            }
        }
    }
}

/// Per-task losses of one step. A task with no examples or no supervised
/// targets reports `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub mmu_loss: Option<f64>,
    pub t2i_loss: Option<f64>,
    pub total: f64,
    /// Task batches that had examples but no supervised target.
    pub empty_batches: usize,
}

/// Summed MMU and T2I losses with one backward pass. Each task batch runs
/// with the route carried by its examples.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    mmu: &[&TrainingExample],
    t2i: &[&TrainingExample],
    trainable: Vec<bool>,
) -> Result<(LossReport, Grads<T>)> {
    for (batch, route) in [(mmu, TaskRoute::Mmu), (t2i, TaskRoute::T2i)] {
        if let Some(ex) = batch.iter().find(|e| e.route != route) {
            return Err(Error::Layout(format!(
                "{} example in the {} batch",
                ex.route.name(),
                route.name()
            )));
        }
    }
    let n = model.store.len();
    let mut tape = Tape::new(&model.store, trainable);
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    for (batch, slot) in [(mmu, &mut report.mmu_loss), (t2i, &mut report.t2i_loss)] {
        if batch.is_empty() {
            continue;
        }
        match model.task_loss(&mut tape, batch)? {
            Some(l) => {
                *slot = Some(tape.scalar(l.loss).as_f64());
                terms.push(l.loss);
            }
            None => report.empty_batches += 1,
        }
    }
    if terms.is_empty() {
        return Ok((report, Grads { params: vec![None; n] }));
    }
    let loss = if terms.len() == 1 {
        terms[0]
    } else {
        tape.sum(&terms)
    };
    report.total = tape.scalar(loss).as_f64();
    Ok((report, tape.backward(loss)))
}

/// Tokenized examples for both tasks.
#[derive(Clone, Debug, Default)]
pub struct TaskData {
    pub mmu: Vec<TrainingExample>,
    pub t2i: Vec<TrainingExample>,
}

/// Builds training streams from raw samples. MMU features come from the
/// model's frozen vision table.
pub fn prepare_examples<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    prompt_loss: bool,
) -> Result<TaskData> {
    let tok = toy_tokenizer();
    let codebook = Codebook::new(model.config.image_vocab_size)?;
    let table: Mat<f32> = model.store.value(model.layout.vision_table).cast();
    let question = tok.encode(QUESTION)?;
    let mmu = data
        .mmu
        .iter()
        .map(|s| {
            let feats = encode_features(&table, &s.image);
            build_mmu_sequence(&feats, &question, &tok.encode(&s.caption)?, prompt_loss)
        })
        .collect::<Result<_>>()?;
    let t2i = data
        .t2i
        .iter()
        .map(|s| {
            build_t2i_sequence(
                &tok.encode(&s.caption)?,
                &codebook.tokenize(&s.image),
                model.config.max_image_tokens,
                prompt_loss,
            )
        })
        .collect::<Result<_>>()?;
    Ok(TaskData { mmu, t2i })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub mmu_loss: Option<f64>,
    pub t2i_loss: Option<f64>,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

/// Options of a stage run beyond its schedule.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub seed: u64,
    /// Zeroes wall-clock fields so logs are byte-reproducible.
    pub strict_determinism: bool,
    /// Steps between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub max_grad_norm: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            strict_determinism: true,
            checkpoint_every: 0,
            checkpoint_dir: None,
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub empty_batches: usize,
}

/// Cycles through shuffled epochs of a pool.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn draw(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains the stage's groups in place and logs one record per step.
pub fn run_stage(
    model: &mut Model<f32>,
    stage: Stage,
    cfg: &StageConfig,
    data: &TaskData,
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<StageReport> {
    cfg.validate(stage)?;
    if cfg.mmu_batch > 0 && data.mmu.is_empty() {
        return Err(Error::Dataset(format!("stage {stage} needs MMU examples")));
    }
    if cfg.t2i_batch > 0 && data.t2i.is_empty() {
        return Err(Error::Dataset(format!("stage {stage} needs T2I examples")));
    }
    let trainable = trainable_mask(&model.store, &stage.trainable_groups());
    let mut opt = AdamW::new(&model.store, &trainable);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (stage.seed_salt() << 56));
    let mut mmu_sampler = Sampler::new(data.mmu.len());
    let mut t2i_sampler = Sampler::new(data.t2i.len());
    let mut report = StageReport::default();
    let mut last_good = String::from("none");

    for step in 1..=cfg.total_steps {
        let start = Instant::now();
        let mmu: Vec<&TrainingExample> = mmu_sampler
            .draw(cfg.mmu_batch, &mut rng)
            .into_iter()
            .map(|i| &data.mmu[i])
            .collect();
        let t2i: Vec<&TrainingExample> = t2i_sampler
            .draw(cfg.t2i_batch, &mut rng)
            .into_iter()
            .map(|i| &data.t2i[i])
            .collect();
        let diverged = |_: Error| Error::Diverged {
            step,
            last_good: last_good.clone(),
        };
        let (losses, mut grads) = match loss_and_grads(model, &mmu, &t2i, trainable.clone()) {
            Err(Error::NonFinite(_)) | Err(Error::Layer { .. }) => {
                return Err(diverged(Error::NonFinite(String::new())));
            }
            other => other?,
        };
        if !losses.total.is_finite() {
            return Err(diverged(Error::NonFinite(String::new())));
        }
        report.empty_batches += losses.empty_batches;
        let norm = clip_grad_norm(&mut grads, opts.max_grad_norm as f32).map_err(diverged)?;
        let lr = cosine_warmup_lr(step, cfg)?;
        opt.update(&mut model.store, &grads, lr);

        let m = StepMetrics {
            step,
            stage,
            lr,
            mmu_loss: losses.mmu_loss,
            t2i_loss: losses.t2i_loss,
            grad_norm: norm as f64,
            wall_ms: if opts.strict_determinism {
                0
            } else {
                start.elapsed().as_millis() as u64
            },
        };
        on_step(&m);
        report.metrics.push(m);

        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 {
                let p = dir.join(format!("stage{}_step{step:06}.ckpt", stage.name()));
                checkpoint::save(model, &p)?;
                last_good = p.display().to_string();
                report.checkpoints.push(p);
            }
        }
    }
    log::debug!("stage {stage}: {} steps", cfg.total_steps);
    Ok(report)
}

/// Combines the two stage-1 branches into the stage-2 starting point. Every
/// tensor outside the branch's own trainable groups must agree bit for bit.
pub fn merge_branches(mmu: &Model<f32>, t2i: &Model<f32>) -> Result<Model<f32>> {
    if mmu.config != t2i.config {
        return Err(Error::MergeConflict("model configs differ".into()));
    }
    let from_mmu = Stage::Stage1Mmu.trainable_groups();
    let from_t2i = Stage::Stage1T2i.trainable_groups();
    let mut merged = mmu.clone();
    for (id, (a, b)) in mmu
        .store
        .entries()
        .iter()
        .zip(t2i.store.entries())
        .enumerate()
    {
        if a.name != b.name || a.shape != b.shape {
            return Err(Error::MergeConflict(format!(
                "tensor {id} is {} in one branch and {} in the other",
                a.name, b.name
            )));
        }
        let group = FreezeGroup::of(&a.name)
            .ok_or_else(|| Error::MergeConflict(format!("ungrouped tensor {}", a.name)))?;
        if from_t2i.contains(&group) {
            *merged.store.value_mut(id) = b.value.clone();
        } else if !from_mmu.contains(&group) {
            let same = a
                .value
                .data
                .iter()
                .zip(&b.value.data)
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Err(Error::MergeConflict(format!("{} ({group})", a.name)));
            }
        }
    }
    Ok(merged)
}

/// Loads both stage-1 checkpoints from `dir`, naming whichever is missing.
pub fn load_stage1_branches(dir: &Path) -> Result<(Model<f32>, Model<f32>)> {
    let mut out = Vec::new();
    for (stage, branch) in [(Stage::Stage1Mmu, "MMU"), (Stage::Stage1T2i, "T2I")] {
        let path = dir.join(stage.checkpoint_file());
        if !path.exists() {
            return Err(Error::MissingBranch { branch, path });
        }
        out.push(checkpoint::load(&path)?);
    }
    let t2i = out.pop().unwrap();
    let mmu = out.pop().unwrap();
    Ok((mmu, t2i))
}

/// Models produced by the full schedule.
#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    pub stage1_mmu: Model<f32>,
    pub stage1_t2i: Model<f32>,
    pub model: Model<f32>,
}

/// Both stage-1 branches from the same initialization, merged, then stage 2.
pub fn run_schedule(
    cfg: &crate::runconfig::RunConfig,
    data: &Dataset,
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<ScheduleOutcome> {
    let init = Model::init(cfg.effective_model(), cfg.train.seed)?;
    let examples = prepare_examples(&init, data, cfg.train.prompt_loss)?;
    let mut mmu = init.clone();
    run_stage(
        &mut mmu,
        Stage::Stage1Mmu,
        &cfg.train.stage1_mmu,
        &examples,
        opts,
        &mut on_step,
    )?;
    let mut t2i = init;
    run_stage(
        &mut t2i,
        Stage::Stage1T2i,
        &cfg.train.stage1_t2i,
        &examples,
        opts,
        &mut on_step,
    )?;
    let mut model = merge_branches(&mmu, &t2i)?;
    run_stage(
        &mut model,
        Stage::Stage2,
        &cfg.train.stage2,
        &examples,
        opts,
        &mut on_step,
    )?;
    Ok(ScheduleOutcome {
        stage1_mmu: mmu,
        stage1_t2i: t2i,
        model,
    })
}
