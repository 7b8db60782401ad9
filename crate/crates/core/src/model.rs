//! The full model: token/feature embedding, the residual block stack, and the
//! modality heads, all recorded on a [`Tape`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Segment, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::lora::{AdapterIds, TaskRoute};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::sequence::{next_token_targets, TrainingExample};
use crate::ssm::{block, LayerState, SsmLayerParams};
use crate::tensor::{vecmat, Mat};
use crate::toy::{CELLS, COLORS};
use crate::vocab::{check_token, head_target, head_width, shared_index, HeadKind, Modality, Token};

/// Ids of the vocabulary-side parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabIds {
    Decoupled {
        embed_text: ParamId,
        embed_image: ParamId,
        embed_special: ParamId,
        head_text: ParamId,
        head_image: ParamId,
    },
    Shared {
        embed: ParamId,
        head: ParamId,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub layers: Vec<SsmLayerParams>,
    pub final_norm: ParamId,
    pub vocab: VocabIds,
    pub projector_weight: ParamId,
    pub projector_bias: ParamId,
    pub vision_table: ParamId,
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    Ones,
    Zeros,
    Uniform(f64),
    Normal(f64),
    /// `softplus(dt_bias)` log-uniform in `[1e-3, 1e-1]`.
    DtBias,
    /// `exp(A_log)` uniform in `[1, 16]`.
    ALog,
    /// Row `cell * COLORS + colour` is the sum of a random cell code and a
    /// random colour code.
    VisionCodes,
}

/// Tensor names, shapes and initializers in canonical order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let di = cfg.d_inner();
    let dp = cfg.d_in_proj();
    let r = cfg.lora_rank;
    let mut v = Vec::new();
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        v.push((p("in_norm"), vec![d], Init::Ones));
        v.push((p("in_proj"), vec![d, dp], Init::Uniform(1.0 / (d as f64).sqrt())));
        v.push((
            p("conv"),
            vec![cfg.conv_dim(), cfg.d_conv],
            Init::Uniform(1.0 / (cfg.d_conv as f64).sqrt()),
        ));
        v.push((p("a_log"), vec![cfg.n_heads], Init::ALog));
        v.push((p("dt_bias"), vec![cfg.n_heads], Init::DtBias));
        v.push((p("d_skip"), vec![cfg.n_heads], Init::Ones));
        v.push((p("out_norm"), vec![di], Init::Ones));
        v.push((p("out_proj"), vec![di, d], Init::Uniform(1.0 / (di as f64).sqrt())));
        if r > 0 {
            for route in ["mmu", "t2i"] {
                v.push((
                    p(&format!("lora.{route}.down")),
                    vec![d, r],
                    Init::Uniform(1.0 / (d as f64).sqrt()),
                ));
                v.push((p(&format!("lora.{route}.up")), vec![r, dp], Init::Zeros));
            }
        }
    }
    v.push(("final_norm".into(), vec![d], Init::Ones));
    let head_scale = Init::Normal(1.0 / (d as f64).sqrt());
    if cfg.shared_vocab {
        let n = crate::vocab::shared_vocab_len(cfg);
        v.push(("embed.shared".into(), vec![n, d], Init::Normal(1.0)));
        v.push(("head.shared".into(), vec![d, n], head_scale));
    } else {
        v.push((
            "embed.text".into(),
            vec![cfg.text_vocab_size, d],
            Init::Normal(1.0),
        ));
        v.push((
            "embed.image".into(),
            vec![cfg.image_vocab_size, d],
            Init::Normal(1.0),
        ));
        v.push((
            "embed.special".into(),
            vec![cfg.special_token_count, d],
            Init::Normal(1.0),
        ));
        v.push((
            "head.text".into(),
            vec![d, head_width(cfg, HeadKind::Text)],
            head_scale,
        ));
        v.push((
            "head.image".into(),
            vec![d, head_width(cfg, HeadKind::Image)],
            head_scale,
        ));
    }
    v.push((
        "projector.weight".into(),
        vec![cfg.vision_dim, d],
        Init::Uniform(1.0 / (cfg.vision_dim as f64).sqrt()),
    ));
    v.push(("projector.bias".into(), vec![d], Init::Zeros));
    v.push((
        "vision.table".into(),
        vec![CELLS * COLORS, cfg.vision_dim],
        Init::VisionCodes,
    ));
    v
}

fn mat_shape(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("parameters are rank 1 or 2"),
    }
}

fn sample(init: Init, rng: &mut ChaCha8Rng) -> f64 {
    match init {
        Init::Ones => 1.0,
        Init::Zeros => 0.0,
        Init::Uniform(b) => rng.gen_range(-b..b),
        Init::Normal(s) => s * rng.sample::<f64, _>(StandardNormal),
        Init::DtBias => {
            let dt = rng.gen_range(1e-3f64.ln()..1e-1f64.ln()).exp();
            // inverse softplus
            dt + (-(-dt).exp_m1()).ln()
        }
        Init::ALog => rng.gen_range(1.0f64..16.0).ln(),
        Init::VisionCodes => unreachable!("whole-tensor initializer"),
    }
}

fn vision_codes(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut code = |n: usize| -> Vec<f64> {
        (0..n * dim)
            .map(|_| std::f64::consts::FRAC_1_SQRT_2 * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let cells = code(CELLS);
    let colors = code(COLORS);
    let mut out = Vec::with_capacity(CELLS * COLORS * dim);
    for cell in 0..CELLS {
        for color in 0..COLORS {
            out.extend((0..dim).map(|j| cells[cell * dim + j] + colors[color * dim + j]));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

/// Execution strategy for [`Model::stack_forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Parallel { chunk_len: usize },
    Step,
}

/// Logits scoring one supervised target.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionLogits<T> {
    /// Index into the shifted target sequence.
    pub position: usize,
    pub head: HeadKind,
    pub target: usize,
    pub logits: Vec<T>,
}

/// Loss term of one task inside a tape.
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    pub loss: Var,
    pub supervised: usize,
}

impl Model<f32> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        crate::toy::Codebook::new(config.image_vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            let (r, c) = mat_shape(&shape);
            let data = match init {
                Init::VisionCodes => vision_codes(c, &mut rng).into_iter().map(|x| x as f32).collect(),
                _ => (0..r * c).map(|_| sample(init, &mut rng) as f32).collect(),
            };
            store.insert(name, shape, Mat::from_vec(r, c, data)?);
        }
        Self::from_store(config, store)
    }
}

impl<T: Real> Model<T> {
    /// Binds a store to a config, checking every expected tensor is present
    /// with the right shape and nothing else is.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != store.len() {
            return Err(Error::Malformed(format!(
                "store has {} tensors, config expects {}",
                store.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in &specs {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Malformed(format!("missing tensor {name}")))?;
            if &store.entry(id).shape != shape {
                return Err(Error::Malformed(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    store.entry(id).shape
                )));
            }
        }
        store.check_groups()?;
        let id = |n: &str| store.id(n).expect("checked above");
        let adapter = |l: usize, route: &str| {
            (config.lora_rank > 0).then(|| AdapterIds {
                down: id(&format!("layers.{l}.lora.{route}.down")),
                up: id(&format!("layers.{l}.lora.{route}.up")),
            })
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |s: &str| id(&format!("layers.{l}.{s}"));
                SsmLayerParams {
                    in_norm: p("in_norm"),
                    in_proj: p("in_proj"),
                    conv: p("conv"),
                    a_log: p("a_log"),
                    dt_bias: p("dt_bias"),
                    d_skip: p("d_skip"),
                    out_norm: p("out_norm"),
                    out_proj: p("out_proj"),
                    lora_mmu: adapter(l, "mmu"),
                    lora_t2i: adapter(l, "t2i"),
                }
            })
            .collect();
        let vocab = if config.shared_vocab {
            VocabIds::Shared {
                embed: id("embed.shared"),
                head: id("head.shared"),
            }
        } else {
            VocabIds::Decoupled {
                embed_text: id("embed.text"),
                embed_image: id("embed.image"),
                embed_special: id("embed.special"),
                head_text: id("head.text"),
                head_image: id("head.image"),
            }
        };
        let layout = Layout {
            layers,
            final_norm: id("final_norm"),
            vocab,
            projector_weight: id("projector.weight"),
            projector_bias: id("projector.bias"),
            vision_table: id("vision.table"),
        };
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn head_param(&self, head: HeadKind) -> Result<ParamId> {
        match (self.layout.vocab, head) {
            (VocabIds::Decoupled { head_text, .. }, HeadKind::Text) => Ok(head_text),
            (VocabIds::Decoupled { head_image, .. }, HeadKind::Image) => Ok(head_image),
            (VocabIds::Shared { head, .. }, HeadKind::Shared) => Ok(head),
            _ => Err(Error::Token(format!(
                "{head:?} head does not exist in this vocabulary layout"
            ))),
        }
    }

    /// Table and row holding a token's embedding.
    fn embed_row(&self, t: Token) -> Result<(ParamId, usize)> {
        check_token(&self.config, t)?;
        match self.layout.vocab {
            VocabIds::Shared { embed, .. } => Ok((embed, shared_index(&self.config, t)?)),
            VocabIds::Decoupled {
                embed_text,
                embed_image,
                embed_special,
                ..
            } => match t.modality {
                Modality::Text => Ok((embed_text, t.id as usize)),
                Modality::Image => Ok((embed_image, t.id as usize)),
                Modality::Special => Ok((embed_special, t.id as usize)),
                Modality::Feature => Err(Error::Token(format!("{t} has no table row"))),
            },
        }
    }

    /// Embedding vector of a table token.
    pub fn embed(&self, t: Token) -> Result<Vec<T>> {
        let (table, row) = self.embed_row(t)?;
        Ok(self.store.value(table).row(row).to_vec())
    }

    /// Frozen-encoder features through the trainable projector.
    pub fn project_features(&self, features: &Mat<f32>) -> Mat<T> {
        let mut tape = Tape::inference(&self.store);
        let f = tape.input(features.cast());
        let v = self.project_on_tape(&mut tape, f);
        tape.take_value(v)
    }

    fn project_on_tape(&self, tape: &mut Tape<'_, T>, features: Var) -> Var {
        let p = tape.matmul(features, Var::Param(self.layout.projector_weight));
        tape.add_row(p, Var::Param(self.layout.projector_bias))
    }

    /// Input rows for one sequence: table lookups for tokens, projected
    /// features for feature slots.
    pub(crate) fn embed_sequence(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &[Token],
        features: Option<&Mat<f32>>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Layout("cannot embed an empty sequence".into()));
        }
        enum Src {
            Table(ParamId),
            Feature,
        }
        let mut parts = Vec::new();
        let mut i = 0;
        let mut feat_var = None;
        while i < tokens.len() {
            let src = if tokens[i].modality == Modality::Feature {
                Src::Feature
            } else {
                Src::Table(self.embed_row(tokens[i])?.0)
            };
            let mut j = i;
            let mut rows = Vec::new();
            while j < tokens.len() {
                let t = tokens[j];
                match (&src, t.modality) {
                    (Src::Feature, Modality::Feature) => rows.push(t.id as usize),
                    (Src::Table(tab), m) if m != Modality::Feature => {
                        let (tb, r) = self.embed_row(t)?;
                        if tb != *tab {
                            break;
                        }
                        rows.push(r);
                    }
                    _ => break,
                }
                j += 1;
            }
            let part = match src {
                Src::Table(tab) => tape.gather_rows(Var::Param(tab), &rows),
                Src::Feature => {
                    let feats = features.ok_or_else(|| {
                        Error::Layout("feature slots without continuous features".into())
                    })?;
                    if let Some(&bad) = rows.iter().find(|&&r| r >= feats.rows) {
                        return Err(Error::Layout(format!(
                            "feature slot {bad} but only {} features",
                            feats.rows
                        )));
                    }
                    let fv = match feat_var {
                        Some(v) => v,
                        None => {
                            let f = tape.input(feats.cast());
                            let v = self.project_on_tape(tape, f);
                            feat_var = Some(v);
                            v
                        }
                    };
                    tape.gather_rows(fv, &rows)
                }
            };
            parts.push(part);
            i = j;
        }
        Ok(if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        })
    }

    /// Residual stack plus final norm over a packed batch. `init` is indexed
    /// `[layer][segment]`.
    pub(crate) fn stack_on_tape(
        &self,
        tape: &mut Tape<'_, T>,
        mut x: Var,
        segs: &[Segment],
        route: TaskRoute,
        chunk_len: usize,
        init: Option<&[Vec<LayerState<T>>]>,
    ) -> Result<(Var, Vec<Vec<LayerState<T>>>)> {
        let mut states = Vec::with_capacity(self.config.n_layers);
        for (l, layer) in self.layout.layers.iter().enumerate() {
            if !tape.value(x).is_finite() {
                return Err(Error::NonFinite("block input".into()).in_layer(l));
            }
            let layer_init = init.map(|s| s[l].as_slice());
            let (out, st) = block(tape, &self.config, layer, x, segs, route, chunk_len, layer_init);
            x = tape.add(x, out);
            states.push(st);
        }
        let h = tape.rms_norm(
            x,
            Var::Param(self.layout.final_norm),
            T::of(self.config.rms_eps),
        );
        if !tape.value(h).is_finite() {
            return Err(Error::NonFinite("stack output".into()));
        }
        Ok((h, states))
    }

    fn check_layer(&self, layer: usize) -> Result<&SsmLayerParams> {
        self.layout
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no layer {layer}")))
    }

    /// One block (no residual) over a full sequence, chunked scan.
    pub fn block_forward_parallel(
        &self,
        layer: usize,
        input: &Mat<T>,
        route: TaskRoute,
        chunk_len: usize,
    ) -> Result<Mat<T>> {
        let params = *self.check_layer(layer)?;
        if input.rows == 0 || chunk_len == 0 {
            return Err(Error::Shape("empty input or zero chunk length".into()).in_layer(layer));
        }
        if input.cols != self.config.d_model {
            return Err(Error::Shape(format!("input width {}", input.cols)).in_layer(layer));
        }
        if !input.is_finite() {
            return Err(Error::NonFinite("block input".into()).in_layer(layer));
        }
        let mut tape = Tape::inference(&self.store);
        let u = tape.input(input.clone());
        let segs = [Segment::new(0, input.rows)];
        let (out, _) = block(&mut tape, &self.config, &params, u, &segs, route, chunk_len, None);
        Ok(tape.take_value(out))
    }

    /// One block (no residual) advanced by a single token.
    pub fn block_step(
        &self,
        layer: usize,
        state: &LayerState<T>,
        input: &[T],
        route: TaskRoute,
    ) -> Result<(LayerState<T>, Vec<T>)> {
        let params = *self.check_layer(layer)?;
        state.check_shape(&self.config).map_err(|e| e.in_layer(layer))?;
        if input.len() != self.config.d_model {
            return Err(Error::Shape(format!("input width {}", input.len())).in_layer(layer));
        }
        let mut tape = Tape::inference(&self.store);
        let u = tape.input(Mat::row_vector(input.to_vec()));
        let segs = [Segment::new(0, 1)];
        let init = [state.clone()];
        let (out, mut st) = block(&mut tape, &self.config, &params, u, &segs, route, 1, Some(&init));
        Ok((st.pop().expect("one segment"), tape.take_value(out).data))
    }

    /// Fresh zero decode state for every layer.
    pub fn zero_states(&self) -> Vec<LayerState<T>> {
        (0..self.config.n_layers)
            .map(|_| LayerState::zeros(&self.config))
            .collect()
    }

    /// Whole stack on an embedded sequence; `Step` folds the recurrent path
    /// token by token.
    pub fn stack_forward(&self, input: &Mat<T>, route: TaskRoute, mode: ExecMode) -> Result<Mat<T>> {
        if input.rows == 0 || input.cols != self.config.d_model {
            return Err(Error::Shape(format!(
                "stack input {}x{}",
                input.rows, input.cols
            )));
        }
        match mode {
            ExecMode::Parallel { chunk_len } => {
                let mut tape = Tape::inference(&self.store);
                let x = tape.input(input.clone());
                let (h, _) = self.stack_on_tape(
                    &mut tape,
                    x,
                    &[Segment::new(0, input.rows)],
                    route,
                    chunk_len.max(1),
                    None,
                )?;
                Ok(tape.take_value(h))
            }
            ExecMode::Step => {
                let mut states = self.zero_states();
                let mut out = Mat::zeros(input.rows, self.config.d_model);
                for r in 0..input.rows {
                    let (h, next) = self.step_stack(&states, input.row(r), route)?;
                    out.row_mut(r).copy_from_slice(&h);
                    states = next;
                }
                Ok(out)
            }
        }
    }

    /// One token through every layer, returning the final-normed hidden row
    /// and the advanced states.
    pub fn step_stack(
        &self,
        states: &[LayerState<T>],
        input: &[T],
        route: TaskRoute,
    ) -> Result<(Vec<T>, Vec<LayerState<T>>)> {
        if states.len() != self.config.n_layers {
            return Err(Error::Shape(format!("{} layer states", states.len())));
        }
        for (l, s) in states.iter().enumerate() {
            s.check_shape(&self.config).map_err(|e| e.in_layer(l))?;
        }
        let mut tape = Tape::inference(&self.store);
        let x = tape.input(Mat::row_vector(input.to_vec()));
        let init: Vec<Vec<LayerState<T>>> = states.iter().map(|s| vec![s.clone()]).collect();
        let (h, st) = self.stack_on_tape(&mut tape, x, &[Segment::new(0, 1)], route, 1, Some(&init))?;
        let next = st.into_iter().map(|mut v| v.pop().expect("one segment")).collect();
        Ok((tape.take_value(h).data, next))
    }

    /// Logits of one head for a hidden row.
    pub fn head_logits(&self, hidden: &[T], head: HeadKind) -> Result<Vec<T>> {
        let w = self.store.value(self.head_param(head)?);
        if hidden.len() != w.rows {
            return Err(Error::Shape(format!("hidden width {}", hidden.len())));
        }
        Ok(vecmat(hidden, w))
    }

    /// Per supervised target, the logits of the head matching its modality.
    /// `hidden` holds one row per input position of the shifted stream.
    pub fn logits_for_loss(
        &self,
        hidden: &Mat<T>,
        example: &TrainingExample,
    ) -> Result<Vec<PositionLogits<T>>> {
        let shifted = next_token_targets(&example.stream)?;
        if hidden.rows != shifted.targets.len() {
            return Err(Error::Layout(format!(
                "{} hidden rows for {} targets",
                hidden.rows,
                shifted.targets.len()
            )));
        }
        let mut out = Vec::new();
        for (p, (&t, &m)) in shifted.targets.iter().zip(&shifted.mask).enumerate() {
            if !m {
                continue;
            }
            let (head, target) = head_target(&self.config, t)?;
            out.push(PositionLogits {
                position: p,
                head,
                target,
                logits: self.head_logits(hidden.row(p), head)?,
            });
        }
        Ok(out)
    }

    /// Records a same-route batch and its mean next-token loss. Returns
    /// `None` when the batch has no supervised target.
    pub(crate) fn task_loss(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &[&TrainingExample],
    ) -> Result<Option<TaskLoss>> {
        let Some(first) = batch.first() else {
            return Ok(None);
        };
        let route = first.route;
        let mut parts = Vec::with_capacity(batch.len());
        let mut segs = Vec::with_capacity(batch.len());
        let mut rows = 0;
        // (head) -> (packed rows, target columns)
        let mut plan: Vec<(HeadKind, Vec<usize>, Vec<usize>)> = Vec::new();
        for ex in batch {
            if ex.route != route {
                return Err(Error::Layout("mixed routes in one task batch".into()));
            }
            let sh = next_token_targets(&ex.stream)?;
            let v = self.embed_sequence(tape, &sh.inputs, ex.continuous_prefix.as_ref())?;
            parts.push(v);
            segs.push(Segment::new(rows, sh.inputs.len()));
            for (p, (&t, &m)) in sh.targets.iter().zip(&sh.mask).enumerate() {
                if !m {
                    continue;
                }
                let (head, col) = head_target(&self.config, t)?;
                let slot = match plan.iter().position(|(h, _, _)| *h == head) {
                    Some(i) => i,
                    None => {
                        plan.push((head, Vec::new(), Vec::new()));
                        plan.len() - 1
                    }
                };
                plan[slot].1.push(rows + p);
                plan[slot].2.push(col);
            }
            rows += sh.inputs.len();
        }
        let supervised: usize = plan.iter().map(|p| p.1.len()).sum();
        if supervised == 0 {
            return Ok(None);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        };
        let (h, _) = self.stack_on_tape(tape, x, &segs, route, self.config.chunk_len, None)?;
        let weight = T::one() / T::of(supervised as f64);
        let mut terms = Vec::new();
        plan.sort_by_key(|p| p.0 as u8);
        for (head, rows, cols) in &plan {
            let sel = tape.gather_rows(h, rows);
            let logits = tape.matmul(sel, Var::Param(self.head_param(*head)?));
            terms.push(tape.cross_entropy(logits, cols, weight));
        }
        let loss = if terms.len() == 1 {
            terms[0]
        } else {
            tape.sum(&terms)
        };
        Ok(Some(TaskLoss { loss, supervised }))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{encode_features, ToyImage};

    #[test]
    fn zero_projector_yields_bias() {
        let mut m = Model::init(ModelConfig::tiny(), 1).unwrap();
        let w = m.layout.projector_weight;
        let b = m.layout.projector_bias;
        m.store.value_mut(w).data.fill(0.0);
        for (i, v) in m.store.value_mut(b).data.iter_mut().enumerate() {
            *v = i as f32 * 0.5;
        }
        let feats = encode_features(m.store.value(m.layout.vision_table), &ToyImage::uniform(3));
        let p = m.project_features(&feats);
        let bias = m.store.value(b).data.clone();
        for r in 0..p.rows {
            assert_eq!(p.row(r), &bias[..]);
        }
    }

    #[test]
    fn vision_rows_factor_into_cell_and_colour() {
        let m = Model::init(ModelConfig::tiny(), 2).unwrap();
        let t = m.store.value(m.layout.vision_table);
        let diff = |cell: usize| -> Vec<f32> {
            let a = t.row(cell * COLORS + 1);
            let b = t.row(cell * COLORS + 5);
            a.iter().zip(b).map(|(x, y)| x - y).collect()
        };
        let d0 = diff(0);
        for cell in 1..CELLS {
            for (x, y) in diff(cell).iter().zip(&d0) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        assert_ne!(t.row(0), t.row(COLORS));
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(ModelConfig::tiny(), 9).unwrap();
        let b = Model::init(ModelConfig::tiny(), 9).unwrap();
        let c = Model::init(ModelConfig::tiny(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store.entries(), c.store.entries());
    }

    #[test]
    fn lora_up_starts_at_zero() {
        let m = Model::init(ModelConfig::tiny(), 3).unwrap();
        for id in m.store.ids_in(crate::FreezeGroup::MmuLora)
            .into_iter()
            .chain(m.store.ids_in(crate::FreezeGroup::T2iLora))
        {
            let e = m.store.entry(id);
            if e.name.ends_with(".up") {
                assert!(e.value.data.iter().all(|v| *v == 0.0), "{}", e.name);
            }
        }
    }
}
