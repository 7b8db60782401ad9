//! Autoregressive decoding: chunked prefill, then constant-state steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Segment, Tape};
use crate::error::{Error, Result};
use crate::lora::TaskRoute;
use crate::model::Model;
use crate::ssm::LayerState;
use crate::tensor::Mat;
use crate::toy::{
    caption_for, encode_features, parse_caption, toy_tokenizer, Codebook, Sample, ToyImage,
    QUESTION,
};
use crate::vocab::{
    head_for, select, shared_index, token_from_head, Expected, GenerationConfig, HeadKind,
    Modality, SpecialToken, TextTokenizer, Token,
};

/// Per-layer recurrent state of one generation.
#[derive(Clone)]
pub struct DecodeSession<'m> {
    model: &'m Model<f32>,
    route: TaskRoute,
    states: Vec<LayerState<f32>>,
    hidden: Vec<f32>,
    position: usize,
}

impl<'m> DecodeSession<'m> {
    /// Runs the prompt through the chunked path and keeps the final states.
    pub fn prefill(
        model: &'m Model<f32>,
        route: TaskRoute,
        prompt: &[Token],
        features: Option<&Mat<f32>>,
    ) -> Result<Self> {
        let mut tape = Tape::inference(&model.store);
        let x = model.embed_sequence(&mut tape, prompt, features)?;
        let segs = [Segment::new(0, prompt.len())];
        let (h, states) =
            model.stack_on_tape(&mut tape, x, &segs, route, model.config.chunk_len, None)?;
        let h = tape.take_value(h);
        Ok(Self {
            model,
            route,
            states: states
                .into_iter()
                .map(|mut s| s.pop().expect("one segment"))
                .collect(),
            hidden: h.row(h.rows - 1).to_vec(),
            position: prompt.len(),
        })
    }

    /// Feeds one generated token through the recurrent path.
    pub fn push(&mut self, token: Token) -> Result<()> {
        if token.modality == Modality::Feature {
            return Err(Error::Token("feature slots are only valid in the prompt".into()));
        }
        let x = self.model.embed(token)?;
        let (h, next) = self.model.step_stack(&self.states, &x, self.route)?;
        self.hidden = h;
        self.states = next;
        self.position += 1;
        Ok(())
    }

    pub fn logits(&self, head: HeadKind) -> Result<Vec<f32>> {
        self.model.head_logits(&self.hidden, head)
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn route(&self) -> TaskRoute {
        self.route
    }

    pub fn state_bytes(&self) -> usize {
        self.states.iter().map(LayerState::byte_size).sum()
    }
}

/// Tokens produced by one generation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generated {
    pub tokens: Vec<Token>,
    /// Emissions whose modality differs from the segment being generated.
    /// Structurally zero with decoupled heads.
    pub out_of_modality: usize,
}

fn wrong_modality(t: Token, expected: Expected) -> bool {
    match expected {
        Expected::TextOrEot => !(t.modality == Modality::Text || t.is(SpecialToken::Eot)),
        Expected::ImageOrEoi => !(t.modality == Modality::Image || t.is(SpecialToken::Eoi)),
    }
}

fn pick(
    session: &DecodeSession<'_>,
    expected: Expected,
    banned: Option<Token>,
    cfg: &GenerationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Token> {
    let mc = &session.model.config;
    let head = head_for(mc, expected);
    let logits = session.logits(head)?;
    let banned_col = match banned {
        None => None,
        Some(t) if head == HeadKind::Shared => Some(shared_index(mc, t)?),
        Some(t) => Some(crate::vocab::head_target(mc, t)?.1),
    };
    let col = select(&logits, cfg, banned_col, rng)?;
    token_from_head(mc, head, col)
}

/// Caption tokens for an MMU prompt; stops at `[EOT]` or the token budget.
pub fn generate_text(
    model: &Model<f32>,
    features: &Mat<f32>,
    question: &[Token],
    cfg: &GenerationConfig,
) -> Result<Generated> {
    let mut prompt = vec![
        Token::special(SpecialToken::Mmu),
        Token::special(SpecialToken::Soi),
    ];
    prompt.extend((0..features.rows as u32).map(Token::feature));
    prompt.push(Token::special(SpecialToken::Eoi));
    prompt.push(Token::special(SpecialToken::Sot));
    prompt.extend_from_slice(question);
    let mut s = DecodeSession::prefill(model, TaskRoute::Mmu, &prompt, Some(features))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Generated::default();
    for i in 0..cfg.max_new_tokens {
        let t = pick(&s, Expected::TextOrEot, None, cfg, &mut rng)?;
        if wrong_modality(t, Expected::TextOrEot) {
            out.out_of_modality += 1;
        }
        if t.is(SpecialToken::Eot) {
            break;
        }
        out.tokens.push(t);
        if i + 1 < cfg.max_new_tokens {
            s.push(t)?;
        }
    }
    Ok(out)
}

/// Exactly `max_image_tokens` image tokens for a caption; `[EOI]` is banned
/// until the budget is reached and not emitted.
pub fn generate_image(
    model: &Model<f32>,
    caption: &[Token],
    cfg: &GenerationConfig,
) -> Result<Generated> {
    let mut prompt = vec![
        Token::special(SpecialToken::T2i),
        Token::special(SpecialToken::Sot),
    ];
    prompt.extend_from_slice(caption);
    prompt.push(Token::special(SpecialToken::Eot));
    prompt.push(Token::special(SpecialToken::Soi));
    let mut s = DecodeSession::prefill(model, TaskRoute::T2i, &prompt, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = model.config.max_image_tokens;
    let mut out = Generated::default();
    for i in 0..n {
        let t = pick(
            &s,
            Expected::ImageOrEoi,
            Some(Token::special(SpecialToken::Eoi)),
            cfg,
            &mut rng,
        )?;
        if wrong_modality(t, Expected::ImageOrEoi) {
            out.out_of_modality += 1;
        }
        out.tokens.push(t);
        if i + 1 < n {
            s.push(t)?;
        }
    }
    Ok(out)
}

/// Caption a toy image; `None` when the output does not decode.
pub fn caption_image(
    model: &Model<f32>,
    tok: &TextTokenizer,
    image: &ToyImage,
    cfg: &GenerationConfig,
) -> Result<(Option<String>, Generated)> {
    let table = model.store.value(model.layout.vision_table);
    let feats = encode_features(table, image);
    let g = generate_text(model, &feats, &tok.encode(QUESTION)?, cfg)?;
    Ok((tok.decode(&g.tokens).ok(), g))
}

/// Draw a toy image from a caption; `None` when the tokens are not a grid.
pub fn draw_caption(
    model: &Model<f32>,
    tok: &TextTokenizer,
    caption: &str,
    cfg: &GenerationConfig,
) -> Result<(Option<ToyImage>, Generated)> {
    let codebook = Codebook::new(model.config.image_vocab_size)?;
    let g = generate_image(model, &tok.encode(caption)?, cfg)?;
    Ok((codebook.detokenize(&g.tokens).ok(), g))
}

/// Exact-match accuracies on held-out samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mmu_total: usize,
    pub mmu_correct: usize,
    pub t2i_total: usize,
    pub t2i_correct: usize,
    /// Generated tokens whose modality was wrong for their segment.
    pub out_of_modality: usize,
}

impl EvalReport {
    pub fn mmu_accuracy(&self) -> f64 {
        self.mmu_correct as f64 / self.mmu_total.max(1) as f64
    }

    pub fn t2i_accuracy(&self) -> f64 {
        self.t2i_correct as f64 / self.t2i_total.max(1) as f64
    }
}

/// MMU: generated caption equals the ground-truth caption string.
/// T2I: generated grid equals the unique grid the caption describes.
pub fn evaluate(
    model: &Model<f32>,
    mmu: &[Sample],
    t2i: &[Sample],
    cfg: &GenerationConfig,
) -> Result<EvalReport> {
    let tok = toy_tokenizer();
    let mut r = EvalReport::default();
    for s in mmu {
        let (caption, g) = caption_image(model, &tok, &s.image, cfg)?;
        r.mmu_total += 1;
        r.out_of_modality += g.out_of_modality;
        if caption.as_deref() == Some(caption_for(&s.image).as_str()) {
            r.mmu_correct += 1;
        }
    }
    for s in t2i {
        let truth = parse_caption(&s.caption)?;
        let (img, g) = draw_caption(model, &tok, &s.caption, cfg)?;
        r.t2i_total += 1;
        r.out_of_modality += g.out_of_modality;
        if img.as_ref() == Some(&truth) {
            r.t2i_correct += 1;
        }
    }
    Ok(r)
}
