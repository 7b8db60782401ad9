//! Token-stream layouts for both tasks and their loss masks.
//!
//! ```text
//! MMU: [MMU] [SOI] feature x16 [EOI] [SOT] question answer [EOT]
//! T2I: [T2I] [SOT] caption [EOT] [SOI] image x16 [EOI]
//! ```
//!
//! Understanding supervises the answer and its `[EOT]`; generation supervises
//! the image tokens and `[EOI]`. Prompts are supervised only when
//! `prompt_loss` is requested, and then only their text words.

use crate::error::{Error, Result};
use crate::lora::TaskRoute;
use crate::tensor::Mat;
use crate::vocab::{Modality, SpecialToken, Token};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    TaskTag,
    ImageSeg,
    TextSeg,
}

/// Half-open position range `[start, end)` of one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamSegment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub tokens: Vec<Token>,
    pub segments: Vec<StreamSegment>,
    pub loss_mask: Vec<bool>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn segment_at(&self, pos: usize) -> Option<&StreamSegment> {
        self.segments.iter().find(|s| s.start <= pos && pos < s.end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub route: TaskRoute,
    pub stream: TokenStream,
    /// Frozen-encoder features occupying the feature slots of an MMU stream.
    pub continuous_prefix: Option<Mat<f32>>,
}

struct Builder {
    tokens: Vec<Token>,
    mask: Vec<bool>,
    segments: Vec<StreamSegment>,
}

impl Builder {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            mask: Vec::new(),
            segments: Vec::new(),
        }
    }

    fn push(&mut self, t: Token, supervised: bool) {
        self.tokens.push(t);
        self.mask.push(supervised);
    }

    fn segment(&mut self, kind: SegmentKind, f: impl FnOnce(&mut Self)) {
        let start = self.tokens.len();
        f(self);
        self.segments.push(StreamSegment {
            kind,
            start,
            end: self.tokens.len(),
        });
    }

    fn finish(self) -> TokenStream {
        TokenStream {
            tokens: self.tokens,
            segments: self.segments,
            loss_mask: self.mask,
        }
    }
}

fn check_text(tokens: &[Token], what: &str) -> Result<()> {
    match tokens.iter().find(|t| t.modality != Modality::Text) {
        Some(t) => Err(Error::Layout(format!("{what} contains non-text token {t}"))),
        None => Ok(()),
    }
}

pub fn build_mmu_sequence(
    visual_features: &Mat<f32>,
    question: &[Token],
    answer: &[Token],
    prompt_loss: bool,
) -> Result<TrainingExample> {
    if visual_features.rows == 0 {
        return Err(Error::Layout("empty visual features".into()));
    }
    if answer.is_empty() {
        return Err(Error::Layout("empty answer".into()));
    }
    check_text(question, "question")?;
    check_text(answer, "answer")?;
    let mut b = Builder::new();
    b.segment(SegmentKind::TaskTag, |b| {
        b.push(Token::special(SpecialToken::Mmu), false)
    });
    b.segment(SegmentKind::ImageSeg, |b| {
        b.push(Token::special(SpecialToken::Soi), false);
        for k in 0..visual_features.rows {
            b.push(Token::feature(k as u32), false);
        }
        b.push(Token::special(SpecialToken::Eoi), false);
    });
    b.segment(SegmentKind::TextSeg, |b| {
        b.push(Token::special(SpecialToken::Sot), false);
        for &t in question {
            b.push(t, prompt_loss);
        }
        for &t in answer {
            b.push(t, true);
        }
        b.push(Token::special(SpecialToken::Eot), true);
    });
    Ok(TrainingExample {
        route: TaskRoute::Mmu,
        stream: b.finish(),
        continuous_prefix: Some(visual_features.clone()),
    })
}

pub fn build_t2i_sequence(
    caption: &[Token],
    image_tokens: &[Token],
    max_image_tokens: usize,
    prompt_loss: bool,
) -> Result<TrainingExample> {
    if caption.is_empty() {
        return Err(Error::Layout("caption required".into()));
    }
    if image_tokens.len() != max_image_tokens {
        return Err(Error::Layout(format!(
            "{} image tokens, expected {max_image_tokens}",
            image_tokens.len()
        )));
    }
    check_text(caption, "caption")?;
    if let Some(t) = image_tokens.iter().find(|t| t.modality != Modality::Image) {
        return Err(Error::Layout(format!("image segment contains {t}")));
    }
    let mut b = Builder::new();
    b.segment(SegmentKind::TaskTag, |b| {
        b.push(Token::special(SpecialToken::T2i), false)
    });
    b.segment(SegmentKind::TextSeg, |b| {
        b.push(Token::special(SpecialToken::Sot), false);
        for &t in caption {
            b.push(t, prompt_loss);
        }
        b.push(Token::special(SpecialToken::Eot), false);
    });
    b.segment(SegmentKind::ImageSeg, |b| {
        b.push(Token::special(SpecialToken::Soi), false);
        for &t in image_tokens {
            b.push(t, true);
        }
        b.push(Token::special(SpecialToken::Eoi), true);
    });
    Ok(TrainingExample {
        route: TaskRoute::T2i,
        stream: b.finish(),
        continuous_prefix: None,
    })
}

/// Inputs and targets shifted by one; the mask refers to target positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftedTargets {
    pub inputs: Vec<Token>,
    pub targets: Vec<Token>,
    pub mask: Vec<bool>,
}

pub fn next_token_targets(stream: &TokenStream) -> Result<ShiftedTargets> {
    let n = stream.len();
    if n < 2 {
        return Err(Error::Layout(format!("stream of length {n} has no targets")));
    }
    if stream.loss_mask.len() != n {
        return Err(Error::Layout("loss mask length differs from stream".into()));
    }
    Ok(ShiftedTargets {
        inputs: stream.tokens[..n - 1].to_vec(),
        targets: stream.tokens[1..].to_vec(),
        mask: stream.loss_mask[1..].to_vec(),
    })
}

/// Re-derives the segment structure of a stream from its tokens alone.
///
/// Accepts complete streams and, with `allow_prefix`, any prefix that ends
/// inside the final segment (used to validate prompts).
pub fn parse_layout(tokens: &[Token], allow_prefix: bool) -> Result<(TaskRoute, Vec<StreamSegment>)> {
    let tag = tokens
        .first()
        .ok_or_else(|| Error::Layout("empty stream".into()))?;
    let route = match tag.as_special() {
        Some(SpecialToken::Mmu) => TaskRoute::Mmu,
        Some(SpecialToken::T2i) => TaskRoute::T2i,
        _ => return Err(Error::Layout(format!("stream starts with {tag}"))),
    };
    let mut segs = vec![StreamSegment {
        kind: SegmentKind::TaskTag,
        start: 0,
        end: 1,
    }];
    let order = match route {
        TaskRoute::Mmu => [SegmentKind::ImageSeg, SegmentKind::TextSeg],
        _ => [SegmentKind::TextSeg, SegmentKind::ImageSeg],
    };
    let mut pos = 1;
    for (i, &kind) in order.iter().enumerate() {
        if pos == tokens.len() && allow_prefix {
            return Ok((route, segs));
        }
        let (open, close, body) = match kind {
            SegmentKind::ImageSeg if route == TaskRoute::Mmu => {
                (SpecialToken::Soi, SpecialToken::Eoi, Modality::Feature)
            }
            SegmentKind::ImageSeg => (SpecialToken::Soi, SpecialToken::Eoi, Modality::Image),
            _ => (SpecialToken::Sot, SpecialToken::Eot, Modality::Text),
        };
        let start = pos;
        if !tokens.get(pos).is_some_and(|t| t.is(open)) {
            return Err(Error::Layout(format!("expected {open} at {pos}")));
        }
        pos += 1;
        while let Some(t) = tokens.get(pos) {
            if t.modality != body {
                break;
            }
            pos += 1;
        }
        match tokens.get(pos) {
            Some(t) if t.is(close) => pos += 1,
            None if allow_prefix && i == order.len() - 1 => {
                segs.push(StreamSegment {
                    kind,
                    start,
                    end: pos,
                });
                return Ok((route, segs));
            }
            Some(t) => return Err(Error::Layout(format!("unexpected {t} at {pos}"))),
            None => return Err(Error::Layout(format!("missing {close}"))),
        }
        segs.push(StreamSegment {
            kind,
            start,
            end: pos,
        });
    }
    if pos != tokens.len() {
        return Err(Error::Layout(format!("trailing tokens after {pos}")));
    }
    Ok((route, segs))
}
