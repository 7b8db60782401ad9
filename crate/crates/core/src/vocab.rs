//! Per-modality token tables, output heads and modality-constrained decoding.
//!
//! In the decoupled layout text, image and special tokens each index their own
//! embedding table. The text head scores the text table plus `[EOT]`; the
//! image head scores the image table plus `[EOI]`. Decoding for a segment only
//! ever evaluates the head of that segment's modality, so an out-of-modality
//! token cannot be produced.
//!
//! The shared-vocabulary ablation fuses all three tables into one embedding
//! and one head: text ids first, then image ids, then specials.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Image,
    Special,
    /// Slot filled by a continuous visual feature; never looked up in a table
    /// and never a prediction target.
    Feature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Token {
    pub modality: Modality,
    pub id: u32,
}

impl Token {
    pub fn text(id: u32) -> Self {
        Self {
            modality: Modality::Text,
            id,
        }
    }

    pub fn image(id: u32) -> Self {
        Self {
            modality: Modality::Image,
            id,
        }
    }

    pub fn special(s: SpecialToken) -> Self {
        Self {
            modality: Modality::Special,
            id: s as u32,
        }
    }

    pub fn feature(slot: u32) -> Self {
        Self {
            modality: Modality::Feature,
            id: slot,
        }
    }

    pub fn is(&self, s: SpecialToken) -> bool {
        self.modality == Modality::Special && self.id == s as u32
    }

    pub fn as_special(&self) -> Option<SpecialToken> {
        match self.modality {
            Modality::Special => SpecialToken::ALL.get(self.id as usize).copied(),
            _ => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.modality, self.as_special()) {
            (Modality::Special, Some(s)) => write!(f, "{s}"),
            (Modality::Text, _) => write!(f, "t{}", self.id),
            (Modality::Image, _) => write!(f, "i{}", self.id),
            (Modality::Feature, _) => write!(f, "f{}", self.id),
            (Modality::Special, None) => write!(f, "s{}", self.id),
        }
    }
}

/// Rows of the special-token table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum SpecialToken {
    Mmu = 0,
    T2i = 1,
    Sot = 2,
    Eot = 3,
    Soi = 4,
    Eoi = 5,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 6] = [
        SpecialToken::Mmu,
        SpecialToken::T2i,
        SpecialToken::Sot,
        SpecialToken::Eot,
        SpecialToken::Soi,
        SpecialToken::Eoi,
    ];
}

impl fmt::Display for SpecialToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpecialToken::Mmu => "[MMU]",
            SpecialToken::T2i => "[T2I]",
            SpecialToken::Sot => "[SOT]",
            SpecialToken::Eot => "[EOT]",
            SpecialToken::Soi => "[SOI]",
            SpecialToken::Eoi => "[EOI]",
        };
        f.write_str(s)
    }
}

/// Which output head scores a position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Text,
    Image,
    Shared,
}

/// What the next token of a segment is allowed to be.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expected {
    TextOrEot,
    ImageOrEoi,
}

/// Validates a token against the table sizes of `cfg`.
pub fn check_token(cfg: &ModelConfig, t: Token) -> Result<()> {
    let limit = match t.modality {
        Modality::Text => cfg.text_vocab_size,
        Modality::Image => cfg.image_vocab_size,
        Modality::Special => cfg.special_token_count,
        Modality::Feature => cfg.max_image_tokens,
    };
    if (t.id as usize) < limit {
        Ok(())
    } else {
        Err(Error::Token(format!("{t} (table size {limit})")))
    }
}

/// Row of the fused table in the shared-vocabulary layout.
pub fn shared_index(cfg: &ModelConfig, t: Token) -> Result<usize> {
    check_token(cfg, t)?;
    Ok(match t.modality {
        Modality::Text => t.id as usize,
        Modality::Image => cfg.text_vocab_size + t.id as usize,
        Modality::Special => cfg.text_vocab_size + cfg.image_vocab_size + t.id as usize,
        Modality::Feature => {
            return Err(Error::Token(format!("{t} has no table row")));
        }
    })
}

pub fn shared_vocab_len(cfg: &ModelConfig) -> usize {
    cfg.text_vocab_size + cfg.image_vocab_size + cfg.special_token_count
}

/// Output width of a head.
pub fn head_width(cfg: &ModelConfig, head: HeadKind) -> usize {
    match head {
        HeadKind::Text => cfg.text_vocab_size + 1,
        HeadKind::Image => cfg.image_vocab_size + 1,
        HeadKind::Shared => shared_vocab_len(cfg),
    }
}

/// Head and column that score `target` as a prediction.
pub fn head_target(cfg: &ModelConfig, target: Token) -> Result<(HeadKind, usize)> {
    check_token(cfg, target)?;
    if cfg.shared_vocab {
        return Ok((HeadKind::Shared, shared_index(cfg, target)?));
    }
    match (target.modality, target.as_special()) {
        (Modality::Text, _) => Ok((HeadKind::Text, target.id as usize)),
        (Modality::Image, _) => Ok((HeadKind::Image, target.id as usize)),
        (_, Some(SpecialToken::Eot)) => Ok((HeadKind::Text, cfg.text_vocab_size)),
        (_, Some(SpecialToken::Eoi)) => Ok((HeadKind::Image, cfg.image_vocab_size)),
        _ => Err(Error::Token(format!("{target} is never a prediction target"))),
    }
}

/// Inverse of [`head_target`].
pub fn token_from_head(cfg: &ModelConfig, head: HeadKind, col: usize) -> Result<Token> {
    let (vt, vi) = (cfg.text_vocab_size, cfg.image_vocab_size);
    let tok = match head {
        HeadKind::Text if col < vt => Token::text(col as u32),
        HeadKind::Text if col == vt => Token::special(SpecialToken::Eot),
        HeadKind::Image if col < vi => Token::image(col as u32),
        HeadKind::Image if col == vi => Token::special(SpecialToken::Eoi),
        HeadKind::Shared if col < vt => Token::text(col as u32),
        HeadKind::Shared if col < vt + vi => Token::image((col - vt) as u32),
        HeadKind::Shared if col < shared_vocab_len(cfg) => {
            Token::special(SpecialToken::ALL[col - vt - vi])
        }
        _ => return Err(Error::Token(format!("column {col} of {head:?} head"))),
    };
    Ok(tok)
}

/// Head evaluated for a segment; the shared layout always uses its fused head.
pub fn head_for(cfg: &ModelConfig, expected: Expected) -> HeadKind {
    match (cfg.shared_vocab, expected) {
        (true, _) => HeadKind::Shared,
        (false, Expected::TextOrEot) => HeadKind::Text,
        (false, Expected::ImageOrEoi) => HeadKind::Image,
    }
}

/// Sampling settings for autoregressive decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub mode: SampleMode,
    pub temperature: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: SampleMode::Greedy,
            temperature: 1.0,
            top_k: 8,
            max_new_tokens: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Greedy,
    Sampled,
}

/// Picks a column from `logits`, skipping `banned`. Greedy ties resolve to
/// the lowest index.
pub fn select<T: Real, R: Rng>(
    logits: &[T],
    cfg: &GenerationConfig,
    banned: Option<usize>,
    rng: &mut R,
) -> Result<usize> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoder logits".into()));
    }
    let allowed = |i: usize| Some(i) != banned;
    match cfg.mode {
        SampleMode::Greedy => logits
            .iter()
            .enumerate()
            .filter(|(i, _)| allowed(*i))
            .fold(None, |best: Option<(usize, T)>, (i, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Token("no admissible column".into())),
        SampleMode::Sampled => {
            let temp = cfg.temperature.max(1e-6);
            let mut cand: Vec<(usize, f64)> = logits
                .iter()
                .enumerate()
                .filter(|(i, _)| allowed(*i))
                .map(|(i, v)| (i, v.as_f64() / temp))
                .collect();
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cand.truncate(cfg.top_k.max(1));
            let max = cand.first().map(|c| c.1).ok_or_else(|| {
                Error::Token("no admissible column".into())
            })?;
            let weights: Vec<f64> = cand.iter().map(|c| (c.1 - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (c, w) in cand.iter().zip(&weights) {
                if u < *w {
                    return Ok(c.0);
                }
                u -= w;
            }
            Ok(cand.last().map(|c| c.0).unwrap_or(0))
        }
    }
}

/// Softmax of a logit row, in `f64`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Whitespace word tokenizer. The vocabulary is a sorted word list; a word's
/// id is its line number in the persisted file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl TextTokenizer {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = words.into_iter().map(Into::into).collect();
        words.sort();
        words.dedup();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<Token>> {
        text.split_whitespace()
            .map(|w| {
                self.index
                    .get(w)
                    .map(|&id| Token::text(id))
                    .ok_or_else(|| Error::Token(format!("unknown word {w:?}")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> Result<String> {
        let words = tokens
            .iter()
            .map(|t| match t.modality {
                Modality::Text => self
                    .words
                    .get(t.id as usize)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Token(format!("{t} outside tokenizer"))),
                _ => Err(Error::Token(format!("{t} is not a text token"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn to_file_contents(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_contents())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words: Vec<&str> = text.lines().collect();
        let tok = Self::from_words(words.iter().copied());
        if tok.words.len() != words.len() || tok.words.iter().zip(&words).any(|(a, b)| a != b) {
            return Err(Error::Token(format!(
                "{} is not a sorted, duplicate-free word list",
                path.display()
            )));
        }
        Ok(tok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_targets_round_trip() {
        for shared in [false, true] {
            let cfg = ModelConfig {
                shared_vocab: shared,
                ..ModelConfig::tiny()
            };
            let toks = [
                Token::text(0),
                Token::text(47),
                Token::image(11),
                Token::special(SpecialToken::Eot),
                Token::special(SpecialToken::Eoi),
            ];
            for t in toks {
                let (head, col) = head_target(&cfg, t).unwrap();
                assert!(col < head_width(&cfg, head));
                assert_eq!(token_from_head(&cfg, head, col).unwrap(), t);
            }
        }
    }

    #[test]
    fn decoupled_heads_reject_prompt_specials() {
        let cfg = ModelConfig::tiny();
        assert!(head_target(&cfg, Token::special(SpecialToken::Sot)).is_err());
        assert!(head_target(&cfg, Token::feature(0)).is_err());
        assert!(check_token(&cfg, Token::image(12)).is_err());
    }

    #[test]
    fn greedy_prefers_lowest_index_on_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GenerationConfig::default();
        assert_eq!(select(&[1.0f32, 3.0, 3.0], &cfg, None, &mut rng).unwrap(), 1);
        assert_eq!(select(&[1.0f32, 3.0, 3.0], &cfg, Some(1), &mut rng).unwrap(), 2);
        assert!(select(&[f32::NAN], &cfg, None, &mut rng).is_err());
    }

    #[test]
    fn sampling_respects_top_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = GenerationConfig {
            mode: SampleMode::Sampled,
            top_k: 2,
            temperature: 5.0,
            ..GenerationConfig::default()
        };
        let logits = [0.0f32, 4.0, 3.9, -1.0];
        for _ in 0..500 {
            let i = select(&logits, &cfg, None, &mut rng).unwrap();
            assert!(i == 1 || i == 2);
        }
    }

    #[test]
    fn tokenizer_file_is_sorted_lines() {
        let tok = TextTokenizer::from_words(["red", "at", "cell", "red"]);
        assert_eq!(tok.to_file_contents(), "at\ncell\nred\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        tok.save(&p).unwrap();
        assert_eq!(TextTokenizer::load(&p).unwrap(), tok);
        let enc = tok.encode("red cell").unwrap();
        assert_eq!(enc, vec![Token::text(2), Token::text(1)]);
        assert_eq!(tok.decode(&enc).unwrap(), "red cell");
        assert!(tok.encode("blue").is_err());

        std::fs::write(&p, "b\na\n").unwrap();
        assert!(TextTokenizer::load(&p).is_err());
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&[1.0, 2.0, -3.0, 1000.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
