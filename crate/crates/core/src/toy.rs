//! Synthetic 4x4 colour grids with an invertible caption grammar, plus the
//! stand-in encoders: a frozen random feature table for understanding and an
//! identity codebook for generation.
//!
//! Caption grammar (0-based rows and columns, clauses in raster order):
//!
//! ```text
//! caption := "uniform" COLOR
//!          | COLOR "background" "with" clause ("and" clause){0,2}
//! clause  := COLOR "cell" "at" "row" DIGIT "column" DIGIT
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::vocab::{Modality, TextTokenizer, Token};

pub const SIDE: usize = 4;
pub const CELLS: usize = SIDE * SIDE;
pub const COLORS: usize = 8;
pub const MAX_HIGHLIGHTS: usize = 3;

pub const PALETTE: [&str; COLORS] = [
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "black",
];

/// Fixed understanding prompt.
pub const QUESTION: &str = "describe the grid";

const DIGITS: [&str; SIDE] = ["0", "1", "2", "3"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyImage {
    pub cells: [u8; CELLS],
}

impl ToyImage {
    pub fn uniform(color: u8) -> Self {
        Self {
            cells: [color; CELLS],
        }
    }

    pub fn from_slice(cells: &[u8]) -> Result<Self> {
        if cells.len() != CELLS {
            return Err(Error::Dataset(format!(
                "grid has {} cells, expected {CELLS}",
                cells.len()
            )));
        }
        if let Some(c) = cells.iter().find(|&&c| c as usize >= COLORS) {
            return Err(Error::Dataset(format!("colour index {c} >= {COLORS}")));
        }
        let mut out = [0u8; CELLS];
        out.copy_from_slice(cells);
        Ok(Self { cells: out })
    }

    /// Majority colour; the background of every grammar-generated grid.
    pub fn background(&self) -> u8 {
        let mut counts = [0usize; COLORS];
        for &c in &self.cells {
            counts[c as usize] += 1;
        }
        (0..COLORS)
            .max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))
            .unwrap_or(0) as u8
    }

    /// Text-art rendering: one letter per cell, one line per row.
    pub fn render(&self) -> String {
        const LETTERS: [char; COLORS] = ['R', 'G', 'B', 'Y', 'C', 'M', 'W', 'K'];
        let mut s = String::new();
        for r in 0..SIDE {
            let line: Vec<String> = (0..SIDE)
                .map(|c| LETTERS[self.cells[r * SIDE + c] as usize].to_string())
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for ToyImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells: Vec<String> = self.cells.iter().map(u8::to_string).collect();
        f.write_str(&cells.join(" "))
    }
}

/// Every word the caption grammar and the fixed question can produce.
pub fn grammar_words() -> Vec<&'static str> {
    let mut w: Vec<&'static str> = PALETTE.to_vec();
    w.extend(DIGITS);
    w.extend([
        "uniform",
        "background",
        "with",
        "row",
        "column",
        "in",
        "and",
    ]);
    w.extend(QUESTION.split_whitespace());
    w
}

pub fn toy_tokenizer() -> TextTokenizer {
    TextTokenizer::from_words(grammar_words())
}

/// Caption of a grid produced by the grammar (background plus at most three
/// highlighted cells of other colours).
pub fn caption_for(img: &ToyImage) -> String {
    let bg = img.background();
    let highlights: Vec<(usize, u8)> = img
        .cells
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != bg)
        .map(|(i, &c)| (i, c))
        .collect();
    if highlights.is_empty() {
        return format!("uniform {}", PALETTE[bg as usize]);
    }
    let clauses: Vec<String> = highlights
        .iter()
        .map(|&(i, c)| {
            format!(
                "row {} column {} in {}",
                i / SIDE,
                i % SIDE,
                PALETTE[c as usize]
            )
        })
        .collect();
    format!(
        "{} background with {}",
        PALETTE[bg as usize],
        clauses.join(" and ")
    )
}

/// Draws a grid and its caption from a seed.
pub fn sample_example(seed: u64) -> (ToyImage, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = rng.gen_range(0..COLORS as u8);
    let k = rng.gen_range(0..=MAX_HIGHLIGHTS);
    let mut img = ToyImage::uniform(bg);
    let mut picks = index::sample(&mut rng, CELLS, k).into_vec();
    picks.sort_unstable();
    for pos in picks {
        let mut c = rng.gen_range(0..COLORS as u8 - 1);
        if c >= bg {
            c += 1;
        }
        img.cells[pos] = c;
    }
    let caption = caption_for(&img);
    (img, caption)
}

fn color_of(word: &str) -> Result<u8> {
    PALETTE
        .iter()
        .position(|&p| p == word)
        .map(|p| p as u8)
        .ok_or_else(|| Error::Caption(format!("expected a colour, found {word:?}")))
}

/// Recovers the unique grid described by a caption.
pub fn parse_caption(caption: &str) -> Result<ToyImage> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let mut it = words.iter().copied().peekable();
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| Error::Caption(format!("caption ended, expected {what}")))
    };
    let first = next("a colour or 'uniform'")?;
    if first == "uniform" {
        let bg = color_of(next("a colour")?)?;
        if words.len() != 2 {
            return Err(Error::Caption("trailing words after uniform caption".into()));
        }
        return Ok(ToyImage::uniform(bg));
    }
    let bg = color_of(first)?;
    let expect = |got: &str, want: &str| {
        if got == want {
            Ok(())
        } else {
            Err(Error::Caption(format!("expected {want:?}, found {got:?}")))
        }
    };
    expect(next("'background'")?, "background")?;
    expect(next("'with'")?, "with")?;
    let mut img = ToyImage::uniform(bg);
    let mut last_pos: Option<usize> = None;
    let mut count = 0;
    loop {
        expect(next("'row'")?, "row")?;
        let r = digit(next("a row")?)?;
        expect(next("'column'")?, "column")?;
        let col = digit(next("a column")?)?;
        expect(next("'in'")?, "in")?;
        let c = color_of(next("a colour")?)?;
        let pos = r * SIDE + col;
        if c == bg {
            return Err(Error::Caption("highlight matches background".into()));
        }
        if last_pos.is_some_and(|p| p >= pos) {
            return Err(Error::Caption("clauses not in raster order".into()));
        }
        img.cells[pos] = c;
        last_pos = Some(pos);
        count += 1;
        match next("'and' or end") {
            Err(_) => break,
            Ok("and") if count < MAX_HIGHLIGHTS => continue,
            Ok(w) => return Err(Error::Caption(format!("unexpected {w:?}"))),
        }
    }
    Ok(img)
}

fn digit(w: &str) -> Result<usize> {
    DIGITS
        .iter()
        .position(|&d| d == w)
        .ok_or_else(|| Error::Caption(format!("expected a digit 0-3, found {w:?}")))
}

/// Colour index to image-token id; identity at this scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Codebook {
    pub vocab_size: usize,
}

impl Codebook {
    pub fn new(image_vocab_size: usize) -> Result<Self> {
        if image_vocab_size < COLORS {
            return Err(Error::Config(format!(
                "image vocabulary {image_vocab_size} smaller than the {COLORS}-colour palette"
            )));
        }
        Ok(Self {
            vocab_size: image_vocab_size,
        })
    }

    pub fn tokenize(&self, img: &ToyImage) -> Vec<Token> {
        img.cells.iter().map(|&c| Token::image(c as u32)).collect()
    }

    pub fn detokenize(&self, tokens: &[Token]) -> Result<ToyImage> {
        if tokens.len() != CELLS {
            return Err(Error::Token(format!(
                "{} image tokens, expected {CELLS}",
                tokens.len()
            )));
        }
        let mut cells = [0u8; CELLS];
        for (cell, t) in cells.iter_mut().zip(tokens) {
            if t.modality != Modality::Image || t.id as usize >= COLORS {
                return Err(Error::Token(format!("{t} is outside the codebook")));
            }
            *cell = t.id as u8;
        }
        Ok(ToyImage { cells })
    }
}

/// Row of the frozen feature table for a cell holding `color`.
pub fn feature_row(cell: usize, color: u8) -> usize {
    cell * COLORS + color as usize
}

/// Frozen understanding encoder: one fixed random vector per
/// (cell position, colour) pair.
pub fn encode_features(table: &Mat<f32>, img: &ToyImage) -> Mat<f32> {
    let mut out = Mat::zeros(CELLS, table.cols);
    for (i, &c) in img.cells.iter().enumerate() {
        out.row_mut(i).copy_from_slice(table.row(feature_row(i, c)));
    }
    out
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub task: Task,
    pub grid: Vec<u8>,
    pub caption: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Mmu,
    T2i,
}

/// Sample pair, validated against the grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: ToyImage,
    pub caption: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub mmu: Vec<Sample>,
    pub t2i: Vec<Sample>,
}

impl Dataset {
    /// `count` samples drawn from seeds `base..base+count`, each used for both
    /// tasks.
    pub fn generate(base: u64, count: usize) -> Self {
        let samples: Vec<Sample> = (0..count as u64)
            .map(|i| {
                let (image, caption) = sample_example(base.wrapping_add(i));
                Sample { image, caption }
            })
            .collect();
        Self {
            mmu: samples.clone(),
            t2i: samples,
        }
    }

    pub fn records(&self) -> Vec<Record> {
        let rec = |task, s: &Sample| Record {
            task,
            grid: s.image.cells.to_vec(),
            caption: s.caption.clone(),
        };
        let mut out: Vec<Record> = Vec::with_capacity(self.mmu.len() + self.t2i.len());
        // interleave so a file prefix still holds both tasks
        let n = self.mmu.len().max(self.t2i.len());
        for i in 0..n {
            if let Some(s) = self.mmu.get(i) {
                out.push(rec(Task::Mmu, s));
            }
            if let Some(s) = self.t2i.get(i) {
                out.push(rec(Task::T2i, s));
            }
        }
        out
    }

    pub fn from_records(records: impl IntoIterator<Item = Record>) -> Result<Self> {
        let mut ds = Dataset::default();
        for (i, r) in records.into_iter().enumerate() {
            let image = ToyImage::from_slice(&r.grid)
                .map_err(|e| Error::Dataset(format!("record {i}: {e}")))?;
            let parsed =
                parse_caption(&r.caption).map_err(|e| Error::Dataset(format!("record {i}: {e}")))?;
            if parsed != image {
                return Err(Error::Dataset(format!(
                    "record {i}: caption does not describe the grid"
                )));
            }
            let s = Sample {
                image,
                caption: r.caption,
            };
            match r.task {
                Task::Mmu => ds.mmu.push(s),
                Task::T2i => ds.t2i.push(s),
            }
        }
        Ok(ds)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in self.records() {
            let line = serde_json::to_string(&r).map_err(|e| Error::Dataset(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        Self::from_records(records)
    }
}
