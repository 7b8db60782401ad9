//! Breaks held-out accuracy of a checkpoint down by highlight count.
//!
//! Usage: `cargo run --release -p ommx-core --example diagnose CKPT [N] [SEED]`

use ommx_core::infer::{caption_image, draw_caption};
use ommx_core::toy::{parse_caption, toy_tokenizer, Dataset};
use ommx_core::{checkpoint, GenerationConfig};

fn main() -> ommx_core::Result<()> {
    let path = std::env::args().nth(1).expect("checkpoint path");
    let n: usize = std::env::args().nth(2).map_or(200, |s| s.parse().unwrap());
    let model = checkpoint::load(path.as_ref())?;
    let seed: u64 = std::env::args().nth(3).map_or(1 << 40, |s| s.parse().unwrap());
    let val = Dataset::generate(seed, n);
    let tok = toy_tokenizer();
    let cfg = GenerationConfig::default();
    let mut mmu = [(0usize, 0usize); 4];
    let mut t2i = [(0usize, 0usize); 4];
    let mut shown = 0;
    for s in &val.mmu {
        let k = s.image.cells.iter().filter(|&&c| c != s.image.background()).count();
        let (cap, _) = caption_image(&model, &tok, &s.image, &cfg)?;
        mmu[k].1 += 1;
        if cap.as_deref() == Some(s.caption.as_str()) {
            mmu[k].0 += 1;
        } else if shown < 12 {
            shown += 1;
            println!("want: {}\n got: {}", s.caption, cap.unwrap_or_default());
        }
        let (img, _) = draw_caption(&model, &tok, &s.caption, &cfg)?;
        t2i[k].1 += 1;
        if img == Some(parse_caption(&s.caption)?) {
            t2i[k].0 += 1;
        }
    }
    for k in 0..4 {
        println!("k={k}: mmu {}/{} t2i {}/{}", mmu[k].0, mmu[k].1, t2i[k].0, t2i[k].1);
    }
    Ok(())
}
