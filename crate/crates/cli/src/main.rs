use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ommx_core::bench::{decode_bench, write_csv, BenchOptions};
use ommx_core::checkpoint;
use ommx_core::infer::{caption_image, draw_caption, evaluate};
use ommx_core::toy::{toy_tokenizer, Dataset, ToyImage};
use ommx_core::train::{
    load_stage1_branches, merge_branches, prepare_examples, run_stage, RunOptions, Stage,
};
use ommx_core::{Model, RunConfig};

#[derive(Parser)]
#[command(name = "ommx", version, about = "Toy unified multimodal SSM: data, training, generation, evaluation, benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides `train.strict_determinism`.
    #[arg(long, value_parser = clap::value_parser!(bool))]
    strict_determinism: Option<bool>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(b) = self.strict_determinism {
            cfg.train.strict_determinism = b;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write train/validation JSONL files and the tokenizer vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        /// Training file; defaults to `<out>/train.jsonl`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Caption a grid or draw a caption with a trained checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        caption: Option<String>,
        /// 16 cells as colour letters (RGBYCMWK) or digits 0-7, row-major.
        #[arg(long)]
        image: Option<String>,
    },
    /// Exact-match accuracy on a validation file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validation file; defaults to `<out>/val.jsonl`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-token decode throughput of the SSM against the attention baseline.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: ommx_core::Error| e.to_string())
}

fn parse_grid(s: &str) -> Result<ToyImage> {
    const LETTERS: &str = "RGBYCMWK";
    let cells: Vec<u8> = s
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| {
            if let Some(d) = c.to_digit(10) {
                Ok(d as u8)
            } else {
                LETTERS
                    .find(c.to_ascii_uppercase())
                    .map(|i| i as u8)
                    .with_context(|| format!("unknown colour letter {c:?}"))
            }
        })
        .collect::<Result<_>>()?;
    Ok(ToyImage::from_slice(&cells)?)
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let train = Dataset::generate(cfg.train.seed, cfg.train.train_examples);
    // validation seeds live far above any training range
    let val = Dataset::generate(cfg.train.seed.wrapping_add(1 << 40), cfg.train.val_examples);
    train.save_jsonl(&out.join("train.jsonl"))?;
    val.save_jsonl(&out.join("val.jsonl"))?;
    toy_tokenizer().save(&out.join("tokenizer.txt"))?;
    log::info!(
        "wrote {} training and {} validation pairs to {}",
        train.mmu.len(),
        val.mmu.len(),
        out.display()
    );
    Ok(())
}

fn train(common: &Common, stage: Stage, data: Option<PathBuf>) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?.to_path_buf();
    let data_path = data.unwrap_or_else(|| out.join("train.jsonl"));
    let mut model = match stage {
        Stage::Stage1Mmu | Stage::Stage1T2i => Model::init(cfg.effective_model(), cfg.train.seed)?,
        Stage::Stage2 => {
            let (mmu, t2i) = load_stage1_branches(&out)?;
            merge_branches(&mmu, &t2i)?
        }
    };
    if model.config != cfg.effective_model() {
        bail!("stage-1 checkpoints were trained with a different model configuration");
    }
    let dataset = Dataset::load_jsonl(&data_path)
        .with_context(|| format!("loading {}", data_path.display()))?;
    let examples = prepare_examples(&model, &dataset, cfg.train.prompt_loss)?;
    let opts = RunOptions {
        seed: cfg.train.seed,
        strict_determinism: cfg.train.strict_determinism,
        checkpoint_every: cfg.train.checkpoint_every,
        checkpoint_dir: Some(out.clone()),
        ..RunOptions::default()
    };
    let metrics_path = out.join(format!("metrics_{}.jsonl", stage.name()));
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut write_err = None;
    run_stage(&mut model, stage, cfg.train.stage(stage), &examples, &opts, |m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
        if m.step % 100 == 0 {
            log::info!("stage {} step {} lr {:.3e} mmu {:?} t2i {:?}", m.stage, m.step, m.lr, m.mmu_loss, m.t2i_loss);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics");
    }
    metrics.flush()?;
    let ckpt = out.join(stage.checkpoint_file());
    checkpoint::save(&model, &ckpt)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn generate(common: &Common, ckpt: &Path, caption: Option<String>, image: Option<String>) -> Result<()> {
    let cfg = common.run_config()?;
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let tok = toy_tokenizer();
    if let Some(c) = caption {
        let (img, g) = draw_caption(&model, &tok, &c, &cfg.gen)?;
        match img {
            Some(img) => print!("{}", img.render()),
            None => bail!("generated tokens are not a grid: {:?}", g.tokens),
        }
    } else if let Some(s) = image {
        let img = parse_grid(&s)?;
        let (text, g) = caption_image(&model, &tok, &img, &cfg.gen)?;
        match text {
            Some(t) => println!("{t}"),
            None => bail!("generated tokens are not text: {:?}", g.tokens),
        }
    }
    Ok(())
}

fn eval(common: &Common, ckpt: &Path, data: Option<PathBuf>) -> Result<()> {
    let cfg = common.run_config()?;
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let path = data.unwrap_or_else(|| common.out.join("val.jsonl"));
    let val = Dataset::load_jsonl(&path).with_context(|| format!("loading {}", path.display()))?;
    let r = evaluate(&model, &val.mmu, &val.t2i, &cfg.gen)?;
    println!(
        "{}",
        serde_json::json!({
            "mmu_exact_match": r.mmu_accuracy(),
            "t2i_exact_match": r.t2i_accuracy(),
            "mmu_total": r.mmu_total,
            "t2i_total": r.t2i_total,
            "out_of_modality": r.out_of_modality,
        })
    );
    Ok(())
}

fn bench(common: &Common, lens: Vec<usize>, reps: usize) -> Result<()> {
    let cfg = common.run_config()?;
    let out = common.out_dir()?;
    let model = Model::init(cfg.effective_model(), cfg.train.seed)?;
    let rows = decode_bench(
        &model,
        &BenchOptions {
            lens,
            reps,
            seed: cfg.train.seed,
            ..BenchOptions::default()
        },
    )?;
    let path = out.join("bench.csv");
    write_csv(&rows, File::create(&path)?)?;
    write_csv(&rows, std::io::stdout())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common, stage, data } => train(&common, stage, data),
        Command::Generate {
            common,
            checkpoint,
            caption,
            image,
        } => generate(&common, &checkpoint, caption, image),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => eval(&common, &checkpoint, data),
        Command::Bench { common, lens, reps } => bench(&common, lens, reps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ommx_core::toy::PALETTE;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("RRRR GGGG BBBB KKKK").unwrap();
        assert_eq!(g.cells[15], 7);
        assert_eq!(parse_grid("0,1,2,3,4,5,6,7,0,1,2,3,4,5,6,7").unwrap().cells[5], 5);
        assert!(parse_grid("RRR").is_err());
        assert!(parse_grid("ZZZZZZZZZZZZZZZZ").is_err());
        assert_eq!(PALETTE[7], "black");
    }
}
