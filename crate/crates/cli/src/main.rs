use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lemma::data::{self, Dataset, Split, SYNTH_PALETTE};
use lemma::loss::{LossConfig, LossKind};
use lemma::model::{argmax_channels, BlockCounts, LemmaModel};
use lemma::profile::profile;
use lemma::pyramid::{crop, decompose, pad_to_multiple, reconstruct};
use lemma::train::{ablate, evaluate, train, write_ablation_csv, TrainConfig};
use lemma::{Checkpoint, Error};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "LEMMA_THREADS";

#[derive(Parser)]
#[command(name = "lemma", version, about = "Laplacian-pyramid segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the pyramid levels and reconstruction of an image.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// Generate a synthetic marine-scene dataset with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        nc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Train a model on a manifest.
    Train {
        #[command(flatten)]
        opts: TrainArgs,
        /// Directory for best.ckpt, last.ckpt and log.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Report per-class IoU, mIoU and pixel accuracy as JSON.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Segment one image into a class-id PNG and a colorized PNG.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the color palette from this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Time forward passes and report parameter and FLOP counts.
    Profile {
        #[arg(long, value_parser = parse_blocks, default_value = "7,7,1")]
        config: BlockCounts,
        #[arg(long, default_value_t = 5)]
        nc: usize,
        /// Profile a trained checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_size, default_value = "384x512")]
        size: (usize, usize),
        #[arg(long, default_value_t = 50)]
        repeats: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Train and evaluate every configuration listed in a grid file.
    Ablate {
        #[command(flatten)]
        opts: TrainArgs,
        /// One "L,M,H" triple per line; '#' starts a comment.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resolution at which GFLOPs are counted.
        #[arg(long, value_parser = parse_size, default_value = "384x512")]
        flops_size: (usize, usize),
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_parser = parse_blocks, default_value = "7,7,1")]
    config: BlockCounts,
    /// Class count; defaults to the manifest's.
    #[arg(long)]
    nc: Option<usize>,
    #[arg(long, default_value = "focal")]
    loss: LossKind,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long)]
    hflip: bool,
}

impl TrainArgs {
    fn config(&self, data: &Dataset) -> TrainConfig {
        let nc = self.nc.unwrap_or(data.num_classes());
        let mut c = TrainConfig::new(self.config.config(nc), LossConfig::new(self.loss));
        c.lr = self.lr;
        c.epochs = self.epochs;
        c.batch_size = self.batch;
        c.seed = self.seed;
        c.eval_every = self.eval_every;
        c.hflip = self.hflip;
        c
    }
}

fn parse_blocks(s: &str) -> Result<BlockCounts, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    match (h.trim().parse(), w.trim().parse()) {
        (Ok(h), Ok(w)) if h > 0 && w > 0 && h % 4 == 0 && w % 4 == 0 => Ok((h, w)),
        (Ok(_), Ok(_)) => Err(format!("both sides must be positive multiples of 4, got {s:?}")),
        _ => Err(format!("expected HxW with integer sides, got {s:?}")),
    }
}

/// A failure reported as `error: <kind>: <message>` on one line.
struct Failure {
    kind: String,
    message: String,
    code: u8,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { kind: "usage".into(), message: message.into(), code: 2 }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: e.kind().into(), message: e.to_string(), code: 1 }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure { kind: "format".into(), message: e.to_string(), code: 1 }
    }
}

fn require_file(p: &Path) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!("no such file: {}", p.display())))
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    Ok(serde_json::to_string(v)?)
}

fn load_model(path: &Path) -> Result<LemmaModel, Failure> {
    require_file(path)?;
    Ok(Checkpoint::load(path)?.model)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Decompose { input, out, depth } => {
            require_file(&input)?;
            let image = data::load_image(&input)?;
            let levels = decompose(&image, depth)?;
            let rec = reconstruct(&levels)?;
            fs::create_dir_all(&out)?;
            for (i, band) in levels.bands.iter().enumerate() {
                data::save_image(out.join(format!("l{}.png", i + 1)), &band.map(|v| v + 0.5))?;
            }
            data::save_image(out.join(format!("l{depth}.png")), &levels.residual)?;
            data::save_image(out.join("reconstruction.png"), &rec)?;
            println!("max_reconstruction_error {:e}", rec.max_abs_diff(&image)?);
        }
        Command::Synth { out, count, size, nc, seed, val_fraction } => {
            let m = data::write_synthetic_dataset(&out, count, size, nc, seed, val_fraction)?;
            println!("{}", out.join("manifest.json").display());
            eprintln!("wrote {} scenes", m.samples.len());
        }
        Command::Train { opts, out, resume, max_steps } => {
            require_file(&opts.manifest)?;
            let data = Dataset::load(&opts.manifest)?;
            let mut cfg = opts.config(&data);
            cfg.max_steps = max_steps;
            fs::create_dir_all(&out)?;
            cfg.log_path = Some(out.join("log.jsonl"));
            cfg.best_checkpoint = Some(out.join("best.ckpt"));
            cfg.last_checkpoint = Some(out.join("last.ckpt"));
            let resume = match resume {
                Some(p) => {
                    require_file(&p)?;
                    Some(Checkpoint::load(&p)?)
                }
                None => None,
            };
            let outcome = train(&data, &cfg, resume)?;
            for r in &outcome.log {
                eprintln!("{}", to_json(r)?);
            }
            println!(
                "{}",
                serde_json::json!({
                    "step": outcome.step,
                    "interrupted": outcome.interrupted,
                    "best_val_miou": outcome.best_val_miou,
                    "params": outcome.model.count_params(),
                })
            );
        }
        Command::Eval { manifest, checkpoint, split, batch } => {
            require_file(&manifest)?;
            let model = load_model(&checkpoint)?;
            let data = Dataset::load(&manifest)?;
            println!("{}", to_json(&evaluate(&model, &data, split, batch)?)?);
        }
        Command::Segment { checkpoint, input, out, manifest } => {
            require_file(&input)?;
            let model = load_model(&checkpoint)?;
            let palette = match manifest {
                Some(p) => {
                    require_file(&p)?;
                    data::DatasetManifest::load(&p)?.palette
                }
                None => default_palette(model.config.nc),
            };
            let image = data::load_image(&input)?;
            let (padded, rec) = pad_to_multiple(&image, 4)?;
            let scores = crop(&model.scores(&padded)?, &rec)?;
            let mask = argmax_channels(&scores)?;
            fs::create_dir_all(&out)?;
            data::save_mask(out.join("mask.png"), &mask)?;
            data::save_palette_mask(out.join("mask_color.png"), &mask, &palette)?;
            println!("{}", out.join("mask.png").display());
        }
        Command::Profile { config, nc, checkpoint, size, repeats, format } => {
            let model = match checkpoint {
                Some(p) => load_model(&p)?,
                None => LemmaModel::build(config.config(nc), 0)?,
            };
            let report = profile(&model, size.0, size.1, repeats)?;
            match format {
                Format::Json => println!("{}", to_json(&report)?),
                Format::Table => print!("{}", report.table()),
            }
        }
        Command::Ablate { opts, grid, out, flops_size } => {
            require_file(&opts.manifest)?;
            require_file(&grid)?;
            let grid = parse_grid(&fs::read_to_string(&grid)?)?;
            let data = Dataset::load(&opts.manifest)?;
            let rows = ablate(&data, &grid, &opts.config(&data), flops_size)?;
            write_ablation_csv(&out, &rows)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<BlockCounts>, Failure> {
    let grid = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<BlockCounts>().map_err(|e| Failure::usage(format!("grid file: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    if grid.is_empty() {
        return Err(Failure::usage("grid file lists no configurations"));
    }
    Ok(grid)
}

fn default_palette(nc: usize) -> Vec<[u8; 3]> {
    (0..nc)
        .map(|i| match SYNTH_PALETTE.get(i) {
            Some(c) => *c,
            None => {
                let v = (i * 67 % 256) as u8;
                [v, v.wrapping_mul(3), 255 - v]
            }
        })
        .collect()
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure { kind: "config".into(), message: e.to_string(), code: 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.kind, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
