use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cytoforge::c3p::{PasteMode, PastePolicy};
use cytoforge::features::{self, ToyFeaturizer};
use cytoforge::mil::{C3pMode, SavedModel, TrainConfig};
use cytoforge::pipeline::{self, ops};
use cytoforge::poisson::{assemble_system, compose, solve_cg, PasteRegion, SolverParams};
use cytoforge::tiler::{SlideLabel, TilingParams};
use cytoforge::{knn, synthetic, RasterImage};

#[derive(Parser)]
#[command(name = "cytoforge", version, about = "Cytology slide tiling, cell pasting, k-NN and MIL tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect the cell deposit and cut a slide into grid tiles.
    Tile(TileArgs),
    /// Seamlessly clone one image into another.
    Poisson(PoissonArgs),
    /// Paste labeled cells onto slide tiles.
    Augment(AugmentArgs),
    /// Embed tiles with the built-in featurizer.
    Embed(EmbedArgs),
    /// Convert an `id,v1,...,vD` CSV to an embedding file.
    ImportEmbeddings(ImportArgs),
    /// k-NN classification with a k sweep.
    Knn(KnnArgs),
    /// Train the top-k attention MIL model.
    MilTrain(MilTrainArgs),
    /// Slide- and tile-level AUC of a trained model.
    MilEval(MilEvalArgs),
    /// Run a pipeline config over its seeds.
    Run(RunArgs),
    /// Write a synthetic slide corpus and cell bank.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    slide_id: String,
    #[arg(long, default_value = "unknown")]
    label: SlideLabel,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 320)]
    tile_px: u32,
    #[arg(long, default_value_t = 0.05)]
    min_tissue_frac: f64,
    #[arg(long, default_value_t = 8)]
    morph_radius: u32,
    #[arg(long, default_value_t = 10_000)]
    min_component_area: usize,
    #[arg(long, default_value_t = 0.5)]
    mpp: f64,
}

#[derive(Args)]
struct PoissonArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    x: u32,
    #[arg(long)]
    y: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    rel_tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
}

#[derive(Args)]
struct PolicyArgs {
    #[arg(long, default_value = "poisson")]
    mode: PasteMode,
    #[arg(long, default_value_t = 1.0)]
    p_pos: f64,
    #[arg(long, default_value_t = 0.5)]
    p_neg: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_hi: f64,
    #[arg(long, default_value_t = 2000)]
    canvases_per_class: usize,
}

impl PolicyArgs {
    fn policy(&self, seed: u64) -> PastePolicy {
        PastePolicy {
            mode: self.mode,
            p_pos: self.p_pos,
            p_neg: self.p_neg,
            lambda_range: [self.lambda_lo, self.lambda_hi],
            canvases_per_class: self.canvases_per_class,
            seed,
        }
    }
}

#[derive(Args)]
struct AugmentArgs {
    /// Directory of cell PNGs with a `labels.csv`.
    #[arg(long)]
    cells: PathBuf,
    /// Slide manifests (or directories of them) supplying positive canvases.
    #[arg(long, required = true, num_args = 1..)]
    canvases_pos: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    canvases_neg: Vec<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Slide manifest(s), a pasted dataset, or a directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    val_labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = knn::DEFAULT_K_GRID)]
    k_grid: Vec<usize>,
    /// Used only without `--val`.
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct MilTrainArgs {
    /// Slide manifest directory.
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Pool every instance instead of the top k.
    #[arg(long)]
    no_topk: bool,
    #[arg(long, default_value_t = 16)]
    slide_batch: usize,
    #[arg(long, default_value_t = 8)]
    tile_batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda_tile: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long = "c3p", default_value = "off")]
    c3p: C3pModeArg,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pre-embedded pasted tiles (offline C3P); labels from `<file>.labels.csv`.
    #[arg(long)]
    pasted: Option<PathBuf>,
    /// Cell bank directory (online C3P).
    #[arg(long)]
    cells: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 0)]
    featurizer_seed: u64,
    /// Labeled tiles scored after every epoch.
    #[arg(long)]
    val_tiles: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum C3pModeArg {
    Off,
    Offline,
    Online,
}

impl From<C3pModeArg> for C3pMode {
    fn from(m: C3pModeArg) -> Self {
        match m {
            C3pModeArg::Off => C3pMode::Off,
            C3pModeArg::Offline => C3pMode::Offline,
            C3pModeArg::Online => C3pMode::Online,
        }
    }
}

#[derive(Args)]
struct MilEvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Labeled tile embeddings; labels from `--tile-labels` or the sidecar.
    #[arg(long)]
    tiles: Option<PathBuf>,
    #[arg(long)]
    tile_labels: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    slides: usize,
    #[arg(long, default_value_t = 1600)]
    width: u32,
    #[arg(long, default_value_t = 1280)]
    height: u32,
    #[arg(long, default_value_t = 20)]
    cells_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Tile(a) => {
            let params = TilingParams {
                tile_px: a.tile_px,
                mpp: a.mpp,
                morph_radius: a.morph_radius,
                min_component_area: a.min_component_area,
                min_tissue_frac: a.min_tissue_frac,
            };
            let m = ops::tile(&a.input, &a.slide_id, a.label, &params, &a.out)?;
            println!("{}: {} tiles", m.slide_id, m.tiles.len());
        }
        Command::Poisson(a) => {
            let source = RasterImage::load(&a.source)?;
            let target = RasterImage::load(&a.target)?;
            let region = PasteRegion::rect(a.x, a.y, source.width(), source.height());
            let params = SolverParams { rel_tol: a.rel_tol, max_iter: a.max_iter };
            let system = assemble_system(&source, &target, &region)?;
            let solution = solve_cg(&system, &params, &system.target_guess())?;
            compose(&system, &solution, &target).save_png(&a.out)?;
            println!(
                "solved in {} iterations, relative residual {:.3e}",
                solution.max_iterations(),
                solution.max_rel_residual()
            );
        }
        Command::Augment(a) => {
            let policy = a.policy.policy(a.seed);
            let m = ops::augment(&a.cells, &a.canvases_pos, &a.canvases_neg, &policy, a.n, &a.out)?;
            let pasted = m.items.iter().filter(|i| i.cell_id.is_some()).count();
            println!("{} tiles written, {pasted} with a pasted cell", m.items.len());
        }
        Command::Embed(a) => {
            let featurizer = ToyFeaturizer::new(a.dim, a.seed)?;
            let outcome = ops::embed(&a.input, &featurizer, &a.out)?;
            println!("embedded {} tiles (dim {})", outcome.n, outcome.dim);
            if let Some(labels) = outcome.labels {
                println!("labels: {}", labels.display());
            }
        }
        Command::ImportEmbeddings(a) => {
            let m = features::import_csv(&a.csv)?;
            features::write_embeddings(&m, &a.out)?;
            println!("imported {} rows of dim {}", m.len(), m.dim());
        }
        Command::Knn(a) => {
            let train = ops::load_labeled(&a.train, a.train_labels.as_deref())?;
            let val = a.val.as_deref().map(|v| ops::load_labeled(v, a.val_labels.as_deref())).transpose()?;
            let report = ops::knn(&train, val.as_ref(), &a.k_grid, a.train_fraction, a.seed)?;
            write_json(&a.report, &report)?;
            println!("best k = {}, weighted F1 = {:.4}", report.best_k, report.weighted_f1);
        }
        Command::MilTrain(a) => {
            let config = TrainConfig {
                k: a.k,
                use_topk: !a.no_topk,
                slide_batch: a.slide_batch,
                tile_batch: a.tile_batch,
                lambda_tile: a.lambda_tile,
                lr: a.lr,
                epochs: a.epochs,
                seed: a.seed,
                hidden: a.hidden,
                c3p_mode: a.c3p.into(),
                ..TrainConfig::default()
            };
            let inputs = ops::MilTrainInputs {
                pasted: a.pasted.as_deref().map(|p| ops::load_labeled(p, None)).transpose()?,
                cells: a.cells.clone(),
                policy: a.policy.policy(a.seed),
                featurizer_seed: a.featurizer_seed,
                val_tiles: a.val_tiles.as_deref().map(|p| ops::load_labeled(p, None)).transpose()?,
            };
            let out = ops::mil_train(&a.bags, &a.embeddings, &config, &inputs)?;
            SavedModel::new(out.params, &config).save(&a.out)?;
            let log_path = a.log.unwrap_or_else(|| {
                let mut p = a.out.clone().into_os_string();
                p.push(".log.jsonl");
                p.into()
            });
            cytoforge::mil::write_log(&log_path, &out.log)?;
            if let Some(last) = out.log.last() {
                println!("epoch {}: loss {:.5}", last.epoch, last.loss);
            }
        }
        Command::MilEval(a) => {
            let model = SavedModel::load(&a.model)?;
            let tiles = a.tiles.as_deref().map(|t| ops::load_labeled(t, a.tile_labels.as_deref())).transpose()?;
            let report = ops::mil_eval(&model, &a.bags, &a.embeddings, tiles.as_ref())?;
            write_json(&a.report, &report)?;
            match report.tile_auc {
                Some(t) => println!("slide AUC {:.4}, tile AUC {t:.4}", report.slide_auc),
                None => println!("slide AUC {:.4}", report.slide_auc),
            }
        }
        Command::Run(a) => {
            let config = pipeline::load_config(&a.config)?;
            let base = a.config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let summary = pipeline::run_pipeline(&config, base)?;
            for s in &summary.seeds {
                match &s.error {
                    None => println!("seed {}: ok", s.seed),
                    Some(e) => println!("seed {}: failed: {e}", s.seed),
                }
            }
            for (k, v) in &summary.aggregate {
                println!("{k}: {:.4} ± {:.4} (n={})", v.mean, v.std, v.n);
            }
            if !summary.all_ok() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth(a) => {
            if a.slides == 0 {
                bail!("--slides must be at least 1");
            }
            let index = synthetic::write_corpus(&a.out, a.slides, a.width, a.height, a.cells_per_class, a.seed)?;
            println!("wrote {} slides and a cell bank under {}", index.slides.len(), a.out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
