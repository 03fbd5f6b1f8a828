//! Declarative multi-seed experiment runs.
//!
//! A config is a JSON document:
//!
//! ```json
//! {
//!   "output_root": "runs/demo",
//!   "seeds": [0, 1],
//!   "stages": [
//!     {"stage": "embed", "input": "pasted", "out": "{run}/pasted.emb"},
//!     {"stage": "knn", "train": "{run}/pasted.emb"}
//!   ]
//! }
//! ```
//!
//! In stage paths `{run}` expands to `<output_root>/seed_<seed>` and `{seed}`
//! to the seed; relative paths resolve against the config file's directory.
//! The run seed overrides every stage-level seed.

pub mod ops;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::c3p::PastePolicy;
use crate::error::{Error, Result};
use crate::features::ToyFeaturizer;
use crate::knn::DEFAULT_K_GRID;
use crate::mil::{self, SavedModel, TrainConfig};
use crate::synthetic::CorpusIndex;
use crate::tiler::{SlideLabel, TilingParams};
use crate::util::{self, mean_std};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_root: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
pub enum Stage {
    Tile(TileStage),
    Augment(AugmentStage),
    Embed(EmbedStage),
    Knn(KnnStage),
    MilTrain(MilTrainStage),
    MilEval(MilEvalStage),
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Tile(_) => "tile",
            Stage::Augment(_) => "augment",
            Stage::Embed(_) => "embed",
            Stage::Knn(_) => "knn",
            Stage::MilTrain(_) => "mil-train",
            Stage::MilEval(_) => "mil-eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideInput {
    pub path: String,
    pub slide_id: String,
    pub label: SlideLabel,
}

fn run_path(sub: &str) -> String {
    format!("{{run}}/{sub}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileStage {
    pub slides: Vec<SlideInput>,
    /// A `corpus.json` index whose slides are appended to `slides`.
    pub corpus: Option<String>,
    pub out: String,
    pub tiling: TilingParams,
}

impl Default for TileStage {
    fn default() -> Self {
        Self { slides: Vec::new(), corpus: None, out: run_path("slides"), tiling: TilingParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentStage {
    pub cells: String,
    /// Slide manifests (files or directories); positive slides feed the
    /// positive pool and negative slides the negative pool.
    pub canvases: Vec<String>,
    pub policy: PastePolicy,
    pub n: usize,
    pub out: String,
}

impl Default for AugmentStage {
    fn default() -> Self {
        Self {
            cells: String::new(),
            canvases: vec![run_path("slides")],
            policy: PastePolicy::default(),
            n: 4000,
            out: run_path("pasted"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedStage {
    pub input: String,
    pub out: String,
    pub dim: usize,
    pub featurizer_seed: u64,
}

impl Default for EmbedStage {
    fn default() -> Self {
        Self { input: String::new(), out: run_path("features.emb"), dim: 64, featurizer_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnStage {
    pub train: String,
    pub train_labels: Option<String>,
    pub val: Option<String>,
    pub val_labels: Option<String>,
    pub k_grid: Vec<usize>,
    pub train_fraction: f64,
    pub report: String,
}

impl Default for KnnStage {
    fn default() -> Self {
        Self {
            train: String::new(),
            train_labels: None,
            val: None,
            val_labels: None,
            k_grid: DEFAULT_K_GRID.to_vec(),
            train_fraction: 0.75,
            report: run_path("knn.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilTrainStage {
    pub bags: String,
    pub embeddings: String,
    pub train: TrainConfig,
    /// Pre-embedded pasted tiles for offline C3P, labels from the sidecar.
    pub pasted: Option<String>,
    /// Cell bank for online C3P.
    pub cells: Option<String>,
    pub policy: PastePolicy,
    pub featurizer_seed: u64,
    pub val_tiles: Option<String>,
    pub out: String,
    pub log: String,
}

impl Default for MilTrainStage {
    fn default() -> Self {
        Self {
            bags: run_path("slides"),
            embeddings: run_path("features.emb"),
            train: TrainConfig::default(),
            pasted: None,
            cells: None,
            policy: PastePolicy::default(),
            featurizer_seed: 0,
            val_tiles: None,
            out: run_path("model.json"),
            log: run_path("train_log.jsonl"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilEvalStage {
    pub model: String,
    pub bags: String,
    pub embeddings: String,
    pub tiles: Option<String>,
    pub tile_labels: Option<String>,
    pub report: String,
}

impl Default for MilEvalStage {
    fn default() -> Self {
        Self {
            model: run_path("model.json"),
            bags: run_path("slides"),
            embeddings: run_path("features.emb"),
            tiles: None,
            tile_labels: None,
            report: run_path("eval.json"),
        }
    }
}

/// Strict parse: unknown keys and type mismatches are errors that name the
/// offending field and its line.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn config_to_string(config: &PipelineConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<SeedResult>,
    pub aggregate: BTreeMap<String, Aggregate>,
}

impl Summary {
    pub fn all_ok(&self) -> bool {
        self.seeds.iter().all(|s| s.error.is_none())
    }
}

struct RunContext<'a> {
    base: &'a Path,
    run_dir: PathBuf,
    seed: u64,
}

impl RunContext<'_> {
    fn path(&self, template: &str) -> PathBuf {
        let expanded = template
            .replace("{run}", &self.run_dir.to_string_lossy())
            .replace("{seed}", &self.seed.to_string());
        let p = PathBuf::from(expanded);
        if p.is_absolute() {
            p
        } else {
            self.base.join(p)
        }
    }

    fn required(&self, template: &str, field: &str) -> Result<PathBuf> {
        if template.is_empty() {
            return Err(Error::Config(format!("missing required field `{field}`")));
        }
        Ok(self.path(template))
    }

    fn opt(&self, template: &Option<String>) -> Option<PathBuf> {
        template.as_deref().map(|t| self.path(t))
    }
}

type Metrics = Vec<(&'static str, f64)>;

fn run_stage(stage: &Stage, ctx: &RunContext<'_>) -> Result<Metrics> {
    match stage {
        Stage::Tile(s) => {
            let out = ctx.path(&s.out);
            let mut slides: Vec<(PathBuf, String, SlideLabel)> =
                s.slides.iter().map(|i| (ctx.path(&i.path), i.slide_id.clone(), i.label)).collect();
            if let Some(corpus) = &s.corpus {
                let index_path = ctx.path(corpus);
                let index: CorpusIndex = util::read_json(&index_path)?;
                let root = index_path.parent().unwrap_or(Path::new("."));
                slides.extend(index.slides.into_iter().map(|c| (root.join(c.path), c.slide_id, c.label)));
            }
            let manifests = slides
                .par_iter()
                .map(|(path, id, label)| ops::tile(path, id, *label, &s.tiling, &out))
                .collect::<Result<Vec<_>>>()?;
            let tiles: usize = manifests.iter().map(|m| m.tiles.len()).sum();
            Ok(vec![("slides", manifests.len() as f64), ("tiles", tiles as f64)])
        }
        Stage::Augment(s) => {
            let mut policy = s.policy.clone();
            policy.seed = ctx.seed;
            let canvases: Vec<PathBuf> = s.canvases.iter().map(|c| ctx.path(c)).collect();
            let manifest = ops::augment(&ctx.required(&s.cells, "cells")?, &canvases, &canvases, &policy, s.n, &ctx.path(&s.out))?;
            let pasted = manifest.items.iter().filter(|i| i.cell_id.is_some()).count();
            Ok(vec![("tiles", manifest.items.len() as f64), ("pasted", pasted as f64)])
        }
        Stage::Embed(s) => {
            let featurizer = ToyFeaturizer::new(s.dim, s.featurizer_seed)?;
            let outcome = ops::embed(&ctx.required(&s.input, "input")?, &featurizer, &ctx.path(&s.out))?;
            Ok(vec![("n", outcome.n as f64)])
        }
        Stage::Knn(s) => {
            let train_path = ctx.required(&s.train, "train")?;
            let train = ops::load_labeled(&train_path, ctx.opt(&s.train_labels).as_deref())?;
            let val = match ctx.opt(&s.val) {
                Some(v) => Some(ops::load_labeled(&v, ctx.opt(&s.val_labels).as_deref())?),
                None => None,
            };
            let report = ops::knn(&train, val.as_ref(), &s.k_grid, s.train_fraction, ctx.seed)?;
            util::write_json(&ctx.path(&s.report), &report)?;
            Ok(vec![("weighted_f1", report.weighted_f1), ("best_k", report.best_k as f64)])
        }
        Stage::MilTrain(s) => {
            let mut config = s.train.clone();
            config.seed = ctx.seed;
            let mut policy = s.policy.clone();
            policy.seed = ctx.seed;
            let inputs = ops::MilTrainInputs {
                pasted: ctx.opt(&s.pasted).map(|p| ops::load_labeled(&p, None)).transpose()?,
                cells: ctx.opt(&s.cells),
                policy,
                featurizer_seed: s.featurizer_seed,
                val_tiles: ctx.opt(&s.val_tiles).map(|p| ops::load_labeled(&p, None)).transpose()?,
            };
            let out = ops::mil_train(&ctx.path(&s.bags), &ctx.path(&s.embeddings), &config, &inputs)?;
            SavedModel::new(out.params, &config).save(ctx.path(&s.out))?;
            mil::write_log(ctx.path(&s.log), &out.log)?;
            let last = out.log.last().map_or(f64::NAN, |l| l.loss);
            Ok(vec![("final_loss", last)])
        }
        Stage::MilEval(s) => {
            let model = SavedModel::load(ctx.path(&s.model))?;
            let tiles = match ctx.opt(&s.tiles) {
                Some(t) => Some(ops::load_labeled(&t, ctx.opt(&s.tile_labels).as_deref())?),
                None => None,
            };
            let report = ops::mil_eval(&model, &ctx.path(&s.bags), &ctx.path(&s.embeddings), tiles.as_ref())?;
            util::write_json(&ctx.path(&s.report), &report)?;
            let mut metrics = vec![("slide_auc", report.slide_auc)];
            if let Some(t) = report.tile_auc {
                metrics.push(("tile_auc", t));
            }
            Ok(metrics)
        }
    }
}

fn run_seed(config: &PipelineConfig, base: &Path, seed: u64) -> SeedResult {
    let ctx = RunContext { base, run_dir: config.output_root.join(format!("seed_{seed}")), seed };
    let mut metrics = BTreeMap::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, stage) in config.stages.iter().enumerate() {
        let count = seen.entry(stage.name()).or_insert(0);
        *count += 1;
        let prefix = if *count == 1 { stage.name().to_string() } else { format!("{}#{count}", stage.name()) };
        log::info!("seed {seed}: stage {i} ({})", stage.name());
        match run_stage(stage, &ctx) {
            Ok(values) => {
                for (k, v) in values {
                    metrics.insert(format!("{prefix}.{k}"), v);
                }
            }
            Err(e) => {
                log::error!("seed {seed}: stage {i} ({}) failed: {e}", stage.name());
                return SeedResult {
                    seed,
                    status: "failed".into(),
                    error: Some(format!("stage {i} ({}): {e}", stage.name())),
                    metrics,
                };
            }
        }
    }
    SeedResult { seed, status: "ok".into(), error: None, metrics }
}

/// Runs every seed (in parallel, each in its own directory) and writes
/// `<output_root>/summary.json`. `base` anchors relative paths.
pub fn run_pipeline(config: &PipelineConfig, base: &Path) -> Result<Summary> {
    let base = &std::path::absolute(base).map_err(|e| Error::io(base, e))?;
    let root_config = PipelineConfig { output_root: base.join(&config.output_root), ..config.clone() };
    let seeds: Vec<SeedResult> = root_config.seeds.par_iter().map(|&s| run_seed(&root_config, base, s)).collect();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in seeds.iter().filter(|s| s.error.is_none()) {
        for (k, v) in &s.metrics {
            values.entry(k.clone()).or_default().push(*v);
        }
    }
    let aggregate = values
        .into_iter()
        .map(|(k, v)| {
            let (mean, std) = mean_std(&v);
            (k, Aggregate { mean, std, n: v.len() })
        })
        .collect();
    let summary = Summary { seeds, aggregate };
    util::write_json(&root_config.output_root.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_knn_config_gets_defaults() {
        let c = parse_config(r#"{"output_root": "out", "stages": [{"stage": "knn", "train": "a.emb"}]}"#).unwrap();
        assert_eq!(c.seeds, vec![0]);
        let Stage::Knn(k) = &c.stages[0] else { panic!("expected knn stage") };
        assert_eq!(k.k_grid, DEFAULT_K_GRID.to_vec());
        assert_eq!(k.train_fraction, 0.75);
        assert_eq!(k.report, "{run}/knn.json");
    }

    #[test]
    fn typo_names_the_unknown_key() {
        let text = r#"{
  "output_root": "out",
  "stages": [{"stage": "mil-train", "train": {"lamda_tile": 0.1}}]
}"#;
        let err = parse_config(text).unwrap_err().to_string();
        assert!(err.contains("lamda_tile"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        assert!(parse_config(r#"{"output_root": "o", "stages": [{"stage": "bogus"}]}"#).is_err());
        assert!(parse_config(r#"{"output_root": "o", "seeds": ["x"]}"#).is_err());
        assert!(parse_config(r#"{"stages": []}"#).unwrap_err().to_string().contains("output_root"));
    }

    #[test]
    fn defaults_match_module_defaults() {
        let c = parse_config(r#"{"output_root": "o", "stages": [{"stage": "mil-train"}, {"stage": "augment"}]}"#).unwrap();
        let Stage::MilTrain(m) = &c.stages[0] else { panic!() };
        assert_eq!(m.train.k, 8);
        assert_eq!(m.train.slide_batch, 16);
        assert_eq!(m.train.tile_batch, 8);
        assert_eq!(m.train.queue_capacity, 10);
        let Stage::Augment(a) = &c.stages[1] else { panic!() };
        assert_eq!((a.policy.p_neg, a.policy.p_pos), (0.5, 1.0));
        assert_eq!(a.policy.canvases_per_class, 2000);
    }

    #[test]
    fn round_trip_is_identity() {
        let text = r#"{"output_root": "o", "seeds": [3, 4], "stages": [
            {"stage": "tile", "slides": [{"path": "a.png", "slide_id": "a", "label": "positive"}]},
            {"stage": "augment", "cells": "cells", "n": 10, "policy": {"mode": "blend", "lambda_range": [0.2, 0.4]}},
            {"stage": "embed", "input": "x"},
            {"stage": "knn", "train": "a.emb", "k_grid": [1, 3]},
            {"stage": "mil-train", "train": {"lambda_tile": 0.5, "c3p_mode": "offline"}, "pasted": "p.emb"},
            {"stage": "mil-eval", "tiles": "t.emb"}
        ]}"#;
        let c = parse_config(text).unwrap();
        let again = parse_config(&config_to_string(&c)).unwrap();
        assert_eq!(c, again);
        assert_eq!(config_to_string(&c), config_to_string(&again));
    }

    #[test]
    fn empty_stage_list_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let c = parse_config(r#"{"output_root": "out", "stages": [], "seeds": [1, 2]}"#).unwrap();
        let s = run_pipeline(&c, dir.path()).unwrap();
        assert!(s.all_ok());
        assert!(s.aggregate.is_empty());
        assert!(dir.path().join("out/summary.json").exists());
    }

    #[test]
    fn missing_file_fails_the_seed() {
        let dir = tempfile::tempdir().unwrap();
        let c = parse_config(r#"{"output_root": "out", "stages": [{"stage": "knn", "train": "nope.emb"}]}"#).unwrap();
        let s = run_pipeline(&c, dir.path()).unwrap();
        assert!(!s.all_ok());
        assert_eq!(s.seeds[0].status, "failed");
        assert!(s.seeds[0].error.as_ref().unwrap().contains("nope.emb"));
    }
}
