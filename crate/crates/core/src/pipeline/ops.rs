//! File-level operations shared by the CLI subcommands and pipeline stages.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::c3p::{self, Canvas, CellBank, PastePolicy, PastedManifest};
use crate::error::{Error, Result};
use crate::features::{self, assemble_bags, Bag, EmbeddingMatrix, LabeledTileSet, ToyFeaturizer};
use crate::knn::{self, KnnIndex, SweepResult};
use crate::mil::{self, EvalReport, OnlineC3p, SavedModel, TileDir, TrainConfig, TrainData, TrainOutput};
use crate::raster::RasterImage;
use crate::tiler::{self, SlideLabel, SlideManifest, TilingParams};

pub fn tile(input: &Path, slide_id: &str, label: SlideLabel, params: &TilingParams, out_dir: &Path) -> Result<SlideManifest> {
    let image = RasterImage::load(input)?;
    tiler::tile_slide(&image, slide_id, label, params, out_dir)
}

/// Slide manifests from a single manifest file or every manifest in a directory.
pub fn load_manifests(path: &Path) -> Result<Vec<(PathBuf, SlideManifest)>> {
    if path.is_dir() {
        SlideManifest::load_dir(path)
    } else {
        Ok(vec![(path.to_path_buf(), SlideManifest::load(path)?)])
    }
}

fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// Canvas pools (positive, negative) from labeled slide manifests; slides
/// with unknown labels are ignored.
pub fn canvas_pools(manifests: &[PathBuf]) -> Result<(Vec<Canvas>, Vec<Canvas>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for path in manifests {
        for (p, m) in load_manifests(path)? {
            match m.label.as_binary() {
                Some(1) => pos.extend(Canvas::from_manifest(&p, 1)?),
                Some(_) => neg.extend(Canvas::from_manifest(&p, 0)?),
                None => log::warn!("skipping unlabeled slide {} as canvas source", m.slide_id),
            }
        }
    }
    Ok((pos, neg))
}

pub fn augment(
    cells_dir: &Path,
    pos_manifests: &[PathBuf],
    neg_manifests: &[PathBuf],
    policy: &PastePolicy,
    n_outputs: usize,
    out_dir: &Path,
) -> Result<PastedManifest> {
    let bank = CellBank::load_dir(cells_dir)?;
    let (pos, _) = canvas_pools(pos_manifests)?;
    let (_, neg) = canvas_pools(neg_manifests)?;
    c3p::generate_pasted_dataset(&bank, &pos, &neg, policy, n_outputs, out_dir)
}

/// What an embedding input path turned out to be.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedSource {
    SlideManifests,
    Pasted,
    Images,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedOutcome {
    pub source: EmbedSource,
    pub n: usize,
    pub dim: usize,
    pub labels: Option<PathBuf>,
}

fn embed_images(root: &Path, ids: Vec<String>, featurizer: &ToyFeaturizer) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f32>> = ids
        .par_iter()
        .map(|id| Ok(featurizer.embed(&RasterImage::load(root.join(id))?)))
        .collect::<Result<_>>()?;
    let data = rows.concat();
    EmbeddingMatrix::new(ids, featurizer.dim(), data)
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    Ok(ids)
}

/// Embeds slide tiles, a pasted dataset or a directory of PNGs with the toy
/// featurizer. Pasted datasets also get an `id,label` sidecar.
pub fn embed(input: &Path, featurizer: &ToyFeaturizer, out: &Path) -> Result<EmbedOutcome> {
    let pasted = if input.is_dir() { c3p::pasted_manifest_path(input) } else { input.to_path_buf() };
    let is_pasted = pasted.is_file() && PastedManifest::load(&pasted).is_ok();
    let (source, matrix, labels) = if is_pasted {
        let manifest = PastedManifest::load(&pasted)?;
        let ids: Vec<String> = manifest.items.iter().map(|i| i.path.clone()).collect();
        let matrix = embed_images(&manifest_root(&pasted), ids, featurizer)?;
        let labels: Vec<u32> = manifest.items.iter().map(|i| i.label as u32).collect();
        (EmbedSource::Pasted, matrix, Some(labels))
    } else if input.is_file() || input.is_dir() && !SlideManifest::load_dir(input)?.is_empty() {
        let manifests = load_manifests(input)?;
        let root = manifest_root(&manifests[0].0);
        if manifests.iter().any(|(p, _)| manifest_root(p) != root) {
            return Err(Error::InvalidArgument("slide manifests must share one directory".into()));
        }
        let ids = manifests.iter().flat_map(|(_, m)| m.tiles.iter().map(|t| t.path.clone())).collect();
        (EmbedSource::SlideManifests, embed_images(&root, ids, featurizer)?, None)
    } else if input.is_dir() {
        (EmbedSource::Images, embed_images(input, png_ids(input)?, featurizer)?, None)
    } else {
        return Err(Error::InvalidArgument(format!("{} does not exist", input.display())));
    };
    features::write_embeddings(&matrix, out)?;
    let labels_path = match labels {
        Some(labels) => {
            let path = features::labels_sidecar(out);
            features::write_labels(&path, matrix.ids().iter().map(String::as_str).zip(labels))?;
            Some(path)
        }
        None => None,
    };
    Ok(EmbedOutcome { source, n: matrix.len(), dim: matrix.dim(), labels: labels_path })
}

/// Labels from an explicit CSV or the `<embeddings>.labels.csv` sidecar.
pub fn load_labeled(embeddings: &Path, labels: Option<&Path>) -> Result<LabeledTileSet> {
    let default = features::labels_sidecar(embeddings);
    LabeledTileSet::load(embeddings, labels.unwrap_or(&default))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub best_k: usize,
    pub per_class_f1: std::collections::BTreeMap<u32, f64>,
    pub weighted_f1: f64,
    pub support: std::collections::BTreeMap<u32, usize>,
    pub k_sweep: Vec<(usize, f64)>,
    pub n_train: usize,
    pub n_val: usize,
}

impl KnnReport {
    fn new(sweep: SweepResult, n_train: usize, n_val: usize) -> Self {
        Self {
            best_k: sweep.best_k,
            per_class_f1: sweep.report.per_class_f1,
            weighted_f1: sweep.report.weighted_f1,
            support: sweep.report.support,
            k_sweep: sweep.grid,
            n_train,
            n_val,
        }
    }
}

/// k sweep on an explicit validation set, or on a seeded held-out split of
/// the training set when none is given.
pub fn knn(train: &LabeledTileSet, val: Option<&LabeledTileSet>, k_grid: &[usize], train_fraction: f64, seed: u64) -> Result<KnnReport> {
    match val {
        Some(val) => Ok(KnnReport::new(knn::sweep_sets(train, val, k_grid)?, train.labels.len(), val.labels.len())),
        None => {
            let (a, b) = knn::split_indices(train.labels.len(), train_fraction, seed);
            let (fit, held) = (train.subset(&a)?, train.subset(&b)?);
            let index = KnnIndex::from_set(&fit)?;
            let rows: Vec<Vec<f64>> = (0..held.embeddings.len()).map(|i| held.embeddings.row_f64(i)).collect();
            let sweep = knn::sweep_k(&index, &rows, &held.labels, k_grid)?;
            Ok(KnnReport::new(sweep, a.len(), b.len()))
        }
    }
}

pub fn load_bags(manifests: &Path, embeddings: &Path) -> Result<Vec<Bag>> {
    let manifests: Vec<SlideManifest> = load_manifests(manifests)?.into_iter().map(|(_, m)| m).collect();
    assemble_bags(&manifests, &features::read_embeddings(embeddings)?)
}

/// Extra inputs for C3P during MIL training.
#[derive(Clone, Debug, Default)]
pub struct MilTrainInputs {
    /// Pre-embedded pasted tiles (offline mode).
    pub pasted: Option<LabeledTileSet>,
    /// Cell bank directory and policy (online mode).
    pub cells: Option<PathBuf>,
    pub policy: PastePolicy,
    pub featurizer_seed: u64,
    pub val_tiles: Option<LabeledTileSet>,
}

pub fn mil_train(bag_dir: &Path, embeddings: &Path, config: &TrainConfig, inputs: &MilTrainInputs) -> Result<TrainOutput> {
    let bags = load_bags(bag_dir, embeddings)?;
    let dim = bags.first().map_or(0, |b| b.dim);
    let bank;
    let featurizer;
    let canvases;
    let online = match config.c3p_mode {
        mil::C3pMode::Online => {
            let cells = inputs
                .cells
                .as_ref()
                .ok_or_else(|| Error::Config("online C3P needs a cell bank directory".into()))?;
            bank = CellBank::load_dir(cells)?;
            featurizer = ToyFeaturizer::new(dim, inputs.featurizer_seed)?;
            let root = if bag_dir.is_dir() { bag_dir.to_path_buf() } else { manifest_root(bag_dir) };
            canvases = TileDir { root };
            Some(OnlineC3p { policy: &inputs.policy, bank: &bank, featurizer: &featurizer, canvases: &canvases })
        }
        _ => None,
    };
    let data = TrainData {
        bags: &bags,
        val_bags: None,
        val_tiles: inputs.val_tiles.as_ref(),
        pasted_tiles: inputs.pasted.as_ref(),
        online,
    };
    mil::train(data, config)
}

pub fn mil_eval(model: &SavedModel, bag_dir: &Path, embeddings: &Path, tiles: Option<&LabeledTileSet>) -> Result<EvalReport> {
    let bags = load_bags(bag_dir, embeddings)?;
    mil::evaluate(&model.params, &bags, tiles, model.topk())
}
