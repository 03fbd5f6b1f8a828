use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{
    accumulate_slide_grad, accumulate_tile_grad, forward_bag, MilParams, TileBatch, DEFAULT_HIDDEN,
};
use super::queue::{QueuePair, DEFAULT_QUEUE_CAPACITY};
use crate::c3p::{apply_c3p, Canvas, CellBank, PastePolicy};
use crate::error::{Error, Result};
use crate::features::{Bag, LabeledTileSet, ToyFeaturizer};
use crate::metrics::auc;
use crate::raster::RasterImage;
use crate::util::{self, mix_seed};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum C3pMode {
    #[default]
    Off,
    Offline,
    Online,
}

impl C3pMode {
    pub fn as_str(self) -> &'static str {
        match self {
            C3pMode::Off => "off",
            C3pMode::Offline => "offline",
            C3pMode::Online => "online",
        }
    }
}

impl FromStr for C3pMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(C3pMode::Off),
            "offline" => Ok(C3pMode::Offline),
            "online" => Ok(C3pMode::Online),
            other => Err(Error::InvalidArgument(format!("unknown C3P mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    /// When false every instance of the bag is pooled.
    pub use_topk: bool,
    pub slide_batch: usize,
    pub tile_batch: usize,
    pub lambda_tile: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub queue_capacity: usize,
    pub c3p_mode: C3pMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 8,
            use_topk: true,
            slide_batch: 16,
            tile_batch: 8,
            lambda_tile: 0.1,
            lr: 1e-3,
            epochs: 50,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            c3p_mode: C3pMode::Off,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.slide_batch == 0 || self.tile_batch == 0 || self.hidden == 0 || self.queue_capacity == 0 {
            return Err(Error::Config("k, batch sizes, hidden and queue capacity must be at least 1".into()));
        }
        if !(self.lambda_tile >= 0.0 && self.lambda_tile.is_finite()) {
            return Err(Error::Config(format!("lambda_tile must be >= 0, got {}", self.lambda_tile)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn topk(&self) -> Option<usize> {
        self.use_topk.then_some(self.k)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Looks up tile images by id for online pasting.
pub trait CanvasSource: Sync {
    fn canvas(&self, tile_id: &str) -> Result<RasterImage>;
}

impl CanvasSource for HashMap<String, RasterImage> {
    fn canvas(&self, tile_id: &str) -> Result<RasterImage> {
        self.get(tile_id).cloned().ok_or_else(|| Error::MissingEmbedding(tile_id.to_string()))
    }
}

/// Tile ids are paths relative to `root`.
#[derive(Clone, Debug)]
pub struct TileDir {
    pub root: PathBuf,
}

impl CanvasSource for TileDir {
    fn canvas(&self, tile_id: &str) -> Result<RasterImage> {
        RasterImage::load(self.root.join(tile_id))
    }
}

#[derive(Clone, Copy)]
pub struct OnlineC3p<'a> {
    pub policy: &'a PastePolicy,
    pub bank: &'a CellBank,
    pub featurizer: &'a ToyFeaturizer,
    pub canvases: &'a dyn CanvasSource,
}

#[derive(Clone, Copy, Default)]
pub struct TrainData<'a> {
    pub bags: &'a [Bag],
    pub val_bags: Option<&'a [Bag]>,
    pub val_tiles: Option<&'a LabeledTileSet>,
    /// Pre-embedded pasted tiles for offline C3P.
    pub pasted_tiles: Option<&'a LabeledTileSet>,
    pub online: Option<OnlineC3p<'a>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub slide_auc_val: Option<f64>,
    pub tile_auc_val: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: MilParams,
    pub log: Vec<EpochLog>,
    pub queues: QueuePair,
}

fn binary(label: u32) -> u8 {
    u8::from(label != 0)
}

fn tile_rows(set: &LabeledTileSet) -> (Vec<f64>, Vec<u8>) {
    (set.embeddings.to_f64(), set.labels.iter().map(|&l| binary(l)).collect())
}

/// Draws the step's tile batch: labeled C3P pastes onto queued tiles (online)
/// or rows of a pre-embedded pasted set (offline).
fn draw_tiles(
    config: &TrainConfig,
    data: &TrainData<'_>,
    queues: &QueuePair,
    rng: &mut ChaCha8Rng,
    features: &mut Vec<f64>,
    labels: &mut Vec<u8>,
) -> Result<()> {
    features.clear();
    labels.clear();
    match config.c3p_mode {
        C3pMode::Off => {}
        C3pMode::Offline => {
            let set = data.pasted_tiles.ok_or_else(|| Error::Config("offline C3P needs a pasted tile set".into()))?;
            if set.embeddings.is_empty() {
                return Err(Error::Config("offline C3P tile set is empty".into()));
            }
            for _ in 0..config.tile_batch {
                let i = rng.random_range(0..set.embeddings.len());
                features.extend(set.embeddings.row(i).iter().map(|&v| v as f64));
                labels.push(binary(set.labels[i]));
            }
        }
        C3pMode::Online => {
            let online = data.online.ok_or_else(|| Error::Config("online C3P needs a policy, cell bank and featurizer".into()))?;
            for j in 0..config.tile_batch {
                let polarity = (j % 2) as u8;
                let slides = queues.nonempty_slides(polarity);
                if slides.is_empty() {
                    continue;
                }
                let slide = slides[rng.random_range(0..slides.len())];
                let list = &queues.side(polarity)[slide];
                let entry = &list[rng.random_range(0..list.len())];
                let canvas = Canvas {
                    id: entry.tile_id.clone(),
                    image: online.canvases.canvas(&entry.tile_id)?,
                    polarity,
                };
                let pasted = apply_c3p(&canvas, online.bank, online.policy, rng)?;
                features.extend(online.featurizer.embed_f64(&pasted.image));
                labels.push(pasted.label);
            }
        }
    }
    Ok(())
}

/// Mini-batch Adam training of the top-k attention model. Deterministic for
/// a given seed.
pub fn train(data: TrainData<'_>, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let bags = data.bags;
    let first = bags.first().ok_or_else(|| Error::InvalidArgument("training needs at least one bag".into()))?;
    let dim = first.dim;
    if let Some(b) = bags.iter().chain(data.val_bags.unwrap_or_default()).find(|b| b.dim != dim) {
        return Err(Error::DimensionMismatch(format!("bag {} has dim {} vs {dim}", b.slide_id, b.dim)));
    }
    match config.c3p_mode {
        C3pMode::Online => {
            let online = data.online.ok_or_else(|| Error::Config("online C3P needs a featurizer".into()))?;
            if online.featurizer.dim() != dim {
                return Err(Error::Config(format!(
                    "featurizer dim {} differs from bag dim {dim}",
                    online.featurizer.dim()
                )));
            }
            online.policy.validate()?;
        }
        C3pMode::Offline => {
            let set = data.pasted_tiles.ok_or_else(|| Error::Config("offline C3P needs a pasted tile set".into()))?;
            if set.embeddings.dim() != dim {
                return Err(Error::Config(format!("pasted tile dim {} differs from bag dim {dim}", set.embeddings.dim())));
            }
        }
        C3pMode::Off => {}
    }

    let mut params = MilParams::init(dim, config.hidden, config.seed)?;
    let mut adam = Adam::new(params.n_params(), config.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1));
    let mut tile_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 2));
    let mut queues = QueuePair::new(config.queue_capacity);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut tile_feats = Vec::new();
    let mut tile_labels = Vec::new();
    let k = config.topk();

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(config.slide_batch) {
            let live: Vec<&Bag> = batch.iter().map(|&i| &bags[i]).filter(|b| !b.is_empty()).collect();
            let mut grads = MilParams::zeros(dim, config.hidden);
            let mut step_loss = 0.0;
            for bag in &live {
                let fwd = forward_bag(&params, &bag.features, k)?;
                step_loss += accumulate_slide_grad(&params, &bag.features, &fwd, bag.label, 1.0 / live.len() as f64, &mut grads)
                    / live.len() as f64;
                queues.update(&bag.slide_id, bag.label, &fwd.instance_scores, &bag.instance_ids);
            }
            if config.lambda_tile > 0.0 {
                draw_tiles(config, &data, &queues, &mut tile_rng, &mut tile_feats, &mut tile_labels)?;
                let tiles = TileBatch { features: &tile_feats, labels: &tile_labels };
                step_loss += config.lambda_tile * accumulate_tile_grad(&params, tiles, config.lambda_tile, &mut grads)?;
            }
            if live.is_empty() && tile_labels.is_empty() {
                continue;
            }
            let mut theta = params.to_flat();
            adam.step(&mut theta, &grads.to_flat());
            params.set_flat(&theta);
            epoch_loss += step_loss;
            steps += 1;
        }
        let slide_auc_val = match data.val_bags {
            Some(v) => score_bags(&params, v, k).ok().and_then(|s| slide_auc(v, &s).ok()),
            None => None,
        };
        let tile_auc_val = data.val_tiles.and_then(|t| tile_auc(&params, t).ok());
        let entry = EpochLog {
            epoch,
            loss: if steps == 0 { 0.0 } else { epoch_loss / steps as f64 },
            slide_auc_val,
            tile_auc_val,
        };
        log::debug!("epoch {epoch}: loss {:.5}", entry.loss);
        log.push(entry);
    }
    Ok(TrainOutput { params, log, queues })
}

/// Slide scores through the top-k pipeline, in bag order.
pub fn score_bags(params: &MilParams, bags: &[Bag], k: Option<usize>) -> Result<Vec<f64>> {
    bags.par_iter()
        .map(|b| {
            if b.is_empty() {
                return Err(Error::InvalidArgument(format!("slide {} has no instances", b.slide_id)));
            }
            Ok(forward_bag(params, &b.features, k)?.score)
        })
        .collect()
}

fn slide_auc(bags: &[Bag], scores: &[f64]) -> Result<f64> {
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    auc(scores, &labels)
}

pub fn tile_auc(params: &MilParams, tiles: &LabeledTileSet) -> Result<f64> {
    let (features, labels) = tile_rows(tiles);
    let scores = super::model::instance_scores(params, &features)?;
    auc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slide_auc: f64,
    pub tile_auc: Option<f64>,
    pub n_slides: usize,
    pub n_tiles: usize,
    pub slide_scores: BTreeMap<String, f64>,
}

pub fn evaluate(params: &MilParams, bags: &[Bag], tiles: Option<&LabeledTileSet>, k: Option<usize>) -> Result<EvalReport> {
    let scores = score_bags(params, bags, k)?;
    let slide_auc = slide_auc(bags, &scores)?;
    let tile_auc = tiles.map(|t| tile_auc(params, t)).transpose()?;
    Ok(EvalReport {
        slide_auc,
        tile_auc,
        n_slides: bags.len(),
        n_tiles: tiles.map_or(0, |t| t.embeddings.len()),
        slide_scores: bags.iter().map(|b| b.slide_id.clone()).zip(scores).collect(),
    })
}

/// Trained parameters plus the settings needed to score with them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedModel {
    pub seed: u64,
    pub k: usize,
    pub use_topk: bool,
    pub params: MilParams,
}

impl SavedModel {
    pub fn new(params: MilParams, config: &TrainConfig) -> Self {
        Self { seed: config.seed, k: config.k, use_topk: config.use_topk, params }
    }

    pub fn topk(&self) -> Option<usize> {
        self.use_topk.then_some(self.k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        util::write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: Self = util::read_json(path.as_ref())?;
        model.params.validate()?;
        Ok(model)
    }
}

pub fn write_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for entry in log {
        text.push_str(&serde_json::to_string(entry).map_err(|e| Error::json(path, e))?);
        text.push('\n');
    }
    if let Some(parent) = path.parent() {
        util::ensure_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
