//! Slide tiling: cell-deposit detection and a non-overlapping tile grid.
//!
//! Deposit detection thresholds the HSV saturation channel with Otsu's method,
//! cleans the result with a disk closing then opening, and drops small
//! connected components. Tiles are cut on a grid anchored at the image origin;
//! only full tiles whose deposit coverage reaches `min_tissue_frac` are kept.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology;
use crate::raster::{BinaryMask, RasterImage};
use crate::util;

pub type TissueMask = BinaryMask;

pub const DEFAULT_TILE_PX: u32 = 320;
pub const DEFAULT_MPP: f64 = 0.50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepositParams {
    pub morph_radius: u32,
    pub min_component_area: usize,
    pub min_tissue_frac: f64,
}

impl Default for DepositParams {
    fn default() -> Self {
        Self { morph_radius: 8, min_component_area: 10_000, min_tissue_frac: 0.05 }
    }
}

impl DepositParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_tissue_frac) {
            return Err(Error::InvalidArgument(format!(
                "min_tissue_frac must be in [0, 1], got {}",
                self.min_tissue_frac
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideLabel {
    Negative,
    Positive,
    Unknown,
}

impl SlideLabel {
    /// Binary bag label, `None` when unknown.
    pub fn as_binary(self) -> Option<u8> {
        match self {
            SlideLabel::Negative => Some(0),
            SlideLabel::Positive => Some(1),
            SlideLabel::Unknown => None,
        }
    }
}

impl std::str::FromStr for SlideLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" | "positive" | "1" => Ok(SlideLabel::Positive),
            "neg" | "negative" | "0" => Ok(SlideLabel::Negative),
            "unknown" => Ok(SlideLabel::Unknown),
            other => Err(Error::InvalidArgument(format!("unknown slide label {other:?}"))),
        }
    }
}

/// One kept grid cell. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileRecord {
    #[serde(skip)]
    pub slide_id: String,
    pub row: u32,
    pub col: u32,
    pub x: u32,
    pub y: u32,
    pub tissue_frac: f64,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideManifest {
    pub slide_id: String,
    pub label: SlideLabel,
    pub mpp: f64,
    pub tiles: Vec<TileRecord>,
}

impl SlideManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut m: SlideManifest = util::read_json(path.as_ref())?;
        for t in &mut m.tiles {
            t.slide_id = m.slide_id.clone();
        }
        Ok(m)
    }

    /// Loads every `*.json` slide manifest in a directory, sorted by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, Self)>> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|p| Self::load(&p).map(|m| (p, m)))
            .collect()
    }
}

pub fn tile_path(slide_id: &str, row: u32, col: u32) -> String {
    format!("tiles/{slide_id}/t_{row:04}_{col:04}.png")
}

/// Per-pixel HSV saturation scaled to 0..=255.
pub fn saturation(image: &RasterImage) -> Vec<u8> {
    image
        .pixels()
        .chunks_exact(3)
        .map(|p| {
            let max = p[0].max(p[1]).max(p[2]) as u32;
            let min = p[0].min(p[1]).min(p[2]) as u32;
            if max == 0 {
                0
            } else {
                (((max - min) * 255 + max / 2) / max) as u8
            }
        })
        .collect()
}

/// Otsu threshold over an 8-bit histogram; foreground is `value > threshold`.
///
/// A histogram with a single occupied level has no split; 0 is returned so
/// that only nonzero values count as foreground.
pub fn otsu_threshold(values: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best_t, mut best_var) = (0u8, 0.0f64);
    for t in 0..255usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    best_t
}

pub fn detect_cell_deposit(image: &RasterImage, params: &DepositParams) -> TissueMask {
    let sat = saturation(image);
    let t = otsu_threshold(&sat);
    let raw = BinaryMask::new(image.width(), image.height(), sat.iter().map(|&s| s > t).collect())
        .expect("mask built from image dims");
    let cleaned = morphology::open(&morphology::close(&raw, params.morph_radius), params.morph_radius);
    morphology::remove_small_components(&cleaned, params.min_component_area)
}

pub fn extract_tiles(
    image: &RasterImage,
    mask: &TissueMask,
    slide_id: &str,
    tile_px: u32,
    min_tissue_frac: f64,
) -> Result<Vec<TileRecord>> {
    if mask.dims() != image.dims() {
        return Err(Error::DimensionMismatch(format!(
            "mask is {:?}, image is {:?}",
            mask.dims(),
            image.dims()
        )));
    }
    if tile_px == 0 {
        return Err(Error::InvalidArgument("tile_px must be at least 1".into()));
    }
    let cols = image.width() / tile_px;
    let rows = image.height() / tile_px;
    let area = tile_px as f64 * tile_px as f64;
    let mut out = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let (x, y) = (col * tile_px, row * tile_px);
            let frac = mask.count_in(x, y, tile_px, tile_px) as f64 / area;
            if frac >= min_tissue_frac {
                out.push(TileRecord {
                    slide_id: slide_id.to_string(),
                    row,
                    col,
                    x,
                    y,
                    tissue_frac: frac,
                    path: tile_path(slide_id, row, col),
                });
            }
        }
    }
    Ok(out)
}

fn check_slide_id(slide_id: &str) -> Result<()> {
    if slide_id.is_empty() || slide_id.contains(['/', '\\']) || slide_id == "." || slide_id == ".." {
        return Err(Error::InvalidArgument(format!("invalid slide id {slide_id:?}")));
    }
    Ok(())
}

/// Writes the tile PNGs and `{out_dir}/{slide_id}.json`.
pub fn build_slide_manifest(
    slide_id: &str,
    label: SlideLabel,
    mpp: f64,
    tile_px: u32,
    image: &RasterImage,
    tiles: &[TileRecord],
    out_dir: &Path,
) -> Result<SlideManifest> {
    check_slide_id(slide_id)?;
    let mut seen = HashSet::new();
    for t in tiles {
        if !seen.insert((t.row, t.col)) {
            return Err(Error::DuplicateTile { row: t.row, col: t.col });
        }
    }
    let mut records = Vec::with_capacity(tiles.len());
    for t in tiles {
        let path = tile_path(slide_id, t.row, t.col);
        image.crop(t.x, t.y, tile_px, tile_px)?.save_png(out_dir.join(&path))?;
        records.push(TileRecord { slide_id: slide_id.to_string(), path, ..t.clone() });
    }
    let manifest = SlideManifest { slide_id: slide_id.to_string(), label, mpp, tiles: records };
    util::write_json(&out_dir.join(format!("{slide_id}.json")), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingParams {
    pub tile_px: u32,
    pub mpp: f64,
    pub morph_radius: u32,
    pub min_component_area: usize,
    pub min_tissue_frac: f64,
}

impl Default for TilingParams {
    fn default() -> Self {
        let d = DepositParams::default();
        Self {
            tile_px: DEFAULT_TILE_PX,
            mpp: DEFAULT_MPP,
            morph_radius: d.morph_radius,
            min_component_area: d.min_component_area,
            min_tissue_frac: d.min_tissue_frac,
        }
    }
}

impl TilingParams {
    pub fn deposit(&self) -> DepositParams {
        DepositParams {
            morph_radius: self.morph_radius,
            min_component_area: self.min_component_area,
            min_tissue_frac: self.min_tissue_frac,
        }
    }
}

/// Detect, grid, and write one slide.
pub fn tile_slide(
    image: &RasterImage,
    slide_id: &str,
    label: SlideLabel,
    params: &TilingParams,
    out_dir: &Path,
) -> Result<SlideManifest> {
    let deposit = params.deposit();
    deposit.validate()?;
    let mask = detect_cell_deposit(image, &deposit);
    let tiles = extract_tiles(image, &mask, slide_id, params.tile_px, deposit.min_tissue_frac)?;
    let grid = (image.width() / params.tile_px) * (image.height() / params.tile_px);
    log::info!("{slide_id}: kept {} of {grid} grid tiles", tiles.len());
    build_slide_manifest(slide_id, label, params.mpp, params.tile_px, image, &tiles, out_dir)
}
