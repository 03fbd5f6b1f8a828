//! Synthetic slides, cells and MIL bags for tests, demos and smoke runs.

use std::collections::HashMap;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::c3p::{CellBank, CellImage};
use crate::error::Result;
use crate::features::{Bag, ToyFeaturizer};
use crate::raster::{BinaryMask, RasterImage};
use crate::tiler::SlideLabel;
use crate::util::{self, mix_seed};

const BACKGROUND: [u8; 3] = [246, 244, 246];
const DEPOSIT: [u8; 3] = [205, 95, 190];
const CYTOPLASM: [u8; 3] = [215, 160, 200];
const NEGATIVE_NUCLEUS: [u8; 3] = [150, 105, 170];
const POSITIVE_NUCLEUS: [u8; 3] = [60, 25, 105];

fn jitter(rgb: [u8; 3], amount: i16, rng: &mut impl Rng) -> [u8; 3] {
    rgb.map(|c| (c as i16 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// Pale background with stained, slightly noisy disc-shaped deposits.
pub fn render_slide(width: u32, height: u32, blobs: &[Blob], seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RasterImage::from_fn(width, height, |x, y| {
        let inside = blobs.iter().any(|b| {
            let (dx, dy) = (x as f64 + 0.5 - b.cx, y as f64 + 0.5 - b.cy);
            dx * dx + dy * dy <= b.r * b.r
        });
        if inside {
            jitter(DEPOSIT, 12, &mut rng)
        } else {
            jitter(BACKGROUND, 3, &mut rng)
        }
    })
}

pub fn random_blobs(width: u32, height: u32, n: usize, radius: RangeInclusive<f64>, rng: &mut impl Rng) -> Vec<Blob> {
    (0..n)
        .map(|_| Blob {
            cx: rng.random_range(0.0..width as f64),
            cy: rng.random_range(0.0..height as f64),
            r: rng.random_range(radius.clone()),
        })
        .collect()
}

/// One disc centered in every grid cell.
pub fn grid_blobs(width: u32, height: u32, cell_px: u32, radius: f64) -> Vec<Blob> {
    let mut out = Vec::new();
    for row in 0..height / cell_px {
        for col in 0..width / cell_px {
            out.push(Blob {
                cx: (col * cell_px) as f64 + cell_px as f64 / 2.0,
                cy: (row * cell_px) as f64 + cell_px as f64 / 2.0,
                r: radius,
            });
        }
    }
    out
}

/// A round cell: cytoplasm disc with a nucleus that is large and dark for
/// positive cells, small and pale for negative ones. The mask is the disc.
pub fn render_cell(id: impl Into<String>, label: u8, size: u32, rng: &mut impl Rng) -> CellImage {
    let c = size as f64 / 2.0;
    let r = c - 0.5;
    let nucleus_r = if label == 1 { r * rng.random_range(0.45..0.6) } else { r * rng.random_range(0.15..0.25) };
    let nucleus = if label == 1 { POSITIVE_NUCLEUS } else { NEGATIVE_NUCLEUS };
    let mut rng2 = ChaCha8Rng::seed_from_u64(rng.random());
    let image = RasterImage::from_fn(size, size, |x, y| {
        let d = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt();
        if d <= nucleus_r {
            jitter(nucleus, 10, &mut rng2)
        } else if d <= r {
            jitter(CYTOPLASM, 8, &mut rng2)
        } else {
            jitter(BACKGROUND, 3, &mut rng2)
        }
    });
    let mask = BinaryMask::from_fn(size, size, |x, y| {
        ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt() <= r
    });
    let class = if label == 1 { "positive" } else { "negative" };
    CellImage::new(id, image, label, "synthetic", class)
        .and_then(|cell| cell.with_mask(mask))
        .expect("synthetic cell is consistent")
}

pub fn synthetic_cell_bank(n_per_class: usize, size: u32, seed: u64) -> CellBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(2 * n_per_class);
    for label in [0u8, 1] {
        for i in 0..n_per_class {
            cells.push(render_cell(format!("cell_{label}_{i:04}.png"), label, size, &mut rng));
        }
    }
    CellBank::new(cells)
}

fn stamp(image: &mut RasterImage, cell: &CellImage, x0: u32, y0: u32) {
    for y in 0..cell.image.height() {
        for x in 0..cell.image.width() {
            if cell.mask.as_ref().is_none_or(|m| m.get(x, y)) {
                image.set(x0 + x, y0 + y, cell.image.get(x, y));
            }
        }
    }
}

/// Stamps cells directly (no blending) at random positions.
fn scatter_cells(image: &mut RasterImage, cells: &[CellImage], rng: &mut impl Rng) {
    for cell in cells {
        let x = rng.random_range(0..=image.width() - cell.image.width());
        let y = rng.random_range(0..=image.height() - cell.image.height());
        stamp(image, cell, x, y);
    }
}

/// A deposit-colored tile with a few negative cells and, if `positive`, one
/// positive cell.
pub fn render_tile(size: u32, cell_px: u32, positive: bool, rng: &mut impl Rng) -> RasterImage {
    let mut image = RasterImage::from_fn(size, size, |_, _| jitter(DEPOSIT, 12, rng));
    let n_neg = rng.random_range(1..=3);
    let mut cells: Vec<CellImage> = (0..n_neg).map(|_| render_cell("n", 0, cell_px, rng)).collect();
    if positive {
        cells.push(render_cell("p", 1, cell_px, rng));
    }
    scatter_cells(&mut image, &cells, rng);
    image
}

/// A fixed random unit vector.
pub fn unit_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

#[derive(Clone, Debug)]
pub struct SyntheticBags {
    pub bags: Vec<Bag>,
    pub instance_labels: Vec<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct GaussianBagSpec {
    pub n_bags: usize,
    pub bag_size: usize,
    pub dim: usize,
    /// Positive instances are drawn from N(shift * direction, I).
    pub shift: f64,
    pub positives_per_bag: RangeInclusive<usize>,
}

/// Alternating negative / positive bags of N(0, I) instances, with a few
/// shifted instances in each positive bag at random positions.
pub fn gaussian_mil_bags(spec: &GaussianBagSpec, direction: &[f64], seed: u64) -> SyntheticBags {
    assert_eq!(direction.len(), spec.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags = Vec::with_capacity(spec.n_bags);
    let mut instance_labels = Vec::with_capacity(spec.n_bags);
    for b in 0..spec.n_bags {
        let label = (b % 2) as u8;
        let n_pos = if label == 1 { rng.random_range(spec.positives_per_bag.clone()) } else { 0 };
        let mut labels = vec![0u8; spec.bag_size];
        labels[..n_pos.min(spec.bag_size)].iter_mut().for_each(|l| *l = 1);
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(spec.bag_size * spec.dim);
        for &y in &labels {
            for &u in direction {
                let noise: f64 = rng.sample(StandardNormal);
                features.push(noise + if y == 1 { spec.shift * u } else { 0.0 });
            }
        }
        let ids = (0..spec.bag_size).map(|i| format!("g{b:04}/t{i:04}")).collect();
        bags.push(Bag::new(format!("g{b:04}"), label, ids, spec.dim, features).expect("consistent synthetic bag"));
        instance_labels.push(labels);
    }
    SyntheticBags { bags, instance_labels }
}

#[derive(Clone, Debug)]
pub struct ImageBags {
    pub bags: Vec<Bag>,
    pub instance_labels: Vec<Vec<u8>>,
    pub tiles: HashMap<String, RasterImage>,
}

/// Like [`gaussian_mil_bags`] but every instance is a rendered tile embedded
/// by `featurizer`; positive bags hold `positives_per_bag` positive tiles.
pub fn image_mil_bags(
    n_bags: usize,
    bag_size: usize,
    tile_px: u32,
    cell_px: u32,
    positives_per_bag: RangeInclusive<usize>,
    featurizer: &ToyFeaturizer,
    seed: u64,
) -> ImageBags {
    use rayon::prelude::*;
    let per_bag: Vec<(Bag, Vec<u8>, Vec<(String, RasterImage)>)> = (0..n_bags)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, b as u64));
            let label = (b % 2) as u8;
            let n_pos = if label == 1 { rng.random_range(positives_per_bag.clone()) } else { 0 };
            let mut labels = vec![0u8; bag_size];
            labels[..n_pos.min(bag_size)].iter_mut().for_each(|l| *l = 1);
            labels.shuffle(&mut rng);
            let mut ids = Vec::with_capacity(bag_size);
            let mut features = Vec::with_capacity(bag_size * featurizer.dim());
            let mut tiles = Vec::with_capacity(bag_size);
            for (i, &y) in labels.iter().enumerate() {
                let image = render_tile(tile_px, cell_px, y == 1, &mut rng);
                features.extend(featurizer.embed_f64(&image));
                let id = format!("s{b:04}/t{i:04}");
                ids.push(id.clone());
                tiles.push((id, image));
            }
            let bag = Bag::new(format!("s{b:04}"), label, ids, featurizer.dim(), features).expect("consistent bag");
            (bag, labels, tiles)
        })
        .collect();
    let mut out = ImageBags { bags: Vec::new(), instance_labels: Vec::new(), tiles: HashMap::new() };
    for (bag, labels, tiles) in per_bag {
        out.bags.push(bag);
        out.instance_labels.push(labels);
        out.tiles.extend(tiles);
    }
    out
}

/// Files written by [`write_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub slides: Vec<CorpusSlide>,
    pub cells_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSlide {
    pub slide_id: String,
    pub label: SlideLabel,
    pub path: PathBuf,
}

/// Writes `n_slides` slide PNGs (alternating negative / positive; positive
/// slides carry atypical cells on their deposits), a cell bank directory and
/// `corpus.json` under `dir`.
pub fn write_corpus(dir: &Path, n_slides: usize, width: u32, height: u32, cells_per_class: usize, seed: u64) -> Result<CorpusIndex> {
    util::ensure_dir(dir)?;
    let mut slides = Vec::with_capacity(n_slides);
    for i in 0..n_slides {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let label = if i % 2 == 0 { SlideLabel::Negative } else { SlideLabel::Positive };
        let blobs = random_blobs(width, height, 6, 140.0..=260.0, &mut rng);
        let mut image = render_slide(width, height, &blobs, rng.random());
        let cells: Vec<CellImage> = (0..40)
            .map(|j| render_cell("c", u8::from(label == SlideLabel::Positive && j % 4 == 0), 32, &mut rng))
            .collect();
        for cell in &cells {
            let b = blobs[rng.random_range(0..blobs.len())];
            let x = (b.cx + rng.random_range(-b.r / 2.0..b.r / 2.0)).clamp(0.0, (width - 32) as f64) as u32;
            let y = (b.cy + rng.random_range(-b.r / 2.0..b.r / 2.0)).clamp(0.0, (height - 32) as f64) as u32;
            stamp(&mut image, cell, x, y);
        }
        let slide_id = format!("slide_{i:02}");
        let path = PathBuf::from(format!("slides/{slide_id}.png"));
        image.save_png(dir.join(&path))?;
        slides.push(CorpusSlide { slide_id, label, path });
    }
    let cells_dir = PathBuf::from("cells");
    synthetic_cell_bank(cells_per_class, 32, mix_seed(seed, u64::MAX)).save_dir(dir.join(&cells_dir))?;
    let index = CorpusIndex { slides, cells_dir };
    util::write_json(&dir.join("corpus.json"), &index)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::toy_featurizer;

    #[test]
    fn gaussian_bags_have_requested_shape() {
        let spec = GaussianBagSpec { n_bags: 6, bag_size: 20, dim: 4, shift: 2.0, positives_per_bag: 1..=5 };
        let u = unit_vector(4, 1);
        assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let out = gaussian_mil_bags(&spec, &u, 2);
        assert_eq!(out.bags.len(), 6);
        for (bag, labels) in out.bags.iter().zip(&out.instance_labels) {
            assert_eq!(bag.len(), 20);
            assert_eq!(bag.label, crate::mil::bag_label(labels));
            let n_pos = labels.iter().filter(|&&l| l == 1).count();
            assert!(if bag.label == 1 { (1..=5).contains(&n_pos) } else { n_pos == 0 });
        }
    }

    #[test]
    fn positive_cells_are_darker() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean = |c: &CellImage| c.image.pixels().iter().map(|&v| v as f64).sum::<f64>() / c.image.pixels().len() as f64;
        let pos = render_cell("p", 1, 24, &mut rng);
        let neg = render_cell("n", 0, 24, &mut rng);
        assert!(mean(&pos) < mean(&neg));
        assert_eq!(pos.label, 1);
        assert!(pos.mask.is_some());
    }

    #[test]
    fn rendered_tiles_embed_differently_by_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = toy_featurizer(&render_tile(32, 12, true, &mut rng), 16, 0).unwrap();
        let b = toy_featurizer(&render_tile(32, 12, false, &mut rng), 16, 0).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn corpus_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_corpus(dir.path(), 2, 400, 300, 3, 1).unwrap();
        assert_eq!(index.slides.len(), 2);
        assert!(dir.path().join(&index.slides[1].path).exists());
        assert_eq!(CellBank::load_dir(dir.path().join("cells")).unwrap().len(), 6);
    }
}
