//! Cell copy-pasting: transfer labeled single-cell images onto unlabeled
//! tiles with `paste`, `blend` or `poisson`, and label the result with the
//! pasted cell's label.
//!
//! Positive cells only go onto tiles from positive slides and negative cells
//! onto tiles from negative slides. Pasting is applied with probability
//! `p_pos` / `p_neg` depending on the canvas polarity; untouched canvases keep
//! their slide polarity as label.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poisson::{self, PasteRegion, SolverParams};
use crate::raster::{BinaryMask, RasterImage};
use crate::tiler::SlideManifest;
use crate::util::{self, mix_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PasteMode {
    Paste,
    Blend,
    Poisson,
}

impl PasteMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PasteMode::Paste => "paste",
            PasteMode::Blend => "blend",
            PasteMode::Poisson => "poisson",
        }
    }
}

impl std::str::FromStr for PasteMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paste" => Ok(PasteMode::Paste),
            "blend" => Ok(PasteMode::Blend),
            "poisson" => Ok(PasteMode::Poisson),
            other => Err(Error::InvalidArgument(format!("unknown paste mode {other:?}"))),
        }
    }
}

const HERLEV_NEGATIVE: &[&str] = &["NS", "NI", "NC"];
const HERLEV_POSITIVE: &[&str] = &["LD", "MD", "SD", "CIS"];
const SIPAKMED_NEGATIVE: &[&str] = &["M", "SI", "P"];
const SIPAKMED_POSITIVE: &[&str] = &["K", "D"];

/// Binary label implied by a fine class of a known dataset, `None` for other
/// datasets. Errors on a class the dataset does not define.
pub fn class_label(dataset: &str, class_tag: &str) -> Result<Option<u8>> {
    let (neg, pos) = match dataset.to_ascii_lowercase().as_str() {
        "herlev" => (HERLEV_NEGATIVE, HERLEV_POSITIVE),
        "sipakmed" => (SIPAKMED_NEGATIVE, SIPAKMED_POSITIVE),
        _ => return Ok(None),
    };
    if pos.contains(&class_tag) {
        Ok(Some(1))
    } else if neg.contains(&class_tag) {
        Ok(Some(0))
    } else {
        Err(Error::InvalidArgument(format!("{dataset} has no class {class_tag:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellImage {
    pub id: String,
    pub image: RasterImage,
    pub mask: Option<BinaryMask>,
    pub label: u8,
    pub dataset: String,
    pub class_tag: String,
}

impl CellImage {
    pub fn new(
        id: impl Into<String>,
        image: RasterImage,
        label: u8,
        dataset: impl Into<String>,
        class_tag: impl Into<String>,
    ) -> Result<Self> {
        let (dataset, class_tag) = (dataset.into(), class_tag.into());
        if label > 1 {
            return Err(Error::InvalidArgument(format!("cell label must be 0 or 1, got {label}")));
        }
        if let Some(expected) = class_label(&dataset, &class_tag)? {
            if expected != label {
                return Err(Error::InvalidArgument(format!(
                    "{dataset} class {class_tag} is label {expected}, got {label}"
                )));
            }
        }
        Ok(Self { id: id.into(), image, mask: None, label, dataset, class_tag })
    }

    pub fn with_mask(mut self, mask: BinaryMask) -> Result<Self> {
        if mask.dims() != self.image.dims() {
            return Err(Error::DimensionMismatch("cell mask must match the cell image".into()));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    fn in_site(&self, x: u32, y: u32) -> bool {
        self.mask.as_ref().is_none_or(|m| m.get(x, y))
    }
}

#[derive(Clone, Debug, Default)]
pub struct CellBank {
    positives: Vec<CellImage>,
    negatives: Vec<CellImage>,
}

#[derive(Debug, Deserialize)]
struct CellRow {
    file: String,
    dataset: String,
    class: String,
    label: u8,
}

impl CellBank {
    pub fn new(cells: impl IntoIterator<Item = CellImage>) -> Self {
        let (positives, negatives) = cells.into_iter().partition(|c| c.label == 1);
        Self { positives, negatives }
    }

    /// Reads `labels.csv` (`file,dataset,class,label`) and the PNGs it names.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let csv_path = dir.join("labels.csv");
        let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
        let mut cells = Vec::new();
        for row in reader.deserialize::<CellRow>() {
            let row = row.map_err(|e| Error::csv(&csv_path, e))?;
            let image = RasterImage::load(dir.join(&row.file))?;
            cells.push(CellImage::new(row.file, image, row.label, row.dataset, row.class)?);
        }
        Ok(Self::new(cells))
    }

    /// Writes cells as PNGs plus `labels.csv`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        util::ensure_dir(dir)?;
        let csv_path = dir.join("labels.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
        w.write_record(["file", "dataset", "class", "label"]).map_err(|e| Error::csv(&csv_path, e))?;
        for c in self.negatives.iter().chain(&self.positives) {
            c.image.save_png(dir.join(&c.id))?;
            w.write_record([c.id.as_str(), &c.dataset, &c.class_tag, &c.label.to_string()])
                .map_err(|e| Error::csv(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))
    }

    pub fn cells(&self, label: u8) -> &[CellImage] {
        if label == 1 {
            &self.positives
        } else {
            &self.negatives
        }
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PastePolicy {
    pub mode: PasteMode,
    pub p_pos: f64,
    pub p_neg: f64,
    pub lambda_range: [f64; 2],
    pub canvases_per_class: usize,
    pub seed: u64,
}

impl Default for PastePolicy {
    fn default() -> Self {
        Self {
            mode: PasteMode::Poisson,
            p_pos: 1.0,
            p_neg: 0.5,
            lambda_range: [0.0, 1.0],
            canvases_per_class: 2000,
            seed: 0,
        }
    }
}

impl PastePolicy {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        let [lo, hi] = self.lambda_range;
        if !unit.contains(&self.p_pos) || !unit.contains(&self.p_neg) {
            return Err(Error::InvalidArgument("pasting probabilities must lie in [0, 1]".into()));
        }
        if !(unit.contains(&lo) && unit.contains(&hi) && lo <= hi) {
            return Err(Error::InvalidArgument(format!("bad lambda range [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn probability_for(&self, polarity: u8) -> f64 {
        if polarity == 1 {
            self.p_pos
        } else {
            self.p_neg
        }
    }
}

/// An unlabeled tile and the polarity of the slide it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub id: String,
    pub image: RasterImage,
    pub polarity: u8,
}

impl Canvas {
    /// Every tile of a slide manifest; ids are the tile paths.
    pub fn from_manifest(path: impl AsRef<Path>, polarity: u8) -> Result<Vec<Self>> {
        let path = path.as_ref();
        let manifest = SlideManifest::load(path)?;
        let root = path.parent().unwrap_or(Path::new("."));
        manifest
            .tiles
            .iter()
            .map(|t| {
                Ok(Canvas { id: t.path.clone(), image: RasterImage::load(root.join(&t.path))?, polarity })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub cell_id: Option<String>,
    pub canvas_id: String,
    pub offset: (u32, u32),
    pub mode: Option<PasteMode>,
    pub lambda: Option<f64>,
    pub pasted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PastedTile {
    pub image: RasterImage,
    pub label: u8,
    pub provenance: Provenance,
}

/// Offset drawn uniformly among the positions where the cell fits entirely.
pub fn sample_paste_location(
    canvas_wh: (u32, u32),
    cell_wh: (u32, u32),
    rng: &mut impl Rng,
) -> Result<(u32, u32)> {
    if cell_wh.0 > canvas_wh.0 || cell_wh.1 > canvas_wh.1 {
        return Err(Error::InvalidArgument(format!(
            "cell {}x{} does not fit on canvas {}x{}",
            cell_wh.0, cell_wh.1, canvas_wh.0, canvas_wh.1
        )));
    }
    let x = rng.random_range(0..=canvas_wh.0 - cell_wh.0);
    let y = rng.random_range(0..=canvas_wh.1 - cell_wh.1);
    Ok((x, y))
}

fn check_fits(cell: &CellImage, canvas: &RasterImage, offset: (u32, u32)) -> Result<()> {
    let (cw, ch) = cell.image.dims();
    if offset.0 as u64 + cw as u64 > canvas.width() as u64
        || offset.1 as u64 + ch as u64 > canvas.height() as u64
    {
        return Err(Error::InvalidArgument(format!(
            "cell {cw}x{ch} at {offset:?} exceeds canvas {:?}",
            canvas.dims()
        )));
    }
    Ok(())
}

/// Replaces the pasting site with the cell pixels (restricted to the cell mask if any).
pub fn paste(cell: &CellImage, canvas: &RasterImage, offset: (u32, u32)) -> Result<RasterImage> {
    check_fits(cell, canvas, offset)?;
    let mut out = canvas.clone();
    for y in 0..cell.image.height() {
        for x in 0..cell.image.width() {
            if cell.in_site(x, y) {
                out.set(offset.0 + x, offset.1 + y, cell.image.get(x, y));
            }
        }
    }
    Ok(out)
}

/// Site pixels become `round((1 - λ) cell + λ canvas)`.
pub fn blend(cell: &CellImage, canvas: &RasterImage, offset: (u32, u32), lambda: f64) -> Result<RasterImage> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("blend lambda {lambda} outside [0, 1]")));
    }
    check_fits(cell, canvas, offset)?;
    let mut out = canvas.clone();
    for y in 0..cell.image.height() {
        for x in 0..cell.image.width() {
            if !cell.in_site(x, y) {
                continue;
            }
            let (cx, cy) = (offset.0 + x, offset.1 + y);
            let c = cell.image.get(x, y);
            let v = canvas.get(cx, cy);
            let mixed: [u8; 3] = std::array::from_fn(|k| {
                ((1.0 - lambda) * c[k] as f64 + lambda * v[k] as f64).round().clamp(0.0, 255.0) as u8
            });
            out.set(cx, cy, mixed);
        }
    }
    Ok(out)
}

/// Poisson seamless cloning with Ω = cell rectangle minus its border,
/// intersected with the cell mask when present.
pub fn poisson_paste(
    cell: &CellImage,
    canvas: &RasterImage,
    offset: (u32, u32),
    solver: &SolverParams,
) -> Result<RasterImage> {
    check_fits(cell, canvas, offset)?;
    let (w, h) = cell.image.dims();
    let mut region = PasteRegion::rect(offset.0, offset.1, w, h);
    if let Some(m) = &cell.mask {
        region = region.with_mask(m.clone());
    }
    poisson::seamless_clone(&cell.image, canvas, &region, solver)
}

pub fn paste_with_mode(
    mode: PasteMode,
    cell: &CellImage,
    canvas: &RasterImage,
    offset: (u32, u32),
    lambda: f64,
) -> Result<RasterImage> {
    match mode {
        PasteMode::Paste => paste(cell, canvas, offset),
        PasteMode::Blend => blend(cell, canvas, offset, lambda),
        PasteMode::Poisson => poisson_paste(cell, canvas, offset, &SolverParams::default()),
    }
}

/// One C³P draw. RNG consumption order: gate, cell index, x, y, λ (blend only).
pub fn apply_c3p(
    canvas: &Canvas,
    bank: &CellBank,
    policy: &PastePolicy,
    rng: &mut impl Rng,
) -> Result<PastedTile> {
    policy.validate()?;
    let polarity = canvas.polarity.min(1);
    let u: f64 = rng.random();
    if u >= policy.probability_for(polarity) {
        return Ok(PastedTile {
            image: canvas.image.clone(),
            label: polarity,
            provenance: Provenance {
                cell_id: None,
                canvas_id: canvas.id.clone(),
                offset: (0, 0),
                mode: None,
                lambda: None,
                pasted: false,
            },
        });
    }
    let cells = bank.cells(polarity);
    if cells.is_empty() {
        return Err(Error::EmptyCellBank(if polarity == 1 { "positive" } else { "negative" }));
    }
    let cell = &cells[rng.random_range(0..cells.len())];
    let offset = sample_paste_location(canvas.image.dims(), cell.image.dims(), rng)?;
    let lambda = match policy.mode {
        PasteMode::Blend => {
            let [lo, hi] = policy.lambda_range;
            Some(lo + (hi - lo) * rng.random::<f64>())
        }
        _ => None,
    };
    let image = paste_with_mode(policy.mode, cell, &canvas.image, offset, lambda.unwrap_or(0.0))?;
    Ok(PastedTile {
        image,
        label: cell.label,
        provenance: Provenance {
            cell_id: Some(cell.id.clone()),
            canvas_id: canvas.id.clone(),
            offset,
            mode: Some(policy.mode),
            lambda,
            pasted: true,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PastedItem {
    pub path: String,
    pub label: u8,
    pub cell_id: Option<String>,
    pub canvas_id: String,
    pub x: u32,
    pub y: u32,
    pub mode: String,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PastedManifest {
    pub policy: PastePolicy,
    pub items: Vec<PastedItem>,
}

pub const PASTED_MANIFEST: &str = "pasted.json";

impl PastedManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        util::read_json(path.as_ref())
    }
}

/// Seeded subsample (order preserved) of at most `n` canvases.
fn subsample<'a>(pool: &'a [Canvas], n: usize, seed: u64) -> Vec<&'a Canvas> {
    if pool.len() <= n {
        return pool.iter().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &pool[i]).collect()
}

/// Generates `n_outputs` pasted tiles alternating negative / positive canvases,
/// writes `images/p_NNNNNN.png` and `pasted.json` under `out_dir`.
///
/// Output `i` draws from its own RNG seeded by `mix_seed(policy.seed, i)`, so
/// the result does not depend on scheduling.
pub fn generate_pasted_dataset(
    bank: &CellBank,
    positive_pool: &[Canvas],
    negative_pool: &[Canvas],
    policy: &PastePolicy,
    n_outputs: usize,
    out_dir: &Path,
) -> Result<PastedManifest> {
    policy.validate()?;
    if positive_pool.is_empty() || negative_pool.is_empty() {
        return Err(Error::InvalidArgument("each canvas pool needs at least one tile".into()));
    }
    let pools = [
        subsample(negative_pool, policy.canvases_per_class, mix_seed(policy.seed, u64::MAX)),
        subsample(positive_pool, policy.canvases_per_class, mix_seed(policy.seed, u64::MAX - 1)),
    ];
    let tiles: Vec<PastedTile> = (0..n_outputs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(policy.seed, i as u64));
            let pool = &pools[i % 2];
            let canvas = pool[rng.random_range(0..pool.len())];
            apply_c3p(canvas, bank, policy, &mut rng)
        })
        .collect::<Result<_>>()?;

    let items: Vec<PastedItem> = tiles
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let path = format!("images/p_{i:06}.png");
            t.image.save_png(out_dir.join(&path))?;
            let p = &t.provenance;
            Ok(PastedItem {
                path,
                label: t.label,
                cell_id: p.cell_id.clone(),
                canvas_id: p.canvas_id.clone(),
                x: p.offset.0,
                y: p.offset.1,
                mode: p.mode.map_or("none", PasteMode::as_str).to_string(),
                lambda: p.lambda,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = PastedManifest { policy: policy.clone(), items };
    util::write_json(&out_dir.join(PASTED_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn pasted_manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(PASTED_MANIFEST)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(id: &str, label: u8, w: u32, h: u32, rgb: [u8; 3]) -> CellImage {
        CellImage::new(id, RasterImage::filled(w, h, rgb), label, "synthetic", "x").unwrap()
    }

    #[test]
    fn class_lists() {
        assert_eq!(class_label("herlev", "CIS").unwrap(), Some(1));
        assert_eq!(class_label("herlev", "NC").unwrap(), Some(0));
        assert_eq!(class_label("sipakmed", "K").unwrap(), Some(1));
        assert_eq!(class_label("sipakmed", "SI").unwrap(), Some(0));
        assert_eq!(class_label("other", "whatever").unwrap(), None);
        assert!(class_label("herlev", "K").is_err());
        let img = RasterImage::filled(2, 2, [0, 0, 0]);
        assert!(CellImage::new("a", img.clone(), 0, "herlev", "SD").is_err());
        assert!(CellImage::new("a", img, 1, "herlev", "SD").is_ok());
    }

    #[test]
    fn location_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(sample_paste_location((320, 320), (320, 320), &mut rng).unwrap(), (0, 0));
        }
        assert!(sample_paste_location((320, 320), (321, 100), &mut rng).is_err());
    }

    #[test]
    fn paste_example() {
        let c = cell("c", 1, 2, 2, [10, 10, 10]);
        let canvas = RasterImage::filled(4, 4, [200, 200, 200]);
        let out = paste(&c, &canvas, (0, 0)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = if x < 2 && y < 2 { 10 } else { 200 };
                assert_eq!(out.get(x, y), [expect; 3]);
            }
        }
        assert!(paste(&c, &canvas, (3, 0)).is_err());
        let full = cell("f", 1, 4, 4, [1, 2, 3]);
        assert_eq!(paste(&full, &canvas, (0, 0)).unwrap(), full.image);
    }

    #[test]
    fn blend_examples() {
        let c = cell("c", 1, 2, 2, [100, 100, 100]);
        let canvas = RasterImage::filled(3, 3, [200, 200, 200]);
        let half = blend(&c, &canvas, (1, 1), 0.5).unwrap();
        assert_eq!(half.get(1, 1), [150; 3]);
        assert_eq!(half.get(0, 0), [200; 3]);
        assert_eq!(blend(&c, &canvas, (1, 1), 1.0).unwrap(), canvas);
        assert_eq!(blend(&c, &canvas, (1, 1), 0.0).unwrap(), paste(&c, &canvas, (1, 1)).unwrap());
        assert!(blend(&c, &canvas, (1, 1), 1.5).is_err());
        assert!(blend(&c, &canvas, (1, 1), -0.1).is_err());
    }

    #[test]
    fn masked_paste_touches_only_mask() {
        let c = cell("c", 1, 3, 3, [0, 0, 0])
            .with_mask(BinaryMask::from_fn(3, 3, |x, y| x == 1 && y == 1))
            .unwrap();
        let canvas = RasterImage::filled(5, 5, [9, 9, 9]);
        let out = paste(&c, &canvas, (1, 1)).unwrap();
        let changed: Vec<_> = (0..25u32).filter(|i| out.get(i % 5, i / 5) != [9; 3]).collect();
        assert_eq!(changed, vec![12]);
    }

    #[test]
    fn poisson_paste_constant_cell_vanishes() {
        let c = cell("c", 1, 12, 10, [20, 200, 90]);
        let canvas = RasterImage::filled(40, 40, [120, 60, 180]);
        assert_eq!(poisson_paste(&c, &canvas, (5, 9), &SolverParams::default()).unwrap(), canvas);
    }

    #[test]
    fn gate_probabilities() {
        let bank = CellBank::new([cell("p", 1, 3, 3, [255, 0, 255]), cell("n", 0, 3, 3, [0, 0, 255])]);
        let neg = Canvas { id: "n0".into(), image: RasterImage::filled(8, 8, [240; 3]), polarity: 0 };
        let pos = Canvas { id: "p0".into(), image: RasterImage::filled(8, 8, [230; 3]), polarity: 1 };
        let policy = PastePolicy { mode: PasteMode::Paste, p_neg: 0.0, p_pos: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = apply_c3p(&neg, &bank, &policy, &mut rng).unwrap();
            assert!(!t.provenance.pasted);
            assert_eq!(t.label, 0);
            assert_eq!(t.image, neg.image);
            let t = apply_c3p(&pos, &bank, &policy, &mut rng).unwrap();
            assert!(t.provenance.pasted);
            assert_eq!(t.label, 1);
            assert_eq!(t.provenance.cell_id.as_deref(), Some("p"));
        }
    }

    #[test]
    fn empty_bank_errors_only_when_needed() {
        let bank = CellBank::new([cell("p", 1, 3, 3, [255, 0, 255])]);
        let neg = Canvas { id: "n0".into(), image: RasterImage::filled(8, 8, [240; 3]), polarity: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let always = PastePolicy { p_neg: 1.0, ..Default::default() };
        assert!(matches!(apply_c3p(&neg, &bank, &always, &mut rng), Err(Error::EmptyCellBank(_))));
        let never = PastePolicy { p_neg: 0.0, ..Default::default() };
        assert!(apply_c3p(&neg, &bank, &never, &mut rng).is_ok());
    }

    #[test]
    fn policy_validation() {
        assert!(PastePolicy { p_pos: 1.1, ..Default::default() }.validate().is_err());
        assert!(PastePolicy { lambda_range: [0.6, 0.4], ..Default::default() }.validate().is_err());
        assert!(PastePolicy::default().validate().is_ok());
        let d = PastePolicy::default();
        assert_eq!((d.p_neg, d.p_pos, d.canvases_per_class), (0.5, 1.0, 2000));
    }
}
