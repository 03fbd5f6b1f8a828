use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cytoforge::c3p::{self, Canvas, CellImage, PasteMode, PastePolicy};
use cytoforge::features::{self, EmbeddingMatrix};
use cytoforge::metrics::{auc, f1_report};
use cytoforge::mil::{select_topk, QueuePair};
use cytoforge::poisson::{self, PasteRegion, SolverParams};
use cytoforge::synthetic;
use cytoforge::{BinaryMask, RasterImage};

fn random_image(w: u32, h: u32, rng: &mut impl Rng) -> RasterImage {
    RasterImage::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn seamless_clone_keeps_outside(seed in 0u64..100_000, w in 3u32..16, h in 3u32..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let canvas = random_image(32, 32, &mut rng);
        let source = random_image(w, h, &mut rng);
        let (ox, oy) = (rng.random_range(0..=32 - w), rng.random_range(0..=32 - h));
        let out = poisson::seamless_clone(&source, &canvas, &PasteRegion::rect(ox, oy, w, h), &SolverParams::default()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = x > ox && y > oy && x + 1 < ox + w && y + 1 < oy + h;
                if !inside {
                    prop_assert_eq!(out.get(x, y), canvas.get(x, y));
                }
            }
        }
    }

    #[test]
    fn blend_stays_between_endpoints(seed in 0u64..100_000, lambda in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let canvas = random_image(20, 20, &mut rng);
        let cell = CellImage::new("c", random_image(8, 8, &mut rng), 0, "synthetic", "negative").unwrap();
        let out = c3p::blend(&cell, &canvas, (5, 6), lambda).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let (a, b, o) = (cell.image.get(x, y), canvas.get(x + 5, y + 6), out.get(x + 5, y + 6));
                for c in 0..3 {
                    prop_assert!(o[c] >= a[c].min(b[c]) && o[c] <= a[c].max(b[c]));
                }
            }
        }
    }

    #[test]
    fn auc_flips_with_labels(seed in 0u64..100_000, n in 2usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + auc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + auc(&negated, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_f1_is_support_weighted(seed in 0u64..100_000, n in 1usize..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let r = f1_report(&preds, &labels, &[0, 1, 2, 3]).unwrap();
        let total: usize = r.support.values().sum();
        prop_assert_eq!(total, n);
        let w: f64 = r.per_class_f1.iter().map(|(c, f)| r.support[c] as f64 * f).sum::<f64>() / n as f64;
        prop_assert!((w - r.weighted_f1).abs() < 1e-12);
        prop_assert!(r.per_class_f1.values().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn topk_returns_largest(seed in 0u64..100_000, n in 0usize..40, k in 0usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
        let sel = select_topk(&scores, k);
        prop_assert_eq!(sel.len(), k.min(n));
        let worst_kept = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        for i in (0..n).filter(|i| !sel.contains(i)) {
            prop_assert!(scores[i] <= worst_kept);
        }
    }

    #[test]
    fn queues_hold_top_scores(seed in 0u64..100_000, n in 1usize..40, label in 0u8..=1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let mut q = QueuePair::new(10);
        q.update("s", label, &scores, &ids);
        let list = &q.side(label)["s"];
        prop_assert_eq!(list.len(), n.min(10));
        prop_assert!(q.side(1 - label).is_empty());
        prop_assert!(list.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn embeddings_round_trip(seed in 0u64..100_000, n in 1usize..20, dim in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<String> = (0..n).map(|i| format!("tiles/s/t_{i:04}.png")).collect();
        let data: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let m = EmbeddingMatrix::new(ids, dim, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb");
        features::write_embeddings(&m, &path).unwrap();
        prop_assert_eq!(features::read_embeddings(&path).unwrap(), m);
    }
}

#[test]
fn pasted_dataset_is_reproducible_and_labeled() {
    let bank = synthetic::synthetic_cell_bank(6, 16, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = |polarity, rng: &mut ChaCha8Rng| -> Vec<Canvas> {
        (0..5)
            .map(|i| Canvas { id: format!("c{polarity}_{i}"), image: synthetic::render_tile(48, 16, false, rng), polarity })
            .collect()
    };
    let (pos, neg) = (pool(1, &mut rng), pool(0, &mut rng));
    let policy = PastePolicy { mode: PasteMode::Poisson, p_neg: 0.5, p_pos: 1.0, seed: 9, ..PastePolicy::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m1 = c3p::generate_pasted_dataset(&bank, &pos, &neg, &policy, 30, a.path()).unwrap();
    let m2 = c3p::generate_pasted_dataset(&bank, &pos, &neg, &policy, 30, b.path()).unwrap();
    assert_eq!(m1, m2);
    for item in &m1.items {
        assert_eq!(std::fs::read(a.path().join(&item.path)).unwrap(), std::fs::read(b.path().join(&item.path)).unwrap());
        if item.canvas_id.starts_with("c1_") {
            assert_eq!((item.label, item.cell_id.is_some()), (1, true));
        } else if item.cell_id.is_none() {
            assert_eq!((item.label, item.mode.as_str()), (0, "none"));
        } else {
            assert!(item.cell_id.as_deref().unwrap().starts_with("cell_0_"));
            assert_eq!(item.label, 0);
        }
    }
    assert_eq!(c3p::PastedManifest::load(c3p::pasted_manifest_path(a.path())).unwrap(), m1);
}

#[test]
fn masked_paste_only_touches_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let canvas = random_image(30, 30, &mut rng);
    let mask = BinaryMask::from_fn(10, 10, |x, y| (x + y) % 3 == 0);
    let cell = CellImage::new("c", random_image(10, 10, &mut rng), 1, "synthetic", "positive")
        .unwrap()
        .with_mask(mask.clone())
        .unwrap();
    let out = c3p::paste(&cell, &canvas, (7, 9)).unwrap();
    for y in 0..30 {
        for x in 0..30 {
            let in_site = (7..17).contains(&x) && (9..19).contains(&y) && mask.get(x - 7, y - 9);
            let expected = if in_site { cell.image.get(x - 7, y - 9) } else { canvas.get(x, y) };
            assert_eq!(out.get(x, y), expected);
        }
    }
}
