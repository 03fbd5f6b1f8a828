//! Cosine k-NN classification over embeddings and the k sweep used to pick
//! the neighbor count by weighted F1.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::LabeledTileSet;
use crate::metrics::{f1_report, F1Report};

pub const DEFAULT_K_GRID: [usize; 8] = [1, 3, 5, 7, 11, 15, 21, 31];

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

#[derive(Clone, Debug)]
pub struct KnnIndex {
    dim: usize,
    /// L2-normalized rows.
    train: Vec<Vec<f64>>,
    labels: Vec<u32>,
    classes: BTreeSet<u32>,
}

impl KnnIndex {
    pub fn fit(rows: &[Vec<f64>], labels: &[u32]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("k-NN index needs at least one training point".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!("{} rows vs {} labels", rows.len(), labels.len())));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch("training rows differ in length".into()));
        }
        Ok(Self {
            dim,
            train: rows.iter().map(|r| normalized(r)).collect(),
            labels: labels.to_vec(),
            classes: labels.iter().copied().collect(),
        })
    }

    pub fn from_set(set: &LabeledTileSet) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..set.embeddings.len()).map(|i| set.embeddings.row_f64(i)).collect();
        Self::fit(&rows, &set.labels)
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn classes(&self) -> &BTreeSet<u32> {
        &self.classes
    }

    /// Majority vote over the k most similar training points. Neighbors are
    /// ranked by similarity, ties by smaller label; votes
    /// are tied by summed similarity, then by smaller class.
    pub fn predict(&self, query: &[f64], k: usize) -> Result<u32> {
        if k == 0 || k > self.train.len() {
            return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", self.train.len())));
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch(format!("query dim {} vs {}", query.len(), self.dim)));
        }
        let q = normalized(query);
        let mut sims: Vec<(f64, u32)> = self
            .train
            .iter()
            .zip(&self.labels)
            .map(|(t, &l)| (t.iter().zip(&q).map(|(a, b)| a * b).sum(), l))
            .collect();
        let cmp = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, cmp);
            sims.truncate(k);
        }
        let mut votes: Vec<(u32, usize, f64)> = Vec::new();
        for (s, l) in sims {
            match votes.iter_mut().find(|v| v.0 == l) {
                Some(v) => {
                    v.1 += 1;
                    v.2 += s;
                }
                None => votes.push((l, 1, s)),
            }
        }
        votes.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
        Ok(votes[0].0)
    }

    pub fn predict_many(&self, queries: &[Vec<f64>], k: usize) -> Result<Vec<u32>> {
        queries.par_iter().map(|q| self.predict(q, k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_k: usize,
    pub report: F1Report,
    /// Weighted F1 for every evaluated k, ascending in k.
    pub grid: Vec<(usize, f64)>,
}

/// Evaluates each k on the validation rows and keeps the best weighted F1,
/// preferring the smaller k on ties. k values larger than the training set
/// are skipped.
pub fn sweep_k(index: &KnnIndex, val_rows: &[Vec<f64>], val_labels: &[u32], k_grid: &[usize]) -> Result<SweepResult> {
    if val_rows.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    if val_rows.len() != val_labels.len() {
        return Err(Error::DimensionMismatch(format!("{} rows vs {} labels", val_rows.len(), val_labels.len())));
    }
    let grid: BTreeSet<usize> = k_grid.iter().copied().collect();
    if grid.is_empty() {
        return Err(Error::InvalidArgument("k grid is empty".into()));
    }
    if grid.contains(&0) {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let classes: Vec<u32> = index.classes().iter().chain(val_labels).copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut best: Option<(usize, F1Report)> = None;
    let mut scores = Vec::new();
    for &k in grid.iter().filter(|&&k| k <= index.len()) {
        let preds = index.predict_many(val_rows, k)?;
        let report = f1_report(&preds, val_labels, &classes)?;
        scores.push((k, report.weighted_f1));
        if best.as_ref().is_none_or(|(_, b)| report.weighted_f1 > b.weighted_f1) {
            best = Some((k, report));
        }
    }
    let (best_k, report) = best.ok_or_else(|| {
        Error::InvalidArgument(format!("every k in the grid exceeds the {} training points", index.len()))
    })?;
    Ok(SweepResult { best_k, report, grid: scores })
}

pub fn sweep_sets(train: &LabeledTileSet, val: &LabeledTileSet, k_grid: &[usize]) -> Result<SweepResult> {
    let index = KnnIndex::from_set(train)?;
    let rows: Vec<Vec<f64>> = (0..val.embeddings.len()).map(|i| val.embeddings.row_f64(i)).collect();
    sweep_k(&index, &rows, &val.labels, k_grid)
}

/// Seeded shuffle split; returns (train rows, held-out rows), each sorted.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
    let (a, b) = idx.split_at(n_train);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn brute(train: &[Vec<f64>], labels: &[u32], q: &[f64], k: usize) -> u32 {
        let unit = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let q = unit(q);
        let mut all: Vec<(f64, u32)> =
            train.iter().zip(labels).map(|(t, &l)| (unit(t).iter().zip(&q).map(|(a, b)| a * b).sum(), l)).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut best = (0u32, 0usize, f64::NEG_INFINITY);
        let mut classes: Vec<u32> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let n = all[..k].iter().filter(|p| p.1 == c).count();
            let s: f64 = all[..k].iter().filter(|p| p.1 == c).map(|p| p.0).sum();
            if n > best.1 || (n == best.1 && n > 0 && s > best.2) {
                best = (c, n, s);
            }
        }
        best.0
    }

    fn points(n: usize, d: usize, classes: u32, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<u32>) {
        let rows = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (rows, labels)
    }

    #[test]
    fn trivial_cases() {
        let idx = KnnIndex::fit(&[vec![1.0, 0.0]], &[4]).unwrap();
        assert_eq!(idx.predict(&[0.0, 1.0], 1).unwrap(), 4);
        assert!(idx.predict(&[0.0, 1.0], 2).is_err());
        assert!(idx.predict(&[0.0, 1.0], 0).is_err());

        let idx = KnnIndex::fit(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]).unwrap();
        assert_eq!(idx.predict(&[0.0, 3.0], 1).unwrap(), 1);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (train, labels) = points(500, 16, 4, &mut rng);
        let (queries, _) = points(50, 16, 4, &mut rng);
        let idx = KnnIndex::fit(&train, &labels).unwrap();
        for k in [1, 5, 15] {
            for q in &queries {
                assert_eq!(idx.predict(q, k).unwrap(), brute(&train, &labels, q, k));
            }
        }
    }

    #[test]
    fn sweep_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (train, labels) = points(60, 4, 3, &mut rng);
        let (val, val_labels) = points(20, 4, 3, &mut rng);
        let idx = KnnIndex::fit(&train, &labels).unwrap();
        let one = sweep_k(&idx, &val, &val_labels, &[1]).unwrap();
        assert_eq!(one.best_k, 1);
        let a = sweep_k(&idx, &val, &val_labels, &[5, 1, 3, 3, 5]).unwrap();
        let b = sweep_k(&idx, &val, &val_labels, &[1, 3, 5]).unwrap();
        assert_eq!(a, b);
        assert!(sweep_k(&idx, &[], &[], &[1]).is_err());
    }

    #[test]
    fn k3_beats_k1_with_adjacent_noise() {
        // class 0 cluster near +x, class 1 near +y; two mislabeled points sit next to class-0 queries
        let train = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.05],
            vec![1.0, -0.05],
            vec![0.0, 1.0],
            vec![0.05, 1.0],
            vec![-0.05, 1.0],
            vec![1.0, 0.201],
            vec![1.0, -0.201],
        ];
        let labels = vec![0, 0, 0, 1, 1, 1, 1, 1];
        let val = vec![vec![1.0, 0.2], vec![1.0, -0.2], vec![0.0, 1.0]];
        let val_labels = vec![0, 0, 1];
        let idx = KnnIndex::fit(&train, &labels).unwrap();
        for (q, l) in val.iter().zip(&val_labels) {
            assert_eq!(brute(&train, &labels, q, 3), *l);
        }
        assert_ne!(brute(&train, &labels, &val[0], 1), 0);
        let r = sweep_k(&idx, &val, &val_labels, &[1, 3]).unwrap();
        assert_eq!(r.best_k, 3);
        assert_eq!(r.report.weighted_f1, 1.0);
    }

    #[test]
    fn split_is_reproducible() {
        let a = split_indices(40, 0.75, 9);
        assert_eq!(a, split_indices(40, 0.75, 9));
        assert_eq!(a.0.len(), 30);
        assert_eq!(a.1.len(), 10);
        assert_ne!(a, split_indices(40, 0.75, 10));
    }

    proptest::proptest! {
        #[test]
        fn scale_and_permutation_invariance(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (train, labels) = points(40, 5, 3, &mut rng);
            let (queries, _) = points(10, 5, 3, &mut rng);
            let idx = KnnIndex::fit(&train, &labels).unwrap();
            let scaled: Vec<Vec<f64>> = train.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
            let idx_scaled = KnnIndex::fit(&scaled, &labels).unwrap();
            let mut perm: Vec<usize> = (0..train.len()).collect();
            perm.shuffle(&mut rng);
            let idx_perm = KnnIndex::fit(
                &perm.iter().map(|&i| train[i].clone()).collect::<Vec<_>>(),
                &perm.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
            ).unwrap();
            for q in &queries {
                for k in [1, 3, 7] {
                    let p = idx.predict(q, k).unwrap();
                    proptest::prop_assert_eq!(p, idx_perm.predict(q, k).unwrap());
                    let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
                    proptest::prop_assert_eq!(p, idx_scaled.predict(&qs, k).unwrap());
                }
            }
        }
    }
}
