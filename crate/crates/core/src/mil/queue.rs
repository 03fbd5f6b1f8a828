use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::select_topk;

pub const DEFAULT_QUEUE_CAPACITY: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueEntry {
    pub tile_id: String,
    pub score: f64,
}

/// Highest-scoring tiles of each positive slide (confident positives) and
/// each negative slide (hard negatives), refreshed whenever the slide is seen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueuePair {
    pub capacity: usize,
    pub confident_positives: BTreeMap<String, Vec<QueueEntry>>,
    pub hard_negatives: BTreeMap<String, Vec<QueueEntry>>,
}

impl Default for QueuePair {
    fn default() -> Self {
        Self::new(DEFAULT_QUEUE_CAPACITY)
    }
}

impl QueuePair {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, confident_positives: BTreeMap::new(), hard_negatives: BTreeMap::new() }
    }

    /// Replaces the slide's list with its current top `capacity` tiles.
    pub fn update(&mut self, slide_id: &str, slide_label: u8, scores: &[f64], ids: &[String]) {
        assert_eq!(scores.len(), ids.len(), "scores and ids must align");
        let entries = select_topk(scores, self.capacity)
            .into_iter()
            .map(|i| QueueEntry { tile_id: ids[i].clone(), score: scores[i] })
            .collect();
        self.side_mut(slide_label).insert(slide_id.to_string(), entries);
    }

    pub fn side(&self, polarity: u8) -> &BTreeMap<String, Vec<QueueEntry>> {
        if polarity == 1 {
            &self.confident_positives
        } else {
            &self.hard_negatives
        }
    }

    fn side_mut(&mut self, polarity: u8) -> &mut BTreeMap<String, Vec<QueueEntry>> {
        if polarity == 1 {
            &mut self.confident_positives
        } else {
            &mut self.hard_negatives
        }
    }

    /// Slides with at least one queued tile, in id order.
    pub fn nonempty_slides(&self, polarity: u8) -> Vec<&str> {
        self.side(polarity).iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| k.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    #[test]
    fn negative_slide_keeps_top_ten() {
        let mut q = QueuePair::default();
        let scores: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64 / 20.0).collect();
        q.update("s", 0, &scores, &ids(20));
        let list = &q.hard_negatives["s"];
        assert_eq!(list.len(), 10);
        assert!(list.windows(2).all(|w| w[0].score >= w[1].score));
        let min_kept = list.last().unwrap().score;
        let kept: Vec<&str> = list.iter().map(|e| e.tile_id.as_str()).collect();
        for (i, s) in scores.iter().enumerate() {
            if !kept.contains(&format!("t{i}").as_str()) {
                assert!(*s <= min_kept);
            }
        }
        assert!(q.confident_positives.is_empty());
    }

    #[test]
    fn short_slide_and_replacement() {
        let mut q = QueuePair::default();
        q.update("p", 1, &[0.1, 0.9, 0.5, 0.3], &ids(4));
        assert_eq!(q.confident_positives["p"].len(), 4);
        assert_eq!(q.confident_positives["p"][0].tile_id, "t1");
        q.update("p", 1, &[0.8, 0.1], &ids(2));
        assert_eq!(q.confident_positives["p"].len(), 2);
        assert_eq!(q.confident_positives["p"][0].tile_id, "t0");
        assert_eq!(q.nonempty_slides(1), vec!["p"]);
    }
}
