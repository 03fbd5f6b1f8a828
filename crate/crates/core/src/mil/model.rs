//! Gated attention pooling over the top-k instances of a bag, with a single
//! linear head shared between instance and slide scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 128;
pub const PROB_CLAMP: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Four interleaved partial sums, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `V`, `U` are `hidden x dim` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilParams {
    pub dim: usize,
    pub hidden: usize,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub g_weights: Vec<f64>,
    pub g_bias: f64,
}

impl MilParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            dim,
            hidden,
            v: vec![0.0; hidden * dim],
            u: vec![0.0; hidden * dim],
            w: vec![0.0; hidden],
            g_weights: vec![0.0; dim],
            g_bias: 0.0,
        }
    }

    /// Uniform(-1/sqrt(D), 1/sqrt(D)) weights, zero bias. Draw order: V, U, w, g.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("dim and hidden must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (dim as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-a..a)).collect::<Vec<f64>>();
        let v = draw(hidden * dim);
        let u = draw(hidden * dim);
        let w = draw(hidden);
        let g_weights = draw(dim);
        Ok(Self { dim, hidden, v, u, w, g_weights, g_bias: 0.0 })
    }

    pub fn validate(&self) -> Result<()> {
        let (d, l) = (self.dim, self.hidden);
        if self.v.len() != l * d || self.u.len() != l * d || self.w.len() != l || self.g_weights.len() != d {
            return Err(Error::DimensionMismatch(format!("parameter shapes inconsistent with D={d}, L={l}")));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        2 * self.hidden * self.dim + self.hidden + self.dim + 1
    }

    /// Concatenation V, U, w, g_weights, g_bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.u);
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.g_weights);
        out.push(self.g_bias);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let (v, rest) = flat.split_at(self.v.len());
        let (u, rest) = rest.split_at(self.u.len());
        let (w, rest) = rest.split_at(self.w.len());
        let (g, rest) = rest.split_at(self.g_weights.len());
        self.v.copy_from_slice(v);
        self.u.copy_from_slice(u);
        self.w.copy_from_slice(w);
        self.g_weights.copy_from_slice(g);
        self.g_bias = rest[0];
    }

    fn check_dim(&self, n_values: usize, what: &str) -> Result<usize> {
        if n_values % self.dim != 0 {
            return Err(Error::DimensionMismatch(format!("{what}: {n_values} values not a multiple of D={}", self.dim)));
        }
        Ok(n_values / self.dim)
    }

    pub fn logit(&self, h: &[f64]) -> f64 {
        dot(&self.g_weights, h) + self.g_bias
    }
}

/// Shared head on every row of an `n x D` buffer.
pub fn instance_scores(params: &MilParams, features: &[f64]) -> Result<Vec<f64>> {
    params.check_dim(features.len(), "instance features")?;
    Ok(features.chunks_exact(params.dim).map(|h| sigmoid(params.logit(h))).collect())
}

/// Indices of the `min(k, n)` largest scores in descending order, ties to the
/// smaller index.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// Cached attention forward pass over the selected rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    /// `k x L` tanh(V h) and sigmoid(U h).
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub alpha: Vec<f64>,
    pub z: Vec<f64>,
}

/// Gated attention: e_i = w . (tanh(V h_i) * sigmoid(U h_i)), alpha = softmax(e),
/// z = sum_i alpha_i h_i, summed in row order.
pub fn attention_aggregate(params: &MilParams, rows: &[&[f64]]) -> Result<Attention> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("attention needs at least one instance".into()));
    }
    let (d, l) = (params.dim, params.hidden);
    let mut t = Vec::with_capacity(rows.len() * l);
    let mut s = Vec::with_capacity(rows.len() * l);
    let mut e = Vec::with_capacity(rows.len());
    for h in rows {
        if h.len() != d {
            return Err(Error::DimensionMismatch(format!("instance of dim {} vs D={d}", h.len())));
        }
        let mut ei = 0.0;
        for j in 0..l {
            let tj = dot(&params.v[j * d..(j + 1) * d], h).tanh();
            let sj = sigmoid(dot(&params.u[j * d..(j + 1) * d], h));
            ei += params.w[j] * tj * sj;
            t.push(tj);
            s.push(sj);
        }
        e.push(ei);
    }
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let alpha: Vec<f64> = exp.iter().map(|v| v / total).collect();
    let mut z = vec![0.0; d];
    for (a, h) in alpha.iter().zip(rows) {
        z.iter_mut().zip(h.iter()).for_each(|(zi, hi)| *zi += a * hi);
    }
    Ok(Attention { t, s, e, alpha, z })
}

pub fn slide_score(params: &MilParams, z: &[f64]) -> f64 {
    sigmoid(params.logit(z))
}

pub fn bag_label(instance_labels: &[u8]) -> u8 {
    u8::from(instance_labels.iter().any(|&y| y != 0))
}

pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Derivative of `bce(sigmoid(x), y)` w.r.t. the logit x; zero where the
/// clamp is active.
fn bce_logit_grad(p: f64, y: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        0.0
    } else {
        p - y
    }
}

pub fn combined_loss(slide_pred: f64, slide_label: u8, tile_preds: &[f64], tile_labels: &[u8], lambda_tile: f64) -> f64 {
    let slide = bce(slide_pred, slide_label as f64);
    if tile_preds.is_empty() {
        return slide;
    }
    let tile = tile_preds.iter().zip(tile_labels).map(|(&p, &y)| bce(p, y as f64)).sum::<f64>() / tile_preds.len() as f64;
    slide + lambda_tile * tile
}

/// Complete forward pass for one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagForward {
    pub instance_scores: Vec<f64>,
    /// Selected rows in descending-score order.
    pub selected: Vec<usize>,
    pub attention: Attention,
    pub score: f64,
}

/// Scores every instance, keeps the top `k` (or all when `k` is `None`),
/// pools them and scores the pooled vector.
pub fn forward_bag(params: &MilParams, features: &[f64], k: Option<usize>) -> Result<BagForward> {
    let scores = instance_scores(params, features)?;
    let n = scores.len();
    let selected = select_topk(&scores, k.unwrap_or(n));
    forward_selected(params, features, scores, selected)
}

/// Forward pass with a fixed selection (used to hold top-k constant).
pub fn forward_selected(params: &MilParams, features: &[f64], scores: Vec<f64>, selected: Vec<usize>) -> Result<BagForward> {
    let d = params.dim;
    let rows: Vec<&[f64]> = selected.iter().map(|&i| &features[i * d..(i + 1) * d]).collect();
    let attention = attention_aggregate(params, &rows)?;
    let score = slide_score(params, &attention.z);
    Ok(BagForward { instance_scores: scores, selected, attention, score })
}

/// Labeled instances scored directly by the shared head.
#[derive(Clone, Copy, Debug)]
pub struct TileBatch<'a> {
    /// `m x D`, row-major.
    pub features: &'a [f64],
    pub labels: &'a [u8],
}

impl TileBatch<'_> {
    pub fn empty() -> TileBatch<'static> {
        TileBatch { features: &[], labels: &[] }
    }
}

/// Adds `weight * d(slide BCE)/d(params)` for one bag to `grads`, with the
/// selection held fixed. Returns the unweighted slide BCE.
pub fn accumulate_slide_grad(params: &MilParams, features: &[f64], fwd: &BagForward, label: u8, weight: f64, grads: &mut MilParams) -> f64 {
    let (d, l) = (params.dim, params.hidden);
    let att = &fwd.attention;
    let y = label as f64;
    let delta = weight * bce_logit_grad(fwd.score, y);
    for (g, zi) in grads.g_weights.iter_mut().zip(&att.z) {
        *g += delta * zi;
    }
    grads.g_bias += delta;
    if delta != 0.0 {
        let dz: Vec<f64> = params.g_weights.iter().map(|g| delta * g).collect();
        let rows: Vec<&[f64]> = fwd.selected.iter().map(|&i| &features[i * d..(i + 1) * d]).collect();
        let dalpha: Vec<f64> = rows.iter().map(|h| dot(&dz, h)).collect();
        let mean: f64 = att.alpha.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
        for (i, h) in rows.iter().enumerate() {
            let de = att.alpha[i] * (dalpha[i] - mean);
            if de == 0.0 {
                continue;
            }
            for j in 0..l {
                let t = att.t[i * l + j];
                let s = att.s[i * l + j];
                grads.w[j] += de * t * s;
                let da = de * params.w[j] * s * (1.0 - t * t);
                let db = de * params.w[j] * t * s * (1.0 - s);
                let vrow = &mut grads.v[j * d..(j + 1) * d];
                vrow.iter_mut().zip(h.iter()).for_each(|(g, hv)| *g += da * hv);
                let urow = &mut grads.u[j * d..(j + 1) * d];
                urow.iter_mut().zip(h.iter()).for_each(|(g, hv)| *g += db * hv);
            }
        }
    }
    bce(fwd.score, y)
}

/// Adds `weight * d(mean tile BCE)/d(params)`. Returns the unweighted mean
/// tile BCE (0 for an empty batch).
pub fn accumulate_tile_grad(params: &MilParams, tiles: TileBatch<'_>, weight: f64, grads: &mut MilParams) -> Result<f64> {
    let m = params.check_dim(tiles.features.len(), "tile features")?;
    if m != tiles.labels.len() {
        return Err(Error::DimensionMismatch(format!("{m} tiles vs {} labels", tiles.labels.len())));
    }
    if m == 0 {
        return Ok(0.0);
    }
    let scale = weight / m as f64;
    let mut loss = 0.0;
    for (x, &y) in tiles.features.chunks_exact(params.dim).zip(tiles.labels) {
        let p = sigmoid(params.logit(x));
        loss += bce(p, y as f64);
        let delta = scale * bce_logit_grad(p, y as f64);
        grads.g_weights.iter_mut().zip(x).for_each(|(g, xv)| *g += delta * xv);
        grads.g_bias += delta;
    }
    Ok(loss / m as f64)
}

/// Combined loss of a single bag plus a tile batch, and its gradient with the
/// top-k selection held at the current parameters.
pub fn loss_and_grad(
    params: &MilParams,
    features: &[f64],
    label: u8,
    tiles: TileBatch<'_>,
    lambda_tile: f64,
    k: Option<usize>,
) -> Result<(f64, MilParams)> {
    let fwd = forward_bag(params, features, k)?;
    let mut grads = MilParams::zeros(params.dim, params.hidden);
    let slide = accumulate_slide_grad(params, features, &fwd, label, 1.0, &mut grads);
    let tile = accumulate_tile_grad(params, tiles, lambda_tile, &mut grads)?;
    Ok((slide + lambda_tile * tile, grads))
}

/// Loss only, recomputing the selection; the finite-difference counterpart of
/// [`loss_and_grad`].
pub fn loss(params: &MilParams, features: &[f64], label: u8, tiles: TileBatch<'_>, lambda_tile: f64, k: Option<usize>) -> Result<f64> {
    let fwd = forward_bag(params, features, k)?;
    let preds = instance_scores(params, tiles.features)?;
    Ok(combined_loss(fwd.score, label, &preds, tiles.labels, lambda_tile))
}
