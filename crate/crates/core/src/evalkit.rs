//! Ranking metrics and score reports.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::resample::bilinear_f64;

pub const HISTOGRAM_BINS: usize = 50;

/// Scores with binary labels (1 = anomalous).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Self {
        Self { scores, labels }
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label as u8);
    }
}

/// Mann–Whitney AUROC with average ranks, so ties count one half.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    if set.scores.len() != set.labels.len() {
        return shape_err(format!("{} scores, {} labels", set.scores.len(), set.labels.len()));
    }
    if set.scores.iter().any(|s| s.is_nan()) {
        return arg_err("scores contain NaN");
    }
    let pos = set.labels.iter().filter(|&&l| l != 0).count();
    let neg = set.labels.len() - pos;
    if pos == 0 || neg == 0 {
        return arg_err("AUROC needs both classes");
    }
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let positives = order[i..j].iter().filter(|&&k| set.labels[k] != 0).count();
        rank_sum += mean_rank * positives as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUROC over every pixel of every image.
pub fn pixel_auroc(heatmaps: &[Array2<f64>], masks: &[Array2<u8>]) -> Result<f64> {
    if heatmaps.len() != masks.len() {
        return shape_err(format!("{} heatmaps, {} masks", heatmaps.len(), masks.len()));
    }
    let total: usize = masks.iter().map(|m| m.len()).sum();
    if total == 0 {
        return arg_err("empty pixel pool");
    }
    let mut set = ScoredSet {
        scores: Vec::with_capacity(total),
        labels: Vec::with_capacity(total),
    };
    for (h, m) in heatmaps.iter().zip(masks) {
        if h.dim() != m.dim() {
            return shape_err(format!("heatmap {:?} vs mask {:?}", h.dim(), m.dim()));
        }
        set.scores.extend(h.iter());
        set.labels.extend(m.iter().map(|&v| (v != 0) as u8));
    }
    auroc(&set)
}

/// Pixel AUROC (in percent) of ground-truth masks after a bilinear
/// down-and-up round trip through `1/factor` resolution.
pub fn mask_degradation_experiment(masks: &[Array2<u8>], factors: &[usize]) -> Result<Vec<(usize, f64)>> {
    if masks.is_empty() {
        return arg_err("no masks");
    }
    let mut out = Vec::with_capacity(factors.len());
    for &f in factors {
        let mut degraded = Vec::with_capacity(masks.len());
        for m in masks {
            let (h, w) = m.dim();
            if f == 0 || h % f != 0 || w % f != 0 {
                return arg_err(format!("factor {f} does not divide {h}x{w}"));
            }
            let float = m.mapv(|v| (v != 0) as u8 as f64);
            let small = bilinear_f64(float.view(), h / f, w / f);
            degraded.push(bilinear_f64(small.view(), h, w));
        }
        out.push((f, 100.0 * pixel_auroc(&degraded, masks)?));
    }
    Ok(out)
}

/// Threshold maximising `TPR − FPR` when scores `≥ threshold` are called
/// anomalous; placed halfway to the next lower score.
pub fn youden_threshold(set: &ScoredSet) -> Result<f64> {
    auroc(set)?;
    let mut uniq: Vec<f64> = set.scores.clone();
    uniq.sort_by(|a, b| b.total_cmp(a));
    uniq.dedup();
    let pos = set.labels.iter().filter(|&&l| l != 0).count() as f64;
    let neg = set.labels.len() as f64 - pos;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &t) in uniq.iter().enumerate() {
        let tp = set.scores.iter().zip(&set.labels).filter(|(s, l)| **l != 0 && **s >= t).count() as f64;
        let fp = set.scores.iter().zip(&set.labels).filter(|(s, l)| **l == 0 && **s >= t).count() as f64;
        let j = tp / pos - fp / neg;
        if j > best.0 {
            best = (j, i);
        }
    }
    let i = best.1;
    Ok(match uniq.get(i + 1) {
        Some(lower) => (uniq[i] + lower) / 2.0,
        None => uniq[i],
    })
}

/// Test scores of one category, split by label.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryScores {
    pub category: String,
    pub normal: Vec<f64>,
    pub anomalous: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryHistogram {
    pub category: String,
    /// Min and max used for normalisation.
    pub range: (f64, f64),
    pub normal: Vec<f64>,
    pub anomalous: Vec<f64>,
    /// `Σ_b min(normal_b, anomalous_b)`.
    pub overlap: f64,
}

fn histogram(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut bins = vec![0.0; HISTOGRAM_BINS];
    let span = hi - lo;
    for &v in values {
        let x = if span > 0.0 { (v - lo) / span } else { 0.0 };
        let b = ((x * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        bins[b] += 1.0;
    }
    let n = values.len() as f64;
    bins.iter_mut().for_each(|b| *b /= n);
    bins
}

/// Min-max normalised 50-bin histograms per category and label.
pub fn histogram_report(categories: &[CategoryScores]) -> Result<Vec<CategoryHistogram>> {
    categories
        .iter()
        .map(|c| {
            if c.normal.is_empty() || c.anomalous.is_empty() {
                return arg_err(format!("category {} lacks normal or anomalous scores", c.category));
            }
            let all = c.normal.iter().chain(&c.anomalous);
            let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
            let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
            let normal = histogram(&c.normal, lo, hi);
            let anomalous = histogram(&c.anomalous, lo, hi);
            let overlap = normal.iter().zip(&anomalous).map(|(a, b)| a.min(*b)).sum();
            Ok(CategoryHistogram {
                category: c.category.clone(),
                range: (lo, hi),
                normal,
                anomalous,
                overlap,
            })
        })
        .collect()
}

/// `category,label,bin,lower,upper,mass` rows.
pub fn histograms_to_csv(hists: &[CategoryHistogram]) -> String {
    let mut s = String::from("category,label,bin,lower,upper,mass\n");
    for h in hists {
        for (label, bins) in [("normal", &h.normal), ("anomalous", &h.anomalous)] {
            for (b, m) in bins.iter().enumerate() {
                let lo = b as f64 / HISTOGRAM_BINS as f64;
                let hi = (b + 1) as f64 / HISTOGRAM_BINS as f64;
                s.push_str(&format!("{},{label},{b},{lo:.2},{hi:.2},{m:.6}\n", h.category));
            }
        }
    }
    s
}

/// Percentage with two decimals, as used in result tables.
pub fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}
