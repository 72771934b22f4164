use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::base_recon::BaseHeatmap;
use crate::error::Result;
use crate::evalkit::{auroc, histogram_report, pixel_auroc, youden_threshold, CategoryHistogram, CategoryScores, ScoredSet};
use crate::fusion::{blend, image_score, FusionConfig};

/// Defect name whose subset is reported separately.
pub const THIN_LINE: &str = "thin-line";

/// What evaluation needs to know about one test image.
pub struct EvalRecord {
    pub key: String,
    pub category: String,
    pub is_anomalous: bool,
    pub defect: Option<String>,
    pub gt_mask: Array2<u8>,
    pub base: BaseHeatmap,
    pub sst: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaMetrics {
    pub gamma: f64,
    pub categories: Vec<CategoryMetrics>,
    pub mean_image_auroc: f64,
    pub mean_pixel_auroc: f64,
    /// Pixel AUROC over thin-line anomalies and all normal test images.
    pub thin_line_pixel_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub key: String,
    pub category: String,
    pub label: u8,
    pub defect: Option<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub gamma: f64,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    /// `γ = 0`: the base model alone.
    pub base_only: GammaMetrics,
    pub fused: GammaMetrics,
    pub sweep: Vec<GammaMetrics>,
    /// Per-category Youden threshold on fused image scores.
    pub thresholds: BTreeMap<String, f64>,
    pub histograms: Vec<CategoryHistogram>,
    pub scores: Vec<ScoreRow>,
}

fn metrics_for_gamma(
    records: &[EvalRecord],
    categories: &[String],
    gamma: f64,
    fusion: &FusionConfig,
    c_feat: usize,
    c_img: usize,
) -> Result<(GammaMetrics, Vec<f64>)> {
    let mut outs = Vec::with_capacity(records.len());
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        let out = blend(&r.base, &r.sst, gamma, c_feat, c_img)?;
        scores.push(image_score(&out, fusion.pool)?);
        outs.push(out);
    }
    let mut per_cat = Vec::with_capacity(categories.len());
    for cat in categories {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| &records[i].category == cat).collect();
        let set = ScoredSet::new(
            idx.iter().map(|&i| scores[i]).collect(),
            idx.iter().map(|&i| records[i].is_anomalous as u8).collect(),
        );
        let maps: Vec<_> = idx.iter().map(|&i| outs[i].clone()).collect();
        let masks: Vec<_> = idx.iter().map(|&i| records[i].gt_mask.clone()).collect();
        per_cat.push(CategoryMetrics {
            category: cat.clone(),
            image_auroc: auroc(&set)?,
            pixel_auroc: pixel_auroc(&maps, &masks)?,
        });
    }
    let thin: Vec<usize> = (0..records.len())
        .filter(|&i| !records[i].is_anomalous || records[i].defect.as_deref() == Some(THIN_LINE))
        .collect();
    let thin_line_pixel_auroc = if thin.iter().any(|&i| records[i].is_anomalous) {
        let maps: Vec<_> = thin.iter().map(|&i| outs[i].clone()).collect();
        let masks: Vec<_> = thin.iter().map(|&i| records[i].gt_mask.clone()).collect();
        Some(pixel_auroc(&maps, &masks)?)
    } else {
        None
    };
    let n = per_cat.len() as f64;
    Ok((
        GammaMetrics {
            gamma,
            mean_image_auroc: per_cat.iter().map(|c| c.image_auroc).sum::<f64>() / n,
            mean_pixel_auroc: per_cat.iter().map(|c| c.pixel_auroc).sum::<f64>() / n,
            categories: per_cat,
            thin_line_pixel_auroc,
        },
        scores,
    ))
}

/// Image and pixel AUROC for the configured blend, the base model alone and
/// every sweep value.
pub fn evaluate_records(
    records: &[EvalRecord],
    categories: &[String],
    fusion: &FusionConfig,
    sweep: &[f64],
    c_feat: usize,
    c_img: usize,
) -> Result<Metrics> {
    let (fused, scores) = metrics_for_gamma(records, categories, fusion.gamma, fusion, c_feat, c_img)?;
    let (base_only, _) = metrics_for_gamma(records, categories, 0.0, fusion, c_feat, c_img)?;
    let sweep = sweep
        .iter()
        .map(|&g| Ok(metrics_for_gamma(records, categories, g, fusion, c_feat, c_img)?.0))
        .collect::<Result<Vec<_>>>()?;

    let mut thresholds = BTreeMap::new();
    let mut cat_scores = Vec::with_capacity(categories.len());
    for cat in categories {
        let mut set = ScoredSet::default();
        let mut cs = CategoryScores { category: cat.clone(), ..Default::default() };
        for (r, &s) in records.iter().zip(&scores).filter(|(r, _)| &r.category == cat) {
            set.push(s, r.is_anomalous);
            if r.is_anomalous {
                cs.anomalous.push(s);
            } else {
                cs.normal.push(s);
            }
        }
        thresholds.insert(cat.clone(), youden_threshold(&set)?);
        cat_scores.push(cs);
    }
    let rows = records
        .iter()
        .zip(&scores)
        .map(|(r, &score)| ScoreRow {
            key: r.key.clone(),
            category: r.category.clone(),
            label: r.is_anomalous as u8,
            defect: r.defect.clone(),
            score,
        })
        .collect();
    Ok(Metrics {
        gamma: fusion.gamma,
        image_auroc: fused.mean_image_auroc,
        pixel_auroc: fused.mean_pixel_auroc,
        base_only,
        fused,
        sweep,
        thresholds,
        histograms: histogram_report(&cat_scores)?,
        scores: rows,
    })
}

/// `category,gamma,image_auroc,pixel_auroc` table in percent.
pub fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("setting,gamma,category,image_auroc,pixel_auroc\n");
    let mut push = |setting: &str, g: &GammaMetrics| {
        for c in &g.categories {
            s.push_str(&format!(
                "{setting},{},{},{:.2},{:.2}\n",
                g.gamma,
                c.category,
                100.0 * c.image_auroc,
                100.0 * c.pixel_auroc
            ));
        }
        s.push_str(&format!(
            "{setting},{},mean,{:.2},{:.2}\n",
            g.gamma,
            100.0 * g.mean_image_auroc,
            100.0 * g.mean_pixel_auroc
        ));
        if let Some(t) = g.thin_line_pixel_auroc {
            s.push_str(&format!("{setting},{},thin-line-subset,,{:.2}\n", g.gamma, 100.0 * t));
        }
    };
    push("fused", &m.fused);
    push("base-only", &m.base_only);
    for g in &m.sweep {
        push("sweep", g);
    }
    s
}
