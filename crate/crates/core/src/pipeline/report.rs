//! PNG panels and score histograms.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::evaluate::{Metrics, ScoreRow};
use crate::checkpoint::write_atomic;
use crate::error::Result;
use crate::evalkit::CategoryHistogram;
use crate::resample::bilinear;

const GAP: u32 = 2;
const GAUGE: u32 = 12;
const BACKGROUND: Rgb<u8> = Rgb([24, 24, 24]);

/// Classic jet colour map on `[0, 1]`.
pub fn jet(v: f64) -> Rgb<u8> {
    let x = v.clamp(0.0, 1.0);
    let ch = |c: f64| ((1.5 - (4.0 * x - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0), ch(2.0), ch(1.0)])
}

/// Everything drawn in one panel row.
pub struct PanelInput<'a> {
    pub image: &'a Array3<f32>,
    pub base: &'a Array2<f32>,
    pub diffusion: &'a Array2<f64>,
    pub fused: &'a Array2<f64>,
    pub mask: &'a Array2<u8>,
    pub score: f64,
    pub threshold: f64,
    /// Normalisers for the three heatmaps and the score gauge.
    pub scale: PanelScale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelScale {
    pub base: f64,
    pub diffusion: f64,
    pub fused: f64,
    pub score: f64,
}

fn tile_factor(h: usize) -> u32 {
    ((128 / h.max(1)) as u32).max(1)
}

fn put_tile(canvas: &mut RgbImage, x0: u32, factor: u32, h: usize, w: usize, px: impl Fn(usize, usize) -> Rgb<u8>) {
    for y in 0..h * factor as usize {
        for x in 0..w * factor as usize {
            canvas.put_pixel(x0 + x as u32, y as u32, px(y / factor as usize, x / factor as usize));
        }
    }
}

fn rgb_of(img: &Array3<f32>, y: usize, x: usize) -> [f64; 3] {
    let c = img.dim().2;
    let at = |ch: usize| img[[y, x, ch.min(c - 1)]] as f64;
    [at(0), at(1), at(2)]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `original | base | diffusion | fused overlay | mask | score gauge`.
pub fn render_panel(p: &PanelInput) -> RgbImage {
    let (h, w, _) = p.image.dim();
    let f = tile_factor(h);
    let (th, tw) = (h as u32 * f, w as u32 * f);
    let mut canvas = RgbImage::from_pixel(5 * tw + 5 * GAP + GAUGE, th, BACKGROUND);
    let base_up = bilinear(p.base.view(), h, w);
    let norm = |v: f64, s: f64| if s > 0.0 { v / s } else { 0.0 };

    put_tile(&mut canvas, 0, f, h, w, |y, x| {
        let [r, g, b] = rgb_of(p.image, y, x);
        Rgb([to_u8(r), to_u8(g), to_u8(b)])
    });
    put_tile(&mut canvas, tw + GAP, f, h, w, |y, x| jet(norm(base_up[[y, x]] as f64, p.scale.base)));
    put_tile(&mut canvas, 2 * (tw + GAP), f, h, w, |y, x| jet(norm(p.diffusion[[y, x]], p.scale.diffusion)));
    put_tile(&mut canvas, 3 * (tw + GAP), f, h, w, |y, x| {
        let heat = jet(norm(p.fused[[y, x]], p.scale.fused)).0;
        let rgb = rgb_of(p.image, y, x);
        let mix = |i: usize| to_u8(0.5 * rgb[i] + 0.5 * heat[i] as f64 / 255.0);
        Rgb([mix(0), mix(1), mix(2)])
    });
    put_tile(&mut canvas, 4 * (tw + GAP), f, h, w, |y, x| {
        if p.mask[[y, x]] != 0 { Rgb([255, 255, 255]) } else { Rgb([0, 0, 0]) }
    });

    // Gauge: bar up to the image score, a white line at the threshold.
    let x0 = 5 * (tw + GAP);
    let level = |v: f64| th - ((norm(v, p.scale.score).clamp(0.0, 1.0) * (th - 1) as f64).round() as u32) - 1;
    let top = level(p.score);
    let colour = if p.score >= p.threshold { Rgb([220, 40, 40]) } else { Rgb([40, 180, 80]) };
    for y in top..th {
        for x in 0..GAUGE {
            canvas.put_pixel(x0 + x, y, colour);
        }
    }
    let line = level(p.threshold);
    for x in 0..GAUGE {
        canvas.put_pixel(x0 + x, line, Rgb([255, 255, 255]));
    }
    canvas
}

/// Overlaid normal (blue) and anomalous (red) histograms, with the
/// threshold marked in black.
pub fn render_histogram(hist: &CategoryHistogram, threshold: Option<f64>) -> RgbImage {
    let (bin_w, height) = (8u32, 200u32);
    let bins = hist.normal.len() as u32;
    let mut img = RgbImage::from_pixel(bins * bin_w, height, Rgb([255, 255, 255]));
    let peak = hist.normal.iter().chain(&hist.anomalous).cloned().fold(0.0, f64::max).max(1e-12);
    for (b, (&n, &a)) in hist.normal.iter().zip(&hist.anomalous).enumerate() {
        let hn = ((n / peak) * (height - 1) as f64).round() as u32;
        let ha = ((a / peak) * (height - 1) as f64).round() as u32;
        for x in b as u32 * bin_w..(b as u32 + 1) * bin_w - 1 {
            for y in 0..height {
                let from_bottom = height - 1 - y;
                let (inn, ina) = (from_bottom < hn, from_bottom < ha);
                let px = match (inn, ina) {
                    (true, true) => Rgb([150, 60, 170]),
                    (true, false) => Rgb([60, 100, 220]),
                    (false, true) => Rgb([220, 60, 60]),
                    _ => continue,
                };
                img.put_pixel(x, y, px);
            }
        }
    }
    if let Some(t) = threshold {
        let (lo, hi) = hist.range;
        if hi > lo {
            let x = (((t - lo) / (hi - lo)).clamp(0.0, 1.0) * (bins * bin_w - 1) as f64).round() as u32;
            for y in 0..height {
                img.put_pixel(x, y, Rgb([0, 0, 0]));
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<PathBuf> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)?;
    Ok(path.to_path_buf())
}

/// Panel file name for a sample.
pub fn panel_name(category: &str, sample_id: &str) -> String {
    format!("{category}_{sample_id}_panel.png")
}

/// Default panel selection: `per_label` normal and anomalous test samples
/// of every category. Anomalous picks cycle through the defect kinds.
pub fn default_panel_keys(metrics: &Metrics, per_label: usize) -> Vec<String> {
    let mut keys = Vec::new();
    for cat in metrics.thresholds.keys() {
        for label in [0u8, 1] {
            let mut by_defect: BTreeMap<Option<&str>, Vec<&ScoreRow>> = BTreeMap::new();
            for r in metrics.scores.iter().filter(|r| &r.category == cat && r.label == label) {
                by_defect.entry(r.defect.as_deref()).or_default().push(r);
            }
            for rows in by_defect.values_mut() {
                rows.sort_by(|a, b| a.key.cmp(&b.key));
            }
            let longest = by_defect.values().map(Vec::len).max().unwrap_or(0);
            let interleaved = (0..longest).flat_map(|i| by_defect.values().filter_map(move |rows| rows.get(i)));
            keys.extend(interleaved.take(per_label).map(|r| r.key.clone()));
        }
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::GammaMetrics;

    #[test]
    fn default_panels_cycle_through_defects() {
        let row = |key: &str, label: u8, defect: Option<&str>| ScoreRow {
            key: key.into(),
            category: "a".into(),
            label,
            defect: defect.map(String::from),
            score: 0.0,
        };
        let empty = GammaMetrics {
            gamma: 0.0,
            categories: vec![],
            mean_image_auroc: 0.0,
            mean_pixel_auroc: 0.0,
            thin_line_pixel_auroc: None,
        };
        let m = Metrics {
            gamma: 0.9,
            image_auroc: 1.0,
            pixel_auroc: 1.0,
            base_only: empty.clone(),
            fused: empty,
            sweep: vec![],
            thresholds: BTreeMap::from([("a".to_string(), 0.5)]),
            histograms: vec![],
            scores: vec![
                row("a_g1", 0, None),
                row("a_g0", 0, None),
                row("a_b0", 1, Some("blob")),
                row("a_b1", 1, Some("blob")),
                row("a_t0", 1, Some("thin-line")),
            ],
        };
        assert_eq!(default_panel_keys(&m, 2), vec!["a_g0", "a_g1", "a_b0", "a_t0"]);
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), Rgb([0, 0, 128]));
        assert_eq!(jet(1.0), Rgb([128, 0, 0]));
        assert_eq!(jet(0.5), Rgb([128, 255, 128]));
    }

    #[test]
    fn panel_layout_and_gauge() {
        let img = Array3::from_elem((8, 8, 3), 0.5f32);
        let base = Array2::from_elem((2, 2), 1.0f32);
        let map = Array2::from_elem((8, 8), 0.5);
        let mask = Array2::zeros((8, 8));
        let scale = PanelScale { base: 1.0, diffusion: 1.0, fused: 1.0, score: 1.0 };
        let p = PanelInput { image: &img, base: &base, diffusion: &map, fused: &map, mask: &mask, score: 0.2, threshold: 0.6, scale };
        let out = render_panel(&p);
        let f = tile_factor(8);
        assert_eq!(out.dimensions(), (5 * 8 * f + 5 * GAP + GAUGE, 8 * f));
        // Below threshold: green bar at the bottom, white threshold line above it.
        let x = 5 * (8 * f + GAP) + 1;
        assert_eq!(*out.get_pixel(x, 8 * f - 1), Rgb([40, 180, 80]));
        let line_y = (0..8 * f).find(|&y| *out.get_pixel(x, y) == Rgb([255, 255, 255])).unwrap();
        let bar_top = (0..8 * f).find(|&y| *out.get_pixel(x, y) == Rgb([40, 180, 80])).unwrap();
        assert!(line_y < bar_top);
    }
}
