//! Multi-scale diffusion heatmaps, their spatio-temporal average, mean-filter
//! smoothing, blending with the base-model map and the image-level score.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::base_recon::BaseHeatmap;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::inpaint::diff_heatmap;
use crate::resample::{area_downsample, bilinear, bilinear_f64};

/// Diffusion heatmaps keyed by `(t, c, l)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeatmapStack {
    pub timesteps: Vec<usize>,
    pub grid_sizes: Vec<usize>,
    pub scales: Vec<usize>,
    pub entries: BTreeMap<(usize, usize, usize), Array2<f64>>,
}

impl HeatmapStack {
    pub fn new(timesteps: &[usize], grid_sizes: &[usize], scales: &[usize]) -> Self {
        Self {
            timesteps: timesteps.to_vec(),
            grid_sizes: grid_sizes.to_vec(),
            scales: scales.to_vec(),
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, t: usize, c: usize, l: usize, map: Array2<f64>) {
        self.entries.insert((t, c, l), map);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub gamma: f64,
    /// Side of the smoothing mean filter (odd).
    pub smoothing: usize,
    /// Side of the average-pooling window of the image score.
    pub pool: usize,
    pub scales: Vec<usize>,
}

impl FusionConfig {
    /// Defaults for a square image of side `side`: the filter scales from 41
    /// at 224 pixels and the pooling window covers one `side/14` cell.
    pub fn for_side(side: usize) -> Self {
        let v = 41.0 * side as f64 / 224.0;
        let k = ((v - 1.0) / 2.0).round().max(0.0) as usize;
        Self {
            gamma: 0.9,
            smoothing: 2 * k + 1,
            pool: ((side as f64 / 14.0).round() as usize).max(1),
            scales: vec![1, 2, 4, 8],
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.smoothing.is_multiple_of(2) || self.smoothing >= height.min(width) {
            return Err(Error::Config(format!("smoothing size {} must be odd and below the image side", self.smoothing)));
        }
        if self.pool == 0 || self.pool > height.min(width) {
            return Err(Error::Config(format!("pool window {} outside [1, image side]", self.pool)));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        for &l in &self.scales {
            if l == 0 || !height.is_multiple_of(l) || !width.is_multiple_of(l) {
                return Err(Error::Config(format!("scale {l} does not divide {height}x{width}")));
            }
        }
        Ok(())
    }
}

/// Channel distance between `l`-times area-downsampled images, upsampled
/// back bilinearly.
pub fn multiscale_heatmap(original: &Array3<f64>, output: &Array3<f64>, l: usize) -> Result<Array2<f64>> {
    if original.dim() != output.dim() {
        return shape_err(format!("{:?} vs {:?}", original.dim(), output.dim()));
    }
    if l == 1 {
        return diff_heatmap(original, output);
    }
    let (h, w, _) = original.dim();
    let a = area_downsample(original.view(), l)?;
    let b = area_downsample(output.view(), l)?;
    Ok(bilinear_f64(diff_heatmap(&a, &b)?.view(), h, w))
}

/// Per-pixel mean over every `(t, c, l)` entry of the stack.
pub fn st_average(stack: &HeatmapStack) -> Result<Array2<f64>> {
    let mut acc: Option<Array2<f64>> = None;
    let mut n = 0usize;
    for &t in &stack.timesteps {
        for &c in &stack.grid_sizes {
            for &l in &stack.scales {
                let map = stack
                    .entries
                    .get(&(t, c, l))
                    .ok_or_else(|| Error::InvalidArgument(format!("stack is missing entry (t={t}, c={c}, l={l})")))?;
                match &mut acc {
                    None => acc = Some(map.clone()),
                    Some(a) if a.dim() == map.dim() => *a += map,
                    Some(_) => return shape_err("stack entries differ in shape"),
                }
                n += 1;
            }
        }
    }
    let acc = acc.ok_or_else(|| Error::InvalidArgument("empty heatmap stack".into()))?;
    Ok(acc / n as f64)
}

/// Half-sample symmetric reflection: `d c b a | a b c d | d c b a`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Separable `size×size` box mean with symmetric padding. For even sizes
/// the window covers one more pixel before the centre than after.
fn box_mean(map: &Array2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let lo = (size / 2) as isize;
    let norm = size as f64;
    let mut rows = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..size as isize).map(|k| map[[y, reflect(x as isize - lo + k, w)]]).sum();
            rows[[y, x]] = s / norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (0..size as isize).map(|k| rows[[reflect(y as isize - lo + k, h), x]]).sum();
            out[[y, x]] = s / norm;
        }
    }
    out
}

/// `m×m` mean filter with symmetric padding.
pub fn smooth(map: &Array2<f64>, m: usize) -> Result<Array2<f64>> {
    let (h, w) = map.dim();
    if m.is_multiple_of(2) {
        return arg_err(format!("filter size {m} must be odd"));
    }
    if m >= h.min(w) && m != 1 {
        return arg_err(format!("filter size {m} must be below the map side {}", h.min(w)));
    }
    Ok(box_mean(map, m))
}

/// `(1−γ)·H_base↑/C_feat + γ·H_SST/C_img`.
pub fn blend(base: &BaseHeatmap, sst: &Array2<f64>, gamma: f64, c_feat: usize, c_img: usize) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return arg_err(format!("gamma {gamma} outside [0, 1]"));
    }
    if c_feat == 0 || c_img == 0 {
        return arg_err("channel normalisers must be positive");
    }
    let (h, w) = sst.dim();
    let up = bilinear(base.data.view(), h, w);
    let (a, b) = ((1.0 - gamma) / c_feat as f64, gamma / c_img as f64);
    Ok(ndarray::Zip::from(&up).and(sst).map_collect(|&u, &s| {
        if gamma == 0.0 {
            u as f64 / c_feat as f64
        } else if gamma == 1.0 {
            s / c_img as f64
        } else {
            a * u as f64 + b * s
        }
    }))
}

/// Maximum of the `p×p` average-pooled map (stride 1, symmetric padding).
pub fn image_score(map: &Array2<f64>, pool: usize) -> Result<f64> {
    let (h, w) = map.dim();
    if pool == 0 || pool > h.min(w) {
        return arg_err(format!("pool window {pool} outside [1, {}]", h.min(w)));
    }
    let pooled = if pool == 1 { map.clone() } else { box_mean(map, pool) };
    Ok(pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Intermediate and final maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMaps {
    pub st: Array2<f64>,
    pub sst: Array2<f64>,
    pub out: Array2<f64>,
    pub score: f64,
}

pub fn fuse(stack: &HeatmapStack, base: &BaseHeatmap, cfg: &FusionConfig, c_feat: usize, c_img: usize) -> Result<FusedMaps> {
    let st = st_average(stack)?;
    let sst = smooth(&st, cfg.smoothing)?;
    let out = blend(base, &sst, cfg.gamma, c_feat, c_img)?;
    let score = image_score(&out, cfg.pool)?;
    Ok(FusedMaps { st, sst, out, score })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_map(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_simple_fn((h, w), || rng.random::<f64>())
    }

    #[test]
    fn paper_defaults_scale_with_resolution() {
        let c224 = FusionConfig::for_side(224);
        assert_eq!((c224.smoothing, c224.pool), (41, 16));
        let c64 = FusionConfig::for_side(64);
        assert_eq!((c64.smoothing, c64.pool), (11, 5));
        assert_eq!(c64.gamma, 0.9);
        assert_eq!(c64.scales, vec![1, 2, 4, 8]);
        assert!(c64.validate(64, 64).is_ok());
        assert!(FusionConfig { smoothing: 10, ..c64.clone() }.validate(64, 64).is_err());
        assert!(FusionConfig { scales: vec![3], ..c64 }.validate(64, 64).is_err());
    }

    #[test]
    fn multiscale_cases() {
        let mut rng = seeded(1);
        let a = Array3::from_shape_simple_fn((8, 8, 3), || rng.random::<f64>());
        let b = Array3::from_shape_simple_fn((8, 8, 3), || rng.random::<f64>());
        assert_eq!(multiscale_heatmap(&a, &b, 1).unwrap(), diff_heatmap(&a, &b).unwrap());
        for l in [1, 2, 4, 8] {
            assert!(multiscale_heatmap(&a, &a, l).unwrap().iter().all(|&v| v == 0.0));
        }
        assert!(multiscale_heatmap(&a, &b, 3).is_err());
        // One anomalous pixel of magnitude 1: its 2×2 cell averages to 1/4.
        // Upsampling by 2 spreads that value with tap weights (1/4, 3/4) per
        // axis, so the peak is 1/4·(3/4)² and the total mass is 1/4·2².
        let zero = Array3::zeros((8, 8, 1));
        let mut one = zero.clone();
        one[[2, 2, 0]] = 1.0;
        let cell = area_downsample(one.view(), 2).unwrap();
        assert_eq!(cell[[1, 1, 0]], 0.25);
        let m = multiscale_heatmap(&zero, &one, 2).unwrap();
        let peak = m.iter().cloned().fold(0.0, f64::max);
        assert!((peak - 0.25 * 0.5625).abs() < 1e-12);
        assert!((m.sum() - 0.25 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn st_average_cases() {
        let mut s = HeatmapStack::new(&[10, 0], &[1], &[1]);
        s.insert(10, 1, 1, Array2::zeros((3, 3)));
        assert!(st_average(&s).is_err());
        s.insert(0, 1, 1, Array2::ones((3, 3)));
        assert!(st_average(&s).unwrap().iter().all(|&v| v == 0.5));
        let mut same = HeatmapStack::new(&[1, 2], &[1, 2], &[1]);
        let m = random_map(4, 4, 3);
        for t in [1, 2] {
            for c in [1, 2] {
                same.insert(t, c, 1, m.clone());
            }
        }
        let avg = st_average(&same).unwrap();
        assert!((&avg - &m).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn st_average_is_order_invariant() {
        let maps: Vec<_> = (0..6).map(|i| random_map(5, 5, i)).collect();
        let mut a = HeatmapStack::new(&[3, 2, 1], &[1, 2], &[1]);
        let mut b = HeatmapStack::new(&[1, 2, 3], &[2, 1], &[1]);
        let mut k = 0;
        for t in [3, 2, 1] {
            for c in [1, 2] {
                a.insert(t, c, 1, maps[k].clone());
                b.insert(t, c, 1, maps[k].clone());
                k += 1;
            }
        }
        let d = st_average(&a).unwrap() - st_average(&b).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn smoothing_cases() {
        let c = Array2::from_elem((9, 9), 0.37);
        assert!(smooth(&c, 5).unwrap().iter().all(|v| (v - 0.37).abs() < 1e-12));
        let r = random_map(9, 9, 2);
        assert_eq!(smooth(&r, 1).unwrap(), r);
        let mut imp = Array2::zeros((9, 9));
        imp[[4, 4]] = 1.0;
        let s = smooth(&imp, 3).unwrap();
        for ((y, x), v) in s.indexed_iter() {
            let inside = (3..=5).contains(&y) && (3..=5).contains(&x);
            assert!((v - if inside { 1.0 / 9.0 } else { 0.0 }).abs() < 1e-15);
        }
        assert!(smooth(&r, 4).is_err());
        assert!(smooth(&r, 9).is_err());
    }

    #[test]
    fn smoothing_preserves_the_mean() {
        for (seed, m) in [(1u64, 3usize), (2, 11), (3, 7)] {
            let r = random_map(24, 20, seed);
            let s = smooth(&r, m).unwrap();
            assert!(((s.mean().unwrap() - r.mean().unwrap()) / r.mean().unwrap()).abs() < 1e-5);
        }
    }

    #[test]
    fn smoothing_of_the_average_is_linear() {
        let mut st = HeatmapStack::new(&[1, 2], &[1], &[1, 2]);
        let mut scaled = st.clone();
        let k = 3.7;
        for (i, key) in [(1, 1, 1), (1, 1, 2), (2, 1, 1), (2, 1, 2)].into_iter().enumerate() {
            let m = random_map(12, 12, i as u64);
            scaled.insert(key.0, key.1, key.2, m.mapv(|v| v * k));
            st.insert(key.0, key.1, key.2, m);
        }
        let a = smooth(&st_average(&st).unwrap(), 5).unwrap();
        let b = smooth(&st_average(&scaled).unwrap(), 5).unwrap();
        assert!(ndarray::Zip::from(&a).and(&b).all(|x, y| (x * k - y).abs() <= 1e-12 * y.abs().max(1.0)));
    }

    #[test]
    fn blend_endpoints() {
        let base = BaseHeatmap { data: Array2::from_shape_fn((2, 2), |(y, x)| (y * 2 + x) as f32) };
        let sst = random_map(8, 8, 4);
        let up = bilinear(base.data.view(), 8, 8).mapv(|v| v as f64 / 120.0);
        assert_eq!(blend(&base, &sst, 0.0, 120, 3).unwrap(), up);
        assert_eq!(blend(&base, &sst, 1.0, 120, 3).unwrap(), sst.mapv(|v| v / 3.0));
        assert!(blend(&base, &sst, 1.5, 120, 3).is_err());
        assert!(blend(&base, &sst, 0.5, 120, 3).unwrap().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn image_score_cases() {
        let r = random_map(10, 10, 5);
        assert_eq!(image_score(&r, 1).unwrap(), r.iter().cloned().fold(f64::MIN, f64::max));
        let c = Array2::from_elem((10, 10), 0.2);
        for p in [1, 2, 3, 5, 10] {
            assert!((image_score(&c, p).unwrap() - 0.2).abs() < 1e-12);
        }
        let mut bigger = r.clone();
        bigger[[3, 7]] += 0.5;
        assert!(image_score(&bigger, 4).unwrap() >= image_score(&r, 4).unwrap());
        assert!(image_score(&r, 11).is_err());
    }
}
