use std::f64::consts::PI;

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::quantize;
use crate::rng::Rng;

/// Procedural base texture of a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    Stripes,
    Checker,
    Blobs,
    FilteredNoise,
}

impl PatternKind {
    pub fn name(&self) -> &'static str {
        match self {
            PatternKind::Stripes => "stripes",
            PatternKind::Checker => "checker",
            PatternKind::Blobs => "blobs",
            PatternKind::FilteredNoise => "filtered-noise",
        }
    }

    fn base_color(&self) -> [f64; 3] {
        match self {
            PatternKind::Stripes => [0.62, 0.50, 0.36],
            PatternKind::Checker => [0.38, 0.45, 0.60],
            PatternKind::Blobs => [0.45, 0.60, 0.42],
            PatternKind::FilteredNoise => [0.56, 0.52, 0.58],
        }
    }
}

pub(crate) struct CategoryStyle {
    kind: PatternKind,
    color: Vec<f64>,
}

impl CategoryStyle {
    pub fn new(kind: PatternKind, category_index: usize, channels: usize) -> Self {
        let base = kind.base_color();
        // Repeated pattern kinds get a shifted palette so they stay distinguishable.
        let shift = 0.08 * (category_index / 4) as f64;
        let color = if channels == 1 {
            vec![(base.iter().sum::<f64>() / 3.0 + shift).min(0.8)]
        } else {
            base.iter().map(|v| (v + shift).min(0.8)).collect()
        };
        Self { kind, color }
    }

    pub fn render(&self, h: usize, w: usize, rng: &mut Rng) -> Array3<f32> {
        let c = self.color.len();
        let side = h.min(w) as f64;
        let brightness = rng.random_range(-0.02..0.02);
        let field: Vec<f64> = match self.kind {
            PatternKind::Stripes => {
                let period = side / 8.0;
                let angle = (30.0f64 + rng.random_range(-4.0..4.0)).to_radians();
                let phase = rng.random_range(0.0..2.0 * PI);
                let (s, co) = angle.sin_cos();
                (0..h * w)
                    .map(|i| {
                        let (y, x) = ((i / w) as f64, (i % w) as f64);
                        0.12 * (2.0 * PI * (x * co + y * s) / period + phase).sin()
                    })
                    .collect()
            }
            PatternKind::Checker => {
                let cell = (side / 8.0).max(1.0);
                let oy = rng.random_range(0.0..2.0 * cell);
                let ox = rng.random_range(0.0..2.0 * cell);
                (0..h * w)
                    .map(|i| {
                        let (y, x) = ((i / w) as f64, (i % w) as f64);
                        let parity = (((y + oy) / cell).floor() + ((x + ox) / cell).floor()) as i64;
                        if parity.rem_euclid(2) == 0 { 0.1 } else { -0.1 }
                    })
                    .collect()
            }
            PatternKind::Blobs => {
                let bumps: Vec<(f64, f64, f64, f64)> = (0..5)
                    .map(|_| {
                        (
                            rng.random_range(0.0..h as f64),
                            rng.random_range(0.0..w as f64),
                            rng.random_range(side / 12.0..side / 8.0),
                            rng.random_range(-0.12..0.12),
                        )
                    })
                    .collect();
                (0..h * w)
                    .map(|i| {
                        let (y, x) = ((i / w) as f64, (i % w) as f64);
                        bumps
                            .iter()
                            .map(|&(by, bx, s, a)| {
                                a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp()
                            })
                            .sum()
                    })
                    .collect()
            }
            PatternKind::FilteredNoise => {
                let mut f: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
                let radius = (side / 16.0).max(1.0) as usize;
                for _ in 0..3 {
                    f = box_blur(&f, h, w, radius);
                }
                let peak = f.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-9);
                f.iter().map(|v| 0.1 * v / peak).collect()
            }
        };
        let tint: Vec<f64> = (0..c).map(|ch| 1.0 - 0.15 * ch as f64).collect();
        Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            quantize((self.color[ch] + brightness + field[y * w + x] * tint[ch]) as f32)
        })
    }
}

/// Separable box blur with clamped borders.
fn box_blur(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let norm = (2 * radius + 1) as f64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc += src[y * w + xx];
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                acc += tmp[yy * w + x];
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn every_pattern_renders_in_range() {
        for kind in [
            PatternKind::Stripes,
            PatternKind::Checker,
            PatternKind::Blobs,
            PatternKind::FilteredNoise,
        ] {
            for c in [1, 3] {
                let img = CategoryStyle::new(kind, 0, c).render(24, 32, &mut seeded(1));
                assert_eq!(img.dim(), (24, 32, c));
                assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
                // 8-bit grid
                assert!(img.iter().all(|v| ((v * 255.0).round() / 255.0 - v).abs() < 1e-7));
            }
        }
    }
}
