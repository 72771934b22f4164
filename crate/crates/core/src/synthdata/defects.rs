use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::quantize;
use crate::error::{arg_err, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    ThinLine,
    Blob,
    ColorShift,
}

impl DefectKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefectKind::ThinLine => "thin-line",
            DefectKind::Blob => "blob",
            DefectKind::ColorShift => "color-shift",
        }
    }
}

/// Parameters of one injected defect.
///
/// `size` is the line length for thin lines, the radius for blobs and the
/// half side of the square patch for colour shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectSpec {
    pub kind: DefectKind,
    pub size: usize,
    /// Magnitude of the intensity change, in `(0, 1]`.
    pub intensity: f64,
    /// Line width in pixels (thin lines only).
    pub width: usize,
    /// Line orientation in radians; random when `None`.
    pub angle: Option<f64>,
}

/// Defect footprint relative to an anchor, in `(dy, dx)` offsets.
fn footprint(spec: &DefectSpec, rng: &mut Rng) -> Vec<(isize, isize)> {
    let mut pts = BTreeSet::new();
    match spec.kind {
        DefectKind::ThinLine => {
            let angle = spec.angle.unwrap_or_else(|| rng.random_range(0.0..PI));
            let (dy, dx) = angle.sin_cos();
            let horizontal = dx.abs() >= dy.abs();
            for k in 0..spec.size {
                let y = (k as f64 * dy).round() as isize;
                let x = (k as f64 * dx).round() as isize;
                for o in 0..spec.width as isize {
                    pts.insert(if horizontal { (y + o, x) } else { (y, x + o) });
                }
            }
        }
        DefectKind::Blob => {
            let r = spec.size as isize;
            for y in -r..=r {
                for x in -r..=r {
                    if y * y + x * x <= r * r {
                        pts.insert((y, x));
                    }
                }
            }
        }
        DefectKind::ColorShift => {
            let side = 2 * spec.size as isize;
            for y in 0..side {
                for x in 0..side {
                    pts.insert((y, x));
                }
            }
        }
    }
    pts.into_iter().collect()
}

/// Inject a defect into a clean image.
///
/// Returns the modified image and the binary mask of changed pixels; the two
/// images differ exactly where the mask is 1.
pub fn inject_defect(image: &Array3<f32>, spec: &DefectSpec, rng: &mut Rng) -> Result<(Array3<f32>, Array2<u8>)> {
    let (h, w, c) = image.dim();
    if !(spec.intensity > 0.0 && spec.intensity <= 1.0) {
        return arg_err(format!("defect intensity {} outside (0, 1]", spec.intensity));
    }
    if spec.size == 0 {
        return arg_err("defect size must be positive");
    }
    if spec.kind == DefectKind::ThinLine && spec.width == 0 {
        return arg_err("line width must be positive");
    }
    let pts = footprint(spec, rng);
    let (min_y, max_y) = (pts.iter().map(|p| p.0).min().unwrap(), pts.iter().map(|p| p.0).max().unwrap());
    let (min_x, max_x) = (pts.iter().map(|p| p.1).min().unwrap(), pts.iter().map(|p| p.1).max().unwrap());
    let (ext_y, ext_x) = ((max_y - min_y + 1) as usize, (max_x - min_x + 1) as usize);
    if ext_y > h || ext_x > w {
        return arg_err(format!(
            "{} defect of extent {ext_y}x{ext_x} does not fit a {h}x{w} image",
            spec.kind.name()
        ));
    }
    let oy = rng.random_range(0..=(h - ext_y)) as isize - min_y;
    let ox = rng.random_range(0..=(w - ext_x)) as isize - min_x;
    let coords: Vec<(usize, usize)> = pts
        .iter()
        .map(|&(y, x)| ((y + oy) as usize, (x + ox) as usize))
        .collect();

    let mean: f64 = coords
        .iter()
        .map(|&(y, x)| (0..c).map(|ch| image[[y, x, ch]] as f64).sum::<f64>() / c as f64)
        .sum::<f64>()
        / coords.len() as f64;
    let sign = if mean > 0.5 { -1.0 } else { 1.0 };
    let profile: Vec<f64> = match spec.kind {
        DefectKind::ColorShift if c >= 3 => (0..c).map(|ch| [1.0, -0.5, -1.0][ch.min(2)]).collect(),
        _ => vec![1.0; c],
    };

    let mut out = image.clone();
    let mut mask = Array2::zeros((h, w));
    for &(y, x) in &coords {
        for ch in 0..c {
            let v = image[[y, x, ch]];
            let delta = (sign * profile[ch] * spec.intensity) as f32;
            let mut nv = quantize(v + delta);
            if ch == 0 && nv == v {
                // Clipped at the range boundary: go the other way, at least one level.
                nv = quantize(v - delta);
                if nv == v {
                    nv = if v < 0.5 { quantize(v + 1.0 / 255.0) } else { quantize(v - 1.0 / 255.0) };
                }
            }
            out[[y, x, ch]] = nv;
        }
        mask[[y, x]] = 1;
    }
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn flat(v: f32, n: usize) -> Array3<f32> {
        Array3::from_elem((n, n, 3), v)
    }

    fn changed(a: &Array3<f32>, b: &Array3<f32>) -> Array2<u8> {
        let (h, w, c) = a.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            (0..c).any(|ch| a[[y, x, ch]] != b[[y, x, ch]]) as u8
        })
    }

    #[test]
    fn blob_of_radius_three_covers_a_rasterised_disk() {
        let spec = DefectSpec { kind: DefectKind::Blob, size: 3, intensity: 0.4, width: 1, angle: None };
        let img = flat(0.4, 32);
        let (out, mask) = inject_defect(&img, &spec, &mut seeded(2)).unwrap();
        let n = mask.iter().filter(|&&m| m == 1).count();
        // Brute force: lattice points within distance 3 of a lattice centre.
        let mut brute = 0;
        for y in -3i32..=3 {
            for x in -3i32..=3 {
                if y * y + x * x <= 9 {
                    brute += 1;
                }
            }
        }
        assert_eq!(n, brute);
        assert!((21..=37).contains(&n));
        assert_eq!(changed(&img, &out), mask);
    }

    #[test]
    fn axis_aligned_line_has_exact_length() {
        let spec = DefectSpec { kind: DefectKind::ThinLine, size: 10, intensity: 0.5, width: 1, angle: Some(0.0) };
        let img = flat(0.7, 32);
        let (out, mask) = inject_defect(&img, &spec, &mut seeded(3)).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m == 1).count(), 10);
        assert_eq!(changed(&img, &out), mask);
    }

    #[test]
    fn zero_intensity_is_rejected() {
        let spec = DefectSpec { kind: DefectKind::Blob, size: 2, intensity: 0.0, width: 1, angle: None };
        assert!(inject_defect(&flat(0.5, 16), &spec, &mut seeded(1)).is_err());
    }

    #[test]
    fn oversized_defects_are_rejected() {
        let spec = DefectSpec { kind: DefectKind::Blob, size: 10, intensity: 0.3, width: 1, angle: None };
        assert!(inject_defect(&flat(0.5, 16), &spec, &mut seeded(1)).is_err());
        let spec = DefectSpec { kind: DefectKind::ThinLine, size: 17, intensity: 0.3, width: 1, angle: Some(0.0) };
        assert!(inject_defect(&flat(0.5, 16), &spec, &mut seeded(1)).is_err());
    }

    #[test]
    fn saturated_pixels_still_change() {
        for v in [0.0f32, 1.0] {
            for kind in [DefectKind::ThinLine, DefectKind::Blob, DefectKind::ColorShift] {
                let spec = DefectSpec { kind, size: 3, intensity: 0.3, width: 2, angle: None };
                let img = flat(v, 16);
                let (out, mask) = inject_defect(&img, &spec, &mut seeded(5)).unwrap();
                assert!(mask.iter().any(|&m| m == 1));
                assert_eq!(changed(&img, &out), mask, "{kind:?} at {v}");
            }
        }
    }
}
