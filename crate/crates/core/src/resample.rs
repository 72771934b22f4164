//! Resampling helpers shared by the feature, fusion and evaluation code.
//!
//! Bilinear interpolation uses half-pixel centres without anti-aliasing
//! (`src = (dst + 0.5) * in / out - 0.5`, clamped at the borders), the same
//! convention as the usual deep-learning `interpolate(..., align_corners=False)`.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{arg_err, Result};

fn taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn bilinear_with<T: Copy>(src: ArrayView2<T>, out_h: usize, out_w: usize, to: fn(T) -> f64, from: fn(f64) -> T) -> Array2<T> {
    let (h, w) = src.dim();
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let top = to(src[[y0, x0]]) * (1.0 - fx) + to(src[[y0, x1]]) * fx;
        let bot = to(src[[y1, x0]]) * (1.0 - fx) + to(src[[y1, x1]]) * fx;
        from(top * (1.0 - fy) + bot * fy)
    })
}

pub fn bilinear(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    bilinear_with(src, out_h, out_w, f64::from, |v| v as f32)
}

pub fn bilinear_f64(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    bilinear_with(src, out_h, out_w, |v| v, |v| v)
}

/// Per-channel bilinear resize of an `H×W×C` image.
pub fn bilinear_image(src: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let c = src.dim().2;
    let mut out = Array3::zeros((out_h, out_w, c));
    for ch in 0..c {
        let plane = bilinear(src.index_axis(ndarray::Axis(2), ch), out_h, out_w);
        out.index_axis_mut(ndarray::Axis(2), ch).assign(&plane);
    }
    out
}

pub fn nearest(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y * h) / out_h).min(h - 1);
        let sx = ((x * w) / out_w).min(w - 1);
        src[[sy, sx]]
    })
}

/// Average each `factor×factor` block of an `H×W×C` image.
pub fn area_downsample(src: ArrayView3<f64>, factor: usize) -> Result<Array3<f64>> {
    let (h, w, c) = src.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return arg_err(format!("factor {factor} does not divide {h}x{w}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let mut out = Array3::zeros((oh, ow, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y / factor, x / factor, ch]] += src[[y, x, ch]];
            }
        }
    }
    out.mapv_inplace(|v| v / norm);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bilinear_identity_at_same_size() {
        let a = array![[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]];
        assert_eq!(bilinear(a.view(), 2, 3), a);
    }

    #[test]
    fn bilinear_halving_averages_two_by_two_blocks() {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32);
        let d = bilinear(a.view(), 2, 2);
        assert!((d[[0, 0]] - 2.5).abs() < 1e-6);
        assert!((d[[1, 1]] - 12.5).abs() < 1e-6);
    }

    #[test]
    fn bilinear_upsampling_constant_stays_constant() {
        let a = Array2::from_elem((3, 3), 0.7f32);
        assert!(bilinear(a.view(), 12, 12).iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn area_downsample_single_pixel() {
        let mut img = Array3::<f64>::zeros((4, 4, 1));
        img[[1, 1, 0]] = 1.0;
        let d = area_downsample(img.view(), 2).unwrap();
        assert_eq!(d[[0, 0, 0]], 0.25);
        assert!(area_downsample(img.view(), 3).is_err());
    }
}
