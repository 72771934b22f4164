use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array2;

use super::io::rgb_to_array;
use super::{DatasetManifest, DatasetSource, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::resample;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
                .unwrap_or(false)
        })
        .collect())
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn load_image(path: &Path, h: usize, w: usize) -> Result<ndarray::Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let resized = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    Ok(rgb_to_array(&resized))
}

fn load_mask(path: &Path, h: usize, w: usize) -> Result<Array2<u8>> {
    let m = image::open(path)?.to_luma8();
    let (mw, mh) = m.dimensions();
    let src = Array2::from_shape_fn((mh as usize, mw as usize), |(y, x)| {
        m.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    });
    let near = resample::nearest(src.view(), h, w);
    let mask = near.mapv(|v| (v >= 0.5) as u8);
    if mask.iter().any(|&v| v != 0) || src.iter().all(|&v| v < 0.5) {
        return Ok(mask);
    }
    // The defect fell between nearest-neighbour samples; keep any coverage.
    Ok(resample::bilinear(src.view(), h, w).mapv(|v| (v > 0.0) as u8))
}

/// Read a dataset in the MVTec-AD directory layout, resizing to `h×w`.
///
/// `<root>/<category>/train/good/*.png`, `<root>/<category>/test/<defect>/*.png`
/// and `<root>/<category>/ground_truth/<defect>/<name>_mask.png`.
pub fn load_directory_dataset(root: &Path, h: usize, w: usize) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut categories = Vec::new();
    let mut records = Vec::new();
    for cat_dir in sorted_entries(root)?.into_iter().filter(|p| p.join("train").is_dir()) {
        let category = categories.len();
        categories.push(cat_dir.file_name().unwrap().to_string_lossy().into_owned());
        for path in image_files(&cat_dir.join("train").join("good"))? {
            records.push(SampleRecord {
                id: format!("train_good_{}", stem(&path)),
                image: load_image(&path, h, w)?,
                category,
                is_anomalous: false,
                gt_mask: Array2::zeros((h, w)),
                split: Split::Train,
                defect: None,
            });
        }
        let test_dir = cat_dir.join("test");
        if !test_dir.is_dir() {
            continue;
        }
        for defect_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
            let defect = defect_dir.file_name().unwrap().to_string_lossy().into_owned();
            for path in image_files(&defect_dir)? {
                let name = stem(&path);
                let image = load_image(&path, h, w)?;
                let (is_anomalous, gt_mask) = if defect == "good" {
                    (false, Array2::zeros((h, w)))
                } else {
                    let mask_path = cat_dir
                        .join("ground_truth")
                        .join(&defect)
                        .join(format!("{name}_mask.png"));
                    if !mask_path.exists() {
                        return Err(Error::Dataset(format!(
                            "missing ground-truth mask {}",
                            mask_path.display()
                        )));
                    }
                    (true, load_mask(&mask_path, h, w)?)
                };
                let is_anomalous = is_anomalous && gt_mask.iter().any(|&v| v != 0);
                records.push(SampleRecord {
                    id: format!("test_{defect}_{name}"),
                    image,
                    category,
                    is_anomalous,
                    gt_mask,
                    split: Split::Test,
                    defect: (defect != "good").then(|| defect.clone()),
                });
            }
        }
    }
    if categories.is_empty() {
        return Err(Error::Dataset(format!("no categories found under {}", root.display())));
    }
    let manifest = DatasetManifest {
        records,
        categories,
        image_shape: (h, w, 3),
        source: DatasetSource::Directory,
    };
    manifest.validate()?;
    Ok(manifest)
}
