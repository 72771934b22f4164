use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, DatasetSource, SampleRecord, Split};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    source: DatasetSource,
    categories: Vec<String>,
    image_shape: [usize; 3],
    records: Vec<RecordEntry>,
}

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    id: String,
    category: String,
    label: u8,
    split: Split,
    image: String,
    mask: Option<String>,
    defect: Option<String>,
}

pub(crate) fn image_to_png(img: &Array3<f32>) -> Result<image::DynamicImage> {
    let (h, w, c) = img.dim();
    let px = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([px(img[[y as usize, x as usize, 0]])])).into()),
        3 => Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            Rgb([px(img[[y, x, 0]]), px(img[[y, x, 1]]), px(img[[y, x, 2]])])
        })
        .into()),
        _ => Err(Error::InvalidArgument(format!("cannot encode {c}-channel image as PNG"))),
    }
}

pub(crate) fn rgb_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub(crate) fn gray_to_array(img: &GrayImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 1), |(y, x, _)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    })
}

fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)
}

fn mask_to_png(mask: &Array2<u8>) -> GrayImage {
    let (h, w) = mask.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    })
}

/// Write images, masks and `manifest.json` under `dir`.
pub fn persist_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let cat = &manifest.categories[r.category];
        let image_rel = format!("images/{cat}/{}.png", r.id);
        save_png(&image_to_png(&r.image)?, &dir.join(&image_rel))?;
        let mask_rel = if r.is_anomalous {
            let rel = format!("masks/{cat}/{}.png", r.id);
            save_png(&mask_to_png(&r.gt_mask).into(), &dir.join(&rel))?;
            Some(rel)
        } else {
            None
        };
        entries.push(RecordEntry {
            id: r.id.clone(),
            category: cat.clone(),
            label: r.is_anomalous as u8,
            split: r.split,
            image: image_rel,
            mask: mask_rel,
            defect: r.defect.clone(),
        });
    }
    let (h, w, c) = manifest.image_shape;
    let file = ManifestFile {
        source: manifest.source,
        categories: manifest.categories.clone(),
        image_shape: [h, w, c],
        records: entries,
    };
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&file)?)
}

/// Read back a dataset written by [`persist_dataset`].
pub fn load_persisted_dataset(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let file: ManifestFile = serde_json::from_slice(&fs::read(&path)?)?;
    let [h, w, c] = file.image_shape;
    let mut records = Vec::with_capacity(file.records.len());
    for e in file.records {
        let category = file
            .categories
            .iter()
            .position(|n| *n == e.category)
            .ok_or_else(|| Error::Dataset(format!("unknown category {}", e.category)))?;
        let decoded = image::open(dir.join(&e.image))?;
        let image = if c == 1 { gray_to_array(&decoded.to_luma8()) } else { rgb_to_array(&decoded.to_rgb8()) };
        let gt_mask = match &e.mask {
            Some(rel) => {
                let m = image::open(dir.join(rel))?.to_luma8();
                Array2::from_shape_fn((h, w), |(y, x)| (m.get_pixel(x as u32, y as u32)[0] >= 128) as u8)
            }
            None => Array2::zeros((h, w)),
        };
        records.push(SampleRecord {
            id: e.id,
            image,
            category,
            is_anomalous: e.label == 1,
            gt_mask,
            split: e.split,
            defect: e.defect,
        });
    }
    let manifest = DatasetManifest {
        records,
        categories: file.categories,
        image_shape: (h, w, c),
        source: file.source,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SyntheticSpec};

    #[test]
    fn persisted_dataset_reloads_identically() {
        let spec = SyntheticSpec {
            train_per_category: 2,
            test_normal_per_category: 1,
            test_anomalous_per_category: 3,
            image_shape: [16, 16, 3],
            grid_sizes: vec![1, 8],
            ..SyntheticSpec::default()
        };
        let m = generate_dataset(&spec, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        persist_dataset(&m, dir.path()).unwrap();
        let back = load_persisted_dataset(dir.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_manifest_is_a_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_persisted_dataset(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
