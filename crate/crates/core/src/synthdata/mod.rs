//! Datasets: seeded procedural multi-category textures with injected defects,
//! plus a reader for directories in the MVTec-AD layout.

mod defects;
mod io;
mod mvtec;
mod patterns;

use ndarray::{Array2, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use defects::{inject_defect, DefectKind, DefectSpec};
pub use io::{load_persisted_dataset, persist_dataset, MANIFEST_FILE};
pub use mvtec::load_directory_dataset;
pub use patterns::PatternKind;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Directory,
}

/// One image with its label and ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Unique within its category.
    pub id: String,
    /// `H×W×C`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub category: usize,
    pub is_anomalous: bool,
    /// `H×W`, values in `{0, 1}`.
    pub gt_mask: Array2<u8>,
    pub split: Split,
    /// Defect type name (`thin-line`, `blob`, ... or the MVTec folder name).
    pub defect: Option<String>,
}

impl SampleRecord {
    pub fn mask_pixels(&self) -> usize {
        self.gt_mask.iter().filter(|&&m| m != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub categories: Vec<String>,
    /// `(H_img, W_img, C_img)`.
    pub image_shape: (usize, usize, usize),
    pub source: DatasetSource,
}

impl DatasetManifest {
    pub fn train(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    /// Record name used for file names and random sub-streams.
    pub fn key(&self, record: &SampleRecord) -> String {
        format!("{}_{}", self.categories[record.category], record.id)
    }

    /// Check every manifest invariant.
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image_shape;
        if self.source == DatasetSource::Synthetic && self.categories.len() < 2 {
            return Err(Error::Dataset("synthetic datasets need at least 2 categories".into()));
        }
        for r in &self.records {
            if r.image.dim() != (h, w, c) {
                return Err(Error::Dataset(format!(
                    "record {} has shape {:?}, expected {:?}",
                    r.id,
                    r.image.dim(),
                    self.image_shape
                )));
            }
            if r.gt_mask.dim() != (h, w) {
                return Err(Error::Dataset(format!("mask of {} has wrong shape", r.id)));
            }
            if r.category >= self.categories.len() {
                return Err(Error::Dataset(format!("record {} has unknown category", r.id)));
            }
            if r.split == Split::Train && r.is_anomalous {
                return Err(Error::Dataset(format!("train record {} is anomalous", r.id)));
            }
            if (r.mask_pixels() > 0) != r.is_anomalous {
                return Err(Error::Dataset(format!(
                    "record {}: mask non-empty must coincide with the anomaly label",
                    r.id
                )));
            }
            if r.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("record {} has values outside [0,1]", r.id)));
            }
            if r.gt_mask.iter().any(|&m| m > 1) {
                return Err(Error::Dataset(format!("record {} mask is not binary", r.id)));
            }
        }
        Ok(())
    }
}

/// Configuration of the procedural dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub categories: Vec<PatternKind>,
    pub train_per_category: usize,
    pub test_normal_per_category: usize,
    pub test_anomalous_per_category: usize,
    /// `[H_img, W_img, C_img]`.
    pub image_shape: [usize; 3],
    pub defect_kinds: Vec<DefectKind>,
    /// Inpainting grid sizes the images must support.
    pub grid_sizes: Vec<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            categories: vec![PatternKind::Stripes, PatternKind::Checker],
            train_per_category: 64,
            test_normal_per_category: 12,
            test_anomalous_per_category: 12,
            image_shape: [64, 64, 3],
            defect_kinds: vec![DefectKind::ThinLine, DefectKind::Blob, DefectKind::ColorShift],
            grid_sizes: vec![1, 8, 16],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w, c] = self.image_shape;
        if self.categories.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 categories".into()));
        }
        if h == 0 || w == 0 || !(c == 1 || c == 3) {
            return Err(Error::InvalidArgument(format!("bad image shape {:?}", self.image_shape)));
        }
        for &g in &self.grid_sizes {
            if g == 0 || h % g != 0 || w % g != 0 {
                return Err(Error::InvalidArgument(format!(
                    "grid size {g} does not divide image {h}x{w}"
                )));
            }
        }
        if self.test_anomalous_per_category == 0 {
            return Err(Error::InvalidArgument("at least one anomalous test image is required".into()));
        }
        if self.defect_kinds.is_empty() {
            return Err(Error::InvalidArgument("no defect kinds configured".into()));
        }
        if self.train_per_category == 0 {
            return Err(Error::InvalidArgument("empty train split".into()));
        }
        Ok(())
    }
}

/// Randomised defect parameters for the generator, scaled to the image size.
fn sample_defect(kind: DefectKind, h: usize, w: usize, rng: &mut rng::Rng) -> DefectSpec {
    let side = h.min(w);
    match kind {
        DefectKind::ThinLine => DefectSpec {
            kind,
            size: rng.random_range((side / 5).max(3)..=(side / 2).max(4)),
            intensity: rng.random_range(0.35..0.5),
            width: rng.random_range(1..=2),
            angle: None,
        },
        DefectKind::Blob => DefectSpec {
            kind,
            size: rng.random_range((side / 20).max(1)..=(side / 10).max(2)),
            intensity: rng.random_range(0.3..0.45),
            width: 1,
            angle: None,
        },
        DefectKind::ColorShift => DefectSpec {
            kind,
            size: rng.random_range((side / 16).max(1)..=(side / 8).max(2)),
            intensity: rng.random_range(0.25..0.35),
            width: 1,
            angle: None,
        },
    }
}

/// Generate the procedural multi-category dataset. Deterministic in `(spec, seed)`.
pub fn generate_dataset(spec: &SyntheticSpec, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let [h, w, c] = spec.image_shape;
    let mut categories = Vec::with_capacity(spec.categories.len());
    let mut records = Vec::new();
    for (ci, pattern) in spec.categories.iter().enumerate() {
        let base = pattern.name().to_string();
        let name = if categories.contains(&base) { format!("{base}{ci}") } else { base };
        categories.push(name);
        let style = patterns::CategoryStyle::new(*pattern, ci, c);
        let mut rng = rng::stream(seed, &format!("data/{ci}"));
        for i in 0..spec.train_per_category {
            records.push(SampleRecord {
                id: format!("train_{i:04}"),
                image: style.render(h, w, &mut rng),
                category: ci,
                is_anomalous: false,
                gt_mask: Array2::zeros((h, w)),
                split: Split::Train,
                defect: None,
            });
        }
        for i in 0..spec.test_normal_per_category {
            records.push(SampleRecord {
                id: format!("test_good_{i:04}"),
                image: style.render(h, w, &mut rng),
                category: ci,
                is_anomalous: false,
                gt_mask: Array2::zeros((h, w)),
                split: Split::Test,
                defect: None,
            });
        }
        for i in 0..spec.test_anomalous_per_category {
            let kind = spec.defect_kinds[i % spec.defect_kinds.len()];
            let clean = style.render(h, w, &mut rng);
            let defect = sample_defect(kind, h, w, &mut rng);
            let (image, gt_mask) = inject_defect(&clean, &defect, &mut rng)?;
            records.push(SampleRecord {
                id: format!("test_{}_{i:04}", kind.name()),
                image,
                category: ci,
                is_anomalous: true,
                gt_mask,
                split: Split::Test,
                defect: Some(kind.name().to_string()),
            });
        }
    }
    let manifest = DatasetManifest {
        records,
        categories,
        image_shape: (h, w, c),
        source: DatasetSource::Synthetic,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Quantise to the 8-bit grid so that PNG persistence is lossless.
pub(crate) fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            train_per_category: 8,
            test_normal_per_category: 2,
            test_anomalous_per_category: 2,
            image_shape: [32, 32, 3],
            grid_sizes: vec![1, 8, 16],
            ..SyntheticSpec::default()
        }
    }

    fn digest(m: &DatasetManifest) -> Vec<String> {
        m.records
            .iter()
            .map(|r| {
                let mut h = Sha256::new();
                for v in r.image.iter() {
                    h.update(v.to_le_bytes());
                }
                hex::encode(h.finalize())
            })
            .collect()
    }

    #[test]
    fn counts_follow_the_spec() {
        let m = generate_dataset(&small_spec(), 7).unwrap();
        assert_eq!(m.train().count(), 16);
        assert_eq!(m.test().count(), 8);
        assert!(m.train().all(|r| !r.is_anomalous));
        assert_eq!(m.categories, vec!["stripes", "checker"]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_spec(), 7).unwrap();
        let b = generate_dataset(&small_spec(), 7).unwrap();
        assert_eq!(digest(&a), digest(&b));
        let c = generate_dataset(&small_spec(), 8).unwrap();
        assert_ne!(digest(&a), digest(&c));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small_spec();
        s.image_shape = [30, 32, 3];
        assert!(generate_dataset(&s, 1).is_err());
        let mut s = small_spec();
        s.test_anomalous_per_category = 0;
        assert!(generate_dataset(&s, 1).is_err());
        let mut s = small_spec();
        s.categories.truncate(1);
        assert!(generate_dataset(&s, 1).is_err());
    }

    #[test]
    fn anomalies_cover_at_least_two_kinds_including_thin_lines() {
        let mut s = small_spec();
        s.test_anomalous_per_category = 3;
        let m = generate_dataset(&s, 3).unwrap();
        let kinds: std::collections::BTreeSet<_> =
            m.test().filter_map(|r| r.defect.clone()).collect();
        assert!(kinds.len() >= 2);
        assert!(kinds.contains("thin-line"));
    }

    #[test]
    fn categories_are_visually_distinct() {
        let m = generate_dataset(&small_spec(), 5).unwrap();
        let mean_of = |cat: usize| -> Vec<f64> {
            let imgs: Vec<_> = m.train().filter(|r| r.category == cat).collect();
            (0..3)
                .map(|ch| {
                    imgs.iter()
                        .map(|r| r.image.index_axis(ndarray::Axis(2), ch).mean().unwrap() as f64)
                        .sum::<f64>()
                        / imgs.len() as f64
                })
                .collect()
        };
        let (a, b) = (mean_of(0), mean_of(1));
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.05, "category colour means too close: {a:?} {b:?}");
    }

    #[test]
    fn thin_line_mask_size_is_bounded() {
        let style = patterns::CategoryStyle::new(PatternKind::Stripes, 0, 3);
        let mut rng = rng::seeded(11);
        let clean = style.render(64, 64, &mut rng);
        for _ in 0..20 {
            let spec = DefectSpec {
                kind: DefectKind::ThinLine,
                size: rng.random_range(1..=64),
                intensity: 0.4,
                width: 1,
                angle: None,
            };
            let (_, mask) = inject_defect(&clean, &spec, &mut rng).unwrap();
            let n = mask.iter().filter(|&&m| m == 1).count();
            // Independent count: every masked pixel lies on the rasterised path,
            // which has at most one pixel per unit step.
            assert!((1..=64).contains(&n), "{n}");
            assert!(n <= spec.size);
        }
    }
}
