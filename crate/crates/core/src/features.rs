//! Frozen multi-scale feature extractor.
//!
//! The default backbone is a pyramid of stride-2 3×3 convolutions with fixed,
//! seeded weights and a `tanh` nonlinearity. Each stage's activation is
//! resized bilinearly to a common grid and the stages are concatenated along
//! the channel axis. Anything implementing [`Extractor`] can replace it, e.g.
//! a pretrained backbone for real data.

use candle_core::Tensor;
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::resample;

/// `C_feat × H_feat × W_feat` feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f32>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub stage_channels: Vec<usize>,
    /// `(H_feat, W_feat)`.
    pub target_grid: (usize, usize),
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 24, 32, 48],
            target_grid: (8, 8),
            seed: 3,
        }
    }
}

impl ExtractorConfig {
    pub fn feature_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }

    /// Spatial size after each stride-2 stage.
    pub fn stage_resolutions(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut res = Vec::with_capacity(self.stage_channels.len());
        let (mut sh, mut sw) = (h, w);
        for _ in &self.stage_channels {
            sh = sh.div_ceil(2);
            sw = sw.div_ceil(2);
            res.push((sh, sw));
        }
        res
    }

    /// Every stage must map onto the target grid by an integer factor (in
    /// either direction).
    pub fn validate(&self, image_shape: (usize, usize, usize)) -> Result<()> {
        let (h, w, _) = image_shape;
        let (th, tw) = self.target_grid;
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("extractor needs at least one non-empty stage".into()));
        }
        if th == 0 || tw == 0 {
            return Err(Error::Config("target grid must be non-empty".into()));
        }
        let compatible = |s: usize, t: usize| s.is_multiple_of(t) || t.is_multiple_of(s);
        for (i, (sh, sw)) in self.stage_resolutions(h, w).into_iter().enumerate() {
            if !compatible(sh, th) || !compatible(sw, tw) {
                return Err(Error::Config(format!(
                    "target grid {th}x{tw} is incompatible with stage {} resolution {sh}x{sw}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Anything that maps an image to a [`FeatureMap`].
pub trait Extractor {
    fn feature_channels(&self) -> usize;
    fn grid(&self) -> (usize, usize);
    fn extract_batch(&self, images: &[&Array3<f32>]) -> Result<Vec<FeatureMap>>;

    fn extract(&self, image: &Array3<f32>) -> Result<FeatureMap> {
        Ok(self.extract_batch(&[image])?.remove(0))
    }
}

pub struct ConvPyramid {
    config: ExtractorConfig,
    image_shape: (usize, usize, usize),
    store: ParamStore,
    stages: Vec<Conv2d>,
}

impl ConvPyramid {
    pub fn build(config: &ExtractorConfig, image_shape: (usize, usize, usize)) -> Result<Self> {
        config.validate(image_shape)?;
        let mut store = ParamStore::new(config.seed);
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut c_in = image_shape.2;
        for (i, &c_out) in config.stage_channels.iter().enumerate() {
            stages.push(Conv2d::new(&mut store, &format!("extractor.stage{i}"), c_in, c_out, 3, 2)?);
            c_in = c_out;
        }
        Ok(Self {
            config: config.clone(),
            image_shape,
            store,
            stages,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// SHA-256 over all weights, in creation order.
    pub fn weights_checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for arr in self.store.export()? {
            h.update(arr.name.as_bytes());
            for v in &arr.data {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let (h, w, c) = self.image_shape;
        Ok(Checkpoint::new(
            json!({
                "kind": "extractor",
                "config": self.config,
                "image_shape": [h, w, c],
            }),
            self.store.export()?,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.metadata["kind"] != "extractor" {
            return Err(Error::Checkpoint("not an extractor checkpoint".into()));
        }
        let config: ExtractorConfig = serde_json::from_value(ckpt.metadata["config"].clone())?;
        let shape: [usize; 3] = serde_json::from_value(ckpt.metadata["image_shape"].clone())?;
        let ex = Self::build(&config, (shape[0], shape[1], shape[2]))?;
        ex.store.import(&ckpt.arrays)?;
        Ok(ex)
    }
}

impl Extractor for ConvPyramid {
    fn feature_channels(&self) -> usize {
        self.config.feature_channels()
    }

    fn grid(&self) -> (usize, usize) {
        self.config.target_grid
    }

    fn extract_batch(&self, images: &[&Array3<f32>]) -> Result<Vec<FeatureMap>> {
        let (h, w, c) = self.image_shape;
        let mut flat = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dim() != self.image_shape {
                return shape_err(format!("image shape {:?}, extractor expects {:?}", img.dim(), self.image_shape));
            }
            // H×W×C in [0,1] -> C×H×W in [-1,1]
            for ch in 0..c {
                flat.extend(img.index_axis(Axis(2), ch).iter().map(|v| 2.0 * v - 1.0));
            }
        }
        let mut x = Tensor::from_vec(flat, (images.len(), c, h, w), self.store.device())?;
        let (th, tw) = self.config.target_grid;
        let c_feat = self.feature_channels();
        let mut out: Vec<Array3<f32>> = (0..images.len()).map(|_| Array3::zeros((c_feat, th, tw))).collect();
        let mut offset = 0;
        for stage in &self.stages {
            x = stage.forward(&x)?.tanh()?;
            let (_, sc, sh, sw) = x.dims4()?;
            let vals = x.flatten_all()?.to_vec1::<f32>()?;
            let acts = ndarray::Array4::from_shape_vec((images.len(), sc, sh, sw), vals)
                .map_err(|e| Error::Shape(e.to_string()))?;
            for (b, dst) in out.iter_mut().enumerate() {
                for ch in 0..sc {
                    let plane = acts.slice(ndarray::s![b, ch, .., ..]);
                    let resized = resample::bilinear(plane, th, tw);
                    dst.index_axis_mut(Axis(0), offset + ch).assign(&resized);
                }
            }
            offset += sc;
        }
        Ok(out.into_iter().map(|data| FeatureMap { data }).collect())
    }
}
