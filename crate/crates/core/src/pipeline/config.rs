use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::base_recon::{BaseModelConfig, BaseTrainConfig};
use crate::diffusion_core::{make_schedule, DiffusionTrainConfig, NoiseSchedule, UNetConfig};
use crate::error::{Error, Result};
use crate::features::ExtractorConfig;
use crate::fusion::FusionConfig;
use crate::synthdata::{DatasetSource, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub synthetic: SyntheticSpec,
    /// Root of an MVTec-style directory tree (`source = "directory"`).
    pub root: Option<PathBuf>,
    /// `[height, width]` images are resized to (`source = "directory"`).
    pub image_size: [usize; 2],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            root: None,
            image_size: [224, 224],
        }
    }
}

impl DatasetConfig {
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self.source {
            DatasetSource::Synthetic => {
                let [h, w, c] = self.synthetic.image_shape;
                (h, w, c)
            }
            DatasetSource::Directory => (self.image_size[0], self.image_size[1], 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSection {
    pub model: BaseModelConfig,
    pub train: BaseTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub unet: UNetConfig,
    pub train: DiffusionTrainConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            unet: UNetConfig::default(),
            train: DiffusionTrainConfig::default(),
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Visited timesteps, strictly descending and ending at 0.
    pub timesteps: Vec<usize>,
    pub grid_sizes: Vec<usize>,
    pub n_sets: usize,
    pub scales: Vec<usize>,
    pub gamma: f64,
    /// Extra blend weights evaluated alongside `gamma`.
    pub gamma_sweep: Vec<f64>,
    /// Mean-filter side; `None` scales 41 at 224 pixels to the image size.
    pub smoothing: Option<usize>,
    /// Image-score pooling window; `None` uses `side / 14`.
    pub pool: Option<usize>,
    pub known_region_deterministic: bool,
    /// Write one raw dump per `(t, c)` diffusion heatmap.
    pub dump_diff_heatmaps: bool,
    /// Timestep whose diffusion heatmap is shown in report panels.
    pub panel_timestep: usize,
    /// Panels per category and label.
    pub panels_per_label: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            timesteps: vec![250, 200, 150, 100, 50, 0],
            grid_sizes: vec![1, 16, 32],
            n_sets: 2,
            scales: vec![1, 2, 4, 8],
            gamma: 0.9,
            gamma_sweep: vec![0.0, 0.5, 0.9],
            smoothing: None,
            pool: None,
            known_region_deterministic: false,
            dump_diff_heatmaps: true,
            panel_timestep: 0,
            panels_per_label: 2,
        }
    }
}

impl InferenceConfig {
    pub fn fusion(&self, height: usize, width: usize) -> FusionConfig {
        let defaults = FusionConfig::for_side(height.min(width));
        FusionConfig {
            gamma: self.gamma,
            smoothing: self.smoothing.unwrap_or(defaults.smoothing),
            pool: self.pool.unwrap_or(defaults.pool),
            scales: self.scales.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub features: ExtractorConfig,
    pub base: BaseSection,
    pub diffusion: DiffusionSection,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            features: ExtractorConfig::default(),
            base: BaseSection::default(),
            diffusion: DiffusionSection::default(),
            inference: InferenceConfig::default(),
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The desk-scale setup used for the synthetic end-to-end run.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.synthetic.image_shape = [64, 64, 3];
        cfg.inference.grid_sizes = vec![1, 8, 16];
        cfg.diffusion.unet.base_width = 16;
        cfg.diffusion.train.crop = Some(32);
        cfg.diffusion.train.t_max = Some(250);
        cfg.diffusion.train.steps = 1500;
        cfg.base.train.epochs = 100;
        cfg
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_value(self)?;
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
    }

    /// Check every cross-field invariant before any work starts. Every
    /// failure is reported as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn check(&self) -> Result<()> {
        let (h, w, c) = self.dataset.image_shape();
        if h == 0 || w == 0 || c == 0 {
            return config_err("image shape must be non-empty");
        }
        match self.dataset.source {
            DatasetSource::Synthetic => self.dataset.synthetic.validate()?,
            DatasetSource::Directory => {
                if self.dataset.root.is_none() {
                    return config_err("directory datasets need dataset.root");
                }
            }
        }
        self.features.validate((h, w, c))?;

        let base = &self.base.model;
        if base.heads == 0 || !base.d_model.is_multiple_of(base.heads) || !base.d_model.is_multiple_of(2) {
            return config_err(format!("base d_model {} must be even and divisible by {} heads", base.d_model, base.heads));
        }
        if self.base.train.batch_size == 0 {
            return config_err("base batch size must be positive");
        }

        let diff = &self.diffusion;
        let schedule = diff.schedule().map_err(|e| Error::Config(e.to_string()))?;
        diff.unet.validate()?;
        if diff.unet.image_channels != c {
            return config_err(format!("U-Net has {} channels, images have {c}", diff.unet.image_channels));
        }
        let k = diff.unet.size_multiple();
        if h % k != 0 || w % k != 0 {
            return config_err(format!("image size {h}x{w} must be a multiple of {k} for the U-Net"));
        }
        if diff.train.batch_size == 0 {
            return config_err("diffusion batch size must be positive");
        }
        if let Some(t) = diff.train.t_max {
            if t == 0 || t > schedule.steps {
                return config_err(format!("diffusion t_max {t} outside [1, {}]", schedule.steps));
            }
        }

        let inf = &self.inference;
        let ts = &inf.timesteps;
        if ts.is_empty() || *ts.last().unwrap() != 0 || ts.windows(2).any(|p| p[0] <= p[1]) {
            return config_err(format!("timesteps {ts:?} must be strictly descending and end at 0"));
        }
        if ts[0] > schedule.steps {
            return config_err(format!("timestep {} exceeds T = {}", ts[0], schedule.steps));
        }
        if !ts.contains(&inf.panel_timestep) {
            return config_err(format!("panel timestep {} is not a visited timestep", inf.panel_timestep));
        }
        if inf.grid_sizes.is_empty() || inf.n_sets == 0 {
            return config_err("need at least one grid size and one set");
        }
        for &g in &inf.grid_sizes {
            if g == 0 || h % g != 0 || w % g != 0 {
                return config_err(format!("grid size {g} does not divide {h}x{w}"));
            }
            if ((h / g) * (w / g)) % inf.n_sets != 0 {
                return config_err(format!("{} sets do not split the {}x{} grids of size {g}", inf.n_sets, h / g, w / g));
            }
            if let Some(crop) = diff.train.crop {
                if crop % g != 0 || ((crop / g) * (crop / g)) % inf.n_sets != 0 {
                    return config_err(format!("training crop {crop} is incompatible with grid size {g}"));
                }
            }
        }
        if let Some(crop) = diff.train.crop {
            if crop > h.min(w) || crop % k != 0 {
                return config_err(format!("training crop {crop} must fit the image and be a multiple of {k}"));
            }
        }
        self.inference.fusion(h, w).validate(h, w)?;
        if let Some(g) = inf.gamma_sweep.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return config_err(format!("sweep gamma {g} outside [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_toy_configs_validate() {
        let mut paper = RunConfig::default();
        paper.dataset.synthetic.image_shape = [224, 224, 3];
        paper.dataset.synthetic.grid_sizes = vec![1, 16];
        paper.features.target_grid = (14, 14);
        // 224 / 32 = 7 gives 49 grids, which two equal sets cannot split.
        assert!(matches!(paper.validate(), Err(Error::Config(_))));
        paper.inference.grid_sizes = vec![1, 16];
        assert!(paper.validate().is_ok(), "{:?}", paper.validate());
        assert!(RunConfig::toy().validate().is_ok(), "{:?}", RunConfig::toy().validate());
    }

    #[test]
    fn divisibility_violations_are_config_errors() {
        let mut cfg = RunConfig::toy();
        cfg.inference.grid_sizes = vec![3];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::toy();
        cfg.inference.timesteps = vec![250, 300, 0];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy();
        cfg.inference.scales = vec![1, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy();
        cfg.inference.n_sets = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::toy();
        cfg.dataset.synthetic.categories.truncate(1);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.inference.gamma = 0.8;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = a.clone();
        c.diffusion.train.steps += 1;
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let a = RunConfig::toy();
        let text = serde_json::to_string_pretty(&a).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(a, back);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(partial.seed, 7);
    }
}
