use candle_core::D;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{s, Array3, Array4, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    diffusion_loss, standard_normal, to_model_space, to_nchw, ConditionedBatch, NoisePredictor,
    NoiseSchedule, TrainableDenoiser, UNet, UNetConfig,
};
use crate::error::{arg_err, Error, Result};
use crate::rng::{self, Rng};
use crate::synthdata::DatasetManifest;

/// Produces the conditioning image `I_in` for a clean training image.
pub trait ConditionBuilder {
    fn condition(&self, x0: &Array3<f64>, rng: &mut Rng) -> Result<Array3<f64>>;

    /// Crop sizes must be multiples of this.
    fn size_multiple(&self) -> usize {
        1
    }
}

/// An all-zero condition, for unconditional toy problems.
pub struct ZeroCondition;

impl ConditionBuilder for ZeroCondition {
    fn condition(&self, x0: &Array3<f64>, _: &mut Rng) -> Result<Array3<f64>> {
        Ok(Array3::zeros(x0.raw_dim()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Largest training timestep; `None` trains over the full `[1, T]`.
    pub t_max: Option<usize>,
    /// Train on random square crops of this side instead of full images.
    pub crop: Option<usize>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            t_max: None,
            crop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainLog {
    /// Mean batch loss of every optimisation step.
    pub losses: Vec<f64>,
}

impl DiffusionTrainLog {
    /// Mean loss over the first and last `window` steps.
    pub fn head_tail(&self, window: usize) -> (f64, f64) {
        let w = window.min(self.losses.len()).max(1);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        (mean(&self.losses[..w.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(w)..]))
    }
}

fn resolve_t_max(cfg_t_max: Option<usize>, schedule: &NoiseSchedule) -> Result<usize> {
    let t_max = cfg_t_max.unwrap_or(schedule.steps);
    if t_max == 0 || t_max > schedule.steps {
        return arg_err(format!("training t_max {t_max} outside [1, {}]", schedule.steps));
    }
    Ok(t_max)
}

fn sample_batch(
    images: &[Array3<f64>],
    builder: &dyn ConditionBuilder,
    batch_size: usize,
    crop: Option<usize>,
    t_max: usize,
    rng: &mut Rng,
) -> Result<ConditionedBatch> {
    let (h, w, c) = images[0].dim();
    let (ch, cw) = crop.map_or((h, w), |s| (s, s));
    let mut x0 = Array4::zeros((batch_size, ch, cw, c));
    let mut cond = Array4::zeros((batch_size, ch, cw, c));
    let mut t = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let img = &images[rng.random_range(0..images.len())];
        let (oy, ox) = if crop.is_some() {
            (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw))
        } else {
            (0, 0)
        };
        let patch = img.slice(s![oy..oy + ch, ox..ox + cw, ..]).to_owned();
        cond.index_axis_mut(Axis(0), b).assign(&builder.condition(&patch, rng)?);
        x0.index_axis_mut(Axis(0), b).assign(&patch);
        t.push(rng.random_range(1..=t_max));
    }
    let eps = standard_normal(x0.raw_dim(), rng);
    Ok(ConditionedBatch { x0, cond, t, eps })
}

/// Minimise the noise-prediction loss with AdamW on model-space images.
pub fn train_denoiser(
    model: &dyn TrainableDenoiser,
    images: &[Array3<f64>],
    builder: &dyn ConditionBuilder,
    cfg: &DiffusionTrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<DiffusionTrainLog> {
    if images.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    if cfg.batch_size == 0 {
        return arg_err("batch size must be positive");
    }
    let (h, w, _) = images[0].dim();
    if images.iter().any(|i| i.dim() != images[0].dim()) {
        return Err(Error::Shape("training images differ in shape".into()));
    }
    if let Some(s) = cfg.crop {
        if s == 0 || s > h.min(w) || s % builder.size_multiple() != 0 {
            return arg_err(format!("crop {s} must fit the image and be a multiple of {}", builder.size_multiple()));
        }
    }
    let t_max = resolve_t_max(cfg.t_max, schedule)?;
    let mut opt = AdamW::new(
        model.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let device = model.device().clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(images, builder, cfg.batch_size, cfg.crop, t_max, rng)?;
        let xt = to_nchw(&batch.noisy(schedule)?, &device)?;
        let cond = to_nchw(&batch.cond, &device)?;
        let eps = to_nchw(&batch.eps, &device)?;
        let pred = model.forward_tensor(&xt, &cond, &batch.t)?;
        let loss = (pred - eps)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?.mean_all()?;
        opt.backward_step(&loss)?;
        let v = loss.to_scalar::<f32>()? as f64;
        if step % 100 == 0 {
            log::debug!("diffusion step {step}: loss {v:.4}");
        }
        losses.push(v);
    }
    Ok(DiffusionTrainLog { losses })
}

/// Loss on a fixed, seed-determined set of `(t, ε, I_in)` draws.
pub fn evaluate_loss(
    model: &dyn NoisePredictor,
    images: &[Array3<f64>],
    builder: &dyn ConditionBuilder,
    schedule: &NoiseSchedule,
    t_max: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let t_max = resolve_t_max(t_max, schedule)?;
    let mut rng = rng::seeded(seed);
    let mut total = 0.0;
    for chunk in images.chunks(8) {
        let n = chunk.len();
        let (h, w, c) = chunk[0].dim();
        let mut x0 = Array4::zeros((n, h, w, c));
        let mut cond = Array4::zeros((n, h, w, c));
        let mut t = Vec::with_capacity(n);
        for (b, img) in chunk.iter().enumerate() {
            x0.index_axis_mut(Axis(0), b).assign(img);
            cond.index_axis_mut(Axis(0), b).assign(&builder.condition(img, &mut rng)?);
            t.push(rng.random_range(1..=t_max));
        }
        let eps = standard_normal(x0.raw_dim(), &mut rng);
        total += diffusion_loss(model, &ConditionedBatch { x0, cond, t, eps }, schedule)? * n as f64;
    }
    Ok(total / images.len().max(1) as f64)
}

/// Fit a conditional U-Net on the (all-normal) train split.
pub fn train_diffusion(
    manifest: &DatasetManifest,
    builder: &dyn ConditionBuilder,
    net_cfg: &UNetConfig,
    cfg: &DiffusionTrainConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(UNet, DiffusionTrainLog)> {
    let train: Vec<_> = manifest.train().collect();
    if let Some(r) = train.iter().find(|r| r.is_anomalous) {
        return Err(Error::Dataset(format!("train split contains anomalous record {}", r.id)));
    }
    let images: Vec<Array3<f64>> = train.iter().map(|r| to_model_space(&r.image)).collect();
    let mut net = UNet::new(net_cfg, rng::derive_seed_u64(seed, "diff-init"))?;
    let log = train_denoiser(&net, &images, builder, cfg, schedule, &mut rng::stream(seed, "diff-train"))?;
    net.add_steps(cfg.steps);
    Ok((net, log))
}
