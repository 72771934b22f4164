use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use super::config::InferenceConfig;
use crate::base_recon::{base_heatmap, BaseHeatmap, BaseModel};
use crate::diffusion_core::{from_model_space, to_model_space, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::features::Extractor;
use crate::fusion::{multiscale_heatmap, smooth, st_average, FusionConfig, HeatmapStack};
use crate::inpaint::{assemble_with_provenance, diff_heatmap, conditioned_reverse_batch, make_partition, InpaintJob, ReverseOptions};
use crate::rng;

/// Frozen models and settings shared by every test image.
pub struct InferenceContext<'a> {
    pub extractor: &'a dyn Extractor,
    pub base: &'a BaseModel,
    pub denoiser: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a InferenceConfig,
    pub fusion: FusionConfig,
    pub seed: u64,
}

/// Per-image maps kept for evaluation and reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMaps {
    pub base: BaseHeatmap,
    /// Smoothed spatio-temporal diffusion map.
    pub sst: Array2<f64>,
    /// Single-scale diffusion heatmap per `(t, c)`.
    pub diff: BTreeMap<(usize, usize), Array2<f64>>,
}

/// Base heatmap, one conditioned trajectory per `(c, set)`, and the fused
/// diffusion map of one image. `key` names the image's random streams.
pub fn infer_image(ctx: &InferenceContext, key: &str, image: &Array3<f32>) -> Result<ImageMaps> {
    let f_in = ctx.extractor.extract(image)?;
    let f_out = ctx.base.reconstruct(&f_in)?;
    let base = base_heatmap(&f_in, &f_out)?;

    let (h, w, _) = image.dim();
    let cfg = ctx.config;
    let original = image.mapv(f64::from);
    let model_in = to_model_space(image);
    let mut partitions = Vec::with_capacity(cfg.grid_sizes.len());
    for &c in &cfg.grid_sizes {
        let mut prng = rng::stream(ctx.seed, &format!("infer/{key}/{c}/partition"));
        partitions.push(make_partition(h, w, c, cfg.n_sets, &mut prng)?);
    }
    let mut jobs = Vec::new();
    let mut rngs = Vec::new();
    for (p, &c) in partitions.iter().zip(&cfg.grid_sizes) {
        for (i, mask) in p.masks.iter().enumerate() {
            jobs.push(InpaintJob { image: &model_in, mask });
            rngs.push(rng::stream(ctx.seed, &format!("infer/{key}/{c}/{i}")));
        }
    }
    let options = ReverseOptions {
        known_region_deterministic: cfg.known_region_deterministic,
    };
    let trajectories = conditioned_reverse_batch(ctx.denoiser, ctx.schedule, &jobs, &cfg.timesteps, &mut rngs, options)?;

    let mut stack = HeatmapStack::new(&cfg.timesteps, &cfg.grid_sizes, &ctx.fusion.scales);
    let mut diff = BTreeMap::new();
    for &t in &cfg.timesteps {
        for (pi, (p, &c)) in partitions.iter().zip(&cfg.grid_sizes).enumerate() {
            let preds: Vec<Array3<f64>> = (0..cfg.n_sets)
                .map(|i| from_model_space(&trajectories[pi * cfg.n_sets + i].predictions[&t]))
                .collect();
            let (output, source) = assemble_with_provenance(p, &preds)?;
            if source.indexed_iter().any(|((y, x), &s)| p.masks[s][[y, x]] != 0) {
                return Err(Error::InvalidArgument("assembled pixel copied from a known region".into()));
            }
            let single = diff_heatmap(&original, &output)?;
            for &l in &ctx.fusion.scales {
                let map = if l == 1 { single.clone() } else { multiscale_heatmap(&original, &output, l)? };
                stack.insert(t, c, l, map);
            }
            diff.insert((t, c), single);
        }
    }
    let sst = smooth(&st_average(&stack)?, ctx.fusion.smoothing)?;
    Ok(ImageMaps { base, sst, diff })
}
