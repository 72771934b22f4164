use candle_core::{Device, Tensor, Var};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{predict_via_tensor, NoisePredictor, TrainableDenoiser};
use crate::error::{shape_err, Result};
use crate::nn::{sinusoidal_embedding, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            hidden: 64,
            layers: 3,
            time_dim: 32,
        }
    }
}

/// Per-pixel conditional denoiser: every pixel is an independent sample.
/// Used for low-dimensional toy problems with a known optimum.
pub struct MlpDenoiser {
    config: MlpConfig,
    store: ParamStore,
    layers: Vec<Linear>,
    out: Linear,
}

impl MlpDenoiser {
    pub fn new(config: &MlpConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let mut layers = Vec::with_capacity(config.layers);
        let mut d_in = 2 * config.channels + config.time_dim;
        for i in 0..config.layers {
            layers.push(Linear::new(&mut store, &format!("mlp.hidden{i}"), d_in, config.hidden)?);
            d_in = config.hidden;
        }
        let out = Linear::new(&mut store, "mlp.out", d_in, config.channels)?;
        Ok(Self {
            config: config.clone(),
            store,
            layers,
            out,
        })
    }
}

impl NoisePredictor for MlpDenoiser {
    fn image_channels(&self) -> usize {
        self.config.channels
    }

    fn predict_noise(&self, x_t: &Array4<f64>, cond: &Array4<f64>, t: &[usize]) -> Result<Array4<f64>> {
        predict_via_tensor(self, x_t, cond, t)
    }
}

impl TrainableDenoiser for MlpDenoiser {
    fn forward_tensor(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if cond.dims4()? != (b, c, h, w) || c != self.config.channels || t.len() != b {
            return shape_err(format!("MLP input {:?} / condition {:?}", x_t.dims(), cond.dims()));
        }
        let rows = |x: &Tensor| -> Result<Tensor> { Ok(x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?) };
        let pos: Vec<f64> = t.iter().flat_map(|&v| std::iter::repeat_n(v as f64, h * w)).collect();
        let temb = sinusoidal_embedding(&pos, self.config.time_dim, self.store.device())?;
        let mut z = Tensor::cat(&[rows(x_t)?, rows(cond)?, temb], 1)?;
        for layer in &self.layers {
            z = layer.forward(&z)?.silu()?;
        }
        let out = self.out.forward(&z)?;
        Ok(out.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }
}
