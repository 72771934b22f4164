//! Forward diffusion, conditional noise prediction and reverse samplers.
//!
//! Image arrays here are `(N, H, W, C)` in `f64`; networks run in `f32` on
//! NCHW tensors and convert at the boundary. Sampler arithmetic stays in
//! `f64` so long deterministic trajectories do not accumulate rounding.

mod mlp;
mod schedule;
mod train;
mod unet;

use candle_core::{Device, Tensor, Var};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::Rng;

pub use mlp::{MlpConfig, MlpDenoiser};
pub use schedule::{
    ancestral_update, deterministic_update, forward_sample, forward_step, forward_step_with_noise, make_schedule,
    predict_x0, standard_normal, NoiseSchedule,
};
pub use train::{
    evaluate_loss, train_denoiser, train_diffusion, ConditionBuilder, DiffusionTrainConfig, DiffusionTrainLog,
    ZeroCondition,
};
pub use unet::{UNet, UNetConfig};

/// Anything that estimates the injected noise `ε̂ = z_θ(x_t, I_in, t)`.
pub trait NoisePredictor {
    fn image_channels(&self) -> usize;
    /// `x_t` and `cond` are `(N, H, W, C)`; one timestep per sample.
    fn predict_noise(&self, x_t: &Array4<f64>, cond: &Array4<f64>, t: &[usize]) -> Result<Array4<f64>>;
}

/// A noise predictor backed by trainable candle variables.
pub trait TrainableDenoiser: NoisePredictor {
    /// `x_t`, `cond`: `(N, C, H, W)` f32 tensors.
    fn forward_tensor(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor>;
    fn vars(&self) -> Vec<Var>;
    fn device(&self) -> &Device;
}

/// `(N, H, W, C)` f64 → `(N, C, H, W)` f32 tensor.
pub fn to_nchw(x: &Array4<f64>, device: &Device) -> Result<Tensor> {
    let (n, h, w, c) = x.dim();
    let data: Vec<f32> = x.view().permuted_axes([0, 3, 1, 2]).iter().map(|&v| v as f32).collect();
    Ok(Tensor::from_vec(data, (n, c, h, w), device)?)
}

/// `(N, C, H, W)` tensor → `(N, H, W, C)` f64.
pub fn from_nchw(t: &Tensor) -> Result<Array4<f64>> {
    let (n, c, h, w) = t.dims4()?;
    let data: Vec<f64> = t.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from).collect();
    let nchw = Array4::from_shape_vec((n, c, h, w), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(nchw.permuted_axes([0, 2, 3, 1]).as_standard_layout().to_owned())
}

pub(crate) fn predict_via_tensor<M: TrainableDenoiser + ?Sized>(
    model: &M,
    x_t: &Array4<f64>,
    cond: &Array4<f64>,
    t: &[usize],
) -> Result<Array4<f64>> {
    let xt = to_nchw(x_t, model.device())?;
    let c = to_nchw(cond, model.device())?;
    from_nchw(&model.forward_tensor(&xt, &c, t)?)
}

/// Validated noise prediction: shapes must agree and the output must have
/// the shape of `x_t`.
pub fn denoise(model: &dyn NoisePredictor, x_t: &Array4<f64>, cond: &Array4<f64>, t: &[usize]) -> Result<Array4<f64>> {
    if x_t.dim() != cond.dim() {
        return shape_err(format!("x_t {:?} vs condition {:?}", x_t.dim(), cond.dim()));
    }
    if x_t.dim().3 != model.image_channels() {
        return shape_err(format!("model expects {} channels, got {}", model.image_channels(), x_t.dim().3));
    }
    if t.len() != x_t.dim().0 {
        return shape_err(format!("{} timesteps for a batch of {}", t.len(), x_t.dim().0));
    }
    let out = model.predict_noise(x_t, cond, t)?;
    if out.dim() != x_t.dim() {
        return shape_err(format!("denoiser returned {:?} for input {:?}", out.dim(), x_t.dim()));
    }
    Ok(out)
}

/// Clean images, their conditions, timesteps and the injected noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedBatch {
    pub x0: Array4<f64>,
    pub cond: Array4<f64>,
    pub t: Vec<usize>,
    pub eps: Array4<f64>,
}

impl ConditionedBatch {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let d = self.x0.dim();
        if self.cond.dim() != d || self.eps.dim() != d || self.t.len() != d.0 {
            return shape_err("batch arrays disagree in shape");
        }
        if let Some(t) = self.t.iter().find(|&&t| t == 0 || t > schedule.steps) {
            return arg_err(format!("training timestep {t} outside [1, {}]", schedule.steps));
        }
        Ok(())
    }

    /// `x_t` for every sample.
    pub fn noisy(&self, schedule: &NoiseSchedule) -> Result<Array4<f64>> {
        let mut out = Array4::zeros(self.x0.dim());
        for (i, &t) in self.t.iter().enumerate() {
            let x0 = self.x0.index_axis(Axis(0), i).to_owned();
            let eps = self.eps.index_axis(Axis(0), i).to_owned();
            out.index_axis_mut(Axis(0), i).assign(&forward_sample(&x0, t, &eps, schedule)?);
        }
        Ok(out)
    }
}

/// Mean over the batch of `‖ε − ε̂‖²`.
pub fn diffusion_loss(model: &dyn NoisePredictor, batch: &ConditionedBatch, schedule: &NoiseSchedule) -> Result<f64> {
    batch.validate(schedule)?;
    let eps_hat = denoise(model, &batch.noisy(schedule)?, &batch.cond, &batch.t)?;
    let n = batch.t.len();
    let total: f64 = (&batch.eps - &eps_hat).mapv(|d| d * d).sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ancestral,
    Deterministic,
}

/// One reverse step for a whole batch sharing the timestep `t`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    model: &dyn NoisePredictor,
    x_t: &Array4<f64>,
    cond: &Array4<f64>,
    t: usize,
    t_next: usize,
    mode: SamplerMode,
    rng: &mut Rng,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    schedule.check_t(t)?;
    if t_next >= t {
        return arg_err(format!("reverse step needs t_next < t, got {t} -> {t_next}"));
    }
    let eps_hat = denoise(model, x_t, cond, &vec![t; x_t.dim().0])?;
    match mode {
        SamplerMode::Deterministic => deterministic_update(x_t, &eps_hat, t, t_next, schedule),
        SamplerMode::Ancestral => {
            if t_next + 1 != t {
                return arg_err("ancestral sampling only steps t -> t-1");
            }
            let noise = standard_normal(x_t.raw_dim(), rng);
            ancestral_update(x_t, &eps_hat, t, &noise, schedule)
        }
    }
}

/// `(H, W, C)` image in `[0, 1]` → diffusion space `[-1, 1]`.
pub fn to_model_space(img: &Array3<f32>) -> Array3<f64> {
    img.mapv(|v| 2.0 * v as f64 - 1.0)
}

pub fn from_model_space(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| (v + 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Returns a fixed array regardless of input.
    struct Fixed(Array4<f64>);

    impl NoisePredictor for Fixed {
        fn image_channels(&self) -> usize {
            self.0.dim().3
        }
        fn predict_noise(&self, _: &Array4<f64>, _: &Array4<f64>, _: &[usize]) -> Result<Array4<f64>> {
            Ok(self.0.clone())
        }
    }

    fn batch(seed: u64) -> ConditionedBatch {
        let mut rng = seeded(seed);
        let dim = ndarray::Ix4(3, 4, 4, 2);
        ConditionedBatch {
            x0: standard_normal(dim, &mut rng),
            cond: standard_normal(dim, &mut rng),
            t: vec![5, 50, 99],
            eps: standard_normal(dim, &mut rng),
        }
    }

    #[test]
    fn loss_of_exact_and_offset_predictions() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let b = batch(1);
        assert_eq!(diffusion_loss(&Fixed(b.eps.clone()), &b, &s).unwrap(), 0.0);
        let off = Fixed(b.eps.mapv(|e| e + 1.0));
        assert!((diffusion_loss(&off, &b, &s).unwrap() - 32.0).abs() < 1e-9);
    }

    #[test]
    fn loss_is_invariant_to_batch_order() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let b = batch(2);
        let pred = Fixed(b.eps.mapv(|e| 0.5 * e));
        let perm = [2usize, 0, 1];
        let permuted = ConditionedBatch {
            x0: b.x0.select(Axis(0), &perm),
            cond: b.cond.select(Axis(0), &perm),
            t: perm.iter().map(|&i| b.t[i]).collect(),
            eps: b.eps.select(Axis(0), &perm),
        };
        let pred_p = Fixed(pred.0.select(Axis(0), &perm));
        let a = diffusion_loss(&pred, &b, &s).unwrap();
        let c = diffusion_loss(&pred_p, &permuted, &s).unwrap();
        assert!((a - c).abs() < 1e-6);
    }

    #[test]
    fn reverse_step_rejects_bad_orderings() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let b = batch(3);
        let m = Fixed(b.eps.clone());
        let mut rng = seeded(0);
        assert!(reverse_step(&m, &b.x0, &b.cond, 10, 10, SamplerMode::Deterministic, &mut rng, &s).is_err());
        assert!(reverse_step(&m, &b.x0, &b.cond, 10, 5, SamplerMode::Ancestral, &mut rng, &s).is_err());
        assert!(reverse_step(&m, &b.x0, &b.cond, 10, 9, SamplerMode::Ancestral, &mut rng, &s).is_ok());
    }

    #[test]
    fn layout_conversion_round_trips() {
        let x = standard_normal(ndarray::Ix4(2, 3, 5, 4), &mut seeded(9)).mapv(|v| v as f32 as f64);
        let t = to_nchw(&x, &Device::Cpu).unwrap();
        assert_eq!(t.dims4().unwrap(), (2, 4, 3, 5));
        assert_eq!(from_nchw(&t).unwrap(), x);
    }
}
