//! Conditional U-Net: the noisy sample and the condition image are stacked
//! on the channel axis; a timestep embedding is added inside every residual
//! block.

use candle_core::{Device, Tensor, Var};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{predict_via_tensor, NoisePredictor, TrainableDenoiser};
use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::nn::{sinusoidal_embedding, Conv2d, GroupNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_width: 32,
            channel_mults: vec![1, 2, 2],
            res_blocks: 2,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_width == 0 || self.channel_mults.is_empty() {
            return Err(Error::Config("U-Net needs channels, a width and at least one level".into()));
        }
        if !self.base_width.is_multiple_of(2) {
            return Err(Error::Config("U-Net base width must be even".into()));
        }
        for m in &self.channel_mults {
            if *m == 0 || !(self.base_width * m).is_multiple_of(self.groups) {
                return Err(Error::Config(format!(
                    "level width {} is not divisible into {} groups",
                    self.base_width * m,
                    self.groups
                )));
            }
        }
        Ok(())
    }

    /// Spatial sizes must survive `levels − 1` halvings.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, temb_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), groups, c_in)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, c_out)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), groups, c_out)?,
            conv2: Conv2d::zeroed(store, &format!("{name}.conv2"), c_out, c_out, 3)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Nearest-neighbour ×2 upsampling built from differentiable reshapes.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

enum Down {
    Res(ResBlock),
    Downsample(Conv2d),
}

enum Up {
    Res(ResBlock),
    Upsample(Conv2d),
}

pub struct UNet {
    config: UNetConfig,
    seed: u64,
    steps_trained: usize,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Down>,
    mid: ResBlock,
    up: Vec<Up>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let w = config.base_width;
        let g = config.groups;
        let temb_dim = 4 * w;
        let time1 = Linear::new(&mut store, "unet.time1", w, temb_dim)?;
        let time2 = Linear::new(&mut store, "unet.time2", temb_dim, temb_dim)?;
        let conv_in = Conv2d::new(&mut store, "unet.conv_in", 2 * config.image_channels, w, 3, 1)?;

        let levels = config.channel_mults.len();
        let mut skips = vec![w];
        let mut ch = w;
        let mut down = Vec::new();
        for (l, m) in config.channel_mults.iter().enumerate() {
            let c_out = w * m;
            for r in 0..config.res_blocks {
                down.push(Down::Res(ResBlock::new(&mut store, &format!("unet.down{l}.res{r}"), ch, c_out, temb_dim, g)?));
                ch = c_out;
                skips.push(ch);
            }
            if l + 1 < levels {
                down.push(Down::Downsample(Conv2d::new(&mut store, &format!("unet.down{l}.pool"), ch, ch, 3, 2)?));
                skips.push(ch);
            }
        }
        let mid = ResBlock::new(&mut store, "unet.mid", ch, ch, temb_dim, g)?;
        let mut up = Vec::new();
        for (l, m) in config.channel_mults.iter().enumerate().rev() {
            let c_out = w * m;
            for r in 0..=config.res_blocks {
                let skip = skips.pop().expect("skip bookkeeping");
                up.push(Up::Res(ResBlock::new(&mut store, &format!("unet.up{l}.res{r}"), ch + skip, c_out, temb_dim, g)?));
                ch = c_out;
            }
            if l > 0 {
                up.push(Up::Upsample(Conv2d::new(&mut store, &format!("unet.up{l}.unpool"), ch, ch, 3, 1)?));
            }
        }
        let norm_out = GroupNorm::new(&mut store, "unet.norm_out", g, ch)?;
        let conv_out = Conv2d::zeroed(&mut store, "unet.conv_out", ch, config.image_channels, 3)?;
        Ok(Self {
            config: config.clone(),
            seed,
            steps_trained: 0,
            store,
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn steps_trained(&self) -> usize {
        self.steps_trained
    }

    pub(crate) fn add_steps(&mut self, n: usize) {
        self.steps_trained += n;
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.store.export()?.iter().map(|a| a.data.len()).sum())
    }

    /// Checkpoint with the schedule description merged into the metadata.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut meta = json!({
            "kind": "unet",
            "config": self.config,
            "seed": self.seed,
            "steps": self.steps_trained,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        Ok(Checkpoint::new(meta, self.store.export()?))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta["kind"] != "unet" {
            return Err(Error::Checkpoint("not a U-Net checkpoint".into()));
        }
        let config: UNetConfig = serde_json::from_value(meta["config"].clone())?;
        let seed: u64 = serde_json::from_value(meta["seed"].clone())?;
        let mut net = Self::new(&config, seed)?;
        net.store.import(&ckpt.arrays)?;
        net.steps_trained = serde_json::from_value(meta["steps"].clone())?;
        Ok(net)
    }
}

impl NoisePredictor for UNet {
    fn image_channels(&self) -> usize {
        self.config.image_channels
    }

    fn predict_noise(&self, x_t: &Array4<f64>, cond: &Array4<f64>, t: &[usize]) -> Result<Array4<f64>> {
        predict_via_tensor(self, x_t, cond, t)
    }
}

impl TrainableDenoiser for UNet {
    fn forward_tensor(&self, x_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if cond.dims4()? != (b, c, h, w) || c != self.config.image_channels {
            return shape_err(format!("U-Net input {:?} / condition {:?}", x_t.dims(), cond.dims()));
        }
        let k = self.config.size_multiple();
        if h % k != 0 || w % k != 0 {
            return shape_err(format!("spatial size {h}x{w} must be a multiple of {k}"));
        }
        let pos: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let temb = sinusoidal_embedding(&pos, self.config.base_width, self.store.device())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?.silu()?;

        let mut h = self.conv_in.forward(&Tensor::cat(&[x_t, cond], 1)?)?;
        let mut skips = vec![h.clone()];
        for block in &self.down {
            h = match block {
                Down::Res(r) => r.forward(&h, &temb)?,
                Down::Downsample(conv) => conv.forward(&h)?,
            };
            skips.push(h.clone());
        }
        h = self.mid.forward(&h, &temb)?;
        for block in &self.up {
            h = match block {
                Up::Res(r) => {
                    let skip = skips.pop().expect("skip bookkeeping");
                    r.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?
                }
                Up::Upsample(conv) => conv.forward(&upsample2(&h)?)?,
            };
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }

    fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion_core::{denoise, standard_normal};
    use crate::rng::seeded;

    fn small() -> UNetConfig {
        UNetConfig { base_width: 8, channel_mults: vec![1, 2], res_blocks: 1, groups: 4, ..Default::default() }
    }

    #[test]
    fn output_shape_matches_input_and_is_pure() {
        let net = UNet::new(&small(), 1).unwrap();
        // Zero-initialised output conv would make the test vacuous.
        let arrays: Vec<_> = net
            .store
            .export()
            .unwrap()
            .into_iter()
            .map(|mut a| {
                if a.name.starts_with("unet.conv_out") {
                    a.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.37).sin() * 0.1);
                }
                a
            })
            .collect();
        net.store.import(&arrays).unwrap();
        let mut rng = seeded(2);
        let x = standard_normal(ndarray::Ix4(2, 8, 8, 3), &mut rng);
        let c = standard_normal(ndarray::Ix4(2, 8, 8, 3), &mut rng);
        let a = denoise(&net, &x, &c, &[3, 700]).unwrap();
        assert_eq!(a.dim(), x.dim());
        assert!(a.iter().any(|v| *v != 0.0));
        assert_eq!(a, denoise(&net, &x, &c, &[3, 700]).unwrap());
        assert!(denoise(&net, &x, &c.slice(ndarray::s![.., .., .., ..2]).to_owned(), &[3, 700]).is_err());
        assert!(denoise(&net, &standard_normal(ndarray::Ix4(1, 7, 7, 3), &mut rng), &standard_normal(ndarray::Ix4(1, 7, 7, 3), &mut rng), &[1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = UNet::new(&small(), 4).unwrap();
        let ck = net.to_checkpoint(json!({"steps_total": 1000})).unwrap();
        assert_eq!(ck.metadata["steps_total"], 1000);
        let back = UNet::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(net.store.export().unwrap(), back.store.export().unwrap());
    }

    #[test]
    fn bad_group_count_is_rejected() {
        assert!(UNet::new(&UNetConfig { base_width: 6, groups: 4, ..small() }, 0).is_err());
    }
}
