//! Transformer feature-reconstruction base model.
//!
//! Input features are flattened into `H_feat·W_feat` tokens, projected to
//! `d_model`, encoded with full self-attention, and decoded by a stack that
//! starts from a learnable query embedding (one query per token position) and
//! cross-attends to the encoder memory. The reconstruction error gives a
//! low-resolution anomaly map.

use candle_core::{Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{shape_err, Error, Result};
use crate::features::{Extractor, FeatureMap};
use crate::nn::{sinusoidal_embedding, Attention, LayerNorm, Linear, ParamStore};
use crate::rng;
use crate::synthdata::DatasetManifest;

/// `H_feat × W_feat` map of per-position reconstruction error norms.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseHeatmap {
    pub data: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_width: usize,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 4,
            ffn_width: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

/// Mean squared reconstruction error, normalised by the number of spatial
/// positions only: `‖F_in − F_out‖² / (H_feat·W_feat)`.
pub fn feat_loss(f_in: &FeatureMap, f_out: &FeatureMap) -> Result<f64> {
    if f_in.data.dim() != f_out.data.dim() {
        return shape_err(format!("feature shapes {:?} vs {:?}", f_in.data.dim(), f_out.data.dim()));
    }
    let (_, h, w) = f_in.data.dim();
    let sq: f64 = f_in
        .data
        .iter()
        .zip(f_out.data.iter())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum();
    Ok(sq / (h * w) as f64)
}

/// Per-position L2 norm of the reconstruction difference over channels.
pub fn base_heatmap(f_in: &FeatureMap, f_out: &FeatureMap) -> Result<BaseHeatmap> {
    if f_in.data.dim() != f_out.data.dim() {
        return shape_err(format!("feature shapes {:?} vs {:?}", f_in.data.dim(), f_out.data.dim()));
    }
    let (c, h, w) = f_in.data.dim();
    let data = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c)
            .map(|ch| (f_in.data[[ch, y, x]] as f64 - f_out.data[[ch, y, x]] as f64).powi(2))
            .sum::<f64>()
            .sqrt() as f32
    });
    Ok(BaseHeatmap { data })
}

struct EncoderLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &BaseModelConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model)?,
            attn: Attention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.d_model, cfg.ffn_width)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_width, cfg.d_model)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.ff1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((x + self.ff2.forward(&h)?)?)
    }
}

struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: Attention,
    norm2: LayerNorm,
    cross_attn: Attention,
    norm3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &BaseModelConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), cfg.d_model, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), cfg.d_model, cfg.heads)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), cfg.d_model)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.d_model, cfg.ffn_width)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_width, cfg.d_model)?,
        })
    }

    fn forward(&self, q: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(q)?;
        let q = (q + self.self_attn.forward(&h, &h)?)?;
        let h = self.norm2.forward(&q)?;
        let q = (&q + self.cross_attn.forward(&h, memory)?)?;
        let h = self.ff1.forward(&self.norm3.forward(&q)?)?.gelu_erf()?;
        Ok((q + self.ff2.forward(&h)?)?)
    }
}

pub struct BaseModel {
    config: BaseModelConfig,
    feature_channels: usize,
    grid: (usize, usize),
    seed: u64,
    epochs_trained: usize,
    store: ParamStore,
    in_proj: Linear,
    positions: Tensor,
    queries: Tensor,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    out_proj: Linear,
}

impl BaseModel {
    pub fn new(config: &BaseModelConfig, feature_channels: usize, grid: (usize, usize), seed: u64) -> Result<Self> {
        if !config.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even".into()));
        }
        let tokens = grid.0 * grid.1;
        let d = config.d_model;
        let mut store = ParamStore::new(seed);
        let in_proj = Linear::new(&mut store, "base.in_proj", feature_channels, d)?;
        let queries = store.normal("base.queries", &[tokens, d], 0.02)?;
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("base.enc{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut store, "base.enc_norm", d)?;
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("base.dec{i}"), config))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "base.dec_norm", d)?;
        let out_proj = Linear::new(&mut store, "base.out_proj", d, feature_channels)?;
        let pos: Vec<f64> = (0..tokens).map(|i| i as f64).collect();
        let positions = sinusoidal_embedding(&pos, d, store.device())?;
        Ok(Self {
            config: config.clone(),
            feature_channels,
            grid,
            seed,
            epochs_trained: 0,
            store,
            in_proj,
            positions,
            queries,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            out_proj,
        })
    }

    pub fn config(&self) -> &BaseModelConfig {
        &self.config
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// `(B, N, C_feat) -> (B, N, C_feat)`.
    fn forward_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let b = tokens.dim(0)?;
        let mut x = self.in_proj.forward(tokens)?.broadcast_add(&self.positions)?;
        for layer in &self.encoder {
            x = layer.forward(&x)?;
        }
        let memory = self.encoder_norm.forward(&x)?;
        let (n, d) = self.queries.dims2()?;
        let mut q = (&self.queries + &self.positions)?.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        for layer in &self.decoder {
            q = layer.forward(&q, &memory)?;
        }
        self.out_proj.forward(&self.decoder_norm.forward(&q)?)
    }

    fn to_tokens(&self, feats: &[&FeatureMap]) -> Result<Tensor> {
        let (h, w) = self.grid;
        let c = self.feature_channels;
        let mut flat = Vec::with_capacity(feats.len() * h * w * c);
        for f in feats {
            if f.data.dim() != (c, h, w) {
                return shape_err(format!("feature map {:?}, model expects {:?}", f.data.dim(), (c, h, w)));
            }
            for y in 0..h {
                for x in 0..w {
                    flat.extend((0..c).map(|ch| f.data[[ch, y, x]]));
                }
            }
        }
        Ok(Tensor::from_vec(flat, (feats.len(), h * w, c), self.store.device())?)
    }

    fn untokenize(&self, t: &Tensor) -> Result<Vec<FeatureMap>> {
        let (h, w) = self.grid;
        let c = self.feature_channels;
        let b = t.dim(0)?;
        let vals = t.flatten_all()?.to_vec1::<f32>()?;
        Ok((0..b)
            .map(|bi| {
                let base = bi * h * w * c;
                FeatureMap {
                    data: Array3::from_shape_fn((c, h, w), |(ch, y, x)| vals[base + (y * w + x) * c + ch]),
                }
            })
            .collect())
    }

    pub fn reconstruct(&self, f_in: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.reconstruct_batch(&[f_in])?.remove(0))
    }

    pub fn reconstruct_batch(&self, feats: &[&FeatureMap]) -> Result<Vec<FeatureMap>> {
        let tokens = self.to_tokens(feats)?;
        self.untokenize(&self.forward_tokens(&tokens)?)
    }

    /// Batch loss as a differentiable tensor: mean over samples of
    /// `Σ (F_in − F_out)² / (H_feat·W_feat)`.
    fn loss_tensor(&self, tokens: &Tensor) -> Result<Tensor> {
        let out = self.forward_tokens(tokens)?;
        let n = tokens.dim(1)? as f64;
        Ok(((out - tokens)?.sqr()?.sum(D::Minus1)?.sum(D::Minus1)? / n)?.mean_all()?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            json!({
                "kind": "base",
                "config": self.config,
                "feature_channels": self.feature_channels,
                "grid": [self.grid.0, self.grid.1],
                "seed": self.seed,
                "epoch": self.epochs_trained,
            }),
            self.store.export()?,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta["kind"] != "base" {
            return Err(Error::Checkpoint("not a base-model checkpoint".into()));
        }
        let config: BaseModelConfig = serde_json::from_value(meta["config"].clone())?;
        let channels: usize = serde_json::from_value(meta["feature_channels"].clone())?;
        let grid: [usize; 2] = serde_json::from_value(meta["grid"].clone())?;
        let seed: u64 = serde_json::from_value(meta["seed"].clone())?;
        let mut model = Self::new(&config, channels, (grid[0], grid[1]), seed)?;
        model.store.import(&ckpt.arrays)?;
        model.epochs_trained = serde_json::from_value(meta["epoch"].clone())?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean `feat_loss` of the model over a set of feature maps.
pub fn mean_feat_loss(model: &BaseModel, feats: &[FeatureMap]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in feats.chunks(32) {
        let refs: Vec<&FeatureMap> = chunk.iter().collect();
        for (f, r) in chunk.iter().zip(model.reconstruct_batch(&refs)?) {
            total += feat_loss(f, &r)?;
        }
    }
    Ok(total / feats.len().max(1) as f64)
}

/// Train the base model on pre-extracted normal features.
pub fn train_on_features(
    model: &mut BaseModel,
    feats: &[FeatureMap],
    cfg: &BaseTrainConfig,
    rng: &mut rng::Rng,
) -> Result<TrainLog> {
    if feats.is_empty() {
        return Err(Error::Dataset("no training features".into()));
    }
    let refs: Vec<&FeatureMap> = feats.iter().collect();
    let all_tokens = model.to_tokens(&refs)?;
    let initial_loss = mean_feat_loss(model, feats)?;
    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut order: Vec<u32> = (0..feats.len() as u32).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let ids = Tensor::new(idx, model.store.device())?;
            let batch = all_tokens.index_select(&ids, 0)?;
            let loss = model.loss_tensor(&batch)?;
            opt.backward_step(&loss)?;
            sum += loss.to_scalar::<f32>()? as f64;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
        model.epochs_trained += 1;
        log::debug!("base epoch {epoch}: loss {:.5}", sum / batches as f64);
    }
    let final_loss = mean_feat_loss(model, feats)?;
    Ok(TrainLog {
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

/// Extract features of the train split and fit a fresh base model.
pub fn train_base(
    manifest: &DatasetManifest,
    extractor: &dyn Extractor,
    model_cfg: &BaseModelConfig,
    train_cfg: &BaseTrainConfig,
    seed: u64,
) -> Result<(BaseModel, TrainLog)> {
    let train: Vec<_> = manifest.train().collect();
    if train.is_empty() {
        return Err(Error::Dataset("train split is empty".into()));
    }
    if let Some(r) = train.iter().find(|r| r.is_anomalous) {
        return Err(Error::Dataset(format!("train split contains anomalous record {}", r.id)));
    }
    let mut feats = Vec::with_capacity(train.len());
    for chunk in train.chunks(16) {
        let imgs: Vec<_> = chunk.iter().map(|r| &r.image).collect();
        feats.extend(extractor.extract_batch(&imgs)?);
    }
    let mut model = BaseModel::new(
        model_cfg,
        extractor.feature_channels(),
        extractor.grid(),
        rng::derive_seed_u64(seed, "base-init"),
    )?;
    let mut stream = rng::stream(seed, "base-train");
    let log = train_on_features(&mut model, &feats, train_cfg, &mut stream)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn fm(data: Array3<f32>) -> FeatureMap {
        FeatureMap { data }
    }

    #[test]
    fn feat_loss_direct_evaluation() {
        let zeros = fm(Array3::zeros((2, 2, 2)));
        let ones = fm(Array3::ones((2, 2, 2)));
        assert_eq!(feat_loss(&zeros, &ones).unwrap(), 2.0);
        assert_eq!(feat_loss(&ones, &ones).unwrap(), 0.0);
        assert!(feat_loss(&zeros, &fm(Array3::zeros((2, 2, 3)))).is_err());
    }

    #[test]
    fn heatmap_three_four_five() {
        let a = fm(Array3::zeros((2, 3, 3)));
        let mut b = a.clone();
        b.data[[0, 1, 2]] = 3.0;
        b.data[[1, 1, 2]] = 4.0;
        let h = base_heatmap(&a, &b).unwrap();
        assert_eq!(h.data[[1, 2]], 5.0);
        assert_eq!(h.data.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(base_heatmap(&a, &a).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reconstruction_keeps_shape_and_is_deterministic() {
        let cfg = BaseModelConfig { encoder_layers: 1, decoder_layers: 1, ..Default::default() };
        let model = BaseModel::new(&cfg, 12, (4, 4), 1).unwrap();
        let f = fm(Array3::from_shape_fn((12, 4, 4), |(c, y, x)| ((c + 2 * y + 3 * x) as f32 * 0.1).sin()));
        let a = model.reconstruct(&f).unwrap();
        assert_eq!(a.data.dim(), f.data.dim());
        assert_eq!(a, model.reconstruct(&f).unwrap());
        assert!(feat_loss(&f, &a).unwrap() > 0.0);
        assert!(model.reconstruct(&fm(Array3::zeros((11, 4, 4)))).is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs() {
        let cfg = BaseModelConfig { encoder_layers: 1, decoder_layers: 1, ..Default::default() };
        let model = BaseModel::new(&cfg, 6, (2, 2), 5).unwrap();
        let back = BaseModel::from_checkpoint(&model.to_checkpoint().unwrap()).unwrap();
        let f = fm(Array3::from_shape_fn((6, 2, 2), |(c, y, x)| (c * 4 + y * 2 + x) as f32 / 24.0));
        assert_eq!(model.reconstruct(&f).unwrap(), back.reconstruct(&f).unwrap());
    }
}
