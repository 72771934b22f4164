//! Stage graph, on-disk layout and the reproducibility manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::RunConfig;
use super::dump::{read_heatmap, write_heatmap, DumpSidecar};
use super::evaluate::{evaluate_records, metrics_csv, EvalRecord, Metrics};
use super::infer::{infer_image, InferenceContext};
use super::report::{default_panel_keys, panel_name, render_histogram, render_panel, save_png, PanelInput, PanelScale};
use crate::base_recon::{train_base, BaseHeatmap, BaseModel};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::diffusion_core::{train_diffusion, UNet};
use crate::error::{Error, Result};
use crate::evalkit::{histograms_to_csv, mask_degradation_experiment};
use crate::features::{ConvPyramid, Extractor};
use crate::fusion::{blend, image_score};
use crate::inpaint::GridConditioner;
use crate::synthdata::{
    generate_dataset, load_directory_dataset, load_persisted_dataset, persist_dataset, DatasetManifest, DatasetSource,
    SampleRecord, MANIFEST_FILE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Data,
    TrainBase,
    TrainDiffusion,
    Infer,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Data,
        Stage::TrainBase,
        Stage::TrainDiffusion,
        Stage::Infer,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::TrainBase => "train-base",
            Stage::TrainDiffusion => "train-diffusion",
            Stage::Infer => "infer",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Parse a comma-separated list such as `data,train-base`.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.data_dir().join(MANIFEST_FILE)
    }

    pub fn extractor_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/extractor.ckpt")
    }

    pub fn base_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/base.ckpt")
    }

    pub fn diffusion_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/diffusion.ckpt")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.json"))
    }

    pub fn heatmap_dir(&self, category: &str, sample_id: &str) -> PathBuf {
        self.root.join("heatmaps").join(category).join(sample_id)
    }

    pub fn inference_index(&self) -> PathBuf {
        self.root.join("inference/index.json")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics/metrics.json")
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }

    /// Artifacts a stage reads.
    pub fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Data => vec![],
            Stage::TrainBase | Stage::TrainDiffusion => vec![self.dataset_manifest()],
            Stage::Infer => vec![self.dataset_manifest(), self.extractor_ckpt(), self.base_ckpt(), self.diffusion_ckpt()],
            Stage::Evaluate => vec![self.dataset_manifest(), self.inference_index()],
            Stage::Report => vec![self.dataset_manifest(), self.inference_index(), self.metrics_json()],
        }
    }

    /// Artifacts a stage is guaranteed to leave behind.
    pub fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Data => vec![self.dataset_manifest()],
            Stage::TrainBase => vec![self.extractor_ckpt(), self.base_ckpt()],
            Stage::TrainDiffusion => vec![self.diffusion_ckpt()],
            Stage::Infer => vec![self.inference_index()],
            Stage::Evaluate => vec![self.metrics_json()],
            Stage::Report => vec![],
        }
    }
}

/// Everything a run produced, relative to its output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    pub checkpoints: Vec<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
    pub logs: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub metrics_summary: Option<Metrics>,
}

/// Reproducibility record written next to the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub seed_streams: Vec<String>,
    pub code_version: String,
    pub stages: Vec<Stage>,
    /// Every file under the run directory, relative and sorted.
    pub artifacts: Vec<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(path.to_path_buf())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Fail with the first artifact a requested stage needs that neither exists
/// nor is produced by an earlier requested stage.
pub fn check_dependencies(layout: &RunLayout, stages: &[Stage]) -> Result<()> {
    let mut produced = Vec::new();
    for &stage in stages {
        for input in layout.inputs(stage) {
            if !produced.contains(&input) && !input.exists() {
                return Err(Error::MissingArtifact(input));
            }
        }
        produced.extend(layout.outputs(stage));
    }
    Ok(())
}

/// Run the requested stages in pipeline order.
pub fn run_pipeline(config: &RunConfig, stages: &[Stage]) -> Result<RunArtifacts> {
    config.validate()?;
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let layout = RunLayout::new(&config.output_dir);
    check_dependencies(&layout, &stages)?;

    let mut art = RunArtifacts {
        output_dir: layout.root.clone(),
        stages: stages.clone(),
        ..Default::default()
    };
    for &stage in &stages {
        let started = Instant::now();
        log::info!("stage {stage}: start");
        match stage {
            Stage::Data => stage_data(config, &layout)?,
            Stage::TrainBase => {
                let (ckpts, log) = stage_train_base(config, &layout)?;
                art.checkpoints.extend(ckpts);
                art.logs.push(log);
            }
            Stage::TrainDiffusion => {
                let (ckpt, log) = stage_train_diffusion(config, &layout)?;
                art.checkpoints.push(ckpt);
                art.logs.push(log);
            }
            Stage::Infer => art.heatmaps = stage_infer(config, &layout)?,
            Stage::Evaluate => {
                let (paths, metrics) = stage_evaluate(config, &layout)?;
                art.metrics = paths;
                art.metrics_summary = Some(metrics);
            }
            Stage::Report => art.plots = stage_report(config, &layout)?,
        }
        log::info!("stage {stage}: done in {:.1}s", started.elapsed().as_secs_f64());
    }
    art.manifest = write_run_manifest(config, &layout, &stages)?;
    Ok(art)
}

fn write_run_manifest(config: &RunConfig, layout: &RunLayout, stages: &[Stage]) -> Result<PathBuf> {
    let path = layout.run_manifest();
    let mut artifacts = Vec::new();
    if layout.root.exists() {
        for entry in walkdir::WalkDir::new(&layout.root).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Io(e.into()))?;
            let p = entry.path();
            if entry.file_type().is_file() && p != path && p.extension().is_none_or(|e| e != "partial") {
                artifacts.push(p.strip_prefix(&layout.root).unwrap_or(p).to_path_buf());
            }
        }
    }
    let manifest = RunManifest {
        config_hash: config.hash()?,
        seed: config.seed,
        seed_streams: ["data/<category>", "base-init", "base-train", "diff-init", "diff-train", "infer/<key>/<c>/<set>"]
            .map(String::from)
            .to_vec(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        stages: stages.to_vec(),
        artifacts,
    };
    write_json(&path, &manifest)
}

fn load_dataset(layout: &RunLayout) -> Result<DatasetManifest> {
    load_persisted_dataset(&layout.data_dir())
}

fn stage_data(config: &RunConfig, layout: &RunLayout) -> Result<()> {
    let manifest = match config.dataset.source {
        DatasetSource::Synthetic => generate_dataset(&config.dataset.synthetic, config.seed)?,
        DatasetSource::Directory => {
            let root = config.dataset.root.as_ref().ok_or_else(|| Error::Config("dataset.root is unset".into()))?;
            let (h, w, _) = config.dataset.image_shape();
            load_directory_dataset(root, h, w)?
        }
    };
    persist_dataset(&manifest, &layout.data_dir())
}

fn stage_train_base(config: &RunConfig, layout: &RunLayout) -> Result<(Vec<PathBuf>, PathBuf)> {
    let data = load_dataset(layout)?;
    let extractor = ConvPyramid::build(&config.features, data.image_shape)?;
    let started = Instant::now();
    let (model, log) = train_base(&data, &extractor, &config.base.model, &config.base.train, config.seed)?;
    extractor.to_checkpoint()?.save(&layout.extractor_ckpt())?;
    model.to_checkpoint()?.save(&layout.base_ckpt())?;
    let log_path = write_json(
        &layout.log("base_train"),
        &json!({ "log": log, "seconds": started.elapsed().as_secs_f64() }),
    )?;
    Ok((vec![layout.extractor_ckpt(), layout.base_ckpt()], log_path))
}

fn stage_train_diffusion(config: &RunConfig, layout: &RunLayout) -> Result<(PathBuf, PathBuf)> {
    let data = load_dataset(layout)?;
    let schedule = config.diffusion.schedule()?;
    let builder = GridConditioner {
        grid_sizes: config.inference.grid_sizes.clone(),
        n_sets: config.inference.n_sets,
    };
    let started = Instant::now();
    let (net, log) = train_diffusion(&data, &builder, &config.diffusion.unet, &config.diffusion.train, &schedule, config.seed)?;
    let extra = json!({
        "schedule": {
            "steps": config.diffusion.steps,
            "beta_start": config.diffusion.beta_start,
            "beta_end": config.diffusion.beta_end,
        }
    });
    net.to_checkpoint(extra)?.save(&layout.diffusion_ckpt())?;
    let (head, tail) = log.head_tail(50);
    let log_path = write_json(
        &layout.log("diffusion_train"),
        &json!({
            "losses": log.losses,
            "head_mean": head,
            "tail_mean": tail,
            "seconds": started.elapsed().as_secs_f64(),
        }),
    )?;
    Ok((layout.diffusion_ckpt(), log_path))
}

/// One line of `inference/index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: String,
    pub category: String,
    pub sample_id: String,
    pub label: u8,
    pub defect: Option<String>,
    pub score: f64,
}

fn sidecar(map: &Array2<f64>, key: &str, kind: &str, t: Option<usize>, c: Option<usize>) -> DumpSidecar {
    let (h, w) = map.dim();
    DumpSidecar { shape: [h, w], sample_id: key.to_string(), kind: kind.to_string(), t, c }
}

fn diff_stem(t: usize, c: usize) -> String {
    format!("diff_t{t}_c{c}")
}

fn stage_infer(config: &RunConfig, layout: &RunLayout) -> Result<Vec<PathBuf>> {
    let data = load_dataset(layout)?;
    let extractor = ConvPyramid::from_checkpoint(&Checkpoint::load(&layout.extractor_ckpt())?)?;
    let base = BaseModel::from_checkpoint(&Checkpoint::load(&layout.base_ckpt())?)?;
    let ckpt = Checkpoint::load(&layout.diffusion_ckpt())?;
    let denoiser = UNet::from_checkpoint(&ckpt)?;
    let steps = ckpt.metadata["schedule"]["steps"].as_u64();
    if steps != Some(config.diffusion.steps as u64) {
        return Err(Error::Config(format!(
            "diffusion checkpoint was trained with T = {steps:?}, config has {}",
            config.diffusion.steps
        )));
    }
    let schedule = config.diffusion.schedule()?;
    let (h, w, c_img) = data.image_shape;
    let fusion = config.inference.fusion(h, w);
    let ctx = InferenceContext {
        extractor: &extractor,
        base: &base,
        denoiser: &denoiser,
        schedule: &schedule,
        config: &config.inference,
        fusion: fusion.clone(),
        seed: config.seed,
    };
    let mut written = Vec::new();
    let mut index = Vec::new();
    for r in data.test() {
        let key = data.key(r);
        let category = &data.categories[r.category];
        let maps = infer_image(&ctx, &key, &r.image)?;
        let dir = layout.heatmap_dir(category, &r.id);
        let base_map = maps.base.data.mapv(f64::from);
        let out = blend(&maps.base, &maps.sst, fusion.gamma, extractor.feature_channels(), c_img)?;
        for (name, map) in [("base", &base_map), ("sst", &maps.sst), ("out", &out)] {
            written.extend(write_heatmap(&dir.join(name), map, &sidecar(map, &key, name, None, None))?);
        }
        if config.inference.dump_diff_heatmaps {
            for (&(t, c), map) in &maps.diff {
                let stem = dir.join(diff_stem(t, c));
                written.extend(write_heatmap(&stem, map, &sidecar(map, &key, "diff", Some(t), Some(c)))?);
            }
        }
        index.push(IndexEntry {
            key,
            category: category.clone(),
            sample_id: r.id.clone(),
            label: r.is_anomalous as u8,
            defect: r.defect.clone(),
            score: image_score(&out, fusion.pool)?,
        });
    }
    written.push(write_json(&layout.inference_index(), &index)?);
    Ok(written)
}

fn load_base(stem: &Path) -> Result<BaseHeatmap> {
    let (map, _) = read_heatmap(stem)?;
    Ok(BaseHeatmap { data: map.mapv(|v| v as f32) })
}

fn eval_record(layout: &RunLayout, data: &DatasetManifest, r: &SampleRecord) -> Result<EvalRecord> {
    let category = data.categories[r.category].clone();
    let dir = layout.heatmap_dir(&category, &r.id);
    Ok(EvalRecord {
        key: data.key(r),
        base: load_base(&dir.join("base"))?,
        sst: read_heatmap(&dir.join("sst"))?.0,
        category,
        is_anomalous: r.is_anomalous,
        defect: r.defect.clone(),
        gt_mask: r.gt_mask.clone(),
    })
}

fn stage_evaluate(config: &RunConfig, layout: &RunLayout) -> Result<(Vec<PathBuf>, Metrics)> {
    let data = load_dataset(layout)?;
    let records = data.test().map(|r| eval_record(layout, &data, r)).collect::<Result<Vec<_>>>()?;
    let (h, w, c_img) = data.image_shape;
    let fusion = config.inference.fusion(h, w);
    let metrics = evaluate_records(
        &records,
        &data.categories,
        &fusion,
        &config.inference.gamma_sweep,
        config.features.feature_channels(),
        c_img,
    )?;
    let dir = layout.metrics_dir();
    let mut scores = String::from("key,category,label,defect,score\n");
    for s in &metrics.scores {
        scores.push_str(&format!(
            "{},{},{},{},{}\n",
            s.key,
            s.category,
            s.label,
            s.defect.as_deref().unwrap_or(""),
            s.score
        ));
    }
    let files = [
        ("metrics.csv", metrics_csv(&metrics)),
        ("scores.csv", scores),
        ("histograms.csv", histograms_to_csv(&metrics.histograms)),
    ];
    let mut paths = vec![write_json(&layout.metrics_json(), &metrics)?];
    for (name, text) in files {
        let p = dir.join(name);
        write_atomic(&p, text.as_bytes())?;
        paths.push(p);
    }
    Ok((paths, metrics))
}

/// Per-panel record in `plots/panels.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub key: String,
    pub file: String,
    pub label: u8,
    pub score: f64,
    pub threshold: f64,
    pub below_threshold: bool,
}

fn mean_diff_map(dir: &Path, t: usize, grid_sizes: &[usize]) -> Result<Array2<f64>> {
    let mut acc: Option<Array2<f64>> = None;
    for &c in grid_sizes {
        let (map, _) = read_heatmap(&dir.join(diff_stem(t, c)))?;
        acc = Some(match acc {
            Some(a) => a + map,
            None => map,
        });
    }
    let sum = acc.ok_or_else(|| Error::Config("no grid sizes configured".into()))?;
    Ok(sum / grid_sizes.len() as f64)
}

fn max_of(map: &Array2<f64>) -> f64 {
    map.iter().cloned().fold(0.0, f64::max)
}

/// Composite panels for `keys` (all defaults when `None`) and one score
/// histogram per category. Needs the inference dumps and the metrics.
pub fn emit_plots(config: &RunConfig, keys: Option<&[String]>) -> Result<Vec<PathBuf>> {
    let layout = RunLayout::new(&config.output_dir);
    let data = load_dataset(&layout)?;
    let metrics: Metrics = read_json(&layout.metrics_json())?;
    let _: Vec<IndexEntry> = read_json(&layout.inference_index())?;
    let inf = &config.inference;
    if !inf.timesteps.contains(&inf.panel_timestep) {
        return Err(Error::Config(format!("panel timestep {} is not an inference timestep", inf.panel_timestep)));
    }
    let keys = match keys {
        Some(k) => k.to_vec(),
        None => default_panel_keys(&metrics, inf.panels_per_label),
    };
    let by_key: BTreeMap<String, &SampleRecord> = data.test().map(|r| (data.key(r), r)).collect();

    // Shared colour scale per category.
    let mut scales: BTreeMap<usize, PanelScale> = BTreeMap::new();
    for r in data.test() {
        let dir = layout.heatmap_dir(&data.categories[r.category], &r.id);
        let base = max_of(&read_heatmap(&dir.join("base"))?.0);
        let out = max_of(&read_heatmap(&dir.join("out"))?.0);
        let diff = max_of(&mean_diff_map(&dir, inf.panel_timestep, &inf.grid_sizes)?);
        let s = scales.entry(r.category).or_insert(PanelScale { base: 0.0, diffusion: 0.0, fused: 0.0, score: 0.0 });
        s.base = s.base.max(base);
        s.diffusion = s.diffusion.max(diff);
        s.fused = s.fused.max(out);
    }
    for row in &metrics.scores {
        if let Some(r) = by_key.get(&row.key) {
            let s = scales.get_mut(&r.category).expect("category scale");
            s.score = s.score.max(row.score);
        }
    }

    let plots = layout.plots_dir();
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for key in &keys {
        let r = by_key
            .get(key)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown test sample {key}")))?;
        let category = &data.categories[r.category];
        let dir = layout.heatmap_dir(category, &r.id);
        let base = load_base(&dir.join("base"))?;
        let fused = read_heatmap(&dir.join("out"))?.0;
        let diffusion = mean_diff_map(&dir, inf.panel_timestep, &inf.grid_sizes)?;
        let score = metrics
            .scores
            .iter()
            .find(|s| &s.key == key)
            .map(|s| s.score)
            .ok_or_else(|| Error::MissingArtifact(layout.metrics_json()))?;
        let threshold = metrics.thresholds[category];
        let panel = render_panel(&PanelInput {
            image: &r.image,
            base: &base.data,
            diffusion: &diffusion,
            fused: &fused,
            mask: &r.gt_mask,
            score,
            threshold,
            scale: scales[&r.category],
        });
        let file = panel_name(category, &r.id);
        written.push(save_png(&panel, &plots.join(&file))?);
        entries.push(PanelEntry {
            key: key.clone(),
            file,
            label: r.is_anomalous as u8,
            score,
            threshold,
            below_threshold: score < threshold,
        });
    }
    written.push(write_json(&plots.join("panels.json"), &entries)?);
    for hist in &metrics.histograms {
        let img = render_histogram(hist, metrics.thresholds.get(&hist.category).copied());
        written.push(save_png(&img, &plots.join(format!("{}_histogram.png", hist.category)))?);
    }
    Ok(written)
}

fn stage_report(config: &RunConfig, layout: &RunLayout) -> Result<Vec<PathBuf>> {
    let mut written = emit_plots(config, None)?;
    let metrics: Metrics = read_json(&layout.metrics_json())?;
    let mut table = String::from("| setting | gamma | category | image AUROC | pixel AUROC |\n|---|---|---|---|---|\n");
    for line in metrics_csv(&metrics).lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        table.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    let p = layout.plots_dir().join("table.md");
    write_atomic(&p, table.as_bytes())?;
    written.push(p);
    Ok(written)
}

/// Mask degradation factors reported by `table1`.
pub const TABLE1_FACTORS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub factor: usize,
    pub pixel_auroc_percent: f64,
}

/// Down-then-up sampled ground-truth masks scored against the originals,
/// over every anomalous test mask of the persisted dataset.
pub fn run_table1(config: &RunConfig) -> Result<(Vec<Table1Row>, Vec<PathBuf>)> {
    config.validate()?;
    let layout = RunLayout::new(&config.output_dir);
    let data = load_dataset(&layout)?;
    let masks: Vec<Array2<u8>> = data.test().filter(|r| r.is_anomalous).map(|r| r.gt_mask.clone()).collect();
    let rows: Vec<Table1Row> = mask_degradation_experiment(&masks, &TABLE1_FACTORS)?
        .into_iter()
        .map(|(factor, pixel_auroc_percent)| Table1Row { factor, pixel_auroc_percent })
        .collect();
    let dir = layout.metrics_dir();
    let json_path = write_json(&dir.join("table1.json"), &rows)?;
    let mut csv = String::from("factor,pixel_auroc\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.2}\n", r.factor, r.pixel_auroc_percent));
    }
    let csv_path = dir.join("table1.csv");
    write_atomic(&csv_path, csv.as_bytes())?;
    Ok((rows, vec![json_path, csv_path]))
}
