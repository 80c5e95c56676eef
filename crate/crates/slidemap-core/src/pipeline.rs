//! On-disk pipeline stages. Each stage reads its predecessors' artifacts,
//! writes its own, and records a config hash in the run manifest so repeated
//! invocations with an unchanged config can skip finished work. All artifacts
//! are written deterministically for a given config.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::chipping::{
    assemble_chip, load_chip, load_stats, save_chip, save_stats, tile_extent, Chip, DensityClass,
};
use crate::convnet::{load_checkpoint, save_checkpoint, Mode, ModelParams};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, N_CLASSES};
use crate::features::{FeatureVector, N_PERCENTILES};
use crate::forest::{
    forest_fit, forest_predict, forest_predict_proba, load_forest, save_forest, Forest, ForestConfig,
};
use crate::raster::{load_points, load_raster, save_points, save_raster, write_atomic, PointSet, Raster};
use crate::synth::{gen_dem, plant_heads, sim_sar, SceneConfig};
use crate::terrain::build_terrain_stack;
use crate::training::{
    check_full_coverage, make_split_plan, render_log, run_cell, train, ChipPrediction,
    SplitPlan, TrainConfig,
};

pub const SAR_ACQUISITIONS: [&str; 6] = ["pre1", "pre2", "pre3", "post1", "post2", "post3"];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub chip_size: usize,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    /// Re-run stages even when the manifest says they are up to date.
    pub force: bool,
}

impl PipelineConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            scene: SceneConfig::default(),
            chip_size: 128,
            train: TrainConfig::default(),
            forest: ForestConfig::default(),
            force: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.chip_size < 3 {
            return Err(Error::InvalidConfig(format!("chip size must be at least 3, got {}", self.chip_size)));
        }
        if self.chip_size > self.scene.width.min(self.scene.height) {
            return Err(Error::InvalidConfig(format!(
                "chip size {} exceeds the {}x{} scene",
                self.chip_size, self.scene.width, self.scene.height
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// layout

pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.txt")
    }

    pub fn scene_dir(&self) -> PathBuf {
        self.root.join("scene")
    }

    pub fn dem(&self) -> PathBuf {
        self.scene_dir().join("dem.rast")
    }

    pub fn heads(&self) -> PathBuf {
        self.scene_dir().join("heads.txt")
    }

    pub fn sar(&self, acq: &str, pol: &str) -> PathBuf {
        self.scene_dir().join(format!("sar_{acq}_{pol}.rast"))
    }

    pub fn chips_dir(&self) -> PathBuf {
        self.root.join("chips")
    }

    pub fn chip_manifest(&self) -> PathBuf {
        self.chips_dir().join("manifest.tsv")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn split_plan(&self) -> PathBuf {
        self.models_dir().join("split_plan.txt")
    }

    pub fn checkpoint(&self, m: usize) -> PathBuf {
        self.models_dir().join(format!("model{m}.ckpt"))
    }

    pub fn stats(&self, m: usize) -> PathBuf {
        self.models_dir().join(format!("model{m}.stats"))
    }

    pub fn train_log(&self, m: usize) -> PathBuf {
        self.models_dir().join(format!("model{m}.log"))
    }

    pub fn forest(&self, m: usize) -> PathBuf {
        self.models_dir().join(format!("forest{m}.txt"))
    }

    pub fn features(&self, m: usize) -> PathBuf {
        self.root.join("features").join(format!("model{m}.tsv"))
    }

    pub fn embed_dir(&self, m: usize) -> PathBuf {
        self.root.join("embeds").join(format!("model{m}"))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn predictions(&self, role: &str) -> PathBuf {
        self.predictions_dir().join(format!("{role}.tsv"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.reports_dir().join("eval.txt")
    }

    pub fn ablation_table(&self) -> PathBuf {
        self.reports_dir().join("ablation.txt")
    }

    pub fn ablation_tsv(&self) -> PathBuf {
        self.reports_dir().join("ablation.tsv")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// run manifest / config hashing

pub fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn scene_hash(config: &PipelineConfig) -> String {
    let s = &config.scene;
    sha256_hex(&format!(
        "scene seed={} w={} h={} px={} hills={} rate={} gain={} looks={} db={} radius={} noise={}",
        s.seed, s.width, s.height, s.pixel_m, s.n_hills, s.base_head_rate, s.slope_gain,
        s.sar_speckle_looks, s.event_brightening_db, s.event_radius_px, s.noise_amp
    ))
}

fn chips_hash(config: &PipelineConfig) -> String {
    sha256_hex(&format!(
        "chips size={} split_seed={} scene={}",
        config.chip_size,
        config.train.seed,
        scene_hash(config)
    ))
}

fn train_hash(config: &PipelineConfig) -> String {
    let t = &config.train;
    sha256_hex(&format!(
        "train batch={} lr={} epochs={} patience={} seed={} mode={} revisits={} arch={}/{}/{} chips={}",
        t.batch_size, t.lr, t.max_epochs, t.patience, t.seed, t.mode.as_str(), t.revisits_post,
        t.arch.branch_width, t.arch.branch_depth, t.arch.fusion_hidden, chips_hash(config)
    ))
}

fn forest_hash(config: &PipelineConfig) -> String {
    let f = &config.forest;
    sha256_hex(&format!(
        "forest trees={} depth={:?} leaf={} mtry={} balanced={} seed={} train={}",
        f.n_trees, f.max_depth, f.min_leaf, f.mtry, f.balanced, f.seed, train_hash(config)
    ))
}

fn read_manifest(paths: &Paths) -> HashMap<String, String> {
    fs::read_to_string(paths.manifest())
        .map(|text| crate::raster::parse_kv(&text))
        .unwrap_or_default()
}

fn write_manifest(paths: &Paths, manifest: &HashMap<String, String>) -> Result<()> {
    let mut keys: Vec<&String> = manifest.keys().collect();
    keys.sort();
    let mut text = String::new();
    for k in keys {
        text.push_str(&format!("{k} = {}\n", manifest[k]));
    }
    write_atomic(&paths.manifest(), text.as_bytes())
}

fn stage_current(paths: &Paths, config: &PipelineConfig, stage: &str, hash: &str, outputs: &[PathBuf]) -> bool {
    if config.force {
        return false;
    }
    read_manifest(paths).get(stage).map(String::as_str) == Some(hash) && outputs.iter().all(|p| p.exists())
}

fn mark_stage(paths: &Paths, stage: &str, hash: &str) -> Result<()> {
    let mut manifest = read_manifest(paths);
    manifest.insert(stage.to_string(), hash.to_string());
    write_manifest(paths, &manifest)
}

// ---------------------------------------------------------------------------
// synth

pub fn stage_synth(config: &PipelineConfig) -> Result<bool> {
    config.validate()?;
    let paths = Paths::new(&config.out_dir);
    let hash = scene_hash(config);
    let mut outputs = vec![paths.dem(), paths.heads()];
    for acq in SAR_ACQUISITIONS {
        outputs.push(paths.sar(acq, "vv"));
        outputs.push(paths.sar(acq, "vh"));
    }
    if stage_current(&paths, config, "synth", &hash, &outputs) {
        return Ok(false);
    }
    ensure_dir(&paths.scene_dir())?;
    let dem = gen_dem(&config.scene)?;
    let heads = plant_heads(&dem, &config.scene)?;
    let sar = sim_sar(&dem, &heads, &config.scene)?;
    save_raster(&dem, &paths.dem())?;
    save_points(&heads, &paths.heads())?;
    for (acq, (vv, vh)) in SAR_ACQUISITIONS.iter().zip(&sar) {
        save_raster(vv, &paths.sar(acq, "vv"))?;
        save_raster(vh, &paths.sar(acq, "vh"))?;
    }
    mark_stage(&paths, "synth", &hash)?;
    Ok(true)
}

fn load_scene(paths: &Paths) -> Result<(Raster, PointSet, Vec<(Raster, Raster)>)> {
    if !paths.dem().exists() {
        return Err(Error::MissingArtifact {
            stage: "chips".into(),
            detail: format!("{} not found; run `synth` first", paths.dem().display()),
        });
    }
    let dem = load_raster(&paths.dem())?;
    let heads = load_points(&paths.heads())?;
    let mut sar = Vec::with_capacity(6);
    for acq in SAR_ACQUISITIONS {
        sar.push((load_raster(&paths.sar(acq, "vv"))?, load_raster(&paths.sar(acq, "vh"))?));
    }
    Ok((dem, heads, sar))
}

// ---------------------------------------------------------------------------
// chips

/// Assemble all chips (stored with the full 3 post-event revisits; training
/// cells slice the channels they use) and write the chip manifest.
pub fn stage_chips(config: &PipelineConfig) -> Result<bool> {
    config.validate()?;
    let paths = Paths::new(&config.out_dir);
    let hash = chips_hash(config);
    if stage_current(&paths, config, "chips", &hash, &[paths.chip_manifest(), paths.split_plan()]) {
        return Ok(false);
    }
    let (dem, heads, sar) = load_scene(&paths)?;
    let terrain = build_terrain_stack(&dem)?;
    ensure_dir(&paths.chips_dir())?;
    let mut kept: Vec<Chip> = Vec::new();
    let mut excluded: Vec<crate::chipping::ChipWindow> = Vec::new();
    for window in tile_extent(dem.width, dem.height, config.chip_size) {
        match assemble_chip(&terrain, &sar, &heads, &window, 3)? {
            Some(chip) => {
                save_chip(&chip, &paths.chips_dir())?;
                kept.push(chip);
            }
            None => excluded.push(window),
        }
    }
    if kept.len() < 2 {
        return Err(Error::Training(format!("only {} usable chips in scene", kept.len())));
    }
    let refs: Vec<&Chip> = kept.iter().collect();
    let plan = make_split_plan(&refs, config.train.seed)?;
    ensure_dir(&paths.models_dir())?;
    write_atomic(&paths.split_plan(), plan.render().as_bytes())?;
    let split_of = |id: &str| -> &'static str {
        if plan.train1.iter().any(|x| x == id) {
            "train1"
        } else if plan.val1.iter().any(|x| x == id) {
            "val1"
        } else if plan.train2.iter().any(|x| x == id) {
            "train2"
        } else {
            "val2"
        }
    };
    let mut manifest = String::from("chip_id\trow0\tcol0\tsize\tclass\thead_count\traw_points\tsplit\n");
    for chip in &kept {
        let id = chip.chip_id();
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            id,
            chip.window.row0,
            chip.window.col0,
            chip.window.size,
            chip.class.index(),
            chip.head_count,
            chip.raw_points,
            split_of(&id)
        ));
    }
    for window in &excluded {
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\texcluded\t0\t0\t-\n",
            window.chip_id(),
            window.row0,
            window.col0,
            window.size
        ));
    }
    write_atomic(&paths.chip_manifest(), manifest.as_bytes())?;
    mark_stage(&paths, "chips", &hash)?;
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChipEntry {
    pub chip_id: String,
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
    /// None for chips excluded over nodata.
    pub class: Option<DensityClass>,
    /// Split assignment: train1/val1/train2/val2, or "-" for excluded chips.
    pub split: String,
}

pub fn load_chip_manifest(out_dir: &Path) -> Result<Vec<ChipEntry>> {
    let paths = Paths::new(out_dir);
    let path = paths.chip_manifest();
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact {
        stage: "chips".into(),
        detail: format!("{} not found; run `chips` first", path.display()),
    })?;
    let mut entries = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(Error::InvalidConfig(format!("malformed chip manifest line: {line}")));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::InvalidConfig(format!("bad number in chip manifest: {s}")))
        };
        let class = if cols[4] == "excluded" {
            None
        } else {
            Some(DensityClass::from_index(parse(cols[4])?)?)
        };
        entries.push(ChipEntry {
            chip_id: cols[0].to_string(),
            row0: parse(cols[1])?,
            col0: parse(cols[2])?,
            size: parse(cols[3])?,
            class,
            split: cols[7].to_string(),
        });
    }
    Ok(entries)
}

/// Load every non-excluded chip in manifest order.
pub fn load_chip_store(out_dir: &Path) -> Result<Vec<Chip>> {
    let paths = Paths::new(out_dir);
    load_chip_manifest(out_dir)?
        .iter()
        .filter(|e| e.class.is_some())
        .map(|e| load_chip(&paths.chips_dir(), &e.chip_id))
        .collect()
}

// ---------------------------------------------------------------------------
// train

pub fn stage_train(config: &PipelineConfig) -> Result<bool> {
    config.validate()?;
    let paths = Paths::new(&config.out_dir);
    let hash = train_hash(config);
    let outputs = vec![
        paths.split_plan(),
        paths.checkpoint(1),
        paths.checkpoint(2),
        paths.stats(1),
        paths.stats(2),
    ];
    if stage_current(&paths, config, "train", &hash, &outputs) {
        return Ok(false);
    }
    let chips = load_chip_store(&config.out_dir)?;
    let plan = load_plan(&paths, "train")?;
    ensure_dir(&paths.models_dir())?;

    let by_id: HashMap<String, &Chip> = chips.iter().map(|c| (c.chip_id(), c)).collect();
    let halves = [(&plan.train1, &plan.val1), (&plan.train2, &plan.val2)];
    for (m, (train_ids, val_ids)) in halves.iter().enumerate() {
        let m = m + 1;
        let train_chips = gather(&by_id, train_ids)?;
        let val_chips = gather(&by_id, val_ids)?;
        let outcome = train(&train_chips, &val_chips, &config.train)?;
        save_stats(&outcome.stats, &paths.stats(m))?;
        let stats_ref = paths
            .stats(m)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        save_checkpoint(&outcome.params, &stats_ref, &paths.checkpoint(m))?;
        write_atomic(&paths.train_log(m), render_log(&outcome.log).as_bytes())?;
    }
    mark_stage(&paths, "train", &hash)?;
    Ok(true)
}

fn gather<'a>(map: &HashMap<String, &'a Chip>, ids: &[String]) -> Result<Vec<&'a Chip>> {
    ids.iter()
        .map(|id| {
            map.get(id)
                .copied()
                .ok_or_else(|| Error::MissingArtifact {
                    stage: "train".into(),
                    detail: format!("chip {id} named in split plan but absent from the chip store"),
                })
        })
        .collect()
}

fn load_model(paths: &Paths, stage: &str, m: usize) -> Result<(ModelParams, crate::chipping::ChannelStats)> {
    let ckpt = paths.checkpoint(m);
    if !ckpt.exists() {
        return Err(Error::MissingArtifact {
            stage: stage.into(),
            detail: format!("{} not found; run `train` first", ckpt.display()),
        });
    }
    let (params, _stats_ref) = load_checkpoint(&ckpt)?;
    let stats = load_stats(&paths.stats(m))?;
    Ok((params, stats))
}

fn load_plan(paths: &Paths, stage: &str) -> Result<SplitPlan> {
    let path = paths.split_plan();
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingArtifact {
        stage: stage.into(),
        detail: format!("{} not found; run `train` first", path.display()),
    })?;
    SplitPlan::parse(&text)
}

// ---------------------------------------------------------------------------
// embed / featurize

fn save_embedding(values: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    let mut bytes = format!("{h} {w}\n").into_bytes();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn load_embedding(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::InvalidRaster(format!("{}: missing embedding header", path.display())))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::InvalidRaster(format!("{}: bad embedding header", path.display())))?;
    let dims: Vec<usize> = header.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    if dims.len() != 2 {
        return Err(Error::InvalidRaster(format!("{}: bad embedding header `{header}`", path.display())));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != dims[0] * dims[1] * 8 {
        return Err(Error::DimensionMismatch {
            expected: dims[0] * dims[1] * 8,
            actual: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Run both trained models over every chip in the store and write the raw
/// embedding planes.
pub fn stage_embed(config: &PipelineConfig) -> Result<bool> {
    let paths = Paths::new(&config.out_dir);
    let hash = train_hash(config);
    if stage_current(&paths, config, "embed", &hash, &[paths.embed_dir(1), paths.embed_dir(2)]) {
        return Ok(false);
    }
    let chips = load_chip_store(&config.out_dir)?;
    let refs: Vec<&Chip> = chips.iter().collect();
    for m in 1..=2 {
        let (params, stats) = load_model(&paths, "embed", m)?;
        let dir = paths.embed_dir(m);
        ensure_dir(&dir)?;
        let prepared = crate::training::embed_chips(&refs, &params, &stats, config.train.batch_size)?;
        for (chip, emb) in refs.iter().zip(prepared) {
            save_embedding(&emb.data, emb.h, emb.w, &dir.join(format!("{}.emb", chip.chip_id())))?;
        }
    }
    mark_stage(&paths, "embed", &hash)?;
    Ok(true)
}

/// Percentile-featurize the stored embeddings into one TSV per model.
pub fn stage_featurize(config: &PipelineConfig) -> Result<bool> {
    let paths = Paths::new(&config.out_dir);
    let hash = train_hash(config);
    if stage_current(&paths, config, "featurize", &hash, &[paths.features(1), paths.features(2)]) {
        return Ok(false);
    }
    let entries: Vec<ChipEntry> = load_chip_manifest(&config.out_dir)?
        .into_iter()
        .filter(|e| e.class.is_some())
        .collect();
    for m in 1..=2 {
        let dir = paths.embed_dir(m);
        if !dir.exists() {
            return Err(Error::MissingArtifact {
                stage: "featurize".into(),
                detail: format!("{} not found; run `embed` first", dir.display()),
            });
        }
        let mut out = String::from("chip_id\tclass\t");
        out.push_str(
            &(0..N_PERCENTILES)
                .map(|i| format!("p{}", 5 * (i + 1)))
                .collect::<Vec<_>>()
                .join("\t"),
        );
        out.push('\n');
        for entry in &entries {
            let values = load_embedding(&dir.join(format!("{}.emb", entry.chip_id)))?;
            let tensor = crate::tensor::Tensor::from_data(1, 1, 1, values.len(), values)?;
            let features = crate::features::percentile_features(&tensor)?;
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                entry.chip_id,
                entry.class.expect("filtered").index(),
                features.values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\t")
            ));
        }
        ensure_dir(paths.features(m).parent().expect("features dir"))?;
        write_atomic(&paths.features(m), out.as_bytes())?;
    }
    mark_stage(&paths, "featurize", &hash)?;
    Ok(true)
}

pub fn load_features(path: &Path, stage: &str) -> Result<Vec<(String, DensityClass, FeatureVector)>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
        stage: stage.into(),
        detail: format!("{} not found; run `featurize` first", path.display()),
    })?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 + N_PERCENTILES {
            return Err(Error::InvalidConfig(format!("malformed feature line: {line}")));
        }
        let class = DensityClass::from_index(
            cols[1]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad class in feature line: {line}")))?,
        )?;
        let mut values = [0.0; N_PERCENTILES];
        for (v, s) in values.iter_mut().zip(&cols[2..]) {
            *v = s
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad feature value `{s}`")))?;
        }
        rows.push((cols[0].to_string(), class, FeatureVector { values }));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// fit-rf / predict

/// Fit one forest per model on that model's train-subdivision features.
pub fn stage_fit_rf(config: &PipelineConfig) -> Result<bool> {
    let paths = Paths::new(&config.out_dir);
    let hash = forest_hash(config);
    if stage_current(&paths, config, "fit-rf", &hash, &[paths.forest(1), paths.forest(2)]) {
        return Ok(false);
    }
    let plan = load_plan(&paths, "fit-rf")?;
    for (m, train_ids) in [(1usize, &plan.train1), (2, &plan.train2)] {
        let rows = load_features(&paths.features(m), "fit-rf")?;
        let by_id: HashMap<&str, &(String, DensityClass, FeatureVector)> =
            rows.iter().map(|r| (r.0.as_str(), r)).collect();
        let mut features = Vec::with_capacity(train_ids.len());
        let mut classes = Vec::with_capacity(train_ids.len());
        for id in train_ids {
            let row = by_id.get(id.as_str()).ok_or_else(|| Error::MissingArtifact {
                stage: "fit-rf".into(),
                detail: format!("no features for chip {id}; run `featurize` first"),
            })?;
            features.push(row.2);
            classes.push(row.1);
        }
        let forest = forest_fit(&features, &classes, config.forest)?;
        save_forest(&forest, &paths.forest(m))?;
    }
    mark_stage(&paths, "fit-rf", &hash)?;
    Ok(true)
}

fn predict_rows(
    forest: &Forest,
    rows: &HashMap<&str, &(String, DensityClass, FeatureVector)>,
    ids: &[String],
    stage: &str,
) -> Result<Vec<ChipPrediction>> {
    ids.iter()
        .map(|id| {
            let row = rows.get(id.as_str()).ok_or_else(|| Error::MissingArtifact {
                stage: stage.into(),
                detail: format!("no features for chip {id}"),
            })?;
            Ok(ChipPrediction {
                chip_id: id.clone(),
                proba: forest_predict_proba(forest, &row.2),
                predicted: forest_predict(forest, &row.2),
                truth: row.1,
            })
        })
        .collect()
}

fn render_predictions(predictions: &[ChipPrediction]) -> String {
    let mut out = String::from("chip_id\ttruth\tpredicted\tp0\tp1\tp2\n");
    for p in predictions {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            p.chip_id,
            p.truth.index(),
            p.predicted.index(),
            p.proba[0],
            p.proba[1],
            p.proba[2]
        ));
    }
    out
}

pub fn load_predictions(path: &Path, stage: &str) -> Result<Vec<ChipPrediction>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
        stage: stage.into(),
        detail: format!("{} not found; run `predict` first", path.display()),
    })?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::InvalidConfig(format!("malformed prediction line: {line}")));
        }
        let idx = |s: &str| -> Result<DensityClass> {
            DensityClass::from_index(
                s.parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad class `{s}`")))?,
            )
        };
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad probability `{s}`")))
        };
        out.push(ChipPrediction {
            chip_id: cols[0].to_string(),
            truth: idx(cols[1])?,
            predicted: idx(cols[2])?,
            proba: [num(cols[3])?, num(cols[4])?, num(cols[5])?],
        });
    }
    Ok(out)
}

/// Predict the train, val, and out-of-split sets. Each chip's out-of-split
/// prediction comes from the model trained on the opposite half.
pub fn stage_predict(config: &PipelineConfig) -> Result<bool> {
    let paths = Paths::new(&config.out_dir);
    let hash = forest_hash(config);
    let outputs = vec![
        paths.predictions("out_of_split"),
        paths.predictions("train"),
        paths.predictions("val"),
    ];
    if stage_current(&paths, config, "predict", &hash, &outputs) {
        return Ok(false);
    }
    let plan = load_plan(&paths, "predict")?;
    let mut forests = Vec::with_capacity(2);
    let mut rows = Vec::with_capacity(2);
    for m in 1..=2 {
        let path = paths.forest(m);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: "predict".into(),
                detail: format!("{} not found; run `fit-rf` first", path.display()),
            });
        }
        forests.push(load_forest(&path)?);
        rows.push(load_features(&paths.features(m), "predict")?);
    }
    let maps: Vec<HashMap<&str, &(String, DensityClass, FeatureVector)>> = rows
        .iter()
        .map(|r| r.iter().map(|row| (row.0.as_str(), row)).collect())
        .collect();

    let mut oos = predict_rows(&forests[0], &maps[0], &plan.split2(), "predict")?;
    oos.extend(predict_rows(&forests[1], &maps[1], &plan.split1(), "predict")?);
    let mut train_preds = predict_rows(&forests[0], &maps[0], &plan.train1, "predict")?;
    train_preds.extend(predict_rows(&forests[1], &maps[1], &plan.train2, "predict")?);
    let mut val_preds = predict_rows(&forests[0], &maps[0], &plan.val1, "predict")?;
    val_preds.extend(predict_rows(&forests[1], &maps[1], &plan.val2, "predict")?);

    ensure_dir(&paths.predictions_dir())?;
    write_atomic(&paths.predictions("out_of_split"), render_predictions(&oos).as_bytes())?;
    write_atomic(&paths.predictions("train"), render_predictions(&train_preds).as_bytes())?;
    write_atomic(&paths.predictions("val"), render_predictions(&val_preds).as_bytes())?;
    mark_stage(&paths, "predict", &hash)?;
    Ok(true)
}

// ---------------------------------------------------------------------------
// evaluate

fn render_report(report: &EvalReport) -> String {
    let mut out = format!(
        "role = {}\nmode = {}\nrevisits = {}\nn = {}\nmacro_auc = {}\n",
        report.role,
        report.mode.as_str(),
        report.revisits,
        report.n,
        report.macro_auc
    );
    for (k, auc) in report.per_class_auc.iter().enumerate() {
        match auc {
            Some(v) => out.push_str(&format!("auc_class{k} = {v}\n")),
            None => out.push_str(&format!("auc_class{k} = absent\n")),
        }
    }
    out.push_str("confusion (rows = truth):\n");
    for row in report.confusion {
        out.push_str(&format!("  {} {} {}\n", row[0], row[1], row[2]));
    }
    out
}

fn report_for(config: &PipelineConfig, role: &str, predictions: &[ChipPrediction]) -> Result<EvalReport> {
    let probas: Vec<[f64; N_CLASSES]> = predictions.iter().map(|p| p.proba).collect();
    let predicted: Vec<DensityClass> = predictions.iter().map(|p| p.predicted).collect();
    let truth: Vec<DensityClass> = predictions.iter().map(|p| p.truth).collect();
    EvalReport::build(
        config.train.mode,
        config.train.revisits_post,
        role,
        &probas,
        &predicted,
        &truth,
    )
}

/// Evaluate the stored predictions. Refuses to run unless the out-of-split
/// predictions cover every chip in the store exactly once.
pub fn stage_evaluate(config: &PipelineConfig) -> Result<Vec<EvalReport>> {
    let paths = Paths::new(&config.out_dir);
    let chips = load_chip_store(&config.out_dir)?;
    let refs: Vec<&Chip> = chips.iter().collect();
    let oos = load_predictions(&paths.predictions("out_of_split"), "evaluate")?;
    check_full_coverage(&refs, &oos)?;
    let train_preds = load_predictions(&paths.predictions("train"), "evaluate")?;
    let val_preds = load_predictions(&paths.predictions("val"), "evaluate")?;

    let reports = vec![
        report_for(config, "train", &train_preds)?,
        report_for(config, "val", &val_preds)?,
        report_for(config, "out_of_split", &oos)?,
    ];
    let text: String = reports.iter().map(render_report).collect::<Vec<_>>().join("\n");
    ensure_dir(&paths.reports_dir())?;
    write_atomic(&paths.eval_report(), text.as_bytes())?;
    mark_stage(&paths, "evaluate", &forest_hash(config))?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// composite stages

/// synth → chips → train → embed → featurize → fit-rf → predict → evaluate.
pub fn run_all(config: &PipelineConfig) -> Result<Vec<EvalReport>> {
    stage_synth(config)?;
    stage_chips(config)?;
    stage_train(config)?;
    stage_embed(config)?;
    stage_featurize(config)?;
    stage_fit_rf(config)?;
    stage_predict(config)?;
    stage_evaluate(config)
}

/// The 3 modes × 3 revisit-count grid over a shared split plan; writes the
/// aligned table and its TSV twin.
pub fn run_ablate(config: &PipelineConfig) -> Result<String> {
    config.validate()?;
    stage_synth(config)?;
    stage_chips(config)?;
    let paths = Paths::new(&config.out_dir);
    let chips = load_chip_store(&config.out_dir)?;
    let refs: Vec<&Chip> = chips.iter().collect();
    let plan = load_plan(&paths, "ablate")?;
    let mut cells = Vec::with_capacity(9);
    for mode in [Mode::DemOnly, Mode::SarOnly, Mode::Fused] {
        for revisits in 1..=3 {
            let cell = run_cell(&refs, &config.train, &config.forest, &plan, mode, revisits)?;
            cells.push(crate::eval::TableCell {
                mode,
                revisits,
                train_auc: cell.train_auc,
                val_auc: cell.val_auc,
            });
        }
    }
    let table = crate::eval::results_table(&cells)?;
    ensure_dir(&paths.reports_dir())?;
    write_atomic(&paths.ablation_table(), table.as_bytes())?;
    write_atomic(&paths.ablation_tsv(), crate::eval::results_table_tsv(&cells)?.as_bytes())?;
    Ok(table)
}
