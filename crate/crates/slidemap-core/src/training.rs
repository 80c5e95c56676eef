//! Training loop for the embedding network, the random 50/50 split plan with
//! stratified train/val subdivisions, the two-split full-coverage protocol,
//! and the mode × revisits ablation matrix.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chipping::{normalize_chip, fit_channel_stats, ChannelStats, Chip, DensityClass};
use crate::convnet::{
    adam_step, backward, forward, init_params, sar_channels, AdamState, ArchConfig, Mode, ModelParams, DEM_CHANNELS,
};
use crate::error::{Error, Result};
use crate::eval::TableCell;
use crate::exec;
use crate::features::{percentile_features, FeatureVector};
use crate::forest::{forest_fit, forest_predict_proba, Forest, ForestConfig, N_CLASSES};
use crate::loss::{batch_loss, batch_loss_grad, EmbeddingBatch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: Mode,
    pub revisits_post: usize,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-3,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            mode: Mode::Fused,
            revisits_post: 3,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be at least 1".into()));
        }
        if !(1..=3).contains(&self.revisits_post) {
            return Err(Error::InvalidConfig(format!("revisits_post must be 1..=3, got {}", self.revisits_post)));
        }
        Ok(())
    }
}

/// Which stored chip channels feed the network for a mode/revisit cell.
/// Chips may carry more acquisitions than the cell uses.
pub fn input_channel_indices(chip_channels: usize, mode: Mode, revisits_post: usize) -> Result<Vec<usize>> {
    let stored_sar = chip_channels - DEM_CHANNELS - 1;
    let need_sar = sar_channels(revisits_post);
    if need_sar > stored_sar {
        return Err(Error::ShapeMismatch(format!(
            "chip stores {stored_sar} SAR channels but {revisits_post} revisits need {need_sar}"
        )));
    }
    Ok(match mode {
        Mode::DemOnly => (0..DEM_CHANNELS).collect(),
        Mode::SarOnly => (DEM_CHANNELS..DEM_CHANNELS + need_sar).collect(),
        Mode::Fused => (0..DEM_CHANNELS + need_sar).collect(),
    })
}

/// Per-epoch training record. `wall_ms` is informational and excluded from
/// equality so identical-seed runs compare equal.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub pos_pixels_seen: usize,
    pub wall_ms: u128,
}

impl PartialEq for EpochStats {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.pos_pixels_seen == other.pos_pixels_seen
    }
}

pub type TrainLog = Vec<EpochStats>;

pub fn render_log(log: &TrainLog) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\tpos_pixels\twall_ms\n");
    for e in log {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.epoch, e.train_loss, e.val_loss, e.pos_pixels_seen, e.wall_ms
        ));
    }
    out
}

/// Normalized chips ready for the network: input tensor plus label plane.
struct PreparedChip {
    input: Tensor,
    label: Tensor,
}

fn prepare(chips: &[&Chip], stats: &ChannelStats, mode: Mode, revisits_post: usize) -> Result<Vec<PreparedChip>> {
    let prepared: Vec<Result<PreparedChip>> = exec::map_slice(chips, |chip| {
        let norm = normalize_chip(chip, stats)?;
        let indices = input_channel_indices(norm.channels.c, mode, revisits_post)?;
        Ok(PreparedChip {
            input: norm.channels.select_channels(&indices),
            label: norm.label_plane(),
        })
    });
    prepared.into_iter().collect()
}

/// Set-loss over a list of chips evaluated in fixed-size batches without
/// updates; the loss is computed over the union of all their pixels.
fn eval_loss(params: &ModelParams, chips: &[PreparedChip], batch_size: usize) -> Result<f64> {
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut pos_n = 0usize;
    let mut neg_n = 0usize;
    for group in chips.chunks(batch_size) {
        let input = Tensor::stack(&group.iter().map(|c| c.input.clone()).collect::<Vec<_>>())?;
        let labels = Tensor::stack(&group.iter().map(|c| c.label.clone()).collect::<Vec<_>>())?;
        let emb = forward(params, &input)?.output().clone();
        for (&e, &l) in emb.data.iter().zip(labels.data.iter()) {
            if l == 1.0 {
                pos_sum += e;
                pos_n += 1;
            } else {
                neg_sum += e;
                neg_n += 1;
            }
        }
    }
    let mut loss = 0.0;
    if pos_n > 0 {
        loss += 1.0 - pos_sum / pos_n as f64;
    }
    if neg_n > 0 {
        loss += neg_sum / neg_n as f64;
    }
    Ok(loss)
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub stats: ChannelStats,
    pub log: TrainLog,
}

/// Train on `train_chips`, early-stopping on the validation loss; returns the
/// parameters of the best validation epoch. Channel stats are fitted on the
/// train split only. Deterministic per seed.
pub fn train(train_chips: &[&Chip], val_chips: &[&Chip], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_chips.is_empty() {
        return Err(Error::Training("empty train split".into()));
    }
    let stats = fit_channel_stats(train_chips)?;
    let train = prepare(train_chips, &stats, config.mode, config.revisits_post)?;
    let val = prepare(val_chips, &stats, config.mode, config.revisits_post)?;

    let mut params = init_params(config.seed, config.mode, config.revisits_post, config.arch)?;
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best_params = params.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut log = TrainLog::new();

    for epoch in 1..=config.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let mut pos_seen = 0usize;
        for group in order.chunks(config.batch_size) {
            let input = Tensor::stack(&group.iter().map(|&i| train[i].input.clone()).collect::<Vec<_>>())?;
            let labels = Tensor::stack(&group.iter().map(|&i| train[i].label.clone()).collect::<Vec<_>>())?;
            let cache = forward(&params, &input)?;
            let batch = EmbeddingBatch::new(cache.output().clone(), labels)?;
            loss_sum += batch_loss(&batch);
            pos_seen += batch.pos_count;
            let grads = backward(&params, &cache, &batch_loss_grad(&batch))?;
            adam_step(&mut params, &grads, &mut adam, config.lr)?;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            eval_loss(&params, &val, config.batch_size)?
        };
        log.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            pos_pixels_seen: pos_seen,
            wall_ms: t0.elapsed().as_millis(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        stats,
        log,
    })
}

// ---------------------------------------------------------------------------
// split plan

/// The 50/50 split with per-half stratified train/val subdivisions
/// (80%/20% of each half, i.e. 40%/10% of all chips).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub seed: u64,
    pub train1: Vec<String>,
    pub val1: Vec<String>,
    pub train2: Vec<String>,
    pub val2: Vec<String>,
}

impl SplitPlan {
    pub fn split1(&self) -> Vec<String> {
        let mut v = self.train1.clone();
        v.extend_from_slice(&self.val1);
        v
    }

    pub fn split2(&self) -> Vec<String> {
        let mut v = self.train2.clone();
        v.extend_from_slice(&self.val2);
        v
    }

    pub fn render(&self) -> String {
        let mut out = format!("seed = {}\n", self.seed);
        for (name, ids) in [
            ("train1", &self.train1),
            ("val1", &self.val1),
            ("train2", &self.train2),
            ("val2", &self.val2),
        ] {
            out.push_str(&format!("{name} = {}\n", ids.join(",")));
        }
        out
    }

    pub fn parse(text: &str) -> Result<SplitPlan> {
        let kv = crate::raster::parse_kv(text);
        let ids = |key: &str| -> Result<Vec<String>> {
            let raw = kv
                .get(key)
                .ok_or_else(|| Error::InvalidConfig(format!("split plan missing `{key}`")))?;
            Ok(raw.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
        };
        Ok(SplitPlan {
            seed: kv
                .get("seed")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::InvalidConfig("split plan missing `seed`".into()))?,
            train1: ids("train1")?,
            val1: ids("val1")?,
            train2: ids("train2")?,
            val2: ids("val2")?,
        })
    }
}

/// Stratified 80/20 subdivision of one half, by density class.
fn subdivide(half: &[(String, DensityClass)], rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let mut by_class: Vec<Vec<&String>> = vec![Vec::new(); N_CLASSES];
    for (id, class) in half {
        by_class[class.index()].push(id);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut pool in by_class {
        pool.shuffle(rng);
        let n_val = if pool.len() >= 2 { (pool.len() + 4) / 5 } else { 0 };
        for (i, id) in pool.into_iter().enumerate() {
            if i < n_val {
                val.push(id.clone());
            } else {
                train.push(id.clone());
            }
        }
    }
    train.sort();
    val.sort();
    (train, val)
}

/// Random equal-size split of all chips into two halves, each subdivided
/// into stratified train/val sets. Deterministic per seed.
pub fn make_split_plan(chips: &[&Chip], seed: u64) -> Result<SplitPlan> {
    if chips.len() < 2 {
        return Err(Error::Training(format!("need at least 2 chips to split, got {}", chips.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<(String, DensityClass)> = chips.iter().map(|c| (c.chip_id(), c.class)).collect();
    ids.sort_by(|a, b| a.0.cmp(&b.0));
    ids.shuffle(&mut rng);
    let mid = ids.len().div_ceil(2);
    let (half1, half2) = ids.split_at(mid);
    let (train1, val1) = subdivide(half1, &mut rng);
    let (train2, val2) = subdivide(half2, &mut rng);
    Ok(SplitPlan {
        seed,
        train1,
        val1,
        train2,
        val2,
    })
}

// ---------------------------------------------------------------------------
// two-split protocol

/// Everything one half's training produces.
pub struct TrainedStage {
    pub params: ModelParams,
    pub stats: ChannelStats,
    pub forest: Forest,
    pub log: TrainLog,
}

/// Chip-level classifier output.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipPrediction {
    pub chip_id: String,
    pub proba: [f64; N_CLASSES],
    pub predicted: DensityClass,
    pub truth: DensityClass,
}

pub struct ProtocolResult {
    pub plan: SplitPlan,
    pub stages: [TrainedStage; 2],
    /// Exactly one out-of-split prediction per chip.
    pub out_of_split: Vec<ChipPrediction>,
    /// Predictions on the train subdivisions (each chip by its own model).
    pub train_predictions: Vec<ChipPrediction>,
    /// Predictions on the val subdivisions.
    pub val_predictions: Vec<ChipPrediction>,
}

fn index_chips<'a>(chips: &'a [&'a Chip]) -> Result<HashMap<String, &'a Chip>> {
    let mut map = HashMap::with_capacity(chips.len());
    for &chip in chips {
        if map.insert(chip.chip_id(), chip).is_some() {
            return Err(Error::Training(format!("duplicate chip id {}", chip.chip_id())));
        }
    }
    Ok(map)
}

fn gather<'a>(map: &HashMap<String, &'a Chip>, ids: &[String]) -> Result<Vec<&'a Chip>> {
    ids.iter()
        .map(|id| {
            map.get(id)
                .copied()
                .ok_or_else(|| Error::Training(format!("chip {id} in split plan but not in store")))
        })
        .collect()
}

/// Per-chip embedding planes from a trained model.
pub fn embed_chips(
    chips: &[&Chip],
    params: &ModelParams,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let prepared = prepare(chips, stats, params.mode, params.revisits_post)?;
    let mut embeddings = Vec::with_capacity(chips.len());
    for group in prepared.chunks(batch_size.max(1)) {
        let input = Tensor::stack(&group.iter().map(|c| c.input.clone()).collect::<Vec<_>>())?;
        let emb = forward(params, &input)?.output().clone();
        for n in 0..emb.n {
            embeddings.push(emb.sample_tensor(n));
        }
    }
    Ok(embeddings)
}

/// Embed chips with a trained model and featurize the embeddings.
pub fn featurize_chips(
    chips: &[&Chip],
    params: &ModelParams,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<Vec<FeatureVector>> {
    embed_chips(chips, params, stats, batch_size)?
        .iter()
        .map(percentile_features)
        .collect()
}

fn predict_chips(
    chips: &[&Chip],
    stage: &TrainedStage,
    batch_size: usize,
) -> Result<Vec<ChipPrediction>> {
    let features = featurize_chips(chips, &stage.params, &stage.stats, batch_size)?;
    Ok(chips
        .iter()
        .zip(features)
        .map(|(chip, f)| {
            let proba = forest_predict_proba(&stage.forest, &f);
            let predicted = crate::forest::forest_predict(&stage.forest, &f);
            ChipPrediction {
                chip_id: chip.chip_id(),
                proba,
                predicted,
                truth: chip.class,
            }
        })
        .collect())
}

fn train_stage(
    map: &HashMap<String, &Chip>,
    train_ids: &[String],
    val_ids: &[String],
    config: &TrainConfig,
    forest_config: &ForestConfig,
) -> Result<TrainedStage> {
    let train_chips = gather(map, train_ids)?;
    let val_chips = gather(map, val_ids)?;
    let outcome = train(&train_chips, &val_chips, config)?;
    let features = featurize_chips(&train_chips, &outcome.params, &outcome.stats, config.batch_size)?;
    let classes: Vec<DensityClass> = train_chips.iter().map(|c| c.class).collect();
    let forest = forest_fit(&features, &classes, *forest_config)?;
    Ok(TrainedStage {
        params: outcome.params,
        stats: outcome.stats,
        forest,
        log: outcome.log,
    })
}

/// Train a model (and forest) on each half and predict the other half, so
/// every chip receives exactly one out-of-split prediction.
pub fn two_split_protocol(
    chips: &[&Chip],
    config: &TrainConfig,
    forest_config: &ForestConfig,
    plan: &SplitPlan,
) -> Result<ProtocolResult> {
    let map = index_chips(chips)?;
    let stage1 = train_stage(&map, &plan.train1, &plan.val1, config, forest_config)?;
    let stage2 = train_stage(&map, &plan.train2, &plan.val2, config, forest_config)?;

    // model trained on split 1 predicts split 2, and vice versa
    let mut out_of_split = predict_chips(&gather(&map, &plan.split2())?, &stage1, config.batch_size)?;
    out_of_split.extend(predict_chips(&gather(&map, &plan.split1())?, &stage2, config.batch_size)?);

    let mut train_predictions = predict_chips(&gather(&map, &plan.train1)?, &stage1, config.batch_size)?;
    train_predictions.extend(predict_chips(&gather(&map, &plan.train2)?, &stage2, config.batch_size)?);
    let mut val_predictions = predict_chips(&gather(&map, &plan.val1)?, &stage1, config.batch_size)?;
    val_predictions.extend(predict_chips(&gather(&map, &plan.val2)?, &stage2, config.batch_size)?);

    Ok(ProtocolResult {
        plan: plan.clone(),
        stages: [stage1, stage2],
        out_of_split,
        train_predictions,
        val_predictions,
    })
}

/// Verify two-split coverage: every chip id appears exactly once.
pub fn check_full_coverage(chips: &[&Chip], predictions: &[ChipPrediction]) -> Result<()> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for p in predictions {
        *seen.entry(p.chip_id.as_str()).or_insert(0) += 1;
    }
    for chip in chips {
        let id = chip.chip_id();
        match seen.get(id.as_str()) {
            Some(1) => {}
            Some(n) => return Err(Error::Eval(format!("chip {id} predicted {n} times"))),
            None => return Err(Error::Eval(format!("chip {id} has no out-of-split prediction"))),
        }
    }
    if seen.len() != chips.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} chips",
            seen.len(),
            chips.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablation matrix

pub struct CellResult {
    pub mode: Mode,
    pub revisits: usize,
    pub protocol: ProtocolResult,
    pub train_auc: f64,
    pub val_auc: f64,
}

fn macro_auc_of(predictions: &[ChipPrediction]) -> Result<f64> {
    let probas: Vec<[f64; N_CLASSES]> = predictions.iter().map(|p| p.proba).collect();
    let truth: Vec<DensityClass> = predictions.iter().map(|p| p.truth).collect();
    Ok(crate::eval::auc_macro_ovr(&probas, &truth)?.0)
}

/// Run the two-split protocol for one (mode, revisits) cell.
pub fn run_cell(
    chips: &[&Chip],
    base: &TrainConfig,
    forest_config: &ForestConfig,
    plan: &SplitPlan,
    mode: Mode,
    revisits: usize,
) -> Result<CellResult> {
    let config = TrainConfig {
        mode,
        revisits_post: revisits,
        ..*base
    };
    let protocol = two_split_protocol(chips, &config, forest_config, plan)?;
    Ok(CellResult {
        mode,
        revisits,
        train_auc: macro_auc_of(&protocol.train_predictions)?,
        val_auc: macro_auc_of(&protocol.val_predictions)?,
        protocol,
    })
}

/// The full 3×3 grid of (mode, revisits) cells over one shared split plan.
/// dem_only cells are identical by construction but are run per the table
/// layout.
pub fn ablation_matrix(
    chips: &[&Chip],
    base: &TrainConfig,
    forest_config: &ForestConfig,
) -> Result<(Vec<CellResult>, Vec<TableCell>)> {
    let plan = make_split_plan(chips, base.seed)?;
    let mut cells = Vec::with_capacity(9);
    for mode in [Mode::DemOnly, Mode::SarOnly, Mode::Fused] {
        for revisits in 1..=3 {
            cells.push(run_cell(chips, base, forest_config, &plan, mode, revisits)?);
        }
    }
    let table = cells
        .iter()
        .map(|c| TableCell {
            mode: c.mode,
            revisits: c.revisits,
            train_auc: c.train_auc,
            val_auc: c.val_auc,
        })
        .collect();
    Ok((cells, table))
}
