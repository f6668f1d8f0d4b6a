//! Headless experiment harness.
//!
//! Experiment I fine-tunes one base checkpoint twice on the same annotated
//! images, with and without the attention term. Experiment II compares four
//! annotation strategies that trade the number of annotated images against
//! their focus on the target label. Every arm of a seed starts from the same
//! base checkpoint and sees the same replay items and batch order.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refocus_core::annotation::{rasterize, PolygonAnnotation};
use refocus_core::dataset::{compute_label_stats, DatasetManifest, Split};
use refocus_core::loss::{dynamic_weights, LabelMask, LossWeights};
use refocus_core::metrics::{report, MetricsReport};
use refocus_core::nn::{build_model, BackboneKind, ModelConfig, MultiLabelModel, PredictionVector};
use refocus_core::ranking::{accuracy_deviation_score, rank_images, RankingMode, RankingScore};
use refocus_core::synth::{OracleAnnotator, SyntheticDataset};
use refocus_core::train::{finetune_round, predict_all, replay_indices, train, Sample, TrainingParams};
use refocus_core::{Grid, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Supplies expert masks at heatmap resolution.
pub trait MaskSource: Sync {
    fn mask(&self, index: usize, label: usize, rows: usize, cols: usize) -> Result<Option<Grid>>;
}

impl MaskSource for SyntheticDataset {
    fn mask(&self, index: usize, label: usize, rows: usize, cols: usize) -> Result<Option<Grid>> {
        Ok(OracleAnnotator.mask(self, index, label, rows, cols)?)
    }
}

/// Expert polygons keyed by `(image_id, label)`, rasterized on demand.
pub struct AnnotationMasks<'a> {
    manifest: &'a DatasetManifest,
    polygons: BTreeMap<(String, usize), PolygonAnnotation>,
}

impl<'a> AnnotationMasks<'a> {
    pub fn new(manifest: &'a DatasetManifest, annotations: Vec<PolygonAnnotation>) -> Self {
        let polygons = annotations
            .into_iter()
            .map(|a| ((a.image_id.clone(), a.label_index), a))
            .collect();
        Self { manifest, polygons }
    }

    pub fn len(&self) -> usize {
        self.polygons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }
}

impl MaskSource for AnnotationMasks<'_> {
    fn mask(&self, index: usize, label: usize, rows: usize, cols: usize) -> Result<Option<Grid>> {
        let id = &self.manifest.items[index].image_id;
        match self.polygons.get(&(id.clone(), label)) {
            Some(a) => Ok(Some(rasterize(a, rows, cols)?.mask)),
            None => Ok(None),
        }
    }
}

/// Images, labels and masks an experiment runs on.
pub struct ExperimentData<'a> {
    pub manifest: &'a DatasetManifest,
    pub images: &'a [Tensor],
    pub masks: &'a dyn MaskSource,
}

impl<'a> ExperimentData<'a> {
    pub fn synthetic(data: &'a SyntheticDataset) -> Self {
        Self {
            manifest: &data.manifest,
            images: &data.images,
            masks: data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub backbone: BackboneKind,
    pub input_size: usize,
    pub target_label: usize,
    pub base: TrainingParams,
    pub finetune: TrainingParams,
    /// λ0 of the dynamic attention weights.
    pub base_weight: f64,
    /// Annotated images in Experiment I.
    pub annotations: usize,
    /// Replay share of the train split mixed into every fine-tune round.
    pub replay_fraction: f64,
    pub threshold: f64,
}

impl ExperimentSettings {
    /// Desk-scale settings for the synthetic fixture.
    pub fn synthetic() -> Self {
        Self {
            backbone: BackboneKind::SmallCnn,
            input_size: 64,
            target_label: 0,
            base: TrainingParams {
                batch_size: 16,
                epochs: 15,
                learning_rate: 3e-3,
                seed: 0,
                augmentation: false,
            },
            finetune: TrainingParams {
                batch_size: 16,
                epochs: 10,
                learning_rate: 1e-3,
                seed: 0,
                augmentation: false,
            },
            base_weight: 10.0,
            annotations: 100,
            replay_fraction: 0.5,
            threshold: PredictionVector::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Focused50,
    Focused100,
    Random50,
    Random100,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::Focused50, Self::Focused100, Self::Random50, Self::Random100];

    pub fn name(self) -> &'static str {
        match self {
            Self::Focused50 => "focused_50",
            Self::Focused100 => "focused_100",
            Self::Random50 => "random_50",
            Self::Random100 => "random_100",
        }
    }

    pub fn count(self) -> usize {
        match self {
            Self::Focused50 | Self::Random50 => 50,
            Self::Focused100 | Self::Random100 => 100,
        }
    }

    pub fn focused(self) -> bool {
        matches!(self, Self::Focused50 | Self::Focused100)
    }
}

pub const METRICS: [&str; 4] = ["AUC", "Precision", "Recall", "F1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub label: String,
    pub columns: Vec<String>,
    /// `values[metric][column]`, metrics in [`METRICS`] order.
    pub values: Vec<Vec<Option<f64>>>,
}

impl ComparisonTable {
    fn from_reports(label: String, columns: Vec<(String, MetricsReport)>) -> Self {
        let values = (0..METRICS.len())
            .map(|m| columns.iter().map(|(_, r)| metric(r, m)).collect())
            .collect();
        Self {
            label,
            columns: columns.into_iter().map(|(c, _)| c).collect(),
            values,
        }
    }

    pub fn get(&self, metric: &str, column: &str) -> Option<f64> {
        let m = METRICS.iter().position(|&x| x.eq_ignore_ascii_case(metric))?;
        let c = self.columns.iter().position(|x| x == column)?;
        self.values[m][c]
    }

    /// Cell-wise median across tables with identical layout.
    pub fn median(tables: &[ComparisonTable]) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| Error::Rejected("no tables to aggregate".into()))?;
        if tables.iter().any(|t| t.columns != first.columns) {
            return Err(Error::Rejected("tables have different columns".into()));
        }
        let values = (0..METRICS.len())
            .map(|m| {
                (0..first.columns.len())
                    .map(|c| median(tables.iter().filter_map(|t| t.values[m][c]).collect()))
                    .collect()
            })
            .collect();
        Ok(Self {
            label: first.label.clone(),
            columns: first.columns.clone(),
            values,
        })
    }
}

fn metric(r: &MetricsReport, m: usize) -> Option<f64> {
    match m {
        0 => r.auc,
        1 => r.precision,
        2 => r.recall,
        _ => r.f1,
    }
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 })
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.columns.iter().map(String::len).max().unwrap_or(0).max(8);
        write!(f, "{:<10}", self.label)?;
        for c in &self.columns {
            write!(f, " {c:>w$}")?;
        }
        writeln!(f)?;
        for (name, row) in METRICS.iter().zip(&self.values) {
            write!(f, "{name:<10}")?;
            for v in row {
                match v {
                    Some(v) => write!(f, " {v:>w$.3}")?,
                    None => write!(f, " {:>w$}", "n/a")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub table: ComparisonTable,
    /// Image ids annotated by each arm.
    pub annotated: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub settings: ExperimentSettings,
    pub seeds: Vec<SeedResult>,
    pub median: ComparisonTable,
}

/// Base checkpoints keyed by seed, shared between experiments.
#[derive(Default)]
pub struct BaseCache {
    models: BTreeMap<u64, MultiLabelModel>,
}

impl BaseCache {
    pub fn get_or_train(&mut self, data: &ExperimentData<'_>, settings: &ExperimentSettings, seed: u64) -> Result<&MultiLabelModel> {
        if let Entry::Vacant(slot) = self.models.entry(seed) {
            slot.insert(train_base(data, settings, seed)?);
        }
        Ok(&self.models[&seed])
    }
}

fn continue_all(_: &refocus_core::train::EpochReport) -> ControlFlow<()> {
    ControlFlow::Continue(())
}

/// Trains round 0 on the train split with the prediction loss only.
pub fn train_base(data: &ExperimentData<'_>, settings: &ExperimentSettings, seed: u64) -> Result<MultiLabelModel> {
    let config = ModelConfig::new(settings.backbone, data.manifest.num_labels(), settings.input_size);
    let model = build_model(&config, seed)?;
    let samples = samples_for(data, &data.manifest.indices(Split::Train));
    let weights = LossWeights::uniform(config.num_labels, settings.base_weight);
    let params = TrainingParams {
        seed,
        ..settings.base.clone()
    };
    Ok(train(&model, &samples, &weights, &params, continue_all)?.model)
}

fn samples_for(data: &ExperimentData<'_>, indices: &[usize]) -> Vec<Sample> {
    indices
        .iter()
        .map(|&i| Sample::new(data.images[i].clone(), data.manifest.items[i].truth()))
        .collect()
}

fn evaluate(data: &ExperimentData<'_>, model: &MultiLabelModel, settings: &ExperimentSettings) -> Result<MetricsReport> {
    let test = data.manifest.indices(Split::Test);
    let images: Vec<&Tensor> = test.iter().map(|&i| &data.images[i]).collect();
    let preds = predict_all(model, &images)?;
    let truths: Vec<Vec<u8>> = test.iter().map(|&i| data.manifest.items[i].labels.clone()).collect();
    Ok(report(&preds, &truths, settings.target_label, model.round_index(), settings.threshold)?)
}

/// Train and val items, the pool experts annotate from.
fn annotation_pool(manifest: &DatasetManifest) -> Vec<usize> {
    let mut pool = manifest.indices(Split::Train);
    pool.extend(manifest.indices(Split::Val));
    pool.sort_unstable();
    pool
}

/// Target-label positives of the pool, least confident first.
fn select_focused(data: &ExperimentData<'_>, base: &MultiLabelModel, settings: &ExperimentSettings, n: usize) -> Result<Vec<usize>> {
    let label = settings.target_label;
    let (rows, cols) = base.heatmap_shape();
    let mut candidates = Vec::new();
    for i in annotation_pool(data.manifest) {
        let item = &data.manifest.items[i];
        if item.has_label(label) && data.masks.mask(i, label, rows, cols)?.is_some() {
            candidates.push(i);
        }
    }
    let images: Vec<&Tensor> = candidates.iter().map(|&i| &data.images[i]).collect();
    let preds = predict_all(base, &images)?;
    let scores = candidates
        .iter()
        .zip(&preds)
        .map(|(&i, p)| {
            let item = &data.manifest.items[i];
            Ok(RankingScore {
                image_id: item.image_id.clone(),
                label_index: label,
                mode: RankingMode::Accuracy,
                score: accuracy_deviation_score(p, &item.labels, label)?,
                rank: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ranked = rank_images(scores, RankingMode::Accuracy)?;
    Ok(ranked
        .iter()
        .take(n)
        .filter_map(|s| data.manifest.item(&s.image_id).map(|(i, _)| i))
        .collect())
}

fn select_random(data: &ExperimentData<'_>, n: usize, seed: u64) -> Vec<usize> {
    let pool = annotation_pool(data.manifest);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_eed0_fa11);
    let mut picked: Vec<usize> = sample(&mut rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|k| pool[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// Annotated samples with masks for `labels_of(item)`.
fn annotated_samples(
    data: &ExperimentData<'_>,
    indices: &[usize],
    shape: (usize, usize),
    labels_of: impl Fn(usize) -> Vec<usize>,
) -> Result<(Vec<Sample>, Vec<usize>)> {
    let mut out = Vec::with_capacity(indices.len());
    let mut masked_labels = Vec::new();
    for &i in indices {
        let mut masks = Vec::new();
        for label in labels_of(i) {
            if let Some(mask) = data.masks.mask(i, label, shape.0, shape.1)? {
                if mask.sum() > 0.0 {
                    masked_labels.push(label);
                    masks.push(LabelMask {
                        label,
                        mask,
                        correction: false,
                    });
                }
            }
        }
        out.push(Sample::new(data.images[i].clone(), data.manifest.items[i].truth()).with_masks(masks));
    }
    masked_labels.sort_unstable();
    masked_labels.dedup();
    Ok((out, masked_labels))
}

fn positive_labels(manifest: &DatasetManifest, i: usize) -> Vec<usize> {
    let item = &manifest.items[i];
    (0..item.labels.len()).filter(|&l| item.has_label(l)).collect()
}

fn replay_samples(data: &ExperimentData<'_>, exclude: &[usize], fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    let train_idx: Vec<usize> = data
        .manifest
        .indices(Split::Train)
        .into_iter()
        .filter(|i| !exclude.contains(i))
        .collect();
    let picks = replay_indices(train_idx.len(), fraction, seed)?;
    let chosen: Vec<usize> = picks.into_iter().map(|k| train_idx[k]).collect();
    Ok(samples_for(data, &chosen))
}

fn finetune(
    data: &ExperimentData<'_>,
    base: &MultiLabelModel,
    settings: &ExperimentSettings,
    seed: u64,
    batch: &[Sample],
    replay: &[Sample],
    masked_labels: &[usize],
) -> Result<MultiLabelModel> {
    let stats = compute_label_stats(data.manifest)?;
    let weights = dynamic_weights(&stats, settings.base_weight, masked_labels)?;
    let params = TrainingParams {
        seed,
        ..settings.finetune.clone()
    };
    Ok(finetune_round(base, batch, replay, &weights, &params, continue_all)?.model)
}

fn strip_masks(batch: &[Sample]) -> Vec<Sample> {
    batch.iter().map(|s| Sample::new(s.image.clone(), s.truth.clone())).collect()
}

fn ids(manifest: &DatasetManifest, indices: &[usize]) -> Vec<String> {
    indices.iter().map(|&i| manifest.items[i].image_id.clone()).collect()
}

fn label_name(manifest: &DatasetManifest, label: usize) -> Result<String> {
    manifest
        .label_names
        .get(label)
        .cloned()
        .ok_or_else(|| Error::Core(refocus_core::Error::LabelOutOfRange {
            index: label,
            labels: manifest.num_labels(),
        }))
}

/// Experiment I for one seed: preliminary, prediction-only and
/// prediction + attention columns.
pub fn experiment_1_seed(data: &ExperimentData<'_>, settings: &ExperimentSettings, base: &MultiLabelModel, seed: u64) -> Result<SeedResult> {
    let selected = select_focused(data, base, settings, settings.annotations)?;
    let shape = base.heatmap_shape();
    let (batch, masked) = annotated_samples(data, &selected, shape, |i| positive_labels(data.manifest, i))?;
    let replay = replay_samples(data, &selected, settings.replay_fraction, seed)?;
    let prelim = evaluate(data, base, settings)?;
    let plain = finetune(data, base, settings, seed, &strip_masks(&batch), &replay, &[])?;
    let joint = finetune(data, base, settings, seed, &batch, &replay, &masked)?;
    let table = ComparisonTable::from_reports(
        label_name(data.manifest, settings.target_label)?,
        vec![
            ("preliminary".into(), prelim),
            ("prediction_only".into(), evaluate(data, &plain, settings)?),
            ("prediction_attention".into(), evaluate(data, &joint, settings)?),
        ],
    );
    let mut annotated = BTreeMap::new();
    annotated.insert("prediction_attention".into(), ids(data.manifest, &selected));
    Ok(SeedResult { seed, table, annotated })
}

/// Experiment II for one seed: preliminary plus the four strategies.
pub fn experiment_2_seed(data: &ExperimentData<'_>, settings: &ExperimentSettings, base: &MultiLabelModel, seed: u64) -> Result<SeedResult> {
    let shape = base.heatmap_shape();
    let label = settings.target_label;
    let mut columns = vec![("preliminary".to_string(), evaluate(data, base, settings)?)];
    let mut annotated = BTreeMap::new();
    for strategy in Strategy::ALL {
        let (selected, (batch, masked)) = if strategy.focused() {
            let sel = select_focused(data, base, settings, strategy.count())?;
            let b = annotated_samples(data, &sel, shape, |_| vec![label])?;
            (sel, b)
        } else {
            let sel = select_random(data, strategy.count(), seed);
            let b = annotated_samples(data, &sel, shape, |i| positive_labels(data.manifest, i))?;
            (sel, b)
        };
        let replay = replay_samples(data, &selected, settings.replay_fraction, seed)?;
        let model = finetune(data, base, settings, seed, &batch, &replay, &masked)?;
        columns.push((strategy.name().to_string(), evaluate(data, &model, settings)?));
        annotated.insert(strategy.name().to_string(), ids(data.manifest, &selected));
    }
    let table = ComparisonTable::from_reports(label_name(data.manifest, label)?, columns);
    Ok(SeedResult { seed, table, annotated })
}

pub fn run_experiment_1(data: &ExperimentData<'_>, settings: &ExperimentSettings, seeds: &[u64], cache: &mut BaseCache) -> Result<ExperimentReport> {
    run_seeds("exp1", data, settings, seeds, cache, experiment_1_seed)
}

pub fn run_experiment_2(data: &ExperimentData<'_>, settings: &ExperimentSettings, seeds: &[u64], cache: &mut BaseCache) -> Result<ExperimentReport> {
    run_seeds("exp2", data, settings, seeds, cache, experiment_2_seed)
}

fn run_seeds(
    name: &str,
    data: &ExperimentData<'_>,
    settings: &ExperimentSettings,
    seeds: &[u64],
    cache: &mut BaseCache,
    arm: fn(&ExperimentData<'_>, &ExperimentSettings, &MultiLabelModel, u64) -> Result<SeedResult>,
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::Rejected("at least one seed is required".into()));
    }
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let base = cache.get_or_train(data, settings, seed)?;
        results.push(arm(data, settings, base, seed)?);
    }
    let tables: Vec<ComparisonTable> = results.iter().map(|r| r.table.clone()).collect();
    Ok(ExperimentReport {
        experiment: name.into(),
        settings: settings.clone(),
        median: ComparisonTable::median(&tables)?,
        seeds: results,
    })
}
