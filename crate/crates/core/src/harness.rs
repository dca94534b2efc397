//! Experiment protocol: repeated train/evaluate executions over stratified
//! ratio splits with aggregated accuracy, and the margin grid search.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{ArchitectureSpec, Backbone, ConvBlockSpec, FeatureVec};
use crate::data::{split, Dataset, SplitSpec};
use crate::dcgpn::{Generator, GeneratorConfig, LatentSeed};
use crate::error::{Error, Result};
use crate::metric::squash_values;
use crate::rng::{derive_seed, Stream};
use crate::svm::{svm_predict, svm_train, SvmConfig, SvmModel};
use crate::tensor::Tensor;
use crate::trainer::{train, EpochStats, TrainConfig, TrainedModel, Variant};

/// What feeds the SVM: backbone features (the default) or squashed
/// projections through the trained discriminant matrix (study flag).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvmInput {
    Features,
    Embeddings,
}

impl Default for SvmInput {
    fn default() -> Self {
        SvmInput::Features
    }
}

/// Declarative configuration mirroring every train/svm/split field, plus
/// the architecture and protocol knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub runs: usize,
    /// Re-split per run (default) or share one split across runs.
    pub fixed_split: bool,
    pub svm_input: SvmInput,
    pub train: TrainConfig,
    pub svm: SvmConfig,
    pub split: SplitSpec,
    pub backbone: ArchitectureSpec,
    /// Generator channel depth at the 4×4 stage.
    pub generator_base_channels: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            runs: 10,
            fixed_split: false,
            svm_input: SvmInput::Features,
            train: TrainConfig::default(),
            svm: SvmConfig::default(),
            split: SplitSpec::default(),
            backbone: desk_backbone(32),
            generator_base_channels: 64,
        }
    }
}

/// Desk-scale backbone: two pooled conv blocks and a 256-wide feature head.
pub fn desk_backbone(input_side: usize) -> ArchitectureSpec {
    ArchitectureSpec {
        input_channels: 3,
        input_side,
        conv_blocks: vec![
            ConvBlockSpec {
                out_channels: 8,
                kernel: 3,
                pool: true,
            },
            ConvBlockSpec {
                out_channels: 16,
                kernel: 3,
                pool: true,
            },
        ],
        fc_widths: vec![256],
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        self.train.validate()?;
        self.svm.validate()?;
        self.split.validate()?;
        Ok(())
    }

    /// Hex digest of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in digest.iter().take(8) {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

/// Accuracy and confusion counts for one prediction pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Score a prediction list against ground truth.
pub fn score_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<EvalOutcome> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(Error::Contract(format!(
            "scoring needs equal non-empty lists, got {} vs {}",
            truth.len(),
            predicted.len()
        )));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= classes || p >= classes {
            return Err(Error::Contract(format!(
                "label out of range: truth {t}, predicted {p}, classes {classes}"
            )));
        }
        confusion[t][p] += 1;
        if t == p {
            correct += 1;
        }
    }
    Ok(EvalOutcome {
        accuracy: correct as f64 / truth.len() as f64,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub split_seed: u64,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    /// Generator forwards observed during the evaluation phase; the
    /// inference path keeps this at zero.
    pub eval_generator_forwards: u64,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub classes: usize,
    pub variant: Variant,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub single_run: bool,
    pub wallclock_ms: u64,
}

impl ExperimentReport {
    pub fn mean_accuracy(&self) -> f64 {
        self.runs.iter().map(|r| r.accuracy).sum::<f64>() / self.runs.len() as f64
    }

    /// Sample (n-1) standard deviation; 0 by convention for a single run.
    pub fn std_accuracy(&self) -> f64 {
        let n = self.runs.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean_accuracy();
        let var = self
            .runs
            .iter()
            .map(|r| (r.accuracy - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        var.sqrt()
    }
}

struct PreparedRun {
    model: TrainedModel,
    history: Vec<EpochStats>,
    train_rows: Vec<(Tensor<f32>, usize)>,
    test_rows: Vec<(Tensor<f32>, usize)>,
    counter_baseline: u64,
}

fn extract_rows(model: &TrainedModel, ds: &Dataset) -> Result<Vec<(Tensor<f32>, usize)>> {
    let mut rows = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let row = if let Some(img) = ds.image(i) {
            model.features(img)?.into_tensor()
        } else {
            ds.feature(i).unwrap().tensor().clone()
        };
        rows.push((row, ds.label(i)));
    }
    Ok(rows)
}

fn embed_rows(
    rows: &[(Tensor<f32>, usize)],
    s: &Tensor<f32>,
) -> Result<Vec<(Tensor<f32>, usize)>> {
    let (f, c) = (s.shape()[0], s.shape()[1]);
    rows.iter()
        .map(|(row, label)| {
            if row.len() != f {
                return Err(Error::Dim(format!(
                    "feature width {} vs discriminant rows {f}",
                    row.len()
                )));
            }
            let mut proj = vec![0.0f32; c];
            for (i, &v) in row.data().iter().enumerate() {
                if v != 0.0 {
                    for j in 0..c {
                        proj[j] += v * s.data()[i * c + j];
                    }
                }
            }
            Ok((Tensor::row(squash_values(&proj))?, *label))
        })
        .collect()
}

fn one_run(dataset: &Dataset, cfg: &ExperimentConfig, run: usize) -> Result<RunResult> {
    let run_seed = derive_seed(cfg.master_seed, Stream::Run(run as u64));
    let split_seed = if cfg.fixed_split {
        derive_seed(cfg.master_seed, Stream::Split)
    } else {
        derive_seed(run_seed, Stream::Split)
    };
    let split_spec = SplitSpec {
        rng_seed: split_seed,
        ..cfg.split.clone()
    };
    let (train_ds, test_ds) = split(dataset, &split_spec)?;

    let feature_width = if dataset.is_images() {
        cfg.backbone.feature_width()
    } else {
        dataset.feature_width().unwrap_or(0)
    };
    let generator = Generator::build(
        GeneratorConfig {
            classes: dataset.classes,
            feature_width,
            base_channels: cfg.generator_base_channels,
        },
        derive_seed(run_seed, Stream::GeneratorInit),
    )?;
    let backbone = if dataset.is_images() {
        Some(Backbone::build(
            cfg.backbone.clone(),
            derive_seed(run_seed, Stream::BackboneInit),
        )?)
    } else {
        None
    };
    let z = LatentSeed::sample(derive_seed(run_seed, Stream::Latent));
    let train_cfg = TrainConfig {
        rng_seed: run_seed,
        ..cfg.train.clone()
    };
    let outcome = train(&train_ds, backbone, generator, z, &train_cfg)?;

    let prepared = {
        let model = outcome.model;
        let mut train_rows = extract_rows(&model, &train_ds)?;
        let mut test_rows = extract_rows(&model, &test_ds)?;
        let mut model = model;
        if cfg.svm_input == SvmInput::Embeddings {
            // The discriminant matrix is computed once here, on the training
            // side of the fence; prediction never touches the generator.
            let s = {
                let z = model.z.clone();
                model.generator.discriminant_matrix(&z)?
            };
            train_rows = embed_rows(&train_rows, &s)?;
            test_rows = embed_rows(&test_rows, &s)?;
        }
        let counter_baseline = model.generator.forward_count();
        PreparedRun {
            model,
            history: outcome.history,
            train_rows,
            test_rows,
            counter_baseline,
        }
    };

    let svm_seed = derive_seed(run_seed, Stream::Svm);
    let signed = cfg.svm_input == SvmInput::Embeddings;
    let svm_model = train_svm_rows(&prepared.train_rows, &cfg.svm, svm_seed, signed)?;
    let mut truth = Vec::with_capacity(prepared.test_rows.len());
    let mut predicted = Vec::with_capacity(prepared.test_rows.len());
    for (row, label) in &prepared.test_rows {
        let (pred, _) = predict_row(&svm_model, row, signed)?;
        truth.push(*label);
        predicted.push(pred);
    }
    let outcome_eval = score_predictions(&truth, &predicted, dataset.classes)?;
    let eval_generator_forwards = prepared.model.generator.forward_count() - prepared.counter_baseline;

    Ok(RunResult {
        run,
        split_seed,
        accuracy: outcome_eval.accuracy,
        confusion: outcome_eval.confusion,
        eval_generator_forwards,
        history: prepared.history,
    })
}

/// SVM entry points over raw feature rows. The public `svm_train` consumes
/// non-negative `FeatureVec`s; the embedding path produces signed squashed
/// rows, so those are split into positive/negative parts first. The split
/// is decided once per model (`signed`), keeping widths consistent.
fn train_svm_rows(
    rows: &[(Tensor<f32>, usize)],
    cfg: &SvmConfig,
    seed: u64,
    signed: bool,
) -> Result<SvmModel> {
    let as_features: Vec<(FeatureVec, usize)> = rows
        .iter()
        .map(|(t, l)| Ok((FeatureVec::new(nonneg_embed(t, signed))?, *l)))
        .collect::<Result<_>>()?;
    Ok(svm_train(&as_features, cfg, seed)?.model)
}

fn predict_row(model: &SvmModel, row: &Tensor<f32>, signed: bool) -> Result<(usize, Vec<f64>)> {
    let f = FeatureVec::new(nonneg_embed(row, signed))?;
    svm_predict(model, &f)
}

/// Map a signed row into the non-negative feature space by splitting into
/// positive and negative parts `[max(x,0), max(-x,0)]`; any linear score
/// over the original row is representable over the split. Pass-through
/// when `signed` is false.
fn nonneg_embed(t: &Tensor<f32>, signed: bool) -> Tensor<f32> {
    if !signed {
        return t.clone();
    }
    let mut data = Vec::with_capacity(t.len() * 2);
    data.extend(t.data().iter().map(|&v| v.max(0.0)));
    data.extend(t.data().iter().map(|&v| (-v).max(0.0)));
    Tensor::row(data).expect("embedding preserves finiteness")
}

/// The paper protocol: repeated executions with fresh derived seeds,
/// train, extract features in eval mode, fit the SVM, score the test
/// split, aggregate mean and sample std.
pub fn run_experiment(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mut results: Vec<(usize, Result<RunResult>)> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| (run, one_run(dataset, cfg, run)))
        .collect();
    results.sort_by_key(|(run, _)| *run);
    let mut runs = Vec::with_capacity(cfg.runs);
    for (run, result) in results {
        match result {
            Ok(r) => runs.push(r),
            Err(e) => {
                return Err(Error::Data(format!("run {run} failed: {e}")));
            }
        }
    }
    Ok(ExperimentReport {
        dataset: dataset.name.clone(),
        classes: dataset.classes,
        variant: cfg.train.variant,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        single_run: cfg.runs == 1,
        runs,
        wallclock_ms: started.elapsed().as_millis() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginCell {
    pub margin: f32,
    pub round: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSearchResult {
    pub margins: Vec<f32>,
    /// Per-margin mean accuracy over rounds.
    pub mean: Vec<f64>,
    /// Per-margin sample std over rounds.
    pub std: Vec<f64>,
    pub cells: Vec<MarginCell>,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub config_hash: String,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginSearchConfig {
    pub margin_lo: f32,
    pub margin_hi: f32,
    pub margin_step: f32,
    pub rounds: usize,
    pub epochs_per_round: usize,
}

impl Default for MarginSearchConfig {
    fn default() -> Self {
        MarginSearchConfig {
            margin_lo: 0.1,
            margin_hi: 1.0,
            margin_step: 0.1,
            rounds: 5,
            epochs_per_round: 15,
        }
    }
}

impl MarginSearchConfig {
    pub fn margins(&self) -> Result<Vec<f32>> {
        if !(self.margin_step > 0.0) || self.margin_lo < 0.0 || self.margin_hi < self.margin_lo {
            return Err(Error::Config(format!(
                "invalid margin grid [{}, {}] step {}",
                self.margin_lo, self.margin_hi, self.margin_step
            )));
        }
        let mut out = Vec::new();
        let mut k = 0u32;
        loop {
            let m = self.margin_lo + self.margin_step * k as f32;
            if m > self.margin_hi + self.margin_step * 0.5 {
                break;
            }
            out.push((m * 1000.0).round() / 1000.0);
            k += 1;
        }
        if out.is_empty() {
            return Err(Error::Config("empty margin grid".into()));
        }
        Ok(out)
    }
}

/// Margin grid search: independent short trainings per (margin, round)
/// cell, each on a freshly derived seed and split, scored like a run.
pub fn margin_search(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    search: &MarginSearchConfig,
) -> Result<MarginSearchResult> {
    cfg.validate()?;
    let margins = search.margins()?;
    if search.rounds == 0 || search.epochs_per_round == 0 {
        return Err(Error::Config(
            "margin search needs rounds >= 1 and epochs_per_round >= 1".into(),
        ));
    }
    let started = Instant::now();
    let mut jobs = Vec::new();
    for (mi, &m) in margins.iter().enumerate() {
        for round in 0..search.rounds {
            jobs.push((mi, m, round));
        }
    }
    let cells: Vec<(usize, Result<MarginCell>)> = jobs
        .into_par_iter()
        .map(|(mi, margin, round)| {
            let cell_id = (mi * search.rounds + round) as u64;
            let mut cell_cfg = cfg.clone();
            cell_cfg.master_seed = derive_seed(cfg.master_seed, Stream::Cell(cell_id));
            cell_cfg.runs = 1;
            cell_cfg.train.epochs = search.epochs_per_round;
            cell_cfg.train.margin = crate::metric::MarginConfig { m: margin };
            let result = run_experiment(dataset, &cell_cfg).map(|rep| MarginCell {
                margin,
                round,
                accuracy: rep.runs[0].accuracy,
            });
            (mi * search.rounds + round, result)
        })
        .collect();
    let mut ordered: Vec<(usize, Result<MarginCell>)> = cells;
    ordered.sort_by_key(|(k, _)| *k);
    let mut flat = Vec::with_capacity(ordered.len());
    for (_, c) in ordered {
        flat.push(c.map_err(|e| Error::Data(format!("margin cell failed: {e}")))?);
    }

    let mut mean = Vec::with_capacity(margins.len());
    let mut std = Vec::with_capacity(margins.len());
    for mi in 0..margins.len() {
        let accs: Vec<f64> = flat
            .iter()
            .filter(|c| (c.margin - margins[mi]).abs() < 1e-6)
            .map(|c| c.accuracy)
            .collect();
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        let s = if accs.len() < 2 {
            0.0
        } else {
            (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
        };
        mean.push(m);
        std.push(s);
    }

    Ok(MarginSearchResult {
        margins,
        mean,
        std,
        cells: flat,
        rounds: search.rounds,
        epochs_per_round: search.epochs_per_round,
        config_hash: cfg.hash(),
        wallclock_ms: started.elapsed().as_millis() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    #[test]
    fn perfect_classifier_injection_scores_one() {
        let truth = vec![0, 1, 2, 1, 0];
        let outcome = score_predictions(&truth, &truth, 3).unwrap();
        assert_eq!(outcome.accuracy, 1.0);
        // Row sums equal per-class counts; trace/total == accuracy.
        assert_eq!(outcome.confusion[0][0], 2);
        assert_eq!(outcome.confusion[1][1], 2);
        assert_eq!(outcome.confusion[2][2], 1);
    }

    #[test]
    fn confusion_row_sums_match_class_counts() {
        let truth = vec![0, 0, 1, 1, 1, 2, 2];
        let pred = vec![0, 1, 1, 1, 0, 2, 0];
        let outcome = score_predictions(&truth, &pred, 3).unwrap();
        let row_sums: Vec<usize> = outcome.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(row_sums, vec![2, 3, 2]);
        let trace: usize = (0..3).map(|i| outcome.confusion[i][i]).sum();
        assert!((outcome.accuracy - trace as f64 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn margin_grid_has_ten_cells_by_default() {
        let m = MarginSearchConfig::default().margins().unwrap();
        assert_eq!(m.len(), 10);
        assert!((m[0] - 0.1).abs() < 1e-6);
        assert!((m[9] - 1.0).abs() < 1e-6);

        let zero_start = MarginSearchConfig {
            margin_lo: 0.0,
            ..Default::default()
        };
        assert_eq!(zero_start.margins().unwrap().len(), 11);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn single_run_experiment_reports_zero_std() {
        let dataset = synth_dataset(2, 6, 16, 3).unwrap();
        let cfg = ExperimentConfig {
            runs: 1,
            backbone: desk_backbone(16),
            generator_base_channels: 16,
            train: TrainConfig {
                epochs: 1,
                batch_size: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run_experiment(&dataset, &cfg).unwrap();
        assert!(report.single_run);
        assert_eq!(report.std_accuracy(), 0.0);
        assert_eq!(report.runs.len(), 1);
        assert_eq!(report.runs[0].eval_generator_forwards, 0);
    }

    #[test]
    fn nonneg_embed_splits_signed_rows() {
        let t = Tensor::row(vec![0.5, 0.0, 2.0]).unwrap();
        assert_eq!(nonneg_embed(&t, false).data(), t.data());
        let signed = Tensor::row(vec![0.5, -0.25]).unwrap();
        let e = nonneg_embed(&signed, true);
        assert_eq!(e.data(), &[0.5, 0.0, 0.0, 0.25]);
    }
}
