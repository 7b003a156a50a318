//! Experiment orchestration and reporting.
//!
//! `baseline` trains from initialization. The compression methods load the
//! baseline model, search for the strongest compression within the accuracy
//! threshold, retrain under that constraint with energy metering and save
//! the result. Every run writes `<out>/<method>.record.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use energycomp_core::compress::lowrank::{dynamic_rank_adjust, plan_ranks, retrain_factorized, RankSearch, SvdCache};
use energycomp_core::compress::prune::{prune_search, retrain_pruned, PruneStats};
use energycomp_core::compress::stego::{apply_bitmask, capacity_search, retrain_quantized};
use energycomp_core::model::{evaluate, Dataset, Model, Trainer};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, ExperimentConfig, Method};
use crate::dataset::load_dataset;
use crate::error::{Error, IoContext, Result};
use crate::formats::{load_model, save_model, save_quantized};
use crate::meter::{train_metered, TrainOutcome};

pub const REPORT_COLUMNS: [&str; 10] = [
    "model",
    "method",
    "compression_rate",
    "accuracy_baseline",
    "accuracy_compressed",
    "epochs",
    "train_seconds",
    "kwh_it",
    "kwh_dc",
    "kwh_per_epoch_mean",
];

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One row of the planned low-rank factorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub params_before: usize,
    pub params_after: usize,
}

/// Method-specific search results kept for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MethodDetails {
    Baseline,
    Stego {
        capacity_bits: u32,
        accuracy_before_retrain: f64,
        /// `(bits, accuracy)` on the test split, bits 0..=32.
        bit_curve: Vec<(u32, f64)>,
    },
    Prune {
        /// Grid rate selected by the search.
        grid_rate: f64,
        per_layer_rates: Vec<(usize, f64)>,
        accuracy_before_retrain: f64,
        /// `(rate, accuracy)` on the test split.
        rate_curve: Vec<(f64, f64)>,
    },
    Lowrank {
        plan: Vec<PlanRow>,
        rank_min: Option<usize>,
        rank_max: Option<usize>,
        rank_mean: Option<f64>,
        adjust_iterations: usize,
        threshold_met: bool,
        /// Validation accuracy of the dense model, which gates the search.
        validation_baseline: f64,
        validation_before_retrain: f64,
        accuracy_before_retrain: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub model: String,
    pub method: Method,
    pub seed: u64,
    pub compression_rate: f64,
    /// Test accuracy of the uncompressed baseline.
    pub accuracy_baseline: f64,
    /// Test accuracy after compression and retraining.
    pub accuracy_compressed: f64,
    /// Epochs of this run's own training; baseline epochs are not added to
    /// the compressed methods.
    pub epochs: usize,
    pub train_seconds: f64,
    pub kwh_it: f64,
    pub kwh_dc: f64,
    pub pue: f64,
    pub kwh_per_epoch: Vec<f64>,
    pub validation_loss_history: Vec<f32>,
    pub details: MethodDetails,
}

impl ExperimentRecord {
    pub fn kwh_per_epoch_mean(&self) -> f64 {
        if self.kwh_per_epoch.is_empty() {
            0.0
        } else {
            self.kwh_per_epoch.iter().sum::<f64>() / self.kwh_per_epoch.len() as f64
        }
    }

    pub fn file_name(method: Method) -> String {
        format!("{method}.record.json")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(self.method));
        fs::write(&path, serde_json::to_vec_pretty(self)?).at(&path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Fresh model for `arch` on inputs of `input_shape`.
pub fn build_model(arch: Architecture, input_shape: &[usize], classes: usize, seed: u64) -> Result<Model> {
    let dim: usize = input_shape.iter().product();
    let model = match arch {
        Architecture::Mlp => Model::mlp(&[dim, 256, 128, classes], seed)?,
        Architecture::Cnn => {
            let (c, h, w) = match *input_shape {
                [c, h, w] => (c, h, w),
                [n] => {
                    let side = (n as f64).sqrt().round() as usize;
                    if side * side != n {
                        return Err(Error::Config(format!(
                            "cnn needs square images; {n} pixels per sample is not a square"
                        )));
                    }
                    (1, side, side)
                }
                _ => return Err(Error::Config(format!("cnn cannot take input shape {input_shape:?}"))),
            };
            Model::reference_cnn(c, h, w, classes, seed)?
        }
    };
    Ok(model)
}

/// Paths a run of `method` writes under `out`.
pub fn model_path(out: &Path, method: Method) -> PathBuf {
    out.join(format!("{method}.nncm"))
}

pub fn quantized_path(out: &Path) -> PathBuf {
    out.join(format!("{}.nncq", Method::Stego))
}

pub fn plan_path(out: &Path) -> PathBuf {
    out.join(format!("{}.plan.txt", Method::Lowrank))
}

/// Runs one experiment, saves its model(s) and record, and returns the
/// record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let seed = cfg.resolved_seed()?;
    let baseline = match cfg.method {
        Method::Baseline => None,
        _ => Some(load_model(cfg.baseline_path())?),
    };
    let data = load_dataset(&cfg.dataset.path, cfg.dataset.format, cfg.class_count, seed)?;
    if let Some(model) = &baseline {
        if model.input_len() != data.train.dim() || model.class_count() != cfg.class_count {
            return Err(Error::Config(format!(
                "baseline model takes {} inputs and emits {} classes; dataset has {} inputs and {} classes",
                model.input_len(),
                model.class_count(),
                data.train.dim(),
                cfg.class_count
            )));
        }
    }
    fs::create_dir_all(&cfg.out).at(&cfg.out)?;
    info!(
        "{} on {} train / {} validation / {} test samples, seed {seed}",
        cfg.method,
        data.train.len(),
        data.validation.len(),
        data.test.len()
    );

    let record = match (cfg.method, baseline) {
        (Method::Baseline, _) => run_baseline(cfg, &data, seed)?,
        (Method::Stego, Some(base)) => run_stego(cfg, &data, seed, &base)?,
        (Method::Prune, Some(base)) => run_prune(cfg, &data, seed, &base)?,
        (Method::Lowrank, Some(base)) => run_lowrank(cfg, &data, seed, &base)?,
        (_, None) => unreachable!("compression methods always load a baseline"),
    };
    let path = record.save(&cfg.out)?;
    info!("wrote {}", path.display());
    Ok(record)
}

fn metered(
    cfg: &ExperimentConfig,
    run: impl FnOnce(&mut dyn energycomp_core::model::EpochObserver) -> energycomp_core::Result<energycomp_core::model::TrainSummary>,
) -> Result<TrainOutcome> {
    train_metered(cfg.sampler.build()?, cfg.pue, Duration::from_secs_f64(cfg.cadence_s), run)
}

fn record(
    cfg: &ExperimentConfig,
    seed: u64,
    compression_rate: f64,
    accuracy_baseline: f64,
    outcome: TrainOutcome,
    details: MethodDetails,
) -> ExperimentRecord {
    ExperimentRecord {
        model: cfg.architecture.to_string(),
        method: cfg.method,
        seed,
        compression_rate,
        accuracy_baseline,
        accuracy_compressed: outcome.summary.test_accuracy,
        epochs: outcome.summary.epochs_run,
        train_seconds: outcome.wall_seconds,
        kwh_it: outcome.energy.kwh_it,
        kwh_dc: outcome.energy.kwh_dc,
        pue: outcome.energy.pue,
        kwh_per_epoch: outcome.energy.per_epoch_kwh,
        validation_loss_history: outcome.summary.validation_loss_history,
        details,
    }
}

fn run_baseline(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<ExperimentRecord> {
    let mut model = build_model(cfg.architecture, data.input_shape(), cfg.class_count, seed)?;
    let trainer = Trainer::new(cfg.train_config(seed))?;
    let outcome = metered(cfg, |obs| trainer.train(&mut model, data, obs))?;
    save_model(&model, model_path(&cfg.out, Method::Baseline))?;
    let acc = outcome.summary.test_accuracy;
    info!("baseline test accuracy {acc:.4} after {} epochs", outcome.summary.epochs_run);
    Ok(record(cfg, seed, 0.0, acc, outcome, MethodDetails::Baseline))
}

fn run_stego(cfg: &ExperimentConfig, data: &Dataset, seed: u64, base: &Model) -> Result<ExperimentRecord> {
    let search = capacity_search(base, &data.test, cfg.threshold)?;
    let n = search.capacity_bits;
    info!("capacity {n} bits, accuracy {:.4}", search.compressed_accuracy);
    let mut model = apply_bitmask(base, n)?;
    let train_cfg = cfg.train_config(seed);
    let outcome = metered(cfg, |obs| retrain_quantized(&mut model, n, data, &train_cfg, obs))?;
    save_model(&model, model_path(&cfg.out, Method::Stego))?;
    save_quantized(&model, n, quantized_path(&cfg.out))?;
    let details = MethodDetails::Stego {
        capacity_bits: n,
        accuracy_before_retrain: search.compressed_accuracy,
        bit_curve: search.accuracy_curve,
    };
    Ok(record(cfg, seed, search.compression_rate, search.baseline_accuracy, outcome, details))
}

fn run_prune(cfg: &ExperimentConfig, data: &Dataset, seed: u64, base: &Model) -> Result<ExperimentRecord> {
    let (mut model, search) = prune_search(base, &data.test, cfg.threshold, cfg.prune_step)?;
    info!("prune rate {:.2}, accuracy {:.4}", search.rate, search.pruned_accuracy);
    let train_cfg = cfg.train_config(seed);
    let outcome = metered(cfg, |obs| retrain_pruned(&mut model, data, &train_cfg, obs))?;
    save_model(&model, model_path(&cfg.out, Method::Prune))?;
    let stats = PruneStats::of(&model);
    let details = MethodDetails::Prune {
        grid_rate: search.rate,
        per_layer_rates: stats.per_layer_rates.clone(),
        accuracy_before_retrain: search.pruned_accuracy,
        rate_curve: search.curve,
    };
    Ok(record(cfg, seed, stats.overall_rate, search.baseline_accuracy, outcome, details))
}

fn run_lowrank(cfg: &ExperimentConfig, data: &Dataset, seed: u64, base: &Model) -> Result<ExperimentRecord> {
    let mut cache = SvdCache::new();
    let validation_baseline = evaluate(base, &data.validation)?;
    let plan = plan_ranks(base, &data.validation, cfg.threshold, RankSearch::Auto, &mut cache)?;
    let adjusted = dynamic_rank_adjust(
        base,
        &plan,
        &data.validation,
        validation_baseline,
        cfg.threshold,
        cfg.max_rank_iters,
        &mut cache,
    )?;
    let plan = adjusted.plan;
    info!(
        "rank plan compresses {:.4} after {} adjustments",
        plan.overall_compression(),
        adjusted.iterations
    );
    let accuracy_baseline = evaluate(base, &data.test)?;
    let accuracy_before_retrain = evaluate(&adjusted.model, &data.test)?;
    let mut model = adjusted.model;
    let train_cfg = cfg.train_config(seed);
    let outcome = metered(cfg, |obs| retrain_factorized(&mut model, data, &train_cfg, obs))?;
    save_model(&model, model_path(&cfg.out, Method::Lowrank))?;
    let plan_file = plan_path(&cfg.out);
    fs::write(&plan_file, plan.to_string()).at(&plan_file)?;
    let stats = plan.rank_stats();
    let details = MethodDetails::Lowrank {
        plan: plan
            .entries()
            .iter()
            .map(|e| PlanRow {
                layer: e.layer,
                rows: e.rows,
                cols: e.cols,
                rank: e.rank,
                params_before: e.params_before(),
                params_after: e.params_after(),
            })
            .collect(),
        rank_min: stats.map(|s| s.min),
        rank_max: stats.map(|s| s.max),
        rank_mean: stats.map(|s| s.mean),
        adjust_iterations: adjusted.iterations,
        threshold_met: adjusted.threshold_met,
        validation_baseline,
        validation_before_retrain: adjusted.accuracy,
        accuracy_before_retrain,
    };
    Ok(record(cfg, seed, plan.overall_compression(), accuracy_baseline, outcome, details))
}

/// Records found in `dir`, in method order.
pub fn collect_records(dir: &Path) -> Result<Vec<ExperimentRecord>> {
    Method::ALL
        .into_iter()
        .map(|m| dir.join(ExperimentRecord::file_name(m)))
        .filter(|p| p.is_file())
        .map(|p| ExperimentRecord::load(&p))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub records: Vec<ExperimentRecord>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model: &'a str,
    method: Method,
    compression_rate: f64,
    accuracy_baseline: f64,
    accuracy_compressed: f64,
    epochs: usize,
    train_seconds: f64,
    kwh_it: f64,
    kwh_dc: f64,
    kwh_per_epoch_mean: f64,
}

/// Writes the summary CSV to `csv_path` and the full records to
/// `json_path`.
pub fn emit_report(records: &[ExperimentRecord], csv_path: &Path, json_path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Config("no experiment records to report".into()));
    }
    let file = fs::File::create(csv_path).at(csv_path)?;
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(file);
    for r in records {
        w.serialize(CsvRow {
            model: &r.model,
            method: r.method,
            compression_rate: r.compression_rate,
            accuracy_baseline: r.accuracy_baseline,
            accuracy_compressed: r.accuracy_compressed,
            epochs: r.epochs,
            train_seconds: r.train_seconds,
            kwh_it: r.kwh_it,
            kwh_dc: r.kwh_dc,
            kwh_per_epoch_mean: r.kwh_per_epoch_mean(),
        })?;
    }
    w.flush().at(csv_path)?;
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        records: records.to_vec(),
    };
    fs::write(json_path, serde_json::to_vec_pretty(&report)?).at(json_path)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<Report> {
    let bytes = fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
