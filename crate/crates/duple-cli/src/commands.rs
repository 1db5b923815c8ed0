//! The five subcommands.  Each one writes its documents into the run
//! directory; every document embeds the resolved configuration, and
//! none contains timestamps, so reruns with identical configurations
//! produce byte-identical files.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use duple::dataio::{generate_dataset, read_signal, DatasetManifest, SynthConfig};
use duple::episodic::{
    evaluate_with_workers, meta_train, report_from, sample_episode, ConfusionMatrix, Dataset,
    MetricsReport, TrainRecord,
};
use duple::featurize::{stat_features, FEATURE_NAMES};
use duple::model::{DupleModel, PipelineOpts};
use duple::{util, Error, Result};

use crate::config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// `# config {...}` header line embedded in every CSV document.
fn csv_header(cfg: &RunConfig) -> Result<String> {
    Ok(format!("# config {}\n", cfg.config_json()?))
}

fn load_dataset(cfg: &RunConfig) -> Result<(DatasetManifest, Dataset)> {
    let manifest = DatasetManifest::read(&cfg.manifest_path())?;
    let ds = Dataset::load(&manifest, &cfg.load_options())?;
    Ok((manifest, ds))
}

#[derive(Serialize)]
struct GenerateDoc<'a> {
    config: &'a RunConfig,
    synth: &'a SynthConfig,
    manifest: String,
    signals: usize,
}

/// Generates the synthetic benchmark corpus into the data directory.
pub fn generate(cfg: &RunConfig) -> Result<()> {
    let synth = cfg.synth_config();
    let manifest_path = generate_dataset(&synth, cfg.seed, Path::new(&cfg.data))?;
    let signals = synth.classes.len() * synth.domains.len() * synth.per_cell;
    let run = cfg.run_dir()?;
    ensure_dir(&run)?;
    write_json(
        &run.join("generate.json"),
        &GenerateDoc {
            config: cfg,
            synth: &synth,
            manifest: manifest_path.display().to_string(),
            signals,
        },
    )?;
    log::info!("generated {signals} signals under {}", cfg.data);
    println!(
        "generated {signals} signals ({} classes x {} domains x {}) under {}",
        synth.classes.len(),
        synth.domains.len(),
        synth.per_cell,
        cfg.data
    );
    Ok(())
}

/// Exports the 26 statistical features of every manifest record, at
/// the record's native length and rate.
pub fn features(cfg: &RunConfig) -> Result<()> {
    let manifest = DatasetManifest::read(&cfg.manifest_path())?;
    let run = cfg.run_dir()?;
    ensure_dir(&run)?;
    let mut csv = csv_header(cfg)?;
    csv.push_str("path,class,domain,");
    csv.push_str(&FEATURE_NAMES.join(","));
    csv.push('\n');
    for entry in &manifest.entries {
        let samples = read_signal(&manifest.resolve(entry))?;
        let stats = stat_features(&samples, entry.sample_rate)?;
        csv.push_str(&format!("{},{},{}", entry.path, entry.class, entry.domain));
        for v in &stats.values {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let path = run.join("features.csv");
    write_text(&path, &csv)?;
    println!(
        "wrote {} feature rows to {}",
        manifest.entries.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainDoc<'a> {
    config: &'a RunConfig,
    checkpoint: String,
    episodes: usize,
    mean_loss_last_50: f64,
    mean_accuracy_last_50: f64,
}

fn train_log_csv(cfg: &RunConfig, records: &[TrainRecord]) -> Result<String> {
    let mut csv = csv_header(cfg)?;
    csv.push_str("episode,loss,accuracy\n");
    for r in records {
        csv.push_str(&format!("{},{},{}\n", r.episode, r.loss, r.accuracy));
    }
    Ok(csv)
}

fn tail_mean(records: &[TrainRecord], n: usize, f: impl Fn(&TrainRecord) -> f64) -> f64 {
    let tail = &records[records.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

/// Meta-trains on the source domains and writes the checkpoint plus
/// the training log.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let (_, ds) = load_dataset(cfg)?;
    let run = cfg.run_dir()?;
    ensure_dir(&run)?;
    let mut model = DupleModel::new(cfg.seed, cfg.pipeline_opts(), cfg.learning_rate)?;
    let records = meta_train(
        &mut model,
        &ds,
        &cfg.sources,
        &cfg.train_protocol(),
        cfg.baseline_metric()?,
    )?;
    let checkpoint = if cfg.checkpoint.is_empty() {
        run.join("model.ckpt")
    } else {
        PathBuf::from(&cfg.checkpoint)
    };
    if let Some(parent) = checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    model.save(&checkpoint)?;
    write_text(&run.join("train_log.csv"), &train_log_csv(cfg, &records)?)?;
    write_json(
        &run.join("train.json"),
        &TrainDoc {
            config: cfg,
            checkpoint: checkpoint.display().to_string(),
            episodes: records.len(),
            mean_loss_last_50: tail_mean(&records, 50, |r| r.loss),
            mean_accuracy_last_50: tail_mean(&records, 50, |r| r.accuracy),
        },
    )?;
    println!(
        "trained {} episodes (loss {:.4}, accuracy {:.4} over the last 50) -> {}",
        records.len(),
        tail_mean(&records, 50, |r| r.loss),
        tail_mean(&records, 50, |r| r.accuracy),
        checkpoint.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    config: &'a RunConfig,
    metrics: &'a MetricsReport,
}

fn write_report(cfg: &RunConfig, run: &Path, tag: Option<&str>, report: &MetricsReport) -> Result<()> {
    let metrics_name = match tag {
        None => "metrics.json".to_string(),
        Some(t) => format!("metrics_{t}.json"),
    };
    let confusion_name = match tag {
        None => "confusion.csv".to_string(),
        Some(t) => format!("confusion_{t}.csv"),
    };
    write_json(
        &run.join(metrics_name),
        &MetricsDoc {
            config: cfg,
            metrics: report,
        },
    )?;
    let csv = format!("{}{}", csv_header(cfg)?, report.confusion.to_csv());
    write_text(&run.join(confusion_name), &csv)
}

/// Evaluation with the model replaced by a stub predictor, exercising
/// the sampling and metric plumbing without any learning.
fn stub_eval(cfg: &RunConfig, ds: &Dataset) -> Result<MetricsReport> {
    let spec = cfg.episode_spec();
    let mut confusion = ConfusionMatrix::new(ds.classes.clone());
    for e in 0..cfg.eval_episodes {
        let mut rng = util::seeded_stream(cfg.seed, util::STREAM_EVAL_EPISODE, e as u64);
        let ep = sample_episode(ds, spec, &cfg.sources, &cfg.target, &mut rng)?;
        // Predictions draw from their own stream so they cannot be
        // correlated with the episode composition.
        let mut predict_rng = util::seeded_stream(cfg.seed, util::STREAM_MISC, e as u64);
        for &(_, local) in &ep.queries {
            let predicted = match cfg.stub.as_str() {
                "perfect" => local,
                "uniform" => predict_rng.gen_range(0..spec.way),
                other => {
                    return Err(Error::Config(format!("unknown stub {other:?}")));
                }
            };
            confusion.record(ep.classes[local], ep.classes[predicted]);
        }
    }
    Ok(report_from(confusion, cfg.eval_episodes))
}

/// Evaluates a checkpoint (or a stub predictor) on the target domain.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    let (_, ds) = load_dataset(cfg)?;
    let run = cfg.run_dir()?;
    ensure_dir(&run)?;
    let report = if !cfg.stub.is_empty() {
        stub_eval(cfg, &ds)?
    } else {
        if cfg.checkpoint.is_empty() {
            return Err(Error::Config(
                "eval needs a checkpoint (or a stub predictor)".into(),
            ));
        }
        let model = DupleModel::load(
            Path::new(&cfg.checkpoint),
            cfg.pipeline_opts(),
            cfg.learning_rate,
        )?;
        evaluate_with_workers(
            &model,
            &ds,
            &cfg.sources,
            &cfg.target,
            &cfg.eval_protocol(),
            cfg.baseline_metric()?,
            cfg.workers,
        )?
    };
    write_report(cfg, &run, None, &report)?;
    println!(
        "accuracy {:.4}  macro-F1 {:.4} over {} episodes -> {}",
        report.accuracy,
        report.macro_f1,
        report.episodes,
        run.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblateRow {
    label: String,
    accuracy: f64,
    macro_precision: f64,
    macro_recall: f64,
    macro_f1: f64,
}

#[derive(Serialize)]
struct AblateDoc<'a> {
    config: &'a RunConfig,
    rows: Vec<AblateRow>,
}

/// The five-row ablation grid: every stage off, stages cumulatively
/// enabled, and the full pipeline.  Each row trains from scratch with
/// the same seed and data, then evaluates on the target domain.
pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (_, ds) = load_dataset(cfg)?;
    let run = cfg.run_dir()?;
    ensure_dir(&run)?;
    let grid: [(&str, PipelineOpts); 5] = [
        ("baseline", PipelineOpts::baseline()),
        (
            "fpm",
            PipelineOpts {
                use_fpm: true,
                ..PipelineOpts::baseline()
            },
        ),
        (
            "fpm_sgn",
            PipelineOpts {
                use_fpm: true,
                use_sgn: true,
                ..PipelineOpts::baseline()
            },
        ),
        (
            "fpm_cdm",
            PipelineOpts {
                use_fpm: true,
                use_cdm: true,
                ..PipelineOpts::baseline()
            },
        ),
        ("full", PipelineOpts::full()),
    ];
    let mut rows = Vec::with_capacity(grid.len());
    for (tag, opts) in grid {
        let mut model = DupleModel::new(cfg.seed, opts, cfg.learning_rate)?;
        meta_train(&mut model, &ds, &cfg.sources, &cfg.train_protocol(), None)?;
        let report = evaluate_with_workers(
            &model,
            &ds,
            &cfg.sources,
            &cfg.target,
            &cfg.eval_protocol(),
            None,
            cfg.workers,
        )?;
        write_report(cfg, &run, Some(tag), &report)?;
        log::info!("{}: accuracy {:.4} macro-F1 {:.4}", opts.label(), report.accuracy, report.macro_f1);
        println!(
            "{:<12} accuracy {:.4}  macro-F1 {:.4}",
            opts.label(),
            report.accuracy,
            report.macro_f1
        );
        rows.push(AblateRow {
            label: opts.label(),
            accuracy: report.accuracy,
            macro_precision: report.macro_precision,
            macro_recall: report.macro_recall,
            macro_f1: report.macro_f1,
        });
    }
    write_json(&run.join("ablate.json"), &AblateDoc { config: cfg, rows })?;
    println!("grid written to {}", run.display());
    Ok(())
}
