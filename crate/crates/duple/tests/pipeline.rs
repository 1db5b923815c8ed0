//! End-to-end integration through the public API: synthesize a corpus
//! on disk, load it, meta-train, round-trip the model through a
//! checkpoint and evaluate with a worker pool.

use duple::dataio::{generate_dataset, ClassSpec, DatasetManifest, DomainSpec, SynthConfig};
use duple::episodic::{
    evaluate_with_workers, meta_train, Dataset, EpisodeSpec, LoadOptions, Protocol,
};
use duple::model::{DupleModel, PipelineOpts, DEFAULT_LR};

fn corpus() -> SynthConfig {
    SynthConfig {
        classes: vec![
            ClassSpec {
                name: "flutter".into(),
                band: (40.0, 80.0),
                burst_rate: 6.0,
                burst_decay: 0.05,
                harmonics: 2,
                am_depth: 0.3,
                am_rate: 3.0,
            },
            ClassSpec {
                name: "knock".into(),
                band: (90.0, 140.0),
                burst_rate: 3.0,
                burst_decay: 0.02,
                harmonics: 3,
                am_depth: 0.1,
                am_rate: 1.0,
            },
        ],
        domains: vec![
            DomainSpec {
                name: "rigA".into(),
                band: (10.0, 200.0),
                gain: 1.0,
                snr_db: 18.0,
            },
            DomainSpec {
                name: "rigB".into(),
                band: (30.0, 160.0),
                gain: 0.5,
                snr_db: 10.0,
            },
        ],
        per_cell: 5,
        length: 256,
        sample_rate: 512.0,
    }
}

/// The whole journey: generate, load, train, checkpoint, reload and
/// evaluate — the reloaded model must reproduce the in-memory model's
/// evaluation exactly, for any worker count.
#[test]
fn generate_train_checkpoint_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&corpus(), 41, &data).unwrap();

    let manifest = DatasetManifest::read(&data.join("manifest.csv")).unwrap();
    let opts = LoadOptions {
        target_len: 128,
        stft_window: 32,
        stft_hop: 16,
    };
    let ds = Dataset::load(&manifest, &opts).unwrap();
    assert_eq!(ds.classes, vec!["flutter".to_string(), "knock".to_string()]);
    assert_eq!(ds.domains, vec!["rigA".to_string(), "rigB".to_string()]);
    assert_eq!(ds.samples.len(), 2 * 2 * 5);

    let sources = vec!["rigA".to_string(), "rigB".to_string()];
    let mut model = DupleModel::new(7, PipelineOpts::full(), DEFAULT_LR).unwrap();
    let train = Protocol {
        spec: EpisodeSpec {
            way: 2,
            shot: 2,
            query: 2,
        },
        episodes: 6,
        seed: 7,
    };
    let records = meta_train(&mut model, &ds, &sources, &train, None).unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.loss.is_finite()));

    let ckpt = dir.path().join("model.ckpt");
    model.save(&ckpt).unwrap();
    let reloaded = DupleModel::load(&ckpt, PipelineOpts::full(), DEFAULT_LR).unwrap();

    // Held-in evaluation (single source == target uses the disjoint
    // same-domain split), three worker counts, two model copies: every
    // report must agree because episode streams depend only on indices.
    let eval = Protocol {
        spec: EpisodeSpec {
            way: 2,
            shot: 2,
            query: 1,
        },
        episodes: 5,
        seed: 99,
    };
    let reference = evaluate_with_workers(&model, &ds, &sources[..1], "rigA", &eval, None, 1).unwrap();
    assert_eq!(reference.confusion.total(), 5 * 2);
    for workers in [2usize, 4] {
        let from_disk =
            evaluate_with_workers(&reloaded, &ds, &sources[..1], "rigA", &eval, None, workers).unwrap();
        assert_eq!(from_disk.confusion.counts, reference.confusion.counts);
        assert_eq!(from_disk.accuracy.to_bits(), reference.accuracy.to_bits());
        assert_eq!(from_disk.macro_f1.to_bits(), reference.macro_f1.to_bits());
    }

    // The checkpoint carries the normalizer; a model that never saw the
    // dataset can evaluate straight away.
    assert!(reloaded.normalizer().is_ok());
}

/// Ablation switches change the scoring path, so logits — and in
/// general the loss trajectory — must differ between configurations,
/// while every configuration still trains to finite losses.
#[test]
fn ablation_switches_change_the_trajectory_but_stay_finite() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&corpus(), 42, &data).unwrap();
    let manifest = DatasetManifest::read(&data.join("manifest.csv")).unwrap();
    let opts = LoadOptions {
        target_len: 128,
        stft_window: 32,
        stft_hop: 16,
    };
    let ds = Dataset::load(&manifest, &opts).unwrap();
    let sources = vec!["rigA".to_string(), "rigB".to_string()];
    let protocol = Protocol {
        spec: EpisodeSpec {
            way: 2,
            shot: 1,
            query: 2,
        },
        episodes: 3,
        seed: 5,
    };

    let mut first_losses = Vec::new();
    for opts_variant in [
        PipelineOpts::baseline(),
        PipelineOpts {
            use_fpm: true,
            ..PipelineOpts::baseline()
        },
        PipelineOpts::full(),
    ] {
        let mut model = DupleModel::new(11, opts_variant, DEFAULT_LR).unwrap();
        let records = meta_train(&mut model, &ds, &sources, &protocol, None).unwrap();
        assert!(records.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
        first_losses.push(records[0].loss);
    }
    // Identical seeds, different stages: the very first loss already
    // separates baseline from the full pipeline.
    assert_ne!(first_losses[0].to_bits(), first_losses[2].to_bits());
}
