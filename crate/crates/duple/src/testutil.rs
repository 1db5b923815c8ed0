//! Shared fixtures for the unit-test suites: a tiny synthetic corpus
//! that is cheap enough to regenerate inside individual tests.

use crate::dataio::{generate_dataset, ClassSpec, DatasetManifest, DomainSpec, SynthConfig};
use crate::episodic::{Dataset, LoadOptions};

/// Two classes, two deployment domains, 256-sample records at 512 Hz.
pub(crate) fn tiny_synth_config() -> SynthConfig {
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
                name: "siteA".into(),
                band: (10.0, 200.0),
                gain: 1.0,
                snr_db: 18.0,
            },
            DomainSpec {
                name: "siteB".into(),
                band: (30.0, 160.0),
                gain: 0.5,
                snr_db: 10.0,
            },
        ],
        per_cell: 3,
        length: 256,
        sample_rate: 512.0,
    }
}

/// Load options sized for the tiny corpus: resample to 128 samples so
/// model forward passes stay fast.
pub(crate) fn tiny_load_options() -> LoadOptions {
    LoadOptions {
        target_len: 128,
        stft_window: 32,
        stft_hop: 16,
    }
}

/// Generates the tiny corpus into a temporary directory and loads it;
/// the files are discarded once the samples are in memory.
pub(crate) fn tiny_dataset(seed: u64, per_cell: usize) -> Dataset {
    let mut cfg = tiny_synth_config();
    cfg.per_cell = per_cell;
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = generate_dataset(&cfg, seed, dir.path()).unwrap();
    let manifest = DatasetManifest::read(&manifest_path).unwrap();
    Dataset::load(&manifest, &tiny_load_options()).unwrap()
}
