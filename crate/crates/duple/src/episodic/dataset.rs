//! In-memory dataset: every manifest record loaded, resampled to the
//! model's input length, with spectrogram and raw statistics attached.

use std::collections::BTreeMap;

use crate::dataio::{self, DatasetManifest};
use crate::error::{Error, Result};
use crate::featurize::{self, StatNormalizer, StatVector};
use crate::model::{DupleModel, EmbedInput, SampleData};

/// Signal geometry applied while loading.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Every signal is linearly resampled to this many samples.
    pub target_len: usize,
    pub stft_window: usize,
    pub stft_hop: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            target_len: 1024,
            stft_window: 128,
            stft_hop: 64,
        }
    }
}

impl LoadOptions {
    pub fn validate(&self) -> Result<()> {
        if self.stft_window < 4 || self.stft_window > self.target_len {
            return Err(Error::Config(format!(
                "stft_window {} must lie in [4, target_len = {}]",
                self.stft_window, self.target_len
            )));
        }
        if self.stft_hop == 0 {
            return Err(Error::Config("stft_hop must be positive".into()));
        }
        if self.target_len < 16 {
            return Err(Error::Config(format!(
                "target_len {} is too short",
                self.target_len
            )));
        }
        Ok(())
    }
}

/// One loaded signal with its provenance labels.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub class: String,
    pub domain: String,
    pub data: SampleData,
}

/// All samples of a corpus, indexed by `(domain, class)`.
pub struct Dataset {
    pub samples: Vec<LoadedSample>,
    /// Sorted unique class names.
    pub classes: Vec<String>,
    /// Sorted unique domain names.
    pub domains: Vec<String>,
    index: BTreeMap<(String, String), Vec<usize>>,
}

impl Dataset {
    /// Reads every record of a manifest.
    pub fn load(manifest: &DatasetManifest, opts: &LoadOptions) -> Result<Self> {
        opts.validate()?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let path = manifest.resolve(entry);
            let raw = dataio::read_signal(&path)?;
            let resampled = dataio::resample_linear(&raw, opts.target_len);
            let rate = dataio::effective_rate(raw.len(), entry.sample_rate, opts.target_len);
            let spec = featurize::spectrogram(&resampled, opts.stft_window, opts.stft_hop)?;
            let stats = featurize::stat_features(&resampled, rate)?.values;
            samples.push(LoadedSample {
                class: entry.class.clone(),
                domain: entry.domain.clone(),
                data: SampleData {
                    samples: resampled,
                    spec,
                    stats,
                },
            });
        }
        Self::from_samples(samples)
    }

    /// Builds a dataset from already-loaded samples (synthetic corpora,
    /// tests).
    pub fn from_samples(samples: Vec<LoadedSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("dataset has no samples".into()));
        }
        let mut classes: Vec<String> = samples.iter().map(|s| s.class.clone()).collect();
        classes.sort();
        classes.dedup();
        let mut domains: Vec<String> = samples.iter().map(|s| s.domain.clone()).collect();
        domains.sort();
        domains.dedup();
        let mut index: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            index
                .entry((s.domain.clone(), s.class.clone()))
                .or_default()
                .push(i);
        }
        Ok(Dataset {
            samples,
            classes,
            domains,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample ids of one `(domain, class)` cell, ascending; empty if
    /// the cell is absent.
    pub fn indices(&self, domain: &str, class: &str) -> &[usize] {
        self.index
            .get(&(domain.to_string(), class.to_string()))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Position of a class name in the sorted class vocabulary.
    pub fn class_id(&self, class: &str) -> Option<usize> {
        self.classes.binary_search_by(|c| c.as_str().cmp(class)).ok()
    }

    /// Fits the feature normalizer on the listed domains only; samples
    /// from any other domain never touch the statistics.
    pub fn fit_normalizer(&self, domains: &[String]) -> Result<StatNormalizer> {
        let vectors: Vec<StatVector> = self
            .samples
            .iter()
            .filter(|s| domains.contains(&s.domain))
            .map(|s| StatVector::raw(s.data.stats.clone()))
            .collect();
        if vectors.is_empty() {
            return Err(Error::Data(format!(
                "no samples in domains {domains:?} to fit the normalizer"
            )));
        }
        StatNormalizer::fit(vectors.iter())
    }
}

/// Frozen-model embeddings of every dataset sample, so evaluation
/// episodes skip the encoders entirely.
pub struct EmbeddingCache {
    z_t: Vec<Vec<f64>>,
    z_f: Vec<Vec<f64>>,
}

impl EmbeddingCache {
    /// Embeds every sample once with the model as it currently stands.
    pub fn build(model: &DupleModel, ds: &Dataset) -> Result<Self> {
        let mut z_t = Vec::with_capacity(ds.len());
        let mut z_f = Vec::with_capacity(ds.len());
        for s in &ds.samples {
            let (zt, zf) = model.embed_detached(&s.data)?;
            z_t.push(zt);
            z_f.push(zf);
        }
        Ok(EmbeddingCache { z_t, z_f })
    }

    /// The cached view of one sample.
    pub fn input<'a>(&'a self, ds: &'a Dataset, idx: usize) -> EmbedInput<'a> {
        EmbedInput::Cached {
            z_t: &self.z_t[idx],
            z_f: &self.z_f[idx],
            stats: &ds.samples[idx].data.stats,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::tiny_synth_config;

    #[test]
    fn loads_a_generated_corpus_with_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path =
            crate::dataio::generate_dataset(&tiny_synth_config(), 1, dir.path()).unwrap();
        let manifest = DatasetManifest::read(&manifest_path).unwrap();
        let opts = LoadOptions {
            target_len: 128,
            stft_window: 32,
            stft_hop: 16,
        };
        let ds = Dataset::load(&manifest, &opts).unwrap();
        assert_eq!(ds.len(), 2 * 2 * 3);
        assert_eq!(ds.classes, vec!["flutter".to_string(), "knock".to_string()]);
        assert_eq!(ds.domains, vec!["siteA".to_string(), "siteB".to_string()]);
        assert_eq!(ds.indices("siteA", "flutter").len(), 3);
        assert_eq!(ds.indices("siteA", "missing"), &[] as &[usize]);
        for s in &ds.samples {
            assert_eq!(s.data.samples.len(), 128);
            assert_eq!(s.data.stats.len(), featurize::NUM_FEATURES);
            assert!(s.data.stats.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn normalizer_fit_ignores_excluded_domains() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path =
            crate::dataio::generate_dataset(&tiny_synth_config(), 2, dir.path()).unwrap();
        let manifest = DatasetManifest::read(&manifest_path).unwrap();
        let opts = LoadOptions {
            target_len: 128,
            stft_window: 32,
            stft_hop: 16,
        };
        let ds = Dataset::load(&manifest, &opts).unwrap();
        let only_a = ds.fit_normalizer(&["siteA".to_string()]).unwrap();

        // Oracle: fit on a dataset stripped of every other domain.
        let a_samples: Vec<LoadedSample> = ds
            .samples
            .iter()
            .filter(|s| s.domain == "siteA")
            .cloned()
            .collect();
        let stripped = Dataset::from_samples(a_samples).unwrap();
        let oracle = stripped.fit_normalizer(&["siteA".to_string()]).unwrap();
        assert_eq!(only_a.mean, oracle.mean);
        assert_eq!(only_a.std, oracle.std);

        let both = ds
            .fit_normalizer(&["siteA".to_string(), "siteB".to_string()])
            .unwrap();
        assert_ne!(only_a.mean, both.mean, "siteB must move the statistics");
    }

    #[test]
    fn rejects_bad_load_options() {
        let opts = LoadOptions {
            target_len: 64,
            stft_window: 128,
            stft_hop: 16,
        };
        assert!(matches!(opts.validate(), Err(Error::Config(_))));
        let opts = LoadOptions {
            target_len: 64,
            stft_window: 32,
            stft_hop: 0,
        };
        assert!(matches!(opts.validate(), Err(Error::Config(_))));
    }
}
