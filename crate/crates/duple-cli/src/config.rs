//! Run configuration: defaults, TOML config file, flag overrides.
//!
//! Precedence is flag > file > default.  The resolved configuration is
//! embedded into every output document, so a run can always be retraced
//! from its artifacts alone.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use duple::dataio::SynthConfig;
use duple::episodic::{EpisodeSpec, LoadOptions, Protocol};
use duple::model::{BaselineMetric, PipelineOpts};
use duple::{util, Error, Result};

/// Settings shared by every subcommand.  Every field has a default;
/// unknown keys in a config file are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for parameter init, corpus generation and episodes.
    pub seed: u64,
    /// Dataset directory: `generate` writes it, the rest read it.
    pub data: String,
    /// Run directory for output documents; empty means an
    /// automatically named `runs/<timestamp>-<confighash>`.
    pub out: String,
    /// Checkpoint path: `train` writes it (default `<run>/model.ckpt`),
    /// `eval` reads it.
    pub checkpoint: String,
    /// Samples per signal, for generation and resampling on load.
    pub signal_len: usize,
    /// Signals per (class, domain) cell generated.
    pub per_cell: usize,
    /// STFT window length (samples).
    pub stft_window: usize,
    /// STFT hop (samples).
    pub stft_hop: usize,
    /// Classes per episode.
    pub way: usize,
    /// Support samples per class.
    pub shot: usize,
    /// Query samples per class.
    pub query: usize,
    /// Training episodes for `train` and each `ablate` row.
    pub train_episodes: usize,
    /// Evaluation episodes.
    pub eval_episodes: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Source (training) deployment domains.
    pub sources: Vec<String>,
    /// Held-out target deployment domain.
    pub target: String,
    /// Multi-prototype matching on/off (off forces one prototype).
    pub use_fpm: bool,
    /// Statistical guidance on/off (off uses neutral guidance).
    pub use_sgn: bool,
    /// Cross-domain decision module on/off (off blends domain scores).
    pub use_cdm: bool,
    /// Baseline model instead of the full pipeline: `""` (none),
    /// `"protonet"` / `"protonet-cosine"`, or `"protonet-euclidean"`.
    pub baseline: String,
    /// Evaluation-only stub predictor: `""`, `"perfect"` or `"uniform"`.
    pub stub: String,
    /// Evaluation worker threads; results are identical for any count.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 222,
            data: "runs/data".into(),
            out: String::new(),
            checkpoint: String::new(),
            signal_len: 1024,
            per_cell: 60,
            stft_window: 128,
            stft_hop: 64,
            way: 3,
            shot: 3,
            query: 12,
            train_episodes: 600,
            eval_episodes: 1000,
            learning_rate: 1e-3,
            sources: vec!["siteA".into(), "siteB".into()],
            target: "siteC".into(),
            use_fpm: true,
            use_sgn: true,
            use_cdm: true,
            baseline: String::new(),
            stub: String::new(),
            workers: 1,
        }
    }
}

/// Command-line values that override the config file.  `episodes`
/// lands on `train_episodes` or `eval_episodes` depending on the
/// subcommand, which is resolved by the caller via `episodes_to_eval`.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub data: Option<String>,
    pub out: Option<String>,
    pub checkpoint: Option<String>,
    pub episodes: Option<usize>,
    pub episodes_to_eval: bool,
    pub way: Option<usize>,
    pub shot: Option<usize>,
    pub query: Option<usize>,
    pub sources: Vec<String>,
    pub target: Option<String>,
    pub baseline: Option<String>,
    pub stub: Option<String>,
    pub lr: Option<f64>,
    pub workers: Option<usize>,
}

impl RunConfig {
    /// Reads a config file, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        // toml's Display is a multi-line span snippet; keep the final
        // error to a single line.
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {}", path.display(), e.message())))
    }

    /// Applies flag overrides on top of this configuration.
    pub fn apply(&mut self, ov: &Overrides) {
        macro_rules! take {
            ($field:ident, $src:expr) => {
                if let Some(v) = &$src {
                    self.$field = v.clone();
                }
            };
        }
        take!(seed, ov.seed);
        take!(data, ov.data);
        take!(out, ov.out);
        take!(checkpoint, ov.checkpoint);
        take!(way, ov.way);
        take!(shot, ov.shot);
        take!(query, ov.query);
        take!(target, ov.target);
        take!(baseline, ov.baseline);
        take!(stub, ov.stub);
        take!(learning_rate, ov.lr);
        take!(workers, ov.workers);
        if let Some(n) = ov.episodes {
            if ov.episodes_to_eval {
                self.eval_episodes = n;
            } else {
                self.train_episodes = n;
            }
        }
        if !ov.sources.is_empty() {
            self.sources = ov.sources.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Config(format!("way {} must be at least 2", self.way)));
        }
        if self.shot == 0 || self.query == 0 {
            return Err(Error::Config("shot and query must be positive".into()));
        }
        if self.per_cell == 0 {
            return Err(Error::Config("per_cell must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Config("sources must name at least one domain".into()));
        }
        if self.target.is_empty() {
            return Err(Error::Config("target must name a domain".into()));
        }
        self.baseline_metric()?;
        match self.stub.as_str() {
            "" | "perfect" | "uniform" => {}
            other => {
                return Err(Error::Config(format!(
                    "stub {other:?} is not one of \"\", \"perfect\", \"uniform\""
                )))
            }
        }
        // Surface geometry problems as config errors up front.
        self.load_options().validate()
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            way: self.way,
            shot: self.shot,
            query: self.query,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            target_len: self.signal_len,
            stft_window: self.stft_window,
            stft_hop: self.stft_hop,
        }
    }

    pub fn pipeline_opts(&self) -> PipelineOpts {
        PipelineOpts {
            use_fpm: self.use_fpm,
            use_sgn: self.use_sgn,
            use_cdm: self.use_cdm,
            fixed_alpha: None,
        }
    }

    pub fn baseline_metric(&self) -> Result<Option<BaselineMetric>> {
        match self.baseline.as_str() {
            "" => Ok(None),
            "protonet" | "protonet-cosine" => Ok(Some(BaselineMetric::Cosine)),
            "protonet-euclidean" => Ok(Some(BaselineMetric::SquaredEuclidean)),
            other => Err(Error::Config(format!(
                "baseline {other:?} is not one of \"\", \"protonet\", \
                 \"protonet-cosine\", \"protonet-euclidean\""
            ))),
        }
    }

    pub fn train_protocol(&self) -> Protocol {
        Protocol {
            spec: self.episode_spec(),
            episodes: self.train_episodes,
            seed: self.seed,
        }
    }

    pub fn eval_protocol(&self) -> Protocol {
        Protocol {
            spec: self.episode_spec(),
            episodes: self.eval_episodes,
            seed: self.seed,
        }
    }

    /// The stock benchmark grid resized by `signal_len` and `per_cell`.
    pub fn synth_config(&self) -> SynthConfig {
        let mut synth = SynthConfig::benchmark();
        synth.length = self.signal_len;
        synth.per_cell = self.per_cell;
        synth
    }

    pub fn manifest_path(&self) -> PathBuf {
        Path::new(&self.data).join("manifest.csv")
    }

    /// The run directory: `out` when set, otherwise a fresh
    /// `runs/<unix-seconds>-<config-hash>`.  Output documents never
    /// contain the directory name, so auto-named runs stay
    /// byte-comparable.
    pub fn run_dir(&self) -> Result<PathBuf> {
        if !self.out.is_empty() {
            return Ok(PathBuf::from(&self.out));
        }
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_err(|e| Error::Config(format!("system clock: {e}")))?
            .as_secs();
        let digest = util::fnv1a64(self.config_json()?.as_bytes());
        Ok(PathBuf::from(format!("runs/{stamp}-{:08x}", digest & 0xffff_ffff)))
    }

    /// The resolved configuration as one line of JSON — the form
    /// embedded into every output document.
    pub fn config_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Config(format!("config to JSON: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_validation() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn file_overrides_defaults_and_flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\nway = 4\nbaseline = \"protonet\"\n").unwrap();
        let mut cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.way, 4);
        assert_eq!(cfg.shot, RunConfig::default().shot, "untouched keys keep defaults");

        let ov = Overrides {
            seed: Some(9),
            episodes: Some(25),
            episodes_to_eval: true,
            sources: vec!["siteB".into()],
            ..Overrides::default()
        };
        cfg.apply(&ov);
        assert_eq!(cfg.seed, 9, "flag beats file");
        assert_eq!(cfg.way, 4, "file value survives unrelated flags");
        assert_eq!(cfg.eval_episodes, 25);
        assert_eq!(cfg.train_episodes, RunConfig::default().train_episodes);
        assert_eq!(cfg.sources, vec!["siteB".to_string()]);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "sede = 7\n").unwrap();
        let err = RunConfig::load(Some(&path)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("sede"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        cfg.way = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.baseline = "matchingnet".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default();
        cfg.stft_window = 4096; // larger than signal_len
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_metric_parses_all_spellings() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.baseline_metric().unwrap(), None);
        cfg.baseline = "protonet".into();
        assert_eq!(cfg.baseline_metric().unwrap(), Some(BaselineMetric::Cosine));
        cfg.baseline = "protonet-euclidean".into();
        assert_eq!(
            cfg.baseline_metric().unwrap(),
            Some(BaselineMetric::SquaredEuclidean)
        );
    }

    #[test]
    fn auto_run_dir_depends_on_the_config_hash() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 223;
        let name = |c: &RunConfig| {
            c.run_dir()
                .unwrap()
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned()
        };
        let (na, nb) = (name(&a), name(&b));
        let suffix = |n: &str| n.rsplit('-').next().unwrap().to_string();
        assert_ne!(suffix(&na), suffix(&nb), "hash must track the config");
        assert_eq!(suffix(&na), suffix(&name(&a)), "hash is stable");
    }
}
