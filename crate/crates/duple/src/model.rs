//! The assembled model: dual encoders, statistical guidance, flexible
//! prototype matching, and the collaborative decision stage, wired
//! into episode-level forward passes, training steps, and checkpoints.
//!
//! Every stage registers its parameters regardless of which ablation
//! switches are active, so checkpoints stay layout-compatible across
//! configurations and initialization is identical for every ablation
//! row under one seed.  Disabled stages simply never appear on the
//! tape and therefore receive no gradient.

use std::path::Path;

use crate::cdm::{self, Branch};
use crate::diffcore::{ParamStore, Session, Tape, Tensor, Var};
use crate::encoders;
use crate::error::{Error, Result};
use crate::featurize::{Spectrogram, StatNormalizer, NUM_FEATURES};
use crate::fpm;
use crate::sgn;
use crate::util;

/// Ablation switches for the pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOpts {
    /// Adaptive multi-prototype construction; off forces one prototype
    /// (the class mean) per class and view.
    pub use_fpm: bool,
    /// Learned guidance; off substitutes the neutral guidance
    /// (`g = 0`, `α = (0.5, 0.5)`, `β = 1`, `κ = 0`).
    pub use_sgn: bool,
    /// Attention aggregation, relation vector, and correction head;
    /// off reduces fusion to the `α`-weighted blend of the two views'
    /// scores.
    pub use_cdm: bool,
    /// Overrides the view weights with constants, e.g. `(1, 0)` to
    /// score on the time view alone.
    pub fixed_alpha: Option<(f64, f64)>,
}

impl PipelineOpts {
    /// Every stage active.
    pub fn full() -> Self {
        PipelineOpts {
            use_fpm: true,
            use_sgn: true,
            use_cdm: true,
            fixed_alpha: None,
        }
    }

    /// Every stage disabled: single mean prototypes, neutral guidance,
    /// plain `α = (0.5, 0.5)` blending.
    pub fn baseline() -> Self {
        PipelineOpts {
            use_fpm: false,
            use_sgn: false,
            use_cdm: false,
            fixed_alpha: None,
        }
    }

    /// The reduction configuration: single prototypes, neutral
    /// guidance, no decision stage, time view only.  In this mode the
    /// per-class logit collapses to `λ·cos(z_t, mean prototype)`.
    pub fn reduction() -> Self {
        PipelineOpts {
            use_fpm: false,
            use_sgn: false,
            use_cdm: false,
            fixed_alpha: Some((1.0, 0.0)),
        }
    }

    /// Short human-readable tag, used in ablation reports.
    pub fn label(&self) -> String {
        if self == &Self::full() {
            return "full".into();
        }
        let mut parts = Vec::new();
        if self.use_fpm {
            parts.push("fpm");
        }
        if self.use_sgn {
            parts.push("sgn");
        }
        if self.use_cdm {
            parts.push("cdm");
        }
        let mut label = if parts.is_empty() {
            "baseline".to_string()
        } else {
            format!("+{}", parts.join("+"))
        };
        if let Some((t, f)) = self.fixed_alpha {
            label.push_str(&format!("(alpha={t},{f})"));
        }
        label
    }
}

/// Distance family for the reference baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMetric {
    /// `λ·cos(z_q, prototype)` with the learned temperature.
    Cosine,
    /// `−‖z_q − prototype‖²`.
    SquaredEuclidean,
}

/// Precomputed per-sample inputs: the resampled waveform, its
/// spectrogram, and the raw (unnormalized) feature statistics.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub samples: Vec<f64>,
    pub spec: Spectrogram,
    pub stats: Vec<f64>,
}

/// One sample as the episode forward sees it: raw signal data (the
/// encoders run on the tape; gradients flow) or cached embeddings (the
/// encoders are skipped; evaluation of a frozen model).
#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Raw(&'a SampleData),
    Cached {
        z_t: &'a [f64],
        z_f: &'a [f64],
        stats: &'a [f64],
    },
}

/// One episode's model inputs, with episode-local class indices.
pub struct EpisodeBatch<'a> {
    /// `support[c]` holds class `c`'s support samples.
    pub support: Vec<Vec<EmbedInput<'a>>>,
    /// `(input, true class index)` per query.
    pub queries: Vec<(EmbedInput<'a>, usize)>,
}

/// Numeric results of one episode forward.
#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub loss: f64,
    /// Final logits per query.
    pub logits: Vec<Vec<f64>>,
    /// Argmax class per query (ties to the lowest index).
    pub predictions: Vec<usize>,
    pub correct: usize,
}

/// An episode forward still attached to its tape: `loss` can be
/// differentiated, `output` carries the detached numbers.
pub struct TapedEpisode {
    pub loss: Var,
    pub output: EpisodeOutput,
}

/// The complete model: parameter store plus pipeline configuration.
pub struct DupleModel {
    store: ParamStore,
    opts: PipelineOpts,
    seed: u64,
    lr: f64,
}

/// Default Adam learning rate.
pub const DEFAULT_LR: f64 = 1e-3;

const FINGERPRINT_TAG: &str = "duple-v1";

impl DupleModel {
    /// Fresh model with Glorot-initialized parameters drawn from
    /// `seed` and an identity feature normalizer.
    pub fn new(seed: u64, opts: PipelineOpts, lr: f64) -> Result<Self> {
        if let Some((t, f)) = opts.fixed_alpha {
            if !(t.is_finite() && f.is_finite() && t >= 0.0 && f >= 0.0) {
                return Err(Error::Config(format!(
                    "fixed_alpha ({t}, {f}) must be nonnegative and finite"
                )));
            }
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        let mut store = ParamStore::new();
        encoders::register_time_encoder(&mut store, seed)?;
        encoders::register_freq_encoder(&mut store, seed)?;
        sgn::register_sgn(&mut store, seed)?;
        fpm::register_fpm(&mut store)?;
        cdm::register_cdm(&mut store, seed)?;
        store.add_tensor("norm.mean", Tensor::zeros(vec![NUM_FEATURES]), false)?;
        store.add_tensor(
            "norm.std",
            Tensor::new(vec![NUM_FEATURES], vec![1.0; NUM_FEATURES]),
            false,
        )?;
        Ok(DupleModel { store, opts, seed, lr })
    }

    pub fn opts(&self) -> PipelineOpts {
        self.opts
    }

    pub fn set_opts(&mut self, opts: PipelineOpts) {
        self.opts = opts;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Installs the feature normalizer fitted on source-side data; its
    /// statistics ride along in every checkpoint as frozen tensors.
    pub fn set_normalizer(&mut self, norm: &StatNormalizer) -> Result<()> {
        self.store
            .set_value("norm.mean", Tensor::new(vec![NUM_FEATURES], norm.mean.clone()))?;
        self.store
            .set_value("norm.std", Tensor::new(vec![NUM_FEATURES], norm.std.clone()))
    }

    pub fn normalizer(&self) -> Result<StatNormalizer> {
        Ok(StatNormalizer {
            mean: self.store.get("norm.mean")?.value.data().to_vec(),
            std: self.store.get("norm.std")?.value.data().to_vec(),
        })
    }

    /// Standardizes raw feature statistics with the stored normalizer.
    pub fn normalize_stats(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != NUM_FEATURES {
            return Err(Error::shape(
                "normalize_stats",
                format!("expected {NUM_FEATURES} statistics, got {}", raw.len()),
            ));
        }
        let mean = self.store.get("norm.mean")?.value.data().to_vec();
        let std = self.store.get("norm.std")?.value.data().to_vec();
        Ok(raw
            .iter()
            .zip(mean.iter().zip(&std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    /// Embeds one sample into both views, returning the two embedding
    /// nodes plus the sample's normalized statistics.
    fn embed(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        input: &EmbedInput,
    ) -> Result<(Var, Var, Vec<f64>)> {
        match input {
            EmbedInput::Raw(data) => {
                let z_t = encoders::time_forward(tape, sess, &self.store, &data.samples)?;
                let z_f = encoders::freq_forward(tape, sess, &self.store, &data.spec)?;
                Ok((z_t, z_f, self.normalize_stats(&data.stats)?))
            }
            EmbedInput::Cached { z_t, z_f, stats } => {
                let zt = tape.constant(Tensor::vector(z_t));
                let zf = tape.constant(Tensor::vector(z_f));
                Ok((zt, zf, self.normalize_stats(stats)?))
            }
        }
    }

    /// Embeds one sample on a throwaway tape and returns plain values;
    /// used to populate embedding caches for frozen evaluation.
    pub fn embed_detached(&self, data: &SampleData) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut sess = Session::new(false);
        let (z_t, z_f, _) = self.embed(&mut tape, &mut sess, &EmbedInput::Raw(data))?;
        Ok((
            tape.value(z_t).data().to_vec(),
            tape.value(z_f).data().to_vec(),
        ))
    }

    /// Full pipeline forward over one episode, leaving the mean
    /// cross-entropy loss on the tape.
    pub fn forward_episode(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        batch: &EpisodeBatch,
    ) -> Result<TapedEpisode> {
        let way = batch.support.len();
        if way == 0 || batch.queries.is_empty() {
            return Err(Error::Data("episode needs support classes and queries".into()));
        }

        // Per-class prototype banks in both views.
        let mut protos_t: Vec<Vec<Var>> = Vec::with_capacity(way);
        let mut protos_f: Vec<Vec<Var>> = Vec::with_capacity(way);
        for (c, members) in batch.support.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Data(format!("class {c} has no support samples")));
            }
            let mut zts = Vec::with_capacity(members.len());
            let mut zfs = Vec::with_capacity(members.len());
            for m in members {
                let (zt, zf, _) = self.embed(tape, sess, m)?;
                zts.push(zt);
                zfs.push(zf);
            }
            let k = if self.opts.use_fpm {
                fpm::choose_k(members.len())
            } else {
                1
            };
            protos_t.push(fpm::class_prototypes(tape, &zts, k)?);
            protos_f.push(fpm::class_prototypes(tape, &zfs, k)?);
        }

        let mut ces: Vec<Var> = Vec::with_capacity(batch.queries.len());
        let mut output = EpisodeOutput {
            loss: 0.0,
            logits: Vec::with_capacity(batch.queries.len()),
            predictions: Vec::with_capacity(batch.queries.len()),
            correct: 0,
        };

        for (input, label) in &batch.queries {
            if *label >= way {
                return Err(Error::Data(format!(
                    "query label {label} outside 0..{way}"
                )));
            }
            let (z_t, z_f, stats_norm) = self.embed(tape, sess, input)?;
            let guide = if self.opts.use_sgn {
                sgn::sgn_forward(tape, sess, &self.store, &stats_norm)?
            } else {
                sgn::neutral_guidance(tape)
            };
            let alpha = match self.opts.fixed_alpha {
                Some((t, f)) => tape.constant(Tensor::vector(&[t, f])),
                None => guide.alpha,
            };
            let beta = if self.opts.use_sgn { Some(guide.beta) } else { None };

            let mut l_t = Vec::with_capacity(way);
            let mut l_f = Vec::with_capacity(way);
            for c in 0..way {
                l_t.push(fpm::class_score(tape, sess, &self.store, z_t, &protos_t[c], beta)?);
                l_f.push(fpm::class_score(tape, sess, &self.store, z_f, &protos_f[c], beta)?);
            }

            let finals: Vec<Var> = if self.opts.use_cdm {
                let lt_vec = tape.concat(&l_t)?;
                let lf_vec = tape.concat(&l_f)?;
                let u_t = cdm::logit_summary(tape, lt_vec)?;
                let u_f = cdm::logit_summary(tape, lf_vec)?;
                let key_t =
                    cdm::build_key(tape, sess, &self.store, Branch::Time, z_t, guide.g, u_t, u_f)?;
                let key_f =
                    cdm::build_key(tape, sess, &self.store, Branch::Freq, z_f, guide.g, u_t, u_f)?;
                let mut finals = Vec::with_capacity(way);
                for c in 0..way {
                    let w_t = cdm::attend(tape, sess, &self.store, key_t, &protos_t[c])?;
                    let r_t = cdm::aggregate(tape, w_t, &protos_t[c])?;
                    let w_f = cdm::attend(tape, sess, &self.store, key_f, &protos_f[c])?;
                    let r_f = cdm::aggregate(tape, w_f, &protos_f[c])?;
                    let v = cdm::relation(tape, sess, &self.store, r_t, r_f)?;
                    let h = cdm::fusion_term(tape, sess, &self.store, v, alpha, guide.kappa)?;
                    finals.push(cdm::final_logit(tape, l_t[c], l_f[c], alpha, h)?);
                }
                finals
            } else {
                let zero = tape.constant(Tensor::scalar(0.0));
                (0..way)
                    .map(|c| cdm::final_logit(tape, l_t[c], l_f[c], alpha, zero))
                    .collect::<Result<_>>()?
            };

            let final_vec = tape.concat(&finals)?;
            let values = tape.value(final_vec).data().to_vec();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("episode logits".into()));
            }
            let pred = util::argmax(&values);
            if pred == *label {
                output.correct += 1;
            }
            output.logits.push(values);
            output.predictions.push(pred);

            let lse = tape.log_sum_exp(final_vec);
            let ly = tape.gather(final_vec, *label)?;
            ces.push(tape.sub(lse, ly)?);
        }

        let stacked = tape.concat(&ces)?;
        let loss = tape.mean_elems(stacked);
        output.loss = tape.value(loss).item();
        Ok(TapedEpisode { loss, output })
    }

    /// Prototypical-network forward: time view only, one mean
    /// prototype per class, plain similarity scores.
    pub fn protonet_forward(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        batch: &EpisodeBatch,
        metric: BaselineMetric,
    ) -> Result<TapedEpisode> {
        let way = batch.support.len();
        if way == 0 || batch.queries.is_empty() {
            return Err(Error::Data("episode needs support classes and queries".into()));
        }
        let mut protos = Vec::with_capacity(way);
        for (c, members) in batch.support.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Data(format!("class {c} has no support samples")));
            }
            let zts = members
                .iter()
                .map(|m| self.embed_time_only(tape, sess, m))
                .collect::<Result<Vec<_>>>()?;
            protos.push(tape.mean_vecs(&zts)?);
        }

        let mut ces = Vec::with_capacity(batch.queries.len());
        let mut output = EpisodeOutput {
            loss: 0.0,
            logits: Vec::with_capacity(batch.queries.len()),
            predictions: Vec::with_capacity(batch.queries.len()),
            correct: 0,
        };
        for (input, label) in &batch.queries {
            if *label >= way {
                return Err(Error::Data(format!(
                    "query label {label} outside 0..{way}"
                )));
            }
            let z = self.embed_time_only(tape, sess, input)?;
            let scores: Vec<Var> = match metric {
                BaselineMetric::Cosine => protos
                    .iter()
                    .map(|&p| fpm::class_score(tape, sess, &self.store, z, &[p], None))
                    .collect::<Result<_>>()?,
                BaselineMetric::SquaredEuclidean => protos
                    .iter()
                    .map(|&p| {
                        let d = tape.sub(z, p)?;
                        let sq = tape.dot(d, d)?;
                        Ok(tape.scale(sq, -1.0))
                    })
                    .collect::<Result<_>>()?,
            };
            let score_vec = tape.concat(&scores)?;
            let values = tape.value(score_vec).data().to_vec();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("baseline logits".into()));
            }
            let pred = util::argmax(&values);
            if pred == *label {
                output.correct += 1;
            }
            output.logits.push(values);
            output.predictions.push(pred);
            let lse = tape.log_sum_exp(score_vec);
            let ly = tape.gather(score_vec, *label)?;
            ces.push(tape.sub(lse, ly)?);
        }
        let stacked = tape.concat(&ces)?;
        let loss = tape.mean_elems(stacked);
        output.loss = tape.value(loss).item();
        Ok(TapedEpisode { loss, output })
    }

    fn embed_time_only(
        &self,
        tape: &mut Tape,
        sess: &mut Session,
        input: &EmbedInput,
    ) -> Result<Var> {
        match input {
            EmbedInput::Raw(data) => {
                encoders::time_forward(tape, sess, &self.store, &data.samples)
            }
            EmbedInput::Cached { z_t, .. } => Ok(tape.constant(Tensor::vector(z_t))),
        }
    }

    /// One training step: forward, backward, Adam update.  Returns
    /// `(loss, episode accuracy)`.
    pub fn train_step(&mut self, batch: &EpisodeBatch) -> Result<(f64, f64)> {
        let fwd = |model: &DupleModel, tape: &mut Tape, sess: &mut Session| {
            model.forward_episode(tape, sess, batch)
        };
        self.step_with(batch, fwd)
    }

    /// Training step for the baseline model.
    pub fn train_step_protonet(
        &mut self,
        batch: &EpisodeBatch,
        metric: BaselineMetric,
    ) -> Result<(f64, f64)> {
        let fwd = |model: &DupleModel, tape: &mut Tape, sess: &mut Session| {
            model.protonet_forward(tape, sess, batch, metric)
        };
        self.step_with(batch, fwd)
    }

    fn step_with<F>(&mut self, batch: &EpisodeBatch, fwd: F) -> Result<(f64, f64)>
    where
        F: Fn(&DupleModel, &mut Tape, &mut Session) -> Result<TapedEpisode>,
    {
        let mut tape = Tape::new();
        let mut sess = Session::new(true);
        let episode = fwd(self, &mut tape, &mut sess)?;
        if !episode.output.loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = tape.backward(episode.loss)?;
        sess.apply_gradients(&grads, &mut self.store)?;
        self.store.adam_step(self.lr)?;
        self.store.zero_grads();
        let acc = episode.output.correct as f64 / batch.queries.len() as f64;
        Ok((episode.output.loss, acc))
    }

    /// Evaluation forward without gradient bookkeeping.
    pub fn eval_episode(&self, batch: &EpisodeBatch) -> Result<EpisodeOutput> {
        let mut tape = Tape::new();
        let mut sess = Session::new(false);
        Ok(self.forward_episode(&mut tape, &mut sess, batch)?.output)
    }

    /// Baseline evaluation forward.
    pub fn eval_episode_protonet(
        &self,
        batch: &EpisodeBatch,
        metric: BaselineMetric,
    ) -> Result<EpisodeOutput> {
        let mut tape = Tape::new();
        let mut sess = Session::new(false);
        Ok(self
            .protonet_forward(&mut tape, &mut sess, batch, metric)?
            .output)
    }

    fn fingerprint(&self) -> String {
        format!(
            "{FINGERPRINT_TAG} embed={} guide{}={} stats={} seed={}",
            encoders::EMBED_DIM,
            "_dim",
            sgn::GUIDE_DIM,
            NUM_FEATURES,
            self.seed
        )
    }

    /// Saves all parameters (including the normalizer tensors).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path, &self.fingerprint())
    }

    /// Restores a model from a checkpoint written by [`DupleModel::save`].
    pub fn load(path: &Path, opts: PipelineOpts, lr: f64) -> Result<Self> {
        let (store, fingerprint) = ParamStore::load(path)?;
        if !fingerprint.starts_with(FINGERPRINT_TAG) {
            return Err(Error::Checkpoint {
                path: path.display().to_string(),
                msg: format!("unrecognized fingerprint {fingerprint:?}"),
            });
        }
        let seed = fingerprint
            .rsplit("seed=")
            .next()
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| Error::Checkpoint {
                path: path.display().to_string(),
                msg: format!("fingerprint {fingerprint:?} carries no seed"),
            })?;
        Ok(DupleModel { store, opts, seed, lr })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_sample(rng: &mut impl Rng, len: usize, freq: f64) -> SampleData {
        let fs = 256.0;
        let samples: Vec<f64> = (0..len)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * std::f64::consts::PI * freq * t).sin() + 0.3 * rng.gen::<f64>()
            })
            .collect();
        let spec = crate::featurize::spectrogram(&samples, 32, 16).unwrap();
        let stats = crate::featurize::stat_features(&samples, fs).unwrap().values;
        SampleData { samples, spec, stats }
    }

    fn toy_episode(seed: u64, way: usize, shot: usize, queries_per_class: usize) -> Vec<Vec<SampleData>> {
        // [class][shot + queries_per_class] samples; class c carries a
        // distinct dominant frequency.
        let mut rng = util::seeded_stream(seed, util::STREAM_MISC, 0);
        (0..way)
            .map(|c| {
                (0..shot + queries_per_class)
                    .map(|_| toy_sample(&mut rng, 192, 20.0 + 25.0 * c as f64))
                    .collect()
            })
            .collect()
    }

    fn batch_from(pool: &[Vec<SampleData>], shot: usize) -> EpisodeBatch<'_> {
        let support: Vec<Vec<EmbedInput>> = pool
            .iter()
            .map(|cls| cls[..shot].iter().map(EmbedInput::Raw).collect())
            .collect();
        let queries: Vec<(EmbedInput, usize)> = pool
            .iter()
            .enumerate()
            .flat_map(|(c, cls)| cls[shot..].iter().map(move |s| (EmbedInput::Raw(s), c)))
            .collect();
        EpisodeBatch { support, queries }
    }

    #[test]
    fn untrained_loss_sits_near_ln_way_on_uninformative_classes() {
        // When every class is the same noise distribution, an
        // untrained model has no systematic signal to separate them,
        // its logits are near-uniform, and cross-entropy lands near
        // ln N.  (Structured data can sit below ln N even at
        // initialization: a random conv stack is already a frequency-
        // sensitive filter bank.)
        let mut rng = util::seeded_stream(7, util::STREAM_MISC, 1);
        let pool: Vec<Vec<SampleData>> = (0..3)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let samples: Vec<f64> =
                            (0..192).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                        let spec = crate::featurize::spectrogram(&samples, 32, 16).unwrap();
                        let stats =
                            crate::featurize::stat_features(&samples, 256.0).unwrap().values;
                        SampleData { samples, spec, stats }
                    })
                    .collect()
            })
            .collect();
        let batch = batch_from(&pool, 2);
        for opts in [PipelineOpts::full(), PipelineOpts::baseline()] {
            let model = DupleModel::new(222, opts, DEFAULT_LR).unwrap();
            let out = model.eval_episode(&batch).unwrap();
            let ln_n = (3.0f64).ln();
            assert!(
                (out.loss - ln_n).abs() < 0.5,
                "{} loss {} vs ln 3 = {ln_n}",
                opts.label(),
                out.loss
            );
            assert_eq!(out.logits.len(), 6);
            assert_eq!(out.predictions.len(), 6);
        }
    }

    #[test]
    fn cached_and_raw_evaluation_agree() {
        let pool = toy_episode(3, 2, 2, 1);
        let model = DupleModel::new(9, PipelineOpts::full(), DEFAULT_LR).unwrap();
        let raw_batch = batch_from(&pool, 2);
        let raw_out = model.eval_episode(&raw_batch).unwrap();

        let embedded: Vec<Vec<(Vec<f64>, Vec<f64>)>> = pool
            .iter()
            .map(|cls| cls.iter().map(|s| model.embed_detached(s).unwrap()).collect())
            .collect();
        let support: Vec<Vec<EmbedInput>> = pool
            .iter()
            .zip(&embedded)
            .map(|(cls, embs)| {
                cls[..2]
                    .iter()
                    .zip(embs)
                    .map(|(s, (zt, zf))| EmbedInput::Cached {
                        z_t: zt,
                        z_f: zf,
                        stats: &s.stats,
                    })
                    .collect()
            })
            .collect();
        let queries: Vec<(EmbedInput, usize)> = pool
            .iter()
            .zip(&embedded)
            .enumerate()
            .map(|(c, (cls, embs))| {
                let (zt, zf) = &embs[2];
                (
                    EmbedInput::Cached {
                        z_t: zt,
                        z_f: zf,
                        stats: &cls[2].stats,
                    },
                    c,
                )
            })
            .collect();
        let cached_out = model
            .eval_episode(&EpisodeBatch { support, queries })
            .unwrap();
        for (a, b) in raw_out.logits.iter().flatten().zip(cached_out.logits.iter().flatten()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(raw_out.predictions, cached_out.predictions);
    }

    #[test]
    fn reduction_mode_is_scaled_cosine_on_the_time_view() {
        let pool = toy_episode(11, 3, 2, 1);
        let model = DupleModel::new(4, PipelineOpts::reduction(), DEFAULT_LR).unwrap();
        let batch = batch_from(&pool, 2);
        let out = model.eval_episode(&batch).unwrap();

        // Independent recomputation from detached embeddings.
        let lambda = util::softplus(
            model.store().get("fpm.lambda_raw").unwrap().value.item(),
        );
        for (q, (input, _)) in batch.queries.iter().enumerate() {
            let EmbedInput::Raw(data) = input else { unreachable!() };
            let (zq, _) = model.embed_detached(data).unwrap();
            for (c, members) in pool.iter().enumerate() {
                let mut mean = vec![0.0; encoders::EMBED_DIM];
                for s in &members[..2] {
                    let (zt, _) = model.embed_detached(s).unwrap();
                    for (acc, v) in mean.iter_mut().zip(&zt) {
                        *acc += v * 0.5;
                    }
                }
                let want = lambda * util::cosine(&zq, &mean);
                let got = out.logits[q][c];
                assert!((got - want).abs() < 1e-9, "query {q} class {c}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn ablation_stages_change_the_logits() {
        let pool = toy_episode(21, 3, 3, 1);
        let batch = batch_from(&pool, 3);
        let run = |opts: PipelineOpts| {
            let model = DupleModel::new(222, opts, DEFAULT_LR).unwrap();
            model.eval_episode(&batch).unwrap().logits
        };
        let base = run(PipelineOpts::baseline());
        let with_sgn = run(PipelineOpts {
            use_sgn: true,
            ..PipelineOpts::baseline()
        });
        let with_cdm = run(PipelineOpts {
            use_cdm: true,
            ..PipelineOpts::baseline()
        });
        assert_ne!(base, with_sgn, "guidance must alter scores");
        assert_ne!(base, with_cdm, "decision stage must alter scores");
        // With 3 support per class, the multi-prototype switch changes
        // prototype counts (2 vs 1) and hence scores.
        let with_fpm = run(PipelineOpts {
            use_fpm: true,
            ..PipelineOpts::baseline()
        });
        assert_ne!(base, with_fpm, "multi-prototype must alter scores");
    }

    #[test]
    fn a_training_step_reduces_loss_on_its_own_episode() {
        let pool = toy_episode(33, 2, 2, 2);
        let batch = batch_from(&pool, 2);
        let mut model = DupleModel::new(222, PipelineOpts::full(), 5e-3).unwrap();
        let before = model.eval_episode(&batch).unwrap().loss;
        for _ in 0..10 {
            model.train_step(&batch).unwrap();
        }
        let after = model.eval_episode(&batch).unwrap().loss;
        assert!(
            after < before,
            "ten steps on one episode should overfit it: {before} -> {after}"
        );
    }

    #[test]
    fn protonet_baseline_runs_and_trains() {
        let pool = toy_episode(5, 2, 2, 2);
        let batch = batch_from(&pool, 2);
        let mut model = DupleModel::new(1, PipelineOpts::reduction(), 5e-3).unwrap();
        let before = model
            .eval_episode_protonet(&batch, BaselineMetric::Cosine)
            .unwrap()
            .loss;
        for _ in 0..10 {
            model
                .train_step_protonet(&batch, BaselineMetric::Cosine)
                .unwrap();
        }
        let after = model
            .eval_episode_protonet(&batch, BaselineMetric::Cosine)
            .unwrap()
            .loss;
        assert!(after < before, "{before} -> {after}");

        let euclid = model
            .eval_episode_protonet(&batch, BaselineMetric::SquaredEuclidean)
            .unwrap();
        assert!(euclid.loss.is_finite());
        assert!(euclid.logits.iter().flatten().all(|v| *v <= 0.0));
    }

    #[test]
    fn reduction_logits_match_cosine_protonet_exactly() {
        let pool = toy_episode(17, 3, 2, 2);
        let batch = batch_from(&pool, 2);
        let model = DupleModel::new(2, PipelineOpts::reduction(), DEFAULT_LR).unwrap();
        let a = model.eval_episode(&batch).unwrap();
        let b = model
            .eval_episode_protonet(&batch, BaselineMetric::Cosine)
            .unwrap();
        for (x, y) in a.logits.iter().flatten().zip(b.logits.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
        assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn checkpoint_round_trip_preserves_behavior() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let pool = toy_episode(8, 2, 2, 1);
        let batch = batch_from(&pool, 2);
        let mut model = DupleModel::new(222, PipelineOpts::full(), DEFAULT_LR).unwrap();
        let norm = StatNormalizer {
            mean: (0..NUM_FEATURES).map(|i| i as f64 * 0.1).collect(),
            std: vec![2.0; NUM_FEATURES],
        };
        model.set_normalizer(&norm).unwrap();
        model.train_step(&batch).unwrap();
        let want = model.eval_episode(&batch).unwrap();
        model.save(&path).unwrap();

        let restored = DupleModel::load(&path, PipelineOpts::full(), DEFAULT_LR).unwrap();
        assert_eq!(restored.seed(), 222);
        let got = restored.eval_episode(&batch).unwrap();
        assert_eq!(want.logits, got.logits);
        let rn = restored.normalizer().unwrap();
        assert_eq!(rn.mean, norm.mean);
        assert_eq!(rn.std, norm.std);
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        // Gradient check through every stage at once, probing one
        // tensor per stage on a small episode.
        let pool = toy_episode(13, 2, 2, 1);
        let batch = batch_from(&pool, 2);
        let model = DupleModel::new(3, PipelineOpts::full(), DEFAULT_LR).unwrap();
        for name in ["enc_t.conv1.w", "sgn.guide.w", "fpm.lambda_raw", "cdm.h.l1.w"] {
            let value = model.store().get(name).unwrap().value.clone();
            let stride = (value.len() / 6).max(1);
            let coords: Vec<usize> = (0..value.len()).step_by(stride).collect();
            let rep = crate::diffcore::grad_check_coords(
                |tape, probe| {
                    let mut sess = Session::new(true);
                    sess.set_override(name, probe);
                    Ok(model.forward_episode(tape, &mut sess, &batch)?.loss)
                },
                &value,
                1e-5,
                &coords,
            )
            .unwrap();
            assert!(rep.max_rel_err < 1e-6, "{name}: {rep:?}");
        }
    }

    #[test]
    fn label_strings_cover_the_grid() {
        assert_eq!(PipelineOpts::full().label(), "full");
        assert_eq!(PipelineOpts::baseline().label(), "baseline");
        let fpm_only = PipelineOpts {
            use_fpm: true,
            ..PipelineOpts::baseline()
        };
        assert_eq!(fpm_only.label(), "+fpm");
        assert_eq!(PipelineOpts::reduction().label(), "baseline(alpha=1,0)");
    }
}
