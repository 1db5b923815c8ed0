//! Meta-training on source deployments and evaluation on a held-out
//! target deployment.
//!
//! Training never sees the target domain: each episode picks one of
//! the *source* domains as a pseudo-target for its queries and draws
//! support from the remaining sources, so the model practices the
//! domain transfer it will face at test time.  With a single source
//! the episode splits that domain into disjoint support and query
//! halves instead.

use crate::episodic::dataset::{Dataset, EmbeddingCache};
use crate::episodic::metrics::{report_from, ConfusionMatrix, MetricsReport};
use crate::episodic::sampler::{sample_episode, EpisodeSpec, SampledEpisode};
use crate::error::{Error, Result};
use crate::model::{BaselineMetric, DupleModel, EmbedInput, EpisodeBatch};
use crate::util;

/// Episode shape plus run length and the master seed that derives the
/// per-episode RNG streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Protocol {
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub seed: u64,
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Pseudo-target rotation: episode `e` quizzes on `sources[e % n]`
/// with support from the other sources, or splits the single source
/// when there is only one.
fn rotation(sources: &[String], episode: usize) -> (Vec<String>, &str) {
    if sources.len() == 1 {
        return (vec![sources[0].clone()], sources[0].as_str());
    }
    let t = episode % sources.len();
    let support = sources
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != t)
        .map(|(_, d)| d.clone())
        .collect();
    (support, sources[t].as_str())
}

fn raw_batch<'a>(ds: &'a Dataset, ep: &SampledEpisode) -> EpisodeBatch<'a> {
    EpisodeBatch {
        support: ep
            .support
            .iter()
            .map(|ids| {
                ids.iter()
                    .map(|&i| EmbedInput::Raw(&ds.samples[i].data))
                    .collect()
            })
            .collect(),
        queries: ep
            .queries
            .iter()
            .map(|&(i, c)| (EmbedInput::Raw(&ds.samples[i].data), c))
            .collect(),
    }
}

fn cached_batch<'a>(
    ds: &'a Dataset,
    cache: &'a EmbeddingCache,
    ep: &SampledEpisode,
) -> EpisodeBatch<'a> {
    EpisodeBatch {
        support: ep
            .support
            .iter()
            .map(|ids| ids.iter().map(|&i| cache.input(ds, i)).collect())
            .collect(),
        queries: ep
            .queries
            .iter()
            .map(|&(i, c)| (cache.input(ds, i), c))
            .collect(),
    }
}

/// Meta-trains `model` on the source domains of `ds` and returns the
/// per-episode training log.  `baseline` switches the objective to the
/// prototypical-network forward with the given metric.
///
/// The feature normalizer is fit on the source domains first and
/// stored in the model, so a reloaded checkpoint applies the same
/// statistics.
pub fn meta_train(
    model: &mut DupleModel,
    ds: &Dataset,
    sources: &[String],
    protocol: &Protocol,
    baseline: Option<BaselineMetric>,
) -> Result<Vec<TrainRecord>> {
    protocol.spec.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("meta_train needs at least one source domain".into()));
    }
    model.set_normalizer(&ds.fit_normalizer(sources)?)?;

    let mut records = Vec::with_capacity(protocol.episodes);
    for e in 0..protocol.episodes {
        let (support_domains, query_domain) = rotation(sources, e);
        let mut rng = util::seeded_stream(protocol.seed, util::STREAM_TRAIN_EPISODE, e as u64);
        let ep = sample_episode(ds, protocol.spec, &support_domains, query_domain, &mut rng)?;
        for &i in ep.support.iter().flatten().chain(ep.queries.iter().map(|(i, _)| i)) {
            debug_assert!(
                sources.contains(&ds.samples[i].domain),
                "training episode drew a sample outside the source domains"
            );
        }
        let batch = raw_batch(ds, &ep);
        let (loss, accuracy) = match baseline {
            None => model.train_step(&batch),
            Some(metric) => model.train_step_protonet(&batch, metric),
        }
        .map_err(|err| match err {
            Error::NonFinite(what) => {
                Error::NonFinite(format!("{what} at training episode {e}"))
            }
            other => other,
        })?;
        records.push(TrainRecord {
            episode: e,
            loss,
            accuracy,
        });
    }
    Ok(records)
}

/// Evaluates `model` over `protocol.episodes` episodes whose support
/// comes from `sources` and whose queries come from the held-out
/// `target`, and aggregates one confusion matrix over the full class
/// vocabulary of `ds`.
///
/// Embeddings are computed once per sample up front; episode forward
/// passes then start from the cached vectors.  The model's stored
/// normalizer is used as-is — evaluation must not refit statistics.
pub fn evaluate(
    model: &DupleModel,
    ds: &Dataset,
    sources: &[String],
    target: &str,
    protocol: &Protocol,
    baseline: Option<BaselineMetric>,
) -> Result<MetricsReport> {
    evaluate_with_workers(model, ds, sources, target, protocol, baseline, 1)
}

/// [`evaluate`] with episodes fanned out over `workers` threads
/// against the immutable model snapshot.  Each episode's RNG stream
/// depends only on the episode index and confusion counts merge by
/// summation, so every worker count yields the identical report.
pub fn evaluate_with_workers(
    model: &DupleModel,
    ds: &Dataset,
    sources: &[String],
    target: &str,
    protocol: &Protocol,
    baseline: Option<BaselineMetric>,
    workers: usize,
) -> Result<MetricsReport> {
    protocol.spec.validate()?;
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    if sources.len() > 1 && sources.iter().any(|d| d == target) {
        return Err(Error::Config(format!(
            "target domain {target:?} is listed among the sources"
        )));
    }
    let cache = EmbeddingCache::build(model, ds)?;
    let run_range = |episodes: std::ops::Range<usize>| -> Result<ConfusionMatrix> {
        let mut confusion = ConfusionMatrix::new(ds.classes.clone());
        for e in episodes {
            let mut rng = util::seeded_stream(protocol.seed, util::STREAM_EVAL_EPISODE, e as u64);
            let ep = sample_episode(ds, protocol.spec, sources, target, &mut rng)?;
            let batch = cached_batch(ds, &cache, &ep);
            let out = match baseline {
                None => model.eval_episode(&batch)?,
                Some(metric) => model.eval_episode_protonet(&batch, metric)?,
            };
            for (q, &(_, local)) in ep.queries.iter().enumerate() {
                confusion.record(ep.classes[local], ep.classes[out.predictions[q]]);
            }
        }
        Ok(confusion)
    };

    let confusion = if workers == 1 {
        run_range(0..protocol.episodes)?
    } else {
        let chunk = protocol.episodes.div_ceil(workers);
        let parts: Vec<Result<ConfusionMatrix>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let lo = (w * chunk).min(protocol.episodes);
                    let hi = ((w + 1) * chunk).min(protocol.episodes);
                    let run_range = &run_range;
                    scope.spawn(move || run_range(lo..hi))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut total = ConfusionMatrix::new(ds.classes.clone());
        for part in parts {
            total.merge(&part?)?;
        }
        total
    };
    Ok(report_from(confusion, protocol.episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::model::{PipelineOpts, DEFAULT_LR};
    use crate::testutil::tiny_dataset;

    fn sites(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rotation_cycles_the_pseudo_target_through_the_sources() {
        let sources = sites(&["a", "b", "c"]);
        let per_episode: Vec<(Vec<String>, &str)> =
            (0..4).map(|e| rotation(&sources, e)).collect();
        assert_eq!(per_episode[0], (sites(&["b", "c"]), "a"));
        assert_eq!(per_episode[1], (sites(&["a", "c"]), "b"));
        assert_eq!(per_episode[2], (sites(&["a", "b"]), "c"));
        assert_eq!(per_episode[3], (sites(&["b", "c"]), "a"));

        let single = sites(&["only"]);
        assert_eq!(rotation(&single, 7), (sites(&["only"]), "only"));
    }

    #[test]
    fn full_pipeline_trains_and_evaluates_on_the_tiny_corpus() {
        let ds = tiny_dataset(5, 4);
        let sources = sites(&["siteA"]);
        let mut model = DupleModel::new(7, PipelineOpts::full(), DEFAULT_LR).unwrap();
        let train = Protocol {
            spec: EpisodeSpec {
                way: 2,
                shot: 2,
                query: 2,
            },
            episodes: 4,
            seed: 31,
        };
        let records = meta_train(&mut model, &ds, &sources, &train, None).unwrap();
        assert_eq!(records.len(), 4);
        for (e, r) in records.iter().enumerate() {
            assert_eq!(r.episode, e);
            assert!(r.loss.is_finite());
            assert!((0.0..=1.0).contains(&r.accuracy));
        }

        let eval = Protocol {
            episodes: 5,
            ..train
        };
        let report = evaluate(&model, &ds, &sources, "siteB", &eval, None).unwrap();
        assert_eq!(report.episodes, 5);
        // Class-balanced queries: 5 episodes x 2 way x 2 query each.
        assert_eq!(report.confusion.total(), 5 * 2 * 2);
        assert!((0.0..=1.0).contains(&report.accuracy));
        assert!(
            (report.accuracy - report.macro_recall).abs() < 1e-12,
            "balanced queries make accuracy the macro recall"
        );
    }

    #[test]
    fn baseline_training_reduces_the_loss() {
        let ds = tiny_dataset(6, 6);
        let sources = sites(&["siteA", "siteB"]);
        let mut model = DupleModel::new(3, PipelineOpts::baseline(), DEFAULT_LR).unwrap();
        let protocol = Protocol {
            spec: EpisodeSpec {
                way: 2,
                shot: 2,
                query: 3,
            },
            episodes: 40,
            seed: 11,
        };
        let records =
            meta_train(&mut model, &ds, &sources, &protocol, Some(BaselineMetric::Cosine))
                .unwrap();
        let mean = |rs: &[TrainRecord]| {
            rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64
        };
        let early = mean(&records[..10]);
        let late = mean(&records[30..]);
        assert!(
            late < early,
            "loss should trend down on a separable corpus: early {early:.4} late {late:.4}"
        );
    }

    #[test]
    fn identical_protocols_reproduce_identical_runs() {
        let ds = tiny_dataset(7, 4);
        let sources = sites(&["siteA"]);
        let protocol = Protocol {
            spec: EpisodeSpec {
                way: 2,
                shot: 1,
                query: 2,
            },
            episodes: 3,
            seed: 42,
        };
        let run = || {
            let mut model = DupleModel::new(11, PipelineOpts::full(), DEFAULT_LR).unwrap();
            let records = meta_train(&mut model, &ds, &sources, &protocol, None).unwrap();
            let report = evaluate(&model, &ds, &sources, "siteB", &protocol, None).unwrap();
            (records, serde_json::to_string(&report).unwrap())
        };
        let (rec_a, rep_a) = run();
        let (rec_b, rep_b) = run();
        let bits =
            |rs: &[TrainRecord]| rs.iter().map(|r| r.loss.to_bits()).collect::<Vec<u64>>();
        assert_eq!(bits(&rec_a), bits(&rec_b), "losses must match bit for bit");
        assert_eq!(rep_a, rep_b, "metric documents must match byte for byte");
    }

    #[test]
    fn normalizer_is_fit_on_the_sources_only() {
        let ds = tiny_dataset(8, 4);
        let sources = sites(&["siteA"]);
        let mut model = DupleModel::new(2, PipelineOpts::baseline(), DEFAULT_LR).unwrap();
        let protocol = Protocol {
            spec: EpisodeSpec {
                way: 2,
                shot: 1,
                query: 1,
            },
            episodes: 2,
            seed: 1,
        };
        meta_train(&mut model, &ds, &sources, &protocol, Some(BaselineMetric::Cosine)).unwrap();

        let stored = model.normalizer().unwrap();
        let oracle = ds.fit_normalizer(&sources).unwrap();
        assert_eq!(stored.mean, oracle.mean);
        assert_eq!(stored.std, oracle.std);

        let both = ds.fit_normalizer(&sites(&["siteA", "siteB"])).unwrap();
        assert_ne!(stored.mean, both.mean, "target domain must not leak in");
    }

    #[test]
    fn non_finite_losses_name_the_episode() {
        let ds = tiny_dataset(9, 4);
        let sources = sites(&["siteA"]);
        let mut model = DupleModel::new(4, PipelineOpts::baseline(), DEFAULT_LR).unwrap();
        // Poison the matcher temperature rather than a convolution
        // weight: relu is a `max` and IEEE `max` drops NaN operands,
        // so NaN conv weights would silently turn into zero
        // activations instead of a non-finite loss.
        let poisoned = {
            let current = &model.store().get("fpm.lambda_raw").unwrap().value;
            Tensor::new(
                current.shape().to_vec(),
                vec![f64::NAN; current.data().len()],
            )
        };
        model.store_mut().set_value("fpm.lambda_raw", poisoned).unwrap();
        let protocol = Protocol {
            spec: EpisodeSpec {
                way: 2,
                shot: 1,
                query: 1,
            },
            episodes: 1,
            seed: 5,
        };
        let err = meta_train(
            &mut model,
            &ds,
            &sources,
            &protocol,
            Some(BaselineMetric::Cosine),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(err.to_string().contains("episode 0"), "{err}");
    }

    #[test]
    fn worker_count_does_not_change_the_report() {
        let ds = tiny_dataset(12, 5);
        let sources = sites(&["siteA"]);
        // Untrained model: predictions are arbitrary but deterministic,
        // which is all the equality check needs.
        let model = DupleModel::new(13, PipelineOpts::full(), DEFAULT_LR).unwrap();
        let protocol = Protocol {
            spec: EpisodeSpec {
                way: 2,
                shot: 2,
                query: 2,
            },
            // Not divisible by 3: the last worker gets a short chunk.
            episodes: 7,
            seed: 21,
        };
        let reports: Vec<String> = [1usize, 3, 16]
            .iter()
            .map(|&w| {
                let r =
                    evaluate_with_workers(&model, &ds, &sources, "siteB", &protocol, None, w)
                        .unwrap();
                serde_json::to_string(&r).unwrap()
            })
            .collect();
        assert_eq!(reports[0], reports[1]);
        assert_eq!(reports[0], reports[2], "more workers than episodes");
        assert!(matches!(
            evaluate_with_workers(&model, &ds, &sources, "siteB", &protocol, None, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn evaluate_rejects_a_target_listed_among_sources() {
        let ds = tiny_dataset(10, 3);
        let model = DupleModel::new(6, PipelineOpts::baseline(), DEFAULT_LR).unwrap();
        let protocol = Protocol {
            spec: EpisodeSpec {
                way: 2,
                shot: 1,
                query: 1,
            },
            episodes: 1,
            seed: 2,
        };
        let err = evaluate(
            &model,
            &ds,
            &sites(&["siteA", "siteB"]),
            "siteA",
            &protocol,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
