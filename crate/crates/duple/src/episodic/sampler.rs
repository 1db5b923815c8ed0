//! Episode composition: eligibility filtering and deterministic
//! sampling of N-way K-shot episodes with class-balanced queries.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::episodic::dataset::Dataset;
use crate::error::{Error, Result};

/// Episode shape: `way` classes, `shot` support and `query` query
/// samples per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Config(format!(
                "way {} must be at least 2",
                self.way
            )));
        }
        if self.shot == 0 || self.query == 0 {
            return Err(Error::Config("shot and query must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled episode, as dataset indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledEpisode {
    /// Global class ids (into `Dataset::classes`), in draw order;
    /// episode-local class `c` is `classes[c]`.
    pub classes: Vec<usize>,
    /// `support[c]` holds class `c`'s support sample ids.
    pub support: Vec<Vec<usize>>,
    /// `(sample id, episode-local class)` per query, class-major.
    pub queries: Vec<(usize, usize)>,
}

/// Classes that can populate a legal episode: at least `shot` samples
/// across the support domains and `query` in the query domain — or
/// `shot + query` in the single domain when support and query pools
/// coincide.  Returns ascending global class ids.
pub fn eligible_classes(
    ds: &Dataset,
    support_domains: &[String],
    query_domain: &str,
    shot: usize,
    query: usize,
) -> Vec<usize> {
    let same = support_domains.len() == 1 && support_domains[0] == query_domain;
    (0..ds.classes.len())
        .filter(|&ci| {
            let class = &ds.classes[ci];
            let n_tgt = ds.indices(query_domain, class).len();
            if same {
                n_tgt >= shot + query
            } else {
                let n_src: usize = support_domains
                    .iter()
                    .map(|d| ds.indices(d, class).len())
                    .sum();
                n_src >= shot && n_tgt >= query
            }
        })
        .collect()
}

/// First `k` entries of a partial Fisher–Yates shuffle; deterministic
/// given the pool order and the RNG state.
fn draw(pool: &mut Vec<usize>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = pool.len();
    debug_assert!(k <= n);
    for i in 0..k {
        let j = i + rng.gen_range(0..n - i);
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

/// Samples one episode.  Support comes from `support_domains`, queries
/// from `query_domain`; when those coincide (single-domain training)
/// queries are drawn from the samples left after the support draw, so
/// no sample appears on both sides.
///
/// Draw order is fixed: classes first (from the ascending eligible
/// list), then per chosen class its support and then its queries.
pub fn sample_episode(
    ds: &Dataset,
    spec: EpisodeSpec,
    support_domains: &[String],
    query_domain: &str,
    rng: &mut ChaCha8Rng,
) -> Result<SampledEpisode> {
    spec.validate()?;
    if support_domains.is_empty() {
        return Err(Error::Config("no support domains given".into()));
    }
    for i in 1..support_domains.len() {
        if support_domains[..i].contains(&support_domains[i]) {
            return Err(Error::Config(format!(
                "support domain {:?} listed twice",
                support_domains[i]
            )));
        }
    }
    let same = support_domains.len() == 1 && support_domains[0] == query_domain;
    if !same && support_domains.iter().any(|d| d == query_domain) {
        return Err(Error::Config(format!(
            "query domain {query_domain:?} overlaps the support domains"
        )));
    }
    for d in support_domains.iter().chain(std::iter::once(&query_domain.to_string())) {
        if !ds.domains.contains(d) {
            return Err(Error::Config(format!("domain {d:?} not present in the dataset")));
        }
    }

    let eligible = eligible_classes(ds, support_domains, query_domain, spec.shot, spec.query);
    if eligible.len() < spec.way {
        return Err(Error::Data(format!(
            "episode needs {} classes but only {} are eligible \
             (shot {} from {:?}, query {} from {:?})",
            spec.way,
            eligible.len(),
            spec.shot,
            support_domains,
            spec.query,
            query_domain
        )));
    }

    let mut class_pool = eligible;
    let classes = draw(&mut class_pool, spec.way, rng);

    let mut support = Vec::with_capacity(spec.way);
    let mut queries = Vec::with_capacity(spec.way * spec.query);
    for (local, &ci) in classes.iter().enumerate() {
        let class = &ds.classes[ci];
        let mut src_pool: Vec<usize> = support_domains
            .iter()
            .flat_map(|d| ds.indices(d, class).iter().copied())
            .collect();
        src_pool.sort_unstable();
        let chosen = draw(&mut src_pool, spec.shot, rng);

        let mut tgt_pool: Vec<usize> = ds
            .indices(query_domain, class)
            .iter()
            .copied()
            .filter(|i| !chosen.contains(i))
            .collect();
        let q = draw(&mut tgt_pool, spec.query, rng);
        queries.extend(q.into_iter().map(|i| (i, local)));
        support.push(chosen);
    }

    Ok(SampledEpisode {
        classes,
        support,
        queries,
    })
}
