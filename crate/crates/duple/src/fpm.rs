//! Flexible prototype matching: adaptive multi-prototype construction
//! per class and temperature-scaled cosine evidence.
//!
//! Support embeddings of a class are grouped into `K_c = min(3,
//! ⌈n_c/2⌉)` clusters; each cluster mean is one prototype.  Clustering
//! happens on detached values — gradients flow through the cluster
//! means into the member embeddings, but the assignment itself is
//! treated as a constant of the episode.  A query's class score is a
//! soft maximum (log-sum-exp) over its prototype similarities,
//! temperature-scaled by the learned `λ` and, when guidance is active,
//! the per-query modulation `β`.

use crate::diffcore::{ParamStore, Session, Tape, Var};
use crate::error::{Error, Result};
use crate::util;

/// Upper bound on prototypes per class.
pub const MAX_PROTOTYPES: usize = 3;
/// Initial value of the matching temperature `λ = softplus(λ_raw)`.
pub const LAMBDA_INIT: f64 = 10.0;
/// Member counts up to this bound are clustered by exhaustive search
/// (globally optimal); larger sets fall back to seeded Lloyd iteration.
pub const EXHAUSTIVE_LIMIT: usize = 10;

/// Number of prototypes for a class with `n` support members:
/// `min(3, ⌈n/2⌉)`.
pub fn choose_k(n: usize) -> usize {
    assert!(n > 0, "choose_k on an empty class");
    MAX_PROTOTYPES.min(n.div_ceil(2))
}

/// Registers the matcher's single parameter `fpm.lambda_raw`.
pub fn register_fpm(store: &mut ParamStore) -> Result<()> {
    store.add_scalar("fpm.lambda_raw", util::softplus_inv(LAMBDA_INIT))
}

/// Within-cluster sum of squared distances for a candidate grouping.
pub fn clustering_objective(vectors: &[&[f64]], clusters: &[Vec<usize>]) -> f64 {
    let dim = vectors[0].len();
    let mut total = 0.0;
    for members in clusters {
        if members.is_empty() {
            continue;
        }
        let mut mean = vec![0.0; dim];
        for &m in members {
            for (acc, &x) in mean.iter_mut().zip(vectors[m]) {
                *acc += x;
            }
        }
        let inv = 1.0 / members.len() as f64;
        for acc in mean.iter_mut() {
            *acc *= inv;
        }
        for &m in members {
            total += vectors[m]
                .iter()
                .zip(&mean)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>();
        }
    }
    total
}

/// Groups `vectors` into exactly `k` non-empty clusters, minimizing the
/// within-cluster sum of squared distances.  Deterministic in the
/// member order; requires `1 ≤ k ≤ n`.
///
/// Small sets (`n ≤ EXHAUSTIVE_LIMIT`) are solved exactly by
/// enumerating set partitions; in the few-shot regime this is the only
/// path that runs.  Larger sets use deterministic maximin seeding (the
/// first seed is the member farthest from the overall mean, each next
/// seed maximizes its minimum distance to the chosen seeds, ties to the
/// lowest index) followed by Lloyd iteration.
pub fn cluster_members(vectors: &[&[f64]], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = vectors.len();
    if n == 0 || k == 0 || k > n {
        return Err(Error::Data(format!(
            "cannot cluster {n} members into {k} groups"
        )));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Data("cluster members differ in dimension".into()));
    }
    if k == 1 {
        return Ok(vec![(0..n).collect()]);
    }
    if n <= EXHAUSTIVE_LIMIT {
        Ok(cluster_exhaustive(vectors, k))
    } else {
        Ok(cluster_lloyd(vectors, k))
    }
}

/// Exact minimum-SSE partition into `k` non-empty blocks by canonical
/// enumeration (element 0 always opens block 0, so each partition is
/// visited once).
fn cluster_exhaustive(vectors: &[&[f64]], k: usize) -> Vec<Vec<usize>> {
    let n = vectors.len();
    let mut assign = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;

    fn recurse(
        idx: usize,
        used: usize,
        n: usize,
        k: usize,
        assign: &mut Vec<usize>,
        vectors: &[&[f64]],
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if n - idx < k - used {
            return; // not enough elements left to open the missing blocks
        }
        if idx == n {
            if used == k {
                let clusters = to_clusters(assign, k);
                let obj = clustering_objective(vectors, &clusters);
                if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                    *best = Some((obj, assign.clone()));
                }
            }
            return;
        }
        for block in 0..used.min(k) {
            assign[idx] = block;
            recurse(idx + 1, used, n, k, assign, vectors, best);
        }
        if used < k {
            assign[idx] = used;
            recurse(idx + 1, used + 1, n, k, assign, vectors, best);
        }
    }

    recurse(0, 0, n, k, &mut assign, vectors, &mut best);
    let (_, winner) = best.expect("at least one partition exists when k <= n");
    to_clusters(&winner, k)
}

fn to_clusters(assign: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut clusters = vec![Vec::new(); k];
    for (i, &a) in assign.iter().enumerate() {
        clusters[a].push(i);
    }
    clusters
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cluster_lloyd(vectors: &[&[f64]], k: usize) -> Vec<Vec<usize>> {
    let n = vectors.len();
    let dim = vectors[0].len();

    // Maximin seeding from the member farthest from the overall mean.
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (acc, &x) in mean.iter_mut().zip(*v) {
            *acc += x;
        }
    }
    for acc in mean.iter_mut() {
        *acc /= n as f64;
    }
    let mut seeds = Vec::with_capacity(k);
    let first = (0..n)
        .max_by(|&a, &b| {
            sq_dist(vectors[a], &mean)
                .partial_cmp(&sq_dist(vectors[b], &mean))
                .unwrap()
                .then(b.cmp(&a)) // ties to the lowest index
        })
        .unwrap();
    seeds.push(first);
    while seeds.len() < k {
        let next = (0..n)
            .filter(|i| !seeds.contains(i))
            .max_by(|&a, &b| {
                let da = seeds.iter().map(|&s| sq_dist(vectors[a], vectors[s])).fold(f64::INFINITY, f64::min);
                let db = seeds.iter().map(|&s| sq_dist(vectors[b], vectors[s])).fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        seeds.push(next);
    }
    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&s| vectors[s].to_vec()).collect();

    let mut assign = vec![0usize; n];
    for _ in 0..200 {
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(v, &centers[a])
                        .partial_cmp(&sq_dist(v, &centers[b]))
                        .unwrap()
                        .then(a.cmp(&b))
                })
                .unwrap();
            if assign[i] != nearest {
                assign[i] = nearest;
                changed = true;
            }
        }
        // Reseed empty clusters with the member farthest from its
        // current center (lowest index on ties, skipping singletons so
        // no other cluster is emptied in turn).
        for c in 0..k {
            if assign.iter().any(|&a| a == c) {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| assign.iter().filter(|&&a| a == assign[i]).count() > 1)
                .max_by(|&a, &b| {
                    sq_dist(vectors[a], &centers[assign[a]])
                        .partial_cmp(&sq_dist(vectors[b], &centers[assign[b]]))
                        .unwrap()
                        .then(b.cmp(&a))
                })
                .expect("k <= n leaves at least one multi-member cluster");
            assign[donor] = c;
            changed = true;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            center.fill(0.0);
            for &m in &members {
                for (acc, &x) in center.iter_mut().zip(vectors[m]) {
                    *acc += x;
                }
            }
            let inv = 1.0 / members.len() as f64;
            for acc in center.iter_mut() {
                *acc *= inv;
            }
        }
        if !changed {
            break;
        }
    }
    to_clusters(&assign, k)
}

/// Builds the `K = choose_k(n)` prototypes of one class from its
/// support-embedding nodes: clusters the detached values, then takes
/// tape-level means so gradients reach every member.
pub fn class_prototypes(tape: &mut Tape, members: &[Var], k: usize) -> Result<Vec<Var>> {
    if members.is_empty() {
        return Err(Error::Data("class_prototypes on an empty class".into()));
    }
    let detached: Vec<Vec<f64>> = members.iter().map(|&m| tape.value(m).data().to_vec()).collect();
    let views: Vec<&[f64]> = detached.iter().map(|v| v.as_slice()).collect();
    let clusters = cluster_members(&views, k)?;
    clusters
        .iter()
        .map(|cluster| {
            let vars: Vec<Var> = cluster.iter().map(|&i| members[i]).collect();
            tape.mean_vecs(&vars)
        })
        .collect()
}

/// Class evidence for a query embedding: `LSE_k(λ·β·cos(z_q, p_k))`
/// with the learned temperature `λ = softplus(fpm.lambda_raw)` and an
/// optional per-query modulation `β`.
pub fn class_score(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    zq: Var,
    protos: &[Var],
    beta: Option<Var>,
) -> Result<Var> {
    if protos.is_empty() {
        return Err(Error::Data("class_score with no prototypes".into()));
    }
    let sims: Vec<Var> = protos
        .iter()
        .map(|&p| tape.cosine(zq, p))
        .collect::<Result<_>>()?;
    let sims = tape.concat(&sims)?;
    let lam_raw = sess.param(tape, store, "fpm.lambda_raw")?;
    let lam = tape.softplus(lam_raw);
    let temp = match beta {
        Some(b) => tape.mul(lam, b)?,
        None => lam,
    };
    let scaled = tape.mul(sims, temp)?;
    Ok(tape.log_sum_exp(scaled))
}
