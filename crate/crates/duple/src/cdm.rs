//! Collaborative decision across the two signal views: query-aware
//! attention over each class's prototypes, aggregation into a
//! representative prototype per view, a relation vector measuring
//! time/frequency consistency, and the final fused logit.
//!
//! Per query the matcher builds one key per view from the query's
//! embedding, its guidance vector, and order-free summaries of both
//! views' initial logits.  The key attends over a class's prototypes
//! with a learned temperature; the attended prototypes from both views
//! feed a relation MLP whose output, together with the guidance
//! weights, drives a small correction head `h` added on top of the
//! guidance-weighted blend of the per-view scores.

use crate::diffcore::{ParamStore, Session, Tape, Tensor, Var};
use crate::encoders::EMBED_DIM;
use crate::error::{Error, Result};
use crate::sgn::GUIDE_DIM;
use crate::util;

/// Length of a per-view logit summary: max, mean, softmax entropy.
pub const SUMMARY_DIM: usize = 3;
/// Width of a key-projection input: `[z; g; u_t; u_f]`.
pub const KEY_INPUT_DIM: usize = EMBED_DIM + GUIDE_DIM + 2 * SUMMARY_DIM;
/// Hidden width of the relation MLP.
pub const RELATION_HIDDEN: usize = 64;
/// Width of a relation vector `v_c`.
pub const RELATION_DIM: usize = 32;
/// Width of the correction head's input `[v_c; α; κ]`.
pub const FUSION_INPUT_DIM: usize = RELATION_DIM + 4;
/// Hidden width of the correction head.
pub const FUSION_HIDDEN: usize = 16;
/// Initial value of the attention temperature `τ = softplus(τ_raw)`.
pub const TAU_INIT: f64 = 5.0;

/// Which signal view a key projection belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Time,
    Freq,
}

impl Branch {
    fn key_names(self) -> (&'static str, &'static str) {
        match self {
            Branch::Time => ("cdm.key_t.w", "cdm.key_t.b"),
            Branch::Freq => ("cdm.key_f.w", "cdm.key_f.b"),
        }
    }
}

/// Registers all matcher parameters under the `cdm.` prefix.  Weights
/// are Glorot-uniform; biases start at zero; the temperature starts at
/// [`TAU_INIT`].
pub fn register_cdm(store: &mut ParamStore, seed: u64) -> Result<()> {
    store.add_scalar("cdm.tau_raw", util::softplus_inv(TAU_INIT))?;
    for branch in [Branch::Time, Branch::Freq] {
        let (w, b) = branch.key_names();
        store.add_glorot(w, vec![EMBED_DIM, KEY_INPUT_DIM], KEY_INPUT_DIM, EMBED_DIM, seed)?;
        store.add_tensor(b, Tensor::zeros(vec![EMBED_DIM]), true)?;
    }
    store.add_glorot(
        "cdm.rel.l1.w",
        vec![RELATION_HIDDEN, 2 * EMBED_DIM],
        2 * EMBED_DIM,
        RELATION_HIDDEN,
        seed,
    )?;
    store.add_tensor("cdm.rel.l1.b", Tensor::zeros(vec![RELATION_HIDDEN]), true)?;
    store.add_glorot(
        "cdm.rel.l2.w",
        vec![RELATION_DIM, RELATION_HIDDEN],
        RELATION_HIDDEN,
        RELATION_DIM,
        seed,
    )?;
    store.add_tensor("cdm.rel.l2.b", Tensor::zeros(vec![RELATION_DIM]), true)?;
    store.add_glorot(
        "cdm.h.l1.w",
        vec![FUSION_HIDDEN, FUSION_INPUT_DIM],
        FUSION_INPUT_DIM,
        FUSION_HIDDEN,
        seed,
    )?;
    store.add_tensor("cdm.h.l1.b", Tensor::zeros(vec![FUSION_HIDDEN]), true)?;
    store.add_glorot("cdm.h.l2.w", vec![1, FUSION_HIDDEN], FUSION_HIDDEN, 1, seed)?;
    store.add_tensor("cdm.h.l2.b", Tensor::zeros(vec![1]), true)?;
    Ok(())
}

/// Order-free summary of one view's per-class logits: `[max, mean,
/// entropy of the softmax]`.  The entropy is computed as
/// `LSE(x) − ⟨softmax(x), x⟩`, which never touches `ln 0` even when a
/// softmax weight underflows.  The summary's width is fixed, so keys
/// stay valid for any way count.
pub fn logit_summary(tape: &mut Tape, logits: Var) -> Result<Var> {
    if tape.value(logits).shape().len() != 1 || tape.value(logits).len() == 0 {
        return Err(Error::shape(
            "logit_summary",
            format!("nonempty vector required, got {:?}", tape.value(logits).shape()),
        ));
    }
    let mx = tape.max_elems(logits);
    let mean = tape.mean_elems(logits);
    let lse = tape.log_sum_exp(logits);
    let probs = tape.softmax(logits);
    let px = tape.dot(probs, logits)?;
    let entropy = tape.sub(lse, px)?;
    tape.concat(&[mx, mean, entropy])
}

/// Projects a query into one view's key space:
/// `tanh(W·[z; g; u_t; u_f] + b)`.  Both views' logit summaries enter
/// both keys, so each view can see how confident the other one is.
pub fn build_key(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    branch: Branch,
    z: Var,
    g: Var,
    u_t: Var,
    u_f: Var,
) -> Result<Var> {
    let input = tape.concat(&[z, g, u_t, u_f])?;
    if tape.value(input).len() != KEY_INPUT_DIM {
        return Err(Error::shape(
            "build_key",
            format!(
                "expected [z;g;u_t;u_f] of width {KEY_INPUT_DIM}, got {}",
                tape.value(input).len()
            ),
        ));
    }
    let (wn, bn) = branch.key_names();
    let w = sess.param(tape, store, wn)?;
    let b = sess.param(tape, store, bn)?;
    let lin = tape.linear(w, input, b)?;
    Ok(tape.tanh(lin))
}

/// Attention weights of a key over a class's prototypes:
/// `softmax_k(τ·cos(key, p_k))` with the learned temperature
/// `τ = softplus(cdm.tau_raw)`.  A zero key yields cosine 0 against
/// every prototype and therefore uniform weights.
pub fn attend(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    key: Var,
    protos: &[Var],
) -> Result<Var> {
    if protos.is_empty() {
        return Err(Error::Data("attend with no prototypes".into()));
    }
    let sims: Vec<Var> = protos
        .iter()
        .map(|&p| tape.cosine(key, p))
        .collect::<Result<_>>()?;
    let sims = tape.concat(&sims)?;
    let tau_raw = sess.param(tape, store, "cdm.tau_raw")?;
    let tau = tape.softplus(tau_raw);
    let scaled = tape.mul(sims, tau)?;
    Ok(tape.softmax(scaled))
}

/// Convex combination of the prototypes under attention weights.
pub fn aggregate(tape: &mut Tape, weights: Var, protos: &[Var]) -> Result<Var> {
    tape.weighted_sum(weights, protos)
}

/// Relation vector between the two views' representative prototypes:
/// a 256→64→32 MLP (relu hidden, tanh output) on `[r_t; r_f]`.
pub fn relation(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    r_t: Var,
    r_f: Var,
) -> Result<Var> {
    let x = tape.concat(&[r_t, r_f])?;
    if tape.value(x).len() != 2 * EMBED_DIM {
        return Err(Error::shape(
            "relation",
            format!("expected two {EMBED_DIM}-vectors, got {}", tape.value(x).len()),
        ));
    }
    let w1 = sess.param(tape, store, "cdm.rel.l1.w")?;
    let b1 = sess.param(tape, store, "cdm.rel.l1.b")?;
    let h = tape.linear(w1, x, b1)?;
    let h = tape.relu(h);
    let w2 = sess.param(tape, store, "cdm.rel.l2.w")?;
    let b2 = sess.param(tape, store, "cdm.rel.l2.b")?;
    let v = tape.linear(w2, h, b2)?;
    Ok(tape.tanh(v))
}

/// Correction head `h([v_c; α; κ])`: a 36→16→1 MLP with relu hidden
/// and a linear output, so the correction can push a logit in either
/// direction.
pub fn fusion_term(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    v: Var,
    alpha: Var,
    kappa: Var,
) -> Result<Var> {
    let x = tape.concat(&[v, alpha, kappa])?;
    if tape.value(x).len() != FUSION_INPUT_DIM {
        return Err(Error::shape(
            "fusion_term",
            format!(
                "expected [v;alpha;kappa] of width {FUSION_INPUT_DIM}, got {}",
                tape.value(x).len()
            ),
        ));
    }
    let w1 = sess.param(tape, store, "cdm.h.l1.w")?;
    let b1 = sess.param(tape, store, "cdm.h.l1.b")?;
    let h = tape.linear(w1, x, b1)?;
    let h = tape.relu(h);
    let w2 = sess.param(tape, store, "cdm.h.l2.w")?;
    let b2 = sess.param(tape, store, "cdm.h.l2.b")?;
    tape.linear(w2, h, b2)
}

/// One class's fused logit: `α_t·ℓ_t + α_f·ℓ_f + h_c`.  All inputs are
/// scalars except `alpha` (`[2]`).
pub fn final_logit(tape: &mut Tape, l_t: Var, l_f: Var, alpha: Var, h: Var) -> Result<Var> {
    let a_t = tape.gather(alpha, 0)?;
    let a_f = tape.gather(alpha, 1)?;
    let wt = tape.mul(a_t, l_t)?;
    let wf = tape.mul(a_f, l_f)?;
    let blend = tape.add(wt, wf)?;
    tape.add(blend, h)
}
