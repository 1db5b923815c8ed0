//! Statistical guidance network.
//!
//! Consumes the normalized 26-dimensional statistics of a query and
//! produces the conditioning signals for matching and fusion: a
//! guidance vector `g ∈ (-1,1)^32`, domain weights `α = (α_t, α_f)`
//! on the simplex, a temperature modulation `β ∈ (0.5, 2)` and
//! non-negative per-domain confidences `κ = (κ_t, κ_f)`.

use crate::diffcore::{ParamStore, Session, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::featurize::NUM_FEATURES;

/// Width of the guidance vector `g`.
pub const GUIDE_DIM: usize = 32;
/// Width of each statistics analyzer's output.
const ANALYZER_DIM: usize = 16;
const ANALYZER_HIDDEN: usize = 32;

/// Tape nodes of the guidance signals for one query.
#[derive(Debug, Clone, Copy)]
pub struct Guidance {
    /// `[32]`, each coordinate in (-1, 1).
    pub g: Var,
    /// `[2]` softmax pair `(α_t, α_f)`.
    pub alpha: Var,
    /// `[1]` temperature modulation in (0.5, 2).
    pub beta: Var,
    /// `[2]` non-negative confidences `(κ_t, κ_f)`.
    pub kappa: Var,
}

/// Registers the guidance parameters under `sgn.*`.
pub fn register_sgn(store: &mut ParamStore, seed: u64) -> Result<()> {
    for analyzer in ["phys", "env"] {
        store.add_glorot(
            &format!("sgn.{analyzer}.l1.w"),
            vec![ANALYZER_HIDDEN, NUM_FEATURES],
            NUM_FEATURES,
            ANALYZER_HIDDEN,
            seed,
        )?;
        store.add_tensor(
            &format!("sgn.{analyzer}.l1.b"),
            Tensor::zeros(vec![ANALYZER_HIDDEN]),
            true,
        )?;
        store.add_glorot(
            &format!("sgn.{analyzer}.l2.w"),
            vec![ANALYZER_DIM, ANALYZER_HIDDEN],
            ANALYZER_HIDDEN,
            ANALYZER_DIM,
            seed,
        )?;
        store.add_tensor(
            &format!("sgn.{analyzer}.l2.b"),
            Tensor::zeros(vec![ANALYZER_DIM]),
            true,
        )?;
    }
    let joint = 2 * ANALYZER_DIM;
    store.add_glorot("sgn.guide.w", vec![GUIDE_DIM, joint], joint, GUIDE_DIM, seed)?;
    store.add_tensor("sgn.guide.b", Tensor::zeros(vec![GUIDE_DIM]), true)?;
    store.add_glorot("sgn.alpha.w", vec![2, NUM_FEATURES], NUM_FEATURES, 2, seed)?;
    store.add_tensor("sgn.alpha.b", Tensor::zeros(vec![2]), true)?;
    store.add_glorot("sgn.beta.w", vec![1, joint], joint, 1, seed)?;
    store.add_tensor("sgn.beta.b", Tensor::zeros(vec![1]), true)?;
    store.add_glorot("sgn.kappa.w", vec![2, joint], joint, 2, seed)?;
    store.add_tensor("sgn.kappa.b", Tensor::zeros(vec![2]), true)?;
    Ok(())
}

fn analyzer(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    name: &str,
    s: Var,
) -> Result<Var> {
    let w1 = sess.param(tape, store, &format!("sgn.{name}.l1.w"))?;
    let b1 = sess.param(tape, store, &format!("sgn.{name}.l1.b"))?;
    let h = tape.linear(w1, s, b1)?;
    let h = tape.relu(h);
    let w2 = sess.param(tape, store, &format!("sgn.{name}.l2.w"))?;
    let b2 = sess.param(tape, store, &format!("sgn.{name}.l2.b"))?;
    let out = tape.linear(w2, h, b2)?;
    Ok(tape.relu(out))
}

/// Runs the guidance network on one query's normalized statistics.
pub fn sgn_forward(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    stats_norm: &[f64],
) -> Result<Guidance> {
    if stats_norm.len() != NUM_FEATURES {
        return Err(Error::shape(
            "sgn_forward",
            format!("expected {NUM_FEATURES} statistics, got {}", stats_norm.len()),
        ));
    }
    let s = tape.constant(Tensor::vector(stats_norm));

    let p = analyzer(tape, sess, store, "phys", s)?;
    let e = analyzer(tape, sess, store, "env", s)?;
    let pe = tape.concat(&[p, e])?;

    let gw = sess.param(tape, store, "sgn.guide.w")?;
    let gb = sess.param(tape, store, "sgn.guide.b")?;
    let g_lin = tape.linear(gw, pe, gb)?;
    let g = tape.tanh(g_lin);

    let aw = sess.param(tape, store, "sgn.alpha.w")?;
    let ab = sess.param(tape, store, "sgn.alpha.b")?;
    let a_lin = tape.linear(aw, s, ab)?;
    let alpha = tape.softmax(a_lin);

    let bw = sess.param(tape, store, "sgn.beta.w")?;
    let bb = sess.param(tape, store, "sgn.beta.b")?;
    let b_lin = tape.linear(bw, pe, bb)?;
    let b_sig = tape.sigmoid(b_lin);
    let b_scaled = tape.scale(b_sig, 1.5);
    let beta = tape.add_const(b_scaled, 0.5);

    let kw = sess.param(tape, store, "sgn.kappa.w")?;
    let kb = sess.param(tape, store, "sgn.kappa.b")?;
    let k_lin = tape.linear(kw, pe, kb)?;
    let kappa = tape.softplus(k_lin);

    Ok(Guidance { g, alpha, beta, kappa })
}

/// Fixed guidance used when the network is ablated: zero guidance
/// vector, equal domain weights, unit temperature, zero confidence.
pub fn neutral_guidance(tape: &mut Tape) -> Guidance {
    Guidance {
        g: tape.constant(Tensor::zeros(vec![GUIDE_DIM])),
        alpha: tape.constant(Tensor::vector(&[0.5, 0.5])),
        beta: tape.constant(Tensor::scalar(1.0)),
        kappa: tape.constant(Tensor::zeros(vec![2])),
    }
}
