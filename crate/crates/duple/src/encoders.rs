//! The two embedding branches: a strided 1-D CNN over raw samples and
//! a strided 2-D CNN over log-magnitude spectrograms.  Both end in a
//! global average pool and a linear projection to the shared
//! 128-dimensional embedding space.

use crate::diffcore::{ParamStore, Session, Tape, Tensor, Var};
use crate::error::Result;
use crate::featurize::Spectrogram;

/// Dimension of both branch embeddings.
pub const EMBED_DIM: usize = 128;

const T_CHANNELS: [usize; 4] = [16, 32, 64, 128];
const T_KERNEL: usize = 7;
const F_CHANNELS: [usize; 3] = [8, 16, 32];
const F_KERNEL: usize = 3;
const STRIDE: usize = 2;

/// Registers the time-branch parameters under `enc_t.*`.
pub fn register_time_encoder(store: &mut ParamStore, seed: u64) -> Result<()> {
    let mut c_in = 1usize;
    for (i, &c_out) in T_CHANNELS.iter().enumerate() {
        store.add_glorot(
            &format!("enc_t.conv{}.w", i + 1),
            vec![c_out, c_in, T_KERNEL],
            c_in * T_KERNEL,
            c_out * T_KERNEL,
            seed,
        )?;
        store.add_tensor(
            &format!("enc_t.conv{}.b", i + 1),
            Tensor::zeros(vec![c_out]),
            true,
        )?;
        c_in = c_out;
    }
    store.add_glorot(
        "enc_t.out.w",
        vec![EMBED_DIM, T_CHANNELS[3]],
        T_CHANNELS[3],
        EMBED_DIM,
        seed,
    )?;
    store.add_tensor("enc_t.out.b", Tensor::zeros(vec![EMBED_DIM]), true)?;
    Ok(())
}

/// Registers the frequency-branch parameters under `enc_f.*`.
pub fn register_freq_encoder(store: &mut ParamStore, seed: u64) -> Result<()> {
    let mut c_in = 1usize;
    for (i, &c_out) in F_CHANNELS.iter().enumerate() {
        store.add_glorot(
            &format!("enc_f.conv{}.w", i + 1),
            vec![c_out, c_in, F_KERNEL, F_KERNEL],
            c_in * F_KERNEL * F_KERNEL,
            c_out * F_KERNEL * F_KERNEL,
            seed,
        )?;
        store.add_tensor(
            &format!("enc_f.conv{}.b", i + 1),
            Tensor::zeros(vec![c_out]),
            true,
        )?;
        c_in = c_out;
    }
    store.add_glorot(
        "enc_f.out.w",
        vec![EMBED_DIM, F_CHANNELS[2]],
        F_CHANNELS[2],
        EMBED_DIM,
        seed,
    )?;
    store.add_tensor("enc_f.out.b", Tensor::zeros(vec![EMBED_DIM]), true)?;
    Ok(())
}

/// Embeds raw samples: four (conv, relu) blocks with stride 2, global
/// average pool, linear head.  Returns a `[128]` node.
pub fn time_forward(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    samples: &[f64],
) -> Result<Var> {
    let mut x = tape.constant(Tensor::new(vec![1, samples.len()], samples.to_vec()));
    for i in 1..=T_CHANNELS.len() {
        let w = sess.param(tape, store, &format!("enc_t.conv{i}.w"))?;
        let b = sess.param(tape, store, &format!("enc_t.conv{i}.b"))?;
        let y = tape.conv1d(x, w, b, STRIDE, T_KERNEL / 2)?;
        x = tape.relu(y);
    }
    let pooled = tape.mean_pool1d(x)?;
    let w = sess.param(tape, store, "enc_t.out.w")?;
    let b = sess.param(tape, store, "enc_t.out.b")?;
    tape.linear(w, pooled, b)
}

/// Embeds a spectrogram: three (conv, relu) blocks with stride 2,
/// global average pool, linear head.  Returns a `[128]` node.
pub fn freq_forward(
    tape: &mut Tape,
    sess: &mut Session,
    store: &ParamStore,
    spec: &Spectrogram,
) -> Result<Var> {
    let mut x = tape.constant(Tensor::new(
        vec![1, spec.rows, spec.cols],
        spec.data.clone(),
    ));
    for i in 1..=F_CHANNELS.len() {
        let w = sess.param(tape, store, &format!("enc_f.conv{i}.w"))?;
        let b = sess.param(tape, store, &format!("enc_f.conv{i}.b"))?;
        let y = tape.conv2d(x, w, b, STRIDE, F_KERNEL / 2)?;
        x = tape.relu(y);
    }
    let pooled = tape.mean_pool2d(x)?;
    let w = sess.param(tape, store, "enc_f.out.w")?;
    let b = sess.param(tape, store, "enc_f.out.b")?;
    tape.linear(w, pooled, b)
}
