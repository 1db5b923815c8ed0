//! Named parameter store: initialization, Adam updates and checkpoint
//! serialization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::util;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bumped when the checkpoint layout changes.
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";

/// One named tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
    pub trainable: bool,
}

/// All model state, keyed by name.  Iteration order is the sorted name
/// order (`BTreeMap`), which makes updates, checkpoints and gradient
/// reports deterministic.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor initialized with Glorot-uniform
    /// draws from an RNG stream derived from (`seed`, `name`), so each
    /// parameter's draw is independent of registration order.
    pub fn add_glorot(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        seed: u64,
    ) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = util::seeded_named_stream(seed, util::STREAM_PARAMS, name);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
            .collect();
        self.add_tensor(name, Tensor::new(shape, data), true)
    }

    /// Registers a tensor with explicit contents.
    pub fn add_tensor(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Data(format!("duplicate parameter name {name:?}")));
        }
        let shape = value.shape().to_vec();
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad: Tensor::zeros(shape.clone()),
                m: Tensor::zeros(shape.clone()),
                v: Tensor::zeros(shape),
                trainable,
            },
        );
        Ok(())
    }

    /// Registers a trainable `[1]` scalar with a fixed initial value.
    pub fn add_scalar(&mut self, name: &str, value: f64) -> Result<()> {
        self.add_tensor(name, Tensor::scalar(value), true)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a parameter's value, keeping moments; shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Adds `delta` into the stored gradient for `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name:?}")))?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{:?} vs {:?}", p.grad.shape(), delta.shape()),
            ));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// One Adam step over every trainable parameter using the stored
    /// gradients, then clears them.  Rejects non-finite gradients by
    /// name before touching any state.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        for (name, p) in self.entries.iter() {
            if p.trainable && !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name:?}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for p in self.entries.values_mut() {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            let x = p.value.data_mut();
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                x[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Iterates parameters in sorted-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of all parameters in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Total element count across all parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Writes a binary checkpoint: magic, version, a config fingerprint
    /// string, then each tensor (name, trainable flag, shape, f64-LE
    /// payload) in sorted-name order.  Optimizer moments are not saved;
    /// checkpoints restore model state for inference and evaluation.
    pub fn save(&self, path: &Path, config_fingerprint: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let werr = |e: std::io::Error| Error::io(path.display().to_string(), e);
        w.write_all(CHECKPOINT_MAGIC).map_err(werr)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(werr)?;
        let fp = config_fingerprint.as_bytes();
        w.write_all(&(fp.len() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(fp).map_err(werr)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())
            .map_err(werr)?;
        for (name, p) in self.entries.iter() {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes()).map_err(werr)?;
            w.write_all(nb).map_err(werr)?;
            w.write_all(&[p.trainable as u8]).map_err(werr)?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(werr)?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes()).map_err(werr)?;
            }
            for &x in p.value.data() {
                w.write_all(&x.to_le_bytes()).map_err(werr)?;
            }
        }
        w.flush().map_err(werr)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`].  Returns the
    /// store plus the config fingerprint recorded at save time.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let disp = path.display().to_string();
        let file = File::open(path).map_err(|e| Error::io(disp.clone(), e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: &str| Error::Checkpoint {
            path: disp.clone(),
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let version = read_u32(&mut r).map_err(|_| bad("truncated version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let fp_len = read_u32(&mut r).map_err(|_| bad("truncated fingerprint"))? as usize;
        let mut fp = vec![0u8; fp_len];
        r.read_exact(&mut fp).map_err(|_| bad("truncated fingerprint"))?;
        let fingerprint =
            String::from_utf8(fp).map_err(|_| bad("fingerprint is not valid utf-8"))?;
        let count = read_u32(&mut r).map_err(|_| bad("truncated tensor count"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r).map_err(|_| bad("truncated tensor name"))? as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb).map_err(|_| bad("truncated tensor name"))?;
            let name = String::from_utf8(nb).map_err(|_| bad("tensor name is not utf-8"))?;
            let mut tr = [0u8; 1];
            r.read_exact(&mut tr).map_err(|_| bad("truncated flags"))?;
            let ndim = read_u32(&mut r).map_err(|_| bad("truncated shape"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r).map_err(|_| bad("truncated shape"))? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0.0f64; n];
            let mut buf = [0u8; 8];
            for d in data.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| bad("truncated tensor payload"))?;
                *d = f64::from_le_bytes(buf);
            }
            store.add_tensor(&name, Tensor::new(shape, data), tr[0] != 0)?;
        }
        Ok((store, fingerprint))
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        s1.add_glorot("w", vec![8, 4], 4, 8, 222).unwrap();
        s2.add_glorot("w", vec![8, 4], 4, 8, 222).unwrap();
        let bound = (6.0_f64 / 12.0).sqrt();
        for x in s1.get("w").unwrap().value.data() {
            assert!(x.abs() <= bound);
        }
        assert_eq!(
            s1.get("w").unwrap().value.data(),
            s2.get("w").unwrap().value.data()
        );
        // A different name produces a different draw.
        let mut s3 = ParamStore::new();
        s3.add_glorot("w2", vec![8, 4], 4, 8, 222).unwrap();
        assert_ne!(
            s1.get("w").unwrap().value.data(),
            s3.get("w2").unwrap().value.data()
        );
    }

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::new();
        a.add_glorot("p", vec![4], 2, 2, 9).unwrap();
        a.add_glorot("q", vec![4], 2, 2, 9).unwrap();
        let mut b = ParamStore::new();
        b.add_glorot("q", vec![4], 2, 2, 9).unwrap();
        b.add_glorot("p", vec![4], 2, 2, 9).unwrap();
        assert_eq!(a.get("p").unwrap().value, b.get("p").unwrap().value);
        assert_eq!(a.get("q").unwrap().value, b.get("q").unwrap().value);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, the very first Adam step is
        // lr·g/(|g| + ε·√(1-β₂)) ≈ lr·sign(g) for any nonzero g.
        let mut s = ParamStore::new();
        s.add_tensor("w", Tensor::vector(&[1.0, -2.0]), true).unwrap();
        s.accumulate_grad("w", &Tensor::vector(&[0.3, -40.0])).unwrap();
        s.adam_step(0.01).unwrap();
        let v = s.get("w").unwrap().value.data().to_vec();
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-6, "{v:?}");
        assert!((v[1] - (-2.0 + 0.01)).abs() < 1e-6, "{v:?}");
        // Gradients are cleared after the step.
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut s = ParamStore::new();
        s.add_tensor("frozen", Tensor::vector(&[5.0]), false).unwrap();
        s.accumulate_grad("frozen", &Tensor::vector(&[100.0])).unwrap();
        s.adam_step(0.1).unwrap();
        assert_eq!(s.get("frozen").unwrap().value.data(), &[5.0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut s = ParamStore::new();
        s.add_tensor("w.bad", Tensor::vector(&[0.0]), true).unwrap();
        s.accumulate_grad("w.bad", &Tensor::vector(&[f64::NAN])).unwrap();
        let err = s.adam_step(0.1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("w.bad"), "{msg}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_values_and_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut s = ParamStore::new();
        s.add_glorot("a.w", vec![3, 2], 2, 3, 1).unwrap();
        s.add_tensor("norm.mean", Tensor::vector(&[1.0, -2.5]), false)
            .unwrap();
        s.add_scalar("lambda_raw", 2.3).unwrap();
        s.save(&path, "fingerprint123").unwrap();
        let (loaded, fp) = ParamStore::load(&path).unwrap();
        assert_eq!(fp, "fingerprint123");
        assert_eq!(loaded.names(), s.names());
        for (name, p) in s.iter() {
            let q = loaded.get(name).unwrap();
            assert_eq!(p.value, q.value, "{name}");
            assert_eq!(p.trainable, q.trainable, "{name}");
        }
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        let err = ParamStore::load(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
    }
}
