//! Signal files, dataset manifests, resampling and the synthetic
//! benchmark generator.

mod manifest;
mod signal_io;
mod synth;

pub use manifest::{write_manifest, DatasetManifest, ManifestEntry};
pub use signal_io::{read_signal, write_signal_binary, write_signal_text};
pub use synth::{biquad_bandpass, generate_dataset, generate_signal, ClassSpec, DomainSpec, SynthConfig};

/// Linearly resamples a signal to exactly `target` samples with
/// endpoint alignment: the first and last input samples map to the
/// first and last output samples.
pub fn resample_linear(x: &[f64], target: usize) -> Vec<f64> {
    assert!(!x.is_empty() && target > 0);
    if x.len() == target {
        return x.to_vec();
    }
    if x.len() == 1 || target == 1 {
        return vec![x[0]; target];
    }
    let scale = (x.len() - 1) as f64 / (target - 1) as f64;
    (0..target)
        .map(|i| {
            let pos = i as f64 * scale;
            let lo = pos.floor() as usize;
            if lo + 1 >= x.len() {
                x[x.len() - 1]
            } else {
                let frac = pos - lo as f64;
                x[lo] * (1.0 - frac) + x[lo + 1] * frac
            }
        })
        .collect()
}

/// Sample rate of the resampled signal implied by endpoint-aligned
/// resampling: the span of `orig_len` samples at `orig_rate` is mapped
/// onto `target` samples.
pub fn effective_rate(orig_len: usize, orig_rate: f64, target: usize) -> f64 {
    if orig_len <= 1 || target <= 1 {
        return orig_rate;
    }
    orig_rate * (target - 1) as f64 / (orig_len - 1) as f64
}
