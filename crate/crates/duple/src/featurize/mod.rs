//! Hand-crafted signal statistics and the feature normalizer.
//!
//! Each record is summarized by a fixed 26-dimensional vector: thirteen
//! time-domain statistics followed by thirteen spectral statistics
//! computed from the full-signal magnitude spectrum.  The vector feeds
//! the statistical guidance network and the exported feature tables;
//! its composition and order are part of the model contract, since
//! checkpoints bake in a per-dimension normalizer.

mod stft;

pub use stft::{hann, magnitude_spectrum, spectrogram, Spectrogram, LOG_FLOOR};

use crate::error::{Error, Result};
use crate::util;

/// Dimensionality of [`StatVector`].
pub const NUM_FEATURES: usize = 26;

/// Names of the 26 statistics, in vector order.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "mean",
    "std",
    "skewness",
    "kurtosis",
    "rms",
    "peak_abs",
    "peak_to_peak",
    "crest_factor",
    "zero_crossing_rate",
    "mean_abs_deviation",
    "amplitude_entropy",
    "frame_energy_var",
    "lag1_autocorr",
    "spectral_centroid",
    "spectral_bandwidth",
    "spectral_rolloff85",
    "spectral_flatness",
    "dominant_freq",
    "dominant_peak_ratio",
    "spectral_entropy",
    "band_ratio_low",
    "band_ratio_midlow",
    "band_ratio_mid",
    "band_ratio_high",
    "spectral_skewness",
    "spectral_kurtosis",
];

/// Bins of the amplitude histogram behind `amplitude_entropy`.
const A_HIST_BINS: usize = 16;
/// Frame length for `frame_energy_var` (clamped to the signal length).
const ENERGY_FRAME: usize = 256;
/// Band edges for the four band-energy ratios, as fractions of the
/// Nyquist frequency.
const BAND_EDGES: [f64; 3] = [0.05, 0.15, 0.35];
/// Variance floor below which moment ratios are treated as zero; keeps
/// constant signals from amplifying rounding noise into garbage
/// skewness/kurtosis.
const MOMENT_FLOOR: f64 = 1e-24;

/// The 26 statistics of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct StatVector {
    pub values: Vec<f64>,
    /// Set once a [`StatNormalizer`] has been applied; guards against
    /// double normalization.
    pub normalized: bool,
}

impl StatVector {
    pub fn raw(values: Vec<f64>) -> Self {
        assert_eq!(values.len(), NUM_FEATURES);
        StatVector {
            values,
            normalized: false,
        }
    }
}

/// Computes the statistics vector for a signal at the given sample
/// rate.  Requires at least two samples and fully finite input.
pub fn stat_features(samples: &[f64], sample_rate: f64) -> Result<StatVector> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 samples for statistics, got {}",
            samples.len()
        )));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::Data(format!("invalid sample rate {sample_rate}")));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("stat_features input".into()));
    }

    let n = samples.len();
    let nf = n as f64;
    let mut v = Vec::with_capacity(NUM_FEATURES);

    // --- time domain -------------------------------------------------
    let mean = samples.iter().sum::<f64>() / nf;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let std = m2.sqrt();
    let skew = if m2 > MOMENT_FLOOR { m3 / m2.powf(1.5) } else { 0.0 };
    let kurt = if m2 > MOMENT_FLOOR { m4 / (m2 * m2) } else { 0.0 };

    let rms = (samples.iter().map(|x| x * x).sum::<f64>() / nf).sqrt();
    let peak_abs = samples.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let peak_to_peak = max - min;
    let crest = if rms > 0.0 { peak_abs / rms } else { 0.0 };

    let crossings = samples
        .windows(2)
        .filter(|w| w[0] * w[1] < 0.0)
        .count() as f64;
    let zcr = crossings / (nf - 1.0);

    let mad = samples.iter().map(|x| (x - mean).abs()).sum::<f64>() / nf;

    let amp_entropy = {
        let range = max - min;
        if range > 0.0 {
            let mut counts = [0usize; A_HIST_BINS];
            for &x in samples {
                let idx = (((x - min) / range) * A_HIST_BINS as f64) as usize;
                counts[idx.min(A_HIST_BINS - 1)] += 1;
            }
            -counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / nf;
                    p * p.ln()
                })
                .sum::<f64>()
        } else {
            0.0
        }
    };

    let frame_energy_var = {
        let frame = ENERGY_FRAME.min(n);
        let q = n / frame;
        if q > 1 {
            let energies: Vec<f64> = (0..q)
                .map(|j| {
                    samples[j * frame..(j + 1) * frame]
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        / frame as f64
                })
                .collect();
            let em = energies.iter().sum::<f64>() / q as f64;
            energies.iter().map(|e| (e - em) * (e - em)).sum::<f64>() / q as f64
        } else {
            0.0
        }
    };

    let lag1 = {
        let den = m2 * nf;
        if den > MOMENT_FLOOR {
            let num: f64 = samples
                .windows(2)
                .map(|w| (w[0] - mean) * (w[1] - mean))
                .sum();
            num / den
        } else {
            0.0
        }
    };

    v.extend_from_slice(&[
        mean,
        std,
        skew,
        kurt,
        rms,
        peak_abs,
        peak_to_peak,
        crest,
        zcr,
        mad,
        amp_entropy,
        frame_energy_var,
        lag1,
    ]);

    // --- frequency domain --------------------------------------------
    let mags = magnitude_spectrum(samples);
    let bins = mags.len();
    let freqs: Vec<f64> = (0..bins)
        .map(|k| k as f64 * sample_rate / nf)
        .collect();
    let msum: f64 = mags.iter().sum();
    let power: Vec<f64> = mags.iter().map(|m| m * m).collect();
    let psum: f64 = power.iter().sum();

    let centroid = if msum > 0.0 {
        util::dot(&mags, &freqs) / msum
    } else {
        0.0
    };
    let bandwidth = if msum > 0.0 {
        (mags.iter()
            .zip(&freqs)
            .map(|(m, f)| m * (f - centroid) * (f - centroid))
            .sum::<f64>()
            / msum)
            .sqrt()
    } else {
        0.0
    };

    let rolloff = if psum > 0.0 {
        let mut acc = 0.0;
        let mut out = freqs[bins - 1];
        for (k, &p) in power.iter().enumerate() {
            acc += p;
            if acc >= 0.85 * psum {
                out = freqs[k];
                break;
            }
        }
        out
    } else {
        0.0
    };

    let flatness = if psum > 0.0 && power.iter().all(|&p| p > 0.0) {
        let log_mean = power.iter().map(|p| p.ln()).sum::<f64>() / bins as f64;
        log_mean.exp() / (psum / bins as f64)
    } else {
        0.0
    };

    let dom = util::argmax(&mags);
    let dominant_freq = if msum > 0.0 { freqs[dom] } else { 0.0 };
    let dominant_ratio = if psum > 0.0 { power[dom] / psum } else { 0.0 };

    let spec_entropy = if psum > 0.0 && bins > 1 {
        let h: f64 = -power
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| {
                let q = p / psum;
                q * q.ln()
            })
            .sum::<f64>();
        h / (bins as f64).ln()
    } else {
        0.0
    };

    let mut band = [0.0f64; 4];
    if psum > 0.0 {
        let half = (bins - 1).max(1) as f64;
        for (k, &p) in power.iter().enumerate() {
            let r = k as f64 / half;
            let slot = if r < BAND_EDGES[0] {
                0
            } else if r < BAND_EDGES[1] {
                1
            } else if r < BAND_EDGES[2] {
                2
            } else {
                3
            };
            band[slot] += p;
        }
        for b in band.iter_mut() {
            *b /= psum;
        }
    }

    let (spec_skew, spec_kurt) = if msum > 0.0 && bandwidth > 1e-12 {
        let mut s3 = 0.0;
        let mut s4 = 0.0;
        for (m, f) in mags.iter().zip(&freqs) {
            let d = (f - centroid) / bandwidth;
            let d3 = d * d * d;
            s3 += m * d3;
            s4 += m * d3 * d;
        }
        (s3 / msum, s4 / msum)
    } else {
        (0.0, 0.0)
    };

    v.extend_from_slice(&[
        centroid,
        bandwidth,
        rolloff,
        flatness,
        dominant_freq,
        dominant_ratio,
        spec_entropy,
        band[0],
        band[1],
        band[2],
        band[3],
        spec_skew,
        spec_kurt,
    ]);

    debug_assert_eq!(v.len(), NUM_FEATURES);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("stat_features output".into()));
    }
    Ok(StatVector::raw(v))
}

/// Per-dimension standardization fitted on training-split statistics
/// only; the fitted moments ship inside checkpoints so evaluation reuses
/// the exact training normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct StatNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Floor applied to per-dimension standard deviations so constant
/// features map to zero instead of dividing by zero.
pub const STD_FLOOR: f64 = 1e-8;

impl StatNormalizer {
    /// Fits population mean/std per dimension.  Rejects empty input and
    /// vectors that are already normalized.
    pub fn fit<'a, I>(vectors: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a StatVector>,
    {
        let mut count = 0usize;
        let mut mean = vec![0.0; NUM_FEATURES];
        let mut sq = vec![0.0; NUM_FEATURES];
        for sv in vectors {
            if sv.normalized {
                return Err(Error::Data(
                    "normalizer fit received an already-normalized vector".into(),
                ));
            }
            for (i, &x) in sv.values.iter().enumerate() {
                mean[i] += x;
                sq[i] += x * x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data("normalizer fit on zero vectors".into()));
        }
        let nf = count as f64;
        let mut std = vec![0.0; NUM_FEATURES];
        for i in 0..NUM_FEATURES {
            mean[i] /= nf;
            let var = (sq[i] / nf - mean[i] * mean[i]).max(0.0);
            std[i] = var.sqrt().max(STD_FLOOR);
        }
        Ok(StatNormalizer { mean, std })
    }

    /// Standardizes a raw vector.
    pub fn apply(&self, sv: &StatVector) -> Result<StatVector> {
        if sv.normalized {
            return Err(Error::Data("vector is already normalized".into()));
        }
        let values = sv
            .values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        Ok(StatVector {
            values,
            normalized: true,
        })
    }
}
