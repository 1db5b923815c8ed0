//! Spectral transforms: full-signal magnitude spectra and Hann-window
//! log-magnitude spectrograms.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Additive floor inside the spectrogram log, keeping silent bins
/// finite.
pub const LOG_FLOOR: f64 = 1e-6;

/// Log-magnitude STFT of a signal, stored row-major as
/// `[rows = bins, cols = frames]` with frequency on the row axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub window: usize,
    pub hop: usize,
    /// Frequency bins: `window/2 + 1`.
    pub rows: usize,
    /// Complete frames: `(len - window)/hop + 1`.
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Magnitudes of the non-negative-frequency bins (`0..=n/2`) of the
/// full-signal DFT.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Hann-windowed log-magnitude spectrogram over complete frames.
///
/// Requires `window > 0`, `hop > 0` and a signal at least one window
/// long; partial trailing frames are dropped.
pub fn spectrogram(x: &[f64], window: usize, hop: usize) -> Result<Spectrogram> {
    if window == 0 || hop == 0 {
        return Err(Error::Config(format!(
            "stft window ({window}) and hop ({hop}) must be positive"
        )));
    }
    if x.len() < window {
        return Err(Error::Data(format!(
            "signal of {} samples is shorter than the stft window {window}",
            x.len()
        )));
    }
    let cols = (x.len() - window) / hop + 1;
    let rows = window / 2 + 1;
    let win = hann(window);
    let fft = FftPlanner::new().plan_fft_forward(window);
    let mut data = vec![0.0; rows * cols];
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); window];
    for frame in 0..cols {
        let start = frame * hop;
        for (b, (&xv, &wv)) in buf
            .iter_mut()
            .zip(x[start..start + window].iter().zip(win.iter()))
        {
            *b = Complex::new(xv * wv, 0.0);
        }
        fft.process(&mut buf);
        for row in 0..rows {
            data[row * cols + frame] = (buf[row].norm() + LOG_FLOOR).ln();
        }
    }
    Ok(Spectrogram {
        window,
        hop,
        rows,
        cols,
        data,
    })
}
