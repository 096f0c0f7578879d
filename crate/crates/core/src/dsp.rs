//! Shared spectral helpers: windows, framing and one-sided STFTs.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::par::*;

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of full frames of `window` samples stepped by `step`.
pub fn frame_count(len: usize, window: usize, step: usize) -> usize {
    if len < window || step == 0 {
        0
    } else {
        (len - window) / step + 1
    }
}

/// Windowed, zero-padded, one-sided short-time spectra.
pub struct Stft {
    window: Vec<f64>,
    step: usize,
    fft_len: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(window: Vec<f64>, step: usize, fft_len: usize) -> Result<Self> {
        if window.is_empty() || step == 0 || fft_len < window.len() {
            return Err(Error::invalid(format!(
                "bad STFT geometry: window {}, step {step}, fft {fft_len}",
                window.len()
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(fft_len);
        Ok(Self {
            window,
            step,
            fft_len,
            fft,
        })
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Complex spectra, one row per frame, frame `t` starting at `t * step`.
    pub fn complex(&self, x: &[f64]) -> Result<Array2<Complex64>> {
        let frames = frame_count(x.len(), self.window.len(), self.step);
        if frames == 0 {
            return Err(Error::invalid(format!(
                "signal of {} samples is shorter than one {}-sample window",
                x.len(),
                self.window.len()
            )));
        }
        let bins = self.bins();
        let mut out = vec![Complex64::new(0.0, 0.0); frames * bins];
        out.par_chunks_mut(bins).enumerate().for_each(|(t, row)| {
            let mut buf = vec![Complex64::new(0.0, 0.0); self.fft_len];
            let start = t * self.step;
            for (i, (b, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                b.re = x[start + i] * w;
            }
            self.fft.process(&mut buf);
            row.copy_from_slice(&buf[..bins]);
        });
        Ok(Array2::from_shape_vec((frames, bins), out).expect("shape"))
    }

    /// Power spectra `|X|^2`.
    pub fn power(&self, x: &[f64]) -> Result<Array2<f64>> {
        Ok(self.complex(x)?.mapv(|c| c.norm_sqr()))
    }
}

/// One-sided magnitude spectrum of a Hann-windowed real sequence.
pub(crate) fn windowed_magnitude(
    x: &[f64],
    window: &[f64],
    fft: &dyn Fft<f64>,
    out: &mut [f64],
) {
    let mut buf: Vec<Complex64> = x
        .iter()
        .zip(window)
        .map(|(v, w)| Complex64::new(v * w, 0.0))
        .collect();
    buf.resize(fft.len(), Complex64::new(0.0, 0.0));
    fft.process(&mut buf);
    for (o, c) in out.iter_mut().zip(&buf) {
        *o = c.norm();
    }
}
