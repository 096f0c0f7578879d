//! Stacked ENV/TFS modulation-spectrum features.
//!
//! The extraction runs in four stages:
//!
//! 1. acoustic STFT (3 ms Hann frames, 1 ms step in the default framing);
//! 2. per band, the analytic trajectory of the STFT bin over time gives the
//!    envelope (its magnitude) and the instantaneous-frequency deviation from
//!    the band centre (its unwrapped phase derivative);
//! 3. a second Hann-windowed transform along time over each modulation
//!    window;
//! 4. magnitudes of that transform form the ENV (envelope) and TFS
//!    (frequency deviation) channels, each `L x K x H`.
//!
//! A one-sided STFT bin is the output of a complex band-pass filter, so its
//! trajectory already is the analytic signal of the band (shifted to
//! baseband by the band centre), which is what a Hilbert transform of the
//! real band-passed signal would produce.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{Array2, Array3, Array4, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::{frame_count, hann, windowed_magnitude, Stft};
use crate::error::{Error, Result};
use crate::par::*;
use crate::signal::{integral_ratio, pad_for_modspec, to_samples, AudioSignal, FrameSpec};

/// Channel index of the envelope features.
pub const ENV: usize = 0;
/// Channel index of the temporal-fine-structure features.
pub const TFS: usize = 1;

/// Feature tensor indexed `[frame, band, modulation bin, channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModFeatureTensor {
    pub values: Array4<f64>,
    pub frame_spec: FrameSpec,
    pub band_centers_hz: Vec<f64>,
    pub mod_freqs_hz: Vec<f64>,
}

impl ModFeatureTensor {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    /// Index of the acoustic band whose centre is nearest `hz`.
    pub fn band_of(&self, hz: f64) -> usize {
        nearest(&self.band_centers_hz, hz)
    }

    /// Index of the modulation bin nearest `hz`.
    pub fn mod_bin_of(&self, hz: f64) -> usize {
        nearest(&self.mod_freqs_hz, hz)
    }
}

fn nearest(grid: &[f64], hz: f64) -> usize {
    grid.iter()
        .enumerate()
        .min_by(|a, b| (a.1 - hz).abs().total_cmp(&(b.1 - hz).abs()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Envelope and frequency deviation of one acoustic band over a modulation
/// window.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticBand {
    pub envelope: Vec<f64>,
    pub inst_freq_dev_hz: Vec<f64>,
}

/// Output of the first (acoustic) STFT.
#[derive(Debug, Clone)]
pub struct AcousticSpectrogram {
    /// `[time, band]` complex bins, frame `t` starting at sample `t * hop`.
    pub bins: Array2<Complex64>,
    pub hop: usize,
    pub fft_len: usize,
    pub sample_rate_hz: u32,
}

impl AcousticSpectrogram {
    /// Frames per second of the band trajectories.
    pub fn frame_rate_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / self.hop as f64
    }

    pub fn band_centers_hz(&self) -> Vec<f64> {
        (0..self.bins.ncols())
            .map(|k| k as f64 * self.sample_rate_hz as f64 / self.fft_len as f64)
            .collect()
    }
}

/// First STFT: Hann frames of `W_a` stepped by `F_a`, FFT length equal to the
/// window, one-sided. Expects a signal already padded for modulation framing.
pub fn stft_acoustic(sig: &AudioSignal, spec: &FrameSpec) -> Result<AcousticSpectrogram> {
    let window = to_samples(spec.acoustic_window_s, sig.sample_rate_hz);
    let hop = to_samples(spec.acoustic_step_s, sig.sample_rate_hz);
    if window == 0 || hop == 0 {
        return Err(Error::invalid(
            "acoustic window and step must be at least one sample",
        ));
    }
    let stft = Stft::new(hann(window), hop, window)?;
    let bins = stft.complex(&sig.to_f64())?;
    Ok(AcousticSpectrogram {
        bins,
        hop,
        fft_len: window,
        sample_rate_hz: sig.sample_rate_hz,
    })
}

/// Envelope and instantaneous-frequency deviation of band `band` over the
/// acoustic frames in `frames`.
///
/// The band trajectory is shifted to baseband by the band centre, so a
/// carrier exactly at the centre has zero deviation. The deviation is the
/// wrapped first difference of the phase scaled to Hz; the first sample
/// repeats the second.
pub fn band_envelope_tfs(
    spectrogram: &AcousticSpectrogram,
    frames: Range<usize>,
    band: usize,
) -> AnalyticBand {
    let n = spectrogram.fft_len;
    let hop = spectrogram.hop;
    let rate = spectrogram.frame_rate_hz();
    let mut envelope = Vec::with_capacity(frames.len());
    let mut inst_freq_dev_hz = Vec::with_capacity(frames.len());
    let mut prev: Option<Complex64> = None;
    for t in frames {
        // Phase of the band centre at the frame start, reduced exactly.
        let turns = ((band * hop) % n * (t % n)) % n;
        let rot = Complex64::from_polar(1.0, -2.0 * PI * turns as f64 / n as f64);
        let z = spectrogram.bins[[t, band]] * rot;
        envelope.push(z.norm());
        if let Some(p) = prev {
            let cross = z * p.conj();
            // Silent bins carry no phase; atan2 of signed zeros would give pi.
            let dev = if cross.norm_sqr() > 0.0 {
                cross.arg() * rate / (2.0 * PI)
            } else {
                0.0
            };
            inst_freq_dev_hz.push(dev);
        }
        prev = Some(z);
    }
    if let Some(&first) = inst_freq_dev_hz.first() {
        inst_freq_dev_hz.insert(0, first);
    } else if !envelope.is_empty() {
        inst_freq_dev_hz.push(0.0);
    }
    AnalyticBand {
        envelope,
        inst_freq_dev_hz,
    }
}

/// Raw ENV/TFS modulation spectra, before per-frame normalisation.
///
/// Pads the signal internally. Each band sequence has its mean over the
/// modulation window removed before the second transform, so the spectra
/// describe fluctuation around the band level.
pub fn extract_modspec_raw(sig: &AudioSignal, spec: &FrameSpec) -> Result<ModFeatureTensor> {
    spec.validate()?;
    let padded = pad_for_modspec(sig, spec)?;
    let spectrogram = stft_acoustic(&padded.signal, spec)?;
    let win = integral_ratio(spec.mod_window_s, spec.acoustic_step_s).ok_or_else(|| {
        Error::invalid("modulation window must be a whole number of acoustic steps")
    })?;
    let step = integral_ratio(spec.mod_step_s, spec.acoustic_step_s).ok_or_else(|| {
        Error::invalid("modulation step must be a whole number of acoustic steps")
    })?;
    if win < 8 {
        return Err(Error::invalid(
            "modulation window must span at least 8 acoustic frames",
        ));
    }
    let n_frames = padded.mod_frames;
    let available = frame_count(spectrogram.bins.nrows(), win, step);
    if available < n_frames {
        return Err(Error::invalid(format!(
            "padded signal yields {available} modulation frames, expected {n_frames}"
        )));
    }

    let k_bands = spectrogram.bins.ncols();
    let h_bins = win / 2 + 1;
    let window = hann(win);
    let fft = FftPlanner::new().plan_fft_forward(win);

    let block = k_bands * h_bins * 2;
    let mut values = vec![0.0; n_frames * block];
    values
        .par_chunks_mut(block)
        .enumerate()
        .for_each(|(l, out)| {
            let start = l * step;
            let mut spectrum = vec![0.0; h_bins];
            for k in 0..k_bands {
                let band = band_envelope_tfs(&spectrogram, start..start + win, k);
                for (c, seq) in [band.envelope, band.inst_freq_dev_hz].iter().enumerate() {
                    let mean = seq.iter().sum::<f64>() / seq.len() as f64;
                    let centred: Vec<f64> = seq.iter().map(|v| v - mean).collect();
                    windowed_magnitude(&centred, &window, fft.as_ref(), &mut spectrum);
                    for (h, &v) in spectrum.iter().enumerate() {
                        out[(k * h_bins + h) * 2 + c] = v;
                    }
                }
            }
        });

    let frame_rate = spectrogram.frame_rate_hz();
    Ok(ModFeatureTensor {
        values: Array4::from_shape_vec((n_frames, k_bands, h_bins, 2), values).expect("shape"),
        frame_spec: *spec,
        band_centers_hz: spectrogram.band_centers_hz(),
        mod_freqs_hz: (0..h_bins)
            .map(|h| h as f64 * frame_rate / win as f64)
            .collect(),
    })
}

/// Modulation features for one file: raw spectra with each frame and channel
/// scaled to unit Frobenius norm. Standardisation across a corpus is a
/// separate step, see [`standardize`].
pub fn extract_modspec(sig: &AudioSignal, spec: &FrameSpec) -> Result<ModFeatureTensor> {
    let mut t = extract_modspec_raw(sig, spec)?;
    normalize_frames(&mut t);
    Ok(t)
}

/// Divides every `[l, .., .., c]` slice by its Frobenius norm. All-zero slices
/// are left as they are.
pub fn normalize_frames(t: &mut ModFeatureTensor) {
    t.values
        .axis_iter_mut(Axis(0))
        .for_each(|mut frame| {
            for c in 0..frame.shape()[2] {
                let mut slice = frame.index_axis_mut(Axis(2), c);
                let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    slice.mapv_inplace(|v| v / norm);
                }
            }
        });
}

/// Per-`(band, modulation bin, channel)` statistics used for standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub mean: Array3<f64>,
    pub std: Array3<f64>,
}

/// Floor applied to standard deviations before dividing.
pub const STD_FLOOR: f64 = 1e-8;

impl StandardizationStats {
    /// Statistics over every frame of the given tensors.
    pub fn fit(tensors: &[&ModFeatureTensor]) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::invalid("standardisation needs at least one tensor"))?;
        let dims = first.values.shape();
        let (k, h, c) = (dims[1], dims[2], dims[3]);
        let mut sum = Array3::<f64>::zeros((k, h, c));
        let mut count = 0usize;
        for t in tensors {
            if t.values.shape()[1..] != dims[1..] {
                return Err(Error::shape("feature tensors differ in (K, H, C)"));
            }
            for frame in t.values.axis_iter(Axis(0)) {
                sum += &frame;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("standardisation tensors contain no frames"));
        }
        let mean = sum / count as f64;
        let mut sq = Array3::<f64>::zeros((k, h, c));
        for t in tensors {
            for frame in t.values.axis_iter(Axis(0)) {
                let d = &frame - &mean;
                sq += &(&d * &d);
            }
        }
        let std = (sq / count as f64).mapv(f64::sqrt);
        Ok(Self { mean, std })
    }

    pub fn apply(&self, t: &mut ModFeatureTensor) -> Result<()> {
        if t.values.shape()[1..] != *self.mean.shape() {
            return Err(Error::shape("tensor does not match standardisation stats"));
        }
        let std = self.std.mapv(|s| s.max(STD_FLOOR));
        for mut frame in t.values.axis_iter_mut(Axis(0)) {
            frame -= &self.mean;
            frame /= &std;
        }
        Ok(())
    }
}

/// Standardises every tensor with statistics from the tensors at `stats_from`
/// (the training-designated subset).
pub fn standardize(
    tensors: &mut [ModFeatureTensor],
    stats_from: &[usize],
) -> Result<StandardizationStats> {
    if stats_from.is_empty() {
        return Err(Error::invalid("standardisation statistics set is empty"));
    }
    let chosen = stats_from
        .iter()
        .map(|&i| {
            tensors
                .get(i)
                .ok_or_else(|| Error::invalid(format!("no tensor at index {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = StandardizationStats::fit(&chosen)?;
    for t in tensors.iter_mut() {
        stats.apply(t)?;
    }
    Ok(stats)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    const FS: u32 = 16000;

    /// Direct O(N^2) DFT, independent of rustfft.
    fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    fn am_tone(carrier: f64, mod_hz: f64, depth: f64, seconds: f64) -> AudioSignal {
        let n = (seconds * FS as f64) as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / FS as f64;
                let env = 1.0 + depth * (2.0 * PI * mod_hz * t).cos();
                (8000.0 * env * (2.0 * PI * carrier * t).sin()).round() as i16
            })
            .collect();
        AudioSignal::new(samples, FS).unwrap()
    }

    #[test]
    fn stft_matches_direct_dft_on_sine() {
        let sig = am_tone(1000.0, 0.0, 0.0, 0.02);
        let spec = FrameSpec::experiment1();
        let s = stft_acoustic(&sig, &spec).unwrap();
        assert_eq!(s.bins.ncols(), 25);
        let x = sig.to_f64();
        let w = hann(48);
        for t in [0usize, 5, 11] {
            let frame: Vec<f64> = (0..48).map(|i| x[t * 16 + i] * w[i]).collect();
            let oracle = dft_magnitudes(&frame);
            for k in 0..25 {
                assert!((s.bins[[t, k]].norm() - oracle[k]).abs() < 1e-9);
            }
            let row: Vec<f64> = (0..25).map(|k| s.bins[[t, k]].norm()).collect();
            assert_eq!(argmax(&row), 3, "1 kHz sits in bin 3 (333.3 Hz spacing)");
        }
    }

    #[test]
    fn stft_of_zero_and_impulse() {
        let spec = FrameSpec::experiment1();
        let zero = AudioSignal::new(vec![0; 480], FS).unwrap();
        let s = stft_acoustic(&zero, &spec).unwrap();
        assert!(s.bins.iter().all(|c| c.norm() == 0.0));

        let mut samples = vec![0i16; 48];
        samples[24] = 16384;
        let imp = AudioSignal::new(samples, FS).unwrap();
        let s = stft_acoustic(&imp, &spec).unwrap();
        let w = hann(48)[24] * 0.5;
        for k in 0..25 {
            assert!((s.bins[[0, k]].norm() - w).abs() < 1e-12);
        }
        let short = AudioSignal::new(vec![0; 40], FS).unwrap();
        assert!(stft_acoustic(&short, &spec).is_err());
    }

    #[test]
    fn constant_band_has_constant_envelope_and_no_deviation() {
        let sig = am_tone(1000.0, 0.0, 0.0, 1.2);
        let spec = FrameSpec::experiment1();
        let s = stft_acoustic(&sig, &spec).unwrap();
        let band = band_envelope_tfs(&s, 100..1100, 3);
        let mid = band.envelope[500];
        for (e, d) in band.envelope[10..990].iter().zip(&band.inst_freq_dev_hz[10..990]) {
            assert!(((e - mid) / mid).abs() < 1e-3, "{e} vs {mid}");
            assert!(d.abs() < 1.0, "deviation {d}");
        }
        assert!(band.envelope.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn off_centre_carrier_reports_its_offset() {
        let sig = am_tone(1100.0, 0.0, 0.0, 1.2);
        let s = stft_acoustic(&sig, &FrameSpec::experiment1()).unwrap();
        let band = band_envelope_tfs(&s, 100..1100, 3);
        for d in &band.inst_freq_dev_hz[10..990] {
            assert!((d - 100.0).abs() < 1.0, "deviation {d}");
        }
    }

    #[test]
    fn am_band_envelope_is_dominated_by_modulation_rate() {
        let sig = am_tone(1000.0, 8.0, 0.5, 1.2);
        let s = stft_acoustic(&sig, &FrameSpec::experiment1()).unwrap();
        let band = band_envelope_tfs(&s, 100..1100, 3);
        let mean = band.envelope.iter().sum::<f64>() / 1000.0;
        let centred: Vec<f64> = band.envelope.iter().map(|e| e - mean).collect();
        let spectrum = dft_magnitudes(&centred);
        assert_eq!(argmax(&spectrum), 8);
    }

    #[test]
    fn experiment1_shape_and_am_peak() {
        let spec = FrameSpec::experiment1();
        let sig = am_tone(1000.0, 8.0, 0.5, 3.0);
        let t = extract_modspec(&sig, &spec).unwrap();
        assert_eq!(t.values.shape(), &[12, 25, 501, 2]);
        assert_eq!(t.band_of(1000.0), 3);
        assert_eq!(t.mod_bin_of(8.0), 8);
        assert!(t.values.index_axis(Axis(3), ENV).iter().all(|&v| v >= 0.0));
        for l in 2..10 {
            let env = t.values.index_axis(Axis(0), l);
            let env = env.index_axis(Axis(2), ENV);
            let (idx, _) = env
                .indexed_iter()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap();
            assert_eq!(idx, (3, 8), "frame {l}");
        }
    }

    #[test]
    fn unmodulated_carrier_has_no_envelope_modulation() {
        let spec = FrameSpec::experiment1();
        let am = extract_modspec_raw(&am_tone(1000.0, 8.0, 0.5, 3.0), &spec).unwrap();
        let flat = extract_modspec_raw(&am_tone(1000.0, 0.0, 0.0, 3.0), &spec).unwrap();
        let peak = am.values[[5, 3, 8, ENV]];
        let worst = (0..501)
            .map(|h| flat.values[[5, 3, h, ENV]])
            .fold(0.0, f64::max);
        assert!(worst < 1e-2 * peak, "{worst} vs {peak}");
    }

    #[test]
    fn zero_signal_gives_zero_tensor() {
        let spec = FrameSpec::experiment1();
        let zero = AudioSignal::new(vec![0; 16000], FS).unwrap();
        let t = extract_modspec(&zero, &spec).unwrap();
        assert_eq!(t.frames(), 4);
        let bad: Vec<_> = t.values.indexed_iter().filter(|(_, &v)| v != 0.0).take(3).collect();
        assert!(bad.is_empty(), "{bad:?}");
    }

    #[test]
    fn gain_cancels_after_normalisation() {
        let spec = FrameSpec::experiment1();
        let a = am_tone(1000.0, 8.0, 0.5, 2.0);
        let b = AudioSignal::new(a.samples.iter().map(|&s| s / 2 * 2).collect(), FS).unwrap();
        let c = AudioSignal::new(b.samples.iter().map(|&s| s / 2).collect(), FS).unwrap();
        let tb = extract_modspec(&b, &spec).unwrap();
        let tc = extract_modspec(&c, &spec).unwrap();
        let env_b = tb.values.index_axis(Axis(3), ENV);
        let env_c = tc.values.index_axis(Axis(3), ENV);
        for (x, y) in env_b.iter().zip(env_c.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn shift_by_one_step_shifts_one_frame() {
        let spec = FrameSpec::experiment1();
        let sig = am_tone(1000.0, 8.0, 0.5, 2.0);
        let mut shifted = vec![0i16; 4000];
        shifted.extend_from_slice(&sig.samples);
        let shifted = AudioSignal::new(shifted, FS).unwrap();
        let a = extract_modspec(&sig, &spec).unwrap();
        let b = extract_modspec(&shifted, &spec).unwrap();
        assert_eq!(b.frames(), a.frames() + 1);
        for l in 0..a.frames() {
            let x = a.values.index_axis(Axis(0), l);
            let y = b.values.index_axis(Axis(0), l + 1);
            for (p, q) in x.index_axis(Axis(2), ENV).iter().zip(y.index_axis(Axis(2), ENV).iter()) {
                assert!((p - q).abs() <= 1e-6 * p.abs().max(1e-3), "frame {l}: {p} vs {q}");
            }
        }
    }

    fn tensor_from(values: Array4<f64>) -> ModFeatureTensor {
        let (_, k, h, _) = values.dim();
        ModFeatureTensor {
            values,
            frame_spec: FrameSpec::experiment1(),
            band_centers_hz: (0..k).map(|i| i as f64).collect(),
            mod_freqs_hz: (0..h).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn normalize_examples() {
        let mut t = tensor_from(Array4::ones((2, 25, 501, 2)));
        t.values.index_axis_mut(Axis(0), 1).index_axis_mut(Axis(2), TFS).fill(0.0);
        normalize_frames(&mut t);
        let expect = 1.0 / ((25 * 501) as f64).sqrt();
        assert!((t.values[[0, 4, 7, ENV]] - expect).abs() < 1e-15);
        assert!(t.values.index_axis(Axis(0), 1).index_axis(Axis(2), TFS).iter().all(|&v| v == 0.0));
        let once = t.clone();
        normalize_frames(&mut t);
        for (a, b) in once.values.iter().zip(t.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for l in 0..2 {
            let s = t.values.index_axis(Axis(0), l);
            let norm: f64 = s.index_axis(Axis(2), ENV).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_examples() {
        let mut a = Array4::<f64>::zeros((6, 2, 3, 2));
        for (i, v) in a.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64;
        }
        // A constant channel.
        a.index_axis_mut(Axis(1), 1).index_axis_mut(Axis(2), TFS).fill(3.5);
        let mut ts = vec![tensor_from(a.clone()), tensor_from(a.mapv(|v| v + 10.0))];
        let stats = standardize(&mut ts, &[0]).unwrap();
        assert_eq!(stats.mean.dim(), (2, 3, 2));
        for k in 0..2 {
            for h in 0..3 {
                for c in 0..2 {
                    let col: Vec<f64> = (0..6).map(|l| ts[0].values[[l, k, h, c]]).collect();
                    let mean = col.iter().sum::<f64>() / 6.0;
                    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
                    assert!(mean.abs() < 1e-12);
                    if k == 1 && c == TFS {
                        assert!(col.iter().all(|&v| v == 0.0));
                    } else {
                        assert!((var - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
        let second_mean = ts[1].values[[0, 0, 0, 0]];
        assert!(second_mean > 1.0, "second tensor keeps its offset");
        assert!(standardize(&mut ts, &[]).is_err());
        assert!(standardize(&mut ts, &[7]).is_err());
    }
}
