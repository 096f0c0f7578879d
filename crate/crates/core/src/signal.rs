//! Audio ingestion, alignment padding and noise augmentation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono 16-bit PCM audio.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioSignal {
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<i16>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Duration in seconds.
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Samples scaled into [-1, 1).
    pub fn to_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64 / 32768.0).collect()
    }

    /// Mean power in the integer domain.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples
            .iter()
            .map(|&s| (s as f64) * (s as f64))
            .sum::<f64>()
            / self.samples.len() as f64
    }

    /// Reads a RIFF WAV file. Only mono 16-bit integer PCM is accepted.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let reader = hound::WavReader::open(path.as_ref()).map_err(wav_err)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Format(format!(
                "expected mono audio, found {} channels",
                spec.channels
            )));
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format(format!(
                "expected 16-bit integer PCM, found {} bit {:?}",
                spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate_hz,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(wav_err)?;
        for &s in &self.samples {
            writer.write_sample(s).map_err(wav_err)?;
        }
        writer.finalize().map_err(wav_err)
    }
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

/// Window and step lengths, in seconds, for the three framings in use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameSpec {
    /// Acoustic STFT window feeding the modulation spectrum.
    pub acoustic_window_s: f64,
    pub acoustic_step_s: f64,
    /// Modulation frame window and step; the step is the scoring frame.
    pub mod_window_s: f64,
    pub mod_step_s: f64,
    /// Cepstral analysis window and step.
    pub cepstral_window_s: f64,
    pub cepstral_step_s: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self::experiment1()
    }
}

impl FrameSpec {
    /// 3 ms / 1 ms acoustic frames, 1 s / 250 ms modulation frames and
    /// 30 ms / 10 ms cepstral frames.
    pub fn experiment1() -> Self {
        Self {
            acoustic_window_s: 0.003,
            acoustic_step_s: 0.001,
            mod_window_s: 1.0,
            mod_step_s: 0.25,
            cepstral_window_s: 0.030,
            cepstral_step_s: 0.010,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            ("acoustic", self.acoustic_window_s, self.acoustic_step_s),
            ("modulation", self.mod_window_s, self.mod_step_s),
            ("cepstral", self.cepstral_window_s, self.cepstral_step_s),
        ];
        for (name, window, step) in pairs {
            if !(window > 0.0 && step > 0.0 && window.is_finite() && step.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} window and step must be positive"
                )));
            }
            if step > window + 1e-12 {
                return Err(Error::invalid(format!(
                    "{name} step {step} exceeds window {window}"
                )));
            }
        }
        self.cepstral_group()?;
        Ok(())
    }

    /// Number of cepstral frames per modulation step (25 for experiment 1).
    pub fn cepstral_group(&self) -> Result<usize> {
        integral_ratio(self.mod_step_s, self.cepstral_step_s).ok_or_else(|| {
            Error::invalid(format!(
                "modulation step {} is not an integer multiple of cepstral step {}",
                self.mod_step_s, self.cepstral_step_s
            ))
        })
    }
}

/// `a / b` when it is a positive integer within floating tolerance.
pub(crate) fn integral_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let n = r.round();
    if n >= 1.0 && (r - n).abs() < 1e-6 {
        Some(n as usize)
    } else {
        None
    }
}

/// Seconds to whole samples, rounding to nearest.
pub(crate) fn to_samples(seconds: f64, sample_rate_hz: u32) -> usize {
    (seconds * sample_rate_hz as f64).round().max(0.0) as usize
}

/// Number of modulation frames, `ceil(T / F_m)`.
pub fn num_mod_frames(duration_s: f64, spec: &FrameSpec) -> Result<usize> {
    if duration_s.is_nan() || duration_s <= 0.0 || !duration_s.is_finite() {
        return Err(Error::invalid(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let ratio = duration_s / spec.mod_step_s;
    // Guard against 1.0 / 0.25 evaluating to 4.000000000000001.
    let nearest = ratio.round();
    if (ratio - nearest).abs() < 1e-9 {
        Ok(nearest as usize)
    } else {
        Ok(ratio.ceil() as usize)
    }
}

/// A zero-padded copy of a signal with the zero counts that were applied.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSignal {
    pub signal: AudioSignal,
    pub prepended: usize,
    pub appended: usize,
    /// Number of modulation frames the padding was laid out for.
    pub mod_frames: usize,
}

fn pad(sig: &AudioSignal, prepend_s: f64, append_s: f64, mod_frames: usize) -> PaddedSignal {
    let prepended = to_samples(prepend_s, sig.sample_rate_hz);
    let appended = to_samples(append_s, sig.sample_rate_hz);
    let mut samples = Vec::with_capacity(prepended + sig.samples.len() + appended);
    samples.resize(prepended, 0);
    samples.extend_from_slice(&sig.samples);
    samples.resize(samples.len() + appended, 0);
    PaddedSignal {
        signal: AudioSignal {
            samples,
            sample_rate_hz: sig.sample_rate_hz,
        },
        prepended,
        appended,
        mod_frames,
    }
}

/// Pads a signal so the modulation-spectrum framing yields exactly
/// `num_mod_frames(T)` frames centred on the scoring frames.
///
/// Prepends `[(W_m-F_m)+(W_a-F_a)]·f_s/2` zeros and appends the trailing fill
/// `(N_m·F_m-T)·f_s` plus the same half-window margin.
pub fn pad_for_modspec(sig: &AudioSignal, spec: &FrameSpec) -> Result<PaddedSignal> {
    let t = sig.duration_s();
    let n_m = num_mod_frames(t, spec)?;
    let margin = ((spec.mod_window_s - spec.mod_step_s)
        + (spec.acoustic_window_s - spec.acoustic_step_s))
        / 2.0;
    let fill = (n_m as f64 * spec.mod_step_s - t).max(0.0);
    Ok(pad(sig, margin, fill + margin, n_m))
}

/// Pads a signal for cepstral framing: `(W_a2-F_a2)·f_s/2` zeros in front,
/// trailing fill plus the same margin behind.
pub fn pad_for_cepstral(sig: &AudioSignal, spec: &FrameSpec) -> Result<PaddedSignal> {
    let t = sig.duration_s();
    let n_m = num_mod_frames(t, spec)?;
    let margin = (spec.cepstral_window_s - spec.cepstral_step_s) / 2.0;
    let fill = (n_m as f64 * spec.mod_step_s - t).max(0.0);
    Ok(pad(sig, margin, fill + margin, n_m))
}

fn saturate(v: f64) -> i16 {
    v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Adds white Gaussian noise scaled to the target SNR over the whole file.
///
/// `snr_db = +inf` disables augmentation and returns the input unchanged.
pub fn add_awgn(sig: &AudioSignal, snr_db: f64, seed: u64) -> Result<AudioSignal> {
    if snr_db == f64::INFINITY {
        return Ok(sig.clone());
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!("invalid SNR {snr_db} dB")));
    }
    let p_signal = sig.power();
    if p_signal == 0.0 {
        return Err(Error::invalid("SNR is undefined for an all-zero signal"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..sig.samples.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let p_noise = noise.iter().map(|n| n * n).sum::<f64>() / noise.len() as f64;
    let scale = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = sig
        .samples
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| saturate(s as f64 + (scale * n).round()))
        .collect();
    Ok(AudioSignal {
        samples,
        sample_rate_hz: sig.sample_rate_hz,
    })
}

/// Adds an independent uniform integer in [-4, 4] to every sample.
pub fn add_dither(sig: &AudioSignal, seed: u64) -> AudioSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = sig
        .samples
        .iter()
        .map(|&s| {
            let d: i32 = rng.random_range(-4..=4);
            (s as i32 + d).clamp(i16::MIN as i32, i16::MAX as i32) as i16
        })
        .collect();
    AudioSignal {
        samples,
        sample_rate_hz: sig.sample_rate_hz,
    }
}

/// Measured SNR in dB of `noisy` against `clean`.
pub fn measured_snr_db(clean: &AudioSignal, noisy: &AudioSignal) -> f64 {
    let p_s = clean.power();
    let p_n = clean
        .samples
        .iter()
        .zip(&noisy.samples)
        .map(|(&a, &b)| {
            let d = b as f64 - a as f64;
            d * d
        })
        .sum::<f64>()
        / clean.samples.len().max(1) as f64;
    10.0 * (p_s / p_n).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, seconds: f64, fs: u32) -> AudioSignal {
        let n = (seconds * fs as f64) as usize;
        let samples = (0..n)
            .map(|i| saturate(amp * (2.0 * std::f64::consts::PI * freq * i as f64 / fs as f64).sin()))
            .collect();
        AudioSignal::new(samples, fs).unwrap()
    }

    #[test]
    fn mod_frame_counts() {
        let spec = FrameSpec::experiment1();
        assert_eq!(num_mod_frames(1043.360, &spec).unwrap(), 4174);
        assert_eq!(num_mod_frames(1.0, &spec).unwrap(), 4);
        assert_eq!(num_mod_frames(1.01, &spec).unwrap(), 5);
        assert!(matches!(
            num_mod_frames(0.0, &spec),
            Err(Error::InvalidArgument(_))
        ));
        assert!(num_mod_frames(-1.0, &spec).is_err());
    }

    #[test]
    fn modspec_padding_counts() {
        let spec = FrameSpec::experiment1();
        let sig = AudioSignal::new(vec![7; 16000], 16000).unwrap();
        let p = pad_for_modspec(&sig, &spec).unwrap();
        assert_eq!(p.prepended, 6016);
        assert_eq!(p.appended, 6016);
        assert_eq!(p.signal.samples.len(), 16000 + 2 * 6016);
        assert!(p.signal.samples[..6016].iter().all(|&s| s == 0));
        assert_eq!(&p.signal.samples[6016..6016 + 16000], &sig.samples[..]);

        // 1.01 s needs 0.24 s of trailing fill to reach 5 frames.
        let sig = AudioSignal::new(vec![1; 16160], 16000).unwrap();
        let p = pad_for_modspec(&sig, &spec).unwrap();
        assert_eq!(p.mod_frames, 5);
        assert_eq!(p.appended, 6016 + 3840);
    }

    #[test]
    fn no_padding_when_windows_equal_steps() {
        let spec = FrameSpec {
            acoustic_window_s: 0.001,
            acoustic_step_s: 0.001,
            mod_window_s: 0.25,
            mod_step_s: 0.25,
            cepstral_window_s: 0.01,
            cepstral_step_s: 0.01,
        };
        let sig = AudioSignal::new(vec![3; 8000], 16000).unwrap();
        let p = pad_for_modspec(&sig, &spec).unwrap();
        assert_eq!((p.prepended, p.appended), (0, 0));
        let p = pad_for_cepstral(&sig, &spec).unwrap();
        assert_eq!((p.prepended, p.appended), (0, 0));
        assert_eq!(p.signal, sig);
    }

    #[test]
    fn cepstral_padding_counts() {
        let spec = FrameSpec::experiment1();
        let sig = AudioSignal::new(vec![1; 16000], 16000).unwrap();
        let p = pad_for_cepstral(&sig, &spec).unwrap();
        assert_eq!(p.prepended, 160);
        assert_eq!(p.appended, 160);
    }

    #[test]
    fn frame_spec_validation() {
        assert!(FrameSpec::experiment1().validate().is_ok());
        let mut bad = FrameSpec::experiment1();
        bad.mod_step_s = 0.255;
        assert!(bad.validate().is_err());
        let mut bad = FrameSpec::experiment1();
        bad.acoustic_step_s = 0.004;
        assert!(bad.validate().is_err());
        assert_eq!(FrameSpec::experiment1().cepstral_group().unwrap(), 25);
    }

    #[test]
    fn awgn_hits_target_snr() {
        let sig = sine(440.0, 8000.0, 1.0, 16000);
        let noisy = add_awgn(&sig, 30.0, 1).unwrap();
        let snr = measured_snr_db(&sig, &noisy);
        assert!((snr - 30.0).abs() < 0.1, "snr {snr}");
    }

    #[test]
    fn awgn_zero_db_noise_matches_signal_power() {
        let sig = sine(1000.0, 10000.0, 2.0, 16000);
        let noisy = add_awgn(&sig, 0.0, 9).unwrap();
        let p_noise = sig
            .samples
            .iter()
            .zip(&noisy.samples)
            .map(|(&a, &b)| (b as f64 - a as f64).powi(2))
            .sum::<f64>()
            / sig.samples.len() as f64;
        let ratio = p_noise / sig.power();
        assert!((ratio - 1.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn awgn_disabled_and_errors() {
        let sig = sine(440.0, 1000.0, 0.1, 16000);
        assert_eq!(add_awgn(&sig, f64::INFINITY, 3).unwrap(), sig);
        let zero = AudioSignal::new(vec![0; 100], 16000).unwrap();
        assert!(matches!(
            add_awgn(&zero, 30.0, 3),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!(add_awgn(&sig, 20.0, 5).unwrap(), add_awgn(&sig, 20.0, 5).unwrap());
        assert_ne!(add_awgn(&sig, 20.0, 5).unwrap(), add_awgn(&sig, 20.0, 6).unwrap());
    }

    #[test]
    fn dither_bounds_and_determinism() {
        let zero = AudioSignal::new(vec![0; 10_000], 16000).unwrap();
        let d = add_dither(&zero, 11);
        assert!(d.samples.iter().all(|&s| (-4..=4).contains(&s)));
        assert!(d.samples.contains(&4) && d.samples.contains(&-4));
        assert_eq!(d, add_dither(&zero, 11));

        let loud = AudioSignal::new(vec![i16::MAX, i16::MIN, i16::MAX, i16::MIN], 16000).unwrap();
        let d = add_dither(&loud, 2);
        assert!(d.samples[0] >= i16::MAX - 4 && d.samples[1] <= i16::MIN + 4);
    }

    #[test]
    fn wav_round_trip_and_rejects_stereo() {
        let dir = std::env::temp_dir().join(format!("diaruq-wav-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mono.wav");
        let sig = sine(300.0, 5000.0, 0.05, 16000);
        sig.write_wav(&path).unwrap();
        assert_eq!(AudioSignal::read_wav(&path).unwrap(), sig);

        let stereo = dir.join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..10 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(matches!(AudioSignal::read_wav(&stereo), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
