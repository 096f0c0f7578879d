//! Mel-cepstral features with deltas, grouped onto modulation frames.

use ndarray::{s, Array2, Array3};

use crate::dsp::{hann, Stft};
use crate::error::{Error, Result};
use crate::signal::{num_mod_frames, pad_for_cepstral, to_samples, AudioSignal, FrameSpec};

/// Cepstra grouped as `[modulation frame, cepstral frame within it, coefficient]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstralTensor {
    pub values: Array3<f64>,
    pub frame_spec: FrameSpec,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccConfig {
    pub n_mels: usize,
    pub n_ceps: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mels: 32,
            n_ceps: 19,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the mel scale between 0 Hz and
/// Nyquist, `[filter, fft bin]`.
pub fn mel_filterbank(n_mels: usize, fft_len: usize, sample_rate_hz: u32) -> Array2<f64> {
    let bins = fft_len / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for b in 0..bins {
            let f = b as f64 * sample_rate_hz as f64 / fft_len as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, b]] = w;
        }
    }
    fb
}

/// Orthonormal DCT-II matrix truncated to the first `n_out` rows.
fn dct_matrix(n_in: usize, n_out: usize) -> Array2<f64> {
    Array2::from_shape_fn((n_out, n_in), |(i, m)| {
        let scale = if i == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        scale * (std::f64::consts::PI * i as f64 * (m as f64 + 0.5) / n_in as f64).cos()
    })
}

/// Mel cepstra of an already padded signal, one row per cepstral frame.
///
/// Pre-emphasis, Hann-windowed power spectrum, mel filterbank, floored
/// natural log, orthonormal DCT-II; coefficient 0 is kept.
pub fn extract_mfcc(sig: &AudioSignal, spec: &FrameSpec, cfg: &MfccConfig) -> Result<Array2<f64>> {
    let window = to_samples(spec.cepstral_window_s, sig.sample_rate_hz);
    let hop = to_samples(spec.cepstral_step_s, sig.sample_rate_hz);
    if window == 0 || hop == 0 {
        return Err(Error::invalid("cepstral window and step must be at least one sample"));
    }
    if cfg.n_ceps > cfg.n_mels {
        return Err(Error::invalid("more cepstra requested than mel filters"));
    }
    let x = sig.to_f64();
    let mut emphasised = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for &v in &x {
        emphasised.push(v - cfg.pre_emphasis * prev);
        prev = v;
    }
    let fft_len = window.next_power_of_two();
    let power = Stft::new(hann(window), hop, fft_len)?.power(&emphasised)?;
    let fb = mel_filterbank(cfg.n_mels, fft_len, sig.sample_rate_hz);
    let mel = power.dot(&fb.t()).mapv(|e| e.max(cfg.log_floor).ln());
    Ok(mel.dot(&dct_matrix(cfg.n_mels, cfg.n_ceps).t()))
}

/// Appends regression deltas (window of +-2 frames, edges replicated).
/// `order` 1 gives `[c, d]`, order 2 gives `[c, d, dd]`.
pub fn add_deltas(c: &Array2<f64>, order: usize) -> Result<Array2<f64>> {
    if !(1..=2).contains(&order) {
        return Err(Error::invalid(format!("delta order must be 1 or 2, got {order}")));
    }
    if c.nrows() < 5 {
        return Err(Error::invalid(format!(
            "deltas need at least 5 frames, got {}",
            c.nrows()
        )));
    }
    let d1 = deltas(c);
    let (frames, dims) = c.dim();
    let mut out = Array2::zeros((frames, dims * (order + 1)));
    out.slice_mut(s![.., ..dims]).assign(c);
    out.slice_mut(s![.., dims..2 * dims]).assign(&d1);
    if order == 2 {
        out.slice_mut(s![.., 2 * dims..]).assign(&deltas(&d1));
    }
    Ok(out)
}

fn deltas(c: &Array2<f64>) -> Array2<f64> {
    let last = c.nrows() as isize - 1;
    let at = |t: isize| c.row(t.clamp(0, last) as usize);
    Array2::from_shape_fn(c.dim(), |(t, d)| {
        let t = t as isize;
        (1..=2)
            .map(|n| n as f64 * (at(t + n)[d] - at(t - n)[d]))
            .sum::<f64>()
            / 10.0
    })
}

/// Groups cepstral frames in lots of `F_m / F_a2`, modulation frame `l`
/// owning rows `[g*l, g*l + g)`.
pub fn group_frames(c: &Array2<f64>, spec: &FrameSpec, frames: usize) -> Result<CepstralTensor> {
    let g = spec.cepstral_group()?;
    if c.nrows() < g * frames {
        return Err(Error::invalid(format!(
            "{} cepstral frames cannot fill {frames} groups of {g}",
            c.nrows()
        )));
    }
    let dims = c.ncols();
    let values = c
        .slice(s![..g * frames, ..])
        .to_owned()
        .into_shape_with_order((frames, g, dims))
        .expect("contiguous");
    Ok(CepstralTensor {
        values,
        frame_spec: *spec,
    })
}

/// Pads a raw signal, extracts cepstra, optionally adds deltas (`delta_order`
/// 0, 1 or 2) and groups them onto the modulation frames.
pub fn extract_cepstral(
    sig: &AudioSignal,
    spec: &FrameSpec,
    cfg: &MfccConfig,
    delta_order: usize,
) -> Result<CepstralTensor> {
    spec.validate()?;
    let frames = num_mod_frames(sig.duration_s(), spec)?;
    let padded = pad_for_cepstral(sig, spec)?;
    let mut c = extract_mfcc(&padded.signal, spec, cfg)?;
    if delta_order > 0 {
        c = add_deltas(&c, delta_order)?;
    }
    group_frames(&c, spec, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seconds: f64, amp: i16, seed: u64) -> AudioSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * 16000.0) as usize;
        AudioSignal::new((0..n).map(|_| rng.random_range(-amp..=amp)).collect(), 16000).unwrap()
    }

    fn tone(hz: f64) -> AudioSignal {
        let samples = (0..16000)
            .map(|i| (8000.0 * (2.0 * std::f64::consts::PI * hz * i as f64 / 16000.0).sin()) as i16)
            .collect();
        AudioSignal::new(samples, 16000).unwrap()
    }

    #[test]
    fn gain_moves_only_c0() {
        let spec = FrameSpec::experiment1();
        let cfg = MfccConfig::default();
        let a = noise(0.5, 4000, 3);
        let b = AudioSignal::new(a.samples.iter().map(|&s| s * 2).collect(), 16000).unwrap();
        let ca = extract_mfcc(&a, &spec, &cfg).unwrap();
        let cb = extract_mfcc(&b, &spec, &cfg).unwrap();
        assert_eq!(ca.ncols(), 19);
        let offset = 4f64.ln() * (32f64).sqrt();
        for t in 0..ca.nrows() {
            assert!((cb[[t, 0]] - ca[[t, 0]] - offset).abs() < 1e-6);
            for d in 1..19 {
                assert!((cb[[t, d]] - ca[[t, d]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn silence_gives_identical_frames() {
        let spec = FrameSpec::experiment1();
        let c = extract_mfcc(&AudioSignal::new(vec![0; 4800], 16000).unwrap(), &spec, &MfccConfig::default()).unwrap();
        for t in 1..c.nrows() {
            assert_eq!(c.row(t), c.row(0));
        }
        let short = AudioSignal::new(vec![0; 100], 16000).unwrap();
        assert!(extract_mfcc(&short, &spec, &MfccConfig::default()).is_err());
    }

    #[test]
    fn different_tones_differ() {
        let spec = FrameSpec::experiment1();
        let cfg = MfccConfig::default();
        let a = extract_mfcc(&tone(1000.0), &spec, &cfg).unwrap();
        let b = extract_mfcc(&tone(2000.0), &spec, &cfg).unwrap();
        let dist = a
            .row(20)
            .iter()
            .zip(b.row(20).iter())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 0.1, "distance {dist}");
    }

    #[test]
    fn delta_identities() {
        let constant = Array2::from_elem((8, 3), 2.5);
        let d = add_deltas(&constant, 2).unwrap();
        assert_eq!(d.ncols(), 9);
        assert!(d.slice(s![.., 3..]).iter().all(|&v| v == 0.0));

        let ramp = Array2::from_shape_fn((12, 2), |(t, c)| (c as f64 + 1.0) * 0.5 * t as f64);
        let d = add_deltas(&ramp, 2).unwrap();
        for t in 2..10 {
            assert!((d[[t, 2]] - 0.5).abs() < 1e-12);
            assert!((d[[t, 3]] - 1.0).abs() < 1e-12);
        }
        for t in 4..8 {
            assert!(d[[t, 4]].abs() < 1e-12 && d[[t, 5]].abs() < 1e-12);
        }
        assert!(add_deltas(&Array2::zeros((4, 2)), 1).is_err());
        assert!(add_deltas(&ramp, 3).is_err());
    }

    #[test]
    fn grouping() {
        let spec = FrameSpec::experiment1();
        let c = Array2::from_shape_fn((100, 19), |(t, d)| (t * 19 + d) as f64);
        let g = group_frames(&c, &spec, 4).unwrap();
        assert_eq!(g.values.dim(), (4, 25, 19));
        assert_eq!(g.values[[1, 0, 0]], c[[25, 0]]);
        assert_eq!(g.values[[3, 24, 18]], c[[99, 18]]);
        let c99 = Array2::<f64>::zeros((99, 19));
        assert!(group_frames(&c99, &spec, 4).is_err());
    }

    #[test]
    fn grouped_cepstra_align_with_modulation_frames() {
        let spec = FrameSpec::experiment1();
        for seconds in [1.0, 1.01, 2.3] {
            let sig = noise(seconds, 1000, 1);
            let t = extract_cepstral(&sig, &spec, &MfccConfig::default(), 0).unwrap();
            let expect = num_mod_frames(sig.duration_s(), &spec).unwrap();
            assert_eq!(t.values.dim(), (expect, 25, 19));
            let padded = pad_for_cepstral(&sig, &spec).unwrap();
            let raw = extract_mfcc(&padded.signal, &spec, &MfccConfig::default()).unwrap();
            assert_eq!(raw.nrows(), 25 * expect);
        }
        let sig = noise(1.0, 1000, 2);
        let a = extract_cepstral(&sig, &spec, &MfccConfig::default(), 2).unwrap();
        let b = extract_cepstral(&sig, &spec, &MfccConfig::default(), 2).unwrap();
        assert_eq!(a.values.dim(), (4, 25, 57));
        assert_eq!(a, b);
    }
}
