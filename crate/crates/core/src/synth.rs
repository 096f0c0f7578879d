//! Seeded synthetic ground truth and Monte Carlo prediction streams.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::signal::FrameSpec;
use crate::uq::SampleTensor;

/// Generator settings. Speaker activity is a two-state Markov chain; the
/// prediction stream flips frames with probability `p_flip` and scatters the
/// draws with `epistemic_spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub frames: usize,
    pub speakers: usize,
    pub draws: usize,
    /// Probability a speaker is talking in the first frame.
    pub p_initial: f64,
    /// Probability a silent speaker starts talking in the next frame.
    pub p_start: f64,
    /// Probability a talking speaker keeps talking in the next frame.
    pub p_continue: f64,
    pub p_flip: f64,
    /// How far a flipped base probability is pulled back toward 0.5, in [0, 1].
    pub flip_attenuation: f64,
    /// Standard deviation of Gaussian noise on unflipped base probabilities.
    pub jitter: f64,
    pub epistemic_spread: f64,
    pub seed: u64,
    pub frame_spec: FrameSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 1000,
            speakers: 4,
            draws: 50,
            p_initial: 0.25,
            p_start: 0.05,
            p_continue: 0.85,
            p_flip: 0.1,
            flip_attenuation: 0.5,
            jitter: 0.05,
            epistemic_spread: 0.1,
            seed: 0,
            frame_spec: FrameSpec::experiment1(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.speakers == 0 || self.draws == 0 {
            return Err(Error::invalid("frames, speakers and draws must be at least 1"));
        }
        for (name, p) in [
            ("p_initial", self.p_initial),
            ("p_start", self.p_start),
            ("p_continue", self.p_continue),
            ("p_flip", self.p_flip),
            ("flip_attenuation", self.flip_attenuation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        if !(self.jitter >= 0.0 && self.epistemic_spread >= 0.0) {
            return Err(Error::invalid("noise scales must be non-negative"));
        }
        self.frame_spec.validate()
    }

    /// Speaker ids `spk0`, `spk1`, ...
    pub fn speaker_ids(&self) -> Vec<String> {
        (0..self.speakers).map(|s| format!("spk{s}")).collect()
    }
}

/// Systematic per-model error regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSkew {
    None,
    /// On odd (or even) frames use a different flip rate and spread.
    CorruptParity { odd: bool, p_flip: f64, spread: f64 },
}

impl ModelSkew {
    fn salt(&self) -> u64 {
        match self {
            ModelSkew::None => 0x9e37_79b9_7f4a_7c15,
            ModelSkew::CorruptParity { odd: false, .. } => 0xbf58_476d_1ce4_e5b9,
            ModelSkew::CorruptParity { odd: true, .. } => 0x94d0_49bb_1331_11eb,
        }
    }

    fn noise_at(&self, l: usize, spec: &SynthSpec) -> (f64, f64) {
        match *self {
            ModelSkew::CorruptParity { odd, p_flip, spread } if (l % 2 == 1) == odd => (p_flip, spread),
            _ => (spec.p_flip, spec.epistemic_spread),
        }
    }
}

pub fn gen_truth(spec: &SynthSpec) -> Result<LabelMatrix> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Array2::zeros((spec.frames, spec.speakers));
    for s in 0..spec.speakers {
        let mut on = rng.random::<f64>() < spec.p_initial;
        for l in 0..spec.frames {
            if l > 0 {
                let p = if on { spec.p_continue } else { spec.p_start };
                on = rng.random::<f64>() < p;
            }
            values[[l, s]] = u8::from(on);
        }
    }
    LabelMatrix::new(values, spec.speaker_ids(), spec.frame_spec)
}

/// Draws `spec.draws` probability samples per (frame, speaker) around a base
/// probability derived from the truth.
pub fn gen_samples(truth: &LabelMatrix, spec: &SynthSpec, skew: &ModelSkew) -> Result<SampleTensor> {
    spec.validate()?;
    if let ModelSkew::CorruptParity { p_flip, spread, .. } = *skew {
        if !(0.0..=1.0).contains(&p_flip) || spread.is_nan() || spread < 0.0 {
            return Err(Error::invalid("skew flip rate must lie in [0, 1] and spread be non-negative"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ skew.salt());
    let (l_n, s_n) = truth.values.dim();
    let mut probs = Array3::zeros((spec.draws, l_n, s_n));
    for l in 0..l_n {
        let (p_flip, spread) = skew.noise_at(l, spec);
        for s in 0..s_n {
            let y = f64::from(truth.values[[l, s]]);
            let base = if p_flip > 0.0 && rng.random::<f64>() < p_flip {
                0.5 + (0.5 - y) * (1.0 - spec.flip_attenuation)
            } else if spec.jitter > 0.0 {
                (y + spec.jitter * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)
            } else {
                y
            };
            for n in 0..spec.draws {
                probs[[n, l, s]] = if spread > 0.0 {
                    (base + spread * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)
                } else {
                    base
                };
            }
        }
    }
    let id = match skew {
        ModelSkew::None => "synth".to_string(),
        ModelSkew::CorruptParity { odd: true, .. } => "synth-odd".to_string(),
        ModelSkew::CorruptParity { odd: false, .. } => "synth-even".to_string(),
    };
    SampleTensor::new(probs, id)
}
