//! TOML documents read by the commands. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use diaruq::reseg::SmootherConfig;
use diaruq::synth::{ModelSkew, SynthSpec};
use diaruq::FrameSpec;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

/// Parses a TOML file; syntax and schema errors carry line and column.
pub fn load_toml<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
        _ => CliError::io(path)(e),
    })?;
    toml::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Resegmentation {
    /// Threshold the mean probabilities only.
    None,
    /// Gap bridging and spike removal on the thresholded means.
    Smooth,
    /// Kalman smoothing; several sample files are fused.
    #[default]
    Kalman,
}

/// Optional feature extraction step of a run.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractStep {
    pub audio: PathBuf,
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_kind() -> String {
    "modspec".into()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Identifier written into RTTM output.
    #[serde(default = "default_file_id")]
    pub file_id: String,
    #[serde(default)]
    pub frame: FrameSpec,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_gap")]
    pub gap: usize,
    #[serde(default)]
    pub resegmentation: Resegmentation,
    #[serde(default)]
    pub forward_only: bool,
    #[serde(default)]
    pub smoother: Option<SmootherConfig>,
    #[serde(default)]
    pub collar_s: f64,
    #[serde(default)]
    pub permute: bool,
    #[serde(default)]
    pub extract: Option<ExtractStep>,
    pub paths: RunPaths,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    /// Monte Carlo sample containers, one per model.
    pub samples: Vec<PathBuf>,
    /// Reference utterances, `speaker_id,start_s,end_s`.
    pub truth: PathBuf,
    #[serde(default)]
    pub sad: Option<PathBuf>,
    pub out_dir: PathBuf,
}

fn default_file_id() -> String {
    "file".into()
}

fn default_lambda() -> f64 {
    0.5
}

fn default_gap() -> usize {
    diaruq::reseg::DEFAULT_GAP
}

impl RunConfig {
    /// Loads and validates a run configuration; relative paths resolve
    /// against the configuration file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg: RunConfig = load_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.paths.samples.iter_mut().for_each(fix);
        fix(&mut cfg.paths.truth);
        fix(&mut cfg.paths.out_dir);
        if let Some(p) = cfg.paths.sad.as_mut() {
            fix(p);
        }
        if let Some(e) = cfg.extract.as_mut() {
            fix(&mut e.audio);
        }
        cfg.validate().map_err(|message| CliError::Config { path: path.to_path_buf(), message })?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        self.frame.validate().map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda = {} must lie in [0, 1]", self.lambda));
        }
        if self.paths.samples.is_empty() {
            return Err("paths.samples must name at least one sample file".into());
        }
        if self.resegmentation != Resegmentation::Kalman && self.paths.samples.len() > 1 {
            return Err("several sample files need resegmentation = \"kalman\"".into());
        }
        if let Some(s) = &self.smoother {
            s.validate().map_err(|e| e.to_string())?;
            if s.h.len() != self.paths.samples.len() {
                return Err(format!("smoother.h has {} factors for {} models", s.h.len(), self.paths.samples.len()));
            }
        }
        if let Some(e) = &self.extract {
            if e.kind != "modspec" && e.kind != "mfcc" {
                return Err(format!("extract.kind must be \"modspec\" or \"mfcc\", not {:?}", e.kind));
            }
        }
        if self.collar_s.is_nan() || self.collar_s < 0.0 {
            return Err("collar_s must be non-negative".into());
        }
        Ok(())
    }

    /// Every file the run reads.
    pub fn inputs(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = self.paths.samples.iter().map(PathBuf::as_path).collect();
        v.push(&self.paths.truth);
        v.extend(self.paths.sad.as_deref());
        v.extend(self.extract.as_ref().map(|e| e.audio.as_path()));
        v
    }
}

/// `diaruq synth` input: generator settings plus one entry per model.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    #[serde(default)]
    pub synth: SynthSpec,
    #[serde(default = "default_models")]
    pub models: Vec<ModelSkew>,
}

fn default_models() -> Vec<ModelSkew> {
    vec![ModelSkew::None]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = toml::from_str::<RunConfig>("lamda = 0.5\n[paths]\nsamples=[]\ntruth='t'\nout_dir='o'\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("lamda"), "{msg}");
    }

    #[test]
    fn defaults_fill_in() {
        let cfg: RunConfig = toml::from_str("[paths]\nsamples=['a.duqs']\ntruth='t.csv'\nout_dir='out'\n").unwrap();
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.gap, 3);
        assert_eq!(cfg.resegmentation, Resegmentation::Kalman);
        assert_eq!(cfg.frame, FrameSpec::experiment1());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_frame_table() {
        let cfg: RunConfig =
            toml::from_str("[frame]\nmod_step_s = 0.5\n[paths]\nsamples=['a.duqs']\ntruth='t.csv'\nout_dir='out'\n").unwrap();
        assert_eq!(cfg.frame.mod_step_s, 0.5);
        assert_eq!(cfg.frame.mod_window_s, FrameSpec::experiment1().mod_window_s);
        assert!(toml::from_str::<RunConfig>("[frame]\nstep = 1\n[paths]\nsamples=[]\ntruth='t'\nout_dir='o'\n").is_err());
    }

    #[test]
    fn synth_file_with_models() {
        let f: SynthFile = toml::from_str(
            "[synth]\nframes = 10\nseed = 4\n[[models]]\nkind = 'corrupt-parity'\nodd = true\np_flip = 0.3\nspread = 0.2\n",
        )
        .unwrap();
        assert_eq!(f.synth.frames, 10);
        assert_eq!(f.models, vec![ModelSkew::CorruptParity { odd: true, p_flip: 0.3, spread: 0.2 }]);
        assert!(toml::from_str::<SynthFile>("[synth]\nframez = 1\n").is_err());
    }
}
