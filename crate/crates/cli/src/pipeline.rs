//! `diaruq run`: aggregate, resegment and score one file as configured.

use diaruq::modspec::extract_modspec;
use diaruq::cepstral::{extract_cepstral, MfccConfig};
use diaruq::reseg::{simple_smooth, SmootherConfig};
use diaruq::score::{apply_gt_sad, classification_metrics, frame_der, frames_to_segments, time_der, SegmentList, TimeDerOptions};
use diaruq::signal::add_awgn;
use diaruq::uq::{mean_probs, threshold_matrix};
use diaruq::AudioSignal;
use ndarray::Array2;

use crate::commands::{aggregate_model, analysis, load_models, make_out_dir, smooth_models, ScoreReport};
use crate::config::{Resegmentation, RunConfig};
use crate::container::{Container, Kind, Metadata};
use crate::error::{CliError, CliResult};
use crate::io;

/// Runs the configured pipeline and writes `score.json`, `predictions.csv`,
/// `predictions.rttm`, `entropy.csv` and `calibration.csv` (plus
/// `features.duqt` when extraction is configured) into the output directory.
/// Every input is loaded before anything is written.
pub fn run_pipeline(cfg: &RunConfig) -> CliResult<ScoreReport> {
    io::require_inputs(cfg.inputs())?;
    let spec = cfg.frame;
    let models = load_models(&cfg.paths.samples)?;
    let speakers = models[0].speakers.clone();
    if let Some(s) = models[0].frame_spec.filter(|s| *s != spec) {
        return Err(CliError::Validation(format!(
            "{} was produced with frame step {} s but the run uses {} s",
            cfg.paths.samples[0].display(),
            s.mod_step_s,
            spec.mod_step_s
        )));
    }
    let frames = models[0].samples.frames();
    let truth = io::reference_labels(&cfg.paths.truth, &spec, frames, Some(&speakers))?;
    let truth_segs = SegmentList::new(io::read_utterances(&cfg.paths.truth)?)?;
    let sad = cfg.paths.sad.as_deref().map(io::read_sad).transpose()?;
    let features = match &cfg.extract {
        Some(e) => {
            let mut sig = AudioSignal::read_wav(&e.audio).map_err(CliError::input(&e.audio))?;
            if let Some(snr) = e.snr_db {
                sig = add_awgn(&sig, snr, e.seed).map_err(CliError::input(&e.audio))?;
            }
            let data = if e.kind == "mfcc" {
                extract_cepstral(&sig, &spec, &MfccConfig::default(), 2)?.values.mapv(|v| v as f32).into_dyn()
            } else {
                extract_modspec(&sig, &spec)?.values.mapv(|v| v as f32).into_dyn()
            };
            Some(Container {
                kind: Kind::Tensor,
                data,
                meta: Metadata { frame_spec: Some(spec), speaker_order: vec![], model_id: e.kind.clone() },
            })
        }
        None => None,
    };

    let (probs, preds): (Array2<f64>, Array2<u8>) = match cfg.resegmentation {
        Resegmentation::Kalman => {
            let smoother = match &cfg.smoother {
                Some(s) => s.clone(),
                None => SmootherConfig { lambda: cfg.lambda, ..SmootherConfig::for_models(models.len()) },
            };
            let out = smooth_models(&models, &smoother, cfg.forward_only)?;
            (out.x.mapv(|v| v.clamp(0.0, 1.0)), out.predictions(smoother.lambda))
        }
        mode => {
            let p = mean_probs(&aggregate_model(&models[0], cfg.lambda, false)?);
            let t = threshold_matrix(&p, cfg.lambda);
            let t = if mode == Resegmentation::Smooth { simple_smooth(&t, cfg.gap) } else { t };
            (p, t)
        }
    };

    let frame = frame_der(&truth, &preds)?;
    let classification = classification_metrics(&truth, &preds)?;
    let pred_segs = frames_to_segments(&preds, &spec, &speakers)?;
    let pred_segs = match &sad {
        Some(mask) => apply_gt_sad(&pred_segs, mask),
        None => pred_segs,
    };
    let opts = TimeDerOptions { collar_s: cfg.collar_s, speakers: Some(speakers.clone()), permute: cfg.permute };
    let time = time_der(&truth_segs, &pred_segs, &opts)?;
    let report = ScoreReport { frame: Some(frame), time, classification: Some(classification) };
    let extra = analysis(&probs, &preds, &truth, 20)?;

    let out = &cfg.paths.out_dir;
    make_out_dir(out)?;
    if let Some(f) = features {
        f.write(&out.join("features.duqt"))?;
    }
    io::write_predictions(&out.join("predictions.csv"), &preds, &speakers)?;
    io::write_core(&out.join("predictions.rttm"), |w| pred_segs.write_rttm(&cfg.file_id, w))?;
    extra.write(out, false)?;
    let json = crate::commands::score_json(&report);
    io::write_with(&out.join("score.json"), |w| writeln!(w, "{json}"))?;
    Ok(report)
}
