//! One function per subcommand. Inputs are read and validated before the
//! output directory is touched.

use std::path::{Path, PathBuf};

use diaruq::cepstral::{extract_cepstral, MfccConfig};
use diaruq::labels::{meeting_stats, parse_words_xml, write_utterances_csv, MeetingStats, Utterance, DEFAULT_MERGE_GAP_S};
use diaruq::modspec::{extract_modspec, extract_modspec_raw};
use diaruq::reseg::{fit_hyperparams, forward_only, kalman_smooth, simple_smooth, GridSpec, KalmanOutput, ObservationSet, SmootherConfig};
use diaruq::score::{apply_gt_sad, classification_metrics, frame_der, frames_to_segments, time_der, ClassificationMetrics, FrameScore, SegmentList, TimeDerOptions, TimeScore};
use diaruq::signal::{add_awgn, add_dither};
use diaruq::synth::{gen_samples, gen_truth};
use diaruq::uq::{aggregate, calibration_curve, entropy_report, frame_entropy, mean_probs, modal_preds, threshold_matrix, write_calibration_csv, AggregateOptions, SIGMA_FLOOR};
use diaruq::{AudioSignal, FrameSpec, FrameUncertainty, LabelMatrix, SampleTensor};
use ndarray::Array2;
use serde::Serialize;

use crate::config::{load_toml, SynthFile};
use crate::container::{read_samples_csv, Container, Kind, Metadata};
use crate::error::{CliError, CliResult};
use crate::io;
use crate::svg::entropy_svg;

/// A sample tensor with the metadata it was stored with.
pub struct Model {
    pub samples: SampleTensor,
    pub speakers: Vec<String>,
    pub frame_spec: Option<FrameSpec>,
}

/// Reads a `.duqs` container, or the long CSV format for `.csv` paths.
pub fn load_model(path: &Path) -> CliResult<Model> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let (samples, speakers) = read_samples_csv(io::open(path)?, &id).map_err(CliError::input(path))?;
        return Ok(Model { samples, speakers, frame_spec: None });
    }
    let c = Container::read(path)?;
    let meta = c.meta.clone();
    let samples = c.into_samples().map_err(CliError::input(path))?;
    let speakers = if meta.speaker_order.is_empty() {
        (0..samples.speakers()).map(|s| format!("spk{s}")).collect()
    } else {
        meta.speaker_order
    };
    Ok(Model { samples, speakers, frame_spec: meta.frame_spec })
}

pub fn load_models(paths: &[PathBuf]) -> CliResult<Vec<Model>> {
    io::require_inputs(paths.iter().map(PathBuf::as_path))?;
    let models: Vec<Model> = paths.iter().map(|p| load_model(p)).collect::<CliResult<_>>()?;
    if let Some(first) = models.first() {
        for (m, p) in models.iter().zip(paths).skip(1) {
            if (m.samples.frames(), m.samples.speakers()) != (first.samples.frames(), first.samples.speakers()) {
                return Err(CliError::Validation(format!("{}: frame or speaker count differs from {}", p.display(), paths[0].display())));
            }
            if m.speakers != first.speakers {
                return Err(CliError::Validation(format!("{}: speaker order differs from {}", p.display(), paths[0].display())));
            }
        }
    }
    Ok(models)
}

pub fn frame_spec_or_default(path: Option<&Path>) -> CliResult<FrameSpec> {
    match path {
        Some(p) => {
            let spec: FrameSpec = load_toml(p)?;
            spec.validate().map_err(CliError::input(p))?;
            Ok(spec)
        }
        None => Ok(FrameSpec::experiment1()),
    }
}

pub fn make_out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    io::write_with(path, |w| writeln!(w, "{text}"))
}

fn write_rttm(path: &Path, preds: &Array2<u8>, spec: &FrameSpec, speakers: &[String], file_id: &str) -> CliResult<()> {
    let segs = frames_to_segments(preds, spec, speakers)?;
    io::write_core(path, |w| segs.write_rttm(file_id, w))
}

fn write_states(path: &Path, out: &KalmanOutput, speakers: &[String]) -> CliResult<()> {
    io::write_with(path, |w| {
        writeln!(w, "frame,speaker,state,variance,regularized")?;
        for ((l, s), x) in out.x.indexed_iter() {
            let flagged = out.flagged.binary_search(&(l, s)).is_ok();
            writeln!(w, "{l},{},{x:.9},{:.9e},{}", speakers[s], out.p[[l, s]], u8::from(flagged))?;
        }
        Ok(())
    })
}

pub struct ExtractArgs<'a> {
    pub kind: &'a str,
    pub input: &'a Path,
    pub output: &'a Path,
    pub config: Option<&'a Path>,
    pub snr_db: Option<f64>,
    pub dither: bool,
    pub seed: u64,
    pub raw: bool,
    pub deltas: usize,
}

pub fn extract(a: &ExtractArgs) -> CliResult<()> {
    io::require_inputs([a.input])?;
    let spec = frame_spec_or_default(a.config)?;
    let mut sig = AudioSignal::read_wav(a.input).map_err(CliError::input(a.input))?;
    if let Some(snr) = a.snr_db {
        sig = add_awgn(&sig, snr, a.seed).map_err(CliError::input(a.input))?;
    }
    if a.dither {
        sig = add_dither(&sig, a.seed.wrapping_add(1));
    }
    let data = match a.kind {
        "modspec" => {
            let t = if a.raw { extract_modspec_raw(&sig, &spec)? } else { extract_modspec(&sig, &spec)? };
            t.values.mapv(|v| v as f32).into_dyn()
        }
        "mfcc" => extract_cepstral(&sig, &spec, &MfccConfig::default(), a.deltas)?.values.mapv(|v| v as f32).into_dyn(),
        other => return Err(CliError::Validation(format!("unknown feature kind {other:?}"))),
    };
    let c = Container {
        kind: Kind::Tensor,
        data,
        meta: Metadata { frame_spec: Some(spec), speaker_order: vec![], model_id: a.kind.to_string() },
    };
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        make_out_dir(dir)?;
    }
    c.write(a.output)
}

pub fn aggregate_model(m: &Model, lambda: f64, fit: bool) -> CliResult<Array2<FrameUncertainty>> {
    Ok(aggregate(&m.samples, lambda, &AggregateOptions { sigma_floor: SIGMA_FLOOR, fit })?)
}

pub fn aggregate_cmd(input: &Path, out: &Path, lambda: f64, modal: bool) -> CliResult<()> {
    let model = load_models(&[input.to_path_buf()])?.remove(0);
    let agg = aggregate_model(&model, lambda, true)?;
    let preds = if modal { modal_preds(&agg) } else { threshold_matrix(&mean_probs(&agg), lambda) };
    let spec = model.frame_spec.unwrap_or_default();
    make_out_dir(out)?;
    io::write_aggregate(&out.join("aggregate.csv"), &agg, &model.speakers)?;
    io::write_predictions(&out.join("predictions.csv"), &preds, &model.speakers)?;
    Container {
        kind: Kind::Tensor,
        data: mean_probs(&agg).mapv(|v| v as f32).into_dyn(),
        meta: Metadata { frame_spec: Some(spec), speaker_order: model.speakers.clone(), model_id: model.samples.model_id.clone() },
    }
    .write(&out.join("mean_probs.duqt"))
}

pub fn smooth_cmd(input: &Path, g: usize, out: &Path, config: Option<&Path>, file_id: &str) -> CliResult<()> {
    io::require_inputs([input])?;
    let spec = frame_spec_or_default(config)?;
    let (preds, speakers) = io::read_predictions(input)?;
    let smoothed = simple_smooth(&preds, g);
    make_out_dir(out)?;
    io::write_predictions(&out.join("predictions.csv"), &smoothed, &speakers)?;
    write_rttm(&out.join("predictions.rttm"), &smoothed, &spec, &speakers, file_id)
}

fn smoother_for(config: Option<&Path>, models: usize) -> CliResult<SmootherConfig> {
    let cfg = match config {
        Some(p) => {
            let c: SmootherConfig = load_toml(p)?;
            c.validate().map_err(CliError::input(p))?;
            c
        }
        None => SmootherConfig::for_models(models),
    };
    if cfg.h.len() != models {
        return Err(CliError::Validation(format!("smoother has {} observation factors for {models} models", cfg.h.len())));
    }
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

/// Aggregates each model and runs the Kalman smoother over all of them.
pub fn smooth_models(models: &[Model], cfg: &SmootherConfig, forward: bool) -> CliResult<KalmanOutput> {
    let aggs: Vec<_> = models.iter().map(|m| aggregate_model(m, cfg.lambda, true)).collect::<CliResult<_>>()?;
    let obs = ObservationSet::from_aggregates(&aggs, SIGMA_FLOOR)?;
    Ok(if forward { forward_only(&obs, cfg)? } else { kalman_smooth(&obs, cfg)? })
}

pub fn kalman_cmd(inputs: &[PathBuf], config: Option<&Path>, forward: bool, out: &Path, file_id: &str) -> CliResult<()> {
    if inputs.is_empty() {
        return Err(CliError::Validation("no sample files given".into()));
    }
    io::require_inputs(config)?;
    let models = load_models(inputs)?;
    let cfg = smoother_for(config, models.len())?;
    let res = smooth_models(&models, &cfg, forward)?;
    let preds = res.predictions(cfg.lambda);
    let spec = models[0].frame_spec.unwrap_or_default();
    let speakers = &models[0].speakers;
    make_out_dir(out)?;
    if !res.flagged.is_empty() {
        eprintln!("warning: {} frames needed a regularized innovation covariance", res.flagged.len());
    }
    write_states(&out.join("states.csv"), &res, speakers)?;
    io::write_predictions(&out.join("predictions.csv"), &preds, speakers)?;
    write_rttm(&out.join("predictions.rttm"), &preds, &spec, speakers, file_id)
}

#[derive(Serialize)]
struct FitReport<'a> {
    der_pct: f64,
    evaluations: usize,
    config: &'a SmootherConfig,
}

pub fn fit_kalman_cmd(inputs: &[PathBuf], val_labels: &Path, grid: Option<&Path>, out: &Path) -> CliResult<()> {
    if inputs.is_empty() {
        return Err(CliError::Validation("no sample files given".into()));
    }
    io::require_inputs(std::iter::once(val_labels).chain(grid))?;
    let models = load_models(inputs)?;
    let grid: GridSpec = match grid {
        Some(p) => load_toml(p)?,
        None => GridSpec::default(),
    };
    let spec = models[0].frame_spec.unwrap_or_default();
    let truth = io::reference_labels(val_labels, &spec, models[0].samples.frames(), Some(&models[0].speakers))?;
    let aggs: Vec<_> = models.iter().map(|m| aggregate_model(m, grid.lambda, true)).collect::<CliResult<_>>()?;
    let obs = ObservationSet::from_aggregates(&aggs, SIGMA_FLOOR)?;
    let fit = fit_hyperparams(&obs, &truth, &grid)?;
    make_out_dir(out)?;
    let text = toml::to_string(&fit.config).map_err(|e| CliError::Runtime(e.to_string()))?;
    io::write_with(&out.join("smoother.toml"), |w| w.write_all(text.as_bytes()))?;
    write_json(&out.join("fit.json"), &FitReport { der_pct: fit.der_pct, evaluations: fit.evaluations, config: &fit.config })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub frame: Option<FrameScore>,
    pub time: TimeScore,
    pub classification: Option<ClassificationMetrics>,
}

pub struct ScoreArgs<'a> {
    pub truth: &'a Path,
    pub pred: &'a Path,
    pub sad: Option<&'a Path>,
    pub collar_s: f64,
    pub permute: bool,
    pub config: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

/// Time-based scores for segment predictions, plus frame-based scores when
/// the predictions are a frame CSV.
pub fn score_cmd(a: &ScoreArgs) -> CliResult<ScoreReport> {
    io::require_inputs([a.truth, a.pred].into_iter().chain(a.sad).chain(a.config))?;
    let spec = frame_spec_or_default(a.config)?;
    let utts = io::read_utterances(a.truth)?;
    let is_csv = a.pred.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (pred_segs, frame_part, speakers) = if is_csv {
        let (preds, speakers) = io::read_predictions(a.pred)?;
        let truth = io::reference_labels(a.truth, &spec, preds.nrows(), Some(&speakers))?;
        let frame = frame_der(&truth, &preds)?;
        let class = classification_metrics(&truth, &preds)?;
        (frames_to_segments(&preds, &spec, &speakers)?, Some((frame, class)), speakers)
    } else {
        let segs = io::read_rttm(a.pred)?;
        let mut speakers = diaruq::labels::speakers_of(&utts);
        for s in segs.speakers() {
            if !speakers.iter().any(|t| t == s) && a.permute {
                speakers.push(s.to_string());
            }
        }
        (segs, None, speakers)
    };
    let truth_segs = SegmentList::new(utts)?;
    let pred_segs = match a.sad {
        Some(p) => apply_gt_sad(&pred_segs, &io::read_sad(p)?),
        None => pred_segs,
    };
    let opts = TimeDerOptions { collar_s: a.collar_s, speakers: Some(speakers), permute: a.permute };
    let time = time_der(&truth_segs, &pred_segs, &opts)?;
    let report = ScoreReport { frame: frame_part.map(|f| f.0), time, classification: frame_part.map(|f| f.1) };
    if let Some(out) = a.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            make_out_dir(dir)?;
        }
        write_json(out, &report)?;
    }
    Ok(report)
}

pub fn score_json(report: &ScoreReport) -> String {
    serde_json::to_string_pretty(report).expect("score report serializes")
}

#[derive(Serialize)]
pub struct FileStats {
    pub file: String,
    #[serde(flatten)]
    pub stats: MeetingStats,
}

/// Meeting statistics for utterance CSVs, or for a set of per-speaker
/// `words.xml` files (speaker id taken from the second dotted field of the
/// file name) treated as one meeting.
pub fn stats_cmd(inputs: &[PathBuf], duration: Option<f64>, merge_gap: f64) -> CliResult<Vec<FileStats>> {
    io::require_inputs(inputs.iter().map(PathBuf::as_path))?;
    let (xml, csv): (Vec<&PathBuf>, Vec<&PathBuf>) =
        inputs.iter().partition(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")));
    let mut out = Vec::new();
    let finish = |name: String, utts: Vec<Utterance>| {
        let d = duration.unwrap_or_else(|| utts.iter().map(|u| u.end_s).fold(0.0, f64::max));
        FileStats { file: name, stats: meeting_stats(&utts, d) }
    };
    if !xml.is_empty() {
        let mut utts = Vec::new();
        for p in &xml {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let speaker = name.split('.').nth(1).unwrap_or(&name).to_string();
            let text = std::fs::read_to_string(p).map_err(CliError::io(p.as_path()))?;
            utts.extend(parse_words_xml(&text, &speaker, merge_gap).map_err(CliError::input(p.as_path()))?);
        }
        let meeting = xml[0].file_name().and_then(|n| n.to_str()).and_then(|n| n.split('.').next()).unwrap_or("meeting");
        out.push(finish(meeting.to_string(), utts));
    }
    for p in csv {
        out.push(finish(p.display().to_string(), io::read_utterances(p)?));
    }
    Ok(out)
}

pub fn stats_json(stats: &[FileStats]) -> String {
    serde_json::to_string_pretty(stats).expect("stats serialize")
}

/// Writes `truth.csv` (utterances), `labels.csv` (frame labels) and one
/// `model<i>.duqs` per configured model.
pub fn synth_cmd(spec_path: &Path, out: &Path) -> CliResult<()> {
    let file: SynthFile = load_toml(spec_path)?;
    let spec = &file.synth;
    spec.validate().map_err(CliError::input(spec_path))?;
    if file.models.is_empty() {
        return Err(CliError::Validation(format!("{}: at least one model is needed", spec_path.display())));
    }
    let truth = gen_truth(spec)?;
    let samples: Vec<SampleTensor> = file.models.iter().map(|m| gen_samples(&truth, spec, m)).collect::<Result<_, _>>()?;
    let segs = frames_to_segments(&truth.values, &spec.frame_spec, &truth.speaker_order)?;
    make_out_dir(out)?;
    io::write_core(&out.join("truth.csv"), |w| write_utterances_csv(segs.entries(), w))?;
    io::write_predictions(&out.join("labels.csv"), &truth.values, &truth.speaker_order)?;
    for (i, s) in samples.iter().enumerate() {
        let mut s = s.clone();
        s.model_id = format!("{}-{i}", s.model_id);
        Container::from_samples(&s, Some(spec.frame_spec), truth.speaker_order.clone()).write(&out.join(format!("model{i}.duqs")))?;
    }
    Ok(())
}

/// Entropy histograms and the calibration curve of one model.
pub fn report_cmd(input: &Path, truth_path: &Path, out: &Path, bins: usize, svg: bool, lambda: f64) -> CliResult<()> {
    io::require_inputs([input, truth_path])?;
    let model = load_models(&[input.to_path_buf()])?.remove(0);
    let spec = model.frame_spec.unwrap_or_default();
    let truth = io::reference_labels(truth_path, &spec, model.samples.frames(), Some(&model.speakers))?;
    let agg = aggregate_model(&model, lambda, false)?;
    let p = mean_probs(&agg);
    let files = analysis(&p, &threshold_matrix(&p, lambda), &truth, bins)?;
    make_out_dir(out)?;
    files.write(out, svg)
}

pub struct Analysis {
    entropy: diaruq::uq::EntropyReport,
    calibration: Vec<diaruq::uq::CalibrationBin>,
}

impl Analysis {
    pub fn write(&self, out: &Path, svg: bool) -> CliResult<()> {
        io::write_core(&out.join("entropy.csv"), |w| self.entropy.write_csv(w))?;
        io::write_core(&out.join("calibration.csv"), |w| write_calibration_csv(&self.calibration, w))?;
        if svg {
            let doc = entropy_svg(&self.entropy);
            io::write_with(&out.join("entropy.svg"), |w| w.write_all(doc.as_bytes()))?;
        }
        Ok(())
    }
}

/// Entropy and calibration of final probabilities against their predictions.
pub fn analysis(probs: &Array2<f64>, preds: &Array2<u8>, truth: &LabelMatrix, bins: usize) -> CliResult<Analysis> {
    let entropy = entropy_report(&frame_entropy(probs), preds, truth, bins)?;
    let calibration = calibration_curve(probs, truth, 20)?;
    Ok(Analysis { entropy, calibration })
}

pub fn default_merge_gap() -> f64 {
    DEFAULT_MERGE_GAP_S
}
