//! Text formats for predictions, aggregates and references.

use std::io::Write;
use std::path::Path;

use diaruq::labels::{read_utterances_csv, speakers_of, utterances_to_labels, DEFAULT_OVERLAP_FRACTION};
use diaruq::score::SegmentList;
use diaruq::uq::FrameUncertainty;
use diaruq::{FrameSpec, LabelMatrix, SadMask, Utterance};
use ndarray::Array2;

use crate::error::{CliError, CliResult};

pub fn open(path: &Path) -> CliResult<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
        _ => CliError::io(path)(e),
    })
}

/// Fails with a validation error naming the first missing path.
pub fn require_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> CliResult<()> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::MissingInput(p.to_path_buf()));
        }
    }
    Ok(())
}

pub fn create(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(CliError::io(path))
}

pub fn write_with(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(CliError::io(path))
}

pub fn write_core(path: &Path, f: impl FnOnce(&mut dyn Write) -> diaruq::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w).map_err(|e| match e {
        diaruq::Error::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::Core(other),
    })?;
    w.flush().map_err(CliError::io(path))
}

pub fn read_utterances(path: &Path) -> CliResult<Vec<Utterance>> {
    read_utterances_csv(open(path)?).map_err(CliError::input(path))
}

pub fn read_sad(path: &Path) -> CliResult<SadMask> {
    SadMask::read_csv(open(path)?).map_err(CliError::input(path))
}

pub fn read_rttm(path: &Path) -> CliResult<SegmentList> {
    SegmentList::read_rttm(std::io::BufReader::new(open(path)?)).map_err(CliError::input(path))
}

/// Frame labels for `frames` scoring frames from a reference utterance file.
pub fn reference_labels(path: &Path, spec: &FrameSpec, frames: usize, speakers: Option<&[String]>) -> CliResult<LabelMatrix> {
    let utts = read_utterances(path)?;
    let duration = frames as f64 * spec.mod_step_s;
    let order: Vec<String> = match speakers {
        Some(s) if !s.is_empty() => s.to_vec(),
        _ => speakers_of(&utts),
    };
    utterances_to_labels(&utts, spec, duration, Some(&order), DEFAULT_OVERLAP_FRACTION).map_err(CliError::input(path))
}

/// Wide binary CSV: `frame,<speaker>,<speaker>,..`.
pub fn write_predictions(path: &Path, preds: &Array2<u8>, speakers: &[String]) -> CliResult<()> {
    write_with(path, |w| {
        writeln!(w, "frame,{}", speakers.join(","))?;
        for (l, row) in preds.rows().into_iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u8::to_string).collect();
            writeln!(w, "{l},{}", cells.join(","))?;
        }
        Ok(())
    })
}

pub fn read_predictions(path: &Path) -> CliResult<(Array2<u8>, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingInput(path.to_path_buf()),
        _ => CliError::io(path)(e),
    })?;
    let bad = |line: usize, message: &str| {
        CliError::input(path)(diaruq::Error::Parse { line, message: message.into() })
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty prediction file"))?;
    let speakers: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
    let mut cells = Vec::new();
    let mut frames = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != speakers.len() + 1 {
            return Err(bad(i + 2, "wrong number of columns"));
        }
        for v in &f[1..] {
            match *v {
                "0" => cells.push(0u8),
                "1" => cells.push(1u8),
                _ => return Err(bad(i + 2, "predictions must be 0 or 1")),
            }
        }
        frames += 1;
    }
    let preds = Array2::from_shape_vec((frames, speakers.len()), cells).expect("shape");
    Ok((preds, speakers))
}

pub fn write_aggregate(path: &Path, agg: &Array2<FrameUncertainty>, speakers: &[String]) -> CliResult<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    write_with(path, |w| {
        writeln!(w, "frame,speaker,mean_prob,pct_lo,pct_hi,trunc_mu,trunc_sigma,variance,mean_pred,modal_pred,fit_converged")?;
        for ((l, s), u) in agg.indexed_iter() {
            writeln!(
                w,
                "{l},{},{:.6},{},{},{},{},{},{:.6},{},{}",
                speakers[s],
                u.mean_prob,
                opt(u.pct_lo),
                opt(u.pct_hi),
                opt(u.fit.map(|f| f.mu)),
                opt(u.fit.map(|f| f.sigma)),
                opt(u.variance()),
                u.mean_pred,
                u.modal_pred,
                u.fit.map(|f| f.converged.to_string()).unwrap_or_default(),
            )?;
        }
        Ok(())
    })
}
