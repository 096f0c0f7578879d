//! Frame- and time-based diarization error rates, segment plumbing and
//! classification metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use ndarray::{Array2, Zip};
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::labels::{merge_intervals, LabelMatrix, SadMask, Utterance};
use crate::signal::FrameSpec;

fn pct(count: f64, total: f64) -> f64 {
    // An empty reference scores errors against a single unit.
    100.0 * count / total.max(1.0)
}

/// Error counts in speaker-frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameScore {
    pub miss: u64,
    pub false_alarm: u64,
    pub speaker_error: u64,
    pub total: u64,
    pub m_pct: f64,
    pub fa_pct: f64,
    pub se_pct: f64,
    pub der_pct: f64,
}

impl FrameScore {
    pub fn from_counts(miss: u64, false_alarm: u64, speaker_error: u64, total: u64) -> Self {
        let t = total as f64;
        let (m_pct, fa_pct, se_pct) = (pct(miss as f64, t), pct(false_alarm as f64, t), pct(speaker_error as f64, t));
        Self {
            miss,
            false_alarm,
            speaker_error,
            total,
            m_pct,
            fa_pct,
            se_pct,
            der_pct: m_pct + fa_pct + se_pct,
        }
    }

    pub fn errors(&self) -> u64 {
        self.miss + self.false_alarm + self.speaker_error
    }
}

/// Frame-level DER. Per frame, misses and false alarms are the shortfall and
/// excess of predicted speakers, and speaker errors are the matched count not
/// hitting a true speaker.
pub fn frame_der(truth: &LabelMatrix, preds: &Array2<u8>) -> Result<FrameScore> {
    if truth.values.dim() != preds.dim() {
        return Err(Error::invalid(format!(
            "prediction shape {:?} does not match truth {:?}",
            preds.dim(),
            truth.values.dim()
        )));
    }
    let (mut miss, mut fa, mut se, mut total) = (0u64, 0u64, 0u64, 0u64);
    for (y, yh) in truth.values.rows().into_iter().zip(preds.rows()) {
        let (mut n_t, mut n_p, mut hit) = (0u64, 0u64, 0u64);
        for (&a, &b) in y.iter().zip(yh.iter()) {
            let (a, b) = (u64::from(a != 0), u64::from(b != 0));
            n_t += a;
            n_p += b;
            hit += a & b;
        }
        miss += n_t.saturating_sub(n_p);
        fa += n_p.saturating_sub(n_t);
        se += n_t.min(n_p) - hit;
        total += n_t;
    }
    Ok(FrameScore::from_counts(miss, fa, se, total))
}

/// Speaker segments sorted by start time; per speaker, entries never overlap.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentList {
    entries: Vec<Utterance>,
}

impl SegmentList {
    /// Sorts the entries and merges overlapping or touching entries of the
    /// same speaker. Empty entries are dropped.
    pub fn new(entries: Vec<Utterance>) -> Result<Self> {
        let mut by_spk: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for u in entries {
            if !(u.start_s.is_finite() && u.end_s.is_finite()) {
                return Err(Error::invalid("segment bounds must be finite"));
            }
            if u.end_s > u.start_s {
                by_spk.entry(u.speaker_id).or_default().push((u.start_s, u.end_s));
            }
        }
        let mut out = Vec::new();
        for (spk, mut iv) in by_spk {
            iv.sort_by(|a, b| a.0.total_cmp(&b.0));
            out.extend(merge_intervals(&iv, 0.0).into_iter().map(|(s, e)| Utterance {
                speaker_id: spk.clone(),
                start_s: s,
                end_s: e,
            }));
        }
        out.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then_with(|| a.speaker_id.cmp(&b.speaker_id)));
        Ok(Self { entries: out })
    }

    pub fn entries(&self) -> &[Utterance] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|u| u.speaker_id.as_str()).collect()
    }

    pub fn total_s(&self) -> f64 {
        self.entries.iter().map(Utterance::duration_s).sum()
    }

    /// One RTTM `SPEAKER` line per entry.
    pub fn write_rttm(&self, file_id: &str, writer: impl Write) -> Result<()> {
        let mut w = std::io::BufWriter::new(writer);
        for u in &self.entries {
            writeln!(
                w,
                "SPEAKER {file_id} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
                u.start_s,
                u.duration_s(),
                u.speaker_id
            )?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `SPEAKER` lines of an RTTM file; other record types and
    /// `;;` comments are skipped.
    pub fn read_rttm(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.first() != Some(&"SPEAKER") {
                continue;
            }
            let bad = |message: &str| Error::Parse {
                line: i + 1,
                message: message.to_string(),
            };
            if fields.len() < 8 {
                return Err(bad("SPEAKER line needs at least 8 fields"));
            }
            let tbeg: f64 = fields[3].parse().map_err(|_| bad("bad onset"))?;
            let tdur: f64 = fields[4].parse().map_err(|_| bad("bad duration"))?;
            if tbeg < 0.0 || tdur < 0.0 {
                return Err(bad("negative onset or duration"));
            }
            entries.push(Utterance {
                speaker_id: fields[7].to_string(),
                start_s: tbeg,
                end_s: tbeg + tdur,
            });
        }
        Self::new(entries)
    }
}

/// Maximal runs of active frames per speaker; frame `l` spans
/// `[l * step, (l + 1) * step)`.
pub fn frames_to_segments(preds: &Array2<u8>, spec: &FrameSpec, speaker_order: &[String]) -> Result<SegmentList> {
    if preds.ncols() != speaker_order.len() {
        return Err(Error::shape(format!(
            "{} prediction columns for {} speakers",
            preds.ncols(),
            speaker_order.len()
        )));
    }
    let step = spec.mod_step_s;
    let mut entries = Vec::new();
    for (s, col) in preds.columns().into_iter().enumerate() {
        let mut start = None;
        for l in 0..=col.len() {
            let on = l < col.len() && col[l] != 0;
            match (on, start) {
                (true, None) => start = Some(l),
                (false, Some(b)) => {
                    entries.push(Utterance {
                        speaker_id: speaker_order[s].clone(),
                        start_s: b as f64 * step,
                        end_s: l as f64 * step,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    SegmentList::new(entries)
}

/// Intersects every segment with the speech regions of the mask.
pub fn apply_gt_sad(segs: &SegmentList, sad: &SadMask) -> SegmentList {
    let iv = sad.intervals();
    let mut out = Vec::new();
    for u in &segs.entries {
        let first = iv.partition_point(|&(_, e)| e <= u.start_s);
        for &(s, e) in &iv[first..] {
            if s >= u.end_s {
                break;
            }
            let (a, b) = (s.max(u.start_s), e.min(u.end_s));
            if b > a {
                out.push(Utterance {
                    speaker_id: u.speaker_id.clone(),
                    start_s: a,
                    end_s: b,
                });
            }
        }
    }
    SegmentList::new(out).expect("intersections of valid segments are valid")
}

/// Error durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeScore {
    pub miss_s: f64,
    pub fa_s: f64,
    pub se_s: f64,
    pub total_s: f64,
    pub m_pct: f64,
    pub fa_pct: f64,
    pub se_pct: f64,
    pub der_pct: f64,
}

impl TimeScore {
    fn from_durations(miss_s: f64, fa_s: f64, se_s: f64, total_s: f64) -> Self {
        let (m_pct, fa_pct, se_pct) = (pct(miss_s, total_s), pct(fa_s, total_s), pct(se_s, total_s));
        Self {
            miss_s,
            fa_s,
            se_s,
            total_s,
            m_pct,
            fa_pct,
            se_pct,
            der_pct: m_pct + fa_pct + se_pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeDerOptions {
    /// Seconds excised on each side of every reference boundary.
    pub collar_s: f64,
    /// Closed speaker set; defaults to the reference speakers.
    pub speakers: Option<Vec<String>>,
    /// Map predicted to reference speakers by maximal overlap instead of by id.
    pub permute: bool,
}

/// Predicted-to-reference speaker assignment maximizing total overlap.
/// Unmatched predicted speakers map to `None`.
pub fn optimal_mapping(truth: &SegmentList, pred: &SegmentList) -> BTreeMap<String, Option<String>> {
    let t_ids: Vec<&str> = truth.speakers().into_iter().collect();
    let p_ids: Vec<&str> = pred.speakers().into_iter().collect();
    let n = t_ids.len().max(p_ids.len());
    let mut mapping: BTreeMap<String, Option<String>> = p_ids.iter().map(|p| (p.to_string(), None)).collect();
    if t_ids.is_empty() || p_ids.is_empty() {
        return mapping;
    }
    // Overlap in nanoseconds keeps the assignment in exact integer arithmetic.
    let mut w = Matrix::new(n, n, 0i64);
    for (i, p) in p_ids.iter().enumerate() {
        for (j, t) in t_ids.iter().enumerate() {
            let ov = overlap_s(pred, p, truth, t);
            w[(i, j)] = (ov * 1e9).round() as i64;
        }
    }
    let (_, assign) = kuhn_munkres(&w);
    for (i, p) in p_ids.iter().enumerate() {
        let j = assign[i];
        if j < t_ids.len() && w[(i, j)] > 0 {
            mapping.insert(p.to_string(), Some(t_ids[j].to_string()));
        }
    }
    mapping
}

fn overlap_s(a: &SegmentList, a_spk: &str, b: &SegmentList, b_spk: &str) -> f64 {
    let pick = |l: &SegmentList, s: &str| -> Vec<(f64, f64)> {
        l.entries.iter().filter(|u| u.speaker_id == s).map(|u| (u.start_s, u.end_s)).collect()
    };
    let (x, y) = (pick(a, a_spk), pick(b, b_spk));
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < x.len() && j < y.len() {
        let (s, e) = (x[i].0.max(y[j].0), x[i].1.min(y[j].1));
        if e > s {
            total += e - s;
        }
        if x[i].1 < y[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

#[derive(Clone, Copy)]
enum Event {
    Truth(usize, i32),
    Pred(usize, i32),
    Collar(i32),
}

/// Time-based DER over the micro-intervals induced by every boundary.
pub fn time_der(truth: &SegmentList, pred: &SegmentList, opts: &TimeDerOptions) -> Result<TimeScore> {
    if !(opts.collar_s >= 0.0 && opts.collar_s.is_finite()) {
        return Err(Error::invalid("collar must be a non-negative number of seconds"));
    }
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let known: Vec<String> = match &opts.speakers {
        Some(list) => list.clone(),
        None => truth.speakers().into_iter().map(String::from).collect(),
    };
    for s in known.iter().chain(truth.entries.iter().map(|u| &u.speaker_id)) {
        let next = index.len();
        index.entry(s.clone()).or_insert(next);
    }
    let mapping = opts.permute.then(|| optimal_mapping(truth, pred));
    let mut n_ids = index.len();
    let mut pred_idx = |spk: &str| -> Result<usize> {
        match &mapping {
            Some(m) => match m.get(spk).cloned().flatten() {
                Some(t) => Ok(index[&t]),
                None => {
                    // Unmatched speakers get a private slot that never scores a hit.
                    n_ids += 1;
                    Ok(n_ids - 1)
                }
            },
            None => index
                .get(spk)
                .copied()
                .ok_or_else(|| Error::invalid(format!("unknown predicted speaker '{spk}'"))),
        }
    };

    let mut events: Vec<(f64, Event)> = Vec::new();
    for u in &truth.entries {
        let i = index[&u.speaker_id];
        events.push((u.start_s, Event::Truth(i, 1)));
        events.push((u.end_s, Event::Truth(i, -1)));
        if opts.collar_s > 0.0 {
            for b in [u.start_s, u.end_s] {
                events.push((b - opts.collar_s, Event::Collar(1)));
                events.push((b + opts.collar_s, Event::Collar(-1)));
            }
        }
    }
    let mut pred_events = Vec::new();
    for u in &pred.entries {
        pred_events.push((u.start_s, u.end_s, pred_idx(&u.speaker_id)?));
    }
    for (s, e, i) in pred_events {
        events.push((s, Event::Pred(i, 1)));
        events.push((e, Event::Pred(i, -1)));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut t_on = vec![0i32; n_ids];
    let mut p_on = vec![0i32; n_ids];
    let mut collar = 0i32;
    let (mut miss, mut fa, mut se, mut total) = (0.0, 0.0, 0.0, 0.0);
    let mut k = 0;
    while k < events.len() {
        let t = events[k].0;
        while k < events.len() && events[k].0 == t {
            match events[k].1 {
                Event::Truth(i, d) => t_on[i] += d,
                Event::Pred(i, d) => p_on[i] += d,
                Event::Collar(d) => collar += d,
            }
            k += 1;
        }
        let Some(&(next, _)) = events.get(k) else { break };
        let dur = next - t;
        if collar > 0 || dur <= 0.0 {
            continue;
        }
        let (mut n_t, mut n_p, mut hit) = (0usize, 0usize, 0usize);
        for i in 0..n_ids {
            let (a, b) = (t_on[i] > 0, p_on[i] > 0);
            n_t += usize::from(a);
            n_p += usize::from(b);
            hit += usize::from(a && b);
        }
        miss += n_t.saturating_sub(n_p) as f64 * dur;
        fa += n_p.saturating_sub(n_t) as f64 * dur;
        se += (n_t.min(n_p) - hit) as f64 * dur;
        total += n_t as f64 * dur;
    }
    Ok(TimeScore::from_durations(miss, fa, se, total))
}

/// Accuracy, precision, recall and F1 over all (frame, speaker) decisions.
/// Undefined ratios are reported as 0 with their flag cleared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

pub fn classification_metrics(truth: &LabelMatrix, preds: &Array2<u8>) -> Result<ClassificationMetrics> {
    if truth.values.dim() != preds.dim() {
        return Err(Error::invalid("prediction and truth shapes differ"));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    Zip::from(&truth.values).and(preds).for_each(|&y, &p| match (y != 0, p != 0) {
        (true, true) => tp += 1,
        (false, true) => fp += 1,
        (true, false) => fneg += 1,
        (false, false) => tn += 1,
    });
    let ratio = |a: usize, b: usize| if b > 0 { (a as f64 / b as f64, true) } else { (0.0, false) };
    let (accuracy, _) = ratio(tp + tn, tp + tn + fp + fneg);
    let (precision, precision_defined) = ratio(tp, tp + fp);
    let (recall, recall_defined) = ratio(tp, tp + fneg);
    let f1_defined = precision_defined && recall_defined && precision + recall > 0.0;
    let f1 = if f1_defined { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
        precision_defined,
        recall_defined,
        f1_defined,
    })
}
