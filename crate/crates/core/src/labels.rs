//! Ground-truth ingestion, GT-SAD masks and meeting statistics.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::signal::{num_mod_frames, FrameSpec};

/// Inter-word gap, in seconds, below which words join one utterance.
pub const DEFAULT_MERGE_GAP_S: f64 = 0.1;
/// Fraction of a modulation frame a speaker must cover to be labelled active.
pub const DEFAULT_OVERLAP_FRACTION: f64 = 0.5;

/// One speaker's continuous stretch of speech.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub speaker_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl Utterance {
    pub fn new(speaker_id: impl Into<String>, start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s >= 0.0 && end_s > start_s && end_s.is_finite()) {
            return Err(Error::invalid(format!(
                "utterance interval [{start_s}, {end_s}) is not valid"
            )));
        }
        Ok(Self {
            speaker_id: speaker_id.into(),
            start_s,
            end_s,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Parses an AMI-style `words.xml` document for one speaker.
///
/// Only timed `<w>` elements that are not punctuation count as speech;
/// vocal sounds, disfluency markers, pauses and the like are skipped. Words
/// are merged into utterances when the gap between them is at most
/// `merge_gap_s`.
pub fn parse_words_xml(doc: &str, speaker_id: &str, merge_gap_s: f64) -> Result<Vec<Utterance>> {
    let tree = roxmltree::Document::parse(doc).map_err(|e| Error::Parse {
        line: e.pos().row as usize,
        message: e.to_string(),
    })?;
    let mut words = Vec::new();
    for node in tree.descendants().filter(|n| n.has_tag_name("w")) {
        if node.attribute("punc").is_some_and(|p| p == "true") {
            continue;
        }
        let (Some(start), Some(end)) = (node.attribute("starttime"), node.attribute("endtime"))
        else {
            continue;
        };
        let line = tree.text_pos_at(node.range().start).row as usize;
        let parse = |v: &str| {
            v.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("bad time {v:?}: {e}"),
            })
        };
        let (start, end) = (parse(start)?, parse(end)?);
        if end > start {
            words.push((start, end));
        }
    }
    words.sort_by(|a, b| a.0.total_cmp(&b.0));
    merge_intervals(&words, merge_gap_s)
        .into_iter()
        .map(|(s, e)| Utterance::new(speaker_id, s, e))
        .collect()
}

/// Reads `speaker,start_s,end_s` rows. A header row is optional.
pub fn read_utterances_csv(reader: impl Read) -> Result<Vec<Utterance>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let (start, end) = match (record[1].parse::<f64>(), record[2].parse::<f64>()) {
            (Ok(s), Ok(e)) => (s, e),
            _ if i == 0 => continue,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("non-numeric times {:?}, {:?}", &record[1], &record[2]),
                })
            }
        };
        out.push(Utterance::new(&record[0], start, end).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_utterances_csv(utts: &[Utterance], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["speaker", "start_s", "end_s"]).map_err(csv_err)?;
    for u in utts {
        w.write_record([u.speaker_id.clone(), u.start_s.to_string(), u.end_s.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Sorted-by-start intervals merged when the gap is at most `gap`.
pub(crate) fn merge_intervals(sorted: &[(f64, f64)], gap: f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for &(s, e) in sorted {
        match out.last_mut() {
            Some(last) if s - last.1 <= gap => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

fn union_of(utts: &[&Utterance]) -> Vec<(f64, f64)> {
    let mut iv: Vec<(f64, f64)> = utts.iter().map(|u| (u.start_s, u.end_s)).collect();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    merge_intervals(&iv, 0.0)
}

/// Distinct speaker ids in sorted order.
pub fn speakers_of(utts: &[Utterance]) -> Vec<String> {
    utts.iter()
        .map(|u| u.speaker_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Binary speaker activity per modulation frame, `[frame, speaker]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub values: Array2<u8>,
    pub speaker_order: Vec<String>,
    pub frame_spec: FrameSpec,
}

impl LabelMatrix {
    pub fn new(values: Array2<u8>, speaker_order: Vec<String>, frame_spec: FrameSpec) -> Result<Self> {
        if values.ncols() != speaker_order.len() {
            return Err(Error::shape(format!(
                "{} label columns for {} speakers",
                values.ncols(),
                speaker_order.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        check_unique(&speaker_order)?;
        Ok(Self {
            values,
            speaker_order,
            frame_spec,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn speakers(&self) -> usize {
        self.values.ncols()
    }
}

fn check_unique(ids: &[String]) -> Result<()> {
    let set: BTreeSet<&String> = ids.iter().collect();
    if set.len() != ids.len() {
        return Err(Error::invalid("speaker order contains duplicates"));
    }
    Ok(())
}

/// Frame labels from utterances. Frame `l` spans `[l*F_m, (l+1)*F_m)`; a
/// speaker is active when their speech covers at least `overlap_fraction`
/// of it. With `speaker_order = None` the sorted distinct ids are used.
pub fn utterances_to_labels(
    utts: &[Utterance],
    spec: &FrameSpec,
    duration_s: f64,
    speaker_order: Option<&[String]>,
    overlap_fraction: f64,
) -> Result<LabelMatrix> {
    if !(0.0..=1.0).contains(&overlap_fraction) {
        return Err(Error::invalid("overlap fraction must lie in [0, 1]"));
    }
    let order: Vec<String> = match speaker_order {
        Some(o) => {
            check_unique(o)?;
            if let Some(u) = utts.iter().find(|u| !o.contains(&u.speaker_id)) {
                return Err(Error::invalid(format!(
                    "speaker {:?} is missing from the speaker order",
                    u.speaker_id
                )));
            }
            o.to_vec()
        }
        None => speakers_of(utts),
    };
    if let Some(u) = utts.iter().find(|u| u.end_s > duration_s + 1e-9) {
        return Err(Error::invalid(format!(
            "utterance ending at {} exceeds duration {duration_s}",
            u.end_s
        )));
    }
    let frames = num_mod_frames(duration_s, spec)?;
    let step = spec.mod_step_s;
    let mut values = Array2::zeros((frames, order.len()));
    for (s, id) in order.iter().enumerate() {
        let mine: Vec<&Utterance> = utts.iter().filter(|u| &u.speaker_id == id).collect();
        let mut cover = vec![0.0; frames];
        for (a, b) in union_of(&mine) {
            let first = (a / step).floor() as usize;
            let last = ((b / step).ceil() as usize).min(frames);
            for (l, c) in cover.iter_mut().enumerate().take(last).skip(first) {
                let lo = l as f64 * step;
                *c += (b.min(lo + step) - a.max(lo)).max(0.0);
            }
        }
        for (l, c) in cover.into_iter().enumerate() {
            if c > 0.0 && c + 1e-9 >= overlap_fraction * step {
                values[[l, s]] = 1;
            }
        }
    }
    LabelMatrix::new(values, order, *spec)
}

/// Speech regions as disjoint, sorted intervals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SadMask {
    intervals: Vec<(f64, f64)>,
}

impl SadMask {
    /// Builds a mask from arbitrary intervals, merging overlaps and dropping
    /// empty ones.
    pub fn from_intervals(mut iv: Vec<(f64, f64)>) -> Result<Self> {
        if iv.iter().any(|(s, e)| !s.is_finite() || !e.is_finite()) {
            return Err(Error::invalid("SAD intervals must be finite"));
        }
        iv.retain(|(s, e)| e > s);
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self {
            intervals: merge_intervals(&iv, 0.0),
        })
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn total_s(&self) -> f64 {
        self.intervals.iter().map(|(s, e)| e - s).sum()
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut iv = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            match (record.get(0).map(str::parse::<f64>), record.get(1).map(str::parse::<f64>)) {
                (Some(Ok(s)), Some(Ok(e))) => iv.push((s, e)),
                _ if i == 0 => continue,
                _ => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: "expected start_s,end_s".into(),
                    })
                }
            }
        }
        Self::from_intervals(iv)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["start_s", "end_s"]).map_err(csv_err)?;
        for (s, e) in &self.intervals {
            w.write_record([s.to_string(), e.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Union of all utterances across speakers.
pub fn build_gt_sad(utts: &[Utterance]) -> SadMask {
    let all: Vec<&Utterance> = utts.iter().collect();
    SadMask {
        intervals: union_of(&all),
    }
}

/// Per-meeting statistics in the style of a corpus description table.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MeetingStats {
    pub duration_s: f64,
    /// Sum of utterance durations; overlapping speakers count individually.
    pub total_speech_s: f64,
    /// Length of the union of all utterances.
    pub combined_speech_s: f64,
    pub utterances: usize,
    /// Maximal intervals of the union.
    pub segments: usize,
    /// Time with two or more speakers, as a percentage of combined speech.
    pub overlap_pct: f64,
    /// Twice the utterance count over the duration.
    pub change_rate_hz: f64,
    /// Total speech per utterance.
    pub asd_s: f64,
}

/// Time during which at least two distinct speakers talk.
pub fn overlap_time_s(utts: &[Utterance]) -> f64 {
    let mut events: Vec<(f64, i32)> = Vec::new();
    for id in speakers_of(utts) {
        let mine: Vec<&Utterance> = utts.iter().filter(|u| u.speaker_id == id).collect();
        for (s, e) in union_of(&mine) {
            events.push((s, 1));
            events.push((e, -1));
        }
    }
    // Ends sort before starts at equal times so touching turns do not overlap.
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut active = 0;
    let mut last = 0.0;
    let mut total = 0.0;
    for (t, delta) in events {
        if active >= 2 {
            total += t - last;
        }
        active += delta;
        last = t;
    }
    total
}

/// Overlap percentage from speech totals alone; equals
/// [`MeetingStats::overlap_pct`] when no more than two speakers ever overlap.
pub fn overlap_pct_from_totals(total_speech_s: f64, combined_speech_s: f64) -> f64 {
    if combined_speech_s > 0.0 {
        100.0 * (total_speech_s - combined_speech_s) / combined_speech_s
    } else {
        0.0
    }
}

pub fn meeting_stats(utts: &[Utterance], duration_s: f64) -> MeetingStats {
    let total: f64 = utts.iter().map(Utterance::duration_s).sum();
    let union = build_gt_sad(utts);
    let combined = union.total_s();
    let n = utts.len();
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    MeetingStats {
        duration_s,
        total_speech_s: total,
        combined_speech_s: combined,
        utterances: n,
        segments: union.intervals.len(),
        overlap_pct: 100.0 * ratio(overlap_time_s(utts), combined),
        change_rate_hz: ratio(2.0 * n as f64, duration_s),
        asd_s: ratio(total, n as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(id: &str, s: f64, e: f64) -> Utterance {
        Utterance::new(id, s, e).unwrap()
    }

    const WORDS: &str = r#"<?xml version="1.0" encoding="ISO-8859-1"?>
<nite:root nite:id="ES2008a.A.words" xmlns:nite="http://nite.sourceforge.net/">
   <w nite:id="ES2008a.A.words0" starttime="0.00" endtime="0.50">okay</w>
   <w nite:id="ES2008a.A.words1" starttime="0.60" endtime="1.00">right</w>
   <w nite:id="ES2008a.A.words2" starttime="1.00" endtime="1.00" punc="true">.</w>
   <vocalsound nite:id="ES2008a.A.words3" starttime="1.10" endtime="1.40" type="laugh"/>
   <w nite:id="ES2008a.A.words4" starttime="1.50" endtime="2.00">so</w>
   <w nite:id="ES2008a.A.words5">um</w>
</nite:root>"#;

    #[test]
    fn words_merge_into_utterances() {
        let utts = parse_words_xml(WORDS, "A", 0.2).unwrap();
        assert_eq!(utts, vec![u("A", 0.0, 1.0), u("A", 1.5, 2.0)]);
        let utts = parse_words_xml(WORDS, "A", 0.05).unwrap();
        assert_eq!(utts.len(), 3);
        let utts = parse_words_xml(WORDS, "A", 0.5).unwrap();
        assert_eq!(utts, vec![u("A", 0.0, 2.0)]);
    }

    #[test]
    fn punctuation_only_is_empty_and_malformed_reports_line() {
        let doc = r#"<root><w starttime="1" endtime="1.2" punc="true">,</w></root>"#;
        assert!(parse_words_xml(doc, "A", 0.1).unwrap().is_empty());
        let bad = "<root>\n<w starttime=\"1\">\n</root>";
        match parse_words_xml(bad, "A", 0.1) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let utts = vec![u("A", 0.0, 1.5), u("B", 2.25, 3.0)];
        let mut buf = Vec::new();
        write_utterances_csv(&utts, &mut buf).unwrap();
        assert_eq!(read_utterances_csv(buf.as_slice()).unwrap(), utts);
        assert_eq!(read_utterances_csv("A,0,1\n".as_bytes()).unwrap(), vec![u("A", 0.0, 1.0)]);
        assert!(matches!(
            read_utterances_csv("A,0,1\nB,x,2\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(read_utterances_csv("A,2,1\n".as_bytes()).is_err());
    }

    #[test]
    fn labels_from_utterances() {
        let spec = FrameSpec::experiment1();
        let m = utterances_to_labels(&[u("A", 0.0, 1.0)], &spec, 2.0, None, 0.5).unwrap();
        assert_eq!(m.values.column(0).to_vec(), vec![1, 1, 1, 1, 0, 0, 0, 0]);

        let both = [u("A", 0.5, 1.0), u("B", 0.5, 1.0)];
        let m = utterances_to_labels(&both, &spec, 1.0, None, 0.5).unwrap();
        assert_eq!(m.values.row(2).to_vec(), vec![1, 1]);
        assert_eq!(m.values.row(0).to_vec(), vec![0, 0]);

        let short = [u("A", 0.3, 0.35)];
        let m = utterances_to_labels(&short, &spec, 1.0, None, 0.5).unwrap();
        assert!(m.values.iter().all(|&v| v == 0));

        let order = vec!["B".to_string(), "A".to_string(), "C".to_string()];
        let m = utterances_to_labels(&both, &spec, 1.0, Some(&order), 0.5).unwrap();
        assert_eq!(m.speakers(), 3);
        assert_eq!(m.values.column(2).sum(), 0);
        let missing = vec!["A".to_string()];
        assert!(utterances_to_labels(&both, &spec, 1.0, Some(&missing), 0.5).is_err());
        let dup = vec!["A".to_string(), "A".to_string(), "B".to_string()];
        assert!(utterances_to_labels(&both, &spec, 1.0, Some(&dup), 0.5).is_err());
        assert!(utterances_to_labels(&both, &spec, 0.9, None, 0.5).is_err());
    }

    #[test]
    fn label_time_tracks_speech_time() {
        let spec = FrameSpec::experiment1();
        let utts = [u("A", 0.1, 3.33), u("B", 2.0, 2.61), u("A", 5.02, 7.9), u("C", 6.0, 6.2)];
        let m = utterances_to_labels(&utts, &spec, 8.0, None, 0.5).unwrap();
        let labelled = m.values.iter().map(|&v| v as f64).sum::<f64>() * spec.mod_step_s;
        let total: f64 = utts.iter().map(Utterance::duration_s).sum();
        assert!((labelled - total).abs() <= spec.mod_step_s * utts.len() as f64);
    }

    #[test]
    fn gt_sad_union() {
        let m = build_gt_sad(&[u("A", 0.0, 1.0), u("B", 0.5, 2.0)]);
        assert_eq!(m.intervals(), &[(0.0, 2.0)]);
        let m = build_gt_sad(&[u("A", 3.0, 4.0), u("B", 0.0, 1.0)]);
        assert_eq!(m.intervals(), &[(0.0, 1.0), (3.0, 4.0)]);
        assert!(build_gt_sad(&[]).intervals().is_empty());
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(SadMask::read_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn stats_small_meeting() {
        let utts = [u("A", 0.0, 2.0), u("B", 1.0, 3.0), u("C", 1.5, 2.5), u("A", 5.0, 6.0)];
        let s = meeting_stats(&utts, 10.0);
        assert_eq!(s.utterances, 4);
        assert_eq!(s.segments, 2);
        assert!((s.total_speech_s - 6.0).abs() < 1e-12);
        assert!((s.combined_speech_s - 4.0).abs() < 1e-12);
        // Two or more speakers during [1, 2.5).
        assert!((s.overlap_pct - 100.0 * 1.5 / 4.0).abs() < 1e-12);
        assert!((overlap_pct_from_totals(6.0, 4.0) - 50.0).abs() < 1e-12);
        assert!((s.change_rate_hz - 0.8).abs() < 1e-12);
        assert!((s.asd_s - 1.5).abs() < 1e-12);
        assert!(s.combined_speech_s <= s.total_speech_s && s.total_speech_s <= 3.0 * 10.0);
    }

    #[test]
    fn stats_empty_meeting() {
        let s = meeting_stats(&[], 100.0);
        assert_eq!((s.utterances, s.segments), (0, 0));
        assert_eq!((s.overlap_pct, s.change_rate_hz, s.asd_s), (0.0, 0.0, 0.0));
    }

    #[test]
    fn table_totals_arithmetic() {
        let rate = 2.0 * 168.0 / 1043.360;
        assert_eq!(format!("{rate:.3}"), "0.322");
        assert_eq!(format!("{:.2}", 806.640 / 168.0), "4.80");
        assert_eq!(format!("{:.3}", overlap_pct_from_totals(1957.110, 1741.850)), "12.358");
    }
}
