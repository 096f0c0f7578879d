//! Aggregation of Monte Carlo dropout sample tensors into per-frame
//! uncertainty summaries, entropies and calibration curves.

mod truncnorm;

use std::io::Write;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use serde::Serialize;

pub use truncnorm::{
    fit_truncated_gaussian, log_likelihood, truncated_moments, TruncNormFit, SIGMA_FLOOR,
};

use crate::error::{Error, Result};
use crate::labels::{csv_err, LabelMatrix};
use crate::par::*;

/// `N` Monte Carlo draws of per-frame speaker probabilities, `[n, frame, speaker]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensor {
    pub probs: Array3<f64>,
    pub model_id: String,
}

impl SampleTensor {
    pub fn new(probs: Array3<f64>, model_id: impl Into<String>) -> Result<Self> {
        if probs.shape()[0] == 0 {
            return Err(Error::invalid("sample tensor needs at least one draw"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            probs,
            model_id: model_id.into(),
        })
    }

    pub fn draws(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn speakers(&self) -> usize {
        self.probs.shape()[2]
    }
}

/// Binary decision for one probability: 1 iff `p > lambda`.
pub fn threshold_predict(p: f64, lambda: f64) -> u8 {
    u8::from(p > lambda)
}

/// Thresholds a probability matrix element-wise.
pub fn threshold_matrix(p: &Array2<f64>, lambda: f64) -> Array2<u8> {
    p.mapv(|v| threshold_predict(v, lambda))
}

/// Summary of the draws for one (frame, speaker) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameUncertainty {
    pub mean_prob: f64,
    /// 2.5 % percentile; unset for a single draw.
    pub pct_lo: Option<f64>,
    /// 97.5 % percentile; unset for a single draw.
    pub pct_hi: Option<f64>,
    /// Truncated-Gaussian fit; unset for a single draw.
    #[serde(skip)]
    pub fit: Option<TruncNormFit>,
    /// Fraction of draws above the threshold.
    pub mean_pred: f64,
    /// Majority vote of the thresholded draws, ties resolving to 0.
    pub modal_pred: u8,
}

impl FrameUncertainty {
    /// Percentile range divided by four, a crude standard-deviation proxy.
    pub fn range_sigma(&self) -> Option<f64> {
        Some((self.pct_hi? - self.pct_lo?) / 4.0)
    }

    /// Variance of the fitted truncated distribution.
    pub fn variance(&self) -> Option<f64> {
        self.fit.map(|f| f.variance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateOptions {
    pub sigma_floor: f64,
    /// Skip the truncated-Gaussian fits when only means and votes are needed.
    pub fit: bool,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            sigma_floor: SIGMA_FLOOR,
            fit: true,
        }
    }
}

/// Linear interpolation between order statistics of sorted data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarise(draws: ArrayView1<f64>, lambda: f64, opts: &AggregateOptions) -> Result<FrameUncertainty> {
    let n = draws.len();
    let mean_prob = draws.sum() / n as f64;
    let votes = draws.iter().filter(|&&p| threshold_predict(p, lambda) == 1).count();
    let mut out = FrameUncertainty {
        mean_prob,
        pct_lo: None,
        pct_hi: None,
        fit: None,
        mean_pred: votes as f64 / n as f64,
        modal_pred: u8::from(2 * votes > n),
    };
    if n >= 2 {
        let mut sorted = draws.to_vec();
        sorted.sort_by(f64::total_cmp);
        out.pct_lo = Some(percentile_sorted(&sorted, 0.025));
        out.pct_hi = Some(percentile_sorted(&sorted, 0.975));
        if opts.fit {
            out.fit = Some(fit_truncated_gaussian(&sorted, opts.sigma_floor)?);
        }
    }
    Ok(out)
}

/// Per-(frame, speaker) mean probability, percentile range, truncated-Gaussian
/// fit, mean prediction and modal prediction.
pub fn aggregate(
    samples: &SampleTensor,
    lambda: f64,
    opts: &AggregateOptions,
) -> Result<Array2<FrameUncertainty>> {
    let (l, s) = (samples.frames(), samples.speakers());
    let cells: Vec<FrameUncertainty> = (0..l * s)
        .into_par_iter()
        .map(|i| {
            let draws = samples.probs.slice(ndarray::s![.., i / s, i % s]);
            summarise(draws, lambda, opts)
        })
        .collect::<Result<_>>()?;
    Ok(Array2::from_shape_vec((l, s), cells).expect("shape"))
}

pub fn mean_probs(agg: &Array2<FrameUncertainty>) -> Array2<f64> {
    agg.mapv(|u| u.mean_prob)
}

pub fn modal_preds(agg: &Array2<FrameUncertainty>) -> Array2<u8> {
    agg.mapv(|u| u.modal_pred)
}

fn binary_entropy(p: f64) -> f64 {
    let h = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    h(p) + h(1.0 - p)
}

/// Sum over speakers of the binary entropy of each probability, in bits.
pub fn frame_entropy(mean_probs: &Array2<f64>) -> Array1<f64> {
    mean_probs.map_axis(Axis(1), |row| row.iter().map(|&p| binary_entropy(p)).sum())
}

/// Counts in equal-width bins over `[0, max]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: Option<f64>,
}

impl Histogram {
    fn new(values: &[f64], bins: usize, max: f64) -> Self {
        let edges = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v / max) * bins as f64).floor() as isize;
            counts[b.clamp(0, bins as isize - 1) as usize] += 1;
        }
        let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
        Self { edges, counts, mean }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Entropy histograms split by whether the whole frame prediction was right.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyReport {
    pub correct: Histogram,
    pub incorrect: Histogram,
    /// `(actual speaker count, correct, incorrect)` for every count present.
    pub by_speaker_count: Vec<(usize, Histogram, Histogram)>,
    pub fraction_correct: f64,
}

impl EntropyReport {
    /// Long-format CSV: `group,speakers,bin_lo,bin_hi,count`. `speakers` is
    /// `all` for the pooled histograms.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["group", "speakers", "bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
        let mut put = |group: &str, spk: &str, h: &Histogram| -> Result<()> {
            for (i, c) in h.counts.iter().enumerate() {
                w.write_record([
                    group.to_string(),
                    spk.to_string(),
                    format!("{:.6}", h.edges[i]),
                    format!("{:.6}", h.edges[i + 1]),
                    c.to_string(),
                ])
                .map_err(csv_err)?;
            }
            Ok(())
        };
        put("correct", "all", &self.correct)?;
        put("incorrect", "all", &self.incorrect)?;
        for (n, c, i) in &self.by_speaker_count {
            put("correct", &n.to_string(), c)?;
            put("incorrect", &n.to_string(), i)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Histograms of frame entropies over `[0, S]` bits for correct and
/// incorrect frames, where a frame is correct only if every speaker is.
pub fn entropy_report(
    entropy: &Array1<f64>,
    preds: &Array2<u8>,
    truth: &LabelMatrix,
    bins: usize,
) -> Result<EntropyReport> {
    if preds.dim() != truth.values.dim() || entropy.len() != preds.nrows() {
        return Err(Error::shape("entropy, predictions and truth must agree"));
    }
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let max = truth.speakers().max(1) as f64;
    let s_max = truth.speakers();
    let mut correct = vec![Vec::new(); s_max + 1];
    let mut incorrect = vec![Vec::new(); s_max + 1];
    for (l, &h) in entropy.iter().enumerate() {
        let actual = truth.values.row(l).iter().map(|&v| v as usize).sum::<usize>();
        if preds.row(l) == truth.values.row(l) {
            correct[actual].push(h);
        } else {
            incorrect[actual].push(h);
        }
    }
    let pooled = |groups: &[Vec<f64>]| groups.concat();
    let all_correct = pooled(&correct);
    let all_incorrect = pooled(&incorrect);
    let n = entropy.len().max(1) as f64;
    Ok(EntropyReport {
        fraction_correct: all_correct.len() as f64 / n,
        correct: Histogram::new(&all_correct, bins, max),
        incorrect: Histogram::new(&all_incorrect, bins, max),
        by_speaker_count: (0..=s_max)
            .filter(|&k| !correct[k].is_empty() || !incorrect[k].is_empty())
            .map(|k| {
                (
                    k,
                    Histogram::new(&correct[k], bins, max),
                    Histogram::new(&incorrect[k], bins, max),
                )
            })
            .collect(),
    })
}

/// One equal-width probability bin of a reliability diagram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub predicted_mean: Option<f64>,
    pub observed_freq: Option<f64>,
}

/// Reliability diagram over all (frame, speaker) pairs. A probability of
/// exactly 1 falls in the last bin.
pub fn calibration_curve(
    mean_probs: &Array2<f64>,
    truth: &LabelMatrix,
    bins: usize,
) -> Result<Vec<CalibrationBin>> {
    if mean_probs.dim() != truth.values.dim() {
        return Err(Error::shape("probabilities and truth must agree"));
    }
    if bins == 0 {
        return Err(Error::invalid("calibration needs at least one bin"));
    }
    let mut sum_p = vec![0.0; bins];
    let mut pos = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (&p, &y) in mean_probs.iter().zip(truth.values.iter()) {
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        sum_p[b] += p;
        pos[b] += y as usize;
        count[b] += 1;
    }
    Ok((0..bins)
        .map(|b| CalibrationBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count: count[b],
            predicted_mean: (count[b] > 0).then(|| sum_p[b] / count[b] as f64),
            observed_freq: (count[b] > 0).then(|| pos[b] as f64 / count[b] as f64),
        })
        .collect())
}

pub fn write_calibration_csv(curve: &[CalibrationBin], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["bin_lo", "bin_hi", "count", "predicted_mean", "observed_freq"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for b in curve {
        w.write_record([
            format!("{:.6}", b.lo),
            format!("{:.6}", b.hi),
            b.count.to_string(),
            opt(b.predicted_mean),
            opt(b.observed_freq),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
