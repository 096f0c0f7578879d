//! Resegmentation: gap bridging with spike removal, and a forward Kalman
//! filter with RTS backward sweep over one or more models' observations.

use std::collections::HashMap;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::par::*;
use crate::score::frame_der;
use crate::uq::{threshold_matrix, FrameUncertainty, SIGMA_FLOOR};

pub const DEFAULT_GAP: usize = 3;

/// Bridges zero runs of at most `g` frames lying between two ones, then
/// clears every isolated single one. Applied per speaker column.
pub fn simple_smooth(preds: &Array2<u8>, g: usize) -> Array2<u8> {
    let mut out = preds.mapv(|v| u8::from(v != 0));
    for mut col in out.columns_mut() {
        let n = col.len();
        let mut last_one: Option<usize> = None;
        for l in 0..n {
            if col[l] == 1 {
                if let Some(p) = last_one {
                    if l - p - 1 <= g {
                        for k in p + 1..l {
                            col[k] = 1;
                        }
                    }
                }
                last_one = Some(l);
            }
        }
        let snapshot = col.to_vec();
        for l in 0..n {
            let left = l > 0 && snapshot[l - 1] == 1;
            let right = l + 1 < n && snapshot[l + 1] == 1;
            if snapshot[l] == 1 && !left && !right {
                col[l] = 0;
            }
        }
    }
    out
}

/// Kalman smoother parameters. `f0`/`q0` apply where the fused observation
/// exceeds `lambda`, `f1`/`q1` elsewhere, and `f2` in the backward sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherConfig {
    pub f0: f64,
    pub f1: f64,
    pub f2: f64,
    pub q0: f64,
    pub q1: f64,
    /// One observation factor per model.
    pub h: Vec<f64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lambda")]
    pub x_init: f64,
    #[serde(default = "default_p_init")]
    pub p_init: f64,
}

fn default_lambda() -> f64 {
    0.5
}

fn default_p_init() -> f64 {
    1.0
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self::for_models(1)
    }
}

impl SmootherConfig {
    pub fn for_models(u: usize) -> Self {
        Self {
            f0: 0.9,
            f1: 0.95,
            f2: 0.9,
            q0: 0.01,
            q1: 0.01,
            h: vec![1.0; u],
            lambda: 0.5,
            x_init: 0.5,
            p_init: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("f0", self.f0), ("f1", self.f1), ("f2", self.f2)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("{name} = {f} must lie in (0, 1]")));
            }
        }
        for (name, q) in [("q0", self.q0), ("q1", self.q1)] {
            if !(q >= 0.0 && q.is_finite()) {
                return Err(Error::invalid(format!("{name} = {q} must be non-negative")));
            }
        }
        if self.h.is_empty() || self.h.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid("observation factors must be positive and non-empty"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda must lie in [0, 1]"));
        }
        if !(self.p_init > 0.0 && self.p_init.is_finite() && self.x_init.is_finite()) {
            return Err(Error::invalid("p_init must be positive and x_init finite"));
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.f1 < self.f0 {
            w.push(format!("f1 = {} is below f0 = {}", self.f1, self.f0));
        }
        w
    }
}

/// Per-model observations `[model, frame, speaker]` and their variances.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub z: Array3<f64>,
    pub r: Array3<f64>,
}

impl ObservationSet {
    pub fn new(z: Array3<f64>, r: Array3<f64>) -> Result<Self> {
        if z.dim() != r.dim() {
            return Err(Error::shape(format!("observations {:?} vs variances {:?}", z.dim(), r.dim())));
        }
        if z.dim().0 == 0 {
            return Err(Error::invalid("need at least one model"));
        }
        if r.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("observation variances must be positive"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observations must be finite"));
        }
        Ok(Self { z, r })
    }

    /// Stacks the aggregated outputs of several models; variances come from
    /// the truncated-Gaussian fits and are floored at `sigma_floor^2`.
    pub fn from_aggregates(models: &[Array2<FrameUncertainty>], sigma_floor: f64) -> Result<Self> {
        let Some(first) = models.first() else {
            return Err(Error::invalid("need at least one model"));
        };
        let (l, s) = first.dim();
        if models.iter().any(|m| m.dim() != (l, s)) {
            return Err(Error::invalid("all models must share frames and speakers"));
        }
        let floor = sigma_floor * sigma_floor;
        let z = Array3::from_shape_fn((models.len(), l, s), |(u, i, j)| models[u][[i, j]].mean_prob);
        let r = Array3::from_shape_fn((models.len(), l, s), |(u, i, j)| {
            models[u][[i, j]].variance().unwrap_or(0.0).max(floor)
        });
        Self::new(z, r)
    }

    pub fn models(&self) -> usize {
        self.z.dim().0
    }

    pub fn frames(&self) -> usize {
        self.z.dim().1
    }

    pub fn speakers(&self) -> usize {
        self.z.dim().2
    }
}

/// Smoothed states and variances `[frame, speaker]`, with frames where the
/// innovation covariance had to be regularized.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanOutput {
    pub x: Array2<f64>,
    pub p: Array2<f64>,
    pub flagged: Vec<(usize, usize)>,
}

impl KalmanOutput {
    /// Thresholds the states after clamping them into `[0, 1]`.
    pub fn predictions(&self, lambda: f64) -> Array2<u8> {
        threshold_matrix(&self.x.mapv(|v| v.clamp(0.0, 1.0)), lambda)
    }
}

struct Track {
    x: Vec<f64>,
    p: Vec<f64>,
    flagged: Vec<usize>,
}

/// Solves `S w = b` for symmetric positive definite `S` by Cholesky. Returns
/// `None` when a pivot is not safely positive.
fn cholesky_solve(s: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut v = s[i * n + j];
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if v.is_nan() || v <= 1e-300 || v < 1e-14 * s[i * n + i].abs() {
                    return None;
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = v / l[j * n + j];
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    Some(y)
}

fn track(obs: &ObservationSet, cfg: &SmootherConfig, s: usize, backward: bool) -> Track {
    let (u_n, l_n) = (obs.models(), obs.frames());
    let h = &cfg.h;
    let h_sum: f64 = h.iter().sum();
    let mut x_pred = vec![0.0; l_n];
    let mut p_pred = vec![0.0; l_n];
    let mut x = vec![0.0; l_n];
    let mut p = vec![0.0; l_n];
    let mut flagged = Vec::new();
    let (mut x_prev, mut p_prev) = (cfg.x_init, cfg.p_init);
    let mut s_mat = vec![0.0; u_n * u_n];
    let mut innov = vec![0.0; u_n];
    for l in 0..l_n {
        let z = |u: usize| obs.z[[u, l, s]];
        let pbar = (0..u_n).map(|u| h[u] * z(u)).sum::<f64>() / h_sum;
        let (f, q) = if pbar > cfg.lambda { (cfg.f0, cfg.q0) } else { (cfg.f1, cfg.q1) };
        x_pred[l] = f * x_prev;
        p_pred[l] = f * f * p_prev + q;

        for i in 0..u_n {
            innov[i] = z(i) - h[i] * x_pred[l];
            for j in 0..u_n {
                s_mat[i * u_n + j] = h[i] * p_pred[l] * h[j];
            }
            s_mat[i * u_n + i] += obs.r[[i, l, s]];
        }
        // k = p h^T S^-1, so k^T y = p h^T (S^-1 y) and k^T h = p h^T (S^-1 h).
        let mut rhs = innov.clone();
        rhs.extend_from_slice(h);
        let solve = |m: &[f64]| -> Option<(Vec<f64>, Vec<f64>)> {
            Some((cholesky_solve(m, &rhs[..u_n], u_n)?, cholesky_solve(m, &rhs[u_n..], u_n)?))
        };
        let (wy, wh) = match solve(&s_mat) {
            Some(w) => w,
            None => {
                flagged.push(l);
                for i in 0..u_n {
                    s_mat[i * u_n + i] += SIGMA_FLOOR * SIGMA_FLOOR;
                }
                solve(&s_mat).unwrap_or((vec![0.0; u_n], vec![0.0; u_n]))
            }
        };
        let gain_y: f64 = (0..u_n).map(|i| h[i] * wy[i]).sum::<f64>() * p_pred[l];
        let gain_h: f64 = (0..u_n).map(|i| h[i] * wh[i]).sum::<f64>() * p_pred[l];
        x[l] = x_pred[l] + gain_y;
        p[l] = (1.0 - gain_h) * p_pred[l];
        x_prev = x[l];
        p_prev = p[l];
    }
    if backward {
        for l in (0..l_n.saturating_sub(1)).rev() {
            let a = p[l] * cfg.f2 / p_pred[l + 1];
            x[l] += a * (x[l + 1] - x_pred[l + 1]);
            p[l] += a * a * (p[l + 1] - p_pred[l + 1]);
        }
    }
    Track { x, p, flagged }
}

fn run(obs: &ObservationSet, cfg: &SmootherConfig, backward: bool) -> Result<KalmanOutput> {
    cfg.validate()?;
    if cfg.h.len() != obs.models() {
        return Err(Error::invalid(format!(
            "{} observation factors for {} models",
            cfg.h.len(),
            obs.models()
        )));
    }
    let (l_n, s_n) = (obs.frames(), obs.speakers());
    let tracks: Vec<Track> = (0..s_n).into_par_iter().map(|s| track(obs, cfg, s, backward)).collect();
    let mut out = KalmanOutput {
        x: Array2::zeros((l_n, s_n)),
        p: Array2::zeros((l_n, s_n)),
        flagged: Vec::new(),
    };
    for (s, t) in tracks.into_iter().enumerate() {
        out.x.column_mut(s).assign(&ndarray::Array1::from(t.x));
        out.p.column_mut(s).assign(&ndarray::Array1::from(t.p));
        out.flagged.extend(t.flagged.into_iter().map(|l| (l, s)));
    }
    out.flagged.sort_unstable();
    Ok(out)
}

/// Forward filter followed by the RTS backward sweep, per speaker.
pub fn kalman_smooth(obs: &ObservationSet, cfg: &SmootherConfig) -> Result<KalmanOutput> {
    run(obs, cfg, true)
}

/// Forward filter only.
pub fn forward_only(obs: &ObservationSet, cfg: &SmootherConfig) -> Result<KalmanOutput> {
    run(obs, cfg, false)
}

/// Smooths the stacked outputs of several models and thresholds the states.
pub fn fuse_models(models: &[Array2<FrameUncertainty>], cfg: &SmootherConfig) -> Result<Array2<u8>> {
    let obs = ObservationSet::from_aggregates(models, SIGMA_FLOOR)?;
    Ok(kalman_smooth(&obs, cfg)?.predictions(cfg.lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStrategy {
    /// Sweep one parameter at a time until no sweep improves.
    Coordinate { max_sweeps: usize },
    /// Every combination.
    Exhaustive,
}

/// Candidate values for the hyperparameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub f: Vec<f64>,
    pub q: Vec<f64>,
    pub h: Vec<f64>,
    pub lambda: f64,
    pub x_init: f64,
    pub p_init: f64,
    pub backward: bool,
    pub strategy: SearchStrategy,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            f: vec![0.80, 0.85, 0.90, 0.95, 1.0],
            q: vec![1e-4, 1e-3, 1e-2, 1e-1],
            h: vec![0.5, 0.75, 1.0, 1.25],
            lambda: 0.5,
            x_init: 0.5,
            p_init: 1.0,
            backward: true,
            strategy: SearchStrategy::Coordinate { max_sweeps: 10 },
        }
    }
}

impl GridSpec {
    /// A grid containing exactly one configuration.
    pub fn single(cfg: &SmootherConfig) -> Self {
        Self {
            f: vec![cfg.f0],
            q: vec![cfg.q0],
            h: vec![cfg.h[0]],
            lambda: cfg.lambda,
            x_init: cfg.x_init,
            p_init: cfg.p_init,
            backward: true,
            strategy: SearchStrategy::Exhaustive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub config: SmootherConfig,
    pub der_pct: f64,
    pub evaluations: usize,
}

/// Grid indices `[f0, f1, f2, q0, q1, h_0, .., h_{U-1}]`.
type Point = Vec<usize>;

struct Objective<'a> {
    obs: &'a ObservationSet,
    truth: &'a LabelMatrix,
    grid: &'a GridSpec,
}

impl Objective<'_> {
    fn axis_len(&self, k: usize) -> usize {
        match k {
            0..=2 => self.grid.f.len(),
            3 | 4 => self.grid.q.len(),
            _ => self.grid.h.len(),
        }
    }

    fn config(&self, pt: &[usize]) -> SmootherConfig {
        let g = self.grid;
        SmootherConfig {
            f0: g.f[pt[0]],
            f1: g.f[pt[1]],
            f2: g.f[pt[2]],
            q0: g.q[pt[3]],
            q1: g.q[pt[4]],
            h: pt[5..].iter().map(|&i| g.h[i]).collect(),
            lambda: g.lambda,
            x_init: g.x_init,
            p_init: g.p_init,
        }
    }

    fn der(&self, pt: &[usize]) -> Result<f64> {
        let cfg = self.config(pt);
        let out = run(self.obs, &cfg, self.grid.backward)?;
        Ok(frame_der(self.truth, &out.predictions(cfg.lambda))?.der_pct)
    }

    /// Parameter values in comparison order, for the lexicographic tie-break.
    fn key(&self, pt: &[usize]) -> Vec<f64> {
        let c = self.config(pt);
        let mut k = vec![c.f0, c.f1, c.f2, c.q0, c.q1];
        k.extend(c.h);
        k
    }

    fn better(&self, a: (&[usize], f64), b: (&[usize], f64)) -> bool {
        a.1 < b.1 || (a.1 == b.1 && self.key(a.0).iter().zip(self.key(b.0)).map(|(x, y)| x.total_cmp(&y)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less))
    }

    fn best(&self, scored: Vec<(Point, f64)>) -> (Point, f64) {
        let mut it = scored.into_iter();
        let mut best = it.next().expect("non-empty candidate list");
        for c in it {
            if self.better((&c.0, c.1), (&best.0, best.1)) {
                best = c;
            }
        }
        best
    }
}

fn nearest(values: &[f64], target: f64) -> usize {
    (0..values.len())
        .min_by(|&a, &b| (values[a] - target).abs().total_cmp(&(values[b] - target).abs()))
        .unwrap_or(0)
}

/// Minimizes validation frame DER over the grid. Ties go to the
/// lexicographically smallest `(f0, f1, f2, q0, q1, h..)` tuple.
pub fn fit_hyperparams(obs: &ObservationSet, truth: &LabelMatrix, grid: &GridSpec) -> Result<FitResult> {
    if grid.f.is_empty() || grid.q.is_empty() || grid.h.is_empty() {
        return Err(Error::invalid("hyperparameter grid is empty"));
    }
    if truth.values.dim() != (obs.frames(), obs.speakers()) {
        return Err(Error::invalid("validation truth does not align with observations"));
    }
    let obj = Objective { obs, truth, grid };
    let dims = 5 + obs.models();
    let eval = |pts: Vec<Point>| -> Result<Vec<(Point, f64)>> {
        pts.into_par_iter()
            .map(|pt| {
                let d = obj.der(&pt)?;
                Ok((pt, d))
            })
            .collect()
    };

    let (best, evaluations) = match grid.strategy {
        SearchStrategy::Exhaustive => {
            let mut pts: Vec<Point> = vec![vec![]];
            for k in 0..dims {
                pts = pts
                    .into_iter()
                    .flat_map(|p| {
                        (0..obj.axis_len(k)).map(move |i| {
                            let mut q = p.clone();
                            q.push(i);
                            q
                        })
                    })
                    .collect();
            }
            let n = pts.len();
            (obj.best(eval(pts)?), n)
        }
        SearchStrategy::Coordinate { max_sweeps } => {
            let d = SmootherConfig::for_models(obs.models());
            let mut cur: Point = vec![
                nearest(&grid.f, d.f0),
                nearest(&grid.f, d.f1),
                nearest(&grid.f, d.f2),
                nearest(&grid.q, d.q0),
                nearest(&grid.q, d.q1),
            ];
            cur.extend(std::iter::repeat_n(nearest(&grid.h, 1.0), obs.models()));
            let mut cache: HashMap<Point, f64> = HashMap::new();
            for (p, v) in eval(vec![cur.clone()])? {
                cache.insert(p, v);
            }
            let mut cur_der = cache[&cur];
            for _ in 0..max_sweeps.max(1) {
                let mut moved = false;
                for k in 0..dims {
                    let cands: Vec<Point> = (0..obj.axis_len(k))
                        .map(|i| {
                            let mut p = cur.clone();
                            p[k] = i;
                            p
                        })
                        .collect();
                    let fresh: Vec<Point> = cands.iter().filter(|p| !cache.contains_key(*p)).cloned().collect();
                    for (p, v) in eval(fresh)? {
                        cache.insert(p, v);
                    }
                    let (p, v) = obj.best(cands.into_iter().map(|p| {
                        let v = cache[&p];
                        (p, v)
                    }).collect());
                    if p != cur && obj.better((&p, v), (&cur, cur_der)) {
                        cur = p;
                        cur_der = v;
                        moved = true;
                    }
                }
                if !moved {
                    break;
                }
            }
            let n = cache.len();
            ((cur, cur_der), n)
        }
    };
    Ok(FitResult {
        config: obj.config(&best.0),
        der_pct: best.1,
        evaluations,
    })
}

/// Mean of the smoothed variance across speakers, per frame.
pub fn mean_variance(out: &KalmanOutput) -> ndarray::Array1<f64> {
    out.p.mean_axis(Axis(1)).unwrap_or_default()
}
