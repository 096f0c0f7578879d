//! Maximum-likelihood fitting of a normal distribution truncated to [0, 1].

use std::f64::consts::{PI, SQRT_2};

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Smallest standard deviation a fit may return.
pub const SIGMA_FLOOR: f64 = 1e-6;

const MU_BOUNDS: (f64, f64) = (-2.0, 3.0);
const SIGMA_MAX: f64 = 10.0;
const MAX_ITERATIONS: usize = 2000;

/// Parameters of the untruncated normal plus the moments of the truncated one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncNormFit {
    pub mu: f64,
    pub sigma: f64,
    /// Mean of the truncated distribution.
    pub mean: f64,
    /// Variance of the truncated distribution, at least `sigma_floor^2`.
    pub variance: f64,
    pub log_likelihood: f64,
    /// False when the optimiser hit its iteration cap and the moment-based
    /// estimate was returned instead.
    pub converged: bool,
}

/// `ln(1 - Phi(x))` without underflow for large `x`.
fn ln_upper_tail(x: f64) -> f64 {
    if x < 30.0 {
        (0.5 * erfc(x / SQRT_2)).ln()
    } else {
        // Asymptotic series of the Mills ratio.
        let x2 = x * x;
        -0.5 * x2 - x.ln() - 0.5 * (2.0 * PI).ln() + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2)).ln()
    }
}

fn ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * PI).ln()
}

/// `ln(Phi(b) - Phi(a))` for `a < b`.
fn ln_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        let (la, lb) = (ln_upper_tail(a), ln_upper_tail(b));
        la + (-(lb - la).exp()).ln_1p()
    } else if b <= 0.0 {
        let (la, lb) = (ln_upper_tail(-a), ln_upper_tail(-b));
        lb + (-(la - lb).exp()).ln_1p()
    } else {
        (1.0 - 0.5 * erfc(b / SQRT_2) - 0.5 * erfc(-a / SQRT_2)).ln()
    }
}

/// Sufficient statistics of a sample: count, mean and centred sum of squares.
#[derive(Debug, Clone, Copy)]
struct Moments {
    n: f64,
    mean: f64,
    ss: f64,
}

impl Moments {
    fn of(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let ss = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
        Self { n, mean, ss }
    }

    fn log_likelihood(&self, mu: f64, sigma: f64) -> f64 {
        let a = -mu / sigma;
        let b = (1.0 - mu) / sigma;
        let quad = (self.ss + self.n * (self.mean - mu).powi(2)) / (2.0 * sigma * sigma);
        -self.n * (sigma.ln() + 0.5 * (2.0 * PI).ln() + ln_mass(a, b)) - quad
    }
}

/// Log-likelihood of `samples` under normal(`mu`, `sigma`) truncated to [0, 1].
pub fn log_likelihood(samples: &[f64], mu: f64, sigma: f64) -> f64 {
    Moments::of(samples).log_likelihood(mu, sigma)
}

/// Mean and variance of normal(`mu`, `sigma`) truncated to [0, 1].
pub fn truncated_moments(mu: f64, sigma: f64) -> (f64, f64) {
    let a = -mu / sigma;
    let b = (1.0 - mu) / sigma;
    let lz = ln_mass(a, b);
    let ra = (ln_pdf(a) - lz).exp();
    let rb = (ln_pdf(b) - lz).exp();
    let mean = mu + sigma * (ra - rb);
    let var = sigma * sigma * (1.0 + a * ra - b * rb - (ra - rb).powi(2));
    (mean.clamp(0.0, 1.0), var)
}

/// Fits (mu, sigma) by maximum likelihood.
///
/// Starts from the sample mean and standard deviation and runs a bounded
/// Nelder-Mead search over (mu, ln sigma). Samples with spread at or below
/// `sigma_floor` return the mean with `sigma = sigma_floor`.
pub fn fit_truncated_gaussian(samples: &[f64], sigma_floor: f64) -> Result<TruncNormFit> {
    if samples.len() < 2 {
        return Err(Error::invalid("truncated-Gaussian fit needs at least two samples"));
    }
    if samples.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::invalid("samples must lie in [0, 1]"));
    }
    if sigma_floor.is_nan() || sigma_floor <= 0.0 {
        return Err(Error::invalid("sigma floor must be positive"));
    }
    let m = Moments::of(samples);
    let std = (m.ss / m.n).sqrt();
    let init = [m.mean, std.max(sigma_floor).ln()];
    let finish = |mu: f64, sigma: f64, converged: bool| {
        let (mean, variance) = truncated_moments(mu, sigma);
        let variance = if variance.is_finite() {
            variance.max(sigma_floor * sigma_floor)
        } else {
            (sigma * sigma).min(0.25).max(sigma_floor * sigma_floor)
        };
        TruncNormFit {
            mu,
            sigma,
            mean: if mean.is_finite() { mean } else { m.mean },
            variance,
            log_likelihood: m.log_likelihood(mu, sigma),
            converged,
        }
    };
    if std <= sigma_floor {
        return Ok(finish(m.mean, sigma_floor, true));
    }

    let lo = [MU_BOUNDS.0, sigma_floor.ln()];
    let hi = [MU_BOUNDS.1, SIGMA_MAX.ln()];
    let objective = |p: [f64; 2]| {
        let v = -m.log_likelihood(p[0], p[1].exp());
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let scale = [(0.2 * std).max(1e-3), 0.3];
    match nelder_mead(objective, init, scale, lo, hi, MAX_ITERATIONS) {
        Some(p) => Ok(finish(p[0], p[1].exp(), true)),
        None => Ok(finish(init[0], init[1].exp(), false)),
    }
}

/// Bounded Nelder-Mead in two dimensions. Returns `None` when the iteration
/// cap is reached before the simplex collapses.
fn nelder_mead(
    f: impl Fn([f64; 2]) -> f64,
    start: [f64; 2],
    scale: [f64; 2],
    lo: [f64; 2],
    hi: [f64; 2],
    max_iter: usize,
) -> Option<[f64; 2]> {
    let clamp = |p: [f64; 2]| [p[0].clamp(lo[0], hi[0]), p[1].clamp(lo[1], hi[1])];
    let start = clamp(start);
    let mut simplex: Vec<([f64; 2], f64)> = vec![(start, f(start))];
    for d in 0..2 {
        let mut p = start;
        p[d] += scale[d];
        if p[d] > hi[d] {
            p[d] = start[d] - scale[d];
        }
        let p = clamp(p);
        simplex.push((p, f(p)));
    }
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| {
        clamp([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])])
    };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[2].1);
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| (p[0] - simplex[0].0[0]).abs().max((p[1] - simplex[0].0[1]).abs()))
            .fold(0.0, f64::max);
        if (worst - best).abs() <= 1e-12 * (1.0 + best.abs()) && size < 1e-8 {
            return Some(simplex[0].0);
        }
        let centroid = [
            0.5 * (simplex[0].0[0] + simplex[1].0[0]),
            0.5 * (simplex[0].0[1] + simplex[1].0[1]),
        ];
        let w = simplex[2].0;
        let r = lerp(centroid, w, -1.0);
        let fr = f(r);
        if fr < simplex[0].1 {
            let e = lerp(centroid, w, -2.0);
            let fe = f(e);
            simplex[2] = if fe < fr { (e, fe) } else { (r, fr) };
        } else if fr < simplex[1].1 {
            simplex[2] = (r, fr);
        } else {
            let (c, fc) = if fr < worst {
                let c = lerp(centroid, r, 0.5);
                (c, f(c))
            } else {
                let c = lerp(centroid, w, 0.5);
                (c, f(c))
            };
            if fc < worst.min(fr) {
                simplex[2] = (c, fc);
            } else {
                let b = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    v.0 = lerp(b, v.0, 0.5);
                    v.1 = f(v.0);
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Rejection sampler, independent of the fitting code.
    fn draw(mu: f64, sigma: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(mu, sigma).unwrap();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let x = normal.sample(&mut rng);
            if (0.0..=1.0).contains(&x) {
                out.push(x);
            }
        }
        out
    }

    /// Midpoint-rule moments of the truncated density.
    fn quadrature_moments(mu: f64, sigma: f64) -> (f64, f64) {
        let n = 200_000;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            let d = (-0.5 * ((x - mu) / sigma).powi(2)).exp();
            z += d;
            m1 += x * d;
            m2 += x * x * d;
        }
        let mean = m1 / z;
        (mean, m2 / z - mean * mean)
    }

    #[test]
    fn degenerate_samples_hit_the_floor() {
        let fit = fit_truncated_gaussian(&[0.7; 50], SIGMA_FLOOR).unwrap();
        assert!((fit.mu - 0.7).abs() < 1e-12);
        assert_eq!(fit.sigma, SIGMA_FLOOR);
        assert!(fit.variance >= SIGMA_FLOOR * SIGMA_FLOOR);
        assert!(fit.converged);
    }

    #[test]
    fn recovers_known_parameters() {
        let samples = draw(0.3, 0.2, 10_000, 17);
        let fit = fit_truncated_gaussian(&samples, SIGMA_FLOOR).unwrap();
        assert!(fit.converged);
        assert!((fit.mu - 0.3).abs() < 0.02, "mu {}", fit.mu);
        assert!((fit.sigma - 0.2).abs() < 0.02, "sigma {}", fit.sigma);
    }

    #[test]
    fn extremes_give_wide_fit_matching_grid_search() {
        let samples = [0.0, 0.0, 1.0, 1.0];
        let fit = fit_truncated_gaussian(&samples, SIGMA_FLOOR).unwrap();
        assert!((fit.mu - 0.5).abs() < 1e-3, "mu {}", fit.mu);
        assert!(fit.sigma > 0.5);
        let mut best = f64::NEG_INFINITY;
        for i in 0..=100 {
            for j in 0..=100 {
                let mu = -2.0 + 5.0 * i as f64 / 100.0;
                let sigma = (SIGMA_FLOOR.ln() + (SIGMA_MAX.ln() - SIGMA_FLOOR.ln()) * j as f64 / 100.0).exp();
                best = best.max(log_likelihood(&samples, mu, sigma));
            }
        }
        assert!(fit.log_likelihood >= best - 1e-9);
    }

    #[test]
    fn fit_never_worse_than_its_start() {
        for seed in 0..20 {
            let samples = draw(0.1 + 0.04 * seed as f64, 0.05 + 0.015 * seed as f64, 200, seed);
            let fit = fit_truncated_gaussian(&samples, SIGMA_FLOOR).unwrap();
            let m = Moments::of(&samples);
            let start = m.log_likelihood(m.mean, (m.ss / m.n).sqrt());
            assert!(fit.log_likelihood >= start);
        }
    }

    #[test]
    fn closed_form_moments_match_quadrature() {
        for (mu, sigma) in [(0.5, 0.1), (0.1, 0.3), (0.9, 0.4), (-0.3, 0.2), (1.4, 0.5), (0.5, 5.0)] {
            let (m, v) = truncated_moments(mu, sigma);
            let (qm, qv) = quadrature_moments(mu, sigma);
            assert!((m - qm).abs() < 1e-6, "mean {m} vs {qm} at ({mu}, {sigma})");
            assert!((v - qv).abs() < 1e-6, "var {v} vs {qv} at ({mu}, {sigma})");
        }
    }

    #[test]
    fn tail_mass_is_finite_far_outside() {
        let lz = ln_mass(50.0, 60.0);
        assert!(lz.is_finite() && lz < -1000.0);
        let lz = ln_mass(-60.0, -50.0);
        assert!(lz.is_finite() && lz < -1000.0);
    }

    #[test]
    fn input_validation() {
        assert!(fit_truncated_gaussian(&[0.5], SIGMA_FLOOR).is_err());
        assert!(fit_truncated_gaussian(&[0.5, 1.5], SIGMA_FLOOR).is_err());
        assert!(fit_truncated_gaussian(&[0.5, 0.6], 0.0).is_err());
    }
}
