//! Error analysis for correlated Monte Carlo series: integrated autocorrelation
//! times, batch means, blocked jackknife, and small fitting helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A scalar Monte Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    /// Number of (correlated) samples behind the estimate.
    pub n: usize,
    /// Integrated autocorrelation time of the underlying series, in samples.
    pub tau: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0, n: 0, tau: 0.0 }
    }

    /// `|value - target| / stderr`, infinite when the error is zero and the values differ.
    pub fn z_score(&self, target: f64) -> f64 {
        z(self.value - target, self.stderr)
    }

    /// Difference of two independent estimates.
    pub fn minus(&self, other: &Estimate) -> Estimate {
        Estimate {
            value: self.value - other.value,
            stderr: self.stderr.hypot(other.stderr),
            n: self.n.min(other.n),
            tau: self.tau.max(other.tau),
        }
    }

    pub fn relative_error(&self) -> f64 {
        self.stderr / self.value.abs()
    }
}

pub(crate) fn z(diff: f64, err: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if err == 0.0 {
        f64::INFINITY
    } else {
        diff.abs() / err
    }
}

/// A `d × d` matrix estimate in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub dim: usize,
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: usize,
}

impl MatrixEstimate {
    pub fn get(&self, i: usize, j: usize) -> Estimate {
        let k = i * self.dim + j;
        Estimate { value: self.value[k], stderr: self.stderr[k], n: self.n, tau: 0.0 }
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim;
        let mut r: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                r = r.max((self.value[i * d + j] - self.value[j * d + i]).abs());
            }
        }
        r
    }

    /// Replace the estimate by its symmetric part.
    pub fn symmetrize(&mut self) {
        let d = self.dim;
        for i in 0..d {
            for j in i + 1..d {
                let v = 0.5 * (self.value[i * d + j] + self.value[j * d + i]);
                let e = 0.5 * (self.stderr[i * d + j].hypot(self.stderr[j * d + i]));
                self.value[i * d + j] = v;
                self.value[j * d + i] = v;
                self.stderr[i * d + j] = e;
                self.stderr[j * d + i] = e;
            }
        }
    }

    /// Largest entrywise z-score against `target`.
    pub fn max_z(&self, target: &[f64]) -> f64 {
        self.value
            .iter()
            .zip(&self.stderr)
            .zip(target)
            .map(|((v, e), t)| z(v - t, *e))
            .fold(0.0, f64::max)
    }
}

/// Result of the windowed autocorrelation analysis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutocorrTime {
    /// `1/2 + Σ_{k=1}^{W} ρ(k)`, so that an i.i.d. series has `tau = 0.5`.
    pub tau: f64,
    pub window: usize,
    /// Rough standard error of `tau` (Madras–Sokal).
    pub stderr: f64,
    /// The series is constant.
    pub degenerate: bool,
    /// The window did not settle, or the series is shorter than `50 tau`.
    pub unreliable: bool,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Integrated autocorrelation time with Sokal's self-consistent window `W >= c·tau(W)`, `c = 6`.
pub fn autocorrelation_time(series: &[f64]) -> Result<AutocorrTime> {
    let n = series.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("series of length {n}")));
    }
    let m = mean(series);
    let c0 = series.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if c0 <= 1e-28 * m * m || c0 == 0.0 {
        return Ok(AutocorrTime { tau: 0.5, window: 0, stderr: 0.0, degenerate: true, unreliable: true });
    }
    let c = 6.0;
    let mut tau = 0.5;
    let mut window = 0;
    let mut settled = false;
    for k in 1..n / 2 {
        let ck = series[..n - k].iter().zip(&series[k..]).map(|(a, b)| (a - m) * (b - m)).sum::<f64>()
            / n as f64;
        tau += ck / c0;
        window = k;
        if k as f64 >= c * tau {
            settled = true;
            break;
        }
    }
    let tau = tau.max(0.5);
    let stderr = tau * (2.0 * (2.0 * window as f64 + 1.0) / n as f64).sqrt();
    let unreliable = !settled || (n as f64) < 50.0 * tau;
    Ok(AutocorrTime { tau, window, stderr, degenerate: false, unreliable })
}

/// Block length covering about `20 tau` samples while keeping at least 16 blocks.
pub fn block_length(n: usize, tau: f64) -> usize {
    let want = (20.0 * tau).ceil().max(1.0) as usize;
    want.min((n / 16).max(1))
}

/// Mean with a batch-means standard error; batch size chosen from the autocorrelation time.
pub fn batch_means(series: &[f64]) -> Result<Estimate> {
    let ac = autocorrelation_time(series)?;
    let n = series.len();
    if ac.degenerate {
        return Ok(Estimate { value: mean(series), stderr: 0.0, n, tau: ac.tau });
    }
    let b = block_length(n, ac.tau);
    let nb = n / b;
    let means: Vec<f64> = (0..nb).map(|k| mean(&series[k * b..(k + 1) * b])).collect();
    let stderr = (variance(&means) / nb as f64).sqrt();
    Ok(Estimate { value: mean(series), stderr, n, tau: ac.tau })
}

/// Mean and standard error of independent samples.
pub fn iid_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let stderr = if n > 1 { (variance(xs) / n as f64).sqrt() } else { f64::INFINITY };
    Estimate { value: mean(xs), stderr, n, tau: 0.5 }
}

/// Blocked jackknife for a smooth function of the means of several series.
///
/// `columns[k]` is the k-th series; all must have the same length. Returns the
/// function at the full means and the jackknife standard error of every output.
pub fn jackknife<F>(columns: &[Vec<f64>], block: usize, f: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = columns.first().map(|c| c.len()).unwrap_or(0);
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidParameter("jackknife columns differ in length".into()));
    }
    let block = block.max(1);
    let nb = n / block;
    if nb < 2 {
        return Err(Error::InsufficientData(format!("{n} samples in blocks of {block}")));
    }
    let used = nb * block;
    let k = columns.len();
    let mut block_sums = vec![vec![0.0; k]; nb];
    let mut total = vec![0.0; k];
    for (c, col) in columns.iter().enumerate() {
        for (b, sums) in block_sums.iter_mut().enumerate() {
            let s: f64 = col[b * block..(b + 1) * block].iter().sum();
            sums[c] = s;
            total[c] += s;
        }
    }
    let full: Vec<f64> = total.iter().map(|t| t / used as f64).collect();
    let value = f(&full);
    let mut acc = vec![0.0; value.len()];
    let mut leave = vec![0.0; k];
    let loo: Vec<Vec<f64>> = block_sums
        .iter()
        .map(|sums| {
            for c in 0..k {
                leave[c] = (total[c] - sums[c]) / (used - block) as f64;
            }
            f(&leave)
        })
        .collect();
    let loo_mean: Vec<f64> =
        (0..value.len()).map(|o| loo.iter().map(|v| v[o]).sum::<f64>() / nb as f64).collect();
    for v in &loo {
        for o in 0..value.len() {
            acc[o] += (v[o] - loo_mean[o]).powi(2);
        }
    }
    let scale = (nb as f64 - 1.0) / nb as f64;
    let err = acc.iter().map(|a| (scale * a).sqrt()).collect();
    Ok((value, err))
}

/// Ordinary least squares `y = slope·x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_stderr: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::InsufficientData(format!("{n} points for a line fit")));
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if n > 2 { (sse / (n as f64 - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(LinearFit { slope, intercept, r_squared, slope_stderr })
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || n > 64 {
        return Err(Error::InvalidParameter(format!("quadrature order {n} outside 1..=64")));
    }
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        // Newton iteration on P_n from the Chebyshev-like initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes.push(0.5 * (1.0 - x));
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    Ok((nodes, weights))
}
