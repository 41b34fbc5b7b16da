//! Empirical mode decomposition and the Hilbert instantaneous amplitude.
//!
//! Sifting follows the classic recipe: cubic-spline envelopes through the
//! local maxima and minima, subtract their mean, repeat until the Cauchy
//! standard-deviation criterion drops below the threshold (and the candidate
//! satisfies the extrema/zero-crossing balance) or the sift cap is reached.
//! Envelope end effects are tamed by mirroring the two outermost extrema of
//! each kind about the first and last sample.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiftConfig {
    pub max_imfs: usize,
    pub sd_threshold: f64,
    pub max_sifts_per_imf: usize,
}

impl Default for SiftConfig {
    fn default() -> Self {
        Self {
            max_imfs: 12,
            sd_threshold: 0.2,
            max_sifts_per_imf: 50,
        }
    }
}

impl SiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_imfs == 0 || self.max_sifts_per_imf == 0 || !(self.sd_threshold > 0.0) {
            return Err(Error::Config("sift parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Intrinsic mode functions, highest frequency first, plus the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ImfSet {
    pub imfs: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
}

impl ImfSet {
    pub fn len(&self) -> usize {
        self.imfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imfs.is_empty()
    }

    /// Sum of all modes and the residual.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut out = self.residual.clone();
        for imf in &self.imfs {
            for (o, v) in out.iter_mut().zip(imf) {
                *o += v;
            }
        }
        out
    }
}

/// Indices of local maxima and minima. An extremum is a strict sign change
/// of the first difference; flat runs collapse to their midpoint.
pub fn find_extrema(x: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut maxima = Vec::new();
    let mut minima = Vec::new();
    let mut last_sign = 0i8;
    // First index of the current flat run (the sample after the last nonzero step).
    let mut run_start = 0usize;
    for j in 0..x.len().saturating_sub(1) {
        let d = x[j + 1] - x[j];
        if d == 0.0 {
            continue;
        }
        let sign = if d > 0.0 { 1 } else { -1 };
        if last_sign != 0 && sign != last_sign {
            let mid = (run_start + j) / 2;
            if last_sign > 0 {
                maxima.push(mid);
            } else {
                minima.push(mid);
            }
        }
        last_sign = sign;
        run_start = j + 1;
    }
    (maxima, minima)
}

/// Number of sign changes, ignoring exact zeros.
pub fn count_zero_crossings(x: &[f64]) -> usize {
    let mut count = 0;
    let mut prev = 0.0f64;
    for &v in x {
        if v == 0.0 {
            continue;
        }
        if prev != 0.0 && (v > 0.0) != (prev > 0.0) {
            count += 1;
        }
        prev = v;
    }
    count
}

/// `|#extrema - #zero-crossings| <= 1`.
pub fn satisfies_imf_balance(x: &[f64]) -> bool {
    let (maxima, minima) = find_extrema(x);
    let extrema = (maxima.len() + minima.len()) as i64;
    (extrema - count_zero_crossings(x) as i64).abs() <= 1
}

/// Natural cubic spline through `(knots, values)` evaluated at 0..n.
/// Knots must be strictly increasing.
fn natural_spline(knots: &[f64], values: &[f64], n: usize) -> Vec<f64> {
    let m = knots.len();
    debug_assert!(m >= 2);
    // Second derivatives via the Thomas algorithm.
    let mut second = vec![0.0; m];
    if m > 2 {
        let mut c_prime = vec![0.0; m];
        let mut d_prime = vec![0.0; m];
        for i in 1..m - 1 {
            let h0 = knots[i] - knots[i - 1];
            let h1 = knots[i + 1] - knots[i];
            let a = h0;
            let b = 2.0 * (h0 + h1);
            let c = h1;
            let d = 6.0 * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
            let denom = b - a * c_prime[i - 1];
            c_prime[i] = c / denom;
            d_prime[i] = (d - a * d_prime[i - 1]) / denom;
        }
        for i in (1..m - 1).rev() {
            second[i] = d_prime[i] - c_prime[i] * second[i + 1];
        }
    }

    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    for t in 0..n {
        let t = t as f64;
        while seg + 2 < m && t > knots[seg + 1] {
            seg += 1;
        }
        let (x0, x1) = (knots[seg], knots[seg + 1]);
        let h = x1 - x0;
        let a = (x1 - t) / h;
        let b = (t - x0) / h;
        let y = a * values[seg]
            + b * values[seg + 1]
            + ((a * a * a - a) * second[seg] + (b * b * b - b) * second[seg + 1]) * h * h / 6.0;
        out.push(y);
    }
    out
}

/// Spline envelope through the given extrema, with the two outermost
/// extrema mirrored about each end sample.
fn envelope(x: &[f64], extrema: &[usize]) -> Vec<f64> {
    let n = x.len();
    let last = (n - 1) as f64;
    let mut knots = Vec::with_capacity(extrema.len() + 4);
    let mut values = Vec::with_capacity(extrema.len() + 4);
    for &i in extrema.iter().take(2).rev() {
        knots.push(-(i as f64));
        values.push(x[i]);
    }
    for &i in extrema {
        knots.push(i as f64);
        values.push(x[i]);
    }
    for &i in extrema.iter().rev().take(2) {
        knots.push(2.0 * last - i as f64);
        values.push(x[i]);
    }
    natural_spline(&knots, &values, n)
}

/// Extract one IMF from `x` by sifting.
fn sift(x: &[f64], cfg: &SiftConfig) -> Vec<f64> {
    let mut h = x.to_vec();
    for _ in 0..cfg.max_sifts_per_imf {
        let (maxima, minima) = find_extrema(&h);
        if maxima.is_empty() || minima.is_empty() {
            break;
        }
        let upper = envelope(&h, &maxima);
        let lower = envelope(&h, &minima);
        let mut diff_energy = 0.0;
        let mut energy = 0.0;
        for ((v, u), l) in h.iter_mut().zip(&upper).zip(&lower) {
            let mean = 0.5 * (u + l);
            energy += *v * *v;
            diff_energy += mean * mean;
            *v -= mean;
        }
        let sd = if energy > 0.0 { diff_energy / energy } else { 0.0 };
        if sd < cfg.sd_threshold && satisfies_imf_balance(&h) {
            break;
        }
    }
    h
}

/// Decompose `signal` into IMFs and a residual. Stops once the residual has
/// fewer than three extrema (monotone, or a single turn) or `max_imfs` is reached.
pub fn emd(signal: &[f64], cfg: &SiftConfig) -> Result<ImfSet> {
    cfg.validate()?;
    if signal.len() < 4 {
        return Err(Error::Input(format!(
            "EMD needs at least 4 samples, got {}",
            signal.len()
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("EMD input contains non-finite values".into()));
    }
    let mut residual = signal.to_vec();
    let mut imfs = Vec::new();
    while imfs.len() < cfg.max_imfs {
        let (maxima, minima) = find_extrema(&residual);
        if maxima.len() + minima.len() < 3 {
            break;
        }
        let imf = sift(&residual, cfg);
        for (r, v) in residual.iter_mut().zip(&imf) {
            *r -= v;
        }
        imfs.push(imf);
    }
    Ok(ImfSet { imfs, residual })
}

/// Pick modes by 1-based index. Indices past the last IMF clamp to it;
/// duplicates after clamping are dropped. Returns an empty list when the set
/// holds no IMFs.
pub fn select_modes<'a>(imfs: &'a ImfSet, indices: &[usize]) -> Result<Vec<&'a [f64]>> {
    if indices.is_empty() {
        return Err(Error::Config("mode index list is empty".into()));
    }
    if indices.contains(&0) {
        return Err(Error::Config("mode indices are 1-based".into()));
    }
    if imfs.is_empty() {
        return Ok(Vec::new());
    }
    let mut chosen: Vec<usize> = Vec::new();
    for &i in indices {
        let pos = i.min(imfs.len()) - 1;
        if !chosen.contains(&pos) {
            chosen.push(pos);
        }
    }
    Ok(chosen.into_iter().map(|p| imfs.imfs[p].as_slice()).collect())
}

/// Analytic signal via the FFT method: keep DC (and Nyquist for even
/// lengths), double the positive frequencies, zero the negative ones.
pub fn analytic_signal(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let positive_end = n.div_ceil(2);
    for v in buf.iter_mut().take(positive_end).skip(1) {
        *v *= 2.0;
    }
    let negative_start = n / 2 + 1;
    for v in buf.iter_mut().skip(negative_start) {
        *v = Complex64::new(0.0, 0.0);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// Magnitude of the analytic signal.
pub fn instantaneous_amplitude(mode: &[f64]) -> Result<Vec<f64>> {
    if mode.len() < 4 {
        return Err(Error::Input(format!(
            "instantaneous amplitude needs at least 4 samples, got {}",
            mode.len()
        )));
    }
    Ok(analytic_signal(mode).iter().map(|c| c.norm()).collect())
}
