//! Low-pass filtering, decimation and initial-bout trimming.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioSignal;
use crate::emd::instantaneous_amplitude;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Passband cutoff in Hz.
    pub cutoff_hz: f64,
    /// Transition-band width; the stopband starts at `cutoff_hz + transition_hz`.
    pub transition_hz: f64,
    pub decimation_factor: usize,
    pub filter_order: usize,
    /// Minimum attenuation across the stopband.
    pub stopband_attenuation_db: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            cutoff_hz: 1000.0,
            transition_hz: 10.0,
            decimation_factor: 10,
            filter_order: 2,
            stopband_attenuation_db: 40.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.cutoff_hz > 0.0) || !(self.transition_hz >= 0.0) {
            return Err(Error::Config("cutoff and transition must be positive".into()));
        }
        if self.cutoff_hz + self.transition_hz >= nyquist {
            return Err(Error::Config(format!(
                "stopband edge {} Hz is not below Nyquist ({nyquist} Hz)",
                self.cutoff_hz + self.transition_hz
            )));
        }
        if self.decimation_factor == 0 {
            return Err(Error::Config("decimation factor must be at least 1".into()));
        }
        if self.filter_order == 0 {
            return Err(Error::Config("filter order must be at least 1".into()));
        }
        if !(self.stopband_attenuation_db > 0.0) {
            return Err(Error::Config("stopband attenuation must be positive".into()));
        }
        Ok(())
    }
}

/// One second-order section, `b0 + b1 z^-1 + b2 z^-2 / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (1.0 + z_inv * self.a[0] + z2 * self.a[1])
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct IirFilter {
    pub sections: Vec<Biquad>,
}

impl IirFilter {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, sample_rate: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / sample_rate);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Causal filtering, transposed direct form II per section.
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut data = input.to_vec();
        for s in &self.sections {
            let (mut s1, mut s2) = (0.0, 0.0);
            for x in data.iter_mut() {
                let y = s.b[0] * *x + s1;
                s1 = s.b[1] * *x - s.a[0] * y + s2;
                s2 = s.b[2] * *x - s.a[1] * y;
                *x = y;
            }
        }
        data
    }
}

/// Digital Chebyshev type-II low-pass whose stopband (attenuation at least
/// `attenuation_db`) begins at `stop_hz`. Unit gain at DC.
pub fn design_chebyshev2_lowpass(
    order: usize,
    attenuation_db: f64,
    stop_hz: f64,
    sample_rate: f64,
) -> Result<IirFilter> {
    if order == 0 {
        return Err(Error::Config("filter order must be at least 1".into()));
    }
    if !(stop_hz > 0.0 && stop_hz < sample_rate / 2.0) {
        return Err(Error::Config(format!(
            "stopband edge {stop_hz} Hz must lie in (0, {})",
            sample_rate / 2.0
        )));
    }
    let n = order as f64;

    // Analog prototype with the stopband edge at 1 rad/s.
    let eps = 1.0 / (10f64.powf(0.1 * attenuation_db) - 1.0).sqrt();
    let mu = (1.0 / eps).asinh() / n;
    let ms: Vec<f64> = (0..order).map(|i| -(n - 1.0) + 2.0 * i as f64).collect();
    let zeros: Vec<Complex64> = ms
        .iter()
        .filter(|&&m| m != 0.0)
        .map(|&m| Complex64::new(0.0, 1.0 / (m * PI / (2.0 * n)).sin()))
        .collect();
    let poles: Vec<Complex64> = ms
        .iter()
        .map(|&m| {
            let p = -Complex64::from_polar(1.0, PI * m / (2.0 * n));
            let p = Complex64::new(mu.sinh() * p.re, mu.cosh() * p.im);
            1.0 / p
        })
        .collect();

    // Pre-warp the edge, scale, then bilinear transform.
    let fs2 = 2.0 * sample_rate;
    let warped = fs2 * (PI * stop_hz / sample_rate).tan();
    let bilinear = |s: Complex64| (fs2 + s * warped) / (fs2 - s * warped);
    let mut zd: Vec<Complex64> = zeros.iter().map(|&z| bilinear(z)).collect();
    let pd: Vec<Complex64> = poles.iter().map(|&p| bilinear(p)).collect();
    zd.resize(pd.len(), Complex64::new(-1.0, 0.0));

    let mut sections = pair_sections(&zd, &pd);
    // Normalise to exactly unit gain at DC.
    let dc: Complex64 = sections
        .iter()
        .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(Complex64::new(1.0, 0.0)));
    let g = 1.0 / dc.re;
    for b in sections[0].b.iter_mut() {
        *b *= g;
    }
    Ok(IirFilter { sections })
}

/// Group conjugate pole/zero pairs into real biquads.
fn pair_sections(zeros: &[Complex64], poles: &[Complex64]) -> Vec<Biquad> {
    const IMAG_TOL: f64 = 1e-12;
    let split = |roots: &[Complex64]| {
        let mut upper: Vec<Complex64> = roots.iter().copied().filter(|r| r.im > IMAG_TOL).collect();
        let mut real: Vec<f64> = roots
            .iter()
            .filter(|r| r.im.abs() <= IMAG_TOL)
            .map(|r| r.re)
            .collect();
        upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
        real.sort_by(f64::total_cmp);
        (upper, real)
    };
    // Each entry is (c1, c2) of 1 + c1 z^-1 + c2 z^-2.
    let quadratics = |roots: &[Complex64]| {
        let (upper, real) = split(roots);
        let mut out: Vec<(f64, f64)> = upper.iter().map(|r| (-2.0 * r.re, r.norm_sqr())).collect();
        for pair in real.chunks(2) {
            match pair {
                [a, b] => out.push((-(a + b), a * b)),
                [a] => out.push((-a, 0.0)),
                _ => unreachable!(),
            }
        }
        out
    };
    let zq = quadratics(zeros);
    let pq = quadratics(poles);
    pq.iter()
        .enumerate()
        .map(|(i, &(a1, a2))| {
            let (b1, b2) = zq.get(i).copied().unwrap_or((0.0, 0.0));
            Biquad {
                b: [1.0, b1, b2],
                a: [a1, a2],
            }
        })
        .collect()
}

/// Chebyshev type-II low-pass per `cfg` (stopband edge at cutoff + transition).
pub fn chebyshev2_lowpass(signal: &AudioSignal, cfg: &PreprocessConfig) -> Result<AudioSignal> {
    cfg.validate(signal.sample_rate)?;
    let filter = design_chebyshev2_lowpass(
        cfg.filter_order,
        cfg.stopband_attenuation_db,
        cfg.cutoff_hz + cfg.transition_hz,
        signal.sample_rate as f64,
    )?;
    Ok(AudioSignal::new(filter.apply(&signal.samples), signal.sample_rate))
}

/// Keep every `factor`-th sample. No anti-alias filtering is applied here.
pub fn decimate(signal: &AudioSignal, factor: usize) -> Result<AudioSignal> {
    if factor == 0 {
        return Err(Error::Config("decimation factor must be at least 1".into()));
    }
    let samples = signal.samples.iter().step_by(factor).copied().collect();
    Ok(AudioSignal::new(samples, signal.sample_rate / factor as u32))
}

/// Envelope smoothing window for trimming.
const TRIM_SMOOTHING_SECONDS: f64 = 0.05;
/// A peak counts as "major" once it reaches this fraction of the global envelope maximum.
const MAJOR_PEAK_FRACTION: f64 = 0.5;
/// The onset is the last sample before the peak below this fraction of it.
const ONSET_FRACTION: f64 = 0.1;

/// Smoothed Hilbert envelope used for trimming.
pub fn smoothed_envelope(signal: &AudioSignal) -> Vec<f64> {
    if signal.len() < 4 {
        return signal.samples.iter().map(|s| s.abs()).collect();
    }
    let env = instantaneous_amplitude(&signal.samples).unwrap_or_else(|_| vec![0.0; signal.len()]);
    let window = ((TRIM_SMOOTHING_SECONDS * signal.sample_rate as f64).round() as usize).max(1);
    moving_average(&env, window)
}

/// Centered moving average; the window shrinks at the edges.
fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half_left = (window - 1) / 2;
    let half_right = window / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half_left);
            let hi = (i + half_right + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Index at which [`trim_initial_bout`] would cut, or 0 when nothing is trimmed.
pub fn initial_bout_onset(signal: &AudioSignal) -> usize {
    let env = smoothed_envelope(signal);
    let global_max = env.iter().copied().fold(0.0, f64::max);
    if !(global_max > 1e-12) {
        return 0;
    }
    let Some(mut peak) = env.iter().position(|&e| e >= MAJOR_PEAK_FRACTION * global_max) else {
        return 0;
    };
    while peak + 1 < env.len() && env[peak + 1] >= env[peak] {
        peak += 1;
    }
    let threshold = ONSET_FRACTION * env[peak];
    env[..peak].iter().rposition(|&e| e < threshold).unwrap_or(0)
}

/// Drop everything before the onset of the first major envelope peak.
pub fn trim_initial_bout(signal: &AudioSignal) -> AudioSignal {
    let onset = initial_bout_onset(signal);
    signal.slice(onset, signal.len())
}
