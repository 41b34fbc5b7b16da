//! Sonographs (MFCC, Mel spectrogram, line spectral pairs) and the stacked
//! [`CoughTensor`].
//!
//! All three representations share one framing: frames of `frame_length`
//! samples every `hop_length`, centred on `t * hop_length` with zero padding
//! at both ends. A signal of `n` samples therefore yields `1 + n / hop`
//! frames, so 2.32 s at 22050 Hz gives exactly 100 and 1 s gives 44.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioSignal;
use crate::error::{Error, Result};

/// Floor of the dB scales, relative to the maximum.
pub const DB_FLOOR: f64 = -80.0;
/// Power below this is treated as silence by the dB conversion.
const POWER_AMIN: f64 = 1e-10;
/// Relative white-noise correction added to the LPC autocorrelation.
const LPC_NOISE_FLOOR: f64 = 1e-9;
/// Frames whose energy is this far below the loudest frame are treated as silent.
const LPC_SILENT_FRAME: f64 = 1e-12;
const LSP_GRID: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SonographConfig {
    pub sample_rate: u32,
    pub hop_length: usize,
    pub frame_length: usize,
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub lpc_order: usize,
    pub n_frames: usize,
    pub mel_fmin: f64,
    /// `None` means half the sample rate.
    pub mel_fmax: Option<f64>,
}

impl Default for SonographConfig {
    fn default() -> Self {
        Self {
            sample_rate: 22050,
            hop_length: 512,
            frame_length: 2048,
            n_mfcc: 33,
            n_mels: 33,
            lpc_order: 33,
            n_frames: 100,
            mel_fmin: 0.0,
            mel_fmax: None,
        }
    }
}

impl SonographConfig {
    pub fn fmax(&self) -> f64 {
        self.mel_fmax.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Number of bands shared by every channel of the tensor.
    pub fn bands(&self) -> usize {
        self.n_mels
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop_length == 0 || self.frame_length < 2 {
            return Err(Error::Config("sample rate, hop and frame length must be positive".into()));
        }
        if self.n_frames == 0 || self.n_mels == 0 {
            return Err(Error::Config("n_frames and n_mels must be positive".into()));
        }
        if self.n_mfcc != self.n_mels || self.lpc_order != self.n_mels {
            return Err(Error::Config(format!(
                "n_mfcc ({}), n_mels ({}) and lpc_order ({}) must match to stack channels",
                self.n_mfcc, self.n_mels, self.lpc_order
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.mel_fmin >= 0.0 && self.mel_fmin < self.fmax() && self.fmax() <= nyquist) {
            return Err(Error::Config(format!(
                "mel range [{}, {}] must lie inside [0, {nyquist}]",
                self.mel_fmin,
                self.fmax()
            )));
        }
        Ok(())
    }
}

/// Number of centred frames for a signal of `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// A (bands x frames) matrix stored row-major by band.
#[derive(Debug, Clone, PartialEq)]
pub struct Sonograph {
    pub bands: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl Sonograph {
    fn zeros(bands: usize, frames: usize) -> Self {
        Self { bands, frames, data: vec![0.0; bands * frames] }
    }

    pub fn get(&self, band: usize, frame: usize) -> f64 {
        self.data[band * self.frames + frame]
    }

    fn set(&mut self, band: usize, frame: usize, v: f64) {
        self.data[band * self.frames + frame] = v;
    }

    /// Column `frame` as a vector over bands.
    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(b, frame)).collect()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the triangular Mel filters.
pub fn mel_band_centers(cfg: &SonographConfig) -> Vec<f64> {
    mel_points(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_points(cfg: &SonographConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.mel_fmin);
    let hi = hz_to_mel(cfg.fmax());
    let n = cfg.n_mels + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Triangular filterbank, `n_mels` rows of `frame_length / 2 + 1` weights.
fn mel_filterbank(cfg: &SonographConfig) -> Vec<Vec<f64>> {
    let pts = mel_points(cfg);
    let n_bins = cfg.frame_length / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.frame_length as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                })
                .collect()
        })
        .collect()
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn hamming(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Windowed centred frames of `x`.
fn frames(x: &[f64], cfg: &SonographConfig, window: &[f64], limit: usize) -> Vec<Vec<f64>> {
    let half = cfg.frame_length / 2;
    (0..frame_count(x.len(), cfg.hop_length).min(limit))
        .map(|t| {
            let centre = t * cfg.hop_length;
            (0..cfg.frame_length)
                .map(|i| {
                    let idx = (centre + i).checked_sub(half);
                    idx.and_then(|j| x.get(j)).copied().unwrap_or(0.0) * window[i]
                })
                .collect()
        })
        .collect()
}

struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
}

impl PowerSpectrum {
    fn new(n: usize) -> Self {
        Self { fft: FftPlanner::new().plan_fft_forward(n), buf: vec![Complex64::default(); n] }
    }

    fn compute(&mut self, frame: &[f64]) -> Vec<f64> {
        for (b, &v) in self.buf.iter_mut().zip(frame) {
            *b = Complex64::new(v, 0.0);
        }
        self.fft.process(&mut self.buf);
        self.buf[..frame.len() / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Mel band power for each frame, as a (n_mels x frames) matrix.
fn mel_power(x: &[f64], cfg: &SonographConfig, window: &[f64], limit: usize) -> Sonograph {
    let bank = mel_filterbank(cfg);
    let mut spec = PowerSpectrum::new(cfg.frame_length);
    let framed = frames(x, cfg, window, limit);
    let mut out = Sonograph::zeros(cfg.n_mels, framed.len());
    for (t, frame) in framed.iter().enumerate() {
        let p = spec.compute(frame);
        for (m, w) in bank.iter().enumerate() {
            out.set(m, t, w.iter().zip(&p).map(|(a, b)| a * b).sum());
        }
    }
    out
}

/// Power to dB relative to the matrix maximum, floored at [`DB_FLOOR`].
/// An all-silent matrix maps to the floor everywhere.
fn power_to_db(mut s: Sonograph) -> Sonograph {
    let max = s.data.iter().cloned().fold(0.0, f64::max);
    if max <= POWER_AMIN {
        s.data.iter_mut().for_each(|v| *v = DB_FLOOR);
        return s;
    }
    let reference = 10.0 * max.log10();
    for v in s.data.iter_mut() {
        *v = (10.0 * v.max(POWER_AMIN).log10() - reference).max(DB_FLOOR);
    }
    s
}

fn check_rate(segment: &AudioSignal, cfg: &SonographConfig) -> Result<()> {
    cfg.validate()?;
    if segment.sample_rate != cfg.sample_rate {
        return Err(Error::Input(format!(
            "segment is at {} Hz, sonographs expect {} Hz",
            segment.sample_rate, cfg.sample_rate
        )));
    }
    Ok(())
}

/// Log Mel spectrogram (Hann window), dB relative to the maximum.
pub fn mel_spectrogram(segment: &AudioSignal, cfg: &SonographConfig) -> Result<Sonograph> {
    check_rate(segment, cfg)?;
    Ok(mel_db(&segment.samples, cfg, usize::MAX))
}

fn mel_db(x: &[f64], cfg: &SonographConfig, limit: usize) -> Sonograph {
    power_to_db(mel_power(x, cfg, &hann(cfg.frame_length), limit))
}

/// Orthonormal DCT-II of `x`, first `k` coefficients.
pub fn dct2_ortho(x: &[f64], k: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..k)
        .map(|q| {
            let scale = if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * q as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// MFCCs: Hamming window, Mel energies in dB, orthonormal DCT-II.
pub fn mfcc(segment: &AudioSignal, cfg: &SonographConfig) -> Result<Sonograph> {
    check_rate(segment, cfg)?;
    Ok(mfcc_frames(&segment.samples, cfg, usize::MAX))
}

fn mfcc_frames(x: &[f64], cfg: &SonographConfig, limit: usize) -> Sonograph {
    let log_mel = power_to_db(mel_power(x, cfg, &hamming(cfg.frame_length), limit));
    let mut out = Sonograph::zeros(cfg.n_mfcc, log_mel.frames);
    for t in 0..log_mel.frames {
        for (q, c) in dct2_ortho(&log_mel.column(t), cfg.n_mfcc).into_iter().enumerate() {
            out.set(q, t, c);
        }
    }
    out
}

/// Autocorrelation `r[0..=order]`.
fn autocorrelation(frame: &[f64], order: usize) -> Vec<f64> {
    (0..=order)
        .map(|lag| frame.iter().zip(&frame[lag.min(frame.len())..]).map(|(a, b)| a * b).sum())
        .collect()
}

/// Levinson-Durbin. Returns `a` with `a[0] = 1` such that
/// `A(z) = sum a[k] z^-k` is the prediction-error filter, or `None` if the
/// recursion breaks down.
pub fn levinson_durbin(r: &[f64]) -> Option<Vec<f64>> {
    let order = r.len() - 1;
    let mut a = vec![0.0; order + 1];
    a[0] = 1.0;
    let mut err = r[0];
    if err <= 0.0 {
        return None;
    }
    for i in 1..=order {
        let acc: f64 = (0..i).map(|j| a[j] * r[i - j]).sum();
        let k = -acc / err;
        if !k.is_finite() || k.abs() >= 1.0 {
            return None;
        }
        let prev = a.clone();
        for j in 1..i {
            a[j] = prev[j] + k * prev[i - j];
        }
        a[i] = k;
        err *= 1.0 - k * k;
    }
    Some(a)
}

/// LPC coefficients of one frame with the white-noise correction applied.
pub fn lpc(frame: &[f64], order: usize) -> Option<Vec<f64>> {
    let mut r = autocorrelation(frame, order);
    r[0] *= 1.0 + LPC_NOISE_FLOOR;
    levinson_durbin(&r)
}

/// Cosine-series coefficients `c` with `f(w) = sum c[k] cos(k w)` for the
/// symmetric polynomial `p` of even degree `2m` (coefficients in `z^-1`).
fn cosine_series(p: &[f64]) -> Vec<f64> {
    let m = (p.len() - 1) / 2;
    (0..=m)
        .map(|k| if k == 0 { p[m] } else { 2.0 * p[m - k] })
        .collect()
}

/// Clenshaw evaluation of `sum c[k] T_k(x)`.
fn chebyshev_eval(c: &[f64], x: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &ck in c.iter().skip(1).rev() {
        let b0 = 2.0 * x * b1 - b2 + ck;
        b2 = b1;
        b1 = b0;
    }
    x * b1 - b2 + c[0]
}

/// Zeros of `sum c[k] cos(k w)` on (0, pi), located on a uniform grid of
/// `grid` intervals and refined by bisection.
fn cosine_roots(c: &[f64], grid: usize) -> Vec<f64> {
    let f = |w: f64| chebyshev_eval(c, w.cos());
    let mut roots = Vec::new();
    let step = PI / grid as f64;
    let mut w_lo = 0.0;
    let mut f_lo = f(w_lo);
    for i in 1..=grid {
        let w_hi = if i == grid { PI } else { i as f64 * step };
        let f_hi = f(w_hi);
        if f_lo == 0.0 && i > 1 {
            roots.push(w_lo);
        } else if f_lo * f_hi < 0.0 {
            let (mut a, mut b, mut fa) = (w_lo, w_hi, f_lo);
            for _ in 0..60 {
                let mid = 0.5 * (a + b);
                let fm = f(mid);
                if fm == 0.0 {
                    a = mid;
                    b = mid;
                    break;
                }
                if fa * fm < 0.0 {
                    b = mid;
                } else {
                    a = mid;
                    fa = fm;
                }
            }
            roots.push(0.5 * (a + b));
        }
        w_lo = w_hi;
        f_lo = f_hi;
    }
    roots
}

/// Line spectral frequencies of the prediction polynomial `a` (with
/// `a[0] = 1`), in radians, ascending. `None` if the expected number of
/// roots could not be isolated.
pub fn lsp_frequencies(a: &[f64]) -> Option<Vec<f64>> {
    let p = a.len() - 1;
    // P(z) = A(z) + z^-(p+1) A(1/z), Q(z) = A(z) - z^-(p+1) A(1/z)
    let mut sum = vec![0.0; p + 2];
    let mut diff = vec![0.0; p + 2];
    for k in 0..=p + 1 {
        let fwd = if k <= p { a[k] } else { 0.0 };
        let rev = if k >= 1 { a[p + 1 - k] } else { 0.0 };
        sum[k] = fwd + rev;
        diff[k] = fwd - rev;
    }
    // Strip the trivial roots so both polynomials become symmetric of even
    // degree: odd p leaves z = +-1 in Q; even p leaves z = -1 in P and z = 1 in Q.
    let (sym_p, sym_q) = if p % 2 == 1 {
        (sum, deflate(&diff, &[1.0, 0.0, -1.0]))
    } else {
        (deflate(&sum, &[1.0, 1.0]), deflate(&diff, &[1.0, -1.0]))
    };
    let cp = cosine_series(&sym_p);
    let cq = cosine_series(&sym_q);
    let (np, nq) = (cp.len() - 1, cq.len() - 1);
    let mut grid = LSP_GRID;
    while grid <= LSP_GRID * 64 {
        let rp = cosine_roots(&cp, grid);
        let rq = cosine_roots(&cq, grid);
        if rp.len() == np && rq.len() == nq {
            let mut all: Vec<f64> = rp.into_iter().chain(rq).collect();
            all.sort_by(f64::total_cmp);
            if all.windows(2).all(|w| w[0] < w[1]) {
                return Some(all);
            }
        }
        grid *= 4;
    }
    None
}

/// Exact division of polynomial `num` by `den` (both in `z^-1`, `den[0] = 1`).
fn deflate(num: &[f64], den: &[f64]) -> Vec<f64> {
    let n = num.len() - den.len() + 1;
    let mut rem = num.to_vec();
    let mut q = vec![0.0; n];
    for i in 0..n {
        q[i] = rem[i];
        for (j, d) in den.iter().enumerate() {
            rem[i + j] -= q[i] * d;
        }
    }
    q
}

/// Neutral LSP vector `i / (order + 1)`, `i = 1..=order`.
pub fn uniform_lsp(order: usize) -> Vec<f64> {
    (1..=order).map(|i| i as f64 / (order + 1) as f64).collect()
}

/// Line spectral pairs per frame, as fractions of pi in ascending order.
/// Silent or degenerate frames get [`uniform_lsp`].
pub fn lpcs(segment: &AudioSignal, cfg: &SonographConfig) -> Result<Sonograph> {
    check_rate(segment, cfg)?;
    Ok(lsp_frames(&segment.samples, cfg, usize::MAX))
}

fn lsp_frames(x: &[f64], cfg: &SonographConfig, limit: usize) -> Sonograph {
    let order = cfg.lpc_order;
    let framed = frames(x, cfg, &hamming(cfg.frame_length), limit);
    let energy: Vec<f64> = framed.iter().map(|f| f.iter().map(|v| v * v).sum()).collect();
    let loudest = energy.iter().cloned().fold(0.0, f64::max);
    let mut out = Sonograph::zeros(order, framed.len());
    for (t, frame) in framed.iter().enumerate() {
        let lsp = if loudest > 0.0 && energy[t] > loudest * LPC_SILENT_FRAME {
            lpc(frame, order)
                .and_then(|a| lsp_frequencies(&a))
                .map(|w| w.into_iter().map(|v| v / PI).collect())
        } else {
            None
        };
        for (i, v) in lsp.unwrap_or_else(|| uniform_lsp(order)).into_iter().enumerate() {
            out.set(i, t, v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorMode {
    /// MelSpec only.
    #[serde(rename = "2d")]
    TwoD,
    /// MFCC, MelSpec and LPCS.
    #[serde(rename = "3d")]
    ThreeD,
}

impl TensorMode {
    pub fn channels(self) -> usize {
        match self {
            TensorMode::TwoD => 1,
            TensorMode::ThreeD => 3,
        }
    }
}

/// Stacked, normalised sonographs in (band, frame, channel) order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoughTensor {
    pub bands: usize,
    pub frames: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

const TENSOR_VERSION: u16 = 1;

impl CoughTensor {
    pub fn zeros(bands: usize, frames: usize, channels: usize) -> Self {
        Self { bands, frames, channels, data: vec![0.0; bands * frames * channels] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.bands, self.frames, self.channels)
    }

    fn index(&self, band: usize, frame: usize, channel: usize) -> usize {
        (band * self.frames + frame) * self.channels + channel
    }

    pub fn get(&self, band: usize, frame: usize, channel: usize) -> f32 {
        self.data[self.index(band, frame, channel)]
    }

    pub fn set(&mut self, band: usize, frame: usize, channel: usize, v: f32) {
        let i = self.index(band, frame, channel);
        self.data[i] = v;
    }

    /// 8-byte header (`u16` bands, frames, channels, version) followed by
    /// little-endian `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        for v in [self.bands, self.frames, self.channels] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Decode("tensor header truncated".into()));
        }
        let word = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]) as usize;
        let (bands, frames, channels) = (word(0), word(1), word(2));
        if word(3) != TENSOR_VERSION as usize {
            return Err(Error::Decode(format!("unsupported tensor version {}", word(3))));
        }
        let n = bands * frames * channels;
        if bytes.len() != 8 + 4 * n {
            return Err(Error::Decode(format!(
                "tensor body is {} bytes, header implies {}",
                bytes.len() - 8,
                4 * n
            )));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { bands, frames, channels, data })
    }
}

/// Compute the sonographs for `mode`, keep the first `n_frames` frames,
/// min-max normalise each channel over its real frames and zero-pad.
pub fn build_tensor(segment: &AudioSignal, cfg: &SonographConfig, mode: TensorMode) -> Result<CoughTensor> {
    if segment.is_empty() {
        return Err(Error::EmptyInput("cannot build a tensor from an empty segment".into()));
    }
    check_rate(segment, cfg)?;
    // Frames past n_frames are never computed, so dB references and silence
    // thresholds come from the kept frames only.
    let x = &segment.samples;
    let limit = cfg.n_frames;
    let channels = match mode {
        TensorMode::TwoD => vec![mel_db(x, cfg, limit)],
        TensorMode::ThreeD => vec![mfcc_frames(x, cfg, limit), mel_db(x, cfg, limit), lsp_frames(x, cfg, limit)],
    };
    let mut tensor = CoughTensor::zeros(cfg.bands(), cfg.n_frames, channels.len());
    for (c, s) in channels.iter().enumerate() {
        let used = s.frames.min(cfg.n_frames);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for b in 0..s.bands {
            for t in 0..used {
                lo = lo.min(s.get(b, t));
                hi = hi.max(s.get(b, t));
            }
        }
        let range = hi - lo;
        for b in 0..s.bands {
            for t in 0..used {
                let v = if range > 0.0 { (s.get(b, t) - lo) / range } else { 0.0 };
                tensor.set(b, t, c, v as f32);
            }
        }
    }
    Ok(tensor)
}
