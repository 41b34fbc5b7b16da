//! Cough-burst detection from the instantaneous amplitudes of selected modes.

use serde::{Deserialize, Serialize};

use crate::audio_io::AudioSignal;
use crate::emd::{emd, instantaneous_amplitude, select_modes, SiftConfig};
use crate::error::{Error, Result};
use crate::preprocess::{chebyshev2_lowpass, decimate, initial_bout_onset, PreprocessConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Minimum rise from the preceding valley for a peak (fused envelope is in [0, 1]).
    pub delta: f64,
    /// Median filter length in decimated samples; even values are bumped to the next odd.
    pub median_window: usize,
    /// Bursts closer than this many decimated samples are joined.
    pub join_gap: usize,
    /// Bursts shorter than this many decimated samples are discarded.
    pub min_segment: usize,
    /// A burst spans the samples around its peak that stay above this fraction of the peak.
    pub burst_extent_fraction: f64,
    /// A peak only seeds a burst if it rises this fraction of the range between
    /// the envelope floor (its median) and its maximum.
    pub min_peak_height: f64,
    /// Selected-mode envelopes peaking more than this many dB below the
    /// signal RMS are treated as numerical residue: nothing is detected.
    pub min_mode_level_db: f64,
    /// 1-based IMF indices whose envelopes drive detection.
    pub modes: Vec<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            delta: 0.006,
            median_window: 500,
            join_gap: 1500,
            min_segment: 400,
            burst_extent_fraction: 0.1,
            min_peak_height: 0.2,
            min_mode_level_db: -60.0,
            modes: vec![5, 9],
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Config("delta must be positive".into()));
        }
        if self.median_window == 0 {
            return Err(Error::Config("median window must be positive".into()));
        }
        if self.min_segment == 0 {
            return Err(Error::Config("minimum segment length must be at least 1".into()));
        }
        if !(self.burst_extent_fraction > 0.0 && self.burst_extent_fraction < 1.0) {
            return Err(Error::Config("burst extent fraction must lie in (0, 1)".into()));
        }
        if !(self.min_peak_height >= 0.0 && self.min_peak_height < 1.0) {
            return Err(Error::Config("minimum peak height must lie in [0, 1)".into()));
        }
        if self.modes.is_empty() || self.modes.contains(&0) {
            return Err(Error::Config("modes must be non-empty 1-based indices".into()));
        }
        Ok(())
    }

    fn odd_median_window(&self) -> usize {
        self.median_window | 1
    }
}

/// Detected bursts as half-open ranges into the decimated signal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoughSegments {
    pub ranges: Vec<(usize, usize)>,
    /// Sample rate of the decimated domain.
    pub sample_rate: u32,
    pub decimation_factor: usize,
    /// Length of the raw recording the ranges refer to.
    pub raw_len: usize,
}

impl CoughSegments {
    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    /// Ranges mapped back to raw-sample indices.
    pub fn raw_ranges(&self) -> Vec<(usize, usize)> {
        self.ranges
            .iter()
            .map(|&(s, e)| {
                let f = self.decimation_factor;
                ((s * f).min(self.raw_len), (e * f).min(self.raw_len))
            })
            .collect()
    }
}

/// Median filter with an odd window; the window shrinks at the edges and
/// even-sized edge windows take the mean of the two middle values.
pub fn median_filter(x: &[f64], window: usize) -> Vec<f64> {
    let n = x.len();
    let half = (window | 1) / 2;
    let mut sorted: Vec<f64> = Vec::with_capacity(2 * half + 1);
    let insert = |sorted: &mut Vec<f64>, v: f64| {
        let pos = sorted.partition_point(|&s| s.total_cmp(&v).is_lt());
        sorted.insert(pos, v);
    };
    for &v in x.iter().take(half.min(n)) {
        insert(&mut sorted, v);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i + half < n {
            insert(&mut sorted, x[i + half]);
        }
        if i > half {
            let v = x[i - half - 1];
            let pos = sorted.partition_point(|&s| s.total_cmp(&v).is_lt());
            sorted.remove(pos);
        }
        let m = sorted.len();
        out.push(if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        });
    }
    out
}

/// Average the envelopes, median-filter, then scale so the maximum is 1.
pub fn fuse_amplitudes(ias: &[Vec<f64>], median_window: usize) -> Result<Vec<f64>> {
    let first = ias
        .first()
        .ok_or_else(|| Error::Input("no amplitude sequences to fuse".into()))?;
    let n = first.len();
    if ias.iter().any(|s| s.len() != n) {
        return Err(Error::Input("amplitude sequences differ in length".into()));
    }
    let k = ias.len() as f64;
    let mean: Vec<f64> = (0..n).map(|i| ias.iter().map(|s| s[i]).sum::<f64>() / k).collect();
    let mut fused = median_filter(&mean, median_window);
    let max = fused.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        fused.iter_mut().for_each(|v| *v /= max);
    } else {
        fused.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(fused)
}

/// Alternating valley/peak scan. A peak is reported once the signal has
/// risen at least `delta` above the preceding valley and then fallen at
/// least `delta` below the peak. A trailing rise with no fall is not a peak.
/// The envelope is taken to be at rest (zero) before its first sample.
pub fn detect_peaks(fused: &[f64], delta: f64) -> Vec<usize> {
    let mut peaks = Vec::new();
    let Some(&first) = fused.first() else {
        return peaks;
    };
    let mut looking_for_peak = false;
    let (mut min_v, mut max_v, mut max_i) = (first.min(0.0), first, 0);
    for (i, &v) in fused.iter().enumerate() {
        if v > max_v {
            max_v = v;
            max_i = i;
        }
        if v < min_v {
            min_v = v;
        }
        if looking_for_peak {
            if v <= max_v - delta {
                peaks.push(max_i);
                min_v = v;
                looking_for_peak = false;
            }
        } else if v >= min_v + delta {
            max_v = v;
            max_i = i;
            looking_for_peak = true;
        }
    }
    peaks
}

/// Median of the fused envelope, taken as its noise floor.
pub fn envelope_floor(fused: &[f64]) -> f64 {
    if fused.is_empty() {
        return 0.0;
    }
    let mut sorted = fused.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Grow each sufficiently tall peak into a burst, union overlaps, drop
/// bursts shorter than `min_segment`, then join bursts separated by less
/// than `join_gap`.
///
/// Heights are measured above the envelope floor: a peak seeds a burst when
/// it rises at least `min_peak_height` of the way from the floor to the
/// envelope maximum, and the burst covers the surrounding samples that stay
/// above `floor + burst_extent_fraction * (peak - floor)`.
pub fn segment(fused: &[f64], peaks: &[usize], cfg: &DetectorConfig) -> Vec<(usize, usize)> {
    let n = fused.len();
    let floor = envelope_floor(fused);
    let top = fused.iter().copied().fold(floor, f64::max);
    let min_height = floor + cfg.min_peak_height * (top - floor);
    let mut bursts: Vec<(usize, usize)> = peaks
        .iter()
        .filter(|&&p| p < n && fused[p] > floor && fused[p] >= min_height)
        .map(|&p| {
            let level = floor + cfg.burst_extent_fraction * (fused[p] - floor);
            let mut start = p;
            while start > 0 && fused[start - 1] > level {
                start -= 1;
            }
            let mut end = p + 1;
            while end < n && fused[end] > level {
                end += 1;
            }
            (start, end)
        })
        .collect();
    bursts.sort_unstable();

    let mut unioned: Vec<(usize, usize)> = Vec::new();
    for b in bursts {
        match unioned.last_mut() {
            Some(last) if b.0 <= last.1 => last.1 = last.1.max(b.1),
            _ => unioned.push(b),
        }
    }

    let mut joined: Vec<(usize, usize)> = Vec::new();
    for b in unioned.into_iter().filter(|(s, e)| e - s >= cfg.min_segment) {
        match joined.last_mut() {
            Some(last) if b.0 - last.1 < cfg.join_gap => last.1 = b.1,
            _ => joined.push(b),
        }
    }
    joined
}

/// True when the averaged envelope never comes within `level_db` of the signal RMS.
fn below_mode_level(signal: &[f64], ias: &[Vec<f64>], level_db: f64) -> bool {
    let rms = (signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64).sqrt();
    let k = ias.len() as f64;
    let peak = (0..signal.len())
        .map(|i| ias.iter().map(|s| s[i]).sum::<f64>() / k)
        .fold(0.0, f64::max);
    peak <= rms * 10f64.powf(level_db / 20.0)
}

/// Full chain: low-pass, trim, decimate, EMD, mode envelopes, fuse, peaks,
/// segments. Ranges address the decimated domain of the whole (untrimmed)
/// recording.
pub fn detect_coughs(
    signal: &AudioSignal,
    pre_cfg: &PreprocessConfig,
    sift_cfg: &SiftConfig,
    det_cfg: &DetectorConfig,
) -> Result<CoughSegments> {
    if signal.is_empty() {
        return Err(Error::EmptyInput("cannot detect coughs in an empty signal".into()));
    }
    det_cfg.validate()?;
    sift_cfg.validate()?;
    let factor = pre_cfg.decimation_factor;
    let filtered = chebyshev2_lowpass(signal, pre_cfg)?;

    // Snap the trim point to the decimation grid so indices map back exactly.
    let onset = initial_bout_onset(&filtered);
    let onset = onset - onset % factor;
    let decimated = decimate(&filtered.slice(onset, filtered.len()), factor)?;
    let offset = onset / factor;

    let mut segments = CoughSegments {
        ranges: Vec::new(),
        sample_rate: decimated.sample_rate,
        decimation_factor: factor,
        raw_len: signal.len(),
    };
    if decimated.len() < 4 {
        return Ok(segments);
    }

    let imfs = emd(&decimated.samples, sift_cfg)?;
    let modes = select_modes(&imfs, &det_cfg.modes)?;
    if modes.is_empty() {
        return Ok(segments);
    }
    let ias = modes
        .iter()
        .map(|m| instantaneous_amplitude(m))
        .collect::<Result<Vec<_>>>()?;
    if below_mode_level(&decimated.samples, &ias, det_cfg.min_mode_level_db) {
        return Ok(segments);
    }
    let fused = fuse_amplitudes(&ias, det_cfg.odd_median_window())?;
    let peaks = detect_peaks(&fused, det_cfg.delta);
    segments.ranges = segment(&fused, &peaks, det_cfg)
        .into_iter()
        .map(|(s, e)| (s + offset, e + offset))
        .collect();
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_median(x: &[f64], window: usize) -> Vec<f64> {
        let half = (window | 1) / 2;
        (0..x.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(x.len());
                let mut w = x[lo..hi].to_vec();
                w.sort_by(f64::total_cmp);
                let m = w.len();
                if m % 2 == 1 {
                    w[m / 2]
                } else {
                    0.5 * (w[m / 2 - 1] + w[m / 2])
                }
            })
            .collect()
    }

    #[test]
    fn median_filter_matches_brute_force() {
        let x: Vec<f64> = (0..300).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        for w in [1, 2, 3, 10, 51, 500] {
            assert_eq!(median_filter(&x, w), brute_median(&x, w), "window {w}");
        }
    }

    #[test]
    fn fuse_identical_sequences() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin().abs()).collect();
        let fused = fuse_amplitudes(&[a.clone(), a.clone()], 5).unwrap();
        let mut expected = brute_median(&a, 5);
        let m = expected.iter().copied().fold(0.0, f64::max);
        expected.iter_mut().for_each(|v| *v /= m);
        for (f, e) in fused.iter().zip(&expected) {
            assert!((f - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_opposites_is_zero() {
        let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!(fuse_amplitudes(&[a, b], 5).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_removes_isolated_spikes() {
        let mut x = vec![0.2; 3000];
        for i in (100..3000).step_by(700) {
            x[i] = 1.0;
        }
        let fused = fuse_amplitudes(&[x.clone()], 501).unwrap();
        let oracle = brute_median(&x, 501);
        assert!(oracle.iter().all(|&v| v == 0.2));
        assert!(fused.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fuse_length_mismatch() {
        assert!(matches!(
            fuse_amplitudes(&[vec![0.0; 3], vec![0.0; 4]], 3),
            Err(Error::Input(_))
        ));
        assert!(fuse_amplitudes(&[], 3).is_err());
    }

    #[test]
    fn peaks_examples() {
        let rising: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        assert!(detect_peaks(&rising, 0.006).is_empty());
        assert_eq!(detect_peaks(&[0.0, 0.5, 0.0], 0.006), vec![1]);
        let ripples: Vec<f64> = (0..200).map(|i| 0.5 + 0.0015 * (i as f64).sin()).collect();
        assert!(detect_peaks(&ripples, 0.006).is_empty());
        // The envelope rests at zero before the first sample.
        assert_eq!(detect_peaks(&[0.5, 0.0], 0.006), vec![0]);
        assert!(detect_peaks(&[0.004, 0.0], 0.006).is_empty());
    }

    #[test]
    fn raw_ranges_scale_and_clamp() {
        let seg = CoughSegments {
            ranges: vec![(2, 5), (8, 11)],
            sample_rate: 4410,
            decimation_factor: 10,
            raw_len: 105,
        };
        assert_eq!(seg.raw_ranges(), vec![(20, 50), (80, 105)]);
    }

    #[test]
    fn empty_signal_is_error() {
        let sig = AudioSignal::new(vec![], 44100);
        assert!(detect_coughs(
            &sig,
            &PreprocessConfig::default(),
            &SiftConfig::default(),
            &DetectorConfig::default()
        )
        .is_err());
    }
}
