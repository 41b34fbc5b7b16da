//! Synthetic recordings for tests, demos and the acceptance corpus.
//!
//! Two cough "families" are generated. Both put most of their energy in a
//! 200-800 Hz noise band so the detector sees them; they differ in what sits
//! above that band:
//!
//! * [`CoughFamily::Dry`]: broadband noise burst with a 1.5-4 kHz hiss component.
//! * [`CoughFamily::Voiced`]: the same low band plus a harmonic series on a
//!   150-300 Hz fundamental, with little high-frequency hiss.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio_io::{write_wav, AudioSignal, WavEncoding};
use crate::error::Result;

pub const SYNTH_RATE: u32 = 44100;

/// Gaussian-ish white noise (sum of uniforms), unit variance.
fn white_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).sum::<f64>() * 3f64.sqrt())
        .collect()
}

/// White noise restricted to `[lo_hz, hi_hz]` by zeroing FFT bins, scaled to unit RMS.
pub fn band_noise(rng: &mut ChaCha8Rng, n: usize, rate: u32, lo_hz: f64, hi_hz: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = white_noise(rng, n)
        .into_iter()
        .map(|v| Complex64::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k) as f64 * rate as f64 / n as f64;
        if bin < lo_hz || bin > hi_hz {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.into_iter().map(|v| v / rms).collect()
    } else {
        out
    }
}

/// Linear attack then exponential decay, reaching ~1% at the end.
fn burst_envelope(n: usize, rate: u32, attack_s: f64) -> Vec<f64> {
    let attack = ((attack_s * rate as f64) as usize).max(1).min(n);
    let decay_len = (n - attack).max(1) as f64;
    (0..n)
        .map(|i| {
            if i < attack {
                i as f64 / attack as f64
            } else {
                (-4.6 * (i - attack) as f64 / decay_len).exp()
            }
        })
        .collect()
}

/// Linear attack, flat hold, linear release.
fn gate_envelope(n: usize, rate: u32, attack_s: f64, release_s: f64) -> Vec<f64> {
    let attack = ((attack_s * rate as f64) as usize).max(1);
    let release = ((release_s * rate as f64) as usize).max(1);
    (0..n)
        .map(|i| {
            let rise = i as f64 / attack as f64;
            let fall = (n - i) as f64 / release as f64;
            rise.min(fall).min(1.0)
        })
        .collect()
}

/// Band-limited noise burst with a 20 ms attack and release.
pub fn noise_burst(rng: &mut ChaCha8Rng, duration_s: f64, rate: u32, lo_hz: f64, hi_hz: f64) -> Vec<f64> {
    let n = (duration_s * rate as f64) as usize;
    let env = gate_envelope(n, rate, 0.02, 0.02);
    band_noise(rng, n, rate, lo_hz, hi_hz)
        .into_iter()
        .zip(env)
        .map(|(v, e)| v * e)
        .collect()
}

/// Three 0.2 s bursts (200-800 Hz) separated by 1 s of quiet, after 0.3 s
/// of background noise. Returns the signal and the true raw-sample intervals.
pub fn three_burst_scene(seed: u64) -> (AudioSignal, Vec<(usize, usize)>) {
    let rate = SYNTH_RATE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lead = (0.3 * rate as f64) as usize;
    let gap = rate as usize;
    let burst_len = (0.2 * rate as f64) as usize;
    let total = lead + 3 * burst_len + 3 * gap;
    let mut samples: Vec<f64> = white_noise(&mut rng, total).into_iter().map(|v| v * 0.002).collect();
    let mut truth = Vec::new();
    let mut pos = lead;
    for _ in 0..3 {
        let burst = noise_burst(&mut rng, 0.2, rate, 200.0, 800.0);
        for (s, b) in samples[pos..pos + burst_len].iter_mut().zip(&burst) {
            *s += 0.25 * b;
        }
        truth.push((pos, pos + burst_len));
        pos += burst_len + gap;
    }
    (AudioSignal::new(clip(samples), rate), truth)
}

/// Pure tone.
pub fn tone(freq_hz: f64, amplitude: f64, duration_s: f64, rate: u32) -> AudioSignal {
    let n = (duration_s * rate as f64) as usize;
    AudioSignal::new(
        (0..n)
            .map(|i| amplitude * (2.0 * PI * freq_hz * i as f64 / rate as f64).sin())
            .collect(),
        rate,
    )
}

fn clip(samples: Vec<f64>) -> Vec<f64> {
    samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoughFamily {
    Dry,
    Voiced,
}

/// One recording of `family`: background noise, a single cough of
/// 0.35-0.6 s, then trailing background.
pub fn family_recording(family: CoughFamily, seed: u64) -> AudioSignal {
    let rate = SYNTH_RATE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lead_s = rng.random_range(0.2..0.4);
    let cough_s = rng.random_range(0.35..0.6);
    let tail_s = rng.random_range(0.6..0.9);
    let gain = rng.random_range(0.15..0.35);
    let floor = rng.random_range(0.001..0.004);

    let lead = (lead_s * rate as f64) as usize;
    let n_cough = (cough_s * rate as f64) as usize;
    let total = lead + n_cough + (tail_s * rate as f64) as usize;
    let mut samples: Vec<f64> = white_noise(&mut rng, total).into_iter().map(|v| v * floor).collect();

    let env = burst_envelope(n_cough, rate, rng.random_range(0.01..0.03));
    let low = band_noise(&mut rng, n_cough, rate, 200.0, 800.0);
    let upper: Vec<f64> = match family {
        CoughFamily::Dry => band_noise(&mut rng, n_cough, rate, 1500.0, 4000.0)
            .into_iter()
            .map(|v| v * 0.8)
            .collect(),
        CoughFamily::Voiced => {
            let f0 = rng.random_range(150.0..300.0);
            let phase: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (0..n_cough)
                .map(|i| {
                    let t = i as f64 / rate as f64;
                    (1..=12)
                        .map(|h| (2.0 * PI * f0 * h as f64 * t + phase[h - 1]).sin() / h as f64)
                        .sum::<f64>()
                        * 0.9
                })
                .collect()
        }
    };
    for i in 0..n_cough {
        samples[lead + i] += gain * env[i] * (low[i] + upper[i]);
    }
    AudioSignal::new(clip(samples), rate)
}

/// Write `n_per_class` recordings of each family plus `manifest.csv` into
/// `dir`. Voiced recordings are labelled positive. Returns the manifest path.
pub fn write_family_corpus(dir: &Path, n_per_class: usize, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("path,label,ct,lym_percent,site\n");
    for i in 0..n_per_class {
        for (family, label, tag) in [
            (CoughFamily::Voiced, "positive", "v"),
            (CoughFamily::Dry, "negative", "d"),
        ] {
            let sample_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add(2 * i as u64 + (family == CoughFamily::Dry) as u64);
            let sig = family_recording(family, sample_seed);
            let name = format!("{tag}{i:04}.wav");
            fs::write(dir.join(&name), write_wav(&sig, WavEncoding::Pcm16)?)?;
            manifest.push_str(&format!("{name},{label},,,synthetic\n"));
        }
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_noise_is_unit_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = band_noise(&mut rng, 4410, 44100, 200.0, 800.0);
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-9);
    }

    #[test]
    fn recordings_are_deterministic_and_bounded() {
        let a = family_recording(CoughFamily::Voiced, 7);
        let b = family_recording(CoughFamily::Voiced, 7);
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|v| v.abs() <= 1.0));
        let (scene, truth) = three_burst_scene(3);
        assert_eq!(truth.len(), 3);
        assert!(truth.iter().all(|&(s, e)| e <= scene.len() && s < e));
    }
}
