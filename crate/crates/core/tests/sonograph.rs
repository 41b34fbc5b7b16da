use std::f64::consts::PI;

use coughdetect_core::sonograph::{
    build_tensor, frame_count, hz_to_mel, lpc, lpcs, lsp_frequencies, mel_band_centers, mel_spectrogram, mfcc,
    SonographConfig, TensorMode,
};
use coughdetect_core::AudioSignal;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: u32 = 22050;

fn tone(freq: f64, secs: f64) -> AudioSignal {
    let n = (secs * SR as f64) as usize;
    AudioSignal::new(
        (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / SR as f64).sin()).collect(),
        SR,
    )
}

fn noise(seed: u64, n: usize) -> AudioSignal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioSignal::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), SR)
}

/// Angles in (0, pi) of the roots of the monic polynomial whose
/// coefficients (highest power first) are `c`, via companion-matrix eigenvalues.
fn root_angles(c: &[f64]) -> Vec<f64> {
    let n = c.len() - 1;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        m[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..n {
        m[(i, i - 1)] = 1.0;
    }
    let mut out: Vec<f64> = m
        .complex_eigenvalues()
        .iter()
        .map(|z| z.im.atan2(z.re))
        .filter(|&w| w > 1e-6 && w < PI - 1e-6)
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

fn oracle_lsp(a: &[f64]) -> Vec<f64> {
    let p = a.len() - 1;
    let coef = |k: usize, sign: f64| {
        let fwd = if k <= p { a[k] } else { 0.0 };
        let rev = if k >= 1 { a[p + 1 - k] } else { 0.0 };
        fwd + sign * rev
    };
    let sum: Vec<f64> = (0..=p + 1).map(|k| coef(k, 1.0)).collect();
    let diff: Vec<f64> = (0..=p + 1).map(|k| coef(k, -1.0)).collect();
    let mut all = root_angles(&sum);
    all.extend(root_angles(&diff));
    all.sort_by(f64::total_cmp);
    all
}

#[test]
fn frame_counts_match_direct_count() {
    let cfg = SonographConfig::default();
    let long = noise(1, (2.32 * SR as f64) as usize);
    assert_eq!(mel_spectrogram(&long, &cfg).unwrap().frames, 100);
    let t = build_tensor(&long, &cfg, TensorMode::ThreeD).unwrap();
    for c in 0..3 {
        let last_col_nonzero = (0..33).any(|b| t.get(b, 99, c) != 0.0);
        assert!(last_col_nonzero, "channel {c} frame 99 should hold audio");
    }

    let one = noise(2, SR as usize);
    let direct = (0..).take_while(|k| k * 512 <= one.len()).count();
    assert_eq!(direct, 44);
    assert_eq!(frame_count(one.len(), 512), direct);
    assert_eq!(mfcc(&one, &cfg).unwrap().frames, direct);
    let t = build_tensor(&one, &cfg, TensorMode::ThreeD).unwrap();
    for b in 0..33 {
        for f in 44..100 {
            for c in 0..3 {
                assert_eq!(t.get(b, f, c), 0.0);
            }
        }
    }
}

#[test]
fn long_segment_truncated_to_first_frames() {
    let cfg = SonographConfig::default();
    let x = noise(4, 4 * SR as usize);
    // Frame 99 is centred on 99 * 512 and reaches half a frame past it.
    let needed = 99 * 512 + 2048 / 2;
    let full = build_tensor(&x, &cfg, TensorMode::ThreeD).unwrap();
    let prefix = build_tensor(&x.slice(0, needed), &cfg, TensorMode::ThreeD).unwrap();
    assert_eq!(full.shape(), (33, 100, 3));
    assert_eq!(full, prefix);
}

#[test]
fn tone_lands_in_nearest_mel_band() {
    let cfg = SonographConfig::default();
    let centres = mel_band_centers(&cfg);
    let want = centres
        .iter()
        .enumerate()
        .min_by(|a, b| {
            (hz_to_mel(*a.1) - hz_to_mel(1000.0))
                .abs()
                .total_cmp(&(hz_to_mel(*b.1) - hz_to_mel(1000.0)).abs())
        })
        .unwrap()
        .0;
    let m = mel_spectrogram(&tone(1000.0, 1.0), &cfg).unwrap();
    for t in 0..m.frames {
        let col = m.column(t);
        let arg = (0..33).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(arg, want, "frame {t}");
    }
}

#[test]
fn mel_spectrogram_is_gain_invariant() {
    let cfg = SonographConfig::default();
    let x = noise(3, 8000);
    let a = mel_spectrogram(&x, &cfg).unwrap();
    let b = mel_spectrogram(&x.scaled(2.0), &cfg).unwrap();
    for (u, v) in a.data.iter().zip(&b.data) {
        assert!((u - v).abs() < 1e-9);
    }
}

#[test]
fn mfcc_of_tone_is_stationary() {
    let cfg = SonographConfig::default();
    // 16 whole cycles per hop, so every full frame sees the same waveform.
    // Off-grid tones drift by a few percent through Hamming sidelobe leakage
    // into bands near the -80 dB floor.
    let f = 16.0 * SR as f64 / 512.0;
    let m = mfcc(&tone(f, 1.0), &cfg).unwrap();
    // Skip the frames whose window overlaps the zero padding at either end.
    let inner: Vec<usize> = (4..m.frames - 4).collect();
    let reference = m.column(inner[0]);
    let norm = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    for &t in &inner {
        let col = m.column(t);
        let d = col.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(d / norm < 0.01, "frame {t}: relative change {}", d / norm);
    }
}

#[test]
fn distinct_tones_give_distinct_mfcc() {
    let cfg = SonographConfig::default();
    let mean = |s: &AudioSignal| {
        let m = mfcc(s, &cfg).unwrap();
        (0..33)
            .map(|b| (0..m.frames).map(|t| m.get(b, t)).sum::<f64>() / m.frames as f64)
            .collect::<Vec<_>>()
    };
    let a = mean(&tone(400.0, 1.0));
    let b = mean(&tone(1600.0, 1.0));
    let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!(d > 1.0, "distance {d}");
}

#[test]
fn lsp_matches_companion_matrix_roots() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for order in [4usize, 10, 33] {
        for trial in 0..5 {
            let frame: Vec<f64> = (0..2048).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Colour the noise so the spectrum is not flat.
            let frame: Vec<f64> = frame
                .windows(3)
                .map(|w| w[0] + 0.8 * w[1] - 0.3 * w[2])
                .collect();
            let a = lpc(&frame, order).unwrap();
            let ours = lsp_frequencies(&a).unwrap();
            let oracle = oracle_lsp(&a);
            assert_eq!(ours.len(), order);
            assert_eq!(oracle.len(), order, "order {order} trial {trial}");
            for (x, y) in ours.iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-6, "order {order} trial {trial}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn lsp_clusters_at_tone_frequency() {
    let cfg = SonographConfig::default();
    let target = 500.0 / (SR as f64 / 2.0);
    let l = lpcs(&tone(500.0, 0.5), &cfg).unwrap();
    for t in 2..l.frames - 2 {
        let col = l.column(t);
        let hit = col
            .windows(2)
            .any(|w| (w[1] - w[0]) < 0.02 && (w[0] - target).abs() < 0.02 && (w[1] - target).abs() < 0.02);
        assert!(hit, "frame {t}: no LSP pair near {target}: {col:?}");
    }
}

#[test]
fn tensor_is_gain_invariant_and_deterministic() {
    let cfg = SonographConfig::default();
    let x = noise(5, 30000);
    let a = build_tensor(&x, &cfg, TensorMode::ThreeD).unwrap();
    let b = build_tensor(&x.scaled(0.3), &cfg, TensorMode::ThreeD).unwrap();
    let c = build_tensor(&x, &cfg, TensorMode::ThreeD).unwrap();
    assert_eq!(a, c);
    for (u, v) in a.data.iter().zip(&b.data) {
        assert!((u - v).abs() < 1e-6, "{u} vs {v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lsp_strictly_increasing(seed in any::<u64>(), len in 600usize..6000) {
        let cfg = SonographConfig::default();
        let l = lpcs(&noise(seed, len), &cfg).unwrap();
        for t in 0..l.frames {
            let col = l.column(t);
            prop_assert!(col.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(col.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn tensor_shape_and_range(seed in any::<u64>(), len in 1usize..60000, gain in 0.01f64..1.0) {
        let cfg = SonographConfig::default();
        let t = build_tensor(&noise(seed, len).scaled(gain), &cfg, TensorMode::ThreeD).unwrap();
        prop_assert_eq!(t.shape(), (33, 100, 3));
        prop_assert!(t.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let used = frame_count(len, 512).min(100);
        for b in 0..33 {
            for f in used..100 {
                for c in 0..3 {
                    prop_assert_eq!(t.get(b, f, c), 0.0);
                }
            }
        }
    }
}
