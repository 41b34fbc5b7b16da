//! WAV decoding/encoding and band-limited resampling.

use std::f64::consts::PI;
use std::io::Cursor;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Mono audio, amplitudes normalised to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of the half-open sample range `[start, end)`, clamped to the signal.
    pub fn slice(&self, start: usize, end: usize) -> AudioSignal {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        AudioSignal::new(self.samples[start..end].to_vec(), self.sample_rate)
    }

    pub fn scaled(&self, gain: f64) -> AudioSignal {
        AudioSignal::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }
}

/// Decode a RIFF/WAVE byte buffer. Multi-channel audio is mixed down by
/// averaging the channels of each frame.
pub fn read_wav(bytes: &[u8]) -> Result<AudioSignal> {
    let reader = WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.channels == 0 {
        return Err(Error::Decode("header declares zero channels".into()));
    }
    if spec.sample_rate == 0 {
        return Err(Error::Decode("header declares zero sample rate".into()));
    }
    let frames = reader.duration() as usize;
    if frames == 0 {
        return Err(Error::EmptyInput("wav file contains no frames".into()));
    }

    let interleaved: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::UnsupportedFormat(format!(
                    "{}-bit float samples",
                    spec.bits_per_sample
                )));
            }
            reader
                .into_samples::<f32>()
                .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound)?
        }
        SampleFormat::Int => {
            let scale = match spec.bits_per_sample {
                8 => 128.0,
                16 => 32768.0,
                24 => 8_388_608.0,
                32 => 2_147_483_648.0,
                b => {
                    return Err(Error::UnsupportedFormat(format!("{b}-bit integer samples")));
                }
            };
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound)?
        }
    };

    let channels = spec.channels as usize;
    if interleaved.len() != frames * channels {
        return Err(Error::Decode(format!(
            "header declares {frames} frames but data holds {} samples",
            interleaved.len()
        )));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    Ok(AudioSignal::new(samples, spec.sample_rate))
}

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedFormat("non-PCM encoding".into()),
        hound::Error::IoError(io) => Error::Decode(io.to_string()),
        other => Error::Decode(other.to_string()),
    }
}

/// Sample encodings accepted by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Pcm24,
    Float32,
}

/// Encode a mono signal as a WAV byte buffer. Samples are clipped to [-1, 1].
pub fn write_wav(signal: &AudioSignal, encoding: WavEncoding) -> Result<Vec<u8>> {
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Pcm24 => (24, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: bits,
        sample_format: format,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = WavWriter::new(&mut cursor, spec).map_err(map_hound)?;
        for &s in &signal.samples {
            let s = s.clamp(-1.0, 1.0);
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(map_hound)?;
                }
                WavEncoding::Pcm24 => {
                    let q = (s * 8_388_608.0).round().clamp(-8_388_608.0, 8_388_607.0) as i32;
                    writer.write_sample(q).map_err(map_hound)?;
                }
                WavEncoding::Float32 => writer.write_sample(s as f32).map_err(map_hound)?,
            }
        }
        writer.finalize().map_err(map_hound)?;
    }
    Ok(cursor.into_inner())
}

/// Kernel half-width in periods of the lower of the two rates (64 taps total).
const SINC_HALF_TAPS: usize = 32;
const KAISER_BETA: f64 = 6.0;
/// Anti-alias cutoff as a fraction of the lower Nyquist frequency.
const CUTOFF_FRACTION: f64 = 0.95;

/// Windowed-sinc (Kaiser, 64 taps) resampling to `target_rate`.
pub fn resample(signal: &AudioSignal, target_rate: u32) -> Result<AudioSignal> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    if target_rate == signal.sample_rate || signal.is_empty() {
        return Ok(AudioSignal::new(signal.samples.clone(), target_rate));
    }
    let rate_in = signal.sample_rate as f64;
    let rate_out = target_rate as f64;
    let ratio = rate_out / rate_in;
    let out_len = ((signal.len() as f64) * ratio).round().max(1.0) as usize;

    // Cutoff in cycles per input sample; kernel support scales with the
    // lower rate so downsampling widens the kernel.
    let scale = ratio.min(1.0);
    let cutoff = 0.5 * CUTOFF_FRACTION * scale;
    let half_width = SINC_HALF_TAPS as f64 / scale;
    let i0_beta = bessel_i0(KAISER_BETA);
    let x = &signal.samples;
    let n_in = x.len() as isize;

    let samples = (0..out_len)
        .map(|n| {
            let pos = n as f64 / ratio;
            let lo = (pos - half_width).ceil().max(0.0) as isize;
            let hi = ((pos + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let t = pos - k as f64;
                let w = kaiser(t / half_width, i0_beta);
                acc += x[k as usize] * 2.0 * cutoff * sinc(2.0 * cutoff * t) * w;
            }
            acc
        })
        .collect();
    Ok(AudioSignal::new(samples, target_rate))
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Kaiser window evaluated at `u` in [-1, 1].
fn kaiser(u: f64, i0_beta: f64) -> f64 {
    if u.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
