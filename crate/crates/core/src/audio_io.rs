//! WAVE input/output and the canonical mono signal type.
//!
//! Everything downstream works on [`AudioBuffer`]: mono `f64` samples with a
//! nominal range of `[-1, 1]`. Reading downmixes by averaging channels;
//! [`read_canonical`] additionally resamples to [`CANONICAL_RATE`].

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::CANONICAL_RATE;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("{}: no such file", .path.display())]
    NotFound { path: PathBuf },
    #[error("{}: unsupported codec ({detail})", .path.display())]
    UnsupportedCodec { path: PathBuf, detail: String },
    #[error("{}: corrupt or truncated WAVE file ({detail})", .path.display())]
    Corrupt { path: PathBuf, detail: String },
    #[error("{}: cannot write ({detail})", .path.display())]
    Unwritable { path: PathBuf, detail: String },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty signal")]
    EmptySignal,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("sample rate must be positive")]
    InvalidRate,
    #[error("expected {expected} Hz audio, got {actual} Hz")]
    WrongRate { expected: u32, actual: u32 },
}

/// Mono sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Buffer at the canonical 16 kHz rate.
    pub fn canonical(samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: CANONICAL_RATE,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean power over the whole buffer.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn require_rate(&self, expected: u32) -> Result<(), AudioError> {
        if self.sample_rate != expected {
            return Err(AudioError::WrongRate {
                expected,
                actual: self.sample_rate,
            });
        }
        Ok(())
    }

    /// Same samples, different rate tag. Used when a buffer is known to be
    /// already at the target rate.
    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

impl std::str::FromStr for SampleFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pcm16" => Ok(SampleFormat::Pcm16),
            "float32" => Ok(SampleFormat::Float32),
            other => Err(format!("unknown sample format {other:?} (pcm16|float32)")),
        }
    }
}

/// Outcome of a write; `clipped` counts samples that fell outside `[-1, 1]`
/// and were saturated (PCM16 only).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteReport {
    pub clipped: usize,
}

fn classify(path: &Path, err: hound::Error) -> AudioError {
    match err {
        hound::Error::Unsupported => AudioError::UnsupportedCodec {
            path: path.to_path_buf(),
            detail: "format not supported".into(),
        },
        hound::Error::IoError(e) => AudioError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        },
        other => AudioError::Corrupt {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    }
}

/// Read a RIFF/WAVE file with PCM16 or IEEE float32 samples.
pub fn read_audio(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => AudioError::NotFound {
            path: path.to_path_buf(),
        },
        _ => AudioError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let reader = hound::WavReader::new(BufReader::new(file)).map_err(|e| classify(path, e))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(|e| classify(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| classify(path, e))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedCodec {
                path: path.to_path_buf(),
                detail: format!("{fmt:?} {bits}-bit"),
            })
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::Corrupt {
            path: path.to_path_buf(),
            detail: "partial final frame".into(),
        });
    }
    if interleaved.is_empty() {
        return Err(AudioError::Corrupt {
            path: path.to_path_buf(),
            detail: "no sample frames".into(),
        });
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        let scale = 1.0 / channels as f64;
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() * scale)
            .collect()
    };
    AudioBuffer::new(samples, spec.sample_rate).map_err(|_| AudioError::Corrupt {
        path: path.to_path_buf(),
        detail: "zero sample rate".into(),
    })
}

/// Read and resample to the canonical rate.
pub fn read_canonical(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let buf = read_audio(path)?;
    if buf.sample_rate() == CANONICAL_RATE {
        Ok(buf)
    } else {
        Ok(resample(&buf, CANONICAL_RATE))
    }
}

/// Write a mono WAVE file.
pub fn write_audio(
    path: impl AsRef<Path>,
    buf: &AudioBuffer,
    format: SampleFormat,
) -> Result<WriteReport, AudioError> {
    let path = path.as_ref();
    if buf.is_empty() {
        return Err(AudioError::EmptySignal);
    }
    if let Some(i) = buf.samples().iter().position(|x| !x.is_finite()) {
        return Err(AudioError::NonFinite(i));
    }
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let unwritable = |e: hound::Error| AudioError::Unwritable {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(unwritable)?;
    let mut report = WriteReport::default();
    match format {
        SampleFormat::Pcm16 => {
            for &x in buf.samples() {
                if x.abs() > 1.0 {
                    report.clipped += 1;
                }
                writer.write_sample(pcm16_quantize(x)).map_err(unwritable)?;
            }
        }
        SampleFormat::Float32 => {
            for &x in buf.samples() {
                writer.write_sample(x as f32).map_err(unwritable)?;
            }
        }
    }
    writer.finalize().map_err(unwritable)?;
    if report.clipped > 0 {
        log::warn!("{}: clipped {} samples", path.display(), report.clipped);
    }
    Ok(report)
}

fn pcm16_quantize(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * 32768.0)
        .round()
        .clamp(-32768.0, 32767.0) as i16
}

const RESAMPLE_HALF_TAPS: i64 = 32;

/// Band-limited resampling with a 64-tap Hann-windowed sinc kernel.
///
/// Output length is `round(len * target / source)`. The kernel is normalized
/// to unit DC gain at every output position.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> AudioBuffer {
    assert!(target_rate > 0, "target rate must be positive");
    let source_rate = buf.sample_rate();
    if source_rate == target_rate {
        return buf.clone();
    }
    let ratio = f64::from(source_rate) / f64::from(target_rate);
    let cutoff = (f64::from(target_rate) / f64::from(source_rate)).min(1.0);
    let input = buf.samples();
    let n_in = input.len() as i64;
    let n_out = (input.len() as f64 / ratio).round() as usize;
    let half = RESAMPLE_HALF_TAPS as f64;

    let out = (0..n_out)
        .map(|m| {
            let t = m as f64 * ratio;
            let base = t.floor() as i64;
            let mut acc = 0.0;
            let mut norm = 0.0;
            for j in (base - RESAMPLE_HALF_TAPS + 1)..=(base + RESAMPLE_HALF_TAPS) {
                let u = t - j as f64;
                if u.abs() >= half {
                    continue;
                }
                let arg = cutoff * u;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * arg).sin() / (PI * arg)
                };
                let window = 0.5 + 0.5 * (PI * u / half).cos();
                let w = cutoff * sinc * window;
                norm += w;
                if (0..n_in).contains(&j) {
                    acc += w * input[j as usize];
                }
            }
            if norm.abs() > 0.0 {
                acc / norm
            } else {
                0.0
            }
        })
        .collect();
    AudioBuffer {
        samples: out,
        sample_rate: target_rate,
    }
}
