//! Far-field augmentation: reverberant speech plus noise at a target SNR.
//!
//! ```text
//! x_r[t] = align(x * h_s)[t] + g * ( sum_i (n_i * h_i)[t] + d[t] )
//! ```
//!
//! The speech path is advanced by the IR's direct-path index so the output
//! stays time-aligned with the clean input; the noise gain `g` is chosen from
//! full-buffer powers of the aligned speech and the combined noise.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{read_canonical, write_audio, AudioBuffer, SampleFormat};
use crate::conv::convolve;
use crate::dataset::{output_file_name, Manifest, ManifestEntry};
use crate::seed::{item_seed, rng_from_seed, ItemRng};
use crate::spectral::ImpulseResponse;
use crate::Error;

/// Output peak after conditional normalization.
pub const NORMALIZED_PEAK: f64 = 0.95;
pub const DEFAULT_SNR_RANGE: (f64, f64) = (5.0, 25.0);

#[derive(Error, Debug, Clone, PartialEq)]
pub enum AugmentError {
    #[error("empty signal")]
    EmptySignal,
    #[error("noise has zero power")]
    SilentNoise,
    #[error("SNR must be finite, got {0}")]
    NonFiniteSnr(f64),
    #[error("direct-path index {idx} outside convolved signal of length {len}")]
    BadDirectIndex { idx: usize, len: usize },
}

/// Index of the largest-magnitude sample (first one on ties).
pub fn detect_direct_path(ir: &ImpulseResponse) -> usize {
    let mut best = 0;
    let mut peak = -1.0;
    for (i, x) in ir.samples().iter().enumerate() {
        if x.abs() > peak {
            peak = x.abs();
            best = i;
        }
    }
    best
}

/// Advance `convolved` by `direct_idx` samples and fit it to `speech_len`.
pub fn align_convolved(
    speech_len: usize,
    convolved: &AudioBuffer,
    direct_idx: usize,
) -> Result<AudioBuffer, AugmentError> {
    if direct_idx >= convolved.len() {
        return Err(AugmentError::BadDirectIndex {
            idx: direct_idx,
            len: convolved.len(),
        });
    }
    let mut out: Vec<f64> = convolved.samples()[direct_idx..]
        .iter()
        .take(speech_len)
        .copied()
        .collect();
    out.resize(speech_len, 0.0);
    Ok(convolved.with_samples(out))
}

/// Repeat `noise` from offset 0 until it covers `len` samples, or truncate.
fn loop_to_length(noise: &[f64], len: usize, offset: usize) -> Vec<f64> {
    noise
        .iter()
        .cycle()
        .skip(offset)
        .take(len)
        .copied()
        .collect()
}

/// Fit a noise to `len` samples starting at a random offset: looped when it
/// is shorter, cropped when it is longer.
fn fit_noise(noise: &[f64], len: usize, rng: &mut ItemRng) -> Vec<f64> {
    let offset = if noise.len() <= len {
        rng.random_range(0..noise.len())
    } else {
        rng.random_range(0..=noise.len() - len)
    };
    loop_to_length(noise, len, offset)
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Gain that puts `noise` at `snr_db` below `signal` (full-buffer power).
pub fn snr_gain(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<f64, AugmentError> {
    if !snr_db.is_finite() {
        return Err(AugmentError::NonFiniteSnr(snr_db));
    }
    if signal.is_empty() || noise.is_empty() {
        return Err(AugmentError::EmptySignal);
    }
    let pn = mean_power(noise);
    if !(pn > 0.0) {
        return Err(AugmentError::SilentNoise);
    }
    Ok((mean_power(signal) / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `signal + g * noise` with `g` set for the requested SNR. The noise is
/// looped or truncated to the signal length. Returns the mix and `g`.
pub fn mix_at_snr(
    signal: &AudioBuffer,
    noise: &AudioBuffer,
    snr_db: f64,
) -> Result<(AudioBuffer, f64), AugmentError> {
    if signal.is_empty() || noise.is_empty() {
        return Err(AugmentError::EmptySignal);
    }
    let fitted = loop_to_length(noise.samples(), signal.len(), 0);
    let gain = snr_gain(signal.samples(), &fitted, snr_db)?;
    let mixed = signal
        .samples()
        .iter()
        .zip(&fitted)
        .map(|(s, n)| s + gain * n)
        .collect();
    Ok((signal.with_samples(mixed), gain))
}

/// A point-source noise and the IR from its position.
#[derive(Debug, Clone)]
pub struct PointNoise {
    pub noise: AudioBuffer,
    pub ir: ImpulseResponse,
}

/// Everything needed for one augmented utterance.
#[derive(Debug, Clone)]
pub struct AugmentationSpec {
    pub speech: AudioBuffer,
    pub speech_ir: ImpulseResponse,
    pub point_noises: Vec<PointNoise>,
    pub ambient: Option<AudioBuffer>,
    pub snr_db: f64,
    /// Drives the noise offsets.
    pub seed: u64,
}

/// One augmented utterance with its two additive parts kept apart.
///
/// `audio = speech_component + noise_component`, all after the final scale.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub audio: AudioBuffer,
    pub speech_component: Vec<f64>,
    pub noise_component: Vec<f64>,
    /// Gain applied to the combined noise before normalization.
    pub noise_gain: f64,
    /// Peak-normalization factor (1.0 when no normalization was needed).
    pub scale: f64,
    pub notices: Vec<String>,
}

pub fn augment_utterance(spec: &AugmentationSpec) -> Result<Augmented, AugmentError> {
    if !spec.snr_db.is_finite() {
        return Err(AugmentError::NonFiniteSnr(spec.snr_db));
    }
    if spec.speech.is_empty() {
        return Err(AugmentError::EmptySignal);
    }
    let n = spec.speech.len();
    let mut rng = rng_from_seed(spec.seed);
    let mut notices = Vec::new();

    let wet = spec
        .speech
        .with_samples(convolve(spec.speech.samples(), spec.speech_ir.samples()));
    let speech = align_convolved(n, &wet, detect_direct_path(&spec.speech_ir))?.into_samples();

    let has_noise = !spec.point_noises.is_empty() || spec.ambient.is_some();
    let mut noise = vec![0.0; n];
    for pn in &spec.point_noises {
        if pn.noise.is_empty() {
            return Err(AugmentError::EmptySignal);
        }
        let src = fit_noise(pn.noise.samples(), n, &mut rng);
        for (acc, v) in noise.iter_mut().zip(convolve(&src, pn.ir.samples())) {
            *acc += v;
        }
    }
    if let Some(ambient) = &spec.ambient {
        if ambient.is_empty() {
            return Err(AugmentError::EmptySignal);
        }
        for (acc, v) in noise
            .iter_mut()
            .zip(fit_noise(ambient.samples(), n, &mut rng))
        {
            *acc += v;
        }
    }

    let noise_gain = if has_noise {
        snr_gain(&speech, &noise, spec.snr_db)?
    } else {
        notices.push(format!(
            "no noise sources; requested SNR {} dB ignored",
            spec.snr_db
        ));
        log::info!("{}", notices.last().expect("just pushed"));
        0.0
    };

    let mut speech_component = speech;
    let mut noise_component: Vec<f64> = noise.iter().map(|v| v * noise_gain).collect();
    let peak = speech_component
        .iter()
        .zip(&noise_component)
        .fold(0.0f64, |m, (s, v)| m.max((s + v).abs()));
    let scale = if peak > 1.0 {
        let s = NORMALIZED_PEAK / peak;
        notices.push(format!("peak {peak:.4} normalized by {s:.6}"));
        s
    } else {
        1.0
    };
    if scale != 1.0 {
        speech_component.iter_mut().for_each(|v| *v *= scale);
        noise_component.iter_mut().for_each(|v| *v *= scale);
    }
    let audio = speech_component
        .iter()
        .zip(&noise_component)
        .map(|(s, v)| s + v)
        .collect();
    Ok(Augmented {
        audio: spec.speech.with_samples(audio),
        speech_component,
        noise_component,
        noise_gain,
        scale,
        notices,
    })
}

/// How SNRs are picked per utterance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SnrChoice {
    Fixed(f64),
    Uniform { min: f64, max: f64 },
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub snr: SnrChoice,
    /// Ambient noise drawn from the noise manifest for every utterance.
    pub ambient: bool,
    /// Point-source noises per utterance, each paired with a random IR.
    pub point_noises: usize,
    pub format: SampleFormat,
    pub workers: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            snr: SnrChoice::Uniform {
                min: DEFAULT_SNR_RANGE.0,
                max: DEFAULT_SNR_RANGE.1,
            },
            ambient: true,
            point_noises: 0,
            format: SampleFormat::Pcm16,
            workers: 1,
        }
    }
}

/// One line of the output manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub utterance_id: String,
    pub source_path: String,
    pub ir_id: String,
    pub noise_ids: Vec<String>,
    pub snr_db: f64,
    pub seed: u64,
    pub scale: f64,
    pub output_path: String,
    pub duration_samples: usize,
}

#[derive(Debug, Clone)]
pub struct AugmentReport {
    pub records: Vec<AugmentRecord>,
    pub failures: Vec<(String, String)>,
}

impl AugmentReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn all_failed(&self) -> bool {
        self.records.is_empty() && !self.failures.is_empty()
    }
}

fn load_ir(manifest: &Manifest, entry: &ManifestEntry) -> Result<ImpulseResponse, Error> {
    let buf = read_canonical(manifest.resolve(entry))?;
    Ok(ImpulseResponse::new(&entry.id, buf)?)
}

fn augment_one(
    entry: &ManifestEntry,
    speech: &Manifest,
    irs: &Manifest,
    noises: &Manifest,
    config: &AugmentConfig,
    master_seed: u64,
    out_dir: &Path,
) -> Result<AugmentRecord, Error> {
    let seed = item_seed(master_seed, &entry.id);
    let mut rng = rng_from_seed(seed);
    if irs.is_empty() {
        return Err(Error::Batch("IR manifest is empty".into()));
    }
    let ir_entry = &irs.entries()[rng.random_range(0..irs.len())];
    let snr_db = match config.snr {
        SnrChoice::Fixed(v) => v,
        SnrChoice::Uniform { min, max } => rng.random_range(min..=max),
    };
    let ambient_entry = (config.ambient && !noises.is_empty())
        .then(|| &noises.entries()[rng.random_range(0..noises.len())]);
    let point_entries: Vec<(&ManifestEntry, &ManifestEntry)> = if noises.is_empty() {
        Vec::new()
    } else {
        (0..config.point_noises)
            .map(|_| {
                (
                    &noises.entries()[rng.random_range(0..noises.len())],
                    &irs.entries()[rng.random_range(0..irs.len())],
                )
            })
            .collect()
    };
    let offsets_seed: u64 = rng.random();

    let clean = read_canonical(speech.resolve(entry))?;
    let spec = AugmentationSpec {
        speech: clean,
        speech_ir: load_ir(irs, ir_entry)?,
        point_noises: point_entries
            .iter()
            .map(|(n, i)| {
                Ok(PointNoise {
                    noise: read_canonical(noises.resolve(n))?,
                    ir: load_ir(irs, i)?,
                })
            })
            .collect::<Result<_, Error>>()?,
        ambient: ambient_entry
            .map(|n| read_canonical(noises.resolve(n)))
            .transpose()?,
        snr_db,
        seed: offsets_seed,
    };
    let out = augment_utterance(&spec)?;
    for note in &out.notices {
        log::debug!("{}: {note}", entry.id);
    }

    let rel = output_file_name(&entry.id);
    let path: PathBuf = out_dir.join(&rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_audio(&path, &out.audio, config.format)?;

    let mut noise_ids: Vec<String> = point_entries.iter().map(|(n, _)| n.id.clone()).collect();
    if let Some(a) = ambient_entry {
        noise_ids.push(a.id.clone());
    }
    Ok(AugmentRecord {
        utterance_id: entry.id.clone(),
        source_path: entry.path.clone(),
        ir_id: ir_entry.id.clone(),
        noise_ids,
        snr_db,
        seed,
        scale: out.scale,
        output_path: path.to_string_lossy().into_owned(),
        duration_samples: out.audio.len(),
    })
}

/// Augment every utterance of `speech` into `out_dir`.
///
/// Each utterance draws its IR, noises, SNR and offsets from
/// `item_seed(master_seed, utterance_id)`, so the output does not depend on
/// the worker count. Failed items are logged and reported; the run goes on.
pub fn build_augmented_dataset(
    speech: &Manifest,
    irs: &Manifest,
    noises: &Manifest,
    config: &AugmentConfig,
    master_seed: u64,
    out_dir: &Path,
) -> Result<AugmentReport, Error> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = crate::compensate::thread_pool(config.workers)?;
    let results: Vec<Result<AugmentRecord, Error>> = pool.install(|| {
        speech
            .entries()
            .par_iter()
            .map(|e| augment_one(e, speech, irs, noises, config, master_seed, out_dir))
            .collect()
    });
    let mut report = AugmentReport {
        records: Vec::new(),
        failures: Vec::new(),
    };
    for (entry, r) in speech.entries().iter().zip(results) {
        match r {
            Ok(rec) => report.records.push(rec),
            Err(e) => {
                log::error!("{}: {e}", entry.id);
                report.failures.push((entry.id.clone(), e.to_string()));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn buf(v: Vec<f64>) -> AudioBuffer {
        AudioBuffer::canonical(v)
    }

    fn ir(v: Vec<f64>) -> ImpulseResponse {
        ImpulseResponse::from_samples("ir", v).unwrap()
    }

    fn tone(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| 0.3 * (i as f64 * 0.05).sin() + 0.2 * (i as f64 * 0.31).cos())
            .collect()
    }

    #[test]
    fn direct_path_is_argmax() {
        assert_eq!(detect_direct_path(&ir(vec![1.0, 0.2, 0.1])), 0);
        let mut h = vec![0.0; 100];
        h[10] = 0.3;
        h[37] = -0.9;
        h[60] = 0.45;
        assert_eq!(detect_direct_path(&ir(h)), 37);
    }

    #[test]
    fn align_without_shift_only_fits_length() {
        let c = buf(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(align_convolved(2, &c, 0).unwrap().samples(), &[1.0, 2.0]);
        assert_eq!(
            align_convolved(6, &c, 0).unwrap().samples(),
            &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]
        );
        assert!(align_convolved(2, &c, 4).is_err());
    }

    #[test]
    fn pure_delay_is_undone() {
        let x = tone(3000);
        let mut h = vec![0.0; 120];
        h[77] = 1.0;
        let wet = buf(convolve(&x, &h));
        let aligned = align_convolved(x.len(), &wet, 77).unwrap();
        for (a, b) in aligned.samples().iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn snr_scaling_rules() {
        let s = buf(vec![0.5, -0.5, 0.5, -0.5]);
        let n = buf(vec![-0.5, 0.5, 0.5, -0.5]);
        let (_, g) = mix_at_snr(&s, &n, 0.0).unwrap();
        assert!((g - 1.0).abs() < 1e-9);
        let (_, g) = mix_at_snr(&s, &n, 20.0).unwrap();
        assert!((g * 0.5 - 0.05).abs() < 1e-12);
        assert_eq!(
            mix_at_snr(&s, &buf(vec![0.0; 4]), 10.0),
            Err(AugmentError::SilentNoise)
        );
    }

    #[test]
    fn short_noise_is_looped() {
        let s = buf(tone(10));
        let n = buf(vec![0.1, -0.2, 0.3]);
        let (mixed, g) = mix_at_snr(&s, &n, 5.0).unwrap();
        assert_eq!(mixed.len(), 10);
        let expect = s.samples()[9] + g * 0.1;
        assert!((mixed.samples()[9] - expect).abs() < 1e-15);
    }

    #[test]
    fn delta_ir_without_noise_is_identity() {
        let x = tone(2000);
        let spec = AugmentationSpec {
            speech: buf(x.clone()),
            speech_ir: ir(vec![1.0]),
            point_noises: vec![],
            ambient: None,
            snr_db: 10.0,
            seed: 0,
        };
        let out = augment_utterance(&spec).unwrap();
        assert_eq!(out.audio.samples(), &x[..]);
        assert_eq!(out.notices.len(), 1);
        assert_eq!(out.scale, 1.0);
    }

    #[test]
    fn delayed_delta_is_aligned() {
        let x = tone(5000);
        let mut h = vec![0.0; 101];
        h[100] = 1.0;
        let spec = AugmentationSpec {
            speech: buf(x.clone()),
            speech_ir: ir(h),
            point_noises: vec![],
            ambient: None,
            snr_db: 10.0,
            seed: 0,
        };
        let out = augment_utterance(&spec).unwrap();
        for (a, b) in out.audio.samples().iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ambient_noise_hits_requested_snr() {
        let x = tone(4000);
        let noise: Vec<f64> = (0..1500)
            .map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5)
            .collect();
        let spec = AugmentationSpec {
            speech: buf(x),
            speech_ir: ir(vec![0.0, 1.0, 0.3, 0.1]),
            point_noises: vec![],
            ambient: Some(buf(noise)),
            snr_db: 10.0,
            seed: 5,
        };
        let out = augment_utterance(&spec).unwrap();
        let snr =
            10.0 * (mean_power(&out.speech_component) / mean_power(&out.noise_component)).log10();
        assert!((snr - 10.0).abs() < 0.01, "{snr}");
        assert_eq!(out.audio.len(), 4000);
    }

    #[test]
    fn loud_mix_is_normalized() {
        let spec = AugmentationSpec {
            speech: buf(vec![0.9; 100]),
            speech_ir: ir(vec![1.0]),
            point_noises: vec![],
            ambient: Some(buf(vec![0.9; 100])),
            snr_db: 0.0,
            seed: 1,
        };
        let out = augment_utterance(&spec).unwrap();
        assert!((out.audio.peak() - NORMALIZED_PEAK).abs() < 1e-12);
        assert!((out.scale - NORMALIZED_PEAK / 1.8).abs() < 1e-12);
    }

    #[test]
    fn non_finite_snr_is_rejected() {
        let spec = AugmentationSpec {
            speech: buf(vec![0.1; 10]),
            speech_ir: ir(vec![1.0]),
            point_noises: vec![],
            ambient: None,
            snr_db: f64::NAN,
            seed: 0,
        };
        assert!(matches!(
            augment_utterance(&spec),
            Err(AugmentError::NonFiniteSnr(_))
        ));
    }

    proptest! {
        #[test]
        fn noise_free_augmentation_is_linear(a in -1.0f64..1.0, seed in 0u64..100) {
            let x = tone(800);
            let h: Vec<f64> = (0..200).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 20_000.0 * (-(i as f64) / 40.0).exp()).collect();
            let run = |sig: Vec<f64>| augment_utterance(&AugmentationSpec {
                speech: buf(sig),
                speech_ir: ir(h.clone()),
                point_noises: vec![],
                ambient: None,
                snr_db: 0.0,
                seed,
            }).unwrap();
            let base = run(x.clone());
            prop_assume!(base.scale == 1.0);
            let scaled = run(x.iter().map(|v| v * a).collect());
            for (p, q) in scaled.audio.samples().iter().zip(base.audio.samples()) {
                prop_assert!((p - a * q).abs() < 1e-9);
            }
            prop_assert_eq!(scaled.audio.len(), 800);
        }
    }
}
