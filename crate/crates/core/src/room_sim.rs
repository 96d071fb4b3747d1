//! Shoebox image-source simulation with absorption chosen for a target T60.
//!
//! Surfaces share one frequency-independent absorption coefficient, so the
//! simulated response is spectrally flat apart from the random fine
//! structure of the reflections. Each image contributes
//! `sqrt(1 - α)^order / (4π r)` at the sample nearest its arrival time.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{write_audio, SampleFormat};
use crate::dataset::{EntryKind, Manifest, ManifestEntry};
use crate::seed::item_rng;
use crate::spectral::{estimate_t60, ImpulseResponse};
use crate::{Error, CANONICAL_RATE};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const MIN_T60: f64 = 0.1;
pub const MAX_T60: f64 = 4.0;
/// Dataset generation draws T60 uniformly from this range.
pub const DATASET_T60_RANGE: (f64, f64) = (0.2, 2.0);
pub const VOLUME_RANGE: (f64, f64) = (100.0, 2000.0);
pub const MAX_ABSORPTION: f64 = 0.99;
const SABINE_CONSTANT: f64 = 0.161;
const MIN_SOURCE_MIC_DISTANCE: f64 = 0.01;
/// Image columns are summed in fixed-size groups so the result does not
/// depend on the worker count.
const IMAGE_GROUP: usize = 8;
const CALIBRATION_STEPS: usize = 8;
const CALIBRATION_TOL: f64 = 0.02;
/// Corner of the DC blocker applied to calibrated IRs.
pub const DC_BLOCK_HZ: f64 = 20.0;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum RoomError {
    #[error("room dimensions must be positive, got {0:?}")]
    BadDimensions([f64; 3]),
    #[error("{what} {pos:?} is not strictly inside the room")]
    OutsideRoom { what: &'static str, pos: [f64; 3] },
    #[error("absorption {0} outside (0, 1]")]
    BadAbsorption(f64),
    #[error("target T60 {0} s outside [{MIN_T60}, {MAX_T60}]")]
    T60OutOfRange(f64),
    #[error("max length {max_length} s is shorter than 1.2 x target T60 {t60} s")]
    TooShort { max_length: f64, t60: f64 },
    #[error("source and microphone coincide ({0:.4} m apart)")]
    Coincident(f64),
}

/// Shoebox room with one source and one microphone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: [f64; 3],
    pub source: [f64; 3],
    pub mic: [f64; 3],
    pub absorption: f64,
    #[serde(default = "default_speed")]
    pub speed_of_sound: f64,
}

fn default_speed() -> f64 {
    SPEED_OF_SOUND
}

pub fn volume(dims: &[f64; 3]) -> f64 {
    dims[0] * dims[1] * dims[2]
}

pub fn surface_area(dims: &[f64; 3]) -> f64 {
    2.0 * (dims[0] * dims[1] + dims[0] * dims[2] + dims[1] * dims[2])
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl RoomSpec {
    pub fn volume(&self) -> f64 {
        volume(&self.dims)
    }

    pub fn source_mic_distance(&self) -> f64 {
        distance(&self.source, &self.mic)
    }

    /// Check the invariants; returns warnings for soft violations.
    pub fn validate(&self) -> Result<Vec<String>, RoomError> {
        if self.dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(RoomError::BadDimensions(self.dims));
        }
        for (what, pos) in [("source", self.source), ("microphone", self.mic)] {
            let inside = pos.iter().zip(&self.dims).all(|(p, d)| *p > 0.0 && p < d);
            if !inside {
                return Err(RoomError::OutsideRoom { what, pos });
            }
        }
        if !(self.absorption > 0.0 && self.absorption <= 1.0) {
            return Err(RoomError::BadAbsorption(self.absorption));
        }
        let d = self.source_mic_distance();
        if d < MIN_SOURCE_MIC_DISTANCE {
            return Err(RoomError::Coincident(d));
        }
        let mut warnings = Vec::new();
        let v = self.volume();
        if !(VOLUME_RANGE.0..=VOLUME_RANGE.1).contains(&v) {
            warnings.push(format!(
                "room volume {v:.1} m³ outside [{}, {}] m³",
                VOLUME_RANGE.0, VOLUME_RANGE.1
            ));
        }
        Ok(warnings)
    }
}

/// Result of inverting a target T60.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorptionChoice {
    /// Eyring inversion, clamped to `(0, 0.99]`.
    pub alpha: f64,
    /// Sabine value for comparison.
    pub sabine_alpha: f64,
    pub clamped: bool,
    pub warnings: Vec<String>,
}

fn sabine_ratio(dims: &[f64; 3], t60: f64) -> f64 {
    SABINE_CONSTANT * volume(dims) / (surface_area(dims) * t60)
}

fn eyring_absorption(dims: &[f64; 3], t60: f64) -> f64 {
    1.0 - (-sabine_ratio(dims, t60)).exp()
}

/// Uniform absorption that gives `target_t60` by Eyring's formula.
pub fn absorption_for_t60(dims: &[f64; 3], target_t60: f64) -> Result<AbsorptionChoice, RoomError> {
    if dims.iter().any(|d| !(*d > 0.0)) {
        return Err(RoomError::BadDimensions(*dims));
    }
    if !(MIN_T60..=MAX_T60).contains(&target_t60) {
        return Err(RoomError::T60OutOfRange(target_t60));
    }
    let raw = eyring_absorption(dims, target_t60);
    let sabine_alpha = sabine_ratio(dims, target_t60);
    let mut warnings = Vec::new();
    let clamped = raw > MAX_ABSORPTION;
    let alpha = if clamped {
        warnings.push(format!(
            "T60 {target_t60} s needs absorption {raw:.4}; clamped to {MAX_ABSORPTION}"
        ));
        MAX_ABSORPTION
    } else {
        raw
    };
    log::debug!("T60 {target_t60}: eyring α = {alpha:.4}, sabine α = {sabine_alpha:.4}");
    Ok(AbsorptionChoice {
        alpha,
        sabine_alpha,
        clamped,
        warnings,
    })
}

/// One axis of the image lattice: offset from the microphone and the number
/// of wall reflections.
fn axis_images(len: f64, src: f64, mic: f64, reach: f64) -> Vec<(f64, i32)> {
    let n_max = (reach / (2.0 * len)).ceil() as i64 + 1;
    let mut out = Vec::new();
    for n in -n_max..=n_max {
        for odd in [false, true] {
            let pos = 2.0 * n as f64 * len + if odd { -src } else { src };
            let order = if odd {
                (2 * n - 1).abs()
            } else {
                (2 * n).abs()
            };
            let offset = pos - mic;
            if offset.abs() <= reach {
                out.push((offset, order as i32));
            }
        }
    }
    out
}

/// A simulated IR and any warnings raised while producing it.
#[derive(Debug, Clone)]
pub struct SimulatedIr {
    pub ir: ImpulseResponse,
    pub warnings: Vec<String>,
}

/// Sum all images arriving within `max_length` seconds.
pub fn simulate_shoebox_ir(
    spec: &RoomSpec,
    target_t60: f64,
    max_length: f64,
) -> Result<SimulatedIr, RoomError> {
    let warnings = spec.validate()?;
    if !(max_length >= 1.2 * target_t60) {
        return Err(RoomError::TooShort {
            max_length,
            t60: target_t60,
        });
    }
    let fs = f64::from(CANONICAL_RATE);
    let len = (max_length * fs).ceil() as usize;
    let c = spec.speed_of_sound;
    let reach = max_length * c;
    let beta = (1.0 - spec.absorption).max(0.0).sqrt();

    let xs = axis_images(spec.dims[0], spec.source[0], spec.mic[0], reach);
    let ys = axis_images(spec.dims[1], spec.source[1], spec.mic[1], reach);
    let zs = axis_images(spec.dims[2], spec.source[2], spec.mic[2], reach);
    let max_order = 3
        * (xs
            .iter()
            .chain(&ys)
            .chain(&zs)
            .map(|i| i.1)
            .max()
            .unwrap_or(0)
            + 1);
    let gains: Vec<f64> = (0..=max_order).map(|o| beta.powi(o)).collect();
    let reach2 = reach * reach;

    let partials: Vec<Vec<f64>> = xs
        .par_chunks(IMAGE_GROUP)
        .map(|group| {
            let mut buf = vec![0.0; len];
            for &(dx, ox) in group {
                for &(dy, oy) in &ys {
                    let dxy = dx * dx + dy * dy;
                    if dxy > reach2 {
                        continue;
                    }
                    for &(dz, oz) in &zs {
                        let d2 = dxy + dz * dz;
                        if d2 > reach2 {
                            continue;
                        }
                        let gain = gains[(ox + oy + oz) as usize];
                        if gain == 0.0 {
                            continue;
                        }
                        let d = d2.sqrt();
                        let idx = (d / c * fs).round() as usize;
                        if idx < len {
                            buf[idx] += gain / (4.0 * PI * d);
                        }
                    }
                }
            }
            buf
        })
        .collect();

    let mut samples = vec![0.0; len];
    for part in &partials {
        for (s, p) in samples.iter_mut().zip(part) {
            *s += p;
        }
    }
    let ir = ImpulseResponse::from_samples("shoebox", samples)
        .expect("direct path always lands inside the buffer");
    Ok(SimulatedIr { ir, warnings })
}

/// Outcome of [`simulate_for_t60`].
#[derive(Debug, Clone)]
pub struct CalibratedIr {
    pub ir: ImpulseResponse,
    /// Absorption actually used.
    pub absorption: f64,
    /// Eyring starting point.
    pub eyring_absorption: f64,
    /// Schroeder T60 of `ir`, when measurable.
    pub measured_t60: Option<f64>,
    pub warnings: Vec<String>,
}

/// First-order DC blocker, `y[n] = x[n] - x[n-1] + r y[n-1]`.
///
/// Image-source IRs are sums of positive pulses and carry a large DC
/// component that no acoustic measurement chain passes; through the analysis
/// window it leaks into the 62.5 Hz reading.
pub fn remove_dc(samples: &mut [f64], corner_hz: f64) {
    let r = (-2.0 * PI * corner_hz / f64::from(CANONICAL_RATE)).exp();
    let (mut prev_x, mut prev_y) = (0.0, 0.0);
    for s in samples.iter_mut() {
        let y = *s - prev_x + r * prev_y;
        prev_x = *s;
        prev_y = y;
        *s = y;
    }
}

fn dc_blocked(sim: SimulatedIr) -> SimulatedIr {
    let mut samples = sim.ir.into_buffer().into_samples();
    remove_dc(&mut samples, DC_BLOCK_HZ);
    SimulatedIr {
        ir: ImpulseResponse::from_samples("shoebox", samples).expect("filtered IR stays nonzero"),
        warnings: sim.warnings,
    }
}

/// Start from the Eyring absorption, then rescale `-ln(1 - α)` by the ratio
/// of measured to target T60 until the simulated IR decays at the target
/// rate. The image lattice of a box decays more slowly than Eyring predicts
/// (late energy is carried by near-axial paths with few reflections), so the
/// plain inversion overshoots the target by up to about 50%. The returned IR
/// has its DC removed (see [`remove_dc`]).
pub fn simulate_for_t60(
    dims: [f64; 3],
    source: [f64; 3],
    mic: [f64; 3],
    target_t60: f64,
    max_length: f64,
) -> Result<CalibratedIr, RoomError> {
    let choice = absorption_for_t60(&dims, target_t60)?;
    let mut spec = RoomSpec {
        dims,
        source,
        mic,
        absorption: choice.alpha,
        speed_of_sound: SPEED_OF_SOUND,
    };
    let max_a = -(1.0 - MAX_ABSORPTION).ln();
    let mut a = -(1.0 - choice.alpha).ln();
    let mut sim = dc_blocked(simulate_shoebox_ir(&spec, target_t60, max_length)?);
    let mut measured = estimate_t60(&sim.ir).ok();
    for _ in 0..CALIBRATION_STEPS {
        let Some(t) = measured else { break };
        let ratio = t / target_t60;
        if (ratio - 1.0).abs() <= CALIBRATION_TOL || (a >= max_a && ratio < 1.0) {
            break;
        }
        a = (a * ratio).min(max_a);
        spec.absorption = 1.0 - (-a).exp();
        sim = dc_blocked(simulate_shoebox_ir(&spec, target_t60, max_length)?);
        measured = estimate_t60(&sim.ir).ok();
    }
    let mut warnings = sim.warnings;
    warnings.extend(choice.warnings);
    match measured {
        Some(t) if (t / target_t60 - 1.0).abs() > CALIBRATION_TOL => warnings.push(format!(
            "measured T60 {t:.3} s misses target {target_t60} s (absorption {:.4})",
            spec.absorption
        )),
        None => warnings.push("T60 of simulated IR not measurable".into()),
        _ => {}
    }
    log::debug!(
        "T60 {target_t60}: eyring α = {:.4}, calibrated α = {:.4}, measured {measured:?}",
        choice.alpha,
        spec.absorption
    );
    Ok(CalibratedIr {
        ir: sim.ir,
        absorption: spec.absorption,
        eyring_absorption: choice.alpha,
        measured_t60: measured,
        warnings,
    })
}

/// A room-spec record as read from a JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomRecord {
    pub id: String,
    pub dims: [f64; 3],
    pub source: [f64; 3],
    pub mic: [f64; 3],
    /// Target T60; drawn from [`DATASET_T60_RANGE`] when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t60: Option<f64>,
    /// IR length in seconds; defaults to 1.5 x T60.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_length: Option<f64>,
}

pub fn parse_room_records(text: &str) -> Result<Vec<RoomRecord>, Error> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Batch(format!("room record line {}: {e}", i + 1)))
        })
        .collect()
}

/// Simulate every room record into `out_dir/<id>.wav` (float32) and return
/// an IR manifest. Failures are logged and skipped.
pub fn simulate_batch(
    records: &[RoomRecord],
    out_dir: &Path,
    master_seed: u64,
    t60_range: (f64, f64),
    workers: usize,
) -> Result<Manifest, Error> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = crate::compensate::thread_pool(workers)?;
    let results: Vec<Result<ManifestEntry, Error>> = pool.install(|| {
        records
            .par_iter()
            .map(|rec| {
                let mut rng = item_rng(master_seed, &rec.id);
                let t60 = rec
                    .t60
                    .unwrap_or_else(|| rng.random_range(t60_range.0..=t60_range.1));
                let max_length = rec.max_length.unwrap_or(1.5 * t60);
                let sim = simulate_for_t60(rec.dims, rec.source, rec.mic, t60, max_length)?;
                for w in &sim.warnings {
                    log::warn!("{}: {w}", rec.id);
                }
                let path = out_dir.join(crate::dataset::output_file_name(&rec.id));
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                write_audio(&path, sim.ir.buffer(), SampleFormat::Float32)?;
                let mut entry = ManifestEntry::new(&rec.id, &path, EntryKind::Ir);
                entry.metadata.insert("t60_target".into(), t60.into());
                entry
                    .metadata
                    .insert("absorption".into(), sim.absorption.into());
                entry
                    .metadata
                    .insert("eyring_absorption".into(), sim.eyring_absorption.into());
                if let Some(t) = sim.measured_t60 {
                    entry.metadata.insert("t60_measured".into(), t.into());
                }
                Ok(entry)
            })
            .collect()
    });
    let mut entries = Vec::new();
    for (rec, r) in records.iter().zip(results) {
        match r {
            Ok(e) => entries.push(e),
            Err(e) => log::error!("{}: {e}", rec.id),
        }
    }
    Ok(Manifest::new(entries)?)
}

/// Direct-path arrival in (fractional) samples at 16 kHz.
pub fn direct_path_delay_samples(spec: &RoomSpec) -> f64 {
    spec.source_mic_distance() / spec.speed_of_sound * f64::from(CANONICAL_RATE)
}
