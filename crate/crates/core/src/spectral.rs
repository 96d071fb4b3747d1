//! Magnitude response, sub-band EQ and reverberation time of impulse responses.
//!
//! The magnitude response is a Welch-style estimate: the IR is padded by half
//! a frame on both sides, cut into 512-sample periodic-Hann frames at a hop of
//! 256, and the per-frame magnitudes are accumulated. The periodic Hann window
//! overlap-adds to exactly one at this hop, so a unit impulse reads 0 dB in
//! every bin wherever it sits in the buffer.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioBuffer;
use crate::CANONICAL_RATE;

pub const FRAME_LEN: usize = 512;
pub const HOP: usize = FRAME_LEN / 2;
pub const NUM_BINS: usize = FRAME_LEN / 2 + 1;
pub const BIN_WIDTH_HZ: f64 = CANONICAL_RATE as f64 / FRAME_LEN as f64;
pub const DB_FLOOR: f64 = -120.0;

/// The 8 EQ sample points.
pub const EQ_FREQUENCIES_HZ: [f64; 8] = [62.5, 125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0];
/// Their bins at 16 kHz / 512 points.
pub const EQ_BINS: [usize; 8] = [2, 4, 8, 16, 32, 64, 128, 256];
/// Index of the 1 kHz reference point.
pub const REFERENCE_INDEX: usize = 4;
pub const FREE_DIM: usize = 7;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SpectralError {
    #[error("impulse response {0:?} is empty")]
    Empty(String),
    #[error("impulse response {0:?} has no nonzero sample")]
    Silent(String),
    #[error("expected {expected} Hz, got {actual} Hz")]
    WrongRate { expected: u32, actual: u32 },
    #[error("unreliable T60 estimate: {0}")]
    UnreliableT60(String),
}

/// A labelled impulse response. At least one sample is nonzero.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseResponse {
    id: String,
    buffer: AudioBuffer,
}

impl ImpulseResponse {
    pub fn new(id: impl Into<String>, buffer: AudioBuffer) -> Result<Self, SpectralError> {
        let id = id.into();
        if buffer.is_empty() {
            return Err(SpectralError::Empty(id));
        }
        if buffer.samples().iter().all(|&x| x == 0.0) {
            return Err(SpectralError::Silent(id));
        }
        Ok(Self { id, buffer })
    }

    /// Convenience constructor at 16 kHz.
    pub fn from_samples(id: impl Into<String>, samples: Vec<f64>) -> Result<Self, SpectralError> {
        Self::new(id, AudioBuffer::canonical(samples))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn buffer(&self) -> &AudioBuffer {
        &self.buffer
    }

    pub fn samples(&self) -> &[f64] {
        self.buffer.samples()
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn into_buffer(self) -> AudioBuffer {
        self.buffer
    }
}

/// One-sided magnitude spectrum in dB on the 257-bin grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumDb {
    gains_db: Vec<f64>,
}

impl SpectrumDb {
    pub fn gains_db(&self) -> &[f64] {
        &self.gains_db
    }

    pub fn bin_width_hz(&self) -> f64 {
        BIN_WIDTH_HZ
    }
}

/// 8 gains in dB at [`EQ_FREQUENCIES_HZ`], relative to the 1 kHz entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubBandEq {
    gains_db: [f64; 8],
}

impl SubBandEq {
    /// Reference absolute gains to their 1 kHz entry.
    pub fn from_absolute(gains_db: [f64; 8]) -> Self {
        let reference = gains_db[REFERENCE_INDEX];
        let mut g = gains_db.map(|x| x - reference);
        g[REFERENCE_INDEX] = 0.0;
        Self { gains_db: g }
    }

    /// Rebuild from the 7 free entries, inserting 0 at the reference slot.
    pub fn from_free(free: [f64; FREE_DIM]) -> Self {
        let mut g = [0.0; 8];
        let mut it = free.into_iter();
        for (i, slot) in g.iter_mut().enumerate() {
            if i != REFERENCE_INDEX {
                *slot = it.next().expect("7 free entries");
            }
        }
        Self { gains_db: g }
    }

    pub fn flat() -> Self {
        Self { gains_db: [0.0; 8] }
    }

    pub fn gains_db(&self) -> &[f64; 8] {
        &self.gains_db
    }

    /// The 7 entries other than the 1 kHz reference.
    pub fn free(&self) -> [f64; FREE_DIM] {
        let mut out = [0.0; FREE_DIM];
        let mut j = 0;
        for (i, &g) in self.gains_db.iter().enumerate() {
            if i != REFERENCE_INDEX {
                out[j] = g;
                j += 1;
            }
        }
        out
    }

    /// Entrywise `self - other`.
    pub fn minus(&self, other: &SubBandEq) -> [f64; 8] {
        std::array::from_fn(|i| self.gains_db[i] - other.gains_db[i])
    }
}

pub(crate) struct FramePlan {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl FramePlan {
    pub(crate) fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FRAME_LEN);
        Self {
            fft,
            window: hann_periodic(FRAME_LEN),
        }
    }

    /// Complex one-sided spectra of every analysis frame.
    pub(crate) fn frame_spectra(&self, samples: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let padded_len = (HOP + samples.len() + HOP).div_ceil(HOP) * HOP;
        let padded_len = padded_len.max(FRAME_LEN);
        let mut padded = vec![0.0; padded_len];
        padded[HOP..HOP + samples.len()].copy_from_slice(samples);

        let mut frames = Vec::with_capacity(padded_len / HOP);
        let mut scratch = vec![Complex::new(0.0, 0.0); FRAME_LEN];
        let mut start = 0;
        while start + FRAME_LEN <= padded_len {
            for ((c, &x), &w) in scratch
                .iter_mut()
                .zip(&padded[start..start + FRAME_LEN])
                .zip(&self.window)
            {
                *c = Complex::new(x * w, 0.0);
            }
            self.fft.process(&mut scratch);
            frames.push(scratch[..NUM_BINS].to_vec());
            start += HOP;
        }
        frames
    }
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

pub(crate) fn amplitude_to_db(a: f64) -> f64 {
    if a > 0.0 {
        (20.0 * a.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// Welch-accumulated one-sided magnitude response in dB.
pub fn magnitude_response_db(ir: &ImpulseResponse) -> Result<SpectrumDb, SpectralError> {
    if ir.buffer.sample_rate() != CANONICAL_RATE {
        return Err(SpectralError::WrongRate {
            expected: CANONICAL_RATE,
            actual: ir.buffer.sample_rate(),
        });
    }
    let frames = FramePlan::new().frame_spectra(ir.samples());
    let mut acc = vec![0.0; NUM_BINS];
    for frame in &frames {
        for (a, c) in acc.iter_mut().zip(frame) {
            *a += c.norm();
        }
    }
    Ok(SpectrumDb {
        gains_db: acc.into_iter().map(amplitude_to_db).collect(),
    })
}

/// Read the 8 EQ sample points off a dB spectrum with the given bin spacing.
///
/// Points that fall exactly on a bin are read directly; otherwise the value is
/// interpolated linearly over log-frequency between the neighbouring bins.
pub fn sample_points(gains_db: &[f64], bin_width_hz: f64) -> [f64; 8] {
    std::array::from_fn(|i| {
        let pos = EQ_FREQUENCIES_HZ[i] / bin_width_hz;
        let lo = pos.floor() as usize;
        if (pos - pos.round()).abs() < 1e-9 {
            let b = pos.round() as usize;
            return gains_db[b.min(gains_db.len() - 1)];
        }
        let lo = lo.min(gains_db.len() - 1);
        let hi = (lo + 1).min(gains_db.len() - 1);
        if lo == 0 || lo == hi {
            return gains_db[lo];
        }
        let (f_lo, f_hi) = (lo as f64 * bin_width_hz, hi as f64 * bin_width_hz);
        let t = (EQ_FREQUENCIES_HZ[i].ln() - f_lo.ln()) / (f_hi.ln() - f_lo.ln());
        gains_db[lo] + t * (gains_db[hi] - gains_db[lo])
    })
}

/// Sub-band EQ of an impulse response, referenced to 1 kHz.
pub fn extract_subband_eq(ir: &ImpulseResponse) -> Result<SubBandEq, SpectralError> {
    let spectrum = magnitude_response_db(ir)?;
    Ok(SubBandEq::from_absolute(sample_points(
        spectrum.gains_db(),
        spectrum.bin_width_hz(),
    )))
}

const T60_FIT_START_DB: f64 = -5.0;
const T60_FIT_END_DB: f64 = -35.0;
const T60_MIN_SEGMENT_SECS: f64 = 0.010;

/// Schroeder energy decay curve in dB, normalized to 0 dB at the start.
pub fn energy_decay_curve_db(samples: &[f64]) -> Vec<f64> {
    let mut edc = vec![0.0; samples.len()];
    let mut acc = 0.0;
    for (e, &x) in edc.iter_mut().zip(samples).rev() {
        acc += x * x;
        *e = acc;
    }
    let total = acc;
    edc.into_iter()
        .map(|e| {
            if e > 0.0 && total > 0.0 {
                10.0 * (e / total).log10()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

/// Reverberation time from a line fit to the -5..-35 dB part of the decay curve.
pub fn estimate_t60(ir: &ImpulseResponse) -> Result<f64, SpectralError> {
    let fs = f64::from(ir.buffer.sample_rate());
    let edc = energy_decay_curve_db(ir.samples());
    let start = edc.iter().position(|&d| d <= T60_FIT_START_DB);
    let end = edc.iter().position(|&d| d <= T60_FIT_END_DB);
    let (start, end) = match (start, end) {
        (Some(s), Some(e)) => (s, e),
        _ => {
            return Err(SpectralError::UnreliableT60(
                "decay never reaches -35 dB".into(),
            ))
        }
    };
    // Points past the end of a truncated tail read -inf; stop before them.
    let end = edc[start..end]
        .iter()
        .position(|d| !d.is_finite())
        .map_or(end, |p| start + p);
    let min_len = (T60_MIN_SEGMENT_SECS * fs).ceil() as usize;
    if end <= start || end - start < min_len {
        return Err(SpectralError::UnreliableT60(format!(
            "decay segment of {} samples is shorter than {} ms",
            end.saturating_sub(start),
            T60_MIN_SEGMENT_SECS * 1e3
        )));
    }
    let n = (end - start) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in edc[start..end].iter().enumerate() {
        let x = i as f64 / fs;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    if !(slope < 0.0) {
        return Err(SpectralError::UnreliableT60("non-decaying fit".into()));
    }
    Ok(60.0 / slope.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn delta(len: usize, at: usize) -> ImpulseResponse {
        let mut s = vec![0.0; len];
        s[at] = 1.0;
        ImpulseResponse::from_samples("delta", s).unwrap()
    }

    #[test]
    fn unit_impulse_is_flat() {
        let spec = magnitude_response_db(&delta(512, 0)).unwrap();
        assert_eq!(spec.gains_db().len(), NUM_BINS);
        let max = spec.gains_db().iter().cloned().fold(f64::MIN, f64::max);
        let min = spec.gains_db().iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 0.01);
        assert!(max.abs() < 1e-9);
    }

    #[test]
    fn all_zero_ir_is_rejected() {
        assert_eq!(
            ImpulseResponse::from_samples("z", vec![0.0; 512]),
            Err(SpectralError::Silent("z".into()))
        );
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let ir = ImpulseResponse::new("r", AudioBuffer::new(vec![1.0], 44100).unwrap()).unwrap();
        assert!(matches!(
            magnitude_response_db(&ir),
            Err(SpectralError::WrongRate { .. })
        ));
    }

    #[test]
    fn one_pole_lowpass_matches_analytic_curve() {
        let a: f64 = 0.9;
        let samples: Vec<f64> = (0..512).map(|n| (1.0 - a) * a.powi(n)).collect();
        let ir = ImpulseResponse::from_samples("lp", samples).unwrap();
        let spec = magnitude_response_db(&ir).unwrap();
        for k in 2..NUM_BINS {
            let w = 2.0 * PI * k as f64 / FRAME_LEN as f64;
            let denom = ((1.0 - a * w.cos()).powi(2) + (a * w.sin()).powi(2)).sqrt();
            let analytic = 20.0 * ((1.0 - a) / denom).log10();
            let got = spec.gains_db()[k];
            assert!((got - analytic).abs() < 0.5, "bin {k}: {got} vs {analytic}");
        }
    }

    #[test]
    fn sample_point_bins() {
        for (f, b) in EQ_FREQUENCIES_HZ.iter().zip(EQ_BINS) {
            assert_eq!(f / BIN_WIDTH_HZ, b as f64);
        }
        let ramp: Vec<f64> = (0..NUM_BINS).map(|k| k as f64).collect();
        assert_eq!(
            sample_points(&ramp, BIN_WIDTH_HZ),
            EQ_BINS.map(|b| b as f64)
        );
    }

    #[test]
    fn sample_points_interpolate_off_grid() {
        // 44.1 kHz / 512: 62.5 Hz falls between bins 0.72 and 1.45.
        let width = 44100.0 / 512.0;
        let flat = vec![3.0; NUM_BINS];
        assert!(sample_points(&flat, width).iter().all(|&g| g == 3.0));
        let log_ramp: Vec<f64> = (0..NUM_BINS)
            .map(|k| if k == 0 { 0.0 } else { (k as f64 * width).ln() })
            .collect();
        let got = sample_points(&log_ramp, width);
        for (g, f) in got.iter().zip(EQ_FREQUENCIES_HZ).skip(1) {
            assert!((g - f.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_impulse_eq_is_zero() {
        let eq = extract_subband_eq(&delta(512, 0)).unwrap();
        assert!(eq.gains_db().iter().all(|g| g.abs() < 0.01));
    }

    /// RBJ low shelf, evaluated both as a filter and analytically.
    fn low_shelf(gain_db: f64, f0: f64) -> ([f64; 3], [f64; 3]) {
        let a = 10f64.powf(gain_db / 40.0);
        let w0 = 2.0 * PI * f0 / 16000.0;
        let alpha = w0.sin() / 2.0 * 2f64.sqrt();
        let c = w0.cos();
        let sa = 2.0 * a.sqrt() * alpha;
        let b = [
            a * ((a + 1.0) - (a - 1.0) * c + sa),
            2.0 * a * ((a - 1.0) - (a + 1.0) * c),
            a * ((a + 1.0) - (a - 1.0) * c - sa),
        ];
        let den = [
            (a + 1.0) + (a - 1.0) * c + sa,
            -2.0 * ((a - 1.0) + (a + 1.0) * c),
            (a + 1.0) + (a - 1.0) * c - sa,
        ];
        (b, den)
    }

    fn biquad_response_db(b: &[f64; 3], a: &[f64; 3], f: f64) -> f64 {
        use rustfft::num_complex::Complex;
        let z1 = Complex::from_polar(1.0, -2.0 * PI * f / 16000.0);
        let z2 = z1 * z1;
        let num = b[0] + z1 * b[1] + z2 * b[2];
        let den = a[0] + z1 * a[1] + z2 * a[2];
        20.0 * (num / den).norm().log10()
    }

    #[test]
    fn low_shelf_eq_matches_filter_response() {
        let (b, a) = low_shelf(6.0, 300.0);
        let mut y = vec![0.0; 4096];
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for (n, out) in y.iter_mut().enumerate() {
            let x0 = if n == 0 { 1.0 } else { 0.0 };
            let y0 = (b[0] * x0 + b[1] * x1 + b[2] * x2 - a[1] * y1 - a[2] * y2) / a[0];
            *out = y0;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
        }
        let eq = extract_subband_eq(&ImpulseResponse::from_samples("shelf", y).unwrap()).unwrap();
        let reference = biquad_response_db(&b, &a, 1000.0);
        for (i, &f) in EQ_FREQUENCIES_HZ.iter().enumerate() {
            let want = biquad_response_db(&b, &a, f) - reference;
            let got = eq.gains_db()[i];
            assert!((got - want).abs() < 0.5, "{f} Hz: {got} vs {want}");
        }
        for i in 0..2 {
            assert!((eq.gains_db()[i] - 6.0).abs() < 1.0);
        }
        for i in 5..8 {
            assert!(eq.gains_db()[i].abs() < 0.5);
        }
    }

    fn decaying_noise(t60: f64, seed: u64) -> ImpulseResponse {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = (2.0 * t60 * 16000.0) as usize;
        let s = (0..len)
            .map(|n| {
                let t = n as f64 / 16000.0;
                rng.sample::<f64, _>(StandardNormal) * (-6.9078 * t / t60).exp()
            })
            .collect();
        ImpulseResponse::from_samples("noise", s).unwrap()
    }

    #[test]
    fn t60_of_exponential_noise() {
        for (t60, seed) in [(0.5, 1), (1.2, 2)] {
            let est = estimate_t60(&decaying_noise(t60, seed)).unwrap();
            assert!((est - t60).abs() / t60 < 0.05, "{t60}: {est}");
        }
    }

    #[test]
    fn t60_of_delta_is_unreliable() {
        assert!(matches!(
            estimate_t60(&delta(1000, 0)),
            Err(SpectralError::UnreliableT60(_))
        ));
    }

    #[test]
    fn free_vector_round_trip() {
        let eq = SubBandEq::from_free([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(eq.gains_db(), &[1.0, 2.0, 3.0, 4.0, 0.0, 5.0, 6.0, 7.0]);
        assert_eq!(eq.free(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    proptest! {
        #[test]
        fn eq_is_scale_invariant(seed in 0u64..1000, c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = (0..800).map(|n| rng.sample::<f64, _>(StandardNormal) * (-(n as f64) / 150.0).exp()).collect();
            let scaled: Vec<f64> = h.iter().map(|x| x * c).collect();
            let a = extract_subband_eq(&ImpulseResponse::from_samples("a", h).unwrap()).unwrap();
            let b = extract_subband_eq(&ImpulseResponse::from_samples("b", scaled).unwrap()).unwrap();
            prop_assert_eq!(a.gains_db()[REFERENCE_INDEX], 0.0);
            prop_assert_eq!(b.gains_db()[REFERENCE_INDEX], 0.0);
            for i in 0..8 {
                prop_assert!((a.gains_db()[i] - b.gains_db()[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn shifted_impulse_has_same_response(shift in 0usize..2048) {
            let a = magnitude_response_db(&delta(2048, 0)).unwrap();
            let b = magnitude_response_db(&delta(2048, shift)).unwrap();
            for (x, y) in a.gains_db().iter().zip(b.gains_db()) {
                prop_assert!((x - y).abs() < 0.01);
            }
        }
    }
}
