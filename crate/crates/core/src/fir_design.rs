//! Linear-phase FIR compensation filters from 8-point EQ requests.
//!
//! Design is the window method on a dense frequency grid: the 8 requested dB
//! gains are interpolated over log-frequency onto the 257-bin grid, given a
//! linear phase of 255 samples, inverse transformed, cut to 511 taps and
//! Hamming windowed.
//!
//! Windowing and the 512-point analysis both smear the response by about two
//! bins, which matters at 62.5 Hz and 125 Hz (bins 2 and 4). Before the taps
//! are produced the dense grid is therefore pre-corrected: a damped
//! Gauss-Newton loop adjusts the grid until the filter, as measured by
//! [`crate::spectral::extract_subband_eq`], hits the requested relative gains.
//! The map from grid to measured frame spectra is linear, so the loop works on
//! an exact precomputed matrix rather than re-running the analysis.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{SMatrix, SVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::audio_io::AudioBuffer;
use crate::conv::{convolve_direct, convolve_fft};
use crate::spectral::{
    FramePlan, EQ_BINS, EQ_FREQUENCIES_HZ, FRAME_LEN, NUM_BINS, REFERENCE_INDEX,
};

pub const NUM_TAPS: usize = 511;
/// Delay of the linear-phase filter, `(NUM_TAPS - 1) / 2`.
pub const GROUP_DELAY: usize = (NUM_TAPS - 1) / 2;
/// Requests are clamped into `[-GAIN_CLAMP_DB, GAIN_CLAMP_DB]` before design.
pub const GAIN_CLAMP_DB: f64 = 30.0;
/// Signals longer than this are filtered through the FFT.
pub const FFT_THRESHOLD: usize = 4096;

const CORRECTION_TOL_DB: f64 = 1e-6;
const CORRECTION_MAX_ITER: usize = 60;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum FirError {
    #[error("non-finite gain at index {0}")]
    NonFinite(usize),
    #[error("empty signal")]
    EmptySignal,
    #[error("invalid taps: {0}")]
    InvalidTaps(String),
}

/// A 511-tap symmetric (type I) FIR filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    taps: Vec<f64>,
    design_gains_db: [f64; 8],
    clamped: bool,
}

impl FirFilter {
    /// Wrap externally designed taps; they must be 511 long and symmetric.
    pub fn from_taps(taps: Vec<f64>) -> Result<Self, FirError> {
        if taps.len() != NUM_TAPS {
            return Err(FirError::InvalidTaps(format!(
                "{} taps, expected {NUM_TAPS}",
                taps.len()
            )));
        }
        if let Some(i) = (0..NUM_TAPS).find(|&i| (taps[i] - taps[NUM_TAPS - 1 - i]).abs() >= 1e-12)
        {
            return Err(FirError::InvalidTaps(format!("asymmetric at tap {i}")));
        }
        Ok(Self {
            taps,
            design_gains_db: [0.0; 8],
            clamped: false,
        })
    }

    /// Pure delay of [`GROUP_DELAY`] samples.
    pub fn identity() -> Self {
        let mut taps = vec![0.0; NUM_TAPS];
        taps[GROUP_DELAY] = 1.0;
        Self {
            taps,
            design_gains_db: [0.0; 8],
            clamped: false,
        }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// The (clamped) gains this filter was designed for.
    pub fn design_gains_db(&self) -> &[f64; 8] {
        &self.design_gains_db
    }

    /// Whether any requested gain was clamped to ±30 dB.
    pub fn clamped(&self) -> bool {
        self.clamped
    }

    pub fn group_delay(&self) -> usize {
        GROUP_DELAY
    }

    /// Plain-text dump: one tap per line with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.taps.len() * 24);
        for t in &self.taps {
            out.push_str(&format!("{t:.16e}\n"));
        }
        out
    }
}

fn clamp_gains(gains: &[f64; 8]) -> Result<([f64; 8], bool), FirError> {
    if let Some(i) = gains.iter().position(|g| !g.is_finite()) {
        return Err(FirError::NonFinite(i));
    }
    let clamped = gains.map(|g| g.clamp(-GAIN_CLAMP_DB, GAIN_CLAMP_DB));
    Ok((clamped, clamped != *gains))
}

fn interpolate_db(gains: &[f64; 8]) -> Vec<f64> {
    let log_f = EQ_FREQUENCIES_HZ.map(f64::ln);
    (0..NUM_BINS)
        .map(|k| {
            let f = k as f64 * crate::spectral::BIN_WIDTH_HZ;
            if f <= EQ_FREQUENCIES_HZ[0] {
                return gains[0];
            }
            if f >= EQ_FREQUENCIES_HZ[7] {
                return gains[7];
            }
            let lf = f.ln();
            let i = log_f
                .iter()
                .rposition(|&x| x <= lf)
                .expect("f above first point");
            let t = (lf - log_f[i]) / (log_f[i + 1] - log_f[i]);
            gains[i] + t * (gains[i + 1] - gains[i])
        })
        .collect()
}

/// Dense linear-amplitude target on the 257-bin grid.
///
/// Gains are clamped to ±30 dB, interpolated linearly in dB over
/// log-frequency between 62.5 Hz and 8 kHz and held constant outside.
pub fn interpolate_desired_response(gains: &[f64; 8]) -> Result<Vec<f64>, FirError> {
    let (g, _) = clamp_gains(gains)?;
    Ok(interpolate_db(&g)
        .into_iter()
        .map(|db| 10f64.powf(db / 20.0))
        .collect())
}

fn hamming(n: usize) -> Vec<f64> {
    let m = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / m).cos())
        .collect()
}

/// Window-method taps for a zero-phase amplitude grid.
fn window_method_taps(amplitude: &[f64]) -> Vec<f64> {
    debug_assert_eq!(amplitude.len(), NUM_BINS);
    let mut spec = vec![Complex::new(0.0, 0.0); FRAME_LEN];
    for (k, &a) in amplitude.iter().enumerate() {
        let phase = -2.0 * PI * (k * GROUP_DELAY) as f64 / FRAME_LEN as f64;
        spec[k] = Complex::from_polar(a, phase);
    }
    // Bin 256 carries phase e^{-jπ·255} = -1, so it stays real.
    spec[FRAME_LEN / 2].im = 0.0;
    for k in 1..FRAME_LEN / 2 {
        spec[FRAME_LEN - k] = spec[k].conj();
    }
    FftPlanner::new()
        .plan_fft_inverse(FRAME_LEN)
        .process(&mut spec);
    let window = hamming(NUM_TAPS);
    let mut taps: Vec<f64> = spec[..NUM_TAPS]
        .iter()
        .zip(&window)
        .map(|(c, w)| c.re / FRAME_LEN as f64 * w)
        .collect();
    for i in 0..GROUP_DELAY {
        let j = NUM_TAPS - 1 - i;
        let avg = 0.5 * (taps[i] + taps[j]);
        taps[i] = avg;
        taps[j] = avg;
    }
    taps
}

/// Measured frame spectra at the 8 EQ bins, as a linear function of the
/// amplitude grid: entry `[(frame * 8 + point) * NUM_BINS + k]`.
struct MeasurementMap {
    frames: usize,
    coeffs: Vec<Complex<f64>>,
}

fn measurement_map() -> &'static MeasurementMap {
    static MAP: OnceLock<MeasurementMap> = OnceLock::new();
    MAP.get_or_init(|| {
        let plan = FramePlan::new();
        let mut unit = vec![0.0; NUM_BINS];
        let mut columns = Vec::with_capacity(NUM_BINS);
        for k in 0..NUM_BINS {
            unit[k] = 1.0;
            columns.push(plan.frame_spectra(&window_method_taps(&unit)));
            unit[k] = 0.0;
        }
        let frames = columns[0].len();
        let mut coeffs = vec![Complex::new(0.0, 0.0); frames * 8 * NUM_BINS];
        for (k, col) in columns.iter().enumerate() {
            for (f, spectrum) in col.iter().enumerate() {
                for (p, &bin) in EQ_BINS.iter().enumerate() {
                    coeffs[(f * 8 + p) * NUM_BINS + k] = spectrum[bin];
                }
            }
        }
        MeasurementMap { frames, coeffs }
    })
}

impl MeasurementMap {
    fn row(&self, frame: usize, point: usize) -> &[Complex<f64>] {
        let start = (frame * 8 + point) * NUM_BINS;
        &self.coeffs[start..start + NUM_BINS]
    }

    fn frame_values(&self, amplitude: &[f64]) -> Vec<Complex<f64>> {
        (0..self.frames * 8)
            .map(|r| {
                self.coeffs[r * NUM_BINS..(r + 1) * NUM_BINS]
                    .iter()
                    .zip(amplitude)
                    .map(|(c, &a)| c * a)
                    .sum()
            })
            .collect()
    }

    /// Measured relative EQ (dB) and the per-point accumulated magnitudes.
    fn measure(&self, amplitude: &[f64]) -> (Vec<Complex<f64>>, [f64; 8], [f64; 8]) {
        let x = self.frame_values(amplitude);
        let mut mag = [0.0; 8];
        for f in 0..self.frames {
            for (p, m) in mag.iter_mut().enumerate() {
                *m += x[f * 8 + p].norm();
            }
        }
        let db = mag.map(|m| 20.0 * m.max(1e-300).log10());
        let eq = db.map(|d| d - db[REFERENCE_INDEX]);
        (x, mag, eq)
    }
}

type Jacobian = SMatrix<f64, 7, NUM_BINS>;

/// Adjust the amplitude grid so the measured relative EQ matches `target`.
fn correct_grid(initial: Vec<f64>, target: &[f64; 8]) -> Vec<f64> {
    let map = measurement_map();
    let free: Vec<usize> = (0..8).filter(|&p| p != REFERENCE_INDEX).collect();
    let residual = |eq: &[f64; 8]| -> SVector<f64, 7> {
        SVector::<f64, 7>::from_fn(|i, _| eq[free[i]] - target[free[i]])
    };

    let mut amp = initial;
    let (mut x, mut mag, eq) = map.measure(&amp);
    let mut r = residual(&eq);
    let mut damping = 1e-9;
    for _ in 0..CORRECTION_MAX_ITER {
        if r.amax() < CORRECTION_TOL_DB {
            break;
        }
        // d(sum_f |X_fp|)/d a_k
        let mut dmag = vec![[0.0; NUM_BINS]; 8];
        for f in 0..map.frames {
            for p in 0..8 {
                let xv = x[f * 8 + p];
                let n = xv.norm().max(1e-300);
                let u = xv.conj() / n;
                for (d, c) in dmag[p].iter_mut().zip(map.row(f, p)) {
                    *d += (u * c).re;
                }
            }
        }
        let scale = 20.0 / std::f64::consts::LN_10;
        let jac = Jacobian::from_fn(|i, k| {
            let p = free[i];
            scale * (dmag[p][k] / mag[p] - dmag[REFERENCE_INDEX][k] / mag[REFERENCE_INDEX])
        });
        let jjt = jac * jac.transpose();
        let base = jjt.trace() / 7.0;
        let mut accepted = false;
        for _ in 0..12 {
            let mut sys = jjt;
            for i in 0..7 {
                sys[(i, i)] += damping * base;
            }
            let Some(chol) = sys.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let step = jac.transpose() * chol.solve(&r);
            let trial: Vec<f64> = amp.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
            let (tx, tmag, teq) = map.measure(&trial);
            let tr = residual(&teq);
            if tr.amax() < r.amax() && tr.iter().all(|v| v.is_finite()) {
                amp = trial;
                x = tx;
                mag = tmag;
                r = tr;
                damping = (damping * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 10.0;
        }
        if !accepted {
            log::debug!("grid correction stalled at {:.3e} dB", r.amax());
            break;
        }
    }
    amp
}

/// Design a 511-tap linear-phase filter whose measured sub-band EQ matches
/// the requested gains relative to the 1 kHz entry.
pub fn design_eq_filter(gains: &[f64; 8]) -> Result<FirFilter, FirError> {
    let (g, clamped) = clamp_gains(gains)?;
    if clamped {
        log::warn!("EQ request {gains:?} clamped to ±{GAIN_CLAMP_DB} dB");
    }
    let target = g.map(|x| x - g[REFERENCE_INDEX]);
    let grid: Vec<f64> = interpolate_db(&g)
        .into_iter()
        .map(|db| 10f64.powf(db / 20.0))
        .collect();
    let grid = if target.iter().all(|&t| t == 0.0) {
        grid
    } else {
        correct_grid(grid, &target)
    };
    Ok(FirFilter {
        taps: window_method_taps(&grid),
        design_gains_db: g,
        clamped,
    })
}

/// Filter a signal. The full convolution has `n + 510` samples; with
/// `trim_delay` the first 255 are dropped so the filter adds no delay.
pub fn apply_fir(
    signal: &AudioBuffer,
    filter: &FirFilter,
    trim_delay: bool,
) -> Result<AudioBuffer, FirError> {
    if signal.is_empty() {
        return Err(FirError::EmptySignal);
    }
    let full = if signal.len() > FFT_THRESHOLD {
        convolve_fft(signal.samples(), filter.taps())
    } else {
        convolve_direct(signal.samples(), filter.taps())
    };
    let out = if trim_delay {
        full[GROUP_DELAY..].to_vec()
    } else {
        full
    };
    Ok(signal.with_samples(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{extract_subband_eq, ImpulseResponse};
    use rand::{Rng, SeedableRng};

    fn measured(filter: &FirFilter) -> [f64; 8] {
        let ir = ImpulseResponse::from_samples("fir", filter.taps().to_vec()).unwrap();
        *extract_subband_eq(&ir).unwrap().gains_db()
    }

    #[test]
    fn flat_grid_is_unity() {
        let g = interpolate_desired_response(&[0.0; 8]).unwrap();
        assert_eq!(g.len(), NUM_BINS);
        assert!(g.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn uniform_gain_grid() {
        let g = interpolate_desired_response(&[6.0; 8]).unwrap();
        assert!(g.iter().all(|&a| (a - 1.9953).abs() < 1e-4));
    }

    #[test]
    fn log_frequency_interpolation_at_bin_3() {
        let g = interpolate_desired_response(&[6.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let want_db = 6.0 * (125f64.ln() - 93.75f64.ln()) / (125f64.ln() - 62.5f64.ln());
        assert!((want_db - 2.49).abs() < 0.01);
        assert!((g[3] - 10f64.powf(want_db / 20.0)).abs() < 1e-12);
        // constant below 62.5 Hz, including DC
        assert_eq!(g[0], g[2]);
    }

    #[test]
    fn non_finite_gain_is_rejected() {
        let mut g = [0.0; 8];
        g[3] = f64::NAN;
        assert_eq!(design_eq_filter(&g), Err(FirError::NonFinite(3)));
        assert_eq!(
            interpolate_desired_response(&g),
            Err(FirError::NonFinite(3))
        );
    }

    #[test]
    fn clamping_is_recorded() {
        let f = design_eq_filter(&[40.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -35.0]).unwrap();
        assert!(f.clamped());
        assert_eq!(f.design_gains_db()[0], 30.0);
        assert_eq!(f.design_gains_db()[7], -30.0);
        assert!(!design_eq_filter(&[1.0; 8]).unwrap().clamped());
    }

    #[test]
    fn flat_design_is_near_delta() {
        let f = design_eq_filter(&[0.0; 8]).unwrap();
        assert_eq!(f.taps().len(), NUM_TAPS);
        assert!((f.taps()[GROUP_DELAY] - 1.0).abs() < 1e-9);
        let total: f64 = f.taps().iter().map(|t| t * t).sum();
        let off = total - f.taps()[GROUP_DELAY].powi(2);
        assert!(off < 0.01 * total);
        assert!(measured(&f).iter().all(|g| g.abs() < 0.1));
    }

    #[test]
    fn low_shelf_request() {
        let f = design_eq_filter(&[6.0, 6.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let m = measured(&f);
        for g in &m[0..3] {
            assert!((4.0..=8.0).contains(g), "{m:?}");
        }
        for g in &m[5..8] {
            assert!(g.abs() <= 1.0, "{m:?}");
        }
    }

    #[test]
    fn taps_are_symmetric() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let g: [f64; 8] = std::array::from_fn(|_| rng.random_range(-12.0..12.0));
            let f = design_eq_filter(&g).unwrap();
            for i in 0..NUM_TAPS {
                assert!((f.taps()[i] - f.taps()[NUM_TAPS - 1 - i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_scaled_request_is_flat() {
        let g = [7.0, -3.0, 2.0, 9.0, 0.0, -11.0, 4.0, 1.0].map(|x: f64| x * 0.0);
        assert!(measured(&design_eq_filter(&g).unwrap())
            .iter()
            .all(|x| x.abs() < 0.1));
    }

    #[test]
    fn delta_filter_with_trim_is_identity() {
        let signal = AudioBuffer::canonical((0..300).map(|i| (i as f64 * 0.1).sin()).collect());
        let out = apply_fir(&signal, &FirFilter::identity(), true).unwrap();
        assert_eq!(out.len(), 300 + GROUP_DELAY);
        assert_eq!(&out.samples()[..300], signal.samples());
        assert!(out.samples()[300..].iter().all(|&x| x == 0.0));

        let untrimmed = apply_fir(&signal, &FirFilter::identity(), false).unwrap();
        assert_eq!(untrimmed.len(), 300 + NUM_TAPS - 1);
    }

    #[test]
    fn fft_and_direct_paths_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let signal: Vec<f64> = (0..8192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let filter = design_eq_filter(&[3.0, -2.0, 1.0, 0.0, 0.0, 2.0, -1.0, 4.0]).unwrap();
        let fast = apply_fir(&AudioBuffer::canonical(signal.clone()), &filter, false).unwrap();
        let direct = convolve_direct(&signal, filter.taps());
        let max = fast
            .samples()
            .iter()
            .zip(&direct)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-9, "{max}");
    }

    #[test]
    fn empty_signal_is_rejected() {
        assert_eq!(
            apply_fir(
                &AudioBuffer::canonical(vec![]),
                &FirFilter::identity(),
                true
            ),
            Err(FirError::EmptySignal)
        );
    }

    #[test]
    fn from_taps_checks_shape() {
        assert!(FirFilter::from_taps(vec![0.0; 10]).is_err());
        let mut t = vec![0.0; NUM_TAPS];
        t[0] = 1.0;
        assert!(FirFilter::from_taps(t).is_err());
        assert!(FirFilter::from_taps(FirFilter::identity().taps().to_vec()).is_ok());
    }

    #[test]
    fn text_dump_layout() {
        let text = design_eq_filter(&[0.0; 8]).unwrap().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), NUM_TAPS);
        let center: f64 = lines[GROUP_DELAY].parse().unwrap();
        assert!((center - 1.0).abs() < 1e-12);
    }
}
