//! Linear convolution, direct and FFT-based.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Full linear convolution by the definition. Output length `a + b - 1`.
pub fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &y) in out[i..].iter_mut().zip(b) {
            *o += x * y;
        }
    }
    out
}

/// Full linear convolution through a single zero-padded complex FFT.
pub fn convolve_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    // Both real inputs share one complex transform: a in re, b in im.
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (c, &x) in buf.iter_mut().zip(a) {
        c.re = x;
    }
    for (c, &y) in buf.iter_mut().zip(b) {
        c.im = y;
    }
    fwd.process(&mut buf);

    let mut prod = vec![Complex::new(0.0, 0.0); n];
    for k in 0..n {
        let z = buf[k];
        let zc = buf[(n - k) % n].conj();
        let fa = (z + zc) * 0.5;
        let fb = (z - zc) * Complex::new(0.0, -0.5);
        prod[k] = fa * fb;
    }
    inv.process(&mut prod);
    let scale = 1.0 / n as f64;
    prod[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Full linear convolution, picking the cheaper route.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let short = a.len().min(b.len());
    if short <= 64 || a.len().saturating_mul(b.len()) <= 1 << 18 {
        convolve_direct(a, b)
    } else {
        convolve_fft(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn direct_small_case() {
        assert_eq!(
            convolve_direct(&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.5]),
            vec![0.0, 1.0, 2.5, 4.0, 1.5]
        );
        assert!(convolve_direct(&[], &[1.0]).is_empty());
    }

    #[test]
    fn fft_matches_direct() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (n, m) in [(1, 1), (7, 300), (1000, 511), (4097, 33)] {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = convolve_direct(&a, &b);
            let f = convolve_fft(&a, &b);
            assert_eq!(d.len(), f.len());
            for (x, y) in d.iter().zip(&f) {
                assert!((x - y).abs() < 1e-10, "{n}x{m}: {x} vs {y}");
            }
        }
    }
}
