//! Statistical checks of mixture fitting and sampling against known
//! generating distributions.

use rand::seq::SliceRandom;
use rand::Rng;
use roomeq::eq_model::{
    fit_gmm, load_model, log_likelihood, sample_eq, save_model, EqGmm, EqMatrix, EqVector,
};
use roomeq::seed::rng_from_seed;
use roomeq::spectral::{SubBandEq, REFERENCE_INDEX};

fn random_covariance(rng: &mut impl Rng, scale: f64) -> EqMatrix {
    let l = EqMatrix::from_fn(|i, j| {
        if j < i {
            rng.random_range(-0.3..0.3) * scale
        } else if i == j {
            rng.random_range(0.6..1.0) * scale
        } else {
            0.0
        }
    });
    let c = l * l.transpose();
    (c + c.transpose()) * 0.5
}

fn free(eq: &SubBandEq) -> EqVector {
    EqVector::from(eq.free())
}

fn draws(model: &EqGmm, n: usize, seed: u64) -> Vec<SubBandEq> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| sample_eq(model, &mut rng)).collect()
}

fn mean_and_cov(xs: &[SubBandEq]) -> (EqVector, EqMatrix) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(free).fold(EqVector::zeros(), |a, x| a + x) / n;
    let cov = xs
        .iter()
        .map(|x| {
            let d = free(x) - mean;
            d * d.transpose()
        })
        .fold(EqMatrix::zeros(), |a, c| a + c)
        / n;
    (mean, cov)
}

fn three_component_truth() -> EqGmm {
    let mut rng = rng_from_seed(2024);
    let means = vec![
        EqVector::from([-12.0, -8.0, -4.0, 0.0, 2.0, 4.0, 6.0]),
        EqVector::from([10.0, 12.0, 6.0, 3.0, -3.0, -6.0, -10.0]),
        EqVector::from([0.0, 5.0, -10.0, 10.0, -5.0, 8.0, 0.0]),
    ];
    let covs = (0..3).map(|_| random_covariance(&mut rng, 1.0)).collect();
    EqGmm::new(vec![0.5, 0.3, 0.2], means, covs).unwrap()
}

/// Component permutation of `fit` closest to `truth` by summed mean distance.
fn best_match(truth: &EqGmm, fit: &EqGmm) -> [usize; 3] {
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let (tm, fm) = (truth.means(), fit.means());
    *perms
        .iter()
        .min_by(|a, b| {
            let cost = |p: &[usize; 3]| (0..3).map(|i| (tm[i] - fm[p[i]]).norm()).sum::<f64>();
            cost(a).total_cmp(&cost(b))
        })
        .unwrap()
}

#[test]
fn single_gaussian_is_recovered() {
    let mut rng = rng_from_seed(7);
    let mean = EqVector::from([3.0, -2.0, 1.5, 0.5, -1.0, -4.0, -8.0]);
    let cov = random_covariance(&mut rng, 1.0);
    let truth = EqGmm::new(vec![1.0], vec![mean], vec![cov]).unwrap();
    let data = draws(&truth, 10_000, 11);
    let fit = fit_gmm(&data, 1, 3).unwrap();
    let (m, c) = (fit.model.means()[0], fit.model.covariances()[0]);
    assert!((m - mean).amax() < 0.05, "{}", (m - mean).amax());
    assert!(
        (c - cov).norm() / cov.norm() < 0.05,
        "{}",
        (c - cov).norm() / cov.norm()
    );
}

#[test]
fn well_separated_mixture_is_recovered() {
    let truth = three_component_truth();
    let data = draws(&truth, 9000, 5);
    let fit = fit_gmm(&data, 3, 42).unwrap();
    let p = best_match(&truth, &fit.model);
    for i in 0..3 {
        let dm = (truth.means()[i] - fit.model.means()[p[i]]).amax();
        let dw = (truth.weights()[i] - fit.model.weights()[p[i]]).abs();
        assert!(dm < 0.1, "component {i}: mean off by {dm}");
        assert!(dw < 0.02, "component {i}: weight off by {dw}");
    }
    for w in fit.trace.windows(2) {
        assert!(
            w[1] >= w[0] - 1e-9,
            "log-likelihood fell: {} -> {}",
            w[0],
            w[1]
        );
    }
}

#[test]
fn sampling_matches_model_moments() {
    let mut rng = rng_from_seed(99);
    let mean = EqVector::from([1.0, 2.0, -3.0, 0.0, 4.0, -1.0, 6.0]);
    let cov = random_covariance(&mut rng, 2.0);
    let model = EqGmm::new(vec![1.0], vec![mean], vec![cov]).unwrap();
    let xs = draws(&model, 100_000, 1);
    assert!(xs.iter().all(|x| x.gains_db()[REFERENCE_INDEX] == 0.0));
    let (m, c) = mean_and_cov(&xs);
    assert!((m - mean).amax() < 0.05);
    assert!((c - cov).norm() / cov.norm() < 0.05);
}

#[test]
fn held_out_data_prefers_generating_model() {
    let truth = three_component_truth();
    let shifted = EqGmm::new(
        truth.weights(),
        truth.means().iter().map(|m| m.add_scalar(1.5)).collect(),
        truth.covariances(),
    )
    .unwrap();
    let held_out = draws(&truth, 2000, 77);
    let avg = |m: &EqGmm| held_out.iter().map(|x| log_likelihood(m, x)).sum::<f64>() / 2000.0;
    assert!(avg(&truth) > avg(&shifted));
}

#[test]
fn fit_is_deterministic_and_order_free() {
    let truth = three_component_truth();
    let mut data = draws(&truth, 1500, 8);
    let a = fit_gmm(&data, 3, 17).unwrap();
    let b = fit_gmm(&data, 3, 17).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
    data.shuffle(&mut rng_from_seed(1));
    let c = fit_gmm(&data, 3, 17).unwrap();
    assert_eq!(a.model, c.model);
}

#[test]
fn saved_model_samples_identically() {
    let truth = three_component_truth();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&truth, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(draws(&truth, 50, 3), draws(&back, 50, 3));
}
