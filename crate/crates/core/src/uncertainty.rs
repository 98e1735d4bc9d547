//! Gaussian-mixture moments, the epistemic/aleatoric split of the mixture
//! variance, and the mixture negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::tensor::logsumexp;

/// Smallest component variance the model head will emit.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Floor applied to `log π_k` inside the likelihood.
pub const LOG_WEIGHT_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-target Gaussian mixture: weights `π_k`, means `μ_k`, variances `σ²_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Self {
        assert!(
            weights.len() == means.len() && means.len() == variances.len() && !weights.is_empty(),
            "mixture arrays must share a nonzero length"
        );
        MixtureParams {
            weights,
            means,
            variances,
        }
    }

    pub fn gaussian(mean: f64, variance: f64) -> Self {
        MixtureParams::new(vec![1.0], vec![mean], vec![variance])
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Weights sum to one within 1e-9, each in [0, 1], variances above the floor.
    pub fn is_valid(&self) -> bool {
        let total: f64 = self.weights.iter().sum();
        (total - 1.0).abs() <= 1e-9
            && self.weights.iter().all(|p| (0.0..=1.0).contains(p))
            && self.variances.iter().all(|v| *v >= VARIANCE_FLOOR)
            && self.means.iter().all(|m| m.is_finite())
    }
}

/// Mean and total variance of a mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    pub mean: f64,
    pub var_total: f64,
    pub var_epistemic: f64,
    pub var_aleatoric: f64,
}

/// `(Σ π μ, Σ π σ² + Σ π μ² − (Σ π μ)²)`.
pub fn mixture_moments(m: &MixtureParams) -> (f64, f64) {
    let mean: f64 = m.weights.iter().zip(&m.means).map(|(p, mu)| p * mu).sum();
    let second: f64 = m
        .weights
        .iter()
        .zip(&m.means)
        .zip(&m.variances)
        .map(|((p, mu), v)| p * (v + mu * mu))
        .sum();
    (mean, second - mean * mean)
}

/// Epistemic variance is the weighted spread of component means around the
/// mixture mean; aleatoric variance is the weighted mean of component
/// variances. Their sum is reported as the total.
///
/// The total is formed from the two parts rather than from the raw second
/// moment, so the identity holds to rounding and stays non-negative.
pub fn decompose(m: &MixtureParams) -> UncertaintyDecomposition {
    let mean: f64 = m.weights.iter().zip(&m.means).map(|(p, mu)| p * mu).sum();
    let var_epistemic: f64 = if m.components() == 1 {
        0.0
    } else {
        m.weights.iter().zip(&m.means).map(|(p, mu)| p * (mu - mean).powi(2)).sum()
    };
    let var_aleatoric: f64 = m.weights.iter().zip(&m.variances).map(|(p, v)| p * v).sum();
    UncertaintyDecomposition {
        mean,
        var_total: var_epistemic + var_aleatoric,
        var_epistemic,
        var_aleatoric,
    }
}

/// `−log Σ_k π_k N(y; μ_k, σ²_k)`, evaluated in log space.
pub fn mixture_nll(m: &MixtureParams, y: f64) -> f64 {
    let terms: Vec<f64> = m
        .weights
        .iter()
        .zip(&m.means)
        .zip(&m.variances)
        .map(|((p, mu), v)| log_weight(*p) + log_normal(y, *mu, *v))
        .collect();
    -logsumexp(&terms)
}

pub(crate) fn log_weight(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_WEIGHT_FLOOR)
    } else {
        LOG_WEIGHT_FLOOR
    }
}

pub(crate) fn log_normal(y: f64, mean: f64, variance: f64) -> f64 {
    -HALF_LN_2PI - 0.5 * variance.ln() - (y - mean).powi(2) / (2.0 * variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_mixture(rng: &mut ChaCha8Rng, k: usize) -> MixtureParams {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let weights = crate::tensor::softmax(&raw);
        let means = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
        let variances = (0..k).map(|_| VARIANCE_FLOOR + rng.random_range(0.0..5.0)).collect();
        MixtureParams::new(weights, means, variances)
    }

    fn worked() -> MixtureParams {
        MixtureParams::new(vec![0.3, 0.7], vec![0.0, 2.0], vec![1.0, 4.0])
    }

    #[test]
    fn moments_examples() {
        assert_eq!(mixture_moments(&MixtureParams::gaussian(5.0, 2.0)), (5.0, 2.0));
        let sym = MixtureParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]);
        assert_eq!(mixture_moments(&sym), (0.0, 2.0));
        let (mean, var) = mixture_moments(&worked());
        assert!((mean - 1.4).abs() < 1e-12 && (var - 3.94).abs() < 1e-12);
    }

    #[test]
    fn worked_moments_agree_with_monte_carlo() {
        // 10^7 draws; mean and variance must sit within 3 standard errors.
        let m = worked();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000_000usize;
        let comps: Vec<Normal<f64>> = m
            .means
            .iter()
            .zip(&m.variances)
            .map(|(mu, v)| Normal::new(*mu, v.sqrt()).unwrap())
            .collect();
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let k = if rng.random::<f64>() < m.weights[0] { 0 } else { 1 };
            let y = comps[k].sample(&mut rng);
            s1 += y;
            s2 += y * y;
        }
        let mc_mean = s1 / n as f64;
        let mc_var = s2 / n as f64 - mc_mean * mc_mean;
        let (mean, var) = mixture_moments(&m);
        let se_mean = (var / n as f64).sqrt();
        assert!((mc_mean - mean).abs() < 3.0 * se_mean, "{mc_mean} vs {mean}");
        // Var of the sample variance estimator is (μ4 − σ⁴)/n; bound μ4 by
        // evaluating it for the mixture directly.
        let mu4: f64 = m
            .weights
            .iter()
            .zip(&m.means)
            .zip(&m.variances)
            .map(|((p, mu), v)| {
                let d = mu - mean;
                p * (d.powi(4) + 6.0 * d * d * v + 3.0 * v * v)
            })
            .sum();
        let se_var = ((mu4 - var * var) / n as f64).sqrt();
        assert!((mc_var - var).abs() < 3.0 * se_var, "{mc_var} vs {var}");
    }

    #[test]
    fn decompose_examples() {
        let single = decompose(&MixtureParams::gaussian(3.0, 0.25));
        assert_eq!(single.var_epistemic, 0.0);
        assert_eq!(single.var_aleatoric, 0.25);

        let sym = decompose(&MixtureParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0]));
        assert_eq!((sym.var_epistemic, sym.var_aleatoric), (1.0, 1.0));

        // Two-component formulas written out independently of `decompose`.
        let (p1, m1, m2, v1, v2) = (0.3, 0.0, 2.0, 1.0, 4.0);
        let mu = p1 * m1 + (1.0 - p1) * m2;
        let ep = p1 * (m1 - mu) * (m1 - mu) + (1.0 - p1) * (m2 - mu) * (m2 - mu);
        let al = p1 * v1 + (1.0 - p1) * v2;
        let d = decompose(&worked());
        assert!((d.mean - mu).abs() < 1e-12 && (mu - 1.4).abs() < 1e-12);
        assert!((d.var_epistemic - ep).abs() < 1e-12 && (ep - 0.84).abs() < 1e-12);
        assert!((d.var_aleatoric - al).abs() < 1e-12 && (al - 3.1).abs() < 1e-12);
        assert!((d.var_total - mixture_moments(&worked()).1).abs() < 1e-10);
    }

    #[test]
    fn decomposition_identity_over_random_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let k = rng.random_range(1..=5);
            let m = random_mixture(&mut rng, k);
            let d = decompose(&m);
            let (mean, var) = mixture_moments(&m);
            assert!((d.var_total - var).abs() < 1e-10);
            assert!((d.var_total - (d.var_epistemic + d.var_aleatoric)).abs() < 1e-10);
            assert!((d.mean - mean).abs() < 1e-12);
            assert!(d.var_epistemic >= 0.0 && d.var_aleatoric >= 0.0);
        }
    }

    #[test]
    fn sample_variance_matches_total_within_one_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = MixtureParams::new(vec![0.2, 0.5, 0.3], vec![-2.0, 0.5, 3.0], vec![0.5, 1.0, 2.0]);
        let (_, var) = mixture_moments(&m);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..n {
            let u: f64 = rng.random();
            let k = if u < 0.2 { 0 } else if u < 0.7 { 1 } else { 2 };
            let y = m.means[k] + m.variances[k].sqrt() * std_normal.sample(&mut rng);
            s1 += y;
            s2 += y * y;
        }
        let mc = s2 / n as f64 - (s1 / n as f64).powi(2);
        assert!((mc - var).abs() / var < 0.01, "{mc} vs {var}");
    }

    fn naive_nll(m: &MixtureParams, y: f64) -> f64 {
        let density: f64 = m
            .weights
            .iter()
            .zip(&m.means)
            .zip(&m.variances)
            .map(|((p, mu), v)| p * (-(y - mu).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
            .sum();
        -density.ln()
    }

    #[test]
    fn nll_examples() {
        let std_normal = MixtureParams::gaussian(0.0, 1.0);
        assert!((mixture_nll(&std_normal, 0.0) - 0.9189385332046727).abs() < 1e-12);
        let twin = MixtureParams::new(vec![0.5, 0.5], vec![0.0, 0.0], vec![1.0, 1.0]);
        assert!((mixture_nll(&twin, 0.0) - 0.9189385332046727).abs() < 1e-12);
        assert!((mixture_nll(&worked(), 1.0) - naive_nll(&worked(), 1.0)).abs() < 1e-12);
    }

    #[test]
    fn nll_handles_zero_weight() {
        let m = MixtureParams::new(vec![0.0, 1.0], vec![100.0, 0.0], vec![1.0, 1.0]);
        let v = mixture_nll(&m, 0.0);
        assert!(v.is_finite());
        assert!((v - 0.9189385332046727).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_naive_density_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..10_000 {
            let k = rng.random_range(1..=5);
            let mut m = random_mixture(&mut rng, k);
            if i % 4 == 0 && k > 1 {
                // Near-degenerate weights down to 1e-12.
                m.weights = vec![1e-12; k];
                m.weights[0] = 1.0 - 1e-12 * (k - 1) as f64;
            }
            // Keep the naive density sum away from underflow.
            m.means.iter_mut().for_each(|mu| *mu = rng.random_range(-3.0..3.0));
            m.variances.iter_mut().for_each(|v| *v = rng.random_range(0.5..5.0));
            let y = rng.random_range(-6.0..6.0);
            let (a, b) = (mixture_nll(&m, y), naive_nll(&m, y));
            assert!((a - b).abs() < 1e-10, "{a} vs {b} for {m:?} at {y}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nll_is_permutation_invariant(
                raw in proptest::collection::vec((-3.0f64..3.0, -5.0f64..5.0, 0.01f64..4.0), 1..6),
                y in -6.0f64..6.0,
                rot in 0usize..6,
            ) {
                let w = crate::tensor::softmax(&raw.iter().map(|r| r.0).collect::<Vec<_>>());
                let m = MixtureParams::new(w, raw.iter().map(|r| r.1).collect(), raw.iter().map(|r| r.2).collect());
                let mut p = m.clone();
                let r = rot % m.components();
                p.weights.rotate_left(r);
                p.means.rotate_left(r);
                p.variances.rotate_left(r);
                prop_assert!((mixture_nll(&m, y) - mixture_nll(&p, y)).abs() < 1e-12);
            }
        }
    }
}
