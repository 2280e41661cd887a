//! Seeded generation of booking sessions and of conditional future scenarios.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::ppa::{EpisodeRealization, Patient, Priority};
use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
#[error("invalid generator config: {0}")]
pub struct GenConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// Mean of the normal call-count distribution.
    pub mu_k: f64,
    pub sigma_k: f64,
    /// Probability that a caller is high priority.
    pub p_class1: f64,
    /// Arrival-score Beta parameters `(a, b)`, indexed by priority.
    pub beta: [(f64, f64); 2],
    /// Duration lognormal parameters `(mu, sigma)`, indexed by priority.
    pub lognormal: [(f64, f64); 2],
    /// Baseline physician popularity; its length fixes the physician count.
    pub weights: Vec<f64>,
    /// Dirichlet concentration around `weights`.
    pub alpha: f64,
    /// Inclusive range of eligible-set sizes.
    pub eligibility_size: (usize, usize),
}

impl GenConfig {
    /// Generation parameters of the full-scale experiments (100 calls per session).
    pub fn full_scale() -> GenConfig {
        GenConfig {
            mu_k: 100.0,
            sigma_k: 8.0,
            p_class1: 0.3,
            beta: [(3.0, 1.0), (1.0, 1.0)],
            lognormal: [(3.0, 0.8), (2.3, 0.3)],
            weights: vec![0.4, 0.3, 0.15, 0.15],
            alpha: 25.0,
            eligibility_size: (1, 4),
        }
    }

    /// Desk-scale profile: same patient mix, 30 calls per session.
    pub fn desk() -> GenConfig {
        GenConfig {
            mu_k: 30.0,
            sigma_k: 4.0,
            ..GenConfig::full_scale()
        }
    }

    /// Uniform physician popularity with `alpha = 1`.
    pub fn uniform_weights(mut self, physicians: usize) -> GenConfig {
        self.weights = vec![1.0 / physicians as f64; physicians];
        self.alpha = 1.0;
        self.eligibility_size = (1, physicians);
        self
    }

    pub fn physicians(&self) -> usize {
        self.weights.len()
    }

    pub fn dirichlet_params(&self) -> Vec<f64> {
        self.weights.iter().map(|w| self.alpha * w).collect()
    }

    pub fn validate(&self) -> Result<(), GenConfigError> {
        let bad = |m: &str| Err(GenConfigError(m.to_string()));
        let p = self.physicians();
        if p == 0 {
            return bad("weights must be non-empty");
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return bad("weights must be non-negative");
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("weights must sum to 1");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        let (lo, hi) = self.eligibility_size;
        if !(1 <= lo && lo <= hi && hi <= p) {
            return bad("eligibility_size must satisfy 1 <= k_min <= k_max <= P");
        }
        if !(self.sigma_k > 0.0) || !self.mu_k.is_finite() {
            return bad("sigma_k must be positive and mu_k finite");
        }
        if !(self.p_class1 > 0.0 && self.p_class1 < 1.0) {
            return bad("p_class1 must lie in (0, 1)");
        }
        if self.beta.iter().any(|&(a, b)| !(a > 0.0 && b > 0.0)) {
            return bad("beta parameters must be positive");
        }
        if self.lognormal.iter().any(|&(m, s)| !m.is_finite() || !(s > 0.0)) {
            return bad("lognormal sigma must be positive");
        }
        Ok(())
    }
}

/// Future callers sampled after the current epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<Vec<Patient>>,
    pub anchor_epoch: usize,
    pub anchor_score: f64,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

fn sample_count(config: &GenConfig, rng: &mut ChaCha8Rng) -> f64 {
    let normal = Normal::new(config.mu_k, config.sigma_k).expect("validated sigma");
    normal.sample(rng).round()
}

fn sample_priority(config: &GenConfig, rng: &mut ChaCha8Rng) -> Priority {
    if rng.random::<f64>() < config.p_class1 {
        Priority::High
    } else {
        Priority::Regular
    }
}

fn sample_duration(config: &GenConfig, priority: Priority, rng: &mut ChaCha8Rng) -> f64 {
    let (mu, sigma) = config.lognormal[priority.index()];
    LogNormal::new(mu, sigma).expect("validated lognormal").sample(rng)
}

/// Taste vector `z ~ Dirichlet(alpha * w)` from normalised Gamma draws.
/// Physicians with zero weight get zero taste.
pub fn sample_taste(config: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut z: Vec<f64> = config
        .dirichlet_params()
        .into_iter()
        .map(|shape| {
            if shape > 0.0 {
                Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = z.iter().sum();
    if total > 0.0 {
        z.iter_mut().for_each(|v| *v /= total);
    } else {
        let n = z.len() as f64;
        z.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    z
}

/// Eligible set (ascending) and preferred physician for one caller.
pub fn sample_eligibility(config: &GenConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    let z = sample_taste(config, rng);
    let (lo, hi) = config.eligibility_size;
    let size = rng.random_range(lo..=hi);
    let mut order: Vec<usize> = (0..z.len()).collect();
    // Largest taste first; equal tastes keep the lower index first.
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut eligible: Vec<usize> = order[..size].to_vec();
    eligible.sort_unstable();

    let mass: f64 = eligible.iter().map(|&p| z[p]).sum();
    let preferred = if mass > 0.0 {
        let mut u = rng.random::<f64>() * mass;
        let mut pick = *eligible.last().expect("size >= 1");
        for &p in &eligible {
            if u < z[p] {
                pick = p;
                break;
            }
            u -= z[p];
        }
        pick
    } else {
        eligible[rng.random_range(0..eligible.len())]
    };
    (eligible, preferred)
}

fn sample_patient(config: &GenConfig, score: Option<f64>, priority: Priority, rng: &mut ChaCha8Rng) -> Patient {
    let arrival_score = match score {
        Some(s) => s,
        None => {
            let (a, b) = config.beta[priority.index()];
            Beta::new(a, b).expect("validated beta").sample(rng)
        }
    };
    let duration = sample_duration(config, priority, rng);
    let (eligible, preferred) = sample_eligibility(config, rng);
    Patient {
        id: 0,
        duration,
        priority,
        preferred,
        eligible,
        arrival_score,
    }
}

fn sort_and_number(patients: &mut [Patient], first_id: usize) {
    patients.sort_by(|a, b| a.arrival_score.total_cmp(&b.arrival_score));
    for (i, p) in patients.iter_mut().enumerate() {
        p.id = first_id + i;
    }
}

/// One complete booking session.
pub fn sample_episode(config: &GenConfig, stream: RngStream) -> EpisodeRealization {
    let mut rng = stream.rng();
    let k_total = sample_count(config, &mut rng).max(1.0) as usize;
    let mut patients: Vec<Patient> = (0..k_total)
        .map(|_| {
            let priority = sample_priority(config, &mut rng);
            sample_patient(config, None, priority, &mut rng)
        })
        .collect();
    sort_and_number(&mut patients, 0);
    EpisodeRealization {
        seed: stream.master_seed,
        patients,
    }
}

/// Draws from `Beta(a, b)` restricted to `(lower, 1]` by inverting the CDF.
/// Closed forms cover `a == 1` or `b == 1`; other shapes bisect the
/// regularised incomplete beta function.
pub fn sample_truncated_beta(a: f64, b: f64, lower: f64, rng: &mut ChaCha8Rng) -> Option<f64> {
    if lower >= 1.0 {
        return None;
    }
    let lower = lower.max(0.0);
    let cdf = |x: f64| beta_reg(a, b, x);
    let f_lo = if b == 1.0 {
        lower.powf(a)
    } else if a == 1.0 {
        1.0 - (1.0 - lower).powf(b)
    } else {
        cdf(lower)
    };
    if f_lo >= 1.0 {
        return None;
    }
    for _ in 0..1000 {
        // u in (0, 1]
        let u = 1.0 - rng.random::<f64>();
        let target = f_lo + (1.0 - f_lo) * u;
        let x = if b == 1.0 {
            target.powf(1.0 / a)
        } else if a == 1.0 {
            // Upper-tail form keeps precision near x = 1.
            1.0 - ((1.0 - lower).powf(b) * (1.0 - u)).powf(1.0 / b)
        } else {
            let (mut lo, mut hi) = (lower, 1.0);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if cdf(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi
        };
        if x > lower && x <= 1.0 {
            return Some(x);
        }
    }
    None
}

/// `n` independent continuations of the session after the caller at `epoch`
/// with arrival score `anchor_score`. Scenario `j` uses `stream.derive(j)`.
pub fn sample_future_scenarios(
    config: &GenConfig,
    epoch: usize,
    anchor_score: f64,
    n: usize,
    stream: RngStream,
) -> ScenarioSet {
    let scenarios = (0..n)
        .map(|j| sample_future(config, epoch, anchor_score, stream.derive(j as u64)))
        .collect();
    ScenarioSet {
        scenarios,
        anchor_epoch: epoch,
        anchor_score,
    }
}

fn sample_future(config: &GenConfig, epoch: usize, anchor_score: f64, stream: RngStream) -> Vec<Patient> {
    let mut rng = stream.rng();
    let seen = (epoch + 1) as f64;
    let mut total = sample_count(config, &mut rng);
    let mut tries = 0;
    while total < seen {
        tries += 1;
        if tries > 100_000 {
            // The session is already far in the upper tail of the count law.
            total = seen;
            break;
        }
        total = sample_count(config, &mut rng);
    }
    let remaining = (total - seen) as usize;
    let mut patients = Vec::with_capacity(remaining);
    for _ in 0..remaining {
        let priority = sample_priority(config, &mut rng);
        let (a, b) = config.beta[priority.index()];
        let Some(score) = sample_truncated_beta(a, b, anchor_score, &mut rng) else {
            continue;
        };
        patients.push(sample_patient(config, Some(score), priority, &mut rng));
    }
    sort_and_number(&mut patients, epoch + 1);
    patients
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn stream(i: u64) -> RngStream {
        RngStream::new(7, Purpose::Test).episode(i)
    }

    #[test]
    fn dirichlet_parameter_vector() {
        let c = GenConfig::full_scale();
        assert_eq!(c.dirichlet_params(), vec![10.0, 7.5, 3.75, 3.75]);
        assert!(c.validate().is_ok());
        let u = GenConfig::desk().uniform_weights(4);
        assert_eq!(u.alpha, 1.0);
        assert!(u.validate().is_ok());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = GenConfig::desk();
        c.weights = vec![0.5, 0.6];
        assert!(c.validate().is_err());
        let mut c = GenConfig::desk();
        c.eligibility_size = (0, 2);
        assert!(c.validate().is_err());
        let mut c = GenConfig::desk();
        c.eligibility_size = (2, 5);
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_size_eligibility_covers_everyone() {
        let mut c = GenConfig::desk();
        c.eligibility_size = (4, 4);
        let mut rng = stream(0).rng();
        for _ in 0..100 {
            let (e, pref) = sample_eligibility(&c, &mut rng);
            assert_eq!(e, vec![0, 1, 2, 3]);
            assert!(e.contains(&pref));
        }
    }

    #[test]
    fn heavier_weight_is_eligible_more_often() {
        let c = GenConfig::desk();
        let mut rng = stream(1).rng();
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let (e, pref) = sample_eligibility(&c, &mut rng);
            assert!(!e.is_empty() && e.contains(&pref));
            for p in e {
                counts[p] += 1;
            }
        }
        assert!(counts[0] > counts[3], "{counts:?}");
        assert!(counts[1] > counts[3], "{counts:?}");
    }

    #[test]
    fn episodes_are_sorted_and_valid() {
        let c = GenConfig::desk();
        for i in 0..50 {
            let ep = sample_episode(&c, stream(i));
            ep.validate(4).unwrap();
            assert!(ep.patients.iter().enumerate().all(|(k, p)| p.id == k));
        }
    }

    #[test]
    fn episode_generation_is_order_independent() {
        let c = GenConfig::desk();
        let a3 = sample_episode(&c, stream(3));
        let _ = sample_episode(&c, stream(4));
        let b3 = sample_episode(&c, stream(3));
        assert_eq!(a3, b3);
        assert_ne!(a3, sample_episode(&c, stream(4)));
    }

    #[test]
    fn scenarios_are_sorted_above_anchor() {
        let c = GenConfig::desk();
        let set = sample_future_scenarios(&c, 10, 0.4, 5, stream(9));
        assert_eq!(set.len(), 5);
        for s in &set.scenarios {
            assert!(s.iter().all(|p| p.arrival_score > 0.4));
            assert!(s.windows(2).all(|w| w[0].arrival_score <= w[1].arrival_score));
            assert!(s.iter().enumerate().all(|(i, p)| p.id == 11 + i));
            for p in s {
                p.validate(4).unwrap();
            }
        }
        assert!(sample_future_scenarios(&c, 10, 0.4, 0, stream(9)).is_empty());
    }

    #[test]
    fn last_possible_caller_has_no_future() {
        let c = GenConfig::desk();
        let set = sample_future_scenarios(&c, 5, 1.0, 4, stream(2));
        assert!(set.scenarios.iter().all(|s| s.is_empty()));
        let near = sample_future_scenarios(&c, 29, 0.999_999, 20, stream(2));
        let total: usize = near.scenarios.iter().map(|s| s.len()).sum();
        assert!(total < 200);
    }

    #[test]
    fn truncated_beta_respects_bounds() {
        let mut rng = stream(11).rng();
        for &(a, b) in &[(3.0, 1.0), (1.0, 1.0), (1.0, 2.5), (2.0, 2.0)] {
            for &lo in &[0.0, 0.3, 0.9, 0.999] {
                for _ in 0..200 {
                    let x = sample_truncated_beta(a, b, lo, &mut rng).unwrap();
                    assert!(x > lo && x <= 1.0);
                }
            }
        }
        assert_eq!(sample_truncated_beta(3.0, 1.0, 1.0, &mut rng), None);
    }

    #[test]
    fn truncated_beta_matches_conditional_mean() {
        // Beta(3,1) restricted to (0.5, 1]: density 3x^2 / (1 - 0.125),
        // mean = (3/4)(1 - 0.5^4) / (1 - 0.5^3).
        let mut rng = stream(12).rng();
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_truncated_beta(3.0, 1.0, 0.5, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        let exact = 0.75 * (1.0 - 0.0625) / (1.0 - 0.125);
        assert!((mean - exact).abs() < 0.002, "{mean} vs {exact}");
    }
}
