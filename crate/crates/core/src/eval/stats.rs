use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// P(X <= k)
    Lower,
    /// P(X >= k)
    Upper,
}

/// Pearson chi-squared homogeneity test on the 2x3 table formed by two
/// label-count vectors; expectations come from pooled marginals, df = 2.
pub fn chi_squared_homogeneity(a: [u64; 3], b: [u64; 3]) -> Result<TestResult, EvalError> {
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return Err(EvalError::EmptySample);
    }
    if let Some(category) = (0..3).find(|&j| a[j] + b[j] == 0) {
        return Err(EvalError::DegenerateTable { category });
    }
    let total = (na + nb) as f64;
    let mut stat = 0.0;
    for j in 0..3 {
        let col = (a[j] + b[j]) as f64;
        for (obs, n) in [(a[j], na), (b[j], nb)] {
            let expected = n as f64 * col / total;
            stat += (obs as f64 - expected).powi(2) / expected;
        }
    }
    let dist = ChiSquared::new(2.0).expect("df 2 is valid");
    Ok(TestResult {
        statistic: stat,
        p_value: dist.sf(stat),
    })
}

fn ln_choose(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

/// Binomial pmf. Small n uses an exact-in-f64 coefficient; large n goes
/// through log space.
fn binomial_pmf(k: u64, n: u64, p: f64) -> f64 {
    if n <= 1000 {
        let k_small = k.min(n - k);
        let mut c = 1.0f64;
        for i in 0..k_small {
            c = c * (n - i) as f64 / (i + 1) as f64;
        }
        c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
    } else {
        (ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
    }
}

/// Exact one-sided binomial tail probability.
pub fn binomial_one_sided(successes: u64, n: u64, p0: f64, tail: Tail) -> Result<f64, EvalError> {
    if successes > n {
        return Err(EvalError::SuccessesExceedTrials { successes, n });
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(EvalError::InvalidProbability(p0));
    }
    let range = match tail {
        Tail::Lower => 0..=successes,
        Tail::Upper => successes..=n,
    };
    let sum: f64 = range.map(|k| binomial_pmf(k, n, p0)).sum();
    Ok(sum.min(1.0))
}

/// One-sample t-test of `rates` against `chance`, upper tail, df = n - 1.
pub fn t_test_vs_chance(rates: &[f64], chance: f64) -> Result<TestResult, EvalError> {
    let n = rates.len();
    if n < 2 {
        return Err(EvalError::TooFewObservations(n));
    }
    let mean = rates.iter().sum::<f64>() / n as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let t = (mean - chance) / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1 is valid");
    Ok(TestResult {
        statistic: t,
        p_value: dist.sf(t),
    })
}
