use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Aggregate failure probability of a system whose components fail
/// independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityEstimate {
    pub component_probabilities: Vec<f64>,
    pub system_failure_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("component {index} has probability {value}, outside [0, 1]")]
pub struct DomainError {
    pub index: usize,
    pub value: f64,
}

/// `1 - prod(1 - p_i)`: the probability that at least one component fails.
///
/// The result is clamped below by the largest component probability so that
/// rounding in `1 - p` never reports a system safer than its worst part.
pub fn estimate_system_failure(probabilities: &[f64]) -> Result<ReliabilityEstimate, DomainError> {
    let mut survive = 1.0_f64;
    let mut worst = 0.0_f64;
    for (index, &p) in probabilities.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(DomainError { index, value: p });
        }
        survive *= 1.0 - p;
        worst = worst.max(p);
    }
    let system = (1.0 - survive).clamp(worst, 1.0);
    Ok(ReliabilityEstimate {
        component_probabilities: probabilities.to_vec(),
        system_failure_probability: system,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn est(ps: &[f64]) -> f64 {
        estimate_system_failure(ps)
            .unwrap()
            .system_failure_probability
    }

    #[test]
    fn worked_values() {
        assert_eq!(est(&[]), 0.0);
        assert_eq!(est(&[0.5]), 0.5);
        // 1 - 0.9^3
        assert!((est(&[0.1, 0.1, 0.1]) - 0.271).abs() < 1e-12);
        // 1 - 0.98^5
        assert!((est(&[0.02; 5]) - 0.096_079_203_2).abs() < 1e-12);
        // 1 - 0.85^4
        assert!((est(&[0.15; 4]) - 0.477_993_75).abs() < 1e-12);
        assert_eq!(est(&[0.0; 5]), 0.0);
        assert_eq!(est(&[0.2, 1.0, 0.3]), 1.0);
    }

    #[test]
    fn rejects_out_of_domain() {
        assert_eq!(
            estimate_system_failure(&[0.1, -0.01]).unwrap_err(),
            DomainError {
                index: 1,
                value: -0.01
            }
        );
        assert!(estimate_system_failure(&[f64::NAN]).is_err());
        assert!(estimate_system_failure(&[1.0001]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut ps in prop::collection::vec(0.0f64..=1.0, 0..12), seed in any::<u64>()) {
            let a = est(&ps);
            // deterministic shuffle
            let n = ps.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                ps.swap(i, j);
            }
            let b = est(&ps);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn bounded_and_dominates_max(ps in prop::collection::vec(0.0f64..=1.0, 0..12)) {
            let e = est(&ps);
            let max = ps.iter().cloned().fold(0.0, f64::max);
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!(e >= max);
            let product: f64 = ps.iter().map(|p| 1.0 - p).product();
            prop_assert!((e - (1.0 - product)).abs() < 1e-12);
        }

        #[test]
        fn appending_raises_estimate(ps in prop::collection::vec(0.0f64..0.9, 0..8), p in 1e-6f64..=1.0) {
            let before = est(&ps);
            let mut more = ps.clone();
            more.push(p);
            prop_assert!(est(&more) > before);
            let mut zero = ps.clone();
            zero.push(0.0);
            prop_assert_eq!(est(&zero), before);
        }
    }
}
