//! Deanonymization analysis: the probability that an adversary controlling a
//! fraction of the network fully owns at least one of a victim's circuits
//! (and can thus link the victim's address to its protocol identity).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Analytic probability that at least one of `circuits` circuits of `hops`
/// relays is entirely adversary-controlled, with each relay independently
/// adversarial with probability `adversary_fraction`:
/// `1 − (1 − a^m)^p`. Grows with `a` and `p`, shrinks with `m`.
pub fn deanon_probability(adversary_fraction: f64, hops: u32, circuits: u32) -> f64 {
    assert!((0.0..=1.0).contains(&adversary_fraction));
    assert!(hops >= 1 && circuits >= 1);
    let a_m = adversary_fraction.powi(hops as i32);
    1.0 - (1.0 - a_m).powi(circuits as i32)
}

/// Monte Carlo check of the same model: draw each hop adversarial with
/// probability `a`, count trials where some circuit is fully compromised.
pub fn deanon_monte_carlo(
    adversary_fraction: f64,
    hops: u32,
    circuits: u32,
    trials: u32,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut compromised_trials = 0u32;
    for _ in 0..trials {
        let mut compromised = false;
        'circuits: for _ in 0..circuits {
            for _ in 0..hops {
                if rng.gen::<f64>() >= adversary_fraction {
                    continue 'circuits;
                }
            }
            compromised = true;
            break;
        }
        if compromised {
            compromised_trials += 1;
        }
    }
    compromised_trials as f64 / trials as f64
}
