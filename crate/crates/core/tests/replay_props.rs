use lyapctl::numerics::RngStream;
use lyapctl::replay::{PrioritizedBuffer, Transition, PRIORITY_EXPONENT};
use proptest::prelude::*;

fn tr(k: usize) -> Transition {
    Transition {
        state: vec![k as f64],
        high_action: vec![0.0],
        low_action: vec![0.0],
        reward: 0.0,
        next_state: vec![0.0],
        done: false,
        step_in_option: 0,
        time: 0.0,
    }
}

#[test]
fn empirical_frequencies_match_analytic_probabilities() {
    let prios = [0.5, 1.0, 2.0, 4.0, 0.1];
    let mut b = PrioritizedBuffer::new(8).unwrap();
    let ids: Vec<_> = prios.iter().enumerate().map(|(k, &p)| b.push(tr(k), p).unwrap()).collect();
    let total: f64 = prios.iter().map(|p| p.powf(PRIORITY_EXPONENT)).sum();
    let mut rng = RngStream::new(3, 0);
    let mut counts = [0usize; 5];
    let draws = 100_000;
    for _ in 0..draws / 5 {
        let (idx, _) = b.sample(5, &mut rng).unwrap();
        for i in idx {
            counts[ids.iter().position(|&j| j == i).unwrap_or_else(|| panic!("{i:?} not in {ids:?}"))] += 1;
        }
    }
    for (k, &p) in prios.iter().enumerate() {
        let analytic = p.powf(PRIORITY_EXPONENT) / total;
        let empirical = counts[k] as f64 / draws as f64;
        assert!((empirical - analytic).abs() < 0.005, "{k}: {empirical} vs {analytic}");
    }
}

proptest! {
    #[test]
    fn probabilities_sum_to_one_and_are_monotone(prios in prop::collection::vec(0.0f64..50.0, 1..60), cap in 1usize..80) {
        let mut b = PrioritizedBuffer::new(cap).unwrap();
        for (k, &p) in prios.iter().enumerate() {
            b.push(tr(k), p).unwrap();
        }
        prop_assert!(b.len() <= cap);
        let live: Vec<_> = (0..prios.len()).rev().take(b.len()).collect();
        let mut sum = 0.0;
        let mut pairs = Vec::new();
        for &k in &live {
            let slot = k % cap;
            let idx = lyapctl::replay::SampleIndex { slot, serial: k as u64 };
            let pr = b.probability(idx).unwrap();
            prop_assert!(b.priority(idx).unwrap() >= 1e-3);
            sum += pr;
            pairs.push((b.priority(idx).unwrap(), pr));
        }
        prop_assert!((sum - 1.0).abs() < 1e-9);
        for &(pa, qa) in &pairs {
            for &(pb, qb) in &pairs {
                if pa > pb {
                    prop_assert!(qa > qb);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed(seed in any::<u64>()) {
        let mut b = PrioritizedBuffer::new(32).unwrap();
        for k in 0..20 {
            b.push(tr(k), 1.0 + k as f64).unwrap();
        }
        let mut r1 = RngStream::new(seed, 0);
        let mut r2 = RngStream::new(seed, 0);
        prop_assert_eq!(b.sample(8, &mut r1).unwrap(), b.sample(8, &mut r2).unwrap());
    }
}
