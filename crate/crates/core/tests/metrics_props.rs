use lyapctl::metrics::{iae, ise, norm1, norm2, ErrorSeries};
use proptest::prelude::*;
use std::f64::consts::PI;

fn sampled(n: usize, t_end: f64, f: impl Fn(f64) -> Vec<f64>) -> ErrorSeries {
    let times: Vec<f64> = (0..=n).map(|i| t_end * i as f64 / n as f64).collect();
    let errors = times.iter().map(|&t| f(t)).collect();
    ErrorSeries::new(times, errors).unwrap()
}

#[test]
fn sine_integrals_match_closed_forms() {
    let n = (2.0 * PI / 1e-3).round() as usize;
    let es = sampled(n, 2.0 * PI, |t| vec![t.sin()]);
    assert!((iae(&es).unwrap() - 4.0).abs() / 4.0 < 1e-3);
    assert!((ise(&es).unwrap() - PI).abs() / PI < 1e-3);
}

#[test]
fn trapezoid_error_shrinks_quadratically() {
    // ∫₀¹ (e^{−t})² dt = (1 − e^{−2})/2
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    let coarse = (ise(&sampled(50, 1.0, |t| vec![(-t).exp()])).unwrap() - exact).abs();
    let fine = (ise(&sampled(100, 1.0, |t| vec![(-t).exp()])).unwrap() - exact).abs();
    let ratio = coarse / fine;
    assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
}

proptest! {
    #[test]
    fn integrals_are_nonnegative_and_additive(vals in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 3..40), split in 1usize..38) {
        let n = vals.len();
        let split = split.min(n - 2);
        let times: Vec<f64> = (0..n)
            .scan(0.0, |t, i| {
                let now = *t;
                *t += 0.01 * (1.0 + 0.5 * (i % 3) as f64);
                Some(now)
            })
            .collect();
        let whole = ErrorSeries::new(times.clone(), vals.clone()).unwrap();
        let left = ErrorSeries::new(times[..=split].to_vec(), vals[..=split].to_vec()).unwrap();
        let right = ErrorSeries::new(times[split..].to_vec(), vals[split..].to_vec()).unwrap();
        for f in [iae, ise] {
            let w = f(&whole).unwrap();
            prop_assert!(w >= 0.0);
            prop_assert!((w - f(&left).unwrap() - f(&right).unwrap()).abs() < 1e-12 * w.max(1.0));
        }
    }

    #[test]
    fn norm_inequalities(e in prop::collection::vec(-100.0f64..100.0, 1..12)) {
        let n2 = norm2(&e);
        let n1 = norm1(&e);
        prop_assert!(n2 <= n1 * (1.0 + 1e-12));
        prop_assert!(n1 <= (e.len() as f64).sqrt() * n2 * (1.0 + 1e-12) + 1e-12);
    }
}
