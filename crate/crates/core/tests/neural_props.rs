use lyapctl::neural::{clip_global_norm, l2_norm, Activation, Mlp, Schedule};
use lyapctl::numerics::RngStream;
use proptest::prelude::*;

/// Layer-by-layer evaluation straight from the documented parameter layout.
fn oracle_forward(sizes: &[usize], hidden: Activation, output: Activation, p: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut off = 0;
    let last = sizes.len() - 2;
    for l in 0..sizes.len() - 1 {
        let (nin, nout) = (sizes[l], sizes[l + 1]);
        let w = &p[off..off + nin * nout];
        let b = &p[off + nin * nout..off + nin * nout + nout];
        off += nin * nout + nout;
        let act = if l == last { output } else { hidden };
        a = (0..nout)
            .map(|o| {
                let z: f64 = b[o] + (0..nin).map(|i| w[o * nin + i] * a[i]).sum::<f64>();
                match act {
                    Activation::Relu => z.max(0.0),
                    Activation::Softplus => (1.0 + z.exp()).ln(),
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                }
            })
            .collect();
    }
    a
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn forward_matches_straight_line_evaluator() {
    let mut rng = RngStream::new(11, 0);
    for (hidden, output) in [
        (Activation::Softplus, Activation::Identity),
        (Activation::Tanh, Activation::Tanh),
        (Activation::Relu, Activation::Identity),
    ] {
        let sizes = [5, 7, 6, 3];
        let net = Mlp::init(&sizes, hidden, output, &mut rng).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
            let y = net.forward(&x).unwrap();
            let o = oracle_forward(&sizes, hidden, output, net.params(), &x);
            for (a, b) in y.iter().zip(&o) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn backprop_matches_central_differences() {
    let mut rng = RngStream::new(12, 0);
    let sizes = [8, 16, 8];
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let net = Mlp::init(&sizes, Activation::Softplus, Activation::Identity, &mut rng).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
            let up: Vec<f64> = (0..8).map(|_| rng.standard_normal()).collect();
            let g = net.backward(&x, &up).unwrap();
            let scalar = |p: &[f64], x: &[f64]| -> f64 {
                oracle_forward(&sizes, Activation::Softplus, Activation::Identity, p, x)
                    .iter()
                    .zip(&up)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let mut p = net.params().to_vec();
            for i in 0..p.len() {
                let orig = p[i];
                p[i] = orig + h;
                let fp = scalar(&p, &x);
                p[i] = orig - h;
                let fm = scalar(&p, &x);
                p[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                if fd.abs() > 1e-6 || g.d_params[i].abs() > 1e-6 {
                    worst = worst.max(rel_err(g.d_params[i], fd));
                }
            }
            let mut xx = x.clone();
            for i in 0..8 {
                xx[i] = x[i] + h;
                let fp = scalar(&p, &xx);
                xx[i] = x[i] - h;
                let fm = scalar(&p, &xx);
                xx[i] = x[i];
                worst = worst.max(rel_err(g.d_input[i], (fp - fm) / (2.0 * h)));
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn learning_rate_schedules_at_first_and_tenth_index() {
    assert!((Schedule::alpha().at(0) - 1e-3).abs() < 1e-18);
    assert!((Schedule::beta().at(0) - 5e-4).abs() < 1e-18);
    assert!((Schedule::gamma().at(0) - 1e-4).abs() < 1e-18);
    assert!((Schedule::lambda().at(0) - 0.1).abs() < 1e-18);
    assert!((Schedule::gamma().at(9) - 1e-5).abs() < 1e-18);
    assert!((Schedule::alpha().at(9) - 1e-3 / 10f64.powf(0.8)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_is_idempotent(g in prop::collection::vec(-100.0f64..100.0, 1..40), bound in 0.01f64..10.0) {
        let mut a = g.clone();
        let before = clip_global_norm(&mut a, bound);
        prop_assert!((before - l2_norm(&g)).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(l2_norm(&a) <= bound * (1.0 + 1e-12));
        let mut b = a.clone();
        clip_global_norm(&mut b, bound);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
        if l2_norm(&g) <= bound {
            prop_assert_eq!(&a, &g);
        }
    }

    #[test]
    fn timescale_ratio_vanishes(k in 1_000u64..1_000_000) {
        // The slow high-level rate falls off faster than the fast low-level one.
        let r = Schedule::gamma().at(k) / Schedule::alpha().at(k);
        let r2 = Schedule::gamma().at(10 * k) / Schedule::alpha().at(10 * k);
        prop_assert!(r2 < r);
        prop_assert!(r < 0.1 * (1.0 + k as f64).powf(-0.2) + 1e-15);
    }

    #[test]
    fn schedules_are_positive_and_decreasing(k in 0u64..10_000_000) {
        for s in [Schedule::alpha(), Schedule::beta(), Schedule::gamma(), Schedule::lambda()] {
            prop_assert!(s.at(k) > 0.0);
            prop_assert!(s.at(k + 1) < s.at(k));
        }
    }
}
