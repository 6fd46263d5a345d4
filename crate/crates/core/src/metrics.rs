//! Tracking-error indices, norm curves and learning-curve normalisation.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate normalisation: random baseline {random} is not below best reference {best}")]
    Degenerate { random: f64, best: f64 },
}

/// Sampled error signal `e(t) = x(t) − x_d(t)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorSeries {
    pub times: Vec<f64>,
    pub errors: Vec<Vec<f64>>,
}

impl ErrorSeries {
    pub fn new(times: Vec<f64>, errors: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        if times.len() != errors.len() {
            return Err(MetricsError::Argument(format!(
                "{} times but {} error samples",
                times.len(),
                errors.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(MetricsError::Argument("sample times must be strictly increasing".into()));
        }
        Ok(Self { times, errors })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, e: Vec<f64>) {
        self.times.push(t);
        self.errors.push(e);
    }

    fn trapezoid(&self, f: impl Fn(&[f64]) -> f64) -> Result<f64, MetricsError> {
        if self.times.len() < 2 {
            return Err(MetricsError::Argument(format!(
                "integral needs at least 2 samples, got {}",
                self.times.len()
            )));
        }
        let vals: Vec<f64> = self.errors.iter().map(|e| f(e)).collect();
        Ok(self
            .times
            .windows(2)
            .zip(vals.windows(2))
            .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
            .sum())
    }
}

pub fn norm1(e: &[f64]) -> f64 {
    e.iter().map(|v| v.abs()).sum()
}

pub fn norm2(e: &[f64]) -> f64 {
    e.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `∫ ‖e(t)‖₁ dt` by the trapezoidal rule.
pub fn iae(es: &ErrorSeries) -> Result<f64, MetricsError> {
    es.trapezoid(norm1)
}

/// `∫ ‖e(t)‖₂² dt` by the trapezoidal rule.
pub fn ise(es: &ErrorSeries) -> Result<f64, MetricsError> {
    es.trapezoid(|e| e.iter().map(|v| v * v).sum())
}

pub fn norm_curve(es: &ErrorSeries) -> Vec<(f64, f64)> {
    es.times.iter().zip(&es.errors).map(|(&t, e)| (t, norm2(e))).collect()
}

/// True when the curve never rises above an earlier value by more than
/// `tolerance` times its initial value.
pub fn is_monotone_decay(curve: &[(f64, f64)], tolerance: f64) -> bool {
    let Some(&(_, first)) = curve.first() else {
        return true;
    };
    let slack = tolerance * first.abs();
    let mut running_min = f64::INFINITY;
    for &(_, v) in curve {
        if v > running_min + slack {
            return false;
        }
        running_min = running_min.min(v);
    }
    true
}

pub const NORMALIZED_FLOOR: f64 = -0.1;
pub const NORMALIZED_CEIL: f64 = 1.1;

/// `(r − random)/(best − random)` clipped to `[−0.1, 1.1]`.
pub fn normalize_rewards(curve: &[f64], random_baseline: f64, best_reference: f64) -> Result<Vec<f64>, MetricsError> {
    if !(best_reference > random_baseline) || !random_baseline.is_finite() || !best_reference.is_finite() {
        return Err(MetricsError::Degenerate {
            random: random_baseline,
            best: best_reference,
        });
    }
    let span = best_reference - random_baseline;
    Ok(curve
        .iter()
        .map(|r| ((r - random_baseline) / span).clamp(NORMALIZED_FLOOR, NORMALIZED_CEIL))
        .collect())
}

/// Trailing moving average over `window` entries.
pub fn smooth(curve: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(curve.len());
    let mut acc = 0.0;
    for (i, v) in curve.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= curve[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Median of finite entries; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, dt: f64, f: impl Fn(f64) -> Vec<f64>) -> ErrorSeries {
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let errors = times.iter().map(|&t| f(t)).collect();
        ErrorSeries::new(times, errors).unwrap()
    }

    #[test]
    fn constant_signals() {
        let es = series(11, 0.1, |_| vec![1.0, -1.0]);
        assert!((iae(&es).unwrap() - 2.0).abs() < 1e-12);
        let es = series(21, 0.1, |_| vec![3.0, 4.0]);
        assert!((ise(&es).unwrap() - 50.0).abs() < 1e-12);
        assert!(norm_curve(&es).iter().all(|&(_, v)| (v - 5.0).abs() < 1e-15));
        let zero = series(5, 0.1, |_| vec![0.0; 3]);
        assert_eq!(iae(&zero).unwrap(), 0.0);
        assert_eq!(ise(&zero).unwrap(), 0.0);
    }

    #[test]
    fn too_few_samples() {
        let es = series(1, 0.1, |_| vec![1.0]);
        assert!(iae(&es).is_err());
        assert!(ErrorSeries::new(vec![0.0, 0.0], vec![vec![0.0], vec![0.0]]).is_err());
    }

    #[test]
    fn normalisation_endpoints() {
        let v = normalize_rewards(&[-10.0, -5.0, 0.0, 100.0, -100.0], -10.0, 0.0).unwrap();
        assert_eq!(v, vec![0.0, 0.5, 1.0, 1.1, -0.1]);
        assert!(normalize_rewards(&[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn decay_detection() {
        let c: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 * 0.1, (-(i as f64) * 0.1).exp() * 2.0)).collect();
        assert!(is_monotone_decay(&c, 0.0));
        let rising: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, i as f64)).collect();
        assert!(!is_monotone_decay(&rising, 0.05));
    }

    #[test]
    fn medians_and_smoothing() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
