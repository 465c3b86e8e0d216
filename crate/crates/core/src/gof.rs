//! Goodness-of-fit tests used to validate samplers against exact laws.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// One-sample Kolmogorov–Smirnov statistic `sup |F_n - F|`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov tail probability `Q(t) = 2 sum (-1)^{k-1} exp(-2 k^2 t^2)`.
pub fn kolmogorov_q(t: f64) -> f64 {
    if t < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * t * t).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// KS p-value with the Stephens small-sample correction.
pub fn ks_pvalue<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let n = samples.len() as f64;
    let d = ks_statistic(samples, cdf);
    let sn = n.sqrt();
    kolmogorov_q((sn + 0.12 + 0.11 / sn) * d)
}

/// Pearson chi-square p-value of observed counts against cell probabilities.
/// Tail cells with expected count below 5 are pooled into their neighbour.
pub fn chi_square_pvalue(counts: &[u64], probs: &[f64]) -> f64 {
    assert_eq!(counts.len(), probs.len());
    let total: u64 = counts.iter().sum();
    let n = total as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut obs, mut exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        obs += c as f64;
        exp += p * n;
        if exp >= 5.0 {
            cells.push((obs, exp));
            obs = 0.0;
            exp = 0.0;
        }
    }
    if exp > 0.0 || obs > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += obs;
                last.1 += exp;
            }
            None => cells.push((obs, exp)),
        }
    }
    if cells.len() < 2 {
        return 1.0;
    }
    let stat: f64 = cells
        .iter()
        .map(|&(o, e)| if e > 0.0 { (o - e).powi(2) / e } else if o > 0.0 { f64::INFINITY } else { 0.0 })
        .sum();
    if !stat.is_finite() {
        return 0.0;
    }
    let dist = ChiSquared::new((cells.len() - 1) as f64).expect("positive dof");
    1.0 - dist.cdf(stat)
}
