//! Log-domain helpers shared by the posterior and annealing code.

use rand::Rng;

/// `log Σ exp(x_i)`, stable against overflow. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// `log((1/n) Σ exp(x_i))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NEG_INFINITY;
    }
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Softmax of `xs / temperature`, max-shifted.
pub fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = xs.iter().map(|&x| x / temperature).collect();
    let lse = log_sum_exp(&scaled);
    if lse == f64::NEG_INFINITY {
        // all -inf: fall back to uniform
        let n = xs.len() as f64;
        return vec![1.0 / n; xs.len()];
    }
    scaled.iter().map(|&x| (x - lse).exp()).collect()
}

/// Draws an index from a probability vector by inverse CDF. The vector is
/// assumed normalized; rounding slack is absorbed by the last positive entry.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_handles_large_and_neg_inf() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, f64::NEG_INFINITY]) - 0.0).abs() < 1e-15);
    }

    #[test]
    fn log_mean_exp_of_constant() {
        let c = 3f64.ln();
        assert!((log_mean_exp(&[c, c, c, c]) - c).abs() < 1e-14);
    }

    #[test]
    fn softmax_uniform_for_constant_input() {
        let p = softmax(&[0.0; 5], 1.0);
        for x in p {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn argmax_prefers_first_on_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
