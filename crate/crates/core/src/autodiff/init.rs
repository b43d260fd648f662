use rand::Rng;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Xavier (Glorot) uniform initialization for a weight matrix applied as
/// `x @ w`: entries are uniform in +-sqrt(6 / (fan_in + fan_out)) with
/// fan_in = rows and fan_out = cols.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::Model(format!(
            "xavier_init: zero fan for shape ({rows}, {cols})"
        )));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Ok(Tensor::from_fn(rows, cols, |_, _| {
        rng.gen_range(-bound..=bound)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::seeded_rng;

    #[test]
    fn entries_within_bound() {
        let mut rng = seeded_rng(7);
        let t = xavier_init(8, 8, &mut rng).unwrap();
        let bound = (6.0 / 16.0_f64).sqrt();
        assert!(t.data().iter().all(|w| w.abs() <= bound + 1e-12));
    }

    #[test]
    fn empirical_variance() {
        // Var of U(-b, b) is b^2/3 = 2 / (fan_in + fan_out).
        let mut rng = seeded_rng(1);
        let (fan_in, fan_out) = (20, 30);
        let n = 100_000 / (fan_in * fan_out) + 1;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..n {
            let t = xavier_init(fan_in, fan_out, &mut rng).unwrap();
            for &w in t.data() {
                sum += w;
                sum_sq += w * w;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        let expect = 2.0 / (fan_in + fan_out) as f64;
        assert!(
            (var - expect).abs() / expect < 0.05,
            "var {var}, expected {expect}"
        );
    }

    #[test]
    fn deterministic_for_same_rng_state() {
        let a = xavier_init(4, 5, &mut seeded_rng(3)).unwrap();
        let b = xavier_init(4, 5, &mut seeded_rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_zero_fan() {
        assert!(xavier_init(0, 4, &mut seeded_rng(0)).is_err());
    }
}
