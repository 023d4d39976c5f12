//! Small statistics helpers shared by trials, analysis and comparisons.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub half_width: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower() && x <= self.upper()
    }
}

/// Sample mean with `Z95 · sd / sqrt(n)`; a single value has zero width.
pub fn mean_ci95(values: &[f64]) -> MeanCi {
    let n = values.len();
    if n == 0 {
        return MeanCi { mean: f64::NAN, half_width: f64::NAN, n };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Z95 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanCi { mean, half_width, n }
}

/// Element-wise `a − b` summarised by [`mean_ci95`].
pub fn paired_delta(a: &[f64], b: &[f64]) -> MeanCi {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_ci95(&d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub successes: u64,
    /// Non-tied observations.
    pub n: u64,
    pub ties: u64,
    /// `P(X >= successes)` for `X ~ Binomial(n, 1/2)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, level: f64) -> bool {
        self.n > 0 && self.p_value < level
    }
}

/// One-sided sign test that the differences are positive. Zero
/// differences are dropped.
pub fn sign_test(differences: &[f64]) -> SignTest {
    let successes = differences.iter().filter(|&&d| d > 0.0).count() as u64;
    let ties = differences.iter().filter(|&&d| d == 0.0).count() as u64;
    let n = differences.len() as u64 - ties;
    let p_value = if n == 0 {
        1.0
    } else if successes == 0 {
        1.0
    } else {
        let b = Binomial::new(0.5, n).expect("valid binomial");
        1.0 - b.cdf(successes - 1)
    };
    SignTest { successes, n, ties, p_value }
}
