//! Unit-complex latent space: each latent dimension is a point on the unit
//! circle stored as a (cos, sin) pair, so a d-dimensional code holds 2d
//! numbers but carries d angles of support. Baseline box/Gaussian spaces are
//! provided for comparison runs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;

/// Denominator guard in the pair normalizer.
pub const PAIR_EPS: f64 = 1e-8;

/// Tolerance for the unit-pair invariant.
pub const UNIT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    values: Vec<T>,
}

impl<T: Scalar> LatentCode<T> {
    /// Wraps 2d raw values as d pairs. The values are not normalized here;
    /// use [`normalize_pairs`] for that.
    pub fn from_values(values: Vec<T>) -> Self {
        assert!(
            values.len() % 2 == 0 && !values.is_empty(),
            "latent code needs a positive even value count, got {}",
            values.len()
        );
        Self { values }
    }

    pub fn d(&self) -> usize {
        self.values.len() / 2
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn pair(&self, i: usize) -> (T, T) {
        (self.values[2 * i], self.values[2 * i + 1])
    }

    /// Largest |x^2 + y^2 - 1| over all pairs.
    pub fn max_unit_deviation(&self) -> f64 {
        (0..self.d())
            .map(|i| {
                let (x, y) = self.pair(i);
                ((x * x + y * y).to_f64() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_unit(&self) -> bool {
        self.max_unit_deviation() <= UNIT_TOL
    }
}

/// Which latent space a run samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentSpaceKind {
    UnitComplex,
    UniformBox,
    Gaussian,
}

impl std::str::FromStr for LatentSpaceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit-complex" => Ok(Self::UnitComplex),
            "uniform-box" => Ok(Self::UniformBox),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(format!("unknown latent space '{other}'")),
        }
    }
}

impl std::fmt::Display for LatentSpaceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::UnitComplex => "unit-complex",
            Self::UniformBox => "uniform-box",
            Self::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LatentError {
    #[error("unit-complex codes come from sample_latent, not sample_baseline")]
    UnitComplexBaseline,
}

/// Draws d independent angles uniform on (-pi, pi] and projects each onto
/// its axes. Draws happen in 64-bit regardless of T, so the stream is
/// identical across precisions.
pub fn sample_latent<T: Scalar, R: Rng>(d: usize, rng: &mut R) -> LatentCode<T> {
    assert!(d >= 1, "latent dimension must be positive");
    let mut values = Vec::with_capacity(2 * d);
    for _ in 0..d {
        let alpha = sample_angle(rng);
        values.push(T::from_f64(alpha.cos()));
        values.push(T::from_f64(alpha.sin()));
    }
    LatentCode { values }
}

/// One angle uniform on (-pi, pi].
pub fn sample_angle<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    std::f64::consts::PI - std::f64::consts::TAU * u
}

/// Projects consecutive pairs onto the unit circle. Zero pairs map to zero
/// (the epsilon keeps the division defined); such codes fail [`LatentCode::is_unit`].
pub fn normalize_pairs<T: Scalar>(raw: &[T]) -> LatentCode<T> {
    assert!(
        raw.len() % 2 == 0 && !raw.is_empty(),
        "normalize_pairs needs a positive even length, got {}",
        raw.len()
    );
    let eps = T::from_f64(PAIR_EPS);
    let mut values = Vec::with_capacity(raw.len());
    for pair in raw.chunks_exact(2) {
        let (x, y) = (pair[0], pair[1]);
        let r = (x * x + y * y + eps).sqrt();
        values.push(x / r);
        values.push(y / r);
    }
    LatentCode { values }
}

/// Recovers the angle of each pair; range (-pi, pi].
pub fn angles_of<T: Scalar>(code: &LatentCode<T>) -> Vec<T> {
    (0..code.d())
        .map(|i| {
            let (x, y) = code.pair(i);
            y.atan2(x)
        })
        .collect()
}

/// Builds the code whose angles are the given values.
pub fn pairs_of<T: Scalar>(angles: &[T]) -> LatentCode<T> {
    assert!(!angles.is_empty());
    let mut values = Vec::with_capacity(2 * angles.len());
    for &a in angles {
        let a = a.to_f64();
        values.push(T::from_f64(a.cos()));
        values.push(T::from_f64(a.sin()));
    }
    LatentCode { values }
}

/// Draws a raw baseline latent vector of `d` independent components.
pub fn sample_baseline<T: Scalar, R: Rng>(
    kind: LatentSpaceKind,
    d: usize,
    rng: &mut R,
) -> Result<Vec<T>, LatentError> {
    assert!(d >= 1);
    match kind {
        LatentSpaceKind::UnitComplex => Err(LatentError::UnitComplexBaseline),
        LatentSpaceKind::UniformBox => Ok((0..d)
            .map(|_| T::from_f64(rng.random_range(-1.0..=1.0)))
            .collect()),
        LatentSpaceKind::Gaussian => Ok((0..d)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64(v)
            })
            .collect()),
    }
}

/// Two-sided Kolmogorov–Smirnov statistic of a sample against Uniform(-pi, pi].
pub fn ks_statistic_vs_uniform_angle(sample: &[f64]) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = (x + std::f64::consts::PI) / std::f64::consts::TAU;
        let hi = (i + 1) as f64 / n - f;
        let lo = f - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}
