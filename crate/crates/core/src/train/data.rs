//! Seeded synthetic classification datasets.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    /// Four isotropic Gaussian clusters at the corners of a square.
    GaussianBlobs,
    /// Two interleaved noisy spirals.
    TwoSpirals,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianBlobs => "blobs",
            DatasetKind::TwoSpirals => "spirals",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            DatasetKind::GaussianBlobs => 4,
            DatasetKind::TwoSpirals => 2,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "blobs" => Ok(DatasetKind::GaussianBlobs),
            "spirals" => Ok(DatasetKind::TwoSpirals),
            _ => Err(Error::Config(format!("unknown dataset {s:?}"))),
        }
    }
}

/// Points in the plane with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `len x 2`.
    pub points: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.points[2 * i], self.points[2 * i + 1]]
    }

    pub fn generate(kind: DatasetKind, len: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            DatasetKind::GaussianBlobs => gaussian_blobs(len, rng),
            DatasetKind::TwoSpirals => two_spirals(len, rng),
        }
    }
}

const BLOB_CENTERS: [[f64; 2]; 4] = [[-2.0, -2.0], [2.0, -2.0], [-2.0, 2.0], [2.0, 2.0]];
const BLOB_STD: f64 = 0.75;

fn gaussian_blobs(len: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let noise = Normal::new(0.0, BLOB_STD).unwrap();
    let mut points = Vec::with_capacity(2 * len);
    let mut labels = Vec::with_capacity(len);
    for i in 0..len {
        let class = i % 4;
        let c = BLOB_CENTERS[class];
        points.push(c[0] + noise.sample(rng));
        points.push(c[1] + noise.sample(rng));
        labels.push(class);
    }
    Dataset {
        points,
        labels,
        classes: 4,
    }
}

fn two_spirals(len: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut points = Vec::with_capacity(2 * len);
    let mut labels = Vec::with_capacity(len);
    for i in 0..len {
        let class = i % 2;
        let t: f64 = rng.random_range(0.25..1.0);
        let angle = t * 3.0 * std::f64::consts::PI + class as f64 * std::f64::consts::PI;
        let r = 3.0 * t;
        points.push(r * angle.cos() + noise.sample(rng));
        points.push(r * angle.sin() + noise.sample(rng));
        labels.push(class);
    }
    Dataset {
        points,
        labels,
        classes: 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn balanced_and_seeded() {
        let a = Dataset::generate(DatasetKind::GaussianBlobs, 512, &mut ChaCha8Rng::seed_from_u64(3));
        let b = Dataset::generate(DatasetKind::GaussianBlobs, 512, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 128);
        }
        let s = Dataset::generate(DatasetKind::TwoSpirals, 100, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(s.classes, 2);
        assert_eq!(s.points.len(), 200);
    }

    #[test]
    fn names_parse() {
        for k in [DatasetKind::GaussianBlobs, DatasetKind::TwoSpirals] {
            assert_eq!(k.name().parse::<DatasetKind>().unwrap(), k);
        }
    }
}
