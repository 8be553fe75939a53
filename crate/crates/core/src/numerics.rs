//! Dense vectors and reproducible random streams.
//!
//! Every random draw in the simulator comes from a [`RandomStream`]. A stream
//! is identified by a 256-bit key derived from the master seed and a path of
//! structured ids (device, round, purpose), so the draws a component sees do
//! not depend on how many other draws happened before it or on thread
//! scheduling.

use std::fmt;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

/// A dense vector of finite `f64` values.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting NaN and infinite entries.
    pub fn new(elements: Vec<f64>) -> Result<Self> {
        if let Some(i) = elements.iter().position(|x| !x.is_finite()) {
            return invalid(format!("non-finite entry {} at index {i}", elements[i]));
        }
        Ok(Vector(elements))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    /// Wraps values produced by internal arithmetic on finite inputs.
    pub(crate) fn from_raw(elements: Vec<f64>) -> Self {
        debug_assert!(elements.iter().all(|x| x.is_finite()));
        Vector(elements)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector(self.0.iter().map(|x| c * x).collect())
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Vector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Population (divide-by-n) standard deviation.
    pub fn population_std(&self) -> f64 {
        let m = self.mean();
        (self.0.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / self.0.len() as f64).sqrt()
    }

    pub fn dist(&self, other: &Vector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn check_len(&self, expected: usize, what: &str) -> Result<()> {
        if self.len() != expected {
            return invalid(format!(
                "{what}: dimension mismatch (expected {expected}, got {})",
                self.len()
            ));
        }
        Ok(())
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Vec<f64> {
        v.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// What a stream is used for. Part of the stream id, so draws for different
/// purposes never share a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Root,
    Noise,
    Channel,
    Data,
    Partition,
    Init,
    Batch,
    Warmup,
    Smoothness,
    Custom(u32),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Root => 0,
            Purpose::Noise => 1,
            Purpose::Channel => 2,
            Purpose::Data => 3,
            Purpose::Partition => 4,
            Purpose::Init => 5,
            Purpose::Batch => 6,
            Purpose::Warmup => 7,
            Purpose::Smoothness => 8,
            Purpose::Custom(c) => 1_000 + c as u64,
        }
    }
}

/// Structured stream id: (device index, round index, purpose tag).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub device: u32,
    pub round: u64,
    pub purpose: Purpose,
}

impl StreamId {
    pub fn new(device: u32, round: u64, purpose: Purpose) -> Self {
        StreamId { device, round, purpose }
    }

    pub fn purpose(purpose: Purpose) -> Self {
        StreamId::new(0, 0, purpose)
    }
}

/// A value-like handle on a deterministic random sequence.
///
/// Deriving a child never mutates the parent; generators obtained from the
/// same stream always replay the same draws.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomStream {
    key: [u8; 32],
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"otafl-stream-root");
        h.update(seed.to_le_bytes());
        RandomStream {
            key: h.finalize().into(),
        }
    }

    pub fn derive(&self, id: StreamId) -> RandomStream {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(id.device.to_le_bytes());
        h.update(id.round.to_le_bytes());
        h.update(id.purpose.tag().to_le_bytes());
        RandomStream {
            key: h.finalize().into(),
        }
    }

    /// Shorthand for deriving a child keyed only by purpose.
    pub fn child(&self, purpose: Purpose) -> RandomStream {
        self.derive(StreamId::purpose(purpose))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key)
    }
}

impl fmt::Debug for RandomStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "RandomStream({:02x}{:02x}{:02x}{:02x}..)",
            self.key[0], self.key[1], self.key[2], self.key[3]
        )
    }
}

/// `dim` i.i.d. zero-mean Gaussian draws with the given variance.
pub fn gaussian_vector(stream: &RandomStream, dim: usize, variance: f64) -> Result<Vector> {
    if dim == 0 {
        return invalid("gaussian_vector: dim must be positive");
    }
    if !(variance >= 0.0) || !variance.is_finite() {
        return invalid(format!("gaussian_vector: variance must be >= 0, got {variance}"));
    }
    if variance == 0.0 {
        return Ok(Vector::zeros(dim));
    }
    let sd = variance.sqrt();
    let mut rng = stream.rng();
    Ok(Vector::from_raw(
        (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect(),
    ))
}

/// Rayleigh scale parameter giving the requested mean.
pub fn rayleigh_scale(mean: f64) -> f64 {
    mean / (std::f64::consts::PI / 2.0).sqrt()
}

/// One Rayleigh draw from an existing generator.
pub fn rayleigh_sample<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    // 1 - u lies in (0, 1], keeping the logarithm finite.
    let u: f64 = rng.random();
    let draw = rayleigh_scale(mean) * (-2.0 * (1.0 - u).ln()).sqrt();
    if draw > 0.0 {
        draw
    } else {
        f64::MIN_POSITIVE
    }
}

/// One Rayleigh-distributed draw with expected value `mean`.
pub fn rayleigh_draw(stream: &RandomStream, mean: f64) -> Result<f64> {
    if !(mean > 0.0) || !mean.is_finite() {
        return invalid(format!("rayleigh_draw: mean must be positive, got {mean}"));
    }
    Ok(rayleigh_sample(&mut stream.rng(), mean))
}
