//! Dense channel-major rasters of `f64` values.
//!
//! A [`LatentGrid`] is the value that flows through every stage of the
//! engine: clean images, noisy latents, noise draws and noise predictions
//! all share this representation.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Channel-major (`C × H × W`) grid of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    shape: Shape,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid(format!("grid shape {shape} has a zero dimension")));
        }
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "grid shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Grid of i.i.d. standard normal draws.
    pub fn gaussian<G: GaussianSource + ?Sized>(shape: Shape, noise: &mut G) -> Self {
        let mut data = vec![0.0; shape.len()];
        noise.fill(&mut data);
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    /// The `channels`-long color vector at pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.shape.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.height * self.shape.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.height * self.shape.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_shape(&self, other: &LatentGrid) -> Result<()> {
        ensure_shape(self.shape, other.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentGrid {
        LatentGrid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `a·self + b·other`, elementwise.
    pub fn lin_comb(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.ensure_shape(other)?;
        Ok(LatentGrid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn add(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.lin_comb(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.lin_comb(1.0, other, -1.0)
    }

    pub fn scale(&self, k: f64) -> LatentGrid {
        self.map(|v| k * v)
    }

    /// `self += k·other`
    pub fn axpy(&mut self, k: f64, other: &LatentGrid) -> Result<()> {
        self.ensure_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &LatentGrid) -> Result<f64> {
        self.ensure_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Root-mean-square difference per element.
    pub fn rms_diff(&self, other: &LatentGrid) -> Result<f64> {
        Ok((self.dist_sq(other)? / self.len() as f64).sqrt())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.len() as f64
    }

    /// Non-overlapping `k × k` block average; `H` and `W` must be divisible by `k`.
    pub fn box_downsample(&self, k: usize) -> Result<LatentGrid> {
        if k == 0 || self.height() % k != 0 || self.width() % k != 0 {
            return Err(Error::invalid(format!(
                "cannot box-average {} by factor {k}",
                self.shape
            )));
        }
        let out_shape = Shape::new(self.channels(), self.height() / k, self.width() / k);
        let mut out = LatentGrid::zeros(out_shape);
        let inv = 1.0 / (k * k) as f64;
        for c in 0..out_shape.channels {
            for y in 0..out_shape.height {
                for x in 0..out_shape.width {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += self.get(c, y * k + dy, x * k + dx);
                        }
                    }
                    out.set(c, y, x, acc * inv);
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn ensure_shape(expected: Shape, actual: Shape) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

/// Source of standard normal draws.
///
/// Every seeded RNG is a source; [`ZeroNoise`] exists so tests can switch the
/// stochastic part of a sampler off without touching its formulas.
pub trait GaussianSource {
    fn next_gaussian(&mut self) -> f64;

    fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_gaussian();
        }
    }
}

impl<R: RngCore> GaussianSource for R {
    fn next_gaussian(&mut self) -> f64 {
        StandardNormal.sample(self)
    }
}

/// A noise source that always yields zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl GaussianSource for ZeroNoise {
    fn next_gaussian(&mut self) -> f64 {
        0.0
    }
}

/// Deterministic RNG used for every seeded stream in the engine.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
