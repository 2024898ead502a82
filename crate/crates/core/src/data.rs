//! Synthetic scale-variant shape classification.
//!
//! Each image shows one shape on a dark background. The class is the shape
//! family; the size is drawn independently, so the classifier must be
//! invariant to scale. Every sample is a pure function of `(seed, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First index of the test partition; training indices stay below it.
pub const TEST_OFFSET: u64 = 1 << 40;

/// Upper edges of the scale strata used for routing statistics.
pub const SCALE_BINS: [(f64, f64); 3] = [(0.2, 0.35), (0.35, 0.6), (0.6, 0.9)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    FilledSquare,
    HollowSquare,
    Cross,
    Disk,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::FilledSquare, Shape::HollowSquare, Shape::Cross, Shape::Disk];
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub noise_std: f64,
    pub fill: f64,
    pub jitter: bool,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 4,
            scale_min: 0.2,
            scale_max: 0.9,
            noise_std: 0.05,
            fill: 1.0,
            jitter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H×W×1` intensities in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Object extent as a fraction of the image side.
    pub scale: f64,
    pub index: u64,
}

/// Stratum of `scale` in [`SCALE_BINS`]; the last bin is closed.
pub fn scale_bin(scale: f64) -> usize {
    SCALE_BINS
        .iter()
        .position(|&(_, hi)| scale < hi)
        .unwrap_or(SCALE_BINS.len() - 1)
}

pub fn scale_bin_label(bin: usize) -> String {
    let (lo, hi) = SCALE_BINS[bin];
    let close = if bin + 1 == SCALE_BINS.len() { ']' } else { ')' };
    format!("[{lo},{hi}{close}")
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > Shape::ALL.len() {
            return Err(Error::Input(format!(
                "num_classes must be 1..={}, got {}",
                Shape::ALL.len(),
                self.num_classes
            )));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Input("scale range must satisfy 0 < min ≤ max ≤ 1".into()));
        }
        if self.height == 0 || self.width == 0 || !(self.noise_std >= 0.0) {
            return Err(Error::Input("image extent and noise must be positive".into()));
        }
        Ok(())
    }

    /// Renders sample `index`; the label is `index mod num_classes`.
    pub fn sample(&self, seed: u64, index: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let label = (index % self.num_classes as u64) as usize;
        let scale = if self.scale_max > self.scale_min {
            rng.gen_range(self.scale_min..self.scale_max)
        } else {
            self.scale_min
        };
        let (h, w) = (self.height as f64, self.width as f64);
        let side = scale * h.min(w);
        let half = side / 2.0;
        let (cy, cx) = if self.jitter {
            (rng.gen_range(half..=h - half), rng.gen_range(half..=w - half))
        } else {
            (h / 2.0, w / 2.0)
        };
        let noise = Normal::new(0.0, self.noise_std).expect("finite std");
        let mut data = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                let on = covers(Shape::ALL[label], dy, dx, half);
                let base = if on { self.fill } else { 0.0 };
                let n = if self.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((base + n).clamp(0.0, 1.0));
            }
        }
        Sample {
            image: Tensor::new(vec![self.height, self.width, 1], data).expect("H×W×1"),
            label,
            scale,
            index,
        }
    }

    pub fn generate(&self, seed: u64, start: u64, count: usize) -> Result<SyntheticDataset> {
        self.validate()?;
        let samples = (0..count as u64).map(|k| self.sample(seed, start + k)).collect();
        Ok(SyntheticDataset { samples })
    }

    pub fn test_set(&self, seed: u64, count: usize) -> Result<SyntheticDataset> {
        self.generate(seed, TEST_OFFSET, count)
    }
}

/// Whether a pixel centre at offset `(dy, dx)` from the object centre is inked.
fn covers(shape: Shape, dy: f64, dx: f64, half: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    // strokes stay at least one pixel wide at the smallest scale
    let stroke = (0.25 * half).max(1.0);
    match shape {
        Shape::FilledSquare => ay < half && ax < half,
        Shape::HollowSquare => ay < half && ax < half && (ay >= half - stroke || ax >= half - stroke),
        Shape::Cross => (ay < half && ax < stroke) || (ax < half && ay < stroke),
        Shape::Disk => dy * dy + dx * dx < half * half,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}
