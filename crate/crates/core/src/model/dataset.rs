//! Procedurally rendered image-classification data.
//!
//! Each class pairs one of five shapes (disk, square, triangle, plus, ring)
//! with its own hue, drawn at a random position and scale over a textured
//! grey background. Images are regenerated from the spec on
//! demand; nothing is stored.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const SHAPES: usize = 5;
const TRAIN_STREAM: u64 = 0x7472_6169_6e;
const TEST_STREAM: u64 = 0x7465_7374;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub classes: usize,
    pub image_side: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 2000,
            test_count: 600,
            classes: 10,
            image_side: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Plus,
    Ring,
}

impl Shape {
    fn from_index(i: usize) -> Shape {
        [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Plus, Shape::Ring][i % SHAPES]
    }

    /// Point test in coordinates relative to the centre, scaled by the radius.
    fn contains(self, dx: f64, dy: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= 1.0,
            Shape::Square => dx.abs() <= 0.8 && dy.abs() <= 0.8,
            Shape::Triangle => (-1.0..=0.7).contains(&dy) && dx.abs() <= (dy + 1.0) * 0.6,
            Shape::Plus => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

/// HSV to RGB with hue in turns.
fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=2 * SHAPES).contains(&self.classes) {
            return Err(Error::invalid(format!("class count must be in 2..=10, got {}", self.classes)));
        }
        if self.image_side < 8 {
            return Err(Error::invalid("image side must be at least 8"));
        }
        Ok(())
    }

    pub fn train(&self) -> Result<Dataset> {
        self.generate(TRAIN_STREAM, self.train_count)
    }

    pub fn test(&self) -> Result<Dataset> {
        self.generate(TEST_STREAM, self.test_count)
    }

    fn generate(&self, stream: u64, count: usize) -> Result<Dataset> {
        self.validate()?;
        let base = Rng::new(self.seed, stream);
        let mut order: Vec<usize> = (0..count).map(|i| i % self.classes).collect();
        base.split(u64::MAX).shuffle(&mut order);
        let images = order
            .iter()
            .enumerate()
            .map(|(i, &label)| self.render(label, &mut base.split(i as u64)))
            .collect();
        Ok(Dataset { images, labels: order })
    }

    /// Draws one image of class `label`.
    pub fn render(&self, label: usize, rng: &mut Rng) -> Tensor {
        let s = self.image_side;
        let unit = s as f64 / 32.0;
        let shape = Shape::from_index(label % SHAPES);
        let hue = label as f64 / self.classes as f64;

        let gray = rng.uniform_range(0.25, 0.75);
        let tint: Vec<f64> = (0..3).map(|_| gray + rng.uniform_range(-0.05, 0.05)).collect();
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                let theta = rng.uniform_range(0.0, std::f64::consts::PI);
                let freq = rng.uniform_range(0.15, 0.6) / unit;
                let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
                (theta.cos() * freq, theta.sin() * freq, phase, rng.uniform_range(0.02, 0.07))
            })
            .collect();
        let radius = rng.uniform_range(6.0, 10.0) * unit;
        let cx = rng.uniform_range(radius, s as f64 - radius);
        let cy = rng.uniform_range(radius, s as f64 - radius);
        let jitter = 0.25 / self.classes as f64;
        let color = hsv(
            hue + rng.uniform_range(-jitter, jitter),
            rng.uniform_range(0.3, 0.5),
            rng.uniform_range(0.7, 0.95),
        );

        let mut img = Tensor::zeros(&[3, s, s]);
        let data = img.as_mut_slice();
        for y in 0..s {
            for x in 0..s {
                let texture: f64 = waves
                    .iter()
                    .map(|&(kx, ky, ph, amp)| amp * (kx * x as f64 + ky * y as f64 + ph).sin())
                    .sum();
                let mut cover = 0.0;
                for sy in 0..3 {
                    for sx in 0..3 {
                        let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                        let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                        if shape.contains((px - cx) / radius, (py - cy) / radius) {
                            cover += 1.0 / 9.0;
                        }
                    }
                }
                for c in 0..3 {
                    let bg = tint[c] + texture + 0.02 * rng.normal();
                    let v = cover * color[c] + (1.0 - cover) * bg;
                    data[c * s * s + y * s + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}
