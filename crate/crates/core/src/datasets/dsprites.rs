//! DSprites-style sprites with shape sampled conditionally on orientation.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPES: usize = 3;
pub const SCALES: usize = 6;
pub const ORIENTATIONS: usize = 40;
pub const POSITIONS: usize = 32;
pub const QUADRANTS: usize = 4;

/// Latent factors of one sprite. Color is fixed: white shape on black.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorTuple {
    /// 0 square, 1 ellipse, 2 heart.
    pub shape: usize,
    pub scale: usize,
    pub orientation: usize,
    pub x: usize,
    pub y: usize,
}

impl FactorTuple {
    pub fn new(shape: usize, scale: usize, orientation: usize, x: usize, y: usize) -> Result<Self> {
        let checks = [
            ("shape", shape, SHAPES),
            ("scale", scale, SCALES),
            ("orientation", orientation, ORIENTATIONS),
            ("x", x, POSITIONS),
            ("y", y, POSITIONS),
        ];
        for (name, v, n) in checks {
            if v >= n {
                return Err(Error::Parameter(format!("{name} index {v} outside 0..{n}")));
            }
        }
        Ok(Self { shape, scale, orientation, x, y })
    }
}

/// Unnormalized sampling weight `1 + 10[(o/40)^3 + (s/3)^3]`.
pub fn dsprites_weight(orientation: usize, shape: usize) -> Result<f64> {
    if orientation >= ORIENTATIONS || shape >= SHAPES {
        return Err(Error::Parameter(format!("weight index out of range: orientation {orientation}, shape {shape}")));
    }
    let o = orientation as f64 / ORIENTATIONS as f64;
    let s = shape as f64 / SHAPES as f64;
    Ok(1.0 + 10.0 * (o.powi(3) + s.powi(3)))
}

/// Quadrant of the orientation angle, using half-open quadrants.
pub fn dsprites_sensitive(orientation: usize) -> Result<usize> {
    if orientation >= ORIENTATIONS {
        return Err(Error::Parameter(format!("orientation {orientation} outside 0..{ORIENTATIONS}")));
    }
    Ok(orientation / (ORIENTATIONS / QUADRANTS))
}

fn shape_weights(orientation: usize) -> [f64; SHAPES] {
    std::array::from_fn(|s| dsprites_weight(orientation, s).expect("indices in range"))
}

/// Shape distribution implied by the weights, averaged over the (uniform)
/// orientations of one quadrant.
pub fn shape_conditional(quadrant: usize) -> Result<[f64; SHAPES]> {
    if quadrant >= QUADRANTS {
        return Err(Error::Parameter(format!("quadrant {quadrant} outside 0..{QUADRANTS}")));
    }
    let per = ORIENTATIONS / QUADRANTS;
    let mut out = [0.0; SHAPES];
    for o in quadrant * per..(quadrant + 1) * per {
        let w = shape_weights(o);
        let total: f64 = w.iter().sum();
        for (acc, wi) in out.iter_mut().zip(w) {
            *acc += wi / total / per as f64;
        }
    }
    Ok(out)
}

/// Draws factor tuples: orientation, scale and position uniform, shape
/// proportional to the weight given the orientation. Sampling is i.i.d.
pub fn sample_dsprites_factors(n: usize, seed: u64) -> Vec<FactorTuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables: Vec<WeightedIndex<f64>> =
        (0..ORIENTATIONS).map(|o| WeightedIndex::new(shape_weights(o)).expect("positive weights")).collect();
    (0..n)
        .map(|_| {
            let orientation = rng.gen_range(0..ORIENTATIONS);
            let shape = tables[orientation].sample(&mut rng);
            FactorTuple {
                shape,
                scale: rng.gen_range(0..SCALES),
                orientation,
                x: rng.gen_range(0..POSITIONS),
                y: rng.gen_range(0..POSITIONS),
            }
        })
        .collect()
}

fn inside(shape: usize, u: f64, v: f64) -> bool {
    match shape {
        0 => u.abs() <= 1.0 && v.abs() <= 1.0,
        1 => u * u + 4.0 * v * v <= 1.0,
        _ => {
            // Implicit heart curve, point up along -v in image coordinates.
            let a = 1.2 * u;
            let b = -1.2 * v + 0.1;
            let r = a * a + b * b - 1.0;
            r * r * r - a * a * b * b * b <= 0.0
        }
    }
}

/// Rasterizes one sprite into an `R x R` binary image (row-major).
pub fn render_dsprite(f: &FactorTuple, resolution: usize) -> Vec<f64> {
    let r = resolution as f64;
    let scale = 0.5 + 0.1 * f.scale as f64;
    let half = 0.18 * r * scale;
    let step = 1.0 / (POSITIONS - 1) as f64;
    let cx = (0.2 + 0.6 * f.x as f64 * step) * r;
    let cy = (0.2 + 0.6 * f.y as f64 * step) * r;
    let theta = std::f64::consts::TAU * f.orientation as f64 / ORIENTATIONS as f64;
    let (sin, cos) = theta.sin_cos();
    let mut img = vec![0.0; resolution * resolution];
    for row in 0..resolution {
        for col in 0..resolution {
            let dx = (col as f64 + 0.5 - cx) / half;
            let dy = (row as f64 + 0.5 - cy) / half;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            if inside(f.shape, u, v) {
                img[row * resolution + col] = 1.0;
            }
        }
    }
    img
}

/// `n` rendered sprites with S = orientation quadrant and Y = shape.
pub fn sample_dsprites_unfair(n: usize, resolution: usize, seed: u64) -> Result<LabeledBatch> {
    if n == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    if !matches!(resolution, 16 | 32 | 64) {
        return Err(Error::Parameter(format!("resolution {resolution} not in {{16, 32, 64}}")));
    }
    let factors = sample_dsprites_factors(n, seed);
    let mut data = Vec::with_capacity(n * resolution * resolution);
    for f in &factors {
        data.extend(render_dsprite(f, resolution));
    }
    let features = Tensor::new(vec![n, 1, resolution, resolution], data)?;
    let sensitive = factors.iter().map(|f| f.orientation / (ORIENTATIONS / QUADRANTS)).collect();
    let labels = factors.iter().map(|f| f.shape).collect();
    LabeledBatch::new(features, sensitive, QUADRANTS, Some(labels), SHAPES)
}
