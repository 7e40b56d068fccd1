//! Synthetic tasks: fast property-test substrates and a 28×28 digit corpus.

use super::Dataset;
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic flat-vector generators. Classes are balanced within ±1 and
/// every value is produced by the seed alone.
#[derive(Debug, Clone, PartialEq)]
pub enum SyntheticTask {
    /// Two Gaussian blobs in `[0,1]^dim`, centers 0.35·1 and 0.65·1.
    TwoGaussians { dim: usize, samples: usize, noise: f64, seed: u64 },
    /// Label = (x₀ > ½) xor (x₁ > ½) on jittered grid points.
    XorGrid { dim: usize, samples: usize, noise: f64, seed: u64 },
}

impl SyntheticTask {
    pub fn from_name(name: &str, dim: usize, samples: usize, noise: f64, seed: u64) -> Result<Self> {
        match name {
            "two-gaussians" => Ok(SyntheticTask::TwoGaussians { dim, samples, noise, seed }),
            "xor-grid" => Ok(SyntheticTask::XorGrid { dim, samples, noise, seed }),
            other => Err(Error::Config(format!("unknown synthetic generator: {other}"))),
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        match *self {
            SyntheticTask::TwoGaussians { dim, samples, noise, seed } => {
                if dim == 0 || samples == 0 {
                    return Err(Error::Validation("dim and samples must be positive".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut data = Vec::with_capacity(samples * dim);
                let mut labels = Vec::with_capacity(samples);
                for i in 0..samples {
                    let class = i % 2;
                    let center = if class == 0 { 0.35 } else { 0.65 };
                    for _ in 0..dim {
                        let v: f64 = center + noise * gaussian(&mut rng);
                        data.push(v.clamp(0.0, 1.0));
                    }
                    labels.push(class);
                }
                Ok(Dataset {
                    images: Tensor::new(vec![samples, dim], data)?,
                    labels,
                    class_count: 2,
                })
            }
            SyntheticTask::XorGrid { dim, samples, noise, seed } => {
                if dim < 2 || samples == 0 {
                    return Err(Error::Validation("xor-grid needs dim >= 2".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut data = Vec::with_capacity(samples * dim);
                let mut labels = Vec::with_capacity(samples);
                for i in 0..samples {
                    // cycle the four quadrants so labels stay balanced
                    let quadrant = i % 4;
                    let hi0 = quadrant & 1 == 1;
                    let hi1 = quadrant & 2 == 2;
                    let coord = |hi: bool, rng: &mut ChaCha8Rng| -> f64 {
                        let base = if hi { 0.75 } else { 0.25 };
                        (base + noise * gaussian(rng)).clamp(0.0, 1.0)
                    };
                    data.push(coord(hi0, &mut rng));
                    data.push(coord(hi1, &mut rng));
                    for _ in 2..dim {
                        data.push(rng.gen_range(0.0..1.0));
                    }
                    labels.push(usize::from(hi0 ^ hi1));
                }
                Ok(Dataset {
                    images: Tensor::new(vec![samples, dim], data)?,
                    labels,
                    class_count: 2,
                })
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniforms
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Segment endpoints in a unit box, seven-segment style with the usual
/// digit encodings.
///
/// ```text
///   A        (0,0)───(1,0)
/// F   B      │           │
///   G        (0,1)───(1,1)   y grows downward
/// E   C
///   D
/// ```
const SEG: [((f64, f64), (f64, f64)); 7] = [
    ((0.0, 0.0), (1.0, 0.0)), // A top
    ((1.0, 0.0), (1.0, 0.5)), // B upper right
    ((1.0, 0.5), (1.0, 1.0)), // C lower right
    ((0.0, 1.0), (1.0, 1.0)), // D bottom
    ((0.0, 0.5), (0.0, 1.0)), // E lower left
    ((0.0, 0.0), (0.0, 0.5)), // F upper left
    ((0.0, 0.5), (1.0, 0.5)), // G middle
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 2, 3],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

/// Deterministic 28×28 ten-class digit corpus in the exact dataset layout the
/// IDX loader produces: glyphs rendered from stroke templates with random
/// shift, rotation, scale, stroke width, intensity and pixel noise, then
/// quantized to the byte grid so IDX round-trips are lossless. Classes are
/// balanced within ±1.
pub fn synth_digits(samples: usize, seed: u64) -> Result<Dataset> {
    if samples == 0 {
        return Err(Error::Validation("samples must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 28usize;
    let mut data = Vec::with_capacity(samples * side * side);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % 10;
        labels.push(class);
        let cx = 13.5 + rng.gen_range(-2.0..2.0);
        let cy = 13.5 + rng.gen_range(-2.0..2.0);
        let slant = rng.gen_range(-0.20..0.20f64);
        let scale = 9.0 * rng.gen_range(0.80..1.12);
        let aspect = rng.gen_range(0.55..0.75);
        let thickness = rng.gen_range(0.9..1.6);
        let intensity = rng.gen_range(0.70..1.0);
        let (sin, cos) = slant.sin_cos();
        // glyph-space segments mapped into the image
        let segs: Vec<((f64, f64), (f64, f64))> = DIGIT_SEGMENTS[class]
            .iter()
            .map(|&si| {
                let ((x1, y1), (x2, y2)) = SEG[si];
                let map = |x: f64, y: f64| {
                    let gx = (x - 0.5) * scale * aspect;
                    let gy = (y - 0.5) * scale;
                    (cx + gx * cos - gy * sin, cy + gx * sin + gy * cos)
                };
                (map(x1, y1), map(x2, y2))
            })
            .collect();
        for py in 0..side {
            for px in 0..side {
                let mut v = 0.0f64;
                for &((x1, y1), (x2, y2)) in &segs {
                    let d = point_segment_distance(px as f64, py as f64, x1, y1, x2, y2);
                    let cov = (thickness + 0.5 - d).clamp(0.0, 1.0);
                    v = v.max(cov);
                }
                v = v * intensity + 0.09 * gaussian(&mut rng);
                // quantize to the byte grid the IDX format carries
                let byte = (v.clamp(0.0, 1.0) * 255.0).round();
                data.push(byte / 255.0);
            }
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![samples, 1, side, side], data)?,
        labels,
        class_count: 10,
    })
}

fn point_segment_distance(px: f64, py: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> f64 {
    let (dx, dy) = (x2 - x1, y2 - y1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x1) * dx + (py - y1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x1 + t * dx, y1 + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seed_deterministic_and_balanced() {
        for task in [
            SyntheticTask::TwoGaussians { dim: 8, samples: 101, noise: 0.1, seed: 3 },
            SyntheticTask::XorGrid { dim: 4, samples: 101, noise: 0.05, seed: 3 },
        ] {
            let a = task.generate().unwrap();
            let b = task.generate().unwrap();
            assert_eq!(a, b);
            let ones = a.labels.iter().filter(|&&l| l == 1).count();
            let zeros = a.labels.len() - ones;
            assert!(ones.abs_diff(zeros) <= 1, "unbalanced: {ones} vs {zeros}");
            assert!(a.images.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unknown_generator_name_is_config_error() {
        assert!(matches!(
            SyntheticTask::from_name("spiral", 2, 10, 0.1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn digit_corpus_is_balanced_quantized_and_deterministic() {
        let a = synth_digits(105, 7).unwrap();
        let b = synth_digits(105, 7).unwrap();
        assert_eq!(a, b);
        let mut hist = [0usize; 10];
        for &l in &a.labels {
            hist[l] += 1;
        }
        assert!(hist.iter().all(|&c| c == 10 || c == 11));
        for &v in &a.images.data {
            assert!((0.0..=1.0).contains(&v));
            let byte = v * 255.0;
            assert!((byte - byte.round()).abs() < 1e-9, "pixel not on byte grid: {v}");
        }
        // different seeds give different pixels
        let c = synth_digits(105, 8).unwrap();
        assert_ne!(a.images.data, c.images.data);
    }

    #[test]
    fn digit_classes_look_distinct() {
        // mean per-class images should differ pairwise by a sizable margin
        let ds = synth_digits(400, 11).unwrap();
        let mut means = vec![vec![0.0f64; 784]; 10];
        let mut counts = [0usize; 10];
        for (i, &l) in ds.labels.iter().enumerate() {
            counts[l] += 1;
            for p in 0..784 {
                means[l][p] += ds.images.data[i * 784 + p];
            }
        }
        for (c, m) in means.iter_mut().enumerate() {
            for v in m.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        for a in 0..10 {
            for b in a + 1..10 {
                let l1: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).abs()).sum();
                assert!(l1 > 8.0, "classes {a} and {b} are too similar: L1 {l1}");
            }
        }
    }
}
