//! Blob-pathology images with exact boxes. Every class paints a distinct
//! texture inside its box on a noisy, slowly varying background.

use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Result, WsrpnError};
use crate::metrics::{BBox, GroundTruthBox};

/// Class names in texture order; class `c` uses texture `c`.
pub const TEXTURES: [&str; 6] = ["disk", "ring", "stripes", "checker", "dark", "cross"];

const PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    /// Relative weights of drawing 0, 1, 2, ... boxes (capped at the class count).
    pub box_count_weights: Vec<f64>,
    /// Lower bound on boxes per image (used for evaluation images).
    pub min_boxes: usize,
    /// Box side range relative to the image side.
    pub blob_size: (f64, f64),
    /// Blob contrast over the background.
    pub intensity: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            image_size: 112,
            box_count_weights: vec![0.25, 0.45, 0.3, 0.0],
            min_boxes: 0,
            blob_size: (0.2, 0.4),
            intensity: 0.35,
            noise: 0.06,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(WsrpnError::Data(m));
        if self.num_classes == 0 || self.num_classes > TEXTURES.len() {
            return fail(format!(
                "synthetic data supports 1..={} classes, got {}",
                TEXTURES.len(),
                self.num_classes
            ));
        }
        let (lo, hi) = self.blob_size;
        let min_px = lo * self.image_size as f64;
        if !(lo > 0.0 && lo <= hi && hi <= 0.9) || min_px < 6.0 {
            return fail(format!(
                "blob size range ({lo}, {hi}) is incompatible with {} px images (need 6 px <= size, max <= 0.9)",
                self.image_size
            ));
        }
        if self.box_count_weights.iter().any(|w| !(*w >= 0.0)) {
            return fail("box count weights must be non-negative".into());
        }
        if self.min_boxes > self.num_classes {
            return fail(format!(
                "min_boxes {} exceeds the class count",
                self.min_boxes
            ));
        }
        Ok(())
    }
}

fn paint(
    img: &mut [f32],
    side: usize,
    px: (usize, usize, usize, usize),
    texture: usize,
    intensity: f32,
) {
    let (x0, y0, x1, y1) = px;
    let (w, h) = ((x1 - x0) as f64, (y1 - y0) as f64);
    let period = ((w.min(h) / 5.0).round() as usize).max(2);
    for y in y0..y1 {
        for x in x0..x1 {
            // unit-box coordinates of the pixel center, in [-1, 1]
            let u = 2.0 * ((x - x0) as f64 + 0.5) / w - 1.0;
            let v = 2.0 * ((y - y0) as f64 + 0.5) / h - 1.0;
            let r = (u * u + v * v).sqrt();
            let on = match texture {
                0 => r <= 1.0,
                1 => (0.6..=1.0).contains(&r),
                2 => ((y - y0) / period) % 2 == 0,
                3 => ((x - x0) / period + (y - y0) / period) % 2 == 0,
                4 => r <= 1.0,
                _ => u.abs() <= 0.3 || v.abs() <= 0.3,
            };
            if on {
                let delta = if texture == 4 { -intensity } else { intensity };
                img[y * side + x] += delta;
            }
        }
    }
}

fn overlaps(
    a: (usize, usize, usize, usize),
    b: (usize, usize, usize, usize),
    margin: usize,
) -> bool {
    a.0 < b.2 + margin && b.0 < a.2 + margin && a.1 < b.3 + margin && b.1 < a.3 + margin
}

fn render(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    id: String,
    patient: String,
) -> Result<Sample> {
    let side = spec.image_size;
    let max_boxes = spec
        .box_count_weights
        .len()
        .saturating_sub(1)
        .min(spec.num_classes);
    let count = if spec.box_count_weights.iter().sum::<f64>() > 0.0 {
        let dist = WeightedIndex::new(&spec.box_count_weights)
            .map_err(|e| WsrpnError::Data(e.to_string()))?;
        dist.sample(rng)
    } else {
        0
    };
    let count = count.min(max_boxes).max(spec.min_boxes);

    let noise =
        Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| WsrpnError::Data(e.to_string()))?;
    let base = rng.random_range(0.25..0.35);
    let (gx, gy) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let mut img: Vec<f32> = (0..side * side)
        .map(|i| {
            let (x, y) = (
                (i % side) as f64 / side as f64 - 0.5,
                (i / side) as f64 / side as f64 - 0.5,
            );
            (base + gx * x + gy * y) as f32
        })
        .collect();

    let mut classes: Vec<usize> = sample_indices(rng, spec.num_classes, count).into_vec();
    classes.sort_unstable();
    let mut placed: Vec<(usize, (usize, usize, usize, usize))> = Vec::new();
    let (lo, hi) = spec.blob_size;
    for &c in &classes {
        for _ in 0..PLACEMENT_TRIES {
            let w = ((rng.random_range(lo..=hi) * side as f64).round() as usize).clamp(2, side);
            let h = ((rng.random_range(lo..=hi) * side as f64).round() as usize).clamp(2, side);
            let x0 = rng.random_range(0..=side - w);
            let y0 = rng.random_range(0..=side - h);
            let b = (x0, y0, x0 + w, y0 + h);
            if placed.iter().all(|(_, p)| !overlaps(*p, b, 2)) {
                placed.push((c, b));
                break;
            }
        }
    }
    if placed.len() < spec.min_boxes {
        return Err(WsrpnError::Data(format!(
            "could not place {} non-overlapping blobs; shrink blob_size",
            spec.min_boxes
        )));
    }
    let intensity = spec.intensity as f32;
    for (c, b) in &placed {
        paint(&mut img, side, *b, *c, intensity);
    }
    for v in &mut img {
        let x = (*v as f64 + noise.sample(rng)).clamp(0.0, 1.0);
        *v = ((x * 255.0).round() / 255.0) as f32;
    }
    let mut labels = vec![false; spec.num_classes];
    let boxes = placed
        .iter()
        .map(|&(c, (x0, y0, x1, y1))| {
            labels[c] = true;
            let s = side as f64;
            GroundTruthBox {
                class: c,
                bbox: BBox::from_corners(
                    x0 as f64 / s,
                    y0 as f64 / s,
                    x1 as f64 / s,
                    y1 as f64 / s,
                ),
            }
        })
        .collect();
    Ok(Sample {
        id,
        patient,
        image: img,
        labels,
        boxes,
    })
}

/// `n` samples; sample `i` depends only on `(spec, i)`.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<Sample>> {
    generate_range(spec, 0, n)
}

fn generate_range(spec: &SyntheticSpec, start: usize, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(WsrpnError::Data("need at least one sample".into()));
    }
    (start..start + n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            render(spec, &mut rng, format!("img{i:06}"), format!("pat{i:06}"))
        })
        .collect()
}

/// `n_train` label-only images followed by `n_eval` images with at least one
/// box each. Training boxes are dropped unless `keep_train_boxes`.
pub fn synthetic_dataset(
    spec: &SyntheticSpec,
    n_train: usize,
    n_eval: usize,
    keep_train_boxes: bool,
) -> Result<Dataset> {
    let mut samples = generate_range(spec, 0, n_train)?;
    if !keep_train_boxes {
        samples.iter_mut().for_each(|s| s.boxes.clear());
    }
    if n_eval > 0 {
        let eval_spec = SyntheticSpec {
            min_boxes: spec.min_boxes.max(1),
            ..spec.clone()
        };
        samples.extend(generate_range(&eval_spec, n_train, n_eval)?);
    }
    Ok(Dataset {
        class_names: TEXTURES[..spec.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        side: spec.image_size,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scenes() {
        let spec = SyntheticSpec {
            box_count_weights: vec![1.0],
            image_size: 32,
            blob_size: (0.25, 0.4),
            ..SyntheticSpec::default()
        };
        for s in generate_synthetic(&spec, 20).unwrap() {
            assert!(s.boxes.is_empty());
            assert!(s.labels.iter().all(|&l| !l));
        }
    }

    #[test]
    fn deterministic_and_consistent() {
        let spec = SyntheticSpec {
            num_classes: 6,
            box_count_weights: vec![0.1, 0.3, 0.3, 0.3],
            image_size: 64,
            blob_size: (0.15, 0.3),
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec, 30).unwrap();
        assert_eq!(a, generate_synthetic(&spec, 30).unwrap());
        for s in &a {
            assert!(s.boxes.len() <= 3);
            for c in 0..6 {
                let n = s.boxes.iter().filter(|b| b.class == c).count();
                assert!(n <= 1);
                assert_eq!(s.labels[c], n == 1);
            }
            for b in &s.boxes {
                let (x0, y0, x1, y1) = b.bbox.corners();
                assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 + 1e-12 && y1 <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn eval_images_have_boxes() {
        let spec = SyntheticSpec {
            image_size: 48,
            ..SyntheticSpec::default()
        };
        let ds = synthetic_dataset(&spec, 10, 10, false).unwrap();
        assert!(ds.samples[..10].iter().all(|s| s.boxes.is_empty()));
        assert!(ds.samples[10..].iter().all(|s| !s.boxes.is_empty()));
    }

    #[test]
    fn incompatible_blob_size() {
        let spec = SyntheticSpec {
            image_size: 16,
            blob_size: (0.1, 0.2),
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic(&spec, 1),
            Err(WsrpnError::Data(_))
        ));
        let spec = SyntheticSpec {
            blob_size: (0.5, 0.95),
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec, 1).is_err());
    }
}
