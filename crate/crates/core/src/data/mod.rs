//! Datasets, splits, augmentation and batch assembly.

mod augment;
mod io;
mod synthetic;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wsrpn_autodiff::{Float, Tensor};

use crate::metrics::GroundTruthBox;

pub use augment::{augment, gaussian_blur, AugmentOutcome};
pub use io::{
    load_dataset, load_image, read_classes, read_pgm, write_dataset, write_pgm, DatasetPaths,
};
pub use synthetic::{generate_synthetic, synthetic_dataset, SyntheticSpec, TEXTURES};

/// One grayscale image with image-level labels; `boxes` is for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patient: String,
    /// Row-major `side x side` pixels in `[0, 1]`.
    pub image: Vec<f32>,
    pub labels: Vec<bool>,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub side: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn ground_truth(&self, indices: &[usize]) -> Vec<Vec<GroundTruthBox>> {
        indices
            .iter()
            .map(|&i| self.samples[i].boxes.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Patients owning at least one boxed image are shuffled with `seed` and halved
/// into validation (first half, rounded up) and test; everyone else is train.
pub fn assign_splits(dataset: &Dataset, seed: u64) -> Split {
    let mut boxed: Vec<&str> = dataset
        .samples
        .iter()
        .filter(|s| !s.boxes.is_empty())
        .map(|s| s.patient.as_str())
        .collect();
    boxed.sort_unstable();
    boxed.dedup();
    if boxed.is_empty() {
        log::warn!("no bounding boxes: every sample goes to the training split");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    boxed.shuffle(&mut rng);
    let n_val = boxed.len().div_ceil(2);
    let (val_p, test_p) = boxed.split_at(n_val);
    let mut split = Split::default();
    for (i, s) in dataset.samples.iter().enumerate() {
        let p = s.patient.as_str();
        if val_p.contains(&p) {
            split.val.push(i);
        } else if test_p.contains(&p) {
            split.test.push(i);
        } else {
            split.train.push(i);
        }
    }
    split
}

/// Pixel mean and standard deviation used to normalize network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl NormStats {
    pub fn compute(dataset: &Dataset, indices: &[usize]) -> Self {
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for &i in indices {
            for &v in &dataset.samples[i].image {
                let v = v as f64;
                sum += v;
                sq += v * v;
            }
            n += dataset.samples[i].image.len();
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        Self {
            mean,
            std: var.sqrt().max(1e-6),
        }
    }
}

/// A batch as seen by the training loss: normalized pixels and labels, no boxes.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    /// `[B, S, S, 1]`.
    pub images: Tensor<F>,
    pub labels: Vec<Vec<bool>>,
}

pub fn normalized_tensor<F: Float>(images: &[&[f32]], side: usize, norm: NormStats) -> Tensor<F> {
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        data.extend(
            img.iter()
                .map(|&v| F::from_f64((v as f64 - norm.mean) / norm.std)),
        );
    }
    Tensor::new(vec![images.len(), side, side, 1], data).expect("square images of the dataset side")
}

/// Unaugmented batch of `indices`.
pub fn eval_batch<F: Float>(dataset: &Dataset, indices: &[usize], norm: NormStats) -> Batch<F> {
    let imgs: Vec<&[f32]> = indices
        .iter()
        .map(|&i| dataset.samples[i].image.as_slice())
        .collect();
    Batch {
        images: normalized_tensor(&imgs, dataset.side, norm),
        labels: indices
            .iter()
            .map(|&i| dataset.samples[i].labels.clone())
            .collect(),
    }
}

/// Two views of every image in `indices`: rows `0..B` are the first views and
/// rows `B..2B` the second, each independently augmented when `augment_views`.
pub fn paired_batch<F: Float>(
    dataset: &Dataset,
    indices: &[usize],
    norm: NormStats,
    augment_views: bool,
    rng: &mut ChaCha8Rng,
) -> Batch<F> {
    let side = dataset.side;
    let mut views: Vec<Vec<f32>> = Vec::with_capacity(indices.len() * 2);
    for _ in 0..2 {
        for &i in indices {
            let img = &dataset.samples[i].image;
            views.push(if augment_views {
                augment(img, side, rng.random()).image
            } else {
                img.clone()
            });
        }
    }
    let refs: Vec<&[f32]> = views.iter().map(Vec::as_slice).collect();
    let labels = indices.iter().map(|&i| dataset.samples[i].labels.clone());
    Batch {
        images: normalized_tensor(&refs, side, norm),
        labels: labels.clone().chain(labels).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BBox;

    fn sample(id: &str, patient: &str, boxed: bool) -> Sample {
        Sample {
            id: id.into(),
            patient: patient.into(),
            image: vec![0.5; 4],
            labels: vec![boxed],
            boxes: if boxed {
                vec![GroundTruthBox {
                    class: 0,
                    bbox: BBox::new(0.5, 0.5, 0.2, 0.2),
                }]
            } else {
                vec![]
            },
        }
    }

    #[test]
    fn boxed_patients_never_train() {
        let ds = Dataset {
            class_names: vec!["a".into()],
            side: 2,
            samples: vec![
                sample("0", "p0", true),
                sample("1", "p0", false),
                sample("2", "p1", false),
                sample("3", "p2", true),
                sample("4", "p3", true),
            ],
        };
        let s = assign_splits(&ds, 1);
        assert_eq!(s.train, vec![2]);
        assert_eq!(s.val.len() + s.test.len(), 4);
        let val_has_0 = s.val.contains(&0);
        assert_eq!(val_has_0, s.val.contains(&1));
        assert_eq!(s, assign_splits(&ds, 1));
    }

    #[test]
    fn no_boxes_means_all_train() {
        let ds = Dataset {
            class_names: vec!["a".into()],
            side: 2,
            samples: vec![sample("0", "p0", false), sample("1", "p1", false)],
        };
        let s = assign_splits(&ds, 0);
        assert_eq!(s.train, vec![0, 1]);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn paired_batch_layout() {
        let ds = Dataset {
            class_names: vec!["a".into()],
            side: 2,
            samples: vec![sample("0", "p0", true), sample("1", "p1", false)],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = paired_batch::<f64>(&ds, &[1, 0], NormStats::default(), false, &mut rng);
        assert_eq!(b.images.shape(), &[4, 2, 2, 1]);
        assert_eq!(
            b.labels,
            vec![vec![false], vec![true], vec![false], vec![true]]
        );
    }
}
