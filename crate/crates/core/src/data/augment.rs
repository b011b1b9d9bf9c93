use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Augmented pixels plus the transforms that were drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub image: Vec<f32>,
    /// `(brightness, contrast)` factors when the jitter fired.
    pub jitter: Option<(f64, f64)>,
    /// Blur standard deviation in pixels when the blur fired.
    pub blur_sigma: Option<f64>,
}

/// Brightness/contrast jitter (factors in `[0.8, 1.2]`) and Gaussian blur
/// (`σ ∈ [0.1, 2]` px), each applied with probability 1/2. Geometry is untouched.
pub fn augment(image: &[f32], side: usize, seed: u64) -> AugmentOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_jitter = rng.random_bool(0.5);
    let do_blur = rng.random_bool(0.5);
    let mut out = image.to_vec();
    let mut jitter = None;
    if do_jitter {
        let b = rng.random_range(0.8..=1.2);
        let c = rng.random_range(0.8..=1.2);
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / out.len().max(1) as f64;
        for v in &mut out {
            *v = ((((*v as f64) - mean) * c + mean) * b).clamp(0.0, 1.0) as f32;
        }
        jitter = Some((b, c));
    }
    let mut blur_sigma = None;
    if do_blur {
        let s = rng.random_range(0.1..=2.0);
        out = gaussian_blur(&out, side, s);
        blur_sigma = Some(s);
    }
    AugmentOutcome {
        image: out,
        jitter,
        blur_sigma,
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Separable Gaussian blur with a normalized kernel of radius `ceil(3σ)` and
/// mirror boundary handling.
pub fn gaussian_blur(image: &[f32], side: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0f32; src.len()];
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0f64;
                for (t, w) in kernel.iter().enumerate() {
                    let off = t as isize - radius;
                    let (sx, sy) = if horizontal {
                        (reflect(x as isize + off, side), y)
                    } else {
                        (x, reflect(y as isize + off, side))
                    };
                    acc += w * src[sy * side + sx] as f64;
                }
                dst[y * side + x] = acc as f32;
            }
        }
        dst
    };
    let h = pass(image, true);
    pass(&h, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(side: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..side * side).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn identity_when_both_transforms_miss() {
        let img = noise_image(16, 0);
        let seed = (0..1000u64)
            .find(|&s| {
                let o = augment(&img, 16, s);
                o.jitter.is_none() && o.blur_sigma.is_none()
            })
            .expect("a quarter of seeds skip both transforms");
        assert_eq!(augment(&img, 16, seed).image, img);
    }

    #[test]
    fn blur_preserves_mean() {
        let img = noise_image(64, 1);
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        for sigma in [0.1, 0.7, 2.0] {
            let b = gaussian_blur(&img, 64, sigma);
            assert!((mean(&b) - mean(&img)).abs() < 1e-3);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let img = noise_image(16, 2);
        let outs: Vec<Vec<f32>> = (0..8).map(|s| augment(&img, 16, s).image).collect();
        assert!(outs.windows(2).any(|w| w[0] != w[1]));
        assert_eq!(augment(&img, 16, 5), augment(&img, 16, 5));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-6, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }
}
