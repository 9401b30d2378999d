//! Labeled image sets and the synthetic receptive-field task.
//!
//! Each synthetic image is white Gaussian noise made periodic along one
//! direction: the pixel at `p + r·u_k` repeats the pixel at `p`, where the
//! class `k` picks `u_k` among horizontal, vertical and the two diagonals.
//! Within any window narrower than `r` the image is plain white noise for
//! every class, so a filter has to cover the offset `r·u_k` to see the
//! repetition and `r` sets the receptive field the task needs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// `[N, C, H, W]` images with labels `< num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let [n, _, _, _] = images.dims4()?;
        if n != labels.len() {
            return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the samples at `idx` into one batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(&[idx.len(), c, h, w], data)?, labels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Correlation at offset 1.
    SmallStructure,
    /// Correlation at offset 7.
    LargeStructure,
}

impl ScaleMode {
    pub fn radius(self) -> usize {
        match self {
            ScaleMode::SmallStructure => 1,
            ScaleMode::LargeStructure => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

const DIRECTIONS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub scale_mode: ScaleMode,
    /// Overrides the radius implied by `scale_mode`.
    pub radius: Option<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Standard deviation of the Gaussian background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            height: 24,
            width: 24,
            num_classes: 4,
            scale_mode: ScaleMode::LargeStructure,
            radius: None,
            train_samples: 4000,
            test_samples: 1000,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn radius(&self) -> usize {
        self.radius.unwrap_or(self.scale_mode.radius())
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.radius();
        if r == 0 || 2 * r >= self.height.min(self.width) {
            return Err(Error::invalid(format!(
                "radius {r} must be positive and below half the image size {}x{}",
                self.height, self.width
            )));
        }
        if !(2..=DIRECTIONS.len()).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "synthetic task supports 2 to {} classes, got {}",
                DIRECTIONS.len(),
                self.num_classes
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise level must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

fn render(cfg: &SyntheticTaskConfig, label: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w, r) = (cfg.height as isize, cfg.width as isize, cfg.radius() as isize);
    let (dy, dx) = DIRECTIONS[label];
    let (sy, sx) = (r * dy, r * dx);
    let field: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let inside = |y: isize, x: isize| (0..h).contains(&y) && (0..w).contains(&x);
    let mut img = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            // every pixel copies the first pixel of its chain along -r·u
            let (mut py, mut px) = (y, x);
            while inside(py - sy, px - sx) {
                py -= sy;
                px -= sx;
            }
            img.push(field[(py * w + px) as usize] + noise.sample(rng));
        }
    }
    img
}

/// Deterministic split of the synthetic task; sample `i` has label `i % K`
/// and its own random stream, so generation order does not matter.
pub fn generate_dataset(cfg: &SyntheticTaskConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let (n, tag) = match split {
        Split::Train => (cfg.train_samples, 0u64),
        Split::Test => (cfg.test_samples, 1u64),
    };
    let images = parallel::map_indexed(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream((tag << 48) | i as u64);
        render(cfg, i % cfg.num_classes, &mut rng)
    });
    let data = images.into_iter().flatten().collect();
    let labels = (0..n).map(|i| i % cfg.num_classes).collect();
    Dataset::new(Tensor::new(&[n, 1, cfg.height, cfg.width], data)?, labels, cfg.num_classes)
}
