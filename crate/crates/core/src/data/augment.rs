//! Random geometric and photometric augmentation of `[T, H, W]` patches.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use stt_tensor::Tensor;

use crate::labels::LabelVolume;
use crate::{Error, Result};

/// Per-op application probabilities and magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_h: f64,
    pub flip_w: f64,
    pub flip_t: f64,
    /// Quarter-turn rotation in-plane; skipped when `H != W`.
    pub rot90: f64,
    pub intensity: f64,
    /// Bound on brightness shift and relative contrast change.
    pub max_jitter: f64,
    pub noise: f64,
    pub max_noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_h: 0.5,
            flip_w: 0.5,
            flip_t: 0.5,
            rot90: 0.5,
            intensity: 0.5,
            max_jitter: 0.1,
            noise: 0.5,
            max_noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_h: 0.0,
            flip_w: 0.0,
            flip_t: 0.0,
            rot90: 0.0,
            intensity: 0.0,
            noise: 0.0,
            ..Self::default()
        }
    }

    pub fn geometric_only() -> Self {
        Self {
            intensity: 0.0,
            noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("augment.flip_h", self.flip_h),
            ("augment.flip_w", self.flip_w),
            ("augment.flip_t", self.flip_t),
            ("augment.rot90", self.rot90),
            ("augment.intensity", self.intensity),
            ("augment.noise", self.noise),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, format!("probability {p} outside [0, 1]")));
            }
        }
        if !(0.0..=0.1).contains(&self.max_jitter) {
            return Err(Error::config("augment.max_jitter", "must lie in [0, 0.1]"));
        }
        if !(0.0..=0.02).contains(&self.max_noise_sigma) {
            return Err(Error::config("augment.max_noise_sigma", "must lie in [0, 0.02]"));
        }
        Ok(())
    }
}

/// A voxel permutation: `out[i] = in[map[i]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Remap {
    pub dims: [usize; 3],
    pub map: Vec<usize>,
}

impl Remap {
    pub fn identity(dims: [usize; 3]) -> Self {
        Self {
            dims,
            map: (0..dims.iter().product()).collect(),
        }
    }

    /// Composes a transform given as output coords → input coords.
    fn then(self, f: impl Fn([usize; 3]) -> [usize; 3]) -> Self {
        let [t, h, w] = self.dims;
        let mut map = Vec::with_capacity(self.map.len());
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    let [a, b, c] = f([ti, hi, wi]);
                    map.push(self.map[(a * h + b) * w + c]);
                }
            }
        }
        Self { dims: self.dims, map }
    }

    pub fn flip(self, axis: usize) -> Self {
        let n = self.dims[axis];
        self.then(|mut p| {
            p[axis] = n - 1 - p[axis];
            p
        })
    }

    /// Counter-clockwise quarter turns in the `(H, W)` plane; requires `H == W`.
    pub fn rot90(self, turns: usize) -> Self {
        let n = self.dims[1];
        debug_assert_eq!(n, self.dims[2]);
        let mut r = self;
        for _ in 0..turns % 4 {
            r = r.then(|[t, h, w]| [t, w, n - 1 - h]);
        }
        r
    }

    pub fn apply_image(&self, x: &Tensor) -> Tensor {
        let d = x.data();
        Tensor::new(x.shape(), self.map.iter().map(|&i| d[i]).collect()).expect("same shape")
    }

    pub fn apply_labels(&self, l: &LabelVolume) -> LabelVolume {
        let d = l.labels();
        LabelVolume::new(self.dims, self.map.iter().map(|&i| d[i]).collect()).expect("same shape")
    }
}

/// Draws and applies one augmentation; labels follow the geometric part.
pub fn augment<R: Rng>(image: &Tensor, labels: &LabelVolume, cfg: &AugmentConfig, rng: &mut R) -> (Tensor, LabelVolume) {
    let dims = labels.dims();
    let mut remap = Remap::identity(dims);
    if rng.random_bool(cfg.flip_h) {
        remap = remap.flip(1);
    }
    if rng.random_bool(cfg.flip_w) {
        remap = remap.flip(2);
    }
    if rng.random_bool(cfg.flip_t) {
        remap = remap.flip(0);
    }
    if dims[1] == dims[2] && rng.random_bool(cfg.rot90) {
        remap = remap.rot90(rng.random_range(1..4));
    }
    let mut out = remap.apply_image(image);
    if rng.random_bool(cfg.intensity) {
        let j = cfg.max_jitter;
        let shift = rng.random_range(-j..=j);
        let gain = 1.0 + rng.random_range(-j..=j);
        let mean = out.sum() / out.len() as f64;
        out = out.map(|v| ((v - mean) * gain + mean + shift).clamp(0.0, 1.0));
    }
    if rng.random_bool(cfg.noise) {
        let sigma = rng.random_range(0.0..=cfg.max_noise_sigma);
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        for v in out.data_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    (out, remap.apply_labels(labels))
}
