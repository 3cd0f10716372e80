//! Synthetic EM-like volumes: bent ellipsoids with bright rims on a dim field.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use stt_tensor::Tensor;

use crate::labels::LabelVolume;
use crate::post::{connected_components_3d, Connectivity};
use crate::{Error, Result};

pub const BACKGROUND: f64 = 0.25;
pub const INTERIOR: f64 = 0.55;
pub const RIM: f64 = 0.85;
/// Any threshold between background and interior separates noiseless support.
pub const SUPPORT_THRESHOLD: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Volume `(T, H, W)`.
    pub dims: [usize; 3],
    /// Inclusive instance count range.
    pub instances: [usize; 2],
    /// Semi-axis ranges in voxels: along T, the in-plane major and minor axes.
    pub semi_axis_t: [f64; 2],
    pub semi_axis_major: [f64; 2],
    pub semi_axis_minor: [f64; 2],
    /// Range of the in-plane bend curvature.
    pub bend: [f64; 2],
    pub noise_sigma: f64,
    /// Chance that an instance is placed in contact with an earlier one.
    pub touch_prob: f64,
    /// Unlabeled blobs of foreground-like intensity.
    pub distractors: usize,
    /// Amplitude of a smooth background texture.
    pub texture: f64,
    /// Placement attempts per instance before giving up.
    pub max_attempts: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: [8, 64, 64],
            instances: [3, 6],
            semi_axis_t: [2.0, 3.0],
            semi_axis_major: [6.0, 10.0],
            semi_axis_minor: [3.5, 5.0],
            bend: [0.0, 0.04],
            noise_sigma: 0.03,
            touch_prob: 0.1,
            distractors: 0,
            texture: 0.0,
            max_attempts: 400,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [t, h, w] = self.dims;
        if t < 8 || h < 32 || w < 32 {
            return Err(Error::config("synth.dims", format!("{:?} is below the minimum (8, 32, 32)", self.dims)));
        }
        if self.instances[0] < 1 || self.instances[0] > self.instances[1] {
            return Err(Error::config("synth.instances", "need 1 ≤ min ≤ max"));
        }
        for (name, r) in [
            ("synth.semi_axis_t", self.semi_axis_t),
            ("synth.semi_axis_major", self.semi_axis_major),
            ("synth.semi_axis_minor", self.semi_axis_minor),
        ] {
            if !(r[0] >= 0.5 && r[0] <= r[1]) {
                return Err(Error::config(name, "need 0.5 ≤ min ≤ max"));
            }
        }
        if !(self.bend[0] >= 0.0 && self.bend[0] <= self.bend[1]) {
            return Err(Error::config("synth.bend", "need 0 ≤ min ≤ max"));
        }
        if !(self.noise_sigma >= 0.0 && self.texture >= 0.0) {
            return Err(Error::config("synth.noise_sigma", "noise and texture must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.touch_prob) {
            return Err(Error::config("synth.touch_prob", "must lie in [0, 1]"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("synth.max_attempts", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Shape {
    centre: [f64; 3],
    axes: [f64; 3],
    angle: f64,
    bend: f64,
}

impl Shape {
    fn draw<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Self {
        let range = |r: [f64; 2], rng: &mut R| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
        let axes = [
            range(spec.semi_axis_t, rng),
            range(spec.semi_axis_major, rng),
            range(spec.semi_axis_minor, rng),
        ];
        let centre = std::array::from_fn(|a| rng.random_range(0.0..spec.dims[a] as f64));
        let bend = range(spec.bend, rng) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            centre,
            axes,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            bend,
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1], p[2] - self.centre[2]];
        let (s, c) = self.angle.sin_cos();
        let u = d[1] * c + d[2] * s;
        let v = -d[1] * s + d[2] * c - self.bend * u * u;
        (d[0] / self.axes[0]).powi(2) + (u / self.axes[1]).powi(2) + (v / self.axes[2]).powi(2) <= 1.0
    }

    /// Lattice voxels inside the shape, or `None` when it leaves the volume.
    fn voxels(&self, dims: [usize; 3]) -> Option<Vec<usize>> {
        let reach = self.axes[1] + self.axes[2] + self.bend.abs() * self.axes[1] * self.axes[1];
        let radius = [self.axes[0], reach, reach];
        let mut out = Vec::new();
        let mut lo = [0isize; 3];
        let mut hi = [0isize; 3];
        for a in 0..3 {
            lo[a] = (self.centre[a] - radius[a]).floor() as isize - 1;
            hi[a] = (self.centre[a] + radius[a]).ceil() as isize + 1;
        }
        for t in lo[0]..=hi[0] {
            for h in lo[1]..=hi[1] {
                for w in lo[2]..=hi[2] {
                    if !self.contains([t as f64, h as f64, w as f64]) {
                        continue;
                    }
                    let inside = [t, h, w].iter().zip(dims).all(|(&q, n)| q >= 0 && q < n as isize);
                    if !inside {
                        return None;
                    }
                    out.push((t as usize * dims[1] + h as usize) * dims[2] + w as usize);
                }
            }
        }
        Some(out)
    }
}

fn neighbours26(dims: [usize; 3], i: usize, mut f: impl FnMut(usize)) {
    let (t, h, w) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
    for dt in -1..=1isize {
        for dh in -1..=1isize {
            for dw in -1..=1isize {
                let (a, b, c) = (t as isize + dt, h as isize + dh, w as isize + dw);
                if (dt, dh, dw) != (0, 0, 0)
                    && a >= 0
                    && b >= 0
                    && c >= 0
                    && (a as usize) < dims[0]
                    && (b as usize) < dims[1]
                    && (c as usize) < dims[2]
                {
                    f((a as usize * dims[1] + b as usize) * dims[2] + c as usize);
                }
            }
        }
    }
}

fn is_connected(voxels: &[usize], dims: [usize; 3]) -> bool {
    let mut mask = vec![false; dims.iter().product()];
    for &v in voxels {
        mask[v] = true;
    }
    connected_components_3d(&mask, dims, Connectivity::TwentySix)
        .map(|cc| cc.instance_count() == 1)
        .unwrap_or(false)
}

/// Image in `[0, 1]` and the instance labels that generated it.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<(Tensor, LabelVolume)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = spec.dims;
    let n: usize = dims.iter().product();
    let wanted = rng.random_range(spec.instances[0]..=spec.instances[1]);
    let mut labels = vec![0u32; n];
    for id in 1..=wanted as u32 {
        let touch = id > 1 && rng.random_bool(spec.touch_prob);
        let mut placed = false;
        for attempt in 0..spec.max_attempts {
            // Contact is required only during the first half of the budget.
            let need_contact = touch && attempt < spec.max_attempts / 2;
            let shape = Shape::draw(spec, &mut rng);
            let Some(vox) = shape.voxels(dims) else { continue };
            if vox.is_empty() || vox.iter().any(|&v| labels[v] != 0) {
                continue;
            }
            let mut contact = false;
            for &v in &vox {
                neighbours26(dims, v, |j| contact |= labels[j] != 0);
            }
            if contact != need_contact && !(touch && contact) {
                continue;
            }
            if !is_connected(&vox, dims) {
                continue;
            }
            for v in vox {
                labels[v] = id;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InfeasiblePacking {
                wanted,
                dims,
                attempts: spec.max_attempts,
            });
        }
    }
    let labels = LabelVolume::new(dims, labels)?;
    let image = render(spec, &labels, &mut rng);
    Ok((image, labels))
}

fn render<R: Rng>(spec: &SynthSpec, labels: &LabelVolume, rng: &mut R) -> Tensor {
    let dims = labels.dims();
    let rim = crate::losses::boundary_target(labels);
    let l = labels.labels();
    let mut values: Vec<f64> = (0..l.len())
        .map(|i| match (l[i], rim.data()[i]) {
            (0, _) => BACKGROUND,
            (_, r) if r > 0.0 => RIM,
            _ => INTERIOR,
        })
        .collect();
    if spec.texture > 0.0 {
        let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        for (i, v) in values.iter_mut().enumerate() {
            if l[i] == 0 {
                let (t, h, w) = ((i / (dims[1] * dims[2])) as f64, ((i / dims[2]) % dims[1]) as f64, (i % dims[2]) as f64);
                let wave = (0.9 * h + phase[0]).sin() * (0.7 * w + phase[1]).cos() + (0.5 * (h + w) + 0.8 * t + phase[2]).sin();
                *v += 0.5 * spec.texture * wave;
            }
        }
    }
    for _ in 0..spec.distractors {
        let centre: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.0..dims[a] as f64));
        let r = rng.random_range(1.0..2.5);
        let level = rng.random_range(INTERIOR..RIM);
        for (i, v) in values.iter_mut().enumerate() {
            if l[i] != 0 {
                continue;
            }
            let p = [(i / (dims[1] * dims[2])) as f64, ((i / dims[2]) % dims[1]) as f64, (i % dims[2]) as f64];
            let d2 = (2.0 * (p[0] - centre[0])).powi(2) + (p[1] - centre[1]).powi(2) + (p[2] - centre[2]).powi(2);
            if d2 <= r * r {
                *v = level;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for v in &mut values {
            *v += normal.sample(rng);
        }
    }
    for v in &mut values {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&dims, values).expect("dims are positive")
}
