use rand::Rng;
use stt_tensor::Tensor;

use crate::labels::LabelVolume;
use crate::{Error, Result};

/// Chance that a draw insists on containing foreground.
pub const FOREGROUND_BIAS: f64 = 0.9;
/// Redraws allowed while looking for foreground.
pub const MAX_REDRAWS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub corner: [usize; 3],
    pub image: Tensor,
    pub labels: LabelVolume,
}

/// `[T, H, W]` block of `image` at `corner`.
pub fn crop_image(image: &Tensor, corner: [usize; 3], dims: [usize; 3]) -> Tensor {
    let s = image.shape();
    let src = image.data();
    let mut out = Vec::with_capacity(dims.iter().product());
    for t in 0..dims[0] {
        for h in 0..dims[1] {
            let start = ((corner[0] + t) * s[1] + corner[1] + h) * s[2] + corner[2];
            out.extend_from_slice(&src[start..start + dims[2]]);
        }
    }
    Tensor::new(&dims, out).expect("crop extents are positive")
}

/// Uniform random sub-volume, biased towards patches containing foreground.
pub fn sample_patch<R: Rng>(image: &Tensor, labels: &LabelVolume, dims: [usize; 3], rng: &mut R) -> Result<Patch> {
    let vd = labels.dims();
    if image.shape() != vd {
        return Err(Error::shape("sample_patch", format!("image {:?} vs labels {vd:?}", image.shape())));
    }
    if (0..3).any(|a| dims[a] == 0 || dims[a] > vd[a]) {
        return Err(Error::shape("sample_patch", format!("patch {dims:?} does not fit volume {vd:?}")));
    }
    let insist = rng.random_bool(FOREGROUND_BIAS);
    let draw = |rng: &mut R| -> [usize; 3] { std::array::from_fn(|a| rng.random_range(0..=vd[a] - dims[a])) };
    let mut corner = draw(rng);
    let mut crop = labels.crop(corner, dims);
    if insist {
        for _ in 0..MAX_REDRAWS {
            if crop.labels().iter().any(|&l| l != 0) {
                break;
            }
            corner = draw(rng);
            crop = labels.crop(corner, dims);
        }
    }
    Ok(Patch {
        corner,
        image: crop_image(image, corner, dims),
        labels: crop,
    })
}
