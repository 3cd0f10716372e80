//! Segmentation BCE, the mask discriminator and the adversarial objective.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stt_tensor::{Conv3dGeometry, Tensor, Var};

use crate::labels::LabelVolume;
use crate::nn::Conv3d;
use crate::params::{ParamBuilder, Session};
use crate::{Error, Result};

const DISC_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the adversarial term in the total loss.
    pub lambda: f64,
    /// Weight of the discriminator-output matching term.
    pub lambda1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lambda1: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("losses.lambda", self.lambda), ("losses.lambda1", self.lambda1)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_unit_range(what: &'static str, t: &Tensor, binary: bool) -> Result<()> {
    let ok = t
        .data()
        .iter()
        .all(|&v| if binary { v == 0.0 || v == 1.0 } else { (0.0..=1.0).contains(&v) });
    if ok {
        Ok(())
    } else {
        Err(Error::MaskRange { what })
    }
}

/// Mean binary cross-entropy of `logits` against a `{0, 1}` target.
pub fn bce_loss<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if logits.shape() != target.shape() {
        return Err(Error::shape("bce_loss", format!("{:?} vs {:?}", logits.shape(), target.shape())));
    }
    check_unit_range("bce target", target, true)?;
    Ok(logits.bce_with_logits(target, None)?)
}

/// Two stride-2 convolutions over `CONCAT(image, mask)` and a global mean.
///
/// Returns logits; `D(F) = sigmoid(logit)`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
}

impl Discriminator {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>) -> Self {
        let geom = Conv3dGeometry::new([2, 2, 2], [1, 1, 1]);
        Self {
            conv1: Conv3d::new(&mut b.sub("conv1"), 2, DISC_HIDDEN, [3, 3, 3], geom),
            conv2: Conv3d::new(&mut b.sub("conv2"), DISC_HIDDEN, 1, [3, 3, 3], geom),
        }
    }

    pub fn param_count() -> usize {
        Conv3d::param_count(2, DISC_HIDDEN, [3, 3, 3]) + Conv3d::param_count(DISC_HIDDEN, 1, [3, 3, 3])
    }

    /// `image` and `mask` are `[N, T, H, W]`; the result is `[N]` logits.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, image: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        if shape.len() != 4 || mask.shape() != shape {
            return Err(Error::shape("discriminator", format!("{shape:?} vs {:?}", mask.shape())));
        }
        let n = shape[0];
        let five = [n, 1, shape[1], shape[2], shape[3]];
        let f = Var::concat(&[image.reshape(&five)?, mask.reshape(&five)?], 1)?;
        let h = self.conv1.forward(s, f)?.relu();
        let z = self.conv2.forward(s, h)?;
        let per_sample = z.shape()[1..].iter().product();
        Ok(z.reshape(&[n, per_sample])?.mean_axis(1)?)
    }
}

/// `−[log D(real) + log(1 − D(fake))]`, batch mean, from logits.
pub fn discriminator_loss<'t>(z_real: Var<'t>, z_fake: Var<'t>) -> Result<Var<'t>> {
    Ok(z_real.neg().softplus().add(z_fake.softplus())?.mean())
}

/// `−log D(fake) + λ₁·|D(real) − D(fake)|`, batch mean, from logits.
pub fn generator_loss<'t>(z_real: Var<'t>, z_fake: Var<'t>, lambda1: f64) -> Result<Var<'t>> {
    let adv = z_fake.neg().softplus();
    let gap = z_real.sigmoid().sub(z_fake.sigmoid())?.abs().scale(lambda1);
    Ok(adv.add(gap)?.mean())
}

pub struct AdversarialLosses<'t> {
    pub gen: Var<'t>,
    pub disc: Var<'t>,
}

/// Both sides of the foreground-background adversarial game.
///
/// `frozen` and `live` bind the same discriminator parameters as constants
/// and as trainable leaves. The generator loss sees the frozen copy with the
/// live prediction; the discriminator loss sees the live copy with a
/// detached prediction. Gradients of `gen` therefore reach only `m_pred`
/// and gradients of `disc` reach only the discriminator.
pub fn fg_bg_adversarial_loss<'t>(
    disc: &Discriminator,
    frozen: &Session<'t, '_>,
    live: &Session<'t, '_>,
    image: Var<'t>,
    m_pred: Var<'t>,
    m_gt: &Tensor,
    lambda1: f64,
) -> Result<AdversarialLosses<'t>> {
    check_unit_range("predicted mask", &m_pred.value(), false)?;
    check_unit_range("ground-truth mask", m_gt, false)?;
    let tape = m_pred.tape();
    let gt = tape.constant(m_gt.clone());
    let image = image.detach();
    let gen = {
        let z_real = disc.forward(frozen, image, gt)?;
        let z_fake = disc.forward(frozen, image, m_pred)?;
        generator_loss(z_real, z_fake, lambda1)?
    };
    let disc_loss = {
        let z_real = disc.forward(live, image, gt)?;
        let z_fake = disc.forward(live, image, m_pred.detach())?;
        discriminator_loss(z_real, z_fake)?
    };
    Ok(AdversarialLosses { gen, disc: disc_loss })
}

/// `bce(semantic) + bce(boundary) + λ·gen_loss`.
pub fn total_loss<'t>(bce_semantic: Var<'t>, bce_boundary: Var<'t>, gen: Option<Var<'t>>, lambda: f64) -> Result<Var<'t>> {
    let bce = bce_semantic.add(bce_boundary)?;
    Ok(match gen {
        Some(g) if lambda != 0.0 => bce.add(g.scale(lambda))?,
        _ => bce,
    })
}

/// Instance voxels with an in-plane 4-neighbour of a different label.
///
/// Voxels on the volume edge are not marked on account of the edge alone.
pub fn boundary_target(labels: &LabelVolume) -> Tensor {
    let [t, h, w] = labels.dims();
    let l = labels.labels();
    Tensor::from_fn(&[t, h, w], |i| {
        let v = l[i];
        if v == 0 {
            return 0.0;
        }
        let (y, x) = ((i / w) % h, i % w);
        let differs = (y > 0 && l[i - w] != v)
            || (y + 1 < h && l[i + w] != v)
            || (x > 0 && l[i - 1] != v)
            || (x + 1 < w && l[i + 1] != v);
        differs as u8 as f64
    })
}

/// Binary foreground mask of a label volume as `[T, H, W]` floats.
pub fn semantic_target(labels: &LabelVolume) -> Tensor {
    let [t, h, w] = labels.dims();
    let l = labels.labels();
    Tensor::from_fn(&[t, h, w], |i| (l[i] != 0) as u8 as f64)
}
