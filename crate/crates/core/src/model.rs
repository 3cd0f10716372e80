//! Denoiser plus four-level encoder / three-level decoder with SST blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stt_tensor::ops::FRAME_TAPS;
use stt_tensor::{Conv3dGeometry, Tensor, Var};

use crate::nn::{Acb, Conv3d, Linear};
use crate::params::{ParamBuilder, Session};
use crate::sst::{Sst, SstConfig};
use crate::{Error, Result};

/// Output heads start near zero logits.
pub const HEAD_INIT_STD: f64 = 0.01;

/// Downsampling factor into encoder levels 2, 3 and 4.
pub const DOWN_FACTORS: [[usize; 3]; 3] = [[1, 2, 2], [1, 2, 2], [2, 2, 2]];

const DENOISE_HIDDEN: usize = 8;
/// Initial logit of the current frame's centre tap.
const DENOISE_CENTRE_LOGIT: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiserMode {
    KernelPredict,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel widths of encoder levels 1..4.
    pub widths: [usize; 4],
    /// SST gate per encoder level 1..4.
    pub encoder_sst: [bool; 4],
    /// SST gate per decoder level 1..3 (level 1 is full resolution).
    pub decoder_sst: [bool; 3],
    pub denoiser: DenoiserMode,
    /// Input patch `(T, H, W)`.
    pub patch: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 96],
            encoder_sst: [false, true, true, true],
            decoder_sst: [false, true, true],
            denoiser: DenoiserMode::KernelPredict,
            patch: [8, 64, 64],
        }
    }
}

impl ModelConfig {
    /// Total downsampling per axis between level 1 and level 4.
    pub fn stride_product() -> [usize; 3] {
        let mut p = [1; 3];
        for f in DOWN_FACTORS {
            for a in 0..3 {
                p[a] *= f[a];
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config("model.widths", "every width must be positive"));
        }
        let p = Self::stride_product();
        for (a, name) in ["T", "H", "W"].iter().enumerate() {
            if self.patch[a] == 0 || self.patch[a] % p[a] != 0 {
                return Err(Error::config(
                    "model.patch",
                    format!("{name} extent {} must be a positive multiple of {}", self.patch[a], p[a]),
                ));
            }
        }
        Ok(())
    }

    /// `(T, H, W)` at encoder level `l` (0-based).
    pub fn level_dims(&self, l: usize) -> [usize; 3] {
        let mut d = self.patch;
        for f in &DOWN_FACTORS[..l] {
            for a in 0..3 {
                d[a] /= f[a];
            }
        }
        d
    }
}

/// Kernel-predicting frame denoiser.
///
/// For every slice a small network sees the previous, current and next slice
/// and emits 27 softmax-normalized taps: three 3×3 kernels that are applied to
/// those slices and summed. Normalization makes constant inputs fixed points.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub conv: Conv3d,
    pub head: Linear,
}

impl Denoiser {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>) -> Self {
        let conv = Conv3d::same(&mut b.sub("conv"), 3, DENOISE_HIDDEN, [1, 3, 3]);
        let mut hb = b.sub("head");
        let weight = hb.normal("weight", &[DENOISE_HIDDEN, FRAME_TAPS], 0.01);
        let bias = hb.tensor(
            "bias",
            Tensor::from_fn(&[FRAME_TAPS], |i| if i == FRAME_TAPS / 2 { DENOISE_CENTRE_LOGIT } else { 0.0 }),
        );
        let head = Linear {
            weight,
            bias: Some(bias),
            in_features: DENOISE_HIDDEN,
            out_features: FRAME_TAPS,
        };
        Self { conv, head }
    }

    pub fn param_count() -> usize {
        Conv3d::param_count(3, DENOISE_HIDDEN, [1, 3, 3]) + Linear::param_count(DENOISE_HIDDEN, FRAME_TAPS, true)
    }

    /// Per-slice kernels `[T, 27]` for a `[T, H, W]` stack.
    pub fn predict_kernels<'t>(&self, s: &Session<'t, '_>, frames: Var<'t>) -> Result<Var<'t>> {
        let shape = frames.shape();
        let [t, h, w]: [usize; 3] = shape
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape("denoise", format!("expected [T, H, W], got {shape:?}")))?;
        let cur: Vec<usize> = (0..t).collect();
        let prev: Vec<usize> = (0..t).map(|i| i.saturating_sub(1)).collect();
        let next: Vec<usize> = (0..t).map(|i| (i + 1).min(t - 1)).collect();
        let stack: Vec<Var<'t>> = [prev, cur, next]
            .iter()
            .map(|idx| frames.index_select(0, idx)?.reshape(&[t, 1, 1, h, w]))
            .collect::<stt_tensor::Result<_>>()?;
        let feats = self.conv.forward(s, Var::concat(&stack, 1)?)?.relu();
        let pooled = feats.reshape(&[t, DENOISE_HIDDEN, h * w])?.mean_axis(2)?;
        Ok(self.head.forward(s, pooled)?.softmax(1)?)
    }

    /// Filters each `[T, H, W]` sample of an `[N, 1, T, H, W]` batch.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (n, dims) = (shape[0], [shape[2], shape[3], shape[4]]);
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let frames = x.narrow(0, i, 1)?.reshape(&dims)?;
            let kernels = self.predict_kernels(s, frames)?;
            outs.push(frames.frame_filter(kernels)?.reshape(&[1, 1, dims[0], dims[1], dims[2]])?);
        }
        Ok(if n == 1 { outs[0] } else { Var::concat(&outs, 0)? })
    }
}

/// One decoder level: upsample, pointwise conv, skip concat, ACB, optional SST.
#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: Conv3d,
    pub factor: [usize; 3],
    pub acb: Acb,
    pub sst: Option<Sst>,
}

#[derive(Clone, Debug)]
pub struct EncoderLevel {
    /// Strided conv from the previous level; absent at level 1.
    pub down: Option<Conv3d>,
    pub acb: Acb,
    pub sst: Option<Sst>,
}

/// Logits at input resolution, each `[N, T, H, W]`.
pub struct ModelOutput<'t> {
    pub semantic: Var<'t>,
    pub boundary: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct SttUnet {
    pub cfg: ModelConfig,
    pub denoiser: Option<Denoiser>,
    pub encoder: Vec<EncoderLevel>,
    /// Ordered deepest first: levels 3, 2, 1.
    pub decoder: Vec<DecoderLevel>,
    pub semantic_head: Conv3d,
    pub boundary_head: Conv3d,
}

fn down_conv<R: Rng>(b: &mut ParamBuilder<'_, R>, cin: usize, cout: usize, factor: [usize; 3]) -> Conv3d {
    let kernel = factor.map(|f| if f == 1 { 1 } else { 3 });
    let pad = factor.map(|f| if f == 1 { 0 } else { 1 });
    Conv3d::new(b, cin, cout, kernel, Conv3dGeometry::new(factor, pad))
}

impl SttUnet {
    /// Builds the network; registration order fixes checkpoint order.
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &ModelConfig, sst: &SstConfig) -> Result<Self> {
        cfg.validate()?;
        sst.validate()?;
        let w = cfg.widths;
        let denoiser = match cfg.denoiser {
            DenoiserMode::KernelPredict => Some(Denoiser::new(&mut b.sub("denoiser"))),
            DenoiserMode::Identity => None,
        };
        let mut encoder = Vec::with_capacity(4);
        for l in 0..4 {
            let mut lb = b.sub(&format!("enc{}", l + 1));
            let down = (l > 0).then(|| down_conv(&mut lb.sub("down"), w[l - 1], w[l], DOWN_FACTORS[l - 1]));
            let cin = if l == 0 { 1 } else { w[l] };
            let acb = Acb::new(&mut lb.sub("acb"), cin, w[l]);
            let sst = cfg.encoder_sst[l].then(|| Sst::new(&mut lb.sub("sst"), w[l], sst));
            encoder.push(EncoderLevel { down, acb, sst });
        }
        let mut decoder = Vec::with_capacity(3);
        for l in (0..3).rev() {
            let mut lb = b.sub(&format!("dec{}", l + 1));
            let up = Conv3d::same(&mut lb.sub("up"), w[l + 1], w[l], [1, 1, 1]);
            let acb = Acb::new(&mut lb.sub("acb"), 2 * w[l], w[l]);
            let sst = cfg.decoder_sst[l].then(|| Sst::new(&mut lb.sub("sst"), w[l], sst));
            decoder.push(DecoderLevel {
                up,
                factor: DOWN_FACTORS[l],
                acb,
                sst,
            });
        }
        let head = |b: &mut ParamBuilder<'_, R>, name: &str| {
            Conv3d::with_std(&mut b.sub(name), w[0], 1, [1, 1, 1], Conv3dGeometry::UNIT, HEAD_INIT_STD)
        };
        let semantic_head = head(b, "head.semantic");
        let boundary_head = head(b, "head.boundary");
        Ok(Self {
            cfg: cfg.clone(),
            denoiser,
            encoder,
            decoder,
            semantic_head,
            boundary_head,
        })
    }

    /// Runs `[N, 1, T, H, W]` images in `[0, 1]` through the network.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<ModelOutput<'t>> {
        let shape = x.shape();
        let p = self.cfg.patch;
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != p {
            return Err(Error::shape(
                "model forward",
                format!("input {shape:?}, config expects [N, 1, {}, {}, {}]", p[0], p[1], p[2]),
            ));
        }
        let n = shape[0];
        let mut h = match &self.denoiser {
            Some(d) => d.forward(s, x)?,
            None => x,
        };
        let mut skips = Vec::with_capacity(4);
        for level in &self.encoder {
            if let Some(down) = &level.down {
                h = down.forward(s, h)?;
            }
            h = level.acb.forward(s, h)?;
            if let Some(sst) = &level.sst {
                h = sst.forward_ncthw(s, h)?;
            }
            skips.push(h);
        }
        skips.pop();
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = level.up.forward(s, h.upsample_trilinear(level.factor)?)?;
            h = level.acb.forward(s, Var::concat(&[up, skip], 1)?)?;
            if let Some(sst) = &level.sst {
                h = sst.forward_ncthw(s, h)?;
            }
        }
        let out = [n, p[0], p[1], p[2]];
        Ok(ModelOutput {
            semantic: self.semantic_head.forward(s, h)?.reshape(&out)?,
            boundary: self.boundary_head.forward(s, h)?.reshape(&out)?,
        })
    }
}

/// Trainable scalars per named layer group, in registration order.
pub fn parameter_breakdown(cfg: &ModelConfig, sst: &SstConfig) -> Vec<(String, usize)> {
    let conv = |cin: usize, cout: usize, k: [usize; 3]| {
        if cin == 0 || cout == 0 {
            0
        } else {
            Conv3d::param_count(cin, cout, k)
        }
    };
    let acb = |cin: usize, cout: usize| conv(cin, cout, [1, 3, 3]) + 2 * conv(cout, cout, [3, 3, 3]);
    let w = cfg.widths;
    let mut out = Vec::new();
    if cfg.denoiser == DenoiserMode::KernelPredict {
        out.push(("denoiser".to_string(), Denoiser::param_count()));
    }
    for l in 0..4 {
        if l > 0 {
            let k = DOWN_FACTORS[l - 1].map(|f| if f == 1 { 1 } else { 3 });
            out.push((format!("enc{}.down", l + 1), conv(w[l - 1], w[l], k)));
        }
        let cin = if l == 0 { 1 } else { w[l] };
        out.push((format!("enc{}.acb", l + 1), acb(cin, w[l])));
        if cfg.encoder_sst[l] {
            out.push((format!("enc{}.sst", l + 1), sst.param_count(w[l])));
        }
    }
    for l in (0..3).rev() {
        out.push((format!("dec{}.up", l + 1), conv(w[l + 1], w[l], [1, 1, 1])));
        out.push((format!("dec{}.acb", l + 1), acb(2 * w[l], w[l])));
        if cfg.decoder_sst[l] {
            out.push((format!("dec{}.sst", l + 1), sst.param_count(w[l])));
        }
    }
    out.push(("head.semantic".to_string(), conv(w[0], 1, [1, 1, 1])));
    out.push(("head.boundary".to_string(), conv(w[0], 1, [1, 1, 1])));
    out
}

/// Total trainable scalar count, computable for any widths including zero.
pub fn count_parameters(cfg: &ModelConfig, sst: &SstConfig) -> usize {
    parameter_breakdown(cfg, sst).iter().map(|(_, n)| n).sum()
}
