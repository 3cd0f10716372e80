//! Split spatio-temporal self-attention over channel-last `[N, T, H, W, C]` volumes.
//!
//! Spatial attention treats the `H·W` positions of each slice as tokens;
//! temporal attention treats the `T` slices at each position as tokens. The
//! two maps are fused, projected back to `C` channels and added to the input.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stt_tensor::Var;

use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamId, Session};
use crate::{Error, Result};

/// Largest number of in-plane tokens spatial attention accepts.
pub const MAX_SPATIAL_TOKENS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    DefConv,
    Concat,
    Addition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    Split,
    SpatialThenTemporal,
    TemporalThenSpatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SstConfig {
    /// Projection width; `None` uses the block's channel count.
    pub d_k: Option<usize>,
    pub fusion: Fusion,
    pub topology: Topology,
    /// Deformable kernel extents `(kT, kH, kW)`, each odd.
    pub deform_kernel: [usize; 3],
}

impl Default for SstConfig {
    fn default() -> Self {
        Self {
            d_k: None,
            fusion: Fusion::DefConv,
            topology: Topology::Split,
            deform_kernel: [1, 3, 3],
        }
    }
}

impl SstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_k == Some(0) {
            return Err(Error::config("sst.d_k", "must be positive"));
        }
        if self.deform_kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::config("sst.deform_kernel", "extents must be odd and positive"));
        }
        Ok(())
    }

    pub fn width(&self, d_model: usize) -> usize {
        self.d_k.unwrap_or(d_model)
    }

    fn taps(&self) -> usize {
        self.deform_kernel.iter().product()
    }

    /// Trainable scalars of one block with `d_model` channels.
    pub fn param_count(&self, d_model: usize) -> usize {
        if d_model == 0 {
            return 0;
        }
        let dk = self.width(d_model);
        let r = self.taps();
        let (first_in, second_in) = match self.topology {
            Topology::Split => (d_model, d_model),
            _ => (d_model, dk),
        };
        let attn = 3 * Linear::param_count(first_in, dk, false) + 3 * Linear::param_count(second_in, dk, false);
        let fusion = match (self.topology, self.fusion) {
            (Topology::Split, Fusion::DefConv) => Linear::param_count(dk, 3 * r, true) + dk * dk * r + dk,
            (Topology::Split, Fusion::Concat) => Linear::param_count(2 * dk, dk, true),
            _ => 0,
        };
        2 * d_model + attn + fusion + Linear::param_count(dk, d_model, true)
    }
}

/// The spatial and temporal maps before fusion, both `[N, T, H, W, d_k]`.
pub struct AttentionMaps<'t> {
    pub spatial: Var<'t>,
    pub temporal: Var<'t>,
}

/// Bias-free query, key and value projections.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Qkv {
    fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, fin: usize, dk: usize) -> Self {
        Self {
            q: Linear::new(&mut b.sub("q"), fin, dk, false),
            k: Linear::new(&mut b.sub("k"), fin, dk, false),
            v: Linear::new(&mut b.sub("v"), fin, dk, false),
        }
    }

    fn project<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<[Var<'t>; 3]> {
        Ok([self.q.forward(s, x)?, self.k.forward(s, x)?, self.v.forward(s, x)?])
    }
}

/// Row-stochastic weights `softmax(Q Kᵀ / √d_k)` for `[B, L, d_k]` inputs.
pub fn attention_weights<'t>(q: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
    let dk = *q.shape().last().unwrap();
    let scores = q.scale(1.0 / (dk as f64).sqrt()).matmul(k.transpose(1, 2)?)?;
    Ok(scores.softmax(2)?)
}

/// Scaled dot-product attention over the middle axis of `[B, L, d_k]` inputs.
pub fn attend<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    Ok(attention_weights(q, k)?.matmul(v)?)
}

fn dims5(op: &'static str, x: &Var<'_>) -> Result<[usize; 5]> {
    let s = x.shape();
    s.as_slice()
        .try_into()
        .map_err(|_| Error::shape(op, format!("expected [N, T, H, W, C], got {s:?}")))
}

/// Attention among the `H·W` positions of every slice.
pub fn spatial_attention<'t>(s: &Session<'t, '_>, x: Var<'t>, w: &Qkv) -> Result<Var<'t>> {
    let [n, t, h, wd, _] = dims5("spatial_attention", &x)?;
    if h * wd > MAX_SPATIAL_TOKENS {
        return Err(Error::shape(
            "spatial_attention",
            format!("{h}×{wd} tokens per slice exceeds the limit of {MAX_SPATIAL_TOKENS}"),
        ));
    }
    let dk = w.q.out_features;
    let tokens = |v: Var<'t>| v.reshape(&[n * t, h * wd, dk]);
    let [q, k, v] = w.project(s, x)?.map(tokens);
    Ok(attend(q?, k?, v?)?.reshape(&[n, t, h, wd, dk])?)
}

/// Attention among the `T` slices at every in-plane position.
pub fn temporal_attention<'t>(s: &Session<'t, '_>, x: Var<'t>, w: &Qkv) -> Result<Var<'t>> {
    let [n, t, h, wd, _] = dims5("temporal_attention", &x)?;
    let dk = w.q.out_features;
    let tokens = |v: Var<'t>| v.permute(&[0, 2, 3, 1, 4])?.reshape(&[n * h * wd, t, dk]);
    let [q, k, v] = w.project(s, x)?.map(tokens);
    let y = attend(q?, k?, v?)?.reshape(&[n, h, wd, t, dk])?;
    Ok(y.permute(&[0, 3, 1, 2, 4])?)
}

/// Deformable convolution of the spatial map with offsets read off the temporal map.
#[derive(Clone, Debug)]
pub struct DeformFusion {
    /// Per-position offsets, `3·|R|` outputs in tap-major `(dt, dh, dw)` order.
    pub offsets: Linear,
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: [usize; 3],
}

impl DeformFusion {
    fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, dk: usize, kernel: [usize; 3]) -> Self {
        let taps: usize = kernel.iter().product();
        let offsets = Linear::zeros(&mut b.sub("offsets"), dk, 3 * taps);
        let shape = [dk, dk, kernel[0], kernel[1], kernel[2]];
        let weight = b.normal("weight", &shape, (1.0 / (dk * taps) as f64).sqrt());
        let bias = b.fill("bias", &[dk], 0.0);
        Self {
            offsets,
            weight,
            bias,
            kernel,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, maps: &AttentionMaps<'t>) -> Result<Var<'t>> {
        if maps.spatial.shape() != maps.temporal.shape() {
            return Err(Error::shape(
                "deformable_fuse",
                format!("{:?} vs {:?}", maps.spatial.shape(), maps.temporal.shape()),
            ));
        }
        let [n, t, h, w, dk] = dims5("deformable_fuse", &maps.spatial)?;
        let offsets = self.offsets.forward(s, maps.temporal)?;
        let taps3 = offsets.shape()[4];
        let (weight, bias) = (s.var(self.weight), s.var(self.bias));
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let xs = maps.spatial.narrow(0, i, 1)?.reshape(&[t, h, w, dk])?;
            let off = offsets.narrow(0, i, 1)?.reshape(&[t, h, w, taps3])?;
            let y = xs.deform_conv3d(off, weight, Some(bias))?;
            let cout = y.shape()[3];
            outs.push(y.reshape(&[1, t, h, w, cout])?);
        }
        Ok(if n == 1 { outs[0] } else { Var::concat(&outs, 0)? })
    }
}

#[derive(Clone, Debug)]
pub enum FusionWeights {
    DefConv(DeformFusion),
    /// Channel concat followed by a pointwise projection back to `d_k`.
    Concat(Linear),
    Addition,
    /// Cascaded topologies have nothing to fuse.
    None,
}

/// One split spatio-temporal attention block with pre-norm and residual.
#[derive(Clone, Debug)]
pub struct Sst {
    pub cfg: SstConfig,
    pub d_model: usize,
    pub d_k: usize,
    pub norm: LayerNorm,
    pub spatial: Qkv,
    pub temporal: Qkv,
    pub fusion: FusionWeights,
    pub out: Linear,
}

impl Sst {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, d_model: usize, cfg: &SstConfig) -> Self {
        let dk = cfg.width(d_model);
        let norm = LayerNorm::new(&mut b.sub("norm"), d_model);
        let (spatial_in, temporal_in) = match cfg.topology {
            Topology::Split => (d_model, d_model),
            Topology::SpatialThenTemporal => (d_model, dk),
            Topology::TemporalThenSpatial => (dk, d_model),
        };
        let spatial = Qkv::new(&mut b.sub("spatial"), spatial_in, dk);
        let temporal = Qkv::new(&mut b.sub("temporal"), temporal_in, dk);
        let fusion = match (cfg.topology, cfg.fusion) {
            (Topology::Split, Fusion::DefConv) => {
                FusionWeights::DefConv(DeformFusion::new(&mut b.sub("fuse"), dk, cfg.deform_kernel))
            }
            (Topology::Split, Fusion::Concat) => FusionWeights::Concat(Linear::new(&mut b.sub("fuse"), 2 * dk, dk, true)),
            (Topology::Split, Fusion::Addition) => FusionWeights::Addition,
            _ => FusionWeights::None,
        };
        let out = Linear::new(&mut b.sub("out"), dk, d_model, true);
        Self {
            cfg: cfg.clone(),
            d_model,
            d_k: dk,
            norm,
            spatial,
            temporal,
            fusion,
            out,
        }
    }

    /// Both attention maps of an already normalized input.
    pub fn attention_maps<'t>(&self, s: &Session<'t, '_>, xn: Var<'t>) -> Result<AttentionMaps<'t>> {
        Ok(AttentionMaps {
            spatial: spatial_attention(s, xn, &self.spatial)?,
            temporal: temporal_attention(s, xn, &self.temporal)?,
        })
    }

    pub fn fuse<'t>(&self, s: &Session<'t, '_>, maps: &AttentionMaps<'t>) -> Result<Var<'t>> {
        match &self.fusion {
            FusionWeights::DefConv(d) => d.forward(s, maps),
            FusionWeights::Concat(proj) => proj.forward(s, Var::concat(&[maps.spatial, maps.temporal], 4)?),
            FusionWeights::Addition => Ok(maps.spatial.add(maps.temporal)?),
            FusionWeights::None => Err(Error::shape("sst fuse", "cascaded topology has no fusion")),
        }
    }

    /// `x + out(fuse(attention(norm(x))))` on `[N, T, H, W, C]`.
    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let [_, _, _, _, c] = dims5("sst_forward", &x)?;
        if c != self.d_model {
            return Err(Error::shape("sst_forward", format!("{c} channels, block expects {}", self.d_model)));
        }
        let xn = self.norm.forward(s, x)?;
        let mixed = match self.cfg.topology {
            Topology::Split => {
                let maps = self.attention_maps(s, xn)?;
                self.fuse(s, &maps)?
            }
            Topology::SpatialThenTemporal => {
                let xs = spatial_attention(s, xn, &self.spatial)?;
                temporal_attention(s, xs, &self.temporal)?
            }
            Topology::TemporalThenSpatial => {
                let xt = temporal_attention(s, xn, &self.temporal)?;
                spatial_attention(s, xt, &self.spatial)?
            }
        };
        Ok(x.add(self.out.forward(s, mixed)?)?)
    }

    /// Applies the block to a channel-first `[N, C, T, H, W]` volume.
    pub fn forward_ncthw<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.forward(s, x.permute(&[0, 2, 3, 4, 1])?)?;
        Ok(y.permute(&[0, 4, 1, 2, 3])?)
    }
}
