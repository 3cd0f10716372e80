//! Layers shared by the segmentation network and the discriminator.

use rand::Rng;
use stt_tensor::{Conv3dGeometry, Var};

use crate::params::{ParamBuilder, ParamId, Session};
use crate::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// 3D convolution over `[N, C, T, H, W]` with He-normal weights and zero bias.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv3dGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
}

impl Conv3d {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        geom: Conv3dGeometry,
    ) -> Self {
        let fan_in = (in_channels * kernel.iter().product::<usize>()) as f64;
        Self::with_std(b, in_channels, out_channels, kernel, geom, (2.0 / fan_in).sqrt())
    }

    /// Normal weights with the given standard deviation and zero bias.
    pub fn with_std<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        geom: Conv3dGeometry,
        std: f64,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
        let weight = b.normal("weight", &shape, std);
        let bias = Some(b.fill("bias", &[out_channels], 0.0));
        Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Stride 1 with "same" padding for odd kernels.
    pub fn same<R: Rng>(b: &mut ParamBuilder<'_, R>, cin: usize, cout: usize, kernel: [usize; 3]) -> Self {
        let pad = kernel.map(|k| k / 2);
        Self::new(b, cin, cout, kernel, Conv3dGeometry::new([1, 1, 1], pad))
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let bias = self.bias.map(|id| s.var(id));
        Ok(x.conv3d(s.var(self.weight), bias, self.geom)?)
    }

    pub fn param_count(cin: usize, cout: usize, kernel: [usize; 3]) -> usize {
        cout * cin * kernel.iter().product::<usize>() + cout
    }
}

/// Affine map over the last axis: `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, fin: usize, fout: usize, bias: bool) -> Self {
        let weight = b.normal("weight", &[fin, fout], (1.0 / fin as f64).sqrt());
        let bias = bias.then(|| b.fill("bias", &[fout], 0.0));
        Self {
            weight,
            bias,
            in_features: fin,
            out_features: fout,
        }
    }

    /// All-zero weights and bias.
    pub fn zeros<R: Rng>(b: &mut ParamBuilder<'_, R>, fin: usize, fout: usize) -> Self {
        Self {
            weight: b.fill("weight", &[fin, fout], 0.0),
            bias: Some(b.fill("bias", &[fout], 0.0)),
            in_features: fin,
            out_features: fout,
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, self.in_features])?;
        let mut y = flat.matmul(s.var(self.weight))?;
        if let Some(bias) = self.bias {
            y = y.add_along_axis(s.var(bias), 1)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_features;
        Ok(y.reshape(&out_shape)?)
    }

    pub fn param_count(fin: usize, fout: usize, bias: bool) -> usize {
        fin * fout + if bias { fout } else { 0 }
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, width: usize) -> Self {
        Self {
            gamma: b.fill("gamma", &[width], 1.0),
            beta: b.fill("beta", &[width], 0.0),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let axis = x.shape().len() - 1;
        Ok(x.layer_norm(s.var(self.gamma), s.var(self.beta), axis, LAYER_NORM_EPS)?)
    }
}

pub const ACB_KERNELS: [[usize; 3]; 3] = [[1, 3, 3], [3, 3, 3], [3, 3, 3]];

/// Residual anisotropic convolution block.
///
/// `a = relu(conv1(x))`, `y = relu(conv3(relu(conv2(a))) + a)`. The first
/// layer already maps to the output width, so the skip is an identity.
#[derive(Clone, Debug)]
pub struct Acb {
    pub convs: [Conv3d; 3],
}

impl Acb {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, cin: usize, cout: usize) -> Self {
        let c1 = Conv3d::same(&mut b.sub("conv1"), cin, cout, ACB_KERNELS[0]);
        let c2 = Conv3d::same(&mut b.sub("conv2"), cout, cout, ACB_KERNELS[1]);
        let c3 = Conv3d::same(&mut b.sub("conv3"), cout, cout, ACB_KERNELS[2]);
        Self { convs: [c1, c2, c3] }
    }

    pub fn forward<'t>(&self, s: &Session<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let a = self.convs[0].forward(s, x)?.relu();
        let h = self.convs[1].forward(s, a)?.relu();
        let h = self.convs[2].forward(s, h)?;
        Ok(h.add(a)?.relu())
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        Conv3d::param_count(cin, cout, ACB_KERNELS[0])
            + 2 * Conv3d::param_count(cout, cout, ACB_KERNELS[1])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use stt_tensor::{Tape, Tensor};

    use super::*;
    use crate::params::ParamStore;

    fn build<T>(f: impl FnOnce(&mut ParamBuilder<'_, ChaCha8Rng>) -> T) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = f(&mut ParamBuilder::new(&mut store, &mut rng));
        (store, block)
    }

    #[test]
    fn acb_preserves_spatial_shape() {
        let (store, acb) = build(|b| Acb::new(b, 3, 5));
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = tape.constant(Tensor::ones(&[1, 3, 4, 16, 16]));
        assert_eq!(acb.forward(&s, x).unwrap().shape(), [1, 5, 4, 16, 16]);
        assert_eq!(store.numel(), Acb::param_count(3, 5));
    }

    #[test]
    fn zero_acb_outputs_zero() {
        let (mut store, acb) = build(|b| Acb::new(b, 2, 2));
        store.map_values(|_, t| Tensor::zeros(t.shape()));
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = tape.constant(Tensor::from_fn(&[1, 2, 3, 4, 4], |i| i as f64 - 20.0));
        let y = acb.forward(&s, x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_acts_on_last_axis() {
        let (mut store, lin) = build(|b| Linear::new(b, 3, 2, true));
        store.map_values(|name, t| match name {
            "weight" => Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
            _ => Tensor::full(t.shape(), 0.5),
        });
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = tape.constant(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let y = lin.forward(&s, x).unwrap().value();
        assert_eq!(y.shape(), [2, 1, 2]);
        assert_eq!(y.data(), [2.5, 3.5, 8.5, 9.5]);
    }

    #[test]
    fn layer_norm_centres_last_axis() {
        let (store, ln) = build(|b| LayerNorm::new(b, 4));
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let x = tape.constant(Tensor::from_fn(&[3, 4], |i| (i * i) as f64));
        let y = ln.forward(&s, x).unwrap().value();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
