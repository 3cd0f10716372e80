use crate::{Backward, Result, Tensor, TensorError, Var};

struct LayerNormOp {
    outer: usize,
    len: usize,
    inner: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Backward for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let gamma = inputs[1].data();
        let g = grad.data();
        let (len, inner) = (self.len, self.inner);
        let n = len as f64;
        let mut dx = vec![0.0; g.len()];
        let mut dgamma = vec![0.0; len];
        let mut dbeta = vec![0.0; len];
        let mut dxhat = vec![0.0; len];
        for o in 0..self.outer {
            for i in 0..inner {
                let row = o * inner + i;
                let at = |l: usize| (o * len + l) * inner + i;
                let (mut s1, mut s2) = (0.0, 0.0);
                for l in 0..len {
                    let k = at(l);
                    dgamma[l] += g[k] * self.xhat[k];
                    dbeta[l] += g[k];
                    dxhat[l] = g[k] * gamma[l];
                    s1 += dxhat[l];
                    s2 += dxhat[l] * self.xhat[k];
                }
                let r = self.inv_std[row];
                for l in 0..len {
                    let k = at(l);
                    dx[k] = r / n * (n * dxhat[l] - s1 - self.xhat[k] * s2);
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(vec![len], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![len], dbeta)),
        ]
    }
}

impl<'t> Var<'t> {
    /// Normalizes to zero mean and unit variance along `axis`, then applies
    /// the learned `gamma` scale and `beta` shift (both `[shape[axis]]`).
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, axis: usize, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = super::split_axis("layer_norm", x.shape(), axis)?;
        if len < 2 {
            return Err(TensorError::invalid(
                "layer_norm",
                format!("axis {axis} has a single element; nothing to normalize"),
            ));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        for p in [&gv, &bv] {
            if p.shape() != [len] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let src = x.data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| src[at(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (src[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for l in 0..len {
                    let k = at(l);
                    xhat[k] = (src[k] - mean) * r;
                    out[k] = xhat[k] * gv.data()[l] + bv.data()[l];
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape().record(
            out,
            &[self, gamma, beta],
            LayerNormOp {
                outer,
                len,
                inner,
                xhat,
                inv_std,
            },
        ))
    }
}
