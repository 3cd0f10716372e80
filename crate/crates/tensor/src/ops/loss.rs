use super::elementwise::{sigmoid, softplus};
use crate::{Backward, Result, Tensor, TensorError, Var};

struct BceOp {
    targets: Tensor,
    weights: Option<Tensor>,
    norm: f64,
}

impl Backward for BceOp {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let z = inputs[0].data();
        let y = self.targets.data();
        let scale = if self.norm > 0.0 { grad.item() / self.norm } else { 0.0 };
        let data = (0..z.len())
            .map(|i| {
                let w = self.weights.as_ref().map_or(1.0, |w| w.data()[i]);
                scale * w * (sigmoid(z[i]) - y[i])
            })
            .collect();
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
    }
}

/// Per-element binary cross-entropy of a logit `z` against target `y`:
/// `max(z, 0) − y·z + ln(1 + e^{−|z|})`.
pub fn bce_term(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

impl<'t> Var<'t> {
    /// Mean binary cross-entropy of logits against constant `targets` in `[0, 1]`.
    ///
    /// With `weights`, the mean is `Σ w·ℓ / Σ w` (zero when `Σ w = 0`).
    pub fn bce_with_logits(self, targets: &Tensor, weights: Option<&Tensor>) -> Result<Var<'t>> {
        let z = self.value();
        let shape_err = |rhs: &[usize]| TensorError::ShapeMismatch {
            op: "bce_with_logits",
            lhs: z.shape().to_vec(),
            rhs: rhs.to_vec(),
        };
        if targets.shape() != z.shape() {
            return Err(shape_err(targets.shape()));
        }
        if let Some(w) = weights {
            if w.shape() != z.shape() {
                return Err(shape_err(w.shape()));
            }
        }
        let norm = weights.map_or(z.len() as f64, |w| w.sum());
        let total: f64 = (0..z.len())
            .map(|i| weights.map_or(1.0, |w| w.data()[i]) * bce_term(z.data()[i], targets.data()[i]))
            .sum();
        let loss = if norm > 0.0 { total / norm } else { 0.0 };
        Ok(self.tape().record(
            Tensor::scalar(loss),
            &[self],
            BceOp {
                targets: targets.clone(),
                weights: weights.cloned(),
                norm,
            },
        ))
    }
}
