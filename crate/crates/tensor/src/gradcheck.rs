//! Central finite-difference gradient checks.

use crate::{Result, Tape, Tensor, Var};

/// Outcome of [`check_gradients`], one error per input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max_i |analytic_i − numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`
    /// for each input tensor.
    pub rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Fixed projection so the scalar loss does not hide errors through symmetry.
fn projection(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| (0.7 * i as f64 + 0.3).sin() + 0.1)
}

fn scalar_loss<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?.value();
    let proj = projection(out.shape());
    Ok(out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// Compares tape gradients of `Σ f(inputs) ⊙ R` against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let proj = tape.constant(projection(&out.shape()));
        let loss = out.mul(proj)?.sum();
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = scalar_loss(&f, &probe)?;
            probe[k].data_mut()[i] = orig - step;
            let down = scalar_loss(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        rel_err.push(if scale > 0.0 { max_diff / scale } else { 0.0 });
    }
    Ok(GradCheck { rel_err })
}
