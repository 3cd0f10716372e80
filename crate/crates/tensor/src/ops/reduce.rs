use crate::{Backward, Result, Tensor, Var};

struct SumAll {
    scale: f64,
}

impl Backward for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.item() * self.scale))]
    }
}

struct SumAxis {
    outer: usize,
    len: usize,
    inner: usize,
    scale: f64,
}

impl Backward for SumAxis {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.data();
        let mut out = Vec::with_capacity(self.outer * self.len * self.inner);
        for o in 0..self.outer {
            let row = &g[o * self.inner..(o + 1) * self.inner];
            for _ in 0..self.len {
                out.extend(row.iter().map(|v| v * self.scale));
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), out))]
    }
}

impl<'t> Var<'t> {
    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape().record(Tensor::scalar(s), &[self], SumAll { scale: 1.0 })
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let scale = 1.0 / x.len() as f64;
        self.tape()
            .record(Tensor::scalar(x.sum() * scale), &[self], SumAll { scale })
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = super::split_axis("sum_axis", x.shape(), axis)?;
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, out);
        Ok(self.tape().record(
            out,
            &[self],
            SumAxis {
                outer,
                len,
                inner,
                scale,
            },
        ))
    }
}
