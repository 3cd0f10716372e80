use crate::{Backward, Result, Tensor, Var};

struct SoftmaxOp {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Backward for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    // dx = y ⊙ (g − Σ g⊙y) along the axis
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (y, g) = (output.data(), grad.data());
        let mut out = vec![0.0; y.len()];
        if self.inner == 1 {
            for ((dst, yr), gr) in out.chunks_mut(self.len).zip(y.chunks(self.len)).zip(g.chunks(self.len)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            return vec![Some(Tensor::from_parts(output.shape().to_vec(), out))];
        }
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |l: usize| (o * self.len + l) * self.inner + i;
                let dot: f64 = (0..self.len).map(|l| g[at(l)] * y[at(l)]).sum();
                for l in 0..self.len {
                    out[at(l)] = y[at(l)] * (g[at(l)] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(output.shape().to_vec(), out))]
    }
}

pub(crate) fn softmax_rows(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

impl<'t> Var<'t> {
    /// Softmax along `axis`, with max subtraction for stability.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = super::split_axis("softmax", x.shape(), axis)?;
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        if inner == 1 {
            for (dst, row) in out.chunks_mut(len).zip(src.chunks(len)) {
                dst.copy_from_slice(row);
                softmax_rows(dst);
            }
        } else {
            let mut row = vec![0.0; len];
            for o in 0..outer {
                for i in 0..inner {
                    for (l, r) in row.iter_mut().enumerate() {
                        *r = src[(o * len + l) * inner + i];
                    }
                    softmax_rows(&mut row);
                    for (l, r) in row.iter().enumerate() {
                        out[(o * len + l) * inner + i] = *r;
                    }
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape().record(out, &[self], SoftmaxOp { outer, len, inner }))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    fn softmax(v: Vec<f64>) -> Vec<f64> {
        let tape = Tape::new();
        let n = v.len();
        let x = tape.constant(Tensor::new(&[n], v).unwrap());
        x.softmax(0).unwrap().value().data().to_vec()
    }

    #[test]
    fn constant_row_is_uniform() {
        for y in softmax(vec![2.5; 3]) {
            assert!((y - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_two_gives_one_third_two_thirds() {
        let y = softmax(vec![0.0, 2f64.ln()]);
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn large_inputs_do_not_overflow() {
        for y in softmax(vec![1000.0; 3]) {
            assert!((y - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn middle_axis_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 5, 3], |i| ((i * 7) % 11) as f64 - 4.0));
        let y = x.softmax(1).unwrap().value();
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|l| y.get(&[o, l, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
