use rayon::prelude::*;

use crate::gemm::{gemm, Mat};
use crate::{Backward, Result, Tensor, TensorError, Var};

/// Batch layout of a matmul: either both operands carry the same leading
/// batch dims, or one of them is a plain matrix shared across the batch.
#[derive(Clone, Copy)]
struct Layout {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

fn layout(a: &[usize], b: &[usize]) -> Result<(Layout, Vec<usize>)> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(mismatch());
    }
    let batch_shape = match (ab.is_empty(), bb.is_empty()) {
        (_, true) => ab.to_vec(),
        (true, false) => bb.to_vec(),
        (false, false) if ab == bb => ab.to_vec(),
        _ => return Err(mismatch()),
    };
    let lay = Layout {
        batch: batch_shape.iter().product(),
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        m: am[0],
        k: am[1],
        n: bm[1],
    };
    let mut out = batch_shape;
    out.extend([lay.m, lay.n]);
    Ok((lay, out))
}

struct MatmulOp(Layout);

impl Backward for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let Layout {
            batch,
            a_batched,
            b_batched,
            m,
            k,
            n,
        } = self.0;
        let (a, b) = (inputs[0], inputs[1]);
        let g = grad.data();
        let a_slice = |i: usize| if a_batched { &a.data()[i * m * k..(i + 1) * m * k] } else { a.data() };
        let b_slice = |i: usize| if b_batched { &b.data()[i * k * n..(i + 1) * k * n] } else { b.data() };
        let g_slice = |i: usize| &g[i * m * n..(i + 1) * m * n];

        // dA = dC · Bᵀ
        let ga = needs[0].then(|| {
            let mut out = vec![0.0; if a_batched { batch * m * k } else { m * k }];
            if a_batched {
                out.par_chunks_mut(m * k).enumerate().for_each(|(i, dst)| {
                    let bm = Mat::row_major(b_slice(i), k, n).t();
                    gemm(1.0, Mat::row_major(g_slice(i), m, n), bm, 0.0, dst, k);
                });
            } else {
                for i in 0..batch {
                    let bm = Mat::row_major(b_slice(i), k, n).t();
                    gemm(1.0, Mat::row_major(g_slice(i), m, n), bm, 1.0, &mut out, k);
                }
            }
            Tensor::from_parts(a.shape().to_vec(), out)
        });
        // dB = Aᵀ · dC
        let gb = needs[1].then(|| {
            let mut out = vec![0.0; if b_batched { batch * k * n } else { k * n }];
            if b_batched {
                out.par_chunks_mut(k * n).enumerate().for_each(|(i, dst)| {
                    let am = Mat::row_major(a_slice(i), m, k).t();
                    gemm(1.0, am, Mat::row_major(g_slice(i), m, n), 0.0, dst, n);
                });
            } else {
                for i in 0..batch {
                    let am = Mat::row_major(a_slice(i), m, k).t();
                    gemm(1.0, am, Mat::row_major(g_slice(i), m, n), 1.0, &mut out, n);
                }
            }
            Tensor::from_parts(b.shape().to_vec(), out)
        });
        vec![ga, gb]
    }
}

impl<'t> Var<'t> {
    /// Matrix product over the last two axes, `[.., m, k] x [.., k, n]`.
    ///
    /// Leading batch dims must match exactly, or one operand must be a plain
    /// matrix that is shared across the other's batch.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (lay, out_shape) = layout(a.shape(), b.shape())?;
        let Layout {
            a_batched,
            b_batched,
            m,
            k,
            n,
            ..
        } = lay;
        let mut out = vec![0.0; lay.batch * m * n];
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, dst)| {
            let asl = if a_batched { &a.data()[i * m * k..(i + 1) * m * k] } else { a.data() };
            let bsl = if b_batched { &b.data()[i * k * n..(i + 1) * k * n] } else { b.data() };
            gemm(1.0, Mat::row_major(asl, m, k), Mat::row_major(bsl, k, n), 0.0, dst, n);
        });
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.tape().record(out, &[self, other], MatmulOp(lay)))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor, TensorError};

    #[test]
    fn hand_product() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![5., 6.]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(c.value().data(), &[17., 39.]);
        assert_eq!(c.shape(), vec![2, 1]);
    }

    #[test]
    fn identity_leaves_matrix_unchanged() {
        let tape = Tape::new();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let a = Tensor::from_fn(&[3, 3], |i| (i as f64).sin());
        let c = tape.constant(eye).matmul(tape.constant(a.clone())).unwrap();
        assert_eq!(*c.value(), a);
    }

    #[test]
    fn batched_with_shared_rhs() {
        let tape = Tape::new();
        let a = Tensor::from_fn(&[2, 3, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2], |i| (i + 1) as f64);
        let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 2]);
        // second batch, last row: [10, 11] · [[1,2],[3,4]] = [43, 64]
        assert_eq!(c.value().get(&[1, 2, 0]), 43.0);
        assert_eq!(c.value().get(&[1, 2, 1]), 64.0);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(
            a.matmul(b).unwrap_err(),
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }
}
