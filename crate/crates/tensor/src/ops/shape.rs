use crate::{strides_of, Backward, Result, Tensor, TensorError, Var};

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

fn validate_permutation(order: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    let ok = order.len() == rank
        && order.iter().all(|&o| o < rank && !std::mem::replace(&mut seen[o], true));
    if ok {
        Ok(())
    } else {
        Err(TensorError::InvalidPermutation {
            order: order.to_vec(),
            rank,
        })
    }
}

/// Output axis `i` is input axis `order[i]`.
pub(crate) fn permute_tensor(x: &Tensor, order: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = order.iter().map(|&o| in_shape[o]).collect();
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return x.clone();
    }
    let rank = order.len();
    // Strides of the input, visited in output axis order.
    let src_strides: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    let mut base = 0usize;
    loop {
        for j in 0..inner_len {
            out.push(src[base + j * inner_stride]);
        }
        // odometer over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::from_parts(out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl Backward for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(permute_tensor(grad, &self.inverse))]
    }
}

struct ReshapeOp {
    in_shape: Vec<usize>,
}

impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::from_parts(self.in_shape.clone(), grad.data().to_vec()))]
    }
}

struct ConcatOp {
    outer: usize,
    inner: usize,
    lens: Vec<usize>,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let total: usize = self.lens.iter().sum();
        let g = grad.data();
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (i, &len) in self.lens.iter().enumerate() {
            if needs[i] {
                let mut out = Vec::with_capacity(self.outer * len * self.inner);
                for o in 0..self.outer {
                    let base = (o * total + start) * self.inner;
                    out.extend_from_slice(&g[base..base + len * self.inner]);
                }
                grads.push(Some(Tensor::from_parts(inputs[i].shape().to_vec(), out)));
            } else {
                grads.push(None);
            }
            start += len;
        }
        grads
    }
}

struct IndexSelectOp {
    outer: usize,
    len: usize,
    inner: usize,
    indices: Vec<usize>,
}

impl Backward for IndexSelectOp {
    fn name(&self) -> &'static str {
        "index_select"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.data();
        let k = self.indices.len();
        let mut out = vec![0.0; self.outer * self.len * self.inner];
        for o in 0..self.outer {
            for (j, &src) in self.indices.iter().enumerate() {
                let gb = (o * k + j) * self.inner;
                let ob = (o * self.len + src) * self.inner;
                for (d, s) in out[ob..ob + self.inner].iter_mut().zip(&g[gb..gb + self.inner]) {
                    *d += s;
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), out))]
    }
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.as_ref().clone().reshape(shape)?;
        Ok(self.tape().record(
            out,
            &[self],
            ReshapeOp {
                in_shape: x.shape().to_vec(),
            },
        ))
    }

    /// Reorders axes: output axis `i` is input axis `order[i]`.
    pub fn permute(self, order: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        validate_permutation(order, x.rank())?;
        let out = permute_tensor(&x, order);
        Ok(self.tape().record(
            out,
            &[self],
            PermuteOp {
                inverse: inverse_permutation(order),
            },
        ))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: a.max(b),
                rank,
            });
        }
        let mut order: Vec<usize> = (0..rank).collect();
        order.swap(a, b);
        self.permute(&order)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let shape0 = values[0].shape().to_vec();
        let (outer, _, inner) = super::split_axis("concat", &shape0, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let same_rest = s.len() == shape0.len()
                && s.iter().zip(&shape0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: shape0.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                let base = o * len * inner;
                out.extend_from_slice(&v.data()[base..base + len * inner]);
            }
        }
        let mut out_shape = shape0;
        out_shape[axis] = total;
        let out = Tensor::from_parts(out_shape, out);
        Ok(first.tape().record(out, parts, ConcatOp { outer, inner, lens }))
    }

    /// Gathers `indices` along `axis` (repeats allowed).
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, len, inner) = super::split_axis("index_select", x.shape(), axis)?;
        if indices.is_empty() {
            return Err(TensorError::invalid("index_select", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TensorError::invalid(
                "index_select",
                format!("index {bad} out of range for extent {len}"),
            ));
        }
        let src = x.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        let out = Tensor::from_parts(shape, out);
        Ok(self.tape().record(
            out,
            &[self],
            IndexSelectOp {
                outer,
                len,
                inner,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }
}
