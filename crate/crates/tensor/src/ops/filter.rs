use crate::{Backward, Result, Tensor, TensorError, Var};

/// Taps per frame: three 3×3 kernels for the previous, current and next slice.
pub const FRAME_TAPS: usize = 27;

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Calls `f(out_index, kernel_index, source_index)` for every product term.
fn for_each_term(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [t, h, w] = dims;
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                let o = (ti * h + hi) * w + wi;
                for j in 0..3 {
                    let st = clamp(ti as isize + j as isize - 1, t);
                    for dy in 0..3 {
                        let sh = clamp(hi as isize + dy as isize - 1, h);
                        for dx in 0..3 {
                            let sw = clamp(wi as isize + dx as isize - 1, w);
                            f(o, ti * FRAME_TAPS + j * 9 + dy * 3 + dx, (st * h + sh) * w + sw);
                        }
                    }
                }
            }
        }
    }
}

struct FrameFilterOp {
    dims: [usize; 3],
}

impl Backward for FrameFilterOp {
    fn name(&self) -> &'static str {
        "frame_filter"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, k) = (inputs[0].data(), inputs[1].data());
        let g = grad.data();
        let mut dx = vec![0.0; if needs[0] { x.len() } else { 0 }];
        let mut dk = vec![0.0; if needs[1] { k.len() } else { 0 }];
        for_each_term(self.dims, |o, ki, si| {
            if needs[0] {
                dx[si] += g[o] * k[ki];
            }
            if needs[1] {
                dk[ki] += g[o] * x[si];
            }
        });
        vec![
            needs[0].then(|| Tensor::from_parts(inputs[0].shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(inputs[1].shape().to_vec(), dk)),
        ]
    }
}

impl<'t> Var<'t> {
    /// Per-frame 3-slice filtering of a `[T, H, W]` stack.
    ///
    /// `kernels` is `[T, 27]`: for frame `t`, taps `0..9`, `9..18` and `18..27`
    /// are the row-major 3×3 kernels applied to frames `t−1`, `t` and `t+1`.
    /// Borders replicate the nearest frame, row or column.
    pub fn frame_filter(self, kernels: Var<'t>) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernels.value());
        let xs = x.shape();
        if xs.len() != 3 || k.shape() != [xs[0], FRAME_TAPS] {
            return Err(TensorError::ShapeMismatch {
                op: "frame_filter",
                lhs: xs.to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let dims = [xs[0], xs[1], xs[2]];
        let mut out = vec![0.0; x.len()];
        let (xd, kd) = (x.data(), k.data());
        for_each_term(dims, |o, ki, si| out[o] += kd[ki] * xd[si]);
        let out = Tensor::from_parts(xs.to_vec(), out);
        Ok(self.tape().record(out, &[self, kernels], FrameFilterOp { dims }))
    }
}
