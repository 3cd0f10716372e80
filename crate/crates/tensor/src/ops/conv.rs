//! 3D cross-correlation over `[N, C, T, H, W]` volumes via im2col + GEMM.

use rayon::prelude::*;

use crate::gemm::{gemm, Mat};
use crate::{Backward, Result, Tensor, TensorError, Var};

/// Column buffer budget, in elements, for one im2col chunk.
const CHUNK_ELEMS: usize = 1 << 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dGeometry {
    pub const UNIT: Self = Self {
        stride: [1, 1, 1],
        padding: [0, 0, 0],
    };

    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Output extent per axis: `floor((in + 2p - k) / s) + 1`.
    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

#[derive(Clone)]
struct Plan {
    n: usize,
    c: usize,
    o: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    out_dims: [usize; 3],
    geom: Conv3dGeometry,
}

impl Plan {
    fn k(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }

    fn in_vol(&self) -> usize {
        self.dims.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.geom == Conv3dGeometry::UNIT
    }

    fn chunk(&self) -> usize {
        (CHUNK_ELEMS / self.k()).clamp(1, self.out_vol())
    }

    /// Iterates the kernel rows of the column matrix: `(row, channel, tap offset)`.
    fn rows(&self) -> impl Iterator<Item = (usize, usize, [usize; 3])> + '_ {
        let [kt, kh, kw] = self.kernel;
        (0..self.k()).map(move |r| {
            let c = r / (kt * kh * kw);
            let rem = r % (kt * kh * kw);
            (r, c, [rem / (kh * kw), (rem / kw) % kh, rem % kw])
        })
    }

    /// Visits the output positions `[p0, p0 + len)` of kernel row `(c, tap)`
    /// one output line at a time. For each line `f` gets the column offset,
    /// the line length, the input offset of the line start (`None` when the
    /// line reads only padding) and the in-bounds sub-range `lo..hi`.
    fn for_each_line(&self, c: usize, tap: [usize; 3], p0: usize, len: usize, mut f: impl FnMut(usize, usize, Option<isize>, usize, usize)) {
        let [_, oh, ow] = self.out_dims;
        let [t, h, w] = self.dims;
        let (s, p) = (self.geom.stride, self.geom.padding);
        let off = [0, 1, 2].map(|a| tap[a] as isize - p[a] as isize);
        let mut j = 0;
        while j < len {
            let q = p0 + j;
            let (ot, ohh, ow0) = (q / (oh * ow), (q / ow) % oh, q % ow);
            let run = (ow - ow0).min(len - j);
            let it = (ot * s[0]) as isize + off[0];
            let ih = (ohh * s[1]) as isize + off[1];
            if it < 0 || it >= t as isize || ih < 0 || ih >= h as isize {
                f(j, run, None, 0, 0);
            } else {
                let sw = s[2] as isize;
                let first = ow0 as isize * sw + off[2];
                let lo = if first >= 0 { 0 } else { ((-first + sw - 1) / sw) as usize };
                let last_ok = w as isize - 1 - first;
                let hi = if last_ok < 0 { 0 } else { ((last_ok / sw) as usize + 1).min(run) };
                let base = (((c * t) as isize + it) * h as isize + ih) * w as isize + first;
                f(j, run, Some(base), lo.min(hi), hi);
            }
            j += run;
        }
    }

    fn im2col(&self, x: &[f64], p0: usize, len: usize, col: &mut [f64]) {
        let sw = self.geom.stride[2];
        for (r, c, tap) in self.rows() {
            let dst = &mut col[r * len..(r + 1) * len];
            self.for_each_line(c, tap, p0, len, |j, run, base, lo, hi| {
                let line = &mut dst[j..j + run];
                let Some(base) = base else {
                    line.fill(0.0);
                    return;
                };
                line[..lo].fill(0.0);
                line[hi..].fill(0.0);
                let start = (base + (lo * sw) as isize) as usize;
                if sw == 1 {
                    line[lo..hi].copy_from_slice(&x[start..start + hi - lo]);
                } else {
                    for (k, d) in line[lo..hi].iter_mut().enumerate() {
                        *d = x[start + k * sw];
                    }
                }
            });
        }
    }

    fn col2im(&self, col: &[f64], p0: usize, len: usize, dx: &mut [f64]) {
        let sw = self.geom.stride[2];
        for (r, c, tap) in self.rows() {
            let src = &col[r * len..(r + 1) * len];
            self.for_each_line(c, tap, p0, len, |j, _, base, lo, hi| {
                let Some(base) = base else { return };
                let start = (base + (lo * sw) as isize) as usize;
                for (k, v) in src[j + lo..j + hi].iter().enumerate() {
                    dx[start + k * sw] += v;
                }
            });
        }
    }

    /// `y_n[O, P] = W[O, K] · col_n[K, P]` for one batch item.
    fn forward_item(&self, x: &[f64], w: &[f64], y: &mut [f64]) {
        let (k, p) = (self.k(), self.out_vol());
        let wm = Mat::row_major(w, self.o, k);
        if self.is_pointwise() {
            gemm(1.0, wm, Mat::row_major(x, k, p), 0.0, y, p);
            return;
        }
        let chunk = self.chunk();
        let mut col = vec![0.0; k * chunk];
        for p0 in (0..p).step_by(chunk) {
            let len = chunk.min(p - p0);
                        self.im2col(x, p0, len, &mut col[..k * len]);
            gemm(1.0, wm, Mat::row_major(&col[..k * len], k, len), 0.0, &mut y[p0..], p);
        }
    }

    /// Returns `(dx_n, dW_n)` for one batch item.
    fn backward_item(&self, x: &[f64], w: &[f64], g: &[f64], need_x: bool, need_w: bool) -> (Vec<f64>, Vec<f64>) {
        let (k, p) = (self.k(), self.out_vol());
        let wm = Mat::row_major(w, self.o, k);
        let mut dx = if need_x { vec![0.0; self.c * self.in_vol()] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; self.o * k] } else { Vec::new() };
        if self.is_pointwise() {
            let gm = Mat::row_major(g, self.o, p);
            if need_x {
                gemm(1.0, wm.t(), gm, 0.0, &mut dx, p);
            }
            if need_w {
                gemm(1.0, gm, Mat::row_major(x, k, p).t(), 0.0, &mut dw, k);
            }
            return (dx, dw);
        }
        let chunk = self.chunk();
        let mut col = vec![0.0; k * chunk];
        for p0 in (0..p).step_by(chunk) {
            let len = chunk.min(p - p0);
                        let gm = Mat {
                data: &g[p0..],
                rows: self.o,
                cols: len,
                rs: p,
                cs: 1,
            };
            if need_w {
                self.im2col(x, p0, len, &mut col[..k * len]);
                gemm(1.0, gm, Mat::row_major(&col[..k * len], k, len).t(), 1.0, &mut dw, k);
            }
            if need_x {
                gemm(1.0, wm.t(), gm, 0.0, &mut col[..k * len], len);
                self.col2im(&col[..k * len], p0, len, &mut dx);
            }
        }
        (dx, dw)
    }
}

struct Conv3dOp {
    plan: Plan,
}

impl Backward for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let plan = &self.plan;
        let (x, w) = (inputs[0], inputs[1]);
        let in_item = plan.c * plan.in_vol();
        let out_item = plan.o * plan.out_vol();
        let (need_x, need_w) = (needs[0], needs[1]);
        let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..plan.n)
            .into_par_iter()
            .map(|n| {
                plan.backward_item(
                    &x.data()[n * in_item..(n + 1) * in_item],
                    w.data(),
                    &grad.data()[n * out_item..(n + 1) * out_item],
                    need_x,
                    need_w,
                )
            })
            .collect();
        let mut dx = Vec::new();
        let mut dw = vec![0.0; if need_w { w.len() } else { 0 }];
        for (dxn, dwn) in per_item {
            dx.extend(dxn);
            for (a, b) in dw.iter_mut().zip(dwn) {
                *a += b;
            }
        }
        let db = needs.get(2).copied().unwrap_or(false).then(|| {
            let vol = plan.out_vol();
            let mut db = vec![0.0; plan.o];
            for (i, chunk) in grad.data().chunks(vol).enumerate() {
                db[i % plan.o] += chunk.iter().sum::<f64>();
            }
            Tensor::from_parts(vec![plan.o], db)
        });
        let mut grads = vec![
            need_x.then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            need_w.then(|| Tensor::from_parts(w.shape().to_vec(), dw)),
        ];
        if inputs.len() == 3 {
            grads.push(db);
        }
        grads
    }
}

fn shape_err(x: &[usize], w: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op: "conv3d",
        lhs: x.to_vec(),
        rhs: w.to_vec(),
    }
}

impl<'t> Var<'t> {
    /// 3D cross-correlation. `self` is `[N, C, T, H, W]`, `weight` is
    /// `[O, C, kT, kH, kW]` and `bias`, when given, is `[O]`.
    pub fn conv3d(self, weight: Var<'t>, bias: Option<Var<'t>>, geom: Conv3dGeometry) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(shape_err(xs, ws));
        }
        let dims = [xs[2], xs[3], xs[4]];
        let kernel = [ws[2], ws[3], ws[4]];
        let out_dims = geom
            .output_dims(dims, kernel)
            .ok_or_else(|| shape_err(xs, ws))?;
        let plan = Plan {
            n: xs[0],
            c: xs[1],
            o: ws[0],
            dims,
            kernel,
            out_dims,
            geom,
        };
        let bias_val = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [plan.o] {
                    return Err(shape_err(xs, bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let in_item = plan.c * plan.in_vol();
        let out_item = plan.o * plan.out_vol();
        let mut y = vec![0.0; plan.n * out_item];
        y.par_chunks_mut(out_item).enumerate().for_each(|(n, yn)| {
            plan.forward_item(&x.data()[n * in_item..(n + 1) * in_item], w.data(), yn);
            if let Some(bv) = &bias_val {
                for (row, &b) in yn.chunks_mut(plan.out_vol()).zip(bv.data()) {
                    for v in row {
                        *v += b;
                    }
                }
            }
        });
        let mut shape = vec![plan.n, plan.o];
        shape.extend(out_dims);
        let out = Tensor::from_parts(shape, y);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape().record(out, &parents, Conv3dOp { plan }))
    }
}
