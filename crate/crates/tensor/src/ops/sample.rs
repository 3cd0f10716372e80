//! Trilinear sampling, trilinear upsampling and deformable 3D convolution.
//!
//! Sampling treats everything outside the volume as zero. Coordinates are in
//! voxel units, `(t, h, w)` order, with voxel centers on the integers.

use crate::gemm::{gemm, Mat};
use crate::{Backward, Result, Tensor, TensorError, Var};

/// The eight lattice neighbours of a fractional position.
struct Corners {
    /// Flat spatial index of each corner, `None` when it lies outside.
    index: [Option<usize>; 8],
    weight: [f64; 8],
    /// d(weight)/d(position) per axis.
    dweight: [[f64; 3]; 8],
}

fn corners(dims: [usize; 3], pos: [f64; 3]) -> Corners {
    let mut base = [0isize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let f = pos[a].floor();
        base[a] = f as isize;
        frac[a] = pos[a] - f;
    }
    let mut out = Corners {
        index: [None; 8],
        weight: [0.0; 8],
        dweight: [[0.0; 3]; 8],
    };
    for j in 0..8 {
        let bits = [(j >> 2) & 1, (j >> 1) & 1, j & 1];
        let mut w = [0.0; 3];
        let mut d = [0.0; 3];
        let mut at = [0isize; 3];
        for a in 0..3 {
            at[a] = base[a] + bits[a] as isize;
            (w[a], d[a]) = if bits[a] == 1 { (frac[a], 1.0) } else { (1.0 - frac[a], -1.0) };
        }
        out.weight[j] = w[0] * w[1] * w[2];
        out.dweight[j] = [d[0] * w[1] * w[2], w[0] * d[1] * w[2], w[0] * w[1] * d[2]];
        let inside = (0..3).all(|a| at[a] >= 0 && (at[a] as usize) < dims[a]);
        if inside {
            out.index[j] = Some((at[0] as usize * dims[1] + at[1] as usize) * dims[2] + at[2] as usize);
        }
    }
    out
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::invalid(op, "non-finite sampling coordinate"))
    }
}

struct TrilinearSampleOp {
    dims: [usize; 3],
}

impl Backward for TrilinearSampleOp {
    fn name(&self) -> &'static str {
        "trilinear_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, coords) = (inputs[0], inputs[1]);
        let c = x.shape()[0];
        let vol: usize = self.dims.iter().product();
        let m = coords.shape()[0];
        let g = grad.data();
        let mut dx = vec![0.0; if needs[0] { x.len() } else { 0 }];
        let mut dc = vec![0.0; if needs[1] { coords.len() } else { 0 }];
        for i in 0..m {
            let p = &coords.data()[i * 3..i * 3 + 3];
            let cs = corners(self.dims, [p[0], p[1], p[2]]);
            for ch in 0..c {
                let gv = g[ch * m + i];
                for j in 0..8 {
                    let Some(s) = cs.index[j] else { continue };
                    if needs[0] {
                        dx[ch * vol + s] += gv * cs.weight[j];
                    }
                    if needs[1] {
                        let v = x.data()[ch * vol + s];
                        for a in 0..3 {
                            dc[i * 3 + a] += gv * cs.dweight[j][a] * v;
                        }
                    }
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx)),
            needs[1].then(|| Tensor::from_parts(coords.shape().to_vec(), dc)),
        ]
    }
}

/// Per-axis source taps for align-corners-false linear upsampling.
fn upsample_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct UpsampleOp {
    lead: usize,
    dims: [usize; 3],
    taps: [Vec<(usize, usize, f64)>; 3],
}

impl UpsampleOp {
    /// Calls `f(out_index, in_index, weight)` for every contributing pair.
    fn for_each(&self, mut f: impl FnMut(usize, usize, f64)) {
        let [t, h, w] = self.dims;
        let [tt, th, tw] = &self.taps;
        let out_vol = tt.len() * th.len() * tw.len();
        let in_vol = t * h * w;
        for l in 0..self.lead {
            let mut o = l * out_vol;
            for &(t0, t1, ft) in tt {
                for &(h0, h1, fh) in th {
                    for &(w0, w1, fw) in tw {
                        for (ti, wt) in [(t0, 1.0 - ft), (t1, ft)] {
                            for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                                for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                                    let wgt = wt * wh * ww;
                                    if wgt != 0.0 {
                                        f(o, l * in_vol + (ti * h + hi) * w + wi, wgt);
                                    }
                                }
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
    }
}

impl Backward for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_trilinear"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let g = grad.data();
        let mut dx = vec![0.0; inputs[0].len()];
        self.for_each(|o, i, w| dx[i] += w * g[o]);
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
    }
}

struct DeformConvOp {
    dims: [usize; 3],
    cin: usize,
    cout: usize,
    kernel: [usize; 3],
    col: Vec<f64>,
    has_bias: bool,
}

impl DeformConvOp {
    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Sampling position of tap `n` for output voxel `p`.
fn tap_position(dims: [usize; 3], kernel: [usize; 3], p: usize, n: usize, offsets: &[f64]) -> [f64; 3] {
    let [_, h, w] = dims;
    let (pt, ph, pw) = (p / (h * w), (p / w) % h, p % w);
    let [kt, kh, kw] = kernel;
    let (a, b, c) = (n / (kh * kw), (n / kw) % kh, n % kw);
    let off = &offsets[n * 3..n * 3 + 3];
    // The temporal offset only matters when the kernel spans several slices.
    let dt = if kt > 1 { off[0] } else { 0.0 };
    [
        pt as f64 + a as f64 - (kt / 2) as f64 + dt,
        ph as f64 + b as f64 - (kh / 2) as f64 + off[1],
        pw as f64 + c as f64 - (kw / 2) as f64 + off[2],
    ]
}

impl Backward for DeformConvOp {
    fn name(&self) -> &'static str {
        "deform_conv3d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, offsets, weight) = (inputs[0], inputs[1], inputs[2]);
        let p = self.dims.iter().product::<usize>();
        let r = self.taps();
        let k = self.cin * r;
        let g = grad.data();
        let gm = Mat::row_major(g, p, self.cout);
        let wm = Mat::row_major(weight.data(), self.cout, k);

        let dw = needs[2].then(|| {
            let mut dw = vec![0.0; self.cout * k];
            gemm(1.0, gm.t(), Mat::row_major(&self.col, p, k), 0.0, &mut dw, k);
            Tensor::from_parts(weight.shape().to_vec(), dw)
        });
        let db = (self.has_bias && needs[3]).then(|| {
            let mut db = vec![0.0; self.cout];
            for row in g.chunks(self.cout) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            Tensor::from_parts(vec![self.cout], db)
        });

        let (mut dx, mut doff) = (None, None);
        if needs[0] || needs[1] {
            let mut dcol = vec![0.0; p * k];
            gemm(1.0, gm, wm, 0.0, &mut dcol, k);
            let mut gx = vec![0.0; if needs[0] { x.len() } else { 0 }];
            let mut go = vec![0.0; if needs[1] { offsets.len() } else { 0 }];
            let xd = x.data();
            let active = [self.kernel[0] > 1, true, true];
            for q in 0..p {
                let off = &offsets.data()[q * r * 3..(q + 1) * r * 3];
                for n in 0..r {
                    let cs = corners(self.dims, tap_position(self.dims, self.kernel, q, n, off));
                    for ci in 0..self.cin {
                        let d = dcol[q * k + ci * r + n];
                        if d == 0.0 {
                            continue;
                        }
                        for j in 0..8 {
                            let Some(s) = cs.index[j] else { continue };
                            if needs[0] {
                                gx[s * self.cin + ci] += d * cs.weight[j];
                            }
                            if needs[1] {
                                let v = xd[s * self.cin + ci];
                                for a in 0..3 {
                                    if active[a] {
                                        go[(q * r + n) * 3 + a] += d * cs.dweight[j][a] * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dx = needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), gx));
            doff = needs[1].then(|| Tensor::from_parts(offsets.shape().to_vec(), go));
        }
        let mut grads = vec![dx, doff, dw];
        if self.has_bias {
            grads.push(db);
        }
        grads
    }
}

impl<'t> Var<'t> {
    /// Samples `self` (`[C, T, H, W]`) at `coords` (`[M, 3]`, voxel units),
    /// giving `[C, M]`. Positions outside the volume read zeros.
    pub fn trilinear_sample(self, coords: Var<'t>) -> Result<Var<'t>> {
        let (x, cv) = (self.value(), coords.value());
        if x.rank() != 4 || cv.rank() != 2 || cv.shape()[1] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "trilinear_sample",
                lhs: x.shape().to_vec(),
                rhs: cv.shape().to_vec(),
            });
        }
        check_finite("trilinear_sample", cv.data())?;
        let c = x.shape()[0];
        let dims = [x.shape()[1], x.shape()[2], x.shape()[3]];
        let vol: usize = dims.iter().product();
        let m = cv.shape()[0];
        let mut out = vec![0.0; c * m];
        for i in 0..m {
            let p = &cv.data()[i * 3..i * 3 + 3];
            let cs = corners(dims, [p[0], p[1], p[2]]);
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..8 {
                    if let Some(s) = cs.index[j] {
                        acc += cs.weight[j] * x.data()[ch * vol + s];
                    }
                }
                out[ch * m + i] = acc;
            }
        }
        let out = Tensor::from_parts(vec![c, m], out);
        Ok(self.tape().record(out, &[self, coords], TrilinearSampleOp { dims }))
    }

    /// Trilinear upsampling of the last three axes by integer `factors`
    /// (half-pixel centers, edge clamped).
    pub fn upsample_trilinear(self, factors: [usize; 3]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 3 || factors.contains(&0) {
            return Err(TensorError::invalid(
                "upsample_trilinear",
                format!("shape {s:?} with factors {factors:?}"),
            ));
        }
        let r = s.len();
        let dims = [s[r - 3], s[r - 2], s[r - 1]];
        let op = UpsampleOp {
            lead: s[..r - 3].iter().product(),
            dims,
            taps: [0, 1, 2].map(|a| upsample_taps(dims[a], factors[a])),
        };
        let mut shape = s.to_vec();
        for a in 0..3 {
            shape[r - 3 + a] *= factors[a];
        }
        let mut out = vec![0.0; shape.iter().product()];
        let src = x.data();
        op.for_each(|o, i, w| out[o] += w * src[i]);
        let out = Tensor::from_parts(shape, out);
        Ok(self.tape().record(out, &[self], op))
    }

    /// Deformable 3D convolution over a channel-last volume.
    ///
    /// `self` is `[T, H, W, Cin]`, `offsets` is `[T, H, W, 3·|R|]` holding a
    /// `(dt, dh, dw)` displacement per kernel tap (tap-major), `weight` is
    /// `[Cout, Cin, kT, kH, kW]` with odd extents. The output `[T, H, W, Cout]`
    /// at `p` is `Σ_n W(n) · x(p + n − k/2 + Δ_n)` with trilinear reads.
    /// The temporal displacement is ignored when `kT == 1`.
    pub fn deform_conv3d(self, offsets: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, off, w) = (self.value(), offsets.value(), weight.value());
        let (xs, os, ws) = (x.shape(), off.shape(), w.shape());
        let mismatch = |rhs: &[usize]| TensorError::ShapeMismatch {
            op: "deform_conv3d",
            lhs: xs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[3] {
            return Err(mismatch(ws));
        }
        let kernel = [ws[2], ws[3], ws[4]];
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(TensorError::invalid("deform_conv3d", format!("kernel {kernel:?} must be odd")));
        }
        let r: usize = kernel.iter().product();
        if os.len() != 4 || os[..3] != xs[..3] || os[3] != 3 * r {
            return Err(mismatch(os));
        }
        check_finite("deform_conv3d", off.data())?;
        let dims = [xs[0], xs[1], xs[2]];
        let (cin, cout) = (xs[3], ws[0]);
        let p: usize = dims.iter().product();
        let k = cin * r;

        let mut col = vec![0.0; p * k];
        let xd = x.data();
        for q in 0..p {
            let offq = &off.data()[q * r * 3..(q + 1) * r * 3];
            let row = &mut col[q * k..(q + 1) * k];
            for n in 0..r {
                let cs = corners(dims, tap_position(dims, kernel, q, n, offq));
                for j in 0..8 {
                    let Some(s) = cs.index[j] else { continue };
                    let wj = cs.weight[j];
                    if wj == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        row[ci * r + n] += wj * xd[s * cin + ci];
                    }
                }
            }
        }
        let mut out = vec![0.0; p * cout];
        gemm(1.0, Mat::row_major(&col, p, k), Mat::row_major(w.data(), cout, k).t(), 0.0, &mut out, cout);
        let has_bias = bias.is_some();
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [cout] {
                return Err(mismatch(bv.shape()));
            }
            for row in out.chunks_mut(cout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        let out = Tensor::from_parts(vec![dims[0], dims[1], dims[2], cout], out);
        let mut parents = vec![self, offsets, weight];
        parents.extend(bias);
        Ok(self.tape().record(
            out,
            &parents,
            DeformConvOp {
                dims,
                cin,
                cout,
                kernel,
                col,
                has_bias,
            },
        ))
    }
}
