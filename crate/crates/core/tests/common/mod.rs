//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use stt_core::labels::LabelVolume;
use stt_core::params::{ParamStore, Session};
use stt_core::post::Connectivity;
use stt_core::Result;
use stt_tensor::gradcheck::check_gradients;
use stt_tensor::{Tensor, Var};

/// Direct six-loop cross-correlation over `[N, C, T, H, W]`.
pub fn conv3d_loop(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, o) = (xs[0], xs[1], ws[0]);
    let k = [ws[2], ws[3], ws[4]];
    let d = [xs[2], xs[3], xs[4]];
    let od: Vec<usize> = (0..3).map(|a| (d[a] + 2 * pad[a] - k[a]) / stride[a] + 1).collect();
    let mut y = Tensor::zeros(&[n, o, od[0], od[1], od[2]]);
    for ni in 0..n {
        for oi in 0..o {
            for t in 0..od[0] {
                for h in 0..od[1] {
                    for wi in 0..od[2] {
                        let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                        for ci in 0..c {
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for cc in 0..k[2] {
                                        let it = (t * stride[0] + a) as isize - pad[0] as isize;
                                        let ih = (h * stride[1] + bb) as isize - pad[1] as isize;
                                        let iw = (wi * stride[2] + cc) as isize - pad[2] as isize;
                                        if it < 0 || ih < 0 || iw < 0 {
                                            continue;
                                        }
                                        let (it, ih, iw) = (it as usize, ih as usize, iw as usize);
                                        if it >= d[0] || ih >= d[1] || iw >= d[2] {
                                            continue;
                                        }
                                        acc += w.get(&[oi, ci, a, bb, cc]) * x.get(&[ni, ci, it, ih, iw]);
                                    }
                                }
                            }
                        }
                        y.set(&[ni, oi, t, h, wi], acc);
                    }
                }
            }
        }
    }
    y
}

/// `softmax(q kᵀ / √d) v` for one token set, rows are tokens.
pub fn attention_loop(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (ej, vj) in e.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += ej / z * x;
                }
            }
            out
        })
        .collect()
}

/// `x · W` for a row vector and a `[in, out]` matrix.
pub fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    (0..fout).map(|j| (0..fin).map(|i| x[i] * w.data()[i * fout + j]).sum()).collect()
}

/// Channel vector at `[n, t, h, w, :]` of a channel-last tensor.
pub fn channels(x: &Tensor, at: [usize; 4]) -> Vec<f64> {
    let s = x.shape();
    let c = s[4];
    let base = (((at[0] * s[1] + at[1]) * s[2] + at[2]) * s[3] + at[3]) * c;
    x.data()[base..base + c].to_vec()
}

/// Attention among all in-plane positions of each slice, token by token.
pub fn spatial_attention_loop(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let dk = wq.shape()[1];
    let mut y = Tensor::zeros(&[s[0], s[1], s[2], s[3], dk]);
    for n in 0..s[0] {
        for t in 0..s[1] {
            let pos: Vec<[usize; 2]> = (0..s[2]).flat_map(|h| (0..s[3]).map(move |w| [h, w])).collect();
            let toks: Vec<Vec<f64>> = pos.iter().map(|p| channels(x, [n, t, p[0], p[1]])).collect();
            let out = qkv_attention(&toks, wq, wk, wv);
            for (p, o) in pos.iter().zip(out) {
                for (d, v) in o.into_iter().enumerate() {
                    y.set(&[n, t, p[0], p[1], d], v);
                }
            }
        }
    }
    y
}

/// Attention among all slices at each in-plane position, token by token.
pub fn temporal_attention_loop(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let dk = wq.shape()[1];
    let mut y = Tensor::zeros(&[s[0], s[1], s[2], s[3], dk]);
    for n in 0..s[0] {
        for h in 0..s[2] {
            for w in 0..s[3] {
                let toks: Vec<Vec<f64>> = (0..s[1]).map(|t| channels(x, [n, t, h, w])).collect();
                for (t, o) in qkv_attention(&toks, wq, wk, wv).into_iter().enumerate() {
                    for (d, v) in o.into_iter().enumerate() {
                        y.set(&[n, t, h, w, d], v);
                    }
                }
            }
        }
    }
    y
}

fn qkv_attention(toks: &[Vec<f64>], wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Vec<Vec<f64>> {
    let q: Vec<_> = toks.iter().map(|x| project(x, wq)).collect();
    let k: Vec<_> = toks.iter().map(|x| project(x, wk)).collect();
    let v: Vec<_> = toks.iter().map(|x| project(x, wv)).collect();
    attention_loop(&q, &k, &v)
}

/// Trilinear read of `[T, H, W, C]` at a fractional position, zero outside.
pub fn trilinear_read(x: &Tensor, pos: [f64; 3], c: usize) -> f64 {
    let s = x.shape();
    let base = pos.map(f64::floor);
    let mut acc = 0.0;
    for dt in 0..2 {
        for dh in 0..2 {
            for dw in 0..2 {
                let at = [base[0] + dt as f64, base[1] + dh as f64, base[2] + dw as f64];
                let mut weight = 1.0;
                for a in 0..3 {
                    weight *= 1.0 - (pos[a] - at[a]).abs();
                }
                let inside = (0..3).all(|a| at[a] >= 0.0 && (at[a] as usize) < s[a]);
                if inside {
                    acc += weight * x.get(&[at[0] as usize, at[1] as usize, at[2] as usize, c]);
                }
            }
        }
    }
    acc
}

/// Deformable convolution of `[T, H, W, Cin]`, tap displacements `(dt, dh, dw)`.
pub fn deform_conv_loop(x: &Tensor, offsets: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let s = x.shape();
    let (cin, cout) = (s[3], w.shape()[0]);
    let k = [w.shape()[2], w.shape()[3], w.shape()[4]];
    let mut y = Tensor::zeros(&[s[0], s[1], s[2], cout]);
    for t in 0..s[0] {
        for h in 0..s[1] {
            for wi in 0..s[2] {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    let mut tap = 0;
                    for a in 0..k[0] {
                        for bb in 0..k[1] {
                            for cc in 0..k[2] {
                                let d = [0, 1, 2].map(|j| offsets.get(&[t, h, wi, 3 * tap + j]));
                                let dt = if k[0] == 1 { 0.0 } else { d[0] };
                                let pos = [
                                    t as f64 + a as f64 - (k[0] / 2) as f64 + dt,
                                    h as f64 + bb as f64 - (k[1] / 2) as f64 + d[1],
                                    wi as f64 + cc as f64 - (k[2] / 2) as f64 + d[2],
                                ];
                                for ci in 0..cin {
                                    acc += w.get(&[o, ci, a, bb, cc]) * trilinear_read(x, pos, ci);
                                }
                                tap += 1;
                            }
                        }
                    }
                    y.set(&[t, h, wi, o], acc);
                }
            }
        }
    }
    y
}

/// Max relative error of a finite-difference check over a block's input and
/// every parameter of `store`.
pub fn block_grad_err<F>(store: &ParamStore, inputs: &[Tensor], forward: F) -> f64
where
    F: for<'t> Fn(&Session<'t, '_>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let k = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.entries().iter().map(|(_, t)| t.clone()));
    let failure = RefCell::new(None);
    let report = check_gradients(&all, 1e-5, |tape, v| {
        let s = Session::from_vars(tape, store, &v[k..]);
        forward(&s, &v[..k]).or_else(|e| {
            failure.borrow_mut().get_or_insert(e.to_string());
            Ok(v[0])
        })
    })
    .expect("gradient check runs");
    if let Some(e) = failure.into_inner() {
        panic!("forward failed: {e}");
    }
    report.max_rel_err()
}

/// Replaces every parameter by a fresh draw so no value sits on a special point.
pub fn jitter<R: Rng>(store: &mut ParamStore, scale: f64, rng: &mut R) {
    store.map_values(|name, t| {
        let shift = if name.ends_with("offsets.bias") { 0.29 } else { 0.0 };
        Tensor::from_fn(t.shape(), |_| shift + scale * rng.random_range(-1.0..1.0))
    });
}

/// Labels of a mask by depth-first flood fill, numbered in raster order.
pub fn flood_fill(mask: &[bool], dims: [usize; 3], conn: Connectivity) -> Vec<u32> {
    let reach: isize = 1;
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    let idx = |p: [isize; 3]| (p[0] as usize * dims[1] + p[1] as usize) * dims[2] + p[2] as usize;
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let p = [(i / (dims[1] * dims[2])) as isize, ((i / dims[2]) % dims[1]) as isize, (i % dims[2]) as isize];
            for dt in -reach..=reach {
                for dh in -reach..=reach {
                    for dw in -reach..=reach {
                        let manhattan = dt.abs() + dh.abs() + dw.abs();
                        let ok = match conn {
                            Connectivity::Six => manhattan == 1,
                            Connectivity::TwentySix => manhattan > 0,
                        };
                        let q = [p[0] + dt, p[1] + dh, p[2] + dw];
                        if !ok || (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                            continue;
                        }
                        let j = idx(q);
                        if mask[j] && labels[j] == 0 {
                            labels[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
        }
    }
    labels
}

/// Whether two labelings induce the same partition with background kept at 0.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd = HashMap::new();
    let mut bwd = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        (x == 0) == (y == 0) && *fwd.entry(x).or_insert(y) == y && *bwd.entry(y).or_insert(x) == x
    })
}

/// IoU of two instances, counted voxel by voxel.
pub fn pair_iou(pred: &LabelVolume, p: u32, gt: &LabelVolume, g: u32) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (x, y) = (a == p, b == g);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    inter as f64 / union as f64
}

/// AP from every score cut-off: precision and recall of the predictions
/// scoring at least each distinct score, precision made monotone from the
/// right, then summed over recall increments. Needs distinct scores.
pub fn exhaustive_ap(pred: &LabelVolume, scores: &[f64], gt: &LabelVolume, threshold: f64) -> f64 {
    let pids: Vec<u32> = pred.sizes().keys().copied().collect();
    let gids: Vec<u32> = gt.sizes().keys().copied().collect();
    if pids.is_empty() || gids.is_empty() {
        return if pids.is_empty() && gids.is_empty() { 1.0 } else { 0.0 };
    }
    let mut cut: Vec<f64> = scores.to_vec();
    cut.sort_by(|a, b| b.total_cmp(a));
    let mut points = Vec::new();
    for &tau in &cut {
        let kept: Vec<usize> = (0..pids.len()).filter(|&i| scores[i] >= tau).collect();
        let mut order = kept.clone();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut used = vec![false; gids.len()];
        let mut tp = 0;
        for i in order {
            let best = (0..gids.len())
                .filter(|&j| !used[j])
                .map(|j| (j, pair_iou(pred, pids[i], gt, gids[j])))
                .filter(|&(_, v)| v >= threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((j, _)) = best {
                used[j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gids.len() as f64, tp as f64 / kept.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let p = points[i..].iter().map(|x| x.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// Random boxes as a ground-truth scene plus a perturbed prediction of it.
pub fn random_scene<R: Rng>(rng: &mut R, dims: [usize; 3]) -> (LabelVolume, LabelVolume) {
    let mut gt = LabelVolume::empty(dims);
    let mut pred = LabelVolume::empty(dims);
    let box_at = |lv: &mut LabelVolume, id: u32, lo: [usize; 3], size: [usize; 3]| {
        for t in lo[0]..(lo[0] + size[0]).min(dims[0]) {
            for h in lo[1]..(lo[1] + size[1]).min(dims[1]) {
                for w in lo[2]..(lo[2] + size[2]).min(dims[2]) {
                    let i = lv.index(t, h, w);
                    lv.labels_mut()[i] = id;
                }
            }
        }
    };
    let n_gt = rng.random_range(0..5u32);
    let mut pid = 0;
    for g in 1..=n_gt {
        let size: [usize; 3] = [rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=5)];
        let size = [0, 1, 2].map(|a| size[a].min(dims[a]));
        let lo = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a]));
        box_at(&mut gt, g, lo, size);
        if rng.random_bool(0.8) {
            pid += 1;
            let mut plo = lo;
            if rng.random_bool(0.5) {
                let a = rng.random_range(1..3);
                plo[a] = (plo[a] + 1).min(dims[a] - size[a]);
            }
            box_at(&mut pred, pid, plo, size);
        }
    }
    for _ in 0..rng.random_range(0..3) {
        pid += 1;
        let size = [1, rng.random_range(1..=3), rng.random_range(1..=3)];
        let lo = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - size[a]));
        box_at(&mut pred, pid, lo, size);
    }
    (pred.compacted(), gt.compacted())
}

/// Instance sizes keyed by id, counted directly.
pub fn count_sizes(labels: &[u32]) -> BTreeMap<u32, usize> {
    let mut m = BTreeMap::new();
    for &l in labels.iter().filter(|&&l| l != 0) {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

/// A random mask with the given foreground density.
pub fn random_mask<R: Rng>(rng: &mut R, len: usize, density: f64) -> Vec<bool> {
    (0..len).map(|_| rng.random_bool(density)).collect()
}
