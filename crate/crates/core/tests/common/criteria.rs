//! Measurements behind the property checks, parameterized by trial count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stt_core::data::volume::{load_volume, raw_path, save_volume, Volume, VolumeError, VoxelData};
use stt_core::losses::{bce_loss, generator_loss, Discriminator};
use stt_core::metrics::{ap75, iou_matrix, jaccard_dsc};
use stt_core::model::Denoiser;
use stt_core::nn::{Acb, Conv3d};
use stt_core::params::{ParamBuilder, ParamStore, Session};
use stt_core::post::{connected_components_3d, Connectivity};
use stt_core::sst::{attention_weights, spatial_attention, temporal_attention, AttentionMaps, Fusion, Sst, SstConfig};
use stt_tensor::{Conv3dGeometry, Tape, Tensor};

use super::*;

pub const GRAD_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn def_conv_block(c: usize, seed: u64) -> (ParamStore, Sst) {
    let mut store = ParamStore::new();
    let cfg = SstConfig {
        fusion: Fusion::DefConv,
        ..SstConfig::default()
    };
    let sst = Sst::new(&mut ParamBuilder::new(&mut store, &mut rng(seed)), c, &cfg);
    (store, sst)
}

/// Relative finite-difference error of every parameterized block.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let conv = Conv3d::new(
        &mut ParamBuilder::new(&mut store, &mut r),
        2,
        3,
        [3, 3, 3],
        Conv3dGeometry::new([2, 2, 1], [1, 1, 1]),
    );
    jitter(&mut store, 0.5, &mut r);
    let x = Tensor::randn(&[2, 2, 4, 5, 3], 1.0, &mut r);
    out.push(("conv3d", block_grad_err(&store, &[x], |s, v| Ok(conv.forward(s, v[0])?))));

    let mut store = ParamStore::new();
    let acb = Acb::new(&mut ParamBuilder::new(&mut store, &mut r), 2, 3);
    jitter(&mut store, 0.5, &mut r);
    let x = Tensor::randn(&[1, 2, 3, 4, 4], 1.0, &mut r);
    out.push(("acb", block_grad_err(&store, &[x], |s, v| acb.forward(s, v[0]))));

    let (mut store, sst) = def_conv_block(4, seed);
    jitter(&mut store, 0.5, &mut r);
    let x = Tensor::randn(&[1, 3, 3, 4, 4], 1.0, &mut r);
    out.push((
        "spatial attention",
        block_grad_err(&store, &[x.clone()], |s, v| spatial_attention(s, v[0], &sst.spatial)),
    ));
    out.push((
        "temporal attention",
        block_grad_err(&store, &[x], |s, v| temporal_attention(s, v[0], &sst.temporal)),
    ));

    let (mut store, sst) = def_conv_block(4, seed + 1);
    jitter(&mut store, 0.3, &mut r);
    let xs = Tensor::randn(&[2, 2, 4, 4, 4], 1.0, &mut r);
    let xt = Tensor::randn(&[2, 2, 4, 4, 4], 1.0, &mut r);
    out.push((
        "deformable fusion",
        block_grad_err(&store, &[xs, xt], |s, v| {
            sst.fuse(
                s,
                &AttentionMaps {
                    spatial: v[0],
                    temporal: v[1],
                },
            )
        }),
    ));

    let (mut store, sst) = def_conv_block(4, seed + 2);
    jitter(&mut store, 0.3, &mut r);
    let x = Tensor::randn(&[1, 2, 3, 3, 4], 1.0, &mut r);
    out.push(("sst block", block_grad_err(&store, &[x], |s, v| sst.forward(s, v[0]))));

    let mut store = ParamStore::new();
    let den = Denoiser::new(&mut ParamBuilder::new(&mut store, &mut r));
    jitter(&mut store, 0.5, &mut r);
    let x = Tensor::uniform(&[2, 1, 3, 4, 4], 0.0, 1.0, &mut r);
    out.push(("denoiser", block_grad_err(&store, &[x], |s, v| den.forward(s, v[0]))));

    let mut store = ParamStore::new();
    let disc = Discriminator::new(&mut ParamBuilder::new(&mut store, &mut r));
    jitter(&mut store, 0.5, &mut r);
    let img = Tensor::uniform(&[2, 4, 4, 4], 0.0, 1.0, &mut r);
    let mask = Tensor::uniform(&[2, 4, 4, 4], 0.0, 1.0, &mut r);
    out.push((
        "discriminator",
        block_grad_err(&store, &[img, mask], |s, v| disc.forward(s, v[0], v[1])),
    ));

    let empty = ParamStore::new();
    let logits = Tensor::randn(&[2, 3, 4, 4], 2.0, &mut r);
    let target = Tensor::from_fn(&[2, 3, 4, 4], |_| r.random_range(0..2) as f64);
    out.push(("bce", block_grad_err(&empty, &[logits], |_, v| bce_loss(v[0], &target))));

    let zr = Tensor::randn(&[4], 1.0, &mut r);
    let zf = Tensor::randn(&[4], 1.0, &mut r);
    out.push((
        "generator loss",
        block_grad_err(&empty, &[zr, zf], |_, v| generator_loss(v[0], v[1], 0.1)),
    ));
    out
}

/// Shapes `(T, H, W, C)` the attention oracles are run on.
pub const ATTENTION_SHAPES: [[usize; 4]; 4] = [[1, 1, 1, 2], [2, 3, 2, 4], [4, 4, 4, 8], [3, 4, 2, 5]];

/// Largest deviation of both attentions from their token-loop oracles.
pub fn attention_oracle_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (i, &[t, h, w, c]) in ATTENTION_SHAPES.iter().enumerate() {
        let (store, sst) = def_conv_block(c, seed + i as u64);
        let x = Tensor::randn(&[2, t, h, w, c], 1.0, &mut r);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let xv = tape.constant(x.clone());
        let sp = spatial_attention(&s, xv, &sst.spatial).unwrap().value();
        let tp = temporal_attention(&s, xv, &sst.temporal).unwrap().value();
        let q = |l: &stt_core::nn::Linear| store.get(l.weight).clone();
        let (a, b) = (&sst.spatial, &sst.temporal);
        let sp_ref = spatial_attention_loop(&x, &q(&a.q), &q(&a.k), &q(&a.v));
        let tp_ref = temporal_attention_loop(&x, &q(&b.q), &q(&b.k), &q(&b.v));
        worst = worst.max(sp.max_abs_diff(&sp_ref)).max(tp.max_abs_diff(&tp_ref));
    }
    worst
}

/// Largest deviation of an attention row sum from one.
pub fn softmax_row_err(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (b, l, d) = (r.random_range(1..4), r.random_range(1..40), r.random_range(1..9));
        let tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[b, l, d], 4.0, &mut r));
        let k = tape.constant(Tensor::randn(&[b, l, d], 4.0, &mut r));
        let wts = attention_weights(q, k).unwrap().value();
        for row in wts.data().chunks(l) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    worst
}

fn gather_tokens(x: &Tensor, perm: &[usize], axis: usize) -> Tensor {
    let s = x.shape().to_vec();
    let mut y = x.clone();
    for n in 0..s[0] {
        for t in 0..s[1] {
            for h in 0..s[2] {
                for w in 0..s[3] {
                    let src = match axis {
                        0 => [n, perm[t], h, w],
                        _ => {
                            let p = perm[h * s[3] + w];
                            [n, t, p / s[3], p % s[3]]
                        }
                    };
                    for c in 0..s[4] {
                        y.set(&[n, t, h, w, c], x.get(&[src[0], src[1], src[2], src[3], c]));
                    }
                }
            }
        }
    }
    y
}

/// Worst violation of `A(P x) = P A(x)` over random token permutations:
/// slice order for temporal attention, in-plane positions for spatial.
pub fn equivariance_err(seed: u64, perms: usize) -> (f64, f64) {
    let mut r = rng(seed);
    let (store, sst) = def_conv_block(4, seed);
    let dims = [2, 4, 3, 4, 4];
    let (mut sp_worst, mut tp_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..perms {
        let x = Tensor::randn(&dims, 1.0, &mut r);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let run = |x: &Tensor, temporal: bool| {
            let v = tape.constant(x.clone());
            let y = if temporal {
                temporal_attention(&s, v, &sst.temporal)
            } else {
                spatial_attention(&s, v, &sst.spatial)
            };
            y.unwrap().value().as_ref().clone()
        };
        let mut tperm: Vec<usize> = (0..dims[1]).collect();
        tperm.shuffle(&mut r);
        let lhs = run(&gather_tokens(&x, &tperm, 0), true);
        let rhs = gather_tokens(&run(&x, true), &tperm, 0);
        tp_worst = tp_worst.max(lhs.max_abs_diff(&rhs));
        let mut sperm: Vec<usize> = (0..dims[2] * dims[3]).collect();
        sperm.shuffle(&mut r);
        let lhs = run(&gather_tokens(&x, &sperm, 1), false);
        let rhs = gather_tokens(&run(&x, false), &sperm, 1);
        sp_worst = sp_worst.max(lhs.max_abs_diff(&rhs));
    }
    (sp_worst, tp_worst)
}

/// Worst deviation of zero-offset deformable fusion from a plain convolution
/// of the spatial map with the same weights.
pub fn deform_degeneracy_err(seed: u64, inputs: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for i in 0..inputs {
        let c = r.random_range(1..5);
        let dims = [r.random_range(1..4), r.random_range(1..6), r.random_range(1..6)];
        let (store, sst) = def_conv_block(c, seed + i as u64);
        let stt_core::sst::FusionWeights::DefConv(fuse) = &sst.fusion else {
            unreachable!("def-conv block")
        };
        let shape = [1, dims[0], dims[1], dims[2], c];
        let xs = Tensor::randn(&shape, 1.0, &mut r);
        let xt = Tensor::randn(&shape, 1.0, &mut r);
        let tape = Tape::new();
        let s = Session::new(&tape, &store, false);
        let maps = AttentionMaps {
            spatial: tape.constant(xs.clone()),
            temporal: tape.constant(xt),
        };
        let y = sst.fuse(&s, &maps).unwrap().value();
        let xs_cf = Tensor::from_fn(&[1, c, dims[0], dims[1], dims[2]], |j| {
            let (ch, p) = (j / (dims[0] * dims[1] * dims[2]), j % (dims[0] * dims[1] * dims[2]));
            xs.data()[p * c + ch]
        });
        let pad = fuse.kernel.map(|k| k / 2);
        let reference = conv3d_loop(&xs_cf, store.get(fuse.weight), Some(store.get(fuse.bias)), [1, 1, 1], pad);
        let y_cf = Tensor::from_fn(reference.shape(), |j| {
            let vol = dims[0] * dims[1] * dims[2];
            y.data()[(j % vol) * c + j / vol]
        });
        worst = worst.max(y_cf.max_abs_diff(&reference));
    }
    worst
}

/// Worst deviation of the deformable kernel from a per-tap trilinear loop
/// with random non-zero offsets.
pub fn deform_oracle_err(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
        let kernel = if r.random_bool(0.5) { [1, 3, 3] } else { [3, 3, 3] };
        let dims = [r.random_range(1..4), r.random_range(2..6), r.random_range(2..6)];
        let taps: usize = kernel.iter().product();
        let x = Tensor::randn(&[dims[0], dims[1], dims[2], cin], 1.0, &mut r);
        let off = Tensor::randn(&[dims[0], dims[1], dims[2], 3 * taps], 1.5, &mut r);
        let w = Tensor::randn(&[cout, cin, kernel[0], kernel[1], kernel[2]], 1.0, &mut r);
        let b = Tensor::randn(&[cout], 1.0, &mut r);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .deform_conv3d(tape.constant(off.clone()), tape.constant(w.clone()), Some(tape.constant(b.clone())))
            .unwrap()
            .value();
        worst = worst.max(y.max_abs_diff(&deform_conv_loop(&x, &off, &w, &b)));
    }
    worst
}

/// Masks whose component partition differs from flood fill, out of `2 · masks`.
pub fn cc_mismatches(seed: u64, masks: usize, dims: [usize; 3]) -> usize {
    let mut r = rng(seed);
    let len = dims.iter().product();
    let mut bad = 0;
    for _ in 0..masks {
        let density = r.random_range(0.05..0.7);
        let mask = random_mask(&mut r, len, density);
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let got = connected_components_3d(&mask, dims, conn).unwrap();
            if !same_partition(got.labels(), &flood_fill(&mask, dims, conn)) {
                bad += 1;
            }
        }
    }
    bad
}

/// Largest `|dsc − 2j/(1+j)|` over random mask pairs.
pub fn dsc_identity_err(seed: u64, pairs: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let len = r.random_range(1..600);
        let (dp, dg) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let p = random_mask(&mut r, len, dp);
        let g = random_mask(&mut r, len, dg);
        let (j, d) = jaccard_dsc(&p, &g).unwrap();
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    worst
}

/// Scenes where AP-75 differs from the exhaustive cut-off oracle.
pub fn ap_oracle_mismatches(seed: u64, scenes: usize) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..scenes {
        let (pred, gt) = random_scene(&mut r, [3, 10, 10]);
        let scores: Vec<f64> = (0..pred.instance_count()).map(|_| r.random::<f64>()).collect();
        let got = ap75(&pred, &scores, &gt).unwrap();
        if (got - exhaustive_ap(&pred, &scores, &gt, 0.75)).abs() > 1e-12 {
            bad += 1;
        }
        let iou = iou_matrix(&pred, &gt).unwrap();
        for (i, &p) in iou.pred_ids.iter().enumerate() {
            for (j, &g) in iou.gt_ids.iter().enumerate() {
                if (iou.get(i, j) - pair_iou(&pred, p, &gt, g)).abs() > 1e-15 {
                    bad += 1;
                }
            }
        }
    }
    bad
}

/// Scenes where AP-75 changes under a strictly increasing score map.
pub fn monotone_violations(seed: u64, scenes: usize) -> usize {
    let mut r = rng(seed);
    let maps: [fn(f64) -> f64; 3] = [|s| 3.0 * s - 7.0, |s| s.powi(3), |s| (5.0 * s).exp() / (1.0 + s)];
    let mut bad = 0;
    for _ in 0..scenes {
        let (pred, gt) = random_scene(&mut r, [3, 10, 10]);
        let scores: Vec<f64> = (0..pred.instance_count()).map(|_| r.random::<f64>()).collect();
        let base = ap75(&pred, &scores, &gt).unwrap();
        for f in maps {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            if ap75(&pred, &mapped, &gt).unwrap() != base {
                bad += 1;
            }
        }
    }
    bad
}

/// Round trip for every dtype plus the truncated and padded file errors.
/// Returns a description of the first failure.
pub fn io_suite(dir: &std::path::Path, seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let dims = [3, 5, 7];
    let n = 105;
    let vols = [
        VoxelData::F32((0..n).map(|_| r.random::<f32>() * 2.0 - 0.5).collect()),
        VoxelData::U8((0..n).map(|_| r.random::<u8>()).collect()),
        VoxelData::U32((0..n).map(|_| r.random::<u32>()).collect()),
    ];
    for (i, data) in vols.into_iter().enumerate() {
        let vol = Volume {
            dims,
            voxel_size_nm: [r.random_range(1.0..40.0), 8.0, 8.0],
            data,
        };
        let path = dir.join(format!("vol{i}"));
        save_volume(&path, &vol).map_err(|e| e.to_string())?;
        let back = load_volume(&path).map_err(|e| e.to_string())?;
        if back != vol {
            return Err(format!("{:?} round trip differs", vol.data.dtype()));
        }
        let raw = raw_path(&path);
        let bytes = std::fs::read(&raw).map_err(|e| e.to_string())?;
        for cut in [bytes.len() - 1, bytes.len() / 2, 0] {
            std::fs::write(&raw, &bytes[..cut]).map_err(|e| e.to_string())?;
            match load_volume(&path) {
                Err(VolumeError::LengthMismatch { expected, actual, .. }) if expected == bytes.len() && actual == cut => {}
                other => return Err(format!("truncated to {cut}: {other:?}")),
            }
        }
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&raw, &longer).map_err(|e| e.to_string())?;
        if !matches!(load_volume(&path), Err(VolumeError::LengthMismatch { .. })) {
            return Err("padded file accepted".into());
        }
    }
    Ok(())
}
