//! Finite-difference checks for every differentiable op (64-bit, step 1e-5).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stt_tensor::gradcheck::check_gradients;
use stt_tensor::{Conv3dGeometry, Tensor, Var};

const STEP: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_gradients_are_exact_to_roundoff() {
    let mut r = rng(1);
    let a = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5, 3], 1.0, &mut r);
    let g = check_gradients(&[a, b], STEP, |_, v| v[0].matmul(v[1])).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
}

#[test]
fn batched_matmul_gradients() {
    let mut r = rng(2);
    let a = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[3, 5, 2], 1.0, &mut r);
    let shared = Tensor::randn(&[5, 2], 1.0, &mut r);
    let g = check_gradients(&[a.clone(), b], STEP, |_, v| v[0].matmul(v[1])).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
    let g = check_gradients(&[a, shared], STEP, |_, v| v[0].matmul(v[1])).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
}

#[test]
fn elementwise_and_unary_gradients() {
    let mut r = rng(3);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::uniform(&[3, 4], 0.5, 2.0, &mut r);
    let g = check_gradients(&[a.clone(), b.clone()], STEP, |_, v| {
        let s = v[0].add(v[1])?.mul(v[0])?.sub(v[1].scale(0.3))?;
        s.div(v[1])
    })
    .unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
    let g = check_gradients(&[a], STEP, |_, v| {
        let x = v[0];
        let parts = [x.sigmoid(), x.softplus(), x.exp(), x.square(), x.relu(), x.abs(), x.neg().add_scalar(1.0)];
        Var::concat(&parts, 0)
    })
    .unwrap();
    assert!(g.max_rel_err() < 1e-4, "{g:?}");
    let g = check_gradients(&[b], STEP, |_, v| Var::concat(&[v[0].ln(), v[0].sqrt()], 1)).unwrap();
    assert!(g.max_rel_err() < 1e-4, "{g:?}");
}

#[test]
fn shape_op_gradients() {
    let mut r = rng(4);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let g = check_gradients(&[a], STEP, |_, v| {
        let p = v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?;
        let s = p.index_select(0, &[3, 1, 1])?;
        let q = p.narrow(0, 0, 2)?.sum_axis(1)?;
        let m = p.mean_axis(0)?.mean();
        Var::concat(&[s.reshape(&[18])?, q, m.reshape(&[1])?], 0)
    })
    .unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
}

#[test]
fn softmax_gradients_on_every_axis() {
    let mut r = rng(5);
    let a = Tensor::randn(&[3, 4, 5], 2.0, &mut r);
    for axis in 0..3 {
        let g = check_gradients(&[a.clone()], STEP, |_, v| v[0].softmax(axis)).unwrap();
        assert!(g.max_rel_err() < 1e-4, "axis {axis}: {g:?}");
    }
}

#[test]
fn layer_norm_gradients() {
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 3, 6], 1.5, &mut r);
    let gamma = Tensor::uniform(&[6], 0.5, 1.5, &mut r);
    let beta = Tensor::randn(&[6], 0.5, &mut r);
    let g = check_gradients(&[x.clone(), gamma, beta], STEP, |_, v| v[0].layer_norm(v[1], v[2], 2, 1e-5)).unwrap();
    assert!(g.max_rel_err() < 1e-4, "{g:?}");
    let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let beta = Tensor::randn(&[3], 0.5, &mut r);
    let g = check_gradients(&[x, gamma, beta], STEP, |_, v| v[0].layer_norm(v[1], v[2], 1, 1e-5)).unwrap();
    assert!(g.max_rel_err() < 1e-4, "{g:?}");
}

#[test]
fn conv3d_gradients_strided_and_padded() {
    let mut r = rng(7);
    let x = Tensor::randn(&[2, 2, 4, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3, 3], 0.5, &mut r);
    let b = Tensor::randn(&[3], 0.5, &mut r);
    for geom in [
        Conv3dGeometry::new([1, 1, 1], [1, 1, 1]),
        Conv3dGeometry::new([2, 2, 2], [1, 1, 1]),
        Conv3dGeometry::new([1, 2, 1], [0, 1, 0]),
    ] {
        let g = check_gradients(&[x.clone(), w.clone(), b.clone()], STEP, |_, v| {
            v[0].conv3d(v[1], Some(v[2]), geom)
        })
        .unwrap();
        assert!(g.max_rel_err() < 1e-6, "{geom:?}: {g:?}");
    }
    let w1 = Tensor::randn(&[3, 2, 1, 1, 1], 0.5, &mut r);
    let g = check_gradients(&[x, w1], STEP, |_, v| v[0].conv3d(v[1], None, Conv3dGeometry::UNIT)).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
}

#[test]
fn trilinear_sample_gradients_off_lattice() {
    let mut r = rng(8);
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    // Keep coordinates strictly between lattice planes so the sampler is smooth.
    let coords = Tensor::from_fn(&[6, 3], |i| {
        let base = [-0.6, 0.2, 1.3, 2.45, 3.6, 0.8][i % 6] + 0.17 * (i / 6) as f64;
        base + 0.05 * ((i * 13) % 7) as f64
    });
    let g = check_gradients(&[x, coords], STEP, |_, v| v[0].trilinear_sample(v[1])).unwrap();
    assert!(g.max_rel_err() < 1e-4, "{g:?}");
}

#[test]
fn upsample_gradients() {
    let mut r = rng(9);
    let x = Tensor::randn(&[1, 2, 2, 3, 3], 1.0, &mut r);
    let g = check_gradients(&[x], STEP, |_, v| v[0].upsample_trilinear([2, 2, 2])).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
}

#[test]
fn deform_conv_gradients_with_nonzero_offsets() {
    let mut r = rng(10);
    let x = Tensor::randn(&[2, 4, 4, 3], 1.0, &mut r);
    for kernel in [[1, 3, 3], [3, 3, 3]] {
        let taps: usize = kernel.iter().product();
        let off = Tensor::from_fn(&[2, 4, 4, 3 * taps], |i| 0.15 + 0.6 * ((i as f64 * 0.61).sin()) * 0.5);
        let w = Tensor::randn(&[2, 3, kernel[0], kernel[1], kernel[2]], 0.5, &mut r);
        let b = Tensor::randn(&[2], 0.5, &mut r);
        let g = check_gradients(&[x.clone(), off, w, b], STEP, |_, v| v[0].deform_conv3d(v[1], v[2], Some(v[3]))).unwrap();
        assert!(g.max_rel_err() < 1e-4, "{kernel:?}: {g:?}");
    }
}

#[test]
fn frame_filter_gradients() {
    let mut r = rng(11);
    let x = Tensor::randn(&[3, 4, 5], 1.0, &mut r);
    let k = Tensor::randn(&[3, 27], 0.3, &mut r);
    let g = check_gradients(&[x, k], STEP, |_, v| v[0].frame_filter(v[1])).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
}

#[test]
fn bce_gradients() {
    let mut r = rng(12);
    let z = Tensor::randn(&[2, 4, 4], 2.0, &mut r);
    let t = Tensor::from_fn(&[2, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let w = Tensor::uniform(&[2, 4, 4], 0.0, 1.0, &mut r);
    let g = check_gradients(&[z.clone()], STEP, |_, v| v[0].bce_with_logits(&t, None)).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
    let g = check_gradients(&[z], STEP, |_, v| v[0].bce_with_logits(&t, Some(&w))).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
}

#[test]
fn add_along_axis_gradients() {
    let mut r = rng(13);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    let g = check_gradients(&[x, b], STEP, |_, v| v[0].add_along_axis(v[1], 1)).unwrap();
    assert!(g.max_rel_err() < 1e-6, "{g:?}");
}
