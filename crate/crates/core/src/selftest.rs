//! Quick oracle checks runnable from the command line.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stt_tensor::gradcheck::check_gradients;
use stt_tensor::{Tape, Tensor, Var};

use crate::data::volume::{load_volume, save_volume, Volume, VoxelData, DEFAULT_VOXEL_NM};
use crate::losses::Discriminator;
use crate::metrics::jaccard_dsc;
use crate::model::Denoiser;
use crate::nn::Acb;
use crate::params::{ParamBuilder, ParamStore, Session};
use crate::post::{connected_components_3d, Connectivity};
use crate::sst::{attention_weights, Sst, SstConfig};
use crate::Result;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const GRAD_TOL: f64 = 1e-4;

/// Randomizes every parameter so no sampling position sits on the lattice.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    store.map_values(|name, t| {
        let base = if name.contains("offsets.bias") { 0.31 } else { 0.0 };
        Tensor::from_fn(t.shape(), |_| base + 0.3 * rng.random_range(-1.0..1.0))
    });
}

/// Finite-difference check of a block over its input and all parameters.
pub fn block_gradients<F>(store: &ParamStore, input: &Tensor, forward: F) -> Result<f64>
where
    F: for<'t> Fn(&Session<'t, '_>, Var<'t>) -> Result<Var<'t>>,
{
    let mut inputs = vec![input.clone()];
    inputs.extend(store.entries().iter().map(|(_, t)| t.clone()));
    let failure = RefCell::new(None);
    let report = check_gradients(&inputs, 1e-5, |tape, v| {
        let s = Session::from_vars(tape, store, &v[1..]);
        forward(&s, v[0]).or_else(|e| {
            failure.borrow_mut().get_or_insert(e);
            Ok(v[0])
        })
    })?;
    match failure.into_inner() {
        Some(e) => Err(e),
        None => Ok(report.max_rel_err()),
    }
}

fn grad_check(name: &'static str, result: Result<f64>) -> Check {
    match result {
        Ok(err) => Check {
            name,
            passed: err < GRAD_TOL,
            detail: format!("max rel err {err:.2e}"),
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn flood_fill_count(mask: &[bool], dims: [usize; 3], conn: Connectivity) -> usize {
    let offsets = conn.offsets();
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            let p = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
            for d in &offsets {
                let q: Vec<isize> = (0..3).map(|a| p[a] as isize + d[a]).collect();
                if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as isize) {
                    continue;
                }
                let j = (q[0] as usize * dims[1] + q[1] as usize) * dims[2] + q[2] as usize;
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

pub fn run() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = Vec::new();

    let mut store = ParamStore::new();
    let acb = Acb::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, 3);
    jitter(&mut store, &mut rng);
    let x = Tensor::randn(&[1, 2, 3, 4, 4], 1.0, &mut rng);
    checks.push(grad_check("acb gradients", block_gradients(&store, &x, |s, x| acb.forward(s, x))));

    let mut store = ParamStore::new();
    let sst = Sst::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, &SstConfig::default());
    jitter(&mut store, &mut rng);
    let x = Tensor::randn(&[1, 2, 3, 3, 4], 1.0, &mut rng);
    checks.push(grad_check("sst gradients", block_gradients(&store, &x, |s, x| sst.forward(s, x))));

    let mut store = ParamStore::new();
    let den = Denoiser::new(&mut ParamBuilder::new(&mut store, &mut rng));
    jitter(&mut store, &mut rng);
    let x = Tensor::uniform(&[1, 1, 3, 4, 4], 0.0, 1.0, &mut rng);
    checks.push(grad_check("denoiser gradients", block_gradients(&store, &x, |s, x| den.forward(s, x))));

    let mut store = ParamStore::new();
    let disc = Discriminator::new(&mut ParamBuilder::new(&mut store, &mut rng));
    jitter(&mut store, &mut rng);
    let img = Tensor::uniform(&[1, 4, 4, 4], 0.0, 1.0, &mut rng);
    let mask = Tensor::uniform(&[1, 4, 4, 4], 0.0, 1.0, &mut rng);
    checks.push(grad_check(
        "discriminator gradients",
        block_gradients(&store, &mask, |s, m| disc.forward(s, s.tape().constant(img.clone()), m)),
    ));

    {
        let tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[3, 9, 4], 3.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[3, 9, 4], 3.0, &mut rng));
        let w = attention_weights(q, k).map(|w| w.value());
        let worst = w
            .map(|w| w.data().chunks(9).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max))
            .unwrap_or(f64::INFINITY);
        checks.push(Check {
            name: "attention rows sum to one",
            passed: worst < 1e-12,
            detail: format!("max deviation {worst:.1e}"),
        });
    }

    let mut mismatches = 0;
    for _ in 0..50 {
        let dims = [6, 6, 6];
        let density = rng.random_range(0.1..0.6);
        let mask: Vec<bool> = (0..216).map(|_| rng.random_bool(density)).collect();
        for conn in [Connectivity::Six, Connectivity::TwentySix] {
            let cc = connected_components_3d(&mask, dims, conn).map(|c| c.instance_count());
            if cc.ok() != Some(flood_fill_count(&mask, dims, conn)) {
                mismatches += 1;
            }
        }
    }
    checks.push(Check {
        name: "components match flood fill",
        passed: mismatches == 0,
        detail: format!("{mismatches} of 100 disagree"),
    });

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p: Vec<bool> = (0..64).map(|_| rng.random_bool(0.4)).collect();
        let g: Vec<bool> = (0..64).map(|_| rng.random_bool(0.4)).collect();
        if let Ok((j, d)) = jaccard_dsc(&p, &g) {
            worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
        }
    }
    checks.push(Check {
        name: "dsc = 2j/(1+j)",
        passed: worst < 1e-12,
        detail: format!("max deviation {worst:.1e}"),
    });

    let dir = std::env::temp_dir().join(format!("sttunet-selftest-{}", std::process::id()));
    let vol = Volume {
        dims: [2, 3, 4],
        voxel_size_nm: DEFAULT_VOXEL_NM,
        data: VoxelData::F32((0..24).map(|_| rng.random::<f32>()).collect()),
    };
    let round_trip = std::fs::create_dir_all(&dir)
        .map_err(|e| e.to_string())
        .and_then(|_| save_volume(&dir.join("v"), &vol).map_err(|e| e.to_string()))
        .and_then(|_| load_volume(&dir.join("v")).map_err(|e| e.to_string()));
    let _ = std::fs::remove_dir_all(&dir);
    checks.push(Check {
        name: "volume round trip",
        passed: round_trip.as_ref().is_ok_and(|v| *v == vol),
        detail: round_trip.err().unwrap_or_else(|| "bit-identical".into()),
    });
    checks
}
