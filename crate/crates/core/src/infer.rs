//! Whole-volume prediction by overlapping windows and instance extraction.

use std::path::Path;

use stt_tensor::{Tape, Tensor};

use crate::data::patch::crop_image;
use crate::data::volume::{load_volume, save_volume, stem_of, Volume};
use crate::labels::LabelVolume;
use crate::metrics::instance_scores;
use crate::model::SttUnet;
use crate::params::{ParamStore, Session};
use crate::post::{segment, PostConfig};
use crate::train::load_checkpoint;
use crate::{Error, Result};

/// Probability volumes `[T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub semantic: Tensor,
    pub boundary: Tensor,
}

/// Window origins along one axis with stride `patch / 2`; the last window is flush with the end.
pub fn window_starts(dim: usize, patch: usize) -> Vec<usize> {
    let stride = (patch / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + patch < dim).collect();
    starts.push(dim - patch);
    starts
}

/// Raised-cosine weight per voxel of a window, positive everywhere.
pub fn cosine_window(patch: [usize; 3]) -> Vec<f64> {
    let axis = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * (i as f64 + 0.5) / n as f64).cos())
            .collect()
    };
    let (a, b, c) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut out = Vec::with_capacity(patch.iter().product());
    for x in &a {
        for y in &b {
            for z in &c {
                out.push(x * y * z);
            }
        }
    }
    out
}

/// Blends per-window predictions, visiting windows in raster order.
///
/// A volume that is exactly one window is returned as predicted.
pub fn blend_windows(
    dims: [usize; 3],
    patch: [usize; 3],
    mut predict: impl FnMut([usize; 3]) -> Result<Prediction>,
) -> Result<Prediction> {
    if (0..3).any(|a| patch[a] > dims[a]) {
        return Err(Error::shape("sliding window", format!("volume {dims:?} is smaller than patch {patch:?}")));
    }
    if dims == patch {
        return predict([0, 0, 0]);
    }
    let weight = cosine_window(patch);
    let n: usize = dims.iter().product();
    let (mut sem, mut bnd, mut norm) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for &t0 in &window_starts(dims[0], patch[0]) {
        for &h0 in &window_starts(dims[1], patch[1]) {
            for &w0 in &window_starts(dims[2], patch[2]) {
                let p = predict([t0, h0, w0])?;
                let (ps, pb) = (p.semantic.data(), p.boundary.data());
                let mut k = 0;
                for t in 0..patch[0] {
                    for h in 0..patch[1] {
                        let row = ((t0 + t) * dims[1] + h0 + h) * dims[2] + w0;
                        for w in 0..patch[2] {
                            let wt = weight[k];
                            sem[row + w] += wt * ps[k];
                            bnd[row + w] += wt * pb[k];
                            norm[row + w] += wt;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    for i in 0..n {
        sem[i] /= norm[i];
        bnd[i] /= norm[i];
    }
    Ok(Prediction {
        semantic: Tensor::new(&dims, sem)?,
        boundary: Tensor::new(&dims, bnd)?,
    })
}

/// Sigmoid probabilities for one `[T, H, W]` window.
pub fn predict_window(model: &SttUnet, params: &ParamStore, window: &Tensor) -> Result<Prediction> {
    let s = window.shape().to_vec();
    let tape = Tape::new();
    let session = Session::new(&tape, params, false);
    let x = tape.constant(window.clone().reshape(&[1, 1, s[0], s[1], s[2]])?);
    let out = model.forward(&session, x)?;
    Ok(Prediction {
        semantic: out.semantic.sigmoid().reshape(&s)?.value().as_ref().clone(),
        boundary: out.boundary.sigmoid().reshape(&s)?.value().as_ref().clone(),
    })
}

pub fn predict_volume(model: &SttUnet, params: &ParamStore, image: &Tensor) -> Result<Prediction> {
    let dims: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::shape("predict_volume", format!("expected [T, H, W], got {:?}", image.shape())))?;
    let patch = model.cfg.patch;
    blend_windows(dims, patch, |corner| predict_window(model, params, &crop_image(image, corner, patch)))
}

/// Instances, their scores (ascending id) and the probability volumes.
pub struct Segmentation {
    pub labels: LabelVolume,
    pub scores: Vec<f64>,
    pub prediction: Prediction,
}

pub fn segment_volume(model: &SttUnet, params: &ParamStore, image: &Tensor, post: &PostConfig) -> Result<Segmentation> {
    let prediction = predict_volume(model, params, image)?;
    let labels = segment(&prediction.semantic, &prediction.boundary, post)?;
    let scores = instance_scores(&labels, &prediction.semantic)?;
    Ok(Segmentation {
        labels,
        scores,
        prediction,
    })
}

/// `<stem>.scores.json` beside a label volume.
pub fn scores_path(out: &Path) -> std::path::PathBuf {
    let mut s = stem_of(out).into_os_string();
    s.push(".scores.json");
    s.into()
}

/// Loads a checkpoint and a volume, segments it and writes labels plus scores.
pub fn run_inference(ckpt: &Path, input: &Path, out: &Path) -> Result<Segmentation> {
    let (cfg, model, params) = load_checkpoint(ckpt)?;
    let vol = load_volume(input)?;
    let seg = segment_volume(&model, &params, &vol.to_image(), &cfg.post)?;
    let mut labels_out = Volume::from_labels(&seg.labels);
    labels_out.voxel_size_nm = vol.voxel_size_nm;
    save_volume(out, &labels_out)?;
    let path = scores_path(out);
    let text = serde_json::to_string(&seg.scores).expect("scores serialize");
    std::fs::write(&path, text).map_err(|source| Error::Io { path, source })?;
    Ok(seg)
}
