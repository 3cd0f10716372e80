//! Overlap metrics and 3D average precision at IoU 0.75.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use stt_tensor::Tensor;

use crate::labels::LabelVolume;
use crate::{Error, Result};

pub const AP_IOU_THRESHOLD: f64 = 0.75;

/// `(|P∩G| / |P∪G|, 2|P∩G| / (|P| + |G|))`, both 1 when the masks are empty.
pub fn jaccard_dsc(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape("jaccard_dsc", format!("{} vs {} voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((inter as f64 / union as f64, 2.0 * inter as f64 / (p + g) as f64))
}

/// Voxel IoU between every predicted and every ground-truth instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouMatrix {
    /// Instance ids labelling the rows, ascending.
    pub pred_ids: Vec<u32>,
    /// Instance ids labelling the columns, ascending.
    pub gt_ids: Vec<u32>,
    /// Row-major `[pred_ids.len(), gt_ids.len()]`.
    pub values: Vec<f64>,
}

impl IouMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.gt_ids.len() + col]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        if self.gt_ids.is_empty() {
            return vec![Vec::new(); self.pred_ids.len()];
        }
        self.values.chunks(self.gt_ids.len()).map(<[f64]>::to_vec).collect()
    }
}

fn check_dims(op: &'static str, a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// IoU matrix from a single contingency sweep over both volumes.
pub fn iou_matrix(pred: &LabelVolume, gt: &LabelVolume) -> Result<IouMatrix> {
    check_dims("iou_matrix", pred, gt)?;
    let (ps, gs) = (pred.sizes(), gt.sizes());
    let pred_ids: Vec<u32> = ps.keys().copied().collect();
    let gt_ids: Vec<u32> = gs.keys().copied().collect();
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p != 0 && g != 0 {
            *overlap.entry((p, g)).or_insert(0) += 1;
        }
    }
    let mut values = vec![0.0; pred_ids.len() * gt_ids.len()];
    let (prow, gcol): (HashMap<u32, usize>, HashMap<u32, usize>) = (
        pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
        gt_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect(),
    );
    for (&(p, g), &inter) in &overlap {
        let union = ps[&p] + gs[&g] - inter;
        values[prow[&p] * gt_ids.len() + gcol[&g]] = inter as f64 / union as f64;
    }
    Ok(IouMatrix { pred_ids, gt_ids, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

/// Greedy matching in descending score order (ties by ascending pred id).
///
/// `scores[i]` belongs to row `i`. Returns the matches in visiting order and,
/// per visited prediction, whether it was a true positive.
pub fn greedy_match(iou: &IouMatrix, scores: &[f64], threshold: f64) -> Result<(Vec<Match>, Vec<bool>)> {
    if scores.len() != iou.pred_ids.len() {
        return Err(Error::shape(
            "ap75",
            format!("{} scores for {} predicted instances", scores.len(), iou.pred_ids.len()),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut taken = vec![false; iou.gt_ids.len()];
    let mut matches = Vec::new();
    let mut tp = Vec::with_capacity(order.len());
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (j, &used) in taken.iter().enumerate() {
            let v = iou.get(i, j);
            if !used && v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            taken[j] = true;
            matches.push(Match {
                pred: iou.pred_ids[i],
                gt: iou.gt_ids[j],
                iou: v,
            });
        }
        tp.push(best.is_some());
    }
    Ok((matches, tp))
}

/// All-points interpolated area under the precision-recall curve.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    match (tp.is_empty(), num_gt) {
        (true, 0) => return 1.0,
        (_, 0) | (true, _) => return 0.0,
        _ => {}
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP at IoU ≥ 0.75; `scores` follow ascending predicted instance id.
pub fn ap75(pred: &LabelVolume, scores: &[f64], gt: &LabelVolume) -> Result<f64> {
    let iou = iou_matrix(pred, gt)?;
    let (_, tp) = greedy_match(&iou, scores, AP_IOU_THRESHOLD)?;
    Ok(average_precision(&tp, iou.gt_ids.len()))
}

/// Mean of `sem` over each instance, in ascending id order.
pub fn instance_scores(labels: &LabelVolume, sem: &Tensor) -> Result<Vec<f64>> {
    if sem.len() != labels.len() {
        return Err(Error::shape("instance_scores", format!("{:?} vs {:?}", labels.dims(), sem.shape())));
    }
    let mut acc: std::collections::BTreeMap<u32, (f64, usize)> = Default::default();
    for (&l, &p) in labels.labels().iter().zip(sem.data()) {
        if l != 0 {
            let e = acc.entry(l).or_insert((0.0, 0));
            e.0 += p;
            e.1 += 1;
        }
    }
    Ok(acc.values().map(|(s, n)| s / *n as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ap75: f64,
    pub jaccard: f64,
    pub dsc: f64,
    pub iou_matrix: IouMatrix,
    pub matches: Vec<Match>,
}

/// Full report; `scores` default to equal confidence when absent.
pub fn evaluate(pred: &LabelVolume, scores: Option<&[f64]>, gt: &LabelVolume) -> Result<MetricReport> {
    let iou = iou_matrix(pred, gt)?;
    let uniform = vec![1.0; iou.pred_ids.len()];
    let (matches, tp) = greedy_match(&iou, scores.unwrap_or(&uniform), AP_IOU_THRESHOLD)?;
    let (jaccard, dsc) = jaccard_dsc(&pred.foreground(), &gt.foreground())?;
    Ok(MetricReport {
        ap75: average_precision(&tp, iou.gt_ids.len()),
        jaccard,
        dsc,
        iou_matrix: iou,
        matches,
    })
}

impl MetricReport {
    /// Plain-text table for terminals.
    pub fn render(&self) -> String {
        let mut out = format!(
            "AP-75    {:.4}\nJaccard  {:.4}\nDSC      {:.4}\n\npred  gt    IoU\n",
            self.ap75, self.jaccard, self.dsc
        );
        for m in &self.matches {
            out += &format!("{:<5} {:<5} {:.4}\n", m.pred, m.gt, m.iou);
        }
        out
    }
}
