//! Instance extraction from semantic and boundary probability volumes.
//!
//! Seeds are confident foreground voxels away from boundaries. Seeds are
//! split into connected components, then grown back over the remaining
//! foreground by breadth-first search, so touching objects separated by a
//! predicted boundary come out as distinct instances.

use serde::{Deserialize, Serialize};
use stt_tensor::Tensor;

use crate::labels::LabelVolume;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Self::Six),
            26 => Ok(Self::TwentySix),
            _ => Err(format!("connectivity must be 6 or 26, got {v}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour displacements `(dt, dh, dw)`, lexicographically ordered.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dt in -1..=1isize {
            for dh in -1..=1isize {
                for dw in -1..=1isize {
                    let steps = dt.abs() + dh.abs() + dw.abs();
                    let keep = match self {
                        Self::Six => steps == 1,
                        Self::TwentySix => steps > 0,
                    };
                    if keep {
                        out.push([dt, dh, dw]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostConfig {
    pub semantic_threshold: f64,
    pub boundary_threshold: f64,
    pub connectivity: Connectivity,
    /// Instances with fewer voxels are dropped.
    pub min_size: usize,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            semantic_threshold: 0.8,
            boundary_threshold: 0.5,
            connectivity: Connectivity::TwentySix,
            min_size: 64,
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("post.semantic_threshold", self.semantic_threshold),
            ("post.boundary_threshold", self.boundary_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(name, format!("must lie strictly between 0 and 1, got {v}")));
            }
        }
        Ok(())
    }
}

fn dims_of(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    t.shape()
        .try_into()
        .map_err(|_| Error::shape(op, format!("expected [T, H, W], got {:?}", t.shape())))
}

/// `(sem > θ_s) ∧ (bnd < θ_b)` per voxel.
pub fn seed_mask(sem: &Tensor, bnd: &Tensor, cfg: &PostConfig) -> Result<Vec<bool>> {
    if sem.shape() != bnd.shape() {
        return Err(Error::shape("seed_mask", format!("{:?} vs {:?}", sem.shape(), bnd.shape())));
    }
    Ok(sem
        .data()
        .iter()
        .zip(bnd.data())
        .map(|(&s, &b)| s > cfg.semantic_threshold && b < cfg.boundary_threshold)
        .collect())
}

/// Visits in-bounds neighbours of voxel `(t, h, w)`.
fn for_neighbours(dims: [usize; 3], at: [usize; 3], offsets: &[[isize; 3]], mut f: impl FnMut(usize)) {
    for d in offsets {
        let mut p = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let q = at[a] as isize + d[a];
            if q < 0 || q >= dims[a] as isize {
                inside = false;
                break;
            }
            p[a] = q as usize;
        }
        if inside {
            f((p[0] * dims[1] + p[1]) * dims[2] + p[2]);
        }
    }
}

fn coords(dims: [usize; 3], i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

struct DisjointSets {
    parent: Vec<u32>,
}

impl DisjointSets {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labeling; ids follow first-voxel raster order.
pub fn connected_components_3d(mask: &[bool], dims: [usize; 3], conn: Connectivity) -> Result<LabelVolume> {
    let n: usize = dims.iter().product();
    if mask.len() != n {
        return Err(Error::shape("connected_components_3d", format!("{dims:?} vs {} voxels", mask.len())));
    }
    // Only neighbours already visited in raster order.
    let back: Vec<[isize; 3]> = conn.offsets().into_iter().filter(|d| *d < [0, 0, 0]).collect();
    let mut provisional = vec![0u32; n];
    let mut sets = DisjointSets { parent: vec![0] };
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let mut label = 0u32;
        for_neighbours(dims, coords(dims, i), &back, |j| {
            let lj = provisional[j];
            if lj != 0 {
                if label == 0 {
                    label = lj;
                } else {
                    sets.union(label, lj);
                }
            }
        });
        if label == 0 {
            label = sets.parent.len() as u32;
            sets.parent.push(label);
        }
        provisional[i] = label;
    }
    let mut final_id = vec![0u32; sets.parent.len()];
    let mut next = 0u32;
    let labels = provisional
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            let root = sets.find(l) as usize;
            if final_id[root] == 0 {
                next += 1;
                final_id[root] = next;
            }
            final_id[root]
        })
        .collect();
    LabelVolume::new(dims, labels)
}

/// Grows seed labels over unlabeled foreground, then drops small instances.
///
/// Growth is level-synchronous: a voxel reached at BFS step `d` takes the
/// smallest id among neighbours labeled at step `d − 1`. Ids are compacted
/// in raster order afterwards.
pub fn grow_instances(seeds: &LabelVolume, sem: &Tensor, cfg: &PostConfig) -> Result<LabelVolume> {
    let dims = seeds.dims();
    if dims_of("grow_instances", sem)? != dims {
        return Err(Error::shape("grow_instances", format!("{dims:?} vs {:?}", sem.shape())));
    }
    let offsets = cfg.connectivity.offsets();
    let fg: Vec<bool> = sem.data().iter().map(|&p| p > cfg.semantic_threshold).collect();
    let mut labels = seeds.labels().to_vec();
    let mut frontier: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    let mut proposal = vec![0u32; labels.len()];
    while !frontier.is_empty() {
        let mut reached = Vec::new();
        for &i in &frontier {
            let l = labels[i];
            for_neighbours(dims, coords(dims, i), &offsets, |j| {
                if labels[j] == 0 && fg[j] {
                    if proposal[j] == 0 {
                        reached.push(j);
                        proposal[j] = l;
                    } else {
                        proposal[j] = proposal[j].min(l);
                    }
                }
            });
        }
        for &j in &reached {
            labels[j] = proposal[j];
            proposal[j] = 0;
        }
        frontier = reached;
    }
    let grown = LabelVolume::new(dims, labels)?;
    let sizes = grown.sizes();
    let mut kept = grown;
    for l in kept.labels_mut() {
        if *l != 0 && sizes[l] < cfg.min_size {
            *l = 0;
        }
    }
    Ok(kept.compacted())
}

/// Seeds, components and growth in one call.
pub fn segment(sem: &Tensor, bnd: &Tensor, cfg: &PostConfig) -> Result<LabelVolume> {
    let dims = dims_of("segment", sem)?;
    let seeds = seed_mask(sem, bnd, cfg)?;
    let cc = connected_components_3d(&seeds, dims, cfg.connectivity)?;
    grow_instances(&cc, sem, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(min_size: usize) -> PostConfig {
        PostConfig {
            min_size,
            ..PostConfig::default()
        }
    }

    #[test]
    fn seed_extremes() {
        let ones = Tensor::ones(&[2, 3, 3]);
        let zeros = Tensor::zeros(&[2, 3, 3]);
        assert!(seed_mask(&ones, &zeros, &cfg(1)).unwrap().iter().all(|&b| b));
        assert!(seed_mask(&ones, &ones, &cfg(1)).unwrap().iter().all(|&b| !b));
    }

    #[test]
    fn disk_with_boundary_rim_leaves_interior_seed() {
        // 5×5 block of foreground whose outer ring carries high boundary probability.
        let sem = Tensor::from_fn(&[1, 7, 7], |i| {
            let (h, w) = (i / 7, i % 7);
            if (1..=5).contains(&h) && (1..=5).contains(&w) { 0.95 } else { 0.0 }
        });
        let bnd = Tensor::from_fn(&[1, 7, 7], |i| {
            let (h, w) = (i / 7, i % 7);
            if h == 1 || h == 5 || w == 1 || w == 5 { 0.9 } else { 0.1 }
        });
        let seeds = seed_mask(&sem, &bnd, &cfg(1)).unwrap();
        let expected: Vec<bool> = (0..49).map(|i| (2..=4).contains(&(i / 7)) && (2..=4).contains(&(i % 7))).collect();
        assert_eq!(seeds, expected);
        let out = segment(&sem, &bnd, &cfg(1)).unwrap();
        assert_eq!(out.instance_count(), 1);
        assert_eq!(out.sizes()[&1], 25);
    }

    #[test]
    fn corner_contact_depends_on_connectivity() {
        let mut mask = vec![false; 8];
        mask[0] = true;
        mask[7] = true;
        let c26 = connected_components_3d(&mask, [2, 2, 2], Connectivity::TwentySix).unwrap();
        let c6 = connected_components_3d(&mask, [2, 2, 2], Connectivity::Six).unwrap();
        assert_eq!(c26.instance_count(), 1);
        assert_eq!(c6.instance_count(), 2);
        let empty = connected_components_3d(&[false; 8], [2, 2, 2], Connectivity::Six).unwrap();
        assert_eq!(empty.instance_count(), 0);
    }

    #[test]
    fn union_find_merges_u_shape() {
        // Two arms that meet only at the bottom row must end up as one label.
        let rows = ["#.#", "#.#", "###"];
        let mask: Vec<bool> = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        let cc = connected_components_3d(&mask, [1, 3, 3], Connectivity::Six).unwrap();
        assert_eq!(cc.labels(), [1, 0, 1, 1, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn ring_takes_the_single_seed_label() {
        let sem = Tensor::from_fn(&[1, 5, 5], |i| if (1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5)) { 0.9 } else { 0.1 });
        let mut seed = vec![0u32; 25];
        seed[12] = 1;
        let seeds = LabelVolume::new([1, 5, 5], seed).unwrap();
        let grown = grow_instances(&seeds, &sem, &cfg(1)).unwrap();
        let expected: Vec<u32> = sem.data().iter().map(|&p| (p > 0.8) as u32).collect();
        assert_eq!(grown.labels(), expected);
        assert_eq!(grow_instances(&grown, &sem, &cfg(1)).unwrap(), grown);
    }

    #[test]
    fn equidistant_voxel_goes_to_smaller_label() {
        // Seeds 1 and 2 at both ends of a row; the middle voxel is two steps from each.
        let sem = Tensor::full(&[1, 1, 5], 0.9);
        let seeds = LabelVolume::new([1, 1, 5], vec![1, 0, 0, 0, 2]).unwrap();
        let grown = grow_instances(&seeds, &sem, &cfg(1)).unwrap();
        assert_eq!(grown.labels(), [1, 1, 1, 2, 2]);
        let swapped = LabelVolume::new([1, 1, 5], vec![2, 0, 0, 0, 1]).unwrap();
        let grown = grow_instances(&swapped, &sem, &cfg(1)).unwrap();
        // Label 1 (right seed) wins the middle; compaction renames left to 1.
        assert_eq!(grown.labels(), [1, 1, 2, 2, 2]);
    }

    #[test]
    fn small_instances_are_dropped_and_ids_compacted() {
        let sem = Tensor::full(&[1, 1, 6], 0.9);
        let seeds = LabelVolume::new([1, 1, 6], vec![1, 0, 2, 2, 2, 2]).unwrap();
        let c6 = PostConfig {
            connectivity: Connectivity::Six,
            ..cfg(3)
        };
        let grown = grow_instances(&seeds, &sem, &c6).unwrap();
        assert_eq!(grown.labels(), [0, 0, 1, 1, 1, 1]);
    }
}
