use std::collections::BTreeMap;

use crate::{Error, Result};

/// Integer volume `[T, H, W]`; 0 is background, every other value an instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], labels: Vec<u32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(Error::shape(
                "label volume",
                format!("{dims:?} needs {n} voxels, got {}", labels.len()),
            ));
        }
        Ok(Self { dims, labels })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            labels: vec![0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u32> {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, t: usize, h: usize, w: usize) -> u32 {
        self.labels[self.index(t, h, w)]
    }

    /// Voxel count per nonzero id, ascending by id.
    pub fn sizes(&self) -> BTreeMap<u32, usize> {
        let mut sizes = BTreeMap::new();
        for &l in &self.labels {
            if l != 0 {
                *sizes.entry(l).or_insert(0) += 1;
            }
        }
        sizes
    }

    /// Number of distinct nonzero ids.
    pub fn instance_count(&self) -> usize {
        self.sizes().len()
    }

    /// Whether the ids are exactly `1..=instance_count`.
    pub fn is_contiguous(&self) -> bool {
        self.sizes().keys().copied().eq(1..=self.instance_count() as u32)
    }

    /// Renumbers ids to `1..=k` in order of first appearance in raster scan.
    pub fn compacted(&self) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let next = map.len() as u32 + 1;
                    *map.entry(l).or_insert(next)
                }
            })
            .collect();
        Self { dims: self.dims, labels }
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Sub-volume starting at `corner` with extents `dims`.
    pub fn crop(&self, corner: [usize; 3], dims: [usize; 3]) -> Self {
        let mut labels = Vec::with_capacity(dims.iter().product());
        for t in 0..dims[0] {
            for h in 0..dims[1] {
                let start = self.index(corner[0] + t, corner[1] + h, corner[2]);
                labels.extend_from_slice(&self.labels[start..start + dims[2]]);
            }
        }
        Self { dims, labels }
    }
}
