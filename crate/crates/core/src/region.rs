//! Region maps, grid partitions, masked average pooling and prototype expansion.
//!
//! A [`RegionMap`] is a label raster: every pixel carries exactly one region
//! id in `[0, n)`, and every id is used. This is equivalent to a stack of
//! disjoint binary masks.

use std::path::Path;
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::netpbm::GrayImage;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Upper bound on regions per image; the container stores the count in a byte.
pub const MAX_REGIONS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    height: usize,
    width: usize,
    labels: Arc<[u32]>,
    n: usize,
}

impl RegionMap {
    /// Build from labels that already satisfy the contiguity invariant.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(dim_err!("{} labels for a {height}x{width} map", labels.len()));
        }
        let n = *labels.iter().max().unwrap() as usize + 1;
        if n > MAX_REGIONS {
            return Err(Error::Parse(format!("{n} regions exceed the limit of {MAX_REGIONS}")));
        }
        let mut used = vec![false; n];
        for &l in &labels {
            used[l as usize] = true;
        }
        if let Some(missing) = used.iter().position(|u| !u) {
            return Err(Error::Parse(format!("region label {missing} is unused")));
        }
        Ok(Self { height, width, labels: labels.into(), n })
    }

    /// Re-index arbitrary label values to `[0, n)` in order of first appearance (row-major).
    pub fn from_raw(height: usize, width: usize, raw: &[u32]) -> Result<Self> {
        let (labels, _) = reindex(raw);
        Self::new(height, width, labels)
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        Self { height, width, labels: vec![0; height * width].into(), n: 1 }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub(crate) fn labels_arc(&self) -> Arc<[u32]> {
        self.labels.clone()
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Pixel count per region.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n];
        for &l in self.labels.iter() {
            h[l as usize] += 1;
        }
        h
    }

    /// Swap label ids by `perm[old] = new`.
    pub fn permuted(&self, perm: &[u32]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(dim_err!("permutation of length {} for {} regions", perm.len(), self.n));
        }
        let labels = self.labels.iter().map(|&l| perm[l as usize]).collect();
        Self::new(self.height, self.width, labels)
    }

    /// Reflect-pad to `(height, width)` (extends to the bottom and right), then re-index.
    pub fn reflect_pad(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(dim_err!("cannot pad {}x{} down to {height}x{width}", self.height, self.width));
        }
        let raw: Vec<u32> = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .map(|(r, c)| self.label(reflect(r, self.height), reflect(c, self.width)))
            .collect();
        Self::from_raw(height, width, &raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }

    /// Parse a P5 PGM label raster; label values need not be contiguous.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let img = GrayImage::decode(bytes)?;
        let raw: Vec<u32> = img.samples.iter().map(|&v| v as u32).collect();
        Self::from_raw(img.height, img.width, &raw)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let maxval = (self.n - 1).max(1) as u16;
        GrayImage {
            width: self.width,
            height: self.height,
            maxval,
            samples: self.labels.iter().map(|&l| l as u16).collect(),
        }
        .encode()
    }
}

/// Mirror index for reflect padding (edge pixel not repeated).
pub(crate) fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Returns contiguous labels and `survivors[new] = old`.
fn reindex(raw: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut map = std::collections::HashMap::new();
    let mut survivors = Vec::new();
    let labels = raw
        .iter()
        .map(|&v| {
            *map.entry(v).or_insert_with(|| {
                survivors.push(v);
                (survivors.len() - 1) as u32
            })
        })
        .collect();
    (labels, survivors)
}

/// Deterministic `n_side x n_side` tiling; cell `(r, c)` has label `r * n_side + c`.
pub fn grid_partition(height: usize, width: usize, n_side: usize) -> Result<RegionMap> {
    if n_side == 0 || height < n_side || width < n_side {
        return Err(dim_err!("grid of {n_side}x{n_side} does not fit {height}x{width}"));
    }
    let row_cell = |r: usize| (0..n_side).rev().find(|&i| i * height / n_side <= r).unwrap();
    let col_cell = |c: usize| (0..n_side).rev().find(|&i| i * width / n_side <= c).unwrap();
    let cols: Vec<usize> = (0..width).map(col_cell).collect();
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        let rc = row_cell(r);
        labels.extend(cols.iter().map(|&cc| (rc * n_side + cc) as u32));
    }
    RegionMap::new(height, width, labels)
}

/// Majority-vote downsampling by `factor`, ties to the smallest label.
/// Regions that vanish are dropped; the second value maps new ids to old ids.
pub fn downsample_region_map(rm: &RegionMap, factor: usize) -> Result<(RegionMap, Vec<u32>)> {
    if factor == 0 {
        return Err(dim_err!("downsample factor must be positive"));
    }
    let oh = rm.height.div_ceil(factor);
    let ow = rm.width.div_ceil(factor);
    let mut votes = vec![0usize; rm.n];
    let mut raw = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            votes.iter_mut().for_each(|v| *v = 0);
            for r in i * factor..((i + 1) * factor).min(rm.height) {
                for c in j * factor..((j + 1) * factor).min(rm.width) {
                    votes[rm.label(r, c) as usize] += 1;
                }
            }
            // max_by_key keeps the last maximum, so scan in reverse for the smallest label
            let best = (0..rm.n).rev().max_by_key(|&l| votes[l]).unwrap();
            raw.push(best as u32);
        }
    }
    // keep surviving regions in ascending old-label order
    let mut present = vec![false; rm.n];
    for &l in &raw {
        present[l as usize] = true;
    }
    let survivors: Vec<u32> = (0..rm.n as u32).filter(|&l| present[l as usize]).collect();
    let mut remap = vec![0u32; rm.n];
    for (new, &old) in survivors.iter().enumerate() {
        remap[old as usize] = new as u32;
    }
    let labels = raw.iter().map(|&l| remap[l as usize]).collect();
    Ok((RegionMap::new(oh, ow, labels)?, survivors))
}

/// Per-region feature vectors pooled from a `[C, H, W]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T: Real = f32> {
    /// `[n, C]`
    pub vectors: Tensor<T>,
    /// Spatial size of the features the vectors were pooled from.
    pub source: (usize, usize),
}

impl<T: Real> PrototypeSet<T> {
    pub fn count(&self) -> usize {
        self.vectors.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1)
    }
}

/// Mean of each channel over each region's pixels.
pub fn masked_average_pool<T: Real>(features: &Tensor<T>, rm: &RegionMap) -> Result<PrototypeSet<T>> {
    let s = features.shape();
    if s.len() != 3 || s[1] != rm.height || s[2] != rm.width {
        return Err(dim_err!("features {:?} vs region map {}x{}", s, rm.height, rm.width));
    }
    let mut g = Graph::inference();
    let x = g.constant(features.clone());
    let p = g.masked_avg_pool(x, rm.labels_arc(), rm.n)?;
    Ok(PrototypeSet { vectors: g.value(p).clone(), source: (rm.height, rm.width) })
}

/// Fill each pixel with its region's prototype, giving `[C, H, W]`.
pub fn expand_prototypes<T: Real>(ps: &PrototypeSet<T>, rm: &RegionMap) -> Result<Tensor<T>> {
    if ps.count() != rm.n {
        return Err(dim_err!("{} prototypes for {} regions", ps.count(), rm.n));
    }
    let mut g = Graph::inference();
    let p = g.constant(ps.vectors.clone());
    let e = g.expand(p, rm.labels_arc(), rm.height, rm.width)?;
    Ok(g.value(e).clone())
}

/// Graph form of masked average pooling: `[C, H, W] -> [n, C]`.
pub fn map_var<T: Real>(g: &mut Graph<T>, features: Var, rm: &RegionMap) -> Result<Var> {
    let s = g.shape(features);
    if s.len() != 3 || s[1] != rm.height || s[2] != rm.width {
        return Err(dim_err!("features {:?} vs region map {}x{}", s, rm.height, rm.width));
    }
    g.masked_avg_pool(features, rm.labels_arc(), rm.n)
}

/// Graph form of prototype expansion: `[n, C] -> [C, H, W]`.
pub fn expand_var<T: Real>(g: &mut Graph<T>, protos: Var, rm: &RegionMap) -> Result<Var> {
    if g.shape(protos).first() != Some(&rm.n) {
        return Err(dim_err!("{:?} prototypes for {} regions", g.shape(protos), rm.n));
    }
    g.expand(protos, rm.labels_arc(), rm.height, rm.width)
}
