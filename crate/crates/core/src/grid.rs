//! Dense voxel volumes and axis-aligned boxes.
//!
//! Every dense volume is laid out channel-major, then x, then y, with z
//! varying fastest. Box coordinates are continuous voxel coordinates; the
//! only place they are quantized is [`Box3::enclosing_region`], which uses
//! `floor(min)` / `ceil(max)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel edge length used throughout, in meters.
pub const VOXEL_SIZE_M: f32 = 0.0469;

/// Default TSDF truncation, in voxels.
pub const DEFAULT_TRUNCATION: f32 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub voxel_size: f32,
    pub origin: [f32; 3],
}

impl GridMeta {
    pub fn new(dims: [usize; 3], voxel_size: f32, origin: [f32; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("grid dims must be positive, got {dims:?}")));
        }
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::Invalid(format!("voxel size must be positive, got {voxel_size}")));
        }
        Ok(Self { dims, voxel_size, origin })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index of a voxel within one channel.
    #[inline]
    pub fn index(&self, v: [usize; 3]) -> usize {
        (v[0] * self.dims[1] + v[1]) * self.dims[2] + v[2]
    }

    #[inline]
    pub fn unindex(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let x = i / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        let s = self.voxel_size as f64;
        std::array::from_fn(|a| (p[a] - self.origin[a] as f64) / s)
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let s = self.voxel_size as f64;
        std::array::from_fn(|a| v[a] * s + self.origin[a] as f64)
    }

    /// World position of the center of integer voxel `v`.
    pub fn voxel_center_world(&self, v: [usize; 3]) -> [f64; 3] {
        self.voxel_to_world([v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5])
    }

    /// True when a continuous voxel coordinate falls inside the grid.
    pub fn in_bounds(&self, c: [f64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0.0 && c[a] < self.dims[a] as f64)
    }

    /// Integer voxel containing a continuous coordinate, if inside the grid.
    pub fn voxel_at(&self, c: [f64; 3]) -> Option<[usize; 3]> {
        if !self.in_bounds(c) {
            return None;
        }
        Some(std::array::from_fn(|a| (c[a].floor() as usize).min(self.dims[a] - 1)))
    }

    /// Metadata of the sub-grid starting at integer voxel `offset`.
    pub fn sub_grid(&self, offset: [usize; 3], dims: [usize; 3]) -> GridMeta {
        let s = self.voxel_size;
        GridMeta {
            dims,
            voxel_size: s,
            origin: std::array::from_fn(|a| {
                (self.origin[a] as f64 + offset[a] as f64 * s as f64) as f32
            }),
        }
    }

    pub fn full_box(&self) -> Box3 {
        Box3::from_min_max([0.0; 3], self.dims.map(|d| d as f64))
    }

    pub fn full_region(&self) -> IntRegion {
        IntRegion {
            lo: [0; 3],
            hi: self.dims.map(|d| d as i64),
        }
    }
}

/// Truncated signed distance volume, values in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfGrid {
    pub meta: GridMeta,
    pub truncation: f32,
    pub values: Vec<f32>,
    pub weights: Vec<f32>,
}

impl TsdfGrid {
    /// A grid with every voxel unobserved (`+τ`, weight 0).
    pub fn unobserved(meta: GridMeta, truncation: f32) -> Self {
        let n = meta.num_voxels();
        Self {
            meta,
            truncation,
            values: vec![truncation; n],
            weights: vec![0.0; n],
        }
    }

    pub fn from_parts(meta: GridMeta, truncation: f32, values: Vec<f32>, weights: Vec<f32>) -> Result<Self> {
        let n = meta.num_voxels();
        if values.len() != n || weights.len() != n {
            return Err(Error::shape(format!(
                "tsdf payload {}/{} for {n} voxels",
                values.len(),
                weights.len()
            )));
        }
        Ok(Self { meta, truncation, values, weights })
    }

    pub fn value(&self, v: [usize; 3]) -> f32 {
        self.values[self.meta.index(v)]
    }

    pub fn weight(&self, v: [usize; 3]) -> f32 {
        self.weights[self.meta.index(v)]
    }

    /// Observed and within the truncation band.
    pub fn is_near_surface(&self, v: [usize; 3]) -> bool {
        let i = self.meta.index(v);
        self.weights[i] > 0.0 && self.values[i].abs() < self.truncation
    }

    /// Copies an integer region (must lie inside the grid).
    pub fn crop_region(&self, region: IntRegion) -> Result<TsdfGrid> {
        let region = region.clamp_to(self.meta.dims).ok_or(Error::EmptyCrop)?;
        let dims = region.dims();
        let meta = self.meta.sub_grid(region.lo_usize(), dims);
        let mut values = Vec::with_capacity(meta.num_voxels());
        let mut weights = Vec::with_capacity(meta.num_voxels());
        for v in region.iter() {
            let i = self.meta.index(v);
            values.push(self.values[i]);
            weights.push(self.weights[i]);
        }
        Ok(TsdfGrid { meta, truncation: self.truncation, values, weights })
    }

    /// Network input: values scaled by `1/τ` into `[-1, 1]`.
    pub fn normalized(&self) -> Vec<f32> {
        let inv = 1.0 / self.truncation;
        self.values.iter().map(|v| v * inv).collect()
    }
}

/// C-channel dense voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub meta: GridMeta,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureVolume {
    pub fn zeros(meta: GridMeta, channels: usize) -> Self {
        Self {
            meta,
            channels,
            data: vec![0.0; channels * meta.num_voxels()],
        }
    }

    pub fn from_data(meta: GridMeta, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || data.len() != channels * meta.num_voxels() {
            return Err(Error::shape(format!(
                "feature payload of {} values for {channels} channels x {:?}",
                data.len(),
                meta.dims
            )));
        }
        Ok(Self { meta, channels, data })
    }

    #[inline]
    pub fn index(&self, c: usize, v: [usize; 3]) -> usize {
        c * self.meta.num_voxels() + self.meta.index(v)
    }

    pub fn get(&self, c: usize, v: [usize; 3]) -> f32 {
        self.data[self.index(c, v)]
    }

    pub fn set(&mut self, c: usize, v: [usize; 3], x: f32) {
        let i = self.index(c, v);
        self.data[i] = x;
    }

    pub fn crop_region(&self, region: IntRegion) -> Result<FeatureVolume> {
        let region = region.clamp_to(self.meta.dims).ok_or(Error::EmptyCrop)?;
        let meta = self.meta.sub_grid(region.lo_usize(), region.dims());
        let mut data = Vec::with_capacity(self.channels * meta.num_voxels());
        for c in 0..self.channels {
            for v in region.iter() {
                data.push(self.get(c, v));
            }
        }
        Ok(FeatureVolume { meta, channels: self.channels, data })
    }
}

/// Sub-volume covered by the integer region enclosing `bbox`, clamped to the grid.
pub fn crop_volume(vol: &FeatureVolume, bbox: &Box3) -> Result<FeatureVolume> {
    vol.crop_region(bbox.enclosing_region())
}

/// Axis-aligned box in continuous voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Self {
        Self { center, size }
    }

    pub fn from_min_max(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            center: std::array::from_fn(|a| 0.5 * (min[a] + max[a])),
            size: std::array::from_fn(|a| max[a] - min[a]),
        }
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] - 0.5 * self.size[a])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.center[a] + 0.5 * self.size[a])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|&s| s > 0.0 && s.is_finite()) && self.center.iter().all(|c| c.is_finite())
    }

    pub fn intersection_volume(&self, other: &Box3) -> f64 {
        let (amin, amax, bmin, bmax) = (self.min(), self.max(), other.min(), other.max());
        (0..3)
            .map(|a| (amax[a].min(bmax[a]) - amin[a].max(bmin[a])).max(0.0))
            .product()
    }

    /// Integer region `[floor(min), ceil(max))`, unclamped.
    pub fn enclosing_region(&self) -> IntRegion {
        let (min, max) = (self.min(), self.max());
        IntRegion {
            lo: min.map(|m| m.floor() as i64),
            hi: max.map(|m| m.ceil() as i64),
        }
    }

    pub fn scaled(&self, factor: f64) -> Box3 {
        Box3 {
            center: self.center.map(|c| c * factor),
            size: self.size.map(|s| s * factor),
        }
    }

    pub fn translated(&self, offset: [f64; 3]) -> Box3 {
        Box3 {
            center: std::array::from_fn(|a| self.center[a] + offset[a]),
            size: self.size,
        }
    }

    /// Intersection with `[0, dims)`; `None` when nothing remains.
    pub fn clipped_to(&self, dims: [usize; 3]) -> Option<Box3> {
        let (min, max) = (self.min(), self.max());
        let lo: [f64; 3] = std::array::from_fn(|a| min[a].max(0.0));
        let hi: [f64; 3] = std::array::from_fn(|a| max[a].min(dims[a] as f64));
        if (0..3).any(|a| hi[a] <= lo[a]) {
            return None;
        }
        Some(Box3::from_min_max(lo, hi))
    }

    /// Whether the center of integer voxel `v` lies inside the box.
    pub fn contains_voxel_center(&self, v: [usize; 3]) -> bool {
        let (min, max) = (self.min(), self.max());
        (0..3).all(|a| {
            let c = v[a] as f64 + 0.5;
            c >= min[a] && c < max[a]
        })
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn box_iou(a: &Box3, b: &Box3) -> f64 {
    let inter = a.intersection_volume(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeClass {
    Small,
    Large,
}

/// Small iff the box volume in cubic meters is strictly below `threshold_m3`.
pub fn box_volume_class_with(b: &Box3, voxel_size: f64, threshold_m3: f64) -> VolumeClass {
    let m3 = b.volume() * voxel_size.powi(3);
    if m3 < threshold_m3 {
        VolumeClass::Small
    } else {
        VolumeClass::Large
    }
}

/// Small/large split at one cubic meter.
pub fn box_volume_class(b: &Box3, voxel_size: f64) -> VolumeClass {
    box_volume_class_with(b, voxel_size, 1.0)
}

/// Half-open integer voxel region `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntRegion {
    pub lo: [i64; 3],
    pub hi: [i64; 3],
}

impl IntRegion {
    pub fn new(lo: [i64; 3], hi: [i64; 3]) -> Self {
        Self { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|a| self.hi[a] <= self.lo[a])
    }

    pub fn dims(&self) -> [usize; 3] {
        std::array::from_fn(|a| (self.hi[a] - self.lo[a]).max(0) as usize)
    }

    pub fn num_voxels(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn lo_usize(&self) -> [usize; 3] {
        self.lo.map(|l| l.max(0) as usize)
    }

    pub fn clamp_to(&self, dims: [usize; 3]) -> Option<IntRegion> {
        let r = IntRegion {
            lo: std::array::from_fn(|a| self.lo[a].clamp(0, dims[a] as i64)),
            hi: std::array::from_fn(|a| self.hi[a].clamp(0, dims[a] as i64)),
        };
        (!r.is_empty()).then_some(r)
    }

    pub fn intersect(&self, other: &IntRegion) -> Option<IntRegion> {
        let r = IntRegion {
            lo: std::array::from_fn(|a| self.lo[a].max(other.lo[a])),
            hi: std::array::from_fn(|a| self.hi[a].min(other.hi[a])),
        };
        (!r.is_empty()).then_some(r)
    }

    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| (v[a] as i64) >= self.lo[a] && (v[a] as i64) < self.hi[a])
    }

    pub fn as_box(&self) -> Box3 {
        Box3::from_min_max(self.lo.map(|l| l as f64), self.hi.map(|h| h as f64))
    }

    /// Voxels in layout order (z fastest). Assumes a non-negative region.
    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let lo = self.lo_usize();
        let d = self.dims();
        (0..d[0]).flat_map(move |x| {
            (0..d[1]).flat_map(move |y| (0..d[2]).map(move |z| [lo[0] + x, lo[1] + y, lo[2] + z]))
        })
    }
}

/// Tight box around a voxel set: each voxel `v` spans `[v, v+1)`.
pub fn hull_of_voxels(voxels: &[[usize; 3]]) -> Option<Box3> {
    let first = voxels.first()?;
    let mut lo = *first;
    let mut hi = *first;
    for v in voxels {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    Some(Box3::from_min_max(lo.map(|l| l as f64), hi.map(|h| h as f64 + 1.0)))
}

/// Ground-truth object instance in voxel space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub class_id: usize,
    /// Sorted, de-duplicated voxel indices.
    pub mask: Vec<[usize; 3]>,
}

impl InstanceAnnotation {
    pub fn new(bbox: Box3, class_id: usize, mut mask: Vec<[usize; 3]>) -> Result<Self> {
        mask.sort_unstable();
        mask.dedup();
        if mask.is_empty() {
            return Err(Error::Invalid("instance mask is empty".into()));
        }
        let region = bbox.enclosing_region();
        if let Some(v) = mask.iter().find(|v| !region.contains(**v)) {
            return Err(Error::Invalid(format!("mask voxel {v:?} outside box {bbox:?}")));
        }
        Ok(Self { bbox, class_id, mask })
    }

    /// Annotation whose box is the tight hull of `mask`.
    pub fn from_mask(class_id: usize, mask: Vec<[usize; 3]>) -> Result<Self> {
        let bbox = hull_of_voxels(&mask).ok_or_else(|| Error::Invalid("instance mask is empty".into()))?;
        Self::new(bbox, class_id, mask)
    }
}

/// Intersection over union of two sorted voxel sets.
pub fn mask_iou(a: &[[usize; 3]], b: &[[usize; 3]]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}
