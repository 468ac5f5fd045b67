//! Per-voxel instance masks at full grid resolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{box_iou, Box3, InstanceAnnotation, IntRegion};
use crate::nn::{Bound, ConvGeom, Init, ParamStore, Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MaskDims {
    pub color_channels: usize,
    pub width: usize,
    pub num_classes: usize,
    pub use_color: bool,
}

pub fn init_mask_head<R: Rng>(params: &mut ParamStore<f32>, d: MaskDims, rng: &mut R) {
    let he = Init::HeUniform { gain: 1.0 };
    let w = d.width;
    params.init("mask.geo0.w", &[w, 1, 3, 3, 3], he, rng);
    params.init("mask.geo0.b", &[w], Init::Zeros, rng);
    params.init("mask.geo1.w", &[w, w, 3, 3, 3], he, rng);
    params.init("mask.geo1.b", &[w], Init::Zeros, rng);
    if d.use_color {
        params.init("mask.color0.w", &[w, d.color_channels, 3, 3, 3], he, rng);
        params.init("mask.color0.b", &[w], Init::Zeros, rng);
        params.init("mask.color1.w", &[w, w, 3, 3, 3], he, rng);
        params.init("mask.color1.b", &[w], Init::Zeros, rng);
    }
    let joined = if d.use_color { 2 * w } else { w };
    params.init("mask.join0.w", &[w, joined, 3, 3, 3], he, rng);
    params.init("mask.join0.b", &[w], Init::Zeros, rng);
    params.init("mask.join1.w", &[w, w, 3, 3, 3], he, rng);
    params.init("mask.join1.b", &[w], Init::Zeros, rng);
    params.init("mask.pred.w", &[d.num_classes, w, 1, 1, 1], Init::HeUniform { gain: 0.5 }, rng);
    params.init("mask.pred.b", &[d.num_classes], Init::Zeros, rng);
}

fn conv_relu<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.conv(x, p.var(&format!("{name}.w")), Some(p.var(&format!("{name}.b"))), ConvGeom::cube(3, 1, 1))?;
    Ok(tape.relu(y))
}

/// Stride-1 backbone over `tsdf [1, X, Y, Z]` and optional `color [C₂, X, Y, Z]`;
/// output keeps the input's spatial extent.
pub fn mask_backbone<T: Real>(tape: &mut Tape<T>, p: &Bound, tsdf: Var, color: Option<Var>) -> Result<Var> {
    if let Some(c) = color {
        if tape.shape(c)[1..] != tape.shape(tsdf)[1..] {
            return Err(Error::MetaMismatch(format!(
                "geometry {:?} vs color {:?}",
                tape.shape(tsdf),
                tape.shape(c)
            )));
        }
    }
    let g = conv_relu(tape, p, "mask.geo0", tsdf)?;
    let g = conv_relu(tape, p, "mask.geo1", g)?;
    let joined = match color {
        Some(c) => {
            let c = conv_relu(tape, p, "mask.color0", c)?;
            let c = conv_relu(tape, p, "mask.color1", c)?;
            tape.concat(&[g, c])?
        }
        None => g,
    };
    let j = conv_relu(tape, p, "mask.join0", joined)?;
    conv_relu(tape, p, "mask.join1", j)
}

/// Per-class mask logits `[N_cls, X, Y, Z]`. The 1×1×1 prediction is
/// pointwise, so applying it before cropping equals cropping first.
pub fn mask_class_logits<T: Real>(tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<Var> {
    tape.conv(features, p.var("mask.pred.w"), Some(p.var("mask.pred.b")), ConvGeom::cube(1, 1, 0))
}

/// Flat voxel indices of `region` (clamped to `dims`) in layout order.
pub fn region_voxels(region: IntRegion, dims: [usize; 3]) -> Result<(IntRegion, Vec<usize>)> {
    let r = region.clamp_to(dims).ok_or(Error::EmptyCrop)?;
    let idx = r.iter().map(|v| (v[0] * dims[1] + v[1]) * dims[2] + v[2]).collect();
    Ok((r, idx))
}

/// Channel `class_id` of `logits` over `region`, as a flat node.
pub fn select_class_region<T: Real>(tape: &mut Tape<T>, logits: Var, class_id: usize, region: IntRegion) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let [n_cls, x, y, z] = s[..] else {
        return Err(Error::shape(format!("mask logits {s:?}")));
    };
    if class_id >= n_cls {
        return Err(Error::Invalid(format!("class {class_id} ≥ {n_cls}")));
    }
    let (_, idx) = region_voxels(region, [x, y, z])?;
    let base = class_id * x * y * z;
    let src: Vec<u32> = idx.iter().map(|&i| (base + i) as u32).collect();
    let n = src.len();
    tape.select(logits, src, &[n])
}

/// Mask probabilities for `class_id` over the box's voxel region.
pub fn mask_predict(params: &ParamStore<f32>, features: &crate::grid::FeatureVolume, bbox: &Box3, class_id: usize) -> Result<(IntRegion, Vec<f32>)> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape);
    let [x, y, z] = features.meta.dims;
    let f = tape.constant(crate::nn::Tensor::new(vec![features.channels, x, y, z], features.data.clone())?);
    let logits = mask_class_logits(&mut tape, &bound, f)?;
    let region = bbox.enclosing_region();
    let (r, _) = region_voxels(region, features.meta.dims)?;
    let sel = select_class_region(&mut tape, logits, class_id, r)?;
    let s = tape.sigmoid(sel);
    Ok((r, tape.value(s).data.clone()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTarget {
    pub proposal_index: usize,
    pub gt_index: usize,
    pub region: IntRegion,
    /// One entry per voxel of `region` in layout order.
    pub target: Vec<u8>,
}

/// Targets for proposals overlapping a ground-truth box with IoU ≥ `gate`:
/// the ground-truth mask inside the overlap of both integer regions.
pub fn build_mask_targets(proposals: &[Box3], gts: &[InstanceAnnotation], gate: f64) -> Vec<MaskTarget> {
    let mut out = Vec::new();
    for (pi, p) in proposals.iter().enumerate() {
        let mut best = (0.0, usize::MAX);
        for (g, gt) in gts.iter().enumerate() {
            let iou = box_iou(p, &gt.bbox);
            if iou > best.0 {
                best = (iou, g);
            }
        }
        if best.1 == usize::MAX || best.0 < gate {
            continue;
        }
        let gt = &gts[best.1];
        let Some(region) = p.enclosing_region().intersect(&gt.bbox.enclosing_region()) else { continue };
        let target = region
            .iter()
            .map(|v| u8::from(gt.mask.binary_search(&v).is_ok()))
            .collect();
        out.push(MaskTarget {
            proposal_index: pi,
            gt_index: best.1,
            region,
            target,
        });
    }
    out
}
