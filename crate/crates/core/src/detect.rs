//! Anchors, the region proposal network, NMS, RoI pooling and the box
//! classification head.
//!
//! Box deltas follow `Δμ = (μ − μₐ)/φₐ`, `Δφ = ln(φ/φₐ)` per axis. RPN output
//! channels are anchor-major: objectness channel `2a` is the negative score of
//! anchor `a` and `2a + 1` the positive one; delta channel `6a + k` is
//! component `k` of `(Δx, Δy, Δz, Δw, Δh, Δl)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{box_iou, box_volume_class_with, Box3, FeatureVolume, IntRegion, VolumeClass};
use crate::nn::{Bound, ConvGeom, Init, ParamStore, Real, Tape, Var, NO_SOURCE};

pub type BoxDeltas = [f64; 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub iou_pos: f64,
    pub iou_neg: f64,
    pub nms_train: f64,
    pub nms_test: f64,
    pub roi_dims: [usize; 3],
    pub mask_iou_gate: f64,
    pub num_classes: usize,
    /// Anchors below this volume (m³) go to the small level.
    pub small_anchor_max_m3: f64,
    /// Proposals kept by score before NMS.
    pub pre_nms_top_k: usize,
    /// Proposals kept after NMS.
    pub post_nms_train: usize,
    pub post_nms_test: usize,
    /// Also mark each ground-truth box's best-overlapping anchor positive.
    pub force_best_anchor: bool,
    /// Apply the per-class box refinement after classification.
    pub apply_refinement: bool,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            iou_pos: 0.35,
            iou_neg: 0.15,
            nms_train: 0.7,
            nms_test: 0.3,
            roi_dims: [4, 4, 4],
            mask_iou_gate: 0.5,
            num_classes: 3,
            // 1 m³ scaled by (32/96)³ for desk-sized chunks.
            small_anchor_max_m3: 1.0 / 27.0,
            pre_nms_top_k: 256,
            post_nms_train: 16,
            post_nms_test: 32,
            force_best_anchor: true,
            apply_refinement: true,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.iou_neg && self.iou_neg < self.iou_pos && self.iou_pos <= 1.0) {
            return Err(Error::Invalid(format!("need 0 ≤ iou_neg < iou_pos ≤ 1, got {} / {}", self.iou_neg, self.iou_pos)));
        }
        if self.num_classes == 0 {
            return Err(Error::Invalid("num_classes must be positive".into()));
        }
        if self.roi_dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid("roi_dims must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor sizes (voxels) for the small and large feature levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub small: Vec<[f64; 3]>,
    pub large: Vec<[f64; 3]>,
    /// Voxels between neighboring anchor centers.
    pub stride: usize,
}

impl AnchorSet {
    pub fn counts(&self) -> [usize; 2] {
        [self.small.len(), self.large.len()]
    }

    pub fn level(&self, l: usize) -> &[[f64; 3]] {
        if l == 0 {
            &self.small
        } else {
            &self.large
        }
    }

    pub fn validate(&self, voxel_size: f64, threshold_m3: f64) -> Result<()> {
        if self.stride == 0 || self.small.is_empty() || self.large.is_empty() {
            return Err(Error::Invalid("anchor set needs a stride and anchors on both levels".into()));
        }
        for (l, want) in [(0, VolumeClass::Small), (1, VolumeClass::Large)] {
            for s in self.level(l) {
                let b = Box3::new([0.0; 3], *s);
                if !b.is_valid() || box_volume_class_with(&b, voxel_size, threshold_m3) != want {
                    return Err(Error::Invalid(format!("anchor {s:?} is on the wrong level")));
                }
            }
        }
        Ok(())
    }
}

/// k-means over box sizes with k-means++ seeding, then split by volume.
pub fn kmeans_anchors(sizes: &[[f64; 3]], k: usize, seed: u64, voxel_size: f64, threshold_m3: f64, stride: usize) -> Result<AnchorSet> {
    let centroids = kmeans(sizes, k, seed, 100)?;
    let mut small = Vec::new();
    let mut large = Vec::new();
    for c in centroids {
        match box_volume_class_with(&Box3::new([0.0; 3], c), voxel_size, threshold_m3) {
            VolumeClass::Small => small.push(c),
            VolumeClass::Large => large.push(c),
        }
    }
    let vol = |s: &[f64; 3]| s[0] * s[1] * s[2];
    small.sort_by(|a, b| vol(a).total_cmp(&vol(b)));
    large.sort_by(|a, b| vol(a).total_cmp(&vol(b)));
    Ok(AnchorSet { small, large, stride })
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Lloyd iterations until the assignment stops changing or `max_iter`.
pub fn kmeans(points: &[[f64; 3]], k: usize, seed: u64, max_iter: usize) -> Result<Vec<[f64; 3]>> {
    let mut distinct = points.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if k == 0 || distinct.len() < k {
        return Err(Error::InsufficientData(format!("{} distinct sizes for k = {k}", distinct.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let mut r = rng.gen_range(0.0..total);
        let mut pick = d.iter().rposition(|&x| x > 0.0).unwrap_or(0);
        for (i, &x) in d.iter().enumerate() {
            if x > 0.0 && r < x {
                pick = i;
                break;
            }
            r -= x;
        }
        centroids.push(points[pick]);
    }
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(p, &centroids[a]).total_cmp(&dist2(p, &centroids[b])))
                .unwrap_or(0);
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64; 3]> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *centroid = std::array::from_fn(|a| members.iter().map(|m| m[a]).sum::<f64>() / n);
            }
        }
    }
    Ok(centroids)
}

pub fn encode_box(gt: &Box3, anchor: &Box3) -> BoxDeltas {
    let mut d = [0.0; 6];
    for a in 0..3 {
        d[a] = (gt.center[a] - anchor.center[a]) / anchor.size[a];
        d[3 + a] = (gt.size[a] / anchor.size[a]).ln();
    }
    d
}

pub fn decode_box(d: &BoxDeltas, anchor: &Box3) -> Box3 {
    Box3 {
        center: std::array::from_fn(|a| anchor.center[a] + d[a] * anchor.size[a]),
        size: std::array::from_fn(|a| anchor.size[a] * d[3 + a].exp()),
    }
}

/// Anchor boxes for one level, ordered anchor-major then by feature cell
/// (z fastest), matching the RPN channel layout. Centers sit at feature-cell
/// centers in voxel coordinates.
pub fn place_anchors(sizes: &[[f64; 3]], feature_dims: [usize; 3], stride: usize) -> Vec<Box3> {
    let s = stride as f64;
    let [fx, fy, fz] = feature_dims;
    let mut out = Vec::with_capacity(sizes.len() * fx * fy * fz);
    for size in sizes {
        for x in 0..fx {
            for y in 0..fy {
                for z in 0..fz {
                    let c = [(x as f64 + 0.5) * s, (y as f64 + 0.5) * s, (z as f64 + 0.5) * s];
                    out.push(Box3::new(c, *size));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// Labels each anchor by its best-overlapping ground-truth box.
pub fn assign_anchors(anchors: &[Box3], gts: &[Box3], cfg: &DetectConfig) -> Vec<AnchorLabel> {
    anchors
        .iter()
        .map(|a| {
            let mut best = (0.0, usize::MAX);
            for (g, gt) in gts.iter().enumerate() {
                let iou = box_iou(a, gt);
                if iou > best.0 {
                    best = (iou, g);
                }
            }
            if best.1 != usize::MAX && best.0 > cfg.iou_pos {
                AnchorLabel::Positive(best.1)
            } else if best.0 < cfg.iou_neg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

/// Marks, for every ground-truth box, its highest-IoU anchor positive (first on ties).
pub fn force_best_anchors(labels: &mut [AnchorLabel], anchors: &[Box3], gts: &[Box3]) {
    for (g, gt) in gts.iter().enumerate() {
        let mut best = (0.0, usize::MAX);
        for (i, a) in anchors.iter().enumerate() {
            let iou = box_iou(a, gt);
            if iou > best.0 {
                best = (iou, i);
            }
        }
        if best.1 != usize::MAX && !matches!(labels[best.1], AnchorLabel::Positive(_)) {
            labels[best.1] = AnchorLabel::Positive(g);
        }
    }
}

/// Greedy non-maximum suppression; returns kept indices in selection order.
pub fn nms(boxes: &[Box3], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut removed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !removed[j] && box_iou(&boxes[i], &boxes[j]) > threshold {
                removed[j] = true;
            }
        }
    }
    keep
}

/// Start of bin `b` of `bins` over `n` cells; with fewer cells than bins the
/// bins replicate the nearest cell.
#[inline]
fn bin_range(b: usize, bins: usize, n: usize) -> (usize, usize) {
    let lo = b * n / bins;
    if n >= bins {
        (lo, (b + 1) * n / bins)
    } else {
        (lo, lo + 1)
    }
}

/// Flat argmax source of every output element of a RoI pool over `region`
/// of a `[C, X, Y, Z]` volume.
pub fn roi_pool_sources(values: &[impl PartialOrd + Copy], channels: usize, dims: [usize; 3], region: IntRegion, bins: [usize; 3]) -> Result<Vec<u32>> {
    let region = region.clamp_to(dims).ok_or(Error::EmptyCrop)?;
    let n = region.dims();
    let lo = region.lo_usize();
    let vox = dims[0] * dims[1] * dims[2];
    let mut src = vec![NO_SOURCE; channels * bins[0] * bins[1] * bins[2]];
    let mut o = 0;
    for c in 0..channels {
        for bx in 0..bins[0] {
            let (x0, x1) = bin_range(bx, bins[0], n[0]);
            for by in 0..bins[1] {
                let (y0, y1) = bin_range(by, bins[1], n[1]);
                for bz in 0..bins[2] {
                    let (z0, z1) = bin_range(bz, bins[2], n[2]);
                    let mut best: Option<usize> = None;
                    for x in x0..x1 {
                        for y in y0..y1 {
                            let row = c * vox + ((lo[0] + x) * dims[1] + lo[1] + y) * dims[2] + lo[2];
                            for z in z0..z1 {
                                let i = row + z;
                                if best.is_none_or(|b| values[i] > values[b]) {
                                    best = Some(i);
                                }
                            }
                        }
                    }
                    src[o] = best.map_or(NO_SOURCE, |b| b as u32);
                    o += 1;
                }
            }
        }
    }
    Ok(src)
}

/// RoI max pool of `box` (volume voxel coordinates) into `C × 4 × 4 × 4`.
pub fn roi_pool(volume: &FeatureVolume, bbox: &Box3, bins: [usize; 3]) -> Result<Vec<f32>> {
    let src = roi_pool_sources(&volume.data, volume.channels, volume.meta.dims, bbox.enclosing_region(), bins)?;
    Ok(src.iter().map(|&s| volume.data[s as usize]).collect())
}

/// Tape version over a `[C, X, Y, Z]` node; the gradient goes to each bin's argmax.
pub fn roi_pool_var<T: Real>(tape: &mut Tape<T>, x: Var, region: IntRegion, bins: [usize; 3]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let [c, dx, dy, dz] = s[..] else {
        return Err(Error::shape(format!("roi_pool input {s:?}")));
    };
    let src = roi_pool_sources(&tape.value(x).data, c, [dx, dy, dz], region, bins)?;
    tape.select(x, src, &[c, bins[0], bins[1], bins[2]])
}

/// Region of a feature map at `stride` covering a box given in voxels.
pub fn feature_region(bbox: &Box3, stride: usize) -> IntRegion {
    bbox.scaled(1.0 / stride as f64).enclosing_region()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpnDims {
    pub in_channels: usize,
    pub hidden: usize,
}

pub fn init_rpn<R: Rng>(params: &mut ParamStore<f32>, dims: RpnDims, anchors: [usize; 2], rng: &mut R) {
    for (l, &n) in anchors.iter().enumerate() {
        params.init(&format!("rpn{l}.conv.w"), &[dims.hidden, dims.in_channels, 3, 3, 3], Init::HeUniform { gain: 1.0 }, rng);
        params.init(&format!("rpn{l}.conv.b"), &[dims.hidden], Init::Zeros, rng);
        params.init(&format!("rpn{l}.cls.w"), &[2 * n, dims.hidden, 1, 1, 1], Init::HeUniform { gain: 0.1 }, rng);
        params.init(&format!("rpn{l}.cls.b"), &[2 * n], Init::Zeros, rng);
        params.init(&format!("rpn{l}.bbox.w"), &[6 * n, dims.hidden, 1, 1, 1], Init::HeUniform { gain: 0.1 }, rng);
        params.init(&format!("rpn{l}.bbox.b"), &[6 * n], Init::Zeros, rng);
    }
}

/// One RPN level: `(objectness [2N, …], deltas [6N, …])`.
#[derive(Debug, Clone, Copy)]
pub struct RpnLevel {
    pub objectness: Var,
    pub deltas: Var,
}

pub fn rpn_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, levels: [Var; 2], anchors: [usize; 2]) -> Result<[RpnLevel; 2]> {
    let mut out = Vec::with_capacity(2);
    for (l, &x) in levels.iter().enumerate() {
        if tape.shape(x).len() != 4 {
            return Err(Error::shape(format!("rpn level {l} input {:?}", tape.shape(x))));
        }
        let h = tape.conv(x, p.var(&format!("rpn{l}.conv.w")), Some(p.var(&format!("rpn{l}.conv.b"))), ConvGeom::cube(3, 1, 1))?;
        let h = tape.relu(h);
        let obj = tape.conv(h, p.var(&format!("rpn{l}.cls.w")), Some(p.var(&format!("rpn{l}.cls.b"))), ConvGeom::cube(1, 1, 0))?;
        let del = tape.conv(h, p.var(&format!("rpn{l}.bbox.w")), Some(p.var(&format!("rpn{l}.bbox.b"))), ConvGeom::cube(1, 1, 0))?;
        if tape.shape(obj)[0] != 2 * anchors[l] {
            return Err(Error::shape(format!("level {l} has {} objectness channels for {} anchors", tape.shape(obj)[0], anchors[l])));
        }
        out.push(RpnLevel { objectness: obj, deltas: del });
    }
    Ok([out[0], out[1]])
}

/// Positive-class probability of every anchor on one level (anchor-major order).
pub fn objectness_scores(obj: &[f32], num_anchors: usize, cells: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(num_anchors * cells);
    for a in 0..num_anchors {
        for c in 0..cells {
            let neg = obj[2 * a * cells + c] as f64;
            let pos = obj[(2 * a + 1) * cells + c] as f64;
            s.push(1.0 / (1.0 + (neg - pos).exp()));
        }
    }
    s
}

/// Predicted deltas of anchor `a` at feature cell `cell`.
pub fn anchor_deltas(deltas: &[f32], a: usize, cell: usize, cells: usize) -> BoxDeltas {
    std::array::from_fn(|k| deltas[(6 * a + k) * cells + cell] as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: Box3,
    pub score: f64,
    pub level: usize,
    /// Index into the level's anchor list.
    pub anchor: usize,
}

/// Largest |Δsize| accepted when decoding, so `exp` cannot overflow a box.
const MAX_LOG_SCALE: f64 = 4.0;

/// Decodes every anchor, clips to the grid, keeps the top-K by score, then
/// applies NMS and keeps at most `keep` boxes.
#[allow(clippy::too_many_arguments)]
pub fn propose(
    levels: &[(Vec<f32>, Vec<f32>); 2],
    anchor_boxes: &[Vec<Box3>; 2],
    anchor_counts: [usize; 2],
    grid_dims: [usize; 3],
    top_k: usize,
    nms_threshold: f64,
    keep: usize,
) -> Vec<Proposal> {
    let mut all = Vec::new();
    for l in 0..2 {
        let n = anchor_counts[l];
        if n == 0 {
            continue;
        }
        let cells = anchor_boxes[l].len() / n;
        let scores = objectness_scores(&levels[l].0, n, cells);
        for (i, anchor) in anchor_boxes[l].iter().enumerate() {
            let (a, cell) = (i / cells, i % cells);
            let mut d = anchor_deltas(&levels[l].1, a, cell, cells);
            for v in &mut d[3..] {
                *v = v.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
            }
            let Some(b) = decode_box(&d, anchor).clipped_to(grid_dims) else { continue };
            if b.size.iter().any(|&s| s < 1.0) || !b.is_valid() {
                continue;
            }
            all.push(Proposal {
                bbox: b,
                score: scores[i],
                level: l,
                anchor: i,
            });
        }
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(top_k);
    let boxes: Vec<Box3> = all.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = all.iter().map(|p| p.score).collect();
    nms(&boxes, &scores, nms_threshold).into_iter().take(keep).map(|i| all[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierDims {
    pub in_features: usize,
    pub hidden: [usize; 3],
    pub num_classes: usize,
}

pub fn init_classifier<R: Rng>(params: &mut ParamStore<f32>, dims: ClassifierDims, rng: &mut R) {
    let mut fan_in = dims.in_features;
    for (i, &h) in dims.hidden.iter().enumerate() {
        params.init(&format!("cls{i}.w"), &[h, fan_in], Init::HeUniform { gain: 1.0 }, rng);
        params.init(&format!("cls{i}.b"), &[h], Init::Zeros, rng);
        fan_in = h;
    }
    params.init("cls_cls.w", &[dims.num_classes, fan_in], Init::HeUniform { gain: 0.1 }, rng);
    params.init("cls_cls.b", &[dims.num_classes], Init::Zeros, rng);
    params.init("cls_bbox.w", &[6 * dims.num_classes, fan_in], Init::HeUniform { gain: 0.1 }, rng);
    params.init("cls_bbox.b", &[6 * dims.num_classes], Init::Zeros, rng);
}

/// MLP over flattened RoI blocks `[B, C·64]`: class logits `[B, N_cls]` and
/// per-class refinements `[B, 6·N_cls]`.
pub fn classify_head<T: Real>(tape: &mut Tape<T>, p: &Bound, rois: Var, dims: ClassifierDims) -> Result<(Var, Var)> {
    let s = tape.shape(rois).to_vec();
    if s.len() != 2 || s[1] != dims.in_features {
        return Err(Error::shape(format!("classifier input {s:?}, expected [B, {}]", dims.in_features)));
    }
    let mut h = rois;
    for i in 0..dims.hidden.len() {
        h = tape.linear(h, p.var(&format!("cls{i}.w")), Some(p.var(&format!("cls{i}.b"))))?;
        h = tape.relu(h);
    }
    let logits = tape.linear(h, p.var("cls_cls.w"), Some(p.var("cls_cls.b")))?;
    let refine = tape.linear(h, p.var("cls_bbox.w"), Some(p.var("cls_bbox.b")))?;
    Ok((logits, refine))
}

/// Stacks RoI blocks into one `[B, C·X·Y·Z]` node.
pub fn stack_rois<T: Real>(tape: &mut Tape<T>, blocks: &[Var]) -> Result<Var> {
    let flat: Vec<Var> = blocks
        .iter()
        .map(|&b| {
            let n = tape.value(b).len();
            tape.reshape(b, &[1, n])
        })
        .collect::<Result<_>>()?;
    tape.concat(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridMeta, VOXEL_SIZE_M};

    fn bx(min: [f64; 3], max: [f64; 3]) -> Box3 {
        Box3::from_min_max(min, max)
    }

    #[test]
    fn kmeans_single_centroid_is_mean() {
        let c = kmeans(&[[2.0; 3], [4.0; 3]], 1, 0, 100).unwrap();
        assert_eq!(c, vec![[3.0; 3]]);
    }

    #[test]
    fn kmeans_k_equals_n_recovers_points() {
        let pts = [[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [9.0, 1.0, 4.0], [2.0, 8.0, 8.0]];
        let mut c = kmeans(&pts, 4, 3, 100).unwrap();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = pts.to_vec();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(c, want);
        assert!(matches!(kmeans(&pts, 5, 0, 100), Err(Error::InsufficientData(_))));
        assert!(matches!(kmeans(&[[1.0; 3], [1.0; 3]], 2, 0, 100), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn delta_examples() {
        let a = Box3::new([8.0, 0.0, 0.0], [4.0, 4.0, 4.0]);
        let g = Box3::new([10.0, 0.0, 0.0], [8.0, 4.0, 4.0]);
        let d = encode_box(&g, &a);
        assert!((d[0] - 0.5).abs() < 1e-15);
        assert!((d[3] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(encode_box(&a, &a), [0.0; 6]);
        assert_eq!(decode_box(&[0.0; 6], &a), a);
        let mut dd = [0.0; 6];
        dd[3] = std::f64::consts::LN_2;
        assert!((decode_box(&dd, &a).size[0] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn anchor_labels() {
        let cfg = DetectConfig::default();
        let gt = bx([0.0; 3], [4.0; 3]);
        // a quarter slab of the gt box has IoU exactly 0.25
        let quarter = bx([0.0; 3], [1.0, 4.0, 4.0]);
        assert!((box_iou(&quarter, &gt) - 0.25).abs() < 1e-15);
        let labels = assign_anchors(&[gt, bx([10.0; 3], [12.0; 3]), quarter], &[gt], &cfg);
        assert_eq!(labels, vec![AnchorLabel::Positive(0), AnchorLabel::Negative, AnchorLabel::Ignore]);
    }

    #[test]
    fn force_best_marks_one_anchor() {
        let gt = bx([0.0; 3], [4.0; 3]);
        let anchors = [bx([0.0; 3], [1.0, 4.0, 4.0]), bx([10.0; 3], [12.0; 3])];
        let mut labels = assign_anchors(&anchors, &[gt], &DetectConfig::default());
        force_best_anchors(&mut labels, &anchors, &[gt]);
        assert_eq!(labels, vec![AnchorLabel::Positive(0), AnchorLabel::Negative]);
    }

    #[test]
    fn nms_examples() {
        let b = bx([0.0; 3], [2.0; 3]);
        assert_eq!(nms(&[b], &[0.3], 0.3), vec![0]);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.3), vec![1]);
        assert_eq!(nms(&[b, b], &[0.9, 0.9], 0.3), vec![0]);
    }

    #[test]
    fn roi_pool_examples() {
        let meta = GridMeta::new([4, 4, 4], VOXEL_SIZE_M, [0.0; 3]).unwrap();
        let vals: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let vol = FeatureVolume::from_data(meta, 1, vals.clone()).unwrap();
        assert_eq!(roi_pool(&vol, &bx([0.0; 3], [4.0; 3]), [4; 3]).unwrap(), vals);
        let c = FeatureVolume::from_data(meta, 1, vec![5.0; 64]).unwrap();
        assert!(roi_pool(&c, &bx([1.0; 3], [3.0; 3]), [4; 3]).unwrap().iter().all(|&v| v == 5.0));
        assert!(matches!(roi_pool(&c, &bx([5.0; 3], [7.0; 3]), [4; 3]), Err(Error::EmptyCrop)));
    }

    #[test]
    fn placement_order_matches_channels() {
        let a = place_anchors(&[[2.0; 3], [6.0; 3]], [2, 1, 3], 4);
        assert_eq!(a.len(), 12);
        assert_eq!(a[0].center, [2.0, 2.0, 2.0]);
        assert_eq!(a[1].center, [2.0, 2.0, 6.0]);
        assert_eq!(a[3].center, [6.0, 2.0, 2.0]);
        assert_eq!(a[6].size, [6.0; 3]);
    }

    #[test]
    fn objectness_pairs() {
        // one anchor, two cells: (neg, pos) logits (0, 0) and (0, 10)
        let s = objectness_scores(&[0.0, 0.0, 0.0, 10.0], 1, 2);
        assert!((s[0] - 0.5).abs() < 1e-12);
        assert!(s[1] > 0.9999);
    }
}
