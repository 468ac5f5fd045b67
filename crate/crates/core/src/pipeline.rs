//! Chunking, view selection, staged training and whole-scene inference.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backproject::{backproject_var, backprojection_targets, encode_2d, view_pool_var, FEATURE_DOWNSCALE};
use crate::detect::{
    anchor_deltas, assign_anchors, classify_head, decode_box, encode_box, feature_region, force_best_anchors, kmeans, nms,
    objectness_scores, place_anchors, propose, roi_pool_var, rpn_forward, stack_rois, AnchorLabel, AnchorSet, DetectConfig,
    Proposal, RpnLevel,
};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, Detection, IouKind, MapReport};
use crate::grid::{box_iou, box_volume_class_with, Box3, GridMeta, InstanceAnnotation, IntRegion, TsdfGrid, VolumeClass};
use crate::mask::{build_mask_targets, mask_backbone, mask_class_logits, select_class_region};
use crate::model::{backbone_forward, Backbone, ModelConfig, ROI_BINS, STRIDE};
use crate::nn::{learning_rate_at, sgd_step, Bound, OptimState, ParamStore, Tape, Tensor, TrainConfig, Var};
use crate::synth::{fuse_tsdf, generate_scene, ground_truth, scan_scene, CameraView, SceneConfig, SceneSpec, TrajectoryConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    /// Steps spent in each of the three stages.
    pub steps: [usize; 3],
    /// Anchors sampled per step for the RPN loss.
    pub rpn_batch: usize,
    /// RoIs per step for the classifier.
    pub cls_batch: usize,
    /// RoIs per step for the mask head.
    pub mask_batch: usize,
    /// Proposals at least this close to a ground-truth box train the classifier.
    pub cls_iou: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: [2000, 1000, 1000],
            rpn_batch: 64,
            cls_batch: 16,
            mask_batch: 16,
            cls_iou: 0.35,
            grad_clip: 5.0,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene: SceneConfig,
    pub trajectory: TrajectoryConfig,
    /// Truncation in voxels.
    pub truncation: f32,
    pub chunk_dims: [usize; 3],
    pub chunk_stride: [usize; 3],
    pub views_per_chunk: usize,
    /// Add the three quarter-turn yaw rotations of every training chunk.
    pub augment_rotations: bool,
    pub model: ModelConfig,
    pub detect: DetectConfig,
    pub train: TrainConfig,
    pub schedule: Schedule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            trajectory: TrajectoryConfig {
                width: 128,
                height: 128,
                ..TrajectoryConfig::default()
            },
            truncation: 3.0,
            chunk_dims: [32, 32, 16],
            chunk_stride: [32, 32, 16],
            views_per_chunk: 3,
            augment_rotations: false,
            model: ModelConfig::default(),
            detect: DetectConfig::default(),
            train: TrainConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                lr_decay_every: 3000,
                lr_decay_factor: 0.3,
                ..TrainConfig::default()
            },
            schedule: Schedule::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.detect.validate()?;
        self.train.validate()?;
        if self.chunk_dims.iter().any(|d| d % STRIDE != 0 || *d == 0) {
            return Err(Error::Invalid(format!("chunk dims {:?} must be positive multiples of {STRIDE}", self.chunk_dims)));
        }
        if self.chunk_stride.iter().any(|&s| s == 0) {
            return Err(Error::Invalid("chunk stride must be positive".into()));
        }
        if self.model.num_classes != self.detect.num_classes || self.model.num_classes != self.scene.num_classes {
            return Err(Error::Invalid("scene, model and detect class counts differ".into()));
        }
        if self.detect.roi_dims != ROI_BINS {
            return Err(Error::Invalid(format!("roi_dims must be {ROI_BINS:?}")));
        }
        if self.views_per_chunk == 0 {
            return Err(Error::Invalid("views_per_chunk must be positive".into()));
        }
        if self.trajectory.width % FEATURE_DOWNSCALE != 0 || self.trajectory.height % FEATURE_DOWNSCALE != 0 {
            return Err(Error::Invalid(format!("image size must be a multiple of {FEATURE_DOWNSCALE}")));
        }
        Ok(())
    }
}

/// A training crop with its views and chunk-local annotations.
#[derive(Debug, Clone)]
pub struct Chunk {
    /// Voxel offset of the crop inside its scene.
    pub offset: [usize; 3],
    pub tsdf: TsdfGrid,
    pub views: Vec<CameraView>,
    pub annotations: Vec<InstanceAnnotation>,
}

fn axis_offsets(n: usize, c: usize, s: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * s).take_while(|&o| o + c <= n).collect();
    if out.last().is_some_and(|&o| o + c < n) {
        out.push(n - c);
    }
    out
}

/// Sliding-window crop origins, x-major; the last window on each axis is
/// pulled flush with the scene edge so the union covers the scene.
pub fn chunk_offsets(scene: [usize; 3], chunk: [usize; 3], stride: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    if (0..3).any(|a| scene[a] < chunk[a]) {
        return Err(Error::SceneTooSmall { scene, chunk });
    }
    if stride.iter().chain(&chunk).any(|&v| v == 0) {
        return Err(Error::Invalid("chunk dims and stride must be positive".into()));
    }
    let ax: [Vec<usize>; 3] = std::array::from_fn(|a| axis_offsets(scene[a], chunk[a], stride[a]));
    let mut out = Vec::new();
    for &x in &ax[0] {
        for &y in &ax[1] {
            for &z in &ax[2] {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Annotation restricted to a chunk, or `None` when less than half of its mask lies inside.
pub fn clip_annotation(a: &InstanceAnnotation, region: &IntRegion) -> Option<InstanceAnnotation> {
    let lo = region.lo_usize();
    let inside: Vec<[usize; 3]> = a
        .mask
        .iter()
        .filter(|v| region.contains(**v))
        .map(|v| std::array::from_fn(|k| v[k] - lo[k]))
        .collect();
    if inside.is_empty() || 2 * inside.len() < a.mask.len() {
        return None;
    }
    InstanceAnnotation::from_mask(a.class_id, inside).ok()
}

pub fn extract_chunks(tsdf: &TsdfGrid, annotations: &[InstanceAnnotation], chunk: [usize; 3], stride: [usize; 3]) -> Result<Vec<Chunk>> {
    chunk_offsets(tsdf.meta.dims, chunk, stride)?
        .into_iter()
        .map(|offset| {
            let region = IntRegion::new(offset.map(|o| o as i64), std::array::from_fn(|a| (offset[a] + chunk[a]) as i64));
            Ok(Chunk {
                offset,
                tsdf: tsdf.crop_region(region)?,
                views: Vec::new(),
                annotations: annotations.iter().filter_map(|a| clip_annotation(a, &region)).collect(),
            })
        })
        .collect()
}

/// Mean over instances of the fraction of mask voxels seen by `view`: the
/// voxel center projects into the image onto valid depth within one voxel.
pub fn view_coverage(meta: &GridMeta, annotations: &[InstanceAnnotation], view: &CameraView) -> f64 {
    if annotations.is_empty() {
        return 0.0;
    }
    let tol = meta.voxel_size as f64;
    let total: f64 = annotations
        .iter()
        .map(|a| {
            let seen = a
                .mask
                .iter()
                .filter(|&&v| match view.project_world(meta.voxel_center_world(v)) {
                    Some((u, px, z)) => {
                        let d = view.depth_at(u, px) as f64;
                        d > 0.0 && z > 0.0 && (d - z).abs() <= tol
                    }
                    None => false,
                })
                .count();
            seen as f64 / a.mask.len() as f64
        })
        .sum();
    total / annotations.len() as f64
}

/// Indices of the `n` best-covering views, ties broken by lower index.
pub fn select_views(meta: &GridMeta, annotations: &[InstanceAnnotation], candidates: &[CameraView], n: usize) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::NoViews);
    }
    let scores: Vec<f64> = candidates.iter().map(|v| view_coverage(meta, annotations, v)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

/// Rotates a chunk by `quarter_turns` × 90° about the vertical axis through
/// its center; grid, annotations and camera poses move together.
pub fn rotate_chunk(chunk: &Chunk, quarter_turns: usize) -> Result<Chunk> {
    let meta = chunk.tsdf.meta;
    let [nx, ny, nz] = meta.dims;
    if nx != ny {
        return Err(Error::shape(format!("yaw rotation needs a square footprint, got {:?}", meta.dims)));
    }
    let k = quarter_turns % 4;
    let turn = |v: [usize; 3]| {
        let mut v = v;
        for _ in 0..k {
            v = [nx - 1 - v[1], v[0], v[2]];
        }
        v
    };
    let mut values = vec![0.0; meta.num_voxels()];
    let mut weights = vec![0.0; meta.num_voxels()];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let (src, dst) = (meta.index([x, y, z]), meta.index(turn([x, y, z])));
                values[dst] = chunk.tsdf.values[src];
                weights[dst] = chunk.tsdf.weights[src];
            }
        }
    }
    let (c, s) = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][k];
    let rz = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let pivot = meta.voxel_to_world([nx as f64 / 2.0, ny as f64 / 2.0, 0.0]);
    let spin = |p: [f64; 3]| -> [f64; 3] {
        let d = [p[0] - pivot[0], p[1] - pivot[1], p[2]];
        [rz[0][0] * d[0] + rz[0][1] * d[1] + pivot[0], rz[1][0] * d[0] + rz[1][1] * d[1] + pivot[1], d[2]]
    };
    let views = chunk
        .views
        .iter()
        .map(|v| {
            let mut v = v.clone();
            let r = v.pose.rotation;
            v.pose.rotation = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|m| rz[i][m] * r[m][j]).sum()));
            v.pose.translation = spin(v.pose.translation);
            v
        })
        .collect();
    let annotations = chunk
        .annotations
        .iter()
        .map(|a| InstanceAnnotation::from_mask(a.class_id, a.mask.iter().map(|&v| turn(v)).collect()))
        .collect::<Result<_>>()?;
    Ok(Chunk {
        offset: chunk.offset,
        tsdf: TsdfGrid::from_parts(meta, chunk.tsdf.truncation, values, weights)?,
        views,
        annotations,
    })
}

/// A synthesized, scanned and fused scene.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub spec: SceneSpec,
    pub views: Vec<CameraView>,
    pub tsdf: TsdfGrid,
    pub annotations: Vec<InstanceAnnotation>,
}

pub fn synthesize(scene: &SceneConfig, trajectory: &TrajectoryConfig, truncation: f32, seed: u64) -> Result<SceneData> {
    let spec = generate_scene(scene, seed)?;
    let views = scan_scene(&spec, trajectory, seed)?;
    let meta = spec.grid_meta(scene.voxel_size as f32)?;
    let tsdf = fuse_tsdf(&views, meta, truncation)?;
    let annotations = ground_truth(&spec, &meta, &tsdf)?;
    Ok(SceneData {
        spec,
        views,
        tsdf,
        annotations,
    })
}

/// Seed of the `i`-th scene of a dataset.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// Chunks with their selected views from `n` synthesized scenes.
pub fn build_dataset(cfg: &PipelineConfig, n: usize, seed: u64) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for i in 0..n {
        let s = synthesize(&cfg.scene, &cfg.trajectory, cfg.truncation, scene_seed(seed, i))?;
        out.extend(scene_chunks(cfg, &s)?);
    }
    Ok(out)
}

/// Training chunks of one scene, each with its best-covering views.
pub fn scene_chunks(cfg: &PipelineConfig, s: &SceneData) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for mut c in extract_chunks(&s.tsdf, &s.annotations, cfg.chunk_dims, cfg.chunk_stride)? {
        let pick = select_views(&c.tsdf.meta, &c.annotations, &s.views, cfg.views_per_chunk)?;
        c.views = pick.into_iter().map(|v| s.views[v].clone()).collect();
        if cfg.augment_rotations {
            for k in 1..4 {
                out.push(rotate_chunk(&c, k)?);
            }
        }
        out.push(c);
    }
    Ok(out)
}

/// Anchor sizes from ground-truth box sizes: boxes are split at the volume
/// threshold and each side is clustered with k-means. When one side has
/// fewer distinct sizes than requested, the split falls back to volume rank.
pub fn fit_anchors(sizes: &[[f64; 3]], counts: [usize; 2], voxel_size: f64, threshold_m3: f64, seed: u64) -> Result<AnchorSet> {
    let total = counts[0] + counts[1];
    if counts.contains(&0) || sizes.len() < total {
        return Err(Error::InsufficientData(format!("{} boxes for {total} anchors", sizes.len())));
    }
    let is_small = |s: &[f64; 3]| box_volume_class_with(&Box3::new([0.0; 3], *s), voxel_size, threshold_m3) == VolumeClass::Small;
    let (mut small, mut large): (Vec<[f64; 3]>, Vec<[f64; 3]>) = sizes.iter().partition(|s| is_small(s));
    let distinct = |v: &[[f64; 3]]| {
        let mut d = v.to_vec();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        d.dedup();
        d.len()
    };
    if distinct(&small) < counts[0] || distinct(&large) < counts[1] {
        let mut all = sizes.to_vec();
        let vol = |s: &[f64; 3]| s[0] * s[1] * s[2];
        all.sort_by(|a, b| vol(a).total_cmp(&vol(b)));
        let cut = all.len() * counts[0] / total;
        large = all.split_off(cut);
        small = all;
    }
    let vol = |s: &[f64; 3]| s[0] * s[1] * s[2];
    let mut s = kmeans(&small, counts[0], seed, 100)?;
    let mut l = kmeans(&large, counts[1], seed ^ 1, 100)?;
    s.sort_by(|a, b| vol(a).total_cmp(&vol(b)));
    l.sort_by(|a, b| vol(a).total_cmp(&vol(b)));
    Ok(AnchorSet {
        small: s,
        large: l,
        stride: STRIDE,
    })
}

/// One view's network input.
#[derive(Debug, Clone)]
pub struct ViewInput {
    pub planar: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub targets: Vec<Option<usize>>,
}

/// Network input for one grid.
#[derive(Debug, Clone)]
pub struct NetInput {
    pub meta: GridMeta,
    pub tsdf: Vec<f32>,
    pub views: Vec<ViewInput>,
}

impl NetInput {
    pub fn new(tsdf: &TsdfGrid, views: &[CameraView], use_color: bool) -> Result<Self> {
        if tsdf.meta.dims.iter().any(|d| d % STRIDE != 0) {
            return Err(Error::shape(format!("grid {:?} is not divisible by {STRIDE}", tsdf.meta.dims)));
        }
        let views = if use_color {
            if views.is_empty() {
                return Err(Error::NoViews);
            }
            views
                .iter()
                .map(|v| {
                    let hw = (v.height / FEATURE_DOWNSCALE, v.width / FEATURE_DOWNSCALE);
                    Ok(ViewInput {
                        planar: v.color_planar(),
                        height: v.height,
                        width: v.width,
                        targets: backprojection_targets(&v.depth, (v.height, v.width), hw, &v.intrinsics, &v.pose, &tsdf.meta)?,
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            meta: tsdf.meta,
            tsdf: tsdf.normalized(),
            views,
        })
    }
}

/// A chunk prepared for training: inputs plus fixed anchor labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: NetInput,
    pub annotations: Vec<InstanceAnnotation>,
    pub anchors: [Vec<Box3>; 2],
    pub labels: [Vec<AnchorLabel>; 2],
}

pub fn feature_dims(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| d / STRIDE)
}

pub fn level_anchors(anchors: &AnchorSet, dims: [usize; 3]) -> [Vec<Box3>; 2] {
    let f = feature_dims(dims);
    [place_anchors(&anchors.small, f, STRIDE), place_anchors(&anchors.large, f, STRIDE)]
}

pub fn prepare(chunk: &Chunk, cfg: &PipelineConfig) -> Result<Sample> {
    let input = NetInput::new(&chunk.tsdf, &chunk.views, cfg.model.use_color)?;
    let anchors = level_anchors(&cfg.model.anchors, chunk.tsdf.meta.dims);
    let all: Vec<Box3> = anchors.iter().flatten().copied().collect();
    let gts: Vec<Box3> = chunk.annotations.iter().map(|a| a.bbox).collect();
    let mut labels = assign_anchors(&all, &gts, &cfg.detect);
    if cfg.detect.force_best_anchor {
        force_best_anchors(&mut labels, &all, &gts);
    }
    let large = labels.split_off(anchors[0].len());
    Ok(Sample {
        input,
        annotations: chunk.annotations.clone(),
        anchors,
        labels: [labels, large],
    })
}

/// Graph nodes shared by training and inference.
struct Forward {
    tsdf: Var,
    color: Option<Var>,
    backbone: Backbone,
    rpn: [RpnLevel; 2],
}

fn forward(tape: &mut Tape<f32>, p: &Bound, cfg: &ModelConfig, input: &NetInput) -> Result<Forward> {
    let [x, y, z] = input.meta.dims;
    let tsdf = tape.constant(Tensor::new(vec![1, x, y, z], input.tsdf.clone())?);
    let color = if cfg.use_color {
        let mut vols = Vec::with_capacity(input.views.len());
        for v in &input.views {
            let img = tape.constant(Tensor::new(vec![3, v.height, v.width], v.planar.clone())?);
            let f = encode_2d(tape, p, "enc", img)?;
            vols.push(backproject_var(tape, f, &v.targets, &input.meta)?);
        }
        Some(view_pool_var(tape, &vols)?)
    } else {
        None
    };
    let backbone = backbone_forward(tape, p, cfg, tsdf, color)?;
    let rpn = rpn_forward(tape, p, [backbone.small, backbone.large], cfg.anchors.counts())?;
    Ok(Forward { tsdf, color, backbone, rpn })
}

fn rpn_values(tape: &Tape<f32>, rpn: &[RpnLevel; 2]) -> [(Vec<f32>, Vec<f32>); 2] {
    std::array::from_fn(|l| (tape.value(rpn[l].objectness).data.clone(), tape.value(rpn[l].deltas).data.clone()))
}

fn proposals(tape: &Tape<f32>, f: &Forward, anchors: &[Vec<Box3>; 2], cfg: &PipelineConfig, dims: [usize; 3], keep: usize, nms_thr: f64) -> Vec<Proposal> {
    propose(
        &rpn_values(tape, &f.rpn),
        anchors,
        cfg.model.anchors.counts(),
        dims,
        cfg.detect.pre_nms_top_k,
        nms_thr,
        keep,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Rpn,
    RpnCls,
    RpnClsMask,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Rpn => "rpn",
            Stage::RpnCls => "rpn+cls",
            Stage::RpnClsMask => "rpn+cls+mask",
        }
    }

    pub fn at(schedule: &Schedule, step: usize) -> Option<Stage> {
        let [a, b, c] = schedule.steps;
        if step < a {
            Some(Stage::Rpn)
        } else if step < a + b {
            Some(Stage::RpnCls)
        } else if step < a + b + c {
            Some(Stage::RpnClsMask)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Option<Stage>,
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub cls: f64,
    pub cls_box: f64,
    pub mask: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,stage,rpn_cls,rpn_box,cls,cls_box,mask,total,lr";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.step,
            self.stage.map_or("-", Stage::name),
            self.rpn_cls,
            self.rpn_box,
            self.cls,
            self.cls_box,
            self.mask,
            self.total,
            self.lr
        )
    }
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).data[0] as f64
}

/// Objectness CE (positives and negatives averaged separately) and box Huber.
fn rpn_loss(tape: &mut Tape<f32>, f: &Forward, s: &Sample, batch: usize, rng: &mut ChaCha8Rng) -> Result<(Var, Var)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for l in 0..2 {
        for (i, lab) in s.labels[l].iter().enumerate() {
            match lab {
                AnchorLabel::Positive(g) => pos.push((l, i, *g)),
                AnchorLabel::Negative => neg.push((l, i, 0)),
                AnchorLabel::Ignore => {}
            }
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(batch / 2);
    neg.truncate(batch.saturating_sub(pos.len()));
    let cells: usize = feature_dims(s.input.meta.dims).iter().product();
    let mut cls_terms = Vec::new();
    let mut box_terms = Vec::new();
    for (set, target) in [(&pos, 1usize), (&neg, 0usize)] {
        if set.is_empty() {
            continue;
        }
        let w = 1.0 / set.len() as f32;
        for l in 0..2 {
            let rows: Vec<&(usize, usize, usize)> = set.iter().filter(|e| e.0 == l).collect();
            if rows.is_empty() {
                continue;
            }
            let mut src = Vec::with_capacity(2 * rows.len());
            for &&(_, i, _) in &rows {
                let (a, c) = (i / cells, i % cells);
                src.push(((2 * a) * cells + c) as u32);
                src.push(((2 * a + 1) * cells + c) as u32);
            }
            let logits = tape.select(f.rpn[l].objectness, src, &[rows.len(), 2])?;
            cls_terms.push(tape.softmax_cross_entropy(logits, &vec![target; rows.len()], &vec![w; rows.len()])?);
            if target == 1 {
                let mut src = Vec::with_capacity(6 * rows.len());
                let mut tgt = Vec::with_capacity(6 * rows.len());
                for &&(_, i, g) in &rows {
                    let (a, c) = (i / cells, i % cells);
                    src.extend((0..6).map(|k| ((6 * a + k) * cells + c) as u32));
                    tgt.extend(encode_box(&s.annotations[g].bbox, &s.anchors[l][i]).map(|d| d as f32));
                }
                let n = src.len();
                let d = tape.select(f.rpn[l].deltas, src, &[n])?;
                box_terms.push(tape.huber(d, &tgt, &vec![w; n], 1.0)?);
            }
        }
    }
    let zero = tape.constant(Tensor::scalar(0.0));
    let cls = if cls_terms.is_empty() { zero } else { tape.add_all(&cls_terms)? };
    let bx = if box_terms.is_empty() { zero } else { tape.add_all(&box_terms)? };
    Ok((cls, bx))
}

fn best_gt(b: &Box3, gts: &[InstanceAnnotation]) -> Option<(usize, f64)> {
    gts.iter()
        .enumerate()
        .map(|(g, a)| (g, box_iou(b, &a.bbox)))
        .fold(None, |acc, (g, iou)| match acc {
            Some((_, best)) if best >= iou => acc,
            _ if iou > 0.0 => Some((g, iou)),
            _ => acc,
        })
}

/// Pools RoIs into a `[B, F]` node; boxes whose region leaves the grid are dropped.
fn pool_rois(tape: &mut Tape<f32>, feat: Var, boxes: &[Box3]) -> Result<(Option<Var>, Vec<usize>)> {
    let mut blocks = Vec::new();
    let mut kept = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        match roi_pool_var(tape, feat, feature_region(b, STRIDE), ROI_BINS) {
            Ok(v) => {
                blocks.push(v);
                kept.push(i);
            }
            Err(Error::EmptyCrop) => {}
            Err(e) => return Err(e),
        }
    }
    if blocks.is_empty() {
        return Ok((None, kept));
    }
    Ok((Some(stack_rois(tape, &blocks)?), kept))
}

fn classifier_loss(tape: &mut Tape<f32>, p: &Bound, cfg: &PipelineConfig, f: &Forward, s: &Sample, props: &[Proposal]) -> Result<Option<(Var, Var)>> {
    let mut rois: Vec<(Box3, usize)> = s.annotations.iter().enumerate().map(|(g, a)| (a.bbox, g)).collect();
    for pr in props {
        if let Some((g, iou)) = best_gt(&pr.bbox, &s.annotations) {
            if iou >= cfg.schedule.cls_iou {
                rois.push((pr.bbox, g));
            }
        }
    }
    rois.truncate(cfg.schedule.cls_batch);
    let boxes: Vec<Box3> = rois.iter().map(|r| r.0).collect();
    let (Some(x), kept) = pool_rois(tape, f.backbone.roi, &boxes)? else { return Ok(None) };
    let dims = cfg.model.classifier_dims();
    let (logits, refine) = classify_head(tape, p, x, dims)?;
    let b = kept.len();
    let w = 1.0 / b as f32;
    let classes: Vec<usize> = kept.iter().map(|&i| s.annotations[rois[i].1].class_id).collect();
    let ce = tape.softmax_cross_entropy(logits, &classes, &vec![w; b])?;
    let nc = dims.num_classes;
    let mut src = Vec::with_capacity(6 * b);
    let mut tgt = Vec::with_capacity(6 * b);
    for (row, &i) in kept.iter().enumerate() {
        let c = classes[row];
        src.extend((0..6).map(|k| (row * 6 * nc + 6 * c + k) as u32));
        tgt.extend(encode_box(&s.annotations[rois[i].1].bbox, &rois[i].0).map(|d| d as f32));
    }
    let d = tape.select(refine, src, &[6 * b])?;
    let hub = tape.huber(d, &tgt, &vec![w; 6 * b], 1.0)?;
    Ok(Some((ce, hub)))
}

fn mask_loss(tape: &mut Tape<f32>, p: &Bound, cfg: &PipelineConfig, f: &Forward, s: &Sample, props: &[Proposal]) -> Result<Option<Var>> {
    let mut boxes: Vec<Box3> = s.annotations.iter().map(|a| a.bbox).collect();
    boxes.extend(props.iter().map(|p| p.bbox));
    let mut targets = build_mask_targets(&boxes, &s.annotations, cfg.detect.mask_iou_gate);
    targets.truncate(cfg.schedule.mask_batch);
    if targets.is_empty() {
        return Ok(None);
    }
    let feats = mask_backbone(tape, p, f.tsdf, f.color)?;
    let logits = mask_class_logits(tape, p, feats)?;
    let b = targets.len() as f32;
    let mut terms = Vec::with_capacity(targets.len());
    for t in &targets {
        let class = s.annotations[t.gt_index].class_id;
        let sel = select_class_region(tape, logits, class, t.region)?;
        let n = t.target.len();
        let tgt: Vec<f32> = t.target.iter().map(|&v| v as f32).collect();
        terms.push(tape.bce_with_logits(sel, &tgt, &vec![1.0 / (n as f32 * b); n])?);
    }
    Ok(Some(tape.add_all(&terms)?))
}

/// Training progress: parameters, momentum and position in the schedule.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub optim: OptimState<f32>,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>, seed: u64) -> Self {
        let optim = OptimState::for_params(&params);
        Self { params, optim, step: 0, seed }
    }

    pub fn stage(&self, schedule: &Schedule) -> Option<Stage> {
        Stage::at(schedule, self.step)
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Order in which samples are visited: a fresh permutation per pass.
fn sample_index(seed: u64, step: usize, n: usize) -> usize {
    let epoch = step / n;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xA5A5) ^ epoch as u64));
    perm[step % n]
}

/// One optimizer step on `sample`. On a non-finite loss the parameters are
/// left untouched and `DivergenceDetected` is returned.
pub fn train_step(state: &mut TrainState, cfg: &PipelineConfig, sample: &Sample) -> Result<LossRecord> {
    let stage = state.stage(&cfg.schedule).ok_or_else(|| Error::Invalid("schedule exhausted".into()))?;
    let mut rng = step_rng(state.seed, state.step);
    let mut tape = Tape::<f32>::new();
    let p = state.params.bind(&mut tape);
    let f = forward(&mut tape, &p, &cfg.model, &sample.input)?;
    let (rc, rb) = rpn_loss(&mut tape, &f, sample, cfg.schedule.rpn_batch, &mut rng)?;
    let mut rec = LossRecord {
        step: state.step,
        stage: Some(stage),
        rpn_cls: scalar(&tape, rc),
        rpn_box: scalar(&tape, rb),
        lr: learning_rate_at(&cfg.train, state.step),
        ..LossRecord::default()
    };
    let mut terms = vec![rc, rb];
    if stage >= Stage::RpnCls {
        let props = proposals(&tape, &f, &sample.anchors, cfg, sample.input.meta.dims, cfg.detect.post_nms_train, cfg.detect.nms_train);
        if let Some((ce, hub)) = classifier_loss(&mut tape, &p, cfg, &f, sample, &props)? {
            rec.cls = scalar(&tape, ce);
            rec.cls_box = scalar(&tape, hub);
            terms.extend([ce, hub]);
        }
        if stage >= Stage::RpnClsMask {
            if let Some(m) = mask_loss(&mut tape, &p, cfg, &f, sample, &props)? {
                rec.mask = scalar(&tape, m);
                terms.push(m);
            }
        }
    }
    let total = tape.add_all(&terms)?;
    rec.total = scalar(&tape, total);
    if !rec.total.is_finite() {
        return Err(Error::DivergenceDetected { step: state.step });
    }
    let mut grads = tape.backward(total)?;
    let mut g: Vec<Option<Vec<f32>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
    if cfg.schedule.grad_clip > 0.0 {
        let norm = g.iter().flatten().flatten().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::DivergenceDetected { step: state.step });
        }
        if norm > cfg.schedule.grad_clip {
            let k = (cfg.schedule.grad_clip / norm) as f32;
            g.iter_mut().flatten().flatten().for_each(|x| *x *= k);
        }
    }
    sgd_step(&mut state.params, &g, &mut state.optim, &cfg.train, state.step)?;
    state.step += 1;
    Ok(rec)
}

/// Runs the remaining schedule. `on_step` sees every loss record; on
/// divergence the state keeps the last good parameters.
pub fn train(state: &mut TrainState, cfg: &PipelineConfig, samples: &[Sample], mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let mut log = Vec::new();
    while state.stage(&cfg.schedule).is_some() {
        let i = sample_index(state.seed, state.step, samples.len());
        let rec = train_step(state, cfg, &samples[i])?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Fully-convolutional detection over a whole grid with all of its views.
pub fn infer(params: &ParamStore<f32>, cfg: &PipelineConfig, input: &NetInput) -> Result<Vec<Detection>> {
    let dims = input.meta.dims;
    let mut tape = Tape::<f32>::new();
    let p = params.bind(&mut tape);
    let f = forward(&mut tape, &p, &cfg.model, input)?;
    let anchors = level_anchors(&cfg.model.anchors, dims);
    let props = proposals(&tape, &f, &anchors, cfg, dims, cfg.detect.post_nms_test, cfg.detect.nms_test);
    let boxes: Vec<Box3> = props.iter().map(|p| p.bbox).collect();
    let (Some(x), kept) = pool_rois(&mut tape, f.backbone.roi, &boxes)? else { return Ok(Vec::new()) };
    let dims_c = cfg.model.classifier_dims();
    let (logits, refine) = classify_head(&mut tape, &p, x, dims_c)?;
    let nc = dims_c.num_classes;
    let lv = tape.value(logits).data.clone();
    let rv = tape.value(refine).data.clone();
    let mut dets: Vec<Detection> = kept
        .iter()
        .enumerate()
        .map(|(row, &i)| {
            let probs = softmax(&lv[row * nc..(row + 1) * nc]);
            let (class_id, pc) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            let mut bbox = props[i].bbox;
            if cfg.detect.apply_refinement {
                let d: [f64; 6] = std::array::from_fn(|k| (rv[row * 6 * nc + 6 * class_id + k] as f64).clamp(-4.0, 4.0));
                if let Some(b) = decode_box(&d, &bbox).clipped_to(dims) {
                    if b.size.iter().all(|&s| s >= 1.0) {
                        bbox = b;
                    }
                }
            }
            Detection {
                bbox,
                class_id,
                score: props[i].score * pc,
                mask: None,
            }
        })
        .collect();
    let boxes: Vec<Box3> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let keep = nms(&boxes, &scores, cfg.detect.nms_test);
    dets = keep.into_iter().map(|i| dets[i].clone()).collect();

    let feats = mask_backbone(&mut tape, &p, f.tsdf, f.color)?;
    let mlog = mask_class_logits(&mut tape, &p, feats)?;
    for d in &mut dets {
        let region = d.bbox.enclosing_region();
        let Some(r) = region.clamp_to(dims) else {
            d.mask = Some(Vec::new());
            continue;
        };
        let sel = select_class_region(&mut tape, mlog, d.class_id, r)?;
        let vals = &tape.value(sel).data;
        d.mask = Some(r.iter().zip(vals).filter(|(_, &l)| l > 0.0).map(|(v, _)| v).collect());
    }
    Ok(dets)
}

/// Whole-scene inference: the grid height must match the chunk height and
/// the horizontal extent must be divisible by the backbone stride.
pub fn infer_scene(params: &ParamStore<f32>, cfg: &PipelineConfig, tsdf: &TsdfGrid, views: &[CameraView]) -> Result<Vec<Detection>> {
    let dims = tsdf.meta.dims;
    if dims[2] != cfg.chunk_dims[2] || dims.iter().any(|d| d % STRIDE != 0) {
        return Err(Error::shape(format!(
            "scene grid {dims:?} needs height {} and dims divisible by {STRIDE}",
            cfg.chunk_dims[2]
        )));
    }
    infer(params, cfg, &NetInput::new(tsdf, views, cfg.model.use_color)?)
}

/// Per-anchor objectness and decoded boxes of one level, for inspection.
pub fn level_scores(obj: &[f32], deltas: &[f32], anchors: &[Box3], n: usize) -> Vec<(Box3, f64)> {
    let cells = anchors.len() / n.max(1);
    let s = objectness_scores(obj, n, cells);
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| (decode_box(&anchor_deltas(deltas, i / cells, i % cells, cells), a), s[i]))
        .collect()
}

/// Backbone taps for an input, as plain tensors (used for consistency checks).
pub fn backbone_features(params: &ParamStore<f32>, cfg: &ModelConfig, tsdf: &[f32], color: Option<&[f32]>, dims: [usize; 3]) -> Result<[Tensor<f32>; 3]> {
    let mut tape = Tape::<f32>::new();
    let p = params.bind(&mut tape);
    let [x, y, z] = dims;
    let t = tape.constant(Tensor::new(vec![1, x, y, z], tsdf.to_vec())?);
    let c = match color {
        Some(c) => {
            let ch = c.len() / (x * y * z);
            Some(tape.constant(Tensor::new(vec![ch, x, y, z], c.to_vec())?))
        }
        None => None,
    };
    let b = backbone_forward(&mut tape, &p, cfg, t, c)?;
    Ok([b.small, b.roi, b.large].map(|v| tape.value(v).clone()))
}

/// Back-projected, view-pooled color features of an input.
pub fn color_volume(params: &ParamStore<f32>, input: &NetInput) -> Result<Vec<f32>> {
    let mut tape = Tape::<f32>::new();
    let p = params.bind(&mut tape);
    let mut vols = Vec::new();
    for v in &input.views {
        let img = tape.constant(Tensor::new(vec![3, v.height, v.width], v.planar.clone())?);
        let f = encode_2d(&mut tape, &p, "enc", img)?;
        vols.push(backproject_var(&mut tape, f, &v.targets, &input.meta)?);
    }
    let c = view_pool_var(&mut tape, &vols)?;
    Ok(tape.value(c).data.clone())
}

/// Wall-clock of a closure in seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

/// Views for a grid without annotations: coverage of its observed surface.
pub fn select_views_unlabeled(tsdf: &TsdfGrid, candidates: &[CameraView], n: usize) -> Result<Vec<usize>> {
    let surface: Vec<[usize; 3]> = tsdf.meta.full_region().iter().filter(|&v| tsdf.is_near_surface(v)).collect();
    let pseudo: Vec<InstanceAnnotation> = InstanceAnnotation::from_mask(0, surface).into_iter().collect();
    select_views(&tsdf.meta, &pseudo, candidates, n)
}

/// Held-out evaluation output.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub boxes: MapReport,
    pub masks: MapReport,
    pub predictions: Vec<Vec<Detection>>,
}

/// Runs inference on whole scenes, each with `views_per_chunk` views picked
/// by surface coverage, and scores boxes and masks.
pub fn evaluate(params: &ParamStore<f32>, cfg: &PipelineConfig, scenes: &[SceneData], thresholds: &[f64]) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let pick = select_views_unlabeled(&s.tsdf, &s.views, cfg.views_per_chunk)?;
        let views: Vec<CameraView> = pick.into_iter().map(|i| s.views[i].clone()).collect();
        predictions.push(infer_scene(params, cfg, &s.tsdf, &views)?);
        gts.push(s.annotations.iter().map(Detection::from).collect::<Vec<_>>());
    }
    let nc = cfg.model.num_classes;
    Ok(Evaluation {
        boxes: mean_average_precision(&predictions, &gts, thresholds, nc, IouKind::Box, true),
        masks: mean_average_precision(&predictions, &gts, thresholds, nc, IouKind::Mask, true),
        predictions,
    })
}

/// Held-out scenes for evaluation.
pub fn synthesize_scenes(cfg: &PipelineConfig, n: usize, seed: u64) -> Result<Vec<SceneData>> {
    (0..n).map(|i| synthesize(&cfg.scene, &cfg.trajectory, cfg.truncation, scene_seed(seed, i))).collect()
}
