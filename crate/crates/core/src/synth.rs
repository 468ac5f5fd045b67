//! Synthetic rooms, virtual RGB-D scanning and TSDF fusion.
//!
//! A scene is an open-topped box room (floor plus four walls) holding
//! axis-aligned, non-overlapping objects that stand on the floor. Each class
//! owns a base albedo, so color carries class information.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::grid::{box_iou, Box3, GridMeta, InstanceAnnotation, TsdfGrid, VOXEL_SIZE_M};

/// Instance-image value for pixels that hit a wall or the floor.
pub const INSTANCE_ROOM: i32 = -1;
/// Instance-image value for pixels whose ray escapes the room.
pub const INSTANCE_NONE: i32 = -2;

const FLOOR_ALBEDO: [f64; 3] = [0.45, 0.45, 0.45];
const WALL_ALBEDO: [f64; 3] = [0.62, 0.62, 0.62];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    /// World-space box in meters.
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Room extents in meters; the room spans `[0, room]` on every axis.
    pub room: [f64; 3],
    pub num_classes: usize,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.room.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Invalid(format!("room extents must be positive, got {:?}", self.room)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.class_id >= self.num_classes {
                return Err(Error::Invalid(format!("object {i} has class {} ≥ {}", o.class_id, self.num_classes)));
            }
            if !o.bbox.is_valid() {
                return Err(Error::Invalid(format!("object {i} has an invalid box")));
            }
            let (lo, hi) = (o.bbox.min(), o.bbox.max());
            if (0..3).any(|a| lo[a] < -1e-9 || hi[a] > self.room[a] + 1e-9) {
                return Err(Error::Invalid(format!("object {i} leaves the room")));
            }
            for (j, p) in self.objects[..i].iter().enumerate() {
                if box_iou(&o.bbox, &p.bbox) > 0.0 {
                    return Err(Error::Invalid(format!("objects {j} and {i} overlap")));
                }
            }
        }
        Ok(())
    }

    /// Grid covering the whole room with the room's minimum corner at the origin.
    pub fn grid_meta(&self, voxel_size: f32) -> Result<GridMeta> {
        let dims = self.room.map(|r| ((r / voxel_size as f64) - 1e-6).ceil().max(1.0) as usize);
        GridMeta::new(dims, voxel_size, [0.0; 3])
    }
}

/// Per-axis `[min, max]` object extents in voxels.
pub type SizeRange = [[f64; 2]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// Room extents in voxels.
    pub room_voxels: [usize; 3],
    pub voxel_size: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    /// Give every class its own characteristic shape.
    pub class_size_prior: bool,
    /// Shape priors cycled over classes when `class_size_prior` is set.
    pub class_sizes: Vec<SizeRange>,
    /// Extents used for every class otherwise.
    pub shared_size: SizeRange,
    pub albedo_jitter: f64,
    /// Minimum free space between objects, in voxels.
    pub gap_voxels: f64,
    /// Minimum distance from the walls, in voxels.
    pub wall_margin_voxels: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            room_voxels: [32, 32, 16],
            voxel_size: VOXEL_SIZE_M as f64,
            min_objects: 2,
            max_objects: 4,
            num_classes: 3,
            class_size_prior: true,
            class_sizes: vec![
                [[5.0, 8.0], [5.0, 8.0], [9.0, 13.0]],
                [[9.0, 13.0], [9.0, 13.0], [4.0, 6.0]],
                [[6.0, 9.0], [6.0, 9.0], [6.0, 9.0]],
                [[10.0, 14.0], [4.0, 6.0], [6.0, 9.0]],
            ],
            shared_size: [[5.0, 12.0], [5.0, 12.0], [4.0, 12.0]],
            albedo_jitter: 0.05,
            gap_voxels: 2.0,
            wall_margin_voxels: 1.0,
            max_attempts: 2000,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.room_voxels.iter().any(|&d| d == 0) || !(self.voxel_size > 0.0) {
            return Err(Error::Invalid("room must have positive extent".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Invalid("num_classes must be positive".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Invalid(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.class_size_prior && self.class_sizes.is_empty() {
            return Err(Error::Invalid("class_size_prior needs at least one size range".into()));
        }
        let ranges = if self.class_size_prior { &self.class_sizes[..] } else { std::slice::from_ref(&self.shared_size) };
        for r in ranges {
            for a in 0..3 {
                let room = self.room_voxels[a] as f64 - if a < 2 { 2.0 * self.wall_margin_voxels } else { 0.0 };
                if !(r[a][0] > 0.0 && r[a][0] <= r[a][1]) || r[a][0] > room {
                    return Err(Error::Invalid(format!("size range {:?} does not fit the room", r)));
                }
            }
        }
        Ok(())
    }

    pub fn room_meters(&self) -> [f64; 3] {
        self.room_voxels.map(|d| d as f64 * self.voxel_size)
    }

    fn size_range(&self, class_id: usize) -> &SizeRange {
        if self.class_size_prior {
            &self.class_sizes[class_id % self.class_sizes.len()]
        } else {
            &self.shared_size
        }
    }
}

/// Base albedo of a class: evenly spaced hues, so the map is injective.
pub fn class_albedo(class_id: usize, num_classes: usize) -> [f64; 3] {
    let h = class_id as f64 / num_classes.max(1) as f64;
    hsv_to_rgb(h, 0.75, 0.85)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Seeded random scene by rejection sampling.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let room = cfg.room_meters();
    let vs = cfg.voxel_size;
    let wanted = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let jitter = Normal::new(0.0, cfg.albedo_jitter.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let half_gap = 0.5 * cfg.gap_voxels * vs;
    let margin = cfg.wall_margin_voxels * vs;

    let mut objects: Vec<SceneObject> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while objects.len() < wanted {
        if attempts >= cfg.max_attempts {
            return Err(Error::PlacementFailure {
                placed: objects.len(),
                wanted,
                attempts,
            });
        }
        attempts += 1;
        let class_id = rng.gen_range(0..cfg.num_classes);
        let range = cfg.size_range(class_id);
        let size: [f64; 3] = std::array::from_fn(|a| rng.gen_range(range[a][0]..=range[a][1]) * vs);
        let mut lo = [0.0; 3];
        let mut fits = true;
        for a in 0..2 {
            let free = room[a] - 2.0 * margin - size[a];
            if free < 0.0 {
                fits = false;
                break;
            }
            lo[a] = margin + rng.gen_range(0.0..=free);
        }
        if !fits || size[2] > room[2] {
            continue;
        }
        let bbox = Box3::from_min_max(lo, std::array::from_fn(|a| lo[a] + size[a]));
        let padded = Box3::new(bbox.center, bbox.size.map(|s| s + 2.0 * half_gap));
        if objects.iter().any(|o| padded.intersection_volume(&o.bbox) > 0.0) {
            continue;
        }
        let base = class_albedo(class_id, cfg.num_classes);
        let albedo = base.map(|c| (c + jitter.sample(&mut rng)).clamp(0.0, 1.0));
        objects.push(SceneObject { class_id, bbox, albedo });
    }
    let scene = SceneSpec {
        room,
        num_classes: cfg.num_classes,
        objects,
        seed,
    };
    scene.validate()?;
    Ok(scene)
}

/// An RGB-D frame. `instance` is empty for frames loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
    /// Row-major z-depth in meters; 0 marks an invalid pixel.
    pub depth: Vec<f32>,
    pub color: Vec<[u8; 3]>,
    pub instance: Vec<i32>,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if n == 0 || self.depth.len() != n || self.color.len() != n {
            return Err(Error::shape(format!(
                "{}×{} view with {} depth and {} color pixels",
                self.width,
                self.height,
                self.depth.len(),
                self.color.len()
            )));
        }
        if !(self.intrinsics.fx > 0.0 && self.intrinsics.fy > 0.0) {
            return Err(Error::Invalid("focal lengths must be positive".into()));
        }
        if !self.pose.is_rigid(1e-6) {
            return Err(Error::Invalid("pose rotation is not orthonormal".into()));
        }
        if self.depth.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Invalid("depth must be non-negative".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn depth_at(&self, u: usize, v: usize) -> f32 {
        self.depth[v * self.width + u]
    }

    /// Nearest pixel to the projection of a world point, with the point's camera depth.
    pub fn project_world(&self, p: [f64; 3]) -> Option<(usize, usize, f64)> {
        let c = self.pose.world_to_cam(p);
        let (u, v) = self.intrinsics.project(c)?;
        let (pu, pv) = (u.round(), v.round());
        if pu < 0.0 || pv < 0.0 || pu >= self.width as f64 || pv >= self.height as f64 {
            return None;
        }
        Some((pu as usize, pv as usize, c[2]))
    }

    /// Color as a `[3, H, W]` planar array in `[-0.5, 0.5]`.
    pub fn color_planar(&self) -> Vec<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.color.iter().enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f32 / 255.0 - 0.5;
            }
        }
        out
    }
}

/// Orbit parameters for the virtual scanner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub num_views: usize,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Camera height as a multiple of the room height.
    pub height_factor: f64,
    /// Orbit radius as a fraction of the smaller horizontal room extent.
    pub radius_factor: f64,
    /// Angular jitter of each waypoint, as a fraction of the waypoint spacing.
    pub angle_jitter: f64,
    /// Look-at target jitter, in meters.
    pub target_jitter: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            num_views: 8,
            width: 64,
            height: 64,
            fov_deg: 90.0,
            height_factor: 1.2,
            radius_factor: 0.36,
            angle_jitter: 0.2,
            target_jitter: 0.05,
        }
    }
}

/// Seeded orbit of look-at cameras around the room center.
pub fn orbit_trajectory(room: [f64; 3], cfg: &TrajectoryConfig, seed: u64) -> Result<Vec<(Intrinsics, Pose)>> {
    if cfg.num_views == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(Error::Invalid("trajectory needs at least one view and a non-empty image".into()));
    }
    if !(cfg.fov_deg > 0.0 && cfg.fov_deg < 180.0) {
        return Err(Error::Invalid(format!("field of view {} out of range", cfg.fov_deg)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b17_7a11_5eed);
    let k = Intrinsics::from_fov(cfg.width, cfg.height, cfg.fov_deg);
    let center = [0.5 * room[0], 0.5 * room[1]];
    let radius = cfg.radius_factor * room[0].min(room[1]);
    let step = std::f64::consts::TAU / cfg.num_views as f64;
    let phase = rng.gen_range(0.0..step);
    let mut out = Vec::with_capacity(cfg.num_views);
    for i in 0..cfg.num_views {
        let aj = if cfg.angle_jitter > 0.0 { rng.gen_range(-cfg.angle_jitter..=cfg.angle_jitter) } else { 0.0 };
        let angle = phase + step * (i as f64 + aj);
        let eye = [
            center[0] + radius * angle.cos(),
            center[1] + radius * angle.sin(),
            cfg.height_factor * room[2],
        ];
        let tj = cfg.target_jitter;
        let mut j = || if tj > 0.0 { rng.gen_range(-tj..=tj) } else { 0.0 };
        let target = [center[0] + j(), center[1] + j(), 0.0];
        out.push((k, Pose::look_at(eye, target)?));
    }
    Ok(out)
}

/// Slab test; returns the entry distance when the ray starts outside the box.
fn ray_box_entry(o: [f64; 3], d: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Nearest hit against the floor and walls, each a finite rectangle.
fn ray_room(o: [f64; 3], d: [f64; 3], room: [f64; 3]) -> Option<(f64, bool)> {
    let mut best: Option<(f64, bool)> = None;
    let planes: [(usize, f64); 5] = [(2, 0.0), (0, 0.0), (0, room[0]), (1, 0.0), (1, room[1])];
    for (axis, at) in planes {
        if d[axis].abs() < 1e-15 {
            continue;
        }
        let t = (at - o[axis]) / d[axis];
        if t <= 0.0 {
            continue;
        }
        let p: [f64; 3] = std::array::from_fn(|a| o[a] + t * d[a]);
        let inside = (0..3).all(|a| a == axis || (p[a] >= 0.0 && p[a] <= room[a]));
        if inside && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, axis == 2));
        }
    }
    best
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Ray-casts one frame. Each pixel ray goes through the pixel center with a
/// camera-frame direction of unit z, so hit distance equals z-depth.
pub fn render_view(scene: &SceneSpec, intrinsics: Intrinsics, pose: Pose, width: usize, height: usize) -> Result<CameraView> {
    if width == 0 || height == 0 {
        return Err(Error::Invalid("image must be non-empty".into()));
    }
    if !pose.is_rigid(1e-6) {
        return Err(Error::Invalid("pose rotation is not orthonormal".into()));
    }
    let n = width * height;
    let o = pose.translation;
    let boxes: Vec<([f64; 3], [f64; 3])> = scene.objects.iter().map(|ob| (ob.bbox.min(), ob.bbox.max())).collect();
    let pixels: Vec<(f32, [u8; 3], i32)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % width) as f64, (i / width) as f64);
            let dc = [(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0];
            let d = pose.rotate(dc);
            let mut hit: Option<(f64, [f64; 3], i32)> = None;
            for (k, (lo, hi)) in boxes.iter().enumerate() {
                if let Some(t) = ray_box_entry(o, d, *lo, *hi) {
                    if hit.is_none_or(|(bt, _, _)| t < bt) {
                        hit = Some((t, scene.objects[k].albedo, k as i32));
                    }
                }
            }
            if let Some((t, floor)) = ray_room(o, d, scene.room) {
                if hit.is_none_or(|(bt, _, _)| t < bt) {
                    hit = Some((t, if floor { FLOOR_ALBEDO } else { WALL_ALBEDO }, INSTANCE_ROOM));
                }
            }
            match hit {
                Some((t, c, id)) => (t as f32, c.map(to_u8), id),
                None => (0.0, [0, 0, 0], INSTANCE_NONE),
            }
        })
        .collect();
    let mut view = CameraView {
        intrinsics,
        pose,
        width,
        height,
        depth: Vec::with_capacity(n),
        color: Vec::with_capacity(n),
        instance: Vec::with_capacity(n),
    };
    for (d, c, id) in pixels {
        view.depth.push(d);
        view.color.push(c);
        view.instance.push(id);
    }
    Ok(view)
}

/// Renders every pose of a trajectory.
pub fn scan_scene(scene: &SceneSpec, cfg: &TrajectoryConfig, seed: u64) -> Result<Vec<CameraView>> {
    orbit_trajectory(scene.room, cfg, seed)?
        .into_iter()
        .map(|(k, p)| render_view(scene, k, p, cfg.width, cfg.height))
        .collect()
}

/// Volumetric fusion with unit weight per observation.
///
/// Per-voxel sums are accumulated in `f64`, so the result does not depend on
/// view order beyond `f32` rounding of the final mean.
pub fn fuse_tsdf(views: &[CameraView], meta: GridMeta, truncation: f32) -> Result<TsdfGrid> {
    if views.is_empty() {
        return Err(Error::NoViews);
    }
    if !(truncation >= 1.0) {
        return Err(Error::Invalid(format!("truncation must be at least 1 voxel, got {truncation}")));
    }
    for v in views {
        v.validate()?;
    }
    let tau = truncation as f64;
    let vs = meta.voxel_size as f64;
    let (values, weights): (Vec<f32>, Vec<f32>) = (0..meta.num_voxels())
        .into_par_iter()
        .map(|i| {
            let p = meta.voxel_center_world(meta.unindex(i));
            let (mut sum, mut weight) = (0.0f64, 0.0f64);
            for view in views {
                let Some((u, v, z)) = view.project_world(p) else { continue };
                let d = view.depth_at(u, v) as f64;
                if d <= 0.0 {
                    continue;
                }
                let s = (d - z) / vs;
                if s > -tau {
                    sum += s.min(tau);
                    weight += 1.0;
                }
            }
            if weight > 0.0 {
                ((sum / weight) as f32, weight as f32)
            } else {
                (truncation, 0.0)
            }
        })
        .unzip();
    TsdfGrid::from_parts(meta, truncation, values, weights)
}

/// Instance annotations: observed near-surface voxels inside each object's box.
pub fn ground_truth(scene: &SceneSpec, meta: &GridMeta, fused: &TsdfGrid) -> Result<Vec<InstanceAnnotation>> {
    if fused.meta != *meta {
        return Err(Error::MetaMismatch("fused grid does not match the requested grid".into()));
    }
    let mut out = Vec::new();
    for obj in &scene.objects {
        let lo = meta.world_to_voxel(obj.bbox.min());
        let hi = meta.world_to_voxel(obj.bbox.max());
        let vbox = Box3::from_min_max(lo, hi);
        let Some(region) = vbox.enclosing_region().clamp_to(meta.dims) else { continue };
        let mask: Vec<[usize; 3]> = region
            .iter()
            .filter(|&v| vbox.contains_voxel_center(v) && fused.is_near_surface(v))
            .collect();
        if !mask.is_empty() {
            out.push(InstanceAnnotation::from_mask(obj.class_id, mask)?);
        }
    }
    Ok(out)
}
