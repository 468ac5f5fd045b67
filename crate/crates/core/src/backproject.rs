//! Lifting 2D color features into the voxel grid.
//!
//! A small conv encoder turns each color image into a feature map at 1/8
//! resolution. Every feature cell samples the depth image at the pixel nearest
//! its center, is unprojected into the world and lands in exactly one voxel.
//! Collisions inside one view and across views both resolve by element-wise
//! max, so both are built on [`Tape::select`] with argmax routing.

use rand::Rng;

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::grid::{FeatureVolume, GridMeta};
use crate::nn::{Bound, ConvGeom, Init, ParamStore, Real, Tape, Tensor, Var, NO_SOURCE};

/// Ratio between image and feature-map resolution.
pub const FEATURE_DOWNSCALE: usize = 8;

/// A `C₂ × h × w` feature map computed from an `H × W` image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap2D {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    /// `(H, W)` of the image the map was computed from.
    pub source: (usize, usize),
}

impl FeatureMap2D {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>, source: (usize, usize)) -> Result<Self> {
        if channels * height * width == 0 || data.len() != channels * height * width {
            return Err(Error::shape(format!("{channels}×{height}×{width} feature map with {} values", data.len())));
        }
        if source.0 % height != 0 || source.1 % width != 0 || source.0 / height != source.1 / width {
            return Err(Error::shape(format!("{height}×{width} map is not an integer downscale of {source:?}")));
        }
        Ok(Self { channels, height, width, data, source })
    }

    pub fn downscale(&self) -> usize {
        self.source.0 / self.height
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(c * self.height + i) * self.width + j]
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Widths of the three stride-2 stages.
    pub stages: [usize; 3],
    /// Output feature channels, C₂.
    pub out_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stages: [8, 16, 16],
            out_channels: 16,
        }
    }
}

const STAGE: ConvGeom = ConvGeom {
    kernel: [4, 4, 1],
    stride: [2, 2, 1],
    pad: [1, 1, 0],
};

pub fn init_encoder<R: Rng>(params: &mut ParamStore<f32>, prefix: &str, cfg: &EncoderConfig, rng: &mut R) {
    let mut c_in = 3;
    for (s, &c) in cfg.stages.iter().enumerate() {
        params.init(&format!("{prefix}.stage{s}.w"), &[c, c_in, 4, 4], Init::HeUniform { gain: 1.0 }, rng);
        params.init(&format!("{prefix}.stage{s}.b"), &[c], Init::Zeros, rng);
        c_in = c;
    }
    params.init(&format!("{prefix}.out.w"), &[cfg.out_channels, c_in, 1, 1], Init::HeUniform { gain: 1.0 }, rng);
    params.init(&format!("{prefix}.out.b"), &[cfg.out_channels], Init::Zeros, rng);
}

/// Encodes a `[3, H, W]` color node into `[C₂, H/8, W/8]`. Outputs are
/// non-negative, so 0 doubles as "no feature" after back-projection.
pub fn encode_2d<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, color: Var) -> Result<Var> {
    let s = tape.shape(color).to_vec();
    let [3, h, w] = s[..] else {
        return Err(Error::shape(format!("encoder input {s:?}, expected [3, H, W]")));
    };
    if h % FEATURE_DOWNSCALE != 0 || w % FEATURE_DOWNSCALE != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("image {h}×{w} is not divisible by {FEATURE_DOWNSCALE}")));
    }
    let mut x = color;
    for s in 0..3 {
        let w = p.var(&format!("{prefix}.stage{s}.w"));
        let b = p.var(&format!("{prefix}.stage{s}.b"));
        x = tape.conv(x, w, Some(b), STAGE)?;
        x = tape.relu(x);
    }
    let x = tape.conv(x, p.var(&format!("{prefix}.out.w")), Some(p.var(&format!("{prefix}.out.b"))), ConvGeom::square(1, 1, 0))?;
    Ok(tape.relu(x))
}

/// Runs the encoder outside training on a planar `[3, H, W]` image.
pub fn encode_image(params: &ParamStore<f32>, prefix: &str, planar: &[f32], height: usize, width: usize) -> Result<FeatureMap2D> {
    let mut tape = Tape::<f32>::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(Tensor::new(vec![3, height, width], planar.to_vec())?);
    let y = encode_2d(&mut tape, &bound, prefix, x)?;
    let t = tape.value(y);
    FeatureMap2D::new(t.shape[0], t.shape[1], t.shape[2], t.data.clone(), (height, width))
}

/// Pixel of the source image sampled for feature cell `(i, j)`.
#[inline]
pub fn cell_center_pixel(i: usize, j: usize, downscale: usize) -> (usize, usize) {
    (j * downscale + downscale / 2, i * downscale + downscale / 2)
}

/// Voxel hit by each feature cell (row-major over `h × w`), if any.
///
/// Cells whose sampled depth is invalid or whose surface point leaves the
/// grid map to `None`.
pub fn backprojection_targets(
    depth: &[f32],
    source: (usize, usize),
    fmap_hw: (usize, usize),
    intrinsics: &Intrinsics,
    pose: &Pose,
    meta: &GridMeta,
) -> Result<Vec<Option<usize>>> {
    let (sh, sw) = source;
    let (h, w) = fmap_hw;
    if depth.len() != sh * sw {
        return Err(Error::shape(format!("depth has {} pixels, expected {sh}×{sw}", depth.len())));
    }
    if h == 0 || w == 0 || sh % h != 0 || sw % w != 0 || sh / h != sw / w {
        return Err(Error::shape(format!("feature map {h}×{w} does not evenly divide image {sh}×{sw}")));
    }
    if !pose.is_rigid(1e-6) {
        return Err(Error::Invalid("pose rotation is not orthonormal".into()));
    }
    let ds = sh / h;
    let mut out = vec![None; h * w];
    for i in 0..h {
        for j in 0..w {
            let (u, v) = cell_center_pixel(i, j, ds);
            let d = depth[v * sw + u];
            if !(d > 0.0) || !d.is_finite() {
                continue;
            }
            let cam = intrinsics.unproject(u as f64, v as f64, d as f64);
            let world = pose.cam_to_world(cam);
            if let Some(vox) = meta.voxel_at(meta.world_to_voxel(world)) {
                out[i * w + j] = Some(meta.index(vox));
            }
        }
    }
    Ok(out)
}

/// Scatter of a `[C, h, w]` feature node into a `[C, X, Y, Z]` volume.
/// Colliding cells resolve by per-channel max (first cell on ties).
pub fn backproject_var<T: Real>(tape: &mut Tape<T>, fmap: Var, targets: &[Option<usize>], meta: &GridMeta) -> Result<Var> {
    let s = tape.shape(fmap).to_vec();
    let [c, h, w] = s[..] else {
        return Err(Error::shape(format!("feature map node {s:?}")));
    };
    if targets.len() != h * w {
        return Err(Error::shape(format!("{} targets for a {h}×{w} map", targets.len())));
    }
    let n = meta.num_voxels();
    let hw = h * w;
    let vals = &tape.value(fmap).data;
    let mut src = vec![NO_SOURCE; c * n];
    for (cell, t) in targets.iter().enumerate() {
        let Some(vi) = *t else { continue };
        for ch in 0..c {
            let cand = ch * hw + cell;
            let slot = &mut src[ch * n + vi];
            if *slot == NO_SOURCE || vals[cand] > vals[*slot as usize] {
                *slot = cand as u32;
            }
        }
    }
    let [x, y, z] = meta.dims;
    tape.select(fmap, src, &[c, x, y, z])
}

/// Element-wise max over same-shaped volume nodes; the first maximal view wins ties.
pub fn view_pool_var<T: Real>(tape: &mut Tape<T>, volumes: &[Var]) -> Result<Var> {
    let first = *volumes.first().ok_or(Error::NoViews)?;
    let shape = tape.shape(first).to_vec();
    for &v in &volumes[1..] {
        if tape.shape(v) != shape {
            return Err(Error::MetaMismatch(format!("view volume {:?} vs {:?}", tape.shape(v), shape)));
        }
    }
    if volumes.len() == 1 {
        return Ok(first);
    }
    let m: usize = shape.iter().product();
    let stacked = tape.concat(volumes)?;
    let vals = &tape.value(stacked).data;
    let src: Vec<u32> = (0..m)
        .map(|i| {
            let mut best = i;
            for k in 1..volumes.len() {
                if vals[k * m + i] > vals[best] {
                    best = k * m + i;
                }
            }
            best as u32
        })
        .collect();
    tape.select(stacked, src, &shape)
}

/// Back-projects one view's feature map into a volume over `meta`.
pub fn backproject(fmap: &FeatureMap2D, depth: &[f32], intrinsics: &Intrinsics, pose: &Pose, meta: &GridMeta) -> Result<FeatureVolume> {
    let targets = backprojection_targets(depth, fmap.source, (fmap.height, fmap.width), intrinsics, pose, meta)?;
    let n = meta.num_voxels();
    let hw = fmap.height * fmap.width;
    let mut data = vec![0.0f32; fmap.channels * n];
    let mut written = vec![false; n];
    for (cell, t) in targets.iter().enumerate() {
        let Some(vi) = *t else { continue };
        for c in 0..fmap.channels {
            let x = fmap.data[c * hw + cell];
            let slot = &mut data[c * n + vi];
            if !written[vi] || x > *slot {
                *slot = x;
            }
        }
        written[vi] = true;
    }
    FeatureVolume::from_data(*meta, fmap.channels, data)
}

/// Element-wise max across views.
pub fn view_pool(volumes: &[FeatureVolume]) -> Result<FeatureVolume> {
    let (first, rest) = volumes.split_first().ok_or(Error::NoViews)?;
    let mut out = first.clone();
    for v in rest {
        if v.meta != first.meta || v.channels != first.channels {
            return Err(Error::MetaMismatch(format!(
                "{} channels over {:?} vs {} channels over {:?}",
                v.channels, v.meta.dims, first.channels, first.meta.dims
            )));
        }
        for (o, &x) in out.data.iter_mut().zip(&v.data) {
            if x > *o {
                *o = x;
            }
        }
    }
    Ok(out)
}
