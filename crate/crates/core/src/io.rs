//! On-disk formats: VGRD grids, PFM/PPM frames, scene folders, ASCII PLY and run manifests.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::eval::{read_records, write_records, Detection, Record};
use crate::grid::{Box3, FeatureVolume, GridMeta, InstanceAnnotation, TsdfGrid};
use crate::pipeline::SceneData;
use crate::synth::{CameraView, SceneSpec};

pub const GRID_MAGIC: [u8; 4] = *b"VGRD";
pub const GRID_VERSION: u32 = 1;
const KIND_TSDF: u32 = 0;
const KIND_FEATURE: u32 = 1;

/// Either kind of grid a VGRD file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Grid {
    /// Stored with two channels: signed distance, then weight.
    Tsdf(TsdfGrid),
    Feature(FeatureVolume),
}

impl Grid {
    pub fn meta(&self) -> &GridMeta {
        match self {
            Grid::Tsdf(g) => &g.meta,
            Grid::Feature(f) => &f.meta,
        }
    }
}

pub fn write_grid<W: Write>(w: &mut W, grid: &Grid) -> Result<()> {
    let (kind, meta, channels) = match grid {
        Grid::Tsdf(g) => (KIND_TSDF, g.meta, 2),
        Grid::Feature(f) => (KIND_FEATURE, f.meta, f.channels),
    };
    let mut head = Vec::with_capacity(52);
    head.extend_from_slice(&GRID_MAGIC);
    for v in [GRID_VERSION, kind, meta.dims[0] as u32, meta.dims[1] as u32, meta.dims[2] as u32, channels as u32] {
        head.extend_from_slice(&v.to_le_bytes());
    }
    head.extend_from_slice(&meta.voxel_size.to_le_bytes());
    for o in meta.origin {
        head.extend_from_slice(&o.to_le_bytes());
    }
    if let Grid::Tsdf(g) = grid {
        head.extend_from_slice(&g.truncation.to_le_bytes());
    }
    w.write_all(&head)?;
    let payload: Box<dyn Iterator<Item = &f32>> = match grid {
        Grid::Tsdf(g) => Box::new(g.values.iter().chain(&g.weights)),
        Grid::Feature(f) => Box::new(f.data.iter()),
    };
    let mut buf = Vec::with_capacity(4 * meta.num_voxels() * channels);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TruncatedFile(what.to_string()),
        _ => Error::Io(e),
    })?;
    Ok(b)
}

fn u32_at<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take::<4, _>(r, what)?))
}

fn f32_at<R: Read>(r: &mut R, what: &str) -> Result<f32> {
    Ok(f32::from_le_bytes(take::<4, _>(r, what)?))
}

pub fn read_grid<R: Read>(r: &mut R) -> Result<Grid> {
    let magic = take::<4, _>(r, "grid magic")?;
    if magic != GRID_MAGIC {
        return Err(Error::BadMagic {
            expected: GRID_MAGIC,
            found: magic,
        });
    }
    let version = u32_at(r, "grid version")?;
    if version != GRID_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let kind = u32_at(r, "grid kind")?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32_at(r, "grid dims")? as usize;
    }
    let channels = u32_at(r, "grid channels")? as usize;
    let voxel_size = f32_at(r, "voxel size")?;
    let mut origin = [0f32; 3];
    for o in &mut origin {
        *o = f32_at(r, "grid origin")?;
    }
    let truncation = if kind == KIND_TSDF { Some(f32_at(r, "truncation")?) } else { None };
    let meta = GridMeta::new(dims, voxel_size, origin)?;
    let n = meta.num_voxels();
    let total = n.checked_mul(channels).and_then(|c| c.checked_mul(4)).ok_or_else(|| Error::Format("grid too large".into()))?;
    let mut bytes = Vec::new();
    r.take(total as u64).read_to_end(&mut bytes)?;
    if bytes.len() < total {
        return Err(Error::TruncatedFile(format!("grid payload: {} of {total} bytes", bytes.len())));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    match (kind, truncation) {
        (KIND_TSDF, Some(t)) => {
            if channels != 2 {
                return Err(Error::Format(format!("tsdf grid with {channels} channels")));
            }
            let (values, weights) = data.split_at(n);
            Ok(Grid::Tsdf(TsdfGrid::from_parts(meta, t, values.to_vec(), weights.to_vec())?))
        }
        (KIND_FEATURE, None) => Ok(Grid::Feature(FeatureVolume::from_data(meta, channels, data)?)),
        _ => Err(Error::Format(format!("unknown grid kind {kind}"))),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io_at(path, e))?))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(source) => Error::io_at(path, source),
        e => e,
    })
}

/// Writes `bytes` to `path`, creating parent folders.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    with_path(path, w.write_all(bytes).and_then(|_| w.flush()).map_err(Error::from))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io_at(path, e))
}

pub fn save_grid(path: &Path, grid: &Grid) -> Result<()> {
    let mut buf = Vec::new();
    write_grid(&mut buf, grid)?;
    write_file(path, &buf)
}

pub fn load_grid(path: &Path) -> Result<Grid> {
    read_grid(&mut read_file(path)?.as_slice())
}

pub fn load_tsdf(path: &Path) -> Result<TsdfGrid> {
    match load_grid(path)? {
        Grid::Tsdf(g) => Ok(g),
        Grid::Feature(_) => Err(Error::Format(format!("{} holds a feature grid, not a TSDF", path.display()))),
    }
}

/// Grayscale PFM, little-endian, rows stored bottom to top.
pub fn write_pfm(width: usize, height: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::shape(format!("pfm {width}×{height} with {} values", data.len())));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &data[row * width..(row + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits a netpbm-style header of `fields` whitespace-separated tokens.
fn header_tokens(bytes: &[u8], fields: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::TruncatedFile("image header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the payload.
    Ok((tokens, i + 1))
}

fn parse_dim(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad image dimension {s:?}")))
}

pub fn read_pfm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let (t, at) = header_tokens(bytes, 4)?;
    if t[0] != "Pf" {
        return Err(Error::Format(format!("not a grayscale PFM: {:?}", t[0])));
    }
    let (w, h) = (parse_dim(&t[1])?, parse_dim(&t[2])?);
    let scale: f32 = t[3].parse().map_err(|_| Error::Format(format!("bad PFM scale {:?}", t[3])))?;
    let body = bytes.get(at..).unwrap_or(&[]);
    if body.len() < 4 * w * h {
        return Err(Error::TruncatedFile("pfm payload".into()));
    }
    let word = |c: &[u8]| {
        let b = [c[0], c[1], c[2], c[3]];
        if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let mut data = vec![0.0; w * h];
    for (r, row) in body[..4 * w * h].chunks_exact(4 * w).enumerate() {
        let dst = h - 1 - r;
        for (x, c) in row.chunks_exact(4).enumerate() {
            data[dst * w + x] = word(c);
        }
    }
    Ok((w, h, data))
}

pub fn write_ppm(width: usize, height: usize, pixels: &[[u8; 3]]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!("ppm {width}×{height} with {} pixels", pixels.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().flatten());
    Ok(out)
}

pub fn read_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let (t, at) = header_tokens(bytes, 4)?;
    if t[0] != "P6" || t[3] != "255" {
        return Err(Error::Format("only 8-bit binary PPM is supported".into()));
    }
    let (w, h) = (parse_dim(&t[1])?, parse_dim(&t[2])?);
    let body = bytes.get(at..).unwrap_or(&[]);
    if body.len() < 3 * w * h {
        return Err(Error::TruncatedFile("ppm payload".into()));
    }
    Ok((w, h, body[..3 * w * h].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ViewHeader {
    intrinsics: Intrinsics,
    pose: Pose,
    width: usize,
    height: usize,
}

/// Writes views as `view_NN.json` (camera), `view_NN_depth.pfm`,
/// `view_NN_color.ppm` and, when present, `view_NN_instance.pfm`.
pub fn save_views(dir: &Path, views: &[CameraView]) -> Result<()> {
    for (i, v) in views.iter().enumerate() {
        let stem = dir.join(format!("view_{i:02}"));
        let head = ViewHeader {
            intrinsics: v.intrinsics,
            pose: v.pose,
            width: v.width,
            height: v.height,
        };
        write_file(&stem.with_extension("json"), serde_json::to_string_pretty(&head)?.as_bytes())?;
        write_file(&suffixed(&stem, "_depth.pfm"), &write_pfm(v.width, v.height, &v.depth)?)?;
        write_file(&suffixed(&stem, "_color.ppm"), &write_ppm(v.width, v.height, &v.color)?)?;
        if !v.instance.is_empty() {
            let ids: Vec<f32> = v.instance.iter().map(|&k| k as f32).collect();
            write_file(&suffixed(&stem, "_instance.pfm"), &write_pfm(v.width, v.height, &ids)?)?;
        }
    }
    Ok(())
}

fn suffixed(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn load_views(dir: &Path) -> Result<Vec<CameraView>> {
    let mut out = Vec::new();
    for i in 0.. {
        let stem = dir.join(format!("view_{i:02}"));
        let json = stem.with_extension("json");
        if !json.exists() {
            break;
        }
        let head: ViewHeader = with_path(&json, serde_json::from_slice(&read_file(&json)?).map_err(Error::from))?;
        let depth_path = suffixed(&stem, "_depth.pfm");
        let (w, h, depth) = with_path(&depth_path, read_pfm(&read_file(&depth_path)?))?;
        let color_path = suffixed(&stem, "_color.ppm");
        let (cw, ch, color) = with_path(&color_path, read_ppm(&read_file(&color_path)?))?;
        if (w, h) != (head.width, head.height) || (cw, ch) != (w, h) {
            return Err(Error::Format(format!("view {i}: image sizes disagree with the camera file")));
        }
        let inst_path = suffixed(&stem, "_instance.pfm");
        let instance = if inst_path.exists() {
            read_pfm(&read_file(&inst_path)?)?.2.into_iter().map(|v| v as i32).collect()
        } else {
            Vec::new()
        };
        let view = CameraView {
            intrinsics: head.intrinsics,
            pose: head.pose,
            width: w,
            height: h,
            depth,
            color,
            instance,
        };
        view.validate()?;
        out.push(view);
    }
    if out.is_empty() {
        return Err(Error::NoViews);
    }
    Ok(out)
}

pub const SCENE_FILE: &str = "scene.json";
pub const TSDF_FILE: &str = "tsdf.vgrd";
pub const GT_FILE: &str = "gt.txt";
const VIEWS_DIR: &str = "views";

/// Scene folders under `root`, sorted by name: every subfolder holding a scene file.
pub fn scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for e in fs::read_dir(root).map_err(|e| Error::io_at(root, e))? {
        let p = e.map_err(|e| Error::io_at(root, e))?.path();
        if p.join(SCENE_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InsufficientData(format!("no scene folders under {}", root.display())));
    }
    Ok(dirs)
}

/// Scene id used in record files: the folder name.
pub fn scene_id(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes the synthesized layout and its captured views.
pub fn save_scan(dir: &Path, spec: &SceneSpec, views: &[CameraView]) -> Result<()> {
    write_file(&dir.join(SCENE_FILE), serde_json::to_string_pretty(spec)?.as_bytes())?;
    save_views(&dir.join(VIEWS_DIR), views)
}

pub fn load_scan(dir: &Path) -> Result<(SceneSpec, Vec<CameraView>)> {
    let path = dir.join(SCENE_FILE);
    let spec: SceneSpec = with_path(&path, serde_json::from_slice(&read_file(&path)?).map_err(Error::from))?;
    spec.validate()?;
    Ok((spec, load_views(&dir.join(VIEWS_DIR))?))
}

/// Writes the fused grid and its ground-truth instances.
pub fn save_fused(dir: &Path, tsdf: &TsdfGrid, annotations: &[InstanceAnnotation]) -> Result<()> {
    save_grid(&dir.join(TSDF_FILE), &Grid::Tsdf(tsdf.clone()))?;
    let id = scene_id(dir);
    let recs: Vec<Record> = annotations
        .iter()
        .map(|a| Record {
            scene: id.clone(),
            detection: Detection::from(a),
        })
        .collect();
    write_file(&dir.join(GT_FILE), write_records(&recs).as_bytes())
}

pub fn load_annotations(path: &Path) -> Result<Vec<InstanceAnnotation>> {
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    with_path(path, read_records(&text))?
        .into_iter()
        .map(|r| {
            let d = r.detection;
            InstanceAnnotation::new(d.bbox, d.class_id, d.mask.unwrap_or_default())
        })
        .collect()
}

/// A scene folder after both synthesis and fusion.
pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let (spec, views) = load_scan(dir)?;
    let tsdf = load_tsdf(&dir.join(TSDF_FILE))?;
    let annotations = load_annotations(&dir.join(GT_FILE))?;
    Ok(SceneData {
        spec,
        views,
        tsdf,
        annotations,
    })
}

/// Distinct, well-separated color for instance `i`.
pub fn instance_color(i: usize) -> [u8; 3] {
    let h = (i as f64 * 0.618_033_988_75).fract() * 6.0;
    let f = h.fract();
    let (v, p, q, t) = (1.0, 0.25, 1.0 - 0.75 * f, 0.25 + 0.75 * f);
    let rgb = match h as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|c| (c * 255.0).round() as u8)
}

fn ply_header(out: &mut String, vertices: usize, vertex_color: bool, elements: &[(&str, usize, &str)]) {
    out.push_str("ply\nformat ascii 1.0\ncomment sis3d export\n");
    let _ = writeln!(out, "element vertex {vertices}");
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if vertex_color {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    for (name, n, props) in elements {
        let _ = writeln!(out, "element {name} {n}");
        out.push_str(props);
    }
    out.push_str("end_header\n");
}

const BOX_EDGES: [(usize, usize); 12] = [(0, 1), (1, 3), (3, 2), (2, 0), (4, 5), (5, 7), (7, 6), (6, 4), (0, 4), (1, 5), (2, 6), (3, 7)];

fn corners(b: &Box3) -> [[f64; 3]; 8] {
    let (lo, hi) = (b.min(), b.max());
    std::array::from_fn(|i| [if i & 4 != 0 { hi[0] } else { lo[0] }, if i & 2 != 0 { hi[1] } else { lo[1] }, if i & 1 != 0 { hi[2] } else { lo[2] }])
}

/// Box wireframes in world space: 8 vertices and 12 colored edges per box.
pub fn boxes_ply(boxes: &[Box3], meta: &GridMeta) -> String {
    let mut out = String::new();
    let edge_props = "property int vertex1\nproperty int vertex2\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n";
    ply_header(&mut out, 8 * boxes.len(), false, &[("edge", 12 * boxes.len(), edge_props)]);
    for b in boxes {
        for c in corners(b) {
            let p = meta.voxel_to_world(c);
            let _ = writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
        }
    }
    for (i, _) in boxes.iter().enumerate() {
        let [r, g, bl] = instance_color(i);
        for (a, b) in BOX_EDGES {
            let _ = writeln!(out, "{} {} {r} {g} {bl}", 8 * i + a, 8 * i + b);
        }
    }
    out
}

/// Mask voxels as a colored point cloud of voxel centers.
pub fn masks_ply(masks: &[&[[usize; 3]]], meta: &GridMeta) -> String {
    let n: usize = masks.iter().map(|m| m.len()).sum();
    let mut out = String::new();
    ply_header(&mut out, n, true, &[]);
    for (i, m) in masks.iter().enumerate() {
        let [r, g, b] = instance_color(i);
        for &v in *m {
            let p = meta.voxel_center_world(v);
            let _ = writeln!(out, "{} {} {} {r} {g} {b}", p[0] as f32, p[1] as f32, p[2] as f32);
        }
    }
    out
}

pub fn detections_ply(dets: &[Detection], meta: &GridMeta) -> (String, String) {
    let boxes: Vec<Box3> = dets.iter().map(|d| d.bbox).collect();
    let masks: Vec<&[[usize; 3]]> = dets.iter().map(|d| d.mask.as_deref().unwrap_or(&[])).collect();
    (boxes_ply(&boxes, meta), masks_ply(&masks, meta))
}

/// Faces between observed neighbors whose signed distances change sign.
pub fn surface_faces(tsdf: &TsdfGrid) -> Vec<([usize; 3], usize)> {
    let d = tsdf.meta.dims;
    let mut faces = Vec::new();
    for v in tsdf.meta.full_region().iter() {
        if tsdf.weight(v) <= 0.0 {
            continue;
        }
        for axis in 0..3 {
            if v[axis] + 1 >= d[axis] {
                continue;
            }
            let mut n = v;
            n[axis] += 1;
            if tsdf.weight(n) > 0.0 && (tsdf.value(v) < 0.0) != (tsdf.value(n) < 0.0) {
                faces.push((v, axis));
            }
        }
    }
    faces
}

/// Blocky zero-crossing surface as one quad per sign-changing voxel face.
pub fn tsdf_ply(tsdf: &TsdfGrid) -> String {
    let faces = surface_faces(tsdf);
    let mut out = String::new();
    ply_header(&mut out, 4 * faces.len(), false, &[("face", faces.len(), "property list uchar int vertex_indices\n")]);
    for &(v, axis) in &faces {
        // The shared face sits half a voxel past the center of `v`.
        let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
        for (du, dw) in [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)] {
            let mut c = v.map(|x| x as f64 + 0.5);
            c[axis] += 0.5;
            c[u] += du;
            c[w] += dw;
            let p = tsdf.meta.voxel_to_world(c);
            let _ = writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
        }
    }
    for i in 0..faces.len() {
        let _ = writeln!(out, "4 {} {} {} {}", 4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3);
    }
    out
}

/// Record of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Wall-clock seconds per stage; omitted from the file in deterministic mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timings: Vec<(String, f64)>,
}

/// Hex SHA-256 of a config's canonical JSON.
pub fn config_hash<C: Serialize>(cfg: &C) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, cfg: &C, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_hash: config_hash(cfg)?,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}
