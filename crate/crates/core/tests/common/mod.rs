#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sis3d::camera::{Intrinsics, Pose};
use sis3d::eval::{mean_average_precision, Detection, IouKind};
use sis3d::grid::{box_iou, Box3, FeatureVolume, IntRegion};
use sis3d::model::receptive_fields;
use sis3d::pipeline::{backbone_features, color_volume, synthesize, NetInput, PipelineConfig};
use sis3d::model::init_model;

/// Ranked hit pattern, ground-truth count and the AP worked out by hand from
/// the precision envelope.
pub const CRAFTED_AP: [(&str, usize, f64); 20] = [
    ("T", 1, 1.0),
    ("FT", 1, 0.5),
    ("TF", 1, 1.0),
    ("TT", 2, 1.0),
    ("TFT", 2, 5.0 / 6.0),
    ("FTT", 2, 2.0 / 3.0),
    ("T", 2, 0.5),
    ("", 1, 0.0),
    ("FF", 1, 0.0),
    ("TFFT", 2, 0.75),
    ("FTFT", 3, 1.0 / 3.0),
    ("TTFT", 4, 0.6875),
    ("FFT", 1, 1.0 / 3.0),
    ("TFTFT", 3, 34.0 / 45.0),
    ("FTTT", 3, 0.75),
    ("TTT", 5, 0.6),
    ("FTFFT", 2, 0.45),
    ("TFFFFFFFFT", 2, 0.6),
    ("FTTFFT", 4, 11.0 / 24.0),
    ("TFTTFT", 4, 19.0 / 24.0),
];

pub fn cube(at: f64) -> Box3 {
    Box3::from_min_max([at, 0.0, 0.0], [at + 2.0, 2.0, 2.0])
}

/// Builds a one-scene, one-class case: true positives copy the next
/// unmatched ground truth, false positives sit far from all of them.
pub fn crafted_case(pattern: &str, num_gt: usize) -> (Vec<Detection>, Vec<Detection>) {
    let gts: Vec<Detection> = (0..num_gt)
        .map(|i| Detection {
            bbox: cube(10.0 * i as f64),
            class_id: 0,
            score: 1.0,
            mask: None,
        })
        .collect();
    let n = pattern.len();
    let mut next_gt = 0;
    let preds = pattern
        .chars()
        .enumerate()
        .map(|(rank, c)| {
            let bbox = if c == 'T' {
                next_gt += 1;
                gts[next_gt - 1].bbox
            } else {
                cube(1000.0 + 10.0 * rank as f64)
            };
            Detection {
                bbox,
                class_id: 0,
                score: (n - rank) as f64 / (n + 1) as f64,
                mask: None,
            }
        })
        .collect();
    (preds, gts)
}

/// Largest deviation from the hand-computed AP over all crafted cases.
pub fn crafted_ap_max_error() -> f64 {
    CRAFTED_AP
        .iter()
        .map(|&(p, n, want)| {
            let (preds, gts) = crafted_case(p, n);
            let r = mean_average_precision(&[preds], &[gts], &[0.5], 1, IouKind::Box, true);
            (r.map[0] - want).abs()
        })
        .fold(0.0, f64::max)
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> Box3 {
    let size = [rng.gen_range(0.5..8.0), rng.gen_range(0.5..8.0), rng.gen_range(0.5..8.0)];
    let center = [rng.gen_range(0.0..extent), rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)];
    Box3::new(center, size)
}

/// Brute-force greedy suppression: repeatedly take the best remaining box.
pub fn nms_oracle(boxes: &[Box3], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&j| j != best && box_iou(&boxes[best], &boxes[j]) <= thr);
    }
    keep
}

/// Brute-force bin scan: for each bin, test every region cell against
/// `⌊b·n/4⌋ ≤ c < ⌊(b+1)·n/4⌋` (valid for n ≥ 4).
pub fn roi_oracle(vol: &FeatureVolume, lo: [usize; 3], n: [usize; 3]) -> Vec<f32> {
    let member = |b: usize, c: usize, n: usize| b * n / 4 <= c && c < (b + 1) * n / 4;
    let mut out = Vec::with_capacity(64);
    for bx in 0..4 {
        for by in 0..4 {
            for bz in 0..4 {
                let mut m = f32::NEG_INFINITY;
                for x in 0..n[0] {
                    for y in 0..n[1] {
                        for z in 0..n[2] {
                            if member(bx, x, n[0]) && member(by, y, n[1]) && member(bz, z, n[2]) {
                                m = m.max(vol.get(0, [lo[0] + x, lo[1] + y, lo[2] + z]));
                            }
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let eye = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(1.0..4.0)];
    let target = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5)];
    Pose::look_at(eye, target).unwrap()
}

/// Independent unprojection through the homogeneous 4×4 matrix.
pub fn unproject_matrix(k: &Intrinsics, pose: &Pose, u: f64, v: f64, d: f64) -> [f64; 3] {
    let cam = [(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d, 1.0];
    let m = pose.to_matrix();
    std::array::from_fn(|i| (0..4).map(|j| m[i][j] * cam[j]).sum())
}

/// Backbone features of a chunk equal the full-scene features away from chunk borders.
pub fn check_chunk_consistency(cfg: &PipelineConfig, seed: u64) -> (usize, f32) {
    let mut scene = cfg.scene.clone();
    scene.room_voxels = [96, 80, 16];
    scene.max_objects = 6;
    let s = synthesize(&scene, &cfg.trajectory, cfg.truncation, seed).unwrap();
    let params = init_model(&cfg.model, seed).unwrap();
    let full = NetInput::new(&s.tsdf, &s.views, cfg.model.use_color).unwrap();
    let fc = cfg.model.use_color.then(|| color_volume(&params, &full).unwrap());
    let ff = backbone_features(&params, &cfg.model, &full.tsdf, fc.as_deref(), s.tsdf.meta.dims).unwrap();
    let rf = receptive_fields(&cfg.model);
    let (mut compared, mut worst) = (0, 0.0f32);
    for off in [[0usize, 0, 0], [16, 8, 0], [32, 16, 0]] {
        let dims = [64, 64, 16];
        let region = IntRegion::new(off.map(|o| o as i64), std::array::from_fn(|a| (off[a] + dims[a]) as i64));
        let chunk = s.tsdf.crop_region(region).unwrap();
        let inp = NetInput::new(&chunk, &s.views, cfg.model.use_color).unwrap();
        let cc = cfg.model.use_color.then(|| color_volume(&params, &inp).unwrap());
        let cf = backbone_features(&params, &cfg.model, &inp.tsdf, cc.as_deref(), dims).unwrap();
        for (t, (a, b)) in cf.iter().zip(&ff).enumerate() {
            let (c, [cx, cy, cz]) = (a.shape[0], [a.shape[1], a.shape[2], a.shape[3]]);
            let [_, fx, fy, fz] = b.shape[..] else { unreachable!() };
            assert_eq!(cz, fz);
            for x in 0..cx {
                for y in 0..cy {
                    let inside = |i: usize, n: usize| {
                        let (lo, hi) = rf[t].span(i);
                        lo >= 0 && hi <= n as i64
                    };
                    if !inside(x, dims[0]) || !inside(y, dims[1]) {
                        continue;
                    }
                    let (gx, gy) = (x + off[0] / 4, y + off[1] / 4);
                    for ch in 0..c {
                        for z in 0..cz {
                            let va = a.data[((ch * cx + x) * cy + y) * cz + z];
                            let vb = b.data[((ch * fx + gx) * fy + gy) * fz + z];
                            worst = worst.max((va - vb).abs());
                            compared += 1;
                        }
                    }
                }
            }
        }
    }
    (compared, worst)
}

