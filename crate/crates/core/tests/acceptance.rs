//! Acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! Criteria 7 and 8 train real models and take tens of minutes on one core.
//! Set `SIS_ACCEPT_ONLY=1,2,9` to run a subset.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sis3d::backproject::{backproject, backproject_var, backprojection_targets, cell_center_pixel, view_pool, view_pool_var, FeatureMap2D};
use sis3d::camera::{Intrinsics, Pose};
use sis3d::detect::{
    classify_head, decode_box, encode_box, init_classifier, init_rpn, nms, roi_pool, roi_pool_var, rpn_forward, ClassifierDims, RpnDims,
};
use sis3d::grid::{box_iou, Box3, FeatureVolume, GridMeta, IntRegion, TsdfGrid, VOXEL_SIZE_M};
use sis3d::io::{read_grid, save_fused, save_scan, write_grid, Grid};
use sis3d::mask::{init_mask_head, mask_backbone, mask_class_logits, select_class_region, MaskDims};
use sis3d::model::init_model;
use sis3d::nn::{grad_check, read_checkpoint, write_checkpoint, Bound, ConvGeom, ParamStore, Tape, Tensor, Var};
use sis3d::pipeline::{build_dataset, evaluate, prepare, synthesize_scenes, timed, train, PipelineConfig, TrainState};
use sis3d::synth::{fuse_tsdf, generate_scene, scan_scene, CameraView, SceneConfig, TrajectoryConfig};
use sis3d::Result;

mod common;
use common::{check_chunk_consistency, crafted_ap_max_error, nms_oracle, random_box, random_pose, roi_oracle, unproject_matrix};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SIS_ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, f64, fn() -> Outcome); 9] = [
        (1, "gradient integrity", 120.0, gradients),
        (2, "box parameterization roundtrip", 1.0, box_roundtrip),
        (3, "detection primitives vs oracles", 60.0, detection_oracles),
        (4, "fusion correctness", 30.0, fusion),
        (5, "back-projection geometry", 30.0, backprojection),
        (6, "chunk consistency", 120.0, chunk_consistency),
        (7, "end-to-end detection and masks", 1800.0, end_to_end),
        (8, "color ablation ordering", 2700.0, color_ablation),
        (9, "persistence roundtrips", 10.0, persistence),
    ];
    let mut failed = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let secs = start.elapsed().as_secs_f64();
        let pass = out.pass && secs <= budget;
        failed += usize::from(!pass);
        println!(
            "criterion {id} ({name}): {} {} [{secs:.1} s of {budget:.0} s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- criterion 1

const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const TRIALS_PER_KIND: usize = 110;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values spaced well apart so no max-selection flips under a 1e-5 nudge.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::new(shape.to_vec(), order.iter().map(|&i| i as f64 * 0.013 - 0.5).collect()).unwrap()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.2..1.5)).collect()
}

/// Head parameters as f64 inputs, with small random biases.
fn store_inputs(store: &ParamStore<f32>, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Tensor<f64>>) {
    let names = store.iter().map(|(n, _)| n.to_string()).collect();
    let tensors = store
        .iter()
        .map(|(_, t)| {
            let mut t = t.cast::<f64>();
            if t.shape.len() == 1 {
                t.data.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
            }
            t
        })
        .collect();
    (names, tensors)
}

fn huber_all(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let n = tape.value(y).len();
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let w = weights(rng, n);
    tape.huber(y, &target, &w, rng.gen_range(0.2..2.0))
}

/// An input extent that the window tiles exactly, with 1 to 3 outputs.
fn tiling_extent(rng: &mut ChaCha8Rng, k: usize, s: usize, p: usize) -> usize {
    let lo = if k > 2 * p { 1 } else { 2 };
    let out = rng.gen_range(lo..4);
    (out - 1) * s + k - 2 * p
}

type Trial = (Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>, Vec<Tensor<f64>>);

fn conv_trial(rng: &mut ChaCha8Rng, three_d: bool) -> Trial {
    let (ci, co) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let k = [1, 2, 3][rng.gen_range(0..3)];
    let s = rng.gen_range(1..3);
    let p = rng.gen_range(0..2).min(k - 1);
    let (n0, n1) = (tiling_extent(rng, k, s, p), tiling_extent(rng, k, s, p));
    let (geom, x_shape, w_shape) = if three_d {
        let n2 = tiling_extent(rng, k, s, p);
        (ConvGeom::cube(k, s, p), vec![ci, n0, n1, n2], vec![co, ci, k, k, k])
    } else {
        (ConvGeom::square(k, s, p), vec![ci, n0, n1], vec![co, ci, k, k])
    };
    let inputs = vec![rand_tensor(rng, &x_shape, -1.0, 1.0), rand_tensor(rng, &w_shape, -0.5, 0.5), rand_tensor(rng, &[co], -0.1, 0.1)];
    let loss_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let relu = rng.gen_bool(0.5);
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let mut y = tape.conv(v[0], v[1], Some(v[2]), geom)?;
        if relu {
            y = tape.relu(y);
        }
        huber_all(tape, y, &mut loss_rng.clone())
    };
    (Box::new(f), inputs)
}

fn maxpool_trial(rng: &mut ChaCha8Rng) -> Trial {
    let k = rng.gen_range(2..4);
    let s = rng.gen_range(1..3);
    let p = rng.gen_range(0..2);
    let geom = ConvGeom::cube(k, s, p);
    let shape = [rng.gen_range(1..3), tiling_extent(rng, k, s, p), tiling_extent(rng, k, s, p), tiling_extent(rng, k, s, p)];
    let inputs = vec![distinct_tensor(rng, &shape)];
    let loss_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let y = tape.max_pool(v[0], geom)?;
        huber_all(tape, y, &mut loss_rng.clone())
    };
    (Box::new(f), inputs)
}

fn fc_trial(rng: &mut ChaCha8Rng) -> Trial {
    let (b, i, h, k) = (rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..6), rng.gen_range(2..5));
    let inputs = vec![
        rand_tensor(rng, &[b, i], -1.0, 1.0),
        rand_tensor(rng, &[h, i], -0.8, 0.8),
        rand_tensor(rng, &[h], -0.1, 0.1),
        rand_tensor(rng, &[k, h], -0.8, 0.8),
        rand_tensor(rng, &[k], -0.1, 0.1),
    ];
    let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
    let w = weights(rng, b);
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let hidden = tape.linear(v[0], v[1], Some(v[2]))?;
        let hidden = tape.relu(hidden);
        let logits = tape.linear(hidden, v[3], Some(v[4]))?;
        tape.softmax_cross_entropy(logits, &targets, &w)
    };
    (Box::new(f), inputs)
}

fn backproject_trial(rng: &mut ChaCha8Rng) -> Trial {
    let meta = GridMeta::new([4, 4, 6], 0.5, [-1.0, -1.0, 0.0]).unwrap();
    let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let (sh, sw) = (8 * h, 8 * w);
    let c = rng.gen_range(1..3);
    let k = Intrinsics::new(rng.gen_range(4.0..8.0), rng.gen_range(4.0..8.0), sw as f64 / 2.0, sh as f64 / 2.0).unwrap();
    let n_views = rng.gen_range(1..4);
    let mut all_targets = Vec::new();
    let mut inputs = Vec::new();
    for _ in 0..n_views {
        let depth: Vec<f32> = (0..sh * sw).map(|_| rng.gen_range(0.5..2.9)).collect();
        all_targets.push(backprojection_targets(&depth, (sh, sw), (h, w), &k, &Pose::identity(), &meta).unwrap());
        inputs.push(rand_tensor(rng, &[c, h, w], -1.0, 1.0));
    }
    let loss_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let vols = v
            .iter()
            .zip(&all_targets)
            .map(|(&fm, t)| backproject_var(tape, fm, t, &meta))
            .collect::<Result<Vec<_>>>()?;
        let pooled = view_pool_var(tape, &vols)?;
        huber_all(tape, pooled, &mut loss_rng.clone())
    };
    (Box::new(f), inputs)
}

fn roi_trial(rng: &mut ChaCha8Rng) -> Trial {
    let dims = [rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(2..6)];
    let c = rng.gen_range(1..3);
    let inputs = vec![distinct_tensor(rng, &[c, dims[0], dims[1], dims[2]])];
    let lo: [i64; 3] = std::array::from_fn(|a| rng.gen_range(0..dims[a] as i64));
    let hi: [i64; 3] = std::array::from_fn(|a| rng.gen_range(lo[a] + 1..=dims[a] as i64));
    let bins: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..4));
    let loss_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let y = roi_pool_var(tape, v[0], IntRegion::new(lo, hi), bins)?;
        huber_all(tape, y, &mut loss_rng.clone())
    };
    (Box::new(f), inputs)
}

fn loss_trial(rng: &mut ChaCha8Rng) -> Trial {
    let (m, k) = (rng.gen_range(1..6), rng.gen_range(2..6));
    let inputs = vec![rand_tensor(rng, &[m, k], -3.0, 3.0), rand_tensor(rng, &[m * 2], -2.0, 2.0), rand_tensor(rng, &[m * 3], -4.0, 4.0)];
    let targets: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
    let (wc, wh, wb) = (weights(rng, m), weights(rng, 2 * m), weights(rng, 3 * m));
    let huber_target: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let delta = rng.gen_range(0.1..1.5);
    let bce_target: Vec<f64> = (0..3 * m).map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..1.0) } else { rng.gen_range(0..2) as f64 }).collect();
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let ce = tape.softmax_cross_entropy(v[0], &targets, &wc)?;
        let hu = tape.huber(v[1], &huber_target, &wh, delta)?;
        let bce = tape.bce_with_logits(v[2], &bce_target, &wb)?;
        tape.add_all(&[ce, hu, bce])
    };
    (Box::new(f), inputs)
}

fn classifier_trial(rng: &mut ChaCha8Rng) -> Trial {
    let dims = ClassifierDims {
        in_features: rng.gen_range(2..10),
        hidden: [rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(2..5)],
        num_classes: rng.gen_range(2..4),
    };
    let mut store = ParamStore::<f32>::new();
    init_classifier(&mut store, dims, rng);
    let (names, params) = store_inputs(&store, rng);
    let r = rng.gen_range(1..4);
    let mut inputs = vec![rand_tensor(rng, &[r, dims.in_features], -1.0, 1.0)];
    inputs.extend(params);
    let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..dims.num_classes)).collect();
    let w = weights(rng, r);
    let loss_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let p = Bound::from_pairs(names.iter().cloned().zip(v[1..].iter().copied()));
        let (logits, refine) = classify_head(tape, &p, v[0], dims)?;
        let ce = tape.softmax_cross_entropy(logits, &targets, &w)?;
        let hu = huber_all(tape, refine, &mut loss_rng.clone())?;
        tape.add(ce, hu)
    };
    (Box::new(f), inputs)
}

fn mask_trial(rng: &mut ChaCha8Rng) -> Trial {
    let dims = MaskDims {
        color_channels: rng.gen_range(1..3),
        width: rng.gen_range(1..4),
        num_classes: rng.gen_range(2..4),
        use_color: rng.gen_bool(0.6),
    };
    let mut store = ParamStore::<f32>::new();
    init_mask_head(&mut store, dims, rng);
    let (names, params) = store_inputs(&store, rng);
    let n = [rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(2..4)];
    let mut inputs = vec![rand_tensor(rng, &[1, n[0], n[1], n[2]], -1.0, 1.0)];
    if dims.use_color {
        inputs.push(rand_tensor(rng, &[dims.color_channels, n[0], n[1], n[2]], -1.0, 1.0));
    }
    let first_param = inputs.len();
    inputs.extend(params);
    let lo: [i64; 3] = std::array::from_fn(|a| rng.gen_range(0..n[a] as i64));
    let hi: [i64; 3] = std::array::from_fn(|a| rng.gen_range(lo[a] + 1..=n[a] as i64));
    let region = IntRegion::new(lo, hi);
    let class = rng.gen_range(0..dims.num_classes);
    let target: Vec<f64> = (0..region.num_voxels()).map(|_| rng.gen_range(0..2) as f64).collect();
    let w = weights(rng, target.len());
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let p = Bound::from_pairs(names.iter().cloned().zip(v[first_param..].iter().copied()));
        let color = dims.use_color.then(|| v[1]);
        let feats = mask_backbone(tape, &p, v[0], color)?;
        let logits = mask_class_logits(tape, &p, feats)?;
        let sel = select_class_region(tape, logits, class, region)?;
        tape.bce_with_logits(sel, &target, &w)
    };
    (Box::new(f), inputs)
}

fn rpn_trial(rng: &mut ChaCha8Rng) -> Trial {
    let dims = RpnDims {
        in_channels: rng.gen_range(1..3),
        hidden: rng.gen_range(2..4),
    };
    let anchors = [rng.gen_range(1..3), rng.gen_range(1..3)];
    let mut store = ParamStore::<f32>::new();
    init_rpn(&mut store, dims, anchors, rng);
    let (names, params) = store_inputs(&store, rng);
    let c = dims.in_channels;
    let s0 = [c, rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3)];
    let s1 = [c, rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3)];
    let mut inputs = vec![rand_tensor(rng, &s0, -1.0, 1.0), rand_tensor(rng, &s1, -1.0, 1.0)];
    inputs.extend(params);
    let loss_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let f = move |tape: &mut Tape<f64>, v: &[Var]| {
        let p = Bound::from_pairs(names.iter().cloned().zip(v[2..].iter().copied()));
        let out = rpn_forward(tape, &p, [v[0], v[1]], anchors)?;
        let mut lr = loss_rng.clone();
        let mut terms = Vec::new();
        for level in &out {
            terms.push(huber_all(tape, level.deltas, &mut lr)?);
            let n = tape.value(level.objectness).len();
            let t: Vec<f64> = (0..n).map(|_| lr.gen_range(0..2) as f64).collect();
            let w = weights(&mut lr, n);
            terms.push(tape.bce_with_logits(level.objectness, &t, &w)?);
        }
        tape.add_all(&terms)
    };
    (Box::new(f), inputs)
}

fn gradients() -> Outcome {
    let kinds: [(&str, fn(&mut ChaCha8Rng) -> Trial); 10] = [
        ("conv2d", |r| conv_trial(r, false)),
        ("conv3d", |r| conv_trial(r, true)),
        ("maxpool3d", maxpool_trial),
        ("fc", fc_trial),
        ("backproject+viewpool", backproject_trial),
        ("roipool", roi_trial),
        ("losses", loss_trial),
        ("classifier", classifier_trial),
        ("mask", mask_trial),
        ("rpn", rpn_trial),
    ];
    let (mut trials, mut failures, mut worst) = (0, Vec::new(), 0.0f64);
    for (ki, (name, make)) in kinds.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + ki as u64);
        for t in 0..TRIALS_PER_KIND {
            let (f, inputs) = make(&mut rng);
            trials += 1;
            match grad_check(|tape, v| f(tape, v), &inputs, GRAD_H, GRAD_TOL) {
                Ok(r) => {
                    worst = worst.max(r.max_rel_error);
                    if !r.passed() {
                        failures.push(format!("{name}#{t} rel {:.2e} checked {}", r.max_rel_error, r.checked));
                    }
                }
                Err(e) => failures.push(format!("{name}#{t} error {e}")),
            }
        }
    }
    let mut detail = format!("{trials} trials, {} failed, worst rel {worst:.2e} (tol {GRAD_TOL:.0e}, h {GRAD_H:.0e})", failures.len());
    if let Some(first) = failures.first() {
        detail += &format!(", first: {first}");
    }
    outcome(trials >= 1000 && failures.is_empty(), detail)
}

// ---------------------------------------------------------------- criterion 2

fn box_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let gt = random_box(&mut rng, 40.0);
        let anchor = random_box(&mut rng, 40.0);
        let back = decode_box(&encode_box(&gt, &anchor), &anchor);
        for a in 0..3 {
            worst = worst.max((back.center[a] - gt.center[a]).abs()).max((back.size[a] - gt.size[a]).abs());
        }
    }
    outcome(worst < 1e-9, format!("10000 pairs, worst error {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 3

fn cell_count_iou(rng: &mut ChaCha8Rng) -> f64 {
    let q = 0.25;
    let quant = |rng: &mut ChaCha8Rng| {
        let lo: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0..24) as f64 * q);
        let hi: [f64; 3] = std::array::from_fn(|a| lo[a] + rng.gen_range(1..16) as f64 * q);
        (lo, hi)
    };
    let (alo, ahi) = quant(rng);
    let (blo, bhi) = quant(rng);
    let inside = |lo: &[f64; 3], hi: &[f64; 3], p: [f64; 3]| (0..3).all(|k| p[k] > lo[k] && p[k] < hi[k]);
    let (mut inter, mut uni) = (0usize, 0usize);
    for x in 0..40 {
        for y in 0..40 {
            for z in 0..40 {
                let p = [(x as f64 + 0.5) * q, (y as f64 + 0.5) * q, (z as f64 + 0.5) * q];
                let (ia, ib) = (inside(&alo, &ahi, p), inside(&blo, &bhi, p));
                inter += (ia && ib) as usize;
                uni += (ia || ib) as usize;
            }
        }
    }
    let iou = box_iou(&Box3::from_min_max(alo, ahi), &Box3::from_min_max(blo, bhi));
    (iou - inter as f64 / uni as f64).abs()
}

fn detection_oracles() -> Outcome {
    let mut nms_bad = 0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boxes: Vec<Box3> = (0..64).map(|_| random_box(&mut rng, 12.0)).collect();
        let scores: Vec<f64> = (0..64).map(|_| rng.gen_range(0..16) as f64 / 16.0).collect();
        let thr = [0.1, 0.25, 0.5][seed as usize % 3];
        nms_bad += usize::from(nms(&boxes, &scores, thr) != nms_oracle(&boxes, &scores, thr));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let iou_worst = (0..200).map(|_| cell_count_iou(&mut rng)).fold(0.0, f64::max);

    let meta = GridMeta::new([12, 12, 10], 1.0, [0.0; 3]).unwrap();
    let mut roi_bad = 0;
    for _ in 0..200 {
        let data: Vec<f32> = (0..meta.num_voxels()).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let vol = FeatureVolume::from_data(meta, 1, data).unwrap();
        let n: [usize; 3] = std::array::from_fn(|a| rng.gen_range(4..=meta.dims[a]));
        let lo: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=meta.dims[a] - n[a]));
        let b = Box3::from_min_max(lo.map(|v| v as f64), std::array::from_fn(|a| (lo[a] + n[a]) as f64));
        roi_bad += usize::from(roi_pool(&vol, &b, [4, 4, 4]).ok() != Some(roi_oracle(&vol, lo, n)));
    }
    let ap_err = crafted_ap_max_error();
    let pass = nms_bad == 0 && iou_worst < 1e-6 && roi_bad == 0 && ap_err < 1e-9;
    outcome(
        pass,
        format!(
            "nms {nms_bad}/1000 mismatches, iou worst {iou_worst:.1e} over 200 pairs, roi pool {roi_bad}/200 mismatches, crafted AP worst {ap_err:.1e} over 20 cases"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn plane_error(depth_vox: f64, n: usize) -> (f64, bool) {
    let vs = 0.05f32;
    let view = CameraView {
        intrinsics: Intrinsics::from_fov(n, n, 60.0),
        pose: Pose::identity(),
        width: n,
        height: n,
        depth: vec![(depth_vox * vs as f64) as f32; n * n],
        color: vec![[0; 3]; n * n],
        instance: vec![],
    };
    let meta = GridMeta::new([1, 1, 30], vs, [-0.5 * vs, -0.5 * vs, 0.0]).unwrap();
    let g = fuse_tsdf(&[view], meta, 3.0).unwrap();
    let (mut worst, mut ok) = (0.0f64, true);
    for z in 0..30 {
        let s = depth_vox - (z as f64 + 0.5);
        let v = g.value([0, 0, z]) as f64;
        ok &= v.abs() <= 3.0;
        if s > -3.0 + 1e-3 {
            ok &= g.weight([0, 0, z]) == 1.0;
            worst = worst.max((v - s.min(3.0)).abs());
        } else if s < -3.0 - 1e-3 {
            ok &= g.weight([0, 0, z]) == 0.0;
        }
    }
    (worst, ok)
}

fn fusion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut plane_worst, mut plane_ok) = (0.0f64, true);
    for _ in 0..200 {
        let (w, ok) = plane_error(rng.gen_range(4.0..20.0), rng.gen_range(9..21));
        plane_worst = plane_worst.max(w);
        plane_ok &= ok;
    }
    let (mut perm_worst, mut bounded) = (0.0f32, true);
    for seed in [4u64, 9] {
        let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
        let views = scan_scene(&scene, &TrajectoryConfig::default(), seed).unwrap();
        let meta = scene.grid_meta(VOXEL_SIZE_M).unwrap();
        let a = fuse_tsdf(&views, meta, 3.0).unwrap();
        let mut shuffled = views.clone();
        shuffled.shuffle(&mut rng);
        let b = fuse_tsdf(&shuffled, meta, 3.0).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            perm_worst = perm_worst.max((x - y).abs());
            bounded &= x.abs() <= 3.0;
        }
        bounded &= a.weights == b.weights;
    }
    outcome(
        plane_ok && plane_worst <= 0.1 && perm_worst <= 1e-6 && bounded,
        format!("plane worst {plane_worst:.3} voxels over 200 planes, permutation worst {perm_worst:.1e}, truncation held {}", plane_ok && bounded),
    )
}

// ---------------------------------------------------------------- criterion 5

fn backprojection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let meta = GridMeta::new([24, 24, 16], 0.25, [-3.0, -3.0, -2.0]).unwrap();
    let (sh, sw, h, w) = (32, 40, 4, 5);
    let (mut written, mut outside) = (0usize, 0usize);
    for _ in 0..1000 {
        let k = Intrinsics::new(rng.gen_range(20.0..40.0), rng.gen_range(20.0..40.0), 19.5, 15.5).unwrap();
        let pose = random_pose(&mut rng);
        let depth: Vec<f32> = (0..sh * sw).map(|_| if rng.gen_bool(0.8) { rng.gen_range(0.5..6.0) } else { 0.0 }).collect();
        let data: Vec<f32> = (0..h * w).map(|c| c as f32 + 1.0).collect();
        let fmap = FeatureMap2D::new(1, h, w, data, (sh, sw)).unwrap();
        let vol = backproject(&fmap, &depth, &k, &pose, &meta).unwrap();
        for (vi, &x) in vol.data.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            written += 1;
            let cell = x as usize - 1;
            let (u, v) = cell_center_pixel(cell / w, cell % w, 8);
            let p = unproject_matrix(&k, &pose, u as f64, v as f64, depth[v * sw + u] as f64);
            let vox = meta.unindex(vi);
            let inside = (0..3).all(|a| {
                let lo = meta.origin[a] as f64 + vox[a] as f64 * meta.voxel_size as f64;
                p[a] >= lo - 1e-9 && p[a] <= lo + meta.voxel_size as f64 + 1e-9
            });
            outside += usize::from(!inside);
        }
    }
    let lattice_meta = GridMeta::new([3, 2, 2], 1.0, [0.0; 3]).unwrap();
    let mut law_breaks = 0;
    for _ in 0..1000 {
        let mut vol = || FeatureVolume::from_data(lattice_meta, 2, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let (a, b, c) = (vol(), vol(), vol());
        let pool = |xs: &[&FeatureVolume]| view_pool(&xs.iter().map(|&x| x.clone()).collect::<Vec<_>>()).unwrap();
        let ab = pool(&[&a, &b]);
        law_breaks += usize::from(ab != pool(&[&b, &a]));
        law_breaks += usize::from(pool(&[&ab, &c]) != pool(&[&a, &pool(&[&b, &c])]));
        law_breaks += usize::from(pool(&[&a, &a]) != a);
        law_breaks += usize::from(pool(&[&a, &b, &c]) != pool(&[&c, &a, &b]));
    }
    outcome(
        written > 1000 && outside == 0 && law_breaks == 0,
        format!("1000 views, {outside}/{written} writes outside their voxel, {law_breaks} pooling law violations over 1000 triples"),
    )
}

// ---------------------------------------------------------------- criterion 6

fn chunk_consistency() -> Outcome {
    let cfg = PipelineConfig::default();
    let (mut compared, mut worst) = (0, 0.0f32);
    for seed in 0..10 {
        let (n, w) = check_chunk_consistency(&cfg, 600 + seed);
        compared += n;
        worst = worst.max(w);
    }
    outcome(compared > 0 && worst <= 1e-5, format!("10 scenes, {compared} interior features, worst difference {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 7

fn checkpoint_bytes(p: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, p).unwrap();
    buf
}

fn loss_bits(records: &[sis3d::pipeline::LossRecord]) -> Vec<[u64; 6]> {
    records
        .iter()
        .map(|r| [r.rpn_cls, r.rpn_box, r.cls, r.cls_box, r.mask, r.total].map(f64::to_bits))
        .collect()
}

fn end_to_end() -> Outcome {
    let mut cfg = PipelineConfig::default();
    cfg.schedule.steps = [1500, 1000, 1000];
    let (chunks, t_data) = timed(|| build_dataset(&cfg, 200, 1).unwrap());
    let samples: Vec<_> = chunks.iter().map(|c| prepare(c, &cfg).unwrap()).collect();
    let mut state = TrainState::new(init_model(&cfg.model, 7).unwrap(), 7);
    let (log, t_train) = timed(|| train(&mut state, &cfg, &samples, |_| {}).unwrap());

    // Same seeds, same data: a rerun of the opening steps must match bitwise.
    let mut prefix_cfg = cfg.clone();
    prefix_cfg.schedule.steps = [200, 0, 0];
    let mut rerun = TrainState::new(init_model(&cfg.model, 7).unwrap(), 7);
    let rerun_log = train(&mut rerun, &prefix_cfg, &samples, |_| {}).unwrap();
    let train_det = loss_bits(&rerun_log) == loss_bits(&log[..rerun_log.len()]);

    let test = synthesize_scenes(&cfg, 20, 999).unwrap();
    let (ev, t_eval) = timed(|| evaluate(&state.params, &cfg, &test, &[0.25, 0.5]).unwrap());
    let again = evaluate(&state.params, &cfg, &test[..3], &[0.25]).unwrap();
    let infer_det = format!("{:?}", again.predictions) == format!("{:?}", &ev.predictions[..3]);

    let (b, m) = (&ev.boxes.map, &ev.masks.map);
    let pass = chunks.len() == 200 && b[0] >= 0.80 && m[0] >= 0.70 && train_det && infer_det;
    outcome(
        pass,
        format!(
            "box mAP {:.3}@0.25 {:.3}@0.5, mask mAP {:.3}@0.25 {:.3}@0.5 (need 0.80/0.70 @0.25), deterministic train {train_det} infer {infer_det}, data {t_data:.0} s train {t_train:.0} s eval {t_eval:.0} s",
            b[0], b[1], m[0], m[1]
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn ablation_map(mut cfg: PipelineConfig) -> (f64, f64) {
    cfg.scene.class_size_prior = false;
    cfg.schedule.steps = [500, 5500, 0];
    cfg.train.lr_decay_every = 100_000;
    let start = Instant::now();
    let chunks = build_dataset(&cfg, 200, 1).unwrap();
    let samples: Vec<_> = chunks.iter().map(|c| prepare(c, &cfg).unwrap()).collect();
    let mut state = TrainState::new(init_model(&cfg.model, 7).unwrap(), 7);
    train(&mut state, &cfg, &samples, |_| {}).unwrap();
    let test = synthesize_scenes(&cfg, 20, 999).unwrap();
    let ev = evaluate(&state.params, &cfg, &test, &[0.25]).unwrap();
    (ev.boxes.map[0], start.elapsed().as_secs_f64())
}

fn color_ablation() -> Outcome {
    let base = PipelineConfig::default();
    let (color3, t3) = ablation_map(base.clone());
    let mut one = base.clone();
    one.views_per_chunk = 1;
    let (color1, t1) = ablation_map(one);
    let mut geo = base;
    geo.model.use_color = false;
    let (geometry, tg) = ablation_map(geo);
    let pass = color3 - geometry >= 0.1 && color3 >= color1;
    outcome(
        pass,
        format!(
            "box mAP@0.25 color 3 views {color3:.3} ({t3:.0} s), color 1 view {color1:.3} ({t1:.0} s), geometry only {geometry:.3} ({tg:.0} s); need color3 - geometry >= 0.1 and color3 >= color1"
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn hex(s: &str) -> Vec<u8> {
    let s: String = s.split_whitespace().collect();
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn dir_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn persistence() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    let meta = GridMeta::new([2, 2, 2], 0.5, [1.0, 2.0, 3.0]).unwrap();
    let tiny = TsdfGrid::from_parts(meta, 3.0, (0..8).map(|i| i as f32).collect(), vec![1.0; 8]).unwrap();
    let golden = hex(
        "56475244 01000000 00000000 02000000 02000000 02000000 02000000
         0000003f 0000803f 00000040 00004040 00004040
         00000000 0000803f 00000040 00004040 00008040 0000a040 0000c040 0000e040
         0000803f 0000803f 0000803f 0000803f 0000803f 0000803f 0000803f 0000803f",
    );
    let mut buf = Vec::new();
    write_grid(&mut buf, &Grid::Tsdf(tiny.clone())).unwrap();
    check(buf == golden, "tsdf golden bytes");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let meta = GridMeta::new([rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9)], rng.gen_range(0.01..1.0), [rng.gen(), rng.gen(), rng.gen()]).unwrap();
        let n = meta.num_voxels();
        let c = rng.gen_range(1..4);
        let f = FeatureVolume::from_data(meta, c, (0..c * n).map(|_| f32::from_bits(rng.gen_range(0..0x7f00_0000u32)) * if rng.gen() { 1.0 } else { -1.0 }).collect()).unwrap();
        let mut buf = Vec::new();
        write_grid(&mut buf, &Grid::Feature(f.clone())).unwrap();
        let back = read_grid(&mut buf.as_slice()).unwrap();
        let Grid::Feature(g) = back else { unreachable!() };
        check(g.data.iter().map(|x| x.to_bits()).eq(f.data.iter().map(|x| x.to_bits())) && g.meta == f.meta, "feature grid roundtrip");
    }

    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::new(vec![2], vec![1.0f32, -0.5]).unwrap());
    let golden = hex("53495357 01000000 01000000 01000000 77 01000000 02000000 0000803f 000000bf");
    check(checkpoint_bytes(&store) == golden, "checkpoint golden bytes");
    let cfg = PipelineConfig::default();
    let params = init_model(&cfg.model, 3).unwrap();
    let bytes = checkpoint_bytes(&params);
    let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
    check(checkpoint_bytes(&back) == bytes, "model checkpoint roundtrip");

    let tmp = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let s = &synthesize_scenes(&cfg, 1, 21).unwrap()[0];
        // Ground-truth records carry the folder name, so keep it equal.
        let dir = tmp.path().join(run).join("scene_0000");
        save_scan(&dir, &s.spec, &s.views).unwrap();
        save_fused(&dir, &s.tsdf, &s.annotations).unwrap();
    }
    let (a, b) = (dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    check(!a.is_empty() && a == b, "deterministic scene folders");
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("golden grid and checkpoint bytes, 50 grid and 1 model roundtrips bitwise, {} scene files identical across runs", a.len())
        } else {
            format!("broken: {}", failures.join(", "))
        },
    )
}
