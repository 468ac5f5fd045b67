mod common;

use common::{crafted_ap_max_error, crafted_case, CRAFTED_AP};
use proptest::prelude::*;
use sis3d::eval::*;
use sis3d::grid::{Box3, GridMeta};

fn det(bbox: Box3, class_id: usize, score: f64) -> Detection {
    Detection {
        bbox,
        class_id,
        score,
        mask: None,
    }
}

#[test]
fn crafted_pr_curves_match_hand_values() {
    for &(p, n, want) in &CRAFTED_AP {
        let (preds, gts) = crafted_case(p, n);
        let r = mean_average_precision(&[preds], &[gts], &[0.25, 0.5], 1, IouKind::Box, true);
        for ap in &r.map {
            assert!((ap - want).abs() < 1e-12, "{p} over {n}: {ap} vs {want}");
        }
    }
    assert!(crafted_ap_max_error() < 1e-12);
}

#[test]
fn duplicate_match_counts_as_false_positive() {
    let g = det(common::cube(0.0), 0, 1.0);
    let r = mean_average_precision(&[vec![det(g.bbox, 0, 0.9), det(g.bbox, 0, 0.8)]], &[vec![g.clone()]], &[0.5], 1, IouKind::Box, true);
    assert_eq!(r.map[0], 1.0);
    // A near copy takes the match first and the exact copy becomes the duplicate.
    let r = mean_average_precision(&[vec![det(g.bbox.translated([0.1, 0.0, 0.0]), 0, 0.9), det(g.bbox, 0, 0.8)]], &[vec![g]], &[0.5], 1, IouKind::Box, true);
    assert_eq!(r.map[0], 1.0);
    assert_eq!(average_precision(&[false, true], 1), 0.5);
}

#[test]
fn empty_classes_excluded_or_zero() {
    let g = det(common::cube(0.0), 0, 1.0);
    let p = vec![det(g.bbox, 0, 0.9), det(common::cube(50.0), 2, 0.5)];
    let ex = mean_average_precision(&[p.clone()], &[vec![g.clone()]], &[0.5], 3, IouKind::Box, true);
    assert_eq!(ex.map[0], 1.0);
    assert_eq!(ex.per_class[0], vec![Some(1.0), None, None]);
    let zero = mean_average_precision(&[p], &[vec![g]], &[0.5], 3, IouKind::Box, false);
    assert!((zero.map[0] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn mask_map_uses_voxel_overlap() {
    let bbox = Box3::from_min_max([0.0; 3], [2.0; 3]);
    let gt_mask = vec![[0, 0, 0], [0, 0, 1], [1, 1, 0], [1, 1, 1]];
    let g = Detection {
        mask: Some(gt_mask.clone()),
        ..det(bbox, 0, 1.0)
    };
    // Same box, half the voxels: box IoU 1, mask IoU 0.5.
    let p = Detection {
        mask: Some(gt_mask[..2].to_vec()),
        ..det(bbox, 0, 0.7)
    };
    let t = [0.25, 0.75];
    let b = mean_average_precision(&[vec![p.clone()]], &[vec![g.clone()]], &t, 1, IouKind::Box, true);
    let m = mean_average_precision(&[vec![p]], &[vec![g]], &t, 1, IouKind::Mask, true);
    assert_eq!(b.map, vec![1.0, 1.0]);
    assert_eq!(m.map, vec![1.0, 0.0]);
}

#[test]
fn metrics_csv_has_class_columns_and_average() {
    let r = MapReport {
        thresholds: vec![0.25, 0.5],
        per_class: vec![vec![Some(1.0), None], vec![Some(0.5), None]],
        map: vec![1.0, 0.5],
    };
    let names = vec!["chair".to_string(), "table".to_string()];
    assert_eq!(metrics_csv(&r, "box", &names), "metric,iou,chair,table,avg\nbox,0.25,1.0000,,1.0000\nbox,0.5,0.5000,,0.5000\n");
}

#[test]
fn records_roundtrip_and_group() {
    let bbox = Box3::from_min_max([1.0, 2.0, 3.0], [3.0, 4.5, 4.0]);
    let recs = vec![
        Record {
            scene: "s1".into(),
            detection: Detection {
                mask: Some(vec![[1, 2, 3], [2, 3, 3], [2, 4, 3]]),
                ..det(bbox, 2, 0.625)
            },
        },
        Record {
            scene: "s0".into(),
            detection: det(bbox, 0, 0.1),
        },
        Record {
            scene: "s1".into(),
            detection: det(bbox.translated([0.25, 0.0, 0.0]), 1, 1.0),
        },
    ];
    let text = write_records(&recs);
    assert_eq!(read_records(&text).unwrap(), recs);
    let mut scenes = vec!["s0".to_string()];
    let g = group_by_scene(&recs, &mut scenes);
    assert_eq!(scenes, ["s0", "s1"]);
    assert_eq!((g[0].len(), g[1].len()), (1, 2));
    assert!(parse_record("s 0 0.5 0 0 0 1 1").is_err());
    assert!(parse_record("s 0 0.5 0 0 0 1 1 1 0,2").is_err());
}

#[test]
fn voxelize_identity_meta_is_unchanged() {
    let meta = GridMeta::new([16, 16, 16], 1.0, [0.0; 3]).unwrap();
    let bbox = Box3::from_min_max([1.5, 2.0, 3.0], [6.0, 7.25, 9.0]);
    let v = voxelize(
        &[WorldDetection {
            bbox,
            class_id: 1,
            score: 0.4,
            mask: None,
        }],
        &meta,
    );
    assert_eq!(v, vec![det(bbox, 1, 0.4)]);
}

#[test]
fn one_meter_box_spans_about_21_voxels() {
    let meta = GridMeta::new([64, 64, 64], 0.0469, [0.0; 3]).unwrap();
    let w = WorldDetection {
        bbox: Box3::from_min_max([0.5; 3], [1.5; 3]),
        class_id: 0,
        score: 1.0,
        mask: None,
    };
    let v = &voxelize(&[w], &meta)[0];
    for s in v.bbox.size {
        assert!((s - 21.32).abs() < 0.01, "{s}");
    }
}

#[test]
fn merge_examples() {
    let a = det(Box3::from_min_max([0.0; 3], [10.0, 1.0, 1.0]), 0, 0.9);
    let b = det(Box3::from_min_max([2.5, 0.0, 0.0], [12.5, 1.0, 1.0]), 0, 0.8);
    let merged = merge_frame_predictions(&[b.clone(), a.clone()], 0.5);
    assert_eq!(merged, vec![a.clone()]);
    let other = Detection { class_id: 1, ..a.clone() };
    assert_eq!(merge_frame_predictions(&[a.clone(), other], 0.5).len(), 2);
    let c = det(Box3::from_min_max([3.0, 0.0, 0.0], [10.0, 1.0, 1.0]), 0, 0.5);
    let d = det(Box3::from_min_max([0.0; 3], [7.0, 1.0, 1.0]), 0, 0.4);
    assert_eq!(merge_frame_predictions(&[c, d], 0.5).len(), 2);
}

fn arb_box(extent: f64) -> impl Strategy<Value = Box3> {
    (prop::array::uniform3(0.0..extent), prop::array::uniform3(1.0f64..6.0)).prop_map(|(c, s)| Box3::new(c, s))
}

fn arb_scene() -> impl Strategy<Value = (Vec<Detection>, Vec<Detection>)> {
    let gts = prop::collection::vec((arb_box(20.0), 0usize..3), 0..6);
    let preds = prop::collection::vec((arb_box(20.0), 0usize..3), 0..10);
    (gts, preds).prop_map(|(g, p)| {
        let gts = g.into_iter().map(|(b, c)| det(b, c, 1.0)).collect();
        // Distinct integer-spaced scores keep the ranking free of ties.
        let preds = p.into_iter().enumerate().map(|(i, (b, c))| det(b, c, ((i * 7919) % 101 + 1) as f64 / 102.0)).collect();
        (preds, gts)
    })
}

fn scenes() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<Detection>>)> {
    prop::collection::vec(arb_scene(), 1..4).prop_map(|v| v.into_iter().unzip())
}

const T: [f64; 2] = [0.25, 0.5];

proptest! {
    #[test]
    fn map_invariant_under_monotone_scores((preds, gts) in scenes()) {
        let base = mean_average_precision(&preds, &gts, &T, 3, IouKind::Box, true);
        let warped: Vec<Vec<Detection>> = preds
            .iter()
            .map(|s| s.iter().map(|d| Detection { score: (3.0 * d.score).exp() - 7.0, ..d.clone() }).collect())
            .collect();
        let w = mean_average_precision(&warped, &gts, &T, 3, IouKind::Box, true);
        prop_assert_eq!(base, MapReport { thresholds: T.to_vec(), ..w });
    }

    #[test]
    fn low_scoring_false_positive_never_helps((mut preds, gts) in scenes(), b in arb_box(20.0), class in 0usize..3, scene in 0usize..4) {
        let base = mean_average_precision(&preds, &gts, &T, 3, IouKind::Box, true);
        let s = scene % preds.len();
        preds[s].push(det(b, class, 0.0));
        let more = mean_average_precision(&preds, &gts, &T, 3, IouKind::Box, true);
        for (r0, r1) in base.per_class.iter().zip(&more.per_class) {
            for (a0, a1) in r0.iter().zip(r1) {
                prop_assert!(a1.unwrap_or(0.0) <= a0.unwrap_or(0.0) + 1e-12);
            }
        }
    }

    #[test]
    fn perfect_predictions_score_one((_, gts) in scenes()) {
        prop_assume!(gts.iter().any(|g| !g.is_empty()));
        let with_masks: Vec<Vec<Detection>> = gts
            .iter()
            .map(|s| s.iter().map(|g| Detection { mask: Some(g.bbox.enclosing_region().clamp_to([64; 3]).map(|r| r.iter().collect()).unwrap_or_default()), ..g.clone() }).collect())
            .collect();
        let mut k = 0;
        let preds: Vec<Vec<Detection>> = with_masks
            .iter()
            .map(|s| s.iter().map(|g| { k += 1; Detection { score: 1.0 / k as f64, ..g.clone() } }).collect())
            .collect();
        for kind in [IouKind::Box, IouKind::Mask] {
            let r = mean_average_precision(&preds, &with_masks, &T, 3, kind, true);
            prop_assert_eq!(r.map, vec![1.0, 1.0]);
        }
    }

    #[test]
    fn merge_shrinks_and_keeps_classes(dets in prop::collection::vec((arb_box(10.0), 0usize..3, 0.0f64..1.0), 0..20)) {
        let dets: Vec<Detection> = dets.into_iter().map(|(b, c, s)| det(b, c, s)).collect();
        let out = merge_frame_predictions(&dets, 0.5);
        prop_assert!(out.len() <= dets.len());
        prop_assert!(out.iter().all(|o| dets.contains(o)));
        // Survivors of one class never overlap beyond the threshold.
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                prop_assert!(a.class_id != b.class_id || sis3d::grid::box_iou(&a.bbox, &b.bbox) <= 0.5);
            }
        }
    }

    #[test]
    fn rasterized_mask_within_one_voxel_shell(lo in prop::array::uniform3(0.05f64..0.8), size in prop::array::uniform3(0.1f64..0.9)) {
        let meta = GridMeta::new([48, 48, 48], 0.0469, [0.0; 3]).unwrap();
        let hi: [f64; 3] = std::array::from_fn(|a| lo[a] + size[a]);
        let cell = Box3::from_min_max(lo, hi);
        let w = WorldDetection { bbox: cell, class_id: 0, score: 1.0, mask: Some(vec![cell]) };
        let n = voxelize(&[w], &meta)[0].mask.as_ref().unwrap().len() as f64;
        let e = size.map(|s| s / 0.0469);
        let inner: f64 = e.iter().map(|x| (x - 1.0).max(0.0)).product();
        let outer: f64 = e.iter().map(|x| x + 1.0).product();
        prop_assert!(inner <= n && n <= outer, "{} voxels for extents {:?}", n, e);
    }
}
