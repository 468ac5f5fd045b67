//! Evaluation: voxelization, per-frame merging, mean average precision and
//! the line-based prediction interchange format.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{box_iou, mask_iou, Box3, GridMeta, InstanceAnnotation};

/// A scored instance in voxel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub class_id: usize,
    pub score: f64,
    /// Sorted voxel set inside the box's enclosing region.
    pub mask: Option<Vec<[usize; 3]>>,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !self.score.is_finite() || !self.bbox.is_valid() {
            return Err(Error::Invalid(format!("detection with score {} and box {:?}", self.score, self.bbox)));
        }
        if let Some(m) = &self.mask {
            let r = self.bbox.enclosing_region();
            if let Some(v) = m.iter().find(|v| !r.contains(**v)) {
                return Err(Error::Invalid(format!("mask voxel {v:?} outside its box")));
            }
        }
        Ok(())
    }
}

impl From<&InstanceAnnotation> for Detection {
    fn from(a: &InstanceAnnotation) -> Self {
        Detection {
            bbox: a.bbox,
            class_id: a.class_id,
            score: 1.0,
            mask: Some(a.mask.clone()),
        }
    }
}

/// A detection in world meters; the mask is a union of world-space cells.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldDetection {
    pub bbox: Box3,
    pub class_id: usize,
    pub score: f64,
    pub mask: Option<Vec<Box3>>,
}

/// Maps boxes through `world_to_voxel` and re-rasterizes masks: a voxel is in
/// the mask when its center lies inside any mask cell.
pub fn voxelize(dets: &[WorldDetection], meta: &GridMeta) -> Vec<Detection> {
    let to_vox = |b: &Box3| Box3::from_min_max(meta.world_to_voxel(b.min()), meta.world_to_voxel(b.max()));
    dets.iter()
        .map(|d| {
            let bbox = to_vox(&d.bbox);
            let mask = d.mask.as_ref().map(|cells| {
                let mut out = Vec::new();
                for c in cells {
                    let vb = to_vox(c);
                    let Some(r) = vb.enclosing_region().clamp_to(meta.dims) else { continue };
                    out.extend(r.iter().filter(|&v| vb.contains_voxel_center(v)));
                }
                out.sort_unstable();
                out.dedup();
                out
            });
            Detection {
                bbox,
                class_id: d.class_id,
                score: d.score,
                mask,
            }
        })
        .collect()
}

/// Greedy agglomeration by descending score: a detection joins the first
/// cluster whose representative has its class and box IoU above `iou_thresh`.
pub fn merge_frame_predictions(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut reps: Vec<usize> = Vec::new();
    for i in order {
        let joined = reps
            .iter()
            .any(|&r| dets[r].class_id == dets[i].class_id && box_iou(&dets[r].bbox, &dets[i].bbox) > iou_thresh);
        if !joined {
            reps.push(i);
        }
    }
    reps.into_iter().map(|r| dets[r].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Box,
    Mask,
}

/// Overlap used for matching. Mask IoU with a missing mask counts as 0.
pub fn overlap(a: &Detection, b: &Detection, kind: IouKind) -> f64 {
    match kind {
        IouKind::Box => box_iou(&a.bbox, &b.bbox),
        IouKind::Mask => match (&a.mask, &b.mask) {
            (Some(x), Some(y)) => mask_iou(x, y),
            _ => 0.0,
        },
    }
}

/// Area under the precision/recall curve with all-point interpolation.
///
/// `hits` are the ranked predictions' match flags; `num_gt > 0`.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // Precision envelope from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
    }
    ap
}

/// Ranked match flags for one class: predictions sorted by score (ties by
/// scene, then input order), each greedily matched to the best unmatched
/// ground truth of its scene with overlap ≥ `thresh`.
fn class_hits(preds: &[Vec<Detection>], gts: &[Vec<Detection>], class: usize, thresh: f64, kind: IouKind) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, &Detection)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().filter(|d| d.class_id == class).map(move |d| (s, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().flatten().filter(|g| g.class_id == class).count();
    let hits = ranked
        .iter()
        .map(|&(s, d)| {
            let Some(scene_gts) = gts.get(s) else { return false };
            let mut best = (thresh, None);
            for (j, g) in scene_gts.iter().enumerate() {
                if g.class_id != class || used[s][j] {
                    continue;
                }
                let o = overlap(d, g, kind);
                if o >= best.0 && (best.1.is_none() || o > best.0) {
                    best = (o, Some(j));
                }
            }
            match best.1 {
                Some(j) => {
                    used[s][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (hits, num_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    /// `per_class[t][c]`: AP of class `c` at threshold `t`; `None` when the class has no ground truth.
    pub per_class: Vec<Vec<Option<f64>>>,
    /// Mean over classes per threshold.
    pub map: Vec<f64>,
}

/// mAP over scenes (`preds[s]` and `gts[s]` belong to scene `s`).
///
/// With `exclude_empty`, classes without ground truth are left out of the
/// mean; otherwise they count as AP 0.
pub fn mean_average_precision(
    preds: &[Vec<Detection>],
    gts: &[Vec<Detection>],
    thresholds: &[f64],
    num_classes: usize,
    kind: IouKind,
    exclude_empty: bool,
) -> MapReport {
    let mut per_class = Vec::with_capacity(thresholds.len());
    let mut map = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let row: Vec<Option<f64>> = (0..num_classes)
            .map(|c| {
                let (hits, n) = class_hits(preds, gts, c, t, kind);
                (n > 0).then(|| average_precision(&hits, n))
            })
            .collect();
        let vals: Vec<f64> = if exclude_empty {
            row.iter().flatten().copied().collect()
        } else {
            row.iter().map(|a| a.unwrap_or(0.0)).collect()
        };
        map.push(if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 });
        per_class.push(row);
    }
    MapReport {
        thresholds: thresholds.to_vec(),
        per_class,
        map,
    }
}

/// Metrics table: one row per threshold, class columns then the average.
pub fn metrics_csv(report: &MapReport, label: &str, class_names: &[String]) -> String {
    let mut s = String::from("metric,iou");
    for n in class_names {
        let _ = write!(s, ",{n}");
    }
    s.push_str(",avg\n");
    for (i, (t, row)) in report.thresholds.iter().zip(&report.per_class).enumerate() {
        let _ = write!(s, "{label},{t}");
        for ap in row {
            match ap {
                Some(v) => {
                    let _ = write!(s, ",{v:.4}");
                }
                None => s.push(','),
            }
        }
        let _ = writeln!(s, ",{:.4}", report.map[i]);
    }
    s
}

/// Run lengths of a sorted mask over `region` in layout order, starting with an off-run.
pub fn mask_to_rle(mask: &[[usize; 3]], bbox: &Box3) -> Vec<usize> {
    let region = bbox.enclosing_region();
    let mut runs = Vec::new();
    let mut state = false;
    let mut len = 0usize;
    let mut k = 0;
    for v in region.iter() {
        let on = k < mask.len() && mask[k] == v;
        if on {
            k += 1;
        }
        if on != state {
            runs.push(len);
            state = on;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn rle_to_mask(runs: &[usize], bbox: &Box3) -> Result<Vec<[usize; 3]>> {
    let region = bbox.enclosing_region();
    if runs.iter().sum::<usize>() != region.num_voxels() || region.lo.iter().any(|&l| l < 0) {
        return Err(Error::Format(format!("run lengths do not cover the {}-voxel box region", region.num_voxels())));
    }
    let mut out = Vec::new();
    let mut it = region.iter();
    for (i, &r) in runs.iter().enumerate() {
        for _ in 0..r {
            let v = it.next().ok_or_else(|| Error::Format("run past region end".into()))?;
            if i % 2 == 1 {
                out.push(v);
            }
        }
    }
    Ok(out)
}

/// One interchange record: `scene class score x0 y0 z0 x1 y1 z1 [rle]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub scene: String,
    pub detection: Detection,
}

pub fn format_record(r: &Record) -> String {
    let d = &r.detection;
    let (lo, hi) = (d.bbox.min(), d.bbox.max());
    let mut s = format!(
        "{} {} {} {} {} {} {} {} {}",
        r.scene, d.class_id, d.score, lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]
    );
    if let Some(m) = &d.mask {
        let runs: Vec<String> = mask_to_rle(m, &d.bbox).iter().map(|r| r.to_string()).collect();
        let _ = write!(s, " {}", runs.join(","));
    }
    s
}

pub fn parse_record(line: &str) -> Result<Record> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 9 && f.len() != 10 {
        return Err(Error::Format(format!("record needs 9 or 10 fields, got {}", f.len())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    let class_id = f[1].parse::<usize>().map_err(|e| Error::Format(format!("class {:?}: {e}", f[1])))?;
    let score = num(f[2])?;
    let lo = [num(f[3])?, num(f[4])?, num(f[5])?];
    let hi = [num(f[6])?, num(f[7])?, num(f[8])?];
    let bbox = Box3::from_min_max(lo, hi);
    let mask = match f.get(9) {
        Some(rle) => {
            let runs = rle
                .split(',')
                .map(|r| r.parse::<usize>().map_err(|e| Error::Format(format!("run {r:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Some(rle_to_mask(&runs, &bbox)?)
        }
        None => None,
    };
    Ok(Record {
        scene: f[0].to_string(),
        detection: Detection { bbox, class_id, score, mask },
    })
}

pub fn write_records(records: &[Record]) -> String {
    records.iter().map(|r| format_record(r) + "\n").collect()
}

pub fn read_records(text: &str) -> Result<Vec<Record>> {
    text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).map(parse_record).collect()
}

/// Groups records by scene id in order of first appearance.
pub fn group_by_scene(records: &[Record], scenes: &mut Vec<String>) -> Vec<Vec<Detection>> {
    let mut out: Vec<Vec<Detection>> = vec![Vec::new(); scenes.len()];
    for r in records {
        let i = match scenes.iter().position(|s| *s == r.scene) {
            Some(i) => i,
            None => {
                scenes.push(r.scene.clone());
                out.push(Vec::new());
                scenes.len() - 1
            }
        };
        out[i].push(r.detection.clone());
    }
    out
}
