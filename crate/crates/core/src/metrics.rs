//! Evaluation metrics: instance-mask construction, foreground IOU,
//! segmentation covering (per-frame and tracking), depth errors, and 3D
//! detection average precision.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::geometry::{pose_to_transform, CameraTrack, ObjectPose};
use crate::tensor::Tensor;

/// Modal instance labeling of a video: one id per pixel, 0 = background,
/// object ids shared across frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl Segmentation {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Segmentation {
        Segmentation { frames, height, width, ids: vec![0; frames * height * width] }
    }

    pub fn from_ids(frames: usize, height: usize, width: usize, ids: Vec<u32>) -> Segmentation {
        assert_eq!(ids.len(), frames * height * width);
        Segmentation { frames, height, width, ids }
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize) -> u32 {
        self.ids[(f * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, f: usize, y: usize, x: usize, id: u32) {
        self.ids[(f * self.height + y) * self.width + x] = id;
    }

    fn frame_ids(&self, f: usize) -> &[u32] {
        &self.ids[f * self.height * self.width..(f + 1) * self.height * self.width]
    }
}

/// How soft object masks become a modal labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Threshold presence-weighted amodal opacity masks.
    Voxel,
    /// Threshold silhouette coverage, discarding low-presence objects.
    Mesh,
}

/// Stack per-object soft masks into a modal instance segmentation:
/// binarize at `threshold`, then let nearer objects occlude farther ones
/// (object order by per-frame center distance, ties by slot).
///
/// `soft[g][t]` is the `[H,W,1]` amodal mask of object g in frame t —
/// presence-weighted opacity in voxel mode, raw silhouette coverage in
/// mesh mode. In mesh mode objects with presence below
/// `presence_threshold` are dropped entirely.
pub fn instance_masks_from_soft(
    mode: MaskMode,
    soft: &[Vec<Tensor<f64>>],
    presences: &[f64],
    dists: &[Vec<f64>],
    threshold: f64,
    presence_threshold: f64,
) -> Segmentation {
    assert_eq!(soft.len(), presences.len());
    assert_eq!(soft.len(), dists.len());
    let frames = soft.first().map(|s| s.len()).unwrap_or(0);
    let (h, w) = soft
        .first()
        .and_then(|s| s.first())
        .map(|m| (m.dims()[0], m.dims()[1]))
        .unwrap_or((0, 0));
    let mut seg = Segmentation::zeros(frames, h, w);
    for t in 0..frames {
        // Nearest first; the first covering object wins a pixel.
        let mut order: Vec<usize> = (0..soft.len())
            .filter(|&g| mode == MaskMode::Voxel || presences[g] >= presence_threshold)
            .collect();
        order.sort_by(|&a, &b| {
            dists[a][t].partial_cmp(&dists[b][t]).unwrap().then(a.cmp(&b))
        });
        for y in 0..h {
            for x in 0..w {
                for &g in &order {
                    if soft[g][t].at(&[y, x, 0]) >= threshold {
                        seg.set(t, y, x, g as u32 + 1);
                        break;
                    }
                }
            }
        }
    }
    seg
}

/// Mean over frames of foreground intersection-over-union; a frame where
/// both foregrounds are empty counts as 1.
pub fn fg_iou(pred: &Segmentation, gt: &Segmentation) -> f64 {
    assert_eq!((pred.frames, pred.height, pred.width), (gt.frames, gt.height, gt.width));
    let mut total = 0.0;
    for f in 0..pred.frames {
        let (mut inter, mut union) = (0usize, 0usize);
        for (p, g) in pred.frame_ids(f).iter().zip(gt.frame_ids(f)) {
            let (fp, fg) = (*p > 0, *g > 0);
            if fp && fg {
                inter += 1;
            }
            if fp || fg {
                union += 1;
            }
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / pred.frames as f64
}

/// Covering of one labeled pixel set by another: per gt object, the best
/// IOU over predicted objects; averaged area-weighted or uniformly.
/// `None` when gt has no foreground objects.
fn covering_of_slices(pred: &[u32], gt: &[u32], area_weighted: bool) -> Option<f64> {
    let mut gt_area: HashMap<u32, usize> = HashMap::new();
    let mut pred_area: HashMap<u32, usize> = HashMap::new();
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        if g > 0 {
            *gt_area.entry(g).or_insert(0) += 1;
        }
        if p > 0 {
            *pred_area.entry(p).or_insert(0) += 1;
        }
        if p > 0 && g > 0 {
            *inter.entry((g, p)).or_insert(0) += 1;
        }
    }
    if gt_area.is_empty() {
        return None;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&gid, &garea) in &gt_area {
        let mut best = 0.0f64;
        for (&pid, &parea) in &pred_area {
            if let Some(&i) = inter.get(&(gid, pid)) {
                let iou = i as f64 / (garea + parea - i) as f64;
                best = best.max(iou);
            }
        }
        let wgt = if area_weighted { garea as f64 } else { 1.0 };
        num += wgt * best;
        den += wgt;
    }
    Some(num / den)
}

/// Per-frame segmentation covering, averaged over frames that have at
/// least one gt object. `None` when no frame does.
pub fn segmentation_covering(
    pred: &Segmentation,
    gt: &Segmentation,
    area_weighted: bool,
) -> Option<f64> {
    assert_eq!((pred.frames, pred.height, pred.width), (gt.frames, gt.height, gt.width));
    let mut total = 0.0;
    let mut n = 0usize;
    for f in 0..pred.frames {
        if let Some(c) = covering_of_slices(pred.frame_ids(f), gt.frame_ids(f), area_weighted) {
            total += c;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(total / n as f64)
    }
}

/// Covering of the whole video treated as one large image, so objects
/// must keep consistent ids across frames to score well.
pub fn tracking_covering(
    pred: &Segmentation,
    gt: &Segmentation,
    area_weighted: bool,
) -> Option<f64> {
    assert_eq!((pred.frames, pred.height, pred.width), (gt.frames, gt.height, gt.width));
    covering_of_slices(&pred.ids, &gt.ids, area_weighted)
}

/// Depth accuracy: mean absolute relative error and the fraction of
/// pixels whose symmetric depth ratio is strictly below 1.25. `None` when
/// no pixel is valid.
pub fn depth_metrics(
    pred: &Tensor<f64>,
    gt: &Tensor<f64>,
    valid: impl Fn(usize) -> bool,
) -> Option<(f64, f64)> {
    assert_eq!(pred.dims(), gt.dims());
    let mut n = 0usize;
    let mut mre = 0.0;
    let mut near = 0usize;
    for i in 0..pred.numel() {
        if !valid(i) {
            continue;
        }
        let (p, g) = (pred.data()[i], gt.data()[i]);
        assert!(g > 0.0, "gt depth must be positive on valid pixels");
        n += 1;
        mre += (p - g).abs() / g;
        let ratio = (p / g).max(g / p.max(1e-12));
        if ratio < 1.25 {
            near += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some((mre / n as f64, near as f64 / n as f64))
    }
}

/// One 3D detection: an axis-aligned view-space box with a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection3D {
    pub frame: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub score: f64,
}

impl Detection3D {
    pub fn volume(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).max(0.0)).product()
    }
}

/// Volume IOU of two axis-aligned 3D boxes.
pub fn iou3d(a: &Detection3D, b: &Detection3D) -> f64 {
    let mut inter = 1.0;
    for ax in 0..3 {
        let lo = a.min[ax].max(b.min[ax]);
        let hi = a.max[ax].min(b.max[ax]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// View-space AABB of the above-threshold voxels of one object in one
/// frame, with score `max opacity * presence`. `None` when no voxel
/// clears the threshold.
#[allow(clippy::too_many_arguments)]
pub fn voxel_detection(
    grid: &Tensor<f64>,
    presence: f64,
    loc: Vector3<f64>,
    azimuth: f64,
    spacing: f64,
    camera: &CameraTrack,
    frame: usize,
    opacity_threshold: f64,
) -> Option<Detection3D> {
    let v = grid.dims()[0];
    let m = camera.extrinsics[frame] * pose_to_transform(&ObjectPose::new(loc, azimuth));
    let mut bb_min = [f64::INFINITY; 3];
    let mut bb_max = [f64::NEG_INFINITY; 3];
    let mut max_op: f64 = 0.0;
    let half = v as f64 / 2.0;
    for ix in 0..v {
        for iy in 0..v {
            for iz in 0..v {
                let op = grid.at(&[ix, iy, iz, 3]);
                if op <= opacity_threshold {
                    continue;
                }
                max_op = max_op.max(op);
                for corner in 0..8 {
                    let p = Vector4::new(
                        (ix as f64 + ((corner) & 1) as f64 - half) * spacing,
                        (iy as f64 + ((corner >> 1) & 1) as f64 - half) * spacing,
                        (iz as f64 + ((corner >> 2) & 1) as f64 - half) * spacing,
                        1.0,
                    );
                    let q = m * p;
                    for (ax, qv) in [q.x, q.y, q.z].into_iter().enumerate() {
                        bb_min[ax] = bb_min[ax].min(qv);
                        bb_max[ax] = bb_max[ax].max(qv);
                    }
                }
            }
        }
    }
    if max_op == 0.0 {
        return None;
    }
    Some(Detection3D { frame, min: bb_min, max: bb_max, score: max_op * presence })
}

/// View-space AABB of a world-space vertex set, score = presence.
pub fn mesh_detection(
    verts_world: &Tensor<f64>,
    presence: f64,
    camera: &CameraTrack,
    frame: usize,
) -> Detection3D {
    let e = &camera.extrinsics[frame];
    let mut bb_min = [f64::INFINITY; 3];
    let mut bb_max = [f64::NEG_INFINITY; 3];
    for i in 0..verts_world.dims()[0] {
        let p = Vector4::new(
            verts_world.at(&[i, 0]),
            verts_world.at(&[i, 1]),
            verts_world.at(&[i, 2]),
            1.0,
        );
        let q = e * p;
        for (ax, qv) in [q.x, q.y, q.z].into_iter().enumerate() {
            bb_min[ax] = bb_min[ax].min(qv);
            bb_max[ax] = bb_max[ax].max(qv);
        }
    }
    Detection3D { frame, min: bb_min, max: bb_max, score: presence }
}

const AP_IOU_THRESHOLD: f64 = 0.3;

/// Average precision of 3D detections against ground-truth boxes:
/// score-ranked greedy matching at IOU > 0.3 (one detection per gt,
/// extras are false positives), then the area under the
/// monotone-envelope-interpolated precision-recall curve.
pub fn detection_ap(preds: &[Detection3D], gts: &[Detection3D]) -> f64 {
    if gts.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    if preds.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let mut claimed = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if claimed[gi] || g.frame != p.frame {
                continue;
            }
            let iou = iou3d(p, g);
            if iou > AP_IOU_THRESHOLD && best.map(|(_, b)| iou > b).unwrap_or(true) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                claimed[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    // Precision-recall points, then the interpolated area.
    let n_gt = gts.len() as f64;
    let mut points = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt, tp as f64 / (i + 1) as f64));
    }
    interpolated_ap(&points)
}

/// Area under the monotone precision envelope of (recall, precision)
/// points (recall non-decreasing).
fn interpolated_ap(points: &[(f64, f64)]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            let env = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * env;
            prev_recall = r;
        }
    }
    ap
}

/// Summary report of one evaluation run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fg_iou: f64,
    pub sc: f64,
    pub msc: f64,
    pub sc_track: f64,
    pub msc_track: f64,
    pub mre: f64,
    pub frac125: f64,
    pub ap_3d: f64,
}
