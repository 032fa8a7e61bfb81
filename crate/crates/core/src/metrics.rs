//! CLEAR-MOT and identity (IDF1) evaluation.
//!
//! Frame-level matching follows the CLEAR protocol: a pair matched in the
//! previous frame is kept while its IoU stays above the threshold, and the
//! remaining boxes are matched by minimum total `1 - IoU`. Identity measures
//! use one global trajectory-level assignment maximizing the number of
//! overlapping detections.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::ict::GlobalIdMap;
use crate::lap::{self, CostMatrix};
use crate::trackio::{BBox, TrackSet};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    Threshold(f64),
    #[error("camera {camera}: tracklet {id} has no global id")]
    MissingGlobalId { camera: String, id: u32 },
    #[error("camera {0} appears more than once")]
    DuplicateCamera(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Identity precision, recall and F1 with the underlying counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdScores {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SctReport {
    pub mota: f64,
    pub id: IdScores,
    pub id_switches: usize,
    pub fragmentations: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub mostly_tracked: usize,
    pub mostly_lost: usize,
    pub gt_boxes: usize,
    pub gt_tracks: usize,
}

impl SctReport {
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("MOTA", format!("{:.6}", self.mota)),
            ("IDF1", format!("{:.6}", self.id.idf1)),
            ("IDP", format!("{:.6}", self.id.idp)),
            ("IDR", format!("{:.6}", self.id.idr)),
            ("IDS", self.id_switches.to_string()),
            ("FRAG", self.fragmentations.to_string()),
            ("FP", self.false_positives.to_string()),
            ("FN", self.false_negatives.to_string()),
            ("MT", self.mostly_tracked.to_string()),
            ("ML", self.mostly_lost.to_string()),
            ("GT", self.gt_boxes.to_string()),
        ]
    }
}

impl IdScores {
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("IDF1", format!("{:.6}", self.idf1)),
            ("IDP", format!("{:.6}", self.idp)),
            ("IDR", format!("{:.6}", self.idr)),
            ("IDTP", self.idtp.to_string()),
            ("IDFP", self.idfp.to_string()),
            ("IDFN", self.idfn.to_string()),
        ]
    }
}

/// Two-column plain-text table.
pub fn format_table(rows: &[(&str, String)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<width$}  {v:>12}");
    }
    out
}

/// `metric,value` CSV with a header line.
pub fn format_csv(rows: &[(&str, String)]) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::Threshold(t))
    }
}

/// Detections of one side: `(camera, frame) -> [(identity, box)]`.
type Frames = BTreeMap<(usize, u32), Vec<(u32, BBox)>>;

/// Identity measures from per-frame detections on both sides.
///
/// `n[i][j]` counts the (camera, frame) cells where identities `i` and `j`
/// both have a box overlapping by at least the threshold. The assignment
/// runs on the square `(G + P)` expansion: real pairs cost the detections
/// they leave unexplained, each identity may instead take its own dummy at
/// the cost of its whole length, and dummy-dummy cells are free.
fn id_scores(gt: &Frames, pred: &Frames, threshold: f64) -> IdScores {
    let mut gt_len: BTreeMap<u32, usize> = BTreeMap::new();
    let mut pred_len: BTreeMap<u32, usize> = BTreeMap::new();
    for boxes in gt.values() {
        for (id, _) in boxes {
            *gt_len.entry(*id).or_default() += 1;
        }
    }
    for boxes in pred.values() {
        for (id, _) in boxes {
            *pred_len.entry(*id).or_default() += 1;
        }
    }
    let gt_ids: Vec<u32> = gt_len.keys().copied().collect();
    let pred_ids: Vec<u32> = pred_len.keys().copied().collect();
    let gt_index: HashMap<u32, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let pred_index: HashMap<u32, usize> = pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut overlap: HashMap<(usize, usize), usize> = HashMap::new();
    for (key, gboxes) in gt {
        let Some(pboxes) = pred.get(key) else { continue };
        // an identity pair scores at most once per cell
        let mut seen = BTreeSet::new();
        for (gid, gb) in gboxes {
            for (pid, pb) in pboxes {
                let pair = (gt_index[gid], pred_index[pid]);
                if gb.iou(pb) >= threshold && seen.insert(pair) {
                    *overlap.entry(pair).or_default() += 1;
                }
            }
        }
    }

    let total_gt: usize = gt_len.values().sum();
    let total_pred: usize = pred_len.values().sum();
    let (g, p) = (gt_ids.len(), pred_ids.len());
    let idtp = if g == 0 || p == 0 || overlap.is_empty() {
        0
    } else {
        let n = g + p;
        let glen: Vec<usize> = gt_ids.iter().map(|id| gt_len[id]).collect();
        let plen: Vec<usize> = pred_ids.iter().map(|id| pred_len[id]).collect();
        let m = CostMatrix::from_fn(n, n, |r, c| match (r < g, c < p) {
            (true, true) => {
                let both = overlap.get(&(r, c)).copied().unwrap_or(0);
                // the same box can only be explained once per side
                let both = both.min(glen[r]).min(plen[c]);
                Some((glen[r] + plen[c] - 2 * both) as f64)
            }
            (true, false) => (c - p == r).then_some(glen[r] as f64),
            (false, true) => (r - g == c).then_some(plen[c] as f64),
            (false, false) => Some(0.0),
        })
        .expect("finite non-negative costs");
        lap::solve(&m)
            .pairs
            .iter()
            .filter(|&&(r, c)| r < g && c < p)
            .map(|&(r, c)| overlap.get(&(r, c)).copied().unwrap_or(0).min(glen[r]).min(plen[c]))
            .sum()
    };
    let idfp = total_pred - idtp;
    let idfn = total_gt - idtp;
    IdScores {
        idf1: ratio(2 * idtp, total_gt + total_pred),
        idp: ratio(idtp, total_pred),
        idr: ratio(idtp, total_gt),
        idtp,
        idfp,
        idfn,
    }
}

fn frames_of(set: &TrackSet, camera: usize, relabel: impl Fn(u32) -> u32, out: &mut Frames) {
    for t in set.tracklets() {
        let id = relabel(t.id());
        for e in t.entries() {
            out.entry((camera, e.frame)).or_default().push((id, e.bbox));
        }
    }
}

/// Single-camera CLEAR-MOT and identity metrics.
pub fn evaluate(gt: &TrackSet, pred: &TrackSet, iou_threshold: f64) -> Result<SctReport> {
    check_threshold(iou_threshold)?;
    let mut gt_frames = Frames::new();
    let mut pred_frames = Frames::new();
    frames_of(gt, 0, |id| id, &mut gt_frames);
    frames_of(pred, 0, |id| id, &mut pred_frames);

    let frames: BTreeSet<u32> = gt_frames.keys().chain(pred_frames.keys()).map(|&(_, f)| f).collect();
    // last pred id each GT identity was matched to, over all earlier frames
    let mut last_match: HashMap<u32, u32> = HashMap::new();
    // whether the GT identity was matched at its previous occurrence
    let mut tracked_before: HashMap<u32, bool> = HashMap::new();
    let mut covered: HashMap<u32, usize> = HashMap::new();
    let (mut ids, mut frag, mut fp, mut fneg) = (0, 0, 0, 0);
    let empty = Vec::new();

    for f in frames {
        let gts = gt_frames.get(&(0, f)).unwrap_or(&empty);
        let preds = pred_frames.get(&(0, f)).unwrap_or(&empty);
        let mut gt_used = vec![false; gts.len()];
        let mut pred_used = vec![false; preds.len()];
        let mut matches: Vec<(usize, usize)> = Vec::new();

        for (gi, (gid, gb)) in gts.iter().enumerate() {
            let Some(&pid) = last_match.get(gid) else { continue };
            if !tracked_before.get(gid).copied().unwrap_or(false) {
                continue;
            }
            if let Some(pj) = preds.iter().position(|(id, _)| *id == pid) {
                if !pred_used[pj] && gb.iou(&preds[pj].1) >= iou_threshold {
                    gt_used[gi] = true;
                    pred_used[pj] = true;
                    matches.push((gi, pj));
                }
            }
        }

        let free_g: Vec<usize> = (0..gts.len()).filter(|&i| !gt_used[i]).collect();
        let free_p: Vec<usize> = (0..preds.len()).filter(|&j| !pred_used[j]).collect();
        if !free_g.is_empty() && !free_p.is_empty() {
            let m = CostMatrix::from_fn(free_g.len(), free_p.len(), |r, c| {
                let iou = gts[free_g[r]].1.iou(&preds[free_p[c]].1);
                (iou >= iou_threshold).then_some(1.0 - iou)
            })
            .expect("IoU costs lie in [0, 1]");
            for (r, c) in lap::solve(&m).pairs {
                let (gi, pj) = (free_g[r], free_p[c]);
                gt_used[gi] = true;
                pred_used[pj] = true;
                matches.push((gi, pj));
            }
        }

        for &(gi, pj) in &matches {
            let gid = gts[gi].0;
            let pid = preds[pj].0;
            if let Some(prev) = last_match.insert(gid, pid) {
                if prev != pid {
                    ids += 1;
                }
                if !tracked_before[&gid] {
                    frag += 1;
                }
            }
            *covered.entry(gid).or_default() += 1;
        }
        for (gi, (gid, _)) in gts.iter().enumerate() {
            tracked_before.insert(*gid, gt_used[gi]);
        }
        fp += pred_used.iter().filter(|u| !**u).count();
        fneg += gt_used.iter().filter(|u| !**u).count();
    }

    let (mut mt, mut ml) = (0, 0);
    for t in gt.tracklets() {
        let c = covered.get(&t.id()).copied().unwrap_or(0) as f64 / t.len() as f64;
        if c >= 0.8 {
            mt += 1;
        } else if c <= 0.2 {
            ml += 1;
        }
    }
    let gt_boxes = gt.num_detections();
    // with no ground truth at all the error count is taken over one box
    let mota = 1.0 - (fp + fneg + ids) as f64 / gt_boxes.max(1) as f64;
    Ok(SctReport {
        mota,
        id: id_scores(&gt_frames, &pred_frames, iou_threshold),
        id_switches: ids,
        fragmentations: frag,
        false_positives: fp,
        false_negatives: fneg,
        mostly_tracked: mt,
        mostly_lost: ml,
        gt_boxes,
        gt_tracks: gt.len(),
    })
}

/// Cross-camera identity measures.
///
/// Ground-truth track ids are global identities. Prediction tracklets are
/// mapped through `global_ids` keyed by `(camera_id, tracklet id)`. Cameras
/// are paired by `camera_id`; boxes only overlap within the same camera.
pub fn evaluate_mtmc(
    gt: &[TrackSet],
    pred: &[TrackSet],
    global_ids: &GlobalIdMap,
    iou_threshold: f64,
) -> Result<IdScores> {
    check_threshold(iou_threshold)?;
    let mut cameras: BTreeMap<&str, usize> = BTreeMap::new();
    for set in gt {
        let next = cameras.len();
        if cameras.insert(&set.camera_id, next).is_some() {
            return Err(MetricsError::DuplicateCamera(set.camera_id.clone()));
        }
    }
    let mut gt_frames = Frames::new();
    for set in gt {
        frames_of(set, cameras[set.camera_id.as_str()], |id| id, &mut gt_frames);
    }
    let mut pred_frames = Frames::new();
    let mut seen_pred = BTreeSet::new();
    for set in pred {
        if !seen_pred.insert(set.camera_id.as_str()) {
            return Err(MetricsError::DuplicateCamera(set.camera_id.clone()));
        }
        for t in set.tracklets() {
            if !global_ids.contains_key(&(set.camera_id.clone(), t.id())) {
                return Err(MetricsError::MissingGlobalId {
                    camera: set.camera_id.clone(),
                    id: t.id(),
                });
            }
        }
        let next = cameras.len();
        let cam = *cameras.entry(&set.camera_id).or_insert(next);
        frames_of(
            set,
            cam,
            |id| global_ids[&(set.camera_id.clone(), id)],
            &mut pred_frames,
        );
    }
    Ok(id_scores(&gt_frames, &pred_frames, iou_threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trackio::{Entry, Tracklet};
    use proptest::prelude::*;

    fn track(id: u32, frames: impl IntoIterator<Item = u32>, x: f64) -> Tracklet {
        Tracklet::new(
            id,
            frames
                .into_iter()
                .map(|f| Entry::new(f, BBox::new(x, 10.0, 20.0, 40.0)))
                .collect(),
        )
        .unwrap()
    }

    fn set(cam: &str, ts: impl IntoIterator<Item = Tracklet>) -> TrackSet {
        TrackSet::from_tracklets(cam, ts).unwrap()
    }

    #[test]
    fn perfect_tracker() {
        let gt = set("c", [track(1, 1..=30, 0.0), track(2, 5..=40, 100.0)]);
        let r = evaluate(&gt, &gt, 0.5).unwrap();
        assert_eq!(r.mota, 1.0);
        assert_eq!(r.id.idf1, 1.0);
        assert_eq!(
            (r.id_switches, r.fragmentations, r.false_positives, r.false_negatives),
            (0, 0, 0, 0)
        );
        assert_eq!((r.mostly_tracked, r.mostly_lost), (2, 0));
    }

    #[test]
    fn empty_prediction() {
        let gt = set("c", [track(1, 1..=30, 0.0)]);
        let r = evaluate(&gt, &TrackSet::new("c"), 0.5).unwrap();
        assert_eq!(r.mota, 0.0);
        assert_eq!(r.id.idf1, 0.0);
        assert_eq!(r.false_negatives, 30);
        assert_eq!(r.mostly_lost, 1);
    }

    #[test]
    fn half_split_track() {
        let gt = set("c", [track(1, 1..=100, 0.0)]);
        let pred = set("c", [track(7, 1..=50, 0.0), track(9, 51..=100, 0.0)]);
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!(r.id_switches, 1);
        assert_eq!(r.fragmentations, 0);
        // IDTP 50, IDFP 50, IDFN 50
        assert_eq!(r.id.idf1, 2.0 * 50.0 / (2.0 * 50.0 + 50.0 + 50.0));
        assert_eq!((r.id.idtp, r.id.idfp, r.id.idfn), (50, 50, 50));
        assert_eq!(r.mota, 1.0 - 1.0 / 100.0);
    }

    #[test]
    fn gap_then_resume_is_a_fragmentation() {
        let gt = set("c", [track(1, 1..=20, 0.0)]);
        let pred = set("c", [track(3, (1..=8).chain(13..=20), 0.0)]);
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!((r.fragmentations, r.id_switches, r.false_negatives), (1, 0, 4));
    }

    #[test]
    fn carry_over_beats_a_better_newcomer() {
        // pred 2 overlaps GT perfectly from frame 2 on, but pred 1 stays above
        // the threshold, so the established match is kept
        let gt = set("c", [track(1, 1..=3, 0.0)]);
        let near = Tracklet::new(
            1,
            (1..=3)
                .map(|f| Entry::new(f, BBox::new(if f == 1 { 0.0 } else { 3.0 }, 10.0, 20.0, 40.0)))
                .collect(),
        )
        .unwrap();
        let pred = set("c", [near, track(2, 2..=3, 0.0)]);
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!(r.id_switches, 0);
        assert_eq!(r.false_positives, 2);
    }

    #[test]
    fn low_overlap_is_unmatched() {
        let gt = set("c", [track(1, 1..=5, 0.0)]);
        let pred = set("c", [track(1, 1..=5, 15.0)]);
        let r = evaluate(&gt, &pred, 0.5).unwrap();
        assert_eq!((r.false_positives, r.false_negatives), (5, 5));
        assert_eq!(r.mota, -1.0);
        assert_eq!(r.id.idf1, 0.0);
    }

    #[test]
    fn threshold_is_validated() {
        let gt = set("c", [track(1, 1..=5, 0.0)]);
        assert_eq!(evaluate(&gt, &gt, 0.0), Err(MetricsError::Threshold(0.0)));
        assert!(evaluate(&gt, &gt, 1.5).is_err());
    }

    #[test]
    fn mtmc_split_identity_scores_below_merged() {
        let gt = [set("a", [track(1, 1..=10, 0.0)]), set("b", [track(1, 1..=10, 50.0)])];
        let pred = [set("a", [track(4, 1..=10, 0.0)]), set("b", [track(8, 1..=10, 50.0)])];
        let merged: GlobalIdMap = [(("a".into(), 4), 1), (("b".into(), 8), 1)].into_iter().collect();
        let split: GlobalIdMap = [(("a".into(), 4), 1), (("b".into(), 8), 2)].into_iter().collect();
        let good = evaluate_mtmc(&gt, &pred, &merged, 0.5).unwrap();
        let bad = evaluate_mtmc(&gt, &pred, &split, 0.5).unwrap();
        assert_eq!(good.idf1, 1.0);
        assert_eq!(bad.idf1, 0.5);
        assert!(bad.idf1 < good.idf1);
    }

    #[test]
    fn mtmc_requires_every_tracklet_mapped() {
        let gt = [set("a", [track(1, 1..=3, 0.0)])];
        let pred = [set("a", [track(4, 1..=3, 0.0)])];
        assert_eq!(
            evaluate_mtmc(&gt, &pred, &GlobalIdMap::new(), 0.5),
            Err(MetricsError::MissingGlobalId {
                camera: "a".into(),
                id: 4
            })
        );
    }

    #[test]
    fn csv_and_table() {
        let gt = set("c", [track(1, 1..=4, 0.0)]);
        let r = evaluate(&gt, &gt, 0.5).unwrap();
        let csv = format_csv(&r.rows());
        assert!(csv.starts_with("metric,value\nMOTA,1.000000\nIDF1,1.000000\n"));
        assert!(format_table(&r.rows())
            .lines()
            .any(|l| l.starts_with("IDS ") && l.ends_with(" 0")));
    }

    /// Maximum total overlap over all partial injective maps gt -> pred.
    fn brute_idtp(n: &[Vec<usize>]) -> usize {
        fn go(n: &[Vec<usize>], row: usize, used: &mut Vec<bool>) -> usize {
            if row == n.len() {
                return 0;
            }
            let mut best = go(n, row + 1, used);
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.max(n[row][c] + go(n, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        let cols = n.first().map_or(0, Vec::len);
        go(n, 0, &mut vec![false; cols])
    }

    /// Small scenes on a 3-slot lattice: every box sits exactly on one of
    /// three well separated slots, so IoU is either 1 or 0.
    fn scene() -> impl Strategy<Value = (TrackSet, TrackSet)> {
        let side = |max_id: u32| {
            proptest::collection::vec(
                proptest::collection::vec(proptest::option::of((1..=max_id, 0usize..3)), 3),
                1..8,
            )
        };
        (side(3), side(4)).prop_map(|(g, p)| {
            let build = |rows: Vec<Vec<Option<(u32, usize)>>>| {
                let mut per_id: BTreeMap<u32, Vec<Entry>> = BTreeMap::new();
                for (f, slots) in rows.iter().enumerate() {
                    let mut used_slots = BTreeSet::new();
                    for cell in slots.iter().flatten() {
                        let (id, slot) = *cell;
                        let list = per_id.entry(id).or_default();
                        if list.last().is_some_and(|e| e.frame == f as u32 + 1) || !used_slots.insert(slot) {
                            continue;
                        }
                        list.push(Entry::new(
                            f as u32 + 1,
                            BBox::new(slot as f64 * 100.0, 0.0, 20.0, 40.0),
                        ));
                    }
                }
                TrackSet::from_tracklets(
                    "c",
                    per_id
                        .into_iter()
                        .filter(|(_, e)| !e.is_empty())
                        .map(|(id, e)| Tracklet::new(id, e).unwrap()),
                )
                .unwrap()
            };
            (build(g), build(p))
        })
    }

    fn relabel(set: &TrackSet, perm: impl Fn(u32) -> u32) -> TrackSet {
        TrackSet::from_tracklets("c", set.tracklets().map(|t| t.clone().with_id(perm(t.id())))).unwrap()
    }

    proptest! {
        #[test]
        fn idtp_matches_brute_force((gt, pred) in scene()) {
            let r = evaluate(&gt, &pred, 0.5).unwrap();
            let gids: Vec<u32> = gt.ids().collect();
            let pids: Vec<u32> = pred.ids().collect();
            let n: Vec<Vec<usize>> = gids.iter().map(|&g| pids.iter().map(|&p| {
                let (a, b) = (gt.get(g).unwrap(), pred.get(p).unwrap());
                a.entries().iter().filter(|e| b.entry_at(e.frame).is_some_and(|x| x.bbox.iou(&e.bbox) >= 0.5)).count()
            }).collect()).collect();
            prop_assert_eq!(r.id.idtp, brute_idtp(&n));
        }

        #[test]
        fn report_invariants((gt, pred) in scene()) {
            let r = evaluate(&gt, &pred, 0.5).unwrap();
            prop_assert!(r.mota <= 1.0);
            if r.id.idp + r.id.idr > 0.0 {
                let h = 2.0 * r.id.idp * r.id.idr / (r.id.idp + r.id.idr);
                prop_assert!((h - r.id.idf1).abs() < 1e-12);
            }
            prop_assert_eq!(r.id.idtp + r.id.idfn, gt.num_detections());
            prop_assert_eq!(r.id.idtp + r.id.idfp, pred.num_detections());
            prop_assert_eq!(r.mostly_tracked + r.mostly_lost <= gt.len(), true);
        }

        #[test]
        fn relabeling_invariance((gt, pred) in scene(), shift in 1u32..50) {
            let a = evaluate(&gt, &pred, 0.5).unwrap();
            // reverse the order of ids as well as shifting them
            let b = evaluate(&gt, &relabel(&pred, |id| 100 + shift - id), 0.5).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn single_camera_mtmc_equals_sct((gt, pred) in scene()) {
            let map: GlobalIdMap = pred.ids().map(|id| (("c".to_string(), id), id)).collect();
            let m = evaluate_mtmc(std::slice::from_ref(&gt), std::slice::from_ref(&pred), &map, 0.5).unwrap();
            prop_assert_eq!(m, evaluate(&gt, &pred, 0.5).unwrap().id);
        }
    }
}
