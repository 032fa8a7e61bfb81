//! Repairs fragmented single-camera trajectories.
//!
//! Candidate (predecessor, successor) pairs are gated by the frame gap and
//! the distance between the predecessor's last box centre and the
//! successor's first box centre, scored by the link model, and matched by a
//! rectangular assignment on `1 - p_hat`. Accepted matches are chained and
//! each chain becomes one trajectory under its smallest id.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::lap::{self, CostMatrix};
use crate::linker::{self, LinkerError, LinkerParams};
use crate::trackio::{TrackSet, Tracklet};
use crate::unionfind::UnionFind;

#[derive(Debug, Error)]
pub enum GlobalLinkError {
    #[error("invalid gate: {0}")]
    Gate(String),
    #[error("pair {pred} -> {succ} references a tracklet that is not in the set")]
    UnknownTracklet { pred: u32, succ: u32 },
    #[error("merging tracklets {ids:?} repeats frame {frame}")]
    DuplicateFrame { ids: Vec<u32>, frame: u32 },
    #[error(transparent)]
    Linker(#[from] LinkerError),
}

pub type Result<T> = std::result::Result<T, GlobalLinkError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    /// Exclusive lower bound of the frame gap `start(succ) - end(pred)`.
    pub min_gap: u32,
    /// Inclusive upper bound of the frame gap.
    pub max_gap: u32,
    /// Largest junction distance between box centres, in pixels.
    pub spatial_radius: f64,
    /// Pairs scoring below this are never linked.
    pub score_threshold: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            min_gap: 0,
            max_gap: 10,
            spatial_radius: 90.0,
            score_threshold: 0.5,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_gap <= self.min_gap {
            return Err(GlobalLinkError::Gate(format!(
                "empty gap interval ({}, {}]",
                self.min_gap, self.max_gap
            )));
        }
        if !(self.spatial_radius > 0.0 && self.spatial_radius.is_finite()) {
            return Err(GlobalLinkError::Gate(format!(
                "spatial radius must be positive, got {}",
                self.spatial_radius
            )));
        }
        // 1.0 is accepted: it disables linking since p_hat < 1 always
        if !(self.score_threshold > 0.0 && self.score_threshold <= 1.0) {
            return Err(GlobalLinkError::Gate(format!(
                "score threshold must lie in (0, 1], got {}",
                self.score_threshold
            )));
        }
        Ok(())
    }

    pub fn admits(&self, gap: i64, center_distance: f64) -> bool {
        gap > i64::from(self.min_gap) && gap <= i64::from(self.max_gap) && center_distance <= self.spatial_radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub pred_id: u32,
    pub succ_id: u32,
    pub gap: u32,
    pub center_distance: f64,
    /// Same-identity probability; 0 until scored.
    pub p_hat: f64,
    /// `1 - p_hat`.
    pub edge_cost: f64,
}

fn junction(pred: &Tracklet, succ: &Tracklet) -> (i64, f64) {
    let gap = i64::from(succ.start_frame()) - i64::from(pred.end_frame());
    let (ax, ay) = pred.last().bbox.center();
    let (bx, by) = succ.first().bbox.center();
    (gap, (bx - ax).hypot(by - ay))
}

/// All gated ordered pairs, sorted by `(pred_id, succ_id)`.
pub fn candidate_pairs(tracklets: &TrackSet, gate: &GateConfig) -> Vec<CandidatePair> {
    let mut by_start: Vec<&Tracklet> = tracklets.tracklets().collect();
    by_start.sort_by_key(|t| (t.start_frame(), t.id()));
    let starts: Vec<u32> = by_start.iter().map(|t| t.start_frame()).collect();
    let mut out = Vec::new();
    for pred in tracklets.tracklets() {
        let end = u64::from(pred.end_frame());
        let lo = end + u64::from(gate.min_gap);
        let hi = end + u64::from(gate.max_gap);
        let first = starts.partition_point(|&s| u64::from(s) <= lo);
        for succ in by_start[first..]
            .iter()
            .take_while(|t| u64::from(t.start_frame()) <= hi)
        {
            let (gap, dist) = junction(pred, succ);
            if gate.admits(gap, dist) {
                out.push(CandidatePair {
                    pred_id: pred.id(),
                    succ_id: succ.id(),
                    gap: gap as u32,
                    center_distance: dist,
                    p_hat: 0.0,
                    edge_cost: 1.0,
                });
            }
        }
    }
    out.sort_by_key(|p| (p.pred_id, p.succ_id));
    out
}

/// Scores each pair with the link model in eval mode.
///
/// Predecessor windows depend only on the predecessor, so each is embedded
/// once however many pairs it takes part in.
pub fn score_pairs(
    params: &LinkerParams,
    pairs: &[CandidatePair],
    tracklets: &TrackSet,
    image_size: (f64, f64),
) -> Result<Vec<CandidatePair>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut pred_index: HashMap<u32, usize> = HashMap::new();
    let mut windows = Vec::new();
    let mut succ_windows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let unknown = || GlobalLinkError::UnknownTracklet {
            pred: p.pred_id,
            succ: p.succ_id,
        };
        let pred = tracklets.get(p.pred_id).ok_or_else(unknown)?;
        let succ = tracklets.get(p.succ_id).ok_or_else(unknown)?;
        let (wa, wb) = linker::pair_windows(pred, succ, image_size)?;
        pred_index.entry(p.pred_id).or_insert_with(|| {
            windows.push(wa);
            windows.len() - 1
        });
        succ_windows.push(wb);
    }
    let num_preds = windows.len();
    windows.extend(succ_windows);
    let refs: Vec<&linker::Window> = windows.iter().collect();
    let embeddings = linker::embed_windows(params, &refs);
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LinkerError::NonFinite("tracklet embedding").into());
    }
    pairs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let a = &embeddings[pred_index[&p.pred_id]];
            let b = &embeddings[num_preds + k];
            let p_hat = linker::score_embeddings(params, a, b)?;
            Ok(CandidatePair {
                p_hat,
                edge_cost: 1.0 - p_hat,
                ..p.clone()
            })
        })
        .collect()
}

/// Accepted `(pred_id, succ_id)` matches: at most one successor per
/// predecessor and one predecessor per successor.
pub fn match_pairs(scored: &[CandidatePair], gate: &GateConfig) -> Result<Vec<(u32, u32)>> {
    gate.validate()?;
    let eligible: Vec<&CandidatePair> = scored.iter().filter(|p| p.p_hat >= gate.score_threshold).collect();
    if eligible.is_empty() {
        return Ok(Vec::new());
    }
    let mut preds: Vec<u32> = eligible.iter().map(|p| p.pred_id).collect();
    let mut succs: Vec<u32> = eligible.iter().map(|p| p.succ_id).collect();
    preds.sort_unstable();
    preds.dedup();
    succs.sort_unstable();
    succs.dedup();
    let row = |id: u32| preds.binary_search(&id).expect("collected above");
    let col = |id: u32| succs.binary_search(&id).expect("collected above");
    let mut cost = vec![0.0; preds.len() * succs.len()];
    let mut feasible = vec![false; preds.len() * succs.len()];
    for p in &eligible {
        let k = row(p.pred_id) * succs.len() + col(p.succ_id);
        cost[k] = (1.0 - p.p_hat).max(0.0);
        feasible[k] = true;
    }
    let matrix = CostMatrix::with_mask(preds.len(), succs.len(), cost, feasible)
        .map_err(|e| GlobalLinkError::Gate(e.to_string()))?;
    let mut matches: Vec<(u32, u32)> = lap::solve(&matrix)
        .pairs
        .into_iter()
        .map(|(r, c)| (preds[r], succs[c]))
        .collect();
    matches.sort_unstable();
    Ok(matches)
}

/// Merges matched tracklets into chains.
///
/// Each chain keeps its smallest original id and the concatenation of its
/// entries; unmatched tracklets pass through unchanged.
pub fn link(tracklets: &TrackSet, scored: &[CandidatePair], gate: &GateConfig) -> Result<TrackSet> {
    let matches = match_pairs(scored, gate)?;
    if matches.is_empty() {
        return Ok(tracklets.clone());
    }
    let ids: Vec<u32> = tracklets.ids().collect();
    let pos = |id: u32| ids.binary_search(&id).ok();
    let mut uf = UnionFind::new(ids.len());
    for &(a, b) in &matches {
        match (pos(a), pos(b)) {
            (Some(i), Some(j)) => {
                uf.union(i, j);
            }
            _ => return Err(GlobalLinkError::UnknownTracklet { pred: a, succ: b }),
        }
    }
    let mut chains: BTreeMap<usize, Vec<&Tracklet>> = BTreeMap::new();
    for (i, t) in tracklets.tracklets().enumerate() {
        chains.entry(uf.find(i)).or_default().push(t);
    }
    let mut out = TrackSet::new(tracklets.camera_id.clone());
    for members in chains.into_values() {
        let id = members.iter().map(|t| t.id()).min().expect("non-empty chain");
        if members.len() == 1 {
            out.insert(members[0].clone()).expect("ids stay unique");
            continue;
        }
        let mut entries: Vec<_> = members.iter().flat_map(|t| t.entries().iter().copied()).collect();
        entries.sort_by_key(|e| e.frame);
        if let Some(w) = entries.windows(2).find(|w| w[0].frame == w[1].frame) {
            let mut chain_ids: Vec<u32> = members.iter().map(|t| t.id()).collect();
            chain_ids.sort_unstable();
            return Err(GlobalLinkError::DuplicateFrame {
                ids: chain_ids,
                frame: w[0].frame,
            });
        }
        let merged = Tracklet::new(id, entries).expect("entries come from valid tracklets");
        out.insert(merged).expect("ids stay unique");
    }
    Ok(out)
}

/// Gate, score and link in one call.
pub fn repair(
    tracklets: &TrackSet,
    params: &LinkerParams,
    gate: &GateConfig,
    image_size: (f64, f64),
) -> Result<TrackSet> {
    gate.validate()?;
    let pairs = candidate_pairs(tracklets, gate);
    let scored = score_pairs(params, &pairs, tracklets, image_size)?;
    link(tracklets, &scored, gate)
}
