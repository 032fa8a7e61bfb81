//! Cross-camera association of tracklets by appearance.
//!
//! Every tracklet is summarised by the mean of its most recent embeddings.
//! Cameras are processed in order: the first one seeds the identity pool and
//! each later camera is matched against the pool by a thresholded
//! assignment on cosine distance. Matched tracklets join the pool identity,
//! the rest open new identities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::lap::{self, CostMatrix};
use crate::trackio::{EmbeddingSet, EmbeddingTrack, TrackSet};

#[derive(Debug, Error)]
pub enum IctError {
    #[error("tracklet {0} has no embeddings")]
    EmptyTrack(u32),
    #[error("camera {camera}, tracklet {id}: zero-norm embedding")]
    ZeroNorm { camera: String, id: u32 },
    #[error("camera {camera}, tracklet {id}: no embeddings for this tracklet")]
    MissingEmbeddings { camera: String, id: u32 },
    #[error("embedding lengths differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("camera {0} appears more than once")]
    DuplicateCamera(String),
    #[error("association threshold must lie in (0, 2), got {0}")]
    Alpha(f64),
    #[error("no cameras given")]
    NoCameras,
    #[error("line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IctError>;

/// Frames averaged into a tracklet embedding.
pub const DEFAULT_LAST_K: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssocConfig {
    /// Pairs farther apart than this cosine distance are never matched.
    pub alpha: f64,
    pub last_k: usize,
}

impl AssocConfig {
    /// Threshold used for MMCT-style data.
    pub fn mmct() -> Self {
        Self {
            alpha: 0.5,
            last_k: DEFAULT_LAST_K,
        }
    }

    /// Threshold used for DHU-MTMMC-style data.
    pub fn dhu() -> Self {
        Self {
            alpha: 0.8,
            last_k: DEFAULT_LAST_K,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(IctError::Alpha(self.alpha));
        }
        Ok(())
    }
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self::mmct()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletEmbedding {
    pub camera_id: String,
    pub tracklet_id: u32,
    pub vector: Vec<f64>,
}

/// Mean of the vectors of the last `min(last_k, len)` entries.
pub fn mean_embedding(track: &EmbeddingTrack, last_k: usize) -> Result<Vec<f64>> {
    let entries = track.entries();
    if entries.is_empty() || last_k == 0 {
        return Err(IctError::EmptyTrack(track.id));
    }
    let tail = &entries[entries.len() - last_k.min(entries.len())..];
    let mut mean = vec![0.0; tail[0].1.len()];
    for (_, v) in tail {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = tail.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_nonzero(e: &TrackletEmbedding) -> Result<f64> {
    let n = norm(&e.vector);
    if n == 0.0 || !n.is_finite() {
        return Err(IctError::ZeroNorm {
            camera: e.camera_id.clone(),
            id: e.tracklet_id,
        });
    }
    Ok(n)
}

/// Cosine distances, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// `D[m][n] = 1 - cos(q_m, f_n)`, clamped into `[0, 2]`.
pub fn distance_matrix(q: &[TrackletEmbedding], f: &[TrackletEmbedding]) -> Result<DistanceMatrix> {
    let qn = q.iter().map(check_nonzero).collect::<Result<Vec<_>>>()?;
    let fnorm = f.iter().map(check_nonzero).collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(q.len() * f.len());
    for (a, na) in q.iter().zip(&qn) {
        for (b, nb) in f.iter().zip(&fnorm) {
            if a.vector.len() != b.vector.len() {
                return Err(IctError::DimensionMismatch(a.vector.len(), b.vector.len()));
            }
            let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
            values.push((1.0 - dot / (na * nb)).clamp(0.0, 2.0));
        }
    }
    Ok(DistanceMatrix {
        rows: q.len(),
        cols: f.len(),
        values,
    })
}

/// Minimum-cost matching restricted to cells with `D <= alpha`.
pub fn associate(d: &DistanceMatrix, config: &AssocConfig) -> Vec<(usize, usize)> {
    let feasible = d.values.iter().map(|&v| v <= config.alpha).collect();
    let m = CostMatrix::with_mask(d.rows, d.cols, d.values.clone(), feasible)
        .expect("distances are finite and non-negative");
    let mut pairs = lap::solve(&m).pairs;
    pairs.sort_unstable();
    pairs
}

/// `(camera_id, tracklet_id) -> global_id`, ids contiguous from 1.
pub type GlobalIdMap = BTreeMap<(String, u32), u32>;

/// One camera's tracklets and their per-frame embeddings.
#[derive(Debug, Clone)]
pub struct CameraTracks {
    pub tracks: TrackSet,
    pub embeddings: EmbeddingSet,
}

/// Tracklet embeddings of one camera, ascending tracklet id.
pub fn camera_embeddings(camera: &CameraTracks, last_k: usize) -> Result<Vec<TrackletEmbedding>> {
    let cam = &camera.tracks.camera_id;
    camera
        .tracks
        .ids()
        .map(|id| {
            let track =
                camera
                    .embeddings
                    .get(&id)
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| IctError::MissingEmbeddings {
                        camera: cam.clone(),
                        id,
                    })?;
            let e = TrackletEmbedding {
                camera_id: cam.clone(),
                tracklet_id: id,
                vector: mean_embedding(track, last_k)?,
            };
            check_nonzero(&e)?;
            Ok(e)
        })
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

/// Pool entry: one global identity, represented by the normalized sum of its
/// members' unit vectors.
struct PoolIdentity {
    global_id: u32,
    sum: Vec<f64>,
}

impl PoolIdentity {
    fn embedding(&self) -> TrackletEmbedding {
        TrackletEmbedding {
            camera_id: String::new(),
            tracklet_id: self.global_id,
            vector: self.sum.clone(),
        }
    }
}

/// Sequential association of cameras against a growing identity pool.
pub fn assign_global_ids(cameras: &[CameraTracks], config: &AssocConfig) -> Result<GlobalIdMap> {
    config.validate()?;
    if cameras.is_empty() {
        return Err(IctError::NoCameras);
    }
    let mut seen = BTreeSet::new();
    for c in cameras {
        if !seen.insert(c.tracks.camera_id.clone()) {
            return Err(IctError::DuplicateCamera(c.tracks.camera_id.clone()));
        }
    }
    let mut map = GlobalIdMap::new();
    let mut pool: Vec<PoolIdentity> = Vec::new();
    for camera in cameras {
        let embeddings = camera_embeddings(camera, config.last_k)?;
        let mut matched: Vec<Option<usize>> = vec![None; embeddings.len()];
        if !pool.is_empty() && !embeddings.is_empty() {
            let rows: Vec<TrackletEmbedding> = pool.iter().map(PoolIdentity::embedding).collect();
            let d = distance_matrix(&rows, &embeddings)?;
            for (r, c) in associate(&d, config) {
                matched[c] = Some(r);
            }
        }
        for (e, m) in embeddings.iter().zip(matched) {
            let u = unit(&e.vector);
            let slot = match m {
                Some(r) => r,
                None => {
                    pool.push(PoolIdentity {
                        global_id: pool.len() as u32 + 1,
                        sum: vec![0.0; u.len()],
                    });
                    pool.len() - 1
                }
            };
            pool[slot].sum.iter_mut().zip(&u).for_each(|(s, x)| *s += x);
            map.insert((e.camera_id.clone(), e.tracklet_id), pool[slot].global_id);
        }
    }
    Ok(map)
}

/// `camera_id,tracklet_id,global_id` rows in key order.
pub fn write_global_ids(map: &GlobalIdMap) -> String {
    let mut out = String::new();
    for ((cam, id), gid) in map {
        let _ = writeln!(out, "{cam},{id},{gid}");
    }
    out
}

pub fn parse_global_ids(text: &str) -> Result<GlobalIdMap> {
    let mut map = GlobalIdMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: &str| IctError::Csv {
            line: line_no,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(err("expected camera_id,tracklet_id,global_id"));
        }
        let id: u32 = fields[1].parse().map_err(|_| err("bad tracklet id"))?;
        let gid: u32 = fields[2].parse().map_err(|_| err("bad global id"))?;
        if map.insert((fields[0].to_string(), id), gid).is_some() {
            return Err(err("duplicate (camera, tracklet) key"));
        }
    }
    Ok(map)
}

pub fn write_global_ids_file(path: impl AsRef<Path>, map: &GlobalIdMap) -> Result<()> {
    std::fs::write(path, write_global_ids(map))?;
    Ok(())
}

pub fn read_global_ids_file(path: impl AsRef<Path>) -> Result<GlobalIdMap> {
    parse_global_ids(&std::fs::read_to_string(path)?)
}
