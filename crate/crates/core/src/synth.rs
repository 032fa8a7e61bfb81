//! Synthetic multi-camera scenes.
//!
//! Pedestrians follow smooth random walks that bounce off the image border.
//! Each identity owns a unit appearance vector; per-frame embeddings add a
//! small bounded perturbation and a per-camera bias. [`fragment`] turns
//! ground truth into tracker-like output by cutting trajectories at random
//! frames and giving the tails fresh ids.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::trackio::{BBox, EmbeddingSet, EmbeddingTrack, Entry, TrackSet, Tracklet, EMBEDDING_DIM};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("cannot place {0} identities at the requested embedding separation")]
    Separation(usize),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub num_identities: usize,
    pub cameras: usize,
    /// Frames per camera, numbered from 1.
    pub frames: u32,
    /// `(width, height)` in pixels.
    pub image_size: (f64, f64),
    /// Standard deviation of the per-frame velocity change, px/frame.
    pub walk_step_std: f64,
    /// Probability that a trajectory (and, recursively, each tail) is cut.
    pub occlusion_rate: f64,
    /// Inclusive range of `start(tail) - end(head)` at a cut; 1 drops no frame.
    pub occlusion_gap: (u32, u32),
    /// Upper bound on the norm of the per-frame embedding perturbation.
    pub embedding_intra_std: f64,
    /// Minimum cosine distance between identity base vectors.
    pub embedding_inter_separation: f64,
    /// Norm of each camera's additive embedding bias.
    pub camera_bias_std: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            cameras: 1,
            frames: 300,
            image_size: (1920.0, 1080.0),
            walk_step_std: 0.3,
            occlusion_rate: 0.5,
            occlusion_gap: (2, 10),
            embedding_intra_std: 0.05,
            embedding_inter_separation: 0.6,
            camera_bias_std: 0.1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SynthError::Config(m));
        if self.num_identities == 0 || self.cameras == 0 || self.frames == 0 {
            return fail("identities, cameras and frames must all be at least 1".into());
        }
        let (w, h) = self.image_size;
        if !(w >= 200.0 && h >= 400.0) {
            return fail(format!("image {w}x{h} is too small for pedestrian boxes"));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return fail(format!("occlusion rate {} outside [0, 1]", self.occlusion_rate));
        }
        let (lo, hi) = self.occlusion_gap;
        if lo == 0 || lo > hi || hi > 10 {
            return fail(format!("occlusion gap [{lo}, {hi}] must lie within 1..=10"));
        }
        for (name, v) in [
            ("walk step std", self.walk_step_std),
            ("embedding intra std", self.embedding_intra_std),
            ("camera bias std", self.camera_bias_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(0.0..2.0).contains(&self.embedding_inter_separation) {
            return fail(format!("separation {} outside [0, 2)", self.embedding_inter_separation));
        }
        Ok(())
    }
}

/// Ground truth and embeddings of one camera; track ids are global identities.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraScene {
    pub gt: TrackSet,
    pub embeddings: EmbeddingSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cameras: Vec<CameraScene>,
    /// Unit base appearance vector of each identity, index `id - 1`.
    pub identity_vectors: Vec<Vec<f64>>,
}

pub fn camera_name(index: usize) -> String {
    format!("cam{}", index + 1)
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn identity_vectors(n: usize, separation: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut failures = 0;
    while out.len() < n {
        let v = unit_gaussian(rng, EMBEDDING_DIM);
        if out.iter().all(|u| cosine_distance(u, &v) >= separation) {
            out.push(v);
        } else {
            failures += 1;
            if failures > 1000 * n {
                return Err(SynthError::Separation(n));
            }
        }
    }
    Ok(out)
}

fn walk(config: &SceneConfig, start: u32, len: u32, rng: &mut ChaCha8Rng) -> Vec<Entry> {
    let (img_w, img_h) = config.image_size;
    let h = rng.random_range(80.0..(img_h / 4.0).max(81.0));
    let w = h * rng.random_range(0.35..0.45);
    let mut x = rng.random_range(0.0..img_w - w);
    let mut y = rng.random_range(0.0..img_h - h);
    let speed = rng.random_range(0.5..4.0);
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin() * 0.5);
    let step = Normal::new(0.0, config.walk_step_std).expect("validated std");
    let reflect = |p: &mut f64, v: &mut f64, hi: f64| {
        if *p < 0.0 {
            *p = -*p;
            *v = -*v;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        }
        *p = p.clamp(0.0, hi);
    };
    let mut entries = Vec::with_capacity(len as usize);
    for f in start..start + len {
        entries.push(Entry::new(f, BBox::new(x, y, w, h)));
        vx = (vx + step.sample(rng)).clamp(-8.0, 8.0);
        vy = (vy + step.sample(rng)).clamp(-4.0, 4.0);
        x += vx;
        y += vy;
        reflect(&mut x, &mut vx, img_w - w);
        reflect(&mut y, &mut vy, img_h - h);
    }
    entries
}

/// Adds a perturbation of norm at most `bound` and renormalizes nothing: the
/// result stays in the raw embedding scale.
fn perturbed(base: &[f64], bias: &[f64], bound: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dir = unit_gaussian(rng, base.len());
    let r = bound * rng.random::<f64>();
    base.iter()
        .zip(bias)
        .zip(dir)
        .map(|((b, c), d)| b + c + r * d)
        .collect()
}

/// Generates ground truth and embeddings for every camera.
pub fn gen_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vectors = identity_vectors(config.num_identities, config.embedding_inter_separation, &mut rng)?;
    let biases: Vec<Vec<f64>> = (0..config.cameras)
        .map(|_| {
            unit_gaussian(&mut rng, EMBEDDING_DIM)
                .into_iter()
                .map(|x| x * config.camera_bias_std)
                .collect()
        })
        .collect();

    // which cameras see each identity: a random non-empty subset
    let mut visible: Vec<Vec<usize>> = Vec::with_capacity(config.num_identities);
    for _ in 0..config.num_identities {
        let count = rng.random_range(1..=config.cameras);
        let mut cams: Vec<usize> = (0..config.cameras).collect();
        cams.shuffle(&mut rng);
        cams.truncate(count);
        cams.sort_unstable();
        visible.push(cams);
    }

    let mut cameras: Vec<CameraScene> = (0..config.cameras)
        .map(|c| CameraScene {
            gt: TrackSet::new(camera_name(c)),
            embeddings: BTreeMap::new(),
        })
        .collect();
    for (i, cams) in visible.iter().enumerate() {
        let id = i as u32 + 1;
        for &c in cams {
            let min_len = (config.frames / 2).max(1);
            let len = rng.random_range(min_len..=config.frames);
            let start = rng.random_range(1..=config.frames - len + 1);
            let entries = walk(config, start, len, &mut rng);
            let embedding: Vec<(u32, Vec<f64>)> = entries
                .iter()
                .map(|e| {
                    (
                        e.frame,
                        perturbed(&vectors[i], &biases[c], config.embedding_intra_std, &mut rng),
                    )
                })
                .collect();
            let track = Tracklet::new(id, entries).expect("walk produces valid entries");
            cameras[c].gt.insert(track).expect("identity ids are unique");
            cameras[c]
                .embeddings
                .insert(id, EmbeddingTrack::new(id, embedding).expect("valid embeddings"));
        }
    }
    Ok(Scene {
        cameras,
        identity_vectors: vectors,
    })
}

/// One injected identity break.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cut {
    /// Ground-truth identity that was cut.
    pub gt_id: u32,
    /// Tracklet holding the frames before the cut.
    pub pred_id: u32,
    /// Fresh tracklet starting after the cut.
    pub succ_id: u32,
    pub pred_end: u32,
    pub succ_start: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fragmented {
    pub tracks: TrackSet,
    pub cuts: Vec<Cut>,
    /// Ground-truth identity of every output tracklet.
    pub origin: BTreeMap<u32, u32>,
}

/// Cuts trajectories to imitate identity switches after short occlusions.
///
/// Every trajectory is cut with probability `occlusion_rate` at a random
/// entry; the tail resumes `occlusion_gap` frames later under a fresh id and
/// may itself be cut again. Retained boxes are copied unchanged.
pub fn fragment(gt: &TrackSet, config: &SceneConfig) -> Result<Fragmented> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x00f4_a9e7);
    let mut next_id = gt.max_id() + 1;
    let mut out = TrackSet::new(gt.camera_id.clone());
    let mut cuts = Vec::new();
    let mut origin = BTreeMap::new();
    let (gap_lo, gap_hi) = config.occlusion_gap;
    for t in gt.tracklets() {
        let mut current_id = t.id();
        let mut rest: Vec<Entry> = t.entries().to_vec();
        loop {
            let cut_here = config.occlusion_rate > 0.0 && rng.random_bool(config.occlusion_rate);
            let gap = rng.random_range(gap_lo..=gap_hi);
            // head ends at entry i; tail starts at the first entry at or after frame end + gap
            let split = if cut_here && rest.len() >= 2 {
                let i = rng.random_range(0..rest.len() - 1);
                let target = rest[i].frame + gap;
                rest.iter().position(|e| e.frame >= target).map(|j| (i, j))
            } else {
                None
            };
            match split {
                Some((i, j)) => {
                    let tail = rest.split_off(j);
                    rest.truncate(i + 1);
                    let head = std::mem::replace(&mut rest, tail);
                    let succ_id = next_id;
                    next_id += 1;
                    cuts.push(Cut {
                        gt_id: t.id(),
                        pred_id: current_id,
                        succ_id,
                        pred_end: head.last().expect("non-empty head").frame,
                        succ_start: rest[0].frame,
                    });
                    out.insert(Tracklet::new(current_id, head).expect("subset of a valid tracklet"))
                        .expect("fresh id");
                    origin.insert(current_id, t.id());
                    current_id = succ_id;
                }
                None => {
                    out.insert(Tracklet::new(current_id, rest).expect("subset of a valid tracklet"))
                        .expect("fresh id");
                    origin.insert(current_id, t.id());
                    break;
                }
            }
        }
    }
    Ok(Fragmented {
        tracks: out,
        cuts,
        origin,
    })
}

/// Embeddings of the fragmented tracklets, taken frame by frame from the
/// ground-truth embeddings.
pub fn fragment_embeddings(gt_embeddings: &EmbeddingSet, fragmented: &Fragmented) -> EmbeddingSet {
    let mut out = EmbeddingSet::new();
    for t in fragmented.tracks.tracklets() {
        let Some(source) = fragmented.origin.get(&t.id()).and_then(|g| gt_embeddings.get(g)) else {
            continue;
        };
        let frames: Vec<(u32, Vec<f64>)> = source
            .entries()
            .iter()
            .filter(|(f, _)| t.entry_at(*f).is_some())
            .cloned()
            .collect();
        out.insert(
            t.id(),
            EmbeddingTrack::new(t.id(), frames).expect("subset of a valid track"),
        );
    }
    out
}
