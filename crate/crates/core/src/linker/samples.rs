use rand::seq::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{pair_windows, LinkerError, Result, TrainConfig, Window};
use crate::trackio::{BBox, Entry, TrackSet, Tracklet};

/// One labelled (predecessor, successor) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSample {
    pub window_a: Window,
    pub window_b: Window,
    /// 1 when both windows come from the same identity across a plausible gap.
    pub label: u8,
}

/// Largest junction gap, in frames, of a positive pair.
const MAX_GAP: u32 = 10;
/// Radius of the junction gate, in pixels.
const GATE_RADIUS: f64 = 90.0;
/// Fragment lengths drawn for either side of a pair.
const MIN_FRAGMENT: usize = 8;
const MAX_FRAGMENT: usize = 60;

#[derive(Debug, Clone, Copy)]
enum NegativeKind {
    /// A different identity placed inside the gating envelope.
    OtherIdentity,
    /// Same identity, successor moved by more than the gate radius.
    Displaced,
    /// Same identity, successor taken from outside the gap interval.
    Shifted,
}

/// Builds link training pairs from ground-truth trajectories.
///
/// Positives cut a trajectory after a random entry and resume it 1 to 10
/// frames later. Negatives (`neg_pos_ratio` times as many) are either another
/// identity's fragment moved into the gate around the junction, the true
/// continuation displaced by more than 90 px, or the continuation taken from
/// a shift outside `(0, 10]` frames. The output is deterministic in `config.seed`.
pub fn generate_samples(gt: &TrackSet, config: &TrainConfig) -> Result<Vec<LinkSample>> {
    config.validate()?;
    let usable: Vec<&Tracklet> = gt.tracklets().filter(|t| t.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(LinkerError::InsufficientData(format!(
            "need at least two trajectories with two or more boxes, found {}",
            usable.len()
        )));
    }
    let cuttable: Vec<&Tracklet> = usable.iter().copied().filter(|t| has_positive_cut(t)).collect();
    if cuttable.is_empty() {
        return Err(LinkerError::InsufficientData(
            "no trajectory has two boxes within 10 frames".into(),
        ));
    }
    let total = config.num_samples;
    let positives = (total as f64 / (1.0 + config.neg_pos_ratio)).round() as usize;
    let negatives = total - positives;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.image_size;

    let mut out = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while out.len() < positives {
        attempts += 1;
        if attempts > 1000 * (positives + 1) {
            return Err(LinkerError::InsufficientData("cannot draw positive pairs".into()));
        }
        let track = *cuttable.choose(&mut rng).expect("non-empty");
        if let Some((pred, succ)) = positive_split(track, &mut rng) {
            out.push(pair(&pred, &succ, 1, size)?);
        }
    }
    let kinds = [
        NegativeKind::OtherIdentity,
        NegativeKind::OtherIdentity,
        NegativeKind::Displaced,
        NegativeKind::Shifted,
    ];
    let mut made = 0usize;
    attempts = 0;
    while made < negatives {
        attempts += 1;
        if attempts > 1000 * (negatives + 1) {
            return Err(LinkerError::InsufficientData("cannot draw negative pairs".into()));
        }
        let kind = *kinds.choose(&mut rng).expect("non-empty");
        let drawn = match kind {
            NegativeKind::OtherIdentity => other_identity(&usable, &mut rng),
            NegativeKind::Displaced => {
                let track = *cuttable.choose(&mut rng).expect("non-empty");
                positive_split(track, &mut rng).map(|(pred, succ)| {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let dist = rng.random_range(GATE_RADIUS..3.0 * GATE_RADIUS);
                    (pred, translate(&succ, dist * angle.cos(), dist * angle.sin(), 0))
                })
            }
            NegativeKind::Shifted => {
                let track = *usable.choose(&mut rng).expect("non-empty");
                shifted_split(track, &mut rng)
            }
        };
        if let Some((pred, succ)) = drawn {
            out.push(pair(&pred, &succ, 0, size)?);
            made += 1;
        }
    }
    Ok(out)
}

fn pair(pred: &[Entry], succ: &[Entry], label: u8, size: (f64, f64)) -> Result<LinkSample> {
    let a = Tracklet::new(1, pred.to_vec()).map_err(|e| LinkerError::InsufficientData(e.to_string()))?;
    let b = Tracklet::new(2, succ.to_vec()).map_err(|e| LinkerError::InsufficientData(e.to_string()))?;
    let (window_a, window_b) = pair_windows(&a, &b, size)?;
    Ok(LinkSample {
        window_a,
        window_b,
        label,
    })
}

fn has_positive_cut(t: &Tracklet) -> bool {
    t.entries().windows(2).any(|w| w[1].frame - w[0].frame <= MAX_GAP)
}

fn fragment_len(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(MIN_FRAGMENT..=MAX_FRAGMENT)
}

/// Predecessor ending at entry `i`, drawn backwards with a random length.
fn head(entries: &[Entry], i: usize, rng: &mut ChaCha8Rng) -> Vec<Entry> {
    let len = fragment_len(rng).min(i + 1);
    entries[i + 1 - len..=i].to_vec()
}

fn tail(entries: &[Entry], j: usize, rng: &mut ChaCha8Rng) -> Vec<Entry> {
    let len = fragment_len(rng).min(entries.len() - j);
    entries[j..j + len].to_vec()
}

/// Cuts after a random entry, resuming 1..=10 frames later.
fn positive_split(t: &Tracklet, rng: &mut ChaCha8Rng) -> Option<(Vec<Entry>, Vec<Entry>)> {
    let e = t.entries();
    let i = rng.random_range(0..e.len() - 1);
    let gap = rng.random_range(1..=MAX_GAP);
    let end = e[i].frame;
    let j = e.iter().position(|x| x.frame >= end + gap)?;
    if e[j].frame - end > MAX_GAP {
        return None;
    }
    Some((head(e, i, rng), tail(e, j, rng)))
}

/// Same identity, resuming at a shift outside the positive gap interval.
fn shifted_split(t: &Tracklet, rng: &mut ChaCha8Rng) -> Option<(Vec<Entry>, Vec<Entry>)> {
    let e = t.entries();
    let i = rng.random_range(0..e.len() - 1);
    let end = i64::from(e[i].frame);
    let shift: i64 = if rng.random_bool(0.5) {
        rng.random_range(-20..=-3)
    } else {
        rng.random_range(16..=40)
    };
    let target = end + shift;
    let j = e.iter().position(|x| i64::from(x.frame) >= target)?;
    let actual = i64::from(e[j].frame) - end;
    if (1..=i64::from(MAX_GAP)).contains(&actual) {
        return None;
    }
    Some((head(e, i, rng), tail(e, j, rng)))
}

/// Another identity's fragment moved so it starts inside the junction gate.
fn other_identity(tracks: &[&Tracklet], rng: &mut ChaCha8Rng) -> Option<(Vec<Entry>, Vec<Entry>)> {
    let a = *tracks.choose(rng)?;
    let b = *tracks.choose(rng)?;
    if a.id() == b.id() {
        return None;
    }
    let ea = a.entries();
    let i = rng.random_range(0..ea.len());
    let pred = head(ea, i, rng);
    let eb = b.entries();
    let j = rng.random_range(0..eb.len());
    let succ = tail(eb, j, rng);

    let last = pred.last()?;
    let (ax, ay) = last.bbox.center();
    let (bx, by) = succ[0].bbox.center();
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let radius = GATE_RADIUS * rng.random::<f64>().sqrt();
    let (tx, ty) = (ax + radius * angle.cos(), ay + radius * angle.sin());
    let gap = rng.random_range(1..=MAX_GAP);
    let frame_shift = i64::from(last.frame) + i64::from(gap) - i64::from(succ[0].frame);
    Some((pred, translate(&succ, tx - bx, ty - by, frame_shift)))
}

fn translate(entries: &[Entry], dx: f64, dy: f64, frame_shift: i64) -> Vec<Entry> {
    entries
        .iter()
        .map(|e| Entry {
            frame: (i64::from(e.frame) + frame_shift) as u32,
            bbox: BBox::new(e.bbox.x + dx, e.bbox.y + dy, e.bbox.w, e.bbox.h),
            confidence: e.confidence,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linker::{NUM_FEATURES, WINDOW_LEN};

    fn line_track(id: u32, frames: std::ops::RangeInclusive<u32>, x0: f64, vx: f64) -> Tracklet {
        let entries = frames
            .map(|f| Entry::new(f, BBox::new(x0 + vx * f as f64, 300.0, 40.0, 100.0)))
            .collect();
        Tracklet::new(id, entries).unwrap()
    }

    fn config(n: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            num_samples: n,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_trajectory_positives_share_identity() {
        let mut gt = TrackSet::new("c");
        gt.insert(line_track(1, 1..=100, 10.0, 3.0)).unwrap();
        // two boxes 49 frames apart: usable for negatives, never cut for positives
        let far = Tracklet::new(
            2,
            vec![
                Entry::new(1, BBox::new(900.0, 300.0, 40.0, 100.0)),
                Entry::new(50, BBox::new(900.0, 300.0, 40.0, 100.0)),
            ],
        );
        gt.insert(far.unwrap()).unwrap();
        let samples = generate_samples(&gt, &config(200, 5)).unwrap();
        for s in samples.iter().filter(|s| s.label == 1) {
            // rows are offsets from the predecessor's last box, so track 1's
            // line x = 10 + 3 f becomes dx = 3 df in pixels
            for w in [&s.window_a, &s.window_b] {
                for t in 0..WINDOW_LEN {
                    let df = w.row(t)[0] * 30.0;
                    let dx = w.row(t)[1] * 1920.0;
                    assert!((dx - 3.0 * df).abs() < 1e-6);
                }
            }
            assert_eq!(s.window_a.row(WINDOW_LEN - 1)[..2], [0.0, 0.0]);
            let gap = s.window_b.row(0)[0] * 30.0;
            assert!(gap > 0.5 && gap < 10.5);
        }
    }

    #[test]
    fn ratio_is_one_to_three() {
        let mut gt = TrackSet::new("c");
        gt.insert(line_track(1, 1..=100, 10.0, 3.0)).unwrap();
        gt.insert(line_track(2, 5..=80, 900.0, -2.0)).unwrap();
        for n in [4, 10, 401, 1000] {
            let samples = generate_samples(&gt, &config(n, 1)).unwrap();
            let pos = samples.iter().filter(|s| s.label == 1).count();
            let neg = samples.len() - pos;
            assert_eq!(samples.len(), n);
            assert!((neg as i64 - 3 * pos as i64).abs() <= 3, "n {n}: {pos} vs {neg}");
            assert!((neg as f64 / 3.0 - pos as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let mut gt = TrackSet::new("c");
        gt.insert(line_track(1, 1..=100, 10.0, 3.0)).unwrap();
        gt.insert(line_track(2, 5..=80, 900.0, -2.0)).unwrap();
        let a = generate_samples(&gt, &config(300, 9)).unwrap();
        let b = generate_samples(&gt, &config(300, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_samples(&gt, &config(300, 10)).unwrap();
        assert_ne!(a, c);
        assert!(a
            .iter()
            .all(|s| s.window_a.as_slice().len() == WINDOW_LEN * NUM_FEATURES));
    }

    #[test]
    fn insufficient_ground_truth() {
        let mut gt = TrackSet::new("c");
        gt.insert(line_track(1, 1..=100, 10.0, 3.0)).unwrap();
        assert!(matches!(
            generate_samples(&gt, &config(10, 1)),
            Err(LinkerError::InsufficientData(_))
        ));
        gt.insert(line_track(2, 7..=7, 10.0, 3.0)).unwrap();
        assert!(matches!(
            generate_samples(&gt, &config(10, 1)),
            Err(LinkerError::InsufficientData(_))
        ));
    }
}
