//! End-to-end checks across modules on synthetic scenes.

use std::collections::BTreeSet;

use proptest::prelude::*;

use tracklink::globallink::{self, GateConfig};
use tracklink::ict::{self, AssocConfig, CameraTracks};
use tracklink::linker::{self, LinkerParams, TrainConfig};
use tracklink::metrics;
use tracklink::synth::{self, SceneConfig};
use tracklink::trackio::{self, BBox, Entry, TrackSet, Tracklet};

/// A small model trained quickly; good enough to link clean synthetic cuts.
fn quick_model() -> LinkerParams {
    let scene = synth::gen_scene(&SceneConfig {
        num_identities: 30,
        frames: 400,
        seed: 11,
        ..SceneConfig::default()
    })
    .unwrap();
    let config = TrainConfig {
        num_samples: 3000,
        epochs: 6,
        learning_rate: 0.01,
        seed: 3,
        ..TrainConfig::default()
    };
    let samples = linker::generate_samples(&scene.cameras[0].gt, &config).unwrap();
    linker::train(&samples, &config).unwrap().params
}

#[test]
fn fragment_ids_equal_cut_count() {
    for seed in 0..6 {
        let config = SceneConfig {
            num_identities: 25,
            occlusion_rate: 0.6,
            seed,
            ..SceneConfig::default()
        };
        let scene = synth::gen_scene(&config).unwrap();
        let gt = &scene.cameras[0].gt;
        let frag = synth::fragment(gt, &config).unwrap();
        let report = metrics::evaluate(gt, &frag.tracks, 0.5).unwrap();
        assert_eq!(report.id_switches, frag.cuts.len(), "seed {seed}");
        // boxes inside the dropped gaps are the only misses
        let dropped: u32 = frag.cuts.iter().map(|c| c.succ_start - c.pred_end - 1).sum();
        assert_eq!(report.false_negatives, dropped as usize);
        assert_eq!(report.false_positives, 0);
    }
}

#[test]
fn trained_model_rejoins_a_three_way_split() {
    let params = quick_model();
    // one straight walk cut twice with gaps of 4 and 7 frames
    let walk = |f: u32| {
        Entry::new(
            f,
            BBox::new(300.0 + 2.5 * f as f64, 400.0 + 0.5 * f as f64, 50.0, 130.0),
        )
    };
    let gt = TrackSet::from_tracklets("c", [Tracklet::new(1, (1..=90).map(walk).collect()).unwrap()]).unwrap();
    let pred = TrackSet::from_tracklets(
        "c",
        [
            Tracklet::new(1, (1..=30).map(walk).collect()).unwrap(),
            Tracklet::new(2, (34..=60).map(walk).collect()).unwrap(),
            Tracklet::new(3, (67..=90).map(walk).collect()).unwrap(),
        ],
    )
    .unwrap();
    let before = metrics::evaluate(&gt, &pred, 0.5).unwrap();
    let linked = globallink::repair(&pred, &params, &GateConfig::default(), (1920.0, 1080.0)).unwrap();
    let after = metrics::evaluate(&gt, &linked, 0.5).unwrap();
    assert_eq!(before.id_switches, 2);
    assert_eq!(linked.len(), 1);
    assert_eq!(after.id_switches, 0);
    assert!(after.id.idf1 > before.id.idf1);
}

#[test]
fn linking_a_fragmented_scene_helps() {
    let params = quick_model();
    let config = SceneConfig {
        num_identities: 30,
        frames: 400,
        occlusion_rate: 0.6,
        seed: 5,
        ..SceneConfig::default()
    };
    let scene = synth::gen_scene(&config).unwrap();
    let gt = &scene.cameras[0].gt;
    let frag = synth::fragment(gt, &config).unwrap();
    let linked = globallink::repair(&frag.tracks, &params, &GateConfig::default(), config.image_size).unwrap();
    let before = metrics::evaluate(gt, &frag.tracks, 0.5).unwrap();
    let after = metrics::evaluate(gt, &linked, 0.5).unwrap();
    assert!(linked.len() < frag.tracks.len());
    assert!(after.id_switches < before.id_switches);
    assert!(after.id.idf1 > before.id.idf1);
}

#[test]
fn weights_survive_a_file_round_trip() {
    let params = quick_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lnk");
    linker::write_params_file(&params, &path).unwrap();
    let loaded = linker::read_params_file(&path).unwrap();
    assert_eq!(loaded, params);
    let scene = synth::gen_scene(&SceneConfig {
        num_identities: 10,
        seed: 4,
        ..SceneConfig::default()
    })
    .unwrap();
    let frag = synth::fragment(
        &scene.cameras[0].gt,
        &SceneConfig {
            occlusion_rate: 1.0,
            ..SceneConfig::default()
        },
    )
    .unwrap();
    let pairs = globallink::candidate_pairs(&frag.tracks, &GateConfig::default());
    let a = globallink::score_pairs(&params, &pairs, &frag.tracks, (1920.0, 1080.0)).unwrap();
    let b = globallink::score_pairs(&loaded, &pairs, &frag.tracks, (1920.0, 1080.0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn synthetic_files_round_trip() {
    let config = SceneConfig {
        cameras: 2,
        num_identities: 8,
        frames: 80,
        seed: 2,
        ..SceneConfig::default()
    };
    let scene = synth::gen_scene(&config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for cam in &scene.cameras {
        let mot = dir.path().join(format!("{}.txt", cam.gt.camera_id));
        let emb = dir.path().join(format!("{}.csv", cam.gt.camera_id));
        trackio::write_mot_file(&mot, &cam.gt).unwrap();
        trackio::write_embeddings_file(&emb, &cam.embeddings).unwrap();
        let back = trackio::read_mot_file(&mot, &cam.gt.camera_id).unwrap();
        assert_eq!(back.ids().collect::<Vec<_>>(), cam.gt.ids().collect::<Vec<_>>());
        for t in cam.gt.tracklets() {
            let b = back.get(t.id()).unwrap();
            for (x, y) in t.entries().iter().zip(b.entries()) {
                assert_eq!(x.frame, y.frame);
                // files keep 6 significant digits
                for (p, q) in [
                    (x.bbox.x, y.bbox.x),
                    (x.bbox.y, y.bbox.y),
                    (x.bbox.w, y.bbox.w),
                    (x.bbox.h, y.bbox.h),
                ] {
                    assert!((p - q).abs() <= 1e-5 * p.abs().max(1.0));
                }
            }
        }
        let e = trackio::read_embeddings_file(&emb).unwrap();
        assert_eq!(e.len(), cam.embeddings.len());
    }
}

#[test]
fn cross_camera_association_recovers_identities() {
    let config = SceneConfig {
        cameras: 3,
        num_identities: 20,
        frames: 120,
        seed: 8,
        ..SceneConfig::default()
    };
    let scene = synth::gen_scene(&config).unwrap();
    let cameras: Vec<CameraTracks> = scene
        .cameras
        .iter()
        .map(|c| CameraTracks {
            tracks: c.gt.clone(),
            embeddings: c.embeddings.clone(),
        })
        .collect();
    let map = ict::assign_global_ids(&cameras, &AssocConfig::mmct()).unwrap();
    // the predicted global ids partition tracklets exactly like the true ids
    for ((ca, ia), ga) in &map {
        for ((cb, ib), gb) in &map {
            if (ca, ia) != (cb, ib) {
                assert_eq!(ia == ib, ga == gb, "{ca}/{ia} vs {cb}/{ib}");
            }
        }
    }
    let gts: Vec<TrackSet> = scene.cameras.iter().map(|c| c.gt.clone()).collect();
    let scores = metrics::evaluate_mtmc(&gts, &gts, &map, 0.5).unwrap();
    assert_eq!(scores.idf1, 1.0);
    // splitting every identity across cameras is strictly worse
    let split: ict::GlobalIdMap = map.keys().enumerate().map(|(i, k)| (k.clone(), i as u32 + 1)).collect();
    let worse = metrics::evaluate_mtmc(&gts, &gts, &split, 0.5).unwrap();
    let shared = map.values().collect::<BTreeSet<_>>().len() < map.len();
    assert!(!shared || worse.idf1 < scores.idf1);
}

fn line(id: u32, frames: impl IntoIterator<Item = u32>) -> Tracklet {
    Tracklet::new(
        id,
        frames
            .into_iter()
            .map(|f| Entry::new(f, BBox::new(10.0 + 3.0 * f as f64, 20.0, 30.0, 80.0)))
            .collect(),
    )
    .unwrap()
}

proptest! {
    /// Merging two consecutive fragments of one trajectory never increases
    /// IDS and never decreases IDF1.
    #[test]
    fn merging_fragments_of_one_trajectory(cuts in proptest::collection::btree_set(2u32..60, 1..5), pick in 0usize..4) {
        let cuts: Vec<u32> = cuts.into_iter().collect();
        let gt = TrackSet::from_tracklets("c", [line(1, 1..=60)]).unwrap();
        let mut bounds = vec![1];
        bounds.extend(&cuts);
        bounds.push(61);
        let pieces: Vec<Tracklet> = bounds.windows(2).enumerate().map(|(i, w)| line(i as u32 + 1, w[0]..w[1])).collect();
        let pred = TrackSet::from_tracklets("c", pieces.clone()).unwrap();
        let k = pick % (pieces.len() - 1);
        let mut merged_pieces: Vec<Tracklet> = pieces.clone();
        let b = merged_pieces.remove(k + 1);
        let a = merged_pieces.remove(k);
        let entries: Vec<Entry> = a.entries().iter().chain(b.entries()).copied().collect();
        merged_pieces.insert(k, Tracklet::new(a.id(), entries).unwrap());
        let merged = TrackSet::from_tracklets("c", merged_pieces).unwrap();
        let before = metrics::evaluate(&gt, &pred, 0.5).unwrap();
        let after = metrics::evaluate(&gt, &merged, 0.5).unwrap();
        prop_assert!(after.id_switches <= before.id_switches);
        prop_assert!(after.id.idf1 >= before.id.idf1);
    }
}
