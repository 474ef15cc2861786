use super::*;
use crate::dataset::{generate_synthetic, LandmarkLayout, SyntheticSpec, SyntheticWorld};
use crate::features::{landmark_descriptor, FeatureSet, Keypoint, SyntheticProvider};
use crate::geometry::{so3_exp, Vec3};
use crate::map::MapConfig;
use crate::place::build_vocabulary;

fn world(frames: usize) -> (SyntheticWorld, SyntheticProvider) {
    let spec = SyntheticSpec { frames, ..SyntheticSpec::default() };
    let (_, w) = generate_synthetic(&spec).unwrap();
    let p = w.provider();
    (w, p)
}

fn frame(p: &SyntheticProvider, k: usize) -> Frame {
    Frame::new(k, k as f64 * 0.1, p.frame_features(k).unwrap())
}

fn cfg() -> TrackingConfig {
    TrackingConfig { thresholds: MatchThresholds::new(0.5, 0.75), ..TrackingConfig::default() }
}

/// Ground-truth pose of frame `k` in the frame-0 coordinates at scale `s`.
fn gt_in_first(w: &SyntheticWorld, k: usize, s: f64) -> Pose {
    let rel = w.poses[k] * w.poses[0].inverse();
    Pose::new(*rel.rotation(), rel.translation() * s)
}

fn init(w: &SyntheticWorld, p: &SyntheticProvider) -> (Map, TrackerState, f64) {
    let mut map = Map::new(MapConfig::default());
    let mut state = TrackerState::new(&cfg());
    let (mut f0, mut f5) = (frame(p, 0), frame(p, 5));
    initialize(&mut f0, &mut f5, &mut map, &mut state, &w.camera, &cfg(), None).unwrap();
    let truth = (w.poses[5] * w.poses[0].inverse()).translation().norm();
    let s = f5.pose.unwrap().translation().norm() / truth;
    (map, state, s)
}

#[test]
fn initialization_recovers_relative_pose() {
    let (w, p) = world(200);
    let (map, state, s) = init(&w, &p);
    assert!(map.stats().map_points >= 50);
    assert_eq!(map.stats().keyframes, 2);
    let est = state.last_pose.unwrap();
    let gt = gt_in_first(&w, 5, s);
    assert!((est.rotation_matrix() - gt.rotation_matrix()).abs().max() < 1e-3);
    assert!((est.translation() - gt.translation()).norm() < 1e-3 * gt.translation().norm());
    assert!(map.audit().is_empty());
    // unit median depth in the first camera
    let mut z: Vec<f64> = map.points().map(|mp| mp.position.z).collect();
    z.sort_by(f64::total_cmp);
    assert!((z[z.len() / 2] - 1.0).abs() < 0.05);
}

#[test]
fn initialization_rejects_degenerate_pairs() {
    let (w, p) = world(200);
    let mut map = Map::new(MapConfig::default());
    let mut state = TrackerState::new(&cfg());
    let (mut a, mut b) = (frame(&p, 3), frame(&p, 3));
    assert!(matches!(
        initialize(&mut a, &mut b, &mut map, &mut state, &w.camera, &cfg(), None),
        Err(TrackError::Init(_))
    ));
    let mut e1 = Frame::new(0, 0.0, FeatureSet::default());
    let mut e2 = Frame::new(1, 0.1, FeatureSet::default());
    assert!(matches!(
        initialize(&mut e1, &mut e2, &mut map, &mut state, &w.camera, &cfg(), None),
        Err(TrackError::Init(_))
    ));
    assert_eq!(state.mode, TrackingMode::NotInitialized);
    assert_eq!(map.stats().keyframes, 0);
}

fn ok_state(last: Pose, velocity: Pose) -> TrackerState {
    let mut s = TrackerState::new(&cfg());
    s.mode = TrackingMode::Ok;
    s.last_pose = Some(last);
    s.velocity = Some(velocity);
    s
}

#[test]
fn prediction_composes_velocity() {
    let last = Pose::new(so3_exp(&Vec3::new(0.1, 0.2, 0.0)), Vec3::new(1.0, 2.0, 3.0));
    let s = ok_state(last, Pose::identity());
    assert_eq!(predict_pose(&s).unwrap(), last);

    let v = Pose::from_translation(Vec3::new(0.1, 0.0, 0.0));
    let mut s = ok_state(Pose::identity(), v);
    for _ in 0..2 {
        let p = predict_pose(&s).unwrap();
        s.last_pose = Some(p);
    }
    assert!((s.last_pose.unwrap().translation() - Vec3::new(0.2, 0.0, 0.0)).norm() < 1e-12);

    let step = 1f64.to_radians();
    let mut s = ok_state(Pose::identity(), Pose::new(so3_exp(&Vec3::new(0.0, step, 0.0)), Vec3::zeros()));
    for _ in 0..10 {
        s.last_pose = Some(predict_pose(&s).unwrap());
    }
    assert!((s.last_pose.unwrap().angle() - 10.0 * step).abs() < 1e-9);

    let lost = TrackerState::new(&cfg());
    assert!(matches!(predict_pose(&lost), Err(TrackError::WrongMode(TrackingMode::NotInitialized))));
}

#[test]
fn noiseless_sequence_tracks_exactly() {
    let (w, p) = world(200);
    let (mut map, mut state, s) = init(&w, &p);
    for k in 6..24 {
        let mut f = frame(&p, k);
        let r = track_frame(&mut f, &mut state, &mut map, &w.camera, &cfg()).unwrap_or_else(|e| panic!("frame {k}: {e}"));
        assert!(r.inlier_count >= cfg().track_min);
        assert_eq!(r.outlier_count, 0, "frame {k}");
        assert_eq!(r.inlier_count + r.outlier_count, r.matched_map_points.len());
        let gt = gt_in_first(&w, k, s);
        assert!((r.pose.rotation_matrix() - gt.rotation_matrix()).abs().max() < 1e-4, "frame {k}");
        assert!((r.pose.translation() - gt.translation()).norm() < 1e-4, "frame {k}");
    }
}

#[test]
fn unmatchable_frames_lose_track() {
    let (w, p) = world(200);
    let (mut map, mut state, _) = init(&w, &p);
    let mut empty = Frame::new(6, 0.6, FeatureSet::default());
    assert!(matches!(
        track_frame(&mut empty, &mut state, &mut map, &w.camera, &cfg()),
        Err(TrackError::TrackLost { .. })
    ));
    assert_eq!(state.mode, TrackingMode::Lost);

    let (mut map, mut state, _) = init(&w, &p);
    let real = p.frame_features(6).unwrap();
    // same keypoints, descriptors pushed far beyond th_high of every map point
    let far: Vec<Descriptor> = real
        .descriptors
        .iter()
        .map(|d| match d {
            Descriptor::Float(v) => Descriptor::Float(v.iter().map(|x| x + 5.0).collect()),
            other => other.clone(),
        })
        .collect();
    let mut f = Frame::new(6, 0.6, FeatureSet::new(real.keypoints.clone(), far));
    assert!(matches!(
        track_frame(&mut f, &mut state, &mut map, &w.camera, &cfg()),
        Err(TrackError::TrackLost { inliers: 0 })
    ));
}

#[test]
fn keyframe_decision() {
    let (w, p) = world(200);
    let (map, state, _) = init(&w, &p);
    let reference = map.keyframe(state.reference_kf.unwrap()).unwrap().point_count();
    let c = cfg();
    let result = |n: usize| TrackResult {
        pose: Pose::identity(),
        inlier_count: n,
        outlier_count: 0,
        matched_map_points: Vec::new(),
        inliers: Vec::new(),
        thresholds: c.thresholds,
    };
    assert!(!need_keyframe(&result(reference), &state, &map, state.last_keyframe_index + 1, &c));
    assert!(need_keyframe(&result(reference), &state, &map, state.last_keyframe_index + c.kf_max_gap, &c));
    assert!(need_keyframe(&result(reference / 2), &state, &map, state.last_keyframe_index + 1, &c));
    assert!(!need_keyframe(&result(c.track_min), &state, &map, state.last_keyframe_index + 1, &c));
}

fn vocab(w: &SyntheticWorld) -> Vocabulary {
    let training: Vec<Descriptor> = w.landmarks.iter().map(|l| Descriptor::Float(landmark_descriptor(l.id))).collect();
    build_vocabulary(&training, 2, 10, 7).unwrap()
}

#[test]
fn relocalizes_on_repeated_view() {
    let (w, p) = world(200);
    let (mut map, mut state, s) = init(&w, &p);
    let v = vocab(&w);
    let mut db = KeyFrameDatabase::new();
    for id in map.keyframe_ids() {
        let bow = v.to_bow(&map.keyframe(id).unwrap().features.descriptors).unwrap();
        map.set_keyframe_bow(id, bow.clone()).unwrap();
        db.add(id, bow);
    }
    state.mark_lost();
    state.last_pose = None;
    let mut f = frame(&p, 5);
    let r = relocalize(&mut f, &mut state, &mut map, &db, &v, &w.camera, &cfg()).unwrap();
    assert_eq!(state.mode, TrackingMode::Ok);
    let gt = gt_in_first(&w, 5, s);
    assert!((r.pose.translation() - gt.translation()).norm() < 1e-3);
    assert!((r.pose.rotation_matrix() - gt.rotation_matrix()).abs().max() < 1e-3);
}

#[test]
fn relocalization_fails_without_support() {
    let (w, p) = world(200);
    let (mut map, mut state, _) = init(&w, &p);
    let v = vocab(&w);
    state.mark_lost();
    let mut f = frame(&p, 5);
    let empty = KeyFrameDatabase::new();
    assert!(matches!(
        relocalize(&mut f, &mut state, &mut map, &empty, &v, &w.camera, &cfg()),
        Err(TrackError::StillLost)
    ));

    let mut db = KeyFrameDatabase::new();
    for id in map.keyframe_ids() {
        db.add(id, v.to_bow(&map.keyframe(id).unwrap().features.descriptors).unwrap());
    }
    // a scene built from landmark ids the map has never seen
    let spec = SyntheticSpec {
        frames: 20,
        landmarks: LandmarkLayout::Cylinder { radius: 10.0, height: 4.0, count: 1200 },
        seed: 99,
        ..SyntheticSpec::default()
    };
    let (_, other) = generate_synthetic(&spec).unwrap();
    let offset = w.landmarks.len() as u64 + 10;
    let obs = other.provider().observations(0).unwrap().to_vec();
    let kps: Vec<Keypoint> = obs.iter().map(|o| Keypoint::new(o.pixel.x, o.pixel.y)).collect();
    let descs: Vec<Descriptor> = obs.iter().map(|o| Descriptor::Float(landmark_descriptor(o.id + offset))).collect();
    let mut f = Frame::new(0, 0.0, FeatureSet::new(kps, descs));
    assert!(matches!(
        relocalize(&mut f, &mut state, &mut map, &db, &v, &w.camera, &cfg()),
        Err(TrackError::StillLost)
    ));
    assert_eq!(state.mode, TrackingMode::Lost);
}

#[test]
fn tracking_is_deterministic() {
    let (w, p) = world(200);
    let run = || {
        let (mut map, mut state, _) = init(&w, &p);
        (6..15)
            .map(|k| {
                let mut f = frame(&p, k);
                track_frame(&mut f, &mut state, &mut map, &w.camera, &cfg()).unwrap().pose
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
