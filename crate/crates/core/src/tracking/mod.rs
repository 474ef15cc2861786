//! Per-frame camera tracking: map initialization from two views, constant
//! velocity prediction, projection matching against the map, keyframe
//! decisions and relocalization.

use std::collections::{BTreeMap, BTreeSet};

use crate::features::{
    adapt_thresholds, match_descriptors, AdaptiveConfig, Descriptor, KeypointGrid, MatchThresholds,
};
use crate::geometry::{estimate_two_view, CameraIntrinsics, InitFailure, Point3, Pose, RansacConfig};
use crate::map::{Frame, KeyFrameId, Map, MapError, MapPointId};
use crate::optim::{optimize_pose_only, BundleProblem, LmConfig, MIN_ASSOCIATIONS};
use crate::place::{BowVector, KeyFrameDatabase, PlaceError, Vocabulary};

const GRID_CELL_PX: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingConfig {
    /// Starting thresholds; stay fixed unless `adaptive` is set.
    pub thresholds: MatchThresholds,
    pub adaptive: Option<AdaptiveConfig>,
    pub track_min: usize,
    pub kf_max_gap: usize,
    pub kf_ratio: f64,
    pub search_radius_px: f64,
    /// Search window for local-map points once the pose has been refined.
    pub local_radius_px: f64,
    pub reloc_min_score: f64,
    pub reloc_min_inliers: usize,
    pub reloc_candidates: usize,
    pub init: RansacConfig,
    pub init_min_points: usize,
    pub lm: LmConfig,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            thresholds: MatchThresholds::kitti(),
            adaptive: None,
            track_min: 10,
            kf_max_gap: 20,
            kf_ratio: 0.9,
            search_radius_px: 15.0,
            local_radius_px: 5.0,
            reloc_min_score: 0.05,
            reloc_min_inliers: 15,
            reloc_candidates: 5,
            init: RansacConfig::default(),
            init_min_points: 50,
            lm: LmConfig { max_iters: 20, ..LmConfig::default() },
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.thresholds.is_valid() {
            return Err(format!("invalid thresholds {:?}", self.thresholds));
        }
        if let Some(a) = &self.adaptive {
            if !a.is_valid() {
                return Err(format!("invalid adaptive config {a:?}"));
            }
        }
        if self.track_min < MIN_ASSOCIATIONS || self.reloc_min_inliers < MIN_ASSOCIATIONS {
            return Err(format!("inlier minimums must be at least {MIN_ASSOCIATIONS}"));
        }
        if !(self.kf_ratio > 0.0 && self.kf_ratio <= 1.0) || self.kf_max_gap == 0 {
            return Err("keyframe policy out of range".into());
        }
        if !(self.search_radius_px > 0.0 && self.local_radius_px > 0.0) {
            return Err("search windows must be positive".into());
        }
        if !self.lm.is_valid() {
            return Err("invalid LM config".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub enum TrackingMode {
    NotInitialized,
    Ok,
    Lost,
}

impl TrackingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackingMode::NotInitialized => "not_initialized",
            TrackingMode::Ok => "ok",
            TrackingMode::Lost => "lost",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub mode: TrackingMode,
    pub last_pose: Option<Pose>,
    /// Per-frame relative motion `T_k * T_{k-1}⁻¹`.
    pub velocity: Option<Pose>,
    pub thresholds: MatchThresholds,
    pub reference_kf: Option<KeyFrameId>,
    pub last_frame: Option<Frame>,
    pub last_keyframe_index: usize,
}

impl TrackerState {
    pub fn new(cfg: &TrackingConfig) -> Self {
        let thresholds = match &cfg.adaptive {
            Some(a) => clamp_thresholds(cfg.thresholds, a),
            None => cfg.thresholds,
        };
        Self {
            mode: TrackingMode::NotInitialized,
            last_pose: None,
            velocity: None,
            thresholds,
            reference_kf: None,
            last_frame: None,
            last_keyframe_index: 0,
        }
    }

    /// Records that the last tracked frame became keyframe `kf`.
    pub fn on_keyframe(&mut self, kf: KeyFrameId, frame_index: usize) {
        self.reference_kf = Some(kf);
        self.last_keyframe_index = frame_index;
    }

    /// Replaces the last pose, e.g. after the map was corrected underneath it.
    pub fn rebase(&mut self, pose: Pose) {
        self.last_pose = Some(pose);
        if let Some(f) = self.last_frame.as_mut() {
            f.pose = Some(pose);
        }
    }

    fn mark_lost(&mut self) {
        self.mode = TrackingMode::Lost;
        self.velocity = None;
    }
}

fn clamp_thresholds(th: MatchThresholds, a: &AdaptiveConfig) -> MatchThresholds {
    let lo = th.th_low.clamp(a.th_min, a.th_max);
    MatchThresholds::new(lo, th.th_high.clamp(lo, a.th_max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackResult {
    pub pose: Pose,
    pub inlier_count: usize,
    pub outlier_count: usize,
    /// Keypoint index and map point of every association, inliers and outliers alike.
    pub matched_map_points: Vec<(usize, MapPointId)>,
    pub inliers: Vec<bool>,
    /// Thresholds the accepted associations were made with.
    pub thresholds: MatchThresholds,
}

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("operation not valid in mode {0:?}")]
    WrongMode(TrackingMode),
    #[error("tracking lost with {inliers} inliers")]
    TrackLost { inliers: usize },
    #[error("relocalization found no consistent keyframe")]
    StillLost,
    #[error("initialization failed: {0}")]
    Init(#[from] InitFailure),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Place(#[from] PlaceError),
}

/// Seeds the map from two frames: the first becomes the world origin and
/// the scene is scaled to unit median depth.
#[allow(clippy::too_many_arguments)]
pub fn initialize(
    f1: &mut Frame,
    f2: &mut Frame,
    map: &mut Map,
    state: &mut TrackerState,
    cam: &CameraIntrinsics,
    cfg: &TrackingConfig,
    vocab: Option<&Vocabulary>,
) -> Result<(KeyFrameId, KeyFrameId), TrackError> {
    if state.mode != TrackingMode::NotInitialized {
        return Err(TrackError::WrongMode(state.mode));
    }
    if f1.features.is_empty() || f2.features.is_empty() {
        return Err(InitFailure::TooFewMatches(0).into());
    }
    let matches = match_descriptors(&f1.features.descriptors, &f2.features.descriptors, state.thresholds, false)
        .map_err(PlaceError::from)?;
    let pairs: Vec<_> = matches
        .iter()
        .map(|m| (f1.features.keypoints[m.query].pixel(), f2.features.keypoints[m.train].pixel()))
        .collect();
    let est = estimate_two_view(&pairs, cam, &cfg.init)?;

    let pose1 = Pose::identity();
    let mut pose2 = est.pose;
    let mut tracks: Vec<(usize, usize, Point3)> = matches
        .iter()
        .zip(&est.points)
        .filter_map(|(m, p)| p.map(|p| (m.query, m.train, p)))
        .collect();
    if tracks.len() < cfg.init_min_points {
        return Err(InitFailure::TooFewInliers { found: tracks.len(), required: cfg.init_min_points }.into());
    }

    let mut ba = BundleProblem::new(*cam);
    ba.add_pose(pose1, true);
    ba.add_pose(pose2, false);
    for (k, (i, j, p)) in tracks.iter().enumerate() {
        ba.add_point(*p, false);
        ba.observe(0, k, f1.features.keypoints[*i].pixel());
        ba.observe(1, k, f2.features.keypoints[*j].pixel());
    }
    if ba.solve_lm(&cfg.lm).is_ok() {
        pose2 = ba.poses[1];
        for (k, t) in tracks.iter_mut().enumerate() {
            t.2 = ba.points[k];
        }
    }
    let gate = cfg.init.reprojection_threshold_px;
    tracks.retain(|(i, j, p)| {
        let e1 = crate::geometry::project(p, &pose1, cam).map(|px| (px - f1.features.keypoints[*i].pixel()).norm());
        let e2 = crate::geometry::project(p, &pose2, cam).map(|px| (px - f2.features.keypoints[*j].pixel()).norm());
        matches!((e1, e2), (Some(a), Some(b)) if a <= gate && b <= gate)
    });
    if tracks.len() < cfg.init_min_points {
        return Err(InitFailure::TooFewInliers { found: tracks.len(), required: cfg.init_min_points }.into());
    }

    let mut depths: Vec<f64> = tracks.iter().map(|t| t.2.z).collect();
    depths.sort_by(f64::total_cmp);
    let scale = 1.0 / depths[depths.len() / 2];
    pose2 = Pose::new(*pose2.rotation(), pose2.translation() * scale);

    f1.pose = Some(pose1);
    f2.pose = Some(pose2);
    f1.links.iter_mut().for_each(|l| *l = None);
    f2.links.iter_mut().for_each(|l| *l = None);
    f1.outliers.iter_mut().for_each(|o| *o = false);
    f2.outliers.iter_mut().for_each(|o| *o = false);
    let bow = |f: &Frame| -> Result<BowVector, TrackError> {
        Ok(match vocab {
            Some(v) => v.to_bow(&f.features.descriptors)?,
            None => BowVector::default(),
        })
    };
    let (b1, b2) = (bow(f1)?, bow(f2)?);
    let kf1 = map.insert_keyframe(f1, b1)?;
    let kf2 = map.insert_keyframe(f2, b2)?;
    for (i, j, p) in &tracks {
        let id = map.add_map_point(p * scale, &[(kf1, *i), (kf2, *j)])?;
        f1.links[*i] = Some(id);
        f2.links[*j] = Some(id);
    }

    let gap = f2.index.saturating_sub(f1.index).max(1);
    state.mode = TrackingMode::Ok;
    state.velocity = Some(Pose::exp(&(pose2.log() / gap as f64)));
    state.last_pose = Some(pose2);
    state.last_frame = Some(f2.clone());
    state.on_keyframe(kf2, f2.index);
    Ok((kf1, kf2))
}

/// Constant-velocity prediction for the next frame.
pub fn predict_pose(state: &TrackerState) -> Result<Pose, TrackError> {
    if state.mode != TrackingMode::Ok {
        return Err(TrackError::WrongMode(state.mode));
    }
    let last = state.last_pose.ok_or(TrackError::WrongMode(state.mode))?;
    Ok(state.velocity.unwrap_or_else(Pose::identity) * last)
}

struct Candidate<'a> {
    id: MapPointId,
    position: Point3,
    descriptor: &'a Descriptor,
}

/// Best map point per keypoint among candidates projecting within `radius`.
fn search_by_projection(
    frame: &Frame,
    grid: &KeypointGrid,
    pose: &Pose,
    cam: &CameraIntrinsics,
    candidates: &[Candidate<'_>],
    radius: f64,
    gate: f64,
    taken: &mut BTreeMap<usize, (MapPointId, f64)>,
    fixed: &BTreeSet<usize>,
) {
    for c in candidates {
        let Some(px) = crate::geometry::project(&c.position, pose, cam) else { continue };
        if !cam.contains(&px) {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in grid.within(&px, radius) {
            if fixed.contains(&i) {
                continue;
            }
            let d = &frame.features.descriptors[i];
            if !d.compatible(c.descriptor) {
                continue;
            }
            let dist = d.distance_unchecked(c.descriptor);
            if dist <= gate && best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        if let Some((i, dist)) = best {
            if taken.get(&i).is_none_or(|&(_, od)| dist < od) {
                taken.insert(i, (c.id, dist));
            }
        }
    }
}

struct Outcome {
    pose: Pose,
    assoc: Vec<(usize, MapPointId)>,
    inliers: Vec<bool>,
}

impl Outcome {
    fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn candidates_for<'m>(map: &'m Map, ids: impl IntoIterator<Item = MapPointId>) -> Vec<Candidate<'m>> {
    let mut seen = BTreeSet::new();
    ids.into_iter()
        .filter_map(|id| map.resolve(id))
        .filter(|id| seen.insert(*id))
        .filter_map(|id| map.point(id).map(|p| Candidate { id, position: p.position, descriptor: &p.descriptor }))
        .collect()
}

fn solve(
    frame: &Frame,
    initial: &Pose,
    taken: &BTreeMap<usize, (MapPointId, f64)>,
    map: &Map,
    cam: &CameraIntrinsics,
    lm: &LmConfig,
) -> Option<Outcome> {
    let assoc: Vec<(usize, MapPointId)> = taken.iter().map(|(&i, &(p, _))| (i, p)).collect();
    let obs: Vec<(Point3, crate::geometry::Pixel)> = assoc
        .iter()
        .map(|&(i, p)| (map.point(p).expect("resolved").position, frame.features.keypoints[i].pixel()))
        .collect();
    let r = optimize_pose_only(initial, &obs, cam, lm).ok()?;
    Some(Outcome { pose: r.pose, assoc, inliers: r.inliers })
}

/// Adds local-map matches around `reference` to the inliers of `first` and re-solves.
fn refine_with_local_map(
    frame: &Frame,
    grid: &KeypointGrid,
    first: Outcome,
    reference: KeyFrameId,
    map: &Map,
    cam: &CameraIntrinsics,
    cfg: &TrackingConfig,
    gate: f64,
) -> Outcome {
    let mut taken: BTreeMap<usize, (MapPointId, f64)> = first
        .assoc
        .iter()
        .zip(&first.inliers)
        .filter(|(_, &ok)| ok)
        .map(|(&(i, p), _)| (i, (p, 0.0)))
        .collect();
    let fixed: BTreeSet<usize> = taken.keys().copied().collect();
    let have: BTreeSet<MapPointId> = taken.values().map(|v| v.0).collect();
    let Ok((_, local)) = map.local_neighborhood(reference) else { return first };
    let cands = candidates_for(map, local.into_iter().filter(|p| !have.contains(p)));
    search_by_projection(frame, grid, &first.pose, cam, &cands, cfg.local_radius_px, gate, &mut taken, &fixed);
    if taken.len() == fixed.len() {
        return first;
    }
    match solve(frame, &first.pose, &taken, map, cam, &cfg.lm) {
        Some(o) if o.inlier_count() >= first.inlier_count() => o,
        _ => first,
    }
}

fn track_with(
    frame: &Frame,
    predicted: &Pose,
    th: MatchThresholds,
    state: &TrackerState,
    map: &Map,
    cam: &CameraIntrinsics,
    cfg: &TrackingConfig,
) -> Option<Outcome> {
    if frame.features.is_empty() {
        return None;
    }
    let last = state.last_frame.as_ref()?;
    let grid = KeypointGrid::new(&frame.features.keypoints, cam.width, cam.height, GRID_CELL_PX);
    let cands = candidates_for(map, last.tracked().map(|(_, p)| p));
    let none = BTreeSet::new();
    let mut taken = BTreeMap::new();
    search_by_projection(frame, &grid, predicted, cam, &cands, cfg.search_radius_px, th.th_high, &mut taken, &none);
    if taken.len() < cfg.track_min {
        taken.clear();
        search_by_projection(frame, &grid, predicted, cam, &cands, 2.0 * cfg.search_radius_px, th.th_high, &mut taken, &none);
    }
    let first = solve(frame, predicted, &taken, map, cam, &cfg.lm)?;
    let reference = state.reference_kf.and_then(|k| map.live_keyframe(k))?;
    Some(refine_with_local_map(frame, &grid, first, reference, map, cam, cfg, th.th_high))
}

/// Last-frame map points not confirmed as inliers in the current frame.
fn missed_last_points(state: &TrackerState, map: &Map, outcome: Option<&Outcome>) -> (usize, usize) {
    let Some(last) = state.last_frame.as_ref() else { return (0, 0) };
    let last_pts: BTreeSet<MapPointId> = last.tracked().filter_map(|(_, p)| map.resolve(p)).collect();
    let confirmed: BTreeSet<MapPointId> = outcome
        .map(|o| o.assoc.iter().zip(&o.inliers).filter(|(_, &ok)| ok).map(|(&(_, p), _)| p).collect())
        .unwrap_or_default();
    let missed = last_pts.iter().filter(|p| !confirmed.contains(p)).count();
    (last_pts.len(), missed)
}

fn commit(frame: &mut Frame, o: &Outcome, th: MatchThresholds, map: &mut Map) -> TrackResult {
    frame.pose = Some(o.pose);
    frame.links.iter_mut().for_each(|l| *l = None);
    frame.outliers.iter_mut().for_each(|x| *x = false);
    for (&(i, p), &ok) in o.assoc.iter().zip(&o.inliers) {
        frame.links[i] = Some(p);
        frame.outliers[i] = !ok;
        map.mark_visible(p);
        if ok {
            map.mark_found(p);
        }
    }
    let inlier_count = o.inlier_count();
    TrackResult {
        pose: o.pose,
        inlier_count,
        outlier_count: o.assoc.len() - inlier_count,
        matched_map_points: o.assoc.clone(),
        inliers: o.inliers.clone(),
        thresholds: th,
    }
}

/// The keyframe sharing the most inlier points with the frame, ties to the newest.
fn best_reference(frame: &Frame, map: &Map) -> Option<KeyFrameId> {
    let mut votes: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
    for (_, p) in frame.tracked() {
        if let Some(mp) = map.resolve(p).and_then(|p| map.point(p)) {
            for &kf in mp.observations.keys() {
                *votes.entry(kf).or_default() += 1;
            }
        }
    }
    votes.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0))).map(|(k, _)| k)
}

fn accept(frame: &mut Frame, o: &Outcome, th: MatchThresholds, state: &mut TrackerState, map: &mut Map) -> TrackResult {
    let result = commit(frame, o, th, map);
    if let (Some(last), Some(prev)) = (state.last_pose, state.last_frame.as_ref()) {
        if state.mode == TrackingMode::Ok {
            let gap = frame.index.saturating_sub(prev.index).max(1);
            state.velocity = Some(Pose::exp(&((o.pose * last.inverse()).log() / gap as f64)));
        }
    }
    state.mode = TrackingMode::Ok;
    state.last_pose = Some(o.pose);
    if let Some(r) = best_reference(frame, map) {
        state.reference_kf = Some(r);
    }
    state.last_frame = Some(frame.clone());
    result
}

/// Tracks `frame` against the map from the predicted pose. With adaptive
/// thresholds enabled, the thresholds are updated from this frame's outcome
/// and a failed frame is retried once with the updated pair.
pub fn track_frame(
    frame: &mut Frame,
    state: &mut TrackerState,
    map: &mut Map,
    cam: &CameraIntrinsics,
    cfg: &TrackingConfig,
) -> Result<TrackResult, TrackError> {
    let predicted = predict_pose(state)?;
    let mut used = state.thresholds;
    let mut outcome = track_with(frame, &predicted, used, state, map, cam, cfg);
    let ok = |o: &Option<Outcome>| o.as_ref().is_some_and(|o| o.inlier_count() >= cfg.track_min);
    if let Some(a) = &cfg.adaptive {
        let (mp, missed) = missed_last_points(state, map, outcome.as_ref());
        let mut th = adapt_thresholds(mp, missed, a);
        if !ok(&outcome) && th != state.thresholds {
            used = th;
            outcome = track_with(frame, &predicted, used, state, map, cam, cfg);
            let (mp, missed) = missed_last_points(state, map, outcome.as_ref());
            th = adapt_thresholds(mp, missed, a);
        }
        state.thresholds = th;
    }
    match outcome {
        Some(o) if o.inlier_count() >= cfg.track_min => Ok(accept(frame, &o, used, state, map)),
        other => {
            state.mark_lost();
            Err(TrackError::TrackLost { inliers: other.map_or(0, |o| o.inlier_count()) })
        }
    }
}

/// Whether the frame just tracked should become a keyframe.
pub fn need_keyframe(result: &TrackResult, state: &TrackerState, map: &Map, frame_index: usize, cfg: &TrackingConfig) -> bool {
    if state.mode != TrackingMode::Ok {
        return false;
    }
    if frame_index.saturating_sub(state.last_keyframe_index) >= cfg.kf_max_gap {
        return true;
    }
    let reference_points = state
        .reference_kf
        .and_then(|k| map.live_keyframe(k))
        .and_then(|k| map.keyframe(k))
        .map_or(0, |k| k.point_count());
    (result.inlier_count as f64) < cfg.kf_ratio * reference_points as f64 && result.inlier_count > cfg.track_min
}

/// Recovers the pose of a lost frame from keyframes retrieved by BoW similarity.
#[allow(clippy::too_many_arguments)]
pub fn relocalize(
    frame: &mut Frame,
    state: &mut TrackerState,
    map: &mut Map,
    db: &KeyFrameDatabase,
    vocab: &Vocabulary,
    cam: &CameraIntrinsics,
    cfg: &TrackingConfig,
) -> Result<TrackResult, TrackError> {
    if state.mode != TrackingMode::Lost {
        return Err(TrackError::WrongMode(state.mode));
    }
    if frame.features.is_empty() || db.is_empty() {
        return Err(TrackError::StillLost);
    }
    let bow = vocab.to_bow(&frame.features.descriptors)?;
    let grid = KeypointGrid::new(&frame.features.keypoints, cam.width, cam.height, GRID_CELL_PX);
    let mut best: Option<(Outcome, KeyFrameId)> = None;
    for (cand, _) in db.query(&bow, cfg.reloc_min_score).into_iter().take(cfg.reloc_candidates) {
        let Some(kf) = map.keyframe(cand) else { continue };
        let pts: Vec<MapPointId> = kf.points().map(|(_, p)| p).collect();
        let cands = candidates_for(map, pts);
        let descs: Vec<Descriptor> = cands.iter().map(|c| c.descriptor.clone()).collect();
        let Ok(matches) = match_descriptors(&frame.features.descriptors, &descs, state.thresholds, true) else { continue };
        if matches.len() < cfg.reloc_min_inliers {
            continue;
        }
        let taken: BTreeMap<usize, (MapPointId, f64)> =
            matches.iter().map(|m| (m.query, (cands[m.train].id, m.distance))).collect();
        let seeds = std::iter::once(kf.pose).chain(state.last_pose);
        let Some(first) = seeds
            .filter_map(|s| solve(frame, &s, &taken, map, cam, &cfg.lm))
            .max_by_key(|o| o.inlier_count())
        else {
            continue;
        };
        if first.inlier_count() < cfg.reloc_min_inliers {
            continue;
        }
        let refined = refine_with_local_map(frame, &grid, first, cand, map, cam, cfg, state.thresholds.th_low);
        if refined.inlier_count() >= cfg.reloc_min_inliers
            && best.as_ref().is_none_or(|(b, _)| refined.inlier_count() > b.inlier_count())
        {
            best = Some((refined, cand));
        }
    }
    let Some((o, cand)) = best else { return Err(TrackError::StillLost) };
    state.velocity = None;
    let result = accept(frame, &o, state.thresholds, state, map);
    state.reference_kf = Some(cand);
    Ok(result)
}

#[cfg(test)]
mod tests;
