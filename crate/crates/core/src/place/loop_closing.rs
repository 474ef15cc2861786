use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::database::LoopCandidate;
use crate::features::{match_descriptors, Descriptor, MatchThresholds};
use crate::geometry::{project, CameraIntrinsics, Pixel, Point3, Sim3};
use crate::map::{KeyFrameId, Map, MapError, MapPointId};
use crate::mapping::{fuse_into, global_bundle_adjustment, prune_observations, Keep};
use crate::optim::{optimize_pose_graph, solve_sim3, LmConfig, PoseGraphEdge};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopClosingConfig {
    pub sim3_min_inliers: usize,
    pub ransac_iterations: usize,
    /// Reprojection gate for a Sim3 inlier, pixels, checked in both keyframes.
    pub inlier_px: f64,
    pub fuse_radius_px: f64,
    pub reproj_max_px: f64,
    pub pose_graph: LmConfig,
    /// Bundle adjustment iterations over the whole map after correction; 0 disables it.
    pub global_ba_iters: usize,
    pub seed: u64,
}

impl Default for LoopClosingConfig {
    fn default() -> Self {
        Self {
            sim3_min_inliers: 20,
            ransac_iterations: 200,
            inlier_px: 3.0,
            fuse_radius_px: 3.0,
            reproj_max_px: 2.0,
            pose_graph: LmConfig { max_iters: 20, ..LmConfig::default() },
            global_ba_iters: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopCorrection {
    pub current: KeyFrameId,
    pub candidate: KeyFrameId,
    /// Maps current-map coordinates into the candidate's coordinates.
    pub sim3: Sim3,
    pub inliers: usize,
    pub fused: usize,
    pub corrected_keyframes: Vec<KeyFrameId>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoopError {
    #[error("loop rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

struct PointPair {
    cur: MapPointId,
    cand: MapPointId,
    cur_pos: Point3,
    cand_pos: Point3,
    cur_px: Pixel,
    cand_px: Pixel,
}

/// Map points of `kf` as (point, position, representative descriptor, keypoint pixel).
fn keyframe_points(map: &Map, kf: KeyFrameId) -> Vec<(MapPointId, Point3, Descriptor, Pixel)> {
    let k = map.keyframe(kf).expect("checked");
    k.points()
        .filter_map(|(i, p)| {
            let mp = map.point(p)?;
            Some((p, mp.position, mp.descriptor.clone(), k.features.keypoints[i].pixel()))
        })
        .collect()
}

fn point_pairs(map: &Map, current: KeyFrameId, candidate: KeyFrameId, th: MatchThresholds) -> Vec<PointPair> {
    let cur = keyframe_points(map, current);
    let cand = keyframe_points(map, candidate);
    let dc: Vec<Descriptor> = cur.iter().map(|c| c.2.clone()).collect();
    let dk: Vec<Descriptor> = cand.iter().map(|c| c.2.clone()).collect();
    let Ok(matches) = match_descriptors(&dc, &dk, th, true) else { return Vec::new() };
    matches
        .into_iter()
        .filter(|m| cur[m.query].0 != cand[m.train].0)
        .map(|m| {
            let (a, b) = (&cur[m.query], &cand[m.train]);
            PointPair { cur: a.0, cand: b.0, cur_pos: a.1, cand_pos: b.1, cur_px: a.3, cand_px: b.3 }
        })
        .collect()
}

fn inliers_of(
    s: &Sim3,
    pairs: &[PointPair],
    map: &Map,
    current: KeyFrameId,
    candidate: KeyFrameId,
    cam: &CameraIntrinsics,
    gate: f64,
) -> Vec<bool> {
    let (pc, pk) = (map.keyframe(current).expect("checked").pose, map.keyframe(candidate).expect("checked").pose);
    let inv = s.inverse();
    pairs
        .iter()
        .map(|p| {
            let fwd = project(&s.transform(&p.cur_pos), &pk, cam).is_some_and(|q| (q - p.cand_px).norm() <= gate);
            let bwd = project(&inv.transform(&p.cand_pos), &pc, cam).is_some_and(|q| (q - p.cur_px).norm() <= gate);
            fwd && bwd
        })
        .collect()
}

/// Sim3 from current to candidate coordinates with its inlier mask.
fn ransac_sim3(
    pairs: &[PointPair],
    map: &Map,
    current: KeyFrameId,
    candidate: KeyFrameId,
    cam: &CameraIntrinsics,
    cfg: &LoopClosingConfig,
) -> Option<(Sim3, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ current.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ candidate);
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    let mut best: Option<(Sim3, Vec<bool>)> = None;
    for _ in 0..cfg.ransac_iterations {
        let idx = sample(&mut rng, pairs.len(), 3);
        let sel: Vec<(Point3, Point3)> = idx.iter().map(|i| (pairs[i].cur_pos, pairs[i].cand_pos)).collect();
        let Ok(s) = solve_sim3(&sel) else { continue };
        let mask = inliers_of(&s, pairs, map, current, candidate, cam, cfg.inlier_px);
        if best.as_ref().is_none_or(|(_, b)| count(&mask) > count(b)) {
            best = Some((s, mask));
        }
    }
    let (s, mask) = best?;
    let sel: Vec<(Point3, Point3)> =
        pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| (p.cur_pos, p.cand_pos)).collect();
    let refit = solve_sim3(&sel).ok()?;
    let refit_mask = inliers_of(&refit, pairs, map, current, candidate, cam, cfg.inlier_px);
    if count(&refit_mask) >= count(&mask) {
        Some((refit, refit_mask))
    } else {
        Some((s, mask))
    }
}

/// Validates a loop candidate geometrically and, if it holds, corrects the map.
/// On rejection the map is left untouched.
pub fn close_loop(
    map: &mut Map,
    candidate: &LoopCandidate,
    current: KeyFrameId,
    cam: &CameraIntrinsics,
    th: MatchThresholds,
    cfg: &LoopClosingConfig,
) -> Result<LoopCorrection, LoopError> {
    let cand = candidate.keyframe;
    for k in [current, cand] {
        if map.keyframe(k).is_none() {
            return Err(MapError::UnknownKeyFrame(k).into());
        }
    }
    let pairs = point_pairs(map, current, cand, th);
    if pairs.len() < 3 {
        return Err(LoopError::Rejected(format!("{} point matches", pairs.len())));
    }
    let Some((s, mask)) = ransac_sim3(&pairs, map, current, cand, cam, cfg) else {
        return Err(LoopError::Rejected("no similarity hypothesis".into()));
    };
    let inliers = mask.iter().filter(|&&b| b).count();
    if inliers < cfg.sim3_min_inliers {
        return Err(LoopError::Rejected(format!("{inliers} Sim3 inliers")));
    }

    let mut m = map.clone();
    let (connected, conn_points) = m.local_neighborhood(current)?;
    let conn: BTreeSet<KeyFrameId> = connected.iter().copied().collect();
    let before: BTreeMap<KeyFrameId, Sim3> = m.keyframes().map(|k| (k.id, k.pose.to_sim3())).collect();
    let old_neighbors: BTreeMap<KeyFrameId, BTreeSet<KeyFrameId>> =
        connected.iter().map(|&k| (k, m.neighbors(k).into_iter().map(|n| n.0).collect())).collect();

    // move the current side of the loop onto the candidate side
    let s_inv = s.inverse();
    let mut corrected: BTreeMap<KeyFrameId, Sim3> = BTreeMap::new();
    for &k in &connected {
        let c = before[&k] * s_inv;
        corrected.insert(k, c);
        m.set_keyframe_pose(k, c.to_pose())?;
    }
    let (_, loop_points) = m.local_neighborhood(cand)?;
    let loop_set: BTreeSet<MapPointId> = loop_points.iter().copied().collect();
    for &p in &conn_points {
        if !loop_set.contains(&p) {
            let pos = m.point(p).expect("live").position;
            m.set_point_position(p, s.transform(&pos))?;
        }
    }

    let mut fused = 0;
    for (p, _) in pairs.iter().zip(&mask).filter(|(_, &ok)| ok) {
        if let (Some(a), Some(b)) = (m.resolve(p.cur), m.resolve(p.cand)) {
            if a != b {
                m.fuse_points(a, b)?;
                fused += 1;
            }
        }
    }
    fused += fuse_into(&mut m, &connected, &loop_points, cam, th.th_low, cfg.fuse_radius_px, Keep::Preferred(&loop_set))?;

    // pose graph: odometry-like edges keep their pre-correction measurements,
    // links created by the loop use the corrected poses
    let ids = m.keyframe_ids();
    let index: BTreeMap<KeyFrameId, usize> = ids.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let initial: Vec<Sim3> = ids.iter().map(|k| corrected.get(k).copied().unwrap_or(before[k])).collect();
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |a: KeyFrameId, b: KeyFrameId, sa: &Sim3, sb: &Sim3, edges: &mut Vec<PoseGraphEdge>| {
        let key = (a.min(b), a.max(b));
        if a != b && seen.insert(key) {
            edges.push(PoseGraphEdge::from_poses(index[&a], index[&b], sa, sb, 1.0));
        }
    };
    push(current, cand, &corrected[&current], &before[&cand], &mut edges);
    for &k in &connected {
        for (n, _) in m.neighbors(k) {
            if !conn.contains(&n) && !old_neighbors[&k].contains(&n) {
                let sn = corrected.get(&n).copied().unwrap_or(before[&n]);
                push(k, n, &corrected[&k], &sn, &mut edges);
            }
        }
    }
    for &k in &ids {
        for (n, _) in m.neighbors(k) {
            push(k, n, &before[&k], &before[&n], &mut edges);
        }
    }
    for w in ids.windows(2) {
        push(w[0], w[1], &before[&w[0]], &before[&w[1]], &mut edges);
    }
    let fixed: Vec<bool> = ids.iter().map(|&k| k == ids[0] || k == cand).collect();
    let graph = optimize_pose_graph(&initial, &edges, &fixed, &cfg.pose_graph)
        .map_err(|e| LoopError::Rejected(format!("pose graph: {e}")))?;

    // each point follows the earliest keyframe observing it
    let moves: Vec<(MapPointId, Point3)> = m
        .points()
        .filter_map(|mp| {
            let (&r, _) = mp.observations.iter().next()?;
            let i = index[&r];
            let cam_pt = initial[i].transform(&mp.position);
            Some((mp.id, graph.poses[i].inverse().transform(&cam_pt)))
        })
        .collect();
    for (p, pos) in moves {
        m.set_point_position(p, pos)?;
    }
    for (i, &k) in ids.iter().enumerate() {
        m.set_keyframe_pose(k, graph.poses[i].to_pose())?;
    }
    if cfg.global_ba_iters > 0 {
        let lm = LmConfig { max_iters: cfg.global_ba_iters, ..cfg.pose_graph };
        global_bundle_adjustment(&mut m, cam, &lm, cfg.reproj_max_px);
    } else {
        let all: Vec<MapPointId> = m.points().map(|p| p.id).collect();
        prune_observations(&mut m, &all, cam, cfg.reproj_max_px);
    }
    let problems = m.audit();
    if !problems.is_empty() {
        return Err(LoopError::Rejected(format!("audit after correction: {}", problems.join("; "))));
    }
    *map = m;
    Ok(LoopCorrection { current, candidate: cand, sim3: s, inliers, fused, corrected_keyframes: connected })
}
