//! Map growth after each new keyframe: triangulation against covisible
//! keyframes, duplicate fusion, local bundle adjustment and culling.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Vector3};

use crate::features::{match_descriptors, Descriptor, KeypointGrid, MatchThresholds};
use crate::geometry::{
    project, skew, triangulate_with_parallax, CameraIntrinsics, Pixel, Point3, Pose, PARALLAX_MIN_RAD,
};
use crate::map::{KeyFrameId, Map, MapError, MapPointId};
use crate::optim::{BundleProblem, LmConfig};

const GRID_CELL_PX: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MappingConfig {
    pub reproj_max_px: f64,
    pub fuse_radius_px: f64,
    /// Distance of a candidate match from its epipolar line, pixels.
    pub epipolar_max_px: f64,
    pub min_parallax_rad: f64,
    pub triangulation_neighbors: usize,
    pub ba: LmConfig,
    pub local_ba: bool,
    pub cull: bool,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            reproj_max_px: 2.0,
            fuse_radius_px: 3.0,
            epipolar_max_px: 2.0,
            min_parallax_rad: PARALLAX_MIN_RAD,
            triangulation_neighbors: 10,
            ba: LmConfig { max_iters: 10, ..LmConfig::default() },
            local_ba: true,
            cull: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct MappingReport {
    pub new_points: usize,
    pub fused_points: usize,
    pub ba_initial_cost: f64,
    pub ba_final_cost: f64,
    pub pruned_observations: usize,
    pub culled: Vec<KeyFrameId>,
}

/// Runs the full mapping step for a freshly inserted keyframe.
pub fn process_keyframe(
    map: &mut Map,
    kf: KeyFrameId,
    cam: &CameraIntrinsics,
    th: MatchThresholds,
    cfg: &MappingConfig,
) -> Result<MappingReport, MapError> {
    let neighbors: Vec<KeyFrameId> =
        map.neighbors(kf).into_iter().take(cfg.triangulation_neighbors).map(|(k, _)| k).collect();
    let created = triangulate_new_points(map, kf, &neighbors, cam, th, cfg)?;
    let neighbors: Vec<KeyFrameId> =
        map.neighbors(kf).into_iter().take(cfg.triangulation_neighbors).map(|(k, _)| k).collect();
    let fused = fuse_duplicates(map, kf, &neighbors, cam, th, cfg)?;
    let (ba_initial_cost, ba_final_cost, pruned) =
        if cfg.local_ba { local_bundle_adjustment(map, kf, cam, cfg)? } else { (0.0, 0.0, 0) };
    let culled = if cfg.cull { map.cull_keyframes(&[kf]) } else { Vec::new() };
    Ok(MappingReport {
        new_points: created.len(),
        fused_points: fused,
        ba_initial_cost,
        ba_final_cost,
        pruned_observations: pruned,
        culled,
    })
}

/// Fundamental matrix taking pixels of `a` to epipolar lines in `b`.
fn fundamental(a: &Pose, b: &Pose, cam: &CameraIntrinsics) -> Matrix3<f64> {
    let rel = *b * a.inverse();
    let e = skew(&rel.translation()) * rel.rotation_matrix();
    let kinv = cam.k_matrix().try_inverse().expect("valid intrinsics");
    kinv.transpose() * e * kinv
}

fn line_distance(f: &Matrix3<f64>, pa: &Pixel, pb: &Pixel) -> f64 {
    let (xa, xb) = (Vector3::new(pa.x, pa.y, 1.0), Vector3::new(pb.x, pb.y, 1.0));
    let l = f * xa;
    let lt = f.transpose() * xb;
    let r = xb.dot(&l).abs();
    (r / l.xy().norm()).max(r / lt.xy().norm())
}

fn reprojects(p: &Point3, pose: &Pose, px: &Pixel, cam: &CameraIntrinsics, max: f64) -> bool {
    project(p, pose, cam).is_some_and(|q| (q - px).norm() <= max)
}

/// Triangulates matches between unassociated keypoints of `kf` and each neighbour.
pub fn triangulate_new_points(
    map: &mut Map,
    kf: KeyFrameId,
    neighbors: &[KeyFrameId],
    cam: &CameraIntrinsics,
    th: MatchThresholds,
    cfg: &MappingConfig,
) -> Result<Vec<MapPointId>, MapError> {
    let mut created = Vec::new();
    for &n in neighbors {
        if n == kf {
            continue;
        }
        let a = map.keyframe(kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let Some(b) = map.keyframe(n) else { continue };
        let (pa, pb) = (a.pose, b.pose);
        if (pa.center() - pb.center()).norm() < 1e-9 {
            continue;
        }
        let ua: Vec<usize> = (0..a.links.len()).filter(|&i| a.links[i].is_none()).collect();
        let ub: Vec<usize> = (0..b.links.len()).filter(|&i| b.links[i].is_none()).collect();
        let da: Vec<Descriptor> = ua.iter().map(|&i| a.features.descriptors[i].clone()).collect();
        let db: Vec<Descriptor> = ub.iter().map(|&i| b.features.descriptors[i].clone()).collect();
        let Ok(matches) = match_descriptors(&da, &db, th, true) else { continue };
        let f = fundamental(&pa, &pb, cam);
        let mut accepted = Vec::new();
        for m in matches {
            let (ia, ib) = (ua[m.query], ub[m.train]);
            let (xa, xb) = (a.features.keypoints[ia].pixel(), b.features.keypoints[ib].pixel());
            if line_distance(&f, &xa, &xb) > cfg.epipolar_max_px {
                continue;
            }
            let Ok(p) = triangulate_with_parallax(&xa, &xb, &pa, &pb, cam, cfg.min_parallax_rad) else { continue };
            if reprojects(&p, &pa, &xa, cam, cfg.reproj_max_px) && reprojects(&p, &pb, &xb, cam, cfg.reproj_max_px) {
                accepted.push((p, ia, ib));
            }
        }
        for (p, ia, ib) in accepted {
            created.push(map.add_map_point(p, &[(kf, ia), (n, ib)])?);
        }
    }
    Ok(created)
}

/// Which of two duplicates survives a merge.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Keep<'a> {
    MoreObserved,
    /// Points in this set win; otherwise falls back to the better observed one.
    Preferred(&'a BTreeSet<MapPointId>),
}

/// Projects `candidates` into each target keyframe; a candidate close to a
/// keypoint in pixels and descriptor either gains that observation or is
/// merged with the point already linked there. Returns the number of merges.
pub(crate) fn fuse_into(
    map: &mut Map,
    targets: &[KeyFrameId],
    candidates: &[MapPointId],
    cam: &CameraIntrinsics,
    gate: f64,
    radius: f64,
    keep: Keep<'_>,
) -> Result<usize, MapError> {
    let mut merges = 0;
    for &t in targets {
        let Some(k) = map.keyframe(t) else { continue };
        let pose = k.pose;
        let features = k.features.clone();
        let grid = KeypointGrid::new(&features.keypoints, cam.width, cam.height, GRID_CELL_PX);
        for &c in candidates {
            let Some(p) = map.resolve(c) else { continue };
            let mp = map.point(p).expect("resolved");
            if mp.observations.contains_key(&t) {
                continue;
            }
            let Some(px) = project(&mp.position, &pose, cam) else { continue };
            if !cam.contains(&px) {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for i in grid.within(&px, radius) {
                let d = &features.descriptors[i];
                if !d.compatible(&mp.descriptor) {
                    continue;
                }
                let dist = d.distance_unchecked(&mp.descriptor);
                if dist < gate && best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some((i, dist));
                }
            }
            let Some((i, _)) = best else { continue };
            let linked = map.keyframe(t).expect("live").links[i].and_then(|q| map.resolve(q));
            match linked {
                None => map.add_observation(p, t, i)?,
                Some(q) if q == p => {}
                Some(q) => {
                    let (from, into) = survivor(map, p, q, keep);
                    map.fuse_points(from, into)?;
                    merges += 1;
                }
            }
        }
    }
    Ok(merges)
}

/// (absorbed, surviving) for two duplicate points.
fn survivor(map: &Map, p: MapPointId, q: MapPointId, keep: Keep<'_>) -> (MapPointId, MapPointId) {
    if let Keep::Preferred(set) = keep {
        match (set.contains(&p), set.contains(&q)) {
            (true, false) => return (q, p),
            (false, true) => return (p, q),
            _ => {}
        }
    }
    let (np, nq) = (map.point(p).expect("live").observations.len(), map.point(q).expect("live").observations.len());
    if np > nq || (np == nq && p < q) {
        (q, p)
    } else {
        (p, q)
    }
}

/// Merges duplicates among the points of `kf` and its neighbours.
pub fn fuse_duplicates(
    map: &mut Map,
    kf: KeyFrameId,
    neighbors: &[KeyFrameId],
    cam: &CameraIntrinsics,
    th: MatchThresholds,
    cfg: &MappingConfig,
) -> Result<usize, MapError> {
    let mut targets = vec![kf];
    targets.extend(neighbors.iter().copied().filter(|&n| n != kf));
    let candidates: BTreeSet<MapPointId> = targets
        .iter()
        .filter_map(|&t| map.keyframe(t))
        .flat_map(|k| k.points().map(|(_, p)| p))
        .collect();
    let candidates: Vec<MapPointId> = candidates.into_iter().collect();
    fuse_into(map, &targets, &candidates, cam, th.th_low, cfg.fuse_radius_px, Keep::MoreObserved)
}

/// Drops observations of `points` that reproject beyond `max_px` (or behind the
/// camera), then removes points left with fewer than two observations.
pub fn prune_observations(map: &mut Map, points: &[MapPointId], cam: &CameraIntrinsics, max_px: f64) -> usize {
    let mut removed = 0;
    for &p in points {
        let Some(mp) = map.point(p) else { continue };
        let bad: Vec<KeyFrameId> = mp
            .observations
            .iter()
            .filter(|(&k, &i)| {
                let kf = map.keyframe(k).expect("audited back link");
                !reprojects(&mp.position, &kf.pose, &kf.features.keypoints[i].pixel(), cam, max_px)
            })
            .map(|(&k, _)| k)
            .collect();
        let remaining = mp.observations.len() - bad.len();
        if remaining < 2 {
            removed += mp.observations.len();
            map.remove_map_point(p).expect("live point");
            continue;
        }
        for k in bad {
            map.remove_observation(p, k).expect("live observation");
            removed += 1;
        }
    }
    removed
}

/// Bundle adjustment over the local neighbourhood of `kf`. Keyframes outside it
/// that observe local points are held fixed, as is the map's first keyframe.
/// Returns (initial cost, final cost, pruned observations).
pub fn local_bundle_adjustment(
    map: &mut Map,
    kf: KeyFrameId,
    cam: &CameraIntrinsics,
    cfg: &MappingConfig,
) -> Result<(f64, f64, usize), MapError> {
    let (local_kfs, local_pts) = map.local_neighborhood(kf)?;
    let first = map.keyframe_ids().first().copied();
    let local: BTreeSet<KeyFrameId> = local_kfs.iter().copied().collect();
    let mut fixed: BTreeSet<KeyFrameId> = local_pts
        .iter()
        .flat_map(|p| map.point(*p).expect("live").observations.keys().copied())
        .filter(|k| !local.contains(k))
        .collect();
    fixed.extend(first.filter(|f| local.contains(f)));
    if fixed.is_empty() {
        fixed.insert(local_kfs[0]);
    }
    let (initial, final_cost) = adjust(map, &local_kfs, &fixed, &local_pts, cam, &cfg.ba);
    let pruned = prune_observations(map, &local_pts, cam, cfg.reproj_max_px);
    Ok((initial, final_cost, pruned))
}

/// Bundle adjustment over all keyframes with the first one fixed.
pub fn global_bundle_adjustment(map: &mut Map, cam: &CameraIntrinsics, lm: &LmConfig, reproj_max_px: f64) -> (f64, f64) {
    let kfs = map.keyframe_ids();
    let Some(&first) = kfs.first() else { return (0.0, 0.0) };
    let pts: Vec<MapPointId> = map.points().map(|p| p.id).collect();
    let fixed = BTreeSet::from([first]);
    let out = adjust(map, &kfs, &fixed, &pts, cam, lm);
    prune_observations(map, &pts, cam, reproj_max_px);
    out
}

fn adjust(
    map: &mut Map,
    free_or_fixed: &[KeyFrameId],
    fixed: &BTreeSet<KeyFrameId>,
    points: &[MapPointId],
    cam: &CameraIntrinsics,
    lm: &LmConfig,
) -> (f64, f64) {
    let mut ba = BundleProblem::new(*cam);
    let mut pose_index: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
    for &k in free_or_fixed.iter().chain(fixed.iter()) {
        if pose_index.contains_key(&k) {
            continue;
        }
        let Some(kf) = map.keyframe(k) else { continue };
        pose_index.insert(k, ba.add_pose(kf.pose, fixed.contains(&k)));
    }
    let mut point_index = Vec::with_capacity(points.len());
    for &p in points {
        let mp = map.point(p).expect("live");
        let pi = ba.add_point(mp.position, false);
        point_index.push((p, pi));
        for (&k, &i) in &mp.observations {
            if let Some(&ki) = pose_index.get(&k) {
                ba.observe(ki, pi, map.keyframe(k).expect("live").features.keypoints[i].pixel());
            }
        }
    }
    let Ok(summary) = ba.solve_lm(lm) else {
        let c = ba.cost(lm.huber_delta);
        return (c, c);
    };
    for (&k, &i) in &pose_index {
        if !fixed.contains(&k) {
            map.set_keyframe_pose(k, ba.poses[i]).expect("live");
        }
    }
    for (p, pi) in point_index {
        map.set_point_position(p, ba.points[pi]).expect("live");
    }
    (summary.initial_cost, summary.final_cost)
}
