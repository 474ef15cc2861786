use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use super::{CulledKeyFrame, Frame, KeyFrame, KeyFrameId, MapError, MapPoint, MapPointId};
use crate::features::Descriptor;
use crate::geometry::{Point3, Pose};
use crate::place::BowVector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapConfig {
    /// Shared points needed before two keyframes count as covisible neighbours.
    pub covis_min: u32,
    pub redundancy_fraction: f64,
    pub redundancy_observers: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { covis_min: 15, redundancy_fraction: 0.9, redundancy_observers: 3 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct MapStats {
    pub keyframes: usize,
    pub map_points: usize,
    pub culled_keyframes: usize,
}

/// The map store. Ids are never reused; every public mutation keeps links,
/// observations and covisibility weights consistent.
#[derive(Clone, Debug, Default)]
pub struct Map {
    config: MapConfig,
    keyframes: BTreeMap<KeyFrameId, KeyFrame>,
    points: BTreeMap<MapPointId, MapPoint>,
    /// Raw co-observation counts for every pair sharing at least one point.
    covis: BTreeMap<KeyFrameId, BTreeMap<KeyFrameId, u32>>,
    culled: BTreeMap<KeyFrameId, CulledKeyFrame>,
    replaced: HashMap<MapPointId, MapPointId>,
    protected: Vec<KeyFrameId>,
    next_kf: KeyFrameId,
    next_point: MapPointId,
}

fn representative(descs: &[&Descriptor]) -> Descriptor {
    if descs.len() <= 2 {
        return descs[0].clone();
    }
    let n = descs.len();
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| descs[i].distance_unchecked(descs[j])).collect();
        d.sort_by(f64::total_cmp);
        let median = d[(d.len() - 1) / 2];
        if median < best.0 {
            best = (median, i);
        }
    }
    descs[best.1].clone()
}

impl Map {
    pub fn new(config: MapConfig) -> Self {
        Self { config, ..Default::default() }
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn stats(&self) -> MapStats {
        MapStats { keyframes: self.keyframes.len(), map_points: self.points.len(), culled_keyframes: self.culled.len() }
    }

    pub fn keyframe(&self, id: KeyFrameId) -> Option<&KeyFrame> {
        self.keyframes.get(&id)
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &KeyFrame> {
        self.keyframes.values()
    }

    pub fn keyframe_ids(&self) -> Vec<KeyFrameId> {
        self.keyframes.keys().copied().collect()
    }

    pub fn point(&self, id: MapPointId) -> Option<&MapPoint> {
        self.points.get(&id)
    }

    pub fn points(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.values()
    }

    pub fn culled(&self) -> &BTreeMap<KeyFrameId, CulledKeyFrame> {
        &self.culled
    }

    /// Follows fusion redirects; `None` when the point is gone for good.
    pub fn resolve(&self, mut id: MapPointId) -> Option<MapPointId> {
        for _ in 0..64 {
            if self.points.contains_key(&id) {
                return Some(id);
            }
            id = *self.replaced.get(&id)?;
        }
        None
    }

    fn kf_mut(&mut self, id: KeyFrameId) -> Result<&mut KeyFrame, MapError> {
        self.keyframes.get_mut(&id).ok_or(MapError::UnknownKeyFrame(id))
    }

    fn bump(&mut self, a: KeyFrameId, b: KeyFrameId, up: bool) {
        for (x, y) in [(a, b), (b, a)] {
            let row = self.covis.entry(x).or_default();
            let w = row.entry(y).or_insert(0);
            if up {
                *w += 1;
            } else {
                *w -= 1;
                if *w == 0 {
                    row.remove(&y);
                }
            }
            if row.is_empty() {
                self.covis.remove(&x);
            }
        }
    }

    fn refresh_descriptor(&mut self, id: MapPointId) {
        let Some(p) = self.points.get(&id) else { return };
        let descs: Vec<&Descriptor> = p
            .observations
            .iter()
            .filter_map(|(kf, &i)| self.keyframes.get(kf).map(|k| &k.features.descriptors[i]))
            .collect();
        if descs.is_empty() {
            return;
        }
        let d = representative(&descs);
        self.points.get_mut(&id).expect("checked").descriptor = d;
    }

    /// Stores a posed frame as a keyframe. Links to live points become observations;
    /// links to fused points are redirected, links to removed points are dropped.
    pub fn insert_keyframe(&mut self, frame: &Frame, bow: BowVector) -> Result<KeyFrameId, MapError> {
        let pose = frame.pose.ok_or(MapError::NoPose)?;
        let id = self.next_kf;
        self.next_kf += 1;
        let kf = KeyFrame {
            id,
            frame_index: frame.index,
            timestamp: frame.timestamp,
            features: frame.features.clone(),
            pose,
            links: vec![None; frame.features.len()],
            bow,
        };
        self.keyframes.insert(id, kf);
        if self.protected.len() < 2 {
            self.protected.push(id);
        }
        for (i, link) in frame.links.iter().enumerate() {
            if frame.outliers.get(i).copied().unwrap_or(false) {
                continue;
            }
            let Some(p) = link.and_then(|p| self.resolve(p)) else { continue };
            if self.points[&p].observations.contains_key(&id) {
                continue;
            }
            self.add_observation(p, id, i)?;
        }
        Ok(id)
    }

    pub fn add_map_point(&mut self, position: Point3, observations: &[(KeyFrameId, usize)]) -> Result<MapPointId, MapError> {
        if observations.is_empty() {
            return Err(MapError::NoObservations);
        }
        let mut seen = BTreeSet::new();
        for &(kf, i) in observations {
            let k = self.keyframes.get(&kf).ok_or(MapError::DanglingKeyFrame(kf))?;
            if i >= k.links.len() {
                return Err(MapError::KeypointOutOfRange { kf, index: i });
            }
            if let Some(point) = k.links[i] {
                return Err(MapError::KeypointTaken { kf, index: i, point });
            }
            if !seen.insert(kf) {
                return Err(MapError::DuplicateObservation { kf, point: self.next_point });
            }
        }
        let id = self.next_point;
        self.next_point += 1;
        let (kf0, i0) = observations[0];
        let descriptor = self.keyframes[&kf0].features.descriptors[i0].clone();
        self.points.insert(
            id,
            MapPoint { id, position, observations: BTreeMap::new(), descriptor, found: 1, visible: 1 },
        );
        for &(kf, i) in observations {
            self.link(id, kf, i);
        }
        self.refresh_descriptor(id);
        Ok(id)
    }

    fn link(&mut self, p: MapPointId, kf: KeyFrameId, i: usize) {
        let others: Vec<KeyFrameId> = self.points[&p].observations.keys().copied().collect();
        for o in others {
            self.bump(kf, o, true);
        }
        self.points.get_mut(&p).expect("live").observations.insert(kf, i);
        self.keyframes.get_mut(&kf).expect("live").links[i] = Some(p);
    }

    pub fn add_observation(&mut self, p: MapPointId, kf: KeyFrameId, index: usize) -> Result<(), MapError> {
        let k = self.keyframes.get(&kf).ok_or(MapError::DanglingKeyFrame(kf))?;
        if index >= k.links.len() {
            return Err(MapError::KeypointOutOfRange { kf, index });
        }
        if let Some(point) = k.links[index] {
            return Err(MapError::KeypointTaken { kf, index, point });
        }
        let mp = self.points.get(&p).ok_or(MapError::UnknownMapPoint(p))?;
        if mp.observations.contains_key(&kf) {
            return Err(MapError::DuplicateObservation { kf, point: p });
        }
        self.link(p, kf, index);
        self.refresh_descriptor(p);
        Ok(())
    }

    /// Drops one observation; a point left without observations is removed.
    pub fn remove_observation(&mut self, p: MapPointId, kf: KeyFrameId) -> Result<(), MapError> {
        let mp = self.points.get_mut(&p).ok_or(MapError::UnknownMapPoint(p))?;
        let i = mp.observations.remove(&kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let others: Vec<KeyFrameId> = mp.observations.keys().copied().collect();
        for o in others {
            self.bump(kf, o, false);
        }
        self.kf_mut(kf)?.links[i] = None;
        if self.points[&p].observations.is_empty() {
            self.points.remove(&p);
        } else {
            self.refresh_descriptor(p);
        }
        Ok(())
    }

    pub fn remove_map_point(&mut self, p: MapPointId) -> Result<(), MapError> {
        let obs: Vec<KeyFrameId> = self.points.get(&p).ok_or(MapError::UnknownMapPoint(p))?.observations.keys().copied().collect();
        for kf in obs {
            self.remove_observation(p, kf)?;
        }
        Ok(())
    }

    /// Merges `from` into `into`: observations are united (a keyframe seeing both keeps
    /// its link to `into`) and later lookups of `from` resolve to `into`.
    pub fn fuse_points(&mut self, from: MapPointId, into: MapPointId) -> Result<(), MapError> {
        if from == into {
            return Ok(());
        }
        let src = self.points.get(&from).ok_or(MapError::UnknownMapPoint(from))?.clone();
        let dst_obs = self.points.get(&into).ok_or(MapError::UnknownMapPoint(into))?.observations.clone();
        self.remove_map_point(from)?;
        for (&kf, &i) in &src.observations {
            if !dst_obs.contains_key(&kf) {
                self.link(into, kf, i);
            }
        }
        let dst = self.points.get_mut(&into).expect("live");
        dst.found += src.found;
        dst.visible += src.visible;
        self.refresh_descriptor(into);
        self.replaced.insert(from, into);
        Ok(())
    }

    pub fn set_point_position(&mut self, p: MapPointId, position: Point3) -> Result<(), MapError> {
        self.points.get_mut(&p).ok_or(MapError::UnknownMapPoint(p))?.position = position;
        Ok(())
    }

    pub fn set_keyframe_pose(&mut self, kf: KeyFrameId, pose: Pose) -> Result<(), MapError> {
        self.kf_mut(kf)?.pose = pose;
        Ok(())
    }

    pub fn set_keyframe_bow(&mut self, kf: KeyFrameId, bow: BowVector) -> Result<(), MapError> {
        self.kf_mut(kf)?.bow = bow;
        Ok(())
    }

    pub fn mark_found(&mut self, p: MapPointId) {
        if let Some(mp) = self.points.get_mut(&p) {
            mp.found += 1;
        }
    }

    pub fn mark_visible(&mut self, p: MapPointId) {
        if let Some(mp) = self.points.get_mut(&p) {
            mp.visible += 1;
        }
    }

    /// Raw number of points observed by both keyframes.
    pub fn covisibility_weight(&self, a: KeyFrameId, b: KeyFrameId) -> u32 {
        self.covis.get(&a).and_then(|r| r.get(&b)).copied().unwrap_or(0)
    }

    /// Covisible neighbours (weight ≥ covis_min), strongest first, ties by id.
    pub fn neighbors(&self, kf: KeyFrameId) -> Vec<(KeyFrameId, u32)> {
        self.neighbors_min(kf, self.config.covis_min)
    }

    pub fn neighbors_min(&self, kf: KeyFrameId, min: u32) -> Vec<(KeyFrameId, u32)> {
        let mut out: Vec<(KeyFrameId, u32)> = self
            .covis
            .get(&kf)
            .map(|r| r.iter().filter(|(_, &w)| w >= min.max(1)).map(|(&k, &w)| (k, w)).collect())
            .unwrap_or_default();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    /// The keyframe, its covisible neighbours, and every point they observe; both sorted by id.
    pub fn local_neighborhood(&self, kf: KeyFrameId) -> Result<(Vec<KeyFrameId>, Vec<MapPointId>), MapError> {
        if !self.keyframes.contains_key(&kf) {
            return Err(MapError::UnknownKeyFrame(kf));
        }
        let mut kfs: BTreeSet<KeyFrameId> = self.neighbors(kf).into_iter().map(|(k, _)| k).collect();
        kfs.insert(kf);
        let pts: BTreeSet<MapPointId> =
            kfs.iter().flat_map(|k| self.keyframes[k].points().map(|(_, p)| p)).collect();
        Ok((kfs.into_iter().collect(), pts.into_iter().collect()))
    }

    /// Removes a keyframe, keeping its pose relative to its strongest neighbour.
    pub fn remove_keyframe(&mut self, kf: KeyFrameId) -> Result<(), MapError> {
        let k = self.keyframes.get(&kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let pose = k.pose;
        let parent = self
            .neighbors_min(kf, 1)
            .first()
            .map(|n| n.0)
            .or_else(|| self.keyframes.range(..kf).next_back().map(|(&id, _)| id))
            .or_else(|| self.keyframes.range(kf + 1..).next().map(|(&id, _)| id));
        let pts: Vec<MapPointId> = k.points().map(|(_, p)| p).collect();
        for p in pts {
            self.remove_observation(p, kf)?;
        }
        self.keyframes.remove(&kf);
        self.covis.remove(&kf);
        if let Some(parent) = parent {
            let relative = pose * self.keyframes[&parent].pose.inverse();
            self.culled.insert(kf, CulledKeyFrame { parent, relative });
        }
        Ok(())
    }

    /// Current world-to-camera pose of a keyframe, following culled parents.
    pub fn keyframe_pose(&self, mut kf: KeyFrameId) -> Option<Pose> {
        let mut rel = Pose::identity();
        for _ in 0..10_000 {
            if let Some(k) = self.keyframes.get(&kf) {
                return Some(rel * k.pose);
            }
            let c = self.culled.get(&kf)?;
            rel = rel * c.relative;
            kf = c.parent;
        }
        None
    }

    /// The live keyframe standing in for `kf`, following culled parents.
    pub fn live_keyframe(&self, mut kf: KeyFrameId) -> Option<KeyFrameId> {
        for _ in 0..10_000 {
            if self.keyframes.contains_key(&kf) {
                return Some(kf);
            }
            kf = self.culled.get(&kf)?.parent;
        }
        None
    }

    /// Removes keyframes whose points are mostly seen by enough other keyframes.
    /// The first two keyframes and `keep` are never removed.
    pub fn cull_keyframes(&mut self, keep: &[KeyFrameId]) -> Vec<KeyFrameId> {
        let mut removed = Vec::new();
        let ids = self.keyframe_ids();
        for kf in ids {
            if self.protected.contains(&kf) || keep.contains(&kf) || !self.keyframes.contains_key(&kf) {
                continue;
            }
            let k = &self.keyframes[&kf];
            let total = k.point_count();
            if total == 0 {
                continue;
            }
            let redundant = k
                .points()
                .filter(|(_, p)| self.points[p].observations.len() > self.config.redundancy_observers)
                .count();
            if redundant as f64 >= self.config.redundancy_fraction * total as f64 {
                self.remove_keyframe(kf).expect("keyframe is live");
                removed.push(kf);
            }
        }
        removed
    }

    /// Every violated invariant, described; empty when the store is consistent.
    pub fn audit(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (&id, k) in &self.keyframes {
            if k.links.len() != k.features.len() {
                v.push(format!("keyframe {id}: {} links for {} keypoints", k.links.len(), k.features.len()));
            }
            for (i, p) in k.points() {
                match self.points.get(&p) {
                    None => v.push(format!("keyframe {id} keypoint {i} links dead point {p}")),
                    Some(mp) if mp.observations.get(&id) != Some(&i) => {
                        v.push(format!("keyframe {id} keypoint {i} -> point {p} has no matching back-link"))
                    }
                    _ => {}
                }
            }
        }
        let mut brute: BTreeMap<(KeyFrameId, KeyFrameId), u32> = BTreeMap::new();
        for (&p, mp) in &self.points {
            if mp.observations.is_empty() {
                v.push(format!("point {p} has no observations"));
            }
            for (&kf, &i) in &mp.observations {
                match self.keyframes.get(&kf) {
                    None => v.push(format!("point {p} observed by dead keyframe {kf}")),
                    Some(k) if k.links.get(i).copied().flatten() != Some(p) => {
                        v.push(format!("point {p} -> keyframe {kf} keypoint {i} not linked back"))
                    }
                    _ => {}
                }
            }
            let obs: Vec<KeyFrameId> = mp.observations.keys().copied().collect();
            for a in 0..obs.len() {
                for b in a + 1..obs.len() {
                    *brute.entry((obs[a], obs[b])).or_insert(0) += 1;
                }
            }
        }
        for (&a, row) in &self.covis {
            if !self.keyframes.contains_key(&a) {
                v.push(format!("covisibility row for dead keyframe {a}"));
            }
            for (&b, &w) in row {
                if a == b {
                    v.push(format!("self edge on keyframe {a}"));
                }
                if !self.keyframes.contains_key(&b) {
                    v.push(format!("edge {a}-{b} to dead keyframe"));
                }
                if self.covisibility_weight(b, a) != w {
                    v.push(format!("edge {a}-{b} is asymmetric"));
                }
                let expect = brute.get(&(a.min(b), a.max(b))).copied().unwrap_or(0);
                if w != expect {
                    v.push(format!("edge {a}-{b} weight {w}, recount {expect}"));
                }
            }
        }
        for (&(a, b), &w) in &brute {
            if self.covisibility_weight(a, b) == 0 {
                v.push(format!("missing edge {a}-{b} (recount {w})"));
            }
        }
        v
    }

    /// Breaks one back-link so the audit has something to find.
    #[doc(hidden)]
    pub fn corrupt_back_link(&mut self, p: MapPointId) -> bool {
        match self.points.get_mut(&p).and_then(|mp| mp.observations.values_mut().next()) {
            Some(i) => {
                *i += 1_000_000;
                true
            }
            None => false,
        }
    }

    /// `MAP v1` snapshot with camera-to-world keyframe poses.
    pub fn export(&self) -> String {
        let mut out = format!("MAP v1 {} {}\n", self.keyframes.len(), self.points.len());
        for k in self.keyframes.values() {
            let _ = write!(out, "KF {} {:?}", k.id, k.timestamp);
            for x in k.pose.inverse().to_rows() {
                let _ = write!(out, " {x:?}");
            }
            out.push('\n');
        }
        for p in self.points.values() {
            let _ = write!(out, "MP {} {:?} {:?} {:?} {}", p.id, p.position.x, p.position.y, p.position.z, p.observations.len());
            for (kf, i) in &p.observations {
                let _ = write!(out, " {kf}:{i}");
            }
            out.push('\n');
        }
        out
    }
}
