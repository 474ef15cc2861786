use std::collections::{BTreeMap, BTreeSet};

use super::{l2_score, BowVector};
use crate::map::{KeyFrameId, Map};

/// Inverted index from words to the keyframes containing them.
#[derive(Clone, Debug, Default)]
pub struct KeyFrameDatabase {
    index: BTreeMap<u32, Vec<KeyFrameId>>,
    bows: BTreeMap<KeyFrameId, BowVector>,
}

impl KeyFrameDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.bows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bows.is_empty()
    }

    pub fn contains(&self, kf: KeyFrameId) -> bool {
        self.bows.contains_key(&kf)
    }

    pub fn bow(&self, kf: KeyFrameId) -> Option<&BowVector> {
        self.bows.get(&kf)
    }

    pub fn add(&mut self, kf: KeyFrameId, bow: BowVector) {
        self.remove(kf);
        for w in bow.words() {
            let list = self.index.entry(w).or_default();
            if let Err(pos) = list.binary_search(&kf) {
                list.insert(pos, kf);
            }
        }
        self.bows.insert(kf, bow);
    }

    pub fn remove(&mut self, kf: KeyFrameId) {
        if let Some(old) = self.bows.remove(&kf) {
            for w in old.words() {
                if let Some(list) = self.index.get_mut(&w) {
                    list.retain(|&k| k != kf);
                    if list.is_empty() {
                        self.index.remove(&w);
                    }
                }
            }
        }
    }

    /// Keyframes sharing at least one word with `bow`.
    pub fn sharing(&self, bow: &BowVector) -> BTreeSet<KeyFrameId> {
        bow.words().filter_map(|w| self.index.get(&w)).flatten().copied().collect()
    }

    /// Candidates scoring at least `min_score`, best first, ties by id.
    pub fn query(&self, bow: &BowVector, min_score: f64) -> Vec<(KeyFrameId, f64)> {
        let mut out: Vec<(KeyFrameId, f64)> = self
            .sharing(bow)
            .into_iter()
            .map(|k| (k, l2_score(bow, &self.bows[&k])))
            .filter(|&(_, s)| s >= min_score)
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Index lists are sorted, duplicate-free and agree with the stored vectors.
    pub fn is_consistent(&self) -> bool {
        let sorted = self.index.values().all(|l| !l.is_empty() && l.windows(2).all(|w| w[0] < w[1]));
        let mut rebuilt: BTreeMap<u32, Vec<KeyFrameId>> = BTreeMap::new();
        for (&k, b) in &self.bows {
            for w in b.words() {
                rebuilt.entry(w).or_default().push(k);
            }
        }
        sorted && rebuilt == self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopDetectorConfig {
    /// Keyframes this recent (by id) are never loop candidates.
    pub recent_exclusion: u64,
    /// Mutually covisible candidates needed to accept a loop.
    pub group_min: usize,
}

impl Default for LoopDetectorConfig {
    fn default() -> Self {
        Self { recent_exclusion: 10, group_min: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopCandidate {
    pub keyframe: KeyFrameId,
    pub score: f64,
    /// The consistent group the candidate was taken from, best first.
    pub group: Vec<KeyFrameId>,
}

/// Finds a revisited place for `current`: candidates must beat the weakest
/// covisible neighbour's score and come with at least `group_min - 1` mutually
/// covisible fellow candidates.
pub fn detect_loop(current: KeyFrameId, db: &KeyFrameDatabase, map: &Map, cfg: &LoopDetectorConfig) -> Option<LoopCandidate> {
    let bow = db.bow(current).or_else(|| map.keyframe(current).map(|k| &k.bow))?;
    if bow.is_empty() {
        return None;
    }
    let neighbors: BTreeSet<KeyFrameId> = map.neighbors(current).into_iter().map(|(k, _)| k).collect();
    let baseline = neighbors
        .iter()
        .filter_map(|k| db.bow(*k).map(|b| l2_score(bow, b)))
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))))
        .unwrap_or(0.0);
    let candidates: Vec<(KeyFrameId, f64)> = db
        .query(bow, f64::MIN_POSITIVE)
        .into_iter()
        .filter(|&(k, s)| {
            k != current
                && !neighbors.contains(&k)
                && k + cfg.recent_exclusion <= current
                && s > baseline
                && map.keyframe(k).is_some()
        })
        .collect();
    let ids: BTreeSet<KeyFrameId> = candidates.iter().map(|c| c.0).collect();
    let score: BTreeMap<KeyFrameId, f64> = candidates.iter().copied().collect();
    let covisible = |a: KeyFrameId, b: KeyFrameId| map.covisibility_weight(a, b) >= map.config().covis_min;
    for &(c, _) in &candidates {
        let mates: Vec<KeyFrameId> = map.neighbors(c).into_iter().map(|(k, _)| k).filter(|k| ids.contains(k)).collect();
        // grow a clique greedily in ranking order
        let mut group = vec![c];
        let mut ranked = mates.clone();
        ranked.sort_by(|a, b| score[b].total_cmp(&score[a]).then(a.cmp(b)));
        for m in ranked {
            if group.iter().all(|&g| covisible(g, m)) {
                group.push(m);
            }
        }
        if group.len() >= cfg.group_min {
            group.sort_by(|a, b| score[b].total_cmp(&score[a]).then(a.cmp(b)));
            return Some(LoopCandidate { keyframe: group[0], score: score[&group[0]], group });
        }
    }
    None
}
