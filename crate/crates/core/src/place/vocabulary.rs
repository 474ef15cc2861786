use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BowVector, PlaceError};
use crate::features::{Descriptor, DescriptorKind, VariantMismatch};

const KMEANS_ITERS: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct VocabNode {
    pub parent: Option<u32>,
    pub children: Vec<u32>,
    /// `None` only for the root.
    pub center: Option<Descriptor>,
    /// Inverse document frequency for leaves, 0 for inner nodes.
    pub weight: f64,
    pub word: Option<u32>,
}

/// Hierarchical k-means tree over descriptors; leaves are visual words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub levels: usize,
    pub branching: usize,
    pub kind: DescriptorKind,
    pub desc_len: usize,
    nodes: Vec<VocabNode>,
    words: Vec<u32>,
}

fn centroid(kind: DescriptorKind, members: &[&Descriptor]) -> Descriptor {
    match kind {
        DescriptorKind::Float => {
            let len = members[0].len();
            let mut acc = vec![0.0; len];
            for m in members {
                if let Descriptor::Float(v) = m {
                    for (a, x) in acc.iter_mut().zip(v) {
                        *a += x;
                    }
                }
            }
            let n = members.len() as f64;
            Descriptor::Float(acc.into_iter().map(|a| a / n).collect())
        }
        DescriptorKind::Binary => {
            let len = members[0].len();
            let mut counts = vec![0usize; len * 8];
            for m in members {
                if let Descriptor::Binary(b) = m {
                    for (byte, &x) in b.iter().enumerate() {
                        for bit in 0..8 {
                            counts[byte * 8 + bit] += ((x >> bit) & 1) as usize;
                        }
                    }
                }
            }
            let n = members.len();
            Descriptor::Binary(
                (0..len)
                    .map(|byte| (0..8).fold(0u8, |acc, bit| if 2 * counts[byte * 8 + bit] >= n { acc | (1 << bit) } else { acc }))
                    .collect(),
            )
        }
    }
}

fn nearest_index(d: &Descriptor, centers: &[Descriptor]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in centers.iter().enumerate() {
        let dist = d.distance_unchecked(c);
        if dist < best.0 {
            best = (dist, i);
        }
    }
    best.1
}

fn kmeans(data: &[&Descriptor], k: usize, kind: DescriptorKind, rng: &mut ChaCha8Rng) -> Vec<(Descriptor, Vec<usize>)> {
    // k-means++ seeding
    let mut centers: Vec<Descriptor> = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|d| d.distance_unchecked(&centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..data.len())
        };
        centers.push(data[pick].clone());
        let c = centers.last().expect("just pushed");
        for (i, d) in data.iter().enumerate() {
            d2[i] = d2[i].min(d.distance_unchecked(c).powi(2));
        }
    }
    let mut assign = vec![usize::MAX; data.len()];
    for _ in 0..KMEANS_ITERS {
        let next: Vec<usize> = data.iter().map(|d| nearest_index(d, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Descriptor> = data.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(d, _)| *d).collect();
            if !members.is_empty() {
                *center = centroid(kind, &members);
            }
        }
    }
    let mut groups: Vec<(Descriptor, Vec<usize>)> = centers.into_iter().map(|c| (c, Vec::new())).collect();
    for (i, &a) in assign.iter().enumerate() {
        groups[a].1.push(i);
    }
    groups.retain(|g| !g.1.is_empty());
    groups
}

impl Vocabulary {
    /// Recursive k-means (k-means++ seeding) to `levels` depth with `branching` children per node.
    pub fn build(training: &[Descriptor], levels: usize, branching: usize, seed: u64) -> Result<Self, PlaceError> {
        if levels == 0 || branching < 2 {
            return Err(PlaceError::InvalidVocabulary("levels must be ≥ 1 and branching ≥ 2".into()));
        }
        if training.len() < branching {
            return Err(PlaceError::TooFewDescriptors { got: training.len(), required: branching });
        }
        let first = &training[0];
        if let Some(bad) = training.iter().find(|d| !first.compatible(d)) {
            return Err(PlaceError::Variant(VariantMismatch {
                left_kind: first.kind(),
                left_len: first.len(),
                right_kind: bad.kind(),
                right_len: bad.len(),
            }));
        }
        let kind = first.kind();
        let mut vocab = Vocabulary {
            levels,
            branching,
            kind,
            desc_len: first.len(),
            nodes: vec![VocabNode { parent: None, children: Vec::new(), center: None, weight: 0.0, word: None }],
            words: Vec::new(),
        };
        let mut counts: Vec<usize> = Vec::new();
        // (node id, depth, member indices)
        let mut queue: std::collections::VecDeque<(u32, usize, Vec<usize>)> =
            std::collections::VecDeque::from([(0, 0, (0..training.len()).collect())]);
        while let Some((node, depth, members)) = queue.pop_front() {
            let leaf = depth == levels || members.len() <= 1;
            if leaf && node != 0 {
                let w = vocab.words.len() as u32;
                vocab.words.push(node);
                vocab.nodes[node as usize].word = Some(w);
                counts.push(members.len());
                continue;
            }
            let data: Vec<&Descriptor> = members.iter().map(|&i| &training[i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let groups = if data.len() <= branching {
                (0..data.len()).map(|i| (data[i].clone(), vec![i])).collect()
            } else {
                kmeans(&data, branching, kind, &mut rng)
            };
            for (center, idx) in groups {
                let id = vocab.nodes.len() as u32;
                vocab.nodes.push(VocabNode { parent: Some(node), children: Vec::new(), center: Some(center), weight: 0.0, word: None });
                vocab.nodes[node as usize].children.push(id);
                queue.push_back((id, depth + 1, idx.into_iter().map(|i| members[i]).collect()));
            }
        }
        let n = training.len() as f64;
        for (w, &node) in vocab.words.iter().enumerate() {
            vocab.nodes[node as usize].weight = (n / counts[w] as f64).ln();
        }
        Ok(vocab)
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn nodes(&self) -> &[VocabNode] {
        &self.nodes
    }

    pub fn word_weight(&self, word: u32) -> f64 {
        self.nodes[self.words[word as usize] as usize].weight
    }

    /// Descends greedily to a leaf.
    pub fn word_of(&self, d: &Descriptor) -> Result<u32, PlaceError> {
        if d.kind() != self.kind || d.len() != self.desc_len {
            return Err(PlaceError::Variant(VariantMismatch {
                left_kind: self.kind,
                left_len: self.desc_len,
                right_kind: d.kind(),
                right_len: d.len(),
            }));
        }
        let mut node = 0u32;
        loop {
            let n = &self.nodes[node as usize];
            if let Some(w) = n.word {
                return Ok(w);
            }
            let mut best = (f64::INFINITY, n.children[0]);
            for &c in &n.children {
                let dist = d.distance_unchecked(self.nodes[c as usize].center.as_ref().expect("non-root"));
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            node = best.1;
        }
    }

    /// tf-idf histogram of a descriptor set, L1-normalised.
    pub fn to_bow(&self, descriptors: &[Descriptor]) -> Result<BowVector, PlaceError> {
        // integer term counts keep the result exact under duplication and reordering
        let mut tf: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
        for d in descriptors {
            *tf.entry(self.word_of(d)?).or_insert(0) += 1;
        }
        Ok(BowVector::from_weights(tf.into_iter().map(|(w, n)| (w, n as f64 * self.word_weight(w)))))
    }

    pub fn to_text(&self) -> String {
        let mut out =
            format!("VOCAB v1 {} {} {} {} {}\n", self.levels, self.branching, self.kind, self.desc_len, self.nodes.len());
        for (id, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map(|p| p as i64).unwrap_or(-1);
            let _ = write!(out, "{id} {parent} {:?}", n.weight);
            match &n.center {
                Some(Descriptor::Float(v)) => v.iter().for_each(|x| {
                    let _ = write!(out, " {x:?}");
                }),
                Some(Descriptor::Binary(b)) => b.iter().for_each(|x| {
                    let _ = write!(out, " {x:02x}");
                }),
                None => {}
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, PlaceError> {
        let err = |line: usize, message: String| PlaceError::Parse { path: path.to_path_buf(), line, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or_else(|| err(1, "empty vocabulary file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 7 || h[0] != "VOCAB" || h[1] != "v1" {
            return Err(err(hl + 1, "expected 'VOCAB v1 <levels> <branching> <variant> <len> <nodes>'".into()));
        }
        let num = |s: &str, l: usize| s.parse::<usize>().map_err(|_| err(l, format!("bad integer '{s}'")));
        let levels = num(h[2], hl + 1)?;
        let branching = num(h[3], hl + 1)?;
        let kind = match h[4] {
            "float" => DescriptorKind::Float,
            "binary" => DescriptorKind::Binary,
            other => return Err(err(hl + 1, format!("unknown variant '{other}'"))),
        };
        let desc_len = num(h[5], hl + 1)?;
        let count = num(h[6], hl + 1)?;
        let mut nodes: Vec<VocabNode> = Vec::with_capacity(count);
        for (i, line) in lines {
            let ln = i + 1;
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() < 3 {
                return Err(err(ln, "node record too short".into()));
            }
            let id = num(t[0], ln)?;
            if id != nodes.len() {
                return Err(err(ln, format!("node ids must be consecutive, expected {}", nodes.len())));
            }
            let parent: i64 = t[1].parse().map_err(|_| err(ln, format!("bad parent '{}'", t[1])))?;
            let weight: f64 = t[2].parse().map_err(|_| err(ln, format!("bad weight '{}'", t[2])))?;
            let payload = &t[3..];
            let center = if parent < 0 {
                if id != 0 || !payload.is_empty() {
                    return Err(err(ln, "only node 0 may be the root, without a center".into()));
                }
                None
            } else {
                if parent as usize >= id {
                    return Err(err(ln, "parent must precede child".into()));
                }
                if payload.len() != desc_len {
                    return Err(err(ln, format!("expected {desc_len} center values, found {}", payload.len())));
                }
                Some(match kind {
                    DescriptorKind::Float => Descriptor::Float(
                        payload.iter().map(|s| s.parse().map_err(|_| err(ln, format!("bad value '{s}'")))).collect::<Result<_, _>>()?,
                    ),
                    DescriptorKind::Binary => Descriptor::Binary(
                        payload
                            .iter()
                            .map(|s| u8::from_str_radix(s, 16).map_err(|_| err(ln, format!("bad hex '{s}'"))))
                            .collect::<Result<_, _>>()?,
                    ),
                })
            };
            nodes.push(VocabNode { parent: (parent >= 0).then_some(parent as u32), children: Vec::new(), center, weight, word: None });
            if parent >= 0 {
                nodes[parent as usize].children.push(id as u32);
            }
        }
        if nodes.len() != count || nodes.is_empty() {
            return Err(err(0, format!("header announces {count} nodes, found {}", nodes.len())));
        }
        let mut words = Vec::new();
        for (id, n) in nodes.iter_mut().enumerate() {
            if n.children.is_empty() && id != 0 {
                n.word = Some(words.len() as u32);
                words.push(id as u32);
            }
        }
        Ok(Vocabulary { levels, branching, kind, desc_len, nodes, words })
    }

    pub fn save(&self, path: &Path) -> Result<(), PlaceError> {
        std::fs::write(path, self.to_text()).map_err(|source| PlaceError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, PlaceError> {
        let text = std::fs::read_to_string(path).map_err(|source| PlaceError::Io { path: PathBuf::from(path), source })?;
        Self::parse(&text, path)
    }
}

pub fn build_vocabulary(training: &[Descriptor], levels: usize, branching: usize, seed: u64) -> Result<Vocabulary, PlaceError> {
    Vocabulary::build(training, levels, branching, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn clusters(per: usize, seed: u64) -> (Vec<Descriptor>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let centers: Vec<Vec<f64>> = (0..10).map(|c| (0..4).map(|k| if k == c % 4 { 10.0 * (c as f64 + 1.0) } else { c as f64 * 3.0 }).collect()).collect();
        let mut out = Vec::new();
        for c in &centers {
            for _ in 0..per {
                out.push(Descriptor::Float(c.iter().map(|x| x + noise.sample(&mut rng)).collect()));
            }
        }
        (out, centers)
    }

    #[test]
    fn planted_clusters_are_recovered() {
        let (data, centers) = clusters(40, 1);
        let v = build_vocabulary(&data, 1, 10, 5).unwrap();
        assert_eq!(v.word_count(), 10);
        for c in &centers {
            let best = v.nodes()[1..]
                .iter()
                .map(|n| n.center.as_ref().unwrap().distance(&Descriptor::Float(c.clone())).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1 * 2.0, "{best}");
        }
    }

    #[test]
    fn too_few_and_mismatch() {
        let (data, _) = clusters(1, 1);
        assert!(matches!(build_vocabulary(&data[..5], 2, 10, 0), Err(PlaceError::TooFewDescriptors { got: 5, required: 10 })));
        let v = build_vocabulary(&data, 2, 3, 0).unwrap();
        assert!(matches!(v.to_bow(&[Descriptor::Binary(vec![0; 4])]), Err(PlaceError::Variant(_))));
    }

    #[test]
    fn bow_examples() {
        let (data, _) = clusters(20, 2);
        let v = build_vocabulary(&data, 2, 4, 3).unwrap();
        assert!(v.to_bow(&[]).unwrap().is_empty());
        let same = vec![data[7].clone(); 9];
        let b = v.to_bow(&same).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b.iter().next().unwrap().1 - 1.0).abs() < 1e-15);
        let set = &data[30..60];
        let doubled: Vec<Descriptor> = set.iter().chain(set).cloned().collect();
        assert_eq!(v.to_bow(set).unwrap(), v.to_bow(&doubled).unwrap());
        let mut rev = set.to_vec();
        rev.reverse();
        assert_eq!(v.to_bow(set).unwrap(), v.to_bow(&rev).unwrap());
    }

    #[test]
    fn text_round_trip_float_and_binary() {
        let (data, _) = clusters(15, 3);
        let v = build_vocabulary(&data, 3, 3, 9).unwrap();
        let p = Path::new("v.txt");
        assert_eq!(Vocabulary::parse(&v.to_text(), p).unwrap(), v);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bin: Vec<Descriptor> = (0..300).map(|_| Descriptor::Binary((0..32).map(|_| rng.random()).collect())).collect();
        let vb = build_vocabulary(&bin, 2, 5, 1).unwrap();
        assert_eq!(Vocabulary::parse(&vb.to_text(), p).unwrap(), vb);
        assert!(vb.word_count() <= 25);
        assert!(Vocabulary::parse("VOCAB v2 1 2 float 3 1\n", p).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let (data, _) = clusters(10, 6);
        assert_eq!(build_vocabulary(&data, 2, 3, 11).unwrap(), build_vocabulary(&data, 2, 3, 11).unwrap());
    }

    #[test]
    #[ignore = "trains on a million descriptors; run with --ignored"]
    fn million_descriptors_stay_within_word_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data: Vec<Descriptor> = (0..1_000_000).map(|_| Descriptor::Float((0..8).map(|_| rng.random::<f64>()).collect())).collect();
        let v = build_vocabulary(&data, 6, 10, 0).unwrap();
        assert!(v.word_count() <= 1_000_000);
    }
}
