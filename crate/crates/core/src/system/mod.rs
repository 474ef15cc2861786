//! The full pipeline: per-frame tracking, keyframe insertion and mapping, and
//! loop closing either interleaved after mapping or on its own thread.

use std::str::FromStr;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;

use serde::Serialize;

use crate::dataset::{DatasetError, SequenceSource};
use crate::eval::{EvalError, Trajectory};
use crate::features::{FeatureError, FeatureProvider, FrameInput, MatchThresholds};
use crate::geometry::{CameraIntrinsics, InitFailure, Pose};
use crate::map::{Frame, KeyFrameId, Map, MapConfig, MapError};
use crate::mapping::{process_keyframe, MappingConfig};
use crate::place::{
    close_loop, detect_loop, BowVector, KeyFrameDatabase, LoopClosingConfig, LoopDetectorConfig, LoopError, Vocabulary,
};
use crate::tracking::{
    initialize, need_keyframe, relocalize, track_frame, TrackError, TrackResult, TrackerState, TrackingConfig,
    TrackingMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopClosingMode {
    Off,
    Interleaved,
    Threaded,
}

impl FromStr for LoopClosingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "off" => Ok(Self::Off),
            "interleaved" => Ok(Self::Interleaved),
            "threaded" => Ok(Self::Threaded),
            other => Err(format!("unknown loop-closing mode {other:?} (off, interleaved, threaded)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
    pub map: MapConfig,
    pub loop_detector: LoopDetectorConfig,
    pub loop_closing: LoopClosingConfig,
    pub loop_mode: LoopClosingMode,
    /// Keyframes to skip loop detection for after a correction.
    pub loop_cooldown: u64,
    /// Initialization restarts from a newer reference frame after this many frames.
    pub init_max_gap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
            map: MapConfig::default(),
            loop_detector: LoopDetectorConfig::default(),
            loop_closing: LoopClosingConfig::default(),
            loop_mode: LoopClosingMode::Interleaved,
            loop_cooldown: 5,
            init_max_gap: 30,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, has_vocabulary: bool) -> Result<(), RunError> {
        self.tracking.validate().map_err(RunError::Config)?;
        if self.loop_mode != LoopClosingMode::Off && !has_vocabulary {
            return Err(RunError::Config("loop closing needs a vocabulary".into()));
        }
        if !self.mapping.ba.is_valid() || !self.loop_closing.pose_graph.is_valid() {
            return Err(RunError::Config("invalid LM config".into()));
        }
        if self.init_max_gap == 0 {
            return Err(RunError::Config("init_max_gap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("tracking: {0}")]
    Tracking(TrackError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub frame_id: String,
    pub mode: TrackingMode,
    pub inliers: usize,
    pub outliers: usize,
    pub th_low: f64,
    pub th_high: f64,
    pub keyframe: bool,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("frame_id,mode,inliers,outliers,th_low,th_high,keyframe\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.frame_id,
            r.mode.as_str(),
            r.inliers,
            r.outliers,
            r.th_low,
            r.th_high,
            u8::from(r.keyframe)
        ));
    }
    s
}

#[derive(Clone, Debug)]
pub struct LoopEvent {
    pub keyframe: KeyFrameId,
    pub candidate: KeyFrameId,
    pub inliers: usize,
    pub fused: usize,
    /// Estimated trajectory just before and just after the correction.
    pub before: Trajectory,
    pub after: Trajectory,
    /// Map audit findings right after the correction was committed.
    pub audit: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub frames: usize,
    pub tracked_frames: usize,
    pub lost_frames: usize,
    pub keyframes: usize,
    pub map_points: usize,
    pub culled_keyframes: usize,
    pub loops_closed: usize,
    pub loops_rejected: usize,
    pub relocalizations: usize,
    /// Inclusive frame-index ranges without a pose.
    pub lost_spans: Vec<[usize; 2]>,
}

pub struct RunOutput {
    pub trajectory: Trajectory,
    pub stats: RunStats,
    pub trace: Vec<TraceRow>,
    pub loops: Vec<LoopEvent>,
    pub map: Map,
}

/// Everything the tracking and loop-closing threads share, behind one lock.
struct Shared {
    map: Map,
    db: KeyFrameDatabase,
    /// Per frame: reference keyframe and pose relative to it.
    records: Vec<Option<(KeyFrameId, Pose)>>,
    timestamps: Vec<f64>,
    epoch: u64,
    last_loop_kf: Option<KeyFrameId>,
    loops: Vec<LoopEvent>,
    loops_rejected: usize,
}

impl Shared {
    fn trajectory(&self) -> Result<Trajectory, EvalError> {
        let samples = self.records.iter().enumerate().filter_map(|(k, r)| {
            let (kf, rel) = (*r)?;
            Some((self.timestamps[k], rel * self.map.keyframe_pose(kf)?))
        });
        Trajectory::from_world_to_camera(samples.collect::<Vec<_>>())
    }

    fn record(&mut self, frame: usize, pose: Pose, reference: KeyFrameId) {
        let Some(kf) = self.map.live_keyframe(reference) else { return };
        let base = self.map.keyframe_pose(kf).expect("live keyframe");
        self.records[frame] = Some((kf, pose * base.inverse()));
    }

    /// Runs loop detection for `kf` and applies any validated correction.
    fn loop_step(&mut self, kf: KeyFrameId, cam: &CameraIntrinsics, th: MatchThresholds, cfg: &RunConfig) {
        if self.map.keyframe(kf).is_none() || self.last_loop_kf.is_some_and(|l| kf < l + cfg.loop_cooldown) {
            return;
        }
        let Some(candidate) = detect_loop(kf, &self.db, &self.map, &cfg.loop_detector) else { return };
        let before = self.trajectory().ok();
        match close_loop(&mut self.map, &candidate, kf, cam, th, &cfg.loop_closing) {
            Ok(c) => {
                self.epoch += 1;
                self.last_loop_kf = Some(kf);
                if let (Some(before), Ok(after)) = (before, self.trajectory()) {
                    self.loops.push(LoopEvent {
                        keyframe: kf,
                        candidate: c.candidate,
                        inliers: c.inliers,
                        fused: c.fused,
                        before,
                        after,
                        audit: self.map.audit(),
                    });
                }
            }
            Err(LoopError::Rejected(_)) | Err(LoopError::Map(_)) => self.loops_rejected += 1,
        }
    }
}

fn lock(m: &Mutex<Shared>) -> MutexGuard<'_, Shared> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn bow_of(vocab: Option<&Vocabulary>, frame: &Frame) -> Result<BowVector, RunError> {
    match vocab {
        Some(v) => v.to_bow(&frame.features.descriptors).map_err(|e| RunError::Tracking(TrackError::Place(e))),
        None => Ok(BowVector::default()),
    }
}

fn lost_spans(records: &[Option<(KeyFrameId, Pose)>]) -> Vec<[usize; 2]> {
    let mut spans = Vec::new();
    let mut start = None;
    for (k, r) in records.iter().enumerate() {
        match (r.is_none(), start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                spans.push([s, k - 1]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push([s, records.len() - 1]);
    }
    spans
}

/// Runs the pipeline over a whole sequence.
pub fn run(
    source: &SequenceSource,
    provider: &dyn FeatureProvider,
    vocab: Option<&Vocabulary>,
    cfg: &RunConfig,
) -> Result<RunOutput, RunError> {
    cfg.validate(vocab.is_some())?;
    let cam = source.camera;
    let shared = Arc::new(Mutex::new(Shared {
        map: Map::new(cfg.map),
        db: KeyFrameDatabase::new(),
        records: vec![None; source.len()],
        timestamps: source.frames.iter().map(|f| f.timestamp).collect(),
        epoch: 0,
        last_loop_kf: None,
        loops: Vec::new(),
        loops_rejected: 0,
    }));

    let (tx, worker) = if cfg.loop_mode == LoopClosingMode::Threaded {
        let (tx, rx) = mpsc::channel::<(KeyFrameId, MatchThresholds)>();
        let sh = Arc::clone(&shared);
        let c = cfg.clone();
        let handle = thread::spawn(move || {
            for (kf, th) in rx {
                lock(&sh).loop_step(kf, &cam, th, &c);
            }
        });
        (Some(tx), Some(handle))
    } else {
        (None, None)
    };

    let mut state = TrackerState::new(&cfg.tracking);
    let mut init_ref: Option<Frame> = None;
    let mut seen_epoch = 0;
    let mut trace = Vec::with_capacity(source.len());
    let mut relocalizations = 0;

    for (k, rec) in source.frames.iter().enumerate() {
        let image = source.load_image(k)?;
        let features = provider.extract(FrameInput { index: k, id: &rec.id, image: image.as_ref() })?;
        let mut frame = Frame::new(k, rec.timestamp, features);
        let mut g = lock(&shared);
        if g.epoch != seen_epoch {
            seen_epoch = g.epoch;
            let last = state.last_frame.as_ref().map(|f| f.index);
            if let Some((kf, rel)) = last.and_then(|i| g.records[i]) {
                if let Some(base) = g.map.keyframe_pose(kf) {
                    state.rebase(rel * base);
                }
            }
        }

        let mut outcome: Option<TrackResult> = None;
        let mut new_kf = None;
        let mut init_points = None;
        let mut frame_th = state.thresholds;
        match state.mode {
            TrackingMode::NotInitialized => match init_ref.take() {
                Some(mut r) if k - r.index <= cfg.init_max_gap && !frame.features.is_empty() => {
                    let Shared { map, .. } = &mut *g;
                    match initialize(&mut r, &mut frame, map, &mut state, &cam, &cfg.tracking, vocab) {
                        Ok((kf1, kf2)) => {
                            g.records[r.index] = Some((kf1, Pose::identity()));
                            g.records[k] = Some((kf2, Pose::identity()));
                            init_points = g.map.keyframe(kf2).map(|kf| kf.points().count());
                            if vocab.is_some() {
                                for kf in [kf1, kf2] {
                                    let bow = g.map.keyframe(kf).expect("inserted").bow.clone();
                                    g.db.add(kf, bow);
                                }
                            }
                        }
                        Err(TrackError::Init(InitFailure::TooFewMatches(_) | InitFailure::TooFewInliers { .. })) => {
                            init_ref = Some(frame.clone());
                        }
                        Err(TrackError::Init(_)) => init_ref = Some(r),
                        Err(e) => return Err(RunError::Tracking(e)),
                    }
                }
                _ => {
                    if !frame.features.is_empty() {
                        init_ref = Some(frame.clone());
                    }
                }
            },
            TrackingMode::Ok => match track_frame(&mut frame, &mut state, &mut g.map, &cam, &cfg.tracking) {
                Ok(r) => outcome = Some(r),
                Err(TrackError::TrackLost { .. }) => {}
                Err(e) => return Err(RunError::Tracking(e)),
            },
            TrackingMode::Lost => {
                if let Some(v) = vocab {
                    let Shared { map, db, .. } = &mut *g;
                    match relocalize(&mut frame, &mut state, map, db, v, &cam, &cfg.tracking) {
                        Ok(r) => {
                            relocalizations += 1;
                            outcome = Some(r);
                        }
                        Err(TrackError::StillLost) => {}
                        Err(e) => return Err(RunError::Tracking(e)),
                    }
                }
            }
        }

        if let Some(r) = &outcome {
            let reference = state.reference_kf.expect("tracking sets a reference");
            g.record(k, r.pose, reference);
            if need_keyframe(r, &state, &g.map, k, &cfg.tracking) {
                let bow = bow_of(vocab, &frame)?;
                let kf = g.map.insert_keyframe(&frame, bow.clone())?;
                state.on_keyframe(kf, k);
                if vocab.is_some() {
                    g.db.add(kf, bow);
                }
                let report = process_keyframe(&mut g.map, kf, &cam, r.thresholds, &cfg.mapping)?;
                for c in &report.culled {
                    g.db.remove(*c);
                }
                if let (Some(kfr), Some(last)) = (g.map.keyframe(kf), state.last_frame.as_mut()) {
                    last.links = kfr.links.clone();
                    last.outliers = vec![false; last.links.len()];
                }
                if let Some(p) = g.map.keyframe(kf).map(|x| x.pose) {
                    state.rebase(p);
                    g.records[k] = Some((kf, Pose::identity()));
                }
                new_kf = Some(kf);
                frame_th = r.thresholds;
            }
        }

        trace.push(TraceRow {
            frame_id: rec.id.clone(),
            mode: state.mode,
            inliers: outcome.as_ref().map_or(init_points.unwrap_or(0), |r| r.inlier_count),
            outliers: outcome.as_ref().map_or(0, |r| r.outlier_count),
            th_low: state.thresholds.th_low,
            th_high: state.thresholds.th_high,
            keyframe: new_kf.is_some() || init_points.is_some(),
        });

        if let Some(kf) = new_kf {
            match cfg.loop_mode {
                LoopClosingMode::Off => {}
                LoopClosingMode::Interleaved => {
                    g.loop_step(kf, &cam, frame_th, cfg);
                    if g.epoch != seen_epoch {
                        seen_epoch = g.epoch;
                        if let Some(p) = g.map.keyframe_pose(kf) {
                            state.rebase(p);
                        }
                    }
                }
                LoopClosingMode::Threaded => {
                    if let Some(tx) = &tx {
                        let _ = tx.send((kf, frame_th));
                    }
                }
            }
        }
    }

    drop(tx);
    if let Some(h) = worker {
        h.join().map_err(|_| RunError::Config("loop closing thread panicked".into()))?;
    }
    let shared = Arc::try_unwrap(shared).map_err(|_| RunError::Config("shared state still referenced".into()))?;
    let sh = shared.into_inner().unwrap_or_else(|e| e.into_inner());
    let trajectory = sh.trajectory()?;
    let tracked = sh.records.iter().filter(|r| r.is_some()).count();
    let ms = sh.map.stats();
    let stats = RunStats {
        frames: source.len(),
        tracked_frames: tracked,
        lost_frames: source.len() - tracked,
        keyframes: ms.keyframes,
        map_points: ms.map_points,
        culled_keyframes: ms.culled_keyframes,
        loops_closed: sh.loops.len(),
        loops_rejected: sh.loops_rejected,
        relocalizations,
        lost_spans: lost_spans(&sh.records),
    };
    Ok(RunOutput { trajectory, stats, trace, loops: sh.loops, map: sh.map })
}
