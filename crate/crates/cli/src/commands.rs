use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vslam_core::dataset::{open_euroc, open_kitti, open_synthetic, save_synthetic, SequenceSource, SyntheticSpec};
use vslam_core::distort::{skip_frames, DistortionSpec, Quantile};
use vslam_core::eval::{emit_report, evaluate as eval_metrics, AlignMode, EvalConfig, RpeMode, Trajectory, KITTI_LENGTHS};
use vslam_core::features::{
    provider_from_files, provider_native, read_features, AdaptiveConfig, DetectorConfig, FeatureProvider, FrameInput,
    MatchThresholds,
};
use vslam_core::imaging::GrayImage;
use vslam_core::losses::{
    loss_class, loss_desc, loss_det, loss_ori, loss_pair, softargmax, DetectorLossConfig, Relation, ScoreMap,
};
use vslam_core::place::{build_vocabulary, Vocabulary};
use vslam_core::system::{run as run_slam, trace_csv, LoopClosingMode, RunConfig, RunError};

use crate::args::*;
use crate::manifest::{create_dir, write, write_file};
use crate::CliError;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

enum ProviderChoice {
    Native,
    Synthetic,
    Files(PathBuf),
}

fn parse_features(spec: Option<&str>, dataset: DatasetKind) -> Result<ProviderChoice, CliError> {
    match spec {
        None if dataset == DatasetKind::Synth => Ok(ProviderChoice::Synthetic),
        None | Some("native") => Ok(ProviderChoice::Native),
        Some("synthetic") if dataset == DatasetKind::Synth => Ok(ProviderChoice::Synthetic),
        Some("synthetic") => Err(usage("--features synthetic needs --dataset synth")),
        Some(s) => match s.strip_prefix("files:") {
            Some(dir) if !dir.is_empty() => Ok(ProviderChoice::Files(PathBuf::from(dir))),
            _ => Err(usage(format!("unknown --features value {s:?} (native, synthetic, files:<dir>)"))),
        },
    }
}

/// Thresholds and adaptive bounds, in bits for the native binary descriptor.
fn thresholds(a: &RunArgs, binary: bool) -> Result<(MatchThresholds, Option<AdaptiveConfig>), CliError> {
    let base = match (binary, a.dataset) {
        (true, _) => MatchThresholds::new(50.0, 75.0),
        (false, DatasetKind::Kitti) => MatchThresholds::kitti(),
        (false, _) => MatchThresholds::euroc(),
    };
    let th = MatchThresholds::new(a.th_low.unwrap_or(base.th_low), a.th_high.unwrap_or(base.th_high));
    if !th.is_valid() {
        return Err(usage(format!("invalid thresholds: need 0 < th-low <= th-high, got {} / {}", th.th_low, th.th_high)));
    }
    let adaptive = a.adaptive.then(|| {
        let (lo, hi) = if binary { (50.0, 100.0) } else { (1.0, 3.0) };
        AdaptiveConfig { th_min: a.th_min.unwrap_or(lo), th_max: a.th_max.unwrap_or(hi), ..AdaptiveConfig::default() }
    });
    if adaptive.is_some_and(|c| !c.is_valid()) {
        return Err(usage("invalid adaptive bounds: need 0 < th-min < th-max"));
    }
    Ok((th, adaptive))
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    Vocabulary::load(path).map_err(CliError::failed)
}

pub fn run(a: &RunArgs, argv: &[String]) -> Result<(), CliError> {
    let loop_mode = match a.loop_closing {
        Some(LoopMode::Off) => LoopClosingMode::Off,
        Some(LoopMode::Interleaved) => LoopClosingMode::Interleaved,
        Some(LoopMode::Threaded) => LoopClosingMode::Threaded,
        None if a.vocab.is_some() => LoopClosingMode::Interleaved,
        None => LoopClosingMode::Off,
    };
    if loop_mode != LoopClosingMode::Off && a.vocab.is_none() {
        return Err(usage("--loop-closing needs --vocab"));
    }
    let choice = parse_features(a.features.as_deref(), a.dataset)?;
    let (th, adaptive) = thresholds(a, matches!(choice, ProviderChoice::Native))?;

    let mut cfg = RunConfig { loop_mode, ..RunConfig::default() };
    cfg.tracking.thresholds = th;
    cfg.tracking.adaptive = adaptive;
    cfg.tracking.init.seed = a.seed;
    cfg.loop_closing.seed = a.seed;
    cfg.validate(a.vocab.is_some()).map_err(|e| usage(e.to_string()))?;

    let vocab = a.vocab.as_deref().map(load_vocab).transpose()?;
    let (source, world) = match a.dataset {
        DatasetKind::Kitti => (open_kitti(&a.path).map_err(CliError::failed)?, None),
        DatasetKind::Euroc => (open_euroc(&a.path).map_err(CliError::failed)?, None),
        DatasetKind::Synth => {
            let (s, w) = open_synthetic(&a.path).map_err(CliError::failed)?;
            (s, Some(w))
        }
    };
    let provider: Box<dyn FeatureProvider> = match choice {
        ProviderChoice::Native => Box::new(provider_native(DetectorConfig { seed: a.seed, ..DetectorConfig::default() })),
        ProviderChoice::Files(dir) => Box::new(provider_from_files(dir)),
        ProviderChoice::Synthetic => Box::new(world.expect("synth dataset").provider()),
    };

    let out = run_slam(&source, provider.as_ref(), vocab.as_ref(), &cfg).map_err(|e| match e {
        RunError::Config(m) => usage(m),
        other => CliError::failed(other),
    })?;

    create_dir(&a.out)?;
    let mut outputs = vec!["trajectory.tum".to_string(), "stats.json".to_string()];
    write_file(&a.out.join("trajectory.tum"), &out.trajectory.to_tum())?;
    let stats = serde_json::to_string_pretty(&out.stats).map_err(CliError::failed)?;
    write_file(&a.out.join("stats.json"), &(stats + "\n"))?;
    if a.trace {
        write_file(&a.out.join("trace.csv"), &trace_csv(&out.trace))?;
        outputs.push("trace.csv".into());
    }
    match &source.ground_truth {
        Some(gt) if out.trajectory.len() >= 3 => {
            let ecfg = EvalConfig::default();
            let report = eval_metrics(&out.trajectory, gt, &ecfg).map_err(CliError::failed)?;
            emit_report(&a.out, &out.trajectory, gt, &report, ecfg.max_dt).map_err(CliError::failed)?;
            outputs.extend(["metrics.csv", "trajectory_xy.csv", "trajectory.svg"].map(String::from));
            println!("ate_rmse {:?}", report.ate_rmse);
        }
        Some(_) => eprintln!("warning: fewer than 3 tracked frames, metrics skipped"),
        None => eprintln!("note: dataset has no ground truth, metrics skipped"),
    }
    println!(
        "frames {} tracked {} lost {} keyframes {} map_points {} loops {}",
        out.stats.frames,
        out.stats.tracked_frames,
        out.stats.lost_frames,
        out.stats.keyframes,
        out.stats.map_points,
        out.stats.loops_closed
    );
    write(&a.out, "run", argv, Some(a.seed), &outputs)
}

fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e.to_ascii_lowercase().as_str())))
        .collect();
    files.sort();
    Ok(files)
}

pub fn vocab_build(a: &VocabArgs, argv: &[String]) -> Result<(), CliError> {
    if a.levels == 0 || a.branching < 2 {
        return Err(usage("need --levels >= 1 and --branching >= 2"));
    }
    let mut training = Vec::new();
    let feats = list_files(&a.from, &["feat"])?;
    if !feats.is_empty() {
        for f in &feats {
            training.extend(read_features(f).map_err(CliError::failed)?.descriptors);
        }
    } else {
        let native = provider_native(DetectorConfig { seed: a.seed, ..DetectorConfig::default() });
        for (k, f) in list_files(&a.from, &["png", "pgm"])?.iter().enumerate() {
            let img = GrayImage::load(f).map_err(CliError::failed)?;
            let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let set = native.extract(FrameInput { index: k, id, image: Some(&img) }).map_err(CliError::failed)?;
            training.extend(set.descriptors);
        }
    }
    if training.is_empty() {
        return Err(CliError::Failed(format!("no descriptors found under {}", a.from.display())));
    }
    let vocab = build_vocabulary(&training, a.levels, a.branching, a.seed).map_err(CliError::failed)?;
    create_dir(&a.out)?;
    vocab.save(&a.out.join("vocabulary.txt")).map_err(CliError::failed)?;
    println!("descriptors {} words {}", training.len(), vocab.word_count());
    write(&a.out, "vocab-build", argv, Some(a.seed), &["vocabulary.txt".into()])
}

pub fn distort(a: &DistortArgs, argv: &[String]) -> Result<(), CliError> {
    let spec = if let Some(g) = a.gamma {
        DistortionSpec::Gamma(g)
    } else if let Some(q) = a.truncate {
        DistortionSpec::QuantileTruncate(match q {
            QuantileArg::Q1 => Quantile::Q1,
            QuantileArg::Q3 => Quantile::Q3,
        })
    } else if let Some(p) = a.salt_pepper {
        DistortionSpec::SaltPepper { p, seed: a.seed }
    } else {
        DistortionSpec::FrameSkip(a.skip.expect("clap requires one distortion"))
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let images = list_files(&a.input, &["png", "pgm"])?;
    if images.is_empty() {
        return Err(CliError::Failed(format!("no PNG or PGM images under {}", a.input.display())));
    }
    let selected = match spec {
        DistortionSpec::FrameSkip(n) => skip_frames(&images, n),
        _ => images,
    };
    create_dir(&a.out)?;
    let mut outputs = Vec::with_capacity(selected.len());
    for (k, path) in selected.iter().enumerate() {
        let img = GrayImage::load(path).map_err(CliError::failed)?;
        let name = path.file_name().expect("listed files have names");
        spec.apply(&img, k).save(&a.out.join(name)).map_err(CliError::failed)?;
        outputs.push(name.to_string_lossy().into_owned());
    }
    println!("wrote {} images", outputs.len());
    write(&a.out, "distort", argv, Some(a.seed), &outputs)
}

pub fn evaluate(a: &EvaluateArgs, argv: &[String]) -> Result<(), CliError> {
    let load = |p: &Path| -> Result<Trajectory, CliError> {
        match a.format {
            TrajectoryFormat::Tum => Trajectory::load_tum(p).map_err(CliError::failed),
            TrajectoryFormat::Kitti => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?;
                Trajectory::parse_kitti(&text, None, p).map_err(CliError::failed)
            }
        }
    };
    let (est, gt) = (load(&a.est)?, load(&a.gt)?);
    if !(a.max_dt >= 0.0) {
        return Err(usage("--max-dt must be non-negative"));
    }
    let cfg = EvalConfig {
        max_dt: a.max_dt,
        align: match a.align {
            AlignArg::Sim3 => AlignMode::Sim3,
            AlignArg::Se3 => AlignMode::Se3,
        },
        rpe: if a.kitti_lengths { RpeMode::LengthBased(KITTI_LENGTHS.to_vec()) } else { RpeMode::FixedDelta(1) },
    };
    let report = eval_metrics(&est, &gt, &cfg).map_err(CliError::failed)?;
    println!("ate_rmse {:?}", report.ate_rmse);
    println!("rpe_trans {:?}", report.rpe_trans);
    println!("rpe_rot {:?}", report.rpe_rot);
    println!("pairs {}", report.pairs);
    println!("scale {:?}", report.alignment.scale());
    if let Some(dir) = &a.out {
        let files = emit_report(dir, &est, &gt, &report, cfg.max_dt).map_err(CliError::failed)?;
        let names: Vec<String> =
            files.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect();
        write(dir, "evaluate", argv, None, &names)?;
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LossInput {
    descriptor: Option<DescriptorInput>,
    orientation: Option<PairInput>,
    detector: Option<DetectorInput>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptorInput {
    dk: Vec<f64>,
    dl: Vec<f64>,
    /// `positive` or `negative`.
    relation: String,
    #[serde(default = "default_margin")]
    margin: f64,
}

fn default_margin() -> f64 {
    DetectorLossConfig::default().margin_c
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairInput {
    d1: Vec<f64>,
    d2: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapInput {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorInput {
    /// Score maps of the positive pair, the third positive and the negative patch.
    maps: [MapInput; 4],
    d1: Vec<f64>,
    d2: Vec<f64>,
    gamma: Option<f64>,
    softmax_beta: Option<f64>,
    softargmax_beta: Option<f64>,
}

#[derive(Serialize, Default)]
struct LossOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    descriptor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    orientation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detector: Option<DetectorOutput>,
}

#[derive(Serialize)]
struct DetectorOutput {
    class: f64,
    pair: f64,
    total: f64,
    softargmax: Vec<(f64, f64)>,
}

pub fn losses(a: &LossesArgs, argv: &[String]) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.input).map_err(|e| CliError::Failed(format!("{}: {e}", a.input.display())))?;
    let input: LossInput =
        serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", a.input.display())))?;
    let mut out = LossOutput::default();
    if let Some(d) = input.descriptor {
        let relation = match d.relation.as_str() {
            "positive" => Relation::Positive,
            "negative" => Relation::Negative,
            other => return Err(CliError::Failed(format!("unknown relation {other:?} (positive, negative)"))),
        };
        out.descriptor = Some(loss_desc(&d.dk, &d.dl, relation, d.margin).map_err(CliError::failed)?);
    }
    if let Some(o) = input.orientation {
        out.orientation = Some(loss_ori(&o.d1, &o.d2).map_err(CliError::failed)?);
    }
    if let Some(det) = input.detector {
        let defaults = DetectorLossConfig::default();
        let cfg = DetectorLossConfig {
            gamma_balance: det.gamma.unwrap_or(defaults.gamma_balance),
            softmax_beta: det.softmax_beta.unwrap_or(defaults.softmax_beta),
            softargmax_beta: det.softargmax_beta.unwrap_or(defaults.softargmax_beta),
            ..defaults
        };
        cfg.validate().map_err(CliError::failed)?;
        let maps: Vec<ScoreMap> = det
            .maps
            .into_iter()
            .map(|m| ScoreMap::new(m.rows, m.cols, m.values))
            .collect::<Result<_, _>>()
            .map_err(CliError::failed)?;
        let maps: [ScoreMap; 4] = maps.try_into().expect("four maps");
        let class = loss_class(&maps, &cfg);
        let pair = loss_pair(&det.d1, &det.d2).map_err(CliError::failed)?;
        out.detector = Some(DetectorOutput {
            class,
            pair,
            total: loss_det(class, pair, cfg.gamma_balance),
            softargmax: maps.iter().map(|m| softargmax(m, cfg.softargmax_beta)).collect(),
        });
    }
    let body = serde_json::to_string_pretty(&out).map_err(CliError::failed)? + "\n";
    print!("{body}");
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("losses.json"), &body)?;
        write(dir, "losses", argv, None, &["losses.json".into()])?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, argv: &[String]) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::load(p).map_err(CliError::failed)?,
        None => SyntheticSpec::default(),
    };
    if let Some(n) = a.frames {
        spec.frames = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(d) = a.drift {
        spec.drift_per_meter = d;
    }
    if let Some(s) = a.pixel_sigma {
        spec.noise.pixel_sigma = s;
    }
    if let Some(s) = a.descriptor_sigma {
        spec.noise.descriptor_sigma = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    create_dir(&a.out)?;
    let (source, world): (SequenceSource, _) = save_synthetic(&a.out, &spec).map_err(CliError::failed)?;
    println!("frames {} landmarks {}", source.frames.len(), world.landmarks.len());
    write(
        &a.out,
        "synth",
        argv,
        Some(spec.seed),
        &["synthetic.json".into(), "groundtruth.tum".into(), "features/".into()],
    )
}
