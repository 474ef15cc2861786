use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Descriptor, DescriptorKind, FeatureError, FeatureProvider, FeatureSet, FrameInput, Keypoint};

/// Serializes a feature set as a `FEAT v1` document.
pub fn write_features(set: &FeatureSet) -> String {
    let (kind, len) = set.descriptor_shape().unwrap_or((DescriptorKind::Float, 0));
    let mut out = format!("FEAT v1 {} {} {}\n", set.len(), kind, len);
    for (kp, d) in set.keypoints.iter().zip(&set.descriptors) {
        let _ = write!(out, "{:?} {:?} {:?} {:?} {}", kp.x, kp.y, kp.response, kp.orientation, kp.octave);
        match d {
            Descriptor::Float(v) => {
                for x in v {
                    let _ = write!(out, " {x:?}");
                }
            }
            Descriptor::Binary(b) => {
                for x in b {
                    let _ = write!(out, " {x:02x}");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn parse_features(text: &str, path: &Path) -> Result<FeatureSet, FeatureError> {
    let err = |line: usize, message: String| FeatureError::MalformedFile { path: path.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((hl, header)) = lines.next() else {
        return Ok(FeatureSet::default());
    };
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 5 || h[0] != "FEAT" || h[1] != "v1" {
        return Err(err(hl + 1, format!("expected 'FEAT v1 <count> <variant> <len>', got '{header}'")));
    }
    let count: usize = h[2].parse().map_err(|_| err(hl + 1, format!("bad count '{}'", h[2])))?;
    let kind = match h[3] {
        "float" => DescriptorKind::Float,
        "binary" => DescriptorKind::Binary,
        other => return Err(err(hl + 1, format!("unknown descriptor variant '{other}'"))),
    };
    let len: usize = h[4].parse().map_err(|_| err(hl + 1, format!("bad descriptor length '{}'", h[4])))?;

    let mut set = FeatureSet::default();
    for (i, line) in lines {
        let ln = i + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 5 + len {
            return Err(err(ln, format!("expected {} fields, found {}", 5 + len, tok.len())));
        }
        let num = |k: usize| -> Result<f64, FeatureError> {
            let v: f64 = tok[k].parse().map_err(|_| err(ln, format!("field {}: bad number '{}'", k + 1, tok[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(ln, format!("field {}: non-finite value", k + 1)))
            }
        };
        let kp = Keypoint {
            x: num(0)?,
            y: num(1)?,
            response: num(2)?,
            orientation: num(3)?,
            octave: tok[4].parse().map_err(|_| err(ln, format!("field 5: bad octave '{}'", tok[4])))?,
        };
        let d = match kind {
            DescriptorKind::Float => Descriptor::Float((5..5 + len).map(num).collect::<Result<_, _>>()?),
            DescriptorKind::Binary => Descriptor::Binary(
                tok[5..]
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        u8::from_str_radix(t, 16).map_err(|_| err(ln, format!("field {}: bad hex byte '{t}'", k + 6)))
                    })
                    .collect::<Result<_, _>>()?,
            ),
        };
        set.keypoints.push(kp);
        set.descriptors.push(d);
    }
    if set.len() != count {
        return Err(err(hl + 1, format!("header declares {count} records, file has {}", set.len())));
    }
    Ok(set)
}

pub fn read_features(path: &Path) -> Result<FeatureSet, FeatureError> {
    let text = fs::read_to_string(path).map_err(|source| FeatureError::Io { path: path.to_path_buf(), source })?;
    parse_features(&text, path)
}

/// Serves `<dir>/<frame_id>.feat` files.
#[derive(Clone, Debug)]
pub struct FileProvider {
    dir: PathBuf,
}

impl FileProvider {
    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.feat"))
    }
}

pub fn provider_from_files(dir: impl Into<PathBuf>) -> FileProvider {
    FileProvider { dir: dir.into() }
}

impl FeatureProvider for FileProvider {
    fn extract(&self, frame: FrameInput<'_>) -> Result<FeatureSet, FeatureError> {
        let path = self.path_for(frame.id);
        if !path.is_file() {
            return Err(FeatureError::MissingFrame { id: frame.id.to_string(), path });
        }
        read_features(&path)
    }

    fn name(&self) -> &str {
        "files"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p() -> PathBuf {
        PathBuf::from("t.feat")
    }

    #[test]
    fn parses_two_records() {
        let text = "FEAT v1 2 float 3\n1.5 2.5 0.9 0.1 0 1 2 3\n10 20 0.5 -1.25 2 -1 0.5 0\n";
        let set = parse_features(text, &p()).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.keypoints[1], Keypoint { x: 10.0, y: 20.0, response: 0.5, orientation: -1.25, octave: 2 });
        assert_eq!(set.descriptors[0], Descriptor::Float(vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn empty_file_is_empty_set() {
        assert!(parse_features("", &p()).unwrap().is_empty());
        assert!(parse_features("FEAT v1 0 float 128\n", &p()).unwrap().is_empty());
    }

    #[test]
    fn malformed_reports_line() {
        let text = "FEAT v1 2 binary 2\nff 00\n1 2 3 4 0 ff zz\n";
        match parse_features(text, &p()) {
            Err(FeatureError::MalformedFile { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_features("FEAT v1 2 binary 1\n1 2 3 4 0 ff\n", &p()) {
            Err(FeatureError::MalformedFile { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("declares 2"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn thousand_records_round_trip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut set = FeatureSet::default();
        for _ in 0..1000 {
            set.keypoints.push(Keypoint {
                x: rng.random_range(0.0..640.0),
                y: rng.random_range(0.0..480.0),
                response: rng.random(),
                orientation: rng.random_range(-3.2..3.2),
                octave: rng.random_range(0..8),
            });
            set.descriptors.push(Descriptor::Float((0..16).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect()));
        }
        let back = parse_features(&write_features(&set), &p()).unwrap();
        for (a, b) in set.descriptors.iter().zip(&back.descriptors) {
            let (Descriptor::Float(a), Descriptor::Float(b)) = (a, b) else { panic!() };
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(set, back);

        let bin = FeatureSet::new(vec![Keypoint::new(1.0, 2.0)], vec![Descriptor::Binary(vec![0, 0xab, 0xff])]);
        assert_eq!(parse_features(&write_features(&bin), &p()).unwrap(), bin);
    }

    #[test]
    fn missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        let prov = provider_from_files(dir.path());
        let r = prov.extract(FrameInput { index: 0, id: "000000", image: None });
        assert!(matches!(r, Err(FeatureError::MissingFrame { .. })));
        fs::write(prov.path_for("000000"), "FEAT v1 0 float 4\n").unwrap();
        assert!(prov.extract(FrameInput { index: 0, id: "000000", image: None }).unwrap().is_empty());
    }
}
