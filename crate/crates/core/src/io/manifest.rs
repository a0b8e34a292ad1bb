//! Line-oriented landmark lists.
//!
//! Every non-blank line not starting with `#` reads
//!
//! ```text
//! path,x1,y1,x2,y2,...,x68,y68[,tag][,key=value...]
//! ```
//!
//! with the 68 corners vertebra-major in TL, TR, BL, BR order and raw-image
//! pixel coordinates. A bare trailing field is the split tag. `key=value`
//! fields carry per-image results such as `mse=` or `mt=`. Relative image
//! paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{cobb_angles, normalized_mse, CobbAngles};
use crate::shape::{Shape, ShapeKind};

const COORDS: usize = 136;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub landmarks: Shape,
    pub split: Option<String>,
    pub extras: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose split tag equals `tag`.
    pub fn split(&self, tag: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split.as_deref() == Some(tag)).collect()
    }
}

/// Parses manifest text; relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let path = fields[0];
        if path.is_empty() {
            return Err(Error::Parse { line: line_no, message: "missing image path".into() });
        }
        let mut coords = Vec::with_capacity(COORDS);
        let mut rest = &fields[1..];
        while let Some(field) = rest.first() {
            if coords.len() == COORDS {
                break;
            }
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => coords.push(v),
                Ok(_) => {
                    return Err(Error::Parse { line: line_no, message: format!("non-finite coordinate {field:?}") })
                }
                Err(_) if field.is_empty() || field.starts_with(|c: char| c.is_ascii_digit() || "+-.".contains(c)) => {
                    return Err(Error::Parse { line: line_no, message: format!("malformed number {field:?}") })
                }
                Err(_) => break,
            }
            rest = &rest[1..];
        }
        if coords.len() != COORDS {
            return Err(Error::Schema {
                line: line_no,
                message: format!("expected {COORDS} coordinates, found {}", coords.len()),
            });
        }
        let mut split = None;
        let mut extras = BTreeMap::new();
        for field in rest {
            match field.split_once('=') {
                Some((k, v)) => {
                    extras.insert(k.trim().to_string(), v.trim().to_string());
                }
                None if split.is_none() && !field.is_empty() && field.parse::<f64>().is_err() => {
                    split = Some(field.to_string())
                }
                None => {
                    return Err(Error::Schema { line: line_no, message: format!("unexpected field {field:?}") })
                }
            }
        }
        let p = Path::new(path);
        let path = if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        let landmarks = Shape::from_flat(ShapeKind::Full68, &coords)?;
        entries.push(ManifestEntry { path, landmarks, split, extras });
    }
    Ok(Manifest { entries })
}

/// Reads a manifest and checks that every referenced image exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    let mut line_of = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim().starts_with('#'))
        .map(|(i, _)| i + 1);
    for e in &manifest.entries {
        let line = line_of.next().unwrap_or(0);
        if !e.path.exists() {
            return Err(Error::Schema { line, message: format!("image {} does not exist", e.path.display()) });
        }
    }
    Ok(manifest)
}

fn format_line(path: &str, landmarks: &Shape, split: Option<&str>, extras: &BTreeMap<String, String>) -> String {
    let mut line = path.to_string();
    for v in landmarks.flatten() {
        write!(line, ",{v:.6}").expect("writing to a String");
    }
    if let Some(tag) = split {
        write!(line, ",{tag}").expect("writing to a String");
    }
    for (k, v) in extras {
        write!(line, ",{k}={v}").expect("writing to a String");
    }
    line
}

/// Writes entries with paths exactly as stored.
pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let mut text = String::new();
    for e in &manifest.entries {
        let p = e.path.to_string_lossy();
        if p.contains(',') {
            return Err(crate::error::invalid(format!("path {p} contains a comma")));
        }
        text.push_str(&format_line(&p, &e.landmarks, e.split.as_deref(), &e.extras));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// One predicted image, with ground truth when available.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub path: PathBuf,
    pub landmarks: Shape,
    /// Raw image width and height.
    pub frame: (usize, usize),
    pub ground_truth: Option<Shape>,
}

/// Writes predictions in manifest format with `mse=` (when ground truth is
/// known) and `pt=`, `mt=`, `tl=` Cobb columns.
pub fn export_predictions(results: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    if results.is_empty() {
        return Err(crate::error::invalid("no predictions to export"));
    }
    let mut text = String::new();
    for r in results {
        let mut extras = BTreeMap::new();
        if let Some(gt) = &r.ground_truth {
            let mse = normalized_mse(&r.landmarks, gt, r.frame.0 as f64, r.frame.1 as f64)?;
            extras.insert("mse".to_string(), format!("{mse:e}"));
        }
        let cobb = cobb_angles(&r.landmarks).unwrap_or(CobbAngles { pt: f64::NAN, mt: f64::NAN, tl: f64::NAN });
        extras.insert("pt".to_string(), format!("{:.6}", cobb.pt));
        extras.insert("mt".to_string(), format!("{:.6}", cobb.mt));
        extras.insert("tl".to_string(), format!("{:.6}", cobb.tl));
        let p = r.path.to_string_lossy();
        text.push_str(&format_line(&p, &r.landmarks, None, &extras));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::Point;

    fn spine() -> Shape {
        let pts = (0..68).map(|i| Point::new(10.0 + (i % 4) as f64 * 7.25, 3.0 + i as f64 * 9.5)).collect();
        Shape::new(ShapeKind::Full68, pts).unwrap()
    }

    fn line(n: usize) -> String {
        let mut s = "img.pgm".to_string();
        for v in spine().flatten().iter().take(n) {
            s.push_str(&format!(",{v}"));
        }
        s
    }

    #[test]
    fn empty_text_is_empty_manifest() {
        assert!(parse_manifest("", Path::new(".")).unwrap().is_empty());
        assert!(parse_manifest("# header\n\n", Path::new(".")).unwrap().is_empty());
    }

    #[test]
    fn one_line_roundtrips_exactly() {
        let m = parse_manifest(&line(136), Path::new("/data")).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.entries[0].landmarks, spine());
        assert_eq!(m.entries[0].path, PathBuf::from("/data/img.pgm"));
    }

    #[test]
    fn wrong_count_names_the_line() {
        let text = format!("# c\n{}\n{}\n", line(136), line(135));
        match parse_manifest(&text, Path::new(".")) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_manifest(&format!("{},12,13", line(136)), Path::new(".")) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_number_is_parse_error() {
        let text = line(136).replacen(",10", ",1x0", 1);
        assert!(matches!(parse_manifest(&text, Path::new(".")), Err(Error::Parse { line: 1, .. })));
        let text = line(136).replacen(",10", ",NaN", 1);
        assert!(matches!(parse_manifest(&text, Path::new(".")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_tag_and_extras() {
        let m = parse_manifest(&format!("{},test,mse=1e-3", line(136)), Path::new(".")).unwrap();
        assert_eq!(m.entries[0].split.as_deref(), Some("test"));
        assert_eq!(m.entries[0].extras["mse"], "1e-3");
        assert_eq!(m.split("test").len(), 1);
    }

    #[test]
    fn missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, line(136)).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::Schema { line: 1, .. })));
        fs::write(dir.path().join("img.pgm"), b"").unwrap();
        assert_eq!(load_manifest(&path).unwrap().len(), 1);
    }

    #[test]
    fn export_roundtrip_and_columns() {
        let dir = tempfile::tempdir().unwrap();
        let gt = spine();
        let pred = gt.translated(0.1234567, -2.0);
        let out = dir.path().join("pred.txt");
        let r = Prediction { path: "a.pgm".into(), landmarks: pred.clone(), frame: (100, 700), ground_truth: Some(gt.clone()) };
        export_predictions(&[r], &out).unwrap();
        let m = parse_manifest(&fs::read_to_string(&out).unwrap(), dir.path()).unwrap();
        let e = &m.entries[0];
        for (a, b) in e.landmarks.flatten().iter().zip(pred.flatten()) {
            assert!((a - b).abs() <= 5e-7);
        }
        let mse: f64 = e.extras["mse"].parse().unwrap();
        assert_eq!(mse, normalized_mse(&pred, &gt, 100.0, 700.0).unwrap());
        let cobb = cobb_angles(&pred).unwrap();
        assert!((e.extras["mt"].parse::<f64>().unwrap() - cobb.mt).abs() < 1e-6);
        assert!(export_predictions(&[], &out).is_err());
    }
}
