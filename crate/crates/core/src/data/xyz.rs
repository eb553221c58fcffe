//! Plain-text point-cloud files.
//!
//! ```text
//! label 3
//! 0.125 -0.5 0.75
//! ...
//! ```
//!
//! Coordinates are written in the shortest decimal form that parses back to
//! the identical `f64` (never more than 17 significant digits).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::PointCloud;
use crate::error::{Error, Result};

/// Name of the file listing a dataset's cloud files, one relative path per line.
pub const DATASET_MANIFEST: &str = "dataset.txt";

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 64);
    writeln!(out, "label {}", cloud.label).expect("write to string");
    for [x, y, z] in &cloud.points {
        writeln!(out, "{x} {y} {z}").expect("write to string");
    }
    out
}

pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

pub fn parse_xyz(text: &str, path: &Path, source_id: &str) -> Result<PointCloud> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyCloud)?;
    let label = header
        .strip_prefix("label ")
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| parse_err(1, format!("expected `label <int>`, found {header:?}")))?;
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let mut coords = [0.0; 3];
        let mut fields = line.split(' ');
        for c in coords.iter_mut() {
            let tok = fields
                .next()
                .ok_or_else(|| parse_err(lineno, "expected 3 coordinates".into()))?;
            *c = tok
                .parse::<f64>()
                .map_err(|_| parse_err(lineno, format!("not a number: {tok:?}")))?;
            if !c.is_finite() {
                return Err(parse_err(lineno, format!("non-finite coordinate {tok:?}")));
            }
        }
        if fields.next().is_some() {
            return Err(parse_err(lineno, "expected exactly 3 coordinates".into()));
        }
        points.push(coords);
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    PointCloud::new(points, label, source_id)
}

/// Reads a cloud; its `source_id` is the file stem.
pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_xyz(&text, path, &stem)
}

/// Writes every cloud as `<source_id>.xyz` plus the dataset manifest.
/// Returns the written relative paths: clouds in manifest order, then the
/// manifest itself.
pub fn save_dataset(clouds: &[PointCloud], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut listing = String::new();
    let mut written = Vec::with_capacity(clouds.len());
    for cloud in clouds {
        let rel = PathBuf::from(format!("{}.xyz", cloud.source_id));
        save_xyz(cloud, &dir.join(&rel))?;
        listing.push_str(&rel.to_string_lossy());
        listing.push('\n');
        written.push(rel);
    }
    let manifest = dir.join(DATASET_MANIFEST);
    fs::write(&manifest, listing).map_err(|e| Error::io(&manifest, e))?;
    written.push(PathBuf::from(DATASET_MANIFEST));
    Ok(written)
}

/// Loads every file named in `dir/dataset.txt`, in listed order.
pub fn load_dataset(dir: &Path) -> Result<Vec<PointCloud>> {
    let manifest = dir.join(DATASET_MANIFEST);
    let listing = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    listing
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|rel| load_xyz(&dir.join(rel.trim())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, ShapeSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ShapeSpec::for_class(4, 0.02, 64).unwrap();
        let mut cloud = gen_synthetic(&spec, 4, 17).unwrap();
        cloud.points[0] = [1e-300, -0.1 + 0.2, 123456.789e10];
        let path = dir.path().join("cloud.xyz");
        save_xyz(&cloud, &path).unwrap();
        let back = load_xyz(&path).unwrap();
        assert_eq!(back.label, 4);
        assert_eq!(back.source_id, "cloud");
        for (a, b) in cloud.points.iter().zip(&back.points) {
            assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert!(text.lines().all(|l| !l.ends_with(' ')));
    }

    #[test]
    fn parse_errors_cite_line_numbers() {
        let p = Path::new("x.xyz");
        let err = parse_xyz("label 1\n0 0 0\n1 abc 2\n", p, "x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_xyz("lbl 1\n0 0 0\n", p, "x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_xyz("label 1\n0 0\n", p, "x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_xyz("label 1\n0 0 inf\n", p, "x").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_xyz("", p, "x"), Err(Error::EmptyCloud)));
        assert!(matches!(parse_xyz("label 2\n", p, "x"), Err(Error::EmptyCloud)));
    }

    #[test]
    fn single_point_file() {
        let c = parse_xyz("label 0\n0.5 0.25 -1\n", Path::new("one.xyz"), "one").unwrap();
        assert_eq!(c.points, vec![[0.5, 0.25, -1.0]]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::data::DatasetConfig {
            classes: 3,
            per_class: 2,
            points: 8,
            jitter_sigma: 0.01,
            shape_variation: 0.3,
        };
        let clouds = crate::data::gen_dataset(&cfg, 5).unwrap();
        save_dataset(&clouds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), clouds);
        assert!(matches!(
            load_dataset(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
