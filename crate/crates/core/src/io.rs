//! File formats.
//!
//! Sample sets are stored as a CSV with header `x0,...,x{d-1},v0,...,v{d-1}`
//! plus a JSON sidecar (`<stem>.meta.json`) carrying the [`SampleMeta`].
//! Every float is written with 17 significant digits so files round-trip
//! exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::dynsys::{SampleMeta, SampleSet};
use crate::error::{Result, SpeError};

/// Round-trip formatting of a float (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Sidecar path for a data file: `dir/name.csv` becomes `dir/name.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn samples_to_csv(s: &SampleSet) -> String {
    let d = s.dim();
    let mut out = String::with_capacity(s.len() * d * 2 * 24);
    let header: Vec<String> = (0..d)
        .map(|j| format!("x{j}"))
        .chain((0..d).map(|j| format!("v{j}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..s.len() {
        for (j, v) in s.position(i).iter().chain(s.velocity(i)).enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, msg: impl Into<String>) -> SpeError {
    SpeError::Parse { line, msg: msg.into() }
}

/// Parses the sample CSV. The dimension comes from the header; when
/// `expected_dim` is given it must agree.
pub fn samples_from_csv(text: &str, expected_dim: Option<usize>, meta: SampleMeta) -> Result<SampleSet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || !cols.len().is_multiple_of(2) {
        return Err(parse_err(1, format!("expected 2d columns, got {}", cols.len())));
    }
    let d = cols.len() / 2;
    for (j, c) in cols.iter().enumerate() {
        let want = if j < d { format!("x{j}") } else { format!("v{}", j - d) };
        if *c != want {
            return Err(parse_err(1, format!("column {j} is `{c}`, expected `{want}`")));
        }
    }
    if let Some(e) = expected_dim {
        if e != d {
            return Err(SpeError::DimensionMismatch { expected: e, got: d });
        }
    }
    let mut pos = Vec::new();
    let mut vel = Vec::new();
    for (line, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 2 * d {
            return Err(parse_err(line, format!("expected {} fields, got {}", 2 * d, fields.len())));
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("cannot parse `{}` as a number", f.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(line, "non-finite value"));
            }
            if j < d {
                pos.push(v);
            } else {
                vel.push(v);
            }
        }
    }
    if pos.is_empty() {
        return Err(SpeError::EmptySamples);
    }
    SampleSet::new(d, pos, vel, meta)
}

/// Writes the CSV and its meta sidecar.
pub fn write_samples(path: &Path, s: &SampleSet) -> Result<()> {
    fs::write(path, samples_to_csv(s))?;
    write_json(&sidecar_path(path), &s.meta)
}

/// Reads a sample CSV; the meta sidecar is used when present.
pub fn read_samples(path: &Path, expected_dim: Option<usize>) -> Result<SampleSet> {
    let text = fs::read_to_string(path)?;
    let side = sidecar_path(path);
    let meta = if side.exists() { read_json(&side)? } else { SampleMeta::external() };
    samples_from_csv(&text, expected_dim, meta)
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Ordered point list as `idx,x0,...,x{d-1}`.
pub fn points_to_csv(points: &[Vec<f64>]) -> String {
    let d = points.first().map_or(0, Vec::len);
    let mut out = String::from("idx");
    for j in 0..d {
        write!(out, ",x{j}").unwrap();
    }
    out.push('\n');
    for (i, p) in points.iter().enumerate() {
        write!(out, "{i}").unwrap();
        for v in p {
            write!(out, ",{v:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::{sample_sparse, SamplingConfig, System, SystemSpec};

    fn small() -> SampleSet {
        let spec = SystemSpec::new(System::VanDerPol { mu: 0.7 }).unwrap();
        sample_sparse(&spec, &SamplingConfig::planar(25, 0.1, 3)).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = small();
        let text = samples_to_csv(&s);
        assert!(text.starts_with("x0,x1,v0,v1\n"));
        let back = samples_from_csv(&text, Some(2), s.meta.clone()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn files_round_trip_with_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let s = small();
        write_samples(&path, &s).unwrap();
        assert!(dir.path().join("s.meta.json").exists());
        let back = read_samples(&path, None).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn ragged_row_reports_line() {
        let text = "x0,x1,v0,v1\n1,2,3,4\n1,2,3\n";
        match samples_from_csv(text, None, SampleMeta::external()) {
            Err(SpeError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_and_header_rejected() {
        let bad = "x0,x1,v0,v1\n1,2,abc,4\n";
        assert!(matches!(
            samples_from_csv(bad, None, SampleMeta::external()),
            Err(SpeError::Parse { line: 2, .. })
        ));
        let header = "x0,y1,v0,v1\n1,2,3,4\n";
        assert!(matches!(
            samples_from_csv(header, None, SampleMeta::external()),
            Err(SpeError::Parse { line: 1, .. })
        ));
        let odd = "x0,x1,v0\n";
        assert!(samples_from_csv(odd, None, SampleMeta::external()).is_err());
        let empty = "x0,v0\n";
        assert!(matches!(
            samples_from_csv(empty, None, SampleMeta::external()),
            Err(SpeError::EmptySamples)
        ));
    }

    #[test]
    fn dimension_check() {
        let text = "x0,x1,v0,v1\n1,2,3,4\n";
        assert!(matches!(
            samples_from_csv(text, Some(3), SampleMeta::external()),
            Err(SpeError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn seventeen_digits() {
        let v = 0.1 + 0.2;
        let s = fmt_f64(v);
        assert_eq!(s.parse::<f64>().unwrap(), v);
        assert_eq!(s.split('e').next().unwrap().replace(['.', '-'], "").len(), 17);
    }

    #[test]
    fn point_csv_layout() {
        let text = points_to_csv(&[vec![0.5, 0.0], vec![0.0, 0.5]]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "idx,x0,x1");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,"));
    }
}
