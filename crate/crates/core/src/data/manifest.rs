//! JSON Lines dataset manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One query–moment pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    /// Feature file; relative paths are resolved against the manifest's
    /// directory by [`load_manifest`].
    pub feature_path: PathBuf,
    pub duration_seconds: f64,
    pub query_tokens: Vec<String>,
    pub action_mask: Vec<bool>,
    pub object_mask: Vec<bool>,
    /// Ground-truth `(start, end)` in seconds.
    pub moment: (f64, f64),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: String,
    feature_path: String,
    duration_seconds: f64,
    tokens: Vec<String>,
    action_mask: Vec<u8>,
    object_mask: Vec<u8>,
    moment: [f64; 2],
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| {
            Err(Error::Validation {
                id: self.id.clone(),
                detail,
            })
        };
        if !(self.duration_seconds > 0.0 && self.duration_seconds.is_finite()) {
            return fail(format!("duration {} must be positive", self.duration_seconds));
        }
        let (s, e) = self.moment;
        if !(s.is_finite() && e.is_finite() && 0.0 <= s && s < e && e <= self.duration_seconds) {
            return fail(format!(
                "moment ({s}, {e}) must satisfy 0 <= start < end <= duration ({})",
                self.duration_seconds
            ));
        }
        let n = self.query_tokens.len();
        if self.action_mask.len() != n || self.object_mask.len() != n {
            return fail(format!(
                "mask lengths ({}, {}) differ from token count {n}",
                self.action_mask.len(),
                self.object_mask.len()
            ));
        }
        Ok(())
    }

    fn from_line(line: ManifestLine) -> Result<Self> {
        let to_mask = |name: &str, m: Vec<u8>| -> Result<Vec<bool>> {
            m.into_iter()
                .map(|v| match v {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::Validation {
                        id: line.id.clone(),
                        detail: format!("{name} entries must be 0 or 1, found {other}"),
                    }),
                })
                .collect()
        };
        let action_mask = to_mask("action_mask", line.action_mask.clone())?;
        let object_mask = to_mask("object_mask", line.object_mask.clone())?;
        let rec = DatasetRecord {
            id: line.id,
            feature_path: PathBuf::from(line.feature_path),
            duration_seconds: line.duration_seconds,
            query_tokens: line.tokens,
            action_mask,
            object_mask,
            moment: (line.moment[0], line.moment[1]),
        };
        rec.validate()?;
        Ok(rec)
    }

    fn to_line(&self) -> ManifestLine {
        let bits = |m: &[bool]| m.iter().map(|&b| u8::from(b)).collect();
        ManifestLine {
            id: self.id.clone(),
            feature_path: self.feature_path.to_string_lossy().into_owned(),
            duration_seconds: self.duration_seconds,
            tokens: self.query_tokens.clone(),
            action_mask: bits(&self.action_mask),
            object_mask: bits(&self.object_mask),
            moment: [self.moment.0, self.moment.1],
        }
    }
}

/// Parses manifest text. Blank lines are skipped; line numbers in errors are
/// 1-based.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: ManifestLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(DatasetRecord::from_line(line)?);
    }
    Ok(out)
}

/// Loads and validates a manifest, resolving relative feature paths against
/// the manifest's directory. Records keep file order.
pub fn load_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = parse_manifest(&text, path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for r in &mut records {
        if r.feature_path.is_relative() {
            r.feature_path = base.join(&r.feature_path);
        }
    }
    Ok(records)
}

pub fn manifest_to_string(records: &[DatasetRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(&r.to_line()).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(manifest_to_string(records).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{"id":"a","feature_path":"f/a.vfea","duration_seconds":30.0,"tokens":["a","woman","holding","a","book"],"action_mask":[0,0,1,0,0],"object_mask":[0,1,0,0,1],"moment":[1.5,8.0]}
{"id":"b","feature_path":"/abs/b.vfea","duration_seconds":20.0,"tokens":[],"action_mask":[],"object_mask":[],"moment":[0.0,20.0]}
{"id":"c","feature_path":"f/c.vfea","duration_seconds":12.5,"tokens":["door"],"action_mask":[0],"object_mask":[1],"moment":[3.0,4.0]}
"#;

    #[test]
    fn parses_three_records_in_order() {
        let recs = parse_manifest(GOOD, Path::new("m.jsonl")).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(recs[0].action_mask, [false, false, true, false, false]);
        assert_eq!(recs[0].moment, (1.5, 8.0));
    }

    #[test]
    fn reversed_moment_names_the_record() {
        let text = r#"{"id":"bad1","feature_path":"x","duration_seconds":10.0,"tokens":[],"action_mask":[],"object_mask":[],"moment":[5.0,5.0]}"#;
        match parse_manifest(text, Path::new("m")) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "bad1"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn mask_length_mismatch_is_rejected() {
        let text = r#"{"id":"m","feature_path":"x","duration_seconds":10.0,"tokens":["a","b"],"action_mask":[0],"object_mask":[0,0],"moment":[1.0,2.0]}"#;
        assert!(matches!(
            parse_manifest(text, Path::new("m")),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn moment_past_duration_is_rejected() {
        let text = r#"{"id":"m","feature_path":"x","duration_seconds":10.0,"tokens":[],"action_mask":[],"object_mask":[],"moment":[1.0,10.5]}"#;
        assert!(parse_manifest(text, Path::new("m")).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json}}\n", GOOD.lines().next().unwrap());
        match parse_manifest(&text, Path::new("m.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_and_bad_mask_value_fail() {
        let extra = r#"{"id":"m","feature_path":"x","duration_seconds":10.0,"tokens":[],"action_mask":[],"object_mask":[],"moment":[1.0,2.0],"extra":1}"#;
        assert!(matches!(parse_manifest(extra, Path::new("m")), Err(Error::Parse { .. })));
        let two = r#"{"id":"m","feature_path":"x","duration_seconds":10.0,"tokens":["a"],"action_mask":[2],"object_mask":[0],"moment":[1.0,2.0]}"#;
        assert!(matches!(parse_manifest(two, Path::new("m")), Err(Error::Validation { .. })));
    }

    #[test]
    fn serialization_round_trips() {
        let recs = parse_manifest(GOOD, Path::new("m")).unwrap();
        let text = manifest_to_string(&recs);
        assert_eq!(parse_manifest(&text, Path::new("m")).unwrap(), recs);
        assert_eq!(text, GOOD);
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, GOOD).unwrap();
        let recs = load_manifest(&path).unwrap();
        assert_eq!(recs[0].feature_path, dir.path().join("f/a.vfea"));
        assert_eq!(recs[1].feature_path, PathBuf::from("/abs/b.vfea"));
    }
}
