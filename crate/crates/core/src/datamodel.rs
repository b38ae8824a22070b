//! Dataset records: the JSONL manifest, the rater annotation table and the
//! binary persuasiveness label shared by every downstream stage.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed manifest record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}` (first seen on line {first_line})")]
    DuplicateId {
        line: usize,
        id: String,
        first_line: usize,
    },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("line {line}: score {score} outside 0..=10")]
    ScoreRange { line: usize, score: i64 },
    #[error("annotations: {0}")]
    Csv(String),
}

/// Binary persuasiveness class. `High` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryLabel {
    High,
    Low,
}

impl BinaryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::High => "high",
            BinaryLabel::Low => "low",
        }
    }

    pub fn is_high(self) -> bool {
        self == BinaryLabel::High
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BinaryLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(BinaryLabel::High),
            "low" => Ok(BinaryLabel::Low),
            other => Err(format!("unknown label `{other}` (expected high or low)")),
        }
    }
}

impl Serialize for BinaryLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for BinaryLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Accepts a JSON string or integer for identifiers (the detector listings use
/// integer ids, manifests use strings).
pub(crate) fn de_string_or_number<'de, D: Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        I(i64),
        U(u64),
    }
    Ok(match Id::deserialize(d)? {
        Id::S(s) => s,
        Id::I(i) => i.to_string(),
        Id::U(u) => u.to_string(),
    })
}

/// One dataset row. Unknown JSON fields are kept in `extras` and written back
/// unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    #[serde(deserialize_with = "de_string_or_number")]
    pub id: String,
    pub image_path: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<BinaryLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_path: Option<String>,
    #[serde(flatten)]
    pub extras: serde_json::Map<String, serde_json::Value>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, image_path: impl Into<String>, message: impl Into<String>) -> Self {
        ImageRecord {
            id: id.into(),
            image_path: image_path.into(),
            message: message.into(),
            label: None,
            saliency_path: None,
            detection_path: None,
            extras: serde_json::Map::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    lines: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Manifest {
    /// Builds a manifest from in-memory records, enforcing the same invariants
    /// as [`parse_manifest`]. Line numbers are 1-based positions in `records`.
    pub fn from_records(records: Vec<ImageRecord>) -> Result<Self, DataError> {
        let mut m = Manifest::default();
        for (i, r) in records.into_iter().enumerate() {
            m.push(r, i + 1)?;
        }
        Ok(m)
    }

    fn push(&mut self, record: ImageRecord, line: usize) -> Result<(), DataError> {
        if record.id.trim().is_empty() {
            return Err(DataError::Validation { line, message: "empty id".into() });
        }
        if record.image_path.trim().is_empty() {
            return Err(DataError::Validation { line, message: "empty image_path".into() });
        }
        if let Some(&pos) = self.index.get(&record.id) {
            return Err(DataError::DuplicateId {
                line,
                id: record.id,
                first_line: self.lines[pos],
            });
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        self.lines.push(line);
        Ok(())
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Source line of the record with `id`.
    pub fn line_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).map(|&i| self.lines[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter()
    }

    /// Serializes to JSONL, one record per line with a trailing newline.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_jsonl()).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Parses a manifest from JSONL text. Blank lines are skipped.
pub fn parse_manifest_str(text: &str) -> Result<Manifest, DataError> {
    let mut m = Manifest::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(raw).map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        m.push(record, line)?;
    }
    Ok(m)
}

pub fn parse_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_manifest_str(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub rater_id: String,
    pub score: u8,
}

/// Per-image 0..=10 scores. Row order is preserved.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationTable {
    rows: Vec<Annotation>,
}

impl AnnotationTable {
    pub fn from_rows(rows: Vec<Annotation>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            if r.score > 10 {
                return Err(DataError::ScoreRange { line: i + 2, score: r.score as i64 });
            }
            if !seen.insert((r.image_id.as_str(), r.rater_id.as_str())) {
                return Err(DataError::Validation {
                    line: i + 2,
                    message: format!("rater `{}` scored image `{}` twice", r.rater_id, r.image_id),
                });
            }
        }
        Ok(AnnotationTable { rows })
    }

    pub fn rows(&self) -> &[Annotation] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Scores grouped by image in first-appearance order.
    pub fn by_image(&self) -> Vec<(String, Vec<u8>)> {
        let mut order: Vec<(String, Vec<u8>)> = Vec::new();
        let mut pos: HashMap<&str, usize> = HashMap::new();
        for r in &self.rows {
            match pos.get(r.image_id.as_str()) {
                Some(&i) => order[i].1.push(r.score),
                None => {
                    pos.insert(r.image_id.as_str(), order.len());
                    order.push((r.image_id.clone(), vec![r.score]));
                }
            }
        }
        order
    }

    pub fn image_count(&self) -> usize {
        self.rows.iter().map(|r| r.image_id.as_str()).collect::<HashSet<_>>().len()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,rater_id,score\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.image_id, r.rater_id, r.score));
        }
        out
    }
}

pub fn parse_annotations_str(text: &str) -> Result<AnnotationTable, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| DataError::Csv(format!("missing column `{name}`")))
    };
    let (ci, cr, cs) = (col("image_id")?, col("rater_id")?, col("score")?);
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DataError::Csv(format!("line {line}: {e}")))?;
        let field = |c: usize| rec.get(c).unwrap_or("").to_string();
        let raw = field(cs);
        let score: i64 = raw.parse().map_err(|_| DataError::Validation {
            line,
            message: format!("score `{raw}` is not an integer"),
        })?;
        if !(0..=10).contains(&score) {
            return Err(DataError::ScoreRange { line, score });
        }
        rows.push(Annotation { image_id: field(ci), rater_id: field(cr), score: score as u8 });
    }
    AnnotationTable::from_rows(rows)
}

pub fn parse_annotations(path: &Path) -> Result<AnnotationTable, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_annotations_str(&text)
}

/// Annotation image ids that have no manifest record, each listed once.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Reconciliation {
    pub matched: usize,
    pub unresolved: Vec<String>,
    pub unannotated: usize,
}

pub fn reconcile(manifest: &Manifest, annotations: &AnnotationTable) -> Reconciliation {
    let (found, unresolved): (Vec<String>, Vec<String>) =
        annotations.by_image().into_iter().map(|(id, _)| id).partition(|id| manifest.get(id).is_some());
    Reconciliation { matched: found.len(), unresolved, unannotated: manifest.len().saturating_sub(found.len()) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_line_without_label() {
        let m = parse_manifest_str(
            r#"{"id":"413","image_path":"a.jpg","message":"Remove_unnecessary_electronic_devices"}"#,
        )
        .unwrap();
        let r = &m.records()[0];
        assert_eq!(r.id, "413");
        assert_eq!(r.message, "Remove_unnecessary_electronic_devices");
        assert_eq!(r.label, None);
    }

    #[test]
    fn empty_manifest() {
        assert!(parse_manifest_str("").unwrap().is_empty());
        assert!(parse_manifest_str("\n  \n").unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_names_second_line() {
        let text = "{\"id\":\"1\",\"image_path\":\"a.jpg\",\"message\":\"m\"}\n{\"id\":\"1\",\"image_path\":\"b.jpg\",\"message\":\"m\"}\n";
        match parse_manifest_str(text) {
            Err(DataError::DuplicateId { line, first_line, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(first_line, 1);
            }
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"1\",\"image_path\":\"a.jpg\",\"message\":\"m\"}\n{not json}\n";
        match parse_manifest_str(text) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels_are_case_insensitive_and_extras_survive() {
        let text = r#"{"id":7,"image_path":"x.png","message":"m","label":"HIGH","strategy":"fear","n":3}"#;
        let m = parse_manifest_str(text).unwrap();
        let r = &m.records()[0];
        assert_eq!(r.id, "7");
        assert_eq!(r.label, Some(BinaryLabel::High));
        assert_eq!(r.extras["strategy"], "fear");
        let again = parse_manifest_str(&m.to_jsonl()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn empty_fields_rejected() {
        assert!(matches!(
            parse_manifest_str(r#"{"id":"","image_path":"a","message":"m"}"#),
            Err(DataError::Validation { line: 1, .. })
        ));
        assert!(matches!(
            parse_manifest_str(r#"{"id":"1","image_path":"","message":"m"}"#),
            Err(DataError::Validation { line: 1, .. })
        ));
    }

    #[test]
    fn annotation_rows() {
        let t = parse_annotations_str("image_id,rater_id,score\nimg1,r1,8\n").unwrap();
        assert_eq!(t.rows()[0], Annotation { image_id: "img1".into(), rater_id: "r1".into(), score: 8 });
    }

    #[test]
    fn annotation_range_and_parse_errors() {
        assert!(matches!(
            parse_annotations_str("image_id,rater_id,score\nimg1,r1,11\n"),
            Err(DataError::ScoreRange { score: 11, line: 2 })
        ));
        assert!(matches!(
            parse_annotations_str("image_id,rater_id,score\nimg1,r1,7.5\n"),
            Err(DataError::Validation { line: 2, .. })
        ));
        assert!(matches!(
            parse_annotations_str("image_id,rater_id,score\nimg1,r1,3\nimg1,r1,4\n"),
            Err(DataError::Validation { line: 3, .. })
        ));
    }

    #[test]
    fn four_raters_one_image_crlf() {
        let t = parse_annotations_str("image_id,rater_id,score\r\nimg1,r1,8\r\nimg1,r2,9\r\nimg1,r3,10\r\nimg1,r4,8\r\n").unwrap();
        assert_eq!(t.image_count(), 1);
        let groups = t.by_image();
        assert_eq!(groups, vec![("img1".to_string(), vec![8, 9, 10, 8])]);
    }

    #[test]
    fn reconciliation_reports_each_orphan_once() {
        let m = Manifest::from_records(vec![ImageRecord::new("a", "a.png", "m")]).unwrap();
        let t = parse_annotations_str("image_id,rater_id,score\na,r1,1\nb,r1,2\nb,r2,3\nc,r1,0\n").unwrap();
        let rec = reconcile(&m, &t);
        assert_eq!(rec.matched, 1);
        assert_eq!(rec.unresolved, vec!["b".to_string(), "c".to_string()]);
    }
}
