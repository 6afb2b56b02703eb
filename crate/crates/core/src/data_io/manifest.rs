use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Annotated 2D keypoint in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Landmark {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn visible(x: f64, y: f64) -> Self {
        Self::new(x, y, true)
    }

    fn to_triple(self) -> [f64; 3] {
        [self.x, self.y, if self.visible { 1.0 } else { 0.0 }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Query side: skull radiograph or sketch.
    A,
    /// Gallery side: face photograph.
    B,
}

impl Modality {
    pub fn other(self) -> Self {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::A => "A",
            Modality::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Side,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Front => "front",
            View::Side => "side",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub modality: Modality,
    pub view: View,
    pub landmarks: Vec<Landmark>,
    /// Image size in pixels as `(width, height)`, when known.
    pub image_size: Option<(u32, u32)>,
    pub image_ref: Option<String>,
    pub patch_features_ref: Option<String>,
    pub global_feature_ref: Option<String>,
}

impl SampleRecord {
    /// Key used for pairing across modalities.
    pub fn pair_key(&self) -> (String, View) {
        (self.id.clone(), self.view)
    }
}

/// Validated set of records. Relative references resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub n_landmarks_front: Option<usize>,
    pub n_landmarks_side: Option<usize>,
    pub split: Split,
    pub base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    modality: Modality,
    view: View,
    landmarks: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    patch_features_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_feature_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

impl DatasetManifest {
    /// Builds and validates a manifest from records.
    pub fn new(records: Vec<SampleRecord>, split: Split, base_dir: impl Into<PathBuf>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut counts: BTreeMap<View, usize> = BTreeMap::new();
        let mut seen: BTreeSet<(Modality, View, &str)> = BTreeSet::new();
        for rec in &records {
            validate_record(rec)?;
            let expected = *counts.entry(rec.view).or_insert(rec.landmarks.len());
            if rec.landmarks.len() != expected {
                return Err(Error::InconsistentLandmarkCount {
                    id: rec.id.clone(),
                    view: rec.view.to_string(),
                    expected,
                    found: rec.landmarks.len(),
                });
            }
            if !seen.insert((rec.modality, rec.view, rec.id.as_str())) {
                return Err(Error::DuplicateId {
                    id: rec.id.clone(),
                    modality: rec.modality.to_string(),
                    view: rec.view.to_string(),
                });
            }
        }
        Ok(Self {
            n_landmarks_front: counts.get(&View::Front).copied(),
            n_landmarks_side: counts.get(&View::Side).copied(),
            records,
            split,
            base_dir: base_dir.into(),
        })
    }

    pub fn resolve(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn records_of(&self, modality: Modality) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.modality == modality)
    }

    /// Unique ids in first-appearance order.
    pub fn ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.id.clone()))
            .map(|r| r.id.clone())
            .collect()
    }

    /// Records whose id is in `ids`, preserving order.
    pub fn subset(&self, ids: &BTreeSet<String>, split: Split) -> Result<Self> {
        let records = self.records.iter().filter(|r| ids.contains(&r.id)).cloned().collect();
        Self::new(records, split, self.base_dir.clone())
    }

    /// Serialises to the line-delimited format.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            let line = RecordLine {
                id: rec.id.clone(),
                modality: rec.modality,
                view: rec.view,
                landmarks: rec.landmarks.iter().map(|l| l.to_triple()).collect(),
                width: rec.image_size.map(|s| s.0),
                height: rec.image_size.map(|s| s.1),
                image_ref: rec.image_ref.clone(),
                patch_features_ref: rec.patch_features_ref.clone(),
                global_feature_ref: rec.global_feature_ref.clone(),
                split: Some(self.split),
            };
            out.push_str(&serde_json::to_string(&line).expect("record serialisation"));
            out.push('\n');
        }
        out
    }
}

fn validate_record(rec: &SampleRecord) -> Result<()> {
    if rec.landmarks.is_empty() {
        return Err(Error::InvalidLandmark(format!("record {} has no landmarks", rec.id)));
    }
    for (i, lm) in rec.landmarks.iter().enumerate() {
        if !lm.x.is_finite() || !lm.y.is_finite() || lm.x < 0.0 || lm.y < 0.0 {
            return Err(Error::InvalidLandmark(format!(
                "record {} landmark {i}: coordinates must be finite and non-negative",
                rec.id
            )));
        }
        if let (true, Some((w, h))) = (lm.visible, rec.image_size) {
            if lm.x > w as f64 || lm.y > h as f64 {
                return Err(Error::InvalidLandmark(format!(
                    "record {} landmark {i}: ({}, {}) outside {w}x{h}",
                    rec.id, lm.x, lm.y
                )));
            }
        }
    }
    Ok(())
}

/// Parses manifest text. `base_dir` anchors relative references.
pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut split: Option<Split> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let line: RecordLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut landmarks = Vec::with_capacity(line.landmarks.len());
        for [x, y, v] in line.landmarks {
            let visible = match v {
                0.0 => false,
                1.0 => true,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("visibility must be 0 or 1, got {other}"),
                    })
                }
            };
            landmarks.push(Landmark { x, y, visible });
        }
        let image_size = match (line.width, line.height) {
            (Some(w), Some(h)) => Some((w, h)),
            (None, None) => None,
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: "width and height must be given together".into(),
                })
            }
        };
        if let Some(s) = line.split {
            match split {
                None => split = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("mixed splits in one manifest ({prev} vs {s})"),
                    })
                }
                Some(_) => {}
            }
        }
        records.push(SampleRecord {
            id: line.id,
            modality: line.modality,
            view: line.view,
            landmarks,
            image_size,
            image_ref: line.image_ref,
            patch_features_ref: line.patch_features_ref,
            global_feature_ref: line.global_feature_ref,
        });
    }
    DatasetManifest::new(records, split.unwrap_or_default(), base_dir)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, base)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_lines()).map_err(|e| Error::io(path, e))
}

/// Every (id, view) present in one modality must be present in the other.
pub fn check_paired(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let keys = |m: &DatasetManifest, modality: Modality| -> BTreeSet<(String, View)> {
        m.records_of(modality).map(SampleRecord::pair_key).collect()
    };
    let ka = keys(a, Modality::A);
    let kb = keys(b, Modality::B);
    if let Some((id, view)) = ka.difference(&kb).next() {
        return Err(Error::Unpaired {
            id: id.clone(),
            view: view.to_string(),
            missing: "B".into(),
        });
    }
    if let Some((id, view)) = kb.difference(&ka).next() {
        return Err(Error::Unpaired {
            id: id.clone(),
            view: view.to_string(),
            missing: "A".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, modality: &str, n: usize) -> String {
        let lms: Vec<String> = (0..n).map(|i| format!("[{}, {}, 1]", i + 1, i + 2)).collect();
        format!(
            r#"{{"id":"{id}","modality":"{modality}","view":"front","landmarks":[{}],"width":64,"height":64}}"#,
            lms.join(",")
        )
    }

    #[test]
    fn two_line_manifest() {
        let text = format!("{}\n{}\n", line("p1", "A", 18), line("p1", "B", 18));
        let m = parse_manifest(&text, ".").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.n_landmarks_front, Some(18));
        assert_eq!(m.n_landmarks_side, None);
        check_paired(&m, &m).unwrap();
    }

    #[test]
    fn inconsistent_count_is_rejected() {
        let text = format!("{}\n{}\n", line("p1", "A", 18), line("p2", "A", 17));
        let err = parse_manifest(&text, ".").unwrap_err();
        assert!(err.to_string().contains("inconsistent landmark count"), "{err}");
    }

    #[test]
    fn empty_manifest_is_rejected() {
        assert!(matches!(parse_manifest("", "."), Err(Error::EmptyManifest)));
        assert!(matches!(parse_manifest("\n\n", "."), Err(Error::EmptyManifest)));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = format!("{}\n{{not json\n", line("p1", "A", 3));
        match parse_manifest(&text, ".") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let text = format!("{}\n{}\n", line("p1", "A", 3), line("p1", "A", 3));
        assert!(matches!(parse_manifest(&text, "."), Err(Error::DuplicateId { .. })));
    }

    #[test]
    fn bad_visibility_and_out_of_bounds() {
        let bad_v = r#"{"id":"p","modality":"A","view":"side","landmarks":[[1,1,2]]}"#;
        assert!(matches!(parse_manifest(bad_v, "."), Err(Error::Parse { .. })));
        let oob = r#"{"id":"p","modality":"A","view":"side","landmarks":[[100,1,1]],"width":10,"height":10}"#;
        assert!(matches!(parse_manifest(oob, "."), Err(Error::InvalidLandmark(_))));
        // invisible landmarks may sit anywhere non-negative
        let hidden = r#"{"id":"p","modality":"A","view":"side","landmarks":[[100,1,0]],"width":10,"height":10}"#;
        assert!(parse_manifest(hidden, ".").is_ok());
    }

    #[test]
    fn unpaired_identity_is_reported() {
        let a = parse_manifest(&line("p1", "A", 3), ".").unwrap();
        let b = parse_manifest(&line("p2", "B", 3), ".").unwrap();
        assert!(matches!(check_paired(&a, &b), Err(Error::Unpaired { .. })));
    }

    #[test]
    fn round_trip_preserves_fields() {
        let text = format!(
            "{}\n{}\n",
            line("p1", "A", 4),
            r#"{"id":"p1","modality":"B","view":"front","landmarks":[[0.5,0.25,0],[1,2,1],[3,4,1],[5.125,6,1]],"patch_features_ref":"f/p1.cfv","global_feature_ref":"g/p1.cfv","split":"val"}"#
        );
        let m = parse_manifest(&text, ".").unwrap();
        assert_eq!(m.split, Split::Val);
        let again = parse_manifest(&m.to_lines(), ".").unwrap();
        assert_eq!(m, again);
    }
}
