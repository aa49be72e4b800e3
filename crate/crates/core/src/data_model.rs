//! Label taxonomy, dataset manifest schema and validation rules.
//!
//! A manifest is UTF-8 JSON lines: the first line is a header object
//! `{"version": 1, "classes": [...]}`, every following line one image record
//! `{"image_id", "path", "class", "view", "specimen_id", "split"}` with
//! `split` optional (defaults to `"unassigned"`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Current manifest format version.
pub const MANIFEST_VERSION: u64 = 1;

/// The six-class reference taxonomy, in stable code order 0..5.
pub const REFERENCE_CLASSES: [&str; 6] = ["WW", "WD", "AU", "STR", "BRU", "CYS"];

/// A stone class label. The shipped reference set is the six-class taxonomy,
/// but any label declared in a manifest's class set is accepted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StoneClass(pub String);

impl StoneClass {
    pub fn new(label: impl Into<String>) -> Self {
        StoneClass(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StoneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StoneClass {
    fn from(s: &str) -> Self {
        StoneClass(s.to_string())
    }
}

/// An ordered class set. The position of a label is its stable integer code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassSet(Vec<StoneClass>);

impl ClassSet {
    pub fn new(labels: Vec<StoneClass>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("class set must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if !seen.insert(label.clone()) {
                return Err(Error::Config(format!(
                    "duplicate class label {:?} in class set",
                    label.as_str()
                )));
            }
        }
        Ok(ClassSet(labels))
    }

    /// The six-class reference set with codes 0..5.
    pub fn reference() -> Self {
        ClassSet(REFERENCE_CLASSES.iter().map(|s| StoneClass::from(*s)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[StoneClass] {
        &self.0
    }

    /// Stable integer code of a label, if it belongs to the set.
    pub fn code_of(&self, class: &StoneClass) -> Option<usize> {
        self.0.iter().position(|c| c == class)
    }

    pub fn contains(&self, class: &StoneClass) -> bool {
        self.code_of(class).is_some()
    }
}

/// Which of the two views an image or patch shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Surface,
    Section,
}

impl ViewKind {
    pub const ALL: [ViewKind; 2] = [ViewKind::Surface, ViewKind::Section];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewKind::Surface => "surface",
            ViewKind::Section => "section",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Split assignment of an image or patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One source image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    #[serde(rename = "class")]
    pub stone_class: StoneClass,
    pub view: ViewKind,
    pub specimen_id: String,
    #[serde(default)]
    pub split: Split,
}

/// A parsed dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u64,
    pub class_set: ClassSet,
    pub records: Vec<ImageRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    version: u64,
    classes: Vec<StoneClass>,
}

impl DatasetManifest {
    pub fn new(class_set: ClassSet, records: Vec<ImageRecord>) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            class_set,
            records,
        }
    }
}

/// A single invariant violation found by [`validate_manifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Image id the violation concerns, when one applies.
    pub image_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.image_id {
            Some(id) => write!(f, "[{id}] {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Parses a JSON-lines manifest. Syntax only; use [`validate_manifest`] for
/// invariant checks.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header: ManifestHeader = match lines.next() {
        None => {
            // Empty file: a valid manifest with no records and the reference classes.
            return Ok(DatasetManifest::new(ClassSet::reference(), Vec::new()));
        }
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                message: format!("bad header: {e}"),
            })?
        }
    };
    if header.version != MANIFEST_VERSION {
        return Err(Error::ManifestVersion {
            found: header.version,
            supported: MANIFEST_VERSION,
        });
    }
    let class_set = ClassSet::new(header.classes).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(DatasetManifest {
        version: header.version,
        class_set,
        records,
    })
}

/// Writes a manifest in the JSON-lines format read by [`load_manifest`].
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = Vec::new();
    let header = ManifestHeader {
        version: manifest.version,
        classes: manifest.class_set.labels().to_vec(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for record in &manifest.records {
        serde_json::to_writer(&mut out, record)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns every invariant violation in `manifest`; empty means valid.
/// With `check_files`, unreadable image paths are reported too.
pub fn validate_manifest(manifest: &DatasetManifest, check_files: bool) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    for record in &manifest.records {
        if !seen.insert(record.image_id.clone()) {
            violations.push(Violation {
                image_id: Some(record.image_id.clone()),
                message: format!("duplicate image_id {:?}", record.image_id),
            });
        }
        if !manifest.class_set.contains(&record.stone_class) {
            violations.push(Violation {
                image_id: Some(record.image_id.clone()),
                message: format!(
                    "class {:?} is not in the manifest class set",
                    record.stone_class.as_str()
                ),
            });
        }
        if record.specimen_id.is_empty() {
            violations.push(Violation {
                image_id: Some(record.image_id.clone()),
                message: "specimen_id is empty".into(),
            });
        }
        if check_files && !record.path.is_file() {
            violations.push(Violation {
                image_id: Some(record.image_id.clone()),
                message: format!("image file {} is not readable", record.path.display()),
            });
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    const HEADER: &str = r#"{"version":1,"classes":["WW","WD","AU","STR","BRU","CYS"]}"#;

    #[test]
    fn parses_two_well_formed_lines() {
        let f = write_lines(&[
            HEADER,
            r#"{"image_id":"k001","path":"a.png","class":"WW","view":"surface","specimen_id":"s1"}"#,
            r#"{"image_id":"k002","path":"b.png","class":"WD","view":"section","specimen_id":"s1","split":"train"}"#,
        ]);
        let m = load_manifest(f.path()).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].split, Split::Unassigned);
        assert_eq!(m.records[1].split, Split::Train);
        assert_eq!(m.class_set.code_of(&StoneClass::from("CYS")), Some(5));
    }

    #[test]
    fn empty_file_is_a_valid_empty_manifest() {
        let f = write_lines(&[]);
        let m = load_manifest(f.path()).unwrap();
        assert!(m.records.is_empty());
        assert!(validate_manifest(&m, false).is_empty());
    }

    #[test]
    fn missing_view_field_names_line_and_field() {
        let f = write_lines(&[
            HEADER,
            r#"{"image_id":"k001","path":"a.png","class":"WW","specimen_id":"s1"}"#,
        ]);
        let err = load_manifest(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "message was: {msg}");
        assert!(msg.contains("view"), "message was: {msg}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let f = write_lines(&[r#"{"version":99,"classes":["WW"]}"#]);
        let err = load_manifest(f.path()).unwrap_err();
        assert!(matches!(err, Error::ManifestVersion { found: 99, .. }));
    }

    #[test]
    fn duplicate_image_id_is_a_violation_citing_the_id() {
        let record = ImageRecord {
            image_id: "k001".into(),
            path: "a.png".into(),
            stone_class: StoneClass::from("WW"),
            view: ViewKind::Surface,
            specimen_id: "s1".into(),
            split: Split::Unassigned,
        };
        let m = DatasetManifest::new(ClassSet::reference(), vec![record.clone(), record]);
        let violations = validate_manifest(&m, false);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].image_id.as_deref(), Some("k001"));
    }

    #[test]
    fn unknown_class_is_a_violation() {
        let record = ImageRecord {
            image_id: "k001".into(),
            path: "a.png".into(),
            stone_class: StoneClass::from("XYZ"),
            view: ViewKind::Surface,
            specimen_id: "s1".into(),
            split: Split::Unassigned,
        };
        let m = DatasetManifest::new(ClassSet::reference(), vec![record]);
        let violations = validate_manifest(&m, false);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].message.contains("XYZ"));
    }

    #[test]
    fn valid_six_class_manifest_has_no_violations() {
        let records: Vec<ImageRecord> = REFERENCE_CLASSES
            .iter()
            .enumerate()
            .map(|(i, c)| ImageRecord {
                image_id: format!("k{i:03}"),
                path: format!("{i}.png").into(),
                stone_class: StoneClass::from(*c),
                view: if i % 2 == 0 { ViewKind::Surface } else { ViewKind::Section },
                specimen_id: format!("s{i}"),
                split: Split::Unassigned,
            })
            .collect();
        let m = DatasetManifest::new(ClassSet::reference(), records);
        assert!(validate_manifest(&m, false).is_empty());
    }

    #[test]
    fn write_then_load_is_identity() {
        let records = vec![ImageRecord {
            image_id: "k001".into(),
            path: "imgs/a.png".into(),
            stone_class: StoneClass::from("BRU"),
            view: ViewKind::Section,
            specimen_id: "s9".into(),
            split: Split::Test,
        }];
        let m = DatasetManifest::new(ClassSet::reference(), records);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
        // write(load(p)) is byte-identical to the first write
        let path2 = dir.path().join("m2.jsonl");
        write_manifest(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
