use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::NUM_GRADES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Val];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" | "valid" | "validation" => Ok(Split::Val),
            other => Err(Error::input(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    pub fn as_str(self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
        }
    }
}

impl FromStr for Laterality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Laterality::Left),
            "right" | "r" => Ok(Laterality::Right),
            other => Err(Error::input(format!("unknown laterality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradeRecord {
    pub path: PathBuf,
    pub grade: usize,
    pub split: Option<Split>,
    pub patient_id: Option<String>,
    pub laterality: Option<Laterality>,
}

impl GradeRecord {
    pub fn new(path: impl Into<PathBuf>, grade: usize) -> Self {
        Self {
            path: path.into(),
            grade,
            split: None,
            patient_id: None,
            laterality: None,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }
}

/// Per split, per grade record counts.
pub type SplitCounts = [[usize; NUM_GRADES]; 3];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    records: Vec<GradeRecord>,
    /// Directory relative image paths are resolved against.
    root: PathBuf,
}

impl DatasetManifest {
    /// Validates grades, non-empty paths and path uniqueness.
    pub fn new(records: Vec<GradeRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.path.as_os_str().is_empty() {
                return Err(Error::input("record with an empty path"));
            }
            if r.grade >= NUM_GRADES {
                return Err(Error::input(format!(
                    "{}: grade {} out of range 0..{}",
                    r.path.display(),
                    r.grade,
                    NUM_GRADES - 1
                )));
            }
            if !seen.insert(&r.path) {
                return Err(Error::input(format!("duplicate path {}", r.path.display())));
            }
        }
        Ok(Self {
            records,
            root: PathBuf::new(),
        })
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[GradeRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<GradeRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<&GradeRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    pub fn resolve(&self, record: &GradeRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn counts(&self) -> SplitCounts {
        let mut c = [[0; NUM_GRADES]; 3];
        for r in &self.records {
            if let Some(s) = r.split {
                c[s.index()][r.grade] += 1;
            }
        }
        c
    }

    pub fn grade_totals(&self) -> [usize; NUM_GRADES] {
        let mut t = [0; NUM_GRADES];
        for r in &self.records {
            t[r.grade] += 1;
        }
        t
    }

    pub fn split_totals(&self) -> [usize; 3] {
        self.counts().map(|row| row.iter().sum())
    }

    /// CSV text with a `path,kl_grade,split` header, plus `patient_id` and
    /// `laterality` columns when any record carries them.
    pub fn to_csv(&self) -> Result<String> {
        let with_patient = self.records.iter().any(|r| r.patient_id.is_some());
        let with_side = self.records.iter().any(|r| r.laterality.is_some());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["path", "kl_grade", "split"];
        if with_patient {
            header.push("patient_id");
        }
        if with_side {
            header.push("laterality");
        }
        let csv_err = |e: csv::Error| Error::input(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let path = r
                .path
                .to_str()
                .ok_or_else(|| Error::input(format!("non-UTF-8 path {}", r.path.display())))?;
            let grade = r.grade.to_string();
            let mut row = vec![path, grade.as_str(), r.split.map_or("", Split::as_str)];
            if with_patient {
                row.push(r.patient_id.as_deref().unwrap_or(""));
            }
            if with_side {
                row.push(r.laterality.map_or("", Laterality::as_str));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::input(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::input(format!("csv: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Parses manifest CSV text; `path` is only used in error messages.
pub fn parse_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.iter().all(str::is_empty) {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    let column = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let path_col = column("path").ok_or_else(|| parse_err(1, "missing `path` column".into()))?;
    let grade_col = column("kl_grade").ok_or_else(|| parse_err(1, "missing `kl_grade` column".into()))?;
    let split_col = column("split");
    let patient_col = column("patient_id");
    let side_col = column("laterality");

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |col: Option<usize>| col.and_then(|c| row.get(c)).filter(|s| !s.is_empty());
        let rel = field(Some(path_col)).ok_or_else(|| parse_err(line, "empty path".into()))?;
        let grade_text = field(Some(grade_col)).ok_or_else(|| parse_err(line, "empty kl_grade".into()))?;
        let grade: usize = grade_text
            .parse()
            .map_err(|_| parse_err(line, format!("kl_grade `{grade_text}` is not an integer")))?;
        if grade >= NUM_GRADES {
            return Err(parse_err(line, format!("kl_grade {grade} out of range 0..{}", NUM_GRADES - 1)));
        }
        let split = field(split_col)
            .map(str::parse::<Split>)
            .transpose()
            .map_err(|e| parse_err(line, e.to_string()))?;
        let laterality = field(side_col)
            .map(str::parse::<Laterality>)
            .transpose()
            .map_err(|e| parse_err(line, e.to_string()))?;
        if !seen.insert(rel.to_owned()) {
            return Err(parse_err(line, format!("duplicate path `{rel}`")));
        }
        records.push(GradeRecord {
            path: PathBuf::from(rel),
            grade,
            split,
            patient_id: field(patient_col).map(str::to_owned),
            laterality,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    DatasetManifest::new(records)
}

/// Reads a manifest; relative image paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(parse_manifest(&text, path)?.with_root(root))
}
