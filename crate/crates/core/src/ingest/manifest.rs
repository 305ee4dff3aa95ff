//! Line-oriented dataset manifest.
//!
//! ```text
//! # comment
//! split train
//! <subject_id> <age_years> <path relative to the manifest>
//! ...
//! split test
//! ...
//! ```
//!
//! Scans of a subject are listed in increasing age and a subject belongs
//! to exactly one split.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::volume::{peek_dtype, Volume, Voxel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub age_years: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEntry {
    pub id: String,
    pub split: Split,
    pub scans: Vec<Scan>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    /// Appends a scan, creating the subject on first use.
    pub fn push(&mut self, id: &str, split: Split, age_years: f64, path: impl Into<PathBuf>) -> Result<()> {
        let scan = Scan {
            age_years,
            path: path.into(),
        };
        match self.subjects.iter_mut().find(|s| s.id == id) {
            Some(s) => {
                if s.split != split {
                    return Err(Error::Format(format!("subject {id} listed under both splits")));
                }
                if let Some(last) = s.scans.last() {
                    if !(age_years > last.age_years) {
                        return Err(Error::Format(format!(
                            "ages of subject {id} not strictly increasing ({} then {age_years})",
                            last.age_years
                        )));
                    }
                }
                s.scans.push(scan);
            }
            None => self.subjects.push(SubjectEntry {
                id: id.to_string(),
                split,
                scans: vec![scan],
            }),
        }
        Ok(())
    }

    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn num_scans(&self) -> usize {
        self.subjects.iter().map(|s| s.scans.len()).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# voxflow dataset manifest v1\n");
        for split in [Split::Train, Split::Test] {
            let mut any = false;
            for s in self.subjects_in(split) {
                if !any {
                    let _ = writeln!(out, "split {}", split.as_str());
                    any = true;
                }
                for scan in &s.scans {
                    let _ = writeln!(out, "{} {} {}", s.id, scan.age_years, scan.path.display());
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = DatasetManifest::default();
        let mut split = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}: {line:?}", lineno + 1));
            match fields[..] {
                ["split", "train"] => split = Some(Split::Train),
                ["split", "test"] => split = Some(Split::Test),
                ["split", _] => return Err(bad("unknown split")),
                [id, age, path] => {
                    let split = split.ok_or_else(|| bad("entry before any split header"))?;
                    let age: f64 = age.parse().map_err(|_| bad("invalid age"))?;
                    m.push(id, split, age, path).map_err(|e| bad(&e.to_string()))?;
                }
                _ => return Err(bad("expected 'subject_id age_years path'")),
            }
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Checks that every referenced file exists and all volumes of type `V`
    /// share one shape.
    pub fn validate_files<V: Voxel>(&self, base: &Path) -> Result<()> {
        let mut dims: HashMap<[usize; 3], String> = HashMap::new();
        for s in &self.subjects {
            for scan in &s.scans {
                let p = base.join(&scan.path);
                let bytes = std::fs::read(&p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
                if peek_dtype(&bytes)? != V::CODE {
                    return Err(Error::Format(format!("{} has an unexpected voxel type", p.display())));
                }
                let v = Volume::<V>::from_bytes(&bytes)?;
                dims.insert(v.dims(), p.display().to_string());
                if dims.len() > 1 {
                    return Err(Error::Format(format!("volumes differ in shape: {dims:?}")));
                }
            }
        }
        Ok(())
    }
}
