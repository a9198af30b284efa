//! Cohort manifest: one CSV row per subject.
//!
//! Required columns: `subject_id`, `station2`, `station3`. Optional columns:
//! `mask2`, `mask3` (external masks for the trimmed stations) and reference
//! measurements `ref_vol_left_cm3`, `ref_vol_right_cm3`, `ref_vol_total_cm3`,
//! `ref_distance_mm`. Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub station2: PathBuf,
    pub station3: PathBuf,
    #[serde(default)]
    pub mask2: Option<PathBuf>,
    #[serde(default)]
    pub mask3: Option<PathBuf>,
    #[serde(default)]
    pub ref_vol_left_cm3: Option<f64>,
    #[serde(default)]
    pub ref_vol_right_cm3: Option<f64>,
    #[serde(default)]
    pub ref_vol_total_cm3: Option<f64>,
    #[serde(default)]
    pub ref_distance_mm: Option<f64>,
}

impl ManifestRow {
    pub fn new(subject_id: impl Into<String>, station2: PathBuf, station3: PathBuf) -> Self {
        Self {
            subject_id: subject_id.into(),
            station2,
            station3,
            mask2: None,
            mask3: None,
            ref_vol_left_cm3: None,
            ref_vol_right_cm3: None,
            ref_vol_total_cm3: None,
            ref_distance_mm: None,
        }
    }

    fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        [&self.station2, &self.station3]
            .into_iter()
            .chain(self.mask2.iter())
            .chain(self.mask3.iter())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.station2);
        fix(&mut self.station3);
        self.mask2.iter_mut().for_each(fix);
        self.mask3.iter_mut().for_each(fix);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Rows with unique subject ids.
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for row in &rows {
            if row.subject_id.is_empty() {
                return Err(Error::Manifest("empty subject_id".into()));
            }
            if !seen.insert(row.subject_id.as_str()) {
                return Err(Error::DuplicateSubject(row.subject_id.clone()));
            }
        }
        Ok(Self { rows })
    }

    /// Read a manifest and check that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut rows = Vec::new();
        for record in reader.deserialize() {
            let mut row: ManifestRow = record.map_err(|e| Error::Manifest(e.to_string()))?;
            row.resolve(base);
            rows.push(row);
        }
        let manifest = Self::new(rows)?;
        manifest.check_files()?;
        Ok(manifest)
    }

    /// Fail on the first referenced file that does not exist.
    pub fn check_files(&self) -> Result<()> {
        for row in &self.rows {
            if let Some(p) = row.paths().find(|p| !p.exists()) {
                return Err(Error::Manifest(format!(
                    "subject {}: missing file {}",
                    row.subject_id,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
