//! Dataset manifest, omic table and label files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Task;
use super::featfile;
use crate::encoders::{OmicVector, PatchBag};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slide_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub features_path: String,
    pub omic_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_months: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub censor: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    pub omic_table: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.slide_id.as_str()) {
                return Err(Error::Data(format!("duplicate slide_id '{}'", e.slide_id)));
            }
            match self.task {
                Task::Subtype => {
                    let label = e
                        .label
                        .ok_or_else(|| Error::Data(format!("slide '{}' has no class label", e.slide_id)))?;
                    if let Some(names) = &self.class_names {
                        if label >= names.len() {
                            return Err(Error::Data(format!(
                                "slide '{}' label {label} outside {} classes",
                                e.slide_id,
                                names.len()
                            )));
                        }
                    }
                }
                Task::Survival => {
                    let t = e
                        .time_months
                        .ok_or_else(|| Error::Data(format!("slide '{}' has no survival time", e.slide_id)))?;
                    if !(t > 0.0) || !t.is_finite() {
                        return Err(Error::Data(format!("slide '{}' has invalid time {t}", e.slide_id)));
                    }
                    match e.censor {
                        Some(0) | Some(1) => {}
                        other => {
                            return Err(Error::Data(format!(
                                "slide '{}' censor flag must be 0 or 1, got {other:?}",
                                e.slide_id
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads an omic table: header row, first column sample id, remaining columns
/// float features.
pub fn read_omic_table(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let width = reader.headers().map_err(csv_err)?.len();
    if width < 2 {
        return Err(Error::Data(format!("{}: omic table has no feature columns", path.display())));
    }
    let mut table = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let id = record[0].to_string();
        let values = record
            .iter()
            .skip(1)
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("{}: row {} has non-numeric value '{s}'", path.display(), line + 2))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: sample '{id}' has non-finite values", path.display())));
        }
        if table.insert(id.clone(), values).is_some() {
            return Err(Error::Data(format!("{}: duplicate sample id '{id}'", path.display())));
        }
    }
    Ok(table)
}

pub fn write_omic_table(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let width = rows.first().map_or(0, |r| r.1.len());
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (id, values) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `slide_id,label` or `slide_id,time_months,censor` rows.
pub fn write_labels(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    match manifest.task {
        Task::Subtype => {
            w.write_record(["slide_id", "label"]).map_err(csv_err)?;
            for e in &manifest.entries {
                let label = e.label.map(|l| l.to_string()).unwrap_or_default();
                w.write_record([e.slide_id.as_str(), &label]).map_err(csv_err)?;
            }
        }
        Task::Survival => {
            w.write_record(["slide_id", "time_months", "censor"]).map_err(csv_err)?;
            for e in &manifest.entries {
                let t = e.time_months.map(|t| t.to_string()).unwrap_or_default();
                let c = e.censor.map(|c| c.to_string()).unwrap_or_default();
                w.write_record([e.slide_id.as_str(), &t, &c]).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Survival { time: f64, censored: bool },
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Survival { .. } => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub slide_id: String,
    pub omic: OmicVector,
    pub bag: PatchBag,
    pub label: Label,
}

/// A fully loaded dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub task: Task,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub root: PathBuf,
}

impl Dataset {
    /// Loads `manifest.json` and everything it references from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
        Dataset::from_manifest(&manifest, dir)
    }

    pub fn from_manifest(manifest: &DatasetManifest, root: &Path) -> Result<Self> {
        manifest.validate()?;
        let omics = read_omic_table(&root.join(&manifest.omic_table))?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        let mut width = None;
        for e in &manifest.entries {
            let values = omics
                .get(&e.omic_id)
                .ok_or_else(|| Error::Data(format!("omic id '{}' missing from omic table", e.omic_id)))?;
            match width {
                None => width = Some(values.len()),
                Some(w) if w != values.len() => {
                    return Err(Error::Data(format!("omic rows differ in width ({w} vs {})", values.len())))
                }
                _ => {}
            }
            let path = root.join(&e.features_path);
            let bag = featfile::load_bag(&path, &e.slide_id)?;
            let label = match manifest.task {
                Task::Subtype => Label::Class(e.label.expect("validated")),
                Task::Survival => Label::Survival {
                    time: e.time_months.expect("validated"),
                    censored: e.censor == Some(1),
                },
            };
            samples.push(Sample {
                slide_id: e.slide_id.clone(),
                omic: OmicVector {
                    patient_id: e.omic_id.clone(),
                    values: values.clone(),
                },
                bag,
                label,
            });
        }
        if let Some(first) = samples.first() {
            let d = first.bag.dim();
            if let Some(s) = samples.iter().find(|s| s.bag.dim() != d) {
                return Err(Error::Data(format!(
                    "slide '{}' has {}-dim patches, expected {d}",
                    s.slide_id,
                    s.bag.dim()
                )));
            }
        }
        let class_names = match (&manifest.class_names, manifest.task) {
            (Some(names), _) => names.clone(),
            (None, Task::Subtype) => {
                let max = samples.iter().filter_map(|s| s.label.class()).max().unwrap_or(0);
                (0..=max).map(|c| format!("class_{c}")).collect()
            }
            (None, Task::Survival) => Vec::new(),
        };
        Ok(Dataset {
            task: manifest.task,
            class_names,
            samples,
            root: root.to_path_buf(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn omic_features(&self) -> usize {
        self.samples.first().map_or(0, |s| s.omic.values.len())
    }

    pub fn patch_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.bag.dim())
    }

    pub fn find(&self, slide_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.slide_id == slide_id)
    }
}
