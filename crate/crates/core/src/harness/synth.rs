//! Planted-signal synthetic datasets.
//!
//! Class `y` combines an omic group `y mod G_o` and a patch group `y div G_o`.
//! Omic vectors carry the omic-group prototype; a fraction of each slide's
//! patches carry the patch-group prototype and the rest are pure noise. Each
//! modality alone therefore pins down only one factor of the class.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Task;
use super::dataset::{write_labels, write_omic_table, DatasetManifest, ManifestEntry, MANIFEST_FILE};
use super::featfile;
use crate::encoders::PatchBag;
use crate::error::{Error, Result};
use crate::numeric::{SeededRng, Tensor};

pub const OMIC_FILE: &str = "omics.csv";
pub const LABEL_FILE: &str = "labels.csv";
pub const SIGNAL_FILE: &str = "signal_patches.csv";
pub const TILE_SIZE: i32 = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub task: Task,
    pub classes: usize,
    pub omic_groups: usize,
    pub patch_groups: usize,
    pub slides: usize,
    pub omic_features: usize,
    pub patch_dim: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    pub signal_fraction: f64,
    /// Standard deviation of the Gaussian noise on every value.
    pub noise: f64,
    /// Standard deviation of the prototype entries.
    pub prototype_scale: f64,
    pub censor_rate: f64,
    /// Event rate per month of class 0; class `y` uses `(y + 1)` times this.
    pub base_hazard: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: Task::Subtype,
            classes: 4,
            omic_groups: 2,
            patch_groups: 2,
            slides: 200,
            omic_features: 64,
            patch_dim: 32,
            min_patches: 50,
            max_patches: 200,
            signal_fraction: 0.1,
            noise: 1.0,
            prototype_scale: 1.0,
            censor_rate: 0.3,
            base_hazard: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes != self.omic_groups * self.patch_groups {
            return Err(Error::Parameter(format!(
                "{} classes cannot be split into {} omic × {} patch groups",
                self.classes, self.omic_groups, self.patch_groups
            )));
        }
        if self.classes == 0 || self.slides == 0 || self.omic_features == 0 || self.patch_dim == 0 {
            return Err(Error::Parameter("classes, slides and widths must be positive".into()));
        }
        if self.min_patches == 0 || self.min_patches > self.max_patches {
            return Err(Error::Parameter(format!(
                "invalid patch range [{}, {}]",
                self.min_patches, self.max_patches
            )));
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) || !(0.0..1.0).contains(&self.censor_rate) {
            return Err(Error::Parameter("signal fraction and censor rate must be probabilities".into()));
        }
        if !(self.noise >= 0.0) || !(self.base_hazard > 0.0) {
            return Err(Error::Parameter("noise must be non-negative and hazard positive".into()));
        }
        Ok(())
    }

    /// `(omic group, patch group)` of class `y`.
    pub fn groups(&self, y: usize) -> (usize, usize) {
        (y % self.omic_groups, y / self.omic_groups)
    }
}

/// In-memory result of [`generate`].
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub manifest: DatasetManifest,
    pub omics: Vec<(String, Vec<f64>)>,
    pub bags: Vec<PatchBag>,
    pub classes: Vec<usize>,
    /// Ground-truth signal patch indices per slide, ascending.
    pub signal: BTreeMap<String, Vec<usize>>,
}

fn gaussian_vec(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn grid_coords(n: usize) -> Vec<(i32, i32)> {
    let cols = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|i| ((i % cols) as i32 * TILE_SIZE, (i / cols) as i32 * TILE_SIZE))
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let mut proto_rng = root.split(0);
    let omic_protos: Vec<Vec<f64>> = (0..spec.omic_groups)
        .map(|_| gaussian_vec(&mut proto_rng, spec.omic_features, spec.prototype_scale))
        .collect();
    let patch_protos: Vec<Vec<f64>> = (0..spec.patch_groups)
        .map(|_| gaussian_vec(&mut proto_rng, spec.patch_dim, spec.prototype_scale))
        .collect();

    let mut rng = root.split(1);
    let mut entries = Vec::with_capacity(spec.slides);
    let mut omics = Vec::with_capacity(spec.slides);
    let mut bags = Vec::with_capacity(spec.slides);
    let mut classes = Vec::with_capacity(spec.slides);
    let mut signal = BTreeMap::new();
    for i in 0..spec.slides {
        let y = i % spec.classes;
        let (og, pg) = spec.groups(y);
        let slide_id = format!("slide_{i:04}");
        let patient_id = format!("patient_{i:04}");

        let omic: Vec<f64> = omic_protos[og].iter().map(|p| p + spec.noise * rng.normal()).collect();

        let n = rng.int_inclusive(spec.min_patches, spec.max_patches);
        let n_signal = ((spec.signal_fraction * n as f64).round() as usize).clamp(usize::from(spec.signal_fraction > 0.0), n);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut planted = order[..n_signal].to_vec();
        planted.sort_unstable();
        let mut is_signal = vec![false; n];
        planted.iter().for_each(|&j| is_signal[j] = true);
        let mut data = Vec::with_capacity(n * spec.patch_dim);
        for &s in &is_signal {
            for &proto in &patch_protos[pg] {
                let base = if s { proto } else { 0.0 };
                data.push(base + spec.noise * rng.normal());
            }
        }
        let bag = PatchBag::new(
            slide_id.clone(),
            Tensor::matrix(n, spec.patch_dim, data)?,
            Some(grid_coords(n)),
        )?;

        let (label, time_months, censor) = match spec.task {
            Task::Subtype => (Some(y), None, None),
            Task::Survival => {
                let rate = spec.base_hazard * (y + 1) as f64;
                let event = -(1.0 - rng.uniform()).ln() / rate;
                let censored = rng.bernoulli(spec.censor_rate);
                let t = if censored { event * rng.uniform() } else { event };
                (None, Some(t.max(1e-3)), Some(u8::from(censored)))
            }
        };
        entries.push(ManifestEntry {
            slide_id: slide_id.clone(),
            features_path: format!("features/{slide_id}.feat"),
            omic_id: patient_id.clone(),
            label,
            time_months,
            censor,
        });
        omics.push((patient_id, omic));
        bags.push(bag);
        classes.push(y);
        signal.insert(slide_id, planted);
    }
    let class_names = match spec.task {
        Task::Subtype => Some((0..spec.classes).map(|c| format!("class_{c}")).collect()),
        Task::Survival => None,
    };
    Ok(SyntheticData {
        manifest: DatasetManifest {
            task: spec.task,
            class_names,
            omic_table: OMIC_FILE.into(),
            entries,
        },
        omics,
        bags,
        classes,
        signal,
    })
}

/// Generates a dataset and writes it under `dir`.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<SyntheticData> {
    let data = generate(spec)?;
    let features = dir.join("features");
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    for (entry, bag) in data.manifest.entries.iter().zip(&data.bags) {
        featfile::save_bag(&dir.join(&entry.features_path), bag)?;
    }
    write_omic_table(&dir.join(OMIC_FILE), &data.omics)?;
    write_labels(&dir.join(LABEL_FILE), &data.manifest)?;
    data.manifest.save(&dir.join(MANIFEST_FILE))?;
    write_signal(&dir.join(SIGNAL_FILE), &data.signal)?;
    Ok(data)
}

fn write_signal(path: &Path, signal: &BTreeMap<String, Vec<usize>>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["slide_id", "patch_index"]).map_err(csv_err)?;
    for (slide, idx) in signal {
        for i in idx {
            w.write_record([slide.as_str(), &i.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `signal_patches.csv` back into per-slide index lists.
pub fn read_signal(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let idx = record[1]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad patch index '{}'", path.display(), &record[1])))?;
        out.entry(record[0].to_string()).or_default().push(idx);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            slides: 8,
            min_patches: 10,
            max_patches: 20,
            omic_features: 6,
            patch_dim: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn class_to_group_mapping() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.groups(3), (1, 1));
        assert_eq!(spec.groups(2), (0, 1));
        assert_eq!(spec.groups(1), (1, 0));
    }

    #[test]
    fn unfactorable_classes_rejected() {
        let spec = SyntheticSpec {
            classes: 5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn planted_patches_match_fraction() {
        let data = generate(&small()).unwrap();
        for bag in &data.bags {
            let n = bag.len();
            let k = data.signal[&bag.slide_id].len();
            assert_eq!(k, ((0.1 * n as f64).round() as usize).max(1));
        }
        assert_eq!(data.classes, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn same_seed_writes_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synthetic(&small(), a.path()).unwrap();
        write_synthetic(&small(), b.path()).unwrap();
        for file in [MANIFEST_FILE, OMIC_FILE, LABEL_FILE, SIGNAL_FILE, "features/slide_0003.feat"] {
            assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
        }
        let signal = read_signal(&a.path().join(SIGNAL_FILE)).unwrap();
        assert_eq!(signal, generate(&small()).unwrap().signal);
    }

    #[test]
    fn survival_variant_loads() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            task: Task::Survival,
            slides: 40,
            ..small()
        };
        write_synthetic(&spec, dir.path()).unwrap();
        let ds = super::super::dataset::Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.len(), 40);
        let censored = ds
            .samples
            .iter()
            .filter(|s| matches!(s.label, super::super::dataset::Label::Survival { censored: true, .. }))
            .count();
        assert!(censored > 0 && censored < 40);
    }
}
