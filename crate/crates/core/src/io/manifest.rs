//! Dataset manifest: a JSON document naming the classes, the prototype
//! file, optional prompt groups, and the per-sample view files. Relative
//! paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::ViewBatch;
use crate::error::{Result, TpsError};
use crate::io::tpse::read_tpse;
use crate::prototypes::{load_prototypes, PromptGroup, PrototypeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGroupEntry {
    pub name: String,
    /// One TPSE file per class, in `class_names` order.
    pub class_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub views_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub prototype_file: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_groups: Vec<PromptGroupEntry>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| TpsError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| TpsError::io(path, e))
    }

    fn validate(&self, base: &Path, check_prototype_file: bool) -> Result<()> {
        let c = self.class_names.len();
        for s in &self.samples {
            if let Some(y) = s.label {
                if y >= c {
                    return Err(TpsError::Manifest(format!(
                        "sample '{}' has label {y} but only {c} classes",
                        s.sample_id
                    )));
                }
            }
        }
        for g in &self.prompt_groups {
            if g.class_files.len() != c {
                return Err(TpsError::Manifest(format!(
                    "prompt group '{}' lists {} files for {c} classes",
                    g.name,
                    g.class_files.len()
                )));
            }
        }
        let mut files: Vec<&str> = self.samples.iter().map(|s| s.views_file.as_str()).collect();
        files.extend(self.prompt_groups.iter().flat_map(|g| g.class_files.iter().map(String::as_str)));
        if check_prototype_file {
            files.push(&self.prototype_file);
        }
        for f in files {
            let p = base.join(f);
            if !p.is_file() {
                return Err(TpsError::Manifest(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// A parsed manifest together with the directory its paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base: PathBuf,
}

impl LoadedManifest {
    /// Parses and validates a manifest. The prototype file only has to exist
    /// when `require_prototypes` is set (e.g. not before `pool` writes it).
    pub fn load(path: &Path, require_prototypes: bool) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TpsError::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| TpsError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(&base, require_prototypes)?;
        Ok(LoadedManifest { manifest, base })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn prototype_path(&self) -> PathBuf {
        self.resolve(&self.manifest.prototype_file)
    }

    pub fn load_prototypes(&self, override_path: Option<&Path>) -> Result<PrototypeSet> {
        let path = override_path.map(Path::to_path_buf).unwrap_or_else(|| self.prototype_path());
        load_prototypes(&path, Some(&self.manifest.class_names))
    }

    pub fn load_prompt_groups(&self) -> Result<Vec<PromptGroup>> {
        self.manifest
            .prompt_groups
            .iter()
            .map(|g| {
                let mats = g
                    .class_files
                    .iter()
                    .map(|f| read_tpse(&self.resolve(f)))
                    .collect::<Result<Vec<_>>>()?;
                PromptGroup::new(g.name.clone(), self.manifest.class_names.clone(), mats)
            })
            .collect()
    }

    /// Lazily reads and normalizes each sample's views.
    pub fn batches(&self) -> impl Iterator<Item = Result<ViewBatch>> + '_ {
        self.manifest.samples.iter().map(move |s| {
            let path = self.resolve(&s.views_file);
            let views = read_tpse(&path)?;
            if views.rows() == 0 {
                return Err(TpsError::Format {
                    path,
                    offset: 8,
                    msg: "views file has no rows".into(),
                });
            }
            ViewBatch::new(s.sample_id.clone(), views, s.label)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::tpse::write_tpse;
    use crate::numkernel::Mat;

    fn write_min(dir: &Path, label: Option<usize>) -> PathBuf {
        write_tpse(&Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(), &dir.join("p.tpse")).unwrap();
        write_tpse(&Mat::from_rows(&[[3.0, 4.0]]).unwrap(), &dir.join("v.tpse")).unwrap();
        let m = Manifest {
            class_names: vec!["a".into(), "b".into()],
            prototype_file: "p.tpse".into(),
            prompt_groups: vec![],
            samples: vec![SampleEntry {
                sample_id: "x".into(),
                views_file: "v.tpse".into(),
                label,
            }],
        };
        let path = dir.join("m.json");
        m.save(&path).unwrap();
        path
    }

    #[test]
    fn loads_and_normalizes_views() {
        let dir = tempfile::tempdir().unwrap();
        let lm = LoadedManifest::load(&write_min(dir.path(), Some(1)), true).unwrap();
        let protos = lm.load_prototypes(None).unwrap();
        assert_eq!(protos.class_names(), &["a", "b"]);
        let b: Vec<_> = lm.batches().collect::<Result<_>>().unwrap();
        assert!((b[0].views.row(0)[0] - 0.6).abs() < 1e-7);
        assert_eq!(b[0].label, Some(1));
    }

    #[test]
    fn rejects_out_of_range_label_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_min(dir.path(), Some(2));
        assert!(matches!(LoadedManifest::load(&path, true), Err(TpsError::Manifest(_))));
        let path = write_min(dir.path(), None);
        fs::remove_file(dir.path().join("v.tpse")).unwrap();
        assert!(matches!(LoadedManifest::load(&path, true), Err(TpsError::Manifest(_))));
    }
}
