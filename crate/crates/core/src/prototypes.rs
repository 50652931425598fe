//! Class prototypes: pooling groups of prompt embeddings into one
//! unit-norm vector per class, and caching the result on disk.
//!
//! Every raw embedding is L2-normalized before it is averaged, and every
//! mean is re-normalized. Micro pooling weights each prompt equally across
//! all groups; macro pooling first reduces each group to a normalized mean
//! and then weights groups equally.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TpsError};
use crate::io::tpse;
use crate::numkernel::{norm, normalize_in_place, with_row, Mat};

static CONSTRUCTIONS: AtomicUsize = AtomicUsize::new(0);

/// Maximum deviation from unit norm tolerated when loading a cached file.
pub const LOAD_NORM_TOLERANCE: f64 = 1e-3;

/// Embeddings of one prompt source (templates, descriptors, learned
/// prompts, ...), grouped per class.
#[derive(Debug, Clone)]
pub struct PromptGroup {
    pub name: String,
    pub class_names: Vec<String>,
    /// One matrix per class; each row is one prompt embedding.
    pub embeddings: Vec<Mat>,
}

impl PromptGroup {
    pub fn new(name: impl Into<String>, class_names: Vec<String>, embeddings: Vec<Mat>) -> Result<Self> {
        let group = PromptGroup {
            name: name.into(),
            class_names,
            embeddings,
        };
        group.validate()?;
        Ok(group)
    }

    fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.embeddings.len() {
            return Err(TpsError::ClassMismatch(format!(
                "group '{}' names {} classes but has embeddings for {}",
                self.name,
                self.class_names.len(),
                self.embeddings.len()
            )));
        }
        let Some(first) = self.embeddings.first() else {
            return Err(TpsError::EmptyInput("prompt group without classes"));
        };
        let dim = first.cols();
        for (name, e) in self.class_names.iter().zip(&self.embeddings) {
            if e.rows() == 0 {
                return Err(TpsError::ClassMismatch(format!(
                    "group '{}' has no embeddings for class '{name}'",
                    self.name
                )));
            }
            if e.cols() != dim {
                return Err(TpsError::DimMismatch {
                    expected: dim,
                    got: e.cols(),
                });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Micro,
    Macro,
    /// Prototypes supplied directly (loaded or constructed), not pooled here.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub pooling: Pooling,
    pub groups: Vec<String>,
}

/// Unit-norm class prototypes, one row per class.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    class_names: Vec<String>,
    prototypes: Mat,
    provenance: Provenance,
}

impl PrototypeSet {
    /// Validates names, normalizes every row, and registers the construction.
    pub fn new(class_names: Vec<String>, prototypes: Mat, provenance: Provenance) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(TpsError::ClassMismatch(format!(
                "need at least 2 classes, got {}",
                class_names.len()
            )));
        }
        if class_names.len() != prototypes.rows() {
            return Err(TpsError::ClassMismatch(format!(
                "{} class names for {} prototype rows",
                class_names.len(),
                prototypes.rows()
            )));
        }
        let mut seen = HashSet::new();
        for n in &class_names {
            if !seen.insert(n.as_str()) {
                return Err(TpsError::ClassMismatch(format!("duplicate class name '{n}'")));
            }
        }
        let prototypes = prototypes.normalized_rows()?;
        CONSTRUCTIONS.fetch_add(1, Ordering::Relaxed);
        Ok(PrototypeSet {
            class_names,
            prototypes,
            provenance,
        })
    }

    /// Process-wide number of prototype sets built so far (pooled, loaded,
    /// or constructed directly).
    pub fn constructions() -> usize {
        CONSTRUCTIONS.load(Ordering::Relaxed)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn matrix(&self) -> &Mat {
        &self.prototypes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

fn check_groups(groups: &[PromptGroup]) -> Result<(&[String], usize)> {
    let Some(first) = groups.first() else {
        return Err(TpsError::EmptyInput("no prompt groups to pool"));
    };
    for g in groups {
        g.validate()?;
    }
    let dim = first.dim();
    for g in &groups[1..] {
        if g.class_names != first.class_names {
            return Err(TpsError::ClassMismatch(format!(
                "group '{}' classes differ from group '{}'",
                g.name, first.name
            )));
        }
        if g.dim() != dim {
            return Err(TpsError::DimMismatch {
                expected: dim,
                got: g.dim(),
            });
        }
    }
    Ok((&first.class_names, dim))
}

/// Adds the normalized rows of `e` into `acc`, returning how many were added.
fn accumulate_normalized(e: &Mat, acc: &mut [f64]) -> Result<usize> {
    let mut buf = vec![0.0; e.cols()];
    for (i, row) in e.iter_rows().enumerate() {
        buf.copy_from_slice(row);
        normalize_in_place(&mut buf).map_err(|err| with_row(err, i))?;
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    Ok(e.rows())
}

fn provenance(pooling: Pooling, groups: &[PromptGroup]) -> Provenance {
    Provenance {
        pooling,
        groups: groups.iter().map(|g| g.name.clone()).collect(),
    }
}

/// Mean over every prompt of every group, then re-normalized.
pub fn pool_micro(groups: &[PromptGroup]) -> Result<PrototypeSet> {
    let (names, dim) = check_groups(groups)?;
    let mut out = Mat::zeros(names.len(), dim);
    for c in 0..names.len() {
        let row = out.row_mut(c);
        let mut count = 0usize;
        for g in groups {
            count += accumulate_normalized(&g.embeddings[c], row)?;
        }
        for v in row.iter_mut() {
            *v /= count as f64;
        }
        normalize_in_place(row).map_err(|err| with_row(err, c))?;
    }
    PrototypeSet::new(names.to_vec(), out, provenance(Pooling::Micro, groups))
}

/// Per-group normalized means, averaged with equal group weight and
/// re-normalized.
pub fn pool_macro(groups: &[PromptGroup]) -> Result<PrototypeSet> {
    let (names, dim) = check_groups(groups)?;
    let mut out = Mat::zeros(names.len(), dim);
    let mut group_mean = vec![0.0; dim];
    for c in 0..names.len() {
        let row = out.row_mut(c);
        for g in groups {
            group_mean.fill(0.0);
            let count = accumulate_normalized(&g.embeddings[c], &mut group_mean)?;
            for v in group_mean.iter_mut() {
                *v /= count as f64;
            }
            normalize_in_place(&mut group_mean).map_err(|err| with_row(err, c))?;
            for (a, b) in row.iter_mut().zip(&group_mean) {
                *a += b;
            }
        }
        for v in row.iter_mut() {
            *v /= groups.len() as f64;
        }
        normalize_in_place(row).map_err(|err| with_row(err, c))?;
    }
    PrototypeSet::new(names.to_vec(), out, provenance(Pooling::Macro, groups))
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    class_names: Vec<String>,
    provenance: Provenance,
}

/// Path of the JSON sidecar that accompanies a prototype TPSE file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the prototype matrix as TPSE plus a `<path>.json` sidecar with
/// class names and provenance.
pub fn save_prototypes(set: &PrototypeSet, path: &Path) -> Result<()> {
    tpse::write_tpse(&set.prototypes, path)?;
    let side = sidecar_path(path);
    let doc = Sidecar {
        class_names: set.class_names.clone(),
        provenance: set.provenance.clone(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|source| TpsError::Json {
        path: side.clone(),
        source,
    })?;
    fs::write(&side, text + "\n").map_err(|e| TpsError::io(&side, e))
}

/// Loads a prototype file. Class names come from `class_names` when given,
/// otherwise from the sidecar; when both exist they must agree.
pub fn load_prototypes(path: &Path, class_names: Option<&[String]>) -> Result<PrototypeSet> {
    let mat = tpse::read_tpse(path)?;
    for (i, row) in mat.iter_rows().enumerate() {
        let n = norm(row);
        if (n - 1.0).abs() > LOAD_NORM_TOLERANCE {
            return Err(TpsError::Norm {
                path: path.to_path_buf(),
                row: i,
                norm: n,
            });
        }
    }
    let side = sidecar_path(path);
    let sidecar: Option<Sidecar> = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| TpsError::io(&side, e))?;
        Some(serde_json::from_str(&text).map_err(|source| TpsError::Json {
            path: side.clone(),
            source,
        })?)
    } else {
        None
    };
    let (names, prov) = match (class_names, sidecar) {
        (Some(given), Some(sc)) => {
            if sc.class_names != given {
                return Err(TpsError::ClassMismatch(format!(
                    "{} lists different class names than the manifest",
                    side.display()
                )));
            }
            (given.to_vec(), sc.provenance)
        }
        (Some(given), None) => (
            given.to_vec(),
            Provenance {
                pooling: Pooling::External,
                groups: Vec::new(),
            },
        ),
        (None, Some(sc)) => (sc.class_names, sc.provenance),
        (None, None) => {
            return Err(TpsError::Manifest(format!(
                "no class names for {}: pass a manifest or provide {}",
                path.display(),
                side.display()
            )))
        }
    };
    PrototypeSet::new(names, mat, prov)
}
