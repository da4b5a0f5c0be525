//! The region store: verified (ellipsoid, feedback law) pairs scanned by the
//! online controller, and its JSON file format.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every number bit for bit. Each entry carries a
//! SHA-256 checksum of its payload; any edit to `E`, `x_c`, `u_star`,
//! `A_tilde` or the verification record is caught on load.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::atlas::{one_based, ActiveSetTolerances, FeedbackClass};
use crate::ellipsoid::{Ellipsoid, FittedEllipsoid, LAW_TOLERANCE};
use crate::error::{check_dim, Error, Result};
use crate::model::{hex_digest, SystemModel};

/// Samples drawn from each ellipsoid of a pair when looking for overlaps.
pub const OVERLAP_SAMPLES: usize = 2000;
const OVERLAP_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub seed: u64,
    pub n_samples: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    pub ellipsoid: Ellipsoid,
    pub u_star: DVector<f64>,
    /// Saturated subset, 0-based.
    pub a_tilde: Vec<usize>,
    pub verification: Verification,
}

impl StoreEntry {
    pub fn from_fit(class: &FeedbackClass, fit: &FittedEllipsoid) -> Self {
        Self {
            ellipsoid: fit.ellipsoid.clone(),
            u_star: DVector::from_column_slice(&class.u_star),
            a_tilde: class.a_tilde.clone(),
            verification: Verification {
                seed: fit.report.seed,
                n_samples: fit.report.samples_tested,
                violations: fit.report.violations,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreTolerances {
    pub eps_act: f64,
    pub eps_lambda: f64,
    /// Largest input deviation counted as the same law.
    pub law_tolerance: f64,
}

impl From<ActiveSetTolerances> for StoreTolerances {
    fn from(t: ActiveSetTolerances) -> Self {
        Self {
            eps_act: t.eps_act,
            eps_lambda: t.eps_lambda,
            law_tolerance: LAW_TOLERANCE,
        }
    }
}

impl Default for StoreTolerances {
    fn default() -> Self {
        ActiveSetTolerances::default().into()
    }
}

/// Immutable once built; share it freely between controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionStore {
    pub model_hash: String,
    pub entries: Vec<StoreEntry>,
    pub tolerances: StoreTolerances,
    /// Free-form creation record (configuration, seeds, versions).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl RegionStore {
    /// A store with no entries: the controller then always solves the OCP.
    pub fn empty(model: &SystemModel) -> Self {
        Self {
            model_hash: model.hash().to_string(),
            entries: Vec::new(),
            tolerances: StoreTolerances::default(),
            metadata: BTreeMap::new(),
        }
    }

    /// Validates and assembles a store for `model`.
    pub fn build(
        model: &SystemModel,
        entries: Vec<StoreEntry>,
        tolerances: StoreTolerances,
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        let store = Self {
            model_hash: model.hash().to_string(),
            entries,
            tolerances,
            metadata,
        };
        store.validate(model)?;
        Ok(store)
    }

    /// Entries in class order, then fit order within a class.
    pub fn from_fits(
        model: &SystemModel,
        fits: &[(FeedbackClass, Vec<FittedEllipsoid>)],
        tolerances: StoreTolerances,
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        let entries = fits
            .iter()
            .flat_map(|(class, fitted)| fitted.iter().map(move |f| StoreEntry::from_fit(class, f)))
            .collect();
        Self::build(model, entries, tolerances, metadata)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the first entry whose ellipsoid contains `x`.
    pub fn lookup(&self, x: &[f64]) -> Option<usize> {
        self.entries.iter().position(|e| e.ellipsoid.contains(x))
    }

    /// Model hash, dimensions, verification records and pairwise overlap of
    /// entries with different laws.
    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        if self.model_hash != model.hash() {
            return Err(Error::ModelHashMismatch {
                stored: self.model_hash.clone(),
                actual: model.hash().to_string(),
            });
        }
        let (n, m, q_u) = (model.state_dim(), model.input_dim(), model.input_rows());
        for (k, entry) in self.entries.iter().enumerate() {
            check_dim("store ellipsoid", n, entry.ellipsoid.dim())?;
            check_dim("store law", m, entry.u_star.len())?;
            if !model.input_set.contains(&entry.u_star, self.tolerances.law_tolerance) {
                return Err(Error::InvalidStore(format!("entry {k}: law outside the input set")));
            }
            if entry.a_tilde.iter().any(|&i| i >= q_u) {
                return Err(Error::InvalidStore(format!("entry {k}: A_tilde row out of range")));
            }
            let v = entry.verification;
            if v.n_samples == 0 || v.violations != 0 {
                return Err(Error::InvalidStore(format!("entry {k} is not verified")));
            }
        }
        for i in 0..self.entries.len() {
            for j in i + 1..self.entries.len() {
                let (a, b) = (&self.entries[i], &self.entries[j]);
                if (&a.u_star - &b.u_star).amax() <= self.tolerances.law_tolerance {
                    continue;
                }
                if overlap_by_sampling(&a.ellipsoid, &b.ellipsoid, OVERLAP_SAMPLES) {
                    return Err(Error::InvalidStore(format!(
                        "entries {i} and {j} overlap but carry different laws"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = StoreFile {
            model_hash: self.model_hash.clone(),
            tolerances: self.tolerances,
            metadata: self.metadata.clone(),
            entries: self.entries.iter().map(EntryFile::from_entry).collect(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        Ok(text)
    }

    /// Parses, checks every entry checksum, then validates against `model`.
    pub fn from_json(text: &str, model: &SystemModel) -> Result<Self> {
        let file: StoreFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidStore(format!("malformed store file: {e}")))?;
        let mut entries = Vec::with_capacity(file.entries.len());
        for (k, raw) in file.entries.into_iter().enumerate() {
            if raw.checksum != raw.payload_digest() {
                return Err(Error::InvalidStore(format!("entry {k}: checksum mismatch")));
            }
            entries.push(raw.into_entry().map_err(|e| Error::InvalidStore(format!("entry {k}: {e}")))?);
        }
        let store = Self {
            model_hash: file.model_hash,
            entries,
            tolerances: file.tolerances,
            metadata: file.metadata,
        };
        store.validate(model)?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path, model: &SystemModel) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, model)
    }
}

/// Deterministic sampling test: centers first, then `n` uniform samples of
/// each ellipsoid against the other.
pub fn overlap_by_sampling(a: &Ellipsoid, b: &Ellipsoid, n: usize) -> bool {
    if a.contains(b.center.as_slice()) || b.contains(a.center.as_slice()) {
        return true;
    }
    let hits = |from: &Ellipsoid, into: &Ellipsoid| {
        from.sample(n, OVERLAP_SEED)
            .iter()
            .any(|x| into.contains(x.as_slice()))
    };
    hits(a, b) || hits(b, a)
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    model_hash: String,
    tolerances: StoreTolerances,
    metadata: BTreeMap<String, serde_json::Value>,
    entries: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    #[serde(rename = "E")]
    e: Vec<Vec<f64>>,
    x_c: Vec<f64>,
    u_star: Vec<f64>,
    #[serde(rename = "A_tilde", with = "one_based")]
    a_tilde: Vec<usize>,
    verification: Verification,
    checksum: String,
}

/// The checksummed part of an entry, in file form.
#[derive(Serialize)]
struct Payload<'a> {
    #[serde(rename = "E")]
    e: &'a [Vec<f64>],
    x_c: &'a [f64],
    u_star: &'a [f64],
    #[serde(rename = "A_tilde", with = "one_based")]
    a_tilde: &'a [usize],
    verification: &'a Verification,
}

impl EntryFile {
    fn from_entry(entry: &StoreEntry) -> Self {
        let mut file = Self {
            e: entry
                .ellipsoid
                .e
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            x_c: entry.ellipsoid.center.as_slice().to_vec(),
            u_star: entry.u_star.as_slice().to_vec(),
            a_tilde: entry.a_tilde.clone(),
            verification: entry.verification,
            checksum: String::new(),
        };
        file.checksum = file.payload_digest();
        file
    }

    fn payload_digest(&self) -> String {
        let payload = Payload {
            e: &self.e,
            x_c: &self.x_c,
            u_star: &self.u_star,
            a_tilde: &self.a_tilde,
            verification: &self.verification,
        };
        hex_digest(&serde_json::to_vec(&payload).expect("payload serializes"))
    }

    fn into_entry(self) -> Result<StoreEntry> {
        let n = self.x_c.len();
        if self.e.len() != n || self.e.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidStore("E must be square and match x_c".into()));
        }
        let e = nalgebra::DMatrix::from_fn(n, n, |i, j| self.e[i][j]);
        let ellipsoid = Ellipsoid::new(e, DVector::from_vec(self.x_c))
            .map_err(|err| Error::InvalidStore(format!("bad ellipsoid: {err}")))?;
        Ok(StoreEntry {
            ellipsoid,
            u_star: DVector::from_vec(self.u_star),
            a_tilde: self.a_tilde,
            verification: self.verification,
        })
    }
}
