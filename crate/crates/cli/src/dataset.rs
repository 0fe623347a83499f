//! On-disk datasets: volume files plus a JSON index.
//!
//! Layout under the dataset root:
//!
//! ```text
//! index.json                     case list, splits, hashes, fingerprint
//! cases/case_000.full.cdnvol     clean full-dose volume
//! cases/case_000.low_1-4.cdnvol  one file per simulated dose level
//! ```
//!
//! Every file is content-hashed at generation time; the dataset fingerprint
//! is a hash over those hashes, so two datasets match iff every voxel does.
//! The loader re-verifies hashes, which makes silent corruption or a
//! half-overwritten dataset a hard error rather than a quiet metric shift.

use std::fs;
use std::path::{Path, PathBuf};

use cycden_core::phantom::{generate_phantom, simulate_low_dose};
use cycden_core::trainer::TrainCase;
use cycden_core::volume::{load_volume, write_volume};
use cycden_core::{DoseFraction, Error, PhantomSpec, Result, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, Split};

pub const INDEX_FORMAT: &str = "cycden-dataset-v1";

/// Per-case seed spacing; odd so products never collide on multiples.
const CASE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
/// Per-dose-level spacing, so adding a fraction never reshuffles earlier ones.
const DOSE_SALT: u64 = 0xD1B5_4A32_D192_ED03;

/// A stored file plus its content hash, path relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

/// One low-dose realization, keyed by its dose label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRef {
    pub fraction: String,
    pub path: String,
    pub sha256: String,
}

/// One phantom case: geometry, split membership, and its files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub spec: PhantomSpec,
    pub full: FileRef,
    pub low: Vec<LowRef>,
}

impl CaseEntry {
    /// The low-dose file for a given dose label.
    pub fn low_for(&self, label: &str) -> Result<&LowRef> {
        self.low
            .iter()
            .find(|l| l.fraction == label)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "case {} has no dose level {label:?}",
                    self.id
                ))
            })
    }
}

/// The dataset index; everything needed to reload and verify the files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub seed: u64,
    pub counts_per_unit: f64,
    pub fractions: Vec<DoseFraction>,
    /// Hash over all per-file hashes; identical iff the voxel data is.
    pub fingerprint: String,
    pub cases: Vec<CaseEntry>,
}

impl DatasetIndex {
    /// Cases belonging to `split`, in index order.
    pub fn split_cases(&self, split: Split) -> Vec<&CaseEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    /// The case with the given id.
    pub fn case(&self, id: &str) -> Result<&CaseEntry> {
        self.cases
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown case id {id:?}")))
    }

    /// Resolves `--fraction`: an explicit label, or the only one present.
    pub fn resolve_fraction(&self, flag: Option<&str>) -> Result<DoseFraction> {
        match flag {
            Some(label) => self
                .fractions
                .iter()
                .find(|f| f.label == label)
                .cloned()
                .ok_or_else(|| {
                    let known: Vec<&str> =
                        self.fractions.iter().map(|f| f.label.as_str()).collect();
                    Error::InvalidArgument(format!(
                        "dose level {label:?} not in dataset (has {known:?})"
                    ))
                }),
            None if self.fractions.len() == 1 => Ok(self.fractions[0].clone()),
            None => {
                let known: Vec<&str> =
                    self.fractions.iter().map(|f| f.label.as_str()).collect();
                Err(Error::InvalidArgument(format!(
                    "dataset has several dose levels {known:?}; pass --fraction"
                )))
            }
        }
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Lower-hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Content hash of a file on disk.
pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Dose label made filename-safe: non-alphanumerics collapse to `-`.
pub fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// Hash over all file hashes, in index order.
fn fingerprint_of(cases: &[CaseEntry]) -> String {
    let mut text = String::new();
    for c in cases {
        text.push_str(&c.id);
        text.push(' ');
        text.push_str(&c.full.sha256);
        for l in &c.low {
            text.push(' ');
            text.push_str(&l.sha256);
        }
        text.push('\n');
    }
    sha256_hex(text.as_bytes())
}

/// Generates the dataset under `root`, calling `progress` after each case.
///
/// Deterministic: each case draws from a seed derived from `cfg.seed` and its
/// index, each dose level from a further salt, so neither the case count nor
/// the fraction list perturbs other artifacts.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    root: &Path,
    mut progress: impl FnMut(&CaseEntry),
) -> Result<DatasetIndex> {
    cfg.validate()?;
    let fractions = cfg.parsed_fractions()?;
    fs::create_dir_all(root.join("cases"))?;

    let mut cases = Vec::with_capacity(cfg.n_cases);
    for i in 0..cfg.n_cases {
        let id = format!("case_{i:03}");
        let case_seed = cfg.seed ^ CASE_SALT.wrapping_mul(i as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
        let spec = PhantomSpec::sample(
            cfg.shape,
            cfg.tumors_per_case,
            cfg.tumor_contrast,
            &mut rng,
        );
        let clean = generate_phantom(&spec)?;

        let full_rel = format!("cases/{id}.full.cdnvol");
        write_volume(root.join(&full_rel), &clean)?;
        let full = FileRef {
            sha256: hash_file(&root.join(&full_rel))?,
            path: full_rel,
        };

        let mut low = Vec::with_capacity(fractions.len());
        for (j, fraction) in fractions.iter().enumerate() {
            let mut dose_rng = ChaCha8Rng::seed_from_u64(
                case_seed ^ DOSE_SALT.wrapping_mul(j as u64 + 1),
            );
            let noisy = simulate_low_dose(&clean, fraction, cfg.counts_per_unit, &mut dose_rng)?;
            let rel = format!("cases/{id}.low_{}.cdnvol", sanitize_label(&fraction.label));
            write_volume(root.join(&rel), &noisy)?;
            low.push(LowRef {
                fraction: fraction.label.clone(),
                sha256: hash_file(&root.join(&rel))?,
                path: rel,
            });
        }

        let entry = CaseEntry {
            id,
            split: cfg.split_of(i),
            spec,
            full,
            low,
        };
        progress(&entry);
        cases.push(entry);
    }

    let index = DatasetIndex {
        format: INDEX_FORMAT.to_string(),
        seed: cfg.seed,
        counts_per_unit: cfg.counts_per_unit,
        fractions,
        fingerprint: fingerprint_of(&cases),
        cases,
    };
    write_index(root, &index)?;
    Ok(index)
}

fn write_index(root: &Path, index: &DatasetIndex) -> Result<()> {
    let mut text = serde_json::to_string_pretty(index)
        .map_err(|e| Error::InvalidArgument(format!("index serialization: {e}")))?;
    text.push('\n');
    write_atomic(&root.join("index.json"), text.as_bytes())
}

/// Loads and fully verifies a dataset index: format tag, every file's
/// existence and hash, and the fingerprint itself.
pub fn load_index(root: &Path) -> Result<DatasetIndex> {
    let path = root.join("index.json");
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a dataset (no index.json)",
            root.display()
        )));
    }
    let text = fs::read_to_string(&path)?;
    let index: DatasetIndex = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("index {}: {e}", path.display())))?;
    if index.format != INDEX_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "index {} has format {:?}, expected {INDEX_FORMAT:?}",
            path.display(),
            index.format
        )));
    }
    for c in &index.cases {
        verify_file(root, &c.full.path, &c.full.sha256)?;
        for l in &c.low {
            verify_file(root, &l.path, &l.sha256)?;
        }
    }
    if fingerprint_of(&index.cases) != index.fingerprint {
        return Err(Error::HashMismatch {
            path: path.display().to_string(),
        });
    }
    Ok(index)
}

fn verify_file(root: &Path, rel: &str, want: &str) -> Result<()> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "dataset file {} is missing",
            path.display()
        )));
    }
    if hash_file(&path)? != want {
        return Err(Error::HashMismatch {
            path: path.display().to_string(),
        });
    }
    Ok(())
}

/// Loads the clean and low-dose volumes of one case.
pub fn load_pair(root: &Path, case: &CaseEntry, label: &str) -> Result<(Volume, Volume)> {
    let full = load_volume(root.join(&case.full.path))?;
    let low = load_volume(root.join(&case.low_for(label)?.path))?;
    Ok((full, low))
}

/// Builds normalized training cases for one split and dose level.
pub fn load_split(
    root: &Path,
    index: &DatasetIndex,
    split: Split,
    label: &str,
) -> Result<Vec<TrainCase>> {
    let mut out = Vec::new();
    for case in index.split_cases(split) {
        let (full, low) = load_pair(root, case, label)?;
        out.push(TrainCase::from_volumes(&case.id, &full, &low)?);
    }
    Ok(out)
}

/// Case id convention: the file stem up to the first `.`.
pub fn id_of_filename(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// All `.cdnvol` files in a directory as `(case id, path)`, sorted by id.
pub fn scan_volume_dir(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_vol = path.extension().and_then(|e| e.to_str()) == Some("cdnvol");
        if !path.is_file() || !is_vol {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let id = id_of_filename(name).to_string();
        if out.iter().any(|(other, _)| *other == id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate case id {id:?} in {}",
                dir.display()
            )));
        }
        out.push((id, path));
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .cdnvol files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_cfg() -> DatasetConfig {
        DatasetConfig {
            n_cases: 3,
            n_val: 1,
            n_test: 1,
            shape: [10, 16, 16],
            fractions: vec!["1/4".into()],
            tumors_per_case: 1,
            seed: 11,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn generate_load_round_trip_and_fingerprint_stability() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let cfg = tiny_cfg();
        let a = generate_dataset(&cfg, dir_a.path(), |_| {}).unwrap();
        let b = generate_dataset(&cfg, dir_b.path(), |_| {}).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint, "same seed, same bytes");

        let loaded = load_index(dir_a.path()).unwrap();
        assert_eq!(loaded, a, "loader returns what generate wrote");
        assert_eq!(loaded.split_cases(Split::Train).len(), 1);
        assert_eq!(loaded.split_cases(Split::Test).len(), 1);

        let cases = load_split(dir_a.path(), &loaded, Split::Train, "1/4").unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].shape(), (10, 16, 16));
    }

    #[test]
    fn different_seed_changes_fingerprint() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        let cfg = tiny_cfg();
        let other = DatasetConfig { seed: 12, ..cfg.clone() };
        let a = generate_dataset(&cfg, dir_a.path(), |_| {}).unwrap();
        let b = generate_dataset(&other, dir_b.path(), |_| {}).unwrap();
        assert_ne!(a.fingerprint, b.fingerprint);
    }

    #[test]
    fn tampered_file_is_detected_on_load() {
        let dir = tempdir().unwrap();
        let cfg = tiny_cfg();
        let index = generate_dataset(&cfg, dir.path(), |_| {}).unwrap();
        let victim = dir.path().join(&index.cases[0].full.path);
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        fs::write(&victim, bytes).unwrap();
        match load_index(dir.path()) {
            Err(Error::HashMismatch { .. }) => {}
            other => panic!("expected hash mismatch, got {other:?}"),
        }
    }

    #[test]
    fn filename_ids_and_labels_are_stable() {
        assert_eq!(id_of_filename("case_004.low_1-4.cdnvol"), "case_004");
        assert_eq!(sanitize_label("1/4"), "1-4");
        assert_eq!(sanitize_label("full"), "full");
    }
}
