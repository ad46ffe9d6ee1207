//! Data directories: the output of `synth`, or any directory of `.rsnp`
//! files (each one a training set named after its file stem).

use std::fs;
use std::path::{Path, PathBuf};

use rscope_core::library::Dataset;
use rscope_core::snapshots::{read_snapshot, write_snapshot, SnapshotMatrix};
use rscope_core::synthgen::{gen_suite, SuiteConfig};
use rscope_core::{Error, Execution, Result};
use serde::{Deserialize, Serialize};

pub const DATA_MANIFEST: &str = "manifest.toml";
pub const SUITE_COPY: &str = "suite.toml";
const DATA_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Library,
    HeldOut,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetEntry {
    pub label: String,
    pub parameter: f64,
    pub role: Role,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub format_version: u32,
    pub rank_policy: Option<String>,
    pub j_max: usize,
    pub sets: Vec<SetEntry>,
}

pub struct DataDir {
    root: PathBuf,
    pub manifest: DataManifest,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Generates the suite and writes every train/test split plus a manifest.
pub fn write_suite(cfg: &SuiteConfig, out: &Path, exec: Execution) -> Result<DataManifest> {
    let mut sets = Vec::new();
    for (role, specs) in [
        (Role::Library, cfg.library_specs()?),
        (Role::HeldOut, cfg.held_out_specs()?),
    ] {
        if specs.is_empty() {
            continue;
        }
        let prefix = match role {
            Role::Library => "",
            Role::HeldOut => "held_out/",
        };
        let suite = gen_suite(&specs, cfg.train_fraction, cfg.j_max, exec)?;
        for (train, test) in suite.train.iter().zip(&suite.test) {
            let label = &train.label;
            check_label(label)?;
            let train_path = PathBuf::from(format!("{prefix}train/{label}.rsnp"));
            let test_path = test.as_ref().map(|_| PathBuf::from(format!("{prefix}test/{label}.rsnp")));
            write_set(out, &train_path, &train.snapshots)?;
            if let (Some(p), Some(t)) = (&test_path, test) {
                write_set(out, p, t)?;
            }
            sets.push(SetEntry {
                label: label.clone(),
                parameter: train.parameter,
                role,
                train: train_path,
                test: test_path,
            });
        }
    }
    let manifest = DataManifest {
        format_version: DATA_FORMAT_VERSION,
        rank_policy: Some(cfg.rank_policy.clone()),
        j_max: cfg.j_max,
        sets,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&out.join(DATA_MANIFEST), &text)?;
    write_text(&out.join(SUITE_COPY), &cfg.to_toml())?;
    Ok(manifest)
}

fn check_label(label: &str) -> Result<()> {
    if label.is_empty() || label.contains(['/', '\\']) || label.starts_with('.') {
        return Err(Error::Argument(format!("label {label:?} cannot be used as a file name")));
    }
    Ok(())
}

fn write_set(root: &Path, rel: &Path, snap: &SnapshotMatrix) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_snapshot(&path, snap)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

impl DataDir {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join(DATA_MANIFEST);
        let manifest = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
            let m: DataManifest =
                toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
            if m.format_version != DATA_FORMAT_VERSION {
                return Err(Error::Version {
                    found: m.format_version,
                    supported: DATA_FORMAT_VERSION,
                });
            }
            m
        } else {
            scan_snapshots(root)?
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn sets(&self, role: Role) -> impl Iterator<Item = &SetEntry> {
        self.manifest.sets.iter().filter(move |s| s.role == role)
    }

    pub fn training(&self) -> Result<Vec<Dataset>> {
        self.sets(Role::Library)
            .map(|s| {
                let snap = read_snapshot(self.root.join(&s.train))?.with_label(s.label.clone());
                Ok(Dataset::new(s.label.clone(), s.parameter, snap))
            })
            .collect()
    }

    /// Test sets of the library regimes, or of the held-out regimes.
    pub fn test_sets(&self, held_out: bool) -> Result<Vec<SnapshotMatrix>> {
        let role = if held_out { Role::HeldOut } else { Role::Library };
        let sets: Vec<&SetEntry> = self.sets(role).collect();
        if sets.is_empty() {
            return Err(Error::Argument(format!(
                "{} has no {} test sets",
                self.root.display(),
                if held_out { "held-out" } else { "library" }
            )));
        }
        sets.iter()
            .map(|s| {
                let rel = s
                    .test
                    .as_ref()
                    .ok_or_else(|| Error::Argument(format!("set {:?} has no test data", s.label)))?;
                Ok(read_snapshot(self.root.join(rel))?.with_label(s.label.clone()))
            })
            .collect()
    }
}

/// Treats every `.rsnp` file (sorted by name) as a training set.
fn scan_snapshots(root: &Path) -> Result<DataManifest> {
    let mut files: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rsnp"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Argument(format!(
            "{} has neither a manifest nor .rsnp files",
            root.display()
        )));
    }
    let sets = files
        .iter()
        .map(|p| SetEntry {
            label: p.file_stem().unwrap().to_string_lossy().into_owned(),
            parameter: 0.0,
            role: Role::Library,
            train: PathBuf::from(p.file_name().unwrap()),
            test: None,
        })
        .collect();
    Ok(DataManifest {
        format_version: DATA_FORMAT_VERSION,
        rank_policy: None,
        j_max: 0,
        sets,
    })
}
