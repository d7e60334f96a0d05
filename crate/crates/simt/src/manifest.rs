//! Stage manifests: content checksums linking every artifact to its inputs.
//!
//! Each stage writes `manifests/<stage>.json` recording the SHA-256 of the
//! files it read and wrote. Before a stage runs, its inputs are checked
//! transitively: each input must exist (else a missing-dependency error),
//! must still match the checksum its producer recorded, and the producer's
//! own inputs must still match what the producer saw (else an integrity
//! error). Paths are stored relative to the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files::{sha256_bytes, sha256_file, write_text};

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    /// Checksum of the stage's settings as canonical JSON.
    pub settings_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn rel(run_dir: &Path, path: &Path) -> String {
    path.strip_prefix(run_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn digest(run_dir: &Path, path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: rel(run_dir, path),
        sha256: sha256_file(path)?,
    })
}

pub fn manifest_path(run_dir: &Path, stage: &str) -> PathBuf {
    run_dir.join(MANIFEST_DIR).join(format!("{stage}.json"))
}

impl Manifest {
    /// Digests `inputs` and `outputs` as they are on disk now.
    pub fn build<S: Serialize>(
        run_dir: &Path,
        stage: &str,
        seed: u64,
        settings: &S,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Self> {
        let settings = serde_json::to_vec(settings).map_err(|e| Error::Other(e.to_string()))?;
        Ok(Manifest {
            stage: stage.to_owned(),
            seed,
            settings_sha256: sha256_bytes(&settings),
            inputs: inputs.iter().map(|p| digest(run_dir, p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| digest(run_dir, p)).collect::<Result<_>>()?,
        })
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Other(e.to_string()))?;
        write_text(&manifest_path(run_dir, &self.stage), &(text + "\n"))
    }
}

fn load_all(run_dir: &Path) -> Result<Vec<Manifest>> {
    let dir = run_dir.join(MANIFEST_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Integrity(format!("unreadable manifest {}: {e}", p.display())))
        })
        .collect()
}

/// Checks that every input exists and that the chain of stages producing it
/// is consistent with the files currently on disk.
pub fn verify_inputs(run_dir: &Path, inputs: &[PathBuf]) -> Result<()> {
    for p in inputs {
        if !p.exists() {
            return Err(Error::Missing(p.clone()));
        }
    }
    let manifests = load_all(run_dir)?;
    let mut producer: BTreeMap<&str, &Manifest> = BTreeMap::new();
    for m in &manifests {
        for o in &m.outputs {
            producer.insert(o.path.as_str(), m);
        }
    }
    let mut hashes: BTreeMap<String, String> = BTreeMap::new();
    let mut current = |path: &str| -> Result<String> {
        if let Some(h) = hashes.get(path) {
            return Ok(h.clone());
        }
        let h = sha256_file(&run_dir.join(path))?;
        hashes.insert(path.to_owned(), h.clone());
        Ok(h)
    };
    let mut stack: Vec<String> = inputs.iter().map(|p| rel(run_dir, p)).collect();
    let mut checked = std::collections::BTreeSet::new();
    while let Some(path) = stack.pop() {
        if !checked.insert(path.clone()) {
            continue;
        }
        let m = producer
            .get(path.as_str())
            .ok_or_else(|| Error::Integrity(format!("`{path}` has no manifest recording how it was produced")))?;
        let recorded = m.outputs.iter().find(|o| o.path == path).expect("indexed above");
        if current(&path)? != recorded.sha256 {
            return Err(Error::Integrity(format!(
                "`{path}` was modified after stage `{}` produced it",
                m.stage
            )));
        }
        for inp in &m.inputs {
            if current(&inp.path)? != inp.sha256 {
                return Err(Error::Integrity(format!(
                    "stale dependency: `{}` changed after stage `{}` consumed it; rerun that stage",
                    inp.path, m.stage
                )));
            }
            stack.push(inp.path.clone());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_stale_and_tampered_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path();
        let a = run.join("a.txt");
        let b = run.join("b.txt");
        write_text(&a, "one").unwrap();
        Manifest::build(run, "make_a", 1, &(), &[], std::slice::from_ref(&a))
            .unwrap()
            .save(run)
            .unwrap();
        write_text(&b, "two").unwrap();
        Manifest::build(
            run,
            "make_b",
            1,
            &(),
            std::slice::from_ref(&a),
            std::slice::from_ref(&b),
        )
        .unwrap()
        .save(run)
        .unwrap();
        verify_inputs(run, std::slice::from_ref(&b)).unwrap();

        // Regenerating `a` with a new manifest leaves `b` stale.
        write_text(&a, "uno").unwrap();
        Manifest::build(run, "make_a", 1, &(), &[], std::slice::from_ref(&a))
            .unwrap()
            .save(run)
            .unwrap();
        let e = verify_inputs(run, std::slice::from_ref(&b)).unwrap_err();
        assert_eq!(e.exit_code(), 4, "{e}");

        // Editing `b` behind the manifest's back is caught directly.
        Manifest::build(
            run,
            "make_b",
            1,
            &(),
            std::slice::from_ref(&a),
            std::slice::from_ref(&b),
        )
        .unwrap()
        .save(run)
        .unwrap();
        write_text(&b, "deux").unwrap();
        assert_eq!(verify_inputs(run, std::slice::from_ref(&b)).unwrap_err().exit_code(), 4);

        fs::remove_file(&b).unwrap();
        assert_eq!(verify_inputs(run, &[b]).unwrap_err().exit_code(), 3);
    }
}
