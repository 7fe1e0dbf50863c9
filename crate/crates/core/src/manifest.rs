//! Dataset manifests: UTF-8 lines of `utterance_id<TAB>vten_path<TAB>transcript`.
//! Relative paths resolve against the manifest's own directory.

use crate::error::{Error, Result};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub transcript: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "manifest {}:{}: expected 3 tab-separated fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Data(format!(
                "manifest {}: duplicate utterance id {id:?}",
                path.display()
            )));
        }
        let p = PathBuf::from(fields[1]);
        let p = if p.is_absolute() { p } else { base.join(p) };
        entries.push(ManifestEntry {
            id,
            path: p,
            transcript: fields[2].to_string(),
        });
    }
    Ok(entries)
}

/// Write entries as given; paths are emitted verbatim.
pub fn write_manifest(path: &Path, entries: &[(String, String, String)]) -> Result<()> {
    let mut out = String::new();
    for (id, p, transcript) in entries {
        out.push_str(id);
        out.push('\t');
        out.push_str(p);
        out.push('\t');
        out.push_str(transcript);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_relative_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("train.tsv");
        write_manifest(
            &mpath,
            &[("u1".into(), "vten/u1.vten".into(), "abc".into())],
        )
        .unwrap();
        let entries = read_manifest(&mpath).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].path, dir.path().join("vten/u1.vten"));
        assert_eq!(entries[0].transcript, "abc");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.tsv");
        std::fs::write(&mpath, "u1\ta.vten\tx\nu1\tb.vten\ty\n").unwrap();
        assert!(read_manifest(&mpath).is_err());
    }

    #[test]
    fn malformed_line_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("m.tsv");
        std::fs::write(&mpath, "u1\ta.vten\n").unwrap();
        assert!(read_manifest(&mpath).is_err());
    }
}
