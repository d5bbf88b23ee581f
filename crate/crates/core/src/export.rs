//! Artifact writing and content hashing.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: impl AsRef<Path>) -> Result<ArtifactHash> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok(ArtifactHash {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: hex::encode(hasher.finalize()),
        bytes: total,
    })
}

/// Creates `dir/name`, hands a buffered writer to `write`, and flushes.
pub fn write_csv_artifact<F>(dir: &Path, name: &str, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> csv::Result<()>,
{
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    write(&mut out).map_err(|source| Error::Csv {
        context: path.display().to_string(),
        source,
    })?;
    out.flush().map_err(|e| Error::io(&path, e))
}

pub fn write_json_artifact<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let mut raw = serde_json::to_vec_pretty(value)?;
    raw.push(b'\n');
    std::fs::write(&path, raw).map_err(|e| Error::io(&path, e))
}

/// One row per chest X-ray study: the study's mean image vector beside the
/// closest radiology report of the same admission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppendixRow {
    pub subject_id: i64,
    pub study_id: i64,
    pub note_id: Option<String>,
    pub text_embed: Option<String>,
    pub img_embed: Option<String>,
}

pub fn write_appendix_csv<W: Write>(rows: &[AppendixRow], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(out);
    w.write_record(["subject_id", "study_id", "note_id", "text_embed", "img_embed"])?;
    for r in rows {
        w.write_record([
            r.subject_id.to_string().as_str(),
            &r.study_id.to_string(),
            r.note_id.as_deref().unwrap_or(""),
            r.text_embed.as_deref().unwrap_or(""),
            r.img_embed.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn file_hash_matches_bytes() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.csv"), b"abc").unwrap();
        let h = hash_file(dir.path().join("x.csv")).unwrap();
        assert_eq!(h.name, "x.csv");
        assert_eq!(h.bytes, 3);
        assert_eq!(h.sha256, sha256_hex(b"abc"));
    }
}
