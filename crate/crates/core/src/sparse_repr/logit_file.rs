//! The "LLGT" binary logit file and its tab-separated manifest.
//!
//! Layout: a 16-byte header (magic `LLGT`, version u16 = 1, reserved u16,
//! rows u32, vocab u32) followed by `rows * vocab` little-endian 32-bit
//! floats, row-major. One file holds one sample; a manifest binds sample ids
//! to files, one `id<TAB>path` per line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sparse_repr::LogitMatrix;

const MAGIC: &[u8; 4] = b"LLGT";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

pub fn write_logit_file(path: &Path, logits: &LogitMatrix) -> Result<()> {
    let rows = logits.rows();
    let vocab = logits.vocab_size();
    let mut bytes = Vec::with_capacity(HEADER_LEN + rows * vocab * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&0u16.to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(vocab as u32).to_le_bytes());
    for v in logits.as_matrix().data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_logit_file(path: &Path) -> Result<LogitMatrix> {
    let bytes = fs::read(path)?;
    parse_logit_bytes(&bytes)
}

fn parse_logit_bytes(bytes: &[u8]) -> Result<LogitMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len(), "truncated logit header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected LLGT"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let vocab = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + rows * vocab * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected),
            format!(
                "payload is {} bytes, header implies {}",
                bytes.len() - HEADER_LEN,
                expected - HEADER_LEN
            ),
        ));
    }
    let mut values = Vec::with_capacity(rows * vocab);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    LogitMatrix::new(rows, vocab, values)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.id);
        out.push('\t');
        out.push_str(&e.path);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a manifest. Paths are kept verbatim; callers resolve relative paths
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, file) = line.split_once('\t').ok_or_else(|| {
            Error::InvalidInput(format!(
                "manifest line {} has no tab separator: {line:?}",
                lineno + 1
            ))
        })?;
        entries.push(ManifestEntry {
            id: id.to_string(),
            path: file.to_string(),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lexipse-llgt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn logit_file_round_trips() {
        let logits = LogitMatrix::from_rows(&[vec![1.0, -2.5, 0.0], vec![0.25, 3.0, -1.0]]).unwrap();
        let path = tmp("roundtrip.llgt");
        write_logit_file(&path, &logits).unwrap();
        let back = read_logit_file(&path).unwrap();
        assert_eq!(back.rows(), 2);
        assert_eq!(back.vocab_size(), 3);
        // f32 carries these values exactly.
        assert_eq!(back.as_matrix().data(), logits.as_matrix().data());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmp("badmagic.llgt");
        let logits = LogitMatrix::from_rows(&[vec![1.0]]).unwrap();
        write_logit_file(&path, &logits).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = read_logit_file(&path).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let path = tmp("trunc.llgt");
        let logits = LogitMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        write_logit_file(&path, &logits).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_logit_file(&path).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn manifest_round_trips_and_rejects_missing_tab() {
        let path = tmp("manifest.tsv");
        let entries = vec![
            ManifestEntry {
                id: "a".into(),
                path: "a.llgt".into(),
            },
            ManifestEntry {
                id: "b".into(),
                path: "sub/b.llgt".into(),
            },
        ];
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);

        std::fs::write(&path, "no-tab-here\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
